#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "milengine/data/manifest.hpp"
#include "milengine/errors.hpp"
#include "milengine/random.hpp"

namespace milengine::data {

// Seeded stratified k-fold assignment; `assignment[i]` is the test fold of
// manifest record i.
struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> assignment;

  std::vector<std::size_t> test_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == fold) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> train_indices(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != fold) out.push_back(i);
    return out;
  }
};

// Each class's slides are shuffled with a per-class stream and dealt round-robin.
// The deal of class c starts where class c-1 stopped so fold totals stay balanced too.
inline FoldPlan stratified_kfold(const Manifest& manifest, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2 (k=" + std::to_string(k) + " leaves no held-out fold)");
  std::vector<std::vector<std::size_t>> members(manifest.num_classes());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) members[manifest.records[i].label].push_back(i);
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (members[c].size() < k) {
      throw ConfigError("class '" + manifest.classes[c] + "' has " + std::to_string(members[c].size()) +
                        " slides, fewer than k=" + std::to_string(k));
    }
  }

  FoldPlan plan{k, seed, std::vector<std::size_t>(manifest.records.size(), 0)};
  std::size_t offset = 0;
  for (std::size_t c = 0; c < members.size(); ++c) {
    Rng rng(mix_seed(seed, c));
    rng.shuffle(std::span<std::size_t>(members[c]));
    for (std::size_t j = 0; j < members[c].size(); ++j) plan.assignment[members[c][j]] = (offset + j) % k;
    offset = (offset + members[c].size()) % k;
  }
  return plan;
}

}  // namespace milengine::data
