#pragma once

#include <vector>

#include <Eigen/Dense>

#include "milengine/data/synth.hpp"
#include "milengine/train_eval/train.hpp"

namespace fixture {

// Synthetic dataset held in memory; records carry no bag paths.
inline milengine::eval::Dataset synth_in_memory(const milengine::data::SynthSpec& spec,
                                                std::vector<std::size_t>* salient = nullptr) {
  auto gen = milengine::data::synth_generate(spec);
  milengine::eval::Dataset ds;
  ds.manifest.classes = gen.classes;
  for (auto& s : gen.slides) {
    ds.manifest.records.push_back({s.bag.slide_id, s.label, s.center, {}});
    if (salient != nullptr) salient->push_back(s.salient);
    ds.bags.push_back(std::move(s.bag));
  }
  return ds;
}

inline milengine::data::SynthSpec small_spec(std::uint64_t seed = 7) {
  milengine::data::SynthSpec spec;
  spec.num_classes = 3;
  spec.slides_per_class = 10;
  spec.dim = 16;
  spec.min_instances = 8;
  spec.max_instances = 24;
  spec.seed = seed;
  return spec;
}

// Two Gaussian clusters in R^d: the first half around the origin, the second
// shifted by `offset` along every axis. Labels are 0 and 1.
struct Clusters {
  Eigen::MatrixXd x;
  std::vector<int> labels;
};

inline Clusters two_clusters(std::size_t n, std::size_t d, double offset, std::uint64_t seed) {
  milengine::Rng rng(seed);
  Clusters c{Eigen::MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i < n / 2 ? 0 : 1;
    c.labels.push_back(label);
    for (std::size_t j = 0; j < d; ++j)
      c.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rng.normal() + label * offset;
  }
  return c;
}

}  // namespace fixture
