#pragma once

// Synthetic bags with a salient/background mixture. A bag of class s holds
// ceil(rho*N) salient rows drawn from Normal(mu_s, sigma_w^2 I) followed by
// background rows from the shared Normal(0, sigma_b^2 I). Salient rows always
// come first; every aggregator is permutation invariant, so the order only
// matters to tests that need to know which rows are salient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "milengine/data/bag.hpp"
#include "milengine/data/manifest.hpp"
#include "milengine/errors.hpp"
#include "milengine/random.hpp"

namespace milengine::data {

struct SynthSpec {
  std::size_t num_classes = 6;
  std::size_t slides_per_class = 30;
  std::size_t dim = 64;
  std::size_t min_instances = 16;
  std::size_t max_instances = 64;
  double salient_fraction = 0.3;
  double sigma_within = 0.5;
  double sigma_background = 1.0;
  // Centroid coordinates are drawn from Normal(0, centroid_scale^2).
  double centroid_scale = 1.0;
  std::uint64_t seed = 0;
};

inline void validate(const SynthSpec& s) {
  if (s.num_classes < 2) throw ConfigError("synth: need at least 2 classes");
  if (s.slides_per_class < 1) throw ConfigError("synth: slides_per_class must be positive");
  if (s.dim < 1) throw ConfigError("synth: dim must be positive");
  if (s.min_instances < 1 || s.max_instances < s.min_instances)
    throw ConfigError("synth: need 1 <= min_instances <= max_instances");
  if (!(s.salient_fraction > 0.0 && s.salient_fraction <= 1.0))
    throw ConfigError("synth: salient_fraction must lie in (0, 1]");
  if (!(s.sigma_within >= 0.0) || !(s.sigma_background >= 0.0) || !(s.centroid_scale > 0.0))
    throw ConfigError("synth: noise scales must be non-negative and centroid_scale positive");
}

inline std::size_t salient_count(double salient_fraction, std::size_t n) {
  // The small slack keeps e.g. 0.3*10 from rounding up to 4.
  const auto k = static_cast<std::size_t>(std::ceil(salient_fraction * static_cast<double>(n) - 1e-9));
  return std::min(std::max<std::size_t>(k, 1), n);
}

inline std::string synth_class_name(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class%02zu", c);
  return buf;
}

inline std::string synth_slide_id(std::size_t c, std::size_t j) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "c%02zu_s%04zu", c, j);
  return buf;
}

struct SynthSlide {
  EmbeddingBag bag;
  std::size_t label = 0;
  std::string center;
  std::size_t salient = 0;  // rows [0, salient) are salient
};

struct SynthData {
  std::vector<std::string> classes;
  std::vector<std::vector<double>> centroids;  // num_classes x dim
  std::vector<SynthSlide> slides;              // class-major order
};

inline std::vector<std::vector<double>> synth_centroids(const SynthSpec& spec) {
  Rng rng(mix_seed(spec.seed, 0));
  std::vector<std::vector<double>> mu(spec.num_classes, std::vector<double>(spec.dim));
  for (auto& row : mu)
    for (auto& v : row) v = rng.normal(0.0, spec.centroid_scale);
  return mu;
}

// One slide, drawn from its own stream so classes can be generated independently.
inline SynthSlide synth_slide(const SynthSpec& spec, const std::vector<double>& centroid, std::size_t label,
                              std::size_t index_in_class) {
  const std::uint64_t stream = 1 + label * spec.slides_per_class + index_in_class;
  Rng rng(mix_seed(spec.seed, stream));
  const std::size_t span = spec.max_instances - spec.min_instances + 1;
  const std::size_t n = spec.min_instances + static_cast<std::size_t>(rng.below(span));
  const std::size_t k = salient_count(spec.salient_fraction, n);

  SynthSlide slide;
  slide.label = label;
  slide.center = index_in_class % 2 == 0 ? "A" : "B";
  slide.salient = k;
  slide.bag = EmbeddingBag(synth_slide_id(label, index_in_class), n, spec.dim, std::vector<float>(n * spec.dim));
  for (std::size_t i = 0; i < n; ++i) {
    auto row = slide.bag.row(i);
    for (std::size_t j = 0; j < spec.dim; ++j) {
      const double v = i < k ? centroid[j] + spec.sigma_within * rng.normal() : spec.sigma_background * rng.normal();
      row[j] = static_cast<float>(v);
    }
  }
  return slide;
}

inline SynthData synth_generate(const SynthSpec& spec) {
  validate(spec);
  SynthData out;
  out.centroids = synth_centroids(spec);
  for (std::size_t c = 0; c < spec.num_classes; ++c) out.classes.push_back(synth_class_name(c));
  out.slides.reserve(spec.num_classes * spec.slides_per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c)
    for (std::size_t j = 0; j < spec.slides_per_class; ++j) out.slides.push_back(synth_slide(spec, out.centroids[c], c, j));
  return out;
}

// Writes bags to out_dir/bags/<slide_id>.milb and the manifest to out_dir/manifest.csv.
inline Manifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  const SynthData data = synth_generate(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "bags", ec);
  if (ec) throw IoError("cannot create '" + (out_dir / "bags").string() + "': " + ec.message());

  Manifest m;
  m.classes = data.classes;
  for (const auto& s : data.slides) {
    const auto path = out_dir / "bags" / (s.bag.slide_id + ".milb");
    write_bag(s.bag, path);
    m.records.push_back({s.bag.slide_id, s.label, s.center, path});
  }
  write_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace milengine::data
