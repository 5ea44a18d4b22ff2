#pragma once

// Exact O(n^2) t-SNE for slide-level embeddings.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "milengine/aggregators/bgap.hpp"
#include "milengine/data/manifest.hpp"
#include "milengine/errors.hpp"
#include "milengine/random.hpp"
#include "milengine/version.hpp"

namespace milengine::tsne {

using Eigen::MatrixXd;

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 1000;
  double learning_rate = 200.0;
  double exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  double min_gain = 0.01;
  std::size_t trace_every = 50;
  std::uint64_t seed = 0;
};

inline void validate(const TsneConfig& c) {
  if (!(c.perplexity >= 2.0)) throw ConfigError("tsne: perplexity must be >= 2");
  if (c.iterations < 1) throw ConfigError("tsne: iterations must be >= 1");
  if (!(c.learning_rate > 0.0)) throw ConfigError("tsne: learning_rate must be positive");
  if (!(c.exaggeration >= 1.0)) throw ConfigError("tsne: exaggeration must be >= 1");
  if (c.trace_every < 1) throw ConfigError("tsne: trace_every must be >= 1");
}

// Requested perplexity, capped at (n-1)/3 so small inputs still get a
// well-posed bandwidth search.
inline double effective_perplexity(std::size_t n, double requested) {
  return std::min(requested, static_cast<double>(n - 1) / 3.0);
}

struct Embedding2D {
  MatrixXd coords;  // n x 2
  std::vector<std::string> slide_ids;
  std::vector<std::string> labels;
  std::vector<std::string> centers;
  double perplexity = 0.0;  // value actually used
  double kl_final = 0.0;
  double kl_post_exaggeration = 0.0;  // KL once early exaggeration ends
  std::vector<std::pair<std::size_t, double>> kl_trace;
  std::vector<std::string> warnings;
};

// BGAP of every bag, in manifest order.
inline MatrixXd slide_embeddings(const std::vector<data::EmbeddingBag>& bags) {
  if (bags.empty()) throw ConfigError("tsne: no slides");
  const std::size_t d = bags.front().d;
  MatrixXd x(static_cast<Eigen::Index>(bags.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (bags[i].d != d) throw DimensionError("slide '" + bags[i].slide_id + "' has a different d");
    const auto mean = agg::bgap(bags[i]);
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = mean[j];
  }
  return x;
}

inline MatrixXd slide_embeddings(const data::Manifest& manifest) { return slide_embeddings(data::load_bags(manifest)); }

inline MatrixXd squared_distances(const MatrixXd& x) {
  const Eigen::Index n = x.rows();
  MatrixXd d = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (x.row(i) - x.row(j)).squaredNorm();
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

struct Affinities {
  MatrixXd P;
  std::vector<double> beta;                 // 1 / (2 sigma_i^2) per point
  std::vector<double> achieved_perplexity;  // per point
  std::vector<std::string> warnings;
};

namespace detail {

// Conditional row p_{.|i} for precision beta; returns the Shannon entropy (nats).
inline double conditional_row(const MatrixXd& d2, Eigen::Index i, double beta, std::vector<double>& row) {
  const Eigen::Index n = d2.rows();
  double dmin = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j)
    if (j != i) dmin = std::min(dmin, d2(i, j));
  double sum = 0.0, weighted = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == i) {
      row[static_cast<std::size_t>(j)] = 0.0;
      continue;
    }
    const double shifted = d2(i, j) - dmin;
    const double p = std::exp(-beta * shifted);
    row[static_cast<std::size_t>(j)] = p;
    sum += p;
    weighted += p * shifted;
  }
  for (auto& p : row) p /= sum;
  return std::log(sum) + beta * weighted / sum;
}

}  // namespace detail

// Per-point Gaussian bandwidths are found by bisection on the entropy; a row
// whose target cannot be matched within 64 steps keeps the closest bandwidth
// seen and records a warning. The result is symmetrized as
// p_ij = (p_{j|i} + p_{i|j}) / (2n).
inline Affinities pairwise_affinities(const MatrixXd& x, double perplexity) {
  const Eigen::Index n = x.rows();
  if (n < 4) throw ConfigError("tsne: need at least 4 points, got " + std::to_string(n));
  if (!(perplexity > 0.0)) throw ConfigError("tsne: perplexity must be positive");
  const MatrixXd d2 = squared_distances(x);
  const double target = std::log(perplexity);
  constexpr double kTol = 1e-5;
  constexpr int kMaxSteps = 64;

  Affinities out;
  out.beta.assign(static_cast<std::size_t>(n), 1.0);
  out.achieved_perplexity.assign(static_cast<std::size_t>(n), 0.0);
  MatrixXd cond = MatrixXd::Zero(n, n);
  std::vector<double> row(static_cast<std::size_t>(n)), best_row(static_cast<std::size_t>(n));
  std::size_t unmatched = 0;

  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double best_gap = std::numeric_limits<double>::infinity(), best_beta = beta, best_h = 0.0;
    bool matched = false;
    for (int step = 0; step < kMaxSteps; ++step) {
      const double h = detail::conditional_row(d2, i, beta, row);
      const double gap = h - target;
      if (std::abs(gap) < best_gap) {
        best_gap = std::abs(gap);
        best_beta = beta;
        best_h = h;
        best_row = row;
      }
      if (std::abs(gap) < kTol) {
        matched = true;
        break;
      }
      if (gap > 0.0) {  // too flat: sharpen
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    if (!matched) ++unmatched;
    out.beta[static_cast<std::size_t>(i)] = best_beta;
    out.achieved_perplexity[static_cast<std::size_t>(i)] = std::exp(best_h);
    for (Eigen::Index j = 0; j < n; ++j) cond(i, j) = best_row[static_cast<std::size_t>(j)];
  }
  if (unmatched > 0) {
    out.warnings.push_back("perplexity " + std::to_string(perplexity) + " not reached for " +
                           std::to_string(unmatched) + " of " + std::to_string(n) +
                           " points; using the closest achieved value");
  }

  out.P.resize(n, n);
  const double denom = 2.0 * static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.P(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double p = (cond(i, j) + cond(j, i)) / denom;
      out.P(i, j) = p;
      out.P(j, i) = p;
    }
  }
  return out;
}

// Student-t kernel 1 / (1 + |y_i - y_j|^2) with a zero diagonal.
inline MatrixXd student_kernel(const MatrixXd& y) {
  const Eigen::Index n = y.rows();
  MatrixXd num = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
      num(i, j) = v;
      num(j, i) = v;
    }
  }
  return num;
}

// KL(P || Q) where Q is the normalized Student-t kernel of y.
inline double kl_divergence(const MatrixXd& P, const MatrixXd& y) {
  const MatrixXd num = student_kernel(y);
  const double z = num.sum();
  double kl = 0.0;
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    for (Eigen::Index j = 0; j < P.cols(); ++j)
      if (i != j && P(i, j) > 0.0) kl += P(i, j) * std::log(P(i, j) / (num(i, j) / z));
  return kl;
}

// dKL/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2).
// `scale` multiplies P (early exaggeration).
inline MatrixXd tsne_gradient(const MatrixXd& P, const MatrixXd& y, double scale = 1.0) {
  const Eigen::Index n = y.rows();
  const MatrixXd num = student_kernel(y);
  const double z = num.sum();
  MatrixXd grad = MatrixXd::Zero(n, y.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double w = (scale * P(i, j) - num(i, j) / z) * num(i, j);
      grad.row(i) += w * (y.row(i) - y.row(j));
    }
  }
  return 4.0 * grad;
}

// Gradient descent with momentum, per-coordinate gains and early exaggeration.
// Metadata fields of the result are left empty; callers attach slide ids.
inline Embedding2D tsne_fit(const MatrixXd& x, const TsneConfig& config = {}) {
  validate(config);
  const Eigen::Index n = x.rows();
  if (n < 4) throw ConfigError("tsne: need at least 4 slides, got " + std::to_string(n));
  if (!x.allFinite()) throw NumericError("tsne: input embeddings contain non-finite values");

  Embedding2D out;
  out.perplexity = effective_perplexity(static_cast<std::size_t>(n), config.perplexity);
  auto aff = pairwise_affinities(x, out.perplexity);
  out.warnings = std::move(aff.warnings);
  const MatrixXd& P = aff.P;

  Rng rng(config.seed);
  MatrixXd y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < 2; ++c) y(i, c) = rng.normal(0.0, 1e-4);
  MatrixXd velocity = MatrixXd::Zero(n, 2);
  MatrixXd gains = MatrixXd::Ones(n, 2);

  for (std::size_t it = 0; it < config.iterations; ++it) {
    if (it == config.exaggeration_iters) out.kl_post_exaggeration = kl_divergence(P, y);
    const double scale = it < config.exaggeration_iters ? config.exaggeration : 1.0;
    const double momentum = it < config.momentum_switch ? config.momentum : config.final_momentum;
    const MatrixXd grad = tsne_gradient(P, y, scale);
    if (!grad.allFinite()) throw NumericError("tsne: non-finite gradient at iteration " + std::to_string(it + 1));

    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool same_sign = (grad(i, c) > 0.0) == (velocity(i, c) > 0.0);
        gains(i, c) = same_sign ? gains(i, c) * 0.8 : gains(i, c) + 0.2;
        gains(i, c) = std::max(gains(i, c), config.min_gain);
        velocity(i, c) = momentum * velocity(i, c) - config.learning_rate * gains(i, c) * grad(i, c);
      }
    }
    y += velocity;
    y.rowwise() -= y.colwise().mean();

    if ((it + 1) % config.trace_every == 0) out.kl_trace.emplace_back(it + 1, kl_divergence(P, y));
  }
  if (config.iterations <= config.exaggeration_iters) out.kl_post_exaggeration = kl_divergence(P, y);
  out.kl_final = kl_divergence(P, y);
  out.coords = std::move(y);
  return out;
}

// Fit over a manifest's slides and attach slide metadata.
inline Embedding2D tsne_slides(const data::Manifest& manifest, const std::vector<data::EmbeddingBag>& bags,
                               const TsneConfig& config = {}) {
  auto emb = tsne_fit(slide_embeddings(bags), config);
  for (const auto& r : manifest.records) {
    emb.slide_ids.push_back(r.slide_id);
    emb.labels.push_back(manifest.classes[r.label]);
    emb.centers.push_back(r.center);
  }
  return emb;
}

inline nlohmann::ordered_json to_json(const TsneConfig& c) {
  return {{"perplexity", c.perplexity},
          {"iterations", c.iterations},
          {"learning_rate", c.learning_rate},
          {"exaggeration", c.exaggeration},
          {"exaggeration_iters", c.exaggeration_iters},
          {"momentum", c.momentum},
          {"final_momentum", c.final_momentum},
          {"momentum_switch", c.momentum_switch},
          {"seed", c.seed}};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& tsv) {
  auto p = tsv;
  p += ".json";
  return p;
}

// Tab-separated `slide_id x y label center` with 9 significant digits, plus
// `<path>.json` holding the config, KL values and warnings.
inline void export_plot_data(const Embedding2D& emb, const TsneConfig& config, const std::filesystem::path& path) {
  const auto n = static_cast<std::size_t>(emb.coords.rows());
  if (emb.slide_ids.size() != n || emb.labels.size() != n || emb.centers.size() != n)
    throw ConfigError("tsne: embedding metadata does not match the coordinate count");
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "slide_id\tx\ty\tlabel\tcenter\n";
  char buf[64];
  for (std::size_t i = 0; i < n; ++i) {
    out << emb.slide_ids[i];
    for (Eigen::Index c = 0; c < 2; ++c) {
      std::snprintf(buf, sizeof buf, "\t%.9g", emb.coords(static_cast<Eigen::Index>(i), c));
      out << buf;
    }
    out << '\t' << emb.labels[i] << '\t' << emb.centers[i] << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");

  nlohmann::ordered_json side;
  side["engine_version"] = kEngineVersion;
  side["config"] = to_json(config);
  side["perplexity_used"] = emb.perplexity;
  side["points"] = n;
  side["kl_post_exaggeration"] = emb.kl_post_exaggeration;
  side["kl_final"] = emb.kl_final;
  auto trace = nlohmann::ordered_json::array();
  for (const auto& [it, kl] : emb.kl_trace) trace.push_back({{"iteration", it}, {"kl", kl}});
  side["kl_trace"] = trace;
  side["warnings"] = emb.warnings;
  const auto side_path = sidecar_path(path);
  std::ofstream js(side_path, std::ios::binary);
  if (!js) throw IoError("cannot write '" + side_path.string() + "'");
  js << side.dump(2) << '\n';
}

struct PlotRow {
  std::string slide_id;
  double x = 0.0, y = 0.0;
  std::string label, center;
};

// Reads back a file written by export_plot_data.
inline std::vector<PlotRow> read_plot_data(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "slide_id\tx\ty\tlabel\tcenter") throw ParseError("unexpected plot-data header", 1);
  std::vector<PlotRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      f.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (f.size() != 5) throw ParseError("expected 5 tab-separated fields", lineno);
    try {
      rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), f[3], f[4]});
    } catch (const std::exception&) {
      throw ParseError("bad coordinate", lineno);
    }
  }
  return rows;
}

}  // namespace milengine::tsne
