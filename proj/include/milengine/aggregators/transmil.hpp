#pragma once

// Transformer aggregator over a bag, without positional information:
//
//   H0 = [cls ; X Wp + bp]                                   (N+1) x m
//   for each layer:
//     H = H + MHA(LN1(H))        exact softmax attention, `heads` heads
//     H = H + FF(LN2(H))         m -> 2m (GELU) -> m
//   Z  = LN_final(H[0])                                        class-token readout
//
// No Nystrom approximation and no positional encoding, so the output is
// invariant to the order of the bag's rows.

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "milengine/aggregators/common.hpp"

namespace milengine::agg {

struct TransmilConfig {
  std::size_t width = 256;  // m
  std::size_t layers = 2;   // L
  std::size_t heads = 4;    // H
};

template <class T>
struct TransmilLayer {
  ParamTensor<T> ln1_g, ln1_b;
  ParamTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  ParamTensor<T> ln2_g, ln2_b;
  ParamTensor<T> ff1_w, ff1_b, ff2_w, ff2_b;

  static TransmilLayer init(std::size_t m, std::size_t index, Rng& rng) {
    const std::string p = "transmil.layer" + std::to_string(index) + ".";
    return {ones<T>(p + "ln1.g", 1, m),        zeros<T>(p + "ln1.b", 1, m),
            weight<T>(p + "q.w", m, m, rng),   zeros<T>(p + "q.b", 1, m),
            weight<T>(p + "k.w", m, m, rng),   zeros<T>(p + "k.b", 1, m),
            weight<T>(p + "v.w", m, m, rng),   zeros<T>(p + "v.b", 1, m),
            weight<T>(p + "o.w", m, m, rng),   zeros<T>(p + "o.b", 1, m),
            ones<T>(p + "ln2.g", 1, m),        zeros<T>(p + "ln2.b", 1, m),
            weight<T>(p + "ff1.w", m, 2 * m, rng), zeros<T>(p + "ff1.b", 1, 2 * m),
            weight<T>(p + "ff2.w", 2 * m, m, rng), zeros<T>(p + "ff2.b", 1, m)};
  }

  std::vector<ParamTensor<T>*> params() {
    return {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
            &ln2_g, &ln2_b, &ff1_w, &ff1_b, &ff2_w, &ff2_b};
  }

  template <class U>
  TransmilLayer<U> cast() const {
    return {ln1_g.template cast<U>(), ln1_b.template cast<U>(), wq.template cast<U>(), bq.template cast<U>(),
            wk.template cast<U>(),    bk.template cast<U>(),    wv.template cast<U>(), bv.template cast<U>(),
            wo.template cast<U>(),    bo.template cast<U>(),    ln2_g.template cast<U>(), ln2_b.template cast<U>(),
            ff1_w.template cast<U>(), ff1_b.template cast<U>(), ff2_w.template cast<U>(), ff2_b.template cast<U>()};
  }

  Var forward(Tape<T>& t, Var h, std::size_t heads, const std::string& p) {
    const auto m = t.value(h).cols();
    const Eigen::Index dk = m / static_cast<Eigen::Index>(heads);
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    Var y = nn::layer_norm(t, h, t.param(ln1_g), t.param(ln1_b), 1e-5, p + "ln1");
    Var q = nn::add_bias(t, nn::matmul(t, y, t.param(wq), p + "q"), t.param(bq), p + "q.bias");
    Var k = nn::add_bias(t, nn::matmul(t, y, t.param(wk), p + "k"), t.param(bk), p + "k.bias");
    Var v = nn::add_bias(t, nn::matmul(t, y, t.param(wv), p + "v"), t.param(bv), p + "v.bias");
    std::vector<Var> per_head;
    per_head.reserve(heads);
    for (std::size_t j = 0; j < heads; ++j) {
      const Eigen::Index off = static_cast<Eigen::Index>(j) * dk;
      const std::string hp = p + "head" + std::to_string(j) + ".";
      Var qj = heads == 1 ? q : nn::slice_cols(t, q, off, dk, hp + "q");
      Var kj = heads == 1 ? k : nn::slice_cols(t, k, off, dk, hp + "k");
      Var vj = heads == 1 ? v : nn::slice_cols(t, v, off, dk, hp + "v");
      Var scores = nn::scale(t, nn::matmul_nt(t, qj, kj, hp + "qk"), inv_sqrt_dk, hp + "scores");
      Var attn = nn::softmax_rows(t, scores, hp + "softmax");
      per_head.push_back(nn::matmul(t, attn, vj, hp + "context"));
    }
    Var context = heads == 1 ? per_head.front() : nn::concat_cols(t, per_head, p + "context");
    Var attn_out = nn::add_bias(t, nn::matmul(t, context, t.param(wo), p + "o"), t.param(bo), p + "o.bias");
    h = nn::add(t, h, attn_out, p + "residual1");

    Var y2 = nn::layer_norm(t, h, t.param(ln2_g), t.param(ln2_b), 1e-5, p + "ln2");
    Var f = nn::add_bias(t, nn::matmul(t, y2, t.param(ff1_w), p + "ff1"), t.param(ff1_b), p + "ff1.bias");
    f = nn::gelu(t, f, p + "gelu");
    f = nn::add_bias(t, nn::matmul(t, f, t.param(ff2_w), p + "ff2"), t.param(ff2_b), p + "ff2.bias");
    return nn::add(t, h, f, p + "residual2");
  }
};

template <class T>
struct TransmilModel {
  TransmilConfig config;
  ParamTensor<T> proj_w, proj_b;  // d x m, 1 x m
  ParamTensor<T> cls;             // 1 x m
  std::vector<TransmilLayer<T>> layers;
  ParamTensor<T> final_g, final_b;
  MlpHead<T> head;

  static TransmilModel init(std::size_t dim, std::size_t num_classes, Rng& rng, TransmilConfig config = {}) {
    if (config.width == 0 || config.heads == 0 || config.width % config.heads != 0) {
      throw ConfigError("transmil: width " + std::to_string(config.width) + " is not divisible by " +
                        std::to_string(config.heads) + " heads");
    }
    TransmilModel m;
    m.config = config;
    m.proj_w = weight<T>("transmil.proj.w", dim, config.width, rng);
    m.proj_b = zeros<T>("transmil.proj.b", 1, config.width);
    m.cls = weight<T>("transmil.cls", 1, config.width, rng);
    for (std::size_t l = 0; l < config.layers; ++l) m.layers.push_back(TransmilLayer<T>::init(config.width, l, rng));
    m.final_g = ones<T>("transmil.final_ln.g", 1, config.width);
    m.final_b = zeros<T>("transmil.final_ln.b", 1, config.width);
    m.head = MlpHead<T>::init(config.width, num_classes, rng);
    return m;
  }

  std::size_t dim() const { return static_cast<std::size_t>(proj_w.value.rows()); }

  Var embed(Tape<T>& t, Var x) {
    if (static_cast<std::size_t>(t.value(x).cols()) != dim()) {
      throw DimensionError("transmil: model expects d=" + std::to_string(dim()) + ", bag has d=" +
                           std::to_string(t.value(x).cols()));
    }
    Var proj = nn::add_bias(t, nn::matmul(t, x, t.param(proj_w), "transmil.proj"), t.param(proj_b), "transmil.proj.bias");
    Var h = nn::concat_rows(t, t.param(cls), proj, "transmil.tokens");
    for (std::size_t l = 0; l < layers.size(); ++l)
      h = layers[l].forward(t, h, config.heads, "transmil.layer" + std::to_string(l) + ".");
    Var token = nn::slice_rows(t, h, 0, 1, "transmil.cls_out");
    return nn::layer_norm(t, token, t.param(final_g), t.param(final_b), 1e-5, "transmil.final_ln");
  }

  Var forward(Tape<T>& t, Var x) { return head.forward(t, embed(t, x)); }

  std::vector<ParamTensor<T>*> params() {
    std::vector<ParamTensor<T>*> out{&proj_w, &proj_b, &cls};
    for (auto& layer : layers)
      for (auto* p : layer.params()) out.push_back(p);
    out.push_back(&final_g);
    out.push_back(&final_b);
    for (auto* p : head.params()) out.push_back(p);
    return out;
  }

  template <class U>
  TransmilModel<U> cast() const {
    TransmilModel<U> m;
    m.config = config;
    m.proj_w = proj_w.template cast<U>();
    m.proj_b = proj_b.template cast<U>();
    m.cls = cls.template cast<U>();
    for (const auto& layer : layers) m.layers.push_back(layer.template cast<U>());
    m.final_g = final_g.template cast<U>();
    m.final_b = final_b.template cast<U>();
    m.head = head.template cast<U>();
    return m;
  }
};

// Evaluated in double whatever the parameter storage type.
template <class T>
std::vector<double> transmil_forward(const data::EmbeddingBag& bag, TransmilModel<T>& model) {
  if constexpr (!std::is_same_v<T, double>) {
    auto wide = model.template cast<double>();
    return transmil_forward(bag, wide);
  } else {
    Tape<double> t;
    return row_vector(t.value(model.embed(t, t.constant(bag_matrix<double>(bag), "bag"))));
  }
}

}  // namespace milengine::agg
