#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "milengine/aggregators/abmil.hpp"
#include "milengine/aggregators/bgap.hpp"
#include "milengine/aggregators/simpleshot.hpp"
#include "milengine/aggregators/transmil.hpp"

namespace milengine::agg {

enum class AggregatorKind : std::uint16_t { Bgap = 0, Abmil = 1, Transmil = 2, SimpleShot = 3 };

inline std::string_view to_string(AggregatorKind k) {
  switch (k) {
    case AggregatorKind::Bgap: return "bgap";
    case AggregatorKind::Abmil: return "abmil";
    case AggregatorKind::Transmil: return "transmil";
    case AggregatorKind::SimpleShot: return "simpleshot";
  }
  return "unknown";
}

inline AggregatorKind parse_aggregator(std::string_view name) {
  if (name == "bgap") return AggregatorKind::Bgap;
  if (name == "abmil") return AggregatorKind::Abmil;
  if (name == "transmil") return AggregatorKind::Transmil;
  if (name == "simpleshot") return AggregatorKind::SimpleShot;
  throw UsageError("unknown aggregator '" + std::string(name) + "' (expected simpleshot, bgap, abmil or transmil)");
}

struct ModelHyper {
  std::size_t abmil_hidden = kAbmilHidden;
  TransmilConfig transmil;
};

template <class T>
using ModelImpl = std::variant<BgapModel<T>, AbmilModel<T>, TransmilModel<T>, Prototypes>;

template <class T>
struct Model {
  AggregatorKind kind = AggregatorKind::Bgap;
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  ModelImpl<T> impl;

  bool trainable() const { return kind != AggregatorKind::SimpleShot; }

  std::vector<ParamTensor<T>*> params() {
    return std::visit(
        [](auto& m) -> std::vector<ParamTensor<T>*> {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Prototypes>) return {};
          else return m.params();
        },
        impl);
  }

  // Records a forward pass producing the 1 x S class-score row.
  Var forward(Tape<T>& t, Var x) {
    return std::visit(
        [&](auto& m) -> Var {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Prototypes>)
            throw ConfigError("simpleshot has no differentiable forward pass");
          else return m.forward(t, x);
        },
        impl);
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out{kind, dim, num_classes, Prototypes{}};
    std::visit(
        [&](const auto& m) {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Prototypes>) out.impl = m;
          else out.impl = m.template cast<U>();
        },
        impl);
    return out;
  }
};

// Freshly initialized trainable model. SimpleShot gets empty prototypes that
// fit_prototypes fills in.
template <class T>
Model<T> make_model(AggregatorKind kind, std::size_t dim, std::size_t num_classes, std::uint64_t seed,
                    const ModelHyper& hyper = {}) {
  if (dim == 0 || num_classes < 2) throw ConfigError("model needs dim >= 1 and at least 2 classes");
  Rng rng(mix_seed(seed, 0x1417));
  Model<T> m{kind, dim, num_classes, Prototypes{}};
  switch (kind) {
    case AggregatorKind::Bgap: m.impl = BgapModel<T>::init(dim, num_classes, rng); break;
    case AggregatorKind::Abmil: m.impl = AbmilModel<T>::init(dim, num_classes, rng, hyper.abmil_hidden); break;
    case AggregatorKind::Transmil: m.impl = TransmilModel<T>::init(dim, num_classes, rng, hyper.transmil); break;
    case AggregatorKind::SimpleShot: m.impl = Prototypes{num_classes, dim, {}, false}; break;
  }
  return m;
}

// Total trainable scalar count; prototypes are not trainable.
template <class T>
std::size_t param_count(Model<T>& m) {
  std::size_t total = 0;
  for (auto* p : m.params()) total += p->size();
  return total;
}

template <class T>
std::size_t param_count(MlpHead<T>& head) {
  std::size_t total = 0;
  for (auto* p : head.params()) total += p->size();
  return total;
}

// Attention-pooling parameters only (V, U, w), excluding the classifier head.
template <class T>
std::size_t attention_param_count(const AbmilModel<T>& m) {
  return m.V.size() + m.U.size() + m.w.size();
}

inline std::size_t param_count(const Prototypes&) { return 0; }

// Class scores for a bag, evaluated in double whatever the parameter storage
// type; score many bags with a Model<double> copy to convert only once. For
// SimpleShot these are the cosine similarities.
template <class T>
std::vector<double> predict_scores(Model<T>& m, const data::EmbeddingBag& bag) {
  if (bag.d != m.dim) {
    throw DimensionError("slide '" + bag.slide_id + "' has d=" + std::to_string(bag.d) + ", model expects d=" +
                         std::to_string(m.dim));
  }
  if (auto* p = std::get_if<Prototypes>(&m.impl)) return prototype_similarities(bgap(bag), *p);
  if constexpr (!std::is_same_v<T, double>) {
    auto wide = m.template cast<double>();
    return predict_scores(wide, bag);
  } else {
    Tape<double> t;
    return row_vector(t.value(m.forward(t, t.constant(bag_matrix<double>(bag), "bag"))));
  }
}

template <class T>
std::size_t predict(Model<T>& m, const data::EmbeddingBag& bag) {
  if (auto* p = std::get_if<Prototypes>(&m.impl)) return simpleshot_predict(bag, *p);
  return argmax(predict_scores(m, bag));
}

}  // namespace milengine::agg
