#pragma once

// Trained-model files (little-endian):
//    magic        - "MILM"
//    version      - u16, currently 1
//    kind         - u16 (0 bgap, 1 abmil, 2 transmil, 3 simpleshot)
//    dim, classes - u32, u32
//    hyper count  - u32, followed by that many u32 hyperparameters:
//                     bgap: head width; abmil: attention width, head width;
//                     transmil: width, layers, heads, head width;
//                     simpleshot: normalized flag
//    class names  - u32 count, then per name u32 byte length + UTF-8 bytes
//    tensors      - u32 count, then per tensor u32 rows, u32 cols, rows*cols f32
//                   in parameter declaration order (prototypes for simpleshot)

#include <array>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "milengine/aggregators/model.hpp"
#include "milengine/data/bag.hpp"

namespace milengine::agg {

inline constexpr std::array<char, 4> kModelMagic = {'M', 'I', 'L', 'M'};
inline constexpr std::uint16_t kModelVersion = 1;

struct ModelFile {
  Model<float> model;
  std::vector<std::string> classes;
};

namespace detail {

class Reader {
 public:
  explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}

  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("model file truncated at byte " + std::to_string(pos_));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += n;
    return p;
  }
  std::uint16_t u16() { return data::detail::get_u16(take(2)); }
  std::uint32_t u32() { return data::detail::get_u32(take(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

inline void put_tensor(std::vector<char>& out, std::size_t rows, std::size_t cols, std::span<const float> values) {
  data::detail::put_u32(out, static_cast<std::uint32_t>(rows));
  data::detail::put_u32(out, static_cast<std::uint32_t>(cols));
  for (float v : values) data::detail::put_f32(out, v);
}

}  // namespace detail

inline std::vector<char> encode_model(Model<float>& model, const std::vector<std::string>& classes) {
  if (classes.size() != model.num_classes) throw ConfigError("class-name count does not match the model");
  std::vector<char> out(kModelMagic.begin(), kModelMagic.end());
  data::detail::put_u16(out, kModelVersion);
  data::detail::put_u16(out, static_cast<std::uint16_t>(model.kind));
  data::detail::put_u32(out, static_cast<std::uint32_t>(model.dim));
  data::detail::put_u32(out, static_cast<std::uint32_t>(model.num_classes));

  std::vector<std::uint32_t> hyper;
  switch (model.kind) {
    case AggregatorKind::Bgap: hyper = {static_cast<std::uint32_t>(kHeadHidden)}; break;
    case AggregatorKind::Abmil: {
      const auto& m = std::get<AbmilModel<float>>(model.impl);
      hyper = {static_cast<std::uint32_t>(m.hidden()), static_cast<std::uint32_t>(kHeadHidden)};
      break;
    }
    case AggregatorKind::Transmil: {
      const auto& c = std::get<TransmilModel<float>>(model.impl).config;
      hyper = {static_cast<std::uint32_t>(c.width), static_cast<std::uint32_t>(c.layers),
               static_cast<std::uint32_t>(c.heads), static_cast<std::uint32_t>(kHeadHidden)};
      break;
    }
    case AggregatorKind::SimpleShot:
      hyper = {std::get<Prototypes>(model.impl).normalized ? 1u : 0u};
      break;
  }
  data::detail::put_u32(out, static_cast<std::uint32_t>(hyper.size()));
  for (auto h : hyper) data::detail::put_u32(out, h);

  data::detail::put_u32(out, static_cast<std::uint32_t>(classes.size()));
  for (const auto& name : classes) {
    data::detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
  }

  if (auto* p = std::get_if<Prototypes>(&model.impl)) {
    if (p->values.size() != p->num_classes * p->dim) throw ConfigError("simpleshot prototypes are not fitted");
    data::detail::put_u32(out, 1);
    detail::put_tensor(out, p->num_classes, p->dim, p->values);
  } else {
    const auto params = model.params();
    data::detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (auto* t : params) {
      detail::put_tensor(out, static_cast<std::size_t>(t->value.rows()), static_cast<std::size_t>(t->value.cols()),
                         {t->value.data(), static_cast<std::size_t>(t->value.size())});
    }
  }
  return out;
}

inline ModelFile decode_model(std::span<const char> bytes) {
  detail::Reader in(bytes);
  if (std::memcmp(in.take(4), kModelMagic.data(), 4) != 0) throw FormatError("bad magic, expected 'MILM'");
  const auto version = in.u16();
  if (version != kModelVersion) throw FormatError("unsupported model version " + std::to_string(version));
  const auto kind_tag = in.u16();
  if (kind_tag > 3) throw FormatError("unknown model kind " + std::to_string(kind_tag));
  const auto kind = static_cast<AggregatorKind>(kind_tag);
  const std::size_t dim = in.u32();
  const std::size_t num_classes = in.u32();
  std::vector<std::uint32_t> hyper(in.u32());
  if (hyper.size() > 16) throw FormatError("implausible hyperparameter count");
  for (auto& h : hyper) h = in.u32();

  auto expect_hyper = [&](std::size_t n) {
    if (hyper.size() != n) throw FormatError("model kind " + std::string(to_string(kind)) + " expects " +
                                             std::to_string(n) + " hyperparameters");
  };
  ModelHyper mh;
  switch (kind) {
    case AggregatorKind::Bgap: expect_hyper(1); break;
    case AggregatorKind::Abmil: expect_hyper(2); mh.abmil_hidden = hyper[0]; break;
    case AggregatorKind::Transmil: expect_hyper(4); mh.transmil = {hyper[0], hyper[1], hyper[2]}; break;
    case AggregatorKind::SimpleShot: expect_hyper(1); break;
  }
  if (kind != AggregatorKind::SimpleShot && hyper.back() != kHeadHidden) {
    throw FormatError("unsupported classifier head width " + std::to_string(hyper.back()));
  }

  ModelFile file;
  const std::size_t name_count = in.u32();
  if (name_count != num_classes) throw FormatError("class-name count does not match class count");
  for (std::size_t i = 0; i < name_count; ++i) {
    const std::size_t len = in.u32();
    const auto* p = in.take(len);
    file.classes.emplace_back(reinterpret_cast<const char*>(p), len);
  }

  file.model = make_model<float>(kind, dim, num_classes, 0, mh);
  const std::size_t tensor_count = in.u32();
  if (auto* protos = std::get_if<Prototypes>(&file.model.impl)) {
    if (tensor_count != 1) throw FormatError("simpleshot model must hold exactly one tensor");
    const std::size_t rows = in.u32(), cols = in.u32();
    if (rows != num_classes || cols != dim) throw FormatError("prototype tensor has the wrong shape");
    protos->normalized = hyper[0] != 0;
    protos->values.resize(rows * cols);
    for (auto& v : protos->values) v = in.f32();
  } else {
    auto params = file.model.params();
    if (tensor_count != params.size()) {
      throw FormatError("expected " + std::to_string(params.size()) + " tensors, file has " +
                        std::to_string(tensor_count));
    }
    for (auto* t : params) {
      const std::size_t rows = in.u32(), cols = in.u32();
      if (rows != static_cast<std::size_t>(t->value.rows()) || cols != static_cast<std::size_t>(t->value.cols())) {
        throw FormatError("tensor '" + t->name + "' has shape " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", expected " + std::to_string(t->value.rows()) + "x" +
                          std::to_string(t->value.cols()));
      }
      for (Eigen::Index i = 0; i < t->value.size(); ++i) t->value.data()[i] = in.f32();
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after the last tensor");
  return file;
}

inline void save_model(Model<float>& model, const std::vector<std::string>& classes,
                       const std::filesystem::path& path) {
  const auto bytes = encode_model(model, classes);
  data::detail::write_file(path, bytes);
}

inline ModelFile load_model(const std::filesystem::path& path) {
  const auto bytes = data::detail::read_file(path);
  try {
    return decode_model(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace milengine::agg
