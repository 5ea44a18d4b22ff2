#pragma once

// Manifest CSV:
//
//   #classes=lm,lms,df          <- optional, fixes class order
//   slide_id,label,center,bag_path
//   s001,df,HCUV,bags/s001.milb
//
// Without the #classes line, classes are the distinct labels in lexicographic
// order. Relative bag paths resolve against the manifest's directory.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "milengine/data/bag.hpp"
#include "milengine/errors.hpp"

namespace milengine::data {

struct SlideRecord {
  std::string slide_id;
  std::size_t label = 0;
  std::string center;
  std::filesystem::path bag_path;
};

struct Manifest {
  std::vector<std::string> classes;
  std::vector<SlideRecord> records;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t size() const { return records.size(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes.size(), 0);
    for (const auto& r : records) ++counts[r.label];
    return counts;
  }
};

inline void validate_manifest(const Manifest& m) {
  if (m.classes.size() < 2) throw ConfigError("manifest has fewer than 2 classes");
  std::unordered_set<std::string> seen;
  for (const auto& r : m.records) {
    if (r.label >= m.classes.size()) {
      throw ConfigError("slide '" + r.slide_id + "' has label index " + std::to_string(r.label) +
                        " outside [0, " + std::to_string(m.classes.size()) + ")");
    }
    if (!seen.insert(r.slide_id).second) throw ConfigError("duplicate slide_id '" + r.slide_id + "'");
  }
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    fields.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

}  // namespace detail

inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> declared_classes;
  bool have_header = false;
  std::map<std::string, std::size_t> column;

  struct RawRow {
    std::string slide_id, label, center, bag_path;
    std::size_t line;
  };
  std::vector<RawRow> rows;
  std::map<std::string, std::size_t> id_line;

  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    const std::string_view view = detail::trim(line);
    if (view.empty()) continue;
    if (view.front() == '#') {
      constexpr std::string_view kClasses = "#classes=";
      if (view.substr(0, kClasses.size()) == kClasses) {
        if (have_header || !declared_classes.empty()) {
          throw ParseError("#classes= must precede the header row", line_no);
        }
        declared_classes = detail::split_csv(view.substr(kClasses.size()));
        std::set<std::string> unique;
        for (const auto& c : declared_classes) {
          if (c.empty()) throw ParseError("empty class name in #classes=", line_no);
          if (!unique.insert(c).second) throw ParseError("class '" + c + "' declared twice", line_no);
        }
      }
      continue;
    }
    auto fields = detail::split_csv(view);
    if (!have_header) {
      for (std::size_t i = 0; i < fields.size(); ++i) column[fields[i]] = i;
      for (const char* name : {"slide_id", "label", "center", "bag_path"}) {
        if (!column.contains(name)) throw ParseError(std::string("missing column '") + name + "'", line_no);
      }
      have_header = true;
      continue;
    }
    if (fields.size() != column.size()) {
      throw ParseError("expected " + std::to_string(column.size()) + " fields, found " +
                       std::to_string(fields.size()), line_no);
    }
    RawRow row{fields[column["slide_id"]], fields[column["label"]], fields[column["center"]],
               fields[column["bag_path"]], line_no};
    if (row.slide_id.empty()) throw ParseError("empty slide_id", line_no);
    if (row.label.empty()) throw ParseError("empty label", line_no);
    if (row.bag_path.empty()) throw ParseError("empty bag_path", line_no);
    if (auto [it, inserted] = id_line.emplace(row.slide_id, line_no); !inserted) {
      throw ParseError("duplicate slide_id '" + row.slide_id + "' (first seen on line " +
                       std::to_string(it->second) + ")", line_no);
    }
    rows.push_back(std::move(row));
  }
  if (!have_header) throw ParseError("empty manifest (no header row)", line_no == 0 ? 1 : line_no);
  if (rows.empty()) throw ParseError("manifest has no slide rows", line_no);

  Manifest m;
  if (!declared_classes.empty()) {
    m.classes = declared_classes;
  } else {
    std::set<std::string> labels;
    for (const auto& r : rows) labels.insert(r.label);
    m.classes.assign(labels.begin(), labels.end());
  }
  if (m.classes.size() < 2) throw ConfigError("manifest has fewer than 2 classes");

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.classes.size(); ++i) index[m.classes[i]] = i;
  m.records.reserve(rows.size());
  for (auto& r : rows) {
    const auto it = index.find(r.label);
    if (it == index.end()) throw ParseError("label '" + r.label + "' is not in the declared classes", r.line);
    std::filesystem::path bag = r.bag_path;
    if (bag.is_relative() && !base_dir.empty()) bag = base_dir / bag;
    m.records.push_back({std::move(r.slide_id), it->second, std::move(r.center), std::move(bag)});
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.parent_path());
}

// Bag paths are written relative to the manifest's directory when they live beneath it.
inline void write_manifest(const Manifest& m, const std::filesystem::path& path,
                           bool declare_classes = true) {
  validate_manifest(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const auto base = path.parent_path();
  if (declare_classes) {
    out << "#classes=";
    for (std::size_t i = 0; i < m.classes.size(); ++i) out << (i ? "," : "") << m.classes[i];
    out << '\n';
  }
  out << "slide_id,label,center,bag_path\n";
  for (const auto& r : m.records) {
    std::filesystem::path p = r.bag_path;
    if (!base.empty()) {
      const auto rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    out << r.slide_id << ',' << m.classes[r.label] << ',' << r.center << ',' << p.generic_string() << '\n';
  }
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

// Loads every bag referenced by the manifest, in manifest order, and checks
// that they share one embedding dimension.
inline std::vector<EmbeddingBag> load_bags(const Manifest& m) {
  std::vector<EmbeddingBag> bags;
  bags.reserve(m.records.size());
  for (const auto& r : m.records) {
    if (!std::filesystem::exists(r.bag_path)) {
      throw IoError("bag file for slide '" + r.slide_id + "' not found: " + r.bag_path.string());
    }
    bags.push_back(read_bag(r.bag_path, r.slide_id));
    if (bags.back().d != bags.front().d) {
      throw DimensionError("slide '" + r.slide_id + "' has d=" + std::to_string(bags.back().d) +
                           " but the dataset uses d=" + std::to_string(bags.front().d));
    }
  }
  return bags;
}

}  // namespace milengine::data
