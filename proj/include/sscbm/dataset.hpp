#pragma once

// Examples, concept schemas, the synthetic attributed-shapes generator,
// JSON-Lines manifests and semi-supervised splits.

#include "sscbm/core.hpp"
#include "sscbm/random.hpp"
#include "sscbm/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <unordered_map>

namespace sscbm {

/// Image tensor laid out (C, H, W), row-major.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), data(std::size_t(c) * h * w, 0.0f) {}

  float& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
  std::vector<int> shape() const { return {channels, height, width}; }
  bool operator==(const Image&) const = default;
};

using ConceptVector = std::vector<std::uint8_t>;

struct Example {
  std::string id;
  Image input;
  int class_label = 0;
  std::optional<ConceptVector> concepts;
};

struct ConceptSchema {
  std::vector<std::string> names;
  std::vector<int> groups;  // group id per concept

  int k() const { return static_cast<int>(names.size()); }

  void validate() const {
    if (names.empty()) {
      throw SchemaError("concept schema has no concepts");
    }
    if (groups.size() != names.size()) {
      throw SchemaError("concept schema needs exactly one group per concept");
    }
    std::set<std::string> seen(names.begin(), names.end());
    if (seen.size() != names.size()) {
      throw SchemaError("concept names must be unique");
    }
  }

  std::vector<int> group_ids() const {
    std::set<int> ids(groups.begin(), groups.end());
    return {ids.begin(), ids.end()};
  }

  std::vector<int> members(int group) const {
    std::vector<int> out;
    for (int i = 0; i < k(); ++i) {
      if (groups[i] == group) {
        out.push_back(i);
      }
    }
    return out;
  }

  nlohmann::json to_json() const { return {{"k", k()}, {"names", names}, {"groups", groups}}; }

  static ConceptSchema from_json(const nlohmann::json& j) {
    ConceptSchema s;
    s.names = j.at("names").get<std::vector<std::string>>();
    if (j.contains("groups")) {
      s.groups = j.at("groups").get<std::vector<int>>();
    } else {
      // singleton groups
      for (int i = 0; i < static_cast<int>(s.names.size()); ++i) {
        s.groups.push_back(i);
      }
    }
    if (j.contains("k") && j.at("k").get<int>() != s.k()) {
      throw SchemaError("schema k does not match the number of names");
    }
    s.validate();
    return s;
  }
};

/// Inclusive pixel bounding box.
struct Region {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  int area() const { return (x1 - x0 + 1) * (y1 - y0 + 1); }
  bool operator==(const Region&) const = default;
};

/// Lookup from the active member of each listed group to a class label.
struct LabelRule {
  std::vector<int> group_order;
  std::vector<int> group_sizes;
  std::vector<int> table;  // mixed-radix combination index -> class
  int n_classes = 0;

  int classify(const ConceptVector& c, const ConceptSchema& schema) const {
    int combo = 0;
    for (std::size_t g = 0; g < group_order.size(); ++g) {
      const auto members = schema.members(group_order[g]);
      int active = -1;
      for (std::size_t j = 0; j < members.size(); ++j) {
        if (c.at(members[j])) {
          if (active >= 0) {
            throw SchemaError("label rule needs exactly one active concept per group");
          }
          active = static_cast<int>(j);
        }
      }
      if (active < 0) {
        throw SchemaError("label rule needs exactly one active concept per group");
      }
      combo = combo * group_sizes[g] + active;
    }
    return table.at(combo);
  }

  nlohmann::json to_json() const {
    return {{"group_order", group_order}, {"group_sizes", group_sizes}, {"table", table},
            {"n_classes", n_classes}};
  }

  static LabelRule from_json(const nlohmann::json& j) {
    LabelRule r;
    r.group_order = j.at("group_order").get<std::vector<int>>();
    r.group_sizes = j.at("group_sizes").get<std::vector<int>>();
    r.table = j.at("table").get<std::vector<int>>();
    r.n_classes = j.at("n_classes").get<int>();
    return r;
  }
};

struct Dataset {
  ConceptSchema schema;
  int n_classes = 0;
  std::vector<Example> examples;
  // Per example, per concept; empty when the source records no regions.
  std::vector<std::vector<std::optional<Region>>> regions;
  std::optional<LabelRule> rule;

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (examples[i].id == id) {
        return i;
      }
    }
    throw NotFoundError("unknown example id: " + id);
  }
};

inline void validate_example(const Example& e, int k, int n_classes) {
  for (float v : e.input.data) {
    if (!std::isfinite(v)) {
      throw SchemaError("example " + e.id + " has a non-finite input value");
    }
  }
  if (e.class_label < 0 || (n_classes > 0 && e.class_label >= n_classes)) {
    throw SchemaError("example " + e.id + " has an out-of-range class label");
  }
  if (e.concepts) {
    if (static_cast<int>(e.concepts->size()) != k) {
      throw SchemaError("example " + e.id + " has " + std::to_string(e.concepts->size()) +
                        " concepts, schema expects " + std::to_string(k));
    }
    for (auto v : *e.concepts) {
      if (v > 1) {
        throw SchemaError("example " + e.id + " has a non-binary concept value");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic attributed shapes

struct SyntheticSpec {
  int n_examples = 2000;
  int image_size = 32;
  int n_classes = 9;
  double noise_std = 0.05;  // per-pixel jitter on object pixels; the background stays black
  std::uint64_t seed = 0;
};

namespace synthetic {

inline constexpr int kShapes = 3;
inline constexpr int kColors = 3;
inline constexpr int kSizes = 2;
inline constexpr int kPositions = 2;
inline constexpr int kConcepts = kShapes + kColors + kSizes + kPositions;
inline constexpr int kMaxClasses = kShapes * kColors * kSizes * kPositions;

inline ConceptSchema schema() {
  ConceptSchema s;
  s.names = {"shape::circle", "shape::square", "shape::triangle", "color::red",     "color::green",
             "color::blue",   "size::small",   "size::large",     "position::left", "position::right"};
  s.groups = {0, 0, 0, 1, 1, 1, 2, 2, 3, 3};
  return s;
}

// Uses the shortest prefix of (shape, color, size, position) whose
// combinations cover n_classes, and folds combinations onto classes in order.
inline LabelRule label_rule(int n_classes) {
  if (n_classes < 1 || n_classes > kMaxClasses) {
    throw ConfigError("n_classes must be in [1, " + std::to_string(kMaxClasses) +
                      "] for the synthetic concept vocabulary");
  }
  const int sizes[] = {kShapes, kColors, kSizes, kPositions};
  LabelRule rule;
  rule.n_classes = n_classes;
  int combos = 1;
  for (int g = 0; g < 4; ++g) {
    rule.group_order.push_back(g);
    rule.group_sizes.push_back(sizes[g]);
    combos *= sizes[g];
    if (combos >= n_classes) {
      break;
    }
  }
  for (int c = 0; c < combos; ++c) {
    rule.table.push_back(c * n_classes / combos);
  }
  return rule;
}

struct Shape {
  int kind = 0;
  double cx = 0;
  double cy = 0;
  double radius = 0;

  bool covers(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    switch (kind) {
      case 0:
        return dx * dx + dy * dy <= radius * radius;
      case 1:
        return std::abs(dx) <= 0.85 * radius && std::abs(dy) <= 0.85 * radius;
      default: {
        const double top = cy - radius;
        const double base = cy + 0.8 * radius;
        if (y < top || y > base) {
          return false;
        }
        return std::abs(dx) <= radius * (y - top) / (base - top);
      }
    }
  }
};

}  // namespace synthetic

inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  using namespace synthetic;
  if (spec.n_examples < 1) {
    throw ConfigError("n_examples must be positive");
  }
  if (spec.image_size < 16) {
    throw ConfigError("image_size must be at least 16");
  }
  if (!(spec.noise_std >= 0.0)) {
    throw ConfigError("noise_std must be non-negative");
  }
  Dataset ds;
  ds.schema = schema();
  ds.rule = label_rule(spec.n_classes);
  ds.n_classes = spec.n_classes;

  Rng rng(spec.seed);
  const int s = spec.image_size;
  const double half = s / 2.0;
  for (int n = 0; n < spec.n_examples; ++n) {
    const int shape = static_cast<int>(rng.below(kShapes));
    const int color = static_cast<int>(rng.below(kColors));
    const int size = static_cast<int>(rng.below(kSizes));
    const int position = static_cast<int>(rng.below(kPositions));

    Shape obj;
    obj.kind = shape;
    obj.radius = size == 0 ? rng.uniform(0.14, 0.19) * s : rng.uniform(0.26, 0.32) * s;
    const double margin = obj.radius + 1.0;
    obj.cx = position == 0 ? rng.uniform(margin, half - 1.0) : rng.uniform(half + 1.0, s - margin);
    obj.cy = rng.uniform(margin, s - margin);

    float rgb[3];
    for (int c = 0; c < 3; ++c) {
      rgb[c] = static_cast<float>(c == color ? rng.uniform(0.75, 1.0) : rng.uniform(0.0, 0.25));
    }

    Example ex;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%05d", n);
    ex.id = id;
    ex.input = Image(3, s, s);
    Region box{s, s, -1, -1};
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const bool inside = obj.covers(x + 0.5, y + 0.5);
        if (inside) {
          box.x0 = std::min(box.x0, x);
          box.y0 = std::min(box.y0, y);
          box.x1 = std::max(box.x1, x);
          box.y1 = std::max(box.y1, y);
        }
        for (int c = 0; c < 3; ++c) {
          double v = inside ? rgb[c] : 0.0;
          if (inside && spec.noise_std > 0) {
            v += spec.noise_std * rng.normal();
          }
          ex.input.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }

    ConceptVector cv(kConcepts, 0);
    cv[shape] = 1;
    cv[kShapes + color] = 1;
    cv[kShapes + kColors + size] = 1;
    cv[kShapes + kColors + kSizes + position] = 1;
    ex.class_label = ds.rule->classify(cv, ds.schema);
    ex.concepts = cv;

    std::vector<std::optional<Region>> regions(kConcepts);
    for (int i = 0; i < kConcepts; ++i) {
      if (cv[i]) {
        regions[i] = box;
      }
    }
    ds.examples.push_back(std::move(ex));
    ds.regions.push_back(std::move(regions));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Manifests

namespace detail {

inline Image image_from_nested(const nlohmann::json& arr) {
  if (!arr.is_array() || arr.empty() || !arr[0].is_array() || arr[0].empty() || !arr[0][0].is_array()) {
    throw Error("inline input must be a nested [C][H][W] array");
  }
  Image img(static_cast<int>(arr.size()), static_cast<int>(arr[0].size()),
            static_cast<int>(arr[0][0].size()));
  for (int c = 0; c < img.channels; ++c) {
    if (arr[c].size() != static_cast<std::size_t>(img.height)) {
      throw Error("ragged inline input");
    }
    for (int y = 0; y < img.height; ++y) {
      if (arr[c][y].size() != static_cast<std::size_t>(img.width)) {
        throw Error("ragged inline input");
      }
      for (int x = 0; x < img.width; ++x) {
        img.at(c, y, x) = arr[c][y][x].get<float>();
      }
    }
  }
  return img;
}

inline Image image_from_file(const std::filesystem::path& p) {
  auto t = read_tensor_file(p);
  if (t.shape.size() != 3) {
    throw Error("tensor file " + p.string() + " is not rank 3");
  }
  Image img;
  img.channels = t.shape[0];
  img.height = t.shape[1];
  img.width = t.shape[2];
  img.data = std::move(t.data);
  return img;
}

}  // namespace detail

/// Reads a JSON-Lines manifest. Relative tensor paths resolve against the
/// manifest's directory.
inline std::vector<Example> load_manifest(const std::filesystem::path& path, int k) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open manifest " + path.string());
  }
  const auto base = path.parent_path();
  std::vector<Example> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    Example ex;
    try {
      const auto j = nlohmann::json::parse(line);
      ex.id = j.at("id").get<std::string>();
      ex.class_label = j.at("class_label").get<int>();
      const auto& input = j.at("input");
      ex.input = input.is_string() ? detail::image_from_file(base / input.get<std::string>())
                                   : detail::image_from_nested(input);
      if (j.contains("concepts") && !j.at("concepts").is_null()) {
        ConceptVector cv;
        for (const auto& v : j.at("concepts")) {
          const int b = v.get<int>();
          if (b != 0 && b != 1) {
            throw SchemaError("concept values must be 0 or 1", lineno);
          }
          cv.push_back(static_cast<std::uint8_t>(b));
        }
        ex.concepts = std::move(cv);
      }
    } catch (const SchemaError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed manifest record: ") + e.what(), lineno);
    }
    if (ex.concepts && static_cast<int>(ex.concepts->size()) != k) {
      throw SchemaError("concept vector has length " + std::to_string(ex.concepts->size()) +
                            ", schema expects " + std::to_string(k),
                        lineno);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline ConceptSchema load_schema(const std::filesystem::path& path) {
  return ConceptSchema::from_json(nlohmann::json::parse(detail::read_text(path)));
}

/// Writes schema.json, manifest.jsonl, tensors/, dataset.json and, when
/// known, regions.jsonl and label_rule.json.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "tensors");
  detail::write_text(dir / "schema.json", ds.schema.to_json().dump(2) + "\n");
  detail::write_text(dir / "dataset.json", nlohmann::json{{"n_classes", ds.n_classes}}.dump(2) + "\n");
  if (ds.rule) {
    detail::write_text(dir / "label_rule.json", ds.rule->to_json().dump() + "\n");
  }
  std::ofstream manifest(dir / "manifest.jsonl");
  for (const auto& ex : ds.examples) {
    const std::string rel = "tensors/" + ex.id + ".f32";
    write_tensor_file(dir / rel, RawTensor{ex.input.shape(), ex.input.data});
    nlohmann::json j = {{"id", ex.id}, {"input", rel}, {"class_label", ex.class_label}};
    if (ex.concepts) {
      std::vector<int> cv(ex.concepts->begin(), ex.concepts->end());
      j["concepts"] = cv;
    }
    manifest << j.dump() << "\n";
  }
  if (!ds.regions.empty()) {
    std::ofstream regions(dir / "regions.jsonl");
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      nlohmann::json rs = nlohmann::json::array();
      for (const auto& r : ds.regions[i]) {
        rs.push_back(r ? nlohmann::json{r->x0, r->y0, r->x1, r->y1} : nlohmann::json());
      }
      regions << nlohmann::json{{"id", ds.examples[i].id}, {"regions", rs}}.dump() << "\n";
    }
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.schema = load_schema(dir / "schema.json");
  ds.examples = load_manifest(dir / "manifest.jsonl", ds.schema.k());
  if (fs::exists(dir / "dataset.json")) {
    ds.n_classes = nlohmann::json::parse(detail::read_text(dir / "dataset.json")).at("n_classes").get<int>();
  } else {
    for (const auto& e : ds.examples) {
      ds.n_classes = std::max(ds.n_classes, e.class_label + 1);
    }
  }
  for (const auto& e : ds.examples) {
    validate_example(e, ds.schema.k(), ds.n_classes);
  }
  if (fs::exists(dir / "label_rule.json")) {
    ds.rule = LabelRule::from_json(nlohmann::json::parse(detail::read_text(dir / "label_rule.json")));
  }
  if (fs::exists(dir / "regions.jsonl")) {
    std::ifstream in(dir / "regions.jsonl");
    std::string line;
    std::unordered_map<std::string, std::vector<std::optional<Region>>> by_id;
    while (std::getline(in, line)) {
      if (line.empty()) {
        continue;
      }
      const auto j = nlohmann::json::parse(line);
      std::vector<std::optional<Region>> rs;
      for (const auto& r : j.at("regions")) {
        if (r.is_null()) {
          rs.emplace_back();
        } else {
          rs.push_back(Region{r[0].get<int>(), r[1].get<int>(), r[2].get<int>(), r[3].get<int>()});
        }
      }
      by_id[j.at("id").get<std::string>()] = std::move(rs);
    }
    for (const auto& e : ds.examples) {
      auto it = by_id.find(e.id);
      ds.regions.push_back(it == by_id.end() ? std::vector<std::optional<Region>>(ds.schema.k())
                                             : it->second);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  enum class Mode { ratio, per_class_k };
  Mode mode = Mode::ratio;
  double value = 0.1;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

namespace detail {

inline std::map<int, std::vector<std::size_t>> by_class(std::span<const Example> examples) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out[examples[i].class_label].push_back(i);
  }
  return out;
}

// Largest-remainder allocation of `total` picks across classes, at least one
// per class.
inline std::vector<std::size_t> allocate(const std::vector<std::size_t>& sizes, double fraction,
                                         std::size_t total) {
  const std::size_t n = sizes.size();
  if (total < n) {
    throw ConfigError("split leaves some class without a labeled example");
  }
  std::vector<std::size_t> take(n);
  std::vector<double> remainder(n);
  std::size_t sum = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const double quota = fraction * static_cast<double>(sizes[c]);
    take[c] = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(quota)), 1, sizes[c]);
    remainder[c] = quota - std::floor(quota);
    sum += take[c];
  }
  std::vector<std::size_t> order(n);
  for (std::size_t c = 0; c < n; ++c) {
    order[c] = c;
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  while (sum < total) {
    bool moved = false;
    for (std::size_t c : order) {
      if (sum < total && take[c] < sizes[c]) {
        ++take[c];
        ++sum;
        moved = true;
      }
    }
    if (!moved) {
      break;
    }
  }
  while (sum > total) {
    bool moved = false;
    for (auto it = order.rbegin(); it != order.rend() && sum > total; ++it) {
      if (take[*it] > 1) {
        --take[*it];
        --sum;
        moved = true;
      }
    }
    if (!moved) {
      break;
    }
  }
  return take;
}

// Class-stratified draw: per class (ascending label), seeded shuffle then
// take-first.
inline SplitIndices stratified_draw(std::span<const Example> examples,
                                    const std::vector<std::size_t>& per_class, std::uint64_t seed) {
  const auto classes = by_class(examples);
  Rng rng(seed);
  std::vector<bool> chosen(examples.size(), false);
  std::size_t c = 0;
  for (const auto& [label, idx] : classes) {
    auto shuffled = idx;
    rng.shuffle(std::span(shuffled));
    for (std::size_t j = 0; j < per_class[c]; ++j) {
      chosen[shuffled[j]] = true;
    }
    ++c;
  }
  SplitIndices out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    (chosen[i] ? out.labeled : out.unlabeled).push_back(i);
  }
  return out;
}

}  // namespace detail

/// Chooses the labeled subset; the rest is unlabeled. Both lists are in
/// dataset order.
inline SplitIndices split_indices(std::span<const Example> examples, const SplitSpec& spec) {
  const auto classes = detail::by_class(examples);
  std::vector<std::size_t> sizes;
  for (const auto& [label, idx] : classes) {
    sizes.push_back(idx.size());
  }
  std::vector<std::size_t> per_class;
  if (spec.mode == SplitSpec::Mode::per_class_k) {
    if (spec.value < 1 || spec.value != std::floor(spec.value)) {
      throw ConfigError("per_class_K needs an integer value >= 1");
    }
    const auto k = static_cast<std::size_t>(spec.value);
    for (std::size_t s : sizes) {
      if (s < k) {
        throw ConfigError("a class has fewer than K=" + std::to_string(k) + " examples");
      }
    }
    per_class.assign(sizes.size(), k);
  } else {
    if (!(spec.value > 0.0 && spec.value <= 1.0)) {
      throw ConfigError("ratio must lie in (0, 1]");
    }
    const auto total = static_cast<std::size_t>(std::llround(spec.value * static_cast<double>(examples.size())));
    per_class = detail::allocate(sizes, spec.value, total);
  }
  auto out = detail::stratified_draw(examples, per_class, spec.seed);
  for (std::size_t i : out.labeled) {
    if (!examples[i].concepts) {
      throw SchemaError("labeled example " + examples[i].id + " has no concept annotation");
    }
  }
  return out;
}

struct SemiSplit {
  std::vector<Example> labeled;
  std::vector<Example> unlabeled;  // concepts stripped
};

inline SemiSplit split_semi(std::span<const Example> examples, const SplitSpec& spec) {
  const auto idx = split_indices(examples, spec);
  SemiSplit out;
  for (std::size_t i : idx.labeled) {
    out.labeled.push_back(examples[i]);
  }
  for (std::size_t i : idx.unlabeled) {
    Example e = examples[i];
    e.concepts.reset();
    out.unlabeled.push_back(std::move(e));
  }
  return out;
}

/// Class-stratified holdout; `labeled` holds the held-out indices.
inline SplitIndices split_holdout(std::span<const Example> examples, double fraction, std::uint64_t seed) {
  const auto classes = detail::by_class(examples);
  std::vector<std::size_t> sizes;
  for (const auto& [label, idx] : classes) {
    sizes.push_back(idx.size());
  }
  const auto total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(examples.size())));
  return detail::stratified_draw(examples, detail::allocate(sizes, fraction, total), seed);
}

}  // namespace sscbm
