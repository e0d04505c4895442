#pragma once

// Pipeline configuration file: one JSON object whose sections configure each
// CLI stage. The "train" section uses TrainConfig field names. Unknown keys
// are rejected so typos fail loudly.

#include "sscbm/experiments.hpp"

#include <set>

namespace sscbm {

/// Named subsets of the dataset, e.g. "train", "test", "labeled".
using SplitTable = std::map<std::string, std::vector<std::string>>;

inline void write_split_table(const std::filesystem::path& path, const SplitTable& t) {
  detail::write_text(path, nlohmann::json(t).dump(2) + "\n");
}

inline SplitTable read_split_table(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_text(path)).get<SplitTable>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("malformed split file " + path.string() + ": " + e.what());
  }
}

struct SplitConfig {
  double test_fraction = 0.2;
  std::uint64_t holdout_seed = 1;
  LabelSetting labels{SplitSpec::Mode::ratio, 0.1};
  std::uint64_t seed = 0;  // labeled-subset draw
};

struct SweepConfig {
  std::vector<LabelSetting> settings = default_label_settings();
  std::vector<Variant> variants = {Variant::cbm_ssl, Variant::cem_ssl, Variant::sscbm};
};

struct AblateConfig {
  LabelSetting setting{SplitSpec::Mode::ratio, 0.1};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<Ablation> ablations = {Ablation::full, Ablation::wo_img, Ablation::wo_align};
};

struct InterventionConfig {
  double lo = 0.0;
  double hi = 1.0;
  double step = 0.1;
  InterventionMode mode = InterventionMode::individual;
  InterventionOrder order = InterventionOrder::most_erroneous;
};

struct PipelineConfig {
  SyntheticSpec data;
  SplitConfig split;
  TrainConfig train;
  SweepConfig sweep;
  AblateConfig ablate;
  InterventionConfig intervention;
};

/// Parses "lo:hi:step".
inline InterventionConfig parse_ratio_range(const std::string& text, InterventionConfig c = {}) {
  const auto a = text.find(':');
  const auto b = a == std::string::npos ? a : text.find(':', a + 1);
  if (b == std::string::npos) {
    throw ConfigError("ratio range must look like lo:hi:step, got " + text);
  }
  try {
    c.lo = std::stod(text.substr(0, a));
    c.hi = std::stod(text.substr(a + 1, b - a - 1));
    c.step = std::stod(text.substr(b + 1));
  } catch (const std::logic_error&) {
    throw ConfigError("non-numeric ratio range: " + text);
  }
  ratio_grid(c.lo, c.hi, c.step);  // validates
  return c;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw ConfigError("config section " + section + " must be an object");
  }
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.contains(key)) {
      throw ConfigError("unknown config key " + section + "." + key);
    }
  }
}

inline std::set<std::string> train_keys() {
  std::set<std::string> keys;
  const auto defaults = TrainConfig{}.to_json();
  for (const auto& [key, value] : defaults.items()) {
    keys.insert(key);
  }
  return keys;
}

// "K=1", "0.1" or a bare number.
inline LabelSetting label_setting_from_json(const nlohmann::json& v) {
  if (v.is_number()) {
    return {SplitSpec::Mode::ratio, v.get<double>()};
  }
  return LabelSetting::parse(v.get<std::string>());
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  try {
    detail::check_keys(j, "<root>", {"data", "split", "train", "sweep", "ablate", "intervention"});
    if (j.contains("data")) {
      const auto& d = j["data"];
      detail::check_keys(d, "data", {"n_examples", "image_size", "n_classes", "noise_std", "seed"});
      c.data.n_examples = d.value("n_examples", c.data.n_examples);
      c.data.image_size = d.value("image_size", c.data.image_size);
      c.data.n_classes = d.value("n_classes", c.data.n_classes);
      c.data.noise_std = d.value("noise_std", c.data.noise_std);
      c.data.seed = d.value("seed", c.data.seed);
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      detail::check_keys(s, "split", {"test_fraction", "holdout_seed", "labels", "seed"});
      c.split.test_fraction = s.value("test_fraction", c.split.test_fraction);
      c.split.holdout_seed = s.value("holdout_seed", c.split.holdout_seed);
      if (s.contains("labels")) c.split.labels = detail::label_setting_from_json(s["labels"]);
      c.split.seed = s.value("seed", c.split.seed);
      if (!(c.split.test_fraction > 0 && c.split.test_fraction < 1)) {
        throw ConfigError("split.test_fraction must lie in (0, 1)");
      }
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      if (!t.is_object()) {
        throw ConfigError("config section train must be an object");
      }
      const auto keys = detail::train_keys();
      for (const auto& [key, value] : t.items()) {
        if (!keys.contains(key)) {
          throw ConfigError("unknown config key train." + key);
        }
      }
      c.train = TrainConfig::from_json(t);
    }
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      detail::check_keys(s, "sweep", {"settings", "variants"});
      if (s.contains("settings")) {
        c.sweep.settings.clear();
        for (const auto& v : s["settings"]) c.sweep.settings.push_back(detail::label_setting_from_json(v));
      }
      if (s.contains("variants")) {
        c.sweep.variants.clear();
        for (const auto& v : s["variants"]) c.sweep.variants.push_back(parse_variant(v.get<std::string>()));
      }
    }
    if (j.contains("ablate")) {
      const auto& a = j["ablate"];
      detail::check_keys(a, "ablate", {"setting", "seeds", "ablations"});
      if (a.contains("setting")) c.ablate.setting = detail::label_setting_from_json(a["setting"]);
      if (a.contains("seeds")) c.ablate.seeds = a["seeds"].get<std::vector<std::uint64_t>>();
      if (a.contains("ablations")) {
        c.ablate.ablations.clear();
        for (const auto& v : a["ablations"]) c.ablate.ablations.push_back(parse_ablation(v.get<std::string>()));
      }
    }
    if (j.contains("intervention")) {
      const auto& iv = j["intervention"];
      detail::check_keys(iv, "intervention", {"ratios", "mode", "order"});
      if (iv.contains("ratios")) c.intervention = parse_ratio_range(iv["ratios"].get<std::string>(), c.intervention);
      if (iv.contains("mode")) c.intervention.mode = parse_intervention_mode(iv["mode"].get<std::string>());
      if (iv.contains("order")) {
        const auto o = iv["order"].get<std::string>();
        if (o == "most_erroneous") {
          c.intervention.order = InterventionOrder::most_erroneous;
        } else if (o == "random") {
          c.intervention.order = InterventionOrder::random;
        } else {
          throw ConfigError("unknown intervention order: " + o);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

/// Applies "section.key=value" overrides; the value is parsed as JSON and
/// falls back to a plain string.
inline nlohmann::json apply_overrides(nlohmann::json base, std::span<const std::string> assignments) {
  if (base.is_null()) {
    base = nlohmann::json::object();
  }
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    const auto dot = a.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override must look like section.key=value, got " + a);
    }
    const auto section = a.substr(0, dot);
    const auto key = a.substr(dot + 1, eq - dot - 1);
    const auto text = a.substr(eq + 1);
    auto value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) {
      value = text;
    }
    base[section][key] = value;
  }
  return base;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path,
                                           std::span<const std::string> overrides = {}) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) {
      throw ConfigError("config file " + path.string() + " does not exist");
    }
    j = nlohmann::json::parse(detail::read_text(path), nullptr, false);
    if (j.is_discarded()) {
      throw ConfigError("config file " + path.string() + " is not valid JSON");
    }
  }
  return pipeline_config_from_json(apply_overrides(std::move(j), overrides));
}

/// The named subsets written by the split stage.
inline SplitTable make_split_table(const Dataset& ds, const SplitConfig& sc) {
  const auto holdout = split_holdout(ds.examples, sc.test_fraction, sc.holdout_seed);
  std::vector<Example> train;
  SplitTable t;
  for (std::size_t i : holdout.unlabeled) {
    train.push_back(ds.examples[i]);
    t["train"].push_back(ds.examples[i].id);
  }
  for (std::size_t i : holdout.labeled) {
    t["test"].push_back(ds.examples[i].id);
  }
  const auto semi = split_indices(train, {sc.labels.mode, sc.labels.value, sc.seed});
  for (std::size_t i : semi.labeled) {
    t["labeled"].push_back(train[i].id);
  }
  for (std::size_t i : semi.unlabeled) {
    t["unlabeled"].push_back(train[i].id);
  }
  return t;
}

/// Examples named by one subset, in the table's order. Concepts are stripped
/// when `strip_concepts` is set.
inline std::vector<Example> select(const Dataset& ds, const SplitTable& t, const std::string& subset,
                                   bool strip_concepts = false) {
  const auto it = t.find(subset);
  if (it == t.end()) {
    throw SchemaError("split file has no subset " + subset);
  }
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    pos.emplace(ds.examples[i].id, i);
  }
  std::vector<Example> out;
  for (const auto& id : it->second) {
    const auto p = pos.find(id);
    if (p == pos.end()) {
      throw SchemaError("split names unknown example " + id);
    }
    out.push_back(ds.examples[p->second]);
    if (strip_concepts) {
      out.back().concepts.reset();
    }
  }
  return out;
}

inline std::vector<std::vector<std::optional<Region>>> select_regions(const Dataset& ds, const SplitTable& t,
                                                                      const std::string& subset) {
  if (ds.regions.empty()) {
    return {};
  }
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    pos.emplace(ds.examples[i].id, i);
  }
  std::vector<std::vector<std::optional<Region>>> out;
  for (const auto& id : t.at(subset)) {
    out.push_back(ds.regions[pos.at(id)]);
  }
  return out;
}

}  // namespace sscbm
