#pragma once

// Experiment harness: holdout partitions, single runs, the label-ratio sweep,
// ablations and artifact writers.

#include "sscbm/intervention.hpp"
#include "sscbm/png.hpp"

#include <iomanip>

namespace sscbm {

/// Train/test partition of a dataset plus the test regions.
struct Partition {
  std::vector<Example> train;
  std::vector<Example> test;
  std::vector<std::vector<std::optional<Region>>> test_regions;  // empty without regions
};

inline Partition make_partition(const Dataset& ds, const SplitIndices& holdout) {
  Partition p;
  for (std::size_t i : holdout.unlabeled) {
    p.train.push_back(ds.examples[i]);
  }
  for (std::size_t i : holdout.labeled) {
    p.test.push_back(ds.examples[i]);
    if (!ds.regions.empty()) {
      p.test_regions.push_back(ds.regions[i]);
    }
  }
  return p;
}

/// Stratified holdout of `test_fraction` of the dataset.
inline Partition make_partition(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  return make_partition(ds, split_holdout(ds.examples, test_fraction, seed));
}

/// Seed of the frozen KNN reference encoder.
inline std::uint64_t reference_seed(const TrainConfig& cfg) {
  return cfg.share_reference_encoder ? cfg.seed : cfg.seed + 0x5eed;
}

inline PseudoLabelMap make_pseudo_labels(const ModelConfig& mc, const TrainConfig& cfg,
                                         std::span<const Example> labeled, std::span<const Example> unlabeled) {
  const ReferenceEncoder enc(mc.backbone, reference_seed(cfg));
  return build_pseudo_labels(enc, labeled, unlabeled, cfg.k_nn);
}

struct RunResult {
  TrainResult train;
  MetricsReport test;
};

/// Pseudo-labels D_U, trains on (D_L, D_U) and evaluates on `test`.
inline RunResult run_semi_supervised(const SemiSplit& split, std::span<const Example> test, int k, int l,
                                     const TrainConfig& cfg, std::function<void(const EpochRecord&)> on_epoch = {}) {
  const auto& probe = split.labeled.empty() ? split.unlabeled.front() : split.labeled.front();
  const auto mc = cfg.model_config(k, l, probe.input.channels, probe.input.height);
  const bool needs_pseudo = align_term_for(cfg.variant, cfg.ablation) == AlignTerm::heatmap_vs_pseudo ||
                            align_term_for(cfg.variant, cfg.ablation) == AlignTerm::prediction_vs_pseudo;
  const PseudoLabelMap pseudo =
      needs_pseudo && !split.unlabeled.empty() ? make_pseudo_labels(mc, cfg, split.labeled, split.unlabeled)
                                               : PseudoLabelMap{};
  RunResult r{train(mc, split.labeled, split.unlabeled, pseudo, cfg, {}, std::move(on_epoch)), {}};
  r.test = evaluate(r.train.model, test);
  return r;
}

/// A labeled-subset setting of the sweep: a ratio or a per-class count.
struct LabelSetting {
  SplitSpec::Mode mode = SplitSpec::Mode::ratio;
  double value = 0.1;

  std::string label() const {
    if (mode == SplitSpec::Mode::per_class_k) {
      return "K=" + std::to_string(static_cast<int>(value));
    }
    std::ostringstream s;
    s << value;
    return s.str();
  }

  static LabelSetting parse(const std::string& text) {
    try {
      if (text.rfind("K=", 0) == 0) {
        return {SplitSpec::Mode::per_class_k, std::stod(text.substr(2))};
      }
      return {SplitSpec::Mode::ratio, std::stod(text)};
    } catch (const std::logic_error&) {
      throw ConfigError("bad label setting: " + text);
    }
  }
};

inline std::vector<LabelSetting> default_label_settings() {
  return {{SplitSpec::Mode::per_class_k, 1},
          {SplitSpec::Mode::ratio, 0.05},
          {SplitSpec::Mode::ratio, 0.1},
          {SplitSpec::Mode::ratio, 0.15},
          {SplitSpec::Mode::ratio, 0.2}};
}

struct SweepRow {
  std::string setting;
  std::string variant;
  double concept_accuracy = 0;
  double task_accuracy = 0;
};

/// One split per setting, shared by every variant.
inline std::vector<SweepRow> sweep_label_ratios(const Partition& part, int k, int l,
                                                std::span<const LabelSetting> settings,
                                                std::span<const Variant> variants, const TrainConfig& base,
                                                std::function<void(const SweepRow&)> on_row = {}) {
  std::vector<SweepRow> rows;
  for (const auto& s : settings) {
    const auto split = split_semi(part.train, {s.mode, s.value, base.seed});
    for (Variant v : variants) {
      TrainConfig cfg = base;
      cfg.variant = v;
      const auto r = run_semi_supervised(split, part.test, k, l, cfg);
      rows.push_back({s.label(), to_string(v), r.test.concept_accuracy, r.test.task_accuracy});
      if (on_row) {
        on_row(rows.back());
      }
    }
  }
  return rows;
}

struct AblationRow {
  std::uint64_t seed = 0;
  std::string ablation;
  double concept_accuracy = 0;
  double task_accuracy = 0;
};

inline std::vector<AblationRow> run_ablations(const Partition& part, int k, int l, const LabelSetting& setting,
                                              std::span<const Ablation> ablations,
                                              std::span<const std::uint64_t> seeds, const TrainConfig& base,
                                              std::function<void(const AblationRow&)> on_row = {}) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    const auto split = split_semi(part.train, {setting.mode, setting.value, seed});
    for (Ablation a : ablations) {
      TrainConfig cfg = base;
      cfg.variant = Variant::sscbm;
      cfg.ablation = a;
      cfg.seed = seed;
      const auto r = run_semi_supervised(split, part.test, k, l, cfg);
      rows.push_back({seed, to_string(a), r.test.concept_accuracy, r.test.task_accuracy});
      if (on_row) {
        on_row(rows.back());
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Artifact writers

namespace detail {

inline std::string fixed(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << std::fixed << v;
  return s.str();
}

}  // namespace detail

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "setting,variant,concept_acc,task_acc\n";
  for (const auto& r : rows) {
    out += r.setting + "," + r.variant + "," + detail::fixed(r.concept_accuracy) + "," +
           detail::fixed(r.task_accuracy) + "\n";
  }
  return out;
}

inline std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string out = "seed,ablation,concept_acc,task_acc\n";
  for (const auto& r : rows) {
    out += std::to_string(r.seed) + "," + r.ablation + "," + detail::fixed(r.concept_accuracy) + "," +
           detail::fixed(r.task_accuracy) + "\n";
  }
  return out;
}

inline std::string intervention_csv(std::span<const CurvePoint> curve) {
  std::string out = "ratio,task_acc\n";
  for (const auto& p : curve) {
    std::ostringstream r;
    r << std::setprecision(2) << std::fixed << p.ratio;
    out += r.str() + "," + detail::fixed(p.task_accuracy) + "\n";
  }
  return out;
}

/// Parses a (ratio, task_acc) CSV back into curve points.
inline std::vector<CurvePoint> parse_intervention_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<CurvePoint> out;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) {
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw ParseError("expected ratio,task_acc", lineno);
    }
    try {
      out.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
    } catch (const std::logic_error&) {
      throw ParseError("non-numeric intervention row", lineno);
    }
  }
  return out;
}

inline void write_history(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::string out;
  for (const auto& r : history) {
    out += r.to_json().dump() + "\n";
  }
  detail::write_text(path, out);
}

/// Writes saliency/<id>/<i>.f32 (+ .meta.json) and, optionally, <i>.png for
/// each requested concept (all concepts when `concepts` is empty).
inline std::size_t export_saliency(const std::filesystem::path& dir, const Model<float>& model,
                                   std::span<const Example> examples, std::span<const int> concepts, bool png) {
  std::vector<int> which(concepts.begin(), concepts.end());
  if (which.empty()) {
    for (int i = 0; i < model.config.k; ++i) {
      which.push_back(i);
    }
  }
  std::size_t written = 0;
  for (const auto& e : examples) {
    const auto c = model.forward(e.input);
    const auto heat = heatmaps_of(model.config, c);
    for (int i : which) {
      const auto sal = render_saliency(heat, i, e.input.height, e.input.width);
      const auto base = dir / e.id / std::to_string(i);
      write_tensor_file(base.string() + ".f32", RawTensor{{sal.height, sal.width}, sal.map});
      if (png) {
        write_binary(base.string() + ".png", saliency_png(sal));
      }
      ++written;
    }
  }
  return written;
}

}  // namespace sscbm
