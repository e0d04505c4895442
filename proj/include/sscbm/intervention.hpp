#pragma once

// Test-time intervention: overwrite predicted concept activations and
// re-run the label predictor.

#include "sscbm/evaluation.hpp"

namespace sscbm {

enum class InterventionMode { individual, group };
enum class InterventionOrder { most_erroneous, random };

inline std::string to_string(InterventionMode m) { return m == InterventionMode::group ? "group" : "individual"; }

inline InterventionMode parse_intervention_mode(const std::string& s) {
  if (s == "individual") return InterventionMode::individual;
  if (s == "group") return InterventionMode::group;
  throw ConfigError("unknown intervention mode: " + s);
}

struct InterventionRequest {
  std::string example_id;
  std::map<int, int> overrides;  // concept index -> 0/1
  InterventionMode mode = InterventionMode::individual;
};

struct InterventionResult {
  std::vector<double> p_hat;
  std::vector<double> logits;
  int predicted_class = 0;
  std::map<int, int> applied;  // every concept actually overwritten
};

/// Resolves a request into the full set of overwritten concepts. In group
/// mode every member of a touched group takes its ground-truth value when
/// known; without ground truth a positive override clears its siblings.
/// Explicitly requested values always win.
inline std::map<int, int> resolve_overrides(const InterventionRequest& req, const ConceptSchema& schema,
                                            const std::optional<ConceptVector>& truth) {
  std::map<int, int> out;
  for (const auto& [i, v] : req.overrides) {
    if (i < 0 || i >= schema.k()) {
      throw ConfigError("override index " + std::to_string(i) + " is out of range");
    }
    if (v != 0 && v != 1) {
      throw ConfigError("override values must be 0 or 1");
    }
  }
  if (req.mode == InterventionMode::group) {
    for (const auto& [i, v] : req.overrides) {
      for (int j : schema.members(schema.groups[i])) {
        if (truth) {
          out[j] = (*truth)[j];
        } else if (v == 1) {
          out[j] = 0;
        }
      }
    }
  }
  for (const auto& [i, v] : req.overrides) {
    out[i] = v;
  }
  return out;
}

template <class S>
InterventionResult intervene(const Model<S>& model, const Example& example, const InterventionRequest& req,
                             const ConceptSchema& schema, const std::optional<ConceptVector>& truth) {
  auto c = model.forward(example.input);
  InterventionResult r;
  r.applied = resolve_overrides(req, schema, truth);
  std::map<int, S> values;
  for (const auto& [i, v] : r.applied) {
    values[i] = static_cast<S>(v);
  }
  override_concepts(model.config, model.params, c, values);
  for (int i = 0; i < c.p.size(); ++i) {
    r.p_hat.push_back(static_cast<double>(c.p(i)));
  }
  for (int i = 0; i < c.logits.size(); ++i) {
    r.logits.push_back(static_cast<double>(c.logits(i)));
  }
  r.predicted_class = argmax_class(c.logits);
  return r;
}

/// Looks the example up by id.
template <class S>
InterventionResult intervene(const Model<S>& model, const Dataset& ds, const InterventionRequest& req) {
  const auto& e = ds.examples.at(ds.index_of(req.example_id));
  return intervene(model, e, req, ds.schema, e.concepts);
}

struct CurvePoint {
  double ratio = 0;
  double task_accuracy = 0;
};

/// Units (concepts, or concept groups) corrected at each ratio: the
/// round(ratio * units) with the largest |p_hat - c| (max over a group's
/// members), or a seeded random subset.
template <class S>
std::vector<CurvePoint> intervention_sweep(const Model<S>& model, std::span<const Example> examples,
                                           std::span<const double> ratios, InterventionMode mode,
                                           const ConceptSchema& schema,
                                           InterventionOrder order = InterventionOrder::most_erroneous,
                                           std::uint64_t seed = 0) {
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) {
      throw ConfigError("intervention ratios must lie in [0, 1]");
    }
  }
  std::vector<std::vector<int>> units;
  if (mode == InterventionMode::group) {
    for (int g : schema.group_ids()) {
      units.push_back(schema.members(g));
    }
  } else {
    for (int i = 0; i < schema.k(); ++i) {
      units.push_back({i});
    }
  }
  std::vector<std::size_t> hits(ratios.size(), 0);
  Rng rng(seed);
  for (const auto& e : examples) {
    if (!e.concepts) {
      throw SchemaError("intervention sweep needs ground-truth concepts (" + e.id + ")");
    }
    const auto base = model.forward(e.input);
    std::vector<std::pair<double, std::size_t>> err;
    for (std::size_t u = 0; u < units.size(); ++u) {
      double worst = 0;
      for (int i : units[u]) {
        worst = std::max(worst, std::abs(static_cast<double>(base.p(i)) - (*e.concepts)[i]));
      }
      err.emplace_back(worst, u);
    }
    std::vector<std::size_t> ranked;
    if (order == InterventionOrder::most_erroneous) {
      std::stable_sort(err.begin(), err.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      for (const auto& [v, u] : err) {
        ranked.push_back(u);
      }
    } else {
      for (std::size_t u = 0; u < units.size(); ++u) {
        ranked.push_back(u);
      }
      rng.shuffle(std::span(ranked));
    }
    for (std::size_t r = 0; r < ratios.size(); ++r) {
      const auto n = static_cast<std::size_t>(std::llround(ratios[r] * static_cast<double>(units.size())));
      auto c = base;
      std::map<int, S> values;
      for (std::size_t j = 0; j < n; ++j) {
        for (int i : units[ranked[j]]) {
          values[i] = static_cast<S>((*e.concepts)[i]);
        }
      }
      override_concepts(model.config, model.params, c, values);
      hits[r] += argmax_class(c.logits) == e.class_label;
    }
  }
  std::vector<CurvePoint> curve;
  for (std::size_t r = 0; r < ratios.size(); ++r) {
    curve.push_back({ratios[r], examples.empty() ? 0.0 : static_cast<double>(hits[r]) / examples.size()});
  }
  return curve;
}

/// lo, lo + step, ..., hi (inclusive, rounded to the step grid).
inline std::vector<double> ratio_grid(double lo, double hi, double step) {
  if (!(step > 0) || hi < lo) {
    throw ConfigError("bad ratio grid");
  }
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
  for (long i = 0; i <= n; ++i) {
    out.push_back(std::round((lo + i * step) * 1e9) / 1e9);
  }
  return out;
}

}  // namespace sscbm
