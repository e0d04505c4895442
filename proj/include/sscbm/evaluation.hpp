#pragma once

// Concept/task accuracy and saliency localization.

#include "sscbm/training.hpp"

namespace sscbm {

struct Prediction {
  std::vector<double> p_hat;
  std::vector<std::uint8_t> concepts;  // p_hat >= 0.5
  int predicted_class = 0;
};

struct MetricsReport {
  double concept_accuracy = 0;
  double task_accuracy = 0;
  std::vector<double> per_concept_accuracy;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  std::size_t n = 0;

  nlohmann::json to_json() const {
    return {{"concept_accuracy", concept_accuracy}, {"task_accuracy", task_accuracy},
            {"per_concept_accuracy", per_concept_accuracy}, {"confusion", confusion}, {"n", n}};
  }
};

/// Index of the largest logit; ties go to the lowest index.
template <class S>
int argmax_class(const Vec<S>& logits) {
  int best = 0;
  for (int i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) {
      best = i;
    }
  }
  return best;
}

template <class S>
Prediction to_prediction(const ForwardCache<S>& c) {
  Prediction p;
  for (int i = 0; i < c.p.size(); ++i) {
    p.p_hat.push_back(static_cast<double>(c.p(i)));
    p.concepts.push_back(c.p(i) >= S(0.5) ? 1 : 0);
  }
  p.predicted_class = argmax_class(c.logits);
  return p;
}

template <class S>
std::vector<Prediction> predict_all(const Model<S>& model, std::span<const Example> examples) {
  std::vector<Prediction> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    out.push_back(to_prediction(model.forward(e.input)));
  }
  return out;
}

/// Aggregates stored predictions against ground truth.
inline MetricsReport metrics_from_predictions(std::span<const Prediction> preds, std::span<const Example> examples,
                                              int k, int l) {
  if (preds.size() != examples.size()) {
    throw ShapeError("prediction count differs from example count");
  }
  MetricsReport r;
  r.n = examples.size();
  r.per_concept_accuracy.assign(k, 0.0);
  r.confusion.assign(l, std::vector<int>(l, 0));
  std::size_t concept_hits = 0;
  std::size_t task_hits = 0;
  for (std::size_t n = 0; n < examples.size(); ++n) {
    const auto& e = examples[n];
    if (!e.concepts) {
      throw SchemaError("evaluation needs ground-truth concepts (" + e.id + ")");
    }
    for (int i = 0; i < k; ++i) {
      if (preds[n].concepts[i] == (*e.concepts)[i]) {
        ++concept_hits;
        r.per_concept_accuracy[i] += 1.0;
      }
    }
    task_hits += preds[n].predicted_class == e.class_label;
    r.confusion.at(e.class_label).at(preds[n].predicted_class) += 1;
  }
  if (r.n) {
    r.concept_accuracy = static_cast<double>(concept_hits) / static_cast<double>(r.n * k);
    r.task_accuracy = static_cast<double>(task_hits) / static_cast<double>(r.n);
    for (auto& a : r.per_concept_accuracy) {
      a /= static_cast<double>(r.n);
    }
  }
  return r;
}

template <class S>
MetricsReport evaluate(const Model<S>& model, std::span<const Example> examples) {
  const auto preds = predict_all(model, examples);
  return metrics_from_predictions(preds, examples, model.config.k, model.config.l);
}

struct LocalizationReport {
  std::size_t hits = 0;
  std::size_t total = 0;
  double rate = 0;
  // Expected hit rate of a uniformly random argmax.
  double chance = 0;
  std::vector<std::size_t> concept_hits;
  std::vector<std::size_t> concept_total;

  nlohmann::json to_json() const {
    return {{"hits", hits}, {"total", total}, {"rate", rate}, {"chance", chance},
            {"concept_hits", concept_hits}, {"concept_total", concept_total}};
  }
};

/// Fraction of (example, active concept) pairs whose saliency argmax falls in
/// the recorded concept region.
template <class S>
LocalizationReport saliency_localization(const Model<S>& model, std::span<const Example> examples,
                                         std::span<const std::vector<std::optional<Region>>> regions) {
  if (regions.size() != examples.size()) {
    throw ShapeError("region map does not cover the examples");
  }
  LocalizationReport r;
  r.concept_hits.assign(model.config.k, 0);
  r.concept_total.assign(model.config.k, 0);
  double chance_sum = 0;
  for (std::size_t n = 0; n < examples.size(); ++n) {
    const auto& e = examples[n];
    if (!e.concepts) {
      continue;
    }
    const auto c = model.forward(e.input);
    const auto heat = heatmaps_of(model.config, c);
    for (int i = 0; i < model.config.k; ++i) {
      if (!(*e.concepts)[i] || !regions[n][i]) {
        continue;
      }
      const auto sal = render_saliency(heat, i, e.input.height, e.input.width);
      const auto [y, x] = sal.argmax();
      const bool hit = regions[n][i]->contains(x, y);
      r.hits += hit;
      r.concept_hits[i] += hit;
      ++r.concept_total[i];
      ++r.total;
      chance_sum += static_cast<double>(regions[n][i]->area()) / (e.input.height * e.input.width);
    }
  }
  if (r.total) {
    r.rate = static_cast<double>(r.hits) / static_cast<double>(r.total);
    r.chance = chance_sum / static_cast<double>(r.total);
  }
  return r;
}

}  // namespace sscbm
