#pragma once

// Central finite-difference oracle for the training objective.

#include "sscbm/sscbm.hpp"

namespace sscbm::testing {

struct GroupError {
  std::string name;
  double rel = 0;      // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double norm = 0;     // ||numeric||
  std::size_t checked = 0;
};

struct Flat {
  std::string name;
  double* data;
  std::size_t size;
};

inline std::vector<Flat> flatten(Params<double>& p) {
  std::vector<Flat> out;
  p.visit([&](const std::string& name, auto& t) { out.push_back({name, t.data(), static_cast<std::size_t>(t.size())}); });
  return out;
}

/// A fixed batch: every example is used both as a labeled item and as an
/// unlabeled item carrying a soft pseudo-label.
struct GradBatch {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<ConceptVector> concepts;
  std::vector<std::vector<double>> c_img;

  static GradBatch make(const ModelConfig& cfg, int n, std::uint64_t seed) {
    Rng rng(seed);
    GradBatch b;
    for (int i = 0; i < n; ++i) {
      Image img(cfg.backbone.in_channels, cfg.backbone.image_size, cfg.backbone.image_size);
      for (auto& v : img.data) v = static_cast<float>(rng.uniform());
      b.images.push_back(std::move(img));
      b.labels.push_back(static_cast<int>(rng.below(cfg.l)));
      ConceptVector cv(cfg.k);
      std::vector<double> soft(cfg.k);
      for (int j = 0; j < cfg.k; ++j) {
        cv[j] = static_cast<std::uint8_t>(rng.below(2));
        soft[j] = rng.uniform();
      }
      b.concepts.push_back(std::move(cv));
      b.c_img.push_back(std::move(soft));
    }
    return b;
  }

  double objective(const ModelConfig& cfg, const Params<double>& p, const ObjectiveSettings& st,
                   Params<double>* grad) const {
    std::vector<LabeledItem> lb;
    std::vector<UnlabeledItem> ub;
    for (std::size_t i = 0; i < images.size(); ++i) {
      lb.push_back({&images[i], labels[i], &concepts[i]});
      ub.push_back({&images[i], labels[i], &c_img[i]});
    }
    // the task term of unlabeled items would double-count; keep it on labeled ones
    for (auto& u : ub) u.class_label.reset();
    return step_objective<double>(cfg, p, lb, st.align == AlignTerm::none ? std::span<const UnlabeledItem>{} : ub,
                                  st, grad)
        .total;
  }
};

/// Compares analytic gradients with central differences for every parameter
/// group. `max_per_group` caps the entries probed per group (0 = all),
/// chosen by a seeded draw.
inline std::vector<GroupError> gradient_check(const ModelConfig& cfg, const Params<double>& params,
                                              const GradBatch& batch, const ObjectiveSettings& st,
                                              double step = 1e-6, std::size_t max_per_group = 0,
                                              std::uint64_t seed = 0) {
  auto grad = Params<double>::zeros(cfg);
  batch.objective(cfg, params, st, &grad);
  auto probe = params;
  auto pflat = flatten(probe);
  auto gflat = flatten(grad);
  Rng rng(seed);
  std::vector<GroupError> out;
  for (std::size_t g = 0; g < pflat.size(); ++g) {
    std::vector<std::size_t> idx(pflat[g].size);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_group && idx.size() > max_per_group) {
      rng.shuffle(std::span(idx));
      idx.resize(max_per_group);
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i : idx) {
      double& x = pflat[g].data[i];
      const double saved = x;
      x = saved + step;
      const double up = batch.objective(cfg, probe, st, nullptr);
      x = saved - step;
      const double down = batch.objective(cfg, probe, st, nullptr);
      x = saved;
      const double numeric = (up - down) / (2 * step);
      const double analytic = gflat[g].data[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    out.push_back({pflat[g].name, scale > 1e-10 ? std::sqrt(diff2) / scale : std::sqrt(diff2), std::sqrt(n2),
                   idx.size()});
  }
  return out;
}

inline ObjectiveSettings settings_for(double task, double concept_term, double align, AlignTerm term) {
  ObjectiveSettings st;
  st.weights = {task, concept_term, align};
  st.align = term;
  return st;
}

/// Named objectives probed by the gradient checks.
inline std::vector<std::pair<std::string, ObjectiveSettings>> gradient_objectives() {
  return {{"task", settings_for(1, 0, 0, AlignTerm::none)},
          {"concept", settings_for(0, 1, 0, AlignTerm::none)},
          {"align", settings_for(0, 0, 1, AlignTerm::heatmap_vs_pseudo)},
          {"align_wo_img", settings_for(0, 0, 1, AlignTerm::heatmap_vs_prediction)},
          {"align_wo_align", settings_for(0, 0, 1, AlignTerm::prediction_vs_pseudo)},
          {"total", settings_for(1, 1, 0.1, AlignTerm::heatmap_vs_pseudo)}};
}

}  // namespace sscbm::testing
