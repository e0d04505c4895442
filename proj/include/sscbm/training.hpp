#pragma once

// Joint labeled/unlabeled objective and the SGD training loop.

#include "sscbm/alignment.hpp"
#include "sscbm/encoder.hpp"
#include "sscbm/losses.hpp"
#include "sscbm/pseudolabel.hpp"

#include <functional>
#include <optional>

namespace sscbm {

enum class Ablation { full, wo_img, wo_align };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full:
      return "full";
    case Ablation::wo_img:
      return "wo_img";
    case Ablation::wo_align:
      return "wo_align";
  }
  return "?";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "wo_img") return Ablation::wo_img;
  if (s == "wo_align") return Ablation::wo_align;
  throw ConfigError("unknown ablation: " + s);
}

struct TrainConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  double lr = 0.05;
  double weight_decay = 5e-6;
  int epochs = 100;
  int batch_size = 16;
  int k_nn = 2;
  double tau = 0.6;
  double beta = 10.0;
  int m = 16;
  Variant variant = Variant::sscbm;
  Ablation ablation = Ablation::full;
  std::uint64_t seed = 0;
  // Hide class labels of unlabeled examples from the task loss.
  bool strict_unsupervised = false;
  HeatmapEmbedding heatmap_embedding = HeatmapEmbedding::mixed;
  // Use the model's initial backbone as the KNN reference encoder.
  bool share_reference_encoder = false;
  std::vector<int> backbone_channels = {16, 32, 32};
  std::vector<int> backbone_strides = {2, 2, 1};
  std::vector<int> backbone_kernels = {3, 3, 1};
  bool backbone_bias = false;
  bool coord_channels = false;
  bool moment_pooling = true;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0) {
      throw ConfigError("lambda1 and lambda2 must be non-negative");
    }
    if (!(lr > 0) || weight_decay < 0) {
      throw ConfigError("lr must be positive and weight_decay non-negative");
    }
    if (epochs < 0 || batch_size < 1 || k_nn < 1 || m < 1) {
      throw ConfigError("epochs, batch_size, k_nn and m must be positive");
    }
    if (!(tau > -1 && tau < 1)) {
      throw ConfigError("tau must lie in (-1, 1)");
    }
    if (!(beta > 0)) {
      throw ConfigError("beta must be positive");
    }
  }

  /// Model architecture for a dataset with k concepts, l classes and the
  /// given input shape.
  ModelConfig model_config(int k, int l, int in_channels, int image_size) const {
    ModelConfig mc;
    mc.backbone.in_channels = in_channels;
    mc.backbone.image_size = image_size;
    mc.backbone.channels = backbone_channels;
    mc.backbone.strides = backbone_strides;
    mc.backbone.kernels = backbone_kernels;
    mc.backbone.bias = backbone_bias;
    mc.backbone.coord_channels = coord_channels;
    mc.backbone.moment_pooling = moment_pooling;
    mc.m = m;
    mc.k = k;
    mc.l = l;
    mc.variant = variant;
    mc.heatmap_embedding = heatmap_embedding;
    mc.validate();
    return mc;
  }

  nlohmann::json to_json() const {
    return {{"lambda1", lambda1},
            {"lambda2", lambda2},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"k_nn", k_nn},
            {"tau", tau},
            {"beta", beta},
            {"m", m},
            {"variant", to_string(variant)},
            {"ablation", to_string(ablation)},
            {"seed", seed},
            {"strict_unsupervised", strict_unsupervised},
            {"heatmap_embedding", to_string(heatmap_embedding)},
            {"share_reference_encoder", share_reference_encoder},
            {"backbone_channels", backbone_channels},
            {"backbone_strides", backbone_strides},
            {"backbone_kernels", backbone_kernels},
            {"backbone_bias", backbone_bias},
            {"coord_channels", coord_channels},
            {"moment_pooling", moment_pooling}};
  }

  /// Reads known keys over the defaults; unknown keys are left to the caller.
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

  static TrainConfig from_json(const nlohmann::json& j, TrainConfig c) {
    try {
      auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) {
          field = j.at(key).get<std::decay_t<decltype(field)>>();
        }
      };
      get("lambda1", c.lambda1);
      get("lambda2", c.lambda2);
      get("lr", c.lr);
      get("weight_decay", c.weight_decay);
      get("epochs", c.epochs);
      get("batch_size", c.batch_size);
      get("k_nn", c.k_nn);
      get("tau", c.tau);
      get("beta", c.beta);
      get("m", c.m);
      get("seed", c.seed);
      get("strict_unsupervised", c.strict_unsupervised);
      get("share_reference_encoder", c.share_reference_encoder);
      get("backbone_channels", c.backbone_channels);
      get("backbone_strides", c.backbone_strides);
      get("backbone_kernels", c.backbone_kernels);
      get("backbone_bias", c.backbone_bias);
      get("coord_channels", c.coord_channels);
      get("moment_pooling", c.moment_pooling);
      if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
      if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
      if (j.contains("heatmap_embedding")) {
        c.heatmap_embedding = parse_heatmap_embedding(j.at("heatmap_embedding").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad config value: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// A model snapshot: architecture plus parameters.
template <class S = float>
struct Model {
  ModelConfig config;
  Params<S> params;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) { return {cfg, Params<S>::init(cfg, seed)}; }

  ForwardCache<S> forward(const Image& input) const { return sscbm::forward(config, params, input); }
};

template <class S>
HeatmapStack<S> heatmaps_of(const ModelConfig& cfg, const ForwardCache<S>& c) {
  return concept_heatmaps(c.features.projected, c.features.height, c.features.width,
                          c.heatmap_embeddings(cfg.heatmap_embedding));
}

// ---------------------------------------------------------------------------
// Objective

/// Coefficients of the three loss terms inside one step.
struct TermWeights {
  double task = 1.0;
  double concept_term = 1.0;
  double align = 0.1;
};

/// What the alignment slot computes for an unlabeled example.
enum class AlignTerm { none, heatmap_vs_pseudo, heatmap_vs_prediction, prediction_vs_pseudo };

inline AlignTerm align_term_for(Variant v, Ablation a) {
  if (v != Variant::sscbm) {
    return AlignTerm::none;
  }
  switch (a) {
    case Ablation::full:
      return AlignTerm::heatmap_vs_pseudo;
    case Ablation::wo_img:
      return AlignTerm::heatmap_vs_prediction;
    case Ablation::wo_align:
      return AlignTerm::prediction_vs_pseudo;
  }
  return AlignTerm::none;
}

struct LabeledItem {
  const Image* input;
  int class_label;
  const ConceptVector* concepts;
};

struct UnlabeledItem {
  const Image* input;
  std::optional<int> class_label;  // absent in strict-unsupervised mode
  const std::vector<double>* c_img;
};

struct ObjectiveSettings {
  TermWeights weights;
  AlignTerm align = AlignTerm::heatmap_vs_pseudo;
  double tau = 0.6;
  double beta = 10.0;
};

/// One step's loss: task CE averaged over every example that carries a class
/// label, concept BCE averaged over the labeled batch, alignment averaged over
/// the unlabeled batch. Accumulates parameter gradients into `grad` when given.
template <class S>
LossBreakdown step_objective(const ModelConfig& cfg, const Params<S>& params, std::span<const LabeledItem> labeled,
                             std::span<const UnlabeledItem> unlabeled, const ObjectiveSettings& st,
                             Params<S>* grad) {
  std::size_t n_task = labeled.size();
  for (const auto& u : unlabeled) {
    n_task += u.class_label.has_value();
  }
  const S w_task = n_task ? static_cast<S>(st.weights.task / n_task) : S(0);
  const S w_concept = labeled.empty() ? S(0) : static_cast<S>(st.weights.concept_term / labeled.size());
  const S w_align = unlabeled.empty() ? S(0) : static_cast<S>(st.weights.align / unlabeled.size());
  const S tau = static_cast<S>(st.tau);
  const S beta = static_cast<S>(st.beta);

  double task_sum = 0;
  double concept_sum = 0;
  double align_sum = 0;

  for (const auto& item : labeled) {
    const auto c = forward(cfg, params, *item.input);
    Upstream<S> up;
    task_sum += task_loss(c.logits, item.class_label, grad ? &up.dlogits : nullptr);
    Vec<S> target(cfg.k);
    for (int i = 0; i < cfg.k; ++i) {
      target(i) = static_cast<S>((*item.concepts)[i]);
    }
    concept_sum += concept_loss(c.p, target, grad ? &up.dp : nullptr);
    if (grad) {
      up.dlogits *= w_task;
      up.dp *= w_concept;
      backward(cfg, params, c, up, *grad);
    }
  }

  for (const auto& item : unlabeled) {
    const auto c = forward(cfg, params, *item.input);
    Upstream<S> up;
    if (item.class_label) {
      task_sum += task_loss(c.logits, *item.class_label, grad ? &up.dlogits : nullptr);
      if (grad) {
        up.dlogits *= w_task;
      }
    }
    // only the pseudo-label terms read c_img; other terms may pass an empty one
    Vec<S> c_img = Vec<S>::Zero(cfg.k);
    if (st.align == AlignTerm::heatmap_vs_pseudo || st.align == AlignTerm::prediction_vs_pseudo) {
      if (!item.c_img || static_cast<int>(item.c_img->size()) != cfg.k) {
        throw ShapeError("pseudo label has the wrong length");
      }
      for (int i = 0; i < cfg.k; ++i) {
        c_img(i) = static_cast<S>((*item.c_img)[i]);
      }
    }
    switch (st.align) {
      case AlignTerm::none:
        break;
      case AlignTerm::prediction_vs_pseudo: {
        Vec<S> dp;
        align_sum += binary_cross_entropy(c_img, c.p, grad ? &dp : nullptr);
        if (grad) {
          up.dp = w_align * dp;
        }
        break;
      }
      case AlignTerm::heatmap_vs_pseudo:
      case AlignTerm::heatmap_vs_prediction: {
        const auto heat = heatmaps_of(cfg, c);
        const Vec<S> s = pool_scores(heat);
        const Vec<S> soft = soften(s, tau, beta);
        const bool vs_pred = st.align == AlignTerm::heatmap_vs_prediction;
        const Vec<S>& target = vs_pred ? c.p : c_img;
        Vec<S> dsoft;
        align_sum += binary_cross_entropy(target, soft, grad ? &dsoft : nullptr);
        if (!grad) {
          break;
        }
        if (vs_pred) {
          // the prediction is a live target: d/dt of -(t log q + (1-t) log(1-q)) / k
          up.dp = Vec<S>(cfg.k);
          for (int i = 0; i < cfg.k; ++i) {
            const S q = detail::clamp_prob(soft(i));
            up.dp(i) = w_align * (std::log(S(1) - q) - std::log(q)) / static_cast<S>(cfg.k);
          }
        }
        const S positions = static_cast<S>(heat.values.rows());
        Mat<S> dheat(heat.values.rows(), cfg.k);
        for (int i = 0; i < cfg.k; ++i) {
          const S ds = dsoft(i) * beta * soft(i) * (S(1) - soft(i));
          dheat.col(i).setConstant(w_align * ds / positions);
        }
        auto [dv, de] = concept_heatmaps_backward(c.features.projected,
                                                  c.heatmap_embeddings(cfg.heatmap_embedding), dheat);
        up.dfeature = std::move(dv);
        (cfg.heatmap_embedding == HeatmapEmbedding::mixed ? up.dmixed : up.dpos) = std::move(de);
        break;
      }
    }
    if (grad) {
      backward(cfg, params, c, up, *grad);
    }
  }

  const double task = n_task ? task_sum / n_task : 0.0;
  const double concept_term = labeled.empty() ? 0.0 : concept_sum / labeled.size();
  const double align = unlabeled.empty() || st.align == AlignTerm::none ? 0.0 : align_sum / unlabeled.size();
  LossBreakdown b = total_loss(task, concept_term, align, st.weights.concept_term, st.weights.align);
  // total as optimized, honoring a zero task weight
  b.total = st.weights.task * task + st.weights.concept_term * concept_term + st.weights.align * align;
  return b;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;
  std::optional<double> concept_accuracy;
  std::optional<double> task_accuracy;

  nlohmann::json to_json() const {
    nlohmann::json j = loss.to_json();
    j["epoch"] = epoch;
    if (concept_accuracy) j["concept_accuracy"] = *concept_accuracy;
    if (task_accuracy) j["task_accuracy"] = *task_accuracy;
    return j;
  }
};

struct TrainResult {
  Model<float> model;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string message;
};

/// Optional per-epoch evaluation hook returning (concept acc, task acc).
using EpochEvaluator = std::function<std::pair<double, double>(const Model<float>&)>;

namespace detail {

// Endless shuffled stream of indices; reshuffles on wrap.
class IndexStream {
 public:
  IndexStream(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    for (std::size_t i = 0; i < n; ++i) {
      order_[i] = i;
    }
    rng_.shuffle(std::span(order_));
  }

  std::size_t next() {
    if (pos_ == order_.size()) {
      rng_.shuffle(std::span(order_));
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

template <class S>
void sgd_step(Params<S>& p, const Params<S>& g, S lr, S wd) {
  std::vector<Eigen::Map<Vec<S>>> grads;
  g.visit([&](const std::string&, const auto& t) {
    grads.emplace_back(const_cast<S*>(t.data()), t.size());
  });
  std::size_t i = 0;
  p.visit([&](const std::string&, auto& t) {
    auto& gt = grads[i++];
    Eigen::Map<Vec<S>> pt(t.data(), t.size());
    pt -= lr * (gt + wd * pt);
  });
}

}  // namespace detail

/// Each step draws one labeled and one unlabeled sub-batch of batch_size; the
/// shorter stream cycles and an epoch covers the longer one. Deterministic for
/// a fixed seed.
inline TrainResult train(const ModelConfig& mc, std::span<const Example> labeled, std::span<const Example> unlabeled,
                         const PseudoLabelMap& pseudo, const TrainConfig& cfg, const EpochEvaluator& evaluator = {},
                         std::function<void(const EpochRecord&)> on_epoch = {}) {
  cfg.validate();
  const AlignTerm align = align_term_for(cfg.variant, cfg.ablation);
  std::vector<const std::vector<double>*> c_img(unlabeled.size(), nullptr);
  const std::vector<double> no_label;
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    auto it = pseudo.find(unlabeled[i].id);
    if (it == pseudo.end()) {
      if (align == AlignTerm::heatmap_vs_pseudo || align == AlignTerm::prediction_vs_pseudo) {
        throw ConfigError("no pseudo label for unlabeled example " + unlabeled[i].id);
      }
      c_img[i] = &no_label;
    } else {
      if (static_cast<int>(it->second.c_img.size()) != mc.k) {
        throw ShapeError("pseudo label of " + unlabeled[i].id + " has the wrong length");
      }
      c_img[i] = &it->second.c_img;
    }
  }
  for (const auto& e : labeled) {
    if (!e.concepts) {
      throw SchemaError("labeled example " + e.id + " has no concepts");
    }
  }
  if (labeled.empty() && unlabeled.empty()) {
    throw ConfigError("nothing to train on");
  }

  TrainResult result{Model<float>::init(mc, cfg.seed), {}, false, {}};
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  detail::IndexStream lstream(labeled.size(), rng);
  detail::IndexStream ustream(unlabeled.size(), rng);
  const std::size_t longest = std::max(labeled.size(), unlabeled.size());
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps = (longest + bs - 1) / bs;

  ObjectiveSettings st;
  st.weights = {1.0, cfg.lambda1, cfg.lambda2};
  st.align = align;
  st.tau = cfg.tau;
  st.beta = cfg.beta;

  auto& params = result.model.params;
  Params<float> last_good = params;
  std::vector<LabeledItem> lb;
  std::vector<UnlabeledItem> ub;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    LossBreakdown sum{0, 0, 0, 0, cfg.lambda1, cfg.lambda2};
    for (std::size_t step = 0; step < steps; ++step) {
      lb.clear();
      ub.clear();
      if (!labeled.empty()) {
        for (std::size_t b = 0; b < bs; ++b) {
          const auto& e = labeled[lstream.next()];
          lb.push_back({&e.input, e.class_label, &*e.concepts});
        }
      }
      if (!unlabeled.empty()) {
        for (std::size_t b = 0; b < bs; ++b) {
          const std::size_t i = ustream.next();
          const auto& e = unlabeled[i];
          std::optional<int> y;
          if (!cfg.strict_unsupervised) {
            y = e.class_label;
          }
          ub.push_back({&e.input, y, c_img[i]});
        }
      }
      auto grad = Params<float>::zeros(mc);
      LossBreakdown b;
      try {
        b = step_objective<float>(mc, params, lb, ub, st, &grad);
      } catch (const DivergenceError& e) {
        params = last_good;
        result.diverged = true;
        result.message = "epoch " + std::to_string(epoch) + ": " + e.what();
        return result;
      }
      detail::sgd_step(params, grad, static_cast<float>(cfg.lr), static_cast<float>(cfg.weight_decay));
      sum.task += b.task;
      sum.concept_term += b.concept_term;
      sum.align += b.align;
      sum.total += b.total;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = sum;
    const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
    rec.loss.task /= n;
    rec.loss.concept_term /= n;
    rec.loss.align /= n;
    rec.loss.total /= n;
    if (!std::isfinite(rec.loss.total)) {
      params = last_good;
      result.diverged = true;
      result.message = "epoch " + std::to_string(epoch) + ": non-finite total loss";
      return result;
    }
    if (evaluator) {
      const auto [ca, ta] = evaluator(result.model);
      rec.concept_accuracy = ca;
      rec.task_accuracy = ta;
    }
    result.history.push_back(rec);
    if (on_epoch) {
      on_epoch(rec);
    }
    last_good = params;
  }
  return result;
}

}  // namespace sscbm
