#pragma once

// The trainable concept-embedding model: backbone, per-concept embedding
// generator, shared scoring function, embedding mixture, feature-map
// projection and linear label predictor, with a hand-written backward pass.

#include "sscbm/backbone.hpp"

#include <map>

namespace sscbm {

enum class Variant { sscbm, cbm_ssl, cem_ssl };
enum class Activation { leaky_relu, identity };
enum class HeatmapEmbedding { mixed, positive };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::sscbm:
      return "sscbm";
    case Variant::cbm_ssl:
      return "cbm_ssl";
    case Variant::cem_ssl:
      return "cem_ssl";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "sscbm") return Variant::sscbm;
  if (s == "cbm_ssl") return Variant::cbm_ssl;
  if (s == "cem_ssl") return Variant::cem_ssl;
  throw ConfigError("unknown variant: " + s);
}

inline std::string to_string(HeatmapEmbedding h) { return h == HeatmapEmbedding::mixed ? "mixed" : "positive"; }

inline HeatmapEmbedding parse_heatmap_embedding(const std::string& s) {
  if (s == "mixed") return HeatmapEmbedding::mixed;
  if (s == "positive") return HeatmapEmbedding::positive;
  throw ConfigError("unknown heatmap_embedding: " + s);
}

inline std::string to_string(Activation a) { return a == Activation::leaky_relu ? "leaky_relu" : "identity"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation: " + s);
}

struct ModelConfig {
  BackboneConfig backbone;
  int m = 16;  // embedding size
  int k = 10;  // concepts
  int l = 9;   // classes
  Variant variant = Variant::sscbm;
  Activation activation = Activation::leaky_relu;
  double leaky_slope = 0.01;
  HeatmapEmbedding heatmap_embedding = HeatmapEmbedding::mixed;

  int n_h() const { return backbone.latent_dim(); }
  // CBM reads the probability vector, CEM-style variants the concatenated embeddings.
  bool predicts_from_probabilities() const { return variant == Variant::cbm_ssl; }
  int predictor_inputs() const { return predicts_from_probabilities() ? k : k * m; }

  void validate() const {
    backbone.validate();
    if (m < 1 || k < 1 || l < 1) {
      throw ConfigError("m, k and l must be positive");
    }
  }
};

template <class S>
struct Params {
  BackboneParams<S> backbone;
  Mat<S> gen_w;  // (k * 2m) x n_h; concept i owns rows [2mi, 2mi+m) (positive) and [2mi+m, 2m(i+1)) (negative)
  Vec<S> gen_b;
  Vec<S> score_w;  // 2m, shared across concepts
  Vec<S> score_b;  // 1
  Mat<S> proj_w;   // C_raw x m
  Vec<S> proj_b;   // m, or empty when the backbone has no biases
  Mat<S> pred_w;   // l x predictor_inputs
  Vec<S> pred_b;   // l

  static Params zeros(const ModelConfig& cfg) {
    Params p;
    p.backbone = BackboneParams<S>::zeros(cfg.backbone);
    p.gen_w = Mat<S>::Zero(2 * cfg.m * cfg.k, cfg.n_h());
    p.gen_b = Vec<S>::Zero(2 * cfg.m * cfg.k);
    p.score_w = Vec<S>::Zero(2 * cfg.m);
    p.score_b = Vec<S>::Zero(1);
    p.proj_w = Mat<S>::Zero(cfg.backbone.out_channels(), cfg.m);
    p.proj_b = Vec<S>::Zero(cfg.backbone.bias ? cfg.m : 0);
    p.pred_w = Mat<S>::Zero(cfg.l, cfg.predictor_inputs());
    p.pred_b = Vec<S>::Zero(cfg.l);
    return p;
  }

  static Params init(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Params p = zeros(cfg);
    p.backbone = BackboneParams<S>::init(cfg.backbone, rng);
    auto fill = [&rng](auto& t, double sd) {
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        t.data()[i] = static_cast<S>(sd * rng.normal());
      }
    };
    fill(p.gen_w, std::sqrt(2.0 / cfg.n_h()));
    fill(p.score_w, std::sqrt(1.0 / (2 * cfg.m)));
    fill(p.proj_w, std::sqrt(1.0 / cfg.backbone.out_channels()));
    fill(p.pred_w, std::sqrt(1.0 / cfg.predictor_inputs()));
    return p;
  }

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  template <class T>
  Params<T> cast() const {
    Params<T> out;
    out.backbone.weight.clear();
    for (const auto& w : backbone.weight) out.backbone.weight.push_back(w.template cast<T>());
    for (const auto& b : backbone.bias) out.backbone.bias.push_back(b.template cast<T>());
    out.gen_w = gen_w.template cast<T>();
    out.gen_b = gen_b.template cast<T>();
    out.score_w = score_w.template cast<T>();
    out.score_b = score_b.template cast<T>();
    out.proj_w = proj_w.template cast<T>();
    out.proj_b = proj_b.template cast<T>();
    out.pred_w = pred_w.template cast<T>();
    out.pred_b = pred_b.template cast<T>();
    return out;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    self.backbone.visit(f);
    f(std::string("generator.weight"), self.gen_w);
    f(std::string("generator.bias"), self.gen_b);
    f(std::string("scorer.weight"), self.score_w);
    f(std::string("scorer.bias"), self.score_b);
    f(std::string("projection.weight"), self.proj_w);
    if (self.proj_b.size()) {
      f(std::string("projection.bias"), self.proj_b);
    }
    f(std::string("predictor.weight"), self.pred_w);
    f(std::string("predictor.bias"), self.pred_b);
  }
};

/// Raw last-stage features and their per-position projection to m channels.
template <class S>
struct SpatialFeatureMap {
  int height = 0;
  int width = 0;
  Mat<S> raw;        // (H*W) x C
  Mat<S> projected;  // (H*W) x m
};

/// Per-concept embedding pair, activation probability and mixture.
template <class S>
struct ConceptEmbeddingState {
  Vec<S> pos;
  Vec<S> neg;
  S p_hat = 0;
  Vec<S> mixed;
};

template <class S>
struct ForwardCache {
  BackboneCache<S> backbone;
  Vec<S> h;
  Vec<S> gen_pre;    // generator pre-activations
  Mat<S> pos;        // k x m
  Mat<S> neg;        // k x m
  Vec<S> score_pre;  // k
  Vec<S> p;          // k
  Mat<S> mixed;      // k x m
  SpatialFeatureMap<S> features;
  Vec<S> logits;

  ConceptEmbeddingState<S> state(int i) const {
    return {pos.row(i).transpose(), neg.row(i).transpose(), p(i), mixed.row(i).transpose()};
  }

  /// Embeddings compared against the feature map.
  const Mat<S>& heatmap_embeddings(HeatmapEmbedding which) const {
    return which == HeatmapEmbedding::mixed ? mixed : pos;
  }
};

// ---------------------------------------------------------------------------
// Forward pieces

template <class S>
Vec<S> extract_latent(const ModelConfig& cfg, const Params<S>& p, const Image& input) {
  const auto cache = backbone_forward(cfg.backbone, p.backbone, input);
  return latent_pool(cfg.backbone, cache.features(), cache.out_size.back());
}

template <class S>
Mat<S> project_features(const Params<S>& p, const Mat<S>& raw) {
  Mat<S> v = raw * p.proj_w;
  if (p.proj_b.size()) {
    v.rowwise() += p.proj_b.transpose();
  }
  return v;
}

template <class S>
SpatialFeatureMap<S> extract_feature_map(const ModelConfig& cfg, const Params<S>& p, const Image& input) {
  auto cache = backbone_forward(cfg.backbone, p.backbone, input);
  SpatialFeatureMap<S> fm;
  fm.height = fm.width = cache.out_size.back();
  fm.raw = cache.features();
  fm.projected = project_features(p, fm.raw);
  return fm;
}

template <class S>
S activate(const ModelConfig& cfg, S x) {
  if (cfg.activation == Activation::identity || x > S(0)) {
    return x;
  }
  return static_cast<S>(cfg.leaky_slope) * x;
}

template <class S>
S activate_grad(const ModelConfig& cfg, S x) {
  if (cfg.activation == Activation::identity || x > S(0)) {
    return S(1);
  }
  return static_cast<S>(cfg.leaky_slope);
}

/// k (positive, negative) embedding pairs, a(W_i h + b_i), as two k x m matrices.
template <class S>
std::pair<Mat<S>, Mat<S>> generate_embeddings(const ModelConfig& cfg, const Params<S>& p, const Vec<S>& h,
                                              Vec<S>* pre_out = nullptr) {
  if (h.size() != cfg.n_h()) {
    throw ShapeError("latent code has dimension " + std::to_string(h.size()) + ", expected " +
                     std::to_string(cfg.n_h()));
  }
  Vec<S> pre = p.gen_w * h + p.gen_b;
  Mat<S> pos(cfg.k, cfg.m);
  Mat<S> neg(cfg.k, cfg.m);
  for (int i = 0; i < cfg.k; ++i) {
    for (int j = 0; j < cfg.m; ++j) {
      pos(i, j) = activate(cfg, pre(2 * cfg.m * i + j));
      neg(i, j) = activate(cfg, pre(2 * cfg.m * i + cfg.m + j));
    }
  }
  if (pre_out) {
    *pre_out = std::move(pre);
  }
  return {std::move(pos), std::move(neg)};
}

template <class S>
S score_logit(const Params<S>& p, const Eigen::Ref<const Vec<S>>& pos, const Eigen::Ref<const Vec<S>>& neg) {
  const auto m = pos.size();
  return p.score_w.head(m).dot(pos) + p.score_w.tail(m).dot(neg) + p.score_b(0);
}

/// logistic(W_s [pos; neg] + b_s)
template <class S>
S score_concept(const Params<S>& p, const Eigen::Ref<const Vec<S>>& pos, const Eigen::Ref<const Vec<S>>& neg) {
  return logistic(score_logit(p, pos, neg));
}

template <class S>
Vec<S> mix_embedding(const Eigen::Ref<const Vec<S>>& pos, const Eigen::Ref<const Vec<S>>& neg, S p_hat) {
  return p_hat * pos + (S(1) - p_hat) * neg;
}

template <class S>
Mat<S> mix_all(const Mat<S>& pos, const Mat<S>& neg, const Vec<S>& p) {
  Mat<S> mixed(pos.rows(), pos.cols());
  for (Eigen::Index i = 0; i < pos.rows(); ++i) {
    mixed.row(i) = p(i) * pos.row(i) + (S(1) - p(i)) * neg.row(i);
  }
  return mixed;
}

template <class S>
Vec<S> predictor_input(const ModelConfig& cfg, const Vec<S>& p_hat, const Mat<S>& mixed) {
  if (cfg.predicts_from_probabilities()) {
    return p_hat;
  }
  // row-major k x m flattens concept-major
  return Eigen::Map<const Vec<S>>(mixed.data(), mixed.size());
}

/// Linear label predictor over the concept bottleneck.
template <class S>
Vec<S> predict_label(const ModelConfig& cfg, const Params<S>& p, const Vec<S>& p_hat, const Mat<S>& mixed) {
  const Vec<S> x = predictor_input(cfg, p_hat, mixed);
  if (x.size() != p.pred_w.cols()) {
    throw ShapeError("predictor expects " + std::to_string(p.pred_w.cols()) + " inputs, got " +
                     std::to_string(x.size()) + " (variant mismatch?)");
  }
  return p.pred_w * x + p.pred_b;
}

template <class S>
ForwardCache<S> forward(const ModelConfig& cfg, const Params<S>& p, const Image& input) {
  ForwardCache<S> c;
  c.backbone = backbone_forward(cfg.backbone, p.backbone, input);
  const Mat<S>& raw = c.backbone.features();
  c.h = latent_pool(cfg.backbone, raw, c.backbone.out_size.back());
  std::tie(c.pos, c.neg) = generate_embeddings(cfg, p, c.h, &c.gen_pre);
  c.score_pre.resize(cfg.k);
  c.p.resize(cfg.k);
  for (int i = 0; i < cfg.k; ++i) {
    c.score_pre(i) = score_logit<S>(p, c.pos.row(i).transpose(), c.neg.row(i).transpose());
    c.p(i) = logistic(c.score_pre(i));
  }
  c.mixed = mix_all(c.pos, c.neg, c.p);
  c.features.height = c.features.width = c.backbone.out_size.back();
  c.features.raw = raw;
  c.features.projected = project_features(p, raw);
  c.logits = predict_label(cfg, p, c.p, c.mixed);
  return c;
}

/// Replaces selected activation probabilities and recomputes the mixture and
/// logits. Other concepts are untouched.
template <class S>
void override_concepts(const ModelConfig& cfg, const Params<S>& p, ForwardCache<S>& c,
                       const std::map<int, S>& overrides) {
  for (const auto& [i, value] : overrides) {
    if (i < 0 || i >= cfg.k) {
      throw ConfigError("override index " + std::to_string(i) + " is out of range");
    }
    c.p(i) = value;
    c.mixed.row(i) = mix_embedding<S>(c.pos.row(i).transpose(), c.neg.row(i).transpose(), value).transpose();
  }
  c.logits = predict_label(cfg, p, c.p, c.mixed);
}

// ---------------------------------------------------------------------------
// Backward

/// Loss gradients arriving at the model's outputs. Empty members are skipped.
template <class S>
struct Upstream {
  Vec<S> dlogits;   // l
  Vec<S> dp;        // k, direct on the probabilities
  Mat<S> dmixed;    // k x m
  Mat<S> dpos;      // k x m
  Mat<S> dfeature;  // (H*W) x m, on the projected feature map
};

template <class S>
void backward(const ModelConfig& cfg, const Params<S>& p, const ForwardCache<S>& c, const Upstream<S>& up,
              Params<S>& g) {
  const int k = cfg.k;
  const int m = cfg.m;
  Mat<S> dmixed = up.dmixed.size() ? up.dmixed : Mat<S>::Zero(k, m);
  Mat<S> dpos = up.dpos.size() ? up.dpos : Mat<S>::Zero(k, m);
  Mat<S> dneg = Mat<S>::Zero(k, m);
  Vec<S> dp = up.dp.size() ? up.dp : Vec<S>::Zero(k);

  if (up.dlogits.size()) {
    const Vec<S> x = predictor_input(cfg, c.p, c.mixed);
    g.pred_w.noalias() += up.dlogits * x.transpose();
    g.pred_b += up.dlogits;
    const Vec<S> dx = p.pred_w.transpose() * up.dlogits;
    if (cfg.predicts_from_probabilities()) {
      dp += dx;
    } else {
      dmixed += Eigen::Map<const Mat<S>>(dx.data(), k, m);
    }
  }

  Mat<S> draw = Mat<S>::Zero(c.features.raw.rows(), c.features.raw.cols());
  if (up.dfeature.size()) {
    g.proj_w.noalias() += c.features.raw.transpose() * up.dfeature;
    if (g.proj_b.size()) {
      g.proj_b += up.dfeature.colwise().sum().transpose();
    }
    draw.noalias() += up.dfeature * p.proj_w.transpose();
  }

  // mixture
  for (int i = 0; i < k; ++i) {
    dpos.row(i) += c.p(i) * dmixed.row(i);
    dneg.row(i) += (S(1) - c.p(i)) * dmixed.row(i);
    dp(i) += (c.pos.row(i) - c.neg.row(i)).dot(dmixed.row(i));
  }
  // scorer
  for (int i = 0; i < k; ++i) {
    const S dt = dp(i) * c.p(i) * (S(1) - c.p(i));
    g.score_w.head(m) += dt * c.pos.row(i).transpose();
    g.score_w.tail(m) += dt * c.neg.row(i).transpose();
    g.score_b(0) += dt;
    dpos.row(i) += dt * p.score_w.head(m).transpose();
    dneg.row(i) += dt * p.score_w.tail(m).transpose();
  }
  // generator
  Vec<S> dpre(2 * m * k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < m; ++j) {
      const int a = 2 * m * i + j;
      const int b = a + m;
      dpre(a) = dpos(i, j) * activate_grad(cfg, c.gen_pre(a));
      dpre(b) = dneg(i, j) * activate_grad(cfg, c.gen_pre(b));
    }
  }
  g.gen_w.noalias() += dpre * c.h.transpose();
  g.gen_b += dpre;
  const Vec<S> dh = p.gen_w.transpose() * dpre;
  draw += latent_pool_backward(cfg.backbone, dh, c.backbone.out_size.back());
  backbone_backward(p.backbone, c.backbone, std::move(draw), g.backbone);
}

}  // namespace sscbm
