#pragma once

// Cross-entropy terms of the joint objective and their gradients.

#include "sscbm/core.hpp"

#include <nlohmann/json.hpp>

#include <span>

namespace sscbm {

namespace detail {

template <class S>
S clamp_prob(S p) {
  const S lo = static_cast<S>(kProbClamp);
  return std::clamp(p, lo, S(1) - lo);
}

}  // namespace detail

/// Mean binary cross-entropy of predictions `prob` against soft or hard
/// `target`, probabilities clamped to [1e-7, 1 - 1e-7]. Writes dL/dprob
/// (zero where the clamp is active) when `grad` is given.
template <class S>
S binary_cross_entropy(const Vec<S>& target, const Vec<S>& prob, Vec<S>* grad = nullptr) {
  if (target.size() != prob.size() || prob.size() == 0) {
    throw ShapeError("binary cross-entropy needs equal, non-empty vectors");
  }
  const S n = static_cast<S>(prob.size());
  const S lo = static_cast<S>(kProbClamp);
  S loss = 0;
  if (grad) {
    grad->resize(prob.size());
  }
  for (Eigen::Index i = 0; i < prob.size(); ++i) {
    const S q = detail::clamp_prob(prob(i));
    const S t = target(i);
    loss -= t * std::log(q) + (S(1) - t) * std::log(S(1) - q);
    if (grad) {
      const bool clamped = prob(i) < lo || prob(i) > S(1) - lo;
      (*grad)(i) = clamped ? S(0) : (-t / q + (S(1) - t) / (S(1) - q)) / n;
    }
  }
  return loss / n;
}

/// Concept loss: BCE of predicted activations against ground-truth concepts.
template <class S>
S concept_loss(const Vec<S>& p_hat, const Vec<S>& concepts, Vec<S>* dp = nullptr) {
  return binary_cross_entropy(concepts, p_hat, dp);
}

/// Alignment loss: BCE with the pseudo label as target and the soft
/// alignment probability as prediction.
template <class S>
S alignment_loss(const Vec<S>& c_img, const Vec<S>& soft_align, Vec<S>* dsoft = nullptr) {
  return binary_cross_entropy(c_img, soft_align, dsoft);
}

/// -log softmax(logits)[y], with the softmax probability clamped like the
/// binary terms. Writes dL/dlogits when requested.
template <class S>
S task_loss(const Vec<S>& logits, int y, Vec<S>* dlogits = nullptr) {
  if (y < 0 || y >= logits.size()) {
    throw ConfigError("class label out of range");
  }
  const S mx = logits.maxCoeff();
  const Vec<S> e = (logits.array() - mx).exp();
  const S z = e.sum();
  const S py = e(y) / z;
  const S lo = static_cast<S>(kProbClamp);
  if (dlogits) {
    *dlogits = e / z;
    (*dlogits)(y) -= S(1);
    if (py < lo) {
      dlogits->setZero();
    }
  }
  if (py < lo) {
    return -std::log(lo);
  }
  // log-sum-exp form keeps precision near py = 1
  return std::log(z) - (logits(y) - mx);
}

struct LossBreakdown {
  double task = 0;
  double concept_term = 0;
  double align = 0;
  double total = 0;
  double lambda1 = 1.0;
  double lambda2 = 0.1;

  nlohmann::json to_json() const {
    return {{"task", task}, {"concept", concept_term}, {"align", align}, {"total", total},
            {"lambda1", lambda1}, {"lambda2", lambda2}};
  }
};

/// task + lambda1 * concept_term + lambda2 * align.
inline LossBreakdown total_loss(double task, double concept_term, double align, double lambda1, double lambda2) {
  if (!std::isfinite(task) || !std::isfinite(concept_term) || !std::isfinite(align)) {
    throw DivergenceError("non-finite loss component (task=" + std::to_string(task) + ", concept=" +
                          std::to_string(concept_term) + ", align=" + std::to_string(align) + ")");
  }
  LossBreakdown b{task, concept_term, align, 0.0, lambda1, lambda2};
  b.total = task + lambda1 * concept_term + lambda2 * align;
  return b;
}

}  // namespace sscbm
