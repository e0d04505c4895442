#pragma once

// Concept heatmaps: cosine similarity between each projected feature-map
// position and each concept embedding, average-pooled into concept scores,
// thresholded (hard) or squashed (soft), and upsampled into saliency maps.

#include "sscbm/core.hpp"

#include <algorithm>

namespace sscbm {

/// values(p * width + q, i) is the similarity of position (p, q) to concept i.
template <class S>
struct HeatmapStack {
  int height = 0;
  int width = 0;
  Mat<S> values;  // (H*W) x k

  int k() const { return static_cast<int>(values.cols()); }
  S at(int p, int q, int i) const { return values(p * width + q, i); }
};

template <class S>
struct AlignmentScores {
  Vec<S> s;
  Vec<S> soft;
  std::vector<std::uint8_t> hard;
};

struct SaliencyMap {
  int concept_index = 0;
  int height = 0;
  int width = 0;
  std::vector<float> map;  // row-major, [0, 1]

  float at(int y, int x) const { return map[static_cast<std::size_t>(y) * width + x]; }

  /// First maximum in row-major order, as (y, x).
  std::pair<int, int> argmax() const {
    const auto it = std::max_element(map.begin(), map.end());
    const auto idx = static_cast<int>(it - map.begin());
    return {idx / width, idx % width};
  }
};

/// Cosine similarity of every feature row against every embedding row; eps
/// in the denominator makes zero vectors score 0.
template <class S>
HeatmapStack<S> concept_heatmaps(const Mat<S>& projected, int height, int width, const Mat<S>& embeddings) {
  if (projected.rows() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeError("feature map rows do not match its spatial extent");
  }
  if (projected.cols() != embeddings.cols()) {
    throw ShapeError("feature map channels (" + std::to_string(projected.cols()) +
                     ") differ from embedding size (" + std::to_string(embeddings.cols()) + ")");
  }
  const Vec<S> nv = projected.rowwise().norm();
  const Vec<S> ne = embeddings.rowwise().norm();
  HeatmapStack<S> h;
  h.height = height;
  h.width = width;
  h.values = projected * embeddings.transpose();
  const S eps = static_cast<S>(kCosineEps);
  for (Eigen::Index r = 0; r < h.values.rows(); ++r) {
    for (Eigen::Index i = 0; i < h.values.cols(); ++i) {
      h.values(r, i) /= nv(r) * ne(i) + eps;
    }
  }
  return h;
}

/// Backward of concept_heatmaps: given dL/dH, returns (dL/dV, dL/dE).
template <class S>
std::pair<Mat<S>, Mat<S>> concept_heatmaps_backward(const Mat<S>& projected, const Mat<S>& embeddings,
                                                    const Mat<S>& dheat) {
  const Vec<S> nv = projected.rowwise().norm();
  const Vec<S> ne = embeddings.rowwise().norm();
  const Mat<S> dots = projected * embeddings.transpose();
  const S eps = static_cast<S>(kCosineEps);
  // H = dot / D with D = |v||e| + eps:
  // dH/dv = e / D - dot |e| v / (|v| D^2), symmetric for e.
  Mat<S> coef_cross(dots.rows(), dots.cols());  // multiplies the other vector
  Mat<S> coef_self_v(dots.rows(), dots.cols());
  Mat<S> coef_self_e(dots.rows(), dots.cols());
  for (Eigen::Index r = 0; r < dots.rows(); ++r) {
    for (Eigen::Index i = 0; i < dots.cols(); ++i) {
      const S d = nv(r) * ne(i) + eps;
      const S g = dheat(r, i);
      coef_cross(r, i) = g / d;
      const S q = g * dots(r, i) / (d * d);
      coef_self_v(r, i) = nv(r) > S(0) ? q * ne(i) / nv(r) : S(0);
      coef_self_e(r, i) = ne(i) > S(0) ? q * nv(r) / ne(i) : S(0);
    }
  }
  Mat<S> dv = coef_cross * embeddings;
  dv -= coef_self_v.rowwise().sum().asDiagonal() * projected;
  Mat<S> de = coef_cross.transpose() * projected;
  de -= coef_self_e.colwise().sum().transpose().asDiagonal() * embeddings;
  return {std::move(dv), std::move(de)};
}

/// Average over positions.
template <class S>
Vec<S> pool_scores(const HeatmapStack<S>& stack) {
  return stack.values.colwise().mean().transpose();
}

/// 1 where s_i > tau (strict).
template <class S>
std::vector<std::uint8_t> harden(const Vec<S>& s, S tau) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(s.size()));
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    out[i] = s(i) > tau ? 1 : 0;
  }
  return out;
}

/// logistic(beta * (s_i - tau)); the differentiable stand-in for harden.
template <class S>
Vec<S> soften(const Vec<S>& s, S tau, S beta) {
  if (!(beta > S(0))) {
    throw ConfigError("beta must be positive");
  }
  Vec<S> out(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    out(i) = logistic(beta * (s(i) - tau));
  }
  return out;
}

template <class S>
AlignmentScores<S> alignment_scores(const HeatmapStack<S>& stack, S tau, S beta) {
  AlignmentScores<S> a;
  a.s = pool_scores(stack);
  a.soft = soften(a.s, tau, beta);
  a.hard = harden(a.s, tau);
  return a;
}

/// Bilinear resize of one heatmap slice (half-pixel centers, edge clamped).
template <class S>
std::vector<float> upsample_slice(const HeatmapStack<S>& stack, int concept_index, int out_h, int out_w) {
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
  const double sy = static_cast<double>(stack.height) / out_h;
  const double sx = static_cast<double>(stack.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, stack.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, stack.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, stack.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, stack.width - 1);
      const double wx = fx - x0;
      const double top = (1 - wx) * stack.at(y0, x0, concept_index) + wx * stack.at(y0, x1, concept_index);
      const double bot = (1 - wx) * stack.at(y1, x0, concept_index) + wx * stack.at(y1, x1, concept_index);
      out[static_cast<std::size_t>(y) * out_w + x] = static_cast<float>((1 - wy) * top + wy * bot);
    }
  }
  return out;
}

/// Upsampled, min-max normalized heatmap slice; constant slices give 0.5.
template <class S>
SaliencyMap render_saliency(const HeatmapStack<S>& stack, int concept_index, int out_h, int out_w) {
  if (concept_index < 0 || concept_index >= stack.k()) {
    throw ConfigError("concept index out of range");
  }
  SaliencyMap sm;
  sm.concept_index = concept_index;
  sm.height = out_h;
  sm.width = out_w;
  sm.map = upsample_slice(stack, concept_index, out_h, out_w);
  const auto [lo, hi] = std::minmax_element(sm.map.begin(), sm.map.end());
  const float mn = *lo;
  const float range = *hi - mn;
  for (auto& v : sm.map) {
    v = range > 0.0f ? (v - mn) / range : 0.5f;
  }
  return sm;
}

}  // namespace sscbm
