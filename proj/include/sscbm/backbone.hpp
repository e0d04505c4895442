#pragma once

// Small convolutional backbone: a stack of same-padded convolutions with ReLU,
// producing a spatial feature map (positions x channels) and its global
// average pool.

#include "sscbm/core.hpp"
#include "sscbm/dataset.hpp"
#include "sscbm/random.hpp"

#include <string_view>

namespace sscbm {

struct BackboneConfig {
  int in_channels = 3;
  int image_size = 32;
  std::vector<int> channels = {16, 32, 32};
  std::vector<int> strides = {2, 2, 1};
  std::vector<int> kernels = {3, 3, 1};  // odd; padding kernel / 2
  // Biases of the convolutions and of the feature projection. Without them
  // an all-zero input region maps to exactly zero features.
  bool bias = false;
  // Appends normalized x/y coordinate planes to the input.
  bool coord_channels = false;
  // Adds the x- and y-weighted means of each channel to the pooled code.
  bool moment_pooling = true;

  int conv_inputs() const { return in_channels + (coord_channels ? 2 : 0); }
  int out_channels() const { return channels.back(); }
  int latent_dim() const { return out_channels() * (moment_pooling ? 3 : 1); }

  int out_size() const {
    int s = image_size;
    for (int st : strides) {
      s = (s - 1) / st + 1;  // odd kernel, same padding
    }
    return s;
  }

  void validate() const {
    if (channels.empty() || channels.size() != strides.size() || channels.size() != kernels.size()) {
      throw ConfigError("backbone needs one stride and one kernel size per conv stage");
    }
    for (int k : kernels) {
      if (k < 1 || k % 2 == 0) {
        throw ConfigError("backbone kernel sizes must be odd and positive");
      }
    }
    for (int c : channels) {
      if (c < 1) {
        throw ConfigError("backbone channel counts must be positive");
      }
    }
    for (int s : strides) {
      if (s < 1) {
        throw ConfigError("backbone strides must be positive");
      }
    }
    if (in_channels < 1 || image_size < 1) {
      throw ConfigError("backbone input shape must be positive");
    }
  }

  std::string id() const {
    std::string s = "conv";
    for (std::size_t i = 0; i < channels.size(); ++i) {
      s += "-" + std::to_string(channels[i]) + "k" + std::to_string(kernels[i]) + "s" + std::to_string(strides[i]);
    }
    if (!bias) {
      s += "-nobias";
    }
    if (coord_channels) {
      s += "-coord";
    }
    if (moment_pooling) {
      s += "-moments";
    }
    return s;
  }
};

template <class S>
struct BackboneParams {
  std::vector<Mat<S>> weight;  // (K * K * C_in) x C_out, rows ordered (ky, kx, c)
  std::vector<Vec<S>> bias;    // empty when the config has no biases

  static BackboneParams zeros(const BackboneConfig& cfg) {
    BackboneParams p;
    int cin = cfg.conv_inputs();
    for (std::size_t l = 0; l < cfg.channels.size(); ++l) {
      const int cout = cfg.channels[l];
      p.weight.push_back(Mat<S>::Zero(cfg.kernels[l] * cfg.kernels[l] * cin, cout));
      if (cfg.bias) {
        p.bias.push_back(Vec<S>::Zero(cout));
      }
      cin = cout;
    }
    return p;
  }

  /// He-normal weights, zero biases.
  static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
    auto p = zeros(cfg);
    for (auto& w : p.weight) {
      const double sd = std::sqrt(2.0 / static_cast<double>(w.rows()));
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        w.data()[i] = static_cast<S>(sd * rng.normal());
      }
    }
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

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.weight.size(); ++i) {
      f("backbone.conv" + std::to_string(i) + ".weight", self.weight[i]);
      if (i < self.bias.size()) {
        f("backbone.conv" + std::to_string(i) + ".bias", self.bias[i]);
      }
    }
  }
};

template <class S>
struct BackboneCache {
  std::vector<Mat<S>> cols;  // im2col of each stage's input
  std::vector<Mat<S>> out;   // post-ReLU output of each stage
  std::vector<int> in_size;  // spatial side length entering each stage
  std::vector<int> out_size;
  std::vector<int> stride;
  std::vector<int> kernel;

  const Mat<S>& features() const { return out.back(); }
};

namespace detail {

// Input image (C, H, W) to a (H*W) x C row-major matrix, optionally with
// coordinate planes in [-1, 1].
template <class S>
Mat<S> image_to_rows(const Image& img, bool coords) {
  const int extra = coords ? 2 : 0;
  Mat<S> m(img.height * img.width, img.channels + extra);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const int r = y * img.width + x;
      for (int c = 0; c < img.channels; ++c) {
        m(r, c) = static_cast<S>(img.at(c, y, x));
      }
      if (coords) {
        m(r, img.channels) = img.width > 1 ? S(2) * x / (img.width - 1) - S(1) : S(0);
        m(r, img.channels + 1) = img.height > 1 ? S(2) * y / (img.height - 1) - S(1) : S(0);
      }
    }
  }
  return m;
}

template <class S>
void im2col(const Mat<S>& in, int size, int kernel, int stride, int out_size, Mat<S>& cols) {
  const int c = static_cast<int>(in.cols());
  const int pad = kernel / 2;
  cols.setZero(out_size * out_size, kernel * kernel * c);
  for (int oy = 0; oy < out_size; ++oy) {
    for (int ox = 0; ox < out_size; ++ox) {
      const int r = oy * out_size + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= size) {
          continue;
        }
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= size) {
            continue;
          }
          cols.row(r).segment((ky * kernel + kx) * c, c) = in.row(iy * size + ix);
        }
      }
    }
  }
}

template <class S>
Mat<S> col2im(const Mat<S>& dcols, int size, int kernel, int stride, int out_size, int c) {
  const int pad = kernel / 2;
  Mat<S> din = Mat<S>::Zero(size * size, c);
  for (int oy = 0; oy < out_size; ++oy) {
    for (int ox = 0; ox < out_size; ++ox) {
      const int r = oy * out_size + ox;
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= size) {
          continue;
        }
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= size) {
            continue;
          }
          din.row(iy * size + ix) += dcols.row(r).segment((ky * kernel + kx) * c, c);
        }
      }
    }
  }
  return din;
}

}  // namespace detail

template <class S>
BackboneCache<S> backbone_forward(const BackboneConfig& cfg, const BackboneParams<S>& p, const Image& img) {
  if (img.channels != cfg.in_channels || img.height != cfg.image_size || img.width != cfg.image_size) {
    throw ShapeError("input shape (" + std::to_string(img.channels) + "," + std::to_string(img.height) + "," +
                     std::to_string(img.width) + ") does not match the configured (" +
                     std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + ")");
  }
  BackboneCache<S> cache;
  Mat<S> x = detail::image_to_rows<S>(img, cfg.coord_channels);
  int size = cfg.image_size;
  for (std::size_t l = 0; l < p.weight.size(); ++l) {
    const int stride = cfg.strides[l];
    const int kernel = cfg.kernels[l];
    const int out = (size - 1) / stride + 1;
    Mat<S> cols;
    detail::im2col(x, size, kernel, stride, out, cols);
    Mat<S> y = cols * p.weight[l];
    if (l < p.bias.size()) {
      y.rowwise() += p.bias[l].transpose();
    }
    y = y.cwiseMax(S(0));
    cache.in_size.push_back(size);
    cache.out_size.push_back(out);
    cache.stride.push_back(stride);
    cache.kernel.push_back(kernel);
    cache.cols.push_back(std::move(cols));
    cache.out.push_back(y);
    x = std::move(y);
    size = out;
  }
  return cache;
}

/// Global average pool over positions.
template <class S>
Vec<S> global_pool(const Mat<S>& features) {
  return features.colwise().mean().transpose();
}

namespace detail {

// Normalized coordinate in [-1, 1] of index i along an axis of length n.
inline double axis_coord(int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; }

}  // namespace detail

/// Latent code of a (side x side) feature map: the channel means, followed
/// by the x- and y-weighted channel means under moment pooling.
template <class S>
Vec<S> latent_pool(const BackboneConfig& cfg, const Mat<S>& features, int side) {
  if (!cfg.moment_pooling) {
    return global_pool(features);
  }
  const Eigen::Index c = features.cols();
  Vec<S> h = Vec<S>::Zero(3 * c);
  for (int y = 0; y < side; ++y) {
    const S wy = static_cast<S>(detail::axis_coord(y, side));
    for (int x = 0; x < side; ++x) {
      const S wx = static_cast<S>(detail::axis_coord(x, side));
      const auto row = features.row(y * side + x).transpose();
      h.segment(0, c) += row;
      h.segment(c, c) += wx * row;
      h.segment(2 * c, c) += wy * row;
    }
  }
  return h / static_cast<S>(side * side);
}

/// d(loss)/d(features) given d(loss)/dh.
template <class S>
Mat<S> latent_pool_backward(const BackboneConfig& cfg, const Vec<S>& dh, int side) {
  const Eigen::Index c = cfg.out_channels();
  const S n = static_cast<S>(side * side);
  Mat<S> d(side * side, c);
  for (int y = 0; y < side; ++y) {
    const S wy = static_cast<S>(detail::axis_coord(y, side));
    for (int x = 0; x < side; ++x) {
      const S wx = static_cast<S>(detail::axis_coord(x, side));
      Vec<S> g = dh.segment(0, c);
      if (cfg.moment_pooling) {
        g += wx * dh.segment(c, c) + wy * dh.segment(2 * c, c);
      }
      d.row(y * side + x) = (g / n).transpose();
    }
  }
  return d;
}

/// Accumulates parameter gradients given d(loss)/d(final feature map).
template <class S>
void backbone_backward(const BackboneParams<S>& p, const BackboneCache<S>& cache, Mat<S> dout,
                       BackboneParams<S>& grad) {
  for (std::size_t l = p.weight.size(); l-- > 0;) {
    // ReLU'(0) is taken as 0
    dout = (cache.out[l].array() > S(0)).select(dout, S(0));
    grad.weight[l].noalias() += cache.cols[l].transpose() * dout;
    if (l < grad.bias.size()) {
      grad.bias[l] += dout.colwise().sum().transpose();
    }
    if (l == 0) {
      break;
    }
    const Mat<S> dcols = dout * p.weight[l].transpose();
    const int k = cache.kernel[l];
    const int cin = static_cast<int>(p.weight[l].rows() / (k * k));
    dout = detail::col2im(dcols, cache.in_size[l], k, cache.stride[l], cache.out_size[l], cin);
  }
}

}  // namespace sscbm
