#pragma once

// 8-bit PNG encoding through libpng's simplified API.

#include "sscbm/alignment.hpp"
#include "sscbm/dataset.hpp"

#include <png.h>

namespace sscbm {

namespace detail {

inline std::vector<unsigned char> encode_png(const std::vector<unsigned char>& pixels, int width, int height,
                                             png_uint_32 format) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(std::string("png sizing failed: ") + img.message);
  }
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw Error(std::string("png encoding failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

inline unsigned char to_byte(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

/// Grayscale PNG of a saliency map (0 -> black, 1 -> white).
inline std::vector<unsigned char> saliency_png(const SaliencyMap& sm) {
  std::vector<unsigned char> px(sm.map.size());
  std::transform(sm.map.begin(), sm.map.end(), px.begin(), detail::to_byte);
  return detail::encode_png(px, sm.width, sm.height, PNG_FORMAT_GRAY);
}

/// RGB PNG of a 3-channel image with values in [0, 1]; other channel counts
/// render their first channel as grayscale.
inline std::vector<unsigned char> image_png(const Image& img) {
  const bool rgb = img.channels == 3;
  std::vector<unsigned char> px(static_cast<std::size_t>(img.height) * img.width * (rgb ? 3 : 1));
  std::size_t i = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < (rgb ? 3 : 1); ++c) {
        px[i++] = detail::to_byte(img.at(c, y, x));
      }
    }
  }
  return detail::encode_png(px, img.width, img.height, rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY);
}

inline void write_binary(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace sscbm
