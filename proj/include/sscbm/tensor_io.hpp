#pragma once

// Raw float32 tensor files with JSON sidecars, and the named-tensor
// container used by checkpoints.

#include "sscbm/core.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>

namespace sscbm {

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw Error("unexpected end of binary stream");
  }
  return to_little(v);
}

inline void write_f32(std::ostream& out, std::span<const float> values) {
  for (float f : values) {
    write_u32(out, std::bit_cast<std::uint32_t>(f));
  }
}

inline std::vector<float> read_f32(std::istream& in, std::size_t n) {
  std::vector<float> out(n);
  for (auto& f : out) {
    f = std::bit_cast<float>(read_u32(in));
  }
  return out;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + p.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) {
    std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream out(p, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + p.string());
  }
  out << text;
}

}  // namespace detail

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

struct RawTensor {
  std::vector<int> shape;
  std::vector<float> data;
};

inline std::filesystem::path meta_path_for(const std::filesystem::path& file) {
  return file.string() + ".meta.json";
}

/// Writes `<file>` (little-endian float32, row-major) and `<file>.meta.json`.
inline void write_tensor_file(const std::filesystem::path& file, const RawTensor& t) {
  if (shape_numel(t.shape) != t.data.size()) {
    throw ShapeError("tensor payload does not match its shape");
  }
  if (file.has_parent_path()) {
    std::filesystem::create_directories(file.parent_path());
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + file.string());
  }
  detail::write_f32(out, t.data);
  nlohmann::json meta = {{"shape", t.shape}, {"dtype", "float32"}};
  detail::write_text(meta_path_for(file), meta.dump());
}

inline RawTensor read_tensor_file(const std::filesystem::path& file) {
  const auto meta = nlohmann::json::parse(detail::read_text(meta_path_for(file)));
  if (meta.value("dtype", std::string("float32")) != "float32") {
    throw SchemaError("unsupported dtype in " + meta_path_for(file).string());
  }
  RawTensor t;
  t.shape = meta.at("shape").get<std::vector<int>>();
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + file.string());
  }
  t.data = detail::read_f32(in, shape_numel(t.shape));
  return t;
}

struct NamedTensor {
  std::string name;
  RawTensor tensor;
};

inline constexpr char kParamsMagic[8] = {'S', 'S', 'C', 'B', 'M', 'P', 'R', '1'};

// Layout: magic, u32 count, then per tensor: u32 name length, name bytes,
// u32 rank, u32 dims..., float32 payload.
inline void write_named_tensors(const std::filesystem::path& file,
                                const std::vector<NamedTensor>& tensors) {
  if (file.has_parent_path()) {
    std::filesystem::create_directories(file.parent_path());
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) {
    throw Error("cannot write " + file.string());
  }
  out.write(kParamsMagic, sizeof kParamsMagic);
  detail::write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    detail::write_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(nt.tensor.shape.size()));
    for (int d : nt.tensor.shape) {
      detail::write_u32(out, static_cast<std::uint32_t>(d));
    }
    detail::write_f32(out, nt.tensor.data);
  }
}

inline std::vector<NamedTensor> read_named_tensors(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + file.string());
  }
  char magic[sizeof kParamsMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kParamsMagic, sizeof magic) != 0) {
    throw SchemaError(file.string() + " is not a parameter file");
  }
  const auto count = detail::read_u32(in);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name.resize(detail::read_u32(in));
    in.read(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const auto rank = detail::read_u32(in);
    for (std::uint32_t r = 0; r < rank; ++r) {
      nt.tensor.shape.push_back(static_cast<int>(detail::read_u32(in)));
    }
    nt.tensor.data = detail::read_f32(in, shape_numel(nt.tensor.shape));
    out.push_back(std::move(nt));
  }
  return out;
}

}  // namespace sscbm
