#pragma once

// Checkpoint directory: params.bin (named float32 tensors), config.json
// (architecture) and schema.json.

#include "sscbm/tensor_io.hpp"
#include "sscbm/training.hpp"

namespace sscbm {

inline nlohmann::json backbone_to_json(const BackboneConfig& b) {
  return {{"id", b.id()},
          {"in_channels", b.in_channels},
          {"image_size", b.image_size},
          {"channels", b.channels},
          {"strides", b.strides},
          {"kernels", b.kernels},
          {"bias", b.bias},
          {"coord_channels", b.coord_channels},
          {"moment_pooling", b.moment_pooling}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig b;
  b.in_channels = j.at("in_channels").get<int>();
  b.image_size = j.at("image_size").get<int>();
  b.channels = j.at("channels").get<std::vector<int>>();
  b.strides = j.at("strides").get<std::vector<int>>();
  b.kernels = j.at("kernels").get<std::vector<int>>();
  b.bias = j.at("bias").get<bool>();
  b.coord_channels = j.at("coord_channels").get<bool>();
  b.moment_pooling = j.at("moment_pooling").get<bool>();
  b.validate();
  if (j.contains("id") && j.at("id").get<std::string>() != b.id()) {
    throw SchemaError("backbone id " + j.at("id").get<std::string>() + " disagrees with its fields (" + b.id() +
                      ")");
  }
  return b;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_h", c.n_h()},
          {"m", c.m},
          {"k", c.k},
          {"l", c.l},
          {"variant", to_string(c.variant)},
          {"activation", to_string(c.activation)},
          {"leaky_slope", c.leaky_slope},
          {"heatmap_embedding", to_string(c.heatmap_embedding)},
          {"backbone", backbone_to_json(c.backbone)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.backbone = backbone_from_json(j.at("backbone"));
    c.m = j.at("m").get<int>();
    c.k = j.at("k").get<int>();
    c.l = j.at("l").get<int>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.activation = parse_activation(j.value("activation", std::string("leaky_relu")));
    c.leaky_slope = j.value("leaky_slope", 0.01);
    c.heatmap_embedding = parse_heatmap_embedding(j.value("heatmap_embedding", std::string("mixed")));
    c.validate();
    if (j.contains("n_h") && j.at("n_h").get<int>() != c.n_h()) {
      throw SchemaError("config n_h does not match the backbone");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed model config: ") + e.what());
  }
}

template <class S>
std::vector<NamedTensor> params_to_tensors(const Params<S>& p) {
  std::vector<NamedTensor> out;
  p.visit([&](const std::string& name, const auto& t) {
    NamedTensor nt;
    nt.name = name;
    if constexpr (std::decay_t<decltype(t)>::ColsAtCompileTime == 1) {
      nt.tensor.shape = {static_cast<int>(t.size())};
    } else {
      nt.tensor.shape = {static_cast<int>(t.rows()), static_cast<int>(t.cols())};
    }
    nt.tensor.data.resize(t.size());
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      nt.tensor.data[i] = static_cast<float>(t.data()[i]);
    }
    out.push_back(std::move(nt));
  });
  return out;
}

/// Fills a zero-initialized parameter set from named tensors; every tensor the
/// config implies must be present with the exact shape.
template <class S>
Params<S> params_from_tensors(const ModelConfig& cfg, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const RawTensor*> by_name;
  for (const auto& nt : tensors) {
    if (!by_name.emplace(nt.name, &nt.tensor).second) {
      throw SchemaError("duplicate tensor " + nt.name);
    }
  }
  auto p = Params<S>::zeros(cfg);
  std::size_t used = 0;
  p.visit([&](const std::string& name, auto& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw SchemaError("checkpoint lacks tensor " + name);
    }
    std::vector<int> want;
    if constexpr (std::decay_t<decltype(t)>::ColsAtCompileTime == 1) {
      want = {static_cast<int>(t.size())};
    } else {
      want = {static_cast<int>(t.rows()), static_cast<int>(t.cols())};
    }
    if (it->second->shape != want) {
      throw ShapeError("tensor " + name + " has the wrong shape for the configured model");
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      t.data()[i] = static_cast<S>(it->second->data[i]);
    }
    ++used;
  });
  if (used != by_name.size()) {
    throw SchemaError("checkpoint holds tensors the configured model does not use");
  }
  return p;
}

struct Checkpoint {
  Model<float> model;
  ConceptSchema schema;
};

inline void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                            const ConceptSchema& schema) {
  if (schema.k() != model.config.k) {
    throw ShapeError("schema and model disagree on k");
  }
  std::filesystem::create_directories(dir);
  write_named_tensors(dir / "params.bin", params_to_tensors(model.params));
  detail::write_text(dir / "config.json", model_config_to_json(model.config).dump(2) + "\n");
  detail::write_text(dir / "schema.json", schema.to_json().dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw NotFoundError("checkpoint directory " + dir.string() + " does not exist");
  }
  Checkpoint c;
  c.model.config = model_config_from_json(nlohmann::json::parse(detail::read_text(dir / "config.json")));
  c.schema = load_schema(dir / "schema.json");
  if (c.schema.k() != c.model.config.k) {
    throw SchemaError("schema.json and config.json disagree on k");
  }
  c.model.params = params_from_tensors<float>(c.model.config, read_named_tensors(dir / "params.bin"));
  return c;
}

}  // namespace sscbm
