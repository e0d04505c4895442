#pragma once

// Read-only HTTP JSON API over a checkpoint and a dataset. Handlers are pure
// functions of an immutable ServerState; the httplib server only routes.

#include "sscbm/checkpoint.hpp"
#include "sscbm/config.hpp"

#include <httplib.h>

#include <charconv>
#include <memory>
#include <mutex>

namespace sscbm {

struct ServerState {
  std::shared_ptr<const Model<float>> model;
  std::shared_ptr<const Dataset> dataset;
  std::map<std::string, std::size_t> index;  // example id -> dataset position
  SplitTable splits;                         // always holds "all"
  std::filesystem::path saliency_dir;        // precomputed <id>/<i>.png; empty to render on demand
  std::optional<std::vector<CurvePoint>> curve;

  const ConceptSchema& schema() const { return dataset->schema; }
};

struct ServerSources {
  std::filesystem::path checkpoint_dir;
  std::filesystem::path dataset_dir;
  std::filesystem::path split_file;  // optional
  std::filesystem::path saliency_dir;  // optional
  std::filesystem::path curve_csv;   // optional
};

/// SSCBM_CHECKPOINT_DIR, when set, replaces the configured checkpoint path.
inline std::filesystem::path resolve_checkpoint_dir(const std::filesystem::path& configured) {
  if (const char* env = std::getenv("SSCBM_CHECKPOINT_DIR"); env && *env) {
    return env;
  }
  return configured;
}

inline ServerState make_server_state(Model<float> model, Dataset ds, SplitTable splits = {},
                                     std::filesystem::path saliency_dir = {},
                                     std::optional<std::vector<CurvePoint>> curve = {}) {
  if (model.config.k != ds.schema.k()) {
    throw SchemaError("model has " + std::to_string(model.config.k) + " concepts, dataset schema has " +
                      std::to_string(ds.schema.k()));
  }
  ServerState s;
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    s.index.emplace(ds.examples[i].id, i);
  }
  for (const auto& [name, ids] : splits) {
    for (const auto& id : ids) {
      if (!s.index.contains(id)) {
        throw SchemaError("split " + name + " names unknown example " + id);
      }
    }
  }
  auto& all = splits["all"];
  all.clear();
  for (const auto& e : ds.examples) {
    all.push_back(e.id);
  }
  s.splits = std::move(splits);
  s.model = std::make_shared<const Model<float>>(std::move(model));
  s.dataset = std::make_shared<const Dataset>(std::move(ds));
  s.saliency_dir = std::move(saliency_dir);
  s.curve = std::move(curve);
  return s;
}

inline ServerState load_server_state(const ServerSources& src) {
  auto ckpt = load_checkpoint(src.checkpoint_dir);
  auto ds = load_dataset(src.dataset_dir);
  if (ckpt.schema.names != ds.schema.names) {
    throw SchemaError("checkpoint schema differs from the dataset schema");
  }
  SplitTable splits;
  if (!src.split_file.empty()) {
    splits = read_split_table(src.split_file);
  }
  std::optional<std::vector<CurvePoint>> curve;
  if (!src.curve_csv.empty()) {
    curve = parse_intervention_csv(detail::read_text(src.curve_csv));
  }
  return make_server_state(std::move(ckpt.model), std::move(ds), std::move(splits), src.saliency_dir,
                           std::move(curve));
}

// ---------------------------------------------------------------------------
// Handlers

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

namespace detail {

inline ApiResponse json_response(int status, const nlohmann::json& j) { return {status, "application/json", j.dump()}; }

inline ApiResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

/// Softmax in double with the max subtracted.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) {
    return out;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (auto& v : out) {
    v /= z;
  }
  return out;
}

// A request whose body is not acceptable; carries the HTTP status.
struct RequestError {
  int status;
  std::string message;
};

inline const Example& lookup(const ServerState& s, const std::string& id) {
  const auto it = s.index.find(id);
  if (it == s.index.end()) {
    throw RequestError{404, "unknown example id: " + id};
  }
  return s.dataset->examples[it->second];
}

inline nlohmann::json parse_body(const std::string& body) {
  try {
    auto j = nlohmann::json::parse(body);
    if (!j.is_object()) {
      throw RequestError{400, "request body must be a JSON object"};
    }
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw RequestError{400, std::string("malformed JSON: ") + e.what()};
  }
}

inline std::string example_id_of(const nlohmann::json& body) {
  if (!body.contains("example_id") || !body["example_id"].is_string()) {
    throw RequestError{400, "example_id (string) is required"};
  }
  return body["example_id"].get<std::string>();
}

/// Parses {"3": 1, "7": 0}; keys must be integers and values 0 or 1.
inline std::map<int, int> parse_overrides(const nlohmann::json& body, int k) {
  std::map<int, int> out;
  if (!body.contains("overrides")) {
    return out;
  }
  const auto& o = body["overrides"];
  if (!o.is_object()) {
    throw RequestError{400, "overrides must be an object of index -> 0|1"};
  }
  for (const auto& [key, value] : o.items()) {
    int idx = 0;
    const auto [end, ec] = std::from_chars(key.data(), key.data() + key.size(), idx);
    if (ec != std::errc{} || end != key.data() + key.size()) {
      throw RequestError{400, "override key is not an integer: " + key};
    }
    if (!value.is_number_integer() && !value.is_boolean()) {
      throw RequestError{400, "override value for " + key + " must be 0 or 1"};
    }
    const int v = value.is_boolean() ? value.get<bool>() : value.get<int>();
    if (idx < 0 || idx >= k) {
      throw RequestError{422, "override index " + key + " is out of range [0, " + std::to_string(k) + ")"};
    }
    if (v != 0 && v != 1) {
      throw RequestError{422, "override value for " + key + " must be 0 or 1"};
    }
    out[idx] = v;
  }
  return out;
}

inline bool saliency_cached(const ServerState& s, const std::string& id, int i) {
  return !s.saliency_dir.empty() && std::filesystem::exists(s.saliency_dir / id / (std::to_string(i) + ".png"));
}

}  // namespace detail

/// PredictionPayload for one example given its (possibly intervened) outputs.
inline nlohmann::json prediction_payload(const ServerState& s, const Example& e, const InterventionResult& r) {
  const auto& schema = s.schema();
  const auto probs = detail::softmax(r.logits);
  nlohmann::json concepts = nlohmann::json::array();
  for (int i = 0; i < schema.k(); ++i) {
    nlohmann::json c{{"index", i},
                     {"name", schema.names[i]},
                     {"group", schema.groups[i]},
                     {"p_hat", r.p_hat[i]},
                     {"predicted", r.p_hat[i] >= 0.5}};
    c["ground_truth"] = e.concepts ? nlohmann::json((*e.concepts)[i]) : nlohmann::json(nullptr);
    concepts.push_back(std::move(c));
  }
  nlohmann::json applied = nlohmann::json::array();
  for (const auto& [i, v] : r.applied) {
    nlohmann::json a{{"index", i}, {"value", v}};
    a["matches_ground_truth"] = e.concepts ? nlohmann::json((*e.concepts)[i] == v) : nlohmann::json(nullptr);
    applied.push_back(std::move(a));
  }
  return {{"example_id", e.id},
          {"class_probs", probs},
          {"predicted_class", r.predicted_class},
          {"ground_truth_class", e.class_label},
          {"concepts", std::move(concepts)},
          {"interventions", std::move(applied)},
          // maps are either cached on disk or rendered from the live model
          {"saliency_available", true}};
}

inline ApiResponse api_schema(const ServerState& s) {
  auto j = s.schema().to_json();
  j["n_classes"] = s.dataset->n_classes;
  return detail::json_response(200, j);
}

/// Page of ids with base64 PNG thumbnails.
inline ApiResponse api_examples(const ServerState& s, const std::string& split, std::size_t offset,
                                std::size_t limit) {
  const auto it = s.splits.find(split);
  if (it == s.splits.end()) {
    return detail::error_response(404, "unknown split: " + split);
  }
  const auto& ids = it->second;
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = offset; i < ids.size() && i < offset + limit; ++i) {
    const auto& e = s.dataset->examples[s.index.at(ids[i])];
    const auto png = image_png(e.input);
    items.push_back({{"id", e.id},
                     {"class_label", e.class_label},
                     {"thumbnail", "data:image/png;base64," +
                                       httplib::detail::base64_encode(std::string(png.begin(), png.end()))}});
  }
  return detail::json_response(
      200, {{"split", split}, {"offset", offset}, {"limit", limit}, {"total", ids.size()}, {"items", items}});
}

inline ApiResponse api_predict(const ServerState& s, const std::string& body) {
  try {
    const auto j = detail::parse_body(body);
    const auto& e = detail::lookup(s, detail::example_id_of(j));
    const auto r = intervene(*s.model, e, InterventionRequest{e.id, {}, InterventionMode::individual}, s.schema(),
                             e.concepts);
    return detail::json_response(200, prediction_payload(s, e, r));
  } catch (const detail::RequestError& err) {
    return detail::error_response(err.status, err.message);
  }
}

inline ApiResponse api_intervene(const ServerState& s, const std::string& body) {
  try {
    const auto j = detail::parse_body(body);
    const auto& e = detail::lookup(s, detail::example_id_of(j));
    InterventionRequest req{e.id, detail::parse_overrides(j, s.schema().k()), InterventionMode::individual};
    if (j.contains("mode")) {
      if (!j["mode"].is_string()) {
        throw detail::RequestError{400, "mode must be a string"};
      }
      try {
        req.mode = parse_intervention_mode(j["mode"].get<std::string>());
      } catch (const ConfigError& ce) {
        throw detail::RequestError{400, ce.what()};
      }
    }
    const auto r = intervene(*s.model, e, req, s.schema(), e.concepts);
    return detail::json_response(200, prediction_payload(s, e, r));
  } catch (const detail::RequestError& err) {
    return detail::error_response(err.status, err.message);
  }
}

inline ApiResponse api_saliency(const ServerState& s, const std::string& id, int concept_index) {
  try {
    const auto& e = detail::lookup(s, id);
    if (concept_index < 0 || concept_index >= s.schema().k()) {
      return detail::error_response(404, "concept index out of range");
    }
    if (detail::saliency_cached(s, id, concept_index)) {
      return {200, "image/png", detail::read_text(s.saliency_dir / id / (std::to_string(concept_index) + ".png"))};
    }
    const auto c = s.model->forward(e.input);
    const auto sal = render_saliency(heatmaps_of(s.model->config, c), concept_index, e.input.height, e.input.width);
    const auto png = saliency_png(sal);
    return {200, "image/png", std::string(png.begin(), png.end())};
  } catch (const detail::RequestError& err) {
    return detail::error_response(err.status, err.message);
  }
}

inline ApiResponse api_intervention_curve(const ServerState& s) {
  if (!s.curve) {
    return detail::error_response(404, "no intervention curve was loaded");
  }
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : *s.curve) {
    points.push_back({{"ratio", p.ratio}, {"task_acc", p.task_accuracy}});
  }
  return detail::json_response(200, {{"points", points}});
}

// ---------------------------------------------------------------------------
// Snapshot holder and HTTP wiring

/// Hands out the current snapshot; reload swaps it as a whole. In-flight
/// requests keep the snapshot they started with.
class StateHolder {
 public:
  explicit StateHolder(ServerState initial) : state_(std::make_shared<const ServerState>(std::move(initial))) {}

  std::shared_ptr<const ServerState> snapshot() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  void swap(ServerState next) {
    auto p = std::make_shared<const ServerState>(std::move(next));
    std::lock_guard lock(mu_);
    state_ = std::move(p);
  }

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const ServerState> state_;
};

/// Reloads the snapshot from `src` when the checkpoint's params.bin changes.
class CheckpointWatcher {
 public:
  CheckpointWatcher(StateHolder& holder, ServerSources src) : holder_(holder), src_(std::move(src)) {
    last_ = stamp();
  }

  /// Returns true when a new snapshot was installed. A checkpoint that fails
  /// to load leaves the current snapshot in place.
  bool poll() {
    const auto now = stamp();
    if (now == last_) {
      return false;
    }
    try {
      holder_.swap(load_server_state(src_));
      last_ = now;
      return true;
    } catch (const std::exception& e) {
      std::cerr << "checkpoint reload skipped: " << e.what() << "\n";
      return false;
    }
  }

 private:
  std::optional<std::filesystem::file_time_type> stamp() const {
    std::error_code ec;
    const auto t = std::filesystem::last_write_time(src_.checkpoint_dir / "params.bin", ec);
    return ec ? std::nullopt : std::optional(t);
  }

  StateHolder& holder_;
  ServerSources src_;
  std::optional<std::filesystem::file_time_type> last_;
};

namespace detail {

inline void send(httplib::Response& res, const ApiResponse& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

inline std::size_t query_size(const httplib::Request& req, const char* key, std::size_t fallback) {
  if (!req.has_param(key)) {
    return fallback;
  }
  const auto v = req.get_param_value(key);
  std::size_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size()) {
    throw RequestError{400, std::string("query parameter ") + key + " must be a non-negative integer"};
  }
  return out;
}

}  // namespace detail

inline constexpr std::size_t kMaxPage = 200;

inline void install_routes(httplib::Server& svr, const StateHolder& holder) {
  using detail::send;
  svr.Get("/api/schema", [&](const httplib::Request&, httplib::Response& res) {
    send(res, api_schema(*holder.snapshot()));
  });
  svr.Get("/api/examples", [&](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto split = req.has_param("split") ? req.get_param_value("split") : std::string("test");
      const auto offset = detail::query_size(req, "offset", 0);
      const auto limit = std::min(detail::query_size(req, "limit", 20), kMaxPage);
      send(res, api_examples(*holder.snapshot(), split, offset, limit));
    } catch (const detail::RequestError& e) {
      send(res, detail::error_response(e.status, e.message));
    }
  });
  svr.Post("/api/predict", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, api_predict(*holder.snapshot(), req.body));
  });
  svr.Post("/api/intervene", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, api_intervene(*holder.snapshot(), req.body));
  });
  svr.Get(R"(/api/saliency/([^/]+)/(\d{1,6}))", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, api_saliency(*holder.snapshot(), req.matches[1].str(), std::stoi(req.matches[2].str())));
  });
  svr.Get("/api/intervention-curve", [&](const httplib::Request&, httplib::Response& res) {
    send(res, api_intervention_curve(*holder.snapshot()));
  });
  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, detail::error_response(500, what));
  });
}

}  // namespace sscbm
