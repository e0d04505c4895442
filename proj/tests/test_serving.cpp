#include "test_util.hpp"

#include "sscbm/serving.hpp"

#include <atomic>
#include <thread>

using namespace sscbm;
using sscbm::testing::slurp;
using sscbm::testing::TempDir;

namespace {

Dataset small_dataset() {
  SyntheticSpec spec;
  spec.n_examples = 40;
  spec.seed = 9;
  return generate_synthetic(spec);
}

Model<float> model_for(const Dataset& ds, std::uint64_t seed) {
  return Model<float>::init(TrainConfig{}.model_config(ds.schema.k(), ds.n_classes, 3, 32), seed);
}

ServerState state(std::uint64_t seed = 1) {
  auto ds = small_dataset();
  auto m = model_for(ds, seed);
  SplitTable splits{{"test", {ds.examples[3].id, ds.examples[5].id, ds.examples[8].id}}};
  return make_server_state(std::move(m), std::move(ds), std::move(splits), {},
                           std::vector<CurvePoint>{{0.0, 0.5}, {0.5, 0.75}, {1.0, 1.0}});
}

nlohmann::json body_of(const ApiResponse& r) { return nlohmann::json::parse(r.body); }

std::string predict_req(const std::string& id) { return nlohmann::json{{"example_id", id}}.dump(); }

}  // namespace

TEST(Api, SchemaMatchesSchemaJson) {
  const auto s = state();
  TempDir dir;
  save_checkpoint(dir / "ck", *s.model, s.schema());
  const auto r = api_schema(s);
  EXPECT_EQ(r.status, 200);
  const auto j = body_of(r);
  const auto on_disk = nlohmann::json::parse(slurp(dir / "ck" / "schema.json"));
  EXPECT_EQ(j["names"], on_disk["names"]);
  EXPECT_EQ(j["k"], 10);
  EXPECT_EQ(j["n_classes"], 9);
}

TEST(Api, PredictPayloadIsWellFormed) {
  const auto s = state();
  const auto& e = s.dataset->examples[3];
  const auto r = api_predict(s, predict_req(e.id));
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.content_type, "application/json");
  const auto j = body_of(r);
  EXPECT_EQ(j["example_id"], e.id);
  ASSERT_EQ(j["class_probs"].size(), 9u);
  double sum = 0;
  int best = 0;
  for (std::size_t c = 0; c < 9; ++c) {
    sum += j["class_probs"][c].get<double>();
    if (j["class_probs"][c] > j["class_probs"][best]) best = static_cast<int>(c);
  }
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_EQ(j["predicted_class"], best);
  EXPECT_EQ(j["ground_truth_class"], e.class_label);
  ASSERT_EQ(j["concepts"].size(), 10u);
  for (int i = 0; i < 10; ++i) {
    const auto& c = j["concepts"][i];
    EXPECT_EQ(c["index"], i);
    EXPECT_EQ(c["name"], s.schema().names[i]);
    EXPECT_EQ(c["predicted"], c["p_hat"].get<double>() >= 0.5);
    EXPECT_EQ(c["ground_truth"], (*e.concepts)[i]);
  }
  EXPECT_TRUE(j["interventions"].empty());
  EXPECT_EQ(j["saliency_available"], true);
}

TEST(Api, EmptyOverridesEqualPredict) {
  const auto s = state();
  const auto id = s.dataset->examples[5].id;
  const auto p = api_predict(s, predict_req(id));
  const auto i = api_intervene(s, nlohmann::json{{"example_id", id}, {"overrides", nlohmann::json::object()}}.dump());
  const auto bare = api_intervene(s, predict_req(id));
  EXPECT_EQ(p.body, i.body);
  EXPECT_EQ(p.body, bare.body);
}

TEST(Api, OverrideToOneSetsProbability) {
  const auto s = state();
  const auto& e = s.dataset->examples[5];
  const int flip = (*e.concepts)[2] ? 0 : 1;
  const auto r = api_intervene(
      s, nlohmann::json{{"example_id", e.id}, {"overrides", {{"7", 1}, {"2", flip}}}}.dump());
  ASSERT_EQ(r.status, 200);
  const auto j = body_of(r);
  EXPECT_EQ(j["concepts"][7]["p_hat"], 1.0);
  EXPECT_EQ(j["concepts"][2]["p_hat"], static_cast<double>(flip));
  ASSERT_EQ(j["interventions"].size(), 2u);
  EXPECT_EQ(j["interventions"][0]["index"], 2);
  EXPECT_EQ(j["interventions"][0]["matches_ground_truth"], false);
  EXPECT_EQ(j["interventions"][1]["matches_ground_truth"], (*e.concepts)[7] == 1);
}

TEST(Api, GroupModeSetsTheWholeGroup) {
  const auto s = state();
  const auto& e = s.dataset->examples[0];
  const auto j = body_of(api_intervene(
      s, nlohmann::json{{"example_id", e.id}, {"overrides", {{"4", 1}}}, {"mode", "group"}}.dump()));
  std::set<int> touched;
  for (const auto& a : j["interventions"]) touched.insert(a["index"].get<int>());
  EXPECT_EQ(touched, (std::set<int>{3, 4, 5}));
  EXPECT_EQ(j["concepts"][4]["p_hat"], 1.0);
}

TEST(Api, IdenticalRequestsGiveIdenticalBytes) {
  const auto s = state();
  const auto req = nlohmann::json{{"example_id", s.dataset->examples[8].id}, {"overrides", {{"1", 0}}}}.dump();
  const auto a = api_intervene(s, req);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(api_intervene(s, req).body, a.body);
}

TEST(Api, ErrorStatuses) {
  const auto s = state();
  const auto id = s.dataset->examples[0].id;
  EXPECT_EQ(api_predict(s, predict_req("missing")).status, 404);
  EXPECT_EQ(api_predict(s, "{not json").status, 400);
  EXPECT_EQ(api_predict(s, "[1,2]").status, 400);
  EXPECT_EQ(api_predict(s, "{}").status, 400);
  auto with = [&](nlohmann::json overrides) {
    return api_intervene(s, nlohmann::json{{"example_id", id}, {"overrides", overrides}}.dump()).status;
  };
  EXPECT_EQ(with({{"10", 1}}), 422);
  EXPECT_EQ(with({{"-1", 1}}), 422);
  EXPECT_EQ(with({{"3", 2}}), 422);
  EXPECT_EQ(with({{"x", 1}}), 400);
  EXPECT_EQ(with({{"3", "yes"}}), 400);
  EXPECT_EQ(with(nlohmann::json::array({1})), 400);
  EXPECT_EQ(with({{"3", true}}), 200);
  EXPECT_EQ(api_intervene(s, nlohmann::json{{"example_id", id}, {"mode", "sideways"}}.dump()).status, 400);
  EXPECT_EQ(api_saliency(s, "missing", 0).status, 404);
  EXPECT_EQ(api_saliency(s, id, 10).status, 404);
  EXPECT_EQ(api_examples(s, "validation", 0, 10).status, 404);
  const auto err = body_of(api_predict(s, predict_req("missing")));
  EXPECT_TRUE(err.contains("error"));
}

TEST(Api, ExamplesPaginate) {
  const auto s = state();
  auto j = body_of(api_examples(s, "test", 0, 2));
  EXPECT_EQ(j["total"], 3);
  ASSERT_EQ(j["items"].size(), 2u);
  EXPECT_EQ(j["items"][0]["id"], s.dataset->examples[3].id);
  EXPECT_EQ(j["items"][0]["thumbnail"].get<std::string>().rfind("data:image/png;base64,", 0), 0u);
  j = body_of(api_examples(s, "test", 2, 2));
  EXPECT_EQ(j["items"].size(), 1u);
  j = body_of(api_examples(s, "test", 50, 2));
  EXPECT_TRUE(j["items"].empty());
  j = body_of(api_examples(s, "all", 0, 100));
  EXPECT_EQ(j["total"], 40);
}

TEST(Api, SaliencyIsAGrayscalePng) {
  const auto s = state();
  const auto r = api_saliency(s, s.dataset->examples[0].id, 3);
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.content_type, "image/png");
  ASSERT_GT(r.body.size(), 8u);
  EXPECT_EQ(r.body.substr(1, 3), "PNG");
  EXPECT_EQ(api_saliency(s, s.dataset->examples[0].id, 3).body, r.body);
}

TEST(Api, SaliencyPrefersTheCache) {
  auto s = state();
  TempDir dir;
  const auto id = s.dataset->examples[0].id;
  std::filesystem::create_directories(dir / id);
  detail::write_text(dir / id / "2.png", "cached-bytes");
  s.saliency_dir = dir.path();
  EXPECT_EQ(api_saliency(s, id, 2).body, "cached-bytes");
  EXPECT_NE(api_saliency(s, id, 1).body, "cached-bytes");
}

TEST(Api, InterventionCurve) {
  auto s = state();
  const auto j = body_of(api_intervention_curve(s));
  ASSERT_EQ(j["points"].size(), 3u);
  EXPECT_EQ(j["points"][1]["ratio"], 0.5);
  EXPECT_EQ(j["points"][1]["task_acc"], 0.75);
  s.curve.reset();
  EXPECT_EQ(api_intervention_curve(s).status, 404);
}

TEST(Api, StateRejectsMismatchedInputs) {
  auto ds = small_dataset();
  auto m = model_for(ds, 0);
  SplitTable bad{{"test", {"nope"}}};
  EXPECT_THROW(make_server_state(m, ds, bad), SchemaError);
  m.config.k = 3;
  EXPECT_THROW(make_server_state(m, ds), SchemaError);
}

TEST(Api, CheckpointDirEnvironmentOverride) {
  ::unsetenv("SSCBM_CHECKPOINT_DIR");
  EXPECT_EQ(resolve_checkpoint_dir("a/b"), std::filesystem::path("a/b"));
  ::setenv("SSCBM_CHECKPOINT_DIR", "/tmp/elsewhere", 1);
  EXPECT_EQ(resolve_checkpoint_dir("a/b"), std::filesystem::path("/tmp/elsewhere"));
  ::unsetenv("SSCBM_CHECKPOINT_DIR");
}

namespace {

struct Served {
  TempDir dir;
  ServerSources src;
  std::unique_ptr<StateHolder> holder;
  httplib::Server svr;
  std::thread thread;
  int port = 0;

  Served() {
    auto ds = small_dataset();
    save_dataset(dir / "data", ds);
    save_checkpoint(dir / "ck", model_for(ds, 1), ds.schema);
    write_split_table(dir / "splits.json", SplitTable{{"test", {ds.examples[1].id, ds.examples[2].id}}});
    detail::write_text(dir / "curve.csv", intervention_csv(std::vector<CurvePoint>{{0.0, 0.5}, {0.1, 0.6}}));
    src = {dir / "ck", dir / "data", dir / "splits.json", {}, dir / "curve.csv"};
    holder = std::make_unique<StateHolder>(load_server_state(src));
    install_routes(svr, *holder);
    port = svr.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }

  ~Served() {
    svr.stop();
    thread.join();
  }

  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

std::map<std::string, std::string> snapshot_files(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& f : std::filesystem::recursive_directory_iterator(root)) {
    if (f.is_regular_file()) out[f.path().string()] = slurp(f.path());
  }
  return out;
}

}  // namespace

TEST(Http, EndpointsOverTheWire) {
  Served s;
  auto cli = s.client();
  auto r = cli.Get("/api/schema");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(nlohmann::json::parse(r->body)["k"], 10);

  r = cli.Get("/api/examples");
  ASSERT_TRUE(r);
  const auto ex = nlohmann::json::parse(r->body);
  EXPECT_EQ(ex["split"], "test");
  EXPECT_EQ(ex["total"], 2);
  const auto id = ex["items"][0]["id"].get<std::string>();
  EXPECT_EQ(cli.Get("/api/examples?limit=abc")->status, 400);
  EXPECT_EQ(nlohmann::json::parse(cli.Get("/api/examples?limit=100000&split=all")->body)["limit"], kMaxPage);

  const auto pred = cli.Post("/api/predict", predict_req(id), "application/json");
  ASSERT_TRUE(pred);
  EXPECT_EQ(pred->status, 200);
  const auto ivn = cli.Post("/api/intervene", nlohmann::json{{"example_id", id}}.dump(), "application/json");
  EXPECT_EQ(ivn->body, pred->body);
  EXPECT_EQ(cli.Post("/api/predict", "{", "application/json")->status, 400);
  EXPECT_EQ(cli.Post("/api/predict", predict_req("ghost"), "application/json")->status, 404);
  EXPECT_EQ(cli.Post("/api/intervene", nlohmann::json{{"example_id", id}, {"overrides", {{"99", 1}}}}.dump(),
                     "application/json")
                ->status,
            422);

  r = cli.Get("/api/saliency/" + id + "/0");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(cli.Get("/api/saliency/" + id + "/10")->status, 404);
  EXPECT_EQ(cli.Get("/api/saliency/ghost/0")->status, 404);

  r = cli.Get("/api/intervention-curve");
  EXPECT_EQ(nlohmann::json::parse(r->body)["points"].size(), 2u);
}

TEST(Http, ServingNeverWritesFiles) {
  Served s;
  const auto before = snapshot_files(s.dir.path());
  auto cli = s.client();
  const auto id = s.holder->snapshot()->dataset->examples[0].id;
  for (int t = 0; t < 3; ++t) {
    cli.Post("/api/intervene", nlohmann::json{{"example_id", id}, {"overrides", {{"0", 1}}}}.dump(),
             "application/json");
    cli.Get("/api/saliency/" + id + "/1");
    cli.Get("/api/examples?split=all");
  }
  EXPECT_EQ(snapshot_files(s.dir.path()), before);
}

TEST(Http, ConcurrentRequestsAgree) {
  Served s;
  const auto id = s.holder->snapshot()->dataset->examples[2].id;
  const auto req = nlohmann::json{{"example_id", id}, {"overrides", {{"6", 1}}}}.dump();
  const auto expect = s.client().Post("/api/intervene", req, "application/json")->body;
  std::vector<std::thread> workers;
  std::atomic<int> mismatches{0};
  for (int w = 0; w < 4; ++w) {
    workers.emplace_back([&] {
      auto cli = s.client();
      for (int t = 0; t < 5; ++t) {
        const auto r = cli.Post("/api/intervene", req, "application/json");
        if (!r || r->body != expect) ++mismatches;
      }
    });
  }
  for (auto& w : workers) w.join();
  EXPECT_EQ(mismatches.load(), 0);
}

TEST(Http, HotReloadSwapsTheSnapshot) {
  Served s;
  CheckpointWatcher watcher(*s.holder, s.src);
  EXPECT_FALSE(watcher.poll());
  const auto id = s.holder->snapshot()->dataset->examples[0].id;
  auto cli = s.client();
  const auto before = cli.Post("/api/predict", predict_req(id), "application/json")->body;
  const auto old = s.holder->snapshot();

  const auto ds = load_dataset(s.dir / "data");
  save_checkpoint(s.dir / "ck", model_for(ds, 2), ds.schema);
  const auto p = s.dir / "ck" / "params.bin";
  std::filesystem::last_write_time(p, std::filesystem::last_write_time(p) + std::chrono::seconds(2));
  EXPECT_TRUE(watcher.poll());
  EXPECT_FALSE(watcher.poll());
  const auto after = cli.Post("/api/predict", predict_req(id), "application/json")->body;
  EXPECT_NE(before, after);
  // a snapshot taken before the swap stays usable
  EXPECT_EQ(api_predict(*old, predict_req(id)).body, before);

  // a broken checkpoint is skipped and the live snapshot kept
  detail::write_text(p, "garbage");
  std::filesystem::last_write_time(p, std::filesystem::last_write_time(p) + std::chrono::seconds(4));
  EXPECT_FALSE(watcher.poll());
  EXPECT_EQ(cli.Post("/api/predict", predict_req(id), "application/json")->body, after);
}
