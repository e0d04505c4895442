#include "test_util.hpp"

using namespace sscbm;
using sscbm::testing::TempDir;

namespace {

Model<float> small_model(std::uint64_t seed = 2) {
  auto cfg = sscbm::testing::tiny_config(true, true, true);
  cfg.k = 10;
  return Model<float>::init(cfg, seed);
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir;
  const auto m = small_model();
  const auto schema = synthetic::schema();
  save_checkpoint(dir / "ck", m, schema);
  const auto back = load_checkpoint(dir / "ck");
  EXPECT_EQ(model_config_to_json(back.model.config), model_config_to_json(m.config));
  EXPECT_EQ(back.schema.names, schema.names);
  EXPECT_EQ(back.schema.groups, schema.groups);
  const auto a = params_to_tensors(m.params);
  const auto b = params_to_tensors(back.model.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.shape, b[i].tensor.shape);
    EXPECT_EQ(a[i].tensor.data, b[i].tensor.data);
  }
  Rng rng(0);
  const auto img = sscbm::testing::random_image(3, 8, rng);
  EXPECT_EQ(m.forward(img).logits, back.model.forward(img).logits);
}

TEST(Checkpoint, SavingTwiceIsByteIdentical) {
  TempDir dir;
  const auto m = small_model();
  save_checkpoint(dir / "a", m, synthetic::schema());
  save_checkpoint(dir / "b", m, synthetic::schema());
  for (const char* f : {"params.bin", "config.json", "schema.json"}) {
    EXPECT_EQ(sscbm::testing::slurp(dir / "a" / f), sscbm::testing::slurp(dir / "b" / f)) << f;
  }
}

TEST(Checkpoint, MissingDirectoryIsNotFound) {
  TempDir dir;
  EXPECT_THROW(load_checkpoint(dir / "absent"), NotFoundError);
}

TEST(Checkpoint, SchemaMismatchIsRejected) {
  TempDir dir;
  auto m = small_model();
  m.config.k = 3;
  EXPECT_THROW(save_checkpoint(dir / "ck", m, synthetic::schema()), ShapeError);
}

TEST(Checkpoint, TensorSetMustMatchConfig) {
  const auto m = small_model();
  auto tensors = params_to_tensors(m.params);
  auto missing = tensors;
  missing.pop_back();
  EXPECT_THROW(params_from_tensors<float>(m.config, missing), SchemaError);
  auto extra = tensors;
  extra.push_back({"surplus", {{1}, {0.0f}}});
  EXPECT_THROW(params_from_tensors<float>(m.config, extra), SchemaError);
  auto dup = tensors;
  dup.push_back(tensors.front());
  EXPECT_THROW(params_from_tensors<float>(m.config, dup), SchemaError);
  auto shaped = tensors;
  shaped.front().tensor.shape.back() += 1;
  EXPECT_THROW(params_from_tensors<float>(m.config, shaped), ShapeError);
}

TEST(Checkpoint, ConfigChangeIsDetectedOnLoad) {
  TempDir dir;
  const auto m = small_model();
  save_checkpoint(dir / "ck", m, synthetic::schema());
  auto j = nlohmann::json::parse(sscbm::testing::slurp(dir / "ck" / "config.json"));
  j["m"] = j["m"].get<int>() + 1;
  detail::write_text(dir / "ck" / "config.json", j.dump());
  EXPECT_THROW(load_checkpoint(dir / "ck"), ShapeError);
}

TEST(Checkpoint, CorruptParamsAreRejected) {
  TempDir dir;
  save_checkpoint(dir / "ck", small_model(), synthetic::schema());
  const auto bytes = sscbm::testing::slurp(dir / "ck" / "params.bin");
  detail::write_text(dir / "ck" / "params.bin", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_checkpoint(dir / "ck"), Error);
}
