#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "care/checkpoint.hpp"
#include "gradient_suite.hpp"
#include "support.hpp"

using namespace care;

namespace {

Vocab toy_vocab(std::size_t size) {
  std::map<std::string, std::size_t> counts;
  for (std::size_t i = SpecialTokens::count; i < size; ++i) counts["w" + std::to_string(i)] = 1000 - i;
  return Vocab::from_counts(counts, 1);
}

std::uint64_t bits(double v) {
  std::uint64_t b;
  std::memcpy(&b, &v, sizeof b);
  return b;
}

}  // namespace

TEST(Checkpoint, F64RoundTripIsBitExact) {
  Rng r(1);
  const Tensor a = test::random_tensor(3, 4, r, false, 1e3);
  std::vector<double> special{0.0, -0.0, 1e-310, std::numeric_limits<double>::max(), -1.0 / 3.0, 5e-324};
  const Tensor b = Tensor::from(2, 3, special);
  TensorGroup g{"", {{"a", a.data()}, {"b", b.data()}}, {a.shape(), b.shape()}};
  CheckpointMeta meta;
  meta.precision = Precision::f64;
  meta.seed = 42;
  meta.step = 17;
  meta.vocab_hash = 0xdeadbeefcafef00dULL;
  meta.config_echo = {{"seed", "42"}};
  meta.extra["note"] = "x";
  ModelConfig mc;
  mc.vocab_size = 99;
  mc.recon_mode = ReconMode::full;
  const auto dir = test::temp_dir("ck_f64");
  write_checkpoint(dir, "state", meta, mc, {g});
  const auto ck = read_checkpoint(dir, "state");
  EXPECT_EQ(ck.meta.seed, 42u);
  EXPECT_EQ(ck.meta.step, 17u);
  EXPECT_EQ(ck.meta.vocab_hash, 0xdeadbeefcafef00dULL);
  EXPECT_EQ(ck.meta.config_echo.at("seed"), "42");
  EXPECT_EQ(ck.meta.extra.at("note"), "x");
  EXPECT_EQ(ck.model_config.vocab_size, 99u);
  EXPECT_EQ(ck.model_config.recon_mode, ReconMode::full);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(bits(ck.tensors.at("a")[i]), bits(a.data()[i]));
  for (std::size_t i = 0; i < special.size(); ++i) EXPECT_EQ(bits(ck.tensors.at("b")[i]), bits(special[i]));
  EXPECT_EQ(ck.shapes.at("b"), (Shape{2, 3}));
}

TEST(Checkpoint, F32StoresRoundedValuesExactly) {
  Rng r(2);
  const Tensor a = test::random_tensor(5, 5, r, false);
  TensorGroup g{"p.", {{"a", a.data()}}, {a.shape()}};
  CheckpointMeta meta;
  const auto dir = test::temp_dir("ck_f32");
  write_checkpoint(dir, "model", meta, ModelConfig{}, {g});
  EXPECT_EQ(std::filesystem::file_size(dir / "model.bin"), 25u * 4u);
  const auto ck = read_checkpoint(dir, "model");
  const auto& got = ck.tensors.at("p.a");
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(bits(got[i]), bits(round_to(Precision::f32, a.data()[i])));
  TensorGroup again{"p.", {{"a", got}}, {a.shape()}};
  write_checkpoint(dir, "model2", meta, ModelConfig{}, {again});
  EXPECT_EQ(read_checkpoint(dir, "model2").tensors.at("p.a"), got);
}

TEST(Checkpoint, LittleEndianLayout) {
  const std::vector<double> v{1.0};
  TensorGroup g{"", {{"one", v}}, {{1, 1}}};
  CheckpointMeta meta;
  meta.precision = Precision::f64;
  const auto dir = test::temp_dir("ck_le");
  write_checkpoint(dir, "x", meta, ModelConfig{}, {g});
  std::ifstream in(dir / "x.bin", std::ios::binary);
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  const unsigned char expect[8] = {0, 0, 0, 0, 0, 0, 0xf0, 0x3f};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(b[i], expect[i]);
}

TEST(Checkpoint, ModelSaveLoadReproducesGeneration) {
  auto f = test::micro_fixture(3);
  const Vocab vocab = toy_vocab(20);
  const auto dir = test::temp_dir("ck_model");
  CheckpointMeta meta;
  meta.seed = 9;
  meta.extra["majority_emotion"] = "sad";
  save_model(dir, f.model, vocab, meta);
  const auto loaded = load_model(dir);
  EXPECT_EQ(loaded.meta.extra.at("majority_emotion"), "sad");
  EXPECT_EQ(loaded.vocab.hash(), vocab.hash());
  auto pa = f.model.parameters();
  const auto pb = loaded.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    auto d = pa[i].tensor.mutable_data();
    for (std::size_t j = 0; j < d.size(); ++j) {
      d[j] = round_to(Precision::f32, d[j]);
      EXPECT_EQ(bits(d[j]), bits(pb[i].tensor.data()[j])) << pa[i].name;
    }
  }
  Rng a(5), b(5);
  EXPECT_EQ(generate(f.model, f.example, a).tokens, generate(loaded.model, f.example, b).tokens);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  auto f = test::micro_fixture(4);
  const auto dir = test::temp_dir("ck_shape");
  save_model(dir, f.model, toy_vocab(20), {});
  const auto ck = read_checkpoint(dir, "model");
  ModelConfig other = f.model.config;
  other.d_ff = 8;
  Rng r(1);
  auto m = CareModel::init(other, r);
  auto params = m.parameters();
  EXPECT_THROW(assign_parameters(params, ck), DimensionError);
  other = f.model.config;
  other.dec_layers = 2;
  auto deeper = CareModel::init(other, r);
  auto deeper_params = deeper.parameters();
  EXPECT_THROW(assign_parameters(deeper_params, ck), ParseError);
}

TEST(Checkpoint, VocabularyHashChecked) {
  auto f = test::micro_fixture(5);
  const auto dir = test::temp_dir("ck_vocab");
  save_model(dir, f.model, toy_vocab(20), {});
  toy_vocab(21).save((dir / "vocab.txt").string());
  EXPECT_THROW(load_model(dir), ValidationError);
}

TEST(Checkpoint, CorruptManifests) {
  const auto dir = test::temp_dir("ck_corrupt");
  std::ofstream(dir / "model.json") << "{ not json";
  EXPECT_THROW(read_checkpoint(dir, "model"), ParseError);
  std::ofstream(dir / "model.json", std::ios::trunc) << R"({"format":"other"})";
  EXPECT_THROW(read_checkpoint(dir, "model"), ParseError);
  EXPECT_THROW(read_checkpoint(dir, "missing"), Error);
  EXPECT_THROW(parse_precision("f16"), Error);
}
