#include <gtest/gtest.h>

#include <sstream>

#include "care/config.hpp"
#include "support.hpp"

using namespace care;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return RunConfig::parse(in);
}

std::string error_key(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<no error>";
}

}  // namespace

TEST(Config, DefaultsValidate) {
  RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.size("d_model"), 300u);
  EXPECT_EQ(cfg.size("top_k"), 512u);
  EXPECT_FALSE(cfg.has("corpus"));
  EXPECT_EQ(cfg.text("precision"), "f32");
}

TEST(Config, ParsesCommentsAndWhitespace) {
  const auto cfg = parse("# header\n  seed = 11   # trailing\n\nd_model=8\nnum_heads = 2\n");
  EXPECT_EQ(cfg.size("seed"), 11u);
  EXPECT_EQ(cfg.size("d_model"), 8u);
}

TEST(Config, ToyFileLoads) {
  const auto cfg = RunConfig::load((test::source_dir() / "data/toy/toy.cfg").string());
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.size("max_steps"), 2000u);
}

TEST(Config, UnknownKeyNamesTheKey) {
  EXPECT_EQ(error_key([] { parse("lerning_rate = 3\n"); }), "lerning_rate");
  RunConfig cfg;
  EXPECT_EQ(error_key([&] { cfg.apply_override("bogus=1"); }), "bogus");
}

TEST(Config, BadValuesNameTheKey) {
  RunConfig cfg;
  EXPECT_EQ(error_key([&] { cfg.set("d_model", "-4"); }), "d_model");
  EXPECT_EQ(error_key([&] { cfg.set("d_model", "4x"); }), "d_model");
  EXPECT_EQ(error_key([&] { cfg.set("dropout", "nan"); }), "dropout");
  EXPECT_EQ(error_key([&] { cfg.set("dropout", "0.1.2"); }), "dropout");
  EXPECT_EQ(error_key([&] { cfg.set("no_reasoning", "yes"); }), "no_reasoning");
  EXPECT_EQ(error_key([&] { cfg.apply_override("no_condition"); }), "no_condition");
}

TEST(Config, MalformedLineCarriesLineNumber) {
  try {
    parse("seed = 1\n\njust words\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Config, OverridesApplyInOrder) {
  RunConfig cfg;
  cfg.apply_override("no_reasoning=true");
  cfg.apply_override(" top_k = 3 ");
  cfg.apply_override("top_k=5");
  EXPECT_TRUE(cfg.flag("no_reasoning"));
  EXPECT_EQ(cfg.size("top_k"), 5u);
  cfg.apply_override("corpus=a=b.jsonl");
  EXPECT_EQ(cfg.text("corpus"), "a=b.jsonl");
}

TEST(Config, CrossKeyValidation) {
  auto failing = [](const std::string& assignment) {
    RunConfig cfg;
    cfg.apply_override(assignment);
    return error_key([&] { cfg.validate(); });
  };
  EXPECT_EQ(failing("num_heads=7"), "num_heads");
  EXPECT_EQ(failing("top_k=0"), "top_k");
  EXPECT_EQ(failing("dropout=1"), "dropout");
  EXPECT_EQ(failing("lr_scale=0"), "lr_scale");
  EXPECT_EQ(failing("recon_mode=dense"), "recon_mode");
  EXPECT_EQ(failing("precision=f16"), "precision");
  EXPECT_EQ(failing("max_response=1"), "max_response");
}

TEST(Config, RenderRoundTrips) {
  RunConfig cfg;
  cfg.apply_override("seed=9");
  cfg.apply_override("corpus=x.jsonl");
  const auto again = parse(cfg.render());
  EXPECT_EQ(again.values(), cfg.values());
}

TEST(Config, ModelConfigMapping) {
  const auto cfg = parse("d_model=12\nnum_heads=3\nd_ff=7\nrecon_mode=full\nno_condition=true\ntie_output=true\n");
  const auto m = cfg.model_config();
  EXPECT_EQ(m.d_model, 12u);
  EXPECT_EQ(m.num_heads, 3u);
  EXPECT_EQ(m.d_ff, 7u);
  EXPECT_EQ(m.recon_mode, ReconMode::full);
  EXPECT_TRUE(m.no_condition);
  EXPECT_FALSE(m.no_reasoning);
  EXPECT_TRUE(m.tie_output);
}
