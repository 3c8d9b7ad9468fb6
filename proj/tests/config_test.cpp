#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "dualprec/config.hpp"
#include "test_util.hpp"

using namespace dualprec;

TEST(ConfigTest, DefaultsMatchTrainingRecipe) {
  const RunConfig rc;
  EXPECT_EQ(rc.train.batch_size, 125u);
  EXPECT_EQ(rc.train.bits, 2);
  EXPECT_EQ(rc.plan.phase1_epochs, 50);
  EXPECT_EQ(rc.plan.total_epochs, 100);
  EXPECT_EQ(rc.plan.lr_phase1_odd, 3e-4);
  EXPECT_EQ(rc.plan.lr_phase1_even, 3e-5);
  EXPECT_EQ(rc.plan.lr_phase2, 4e-3);
  EXPECT_EQ(rc.plan.eta, 0.01);
  EXPECT_EQ(rc.train.scale_rule, ScaleRule::PaperEq2);
  EXPECT_EQ(rc.train.index_norm, IndexNorm::MaxAbs);
}

TEST(ConfigTest, ParsesKeysCommentsAndBlankLines) {
  const RunConfig rc = parse_config_text(
      "# run\n"
      "name = small\n"
      "\n"
      "bits=3   # trailing comment\n"
      "  scale_rule = range_exact\n"
      "epochs = 8\n"
      "phase1_epochs = 4\n"
      "lr_phase2 = 0.001\n"
      "augment = flipcrop\n"
      "quantize_layers = 0,2\n");
  EXPECT_EQ(rc.name, "small");
  EXPECT_EQ(rc.train.bits, 3);
  EXPECT_EQ(rc.train.scale_rule, ScaleRule::RangeExact);
  EXPECT_EQ(rc.plan.total_epochs, 8);
  EXPECT_EQ(rc.plan.phase1_epochs, 4);
  EXPECT_EQ(rc.plan.lr_phase2, 0.001);
  EXPECT_EQ(rc.train.augment, AugmentPolicy::FlipCrop);
  EXPECT_EQ(rc.train.quantize_layers, "0,2");
}

TEST(ConfigTest, UnknownKeyIsRejectedByName) {
  try {
    parse_config_text("bitz = 3\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Config);
    EXPECT_NE(std::string(e.what()).find("bitz"), std::string::npos);
  }
}

TEST(ConfigTest, MalformedValuesAreRejected) {
  for (const char* text : {"bits = three\n", "bits = 3x\n", "seed = -1\n", "eta = \n",
                           "scale_rule = sideways\n", "index_norm = l2\n", "no equals sign\n"}) {
    try {
      parse_config_text(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::Config) << text;
    }
  }
}

TEST(ConfigTest, ValidationCatchesRanges) {
  EXPECT_THROW(parse_config_text("bits = 8\n").validate(), Error);
  EXPECT_THROW(parse_config_text("bits = 1\n").validate(), Error);
  EXPECT_THROW(parse_config_text("epochs = 4\nphase1_epochs = 6\n").validate(), Error);
  EXPECT_THROW(parse_config_text("batch_size = 0\n").validate(), Error);
  EXPECT_NO_THROW(parse_config_text("bits = 7\n").validate());
}

TEST(ConfigTest, ResolvedTextRoundTrips) {
  const RunConfig rc = parse_config_text(
      "name = r\nbits = 4\nseed = 123456789012\nlr_phase1_odd = 0.00031\neta = 0.1\n"
      "index_sigma = 0.25\nindex_norm = std\ntrain_limit = 500\n");
  const std::string text = resolved_config_text(rc);
  const RunConfig back = parse_config_text(text);
  EXPECT_EQ(resolved_config_text(back), text);
  EXPECT_EQ(back.train.seed, 123456789012u);
  EXPECT_EQ(back.plan.lr_phase1_odd, 0.00031);
  EXPECT_EQ(back.train.index_norm, IndexNorm::Std);
  std::size_t lines = 0;
  for (char c : text) lines += c == '\n';
  EXPECT_EQ(lines, config_keys().size());
  EXPECT_EQ(text.substr(0, 9), "name = r\n");
}

TEST(ConfigTest, FileLoading) {
  const auto dir = dualprec::testing::temp_dir("cfg");
  {
    std::ofstream(dir / "a.cfg") << "name = from_file\nbatch_size = 50\n";
  }
  const RunConfig rc = load_config_file(dir / "a.cfg");
  EXPECT_EQ(rc.name, "from_file");
  EXPECT_EQ(rc.train.batch_size, 50u);
  try {
    load_config_file(dir / "missing.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Config);
  }
  std::filesystem::remove_all(dir);
}
