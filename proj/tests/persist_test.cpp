#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "zsq/checkpoint.hpp"
#include "zsq/config.hpp"
#include "zsq/error.hpp"
#include "zsq/io.hpp"

namespace zsq {
namespace {

namespace fs = std::filesystem;

Detector tiny_model() {
  DetectorConfig cfg;
  cfg.image_size = 16;
  cfg.num_classes = 3;
  cfg.channels = {3, 4, 5};
  cfg.seed = 17;
  return Detector::build(cfg);
}

Detector quantized_model() {
  Detector m = attach_quantizers(tiny_model(), 4, 6, true);
  Tensor images({2, 3, 16, 16}, 0.3);
  images.data()[5] = 0.9;
  calibrate_activation_quantizers(m, images);
  m.blocks[2].conv.act_quant->offset.data()[0] = -0.125;
  m.blocks[1].bn.running_var.data()[2] = 1.75;
  return m;
}

CheckpointMeta sample_meta() {
  CheckpointMeta meta;
  meta.kind = "student";
  meta.seed = 42;
  meta.config_hash = "abc123";
  meta.epoch = 7;
  meta.metrics = {{"map", 0.5}, {"map50", 0.1 + 0.2}};
  return meta;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("zsq_persist_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const Detector m = quantized_model();
  const std::string a = serialize_checkpoint(m, sample_meta());
  const Checkpoint ck = parse_checkpoint(a, "mem");
  EXPECT_EQ(serialize_checkpoint(ck.model, ck.meta), a);
  EXPECT_EQ(ck.meta.kind, "student");
  EXPECT_EQ(ck.meta.seed, 42u);
  EXPECT_EQ(ck.meta.epoch, 7u);
  EXPECT_EQ(ck.meta.metrics.at("map50"), 0.1 + 0.2);
}

TEST(Checkpoint, RoundTripRestoresEveryState) {
  const Detector m = quantized_model();
  const Checkpoint ck = parse_checkpoint(serialize_checkpoint(m, sample_meta()), "mem");
  const auto pa = m.parameters(), pb = ck.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values());
  const auto ba = m.buffers(), bb = ck.model.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(ba[i].tensor.values(), bb[i].tensor.values());
  const auto la = m.conv_layers(), lb = ck.model.conv_layers();
  for (std::size_t i = 0; i < la.size(); ++i) {
    ASSERT_EQ(la[i]->weight_quant.has_value(), lb[i]->weight_quant.has_value());
    ASSERT_EQ(la[i]->act_quant.has_value(), lb[i]->act_quant.has_value());
    if (la[i]->weight_quant) EXPECT_EQ(la[i]->weight_quant->step_value(), lb[i]->weight_quant->step_value());
    if (la[i]->act_quant) {
      EXPECT_EQ(la[i]->act_quant->bits, 6);
      EXPECT_EQ(la[i]->act_quant->step_value(), lb[i]->act_quant->step_value());
      EXPECT_EQ(la[i]->act_quant->offset_value(), lb[i]->act_quant->offset_value());
      EXPECT_TRUE(lb[i]->act_quant->asymmetric);
    }
  }
  NoGradGuard guard;
  Tensor x({1, 3, 16, 16}, 0.4);
  x.data()[100] = 0.8;
  EXPECT_EQ(m.forward(x, BnMode::kEval).pred.values(), ck.model.forward(x, BnMode::kEval).pred.values());
}

TEST(Checkpoint, FlippedByteFailsTheChecksum) {
  std::string bytes = serialize_checkpoint(tiny_model(), CheckpointMeta{});
  for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 40}) {
    std::string bad = bytes;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x01);
    try {
      parse_checkpoint(bad, "mem");
      ADD_FAILURE() << "accepted a corrupt byte at " << pos;
    } catch (const ParseError& e) {
      EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, HeaderErrors) {
  const std::string bytes = serialize_checkpoint(tiny_model(), CheckpointMeta{});
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic, "mem"), ParseError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  try {
    parse_checkpoint(bad_version, "mem");
    ADD_FAILURE();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 20), "mem"), ParseError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 1), "mem"), ParseError);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(quantized_model(), sample_meta(), dir / "m.ckpt");
  const Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  EXPECT_TRUE(ck.model.quantized());
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
  EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), IoError);
}

TEST(Hashes, KnownValues) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  // `git hash-object` of an empty file and of "hello\n".
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Hashes, DirectoryHashTracksContents) {
  const fs::path dir = temp_dir("hash");
  fs::create_directories(dir / "sub");
  write_file(dir / "a.txt", "one");
  write_file(dir / "sub" / "b.txt", "two");
  const std::string h = content_hash(dir);
  EXPECT_EQ(content_hash(dir), h);
  write_file(dir / "sub" / "b.txt", "three");
  EXPECT_NE(content_hash(dir), h);
  EXPECT_EQ(content_hash(dir / "a.txt"), git_blob_hash("one"));
}

TEST(Config, EmptyDocumentGivesDefaults) {
  const Config c = parse_config("{}", "mem");
  const Config d = default_config();
  EXPECT_EQ(config_to_json(c), config_to_json(d));
  EXPECT_EQ(c.synthesis.alpha_detect, 0.5);
  EXPECT_EQ(c.synthesis.alpha_prior, 0.01);
  EXPECT_EQ(c.synthesis.alpha_tv, 0.0);
  EXPECT_EQ(c.synthesis.alpha_l2, 1e-6);
  EXPECT_EQ(c.synthesis.lr, 0.1);
  EXPECT_EQ(c.synthesis.iterations, 200u);
  EXPECT_TRUE(c.qat.freeze_bn);
  EXPECT_FALSE(c.qat.hflip);
  EXPECT_EQ(c.synthesis.conf_thresh, 0.5);
  EXPECT_EQ(c.synthesis.iou_thresh, 0.45);
  EXPECT_EQ(c.qat.beta_detect, 0.04);
  EXPECT_EQ(c.qat.beta_kl, 0.1);
  EXPECT_EQ(c.qat.beta_feat, 1.0);
}

TEST(Config, NegativeTemperatureIsAValidationError) {
  EXPECT_THROW(parse_config(R"({"qat": {"tau": -1}})", "mem"), ValidationError);
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(parse_config(R"({"qat": {"temperature": 2}})", "mem"), ValidationError);
  EXPECT_THROW(parse_config(R"({"extra": 1})", "mem"), ValidationError);
  EXPECT_THROW(parse_config(R"({"qat": 3})", "mem"), ValidationError);
}

TEST(Config, TypeMismatchNamesTheKey) {
  for (const char* doc : {R"({"qat": {"tau": "warm"}})", R"({"synthesis": {"iterations": 1.5}})",
                          R"({"teacher": {"hflip": 1}})", R"({"model": {"channels": [1, 2]}})"}) {
    try {
      parse_config(doc, "cfg.json");
      ADD_FAILURE() << doc;
    } catch (const ValidationError& e) {
      const std::string what = e.what();
      EXPECT_EQ(what.rfind("cfg.json: ", 0), 0u) << what;
      const bool named = what.find("qat.tau") != std::string::npos ||
                         what.find("synthesis.iterations") != std::string::npos ||
                         what.find("teacher.hflip") != std::string::npos ||
                         what.find("model.channels") != std::string::npos;
      EXPECT_TRUE(named) << what;
    }
  }
}

TEST(Config, MalformedJsonIsAParseError) { EXPECT_THROW(parse_config("{\"qat\": ", "mem"), ParseError); }

TEST(Config, CanonicalJsonRoundTrips) {
  Config c = parse_config(
      R"({"seed": 9, "qat": {"tau": 2.5, "weight_bits": 6}, "data": {"class_weights": [3, 2, 1, 1, 1, 1]},
          "compare": {"bits": ["w4a8", "w6a6"]}, "calibration": {"label_source": "tile"}})",
      "mem");
  EXPECT_EQ(c.qat.seed, 9u);
  EXPECT_EQ(c.model.seed, 9u);
  const std::string text = config_to_json(c);
  const Config back = parse_config(text, "mem");
  EXPECT_EQ(config_to_json(back), text);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(c), config_hash(default_config()));
  EXPECT_EQ(back.qat.tau, 2.5);
  EXPECT_EQ(back.compare.bits, (std::vector<std::string>{"w4a8", "w6a6"}));
}

TEST(Config, OverridesTakePrecedence) {
  Config c = parse_config(R"({"qat": {"tau": 2}})", "mem");
  apply_override(c, "qat.tau", "3.5");
  apply_override(c, "calibration.label_source", "multisample");
  apply_override(c, "seed", "12");
  EXPECT_EQ(c.qat.tau, 3.5);
  EXPECT_EQ(c.calibration.label_source, "multisample");
  EXPECT_EQ(c.synthesis.seed, 12u);
  EXPECT_THROW(apply_override(c, "qat.nope", "1"), UsageError);
  EXPECT_THROW(apply_override(c, "qat.epochs", "many"), ValidationError);
}

TEST(Config, BitSettings) {
  EXPECT_EQ(parse_bits("w4a8"), (std::pair<int, int>{4, 8}));
  EXPECT_EQ(parse_bits("W6A6"), (std::pair<int, int>{6, 6}));
  EXPECT_EQ(parse_bits("fp"), (std::pair<int, int>{32, 32}));
  EXPECT_THROW(parse_bits("w1a8"), ValidationError);
  EXPECT_THROW(parse_bits("w4a8x"), ValidationError);
  EXPECT_THROW(parse_bits("int8"), ValidationError);
}

}  // namespace
}  // namespace zsq
