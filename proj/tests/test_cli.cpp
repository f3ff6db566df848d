#include <gtest/gtest.h>

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rfw/experiments.hpp"

using namespace rfw;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("rfw_cli_" + tag);
  std::filesystem::remove_all(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  EXPECT_TRUE(is) << p;
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Minimal reader for the CSV files the commands emit: no quoting, one header.
std::vector<std::vector<std::string>> parse_csv(const std::filesystem::path& p) {
  std::istringstream is(slurp(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

double cell_num(const std::vector<std::vector<std::string>>& rows, std::size_t r, std::size_t c) {
  return std::strtod(rows.at(r).at(c).c_str(), nullptr);
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

// Small enough to train in well under a second per epoch.
RFWNetConfig tiny_config(const std::filesystem::path& out) {
  RFWNetConfig cfg;
  cfg.train_images = 8;
  cfg.val_images = 4;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.train.threads = 1;
  cfg.out_dir = out.string();
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// config files
// ---------------------------------------------------------------------------

TEST(Config, SerializeParseSerializeIsIdentity) {
  const std::string once = serialize_config(RFWNetConfig{});
  const std::string twice = serialize_config(parse_config(once));
  EXPECT_EQ(once, twice);

  RFWNetConfig cfg;
  cfg.train.lr = 0.0125;
  cfg.train.momentum = 0.85;
  cfg.train.wcw.gamma = 0.6;
  cfg.train.wcw.beta = 0.4;
  cfg.batch = 3;
  cfg.epochs = 7;
  cfg.seed = 1234567;
  cfg.eval_score_thr = 1.0 / 3.0;  // needs all 17 digits to survive the text trip
  cfg.dataset_dir = "/tmp/somewhere";
  const std::string a = serialize_config(cfg);
  const std::string b = serialize_config(parse_config(a));
  EXPECT_EQ(a, b);
  EXPECT_EQ(parse_config(a).eval_score_thr, cfg.eval_score_thr);
}

TEST(Config, SkipsCommentsAndBlankLines) {
  const RFWNetConfig cfg =
      parse_config("# a comment\n\n   \ntrain.batch = 5\n  # trailing comment\n");
  EXPECT_EQ(cfg.batch, 5);
}

TEST(Config, RejectsUnknownKey) {
  try {
    parse_config("bogus.key = 1\n");
    FAIL() << "unknown key accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("bogus.key"), std::string::npos);
  }
}

TEST(Config, RejectsDuplicateKey) {
  EXPECT_THROW(parse_config("train.batch = 5\ntrain.batch = 6\n"), std::invalid_argument);
}

TEST(Config, RejectsMalformedLinesAndValues) {
  EXPECT_THROW(parse_config("train.batch\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("train.batch = five\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("train.batch = 0\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("eval.iou_thr = 2\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("model.use_fbsm = yes\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("backbone.stage_channels = 16,32\n"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// checkpoint files
// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripsTensorsAndStringsBitwise) {
  Checkpoint ckpt;
  ckpt.tensors.emplace("a", Tensor::from({4}, {-0.0, 5e-324, 1.0 / 3.0, -1e300}));
  ckpt.tensors.emplace("b.weight", Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  ckpt.strings["config"] = "k = v\n";
  ckpt.strings["empty"] = "";

  auto dir = temp_dir("ckpt");
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.bin", ckpt);
  const Checkpoint back = load_checkpoint(dir / "c.bin");

  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors.at("a").shape(), (Shape{4}));
  EXPECT_TRUE(bits_equal(back.tensors.at("a").data(), ckpt.tensors.at("a").data()));
  EXPECT_TRUE(bits_equal(back.tensors.at("b.weight").data(), ckpt.tensors.at("b.weight").data()));
  EXPECT_EQ(back.strings, ckpt.strings);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RefusalNamesTheVersionTag) {
  auto dir = temp_dir("ckpt_bad");
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "bad.bin", std::ios::binary);
    os << "XXXXXXXX" << std::string(64, '\0');
  }
  try {
    load_checkpoint(dir / "bad.bin");
    FAIL() << "corrupt checkpoint accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("RFWCKPT1"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, TruncatedFileIsAnError) {
  Checkpoint ckpt;
  ckpt.tensors.emplace("t", Tensor::from({64}, std::vector<double>(64, 1.5)));
  auto dir = temp_dir("ckpt_trunc");
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.bin", ckpt);
  std::filesystem::resize_file(dir / "c.bin", 24);
  EXPECT_THROW(load_checkpoint(dir / "c.bin"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// gradient-check command
// ---------------------------------------------------------------------------

TEST(Gradcheck, SuitePassesAtTheDefaultTolerance) {
  const GradcheckReport report = run_gradcheck_suite(0, 1e-4);
  EXPECT_TRUE(report.pass);
  EXPECT_GE(report.rows.size(), 10u);
  for (const auto& row : report.rows) EXPECT_LT(row.max_rel_err, 1e-4) << row.name;
}

TEST(Gradcheck, ImpossibleToleranceFailsEveryOp) {
  std::ostringstream os;
  EXPECT_EQ(cmd_gradcheck(0, 0.0, os), 2);
  const GradcheckReport report = run_gradcheck_suite(0, 0.0);
  EXPECT_FALSE(report.pass);
  for (const auto& row : report.rows) {
    EXPECT_FALSE(row.pass);
    // the report names every op it failed
    EXPECT_NE(os.str().find(row.name), std::string::npos);
  }
}

TEST(Gradcheck, SameSeedReproducesTheReportExactly) {
  std::ostringstream a, b;
  EXPECT_EQ(cmd_gradcheck(42, 1e-4, a), 0);
  EXPECT_EQ(cmd_gradcheck(42, 1e-4, b), 0);
  EXPECT_EQ(a.str(), b.str());

  const GradcheckReport ra = run_gradcheck_suite(42, 1e-4);
  const GradcheckReport rb = run_gradcheck_suite(42, 1e-4);
  ASSERT_EQ(ra.rows.size(), rb.rows.size());
  for (std::size_t i = 0; i < ra.rows.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(ra.rows[i].max_rel_err),
              std::bit_cast<std::uint64_t>(rb.rows[i].max_rel_err));
}

// ---------------------------------------------------------------------------
// sensitivity command
// ---------------------------------------------------------------------------

TEST(Sensitivity, EmitsTableWithKnownAnchorRows) {
  auto dir = temp_dir("sens");
  std::ostringstream os;
  EXPECT_EQ(cmd_sensitivity(16.0, 12.8, dir, os), 0);

  const auto rows = parse_csv(dir / "sensitivity.csv");
  ASSERT_EQ(rows.at(0), (std::vector<std::string>{"shift_x", "shift_y", "iou", "nwd_similarity"}));
  // 17 axial rows (0..16) then 16 diagonal rows
  ASSERT_EQ(rows.size(), 1u + 17u + 16u);

  // shift 0: identical boxes
  EXPECT_EQ(cell_num(rows, 1, 2), 1.0);
  EXPECT_EQ(cell_num(rows, 1, 3), 1.0);
  // axial shift 4: overlap 12*16 over union 20*16
  EXPECT_DOUBLE_EQ(cell_num(rows, 5, 2), 0.6);
  // diagonal shift (4,4): overlap 144 over union 368
  const auto& diag4 = rows.at(1 + 17 + 3);
  EXPECT_EQ(diag4.at(0), "4");
  EXPECT_EQ(diag4.at(1), "4");
  EXPECT_DOUBLE_EQ(std::strtod(diag4.at(2).c_str(), nullptr), 144.0 / 368.0);
  // the smooth similarity dominates hard overlap across the axial sweep
  for (std::size_t r = 1; r <= 17; ++r) EXPECT_GE(cell_num(rows, r, 3), cell_num(rows, r, 2));

  const std::string svg = slurp(dir / "sensitivity.svg");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Sensitivity, JointDoublingLeavesBothColumnsUnchanged) {
  auto dir = temp_dir("sens_scale");
  std::ostringstream os;
  EXPECT_EQ(cmd_sensitivity(16.0, 12.8, dir, os), 0);
  const auto rows = parse_csv(dir / "scale_consistency.csv");
  ASSERT_EQ(rows.at(0), (std::vector<std::string>{"shift_x", "shift_y", "iou", "iou_2x",
                                                  "nwd_similarity", "nwd_similarity_2x"}));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    EXPECT_EQ(rows[r].at(2), rows[r].at(3)) << "row " << r;
    EXPECT_EQ(rows[r].at(4), rows[r].at(5)) << "row " << r;
  }
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// training, resume, determinism
// ---------------------------------------------------------------------------

TEST(Training, WritesLogCheckpointAndReportsProgress) {
  auto dir = temp_dir("train_basic");
  RFWNetConfig cfg = tiny_config(dir);
  std::ostringstream os;
  EXPECT_EQ(cmd_train(cfg, os), 0);
  EXPECT_NE(os.str().find("epoch 1/2"), std::string::npos);
  EXPECT_NE(os.str().find("final val_mAP="), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint.bin"));

  // one log row per optimizer step plus the header
  const auto log = parse_csv(dir / "train_log.csv");
  ASSERT_EQ(log.at(0), (std::vector<std::string>{"step", "cls_loss", "box_loss", "total"}));
  EXPECT_EQ(log.size(), 1u + 2u * 2u);  // 8 images / batch 4 = 2 steps per epoch
  std::filesystem::remove_all(dir);
}

TEST(Training, SlicedRunReproducesStraightRunBitwise) {
  auto dir_a = temp_dir("train_straight");
  auto dir_b = temp_dir("train_sliced");
  RFWNetConfig cfg_a = tiny_config(dir_a);
  RFWNetConfig cfg_b = tiny_config(dir_b);

  std::ostringstream os_a;
  run_training(cfg_a, os_a, true);

  std::ostringstream os_b1, os_b2;
  run_training(cfg_b, os_b1, true, 1);  // stops after the first epoch
  EXPECT_EQ(os_b1.str().find("epoch 2/2"), std::string::npos);
  run_training(cfg_b, os_b2, true);
  EXPECT_NE(os_b2.str().find("resuming"), std::string::npos);

  const Checkpoint a = load_checkpoint(dir_a / "checkpoint.bin");
  const Checkpoint b = load_checkpoint(dir_b / "checkpoint.bin");
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    ASSERT_TRUE(b.tensors.count(name)) << name;
    EXPECT_TRUE(bits_equal(t.data(), b.tensors.at(name).data())) << name;
  }
  EXPECT_EQ(a.strings.at("epoch"), b.strings.at("epoch"));
  EXPECT_EQ(a.strings.at("step"), b.strings.at("step"));

  // the interleaved log concatenates to the straight log
  EXPECT_EQ(slurp(dir_a / "train_log.csv"), slurp(dir_b / "train_log.csv"));
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST(Training, SameSeedGivesByteIdenticalRuns) {
  auto dir_a = temp_dir("det_a");
  auto dir_b = temp_dir("det_b");
  std::ostringstream os_a, os_b;
  run_training(tiny_config(dir_a), os_a, true);
  run_training(tiny_config(dir_b), os_b, true);
  EXPECT_EQ(slurp(dir_a / "train_log.csv"), slurp(dir_b / "train_log.csv"));
  EXPECT_EQ(os_a.str(), os_b.str());
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST(Training, ResumeRefusesASemanticallyDifferentConfig) {
  auto dir = temp_dir("train_refuse");
  RFWNetConfig cfg = tiny_config(dir);
  std::ostringstream os;
  run_training(cfg, os, true, 1);

  RFWNetConfig other = cfg;
  other.seed = cfg.seed + 1;
  std::ostringstream os2;
  EXPECT_THROW(run_training(other, os2, true), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

TEST(Training, ResumeIgnoresWhereArtifactsLive) {
  auto dir = temp_dir("train_moved");
  auto elsewhere = temp_dir("train_moved_out");
  RFWNetConfig cfg = tiny_config(dir);
  std::ostringstream os;
  run_training(cfg, os, true);

  RFWNetConfig moved = cfg;
  moved.out_dir = elsewhere.string();
  moved.checkpoint_path = (dir / "checkpoint.bin").string();
  std::ostringstream os2;
  run_training(moved, os2, true);
  EXPECT_NE(os2.str().find("nothing to do"), std::string::npos);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(elsewhere);
}

// ---------------------------------------------------------------------------
// evaluation command
// ---------------------------------------------------------------------------

TEST(Eval, UntrainedModelScoresNearZero) {
  auto dir = temp_dir("eval_fresh");
  RFWNetConfig cfg = tiny_config(dir);
  cfg.val_images = 25;
  std::ostringstream os;
  EXPECT_EQ(cmd_eval(cfg, os), 0);
  EXPECT_NE(os.str().find("freshly initialized"), std::string::npos);

  const auto rows = parse_csv(dir / "eval.csv");
  ASSERT_EQ(rows.at(0), (std::vector<std::string>{"class", "ap", "gts"}));
  ASSERT_EQ(rows.back().at(0), "mAP");
  EXPECT_LT(cell_num(rows, rows.size() - 1, 1), 0.05);
  std::filesystem::remove_all(dir);
}

TEST(Eval, LoadsACheckpointRegardlessOfPathSettings) {
  auto dir = temp_dir("eval_ckpt");
  auto out2 = temp_dir("eval_ckpt_out");
  RFWNetConfig cfg = tiny_config(dir);
  cfg.epochs = 1;
  std::ostringstream os;
  run_training(cfg, os, true);

  RFWNetConfig ecfg = cfg;
  ecfg.out_dir = out2.string();
  ecfg.checkpoint_path = (dir / "checkpoint.bin").string();
  std::ostringstream os2;
  EXPECT_EQ(cmd_eval(ecfg, os2), 0);
  EXPECT_NE(os2.str().find("loaded"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(out2 / "eval.csv"));
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(out2);
}

// ---------------------------------------------------------------------------
// loss-mix ablation command
// ---------------------------------------------------------------------------

TEST(Ablation, EmitsAllSevenMixesWellFormed) {
  auto dir = temp_dir("ablate");
  RFWNetConfig cfg = tiny_config(dir);
  cfg.train_images = 4;
  cfg.val_images = 2;
  cfg.epochs = 1;
  std::ostringstream os;
  EXPECT_EQ(cmd_ablate(cfg, os), 0);

  const auto rows = parse_csv(dir / "ablation.csv");
  ASSERT_EQ(rows.at(0), (std::vector<std::string>{"gamma", "beta", "map"}));
  ASSERT_EQ(rows.size(), 1u + 7u);
  const auto& mixes = ablation_rows();
  for (std::size_t i = 0; i < mixes.size(); ++i) {
    EXPECT_DOUBLE_EQ(cell_num(rows, i + 1, 0), mixes[i].first);
    EXPECT_DOUBLE_EQ(cell_num(rows, i + 1, 1), mixes[i].second);
    const double map = cell_num(rows, i + 1, 2);
    EXPECT_GE(map, 0.0);
    EXPECT_LE(map, 1.0);
  }
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// attention export command
// ---------------------------------------------------------------------------

TEST(Attention, ExportsGateAndInputAsFullSizeImages) {
  auto dir = temp_dir("attn");
  RFWNetConfig cfg = tiny_config(dir);
  std::ostringstream os;
  EXPECT_EQ(cmd_export_attention(cfg, 0, os), 0);

  for (const char* prefix : {"attention_", "input_"}) {
    const auto path = dir / (std::string(prefix) + "synth-000000.pgm");
    std::ifstream is(path, std::ios::binary);
    ASSERT_TRUE(is) << path;
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, cfg.model.image_size);
    EXPECT_EQ(h, cfg.model.image_size);
    EXPECT_EQ(maxv, 255);
  }

  std::ostringstream os2;
  EXPECT_THROW(cmd_export_attention(cfg, 99, os2), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// parameter count command
// ---------------------------------------------------------------------------

TEST(Params, DefaultConfigCountIsFrozen) {
  const RFWNetConfig cfg;
  EXPECT_EQ(model_parameter_count(cfg), 188598);
  std::ostringstream os;
  EXPECT_EQ(cmd_params(cfg, os), 0);
  EXPECT_NE(os.str().find("188598"), std::string::npos);
}

TEST(Params, CountTracksArchitectureChanges) {
  RFWNetConfig slim;
  slim.model.backbone.stage_channels = {8, 16, 32};
  const auto full = model_parameter_count(RFWNetConfig{});
  const auto less = model_parameter_count(slim);
  EXPECT_LT(less, full);

  RFWNetConfig plain;
  plain.model.use_fbsm = false;
  EXPECT_LT(model_parameter_count(plain), full);
}
