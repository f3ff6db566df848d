#pragma once

// Plain-text key=value configuration for the experiment CLI. Every key has a
// default; parsing rejects unknown or duplicate keys and re-validates the
// assembled config, and serialize() -> parse() is an exact round trip.
//
// Format: one `key = value` per line; lines starting with '#' and blank
// lines are ignored; integer lists are comma-separated; booleans are
// true/false.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfw/detector.hpp"
#include "rfw/train.hpp"

namespace rfw {

struct RFWNetConfig {
  DetectorConfig model;  // backbone, attention stage, head sizing
  TrainConfig train;     // lr, momentum, box_weight, loss mix, threads
  int batch = 16;
  int epochs = 20;
  std::uint64_t seed = 0;
  double eval_iou_thr = 0.5;
  double eval_score_thr = 0.05;
  double eval_nms_thr = 0.5;
  int train_images = 500;
  int val_images = 100;
  std::string dataset_dir;      // empty: generate synthetic data on the fly
  std::string checkpoint_path;  // empty: <out_dir>/checkpoint.bin
  std::string out_dir = "out";

  void validate() const {
    model.validate();
    train.validate();
    if (batch < 1) throw std::invalid_argument("config: train.batch must be positive");
    if (epochs < 1) throw std::invalid_argument("config: train.epochs must be positive");
    if (!(eval_iou_thr > 0.0 && eval_iou_thr <= 1.0))
      throw std::invalid_argument("config: eval.iou_thr must lie in (0, 1]");
    if (!(eval_score_thr >= 0.0 && eval_score_thr <= 1.0))
      throw std::invalid_argument("config: eval.score_thr must lie in [0, 1]");
    if (!(eval_nms_thr > 0.0 && eval_nms_thr < 1.0))
      throw std::invalid_argument("config: eval.nms_thr must lie in (0, 1)");
    if (train_images < 1 || val_images < 1)
      throw std::invalid_argument("config: data.train_images and data.val_images must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline long long config_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  return out;
}

inline double config_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  return out;
}

inline bool config_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<int> config_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<int>(config_int(key, trim(item))));
  if (out.empty()) throw std::invalid_argument("config: empty list for " + key);
  return out;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace detail

inline RFWNetConfig parse_config(const std::string& text) {
  RFWNetConfig cfg;
  std::set<std::string> seen;
  std::istringstream lines(text);
  std::string line;
  for (int line_no = 1; std::getline(lines, line); ++line_no) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    if (!seen.insert(key).second)
      throw std::invalid_argument("config: duplicate key '" + key + "'");

    using detail::config_bool;
    using detail::config_double;
    using detail::config_int;
    using detail::config_int_list;
    if (key == "backbone.stage_channels")
      cfg.model.backbone.stage_channels = config_int_list(key, val);
    else if (key == "backbone.stage_depths")
      cfg.model.backbone.stage_depths = config_int_list(key, val);
    else if (key == "backbone.mlp_ratio")
      cfg.model.backbone.mlp_ratio = config_double(key, val);
    else if (key == "backbone.in_channels")
      cfg.model.backbone.in_channels = static_cast<int>(config_int(key, val));
    else if (key == "fbsm.s")
      cfg.model.fbsm.s = static_cast<int>(config_int(key, val));
    else if (key == "fbsm.k")
      cfg.model.fbsm.k = static_cast<int>(config_int(key, val));
    else if (key == "fbsm.heads")
      cfg.model.fbsm.heads = static_cast<int>(config_int(key, val));
    else if (key == "fbsm.use_routing_weights")
      cfg.model.fbsm.use_routing_weights = config_bool(key, val);
    else if (key == "model.num_classes")
      cfg.model.num_classes = static_cast<int>(config_int(key, val));
    else if (key == "model.image_size")
      cfg.model.image_size = static_cast<int>(config_int(key, val));
    else if (key == "model.use_fbsm")
      cfg.model.use_fbsm = config_bool(key, val);
    else if (key == "loss.gamma")
      cfg.train.wcw.gamma = config_double(key, val);
    else if (key == "loss.beta")
      cfg.train.wcw.beta = config_double(key, val);
    else if (key == "loss.nwd_constant")
      cfg.train.wcw.nwd_constant = config_double(key, val);
    else if (key == "loss.focal_gamma")
      cfg.train.focal_gamma = config_double(key, val);
    else if (key == "train.lr")
      cfg.train.lr = config_double(key, val);
    else if (key == "train.momentum")
      cfg.train.momentum = config_double(key, val);
    else if (key == "train.box_weight")
      cfg.train.box_weight = config_double(key, val);
    else if (key == "train.threads")
      cfg.train.threads = static_cast<int>(config_int(key, val));
    else if (key == "train.batch")
      cfg.batch = static_cast<int>(config_int(key, val));
    else if (key == "train.epochs")
      cfg.epochs = static_cast<int>(config_int(key, val));
    else if (key == "train.seed")
      cfg.seed = static_cast<std::uint64_t>(config_int(key, val));
    else if (key == "eval.iou_thr")
      cfg.eval_iou_thr = config_double(key, val);
    else if (key == "eval.score_thr")
      cfg.eval_score_thr = config_double(key, val);
    else if (key == "eval.nms_thr")
      cfg.eval_nms_thr = config_double(key, val);
    else if (key == "data.train_images")
      cfg.train_images = static_cast<int>(config_int(key, val));
    else if (key == "data.val_images")
      cfg.val_images = static_cast<int>(config_int(key, val));
    else if (key == "paths.dataset_dir")
      cfg.dataset_dir = val;
    else if (key == "paths.checkpoint")
      cfg.checkpoint_path = val;
    else if (key == "paths.out_dir")
      cfg.out_dir = val;
    else
      throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline std::string serialize_config(const RFWNetConfig& cfg) {
  using detail::fmt_double;
  using detail::fmt_int_list;
  std::string out;
  auto kv = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  kv("backbone.stage_channels", fmt_int_list(cfg.model.backbone.stage_channels));
  kv("backbone.stage_depths", fmt_int_list(cfg.model.backbone.stage_depths));
  kv("backbone.mlp_ratio", fmt_double(cfg.model.backbone.mlp_ratio));
  kv("backbone.in_channels", std::to_string(cfg.model.backbone.in_channels));
  kv("fbsm.s", std::to_string(cfg.model.fbsm.s));
  kv("fbsm.k", std::to_string(cfg.model.fbsm.k));
  kv("fbsm.heads", std::to_string(cfg.model.fbsm.heads));
  kv("fbsm.use_routing_weights", cfg.model.fbsm.use_routing_weights ? "true" : "false");
  kv("model.num_classes", std::to_string(cfg.model.num_classes));
  kv("model.image_size", std::to_string(cfg.model.image_size));
  kv("model.use_fbsm", cfg.model.use_fbsm ? "true" : "false");
  kv("loss.gamma", fmt_double(cfg.train.wcw.gamma));
  kv("loss.beta", fmt_double(cfg.train.wcw.beta));
  kv("loss.nwd_constant", fmt_double(cfg.train.wcw.nwd_constant));
  kv("loss.focal_gamma", fmt_double(cfg.train.focal_gamma));
  kv("train.lr", fmt_double(cfg.train.lr));
  kv("train.momentum", fmt_double(cfg.train.momentum));
  kv("train.box_weight", fmt_double(cfg.train.box_weight));
  kv("train.threads", std::to_string(cfg.train.threads));
  kv("train.batch", std::to_string(cfg.batch));
  kv("train.epochs", std::to_string(cfg.epochs));
  kv("train.seed", std::to_string(cfg.seed));
  kv("eval.iou_thr", fmt_double(cfg.eval_iou_thr));
  kv("eval.score_thr", fmt_double(cfg.eval_score_thr));
  kv("eval.nms_thr", fmt_double(cfg.eval_nms_thr));
  kv("data.train_images", std::to_string(cfg.train_images));
  kv("data.val_images", std::to_string(cfg.val_images));
  kv("paths.dataset_dir", cfg.dataset_dir);
  kv("paths.checkpoint", cfg.checkpoint_path);
  kv("paths.out_dir", cfg.out_dir);
  return out;
}

inline RFWNetConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace rfw
