#pragma once

// Dataset layer: synthetic scene generation, DOTA-style annotation text
// ingestion/emission, and directory persistence of annotated images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfw/box.hpp"
#include "rfw/detector.hpp"
#include "rfw/io.hpp"
#include "rfw/rng.hpp"
#include "rfw/tensor.hpp"

namespace rfw {

struct AnnotatedImage {
  Tensor image;  // [3, H, W], values in [0, 1]
  std::vector<GtBox> gts;
  std::string id;

  void validate() const {
    if (image.ndim() != 3 || image.dim(0) != 3)
      throw std::invalid_argument("AnnotatedImage: image must be [3,H,W]");
    const int H = image.dim(1), W = image.dim(2);
    if (H <= 0 || W <= 0 || H % 32 != 0 || W % 32 != 0)
      throw std::invalid_argument("AnnotatedImage: H and W must be positive multiples of 32");
    for (double v : image.data())
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("AnnotatedImage: pixel values must lie in [0,1]");
    for (const GtBox& g : this->gts) {
      g.box.validate();
      if (g.class_id < 0) throw std::invalid_argument("AnnotatedImage: negative class id");
      const double eps = 1e-9;
      if (g.box.cx - g.box.w / 2 < -eps || g.box.cy - g.box.h / 2 < -eps ||
          g.box.cx + g.box.w / 2 > W + eps || g.box.cy + g.box.h / 2 > H + eps)
        throw std::invalid_argument("AnnotatedImage: gt box outside image bounds");
    }
  }
};

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

inline constexpr int kSynthNumClasses = 3;  // square, disc, triangle

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"square", "disc", "triangle"};
  return names;
}

struct SynthSpec {
  int image_size = 96;
  int min_objects = 1;
  int max_objects = 6;
  int min_size = 8;
  int small_size = 16;  // objects at or below this count as small
  int max_size = 32;
  double small_fraction = 0.5;  // probability an object is drawn small

  void validate() const {
    if (image_size <= 0 || image_size % 32 != 0)
      throw std::invalid_argument("SynthSpec: image_size must be a positive multiple of 32");
    if (min_objects < 1 || max_objects < min_objects)
      throw std::invalid_argument("SynthSpec: need 1 <= min_objects <= max_objects");
    if (min_size < 2 || min_size > small_size || small_size >= max_size)
      throw std::invalid_argument("SynthSpec: need 2 <= min_size <= small_size < max_size");
    if (max_size > image_size)
      throw std::invalid_argument("SynthSpec: max_size exceeds image_size");
    // The detector's whole point is small objects; refuse degenerate mixes.
    if (!(small_fraction >= 0.4 && small_fraction <= 1.0))
      throw std::invalid_argument("SynthSpec: small_fraction must lie in [0.4, 1]");
  }
};

namespace detail {

// Covered-pixel tests use pixel centers (x + 0.5, y + 0.5) against shapes
// inscribed in the integer placement square [tlx, tlx+size) x [tly, tly+size).
inline bool synth_pixel_covered(int cls, int x, int y, int tlx, int tly, int size) {
  const double px = x + 0.5, py = y + 0.5;
  const double cx = tlx + size / 2.0, cy = tly + size / 2.0;
  switch (cls) {
    case 0:  // filled square: the placement square itself
      return x >= tlx && x < tlx + size && y >= tly && y < tly + size;
    case 1: {  // disc inscribed in the square
      const double r = size / 2.0;
      const double dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= r * r;
    }
    default: {  // triangle: apex at top-center, base along the bottom edge
      if (py < tly || py > tly + size) return false;
      const double t = (py - tly) / size;  // 0 at apex row, 1 at base
      const double half = t * size / 2.0;
      return px >= cx - half && px <= cx + half;
    }
  }
}

}  // namespace detail

inline std::vector<AnnotatedImage> synth_generate(int n, std::uint64_t seed,
                                                  const SynthSpec& spec = {}) {
  if (n <= 0) throw std::invalid_argument("synth_generate: n must be positive");
  spec.validate();
  const int S = spec.image_size;

  std::vector<AnnotatedImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int idx = 0; idx < n; ++idx) {
    // Independent per-image stream so generation order (or parallel workers)
    // cannot change the pixels.
    Rng rng(seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(idx + 1));

    AnnotatedImage ai;
    ai.image = Tensor::zeros({3, S, S});
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth-%06d", idx);
    ai.id = buf;

    // Textured noise background: dim base tone plus per-pixel jitter, kept
    // strictly below the object color range for contrast.
    double base[3];
    for (double& b : base) b = rng.uniform(0.05, 0.30);
    double* img = ai.image.data().data();
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < S * S; ++p)
        img[c * S * S + p] = std::clamp(base[c] + rng.uniform(-0.08, 0.08), 0.0, 1.0);

    const int count = rng.uniform_int(spec.min_objects, spec.max_objects);
    for (int obj = 0; obj < count; ++obj) {
      const int cls = rng.uniform_int(0, kSynthNumClasses - 1);
      const bool small = rng.uniform(0.0, 1.0) < spec.small_fraction;
      const int size = small ? rng.uniform_int(spec.min_size, spec.small_size)
                             : rng.uniform_int(spec.small_size + 1, spec.max_size);

      // A few placement attempts to limit crowding; after that we accept
      // overlap rather than loop forever on a busy canvas.
      int tlx = 0, tly = 0;
      AABox box;
      for (int attempt = 0; attempt < 20; ++attempt) {
        tlx = rng.uniform_int(0, S - size);
        tly = rng.uniform_int(0, S - size);
        box = AABox{tlx + size / 2.0, tly + size / 2.0, static_cast<double>(size),
                    static_cast<double>(size)};
        bool crowded = false;
        for (const GtBox& g : ai.gts)
          if (iou(box, g.box) > 0.2) {
            crowded = true;
            break;
          }
        if (!crowded) break;
      }

      double color[3];
      for (double& c : color) c = rng.uniform(0.5, 1.0);
      for (int y = tly; y < tly + size; ++y)
        for (int x = tlx; x < tlx + size; ++x)
          if (detail::synth_pixel_covered(cls, x, y, tlx, tly, size))
            for (int c = 0; c < 3; ++c) img[(c * S + y) * S + x] = color[c];

      ai.gts.push_back(GtBox{cls, box});
    }
    out.push_back(std::move(ai));
  }
  return out;
}

// ---------------------------------------------------------------------------
// DOTA-style annotation text
// ---------------------------------------------------------------------------

struct DotaRecord {
  int class_id = 0;
  AABox box;
  int difficulty = 0;
};

struct DotaParseResult {
  std::vector<DotaRecord> records;
  std::vector<std::string> warnings;  // skipped records (unknown class names)
};

namespace detail {

inline double parse_coord(const std::string& tok, int line_no) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || !std::isfinite(v))
    throw std::runtime_error("dota_parse: line " + std::to_string(line_no) +
                             ": bad coordinate '" + tok + "'");
  return v;
}

}  // namespace detail

// Each record line: 8 quadrilateral corner coordinates, a class name, and a
// difficulty flag. The quad is reduced to its axis-aligned bounding rectangle.
// Header/metadata lines ('#...' or 'key:value') are skipped; unknown class
// names are collected as warnings and their records dropped.
inline DotaParseResult dota_parse(const std::string& text,
                                  const std::vector<std::string>& class_names) {
  DotaParseResult result;
  std::istringstream lines(text);
  std::string line;
  for (int line_no = 1; std::getline(lines, line); ++line_no) {
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::vector<std::string> toks;
    std::istringstream ls(line);
    for (std::string t; ls >> t;) toks.push_back(std::move(t));
    if (toks.empty()) continue;
    if (toks[0][0] == '#' || toks[0].find(':') != std::string::npos) continue;

    if (toks.size() != 10)
      throw std::runtime_error("dota_parse: line " + std::to_string(line_no) + ": expected 10 fields, got " +
                               std::to_string(toks.size()));
    double xs[4], ys[4];
    for (int i = 0; i < 4; ++i) {
      xs[i] = detail::parse_coord(toks[2 * i], line_no);
      ys[i] = detail::parse_coord(toks[2 * i + 1], line_no);
    }
    double xmin = xs[0], xmax = xs[0], ymin = ys[0], ymax = ys[0];
    for (int i = 1; i < 4; ++i) {
      xmin = std::min(xmin, xs[i]);
      xmax = std::max(xmax, xs[i]);
      ymin = std::min(ymin, ys[i]);
      ymax = std::max(ymax, ys[i]);
    }
    if (!(xmax > xmin) || !(ymax > ymin))
      throw std::runtime_error("dota_parse: line " + std::to_string(line_no) + ": degenerate box");

    char* end = nullptr;
    const long diff = std::strtol(toks[9].c_str(), &end, 10);
    if (end != toks[9].c_str() + toks[9].size())
      throw std::runtime_error("dota_parse: line " + std::to_string(line_no) +
                               ": bad difficulty flag '" + toks[9] + "'");

    int class_id = -1;
    for (std::size_t c = 0; c < class_names.size(); ++c)
      if (class_names[c] == toks[8]) {
        class_id = static_cast<int>(c);
        break;
      }
    if (class_id < 0) {
      result.warnings.push_back("line " + std::to_string(line_no) + ": unknown class '" +
                                toks[8] + "'");
      continue;
    }

    DotaRecord rec;
    rec.class_id = class_id;
    rec.box = AABox{(xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin, ymax - ymin};
    rec.difficulty = static_cast<int>(diff);
    result.records.push_back(rec);
  }
  return result;
}

inline std::string dota_format(const std::vector<DotaRecord>& records,
                               const std::vector<std::string>& class_names) {
  std::string out;
  char buf[64];
  for (const DotaRecord& r : records) {
    if (r.class_id < 0 || r.class_id >= static_cast<int>(class_names.size()))
      throw std::invalid_argument("dota_format: class id out of range");
    const double x1 = r.box.cx - r.box.w / 2, x2 = r.box.cx + r.box.w / 2;
    const double y1 = r.box.cy - r.box.h / 2, y2 = r.box.cy + r.box.h / 2;
    const double corners[8] = {x1, y1, x2, y1, x2, y2, x1, y2};
    for (double v : corners) {
      std::snprintf(buf, sizeof(buf), "%.6f ", v);
      out += buf;
    }
    out += class_names[static_cast<std::size_t>(r.class_id)];
    std::snprintf(buf, sizeof(buf), " %d\n", r.difficulty);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset persistence: <id>.img raw tensor + <id>.txt annotation per image
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir,
                         const std::vector<AnnotatedImage>& images,
                         const std::vector<std::string>& class_names) {
  std::filesystem::create_directories(dir);
  for (const AnnotatedImage& ai : images) {
    save_tensor(dir / (ai.id + ".img"), ai.image);
    std::vector<DotaRecord> records;
    records.reserve(ai.gts.size());
    for (const GtBox& g : ai.gts) records.push_back(DotaRecord{g.class_id, g.box, 0});
    std::ofstream os(dir / (ai.id + ".txt"));
    if (!os) throw std::runtime_error("save_dataset: cannot write annotation for " + ai.id);
    os << dota_format(records, class_names);
  }
}

inline std::vector<AnnotatedImage> load_dataset(const std::filesystem::path& dir,
                                                const std::vector<std::string>& class_names,
                                                std::vector<std::string>* warnings = nullptr) {
  if (!std::filesystem::is_directory(dir))
    throw std::runtime_error("load_dataset: not a directory: " + dir.string());
  std::vector<std::filesystem::path> img_files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".img")
      img_files.push_back(entry.path());
  std::sort(img_files.begin(), img_files.end());

  std::vector<AnnotatedImage> out;
  out.reserve(img_files.size());
  for (const auto& img_path : img_files) {
    AnnotatedImage ai;
    ai.id = img_path.stem().string();
    ai.image = load_tensor(img_path);

    std::filesystem::path txt = img_path;
    txt.replace_extension(".txt");
    std::ifstream is(txt);
    if (!is) throw std::runtime_error("load_dataset: missing annotation file " + txt.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    DotaParseResult parsed = dota_parse(ss.str(), class_names);
    if (warnings)
      for (std::string& w : parsed.warnings) warnings->push_back(ai.id + ": " + std::move(w));
    for (const DotaRecord& r : parsed.records) ai.gts.push_back(GtBox{r.class_id, r.box});

    ai.validate();
    out.push_back(std::move(ai));
  }
  return out;
}

}  // namespace rfw
