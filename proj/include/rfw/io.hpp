#pragma once

// File plumbing shared by datasets, checkpoints, and the experiment CLI:
// explicit little-endian binary primitives, a raw tensor container, CSV
// tables, PGM grayscale maps, and a minimal SVG line plotter.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfw/tensor.hpp"

namespace rfw {
namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("binary read: truncated u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64_le(std::ostream& os, double d) {
  std::uint64_t v;
  static_assert(sizeof(v) == sizeof(d));
  std::memcpy(&v, &d, 8);
  write_u64_le(os, v);
}

inline double read_f64_le(std::istream& is) {
  const std::uint64_t v = read_u64_le(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64_le(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64_le(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("binary read: truncated string");
  return s;
}

}  // namespace detail

// --- raw tensor container ----------------------------------------------------

inline constexpr char kTensorMagic[8] = {'R', 'F', 'W', 'T', 'E', 'N', 'S', '1'};

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 8);
  detail::write_u64_le(os, static_cast<std::uint64_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i)
    detail::write_u64_le(os, static_cast<std::uint64_t>(t.dim(i)));
  for (double v : t.data()) detail::write_f64_le(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kTensorMagic, 8) != 0)
    throw std::runtime_error("tensor file: bad magic, expected RFWTENS1");
  const std::uint64_t rank = detail::read_u64_le(is);
  if (rank > 8) throw std::runtime_error("tensor file: implausible rank " + std::to_string(rank));
  Shape shape;
  std::int64_t count = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    shape.push_back(static_cast<std::int64_t>(detail::read_u64_le(is)));
    count *= shape.back();
  }
  std::vector<double> data(static_cast<std::size_t>(count));
  for (double& v : data) v = detail::read_f64_le(is);
  return Tensor::from(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return read_tensor(is);
}

// --- CSV ---------------------------------------------------------------------

inline std::string csv_cell(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void write_csv(std::ostream& os, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << "\n";
  }
}

inline void save_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<std::string>>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_csv(os, header, rows);
}

// --- PGM ---------------------------------------------------------------------

// Binary grayscale image, min-max normalized; accepts [H,W] or [1,1,H,W].
inline void save_pgm(const std::filesystem::path& path, const Tensor& map) {
  int H = 0, W = 0;
  if (map.ndim() == 2) {
    H = map.dim(0);
    W = map.dim(1);
  } else if (map.ndim() == 4 && map.dim(0) == 1 && map.dim(1) == 1) {
    H = map.dim(2);
    W = map.dim(3);
  } else {
    throw std::invalid_argument("save_pgm: expected [H,W] or [1,1,H,W]");
  }
  double lo = map.data()[0], hi = map.data()[0];
  for (double v : map.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << "P5\n" << W << " " << H << "\n255\n";
  for (double v : map.data()) {
    const int g = static_cast<int>(255.0 * (v - lo) / span + 0.5);
    os.put(static_cast<char>(std::clamp(g, 0, 255)));
  }
}

// --- SVG ---------------------------------------------------------------------

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Minimal line plot: axes, polylines, legend. Enough to eyeball a curve.
inline void save_svg_plot(const std::filesystem::path& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
  if (series.empty()) throw std::invalid_argument("save_svg_plot: no series");
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const PlotSeries& s : series)
    for (auto [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (!(xmin <= xmax)) throw std::invalid_argument("save_svg_plot: empty series");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;
  const double W = 640, H = 480, L = 70, R = 20, T = 40, B = 50;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  static const char* colors[] = {"#1f6fb2", "#c23b22", "#2c8c4a", "#8150a0", "#b28b1f"};

  std::ostringstream os;
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
     << "</text>\n";
  os << "<line x1='" << L << "' y1='" << H - B << "' x2='" << W - R << "' y2='" << H - B
     << "' stroke='black'/>\n";
  os << "<line x1='" << L << "' y1='" << T << "' x2='" << L << "' y2='" << H - B
     << "' stroke='black'/>\n";
  os << "<text x='" << W / 2 << "' y='" << H - 12 << "' text-anchor='middle' font-size='12'>"
     << x_label << "</text>\n";
  os << "<text x='16' y='" << H / 2 << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 "
     << H / 2 << ")'>" << y_label << "</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double fx = xmin + (xmax - xmin) * tick / 4.0;
    const double fy = ymin + (ymax - ymin) * tick / 4.0;
    os << "<text x='" << px(fx) << "' y='" << H - B + 16
       << "' text-anchor='middle' font-size='10'>" << csv_cell(fx) << "</text>\n";
    os << "<text x='" << L - 6 << "' y='" << py(fy) + 3 << "' text-anchor='end' font-size='10'>"
       << csv_cell(fy) << "</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* color = colors[si % 5];
    os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
    for (auto [x, y] : series[si].points) os << px(x) << "," << py(y) << " ";
    os << "'/>\n";
    os << "<text x='" << W - R - 150 << "' y='" << T + 16 * static_cast<double>(si + 1)
       << "' font-size='12' fill='" << color << "'>" << series[si].name << "</text>\n";
  }
  os << "</svg>\n";

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << os.str();
}

}  // namespace rfw
