#include <gtest/gtest.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rfw/data.hpp"

using namespace rfw;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("rfw_test_" + tag);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

// ---------------------------------------------------------------------------
// raw tensor files
// ---------------------------------------------------------------------------

TEST(Io, TensorFileRoundTripsBitwise) {
  Rng rng(71);
  std::vector<double> vals;
  for (int i = 0; i < 100; ++i) vals.push_back(rng.uniform(-1e6, 1e6));
  // values whose bit patterns a text format would mangle
  vals.push_back(-0.0);
  vals.push_back(5e-324);
  vals.push_back(0.1);
  vals.push_back(1.0 / 3.0);
  Tensor t = Tensor::from({4, 26}, vals);

  auto dir = temp_dir("tensor");
  std::filesystem::create_directories(dir);
  save_tensor(dir / "t.img", t);
  Tensor back = load_tensor(dir / "t.img");

  ASSERT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < vals.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back.data()[i]),
              std::bit_cast<std::uint64_t>(t.data()[i]));
  std::filesystem::remove_all(dir);
}

TEST(Io, TensorFileRejectsBadMagicAndTruncation) {
  auto dir = temp_dir("badmagic");
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "bad.img", std::ios::binary);
    os << "NOTMAGIC" << std::string(64, '\0');
  }
  EXPECT_THROW(load_tensor(dir / "bad.img"), std::runtime_error);

  save_tensor(dir / "cut.img", Tensor::full({8}, 1.5));
  std::filesystem::resize_file(dir / "cut.img", 40);
  EXPECT_THROW(load_tensor(dir / "cut.img"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Io, CsvWriterEmitsHeaderAndRows) {
  std::ostringstream os;
  write_csv(os, {"a", "b"}, {{csv_cell(1.0), csv_cell(2.5)}, {csv_cell(-3.0), "x"}});
  EXPECT_EQ(os.str(), "a,b\n1,2.5\n-3,x\n");
}

TEST(Io, PgmWriterNormalizesToFullRange) {
  auto dir = temp_dir("pgm");
  std::filesystem::create_directories(dir);
  Tensor map = Tensor::from({2, 3}, {0.0, 1.0, 2.0, 3.0, 4.0, 8.0});
  save_pgm(dir / "m.pgm", map);
  std::ifstream is(dir / "m.pgm", std::ios::binary);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "P5");
  int w, h, maxv;
  is >> w >> h >> maxv;
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(maxv, 255);
  is.get();  // single whitespace after maxval
  unsigned char px[6];
  is.read(reinterpret_cast<char*>(px), 6);
  EXPECT_EQ(px[0], 0);    // min maps to black
  EXPECT_EQ(px[5], 255);  // max maps to white
  EXPECT_EQ(px[3], static_cast<unsigned char>(255.0 * 3 / 8 + 0.5));
  std::filesystem::remove_all(dir);
}

TEST(Io, SvgPlotContainsPolylinePerSeries) {
  auto dir = temp_dir("svg");
  std::filesystem::create_directories(dir);
  save_svg_plot(dir / "p.svg", "curve", "x", "y",
                {{"one", {{0, 0}, {1, 1}}}, {"two", {{0, 1}, {1, 0}}}});
  std::ifstream is(dir / "p.svg");
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string svg = ss.str();
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_EQ(svg.find("<polyline", svg.find("<polyline") + 1) != std::string::npos, true);
  EXPECT_NE(svg.find(">one<"), std::string::npos);
  EXPECT_NE(svg.find(">two<"), std::string::npos);
  EXPECT_THROW(save_svg_plot(dir / "e.svg", "t", "x", "y", {}), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

TEST(Synth, SameSeedGivesBitIdenticalDatasets) {
  auto a = synth_generate(8, 123);
  auto b = synth_generate(8, 123);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    ASSERT_EQ(a[i].image.shape(), b[i].image.shape());
    for (std::size_t p = 0; p < a[i].image.data().size(); ++p)
      ASSERT_EQ(a[i].image.data()[p], b[i].image.data()[p]);
    ASSERT_EQ(a[i].gts.size(), b[i].gts.size());
    for (std::size_t g = 0; g < a[i].gts.size(); ++g) {
      EXPECT_EQ(a[i].gts[g].class_id, b[i].gts[g].class_id);
      EXPECT_EQ(a[i].gts[g].box.cx, b[i].gts[g].box.cx);
      EXPECT_EQ(a[i].gts[g].box.w, b[i].gts[g].box.w);
    }
  }
  auto c = synth_generate(8, 124);
  bool any_difference = false;
  for (std::size_t p = 0; p < a[0].image.data().size(); ++p)
    any_difference |= a[0].image.data()[p] != c[0].image.data()[p];
  EXPECT_TRUE(any_difference);
}

TEST(Synth, RejectsBadSpecs) {
  SynthSpec zero_objects;
  zero_objects.max_objects = 0;
  EXPECT_THROW(synth_generate(1, 0, zero_objects), std::invalid_argument);

  SynthSpec thin_small;
  thin_small.small_fraction = 0.2;
  EXPECT_THROW(synth_generate(1, 0, thin_small), std::invalid_argument);

  SynthSpec odd_canvas;
  odd_canvas.image_size = 100;
  EXPECT_THROW(synth_generate(1, 0, odd_canvas), std::invalid_argument);

  SynthSpec inverted;
  inverted.min_objects = 4;
  inverted.max_objects = 2;
  EXPECT_THROW(synth_generate(1, 0, inverted), std::invalid_argument);

  EXPECT_THROW(synth_generate(0, 0), std::invalid_argument);
}

TEST(Synth, EveryImageValidatesAndSizesStayInRange) {
  SynthSpec spec;
  for (const AnnotatedImage& ai : synth_generate(50, 7)) {
    ai.validate();
    EXPECT_EQ(ai.image.shape(), (Shape{3, 96, 96}));
    EXPECT_GE(ai.gts.size(), 1u);
    EXPECT_LE(ai.gts.size(), 6u);
    for (const GtBox& g : ai.gts) {
      EXPECT_GE(g.class_id, 0);
      EXPECT_LT(g.class_id, kSynthNumClasses);
      EXPECT_EQ(g.box.w, g.box.h);
      EXPECT_GE(g.box.w, spec.min_size);
      EXPECT_LE(g.box.w, spec.max_size);
      EXPECT_EQ(g.box.w, std::floor(g.box.w));
    }
  }
}

TEST(Synth, HistogramsMatchRequestedProportions) {
  auto images = synth_generate(1000, 20260814);
  std::int64_t total = 0, small = 0;
  std::int64_t per_class[kSynthNumClasses] = {0, 0, 0};
  for (const AnnotatedImage& ai : images)
    for (const GtBox& g : ai.gts) {
      ++total;
      small += g.box.w <= 16.0 ? 1 : 0;
      ++per_class[g.class_id];
    }
  ASSERT_GT(total, 0);
  const double n = static_cast<double>(total);
  EXPECT_NEAR(small / n, 0.5, 0.05);
  for (std::int64_t c : per_class) EXPECT_NEAR(c / n, 1.0 / 3.0, 0.05);
  // the small-object floor the generator is asked to guarantee
  EXPECT_GE(small / n, 0.4);
}

TEST(Synth, ObjectCenterCarriesObjectColor) {
  SynthSpec one;
  one.min_objects = 1;
  one.max_objects = 1;
  for (const AnnotatedImage& ai : synth_generate(50, 99, one)) {
    ASSERT_EQ(ai.gts.size(), 1u);
    const GtBox& g = ai.gts[0];
    const int x = static_cast<int>(g.box.cx);
    const int y = static_cast<int>(g.box.cy);
    for (int c = 0; c < 3; ++c) {
      const double v = ai.image.data()[static_cast<std::size_t>((c * 96 + y) * 96 + x)];
      EXPECT_GE(v, 0.5) << ai.id << " channel " << c;
    }
  }
}

// ---------------------------------------------------------------------------
// annotation text
// ---------------------------------------------------------------------------

TEST(Dota, AxisAlignedRectangleBecomesCenterSizeBox) {
  DotaParseResult r = dota_parse("100 100 200 100 200 200 100 200 plane 0\n", {"plane"});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_TRUE(r.warnings.empty());
  EXPECT_EQ(r.records[0].class_id, 0);
  EXPECT_DOUBLE_EQ(r.records[0].box.cx, 150.0);
  EXPECT_DOUBLE_EQ(r.records[0].box.cy, 150.0);
  EXPECT_DOUBLE_EQ(r.records[0].box.w, 100.0);
  EXPECT_DOUBLE_EQ(r.records[0].box.h, 100.0);
  EXPECT_EQ(r.records[0].difficulty, 0);
}

TEST(Dota, RotatedQuadReducesToCornerExtremes) {
  DotaParseResult r = dota_parse("0 10 10 0 20 10 10 20 ship 1\n", {"plane", "ship"});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].class_id, 1);
  EXPECT_DOUBLE_EQ(r.records[0].box.cx, 10.0);
  EXPECT_DOUBLE_EQ(r.records[0].box.cy, 10.0);
  EXPECT_DOUBLE_EQ(r.records[0].box.w, 20.0);
  EXPECT_DOUBLE_EQ(r.records[0].box.h, 20.0);
  EXPECT_EQ(r.records[0].difficulty, 1);
}

TEST(Dota, HeaderMetadataAndBlankLinesAreSkipped) {
  const std::string text =
      "imagesource:GoogleEarth\n"
      "gsd:0.146343590398\n"
      "# hand-written remark\n"
      "\n"
      "10 10 20 10 20 20 10 20 plane 0\n";
  DotaParseResult r = dota_parse(text, {"plane"});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Dota, EmptyFileGivesEmptyList) {
  DotaParseResult r = dota_parse("", {"plane"});
  EXPECT_TRUE(r.records.empty());
  EXPECT_TRUE(r.warnings.empty());
}

TEST(Dota, MalformedLinesReportTheirLineNumber) {
  auto expect_line = [](const std::string& text, const char* needle) {
    try {
      dota_parse(text, {"plane"});
      FAIL() << "expected parse error for: " << text;
    } catch (const std::runtime_error& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_line("10 10 20 10 20 20 10 20 plane 0\n1 2 3 plane 0\n", "line 2");
  expect_line("10 10 2x 10 20 20 10 20 plane 0\n", "line 1");
  expect_line("10 10 20 10 20 20 10 20 plane zero\n", "line 1");
  expect_line("5 5 5 5 5 5 5 5 plane 0\n", "line 1");  // degenerate box
  expect_line("# fine\n10 10 20 10 20 20 10 20 plane 0 extra\n", "line 2");
}

TEST(Dota, UnknownClassIsSkippedWithWarning) {
  const std::string text =
      "10 10 20 10 20 20 10 20 plane 0\n"
      "30 30 40 30 40 40 30 40 helipad 2\n";
  DotaParseResult r = dota_parse(text, {"plane"});
  ASSERT_EQ(r.records.size(), 1u);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("helipad"), std::string::npos);
  EXPECT_NE(r.warnings[0].find("line 2"), std::string::npos);
}

TEST(Dota, FormatOutputParsesBackExactly) {
  Rng rng(31);
  std::vector<DotaRecord> records;
  for (int i = 0; i < 20; ++i) {
    DotaRecord rec;
    rec.class_id = rng.uniform_int(0, 2);
    // quarter-pixel aligned boxes print exactly under %.6f
    rec.box = AABox{rng.uniform_int(32, 352) / 4.0, rng.uniform_int(32, 352) / 4.0,
                    static_cast<double>(rng.uniform_int(2, 30)),
                    static_cast<double>(rng.uniform_int(2, 30))};
    rec.difficulty = rng.uniform_int(0, 1);
    records.push_back(rec);
  }
  const std::string text = dota_format(records, synth_class_names());
  DotaParseResult r = dota_parse(text, synth_class_names());
  ASSERT_EQ(r.records.size(), records.size());
  EXPECT_TRUE(r.warnings.empty());
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(r.records[i].class_id, records[i].class_id);
    EXPECT_EQ(r.records[i].difficulty, records[i].difficulty);
    EXPECT_DOUBLE_EQ(r.records[i].box.cx, records[i].box.cx);
    EXPECT_DOUBLE_EQ(r.records[i].box.cy, records[i].box.cy);
    EXPECT_DOUBLE_EQ(r.records[i].box.w, records[i].box.w);
    EXPECT_DOUBLE_EQ(r.records[i].box.h, records[i].box.h);
  }
}

// ---------------------------------------------------------------------------
// dataset persistence
// ---------------------------------------------------------------------------

TEST(Dataset, SaveLoadRoundTripsImagesAndBoxes) {
  auto dir = temp_dir("dataset");
  auto images = synth_generate(5, 2024);
  save_dataset(dir, images, synth_class_names());

  std::vector<std::string> warnings;
  auto loaded = load_dataset(dir, synth_class_names(), &warnings);
  EXPECT_TRUE(warnings.empty());
  ASSERT_EQ(loaded.size(), images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    EXPECT_EQ(loaded[i].id, images[i].id);
    ASSERT_EQ(loaded[i].image.shape(), images[i].image.shape());
    for (std::size_t p = 0; p < images[i].image.data().size(); ++p)
      ASSERT_EQ(loaded[i].image.data()[p], images[i].image.data()[p]);
    ASSERT_EQ(loaded[i].gts.size(), images[i].gts.size());
    for (std::size_t g = 0; g < images[i].gts.size(); ++g) {
      EXPECT_EQ(loaded[i].gts[g].class_id, images[i].gts[g].class_id);
      // generated boxes sit on integer/half-integer grid, exact under %.6f
      EXPECT_DOUBLE_EQ(loaded[i].gts[g].box.cx, images[i].gts[g].box.cx);
      EXPECT_DOUBLE_EQ(loaded[i].gts[g].box.cy, images[i].gts[g].box.cy);
      EXPECT_DOUBLE_EQ(loaded[i].gts[g].box.w, images[i].gts[g].box.w);
      EXPECT_DOUBLE_EQ(loaded[i].gts[g].box.h, images[i].gts[g].box.h);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, MissingAnnotationFileIsAnError) {
  auto dir = temp_dir("noann");
  std::filesystem::create_directories(dir);
  save_tensor(dir / "orphan.img", Tensor::zeros({3, 96, 96}));
  EXPECT_THROW(load_dataset(dir, synth_class_names()), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, LoadRejectsMissingDirectory) {
  EXPECT_THROW(load_dataset("/nonexistent/rfw_nowhere", synth_class_names()),
               std::runtime_error);
}
