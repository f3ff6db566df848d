#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rfw/fbsm.hpp"
#include "rfw/gradcheck.hpp"

using namespace rfw;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi, bool rg = false) {
  std::vector<double> d(static_cast<std::size_t>(numel_of(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(d), rg);
}

void zero_layer(Conv2dLayer& c) {
  std::fill(c.weight().data().begin(), c.weight().data().end(), 0.0);
  if (c.bias().defined()) std::fill(c.bias().data().begin(), c.bias().data().end(), 0.0);
}

// Dense global attention over every token, one head slice at a time; the
// routing-free reference for the k == s*s degeneracy.
Tensor dense_attention_reference(const Tensor& x, FBSMParams& p, int heads) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int dh = C / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = p.q_proj().forward(x);
  Tensor k = p.k_proj().forward(x);
  Tensor v = p.v_proj().forward(x);
  Tensor out = Tensor::zeros({N, C, H, W});
  const int T = H * W;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * dh;
      for (int ti = 0; ti < T; ++ti) {
        std::vector<double> scores(static_cast<std::size_t>(T));
        double mx = -1e300;
        for (int tj = 0; tj < T; ++tj) {
          double s = 0.0;
          for (int c = 0; c < dh; ++c)
            s += q.at({n, c0 + c, ti / W, ti % W}) * k.at({n, c0 + c, tj / W, tj % W});
          scores[static_cast<std::size_t>(tj)] = s * scale;
          mx = std::max(mx, s * scale);
        }
        double denom = 0.0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          denom += s;
        }
        for (int c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (int tj = 0; tj < T; ++tj)
            acc += scores[static_cast<std::size_t>(tj)] / denom *
                   v.at({n, c0 + c, tj / W, tj % W});
          out.data()[static_cast<std::size_t>(
              ((n * C + c0 + c) * H + ti / W) * W + ti % W)] =
              x.at({n, c0 + c, ti / W, ti % W}) + acc;
        }
      }
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

TEST(Partition, EightByEightSplitsIntoFourSixteenTokenRegions) {
  Rng rng(1);
  Tensor x = random_tensor(rng, {1, 3, 8, 8}, -1.0, 1.0);
  Tensor r = partition_regions(x, 2);
  ASSERT_EQ(r.shape(), (Shape{1, 4, 16, 3}));
  // region 0 is the top-left tile, tokens row-major inside the tile
  for (int t = 0; t < 16; ++t)
    for (int c = 0; c < 3; ++c)
      EXPECT_DOUBLE_EQ(r.at({0, 0, t, c}), x.at({0, c, t / 4, t % 4}));
  // region 3 is the bottom-right tile
  for (int t = 0; t < 16; ++t)
    for (int c = 0; c < 3; ++c)
      EXPECT_DOUBLE_EQ(r.at({0, 3, t, c}), x.at({0, c, 4 + t / 4, 4 + t % 4}));
}

TEST(Partition, SOneIsRowMajorTokenList) {
  Rng rng(2);
  Tensor x = random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0);
  Tensor r = partition_regions(x, 1);
  ASSERT_EQ(r.shape(), (Shape{1, 1, 16, 2}));
  for (int t = 0; t < 16; ++t)
    for (int c = 0; c < 2; ++c)
      EXPECT_DOUBLE_EQ(r.at({0, 0, t, c}), x.at({0, c, t / 4, t % 4}));
}

TEST(Partition, RoundTripIsBitExact) {
  Rng rng(3);
  for (int s : {1, 2, 4, 8}) {
    Tensor x = random_tensor(rng, {2, 5, 8, 8}, -10.0, 10.0);
    Tensor back = merge_regions(partition_regions(x, s), s, 8, 8);
    ASSERT_EQ(back.shape(), x.shape());
    EXPECT_EQ(back.data(), x.data()) << "s=" << s;
  }
}

TEST(Partition, RejectsIndivisibleSizesNamingBoth) {
  Tensor x = Tensor::zeros({1, 2, 8, 8});
  try {
    partition_regions(x, 3);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("s=3"), std::string::npos);
    EXPECT_NE(msg.find("8x8"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// routing
// ---------------------------------------------------------------------------

TEST(Routing, FrozenAffinityRowPicksDescendingTopTwo) {
  // with unit queries every affinity row equals the key vector
  Tensor qm = Tensor::from({3, 1}, {1.0, 1.0, 1.0});
  Tensor km = Tensor::from({3, 1}, {0.1, 0.7, 0.3});
  RoutingResult r = topk_routing(qm, km, 2);
  ASSERT_EQ(r.r_w.shape(), (Shape{3, 2}));
  for (int row = 0; row < 3; ++row) {
    EXPECT_DOUBLE_EQ(r.r_w.at({row, 0}), 0.7);
    EXPECT_DOUBLE_EQ(r.r_w.at({row, 1}), 0.3);
    EXPECT_EQ(r.r_l[static_cast<std::size_t>(row * 2 + 0)], 1);
    EXPECT_EQ(r.r_l[static_cast<std::size_t>(row * 2 + 1)], 2);
  }
}

TEST(Routing, RejectsOutOfRangeK) {
  Tensor qm = Tensor::zeros({4, 2});
  Tensor km = Tensor::zeros({4, 2});
  EXPECT_THROW(topk_routing(qm, km, 0), std::invalid_argument);
  EXPECT_THROW(topk_routing(qm, km, 5), std::invalid_argument);
}

TEST(Routing, MatchesExhaustiveSortOverTwoHundredTrials) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int s = 1 + trial % 4;  // region counts 1, 4, 9, 16
    const int R = s * s;
    const int C = 3;
    const int k = 1 + static_cast<int>(rng.uniform_int(0, R - 1));
    Tensor qm = random_tensor(rng, {R, C}, -2.0, 2.0);
    Tensor km = random_tensor(rng, {R, C}, -2.0, 2.0);
    RoutingResult routed = topk_routing(qm, km, k);

    for (int i = 0; i < R; ++i) {
      std::vector<double> row(static_cast<std::size_t>(R));
      for (int j = 0; j < R; ++j) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += qm.at({i, c}) * km.at({j, c});
        row[static_cast<std::size_t>(j)] = dot;
      }
      std::vector<int> order(static_cast<std::size_t>(R));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return row[static_cast<std::size_t>(a)] > row[static_cast<std::size_t>(b)];
      });
      for (int j = 0; j < k; ++j) {
        EXPECT_EQ(routed.r_l[static_cast<std::size_t>(i * k + j)],
                  order[static_cast<std::size_t>(j)])
            << "trial " << trial << " row " << i;
        EXPECT_NEAR(routed.r_w.at({i, j}), row[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])],
                    1e-12);
      }
      // distinct indices within the row
      std::set<std::int64_t> seen(routed.r_l.begin() + i * k, routed.r_l.begin() + (i + 1) * k);
      EXPECT_EQ(seen.size(), static_cast<std::size_t>(k));
    }
  }
}

// ---------------------------------------------------------------------------
// brifm
// ---------------------------------------------------------------------------

TEST(Brifm, FullRoutingEqualsDenseAttention) {
  Rng rng(5);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 4;  // k == s*s
  cfg.heads = 1;
  FBSMParams p(4, cfg, rng);
  Tensor x = random_tensor(rng, {1, 4, 8, 8}, -1.0, 1.0);
  Tensor got = brifm(x, p);
  Tensor want = dense_attention_reference(x, p, 1);
  double max_diff = 0.0;
  for (std::int64_t i = 0; i < got.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(got.data()[static_cast<std::size_t>(i)] -
                                           want.data()[static_cast<std::size_t>(i)]));
  EXPECT_LT(max_diff, 1e-10);
}

TEST(Brifm, FullRoutingEqualsDenseAttentionMultiHead) {
  Rng rng(6);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 4;
  cfg.heads = 2;
  FBSMParams p(4, cfg, rng);
  Tensor x = random_tensor(rng, {1, 4, 4, 4}, -1.0, 1.0);
  Tensor got = brifm(x, p);
  Tensor want = dense_attention_reference(x, p, 2);
  double max_diff = 0.0;
  for (std::int64_t i = 0; i < got.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(got.data()[static_cast<std::size_t>(i)] -
                                           want.data()[static_cast<std::size_t>(i)]));
  EXPECT_LT(max_diff, 1e-10);
}

TEST(Brifm, ZeroValueProjectionPassesInputThrough) {
  Rng rng(7);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 2;
  FBSMParams p(4, cfg, rng);
  zero_layer(p.v_proj());
  Tensor x = random_tensor(rng, {2, 4, 8, 8}, -1.0, 1.0);
  Tensor y = brifm(x, p);
  EXPECT_EQ(y.data(), x.data());
}

TEST(Brifm, AttentionRowsSumToOne) {
  Rng rng(8);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 3;
  FBSMParams p(2, cfg, rng);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor(rng, {1, 2, 8, 8}, -2.0, 2.0);
    Tensor attn;
    brifm(x, p, &attn);
    ASSERT_EQ(attn.ndim(), 3);
    const int rows = attn.dim(0) * attn.dim(1);
    const int cols = attn.dim(2);
    for (int r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < cols; ++c) s += attn.data()[static_cast<std::size_t>(r * cols + c)];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Brifm, ValidatesShapesAndConfig) {
  Rng rng(9);
  FBSMConfig cfg;
  cfg.s = 3;
  cfg.k = 2;
  FBSMParams p(4, cfg, rng);
  EXPECT_THROW(brifm(Tensor::zeros({1, 4, 8, 8}), p), std::invalid_argument);  // 8 % 3
  EXPECT_THROW(brifm(Tensor::zeros({1, 3, 9, 9}), p), std::invalid_argument);  // channels

  FBSMConfig bad;
  bad.s = 2;
  bad.k = 5;
  EXPECT_THROW(FBSMParams(4, bad, rng), std::invalid_argument);
  FBSMConfig odd;
  odd.heads = 3;
  EXPECT_THROW(FBSMParams(4, odd, rng), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// fiem
// ---------------------------------------------------------------------------

TEST(Fiem, ZeroConvHalvesTheInput) {
  Rng rng(10);
  FBSMParams p(3, FBSMConfig{}, rng);
  zero_layer(p.fiem_conv());
  Tensor f = random_tensor(rng, {1, 3, 8, 8}, -2.0, 2.0);
  Tensor y = fiem(f, p);
  for (std::int64_t i = 0; i < f.numel(); ++i)
    EXPECT_DOUBLE_EQ(y.data()[static_cast<std::size_t>(i)],
                     0.5 * f.data()[static_cast<std::size_t>(i)]);
}

TEST(Fiem, ConstantInputGetsSpatiallyConstantInteriorGate) {
  Rng rng(11);
  FBSMParams p(2, FBSMConfig{}, rng);
  Tensor f = Tensor::full({1, 2, 16, 16}, 2.0);
  Tensor y = fiem(f, p);
  // away from the zero-padding border every 7x7 window is identical
  const double ratio = y.at({0, 0, 8, 8}) / 2.0;
  for (int r = 3; r < 13; ++r)
    for (int c = 3; c < 13; ++c)
      for (int ch = 0; ch < 2; ++ch)
        EXPECT_NEAR(y.at({0, ch, r, c}), ratio * 2.0, 1e-12);
}

TEST(Fiem, GateStrictlyInsideUnitInterval) {
  Rng rng(12);
  FBSMParams p(3, FBSMConfig{}, rng);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor f = random_tensor(rng, {1, 3, 8, 8}, -3.0, 3.0);
    Tensor resp = fiem_response(f, p);
    Tensor gate = sigmoid(resp);
    for (double v : gate.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

// ---------------------------------------------------------------------------
// fbsm composition
// ---------------------------------------------------------------------------

TEST(Fbsm, IdentityDegenerateParametersHalveTheInput) {
  Rng rng(13);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 2;
  FBSMParams p(4, cfg, rng);
  zero_layer(p.v_proj());
  zero_layer(p.fiem_conv());
  Tensor x = random_tensor(rng, {1, 4, 8, 8}, -1.0, 1.0);
  Tensor y = fbsm_forward(x, p);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    EXPECT_DOUBLE_EQ(y.data()[static_cast<std::size_t>(i)],
                     0.5 * x.data()[static_cast<std::size_t>(i)]);
}

TEST(Fbsm, ShapePreservedAcrossValidConfigs) {
  Rng rng(14);
  struct Case {
    int s, k, heads;
  };
  for (Case c : {Case{1, 1, 1}, Case{2, 1, 2}, Case{2, 4, 1}, Case{4, 3, 1}, Case{8, 5, 4}}) {
    FBSMConfig cfg;
    cfg.s = c.s;
    cfg.k = c.k;
    cfg.heads = c.heads;
    FBSMParams p(4, cfg, rng);
    Tensor x = random_tensor(rng, {2, 4, 8, 8}, -1.0, 1.0);
    Tensor y = fbsm_forward(x, p);
    EXPECT_EQ(y.shape(), x.shape()) << "s=" << c.s << " k=" << c.k;
  }
}

TEST(Fbsm, FullModuleGradCheck) {
  Rng rng(15);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 2;
  FBSMParams p(4, cfg, rng);
  Tensor x = random_tensor(rng, {1, 4, 8, 8}, -1.0, 1.0, true);
  std::vector<Tensor> leaves{x};
  NamedTensors params;
  p.collect("fbsm", &params, nullptr);
  for (auto& [n, t] : params) leaves.push_back(t);
  Tensor wfix = random_tensor(rng, {1, 4, 8, 8}, -1.0, 1.0);
  GradCheckResult r =
      gradcheck([&] { return sum_all(mul(fbsm_forward(x, p), wfix)); }, leaves, 1e-5, 1e-4);
  EXPECT_TRUE(r.pass) << "max rel err " << r.max_rel_err << " at leaf " << r.worst_leaf;
}

TEST(Fbsm, RoutingWeightFlagGradCheckAndDifference) {
  Rng rng(16);
  FBSMConfig cfg;
  cfg.s = 2;
  cfg.k = 2;
  cfg.use_routing_weights = true;
  FBSMParams p(2, cfg, rng);
  Tensor x = random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0, true);

  FBSMConfig plain = cfg;
  plain.use_routing_weights = false;
  Rng rng2(16);
  FBSMParams q(2, plain, rng2);  // identical weights, different flag
  Tensor yw = brifm(x, p);
  Tensor yp = brifm(x, q);
  double diff = 0.0;
  for (std::int64_t i = 0; i < yw.numel(); ++i)
    diff = std::max(diff, std::abs(yw.data()[static_cast<std::size_t>(i)] -
                                   yp.data()[static_cast<std::size_t>(i)]));
  EXPECT_GT(diff, 1e-8);  // the flag genuinely changes the output

  std::vector<Tensor> leaves{x};
  NamedTensors params;
  p.collect("fbsm", &params, nullptr);
  for (auto& [n, t] : params) leaves.push_back(t);
  Tensor wfix = random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0);
  GradCheckResult r =
      gradcheck([&] { return sum_all(mul(fbsm_forward(x, p), wfix)); }, leaves, 1e-5, 1e-4);
  EXPECT_TRUE(r.pass) << "max rel err " << r.max_rel_err;
}
