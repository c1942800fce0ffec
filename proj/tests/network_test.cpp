#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "test_util.hpp"
#include "tulip/checkpoint.hpp"
#include "tulip/error.hpp"
#include "tulip/grad_check.hpp"
#include "tulip/network.hpp"

namespace tulip {
namespace {

using testing::random_tensor;
using TapeD = Tape<double>;
using VarD = Var<double>;

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return Errc::kInvalidArgument;
}

Tensor<double> eye(std::int64_t rows, std::int64_t cols) {
  Tensor<double> t({rows, cols});
  for (std::int64_t i = 0; i < std::min(rows, cols); ++i) t[i * cols + i] = 1.0;
  return t;
}

// ---------------------------------------------------------------------------
// Configuration and geometry

TEST(NetworkConfigTest, TextRoundTrip) {
  auto cfg = NetworkConfig::tulip_large();
  cfg.dropout_p = 0.25;
  cfg.range_adaptations = false;
  EXPECT_EQ(NetworkConfig::from_text(cfg.to_text()), cfg);
  EXPECT_EQ(code_of([] { NetworkConfig::from_text("bogus=1\n"); }), Errc::kInvalidArgument);
}

TEST(NetworkConfigTest, ValidationRules) {
  auto cfg = NetworkConfig::tulip();
  cfg.window_w = 2;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), Errc::kInvalidArgument);
  cfg = NetworkConfig::tulip();
  cfg.heads_per_stage = {3, 4, 8};
  EXPECT_EQ(code_of([&] { cfg.validate(); }), Errc::kIndivisibleChannels);
  cfg = NetworkConfig::tulip();
  cfg.input_width = 250;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), Errc::kIndivisibleShape);
  cfg = NetworkConfig::tulip();
  cfg.input_width = 264;  // grid 66 wide: not divisible by the 8-wide window
  EXPECT_EQ(code_of([&] { cfg.validate(); }), Errc::kIndivisibleGrid);
}

TEST(StageGeometryTest, DefaultGrids) {
  const auto g = stage_geometry(NetworkConfig::tulip());
  ASSERT_EQ(g.size(), 4u);
  EXPECT_EQ(g[0].grid_h, 16);
  EXPECT_EQ(g[0].grid_w, 64);
  EXPECT_EQ(g[3].grid_h, 2);
  EXPECT_EQ(g[3].grid_w, 8);
  EXPECT_EQ(g[3].channels, 256);
  EXPECT_EQ(g[3].heads, 8);
}

TEST(StageGeometryTest, SingleRowGridsMergeHorizontally) {
  auto cfg = NetworkConfig::tulip_large();
  cfg.patch_h = 4;
  cfg.patch_w = 4;
  cfg.window_h = 4;
  cfg.window_w = 4;
  cfg.rectangular = false;
  const auto g = stage_geometry(cfg);
  EXPECT_EQ(g[0].grid_h, 4);
  EXPECT_EQ(g[2].grid_h, 1);
  EXPECT_EQ(g[2].merge_fh, 1);
  EXPECT_EQ(g[4].grid_w, 4);
  EXPECT_EQ(g[1].window_h, 2);  // clamped to the 2-row grid
}

TEST(ParameterCount, LargeExceedsDefaultAndIsDeterministic) {
  const TulipModel<float> a(NetworkConfig::tulip());
  const TulipModel<float> b(NetworkConfig::tulip());
  const TulipModel<float> large(NetworkConfig::tulip_large());
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
  EXPECT_GT(large.parameter_count(), a.parameter_count());
}

// ---------------------------------------------------------------------------
// Patch embedding

TEST(PatchEmbed, TableOneShapes) {
  Tape<float> t(false);
  auto out = patch_embed(t.constant(Tensor<float>({16, 1024})), 1, 4,
                         t.constant(Tensor<float>({4, 32})), t.constant(Tensor<float>({32})));
  EXPECT_EQ(out.shape(), (Shape{16 * 256, 32}));
}

TEST(PatchEmbed, UnitPatchLiftsPixels) {
  TapeD t(false);
  const auto img = random_tensor({4, 8}, 1);
  Tensor<double> w({1, 5});
  w[0] = 1.0;
  auto out = patch_embed(t.constant(img), 1, 1, t.constant(w), t.constant(Tensor<double>({5})));
  for (int n = 0; n < 32; ++n) {
    EXPECT_EQ(out.value()[n * 5], img[n]);
    EXPECT_EQ(out.value()[n * 5 + 1], 0.0);
  }
}

TEST(PatchEmbed, GroupingMatchesIndexOracle) {
  TapeD t(false);
  const auto img = random_tensor({16, 1024}, 2);
  for (auto [ph, pw] : {std::pair{2, 2}, std::pair{1, 4}}) {
    auto out = patch_embed(t.constant(img), ph, pw, t.constant(eye(4, 4)),
                           t.constant(Tensor<double>({4})));
    ASSERT_EQ(out.shape()[0], 16 * 256);
    const int wg = 1024 / pw;
    for (int n = 0; n < 16 * 256; n += 37) {
      for (int e = 0; e < 4; ++e) {
        const int row = (n / wg) * ph + e / pw;
        const int col = (n % wg) * pw + e % pw;
        EXPECT_EQ(out.value()[n * 4 + e], img[row * 1024 + col]);
      }
    }
  }
}

TEST(PatchEmbed, IndivisibleShape) {
  TapeD t(false);
  EXPECT_EQ(code_of([&] {
              patch_embed(t.constant(Tensor<double>({4, 10})), 1, 4,
                          t.constant(Tensor<double>({4, 2})), t.constant(Tensor<double>({2})));
            }),
            Errc::kIndivisibleShape);
}

// ---------------------------------------------------------------------------
// Window attention

struct AttnFixture {
  int c = 8, heads = 2, wh = 2, ww = 8;
  Tensor<double> qkv_w, qkv_b, proj_w, proj_b, bias;
  explicit AttnFixture(std::uint64_t seed, int c_ = 8, int heads_ = 2, int wh_ = 2, int ww_ = 8)
      : c(c_), heads(heads_), wh(wh_), ww(ww_) {
    qkv_w = random_tensor({c, 3 * c}, seed, -0.5, 0.5);
    qkv_b = random_tensor({3 * c}, seed + 1, -0.1, 0.1);
    proj_w = random_tensor({c, c}, seed + 2, -0.5, 0.5);
    proj_b = random_tensor({c}, seed + 3, -0.1, 0.1);
    bias = random_tensor({(2 * wh - 1) * (2 * ww - 1), heads}, seed + 4, -0.5, 0.5);
  }
  AttentionWeights<double> bind(TapeD& t) const {
    return {t.constant(qkv_w), t.constant(qkv_b), t.constant(proj_w), t.constant(proj_b),
            t.constant(bias)};
  }
};

// Dense multi-head attention over all tokens of one window, straight loops.
Tensor<double> dense_attention(const Tensor<double>& x, const AttnFixture& f) {
  const int n = static_cast<int>(x.shape()[0]);
  const int c = f.c, d = c / f.heads;
  std::vector<double> qkv(static_cast<std::size_t>(n) * 3 * c, 0.0);
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < 3 * c; ++o) {
      double s = f.qkv_b[o];
      for (int k = 0; k < c; ++k) s += x[i * c + k] * f.qkv_w[k * 3 * c + o];
      qkv[i * 3 * c + o] = s;
    }
  std::vector<double> mixed(static_cast<std::size_t>(n) * c, 0.0);
  for (int h = 0; h < f.heads; ++h) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> logits(n);
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int k = 0; k < d; ++k) s += qkv[i * 3 * c + h * d + k] * qkv[j * 3 * c + c + h * d + k];
        const int di = i / f.ww - j / f.ww + f.wh - 1;
        const int dj = i % f.ww - j % f.ww + f.ww - 1;
        logits[j] = s / std::sqrt(double(d)) + f.bias[(di * (2 * f.ww - 1) + dj) * f.heads + h];
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < d; ++k)
          mixed[i * c + h * d + k] += logits[j] / z * qkv[j * 3 * c + 2 * c + h * d + k];
    }
  }
  Tensor<double> out({n, c});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < c; ++o) {
      double s = f.proj_b[o];
      for (int k = 0; k < c; ++k) s += mixed[i * c + k] * f.proj_w[k * c + o];
      out[i * c + o] = s;
    }
  return out;
}

TEST(WindowAttention, SingleWindowEqualsDenseAttention) {
  const AttnFixture f(10);
  const auto x = random_tensor({16, 8}, 11);
  TapeD t(false);
  const auto plan = make_window_plan(2, 8, 2, 8, false, false);
  const auto got = window_attention(t.constant(x), plan, f.heads, f.bind(t), DropoutContext{}, "a");
  const auto want = dense_attention(x, f);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.value()[i], want[i], 1e-12);
}

TEST(WindowAttention, UniformLogitsAverageValues) {
  AttnFixture f(12);
  f.qkv_w = Tensor<double>({8, 24});
  f.qkv_b = Tensor<double>({24});
  for (int i = 0; i < 8; ++i) f.qkv_w[i * 24 + 16 + i] = 1.0;  // v = x, q = k = 0
  f.bias = Tensor<double>(f.bias.shape());
  f.proj_w = eye(8, 8);
  f.proj_b = Tensor<double>({8});
  const auto x = random_tensor({4 * 16, 8}, 13);
  TapeD t(false);
  const auto plan = make_window_plan(4, 16, 2, 8, false, false);
  const auto out = window_attention(t.constant(x), plan, 2, f.bind(t), DropoutContext{}, "a");
  for (int n = 0; n < 64; ++n) {
    const int wr = (n / 16) / 2, wc = (n % 16) / 8;
    for (int ch = 0; ch < 8; ++ch) {
      double mean = 0;
      for (int r = 0; r < 2; ++r)
        for (int cc = 0; cc < 8; ++cc) mean += x[((wr * 2 + r) * 16 + wc * 8 + cc) * 8 + ch];
      EXPECT_NEAR(out.value()[n * 8 + ch], mean / 16, 1e-12);
    }
  }
}

TEST(WindowPlanTest, ShiftedMembershipMatchesEnumeration) {
  const auto plan = make_window_plan(4, 16, 2, 8, true, false);
  EXPECT_EQ(plan.shift_h, 1);
  EXPECT_EQ(plan.shift_w, 4);
  auto cells = [](std::vector<int> rows, std::vector<int> cols) {
    std::set<int> s;
    for (int r : rows)
      for (int c : cols) s.insert(r * 16 + c);
    return s;
  };
  const std::vector<std::set<int>> expected = {
      cells({1, 2}, {4, 5, 6, 7, 8, 9, 10, 11}),
      cells({1, 2}, {12, 13, 14, 15, 0, 1, 2, 3}),
      cells({3, 0}, {4, 5, 6, 7, 8, 9, 10, 11}),
      cells({3, 0}, {12, 13, 14, 15, 0, 1, 2, 3}),
  };
  ASSERT_EQ(plan.windows(), 4);
  for (int w = 0; w < 4; ++w) {
    std::set<int> got;
    for (int t = 0; t < 16; ++t) got.insert(static_cast<int>((*plan.partition)[w * 16 + t]));
    EXPECT_EQ(got, expected[w]) << "window " << w;
  }
  for (int n = 0; n < 64; ++n) EXPECT_EQ((*plan.partition)[(*plan.restore)[n]], n);
}

TEST(WindowPlanTest, VerticalSeamMaskedHorizontalOpen) {
  const auto plan = make_window_plan(4, 16, 2, 8, true, false);
  ASSERT_TRUE(plan.masked);
  const int t = 16;
  for (int w = 0; w < 4; ++w) {
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < t; ++j) {
        const auto ri = (*plan.partition)[w * t + i] / 16;
        const auto rj = (*plan.partition)[w * t + j] / 16;
        const bool seam = (ri == 0) != (rj == 0) && w >= 2;
        EXPECT_EQ(plan.blocked[(w * t + i) * t + j] != 0, seam);
      }
    }
  }
}

TEST(WindowPlanTest, NoShiftWhenWindowSpansGrid) {
  const auto plan = make_window_plan(2, 8, 2, 8, true, false);
  EXPECT_EQ(plan.shift_h, 0);
  EXPECT_EQ(plan.shift_w, 0);
  EXPECT_FALSE(plan.masked);
}

TEST(WindowPlanTest, IndivisibleGrid) {
  EXPECT_EQ(code_of([] { make_window_plan(4, 12, 2, 8, false, false); }), Errc::kIndivisibleGrid);
}

Tensor<double> attention_out(const Tensor<double>& x, const WindowPlan& plan,
                             const AttnFixture& f) {
  TapeD t(false);
  return window_attention(t.constant(x), plan, f.heads, f.bind(t), DropoutContext{}, "a").value();
}

TEST(WindowAttention, SeamPairsGetExactlyZeroWeight) {
  const AttnFixture f(20);
  const auto x = random_tensor({64, 8}, 21);
  auto x2 = x;
  for (int c = 0; c < 8; ++c) x2[(0 * 16 + 5) * 8 + c] += 3.0;  // token at row 0, col 5
  // Row 3 tokens sharing the window (cols 4..11) must be bitwise unaffected.
  const auto plan = make_window_plan(4, 16, 2, 8, true, false);
  const auto a = attention_out(x, plan, f);
  const auto b = attention_out(x2, plan, f);
  for (int col = 4; col < 12; ++col)
    for (int c = 0; c < 8; ++c) EXPECT_EQ(a[(3 * 16 + col) * 8 + c], b[(3 * 16 + col) * 8 + c]);
  // Row 1/2 tokens are never in its window either; row 0 neighbours are.
  EXPECT_NE(a[(0 * 16 + 6) * 8], b[(0 * 16 + 6) * 8]);
}

TEST(WindowAttention, HorizontalWrapAttendsUnlessMasked) {
  const AttnFixture f(22);
  const auto x = random_tensor({64, 8}, 23);
  auto x2 = x;
  for (int c = 0; c < 8; ++c) x2[(1 * 16 + 0) * 8 + c] += 3.0;  // row 1, col 0
  const int probe = (1 * 16 + 15) * 8;                           // row 1, col 15
  const auto open = make_window_plan(4, 16, 2, 8, true, false);
  EXPECT_NE(attention_out(x, open, f)[probe], attention_out(x2, open, f)[probe]);
  const auto closed = make_window_plan(4, 16, 2, 8, true, true);
  EXPECT_EQ(attention_out(x, closed, f)[probe], attention_out(x2, closed, f)[probe]);
}

// ---------------------------------------------------------------------------
// Swin block

struct BlockFixture {
  int c = 8, hidden = 16;
  Tensor<double> n1g, n1b, n2g, n2b, fc1w, fc1b, fc2w, fc2b;
  AttnFixture attn;
  explicit BlockFixture(std::uint64_t seed) : attn(seed) {
    n1g = random_tensor({c}, seed + 10, 0.5, 1.5);
    n1b = random_tensor({c}, seed + 11, -0.2, 0.2);
    n2g = random_tensor({c}, seed + 12, 0.5, 1.5);
    n2b = random_tensor({c}, seed + 13, -0.2, 0.2);
    fc1w = random_tensor({c, hidden}, seed + 14, -0.5, 0.5);
    fc1b = random_tensor({hidden}, seed + 15, -0.1, 0.1);
    fc2w = random_tensor({hidden, c}, seed + 16, -0.5, 0.5);
    fc2b = random_tensor({c}, seed + 17, -0.1, 0.1);
  }
  BlockWeights<double> bind(TapeD& t) const {
    BlockWeights<double> w;
    w.norm1_g = t.constant(n1g);
    w.norm1_b = t.constant(n1b);
    w.attn = attn.bind(t);
    w.norm2_g = t.constant(n2g);
    w.norm2_b = t.constant(n2b);
    w.fc1_w = t.constant(fc1w);
    w.fc1_b = t.constant(fc1b);
    w.fc2_w = t.constant(fc2w);
    w.fc2_b = t.constant(fc2b);
    return w;
  }
};

TEST(SwinBlock, ZeroWeightsGiveIdentity) {
  BlockFixture f(30);
  f.attn.proj_w = Tensor<double>(f.attn.proj_w.shape());
  f.attn.proj_b = Tensor<double>(f.attn.proj_b.shape());
  f.fc2w = Tensor<double>(f.fc2w.shape());
  f.fc2b = Tensor<double>(f.fc2b.shape());
  const auto x = random_tensor({64, 8}, 31);
  TapeD t(false);
  const auto plan = make_window_plan(4, 16, 2, 8, true, false);
  EXPECT_EQ(swin_block(t.constant(x), plan, 2, f.bind(t), 1e-5, DropoutContext{}, "b").value(), x);
}

TEST(SwinBlock, FixedSeedIsBitReproducible) {
  const BlockFixture f(32);
  const auto x = random_tensor({64, 8}, 33);
  const auto plan = make_window_plan(4, 16, 2, 8, true, false);
  DropoutContext drop{0.2, true, 7, 3};
  auto run = [&] {
    TapeD t(false);
    return swin_block(t.constant(x), plan, 2, f.bind(t), 1e-5, drop, "b").value();
  };
  EXPECT_EQ(run(), run());
}

TEST(SwinBlock, GradientMatchesFiniteDifferences) {
  const BlockFixture f(34);
  const auto plan = make_window_plan(4, 16, 2, 8, true, false);
  const auto target = random_tensor({64, 8}, 35);
  const auto report = grad_check(
      [&](TapeD& t, VarD x) {
        auto y = swin_block(x, plan, 2, f.bind(t), 1e-5, DropoutContext{}, "b");
        return ops::mean(ops::mul(y, t.constant(target)));
      },
      random_tensor({64, 8}, 36), 1e-4, 1e-3);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

// ---------------------------------------------------------------------------
// Merge / unmerge / skip / head

TEST(PatchMerge, ShapeAndOddGrid) {
  TapeD t(false);
  const int c = 4;
  auto out = patch_merge(t.constant(random_tensor({16, c}, 1)), 4, 4,
                         t.constant(Tensor<double>({4 * c}, 1.0)),
                         t.constant(Tensor<double>({4 * c})),
                         t.constant(random_tensor({4 * c, 2 * c}, 2)), 1e-5);
  EXPECT_EQ(out.shape(), (Shape{4, 2 * c}));
  EXPECT_EQ(code_of([&] {
              patch_merge(t.constant(random_tensor({12, c}, 1)), 3, 4,
                          t.constant(Tensor<double>({4 * c}, 1.0)),
                          t.constant(Tensor<double>({4 * c})),
                          t.constant(random_tensor({4 * c, 2 * c}, 2)), 1e-5);
            }),
            Errc::kOddGrid);
}

TEST(PatchMerge, AveragingWeightsGiveNeighbourhoodMeans) {
  TapeD t(false);
  const int c = 3, h = 4, w = 6;
  const auto x = random_tensor({h * w, c}, 3);
  Tensor<double> avg({4 * c, 2 * c});
  for (int k = 0; k < 4; ++k)
    for (int ch = 0; ch < c; ++ch) avg[(k * c + ch) * 2 * c + ch] = 0.25;
  const auto out = patch_merge(t.constant(x), h, w, t.constant(Tensor<double>({4 * c}, 1.0)),
                               t.constant(Tensor<double>({4 * c})), t.constant(avg), 0.0)
                       .value();
  for (int a = 0; a < h / 2; ++a) {
    for (int b = 0; b < w / 2; ++b) {
      std::vector<double> cat;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int ch = 0; ch < c; ++ch) cat.push_back(x[((2 * a + dy) * w + 2 * b + dx) * c + ch]);
      double m = 0, v = 0;
      for (double e : cat) m += e;
      m /= cat.size();
      for (double e : cat) v += (e - m) * (e - m);
      const double sd = std::sqrt(v / cat.size());
      for (int ch = 0; ch < 2 * c; ++ch) {
        double want = 0;
        if (ch < c)
          for (int k = 0; k < 4; ++k) want += 0.25 * (cat[k * c + ch] - m) / sd;
        EXPECT_NEAR(out[(a * (w / 2) + b) * 2 * c + ch], want, 1e-12);
      }
    }
  }
}

TEST(PatchMerge, SingleRowMergesHorizontally) {
  TapeD t(false);
  auto out = patch_merge(t.constant(random_tensor({8, 4}, 1)), 1, 8,
                         t.constant(Tensor<double>({8}, 1.0)), t.constant(Tensor<double>({8})),
                         t.constant(random_tensor({8, 8}, 2)), 1e-5);
  EXPECT_EQ(out.shape(), (Shape{4, 8}));
}

TEST(PatchUnmerge, ShapeAndIdentityStack) {
  TapeD t(false);
  const int c = 8;
  const auto x = random_tensor({4, c}, 4);
  Tensor<double> stack({c, 2 * c});
  for (int i = 0; i < c; ++i) {
    stack[i * 2 * c + i] = 1.0;
    stack[i * 2 * c + c + i] = 1.0;
  }
  const auto out = patch_unmerge(t.constant(x), 2, 2, 2, t.constant(stack)).value();
  ASSERT_EQ(out.shape(), (Shape{16, c / 2}));
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const int src = a * 2 + b;
      for (int q = 0; q < 4; ++q) {
        const int row = 2 * a + q / 2, col = 2 * b + q % 2;
        const int quarter = q % 2;  // expanded = [x, x], quarters x[0:4], x[4:8], x[0:4], x[4:8]
        for (int ch = 0; ch < c / 2; ++ch)
          EXPECT_EQ(out[(row * 4 + col) * (c / 2) + ch], x[src * c + quarter * (c / 2) + ch]);
      }
    }
  }
  EXPECT_EQ(code_of([&] {
              patch_unmerge(t.constant(random_tensor({4, 3}, 1)), 2, 2, 2,
                            t.constant(random_tensor({3, 6}, 2)));
            }),
            Errc::kIndivisibleChannels);
}

TEST(PatchMerge, MergeThenUnmergeWithInverseWeightsIsIdentity) {
  // Tokens of the form (s, -s, u, -u) scaled so every 2x2 concatenation has
  // zero mean and unit variance; layer norm (eps 0) is then the identity and
  // the reduction keeps the independent coordinates.
  const int c = 4, h = 4, w = 4;
  auto x = random_tensor({h * w, c}, 5);
  for (int n = 0; n < h * w; ++n) {
    x[n * c + 1] = -x[n * c];
    x[n * c + 3] = -x[n * c + 2];
  }
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      double ss = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int ch = 0; ch < c; ++ch) ss += std::pow(x[((2 * a + dy) * w + 2 * b + dx) * c + ch], 2);
      const double k = std::sqrt(16.0 / ss);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int ch = 0; ch < c; ++ch) x[((2 * a + dy) * w + 2 * b + dx) * c + ch] *= k;
    }
  Tensor<double> reduce({4 * c, 2 * c});
  Tensor<double> expand({2 * c, 4 * c});
  for (int k = 0; k < 4; ++k) {
    reduce[(k * c + 0) * 2 * c + 2 * k] = 1.0;
    reduce[(k * c + 2) * 2 * c + 2 * k + 1] = 1.0;
    expand[(2 * k) * 4 * c + k * c + 0] = 1.0;
    expand[(2 * k) * 4 * c + k * c + 1] = -1.0;
    expand[(2 * k + 1) * 4 * c + k * c + 2] = 1.0;
    expand[(2 * k + 1) * 4 * c + k * c + 3] = -1.0;
  }
  TapeD t(false);
  auto merged = patch_merge(t.constant(x), h, w, t.constant(Tensor<double>({4 * c}, 1.0)),
                            t.constant(Tensor<double>({4 * c})), t.constant(reduce), 0.0);
  // Unmerge maps 2C -> 4C and places C channels per position.
  auto restored = patch_unmerge(merged, h / 2, w / 2, 2, t.constant(expand));
  ASSERT_EQ(restored.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(restored.value()[i], x[i], 1e-12);
}

TEST(SpaceChannels, AreMutualInverses) {
  TapeD t(false);
  const auto x = random_tensor({8 * 6, 3}, 6);
  auto y = channels_to_space(space_to_channels(t.constant(x), 8, 6, 2, 2), 4, 3, 2, 2);
  EXPECT_EQ(y.value(), x);
}

TEST(SkipFuse, SelectorsAndOracle) {
  TapeD t(false);
  const int c = 5;
  const auto dec = random_tensor({6, c}, 7);
  const auto enc = random_tensor({6, c}, 8);
  Tensor<double> top({2 * c, c}), bottom({2 * c, c});
  for (int i = 0; i < c; ++i) {
    top[i * c + i] = 1.0;
    bottom[(c + i) * c + i] = 1.0;
  }
  const Tensor<double> zero_b({c});
  EXPECT_EQ(skip_fuse(t.constant(dec), t.constant(Tensor<double>({6, c})), t.constant(top),
                      t.constant(zero_b))
                .value(),
            dec);
  EXPECT_EQ(skip_fuse(t.constant(dec), t.constant(enc), t.constant(bottom), t.constant(zero_b))
                .value(),
            enc);
  const auto w = random_tensor({2 * c, c}, 9);
  const auto b = random_tensor({c}, 10);
  const auto out = skip_fuse(t.constant(dec), t.constant(enc), t.constant(w), t.constant(b)).value();
  for (int n = 0; n < 6; ++n)
    for (int o = 0; o < c; ++o) {
      double s = b[o];
      for (int k = 0; k < c; ++k) s += dec[n * c + k] * w[k * c + o] + enc[n * c + k] * w[(c + k) * c + o];
      EXPECT_NEAR(out[n * c + o], s, 1e-12);
    }
  EXPECT_EQ(code_of([&] {
              skip_fuse(t.constant(dec), t.constant(random_tensor({3, c}, 1)), t.constant(w),
                        t.constant(b));
            }),
            Errc::kShapeMismatch);
}

TEST(ProjectionHead, DefaultShape) {
  Tape<float> t(false);
  auto out = projection_head(t.constant(Tensor<float>({16 * 256, 32})), 16, 256, 4, 4,
                             t.constant(Tensor<float>({32, 16})), t.constant(Tensor<float>({16})),
                             t.constant(Tensor<float>({1}, 1.0f)), t.constant(Tensor<float>({1})));
  EXPECT_EQ(out.shape(), (Shape{64, 1024}));
}

TEST(ProjectionHead, PixelShuffleLayout) {
  TapeD t(false);
  Tensor<double> bias({16});
  for (int k = 0; k < 16; ++k) bias[k] = k;
  const auto out = projection_head(t.constant(random_tensor({2 * 3, 4}, 1)), 2, 3, 4, 4,
                                   t.constant(Tensor<double>({4, 16})), t.constant(bias),
                                   t.constant(Tensor<double>({1}, 1.0)),
                                   t.constant(Tensor<double>({1})))
                       .value();
  ASSERT_EQ(out.shape(), (Shape{8, 12}));
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 12; ++c) EXPECT_EQ(out[r * 12 + c], (r % 4) * 4 + c % 4);
}

TEST(ProjectionHead, UnitFactorsAreIdentity) {
  TapeD t(false);
  const auto x = random_tensor({3 * 5, 1}, 2, 0.0, 1.0);
  const auto out = projection_head(t.constant(x), 3, 5, 1, 1, t.constant(Tensor<double>({1, 1}, 1.0)),
                                   t.constant(Tensor<double>({1})),
                                   t.constant(Tensor<double>({1}, 1.0)),
                                   t.constant(Tensor<double>({1})))
                       .value();
  EXPECT_EQ(out.storage(), x.storage());
}

// ---------------------------------------------------------------------------
// Full model

NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.input_height = 8;
  cfg.input_width = 128;
  cfg.embed_dim = 8;
  cfg.num_stages = 2;
  cfg.heads_per_stage = {2, 4};
  cfg.mlp_ratio = 2;
  return cfg;
}

TEST(Model, TableOneResolution) {
  auto cfg = NetworkConfig::tulip();
  cfg.input_width = 1024;
  const TulipModel<float> model(cfg, 1);
  const auto out = model.predict(Tensor<float>({16, 1024}, 0.2f));
  EXPECT_EQ(out.shape(), (Shape{64, 1024}));
}

TEST(Model, DeskResolutionAndClamp) {
  const TulipModel<float> model(NetworkConfig::tulip(), 1);
  const auto out = model.predict(random_tensor({16, 256}, 3, 0, 1).cast<float>());
  EXPECT_EQ(out.shape(), (Shape{64, 256}));
  for (float v : out.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Model, WidthMayGrowAtInference) {
  const TulipModel<double> model(tiny_config(), 2);
  EXPECT_EQ(model.predict(random_tensor({8, 256}, 4, 0, 1)).shape(), (Shape{32, 256}));
  EXPECT_EQ(code_of([&] { model.predict(random_tensor({4, 128}, 4, 0, 1)); }),
            Errc::kShapeMismatch);
}

Tensor<double> rotate_columns(const Tensor<double>& x, std::int64_t k) {
  const auto h = x.shape()[0], w = x.shape()[1];
  Tensor<double> out(x.shape());
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) out[r * w + (c + k) % w] = x[r * w + c];
  return out;
}

TEST(Model, HorizontalRotationEquivariance) {
  auto cfg = tiny_config();
  const TulipModel<double> model(cfg, 3);
  const std::int64_t k = cfg.width_multiple();  // 4 * 8 * 4 = 128
  const auto x = random_tensor({8, 384}, 5, 0, 1);
  const auto y = model.predict(x);
  EXPECT_EQ(model.predict(rotate_columns(x, k)), rotate_columns(y, k));
}

TEST(Model, EndToEndGradientCheck) {
  const TulipModel<double> model(tiny_config(), 4);
  const auto target = random_tensor({32, 128}, 6, 0, 1);
  auto loss = [&](TapeD& t, VarD x) {
    auto y = model.forward(t, x, DropoutContext{});
    return ops::mean(ops::abs(ops::sub(y, t.constant(target))));
  };
  const auto report = grad_check(loss, random_tensor({8, 128}, 7, 0, 1), 1e-4, 1e-3);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  TulipModel<double> model(tiny_config(), 5);
  const auto x = random_tensor({8, 128}, 8, 0, 1);
  const auto target = random_tensor({32, 128}, 9, 0, 1);
  auto eval = [&] {
    TapeD t(false);
    auto d = ops::sub(model.forward(t, t.constant(x), DropoutContext{}), t.constant(target));
    return ops::mean(ops::mul(d, d)).value().item();
  };
  // Squared error keeps the loss smooth; leaky ReLU kinks are rarely crossed
  // at this step size.
  auto sinks = model.params().make_gradient_buffer();
  {
    TapeD t;
    auto d = ops::sub(model.forward(t, t.constant(x), DropoutContext{}, &sinks), t.constant(target));
    t.backward(ops::mean(ops::mul(d, d)));
  }
  CounterRng pick(10, rng_purpose::kTest);
  double worst = 0;
  for (std::size_t pi = 0; pi < model.params().size(); ++pi) {
    auto& p = model.params().at(pi);
    for (int trial = 0; trial < 2; ++trial) {
      const auto i = static_cast<std::size_t>(pick.uniform_int(0, p.value.size() - 1));
      const double orig = p.value[i];
      p.value[i] = orig + 1e-6;
      const double up = eval();
      p.value[i] = orig - 1e-6;
      const double down = eval();
      p.value[i] = orig;
      const double num = (up - down) / 2e-6;
      const double ana = sinks[pi][i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
      worst = std::max(worst, rel);
      EXPECT_LT(rel, 1e-3) << p.name << "[" << i << "] analytic " << ana << " numeric " << num;
    }
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(Model, AblationVariantsRun) {
  auto cfg = tiny_config();
  cfg.range_adaptations = false;
  const TulipModel<double> model(cfg, 6);
  EXPECT_TRUE(model.params().contains("dec.stage0.upsample.project.weight"));
  EXPECT_TRUE(model.params().contains("head.norm.weight"));
  EXPECT_EQ(model.predict(random_tensor({8, 128}, 11, 0, 1)).shape(), (Shape{32, 128}));
}

TEST(Model, CheckpointRoundTripAndShapeValidation) {
  const TulipModel<float> model(tiny_config(), 7);
  std::stringstream buf;
  write_checkpoint(buf, model.params(), model.config().to_text());
  const auto data = read_checkpoint(buf);
  TulipModel<float> copy(NetworkConfig::from_text(data.config_text), 99);
  load_parameters(data, copy.params());
  const auto x = random_tensor({8, 128}, 12, 0, 1).cast<float>();
  EXPECT_EQ(copy.predict(x), model.predict(x));

  auto other = tiny_config();
  other.embed_dim = 16;
  TulipModel<float> wrong(other, 0);
  EXPECT_EQ(code_of([&] { load_parameters(data, wrong.params()); }), Errc::kShapeMismatch);
}

// ---------------------------------------------------------------------------
// MC dropout

RangeImage low_frame(std::uint64_t seed) {
  auto intr = SensorIntrinsics::symmetric(8, 128, 30, 80);
  return testing::random_image(intr, seed, 0.05);
}

TEST(McDropout, ZeroDropoutHasZeroSpread) {
  auto cfg = tiny_config();
  cfg.dropout_p = 0.0;
  const TulipModel<double> model(cfg, 8);
  const auto low = low_frame(1);
  InferenceConfig icfg;
  const auto res = mc_dropout_infer(model, low, icfg);
  const auto det = model.predict(image_to_tensor<double>(low));
  EXPECT_EQ(res.valid_count(), res.valid.size());
  for (std::size_t i = 0; i < res.stddev.size(); ++i) {
    EXPECT_EQ(res.stddev[i], 0.0);
    EXPECT_EQ(res.mean[i], det[i] * 80.0);
  }
}

TEST(McDropout, ReproducibleAndMatchesTwoPassOracle) {
  const TulipModel<double> model(tiny_config(), 9);
  const auto low = low_frame(2);
  InferenceConfig icfg;
  icfg.seed = 42;
  const auto a = mc_dropout_infer(model, low, icfg, true);
  const auto b = mc_dropout_infer(model, low, icfg, true);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.stddev, b.stddev);
  ASSERT_EQ(a.passes.size(), 8u);
  double spread = 0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    double m = 0;
    for (const auto& p : a.passes) m += p[i];
    m /= 8;
    double v = 0;
    for (const auto& p : a.passes) v += (p[i] - m) * (p[i] - m);
    EXPECT_NEAR(a.mean[i], m, 1e-9);
    EXPECT_NEAR(a.stddev[i], std::sqrt(v / 8), 1e-9);
    spread = std::max(spread, a.stddev[i]);
  }
  EXPECT_GT(spread, 0.0);
}

TEST(McDropout, ThresholdMonotoneAndInfinityKeepsAll) {
  const TulipModel<double> model(tiny_config(), 10);
  const auto low = low_frame(3);
  InferenceConfig icfg;
  std::size_t prev = 0;
  for (double tau : {0.0, 0.01, 0.05, 0.1, 0.5, 2.0}) {
    icfg.mc_threshold = tau;
    const auto n = mc_dropout_infer(model, low, icfg).valid_count();
    EXPECT_GE(n, prev);
    prev = n;
  }
  icfg.mc_threshold = std::numeric_limits<double>::infinity();
  const auto res = mc_dropout_infer(model, low, icfg);
  EXPECT_EQ(res.valid_count(), res.valid.size());
  const auto filtered = res.filtered_image();
  EXPECT_EQ(filtered, res.mean_image());
}

TEST(McDropout, SinglePassRejected) {
  InferenceConfig icfg;
  icfg.mc_passes = 1;
  EXPECT_EQ(code_of([&] { icfg.validate(); }), Errc::kInvalidArgument);
  icfg.mc_enabled = false;
  EXPECT_NO_THROW(icfg.validate());
}

}  // namespace
}  // namespace tulip
