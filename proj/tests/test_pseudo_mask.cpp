#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "boxseg/metrics.hpp"
#include "boxseg/phantom.hpp"
#include "boxseg/preprocess.hpp"
#include "boxseg/pseudo_mask.hpp"
#include "oracles.hpp"

using namespace boxseg;

namespace {

Slice2D random_slice(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Slice2D s(rows, cols, 0.0f);
  for (auto& v : s.data) v = u(rng);
  return s;
}

KMeansResult fixed_result(const std::vector<int>& assignment, const std::vector<double>& centroids) {
  KMeansResult r;
  r.k = static_cast<int>(centroids.size());
  r.assignments = Image2D<int>(1, assignment.size(), assignment);
  r.centroids = centroids;
  return r;
}

}  // namespace

TEST(KMeans, SixPixelExample) {
  Slice2D s(1, 6, std::vector<float>{0, 0, 0, 0.5f, 0.5f, 1.0f});
  const auto r = kmeans_slice(s, 2, 5, 100, 1);
  EXPECT_NEAR(r.wcss, 1.0 / 6.0, 1e-6);
  const auto& a = r.assignments.data;
  EXPECT_EQ(a[0], a[1]);
  EXPECT_EQ(a[1], a[2]);
  EXPECT_EQ(a[3], a[4]);
  EXPECT_EQ(a[4], a[5]);
  EXPECT_NE(a[0], a[3]);
  std::vector<double> vals(s.data.begin(), s.data.end());
  EXPECT_NEAR(r.wcss, oracle::exhaustive_wcss(vals, 2), 1e-9);
}

TEST(KMeans, ConstantSliceErrors) {
  Slice2D s(3, 3, 0.4f);
  try {
    kmeans_slice(s, 2, 1, 10, 0);
    FAIL();
  } catch (const VolumeError& e) {
    EXPECT_NE(std::string(e.what()).find("fewer distinct values than k"), std::string::npos);
  }
}

TEST(KMeans, ResultInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_slice(rng, 8, 8);
    const int k = 2 + trial % 3;
    const auto r = kmeans_slice(s, k, 3, 100, trial);
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0), cnt(static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) {
      const int a = r.assignments.data[i];
      ASSERT_GE(a, 0);
      ASSERT_LT(a, k);
      sum[static_cast<std::size_t>(a)] += s.data[i];
      cnt[static_cast<std::size_t>(a)] += 1;
    }
    for (int c = 0; c < k; ++c)
      if (cnt[static_cast<std::size_t>(c)] > 0)
        EXPECT_NEAR(r.centroids[static_cast<std::size_t>(c)], sum[static_cast<std::size_t>(c)] / cnt[static_cast<std::size_t>(c)], 1e-12);
    EXPECT_NEAR(r.wcss, wcss(s, r.assignments, r.centroids), 1e-12);
  }
}

TEST(KMeans, DeterministicPerSeed) {
  std::mt19937_64 rng(6);
  const auto s = random_slice(rng, 16, 16);
  const auto a = kmeans_slice(s, 3, 4, 100, 77), b = kmeans_slice(s, 3, 4, 100, 77);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_EQ(a.centroids, b.centroids);
}

TEST(MaskOutsideBoxes, MatchesMembership) {
  std::mt19937_64 rng(7);
  const auto s = random_slice(rng, 12, 10);
  for (auto v : mask_outside_boxes(s, {}).data) EXPECT_EQ(v, 0.0f);
  const SliceBox whole{0, 0, 0, 11, 9};
  EXPECT_EQ(mask_outside_boxes(s, std::span<const SliceBox>(&whole, 1)), s);
  const std::vector<SliceBox> two{{0, 1, 1, 4, 3}, {0, 6, 5, 10, 8}};
  const auto m = mask_outside_boxes(s, two);
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 10; ++c) {
      const bool in = two[0].contains(r, c) || two[1].contains(r, c);
      EXPECT_EQ(m.at(r, c), in ? s.at(r, c) : 0.0f);
    }
}

TEST(SelectForeground, SecondLargestCluster) {
  std::vector<int> a;
  a.insert(a.end(), 200, 0);
  a.insert(a.end(), 50, 1);
  a.insert(a.end(), 6, 2);
  const SliceBox box{0, 0, 0, 0, a.size() - 1};
  const auto m = select_foreground(fixed_result(a, {0.0, 0.5, 0.9}), std::span<const SliceBox>(&box, 1));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m.data[i], a[i] == 1 ? 1 : 0);
}

TEST(SelectForeground, TieGoesToHigherCentroid) {
  std::vector<int> a;
  a.insert(a.end(), 100, 0);
  a.insert(a.end(), 50, 1);
  a.insert(a.end(), 50, 2);
  const SliceBox box{0, 0, 0, 0, a.size() - 1};
  const auto m = select_foreground(fixed_result(a, {0.0, 0.8, 0.3}), std::span<const SliceBox>(&box, 1));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m.data[i], a[i] == 1 ? 1 : 0);
}

TEST(SelectForeground, MatchesCountingOracleAndStaysInBox) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> a(64);
    for (auto& x : a) x = static_cast<int>(rng() % 3);
    const std::vector<double> cent{0.1, 0.5, 0.9};
    const SliceBox box{0, 0, 10, 0, 50};
    const auto m = select_foreground(fixed_result(a, cent), std::span<const SliceBox>(&box, 1));
    std::size_t cnt[3] = {0, 0, 0};
    for (int x : a) ++cnt[x];
    std::vector<int> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int p, int q) { return cnt[p] != cnt[q] ? cnt[p] > cnt[q] : cent[p] > cent[q]; });
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m.data[i], (a[i] == order[1] && i >= 10 && i <= 50) ? 1 : 0);
  }
}

TEST(Closing, RadiusZeroIsIdentity) {
  std::mt19937_64 rng(9);
  const auto m = oracle::random_mask(rng, 10, 10, 0.4);
  EXPECT_EQ(morphological_closing(m, 0), m);
}

TEST(Closing, BridgesTwoPixelGap) {
  Mask2D m(5, 7, 0);
  m.at(2, 2) = 1;
  m.at(2, 4) = 1;
  const auto c = morphological_closing(m, 1);
  EXPECT_EQ(c.at(2, 3), 1);
  EXPECT_EQ(connected_components(c, 4).count(), 1u);
  EXPECT_EQ(c, oracle::closing(m, 1));
}

TEST(Morphology, MatchesMinkowskiOracle) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = oracle::random_mask(rng, 32, 32, 0.3 + 0.02 * trial);
    for (int r : {1, 2}) {
      EXPECT_EQ(dilate(m, r), oracle::bounded_dilate(m, r));
      EXPECT_EQ(erode(m, r), oracle::bounded_erode(m, r));
      const auto c = morphological_closing(m, r);
      EXPECT_EQ(c, oracle::closing(m, r));
      EXPECT_EQ(morphological_closing(c, r), c);  // idempotent
      for (std::size_t i = 0; i < m.size(); ++i) EXPECT_GE(c.data[i], m.data[i]);  // extensive
    }
  }
}

TEST(FillHoles, SmallHoleFilledLargeKept) {
  // 6-pixel hole (2x3) inside a ring.
  Mask2D m(6, 7, 1);
  for (std::size_t r = 2; r < 4; ++r)
    for (std::size_t c = 2; c < 5; ++c) m.at(r, c) = 0;
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(fill_holes(m, 10).data[i], 1);

  Mask2D big(7, 8, 1);
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 2; c < 6; ++c) big.at(r, c) = 0;  // 12 pixels
  EXPECT_EQ(fill_holes(big, 10), big);
}

TEST(FillHoles, MatchesBfsOracleAndIsMonotone) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = oracle::random_mask(rng, 32, 32, 0.5 + 0.008 * trial);
    const auto a = fill_holes(m, 10);
    EXPECT_EQ(a, oracle::fill_holes(m, 10));
    const auto b = fill_holes(m, 25);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_GE(b.data[i], a.data[i]);
  }
}

TEST(RemoveSmallComponents, OnePercentRule) {
  auto build = [](std::size_t small) {
    Mask2D m(60, 60, 0);
    for (std::size_t i = 0; i < 1000; ++i) m.data[i] = 1;  // rows 0..15 (plus part of 16)
    for (std::size_t i = 0; i < small; ++i) m.at(40, 10 + i) = 1;
    return m;
  };
  const auto gone = remove_small_components(build(5), 0.01);
  EXPECT_EQ(std::count(gone.data.begin(), gone.data.end(), 1), 1000);
  const auto kept = remove_small_components(build(10), 0.01);
  EXPECT_EQ(std::count(kept.data.begin(), kept.data.end(), 1), 1010);
  EXPECT_EQ(remove_small_components(Mask2D(4, 4, 0), 0.5), Mask2D(4, 4, 0));
  EXPECT_THROW(remove_small_components(Mask2D(4, 4, 0), 1.0), VolumeError);
}

TEST(RemoveSmallComponents, MatchesBfsOracleAndIsMonotone) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = oracle::random_mask(rng, 32, 32, 0.2 + 0.005 * trial);
    for (double f : {0.01, 0.1, 0.5}) EXPECT_EQ(remove_small_components(m, f), oracle::remove_small(m, f));
    const auto lo = remove_small_components(m, 0.05), hi = remove_small_components(m, 0.3);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LE(hi.data[i], lo.data[i]);
  }
}

TEST(FuseMasks, TruthTable) {
  Mask2D a(1, 4, std::vector<uint8_t>{1, 1, 0, 0}), b(1, 4, std::vector<uint8_t>{1, 0, 1, 0});
  EXPECT_EQ(fuse_masks(a, b).data, (std::vector<float>{1.0f, 0.5f, 0.5f, 0.0f}));
  EXPECT_EQ(fuse_masks(a, a).data, (std::vector<float>{1.0f, 1.0f, 0.0f, 0.0f}));
  EXPECT_THROW(fuse_masks(a, Mask2D(2, 2, 0)), VolumeError);
}

TEST(FuseMasks, SymmetricAndMatchesOracle) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = oracle::random_mask(rng, 16, 16, 0.5), b = oracle::random_mask(rng, 16, 16, 0.5);
    const auto f = fuse_masks(a, b);
    EXPECT_EQ(f, fuse_masks(b, a));
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f.data[i], oracle::fuse_truth_table(a.data[i], b.data[i]));
  }
}

TEST(Params, Validation) {
  PseudoMaskParams p;
  EXPECT_NO_THROW(p.validate());
  p.ks = {3};
  EXPECT_THROW(p.validate(), VolumeError);
  p = {};
  p.kmeans_restarts = 0;
  EXPECT_THROW(p.validate(), VolumeError);
  p = {};
  p.closing_radius = -1;
  EXPECT_THROW(p.validate(), VolumeError);
}

TEST(GeneratePseudoMask, NoBoxesGivesZeros) {
  const VolumeShape sh{2, 8, 8};
  const auto v = Volume::normalized(sh, std::vector<float>(sh.voxels(), 0.3f));
  const auto m = generate_pseudo_mask(v, SliceBoxSet(sh), {});
  for (auto x : m.data) EXPECT_EQ(x, 0.0f);
}

TEST(GeneratePseudoMask, SingleSliceEqualsManualChain) {
  std::mt19937_64 rng(14);
  const VolumeShape sh{1, 24, 24};
  std::vector<float> d(sh.voxels());
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& x : d) x = u(rng);
  const auto vol = Volume::normalized(sh, d);
  SliceBoxSet boxes(sh);
  const SliceBox box{0, 3, 4, 18, 20};
  boxes.add(box);
  PseudoMaskParams p;
  p.seed = 21;
  const auto got = generate_pseudo_mask(vol, boxes, p);

  const auto slice = extract_slice(vol, 0);
  const std::span<const SliceBox> one(&box, 1);
  std::vector<Mask2D> per_k;
  for (int k : p.ks) {
    auto km = kmeans_slice(mask_outside_boxes(slice, one), k, p.kmeans_restarts, p.kmeans_max_iters, stage_seed(p.seed, 0, 0, k));
    auto m = select_foreground(km, one);
    m = morphological_closing(m, p.closing_radius);
    m = fill_holes(m, p.hole_area_max);
    m = remove_small_components(m, p.fg_component_min_frac);
    const auto inside = box_union_mask(sh.rows, sh.cols, one);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = m.data[i] && inside.data[i];
    per_k.push_back(m);
  }
  EXPECT_EQ(got.data, fuse_masks(per_k[0], per_k[1]).data);
}

TEST(GeneratePseudoMask, TooFewDistinctValuesWarnsAndZeroes) {
  const VolumeShape sh{1, 8, 8};
  std::vector<float> d(sh.voxels(), 0.0f);
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 2; c < 5; ++c) d[sh.index(0, r, c)] = 0.8f;
  SliceBoxSet boxes(sh);
  boxes.add({0, 1, 1, 6, 6});
  PseudoMaskParams p;
  p.ks = {2, 3};
  PseudoMaskReport report;
  const auto m = generate_pseudo_mask(Volume::normalized(sh, d), boxes, p, &report);
  ASSERT_EQ(report.stages.size(), 2u);
  EXPECT_TRUE(report.stages[0].warnings.empty());
  EXPECT_FALSE(report.stages[1].warnings.empty());
  // k=2 finds the square, k=3 cannot run: every square pixel disagrees.
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(m.data[i], d[i] > 0 ? 0.5f : 0.0f);
}

TEST(GeneratePseudoMask, PhantomPropertiesAndDeterminism) {
  PhantomSpec spec;
  spec.noise_std_hu = 0.0;
  spec.hole_probability = 0.0;
  spec.n_blobs = 2;
  for (uint64_t seed = 0; seed < 4; ++seed) {
    spec.seed = seed;
    const auto ph = generate_phantom(spec);
    const auto vol = window_normalize(ph.image, organ_profile("kidneys").hu_window);
    const auto boxes = make_bounding_boxes(ph.gt, 5, true);
    PseudoMaskParams p;
    p.ks = {2, 3};
    p.seed = seed;
    const auto m = generate_pseudo_mask(vol, boxes, p);
    EXPECT_EQ(m, generate_pseudo_mask(vol, boxes, p));
    const auto& sh = vol.shape();
    for (std::size_t s = 0; s < sh.slices; ++s)
      for (std::size_t r = 0; r < sh.rows; ++r)
        for (std::size_t c = 0; c < sh.cols; ++c) {
          const float v = m.data[sh.index(s, r, c)];
          EXPECT_TRUE(v == 0.0f || v == 0.5f || v == 1.0f);
          if (v > 0) {
            bool in = false;
            for (const auto& b : boxes.on_slice(s)) in = in || b.contains(r, c);
            EXPECT_TRUE(in);
          }
        }
  }
}

TEST(GeneratePseudoMask, BrightEllipseRecovered) {
  PhantomSpec spec;
  spec.noise_std_hu = 0.0;
  spec.hole_probability = 0.0;
  spec.seed = 3;
  const auto ph = generate_phantom(spec);
  const auto vol = window_normalize(ph.image, organ_profile("liver").hu_window);
  PseudoMaskParams p;
  p.ks = {2, 3};
  const auto m = generate_pseudo_mask(vol, make_bounding_boxes(ph.gt, 5, false), p);
  double inter = 0, total = 0;
  const auto g = ph.gt.label_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    inter += m.data[i] * g[i];
    total += m.data[i] + g[i];
  }
  EXPECT_GE(2 * inter / total, 0.90);
}
