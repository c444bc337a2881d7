#include <gtest/gtest.h>

#include <filesystem>
#include <queue>

#include "boxseg/metrics.hpp"
#include "boxseg/phantom.hpp"
#include "boxseg/preprocess.hpp"
#include "boxseg/pseudo_mask.hpp"
#include "boxseg/volume_io.hpp"

using namespace boxseg;
namespace fs = std::filesystem;

namespace {

PhantomSpec noiseless(uint64_t seed) {
  PhantomSpec s;
  s.organ_intensity_hu.std = 0;
  s.background_intensity_hu.std = 0;
  s.noise_std_hu = 0;
  s.seed = seed;
  return s;
}

// Background voxels not 6-connected to the volume border.
std::size_t enclosed_background(const Volume& gt, bool& touches_border) {
  const auto& sh = gt.shape();
  const auto g = gt.label_data();
  std::vector<uint8_t> reached(g.size(), 0);
  std::queue<std::array<long, 3>> q;
  const long S = static_cast<long>(sh.slices), R = static_cast<long>(sh.rows), C = static_cast<long>(sh.cols);
  auto idx = [&](long s, long r, long c) { return static_cast<std::size_t>((s * R + r) * C + c); };
  for (long s = 0; s < S; ++s)
    for (long r = 0; r < R; ++r)
      for (long c = 0; c < C; ++c)
        if ((s == 0 || r == 0 || c == 0 || s == S - 1 || r == R - 1 || c == C - 1) && !g[idx(s, r, c)]) {
          reached[idx(s, r, c)] = 1;
          q.push({s, r, c});
        }
  const long step[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!q.empty()) {
    const auto [s, r, c] = q.front();
    q.pop();
    for (const auto& d : step) {
      const long a = s + d[0], b = r + d[1], e = c + d[2];
      if (a < 0 || b < 0 || e < 0 || a >= S || b >= R || e >= C) continue;
      const auto i = idx(a, b, e);
      if (g[i] || reached[i]) continue;
      reached[i] = 1;
      q.push({a, b, e});
    }
  }
  touches_border = false;
  for (long s = 0; s < S; ++s)
    for (long r = 0; r < R; ++r)
      for (long c = 0; c < C; ++c)
        if ((s == 0 || r == 0 || c == 0 || s == S - 1 || r == R - 1 || c == C - 1) && g[idx(s, r, c)]) touches_border = true;
  std::size_t n = 0;
  for (std::size_t i = 0; i < g.size(); ++i) n += !g[i] && !reached[i];
  return n;
}

}  // namespace

TEST(PhantomSpec, Validation) {
  EXPECT_NO_THROW(PhantomSpec{}.validate());
  PhantomSpec s;
  s.shape = {12, 32, 32};
  EXPECT_THROW(s.validate(), VolumeError);
  s = PhantomSpec{};
  s.organ_intensity_hu = {-50, 10};
  EXPECT_THROW(s.validate(), VolumeError);
  s = PhantomSpec{};
  s.n_blobs = 3;
  EXPECT_THROW(s.validate(), VolumeError);
  s = PhantomSpec{};
  s.n_blobs = 2;
  s.seed = 4;
  const auto back = PhantomSpec::from_json(s.to_json());
  EXPECT_EQ(back.n_blobs, 2u);
  EXPECT_EQ(back.seed, 4u);
  EXPECT_EQ(PhantomSpec::from_json({{"noise_std_hu", 0.0}}).noise_std_hu, 0.0);
}

TEST(Phantom, NoiselessTruthIsOrganIntensity) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = generate_phantom(noiseless(seed));
    const auto hu = p.image.hu_data();
    const auto g = p.gt.label_data();
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(hu[i], g[i] ? 60 : -80);
  }
}

TEST(Phantom, DeterministicPerSeed) {
  PhantomSpec s;
  s.seed = 12;
  const auto a = generate_phantom(s), b = generate_phantom(s);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.gt, b.gt);
  s.seed = 13;
  EXPECT_NE(generate_phantom(s).image, a.image);
}

TEST(Phantom, TruthFractionAndPlacement) {
  double total = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    PhantomSpec s = noiseless(seed);
    s.hole_probability = 0;
    const auto p = generate_phantom(s);
    const auto g = p.gt.label_data();
    const double frac = static_cast<double>(std::count(g.begin(), g.end(), 1)) / static_cast<double>(g.size());
    EXPECT_GT(frac, 0.01);
    EXPECT_LT(frac, 0.2);
    total += frac;
    bool border = false;
    EXPECT_EQ(enclosed_background(p.gt, border), 0u);
    EXPECT_FALSE(border);
  }
  EXPECT_GT(total / 100, 0.03);
  EXPECT_LT(total / 100, 0.15);
}

TEST(Phantom, HolesAreEnclosedByOrgan) {
  std::size_t with_holes = 0;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    PhantomSpec s = noiseless(seed);
    s.hole_probability = 1.0;
    bool border = false;
    if (enclosed_background(generate_phantom(s).gt, border) > 0) ++with_holes;
  }
  EXPECT_GT(with_holes, 30u);
}

TEST(Phantom, TwoBlobsLeaveColumnGap) {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    PhantomSpec s = noiseless(seed);
    s.n_blobs = 2;
    const auto p = generate_phantom(s);
    const auto& sh = p.gt.shape();
    std::vector<bool> used(sh.cols, false);
    for (std::size_t z = 0; z < sh.slices; ++z)
      for (std::size_t r = 0; r < sh.rows; ++r)
        for (std::size_t c = 0; c < sh.cols; ++c)
          if (p.gt.label_data()[sh.index(z, r, c)]) used[c] = true;
    const std::size_t half = sh.cols / 2;
    std::size_t left_end = 0, right_start = sh.cols;
    for (std::size_t c = 0; c < half; ++c)
      if (used[c]) left_end = c;
    for (std::size_t c = sh.cols; c-- > half;)
      if (used[c]) right_start = c;
    EXPECT_TRUE(used[left_end]);
    EXPECT_LT(right_start, sh.cols);
    EXPECT_GE(right_start - left_end - 1, 2u) << "seed " << seed;
  }
}

TEST(Phantom, CleanPhantomRecoveredByTwoClusters) {
  double total = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const auto p = generate_phantom(noiseless(seed));
    PseudoMaskParams pm;
    pm.ks = {2, 3};
    const auto vol = window_normalize(p.image, organ_profile("liver").hu_window);
    const auto mask = generate_pseudo_mask(vol, make_bounding_boxes(p.gt, 5, false), pm);
    total += score_case(binarize(mask, 0.25), p.gt).dsc;
  }
  EXPECT_GE(total / 10, 95.0);
}

TEST(Corpus, EmptyAndSmall) {
  const auto dir = fs::temp_directory_path() / "boxseg_test_corpus";
  fs::remove_all(dir);
  const auto empty = generate_corpus(0, PhantomSpec{}, dir / "empty");
  EXPECT_TRUE(empty["cases"].empty());
  EXPECT_EQ(read_json(dir / "empty" / "manifest.json"), empty);

  PhantomSpec s;
  s.seed = 40;
  const auto m = generate_corpus(3, s, dir / "three");
  ASSERT_EQ(m["cases"].size(), 3u);
  EXPECT_EQ(m["cases"][1]["id"], "case_001");
  for (std::size_t i = 0; i < 3; ++i) {
    s.seed = 40 + i;
    const auto p = generate_phantom(s);
    EXPECT_EQ(load_volume(dir / "three" / m["cases"][i]["image"].get<std::string>()), p.image);
    EXPECT_EQ(load_volume(dir / "three" / m["cases"][i]["gt"].get<std::string>()), p.gt);
  }
}
