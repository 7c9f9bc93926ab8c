#include "support.hpp"
#include "vilo/error.hpp"
#include "vilo/initializer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace vilo;
using namespace vilo::init;
using vilo::testing::make_matches;
using vilo::testing::pose_close;
using vilo::testing::random_query;

namespace {

constexpr double kDeg = kPi / 180.0;

// Point-evaluated consensus on a uniform grid.
int grid_max(const std::vector<TimConstraint>& tims, double step) {
  int best = 0;
  for (double a = -kPi; a <= kPi; a += step) {
    int c = 0;
    for (const auto& t : tims) c += t.consistent(a);
    best = std::max(best, c);
  }
  return best;
}

// Largest vertex subset whose pairs are all adjacent, by enumeration.
int brute_force_clique(const std::vector<std::vector<char>>& adj) {
  const int n = static_cast<int>(adj.size());
  std::vector<std::uint32_t> nb(n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && adj[i][j]) nb[i] |= 1u << j;
  int best = 0;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    const int size = __builtin_popcount(mask);
    if (size <= best) continue;
    bool clique = true;
    for (int i = 0; i < n && clique; ++i) {
      if ((mask >> i) & 1u) clique = ((mask & ~(1u << i)) & ~nb[i]) == 0;
    }
    if (clique) best = size;
  }
  return best;
}

}  // namespace

TEST(BuildTims, ExactPairVanishesAtTrueYaw) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_query(rng, 2);
    const auto m = make_matches(q, 1, 0, 0.0, rng);
    const auto tims = build_tims(m, q.geometry);
    ASSERT_EQ(tims.size(), 1u);
    EXPECT_LT(std::abs(tims[0].eval(q.truth.yaw)), 1e-10);
    EXPECT_GT(tims[0].bound, 0.0);
  }
}

TEST(BuildTims, CountsPairs) {
  std::mt19937_64 rng(2);
  const auto q = random_query(rng, 1);
  const auto m = make_matches(q, 12, 5, 1.0, rng);
  // Outliers can reuse an inlier's landmark; such pairs carry no yaw information.
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = i + 1; j < m.size(); ++j) distinct += m[i].point != m[j].point;
  EXPECT_EQ(build_tims(m, q.geometry).size(), distinct);
  const auto clean = make_matches(q, 17, 0, 1.0, rng);
  EXPECT_EQ(build_tims(clean, q.geometry).size(), 17u * 16u / 2u);
}

TEST(BuildTims, NoisyInlierPairsWithinBoundOutlierPairsMostlyNot) {
  std::mt19937_64 rng(3);
  int inlier_pairs = 0, inlier_ok = 0, mixed_pairs = 0, mixed_rejected = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const auto q = random_query(rng, 1);
    const auto m = make_matches(q, 10, 10, 1.0, rng);
    for (const auto& t : build_tims(m, q.geometry)) {
      if (m[t.i].inlier && m[t.j].inlier) {
        ++inlier_pairs;
        inlier_ok += std::abs(t.eval(q.truth.yaw)) <= t.bound;
      } else if (m[t.i].inlier != m[t.j].inlier) {
        ++mixed_pairs;
        mixed_rejected += std::abs(t.eval(q.truth.yaw)) > t.bound;
      }
    }
  }
  EXPECT_EQ(inlier_ok, inlier_pairs);
  EXPECT_GT(mixed_rejected, mixed_pairs / 2);
}

TEST(VoteYaw, AllInliersNearTruth) {
  std::mt19937_64 rng(4);
  const double step = 0.25 * kDeg;
  for (int trial = 0; trial < 10; ++trial) {
    auto q = random_query(rng, 1);
    // Pin the true yaw to 0.7 rad.
    const YawTilt yt = split_yaw_tilt(q.map_T_imu.rotation);
    q.map_T_imu.rotation = yaw_rotation(0.7) * yt.tilt;
    q.truth.yaw = 0.7;
    const auto m = make_matches(q, 30, 0, 1.0, rng);
    const auto tims = build_tims(m, q.geometry);
    const YawVote v = vote_yaw(tims, step);
    EXPECT_GE(v.yaw, 0.7 - step);
    EXPECT_LE(v.yaw, 0.7 + step);
    EXPECT_EQ(v.count, static_cast<int>(tims.size()));
    EXPECT_EQ(v.count, grid_max(tims, step / 100));
  }
}

TEST(VoteYaw, HeavyOutliersOptimalAndKeepsInlierCorrespondences) {
  std::mt19937_64 rng(5);
  const double step = 0.25 * kDeg;
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_query(rng, 1);
    const auto m = make_matches(q, 20, 80, 1.0, rng);
    const auto tims = build_tims(m, q.geometry);
    const YawVote v = vote_yaw(tims, step);
    // The fine grid costs ~1.4e5 evaluations per constraint set; check a few.
    if (trial < 3) EXPECT_EQ(v.count, grid_max(tims, step / 100)) << "trial " << trial;
    std::vector<char> kept(m.size(), 0);
    for (const auto& t : tims) {
      if (t.consistent(v.yaw, step / 50)) kept[t.i] = kept[t.j] = 1;
    }
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i].inlier) EXPECT_TRUE(kept[i]) << "trial " << trial;
  }
}

// 80% outliers, 100 correspondences: the vote lands within one step of the
// true yaw and every inlier-inlier constraint holds there.
TEST(VoteYaw, HeavyOutliersWithinOneStep) {
  std::mt19937_64 rng(5);
  const double step = 0.25 * kDeg;
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_query(rng, 1);
    const auto m = make_matches(q, 20, 80, 1.0, rng);
    const auto tims = build_tims(m, q.geometry);
    const YawVote v = vote_yaw(tims, step);
    EXPECT_LE(std::abs(wrap_angle(v.yaw - q.truth.yaw)), step) << "trial " << trial;
    int dropped = 0;
    for (const auto& t : tims) dropped += m[t.i].inlier && m[t.j].inlier && !t.consistent(v.yaw, step / 50);
    EXPECT_EQ(dropped, 0) << "trial " << trial;
  }
}

TEST(VoteYaw, SingleConstraintReturnsARoot) {
  std::mt19937_64 rng(6);
  const auto q = random_query(rng, 1);
  const auto m = make_matches(q, 2, 0, 0.0, rng);
  const auto tims = build_tims(m, q.geometry);
  ASSERT_EQ(tims.size(), 1u);
  const YawVote v = vote_yaw(tims, 0.25 * kDeg);
  EXPECT_EQ(v.count, 1);
  const auto roots = solvers::solve_tim(tims[0].d);
  double nearest = 1e9;
  for (double r : roots) nearest = std::min(nearest, std::abs(wrap_angle(r - v.yaw)));
  EXPECT_LT(nearest, 1e-6);
}

TEST(VoteYaw, EmptyIsAnError) { EXPECT_THROW(vote_yaw({}, 0.01), InsufficientDataError); }

TEST(MaximumClique, MatchesBruteForceOnRandomGraphs) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 20;
    const double density = 0.2 + 0.7 * u(rng);
    std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) adj[i][j] = adj[j][i] = u(rng) < density;
    const auto c = maximum_clique(adj);
    EXPECT_EQ(static_cast<int>(c.size()), brute_force_clique(adj));
    for (int a : c)
      for (int b : c)
        if (a != b) EXPECT_TRUE(adj[a][b]);
  }
}

TEST(MaximumClique, NoEdgesGivesSingleton) {
  std::vector<std::vector<char>> adj(5, std::vector<char>(5, 0));
  EXPECT_EQ(maximum_clique(adj).size(), 1u);
  EXPECT_TRUE(maximum_clique({}).empty());
}

TEST(SolveTranslation, ThreeExactInliers) {
  std::mt19937_64 rng(8);
  const auto q = random_query(rng, 1);
  const auto m = make_matches(q, 3, 0, 0.0, rng);
  const auto r = solve_translation(m, q.truth.yaw, {1e-6, 1e-6, 1e-6}, q.geometry);
  EXPECT_EQ(r.inliers.size(), 3u);
  EXPECT_LT((r.translation - q.truth.translation).norm(), 1e-8);
}

TEST(SolveTranslation, CliqueIsTheInlierSetAndMatchesBruteForce) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_query(rng, 1);
    const auto m = make_matches(q, 10, 10, 1.0, rng);
    const std::vector<double> bounds(m.size(), 3.3);
    const auto r = solve_translation(m, q.truth.yaw, bounds, q.geometry);
    std::vector<int> truth;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i].inlier) truth.push_back(static_cast<int>(i));
    EXPECT_EQ(r.inliers, truth) << "trial " << trial;
    std::vector<std::vector<char>> adj(m.size(), std::vector<char>(m.size(), 0));
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = i + 1; j < m.size(); ++j)
        adj[i][j] = adj[j][i] = translation_compatible(m[i], m[j], q.truth.yaw, 3.3, 3.3, q.geometry);
    EXPECT_EQ(static_cast<int>(r.inliers.size()), brute_force_clique(adj));
  }
}

TEST(SolveTranslation, IncompatibleSetGivesSingleton) {
  std::mt19937_64 rng(10);
  const auto q = random_query(rng, 1);
  // Outliers only, with tight bounds: no two agree on a translation.
  const auto m = make_matches(q, 0, 6, 1.0, rng);
  const auto r = solve_translation(m, q.truth.yaw, std::vector<double>(m.size(), 0.01), q.geometry);
  EXPECT_EQ(r.inliers.size(), 1u);
  EXPECT_THROW(solve_translation({}, 0.0, {}, q.geometry), InsufficientDataError);
}

TEST(Initialize, ExactInliersAreRecovered) {
  std::mt19937_64 rng(11);
  InitConfig cfg;
  cfg.pixel_sigma = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto q = random_query(rng, 1 + trial % 4);
    const auto m = make_matches(q, 8, 0, 0.0, rng);
    const InitResult r = initialize(m, cfg, q.geometry);
    EXPECT_TRUE(pose_close(r.refined, q.truth, 1e-6, 1e-6)) << "trial " << trial;
    EXPECT_EQ(r.translation_inliers.size(), m.size());
  }
}

TEST(Initialize, RepeatsAreBitIdentical) {
  std::mt19937_64 rng(12);
  const auto q = random_query(rng, 1);
  const auto m = make_matches(q, 21, 5, 1.0, rng);
  const InitResult first = initialize(m, InitConfig{}, q.geometry);
  for (int rep = 0; rep < 100; ++rep) {
    const InitResult r = initialize(m, InitConfig{}, q.geometry);
    ASSERT_EQ(r.refined.yaw, first.refined.yaw);
    ASSERT_EQ(r.refined.translation, first.refined.translation);
    ASSERT_EQ(r.translation_inliers, first.translation_inliers);
  }
}

TEST(Initialize, TranslationInliersWithinYawInliers) {
  std::mt19937_64 rng(13);
  const auto q = random_query(rng, 2);
  const auto m = make_matches(q, 15, 30, 1.0, rng);
  const InitResult r = initialize(m, InitConfig{}, q.geometry);
  const std::set<int> yaw(r.yaw_inliers.begin(), r.yaw_inliers.end());
  for (int i : r.translation_inliers) EXPECT_TRUE(yaw.count(i));
}

TEST(Initialize, LargeContaminatedCaseIsFastAndAccurate) {
  std::mt19937_64 rng(14);
  const auto q = random_query(rng, 1);
  const auto m = make_matches(q, 60, 90, 1.0, rng);
  const InitResult r = initialize(m, InitConfig{}, q.geometry);
  EXPECT_LT(r.wall_time_s, 2.0);
  EXPECT_TRUE(pose_close(r.refined, q.truth, 0.05, 0.5 * kDeg));
}

TEST(Initialize, FullInlierRecall) {
  std::mt19937_64 rng(15);
  for (double wbar : {0.6, 0.7, 0.8}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto q = random_query(rng, 1);
      const int total = 60;
      const int outliers = static_cast<int>(std::lround(wbar * total));
      const auto m = make_matches(q, total - outliers, outliers, 1.0, rng);
      const InitResult r = initialize(m, InitConfig{}, q.geometry);
      const std::set<int> got(r.translation_inliers.begin(), r.translation_inliers.end());
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i].inlier) EXPECT_TRUE(got.count(static_cast<int>(i))) << "w " << wbar << " trial " << trial;
    }
  }
}

TEST(Initialize, Errors) {
  std::mt19937_64 rng(16);
  const auto q = random_query(rng, 1);
  const auto one = make_matches(q, 1, 0, 0.0, rng);
  EXPECT_THROW(initialize(one, InitConfig{}, q.geometry), InsufficientDataError);
  const auto junk = make_matches(q, 0, 8, 1.0, rng);
  EXPECT_THROW(initialize(junk, InitConfig{}, q.geometry), NoConsensusError);
}
