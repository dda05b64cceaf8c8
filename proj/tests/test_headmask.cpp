#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "pwclo/gradsuite.hpp"
#include "pwclo/headmask.hpp"

using namespace pwclo;
using ad::Tensor;

namespace {

Tensor random_tensor(ad::Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

geom::Pose sample_pose() {
  return geom::Pose(geom::Quaternion::from_axis_angle({0.2, 1.0, 0.1}, 0.15), {0.3, -0.05, 0.4});
}

}  // namespace

TEST(Mask, ColumnsSumToOne) {
  std::mt19937_64 rng(31);
  const Mlp mlp("m", 5 + 5 + 3, {5, 5});
  ad::ParameterStore store;
  mlp.init(store, rng);
  ad::Tape tape;
  ad::Var m = head::make_mask(tape, store, tape.constant(random_tensor({12, 5}, rng)),
                              tape.constant(random_tensor({12, 3}, rng)), tape.constant(random_tensor({12, 5}, rng)),
                              mlp);
  const Tensor& v = m.value();
  for (std::size_t c = 0; c < 5; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 12; ++r) {
      EXPECT_GT(v.at(r, c), 0.0);
      s += v.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Mask, PoolingWithoutMaskIsColumnMean) {
  std::mt19937_64 rng(32);
  const Tensor e = random_tensor({7, 3}, rng);
  ad::Tape tape;
  const Tensor p = head::pool_embedding(tape.constant(e), std::nullopt).value();
  ASSERT_EQ(p.shape(), (ad::Shape{1, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 7; ++r) s += e.at(r, c);
    EXPECT_NEAR(p[c], s / 7.0, 1e-15);
  }
}

TEST(Mask, UniformMaskEqualsMeanPooling) {
  std::mt19937_64 rng(33);
  const Tensor e = random_tensor({8, 4}, rng);
  ad::Tape tape;
  const Tensor a = head::pool_embedding(tape.constant(e), tape.constant(Tensor(ad::Shape{8, 4}, 1.0 / 8))).value();
  const Tensor b = head::pool_embedding(tape.constant(e), std::nullopt).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(PoseHead, QuaternionIsUnitAndStartsNearIdentity) {
  std::mt19937_64 rng(34);
  const Mlp fq = head::make_fc("fq", 6, 8, 5, 4), ft = head::make_fc("ft", 6, 8, 5, 3);
  ad::ParameterStore store;
  head::init_pose_fc(store, rng, fq, ft);
  ad::Tape tape;
  const auto p = head::pose_head(tape, store, tape.constant(random_tensor({10, 6}, rng)), std::nullopt, fq, ft);
  const Tensor& q = p.q.value();
  EXPECT_NEAR(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3], 1.0, 1e-12);
  EXPECT_LT(geom::rotation_angle(p.value().q()), 0.1);
  EXPECT_EQ(p.t.shape(), (ad::Shape{1, 3}));
}

TEST(Warp, MatchesRigidTransformOracle) {
  std::mt19937_64 rng(35);
  const geom::Pose pose = sample_pose();
  const Tensor x = random_tensor({9, 3}, rng, -5, 5);
  ad::Tape tape;
  const Tensor w = head::warp_points(head::pose_constant(tape, pose), tape.constant(x)).value();
  for (std::size_t i = 0; i < 9; ++i) {
    const geom::Vec3 e = pose.apply({x[3 * i], x[3 * i + 1], x[3 * i + 2]});
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(w[3 * i + c], e[c], 1e-12);
  }
}

TEST(Warp, ComposeMatchesPoseAlgebra) {
  const geom::Pose d(geom::Quaternion::from_axis_angle({1, 0, 0}, 0.05), {0.01, 0.02, -0.03});
  const geom::Pose c = sample_pose();
  ad::Tape tape;
  const geom::Pose got = head::compose(head::pose_constant(tape, d), head::pose_constant(tape, c)).value();
  const geom::Pose expect = geom::pose_compose(d, c);
  EXPECT_LT(geom::angular_distance(got.q(), expect.q()), 1e-9);
  EXPECT_LT(geom::norm(geom::operator-(got.t(), expect.t())), 1e-12);
}

TEST(WarpRefine, GroundTruthCoarsePoseAlignsClouds) {
  std::mt19937_64 rng(36);
  const geom::Pose gt = sample_pose();
  const Tensor x1 = random_tensor({16, 3}, rng, -5, 5);
  Tensor x2(x1.shape());
  for (std::size_t i = 0; i < 16; ++i) {
    const geom::Vec3 p = gt.apply({x1[3 * i], x1[3 * i + 1], x1[3 * i + 2]});
    for (std::size_t c = 0; c < 3; ++c) x2[3 * i + c] = p[c];
  }
  const auto block = head::WarpRefineBlock::make("wr", 4, 3, 4, 2, 6, 5, 3, 3, 3, cv::Variant::kAttentive, true);
  ad::ParameterStore store;
  block.init(store, rng);
  ad::Tape tape;
  head::LevelState coarse;
  coarse.pc1 = {tape.constant(random_tensor({5, 3}, rng, -5, 5)), std::nullopt};
  coarse.embedding = tape.constant(random_tensor({5, 4}, rng));
  coarse.mask = ad::softmax(tape.constant(random_tensor({5, 4}, rng)), 0);
  coarse.has_mask = true;
  coarse.pose = head::pose_constant(tape, gt);
  head::RefineTrace trace;
  const auto out = head::warp_refine(tape, store, coarse, {tape.constant(x1), tape.constant(random_tensor({16, 3}, rng))},
                                     {tape.constant(x2), tape.constant(random_tensor({16, 3}, rng))}, block, {}, &trace);
  double worst = 0;
  for (std::size_t i = 0; i < x2.size(); ++i) worst = std::max(worst, std::fabs(trace.warped_xyz.value()[i] - x2[i]));
  EXPECT_LT(worst, 1e-9);
  EXPECT_EQ(out.embedding.shape(), (ad::Shape{16, 4}));
  EXPECT_EQ(out.mask.shape(), (ad::Shape{16, 4}));
  const Tensor& q = out.pose.q.value();
  EXPECT_NEAR(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3], 1.0, 1e-9);
}

TEST(WarpRefine, DisabledWarpLeavesCloudInPlace) {
  std::mt19937_64 rng(37);
  const auto block = head::WarpRefineBlock::make("wr", 4, 3, 4, 2, 6, 5, 3, 3, 3, cv::Variant::kAttentive, false);
  ad::ParameterStore store;
  block.init(store, rng);
  ad::Tape tape;
  const Tensor x1 = random_tensor({10, 3}, rng, -5, 5);
  head::LevelState coarse;
  coarse.pc1 = {tape.constant(random_tensor({4, 3}, rng, -5, 5)), std::nullopt};
  coarse.embedding = tape.constant(random_tensor({4, 4}, rng));
  coarse.pose = head::pose_constant(tape, sample_pose());
  head::RefineOptions opts;
  opts.warp = false;
  opts.mask_enabled = false;
  head::RefineTrace trace;
  const auto out = head::warp_refine(tape, store, coarse, {tape.constant(x1), tape.constant(random_tensor({10, 3}, rng))},
                                     {tape.constant(random_tensor({10, 3}, rng, -5, 5)),
                                      tape.constant(random_tensor({10, 3}, rng))},
                                     block, opts, &trace);
  EXPECT_EQ(trace.warped_xyz.value(), x1);
  EXPECT_FALSE(out.has_mask);
}

TEST(MaskTable, OneRowPerPointWithChannelSum) {
  const Tensor coords = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor mask = Tensor::matrix(2, 2, {0.25, 0.5, 0.75, 0.5});
  std::ostringstream out;
  head::write_mask_table(out, coords, mask);
  EXPECT_EQ(out.str(), "x,y,z,weight\n1,2,3,0.75\n4,5,6,1.25\n");
}

TEST(HeadOps, GradientsMatchFiniteDifferences) {
  pwclo::gradsuite::SuiteOptions so;
  so.include_end_to_end = false;
  const auto suite = pwclo::gradsuite::default_suite(so);
  for (const char* op : {"make_mask", "pose_head", "warp_refine"}) {
    const auto o = pwclo::gradsuite::run(suite, op);
    ASSERT_EQ(o.size(), 1u);
    EXPECT_TRUE(o[0].passed()) << op << " " << o[0].result.max_error << " at " << o[0].result.worst_location;
  }
}
