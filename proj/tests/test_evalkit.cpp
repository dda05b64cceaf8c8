#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "pwclo/evalkit.hpp"

using namespace pwclo;
namespace fs = std::filesystem;

namespace {

// Camera-style forward motion along +z with `step` meters per frame.
eval::Trajectory straight_line(std::size_t frames, double step) {
  std::vector<geom::Transform4> poses(frames);
  for (std::size_t k = 0; k < frames; ++k) poses[k](2, 3) = step * static_cast<double>(k);
  return eval::Trajectory::from_poses(std::move(poses));
}

eval::Trajectory wandering(std::size_t frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 0.02);
  std::vector<geom::Pose> rel;
  for (std::size_t k = 0; k + 1 < frames; ++k)
    rel.emplace_back(geom::euler_to_quat(n(rng), n(rng), n(rng)), geom::Vec3{n(rng), n(rng), -1.0 + n(rng)});
  return eval::accumulate(rel);
}

}  // namespace

TEST(Evaluator, GroundTruthAgainstItselfIsZero) {
  const auto gt = wandering(900, 1);
  const auto m = eval::kitti_errors(gt, gt);
  EXPECT_FALSE(m.insufficient_length);
  EXPECT_EQ(m.per_length.size(), 8u);
  EXPECT_LT(m.t_rel, 1e-9);
  EXPECT_LT(m.r_rel, 1e-6);
}

TEST(Evaluator, ScaledStraightLineGivesOnePercent) {
  const auto gt = straight_line(8200, 0.1);
  const auto est = straight_line(8200, 0.101);
  const auto m = eval::kitti_errors(est, gt);
  EXPECT_EQ(m.per_length.size(), 8u);
  EXPECT_NEAR(m.t_rel, 1.00, 0.01);
  EXPECT_LT(m.r_rel, 1e-9);
}

TEST(Evaluator, ConstantYawDriftMatchesClosedForm) {
  const double step = 1.0, delta = 1e-3;  // rad per frame
  const std::size_t frames = 900;
  const auto gt = straight_line(frames, step);
  std::vector<geom::Transform4> est_poses = gt.poses;
  for (std::size_t k = 0; k < frames; ++k) {
    const auto r = geom::pose_to_matrix(
        geom::Pose(geom::Quaternion::from_axis_angle({0, 1, 0}, delta * static_cast<double>(k)), {0, 0, 0}));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) est_poses[k](i, j) = r(i, j);
  }
  const auto m = eval::kitti_errors(eval::Trajectory::from_poses(est_poses), gt);
  ASSERT_EQ(m.per_length.size(), 8u);
  // A length-L window spans L/step + 1 frames (first frame strictly beyond L).
  const double to_unit = 100.0 * 180.0 / std::numbers::pi;
  double expect = 0;
  for (const auto& le : m.per_length) {
    const double n = le.length / step + 1;
    EXPECT_NEAR(le.r_err, n * delta / le.length * to_unit, 1e-9) << le.length;
    expect += n * delta / le.length * to_unit;
  }
  EXPECT_NEAR(m.r_rel, expect / 8, 1e-9);
  EXPECT_NEAR(m.r_rel, delta / step * to_unit, 0.01 * delta / step * to_unit);
}

TEST(Evaluator, InvariantToGlobalTransform) {
  const auto gt = wandering(900, 2);
  const auto est = wandering(900, 3);
  const auto base = eval::kitti_errors(est, gt);
  const auto g = geom::pose_to_matrix(geom::Pose(geom::euler_to_quat(0.4, -0.2, 0.1), {10, -3, 7}));
  std::vector<geom::Transform4> moved;
  for (const auto& p : est.poses) moved.push_back(g * p);
  const auto m = eval::kitti_errors(eval::Trajectory::from_poses(moved), gt);
  EXPECT_NEAR(m.t_rel, base.t_rel, 1e-9);
  EXPECT_NEAR(m.r_rel, base.r_rel, 1e-9);
}

TEST(Evaluator, ShortTrajectoryFlagged) {
  const auto gt = straight_line(50, 1.0);
  const auto m = eval::kitti_errors(gt, gt);
  EXPECT_TRUE(m.insufficient_length);
  EXPECT_TRUE(m.per_length.empty());
  EXPECT_THROW(eval::kitti_errors(gt, straight_line(49, 1.0)), std::invalid_argument);
}

TEST(Accumulate, InvertsRelatives) {
  std::vector<geom::Pose> rel;
  for (int k = 0; k < 30; ++k)
    rel.emplace_back(geom::euler_to_quat(0.01 * k, 0.002, -0.003), geom::Vec3{0.1, 0.0, -1.0});
  const auto traj = eval::accumulate(rel);
  ASSERT_EQ(traj.size(), 31u);
  EXPECT_EQ(traj.poses[0], geom::Transform4::identity());
  const auto back = eval::relatives_of(traj);
  ASSERT_EQ(back.size(), rel.size());
  for (std::size_t k = 0; k < rel.size(); ++k) {
    EXPECT_LT(geom::angular_distance(back[k].q(), rel[k].q()), 1e-9);
    EXPECT_LT(geom::norm(geom::operator-(back[k].t(), rel[k].t())), 1e-9);
  }
  EXPECT_THROW(eval::accumulate({}), std::invalid_argument);
}

TEST(Accumulate, ForwardMotionConvention) {
  // Frame-k coordinates move by -1 in z when the sensor drives +1 in z.
  const auto traj = eval::accumulate(std::vector<geom::Pose>(3, geom::Pose({1, 0, 0, 0}, {0, 0, -1})));
  EXPECT_NEAR(traj.poses[3](2, 3), 3.0, 1e-15);
  EXPECT_NEAR(traj.arc_length[3], 3.0, 1e-15);
}

TEST(TrajectoryFile, RoundTrip) {
  const auto t = wandering(20, 4);
  const fs::path p = fs::temp_directory_path() / "pwclo_traj.txt";
  eval::save_kitti_trajectory(p.string(), t);
  const auto back = eval::load_kitti_trajectory(p.string());
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t k = 0; k < t.size(); ++k) EXPECT_EQ(back.poses[k], t.poses[k]);
  fs::remove(p);
  EXPECT_ANY_THROW(eval::load_kitti_trajectory(p.string()));
}

TEST(PlotTables, HeadersAndRows) {
  const auto t = straight_line(3, 1.0);
  std::ostringstream a, b, c;
  eval::write_path3d_csv(a, t);
  eval::write_path2d_csv(b, t);
  eval::write_errors_csv(c, nullptr);
  EXPECT_EQ(a.str(), "frame,x,y,z\n0,0,0,0\n1,0,0,1\n2,0,0,2\n");
  EXPECT_EQ(b.str(), "frame,x,z\n0,0,0\n1,0,1\n2,0,2\n");
  EXPECT_EQ(c.str(), "length,t_err_pct,r_err_deg_per_100m,count\n");
}

TEST(PlotTables, EmitWritesEveryFile) {
  const fs::path dir = fs::temp_directory_path() / "pwclo_emit";
  fs::remove_all(dir);
  const auto gt = straight_line(900, 1.0);
  const auto m = eval::kitti_errors(gt, gt);
  const std::vector<eval::NamedTrajectory> named{{"gt", &gt}, {"est", &gt}};
  const auto r = eval::emit_plot_data(named, &m, dir.string());
  EXPECT_TRUE(r.failures.empty());
  EXPECT_EQ(r.written.size(), 5u);
  for (const char* f : {"gt_path3d.csv", "gt_path2d.csv", "est_path3d.csv", "est_path2d.csv", "errors_by_length.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  std::ifstream in(dir / "errors_by_length.csv");
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 9);
  fs::remove_all(dir);
}
