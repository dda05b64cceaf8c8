#include "pwclo/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "pwclo/kittio.hpp"

namespace pwclo::eval {

using geom::Transform4;
using geom::operator-;

Trajectory Trajectory::from_poses(std::vector<Transform4> poses) {
  Trajectory t;
  t.poses = std::move(poses);
  t.arc_length.assign(t.poses.size(), 0.0);
  for (std::size_t i = 1; i < t.poses.size(); ++i) {
    t.arc_length[i] = t.arc_length[i - 1] + geom::norm(t.poses[i].translation() - t.poses[i - 1].translation());
  }
  return t;
}

Trajectory accumulate(std::span<const geom::Pose> relatives) {
  if (relatives.empty()) throw std::invalid_argument("accumulate needs at least one relative pose");
  std::vector<Transform4> abs;
  abs.reserve(relatives.size() + 1);
  abs.push_back(Transform4::identity());
  for (const auto& rel : relatives) abs.push_back(abs.back() * geom::pose_to_matrix(rel).inverse());
  return Trajectory::from_poses(std::move(abs));
}

std::vector<geom::Pose> relatives_of(const Trajectory& traj) {
  std::vector<geom::Pose> out;
  for (std::size_t i = 0; i + 1 < traj.size(); ++i) out.push_back(kitti::relative_gt(traj.poses[i], traj.poses[i + 1]));
  return out;
}

namespace {

// atan2 form keeps full precision near zero, where acos of the trace loses half the digits.
double rotation_error(const Transform4& e) {
  const double c = 0.5 * (e(0, 0) + e(1, 1) + e(2, 2) - 1.0);
  const double s = 0.5 * std::hypot(e(2, 1) - e(1, 2), e(0, 2) - e(2, 0), e(1, 0) - e(0, 1));
  return std::atan2(s, c);
}

}  // namespace

TrajectoryMetrics kitti_errors(const Trajectory& est, const Trajectory& gt, const std::vector<double>& lengths) {
  if (est.size() != gt.size()) {
    throw std::invalid_argument("trajectory length mismatch: " + std::to_string(est.size()) + " vs " +
                                std::to_string(gt.size()));
  }
  TrajectoryMetrics m;
  const std::size_t n = gt.size();
  for (double len : lengths) {
    LengthError le;
    le.length = len;
    double t_sum = 0, r_sum = 0;
    std::size_t last = 0;  // endpoints are monotone in the start frame
    for (std::size_t first = 0; first < n; ++first) {
      last = std::max(last, first);
      const double target = gt.arc_length[first] + len;
      while (last < n && !(gt.arc_length[last] > target)) ++last;
      if (last == n) break;
      const Transform4 gt_rel = gt.poses[first].inverse() * gt.poses[last];
      const Transform4 est_rel = est.poses[first].inverse() * est.poses[last];
      const Transform4 e = gt_rel.inverse() * est_rel;
      t_sum += geom::norm(e.translation()) / len;
      r_sum += rotation_error(e) / len;
      ++le.count;
    }
    if (le.count == 0) continue;
    le.t_err = 100.0 * t_sum / static_cast<double>(le.count);
    le.r_err = 100.0 * (180.0 / std::numbers::pi) * r_sum / static_cast<double>(le.count);
    m.per_length.push_back(le);
  }
  if (m.per_length.empty()) {
    m.insufficient_length = true;
    return m;
  }
  for (const auto& le : m.per_length) {
    m.t_rel += le.t_err;
    m.r_rel += le.r_err;
  }
  m.t_rel /= static_cast<double>(m.per_length.size());
  m.r_rel /= static_cast<double>(m.per_length.size());
  return m;
}

void write_kitti_trajectory(std::ostream& out, const Trajectory& traj, int precision) {
  const auto flags = out.flags();
  const auto prec = out.precision();
  out << std::setprecision(precision);
  for (const auto& p : traj.poses) {
    const auto b = p.to_3x4();
    for (std::size_t i = 0; i < 12; ++i) out << (i ? " " : "") << b[i];
    out << '\n';
  }
  out.flags(flags);
  out.precision(prec);
}

void save_kitti_trajectory(const std::string& path, const Trajectory& traj, int precision) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_kitti_trajectory(out, traj, precision);
  if (!out) throw std::runtime_error("write failed: " + path);
}

Trajectory load_kitti_trajectory(const std::string& path) { return Trajectory::from_poses(kitti::read_poses(path)); }

void write_path3d_csv(std::ostream& out, const Trajectory& traj) {
  out << kPath3dHeader << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const auto t = traj.poses[i].translation();
    out << i << ',' << t[0] << ',' << t[1] << ',' << t[2] << '\n';
  }
}

void write_path2d_csv(std::ostream& out, const Trajectory& traj) {
  out << kPath2dHeader << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const auto t = traj.poses[i].translation();
    out << i << ',' << t[0] << ',' << t[2] << '\n';
  }
}

void write_errors_csv(std::ostream& out, const TrajectoryMetrics* metrics) {
  out << kErrorsHeader << '\n';
  if (!metrics) return;
  out << std::setprecision(17);
  for (const auto& le : metrics->per_length) {
    out << le.length << ',' << le.t_err << ',' << le.r_err << ',' << le.count << '\n';
  }
}

EmitReport emit_plot_data(std::span<const NamedTrajectory> trajectories, const TrajectoryMetrics* metrics,
                          const std::string& out_dir) {
  namespace fs = std::filesystem;
  EmitReport report;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  auto emit = [&](const std::string& name, auto&& body) {
    const std::string path = (fs::path(out_dir) / name).string();
    std::ofstream out(path);
    if (!out) {
      report.failures.push_back(path + ": cannot open");
      return;
    }
    body(out);
    out.flush();
    if (!out) {
      report.failures.push_back(path + ": write failed");
      return;
    }
    report.written.push_back(path);
  };
  for (const auto& nt : trajectories) {
    emit(nt.name + "_path3d.csv", [&](std::ostream& o) { write_path3d_csv(o, *nt.trajectory); });
    emit(nt.name + "_path2d.csv", [&](std::ostream& o) { write_path2d_csv(o, *nt.trajectory); });
  }
  emit("errors_by_length.csv", [&](std::ostream& o) { write_errors_csv(o, metrics); });
  return report;
}

}  // namespace pwclo::eval
