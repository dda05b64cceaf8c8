#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pwclo/geom.hpp"

namespace pwclo::eval {

/// Absolute poses (frame -> world) with cumulative arc length.
struct Trajectory {
  std::vector<geom::Transform4> poses;
  std::vector<double> arc_length;

  std::size_t size() const { return poses.size(); }
  /// Computes arc lengths from the translation path.
  static Trajectory from_poses(std::vector<geom::Transform4> poses);
};

/// P_0 = I, P_{k+1} = P_k * T_k^-1, where T_k maps frame-k coordinates into
/// frame k+1 (the relative_gt convention). Throws on an empty list.
Trajectory accumulate(std::span<const geom::Pose> relatives);

/// Relative pose between consecutive frames of a trajectory, inverse of accumulate.
std::vector<geom::Pose> relatives_of(const Trajectory& traj);

inline const std::vector<double> kDefaultLengths{100, 200, 300, 400, 500, 600, 700, 800};

struct LengthError {
  double length = 0;
  double t_err = 0;  ///< percent
  double r_err = 0;  ///< degrees per 100 m
  std::size_t count = 0;
};

struct TrajectoryMetrics {
  double t_rel = 0;  ///< percent
  double r_rel = 0;  ///< degrees per 100 m
  std::vector<LengthError> per_length;  ///< only lengths with at least one subsequence
  bool insufficient_length = false;
};

TrajectoryMetrics kitti_errors(const Trajectory& estimated, const Trajectory& ground_truth,
                               const std::vector<double>& lengths = kDefaultLengths);

/// 12 values per line, row-major 3x4, at 17 significant digits by default.
void write_kitti_trajectory(std::ostream& out, const Trajectory& traj, int precision = 17);
void save_kitti_trajectory(const std::string& path, const Trajectory& traj, int precision = 17);
Trajectory load_kitti_trajectory(const std::string& path);

// Plot tables. Column layouts are fixed:
//   path3d:   frame,x,y,z
//   path2d:   frame,x,z
//   errors:   length,t_err_pct,r_err_deg_per_100m,count
//   mask:     x,y,z,weight
inline constexpr const char* kPath3dHeader = "frame,x,y,z";
inline constexpr const char* kPath2dHeader = "frame,x,z";
inline constexpr const char* kErrorsHeader = "length,t_err_pct,r_err_deg_per_100m,count";

void write_path3d_csv(std::ostream& out, const Trajectory& traj);
void write_path2d_csv(std::ostream& out, const Trajectory& traj);
void write_errors_csv(std::ostream& out, const TrajectoryMetrics* metrics);

struct NamedTrajectory {
  std::string name;
  const Trajectory* trajectory = nullptr;
};

struct EmitReport {
  std::vector<std::string> written;
  std::vector<std::string> failures;  ///< "<file>: <reason>"
};

/// Writes <name>_path3d.csv / <name>_path2d.csv per trajectory and errors_by_length.csv.
EmitReport emit_plot_data(std::span<const NamedTrajectory> trajectories, const TrajectoryMetrics* metrics,
                          const std::string& out_dir);

}  // namespace pwclo::eval
