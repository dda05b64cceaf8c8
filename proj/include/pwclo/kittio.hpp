#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pwclo/geom.hpp"
#include "pwclo/pcops.hpp"

namespace pwclo::kitti {

/// Two consecutive frames and the pose mapping frame-1 coordinates into frame 2.
struct FramePair {
  pc::PointCloud pc1;
  pc::PointCloud pc2;
  geom::Pose gt;
  std::string sequence;
  std::size_t frame = 0;
};

struct Calibration {
  geom::Transform4 tr;  ///< Velodyne -> left camera
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses float32 (x, y, z, reflectance) records; reflectance is discarded and
/// records with non-finite coordinates are dropped (counted in `dropped`).
pc::PointCloud parse_velodyne(std::span<const unsigned char> bytes, std::size_t* dropped = nullptr);
pc::PointCloud read_velodyne_bin(const std::string& path, std::size_t* dropped = nullptr);

Calibration parse_calib(std::istream& in);
Calibration read_calib(const std::string& path);

/// One row-major 3x4 pose per line.
std::vector<geom::Transform4> parse_poses(std::istream& in);
std::vector<geom::Transform4> read_poses(const std::string& path);
/// Writes 12 values per line at 9 significant digits.
void write_poses(std::ostream& out, std::span<const geom::Transform4> poses);

struct PreprocessOptions {
  double half_width = 15.0;       ///< crop half-width on camera x and z, meters
  double sensor_height = 1.73;    ///< camera height above ground, meters
  double ground_clearance = 0.55; ///< points lower than this above ground are removed
};

pc::PointCloud transform_cloud(const pc::PointCloud& pc, const geom::Transform4& t);
pc::PointCloud warp_cloud(const pc::PointCloud& pc, const geom::Pose& pose);

/// Crop to the square around the vehicle and drop near-ground points
/// (camera y points down: keep y <= sensor_height - ground_clearance).
pc::PointCloud crop_and_remove_ground(const pc::PointCloud& pc, const PreprocessOptions& opts = {});
/// Velodyne frame -> camera frame, then crop_and_remove_ground.
pc::PointCloud preprocess(const pc::PointCloud& raw, const Calibration& calib, const PreprocessOptions& opts = {});

/// Pose taking frame-i coordinates into frame-j coordinates: pose_j^-1 * pose_i.
geom::Pose relative_gt(const geom::Transform4& pose_i, const geom::Transform4& pose_j);

struct AugmentSigmas {
  double rot_deg = 2.0;  ///< per Euler angle
  double trans_m = 0.1;  ///< per axis
};

geom::Transform4 draw_augmentation(const AugmentSigmas& sigmas, std::uint64_t seed);
/// Moves pc1 by a random rigid transform and updates gt so that warping the
/// new pc1 by gt still lands on pc2.
FramePair augment(const FramePair& pair, const AugmentSigmas& sigmas, std::uint64_t seed);

struct SynthOptions {
  std::size_t n_points = 512;
  double max_rot_deg = 10.0;
  double max_trans_m = 0.5;
  double noise_sigma = 0.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  /// Side of the square scene, meters. 7.5 m at 512 points matches the point
  /// density of 8192 points over the 30 m preprocessing crop.
  double extent_m = 7.5;
};

/// Planes plus clutter in a square around the sensor; pc2 is pc1 moved by a
/// random bounded pose, with optional noise and dropout.
FramePair synth_scene(const SynthOptions& opts);

// Synthetic dataset directory: index.txt plus one text point list per cloud.
void write_synth_dataset(const std::string& dir, std::span<const FramePair> pairs);
std::vector<FramePair> read_synth_dataset(const std::string& dir);

/// KITTI odometry layout: <root>/sequences/NN/{velodyne/FFFFFF.bin,calib.txt}, <root>/poses/NN.txt.
class KittiSequence {
 public:
  KittiSequence(std::string root, std::string sequence, PreprocessOptions opts = {});

  std::size_t frame_count() const { return frame_count_; }
  bool has_poses() const { return !poses_.empty(); }
  const std::vector<geom::Transform4>& poses() const { return poses_; }
  const Calibration& calibration() const { return calib_; }

  pc::PointCloud frame(std::size_t index) const;
  /// Frames index and index+1 with their relative ground truth (identity when no poses).
  FramePair pair(std::size_t index) const;

 private:
  std::string root_;
  std::string sequence_;
  PreprocessOptions opts_;
  Calibration calib_;
  std::vector<geom::Transform4> poses_;
  std::size_t frame_count_ = 0;
};

}  // namespace pwclo::kitti
