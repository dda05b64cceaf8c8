#pragma once

#include <array>
#include <cmath>

namespace pwclo::geom {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/// Hamilton quaternion, scalar first.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  static Quaternion identity() { return {}; }
  static Quaternion from_axis_angle(const Vec3& axis, double angle);

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  /// Throws std::domain_error on zero norm.
  Quaternion normalized() const;
  Quaternion conjugate() const { return {w, -x, -y, -z}; }
  Quaternion inverse() const;
  /// Sign representative with w >= 0 (first non-zero component positive when w == 0).
  Quaternion canonical() const;

  bool operator==(const Quaternion&) const = default;
};

Quaternion quat_mul(const Quaternion& a, const Quaternion& b);
inline Quaternion operator*(const Quaternion& a, const Quaternion& b) { return quat_mul(a, b); }

/// q [0,p] q^-1 + t, with q normalized first.
Vec3 rotate_point(const Quaternion& q, const Vec3& t, const Vec3& p);
inline Vec3 rotate(const Quaternion& q, const Vec3& p) { return rotate_point(q, {0, 0, 0}, p); }

/// Rotation angle of a quaternion in radians, in [0, pi].
double rotation_angle(const Quaternion& q);
/// Angle of the relative rotation a^-1 b, radians.
double angular_distance(const Quaternion& a, const Quaternion& b);

/// Intrinsic Z-Y-X (yaw about z, then pitch about y, then roll about x).
Quaternion euler_to_quat(double yaw, double pitch, double roll);

/// Homogeneous 4x4 rigid transform, row-major.
struct Transform4 {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  static Transform4 identity() { return {}; }
  /// Homogenizes a row-major 3x4 block.
  static Transform4 from_3x4(const std::array<double, 12>& rows);
  std::array<double, 12> to_3x4() const;

  double operator()(int r, int c) const { return m[4 * r + c]; }
  double& operator()(int r, int c) { return m[4 * r + c]; }
  Vec3 translation() const { return {m[3], m[7], m[11]}; }
  Vec3 apply(const Vec3& p) const;
  /// Rigid inverse (assumes an orthonormal rotation block).
  Transform4 inverse() const;
  /// max |R^T R - I|.
  double orthonormality_error() const;

  bool operator==(const Transform4&) const = default;
};

Transform4 operator*(const Transform4& a, const Transform4& b);

/// Unit quaternion plus translation in meters. The quaternion is normalized and
/// sign-canonicalized on construction.
class Pose {
 public:
  Pose() = default;
  Pose(const Quaternion& q, const Vec3& t);

  static Pose identity() { return {}; }

  const Quaternion& q() const { return q_; }
  const Vec3& t() const { return t_; }
  Vec3 apply(const Vec3& p) const { return rotate_point(q_, t_, p); }

 private:
  Quaternion q_;
  Vec3 t_{0, 0, 0};
};

/// q = dq q_coarse, t = dq t_coarse dq^-1 + dt.
Pose pose_compose(const Pose& delta, const Pose& coarse);
Pose pose_inverse(const Pose& p);
Transform4 pose_to_matrix(const Pose& p);
/// Throws std::invalid_argument when the rotation block is not orthonormal within `tolerance`.
Pose matrix_to_pose(const Transform4& t, double tolerance = 1e-6);

}  // namespace pwclo::geom
