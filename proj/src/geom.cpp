#include "pwclo/geom.hpp"

#include <algorithm>
#include <stdexcept>

namespace pwclo::geom {

namespace {
// Inputs this close to unit norm are returned untouched so that
// normalization is idempotent bit-for-bit.
constexpr double kUnitSlack = 1e-14;
}  // namespace

Quaternion Quaternion::from_axis_angle(const Vec3& axis, double angle) {
  const double n = geom::norm(axis);
  if (n == 0.0) throw std::domain_error("rotation axis has zero length");
  const double s = std::sin(angle / 2) / n;
  return {std::cos(angle / 2), axis[0] * s, axis[1] * s, axis[2] * s};
}

Quaternion Quaternion::normalized() const {
  const double n = norm();
  if (n == 0.0 || !std::isfinite(n)) throw std::domain_error("cannot normalize a zero or non-finite quaternion");
  if (std::fabs(n - 1.0) <= kUnitSlack) return *this;
  return {w / n, x / n, y / n, z / n};
}

Quaternion Quaternion::inverse() const {
  const double n2 = w * w + x * x + y * y + z * z;
  if (n2 == 0.0) throw std::domain_error("cannot invert a zero quaternion");
  return {w / n2, -x / n2, -y / n2, -z / n2};
}

Quaternion Quaternion::canonical() const {
  const double comps[4] = {w, x, y, z};
  for (double c : comps) {
    if (c > 0.0) return *this;
    if (c < 0.0) return {-w, -x, -y, -z};
  }
  return *this;
}

Quaternion quat_mul(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,  //
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,  //
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,  //
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Vec3 rotate_point(const Quaternion& q, const Vec3& t, const Vec3& p) {
  const Quaternion u = q.normalized();
  const Quaternion r = u * Quaternion{0.0, p[0], p[1], p[2]} * u.conjugate();
  return {r.x + t[0], r.y + t[1], r.z + t[2]};
}

double rotation_angle(const Quaternion& q) {
  const Quaternion u = q.normalized();
  const double v = std::sqrt(u.x * u.x + u.y * u.y + u.z * u.z);
  return 2.0 * std::atan2(v, std::fabs(u.w));
}

double angular_distance(const Quaternion& a, const Quaternion& b) {
  return rotation_angle(a.normalized().conjugate() * b.normalized());
}

Quaternion euler_to_quat(double yaw, double pitch, double roll) {
  const Quaternion qz = Quaternion::from_axis_angle({0, 0, 1}, yaw);
  const Quaternion qy = Quaternion::from_axis_angle({0, 1, 0}, pitch);
  const Quaternion qx = Quaternion::from_axis_angle({1, 0, 0}, roll);
  return (qz * qy * qx).normalized().canonical();
}

// ---------------------------------------------------------------------------

Transform4 Transform4::from_3x4(const std::array<double, 12>& rows) {
  Transform4 t;
  std::copy(rows.begin(), rows.end(), t.m.begin());
  t.m[12] = 0, t.m[13] = 0, t.m[14] = 0, t.m[15] = 1;
  return t;
}

std::array<double, 12> Transform4::to_3x4() const {
  std::array<double, 12> out{};
  std::copy(m.begin(), m.begin() + 12, out.begin());
  return out;
}

Vec3 Transform4::apply(const Vec3& p) const {
  return {m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],  //
          m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],  //
          m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11]};
}

Transform4 Transform4::inverse() const {
  Transform4 inv;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) inv(r, c) = (*this)(c, r);
  const Vec3 t = translation();
  for (int r = 0; r < 3; ++r) inv(r, 3) = -(inv(r, 0) * t[0] + inv(r, 1) * t[1] + inv(r, 2) * t[2]);
  return inv;
}

double Transform4::orthonormality_error() const {
  double err = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += (*this)(k, i) * (*this)(k, j);
      err = std::max(err, std::fabs(s - (i == j ? 1.0 : 0.0)));
    }
  }
  return err;
}

Transform4 operator*(const Transform4& a, const Transform4& b) {
  Transform4 c;
  for (int r = 0; r < 4; ++r) {
    for (int col = 0; col < 4; ++col) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a(r, k) * b(k, col);
      c(r, col) = s;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------

Pose::Pose(const Quaternion& q, const Vec3& t) : q_(q.normalized().canonical()), t_(t) {}

Pose pose_compose(const Pose& delta, const Pose& coarse) {
  const Quaternion q = delta.q() * coarse.q();
  const Vec3 t = rotate_point(delta.q(), delta.t(), coarse.t());
  return Pose(q, t);
}

Pose pose_inverse(const Pose& p) {
  const Quaternion qi = p.q().conjugate();
  const Vec3 t = rotate(qi, p.t());
  return Pose(qi, {-t[0], -t[1], -t[2]});
}

Transform4 pose_to_matrix(const Pose& p) {
  const Quaternion& q = p.q();
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Transform4 t;
  t.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),     p.t()[0],
         2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),     p.t()[1],
         2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y), p.t()[2],
         0,                       0,                       0,                       1};
  return t;
}

Pose matrix_to_pose(const Transform4& t, double tolerance) {
  if (t.orthonormality_error() > tolerance) {
    throw std::invalid_argument("rotation block is not orthonormal");
  }
  const double r00 = t(0, 0), r11 = t(1, 1), r22 = t(2, 2);
  const double trace = r00 + r11 + r22;
  Quaternion q;
  // Shepperd: pick the largest of w, x, y, z to divide by.
  if (trace > std::max({r00, r11, r22})) {
    const double s = 2.0 * std::sqrt(1.0 + trace);
    q = {0.25 * s, (t(2, 1) - t(1, 2)) / s, (t(0, 2) - t(2, 0)) / s, (t(1, 0) - t(0, 1)) / s};
  } else if (r00 >= r11 && r00 >= r22) {
    const double s = 2.0 * std::sqrt(1.0 + r00 - r11 - r22);
    q = {(t(2, 1) - t(1, 2)) / s, 0.25 * s, (t(0, 1) + t(1, 0)) / s, (t(0, 2) + t(2, 0)) / s};
  } else if (r11 >= r22) {
    const double s = 2.0 * std::sqrt(1.0 + r11 - r00 - r22);
    q = {(t(0, 2) - t(2, 0)) / s, (t(0, 1) + t(1, 0)) / s, 0.25 * s, (t(1, 2) + t(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r22 - r00 - r11);
    q = {(t(1, 0) - t(0, 1)) / s, (t(0, 2) + t(2, 0)) / s, (t(1, 2) + t(2, 1)) / s, 0.25 * s};
  }
  return Pose(q, t.translation());
}

}  // namespace pwclo::geom
