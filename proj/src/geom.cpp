#include "posefield/geom.hpp"

#include <cmath>

#include <Eigen/Geometry>

namespace posefield {

namespace {

uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  // 53-bit mantissa; never returns 1.0.
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * kPi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  // Rejection-free modulo bias is negligible for the small n used here, but
  // keep it exact anyway.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
  uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<int>(v % static_cast<uint64_t>(n));
}

Rng Rng::fork(uint64_t stream) {
  return Rng(hash_combine(next_u64(), stream));
}

uint64_t hash_combine(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  return splitmix64(s);
}

UnitQuaternion::UnitQuaternion(double w_, double x_, double y_, double z_)
    : w(w_), x(x_), y(y_), z(z_) {
  *this = normalized();
}

double UnitQuaternion::norm_error() const {
  return std::abs(std::sqrt(w * w + x * x + y * y + z * z) - 1.0);
}

UnitQuaternion UnitQuaternion::normalized() const {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 0.0) || !std::isfinite(n))
    throw std::invalid_argument("quaternion with non-normalizable magnitude");
  // Pass through already-unit values exactly so serialize/parse cycles are byte-stable.
  double s = std::abs(n - 1.0) <= 1e-12 ? 1.0 : 1.0 / n;
  if (w < 0.0 || (w == 0.0 && (x < 0.0 || (x == 0.0 && (y < 0.0 || (y == 0.0 && z < 0.0))))))
    s = -s;  // canonical hemisphere, deterministic on the w = 0 boundary
  UnitQuaternion q;
  q.w = w * s;
  q.x = x * s;
  q.y = y * s;
  q.z = z * s;
  return q;
}

UnitQuaternion UnitQuaternion::conjugate() const {
  UnitQuaternion q;
  q.w = w;
  q.x = -x;
  q.y = -y;
  q.z = -z;
  return q.normalized();
}

UnitQuaternion UnitQuaternion::operator*(const UnitQuaternion& r) const {
  UnitQuaternion q;
  q.w = w * r.w - x * r.x - y * r.y - z * r.z;
  q.x = w * r.x + x * r.w + y * r.z - z * r.y;
  q.y = w * r.y - x * r.z + y * r.w + z * r.x;
  q.z = w * r.z + x * r.y - y * r.x + z * r.w;
  return q.normalized();
}

Vec3 UnitQuaternion::rotate(const Vec3& v) const {
  const Vec3 u(x, y, z);
  const Vec3 t = 2.0 * u.cross(v);
  return v + w * t + u.cross(t);
}

Mat3 UnitQuaternion::to_matrix() const {
  Mat3 m;
  const double xx = x * x, yy = y * y, zz = z * z;
  const double xy = x * y, xz = x * z, yz = y * z;
  const double wx = w * x, wy = w * y, wz = w * z;
  m << 1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
       2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
       2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy);
  return m;
}

UnitQuaternion UnitQuaternion::from_matrix(const Mat3& m) {
  // Shepperd's method: pick the largest diagonal combination for stability.
  UnitQuaternion q;
  const double tr = m.trace();
  if (tr > 0.0) {
    double s = std::sqrt(tr + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (m(2, 1) - m(1, 2)) / s;
    q.y = (m(0, 2) - m(2, 0)) / s;
    q.z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    q.w = (m(2, 1) - m(1, 2)) / s;
    q.x = 0.25 * s;
    q.y = (m(0, 1) + m(1, 0)) / s;
    q.z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    q.w = (m(0, 2) - m(2, 0)) / s;
    q.x = (m(0, 1) + m(1, 0)) / s;
    q.y = 0.25 * s;
    q.z = (m(1, 2) + m(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    q.w = (m(1, 0) - m(0, 1)) / s;
    q.x = (m(0, 2) + m(2, 0)) / s;
    q.y = (m(1, 2) + m(2, 1)) / s;
    q.z = 0.25 * s;
  }
  return q.normalized();
}

UnitQuaternion UnitQuaternion::exp_map(const Vec3& v) {
  const double theta = v.norm();
  UnitQuaternion q;
  double k;  // sin(theta/2) / theta
  if (theta < 1e-8) {
    k = 0.5 - theta * theta / 48.0;
    q.w = 1.0 - theta * theta / 8.0;
  } else {
    k = std::sin(0.5 * theta) / theta;
    q.w = std::cos(0.5 * theta);
  }
  q.x = k * v.x();
  q.y = k * v.y();
  q.z = k * v.z();
  return q.normalized();
}

Vec3 UnitQuaternion::log_map() const {
  UnitQuaternion q = normalized();  // w >= 0, so angle lands in [0, pi]
  const Vec3 u(q.x, q.y, q.z);
  const double s = u.norm();
  if (s < 1e-12) return 2.0 * u;  // first-order, w ~= 1
  const double theta = 2.0 * std::atan2(s, q.w);
  return (theta / s) * u;
}

double UnitQuaternion::angle() const {
  UnitQuaternion q = normalized();
  const double s = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
  return 2.0 * std::atan2(s, std::abs(q.w));
}

double UnitQuaternion::dot(const UnitQuaternion& r) const {
  return w * r.w + x * r.x + y * r.y + z * r.z;
}

double dq_distance(const UnitQuaternion& p_in, const UnitQuaternion& q_in) {
  const UnitQuaternion p = p_in.norm_error() > 1e-9 ? p_in.normalized() : p_in;
  const UnitQuaternion q = q_in.norm_error() > 1e-9 ? q_in.normalized() : q_in;
  const double dm = std::sqrt((p.w - q.w) * (p.w - q.w) + (p.x - q.x) * (p.x - q.x) +
                              (p.y - q.y) * (p.y - q.y) + (p.z - q.z) * (p.z - q.z));
  const double dp = std::sqrt((p.w + q.w) * (p.w + q.w) + (p.x + q.x) * (p.x + q.x) +
                              (p.y + q.y) * (p.y + q.y) + (p.z + q.z) * (p.z + q.z));
  return std::min(dm, dp);
}

double geodesic_angle(const Mat3& r1, const Mat3& r2) {
  const double c = ((r1.transpose() * r2).trace() - 1.0) * 0.5;
  if (c > 1.0 + 1e-6 || c < -1.0 - 1e-6)
    throw std::invalid_argument("geodesic_angle: inputs are not rotations");
  return std::acos(std::clamp(c, -1.0, 1.0));
}

double geodesic_angle(const UnitQuaternion& q1, const UnitQuaternion& q2) {
  // atan2 of the relative quaternion stays accurate near 0 and pi, where
  // 2*acos|dot| loses half the significant digits.
  const UnitQuaternion r = q1.conjugate() * q2;
  const double s = std::sqrt(r.x * r.x + r.y * r.y + r.z * r.z);
  return 2.0 * std::atan2(s, std::abs(r.w));
}

UnitQuaternion sample_axis_angle_noise(double per_axis_variance, Rng& rng) {
  if (per_axis_variance < 0.0)
    throw std::invalid_argument("sample_axis_angle_noise: negative variance");
  const double s = std::sqrt(per_axis_variance);
  // Draw even when s == 0 so the stream advances identically.
  const Vec3 delta(s * rng.normal(), s * rng.normal(), s * rng.normal());
  if (per_axis_variance == 0.0) return UnitQuaternion::identity();
  return UnitQuaternion::exp_map(delta);
}

UnitQuaternion random_rotation(Rng& rng) {
  double c[4];
  double n2 = 0.0;
  do {
    n2 = 0.0;
    for (double& v : c) {
      v = rng.normal();
      n2 += v * v;
    }
  } while (n2 < 1e-12);
  return UnitQuaternion(c[0], c[1], c[2], c[3]);
}

Vec3 RigidTransform::apply(const Vec3& p) const {
  return rotation.rotate(p) + translation;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.conjugate();
  inv.translation = -inv.rotation.rotate(translation);
  return inv;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  RigidTransform out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation.rotate(rhs.translation) + translation;
  return out;
}

Vec3 RigidTransform::camera_center() const {
  return -rotation.conjugate().rotate(translation);
}

CameraIntrinsics::CameraIntrinsics(double fx_, double fy_, double cx_, double cy_)
    : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
  if (fx <= 0.0 || fy <= 0.0)
    throw std::invalid_argument("intrinsics: focal lengths must be positive");
}

Eigen::Vector2d project(const Vec3& point, const RigidTransform& pose,
                        const CameraIntrinsics& k) {
  const Vec3 c = pose.apply(point);
  if (c.z() <= 1e-12)
    throw BehindCameraError("project: point at or behind the camera plane");
  return {k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy};
}

Vec3 unproject(const Eigen::Vector2d& pixel, double depth,
               const RigidTransform& pose, const CameraIntrinsics& k) {
  if (depth <= 0.0) throw std::invalid_argument("unproject: depth must be positive");
  const Vec3 cam((pixel.x() - k.cx) / k.fx * depth,
                 (pixel.y() - k.cy) / k.fy * depth, depth);
  return pose.inverse().apply(cam);
}

}  // namespace posefield
