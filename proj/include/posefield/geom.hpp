#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

namespace posefield {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Deterministic generator: splitmix64 stream with hand-rolled distributions, so
// identical seeds give identical bytes independent of the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // N(0, 1), Box-Muller
  int uniform_int(int n);                // [0, n)
  // Derives an independent child stream; advances this stream by one draw.
  Rng fork(uint64_t stream);

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t hash_combine(uint64_t a, uint64_t b);

class BehindCameraError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unit quaternion (w, x, y, z). q and -q encode the same rotation; constructors
// and normalization canonicalize to w >= 0 so serialization is stable.
struct UnitQuaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  UnitQuaternion() = default;
  UnitQuaternion(double w_, double x_, double y_, double z_);

  static UnitQuaternion identity() { return {}; }
  static UnitQuaternion from_matrix(const Mat3& m);
  // Axis-angle exponential; Taylor branch below 1e-8 removes the 0/0.
  static UnitQuaternion exp_map(const Vec3& axis_angle);

  double norm_error() const;  // | ||q|| - 1 |
  UnitQuaternion normalized() const;
  UnitQuaternion conjugate() const;
  UnitQuaternion operator*(const UnitQuaternion& rhs) const;  // Hamilton product
  Vec3 rotate(const Vec3& v) const;
  Mat3 to_matrix() const;
  Vec3 log_map() const;  // axis-angle, angle in [0, pi]
  double angle() const;  // rotation angle in [0, pi]
  double dot(const UnitQuaternion& rhs) const;
};

// min(||p-q||, ||p+q||): chordal metric on the quaternion double cover.
// Range [0, sqrt(2)]; zero iff p and q are the same rotation.
double dq_distance(const UnitQuaternion& p, const UnitQuaternion& q);

// arccos((trace(R1^T R2) - 1) / 2), clamped into [0, pi]. Arguments drifting
// outside [-1, 1] by more than 1e-6 raise.
double geodesic_angle(const Mat3& r1, const Mat3& r2);
double geodesic_angle(const UnitQuaternion& q1, const UnitQuaternion& q2);

// delta ~ N(0, per_axis_variance * I) in axis-angle space, exponentiated.
UnitQuaternion sample_axis_angle_noise(double per_axis_variance, Rng& rng);

// Uniform on SO(3) via 4-sphere sampling.
UnitQuaternion random_rotation(Rng& rng);

// World-to-camera map: x_cam = R x_world + t.
struct RigidTransform {
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  Vec3 apply(const Vec3& p) const;
  RigidTransform inverse() const;
  // (a * b)(x) = a(b(x)).
  RigidTransform operator*(const RigidTransform& rhs) const;
  Vec3 camera_center() const;  // -R^T t
};

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  CameraIntrinsics() = default;
  CameraIntrinsics(double fx_, double fy_, double cx_, double cy_);
};

// s [u, v, 1]^T = K [R | t] [x, y, z, 1]^T; throws BehindCameraError if the
// transformed depth is not positive.
Eigen::Vector2d project(const Vec3& point, const RigidTransform& pose,
                        const CameraIntrinsics& k);

// Inverse of project at the given camera depth; returns a world point.
Vec3 unproject(const Eigen::Vector2d& pixel, double depth,
               const RigidTransform& pose, const CameraIntrinsics& k);

constexpr double kPi = 3.14159265358979323846;
inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

}  // namespace posefield
