#pragma once

#include <vector>

#include "posefield/geom.hpp"
#include "posefield/viewgraph.hpp"

namespace posefield {

struct RobustLossConfig {
  enum class Kind { L2, Huber, L1Approx };
  Kind kind = Kind::Huber;
  double scale = 0.05;  // d_Q units; must be > 0 for Huber
};

// d_Q value of a rotation by the given geodesic angle: 2 sin(theta/4).
inline double dq_of_angle(double radians) { return 2.0 * std::sin(radians / 4.0); }

double robust_rho(const RobustLossConfig& cfg, double d);
double robust_weight(const RobustLossConfig& cfg, double d);

double averaging_objective(const ViewGraph& g, const std::vector<UnitQuaternion>& est,
                           const RobustLossConfig& cfg);

struct IrlsResult {
  std::vector<UnitQuaternion> estimates;
  std::vector<double> objective_history;  // starts with the init objective
  int iterations = 0;
  bool converged = false;  // false only when max_iters hit with progress remaining
};

// Iteratively reweighted tangent-space Gauss-Newton on the robust d_Q objective.
// Accepted iterations never increase the objective (steps are halved on failure).
IrlsResult irls_rotation_averaging(const ViewGraph& g,
                                   const std::vector<UnitQuaternion>& init,
                                   const RobustLossConfig& cfg, int max_iters = 100,
                                   double tol = 1e-12);

struct TranslationSolution {
  std::vector<Vec3> translations;  // gauge: translations[root] = 0
  double residual = 0.0;           // L2 norm of the stacked constraint residual
};

// Least squares on t~_ij = t_j - R_ij t_i with R_ij = R_j R_i^-1 from the given
// absolute rotations. Throws if the system is rank-deficient beyond the fixed
// gauge, listing the null directions.
TranslationSolution solve_translations(const std::vector<UnitQuaternion>& rotations,
                                       const std::vector<Vec3>& relative_translations,
                                       const std::vector<std::pair<int, int>>& edge_list,
                                       int root = 0);

struct PoseAlignment {
  UnitQuaternion rotation;   // similarity: center_gt ~= scale * G * center_est + t
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();
  bool degenerate_scale = false;  // collinear/coincident centers; scale pinned to 1
  std::vector<double> rotation_errors_rad;
  std::vector<double> center_errors;
};

// Similarity alignment of camera centers (least squares), then per-pose errors.
PoseAlignment align_pose_sets(const std::vector<RigidTransform>& est,
                              const std::vector<RigidTransform>& gt);

// Best global right-gauge g minimizing sum d_Q(est_i * g, gt_i)^2 (eigenvector
// method over the quadratic surrogate).
UnitQuaternion align_rotation_sets(const std::vector<UnitQuaternion>& est,
                                   const std::vector<UnitQuaternion>& gt);

struct RotationSetErrors {
  double mean_rad = 0.0, median_rad = 0.0, rms_rad = 0.0, max_rad = 0.0;
};

RotationSetErrors rotation_set_errors(const std::vector<UnitQuaternion>& est,
                                      const std::vector<UnitQuaternion>& gt,
                                      const UnitQuaternion& gauge);

}  // namespace posefield
