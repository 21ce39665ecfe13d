#pragma once

#include <utility>
#include <vector>

#include "posefield/diff.hpp"
#include "posefield/geom.hpp"

namespace posefield {

// Monocular depth with a per-image positive-scale/shift alignment; the scale
// is stored as log_alpha so alpha = exp(log_alpha) can never go nonpositive.
struct DepthMap {
  int width = 0, height = 0;
  std::vector<double> values;  // row-major
  std::vector<char> valid;     // empty means every pixel is valid
  double log_alpha = 0.0;
  double beta = 0.0;

  double& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
  bool is_valid(int x, int y) const {
    return valid.empty() || valid[static_cast<size_t>(y) * width + x] != 0;
  }
};

enum class Frame { Camera, World };

struct PointCloud {
  std::vector<Vec3> points;
  Frame frame = Frame::Camera;
};

// alpha * D + beta over every pixel (the mask travels separately).
std::vector<double> transform_depth(const DepthMap& d);
int transform_depth(diff::Tape& tape, int depth_values, int log_alpha, int beta);

// L2 norm of the transformed-vs-rendered gap over jointly valid pixels; the
// rendered map's own alignment fields are ignored. Throws when the shapes
// differ or no pixel is valid on both sides.
double loss_depth(const DepthMap& d, const DepthMap& rendered);
int loss_depth(diff::Tape& tape, int dstar, int rendered);

// Camera-frame unprojection of the transformed depth at pixel centers,
// skipping masked pixels and nonpositive transformed depths.
PointCloud unproject(const DepthMap& d, const CameraIntrinsics& K);
PointCloud to_world(const PointCloud& cloud, const RigidTransform& pose);
PointCloud subsample_cloud(const PointCloud& cloud, int max_points, Rng& rng);

// Symmetric chamfer: the average over both directions of the mean squared
// nearest-neighbor distance (single points at distance r score r^2).
double chamfer(const PointCloud& a, const PointCloud& b);

// Sum of chamfer(T_j T_i^-1 P_i, P_j) over the pair list; clouds are
// camera-frame, poses world-to-camera.
double pairwise_chamfer(const std::vector<RigidTransform>& poses,
                        const std::vector<PointCloud>& clouds,
                        const std::vector<std::pair<int, int>>& pairs);

// One descent step on all poses: gradients through frozen nearest-neighbor
// matches, left-increment rotation parameterization, and a halving line
// search so the re-matched objective never increases.
std::vector<RigidTransform> update_pose_chamfer(const std::vector<RigidTransform>& poses,
                                                const std::vector<PointCloud>& clouds,
                                                const std::vector<std::pair<int, int>>& pairs,
                                                double step,
                                                double* chamfer_before = nullptr,
                                                double* chamfer_after = nullptr);

}  // namespace posefield
