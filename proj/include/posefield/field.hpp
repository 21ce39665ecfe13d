#pragma once

#include <string>
#include <utility>
#include <vector>

#include "posefield/diff.hpp"
#include "posefield/geom.hpp"

namespace posefield {

// Cone slice along o + t*d for t in [t0, t1]; d need not be unit (pixel-cone
// convention: world radius at parameter t is radius_scale * t).
struct ConicalFrustum {
  Vec3 origin = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  double radius_scale = 1e-3;
  double t0 = 0.0, t1 = 1.0;
};

// Diagonal Gaussian in world axes approximating a frustum's uniform density.
struct GaussianRegion {
  Vec3 mean = Vec3::Zero();
  Vec3 cov = Vec3::Zero();
};

// Stable midpoint/half-width moments; zero-width frustums degenerate cleanly
// to a point mass. Throws on t1 < t0, t0 < 0, or radius_scale < 0.
GaussianRegion frustum_to_gaussian(const ConicalFrustum& f);

struct EncodingConfig {
  int octaves = 6;
  double anneal_t = 1e9;  // >= octaves-1 leaves all octaves fully open
  double slope_b = 10.0;
};

// Expected positional encoding under the region's Gaussian: per octave k and
// axis i, (sin, cos)(2^k mu_i) * exp(-4^k cov_i / 2); 6 * octaves entries,
// octave-major with sin triple before cos triple.
Eigen::VectorXd ipe_encode(const GaussianRegion& g, const EncodingConfig& cfg);

// exp(min((anneal_t - k) / slope_b, 0)): in (0, 1], equal to 1 iff t >= k.
double anneal_weight(int octave, const EncodingConfig& cfg);

// ipe_encode with each octave block scaled by its anneal weight.
Eigen::VectorXd annealed_encode(const GaussianRegion& g, const EncodingConfig& cfg);

struct FieldConfig {
  int layers = 4;
  int hidden = 128;
  EncodingConfig enc;
};

// MLP trunk on encoded positions plus softplus density and sigmoid color
// heads: <prefix>.trunk.w<l>/.b<l>, <prefix>.sigma.w/.b, <prefix>.rgb.w/.b.
void init_field_params(diff::ParamStore& store, const FieldConfig& cfg,
                       const std::string& prefix, Rng& rng);

struct RenderConfig {
  double near = 1.0, far = 3.5;
  int samples_per_level = 32;
  Vec3 background = Vec3::Zero();
  double depth_eps = 1e-10;  // weight-sum floor in the depth average
};

// Tape nodes of a two-level (coarse + fine) render; fine samples follow the
// inverse CDF of the coarse weights, taken as values so the sample placement
// acts as a stop-gradient.
struct RenderBatch {
  int color = -1;         // n x 3, fine level, background composited
  int depth = -1;         // n x 1, weight-averaged sample depth (t units)
  int weight_sum = -1;    // n x 1, fine level
  int coarse_color = -1;  // n x 3, for auxiliary supervision
};

// origins/dirs are n x 3 tape nodes so pose (and intrinsics) gradients can
// flow; radii are per-ray cone scales, fixed at build time. Samples are
// stratified in inverse depth with rng, one interval per sample.
RenderBatch render_rays(diff::Tape& tape, const FieldConfig& cfg, const std::string& prefix,
                        int origins, int dirs, const std::vector<double>& radii,
                        const RenderConfig& rc, Rng& rng);

// Emission-absorption quadrature along one ray with prescribed per-interval
// density and color; the reference implementation of the compositing math.
struct CompositeResult {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  double weight_sum = 0.0;
};
CompositeResult composite_samples(const std::vector<double>& density,
                                  const std::vector<Vec3>& color,
                                  const std::vector<double>& t_edges, double dir_norm,
                                  const RenderConfig& rc);

// Cone through pixel (px, py): origin at the camera center, axis scaled to
// unit z-depth in camera frame, radius from the pixel footprint.
ConicalFrustum pixel_cone(const RigidTransform& pose, const CameraIntrinsics& K,
                          double px, double py);
double pixel_radius(const CameraIntrinsics& K);

struct RayRender {
  Vec3 color = Vec3::Zero();
  double depth = 0.0;
  bool background_only = false;
};

// Single-pixel convenience render (values only).
RayRender render_ray(diff::ParamStore& store, const FieldConfig& cfg,
                     const std::string& prefix, const RigidTransform& pose,
                     const CameraIntrinsics& K, double px, double py,
                     const RenderConfig& rc, Rng& rng);

// Camera rays as tape nodes from a pose given as nodes (1x4 unit quaternion,
// 1x3 translation, world-to-camera). The focal overload takes a 1x2 (fx, fy)
// node so intrinsics receive rendering-loss gradients through the directions.
struct RayNodes {
  int origins = -1;  // n x 3
  int dirs = -1;     // n x 3, unit z-depth scaling in camera frame
};
RayNodes make_ray_nodes(diff::Tape& tape, int quat, int trans, const CameraIntrinsics& K,
                        const std::vector<std::pair<double, double>>& pixels);
RayNodes make_ray_nodes(diff::Tape& tape, int quat, int trans, int focal, double cx,
                        double cy, const std::vector<std::pair<double, double>>& pixels);

// Sum over rays of squared color error against constant targets.
int loss_rgb(diff::Tape& tape, int rendered_color, const std::vector<Vec3>& targets);

}  // namespace posefield
