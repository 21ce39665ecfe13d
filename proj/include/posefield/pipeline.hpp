#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "posefield/avg.hpp"
#include "posefield/depth.hpp"
#include "posefield/diff.hpp"
#include "posefield/field.hpp"
#include "posefield/geom.hpp"
#include "posefield/io.hpp"
#include "posefield/mra.hpp"
#include "posefield/viewgraph.hpp"

namespace posefield {

// Loss-balance and iteration schedule for joint training.
// lambda(t) = max(lambda0 * exp(-k_decay * t), lambda_floor). When k_decay <= 0
// it is derived so the floor is reached at 30% of total_iters. When
// warmup_steps < 0 it resolves to 10% of total_iters.
struct ScheduleConfig {
  double lambda0 = 1.0;
  double k_decay = 0.0;
  double lambda_floor = 0.5;
  int warmup_steps = -1;
  int alternation_block = 50;  // K pose steps alternate with K network steps
  int total_iters = 1500;
  int batch_rays = 96;
};

double resolved_k_decay(const ScheduleConfig& cfg);
int resolved_warmup(const ScheduleConfig& cfg);
double lambda_at(const ScheduleConfig& cfg, int step);

// A self-contained training scene: images plus (optional) per-frame depth,
// initial pose estimates, optional ground truth, and measured pairwise
// rotations among training frames.
struct ScenePackage {
  std::vector<Image> images;
  std::vector<DepthMap> depths;  // empty, or one per frame
  CameraIntrinsics intrinsics{1.0, 1.0, 0.0, 0.0};
  std::vector<RigidTransform> poses;     // initial estimates, world->camera
  std::vector<RigidTransform> gt_poses;  // empty when unknown
  std::vector<char> is_test;             // empty = all frames train
  std::vector<PoseGraphEdgeRecord> pose_graph;
  double near = 1.0;
  double far = 3.5;
};

void validate_scene(const ScenePackage& scene);
std::vector<int> train_views(const ScenePackage& scene);
std::vector<int> test_views(const ScenePackage& scene);

// Procedural test scene: 3-5 shaded opaque spheres inside the unit box viewed
// from a ring of inward-looking cameras. Images are 2x2-supersampled analytic
// ray casts; depth maps hold exact z-depth at pixel centers (invalid on
// background). The pose graph carries ring+chord edges among training frames
// with rotation measurement noise; relative translations are exact.
struct ToySceneConfig {
  int n_views = 12;
  int n_test = 0;
  int width = 32;
  int height = 32;
  double focal = 48.0;
  int n_spheres = 4;
  double pose_noise_deg = 5.0;    // per-axis std of the initial-estimate noise
  double pose_noise_trans = 0.0;  // std of translation noise on estimates
  double edge_noise_deg = 2.0;    // per-axis std on measured edge rotations
  bool with_depth = true;
  std::uint64_t seed = 0;
};

ScenePackage make_toy_scene(const ToySceneConfig& cfg);

// Applies independent axis-angle noise (per-axis variance rot_cov) and
// translation noise (std trans_std) to every pose. Zero covariance leaves the
// rotations bit-identical; zero trans_std leaves translations bit-identical.
std::vector<RigidTransform> perturb_poses(const std::vector<RigidTransform>& poses,
                                          double rot_cov, double trans_std,
                                          std::uint64_t seed);

// Random orientations with zero translations, for from-scratch runs.
std::vector<RigidTransform> random_poses(int n, std::uint64_t seed);

struct JointConfig {
  ScheduleConfig schedule;
  FieldConfig field;
  RenderConfig render;
  MpnnConfig mpnn;
  MraLossConfig mra_loss;
  double lr = 5e-4;
  double lr_end = 5e-5;
  double weight_decay = 0.0;
  double coarse_weight = 0.1;
  double clean_threshold_deg = 25.0;  // cycle filter on the measured graph
  double chamfer_step = 0.5;          // initial pose-update step size
  int chamfer_long_range = 2;         // random extra cloud pairs per frame
  int cloud_cap = 2048;               // max points per unprojected cloud
  int depth_pixels = 64;              // depth-residual samples per network step
  bool warmup_alpha_beta = false;     // also fit depth alignment in phase 1
  bool anneal_encoding = true;        // coarse-to-fine IPE over first 30%
  double focal_jitter = 0.2;          // e2e: f0 = width * (1 + jitter * u)
  std::uint64_t seed = 0;
  std::string out_dir;  // when set: metrics CSV, checkpoint, pose JSON
};

struct JointResult {
  std::vector<RigidTransform> poses;    // refined poses, one per frame
  std::vector<RigidTransform> anchors;  // final anchor estimates (P-hat)
  double initial_rot_err_deg = 0.0;     // vs gt, gauge-aligned (train frames)
  double warmup_rot_err_deg = -1.0;     // after phase 1 (bootstrap modes only)
  double final_rot_err_deg = 0.0;
  double train_psnr = 0.0;  // mean full-frame PSNR over train views
  double focal_fx = 0.0;    // learned intrinsics (e2e runs)
  double focal_fy = 0.0;
  int steps_run = 0;
  bool aborted = false;
  std::string abort_reason;
  std::string metrics_csv;  // per-window training metrics
};

// Joint pose + field training: anchors stay at the scene estimates, the graph
// network refines them, and loss weights follow lambda(t) (rotation loss) vs
// 1 - lambda(t) (photometric loss).
JointResult train_joint(const ScenePackage& scene, const JointConfig& cfg,
                        diff::ParamStore& store);

// Depth-prior bootstrap: phase 1 aligns anchors by chamfer alone, phase 2
// alternates K chamfer anchor updates with K equally weighted network steps.
JointResult train_joint_nopose(const ScenePackage& scene, const JointConfig& cfg,
                               diff::ParamStore& store);

// As train_joint_nopose, but focal length is a trainable parameter: phase 1
// lets depth and photometric losses drive it, phase 2 photometric only.
JointResult train_joint_e2e(const ScenePackage& scene, const JointConfig& cfg,
                            diff::ParamStore& store);

// Control run: field only, poses frozen at the scene estimates.
JointResult train_field_frozen(const ScenePackage& scene, const JointConfig& cfg,
                               diff::ParamStore& store);

// Renders a full frame from the trained field (no gradients). Optional z-depth
// output; rng drives stratified quadrature jitter.
Image render_frame(diff::ParamStore& store, const FieldConfig& cfg,
                   const std::string& prefix, const RigidTransform& pose,
                   const CameraIntrinsics& k, int width, int height,
                   const RenderConfig& rc, Rng& rng, Image* depth_out = nullptr);

struct EvalRow {
  int view = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double rot_err_mean_deg = 0.0;  // vs gt after gauge alignment (when known)
  double rot_err_rms_deg = 0.0;
  double center_err_mean = 0.0;
  std::string csv;  // one row per view plus an aggregate row
};

EvalReport run_eval(const ScenePackage& scene, diff::ParamStore& store,
                    const JointConfig& cfg, const std::vector<RigidTransform>& poses,
                    const std::vector<int>& views, std::uint64_t seed);

}  // namespace posefield
