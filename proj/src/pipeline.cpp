#include "posefield/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <Eigen/Geometry>

#include "posefield/metrics.hpp"

namespace posefield {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

double resolved_k_decay(const ScheduleConfig& cfg) {
  if (!(cfg.lambda_floor > 0.0 && cfg.lambda_floor < 1.0))
    throw std::invalid_argument("schedule: lambda_floor must lie in (0, 1)");
  if (cfg.lambda0 <= 0.0) throw std::invalid_argument("schedule: lambda0 must be positive");
  if (cfg.total_iters < 1) throw std::invalid_argument("schedule: total_iters must be >= 1");
  if (cfg.k_decay > 0.0) return cfg.k_decay;
  if (cfg.lambda0 <= cfg.lambda_floor) return 0.0;  // starts at the floor already
  const double horizon = std::max(1.0, 0.3 * cfg.total_iters);
  return std::log(cfg.lambda0 / cfg.lambda_floor) / horizon;
}

int resolved_warmup(const ScheduleConfig& cfg) {
  if (cfg.total_iters < 1) throw std::invalid_argument("schedule: total_iters must be >= 1");
  return cfg.warmup_steps >= 0 ? cfg.warmup_steps : cfg.total_iters / 10;
}

double lambda_at(const ScheduleConfig& cfg, int step) {
  if (step < 0) throw std::invalid_argument("schedule: step must be >= 0");
  const double k = resolved_k_decay(cfg);
  return std::max(cfg.lambda0 * std::exp(-k * step), cfg.lambda_floor);
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

void validate_scene(const ScenePackage& scene) {
  const int n = static_cast<int>(scene.images.size());
  if (n == 0) throw std::invalid_argument("scene: no frames");
  const int w = scene.images[0].width, h = scene.images[0].height;
  for (const Image& img : scene.images)
    if (img.width != w || img.height != h || img.channels != 3 || w <= 0 || h <= 0)
      throw std::invalid_argument("scene: images must share one positive WxHx3 shape");
  if (!scene.depths.empty()) {
    if (static_cast<int>(scene.depths.size()) != n)
      throw std::invalid_argument("scene: depth count must match frame count");
    for (const DepthMap& d : scene.depths)
      if (d.width != w || d.height != h)
        throw std::invalid_argument("scene: depth resolution must match the images");
  }
  if (static_cast<int>(scene.poses.size()) != n)
    throw std::invalid_argument("scene: pose count must match frame count");
  if (!scene.gt_poses.empty() && static_cast<int>(scene.gt_poses.size()) != n)
    throw std::invalid_argument("scene: gt pose count must match frame count");
  if (!scene.is_test.empty() && static_cast<int>(scene.is_test.size()) != n)
    throw std::invalid_argument("scene: split marker count must match frame count");
  if (scene.intrinsics.fx == 0.0 || scene.intrinsics.fy == 0.0)
    throw std::invalid_argument("scene: focal lengths must be nonzero");
  if (!(scene.near > 0.0 && scene.near < scene.far))
    throw std::invalid_argument("scene: need 0 < near < far");
  for (const PoseGraphEdgeRecord& e : scene.pose_graph)
    if (e.i < 0 || e.i >= n || e.j < 0 || e.j >= n || e.i == e.j)
      throw std::invalid_argument("scene: pose graph edge indices out of range");
  if (train_views(scene).empty()) throw std::invalid_argument("scene: no training views");
}

std::vector<int> train_views(const ScenePackage& scene) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(scene.images.size()); ++i)
    if (scene.is_test.empty() || !scene.is_test[i]) out.push_back(i);
  return out;
}

std::vector<int> test_views(const ScenePackage& scene) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(scene.images.size()); ++i)
    if (!scene.is_test.empty() && scene.is_test[i]) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Pose perturbation
// ---------------------------------------------------------------------------

std::vector<RigidTransform> perturb_poses(const std::vector<RigidTransform>& poses,
                                          double rot_cov, double trans_std,
                                          std::uint64_t seed) {
  if (rot_cov < 0.0 || trans_std < 0.0)
    throw std::invalid_argument("perturb_poses: noise magnitudes must be >= 0");
  Rng rng(hash_combine(seed, 0x70657274757262ull));
  std::vector<RigidTransform> out = poses;
  for (RigidTransform& p : out) {
    if (rot_cov > 0.0) p.rotation = sample_axis_angle_noise(rot_cov, rng) * p.rotation;
    if (trans_std > 0.0)
      p.translation += trans_std * Vec3(rng.normal(), rng.normal(), rng.normal());
  }
  return out;
}

std::vector<RigidTransform> random_poses(int n, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("random_poses: n must be >= 0");
  Rng rng(hash_combine(seed, 0x72616e64706f7365ull));
  std::vector<RigidTransform> out(n);
  for (RigidTransform& p : out) p.rotation = random_rotation(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Toy scene
// ---------------------------------------------------------------------------

namespace {

struct ToySphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
  Vec3 albedo = Vec3::Zero();
};

const Vec3& toy_light() {
  static const Vec3 l = Vec3(0.4, -0.7, 0.55).normalized();
  return l;
}

std::vector<ToySphere> place_spheres(int count, Rng& rng) {
  static const Vec3 palette[5] = {Vec3(0.90, 0.20, 0.20), Vec3(0.20, 0.75, 0.25),
                                  Vec3(0.20, 0.35, 0.90), Vec3(0.90, 0.80, 0.20),
                                  Vec3(0.70, 0.30, 0.85)};
  double r_lo = 0.18, r_hi = 0.30;
  std::vector<ToySphere> spheres;
  int attempts = 0;
  while (static_cast<int>(spheres.size()) < count) {
    ToySphere s;
    s.center = Vec3(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45),
                    rng.uniform(-0.45, 0.45));
    s.radius = rng.uniform(r_lo, r_hi);
    s.albedo = palette[spheres.size() % 5];
    bool ok = true;
    for (const ToySphere& o : spheres)
      if ((s.center - o.center).norm() < s.radius + o.radius + 0.02) ok = false;
    if (ok) {
      spheres.push_back(s);
    } else if (++attempts > 500) {  // shrink until the box fits them
      r_lo *= 0.9;
      r_hi *= 0.9;
      attempts = 0;
      spheres.clear();
    }
  }
  return spheres;
}

// Smallest positive ray parameter over all spheres; dir need not be unit, so
// with unit-z camera directions the parameter is the camera z-depth.
bool trace_spheres(const std::vector<ToySphere>& spheres, const Vec3& origin,
                   const Vec3& dir, double* t_out, int* idx_out) {
  double best = std::numeric_limits<double>::infinity();
  int best_idx = -1;
  for (int i = 0; i < static_cast<int>(spheres.size()); ++i) {
    const Vec3 oc = origin - spheres[i].center;
    const double a = dir.squaredNorm();
    const double b = 2.0 * oc.dot(dir);
    const double c = oc.squaredNorm() - spheres[i].radius * spheres[i].radius;
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    double t = (-b - sq) / (2.0 * a);
    if (t <= 1e-9) t = (-b + sq) / (2.0 * a);
    if (t > 1e-9 && t < best) {
      best = t;
      best_idx = i;
    }
  }
  if (best_idx < 0) return false;
  *t_out = best;
  *idx_out = best_idx;
  return true;
}

Vec3 shade_hit(const std::vector<ToySphere>& spheres, int idx, const Vec3& point) {
  const ToySphere& s = spheres[idx];
  const Vec3 n = (point - s.center) / s.radius;
  const double lambert = 0.25 + 0.75 * std::max(0.0, n.dot(toy_light()));
  return (s.albedo * lambert).cwiseMin(1.0).cwiseMax(0.0);
}

RigidTransform look_at_origin(const Vec3& center) {
  const Vec3 z = (-center).normalized();
  const Vec3 x = z.cross(Vec3::UnitZ()).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.row(0) = x;
  r.row(1) = y;
  r.row(2) = z;
  RigidTransform pose;
  pose.rotation = UnitQuaternion::from_matrix(r);
  pose.translation = -(r * center);
  return pose;
}

}  // namespace

ScenePackage make_toy_scene(const ToySceneConfig& cfg) {
  if (cfg.n_views < 2) throw std::invalid_argument("toy scene: need at least two views");
  if (cfg.n_test < 0 || cfg.n_test >= cfg.n_views)
    throw std::invalid_argument("toy scene: test count must leave at least one train view");
  if (cfg.width < 4 || cfg.height < 4)
    throw std::invalid_argument("toy scene: image must be at least 4x4");
  if (cfg.focal <= 0.0) throw std::invalid_argument("toy scene: focal must be positive");

  Rng master(hash_combine(cfg.seed, 0x746f797363656e65ull));
  Rng rng_geo = master.fork(1);
  Rng rng_cam = master.fork(2);
  Rng rng_edge = master.fork(3);

  const int count = std::min(5, std::max(3, cfg.n_spheres));
  const std::vector<ToySphere> spheres = place_spheres(count, rng_geo);

  ScenePackage scene;
  scene.intrinsics = CameraIntrinsics(cfg.focal, cfg.focal, cfg.width / 2.0, cfg.height / 2.0);

  // Inward-looking ring with jittered azimuth/elevation.
  for (int v = 0; v < cfg.n_views; ++v) {
    const double az = 2.0 * kPi * v / cfg.n_views + 0.15 * (rng_cam.uniform() - 0.5);
    const double el = deg2rad(18.0 + 22.0 * rng_cam.uniform());
    const Vec3 c = 2.4 * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az),
                              std::sin(el));
    scene.gt_poses.push_back(look_at_origin(c));
  }

  double t_min = std::numeric_limits<double>::infinity(), t_max = 0.0;
  static const double sub[2] = {0.25, 0.75};
  for (int v = 0; v < cfg.n_views; ++v) {
    const RigidTransform& pose = scene.gt_poses[v];
    const Vec3 origin = pose.camera_center();
    const Mat3 rt = pose.rotation.to_matrix().transpose();
    Image img(cfg.width, cfg.height, 3);
    DepthMap dm;
    dm.width = cfg.width;
    dm.height = cfg.height;
    dm.values.assign(static_cast<size_t>(cfg.width) * cfg.height, 0.0);
    dm.valid.assign(static_cast<size_t>(cfg.width) * cfg.height, 0);
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        Vec3 color = Vec3::Zero();
        for (double dy : sub) {
          for (double dx : sub) {
            const Vec3 d_cam((x + dx - scene.intrinsics.cx) / cfg.focal,
                             (y + dy - scene.intrinsics.cy) / cfg.focal, 1.0);
            const Vec3 d = rt * d_cam;
            double t = 0.0;
            int idx = -1;
            if (trace_spheres(spheres, origin, d, &t, &idx))
              color += shade_hit(spheres, idx, origin + t * d);
          }
        }
        color *= 0.25;
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
        const Vec3 d_cam((x + 0.5 - scene.intrinsics.cx) / cfg.focal,
                         (y + 0.5 - scene.intrinsics.cy) / cfg.focal, 1.0);
        double t = 0.0;
        int idx = -1;
        if (trace_spheres(spheres, origin, rt * d_cam, &t, &idx)) {
          dm.at(x, y) = t;
          dm.valid[static_cast<size_t>(y) * cfg.width + x] = 1;
          t_min = std::min(t_min, t);
          t_max = std::max(t_max, t);
        }
      }
    }
    scene.images.push_back(std::move(img));
    if (cfg.with_depth) scene.depths.push_back(std::move(dm));
  }
  if (!std::isfinite(t_min))
    throw std::runtime_error("toy scene: no camera sees any sphere");
  scene.near = std::max(0.05, 0.8 * t_min);
  scene.far = 1.2 * t_max;

  scene.is_test.assign(cfg.n_views, 0);
  for (int v = cfg.n_views - cfg.n_test; v < cfg.n_views; ++v) scene.is_test[v] = 1;

  scene.poses = perturb_poses(scene.gt_poses, std::pow(deg2rad(cfg.pose_noise_deg), 2),
                              cfg.pose_noise_trans, hash_combine(cfg.seed, 11));

  // Ring + chord edges among training views; rotation measurements carry
  // axis-angle noise, relative translations are exact.
  const std::vector<int> train = train_views(scene);
  const int m = static_cast<int>(train.size());
  std::set<std::pair<int, int>> pairs;
  for (int k = 0; k < m && m >= 2; ++k) pairs.insert(std::minmax(train[k], train[(k + 1) % m]));
  if (m >= 5)
    for (int k = 0; k < m; ++k) pairs.insert(std::minmax(train[k], train[(k + 2) % m]));
  for (const auto& [i, j] : pairs) {
    PoseGraphEdgeRecord rec;
    rec.i = i;
    rec.j = j;
    const UnitQuaternion rel_true =
        scene.gt_poses[j].rotation * scene.gt_poses[i].rotation.conjugate();
    const UnitQuaternion noise =
        sample_axis_angle_noise(std::pow(deg2rad(cfg.edge_noise_deg), 2), rng_edge);
    rec.q_rel = noise * rel_true;
    rec.t_rel = scene.gt_poses[j].translation - rel_true.rotate(scene.gt_poses[i].translation);
    scene.pose_graph.push_back(rec);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Frame rendering (values only)
// ---------------------------------------------------------------------------

namespace {

diff::Tensor quat_row(const UnitQuaternion& q) {
  diff::Tensor t(1, 4);
  t.at(0, 0) = q.w;
  t.at(0, 1) = q.x;
  t.at(0, 2) = q.y;
  t.at(0, 3) = q.z;
  return t;
}

diff::Tensor vec_row(const Vec3& v) {
  diff::Tensor t(1, 3);
  t.at(0, 0) = v.x();
  t.at(0, 1) = v.y();
  t.at(0, 2) = v.z();
  return t;
}

}  // namespace

Image render_frame(diff::ParamStore& store, const FieldConfig& cfg,
                   const std::string& prefix, const RigidTransform& pose,
                   const CameraIntrinsics& k, int width, int height,
                   const RenderConfig& rc, Rng& rng, Image* depth_out) {
  if (width <= 0 || height <= 0)
    throw std::invalid_argument("render_frame: image must be nonempty");
  Image img(width, height, 3);
  if (depth_out) *depth_out = Image(width, height, 1);
  const int total = width * height;
  const int chunk = 4096;  // bounds tape memory on large frames
  for (int base = 0; base < total; base += chunk) {
    const int n = std::min(chunk, total - base);
    std::vector<std::pair<double, double>> pixels;
    pixels.reserve(n);
    for (int p = base; p < base + n; ++p)
      pixels.emplace_back(p % width + 0.5, p / width + 0.5);
    diff::Tape tape(&store);
    const RayNodes rays = make_ray_nodes(tape, tape.constant(quat_row(pose.rotation)),
                                         tape.constant(vec_row(pose.translation)), k, pixels);
    const std::vector<double> radii(pixels.size(), pixel_radius(k));
    const RenderBatch batch =
        render_rays(tape, cfg, prefix, rays.origins, rays.dirs, radii, rc, rng);
    const diff::Tensor color = tape.value(batch.color);
    const diff::Tensor depth = tape.value(batch.depth);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < 3; ++c)
        img.data[static_cast<size_t>(base + r) * 3 + c] =
            std::clamp(color.at(r, c), 0.0, 1.0);
      if (depth_out) depth_out->data[base + r] = depth.at(r, 0);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Training engine
// ---------------------------------------------------------------------------

namespace {

enum class Mode { Frozen, Joint, NoPose, E2E };

bool name_starts(const std::string& s, const char* prefix) {
  return s.rfind(prefix, 0) == 0;
}

// Nearest row of dst (3 cols) for every row of src, brute force.
std::vector<int> nn_rows(const diff::Tensor& src, const diff::Tensor& dst) {
  std::vector<int> pick(src.rows, 0);
  for (int i = 0; i < src.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < dst.rows; ++j) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double g = src.at(i, c) - dst.at(j, c);
        d += g * g;
      }
      if (d < best) {
        best = d;
        pick[i] = j;
      }
    }
  }
  return pick;
}

class Engine {
 public:
  Engine(const ScenePackage& scene, const JointConfig& cfg, diff::ParamStore& store,
         Mode mode)
      : scene_(scene),
        cfg_(cfg),
        store_(store),
        mode_(mode),
        master_(hash_combine(cfg.seed, 0x9e3779b97f4a7c15ull)),
        rng_init_(master_.fork(1)),
        rng_batch_(master_.fork(2)),
        rng_render_(master_.fork(3)),
        rng_cloud_(master_.fork(4)) {}

  JointResult run();

 private:
  bool uses_mra() const { return mode_ != Mode::Frozen; }
  bool uses_depth() const { return mode_ == Mode::NoPose || mode_ == Mode::E2E; }
  std::string a_name(int li) const { return "depth." + std::to_string(li) + ".a"; }
  std::string b_name(int li) const { return "depth." + std::to_string(li) + ".b"; }

  void check_config() const;
  void init_params();
  void set_routing(bool phase2);
  void build_graph();
  void build_clouds();
  void build_pairs();

  CameraIntrinsics current_k() const;
  std::vector<RigidTransform> anchors() const;
  std::vector<UnitQuaternion> anchor_rotations() const;
  void write_anchors(const std::vector<RigidTransform>& poses);

  std::vector<RigidTransform> chamfer_update(std::vector<RigidTransform> poses,
                                             const std::vector<std::pair<int, int>>& pairs);
  void focal_step();
  void warmup_phase();
  bool network_step(int step);
  void resolve_translations();
  double rotation_error_deg();
  void push_metrics(int step, double mra_weight);

  const ScenePackage& scene_;
  const JointConfig& cfg_;
  diff::ParamStore& store_;
  Mode mode_;
  Rng master_, rng_init_, rng_batch_, rng_render_, rng_cloud_;

  int w_ = 0, h_ = 0, m_ = 0;
  std::vector<int> train_;
  std::map<int, int> local_of_;

  ViewGraph g_;
  std::vector<std::pair<int, int>> edge_list_;
  std::vector<Vec3> edge_trans_;
  bool have_edge_trans_ = false;

  std::vector<Vec3> render_trans_;
  std::vector<PointCloud> clouds_;
  std::vector<std::pair<int, int>> pairs_;
  std::vector<std::vector<int>> depth_px_;

  RenderConfig rc_;
  double chamfer_step_ = 0.0;
  int rise_count_ = 0;
  double last_chamfer_ = std::numeric_limits<double>::infinity();
  std::uint64_t cloud_epoch_ = 0, focal_epoch_ = 0;

  CsvWriter csv_{std::vector<std::string>{"step", "lambda", "rot_err_deg", "psnr_batch_db"}};
  double win_psnr_sum_ = 0.0;
  int win_psnr_n_ = 0;
  int steps_done_ = 0;
  bool aborted_ = false;
  std::string abort_reason_;
};

void Engine::check_config() const {
  resolved_k_decay(cfg_.schedule);  // validates lambda0/floor/total
  if (cfg_.schedule.alternation_block < 1)
    throw std::invalid_argument("schedule: alternation_block must be >= 1");
  if (cfg_.schedule.batch_rays < 1)
    throw std::invalid_argument("schedule: batch_rays must be >= 1");
  if (cfg_.lr <= 0.0 || cfg_.lr_end <= 0.0)
    throw std::invalid_argument("pipeline: learning rates must be positive");
  if (cfg_.chamfer_step <= 0.0)
    throw std::invalid_argument("pipeline: chamfer_step must be positive");
  if (cfg_.cloud_cap < 1) throw std::invalid_argument("pipeline: cloud_cap must be >= 1");
  if (cfg_.depth_pixels < 1)
    throw std::invalid_argument("pipeline: depth_pixels must be >= 1");
  if (uses_depth() && scene_.depths.empty())
    throw std::invalid_argument("pipeline: this mode needs per-frame depth maps");
}

void Engine::init_params() {
  bool has_nerf = false, has_mra = false;
  for (const std::string& name : store_.names()) {
    has_nerf = has_nerf || name_starts(name, "nerf.");
    has_mra = has_mra || name_starts(name, "mra.");
  }
  if (!has_nerf) init_field_params(store_, cfg_.field, "nerf", rng_init_);
  if (uses_mra() && !has_mra) init_mpnn_params(store_, cfg_.mpnn, "mra", rng_init_);
  if (mode_ == Mode::E2E && !store_.has("cam.f")) {
    const double f0 = w_ * (1.0 + cfg_.focal_jitter * (2.0 * rng_init_.uniform() - 1.0));
    diff::Tensor f(1, 2);
    f.at(0, 0) = f0;
    f.at(0, 1) = f0;
    store_.add("cam.f", f, false);
  }
  if (!store_.has("anchor.q")) {
    diff::Tensor q(m_, 4), t(m_, 3);
    store_.add("anchor.q", q, false);
    store_.add("anchor.t", t, false);
    std::vector<RigidTransform> init(m_);
    for (int li = 0; li < m_; ++li) init[li] = scene_.poses[train_[li]];
    write_anchors(init);
  }
  if (uses_depth())
    for (int li = 0; li < m_; ++li) {
      if (!store_.has(a_name(li))) store_.add(a_name(li), diff::Tensor::scalar(0.0), false);
      if (!store_.has(b_name(li))) store_.add(b_name(li), diff::Tensor::scalar(0.0), false);
    }
}

void Engine::set_routing(bool phase2) {
  for (const std::string& name : store_.names()) {
    if (name_starts(name, "nerf."))
      store_.set_allowed_sources(name, {"rgb"});
    else if (name_starts(name, "mra."))
      store_.set_allowed_sources(name, {"mra", "rgb"});
    else if (name_starts(name, "anchor."))
      store_.set_allowed_sources(name, {"cd"});
    else if (name_starts(name, "depth."))
      store_.set_allowed_sources(name, {"d"});
    else if (name == "cam.f")
      store_.set_allowed_sources(name, phase2 ? std::set<std::string>{"rgb"}
                                              : std::set<std::string>{"rgb", "cd"});
  }
}

void Engine::build_graph() {
  std::map<std::pair<int, int>, Vec3> tmap;
  std::set<std::pair<int, int>> with_t;
  ViewGraph raw;
  raw.n = m_;
  raw.estimates = anchor_rotations();
  for (const PoseGraphEdgeRecord& rec : scene_.pose_graph) {
    const auto it_i = local_of_.find(rec.i);
    const auto it_j = local_of_.find(rec.j);
    if (it_i == local_of_.end() || it_j == local_of_.end()) continue;  // touches a test frame
    raw.edges.push_back({it_i->second, it_j->second, rec.q_rel});
    if (rec.t_rel) {
      tmap[{it_i->second, it_j->second}] = *rec.t_rel;
      with_t.insert({it_i->second, it_j->second});
    }
  }
  if (raw.edges.empty())
    throw std::invalid_argument(
        "pipeline: a measured pose graph over the training views is required");
  validate_graph(raw);
  g_ = clean_cycles(raw, cfg_.clean_threshold_deg);
  const auto comps = connected_components(g_);
  if (comps.size() > 1) {
    std::ostringstream os;
    os << "pipeline: view graph disconnected after cleaning (component sizes:";
    for (const auto& c : comps) os << ' ' << c.size();
    os << ")";
    throw std::runtime_error(os.str());
  }
  have_edge_trans_ = true;
  for (const ViewGraphEdge& e : g_.edges) {
    edge_list_.emplace_back(e.i, e.j);
    const auto it = tmap.find({e.i, e.j});
    if (it == tmap.end())
      have_edge_trans_ = false;
    else
      edge_trans_.push_back(it->second);
  }
  if (!have_edge_trans_) edge_trans_.clear();
}

void Engine::build_clouds() {
  clouds_.clear();
  clouds_.reserve(m_);
  const CameraIntrinsics k = current_k();
  Rng sub = rng_cloud_.fork(cloud_epoch_++);
  for (int li = 0; li < m_; ++li) {
    DepthMap dm = scene_.depths[train_[li]];
    dm.log_alpha = store_.value(a_name(li)).at(0, 0);
    dm.beta = store_.value(b_name(li)).at(0, 0);
    PointCloud cloud = unproject(dm, k);
    if (cloud.points.empty())
      throw std::runtime_error("pipeline: frame " + std::to_string(train_[li]) +
                               " has no valid depth to unproject");
    if (static_cast<int>(cloud.points.size()) > cfg_.cloud_cap)
      cloud = subsample_cloud(cloud, cfg_.cloud_cap, sub);
    clouds_.push_back(std::move(cloud));
  }
}

void Engine::build_pairs() {
  std::set<std::pair<int, int>> ps;
  for (const auto& [i, j] : edge_list_) ps.insert(std::minmax(i, j));
  Rng lr = rng_cloud_.fork(0xf00dull);
  for (int li = 0; li < m_; ++li)
    for (int r = 0; r < cfg_.chamfer_long_range; ++r) {
      const int o = lr.uniform_int(m_);
      if (o != li) ps.insert(std::minmax(li, o));
    }
  pairs_.assign(ps.begin(), ps.end());
}

CameraIntrinsics Engine::current_k() const {
  if (mode_ == Mode::E2E) {
    const diff::Tensor& f = store_.value("cam.f");
    return CameraIntrinsics(f.at(0, 0), f.at(0, 1), w_ / 2.0, h_ / 2.0);
  }
  return scene_.intrinsics;
}

std::vector<RigidTransform> Engine::anchors() const {
  const diff::Tensor& q = store_.value("anchor.q");
  const diff::Tensor& t = store_.value("anchor.t");
  std::vector<RigidTransform> out(m_);
  for (int li = 0; li < m_; ++li) {
    out[li].rotation = UnitQuaternion(q.at(li, 0), q.at(li, 1), q.at(li, 2), q.at(li, 3));
    out[li].translation = Vec3(t.at(li, 0), t.at(li, 1), t.at(li, 2));
  }
  return out;
}

std::vector<UnitQuaternion> Engine::anchor_rotations() const {
  std::vector<UnitQuaternion> out;
  out.reserve(m_);
  for (const RigidTransform& p : anchors()) out.push_back(p.rotation);
  return out;
}

void Engine::write_anchors(const std::vector<RigidTransform>& poses) {
  diff::Tensor& q = store_.value("anchor.q");
  diff::Tensor& t = store_.value("anchor.t");
  for (int li = 0; li < m_; ++li) {
    q.at(li, 0) = poses[li].rotation.w;
    q.at(li, 1) = poses[li].rotation.x;
    q.at(li, 2) = poses[li].rotation.y;
    q.at(li, 3) = poses[li].rotation.z;
    for (int c = 0; c < 3; ++c) t.at(li, c) = poses[li].translation[c];
  }
}

std::vector<RigidTransform> Engine::chamfer_update(
    std::vector<RigidTransform> poses, const std::vector<std::pair<int, int>>& pairs) {
  double before = 0.0, after = 0.0;
  poses = update_pose_chamfer(poses, clouds_, pairs, chamfer_step_, &before, &after);
  store_.note_source("anchor.q", "cd");
  store_.note_source("anchor.t", "cd");
  if (after > last_chamfer_ + 1e-15) {
    if (++rise_count_ >= 10) {
      chamfer_step_ *= 0.5;
      std::fprintf(stderr,
                   "pipeline: chamfer objective rose over 10 passes; halving pose step to %g\n",
                   chamfer_step_);
      rise_count_ = 0;
    }
  } else {
    rise_count_ = 0;
  }
  last_chamfer_ = after;
  return poses;
}

// One descent step on the focal pair through cross-view chamfer with frozen
// matches; pose anchors enter as constants, so only "cd" reaches cam.f.
void Engine::focal_step() {
  diff::Tape tape(&store_);
  const int f = tape.param("cam.f");
  const int rfx = tape.recip(tape.slice_cols(f, 0, 1));
  const int rfy = tape.recip(tape.slice_cols(f, 1, 2));
  const CameraIntrinsics k = current_k();
  const std::vector<RigidTransform> poses = anchors();
  Rng sub = rng_cloud_.fork(0xf0ca1ull + focal_epoch_++);
  const int cap = 256;
  std::vector<int> cloud_node(m_, -1);
  for (int li = 0; li < m_; ++li) {
    const DepthMap& dm = scene_.depths[train_[li]];
    const double alpha = std::exp(store_.value(a_name(li)).at(0, 0));
    const double beta = store_.value(b_name(li)).at(0, 0);
    const std::vector<int>& ids = depth_px_[li];
    const int n = std::min(cap, static_cast<int>(ids.size()));
    if (n == 0) continue;
    diff::Tensor ax(n, 1), ay(n, 1), az(n, 1);
    for (int r = 0; r < n; ++r) {
      const int pid = ids[sub.uniform_int(static_cast<int>(ids.size()))];
      const int x = pid % w_, y = pid / w_;
      const double z = alpha * dm.at(x, y) + beta;
      ax.at(r, 0) = (x + 0.5 - k.cx) * z;
      ay.at(r, 0) = (y + 0.5 - k.cy) * z;
      az.at(r, 0) = z;
    }
    cloud_node[li] = tape.concat_cols(
        tape.concat_cols(tape.mul_by_scalar_node(tape.constant(ax), rfx),
                         tape.mul_by_scalar_node(tape.constant(ay), rfy)),
        tape.constant(az));
  }
  int loss = -1;
  for (const auto& [i, j] : pairs_) {
    if (cloud_node[i] < 0 || cloud_node[j] < 0) continue;
    const RigidTransform rel = poses[j] * poses[i].inverse();
    const Mat3 rT = rel.rotation.to_matrix().transpose();
    diff::Tensor rot(3, 3);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot.at(r, c) = rT(r, c);
    const int xi_in_j = tape.add_rowvec(tape.matmul(cloud_node[i], tape.constant(rot)),
                                        tape.constant(vec_row(rel.translation)));
    const diff::Tensor vi = tape.value(xi_in_j);
    const diff::Tensor vj = tape.value(cloud_node[j]);
    const int d1 = tape.sub(xi_in_j, tape.gather_rows(cloud_node[j], nn_rows(vi, vj)));
    const int d2 = tape.sub(cloud_node[j], tape.gather_rows(xi_in_j, nn_rows(vj, vi)));
    const int term = tape.add(tape.mul_scalar(tape.sum(tape.square(d1)), 0.5 / vi.rows),
                              tape.mul_scalar(tape.sum(tape.square(d2)), 0.5 / vj.rows));
    loss = loss < 0 ? term : tape.add(loss, term);
  }
  if (loss < 0) return;
  if (!std::isfinite(tape.value(loss).at(0, 0))) {
    aborted_ = true;
    abort_reason_ = "non-finite focal chamfer loss";
    return;
  }
  tape.backward(loss, 1.0, "cd");
  try {
    store_.adam_step(cfg_.lr, 0.0);
  } catch (const std::exception& e) {
    aborted_ = true;
    abort_reason_ = e.what();
  }
  store_.zero_grad();
}

void Engine::warmup_phase() {
  const int warmup = resolved_warmup(cfg_.schedule);
  if (warmup <= 0) return;
  std::vector<RigidTransform> poses = anchors();
  // The initial poses carry no information here, so re-seat the root so the
  // camera sits away from the points it observes: placing the camera-frame
  // centroid at the world origin keeps every chained pair in a sane chamfer
  // basin (a camera inside the cloud aligns to a much worse plateau).
  {
    Vec3 centroid = Vec3::Zero();
    for (const Vec3& p : clouds_[0].points) centroid += p;
    poses[0].translation = centroid / static_cast<double>(clouds_[0].points.size());
  }
  // Incremental registration: each view is aligned against the union of the
  // clouds already registered, expressed in the world frame and handed to the
  // pair solver as the camera cloud of a virtual identity pose.  Both poses
  // of the pair move during the solve, so the result is re-gauged afterwards
  // to pin the model back to identity; the registered set is therefore never
  // dragged by a new view.  A one-crescent-to-one-crescent link can settle in
  // a wrong basin whose objective is close to the true one, but against the
  // growing model wrong placements leave large uncovered regions, so the
  // lowest-objective solve across a few rotated restarts is reliable.
  const int link_cap = std::max(150, std::min(400, warmup / std::max(1, m_ - 1)));
  const int model_cap = std::max(500, cfg_.cloud_cap);
  Rng rng_restart = rng_cloud_.fork(0xc4a1f00dull);
  int used = 0;
  PointCloud model;
  model.frame = Frame::Camera;
  const auto merge_into_model = [&](int v) {
    const RigidTransform inv = poses[v].inverse();
    for (const Vec3& p : clouds_[v].points) model.points.push_back(inv.apply(p));
    if (static_cast<int>(model.points.size()) > model_cap) {
      Rng sub = rng_restart.fork(0x5ab5c000ull + static_cast<uint64_t>(v));
      model = subsample_cloud(model, model_cap, sub);
    }
  };
  merge_into_model(0);
  const auto solve_duo = [&](std::vector<RigidTransform>& duo,
                             const std::vector<PointCloud>& dc) {
    const std::vector<std::pair<int, int>> link = {{0, 1}};
    double prev = std::numeric_limits<double>::infinity(), after = prev;
    int stall = 0;
    for (int it = 0; it < link_cap && !aborted_; ++it) {
      duo = update_pose_chamfer(duo, dc, link, chamfer_step_, nullptr, &after);
      ++used;
      if (prev - after < 1e-7 * std::max(after, 1e-12)) {
        if (++stall >= 6) break;
      } else {
        stall = 0;
      }
      prev = after;
    }
    return after;
  };
  // Registers view v against the given model starting from each candidate
  // pose plus a few randomly rotated restarts, keeping the lowest objective.
  const auto register_view =
      [&](int v, const PointCloud& ref, const std::vector<RigidTransform>& candidates,
          int restarts) {
        const std::vector<PointCloud> dc = {ref, clouds_[v]};
        std::vector<RigidTransform> best;
        double best_cd = std::numeric_limits<double>::infinity();
        const int total_tries = static_cast<int>(candidates.size()) + restarts;
        for (int r = 0; r < total_tries && !aborted_; ++r) {
          std::vector<RigidTransform> duo = {RigidTransform::identity(), candidates[0]};
          if (r < static_cast<int>(candidates.size())) {
            duo[1] = candidates[r];
          } else {
            duo[1] = candidates[0];
            const double ang = rng_restart.uniform(deg2rad(20.0), deg2rad(90.0));
            const Vec3 axis(rng_restart.normal(), rng_restart.normal(), rng_restart.normal());
            duo[1].rotation = UnitQuaternion::exp_map(ang * axis.normalized()) * duo[1].rotation;
          }
          const double cd = solve_duo(duo, dc);
          if (cd < best_cd) {
            best_cd = cd;
            best = duo;
          }
        }
        poses[v] = best[1] * best[0].inverse();
      };
  for (int v = 1; v < m_ && !aborted_; ++v) {
    // The warm start assumes view v sits where its predecessor does; the
    // second candidate extrapolates the previous relative motion, which for a
    // smooth capture is usually already inside the convergence basin.
    std::vector<RigidTransform> candidates = {poses[v - 1]};
    if (v >= 2) candidates.push_back((poses[v - 1] * poses[v - 2].inverse()) * poses[v - 1]);
    register_view(v, model, candidates, 4);
    merge_into_model(v);
  }
  // Re-registration sweep: with the full model available, every view is
  // re-solved against the union of the others, which repairs any view that
  // settled in a wrong basin while its model was still thin.
  for (int v = 0; v < m_ && !aborted_; ++v) {
    PointCloud others;
    others.frame = Frame::Camera;
    for (int u = 0; u < m_; ++u) {
      if (u == v) continue;
      const RigidTransform inv = poses[u].inverse();
      for (const Vec3& p : clouds_[u].points) others.points.push_back(inv.apply(p));
    }
    if (static_cast<int>(others.points.size()) > model_cap) {
      Rng sub = rng_restart.fork(0x53eebull + static_cast<uint64_t>(v));
      others = subsample_cloud(others, model_cap, sub);
    }
    register_view(v, others, {poses[v]}, 3);
  }
  store_.note_source("anchor.q", "cd");
  store_.note_source("anchor.t", "cd");
  // Global polish over every cloud pair with whatever budget remains.  For
  // intrinsics recovery the focal estimate moves in lockstep here, with the
  // clouds rebuilt after every focal step since they depend on it.
  last_chamfer_ = std::numeric_limits<double>::infinity();
  double prev = last_chamfer_;
  int stall = 0;
  const int polish = std::max(60, warmup - used);
  for (int it = 0; it < polish && !aborted_; ++it) {
    poses = chamfer_update(poses, pairs_);
    if (mode_ == Mode::E2E) {
      write_anchors(poses);
      focal_step();
      build_clouds();
    }
    if (prev - last_chamfer_ < 1e-7 * std::max(last_chamfer_, 1e-12)) {
      if (++stall >= 8) break;
    } else {
      stall = 0;
    }
    prev = last_chamfer_;
  }
  write_anchors(poses);
}

bool Engine::network_step(int step) {
  const int total = cfg_.schedule.total_iters;
  const int li = step % m_;
  const int frame = train_[li];
  const int batch = cfg_.schedule.batch_rays;

  diff::Tape tape(&store_);
  const std::vector<UnitQuaternion> boot = anchor_rotations();
  int q_node = -1, l_mra = -1;
  if (uses_mra()) {
    g_.estimates = boot;
    const int predictions = predict_rotations(tape, cfg_.mpnn, "mra", g_, boot);
    l_mra = loss_mra(tape, predictions, g_, boot, cfg_.mra_loss);
    q_node = tape.slice_rows(predictions, li, li + 1);
  } else {
    q_node = tape.constant(quat_row(scene_.poses[frame].rotation));
  }
  const int t_node = tape.constant(vec_row(render_trans_[li]));

  // Ray pixels: uniform batch plus a depth-supervised tail at valid pixels.
  int nd = 0;
  if (uses_depth() && !depth_px_[li].empty())
    nd = std::min({cfg_.depth_pixels, batch, static_cast<int>(depth_px_[li].size())});
  std::vector<std::pair<double, double>> pixels;
  std::vector<Vec3> targets;
  std::vector<int> depth_ids;
  const Image& img = scene_.images[frame];
  for (int i = 0; i < batch; ++i) {
    int x = 0, y = 0;
    if (i < batch - nd) {
      x = rng_batch_.uniform_int(w_);
      y = rng_batch_.uniform_int(h_);
    } else {
      const int pid = depth_px_[li][rng_batch_.uniform_int(static_cast<int>(depth_px_[li].size()))];
      x = pid % w_;
      y = pid / w_;
      depth_ids.push_back(pid);
    }
    pixels.emplace_back(x + 0.5, y + 0.5);
    targets.emplace_back(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
  }

  const CameraIntrinsics k = current_k();
  const RayNodes rays =
      mode_ == Mode::E2E
          ? make_ray_nodes(tape, q_node, t_node, tape.param("cam.f"), k.cx, k.cy, pixels)
          : make_ray_nodes(tape, q_node, t_node, k, pixels);
  const std::vector<double> radii(pixels.size(), pixel_radius(k));
  FieldConfig fld = cfg_.field;
  if (cfg_.anneal_encoding)
    fld.enc.anneal_t = fld.enc.octaves *
                       std::min(1.0, (step + 1) / std::max(1.0, 0.3 * total));
  const RenderBatch rb =
      render_rays(tape, fld, "nerf", rays.origins, rays.dirs, radii, rc_, rng_render_);
  const int l_fine = loss_rgb(tape, rb.color, targets);
  const int l_coarse = loss_rgb(tape, rb.coarse_color, targets);
  const int l_rgb = tape.mul_scalar(
      tape.add(l_fine, tape.mul_scalar(l_coarse, cfg_.coarse_weight)), 1.0 / batch);

  int l_d = -1;
  if (nd > 0) {
    const diff::Tensor all_depth = tape.value(rb.depth);  // copy before more tape ops
    const DepthMap& dm = scene_.depths[frame];
    diff::Tensor rendered(nd, 1), raw(nd, 1);
    for (int i = 0; i < nd; ++i) {
      rendered.at(i, 0) = all_depth.at(batch - nd + i, 0);
      raw.at(i, 0) = dm.values[depth_ids[i]];
    }
    // The rendered depth enters as a constant: the residual trains only the
    // per-frame affine alignment.
    const int dstar = transform_depth(tape, tape.constant(raw), tape.param(a_name(li)),
                                      tape.param(b_name(li)));
    l_d = loss_depth(tape, dstar, tape.constant(rendered));
  }

  const double fine_sse = tape.value(l_fine).at(0, 0);
  if (!std::isfinite(fine_sse) || !std::isfinite(tape.value(l_rgb).at(0, 0)) ||
      (l_mra >= 0 && !std::isfinite(tape.value(l_mra).at(0, 0)))) {
    aborted_ = true;
    abort_reason_ = "non-finite training loss at step " + std::to_string(step);
    return false;
  }
  const double mse = fine_sse / (3.0 * batch);
  win_psnr_sum_ += mse <= 1e-12 ? 99.0 : std::min(99.0, -10.0 * std::log10(mse));
  win_psnr_n_ += 1;

  double w_mra = 0.0, w_rgb = 1.0;
  if (mode_ == Mode::Joint) {
    w_mra = lambda_at(cfg_.schedule, step);
    w_rgb = 1.0 - w_mra;
  } else if (uses_mra()) {
    w_mra = 1.0;
  }
  if (l_mra >= 0 && w_mra > 0.0) tape.backward(l_mra, w_mra, "mra");
  if (w_rgb > 0.0) tape.backward(l_rgb, w_rgb, "rgb");
  if (l_d >= 0) tape.backward(l_d, 1.0, "d");
  try {
    store_.adam_step(diff::lr_log_interp(step, total, cfg_.lr, cfg_.lr_end),
                     cfg_.weight_decay);
  } catch (const std::exception& e) {
    aborted_ = true;
    abort_reason_ = e.what();
    return false;
  }
  store_.zero_grad();
  ++steps_done_;
  return true;
}

void Engine::resolve_translations() {
  if (!uses_mra() || !have_edge_trans_ || edge_list_.empty()) return;
  const std::vector<UnitQuaternion> boot = anchor_rotations();
  g_.estimates = boot;
  const std::vector<UnitQuaternion> rot =
      predict_rotations_values(store_, cfg_.mpnn, "mra", g_, boot);
  const TranslationSolution sol = solve_translations(rot, edge_trans_, edge_list_, 0);
  // Re-anchor the gauge so the root keeps its current translation.
  const diff::Tensor& t = store_.value("anchor.t");
  const Vec3 root_t(t.at(0, 0), t.at(0, 1), t.at(0, 2));
  const Vec3 c = rot[0].conjugate().rotate(root_t);
  for (int li = 0; li < m_; ++li)
    render_trans_[li] = sol.translations[li] + rot[li].rotate(c);
}

double Engine::rotation_error_deg() {
  if (scene_.gt_poses.empty()) return -1.0;
  std::vector<UnitQuaternion> est;
  if (uses_mra()) {
    const std::vector<UnitQuaternion> boot = anchor_rotations();
    g_.estimates = boot;
    est = predict_rotations_values(store_, cfg_.mpnn, "mra", g_, boot);
  } else {
    for (int li = 0; li < m_; ++li) est.push_back(scene_.poses[train_[li]].rotation);
  }
  std::vector<UnitQuaternion> gt;
  for (int li = 0; li < m_; ++li) gt.push_back(scene_.gt_poses[train_[li]].rotation);
  const UnitQuaternion gauge = align_rotation_sets(est, gt);
  return rad2deg(rotation_set_errors(est, gt, gauge).mean_rad);
}

void Engine::push_metrics(int step, double mra_weight) {
  const double psnr_win = win_psnr_n_ > 0 ? win_psnr_sum_ / win_psnr_n_ : -1.0;
  win_psnr_sum_ = 0.0;
  win_psnr_n_ = 0;
  csv_.add_row({static_cast<double>(step), mra_weight, rotation_error_deg(), psnr_win});
}

JointResult Engine::run() {
  validate_scene(scene_);
  check_config();
  w_ = scene_.images[0].width;
  h_ = scene_.images[0].height;
  train_ = train_views(scene_);
  m_ = static_cast<int>(train_.size());
  if (m_ < 2) throw std::invalid_argument("pipeline: need at least two training views");
  for (int li = 0; li < m_; ++li) local_of_[train_[li]] = li;
  rc_ = cfg_.render;
  rc_.near = scene_.near;
  rc_.far = scene_.far;
  chamfer_step_ = cfg_.chamfer_step;

  init_params();
  if (uses_mra()) build_graph();
  render_trans_.resize(m_);
  for (int li = 0; li < m_; ++li) render_trans_[li] = scene_.poses[train_[li]].translation;

  depth_px_.assign(m_, {});
  if (!scene_.depths.empty())
    for (int li = 0; li < m_; ++li) {
      const DepthMap& dm = scene_.depths[train_[li]];
      for (int y = 0; y < h_; ++y)
        for (int x = 0; x < w_; ++x)
          if (dm.is_valid(x, y)) depth_px_[li].push_back(y * w_ + x);
    }

  JointResult res;
  res.initial_rot_err_deg = -1.0;
  if (!scene_.gt_poses.empty()) {
    std::vector<UnitQuaternion> est, gt;
    for (int li = 0; li < m_; ++li) {
      est.push_back(scene_.poses[train_[li]].rotation);
      gt.push_back(scene_.gt_poses[train_[li]].rotation);
    }
    res.initial_rot_err_deg =
        rad2deg(rotation_set_errors(est, gt, align_rotation_sets(est, gt)).mean_rad);
  }

  const bool bootstrap_mode = uses_depth();
  set_routing(!bootstrap_mode);
  if (bootstrap_mode) {
    build_clouds();
    build_pairs();
    warmup_phase();
    set_routing(true);           // phase 2: intrinsics lose the "cd" source
    store_.clear_seen_sources();  // phase-2 instrumentation starts clean
    std::vector<RigidTransform> ps = anchors();
    for (int li = 0; li < m_; ++li) render_trans_[li] = ps[li].translation;
    if (!scene_.gt_poses.empty()) {
      std::vector<UnitQuaternion> est = anchor_rotations(), gt;
      for (int li = 0; li < m_; ++li) gt.push_back(scene_.gt_poses[train_[li]].rotation);
      res.warmup_rot_err_deg =
          rad2deg(rotation_set_errors(est, gt, align_rotation_sets(est, gt)).mean_rad);
    }
  } else if (uses_mra()) {
    build_pairs();
  }

  const int total = cfg_.schedule.total_iters;
  const int block = cfg_.schedule.alternation_block;
  int step = 0;
  while (step < total && !aborted_) {
    const int k_this = std::min(block, total - step);
    if (bootstrap_mode) {
      std::vector<RigidTransform> poses = anchors();
      last_chamfer_ = std::numeric_limits<double>::infinity();
      for (int i = 0; i < k_this && !aborted_; ++i) poses = chamfer_update(poses, pairs_);
      write_anchors(poses);
      for (int li = 0; li < m_; ++li) render_trans_[li] = poses[li].translation;
    }
    double w_mra_last = mode_ == Mode::Joint ? lambda_at(cfg_.schedule, step)
                        : uses_mra()         ? 1.0
                                             : 0.0;
    for (int i = 0; i < k_this && !aborted_; ++i) {
      if (mode_ == Mode::Joint) w_mra_last = lambda_at(cfg_.schedule, step);
      network_step(step);
      ++step;
    }
    resolve_translations();
    if (mode_ == Mode::E2E) build_clouds();
    push_metrics(step, w_mra_last);
  }

  // Final refined poses: network rotations (when present) plus the solved or
  // anchored translations; test frames pass through untouched.
  std::vector<UnitQuaternion> rot_final;
  if (uses_mra()) {
    const std::vector<UnitQuaternion> boot = anchor_rotations();
    g_.estimates = boot;
    rot_final = predict_rotations_values(store_, cfg_.mpnn, "mra", g_, boot);
  } else {
    for (int li = 0; li < m_; ++li) rot_final.push_back(scene_.poses[train_[li]].rotation);
  }
  res.poses = scene_.poses;
  res.anchors = scene_.poses;
  const std::vector<RigidTransform> anchor_now = anchors();
  for (int li = 0; li < m_; ++li) {
    res.poses[train_[li]] = RigidTransform{rot_final[li], render_trans_[li]};
    res.anchors[train_[li]] = anchor_now[li];
  }
  res.final_rot_err_deg = rotation_error_deg();
  res.steps_run = steps_done_;
  res.aborted = aborted_;
  res.abort_reason = abort_reason_;
  const CameraIntrinsics kf = current_k();
  res.focal_fx = kf.fx;
  res.focal_fy = kf.fy;

  Rng rng_eval = master_.fork(77);
  double acc = 0.0;
  for (int li = 0; li < m_; ++li) {
    const Image rendered = render_frame(store_, cfg_.field, "nerf", res.poses[train_[li]],
                                        kf, w_, h_, rc_, rng_eval);
    acc += psnr(rendered, scene_.images[train_[li]]);
  }
  res.train_psnr = acc / m_;
  res.metrics_csv = csv_.str();

  if (!cfg_.out_dir.empty()) {
    ensure_directory(cfg_.out_dir);
    csv_.save(cfg_.out_dir + "/train_metrics.csv");
    store_.save(cfg_.out_dir + "/params.ckpt");
    write_pose_array(cfg_.out_dir + "/poses.json", res.poses);
  }
  return res;
}

JointResult run_mode(const ScenePackage& scene, const JointConfig& cfg,
                     diff::ParamStore& store, Mode mode) {
  Engine engine(scene, cfg, store, mode);
  return engine.run();
}

}  // namespace

JointResult train_joint(const ScenePackage& scene, const JointConfig& cfg,
                        diff::ParamStore& store) {
  return run_mode(scene, cfg, store, Mode::Joint);
}

JointResult train_joint_nopose(const ScenePackage& scene, const JointConfig& cfg,
                               diff::ParamStore& store) {
  return run_mode(scene, cfg, store, Mode::NoPose);
}

JointResult train_joint_e2e(const ScenePackage& scene, const JointConfig& cfg,
                            diff::ParamStore& store) {
  return run_mode(scene, cfg, store, Mode::E2E);
}

JointResult train_field_frozen(const ScenePackage& scene, const JointConfig& cfg,
                               diff::ParamStore& store) {
  return run_mode(scene, cfg, store, Mode::Frozen);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalReport run_eval(const ScenePackage& scene, diff::ParamStore& store,
                    const JointConfig& cfg, const std::vector<RigidTransform>& poses,
                    const std::vector<int>& views, std::uint64_t seed) {
  validate_scene(scene);
  if (views.empty()) throw std::invalid_argument("run_eval: no views requested");
  if (poses.size() != scene.images.size())
    throw std::invalid_argument("run_eval: pose count must match frame count");
  const int n = static_cast<int>(scene.images.size());
  for (int v : views)
    if (v < 0 || v >= n) throw std::invalid_argument("run_eval: view index out of range");

  const int w = scene.images[0].width, h = scene.images[0].height;
  CameraIntrinsics k = scene.intrinsics;
  if (store.has("cam.f")) {
    const diff::Tensor& f = store.value("cam.f");
    k = CameraIntrinsics(f.at(0, 0), f.at(0, 1), w / 2.0, h / 2.0);
  }
  RenderConfig rc = cfg.render;
  rc.near = scene.near;
  rc.far = scene.far;
  Rng rng(hash_combine(seed, 0x6576616cull));

  EvalReport report;
  CsvWriter csv(std::vector<std::string>{"view", "psnr_db", "ssim"});
  for (int v : views) {
    const Image rendered = render_frame(store, cfg.field, "nerf", poses[v], k, w, h, rc, rng);
    EvalRow row;
    row.view = v;
    row.psnr = psnr(rendered, scene.images[v]);
    row.ssim = ssim(rendered, scene.images[v]);
    report.rows.push_back(row);
    report.mean_psnr += row.psnr;
    report.mean_ssim += row.ssim;
    csv.add_row({static_cast<double>(v), row.psnr, row.ssim});
  }
  report.mean_psnr /= static_cast<double>(views.size());
  report.mean_ssim /= static_cast<double>(views.size());
  csv.add_row({-1.0, report.mean_psnr, report.mean_ssim});

  // Pose accuracy is a property of the whole trajectory, so the gauge is
  // fitted over every frame rather than the evaluated subset (which may be
  // too small to fix a similarity transform).
  if (!scene.gt_poses.empty() && n >= 3) {
    const PoseAlignment align = align_pose_sets(poses, scene.gt_poses);
    double mean = 0.0, rms = 0.0, cen = 0.0;
    for (double e : align.rotation_errors_rad) {
      mean += e;
      rms += e * e;
    }
    for (double e : align.center_errors) cen += e;
    const double nn = static_cast<double>(align.rotation_errors_rad.size());
    report.rot_err_mean_deg = rad2deg(mean / nn);
    report.rot_err_rms_deg = rad2deg(std::sqrt(rms / nn));
    report.center_err_mean = cen / nn;
  }
  report.csv = csv.str();
  return report;
}

}  // namespace posefield
