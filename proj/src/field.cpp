#include "posefield/field.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace posefield {

using diff::Activation;
using diff::ParamStore;
using diff::Tape;
using diff::Tensor;

namespace {

// Moments of the uniform cone slice in ray-parameter units; single source of
// truth for both the scalar and the batched render paths.
void frustum_moments(double t_mu, double t_delta, double r_scale, double* mu_t,
                     double* sigma_t2, double* sigma_r2) {
  const double d2 = t_delta * t_delta;
  const double denom = 3.0 * t_mu * t_mu + d2;
  if (denom <= 0.0) {  // zero-width frustum at the origin
    *mu_t = t_mu;
    *sigma_t2 = 0.0;
    *sigma_r2 = 0.0;
    return;
  }
  *mu_t = t_mu + 2.0 * t_mu * d2 / denom;
  *sigma_t2 = std::max(
      0.0, d2 / 3.0 - 4.0 * d2 * d2 * (12.0 * t_mu * t_mu - d2) / (15.0 * denom * denom));
  *sigma_r2 = r_scale * r_scale *
              std::max(0.0, t_mu * t_mu / 4.0 + 5.0 * d2 / 12.0 -
                                4.0 * d2 * d2 / (15.0 * denom));
}

void validate_encoding(const EncodingConfig& cfg) {
  if (cfg.octaves < 1) throw std::invalid_argument("encoding: octaves must be >= 1");
  if (!(cfg.slope_b > 0.0)) throw std::invalid_argument("encoding: slope_b must be > 0");
}

void validate_render(const RenderConfig& rc) {
  if (!(rc.near > 0.0)) throw std::invalid_argument("render: near must be > 0");
  if (!(rc.far > rc.near)) throw std::invalid_argument("render: far must exceed near");
  if (rc.samples_per_level < 2)
    throw std::invalid_argument("render: need at least 2 samples per level");
  for (int i = 0; i < 3; ++i)
    if (rc.background[i] < 0.0 || rc.background[i] > 1.0)
      throw std::invalid_argument("render: background must be in [0,1]");
}

// S+1 ascending interval edges, stratified in inverse depth.
std::vector<double> stratified_edges(Rng& rng, double near, double far, int samples) {
  const int m = samples + 1;
  std::vector<double> edges(m);
  const double inv_near = 1.0 / near, inv_far = 1.0 / far;
  for (int j = 0; j < m; ++j) {
    const double s = (j + rng.uniform()) / m;
    edges[j] = 1.0 / (inv_near + s * (inv_far - inv_near));
  }
  return edges;
}

// Inverse-CDF resampling of the coarse intervals: weights are max-blurred and
// padded so nothing collapses to measure zero, then S+1 stratified quantiles
// are mapped through the piecewise-linear CDF.
std::vector<double> fine_edges(Rng& rng, const std::vector<double>& edges,
                               const std::vector<double>& w) {
  const int s = static_cast<int>(w.size());
  std::vector<double> blurred(s);
  auto at = [&](int i) { return (i < 0 || i >= s) ? 0.0 : std::max(w[i], 0.0); };
  double total = 0.0;
  for (int i = 0; i < s; ++i) {
    blurred[i] = 0.5 * (std::max(at(i - 1), at(i)) + std::max(at(i), at(i + 1))) + 0.01;
    total += blurred[i];
  }
  std::vector<double> cdf(s + 1, 0.0);
  for (int i = 0; i < s; ++i) cdf[i + 1] = cdf[i] + blurred[i] / total;
  cdf[s] = 1.0;

  const int m = s + 1;
  std::vector<double> out(m);
  int seg = 0;
  for (int j = 0; j < m; ++j) {
    const double u = (j + rng.uniform()) / m;
    while (seg + 1 < s && cdf[seg + 1] <= u) ++seg;
    const double span = cdf[seg + 1] - cdf[seg];
    const double frac = span > 0.0 ? (u - cdf[seg]) / span : 0.5;
    out[j] = edges[seg] + frac * (edges[seg + 1] - edges[seg]);
  }
  return out;
}

struct LevelNodes {
  int color = -1, depth = -1, wsum = -1, weights = -1;
};

struct SharedRayNodes {
  int o_rep = -1, d_rep = -1, d2 = -1, inv_n2 = -1, dnorm = -1;
  int ones_rows = -1, ones_cols3 = -1;  // (nS)x1 and (nS)x3 of ones
};

LevelNodes build_level(Tape& tape, const FieldConfig& cfg, const std::string& prefix,
                       const SharedRayNodes& sh, const std::vector<std::vector<double>>& edges,
                       const std::vector<double>& radii, const RenderConfig& rc) {
  const int n = static_cast<int>(edges.size());
  const int s = rc.samples_per_level;
  Tensor c_mu_t(n * s, 1), c_st2(n * s, 1), c_sr2(n * s, 1), c_dt(n * s, 1), c_tmid(n * s, 1);
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < s; ++i) {
      const double e0 = edges[r][i], e1 = edges[r][i + 1];
      double mu_t = 0.0, st2 = 0.0, sr2 = 0.0;
      frustum_moments(0.5 * (e0 + e1), 0.5 * (e1 - e0), radii[r], &mu_t, &st2, &sr2);
      const int row = r * s + i;
      c_mu_t.at(row, 0) = mu_t;
      c_st2.at(row, 0) = st2;
      c_sr2.at(row, 0) = sr2;
      c_dt.at(row, 0) = e1 - e0;
      c_tmid.at(row, 0) = 0.5 * (e0 + e1);
    }
  }

  const int mu = tape.add(sh.o_rep, tape.mul_colvec(sh.d_rep, tape.constant(c_mu_t)));
  const int radial = tape.sub(sh.ones_cols3, tape.mul_colvec(sh.d2, sh.inv_n2));
  const int cov = tape.add(tape.mul_colvec(sh.d2, tape.constant(c_st2)),
                           tape.mul_colvec(radial, tape.constant(c_sr2)));

  int feats = -1;
  for (int k = 0; k < cfg.enc.octaves; ++k) {
    const double freq = std::ldexp(1.0, k);  // 2^k
    const int phase = tape.mul_scalar(mu, freq);
    const int damp = tape.exp(tape.mul_scalar(cov, -0.5 * freq * freq));
    int block = tape.concat_cols(tape.mul(tape.sin(phase), damp),
                                 tape.mul(tape.cos(phase), damp));
    const double aw = anneal_weight(k, cfg.enc);
    if (aw != 1.0) block = tape.mul_scalar(block, aw);
    feats = k ? tape.concat_cols(feats, block) : block;
  }

  const int trunk = tape.mlp_forward(prefix + ".trunk", cfg.layers, feats, Activation::ReLU);
  const int sigma = tape.softplus(tape.affine(trunk, tape.param(prefix + ".sigma.w"),
                                              tape.param(prefix + ".sigma.b")));
  const int rgb = tape.sigmoid(tape.affine(trunk, tape.param(prefix + ".rgb.w"),
                                           tape.param(prefix + ".rgb.b")));

  const int delta = tape.mul(tape.constant(c_dt), sh.dnorm);
  const int tau = tape.mul(sigma, delta);
  const int trans = tape.exp(tape.neg(tape.cumsum_excl_rows(tau, s)));
  const int alpha = tape.sub(sh.ones_rows, tape.exp(tape.neg(tau)));
  const int w = tape.mul(trans, alpha);

  LevelNodes out;
  out.weights = w;
  out.wsum = tape.sum_row_blocks(w, s);
  Tensor bg(1, 3);
  bg.at(0, 0) = rc.background[0];
  bg.at(0, 1) = rc.background[1];
  bg.at(0, 2) = rc.background[2];
  const int miss = tape.sub(tape.constant(Tensor::constant(n, 1, 1.0)), out.wsum);
  out.color = tape.add(tape.sum_row_blocks(tape.mul_colvec(rgb, w), s),
                       tape.matmul(miss, tape.constant(bg)));
  out.depth = tape.div(tape.sum_row_blocks(tape.mul(w, tape.constant(c_tmid)), s),
                       tape.clamp_min(out.wsum, rc.depth_eps));
  return out;
}

}  // namespace

GaussianRegion frustum_to_gaussian(const ConicalFrustum& f) {
  if (f.t1 < f.t0 || f.t0 < 0.0)
    throw std::invalid_argument("frustum: need t1 >= t0 >= 0");
  if (f.radius_scale < 0.0) throw std::invalid_argument("frustum: radius scale must be >= 0");
  const double n2 = f.axis.squaredNorm();
  if (n2 <= 0.0) throw std::invalid_argument("frustum: axis must be nonzero");

  double mu_t = 0.0, st2 = 0.0, sr2 = 0.0;
  frustum_moments(0.5 * (f.t0 + f.t1), 0.5 * (f.t1 - f.t0), f.radius_scale, &mu_t, &st2,
                  &sr2);
  GaussianRegion g;
  g.mean = f.origin + mu_t * f.axis;
  for (int i = 0; i < 3; ++i) {
    const double axial_frac = f.axis[i] * f.axis[i] / n2;
    g.cov[i] = st2 * f.axis[i] * f.axis[i] + sr2 * (1.0 - axial_frac);
  }
  return g;
}

double anneal_weight(int octave, const EncodingConfig& cfg) {
  validate_encoding(cfg);
  return std::exp(std::min((cfg.anneal_t - octave) / cfg.slope_b, 0.0));
}

Eigen::VectorXd ipe_encode(const GaussianRegion& g, const EncodingConfig& cfg) {
  validate_encoding(cfg);
  for (int i = 0; i < 3; ++i)
    if (g.cov[i] < 0.0) throw std::invalid_argument("ipe: covariance must be >= 0");
  Eigen::VectorXd out(6 * cfg.octaves);
  for (int k = 0; k < cfg.octaves; ++k) {
    const double freq = std::ldexp(1.0, k);
    for (int i = 0; i < 3; ++i) {
      const double damp = std::exp(-0.5 * freq * freq * g.cov[i]);
      out[6 * k + i] = std::sin(freq * g.mean[i]) * damp;
      out[6 * k + 3 + i] = std::cos(freq * g.mean[i]) * damp;
    }
  }
  return out;
}

Eigen::VectorXd annealed_encode(const GaussianRegion& g, const EncodingConfig& cfg) {
  Eigen::VectorXd out = ipe_encode(g, cfg);
  for (int k = 0; k < cfg.octaves; ++k) out.segment(6 * k, 6) *= anneal_weight(k, cfg);
  return out;
}

void init_field_params(ParamStore& store, const FieldConfig& cfg, const std::string& prefix,
                       Rng& rng) {
  if (cfg.layers < 1 || cfg.hidden < 1)
    throw std::invalid_argument("field: layers and hidden must be positive");
  validate_encoding(cfg.enc);
  int in = 6 * cfg.enc.octaves;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string ls = std::to_string(l);
    store.add(prefix + ".trunk.w" + ls,
              Tensor::normal(rng, in, cfg.hidden, std::sqrt(2.0 / in)));
    store.add(prefix + ".trunk.b" + ls, Tensor::zeros(1, cfg.hidden), false);
    in = cfg.hidden;
  }
  store.add(prefix + ".sigma.w", Tensor::normal(rng, cfg.hidden, 1, std::sqrt(1.0 / cfg.hidden)));
  Tensor sb = Tensor::zeros(1, 1);
  sb.at(0, 0) = -1.0;  // start nearly transparent
  store.add(prefix + ".sigma.b", sb, false);
  store.add(prefix + ".rgb.w", Tensor::normal(rng, cfg.hidden, 3, std::sqrt(1.0 / cfg.hidden)));
  store.add(prefix + ".rgb.b", Tensor::zeros(1, 3), false);
}

RenderBatch render_rays(Tape& tape, const FieldConfig& cfg, const std::string& prefix,
                        int origins, int dirs, const std::vector<double>& radii,
                        const RenderConfig& rc, Rng& rng) {
  validate_render(rc);
  validate_encoding(cfg.enc);
  const int n = tape.value(origins).rows;
  if (tape.value(origins).cols != 3 || tape.value(dirs).cols != 3 ||
      tape.value(dirs).rows != n)
    throw std::invalid_argument("render: origins and dirs must be matching n x 3");
  if (static_cast<int>(radii.size()) != n)
    throw std::invalid_argument("render: one radius per ray required");
  const int s = rc.samples_per_level;

  SharedRayNodes sh;
  sh.o_rep = tape.repeat_rows_blocked(origins, s);
  sh.d_rep = tape.repeat_rows_blocked(dirs, s);
  sh.d2 = tape.square(sh.d_rep);
  const int n2 = tape.clamp_min(tape.row_sum(sh.d2), 1e-18);
  sh.inv_n2 = tape.recip(n2);
  sh.dnorm = tape.sqrt(n2);
  sh.ones_rows = tape.constant(Tensor::constant(n * s, 1, 1.0));
  sh.ones_cols3 = tape.constant(Tensor::constant(n * s, 3, 1.0));

  std::vector<std::vector<double>> coarse(n);
  for (int r = 0; r < n; ++r) coarse[r] = stratified_edges(rng, rc.near, rc.far, s);
  const LevelNodes lo = build_level(tape, cfg, prefix, sh, coarse, radii, rc);

  const Tensor wv = tape.value(lo.weights);  // copied: sampling is values-only
  std::vector<std::vector<double>> fine(n);
  for (int r = 0; r < n; ++r) {
    std::vector<double> w(s);
    for (int i = 0; i < s; ++i) w[i] = wv.at(r * s + i, 0);
    fine[r] = fine_edges(rng, coarse[r], w);
  }
  const LevelNodes hi = build_level(tape, cfg, prefix, sh, fine, radii, rc);

  RenderBatch out;
  out.color = hi.color;
  out.depth = hi.depth;
  out.weight_sum = hi.wsum;
  out.coarse_color = lo.color;
  return out;
}

CompositeResult composite_samples(const std::vector<double>& density,
                                  const std::vector<Vec3>& color,
                                  const std::vector<double>& t_edges, double dir_norm,
                                  const RenderConfig& rc) {
  const size_t s = density.size();
  if (color.size() != s || t_edges.size() != s + 1)
    throw std::invalid_argument("composite: need s densities, s colors, s+1 edges");
  CompositeResult res;
  double accum = 0.0, depth_num = 0.0;
  for (size_t i = 0; i < s; ++i) {
    const double tau = density[i] * (t_edges[i + 1] - t_edges[i]) * dir_norm;
    const double trans = std::exp(-accum);
    const double w = trans * (1.0 - std::exp(-tau));
    res.color += w * color[i];
    depth_num += w * 0.5 * (t_edges[i] + t_edges[i + 1]);
    res.weight_sum += w;
    accum += tau;
  }
  res.color += (1.0 - res.weight_sum) * rc.background;
  res.depth = depth_num / std::max(res.weight_sum, rc.depth_eps);
  return res;
}

double pixel_radius(const CameraIntrinsics& K) { return 2.0 / std::sqrt(12.0) / K.fx; }

ConicalFrustum pixel_cone(const RigidTransform& pose, const CameraIntrinsics& K, double px,
                          double py) {
  ConicalFrustum f;
  f.origin = pose.camera_center();
  const Vec3 dir_cam((px - K.cx) / K.fx, (py - K.cy) / K.fy, 1.0);
  f.axis = pose.rotation.conjugate().rotate(dir_cam);
  f.radius_scale = pixel_radius(K);
  return f;
}

RayRender render_ray(ParamStore& store, const FieldConfig& cfg, const std::string& prefix,
                     const RigidTransform& pose, const CameraIntrinsics& K, double px,
                     double py, const RenderConfig& rc, Rng& rng) {
  const ConicalFrustum cone = pixel_cone(pose, K, px, py);
  Tape tape(&store);
  Tensor o(1, 3), d(1, 3);
  for (int i = 0; i < 3; ++i) {
    o.at(0, i) = cone.origin[i];
    d.at(0, i) = cone.axis[i];
  }
  const RenderBatch batch = render_rays(tape, cfg, prefix, tape.constant(o),
                                        tape.constant(d), {cone.radius_scale}, rc, rng);
  RayRender out;
  const Tensor cv = tape.value(batch.color);
  out.color = Vec3(cv.at(0, 0), cv.at(0, 1), cv.at(0, 2));
  out.depth = tape.value(batch.depth).at(0, 0);
  if (tape.value(batch.weight_sum).at(0, 0) <= 1e-12) {
    out.depth = rc.far;
    out.background_only = true;
  }
  return out;
}

namespace {

int rays_from_dirs(Tape& tape, int quat, int trans, int dirs_cam, RayNodes* out) {
  if (tape.value(quat).rows != 1 || tape.value(quat).cols != 4)
    throw std::invalid_argument("rays: quaternion node must be 1x4");
  if (tape.value(trans).rows != 1 || tape.value(trans).cols != 3)
    throw std::invalid_argument("rays: translation node must be 1x3");
  const int n = tape.value(dirs_cam).rows;
  const int rot = tape.reshape(tape.quat_to_rotmat(quat), 3, 3);
  out->dirs = tape.matmul(dirs_cam, rot);
  const int center = tape.neg(tape.matmul(trans, rot));
  out->origins = tape.repeat_rows_blocked(center, n);
  return n;
}

}  // namespace

RayNodes make_ray_nodes(Tape& tape, int quat, int trans, const CameraIntrinsics& K,
                        const std::vector<std::pair<double, double>>& pixels) {
  const int n = static_cast<int>(pixels.size());
  if (n == 0) throw std::invalid_argument("rays: empty pixel list");
  Tensor dirs_cam(n, 3);
  for (int r = 0; r < n; ++r) {
    dirs_cam.at(r, 0) = (pixels[r].first - K.cx) / K.fx;
    dirs_cam.at(r, 1) = (pixels[r].second - K.cy) / K.fy;
    dirs_cam.at(r, 2) = 1.0;
  }
  RayNodes out;
  rays_from_dirs(tape, quat, trans, tape.constant(dirs_cam), &out);
  return out;
}

RayNodes make_ray_nodes(Tape& tape, int quat, int trans, int focal, double cx, double cy,
                        const std::vector<std::pair<double, double>>& pixels) {
  const int n = static_cast<int>(pixels.size());
  if (n == 0) throw std::invalid_argument("rays: empty pixel list");
  if (tape.value(focal).rows != 1 || tape.value(focal).cols != 2)
    throw std::invalid_argument("rays: focal node must be 1x2");
  Tensor dx(n, 1), dy(n, 1);
  for (int r = 0; r < n; ++r) {
    dx.at(r, 0) = pixels[r].first - cx;
    dy.at(r, 0) = pixels[r].second - cy;
  }
  const int inv_fx = tape.recip(tape.slice_cols(focal, 0, 1));
  const int inv_fy = tape.recip(tape.slice_cols(focal, 1, 2));
  const int xcol = tape.mul_by_scalar_node(tape.constant(dx), inv_fx);
  const int ycol = tape.mul_by_scalar_node(tape.constant(dy), inv_fy);
  const int ones = tape.constant(Tensor::constant(n, 1, 1.0));
  const int dirs_cam = tape.concat_cols(tape.concat_cols(xcol, ycol), ones);
  RayNodes out;
  rays_from_dirs(tape, quat, trans, dirs_cam, &out);
  return out;
}

int loss_rgb(Tape& tape, int rendered_color, const std::vector<Vec3>& targets) {
  const Tensor& cv = tape.value(rendered_color);
  if (cv.cols != 3 || cv.rows != static_cast<int>(targets.size()))
    throw std::invalid_argument("loss_rgb: one 3-channel target per ray required");
  Tensor t(cv.rows, 3);
  for (int r = 0; r < cv.rows; ++r)
    for (int c = 0; c < 3; ++c) t.at(r, c) = targets[r][c];
  return tape.sum(tape.square(tape.sub(rendered_color, tape.constant(t))));
}

}  // namespace posefield
