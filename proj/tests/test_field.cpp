#include <doctest.h>

#include <Eigen/Geometry>
#include <Eigen/QR>

#include <cmath>
#include <utility>
#include <vector>

#include "posefield/field.hpp"

using namespace posefield;
using diff::ParamStore;
using diff::Tape;
using diff::Tensor;

namespace {

FieldConfig small_field(int octaves = 3, int layers = 2, int hidden = 12) {
  FieldConfig cfg;
  cfg.layers = layers;
  cfg.hidden = hidden;
  cfg.enc.octaves = octaves;
  return cfg;
}

ParamStore make_field_store(const FieldConfig& cfg, uint64_t seed) {
  ParamStore store;
  Rng rng(seed);
  init_field_params(store, cfg, "nerf", rng);
  return store;
}

std::pair<Vec3, Vec3> orthobasis(const Vec3& d) {
  const Vec3 dn = d.normalized();
  const Vec3 ref = std::abs(dn.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 e1 = dn.cross(ref).normalized();
  return {e1, dn.cross(e1)};
}

// 10^6-sample uniform draw over the solid frustum: t-marginal proportional to
// the squared cone radius, then uniform over the perpendicular disc.
void frustum_mc(const ConicalFrustum& f, int samples, Vec3* mean, Vec3* var) {
  Rng rng(777);
  const auto [e1, e2] = orthobasis(f.axis);
  Vec3 sum = Vec3::Zero(), sum_sq = Vec3::Zero();
  const double c0 = f.t0 * f.t0 * f.t0, c1 = f.t1 * f.t1 * f.t1;
  for (int i = 0; i < samples; ++i) {
    const double t = std::cbrt(c0 + rng.uniform() * (c1 - c0));
    const double rad = f.radius_scale * t * std::sqrt(rng.uniform());
    const double phi = 2.0 * kPi * rng.uniform();
    const Vec3 p =
        f.origin + t * f.axis + rad * (std::cos(phi) * e1 + std::sin(phi) * e2);
    sum += p;
    sum_sq += p.cwiseProduct(p);
  }
  *mean = sum / samples;
  *var = sum_sq / samples - mean->cwiseProduct(*mean);
}

double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-12);
}

std::vector<std::pair<double, double>> pixel_center_grid(int w, int h) {
  std::vector<std::pair<double, double>> px;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) px.push_back({x + 0.5, y + 0.5});
  return px;
}

}  // namespace

TEST_SUITE("field") {

TEST_CASE("frustum moments: degenerate cases and input validation") {
  ConicalFrustum f;
  f.origin = Vec3(0.2, -0.4, 1.0);
  f.axis = Vec3(0.3, 0.5, -0.8);
  f.radius_scale = 0.0;
  f.t0 = f.t1 = 1.7;
  const GaussianRegion g = frustum_to_gaussian(f);
  CHECK((g.mean - (f.origin + 1.7 * f.axis)).norm() <= 1e-15);
  CHECK(g.cov.norm() == 0.0);

  f.t0 = f.t1 = 0.0;  // point at the apex: the 0/0 guard
  const GaussianRegion apex = frustum_to_gaussian(f);
  CHECK((apex.mean - f.origin).norm() == 0.0);
  CHECK(apex.cov.norm() == 0.0);

  f.t0 = 1.0;
  f.t1 = 0.5;
  CHECK_THROWS_AS(frustum_to_gaussian(f), std::invalid_argument);
  f.t0 = -0.1;
  f.t1 = 0.5;
  CHECK_THROWS_AS(frustum_to_gaussian(f), std::invalid_argument);
  f.t0 = 0.1;
  f.radius_scale = -1.0;
  CHECK_THROWS_AS(frustum_to_gaussian(f), std::invalid_argument);
  f.radius_scale = 0.1;
  f.axis = Vec3::Zero();
  CHECK_THROWS_AS(frustum_to_gaussian(f), std::invalid_argument);
}

TEST_CASE("frustum moments match Monte-Carlo integration over the cone") {
  ConicalFrustum f;
  f.origin = Vec3(0.2, -0.1, 0.3);
  f.axis = Vec3(0.4, -0.7, 0.6);
  f.radius_scale = 0.12;
  f.t0 = 0.9;
  f.t1 = 1.6;
  const GaussianRegion g = frustum_to_gaussian(f);

  Vec3 mc_mean, mc_var;
  frustum_mc(f, 1000000, &mc_mean, &mc_var);
  for (int i = 0; i < 3; ++i) {
    CHECK(rel_err(g.mean[i], mc_mean[i]) <= 0.02);
    CHECK(rel_err(g.cov[i], mc_var[i]) <= 0.02);
  }

  // Wide, short frustum stresses the stable form from the other side.
  f.t0 = 0.25;
  f.t1 = 1.4;
  f.radius_scale = 0.3;
  const GaussianRegion g2 = frustum_to_gaussian(f);
  frustum_mc(f, 1000000, &mc_mean, &mc_var);
  for (int i = 0; i < 3; ++i) {
    CHECK(rel_err(g2.mean[i], mc_mean[i]) <= 0.02);
    CHECK(rel_err(g2.cov[i], mc_var[i]) <= 0.02);
  }
}

TEST_CASE("scaling the axis scales the mean offset and axial deviation") {
  ConicalFrustum f;
  f.origin = Vec3(0.1, 0.2, -0.3);
  f.axis = Vec3(0.5, -0.6, 0.7);
  f.radius_scale = 0.08;
  f.t0 = 0.8;
  f.t1 = 1.5;
  const double s = 2.5;
  const GaussianRegion a = frustum_to_gaussian(f);
  ConicalFrustum fs = f;
  fs.axis *= s;
  const GaussianRegion b = frustum_to_gaussian(fs);

  CHECK(((b.mean - f.origin) - s * (a.mean - f.origin)).norm() <= 1e-12);

  // Recover (sigma_t^2, sigma_r^2) from the lifted diagonal by least squares;
  // the axial world variance sigma_t^2 * |d|^2 must scale by s^2.
  auto split = [](const GaussianRegion& g, const Vec3& axis) {
    Eigen::Matrix<double, 3, 2> basis;
    const double n2 = axis.squaredNorm();
    for (int i = 0; i < 3; ++i) {
      basis(i, 0) = axis[i] * axis[i];
      basis(i, 1) = 1.0 - axis[i] * axis[i] / n2;
    }
    return Eigen::Vector2d(basis.colPivHouseholderQr().solve(g.cov.matrix()));
  };
  const Eigen::Vector2d ab = split(a, f.axis);
  const Eigen::Vector2d bb = split(b, fs.axis);
  const double axial_a = ab[0] * f.axis.squaredNorm();
  const double axial_b = bb[0] * fs.axis.squaredNorm();
  CHECK(axial_b == doctest::Approx(s * s * axial_a).epsilon(1e-9));
  CHECK(bb[1] == doctest::Approx(ab[1]).epsilon(1e-9));  // radial part unchanged
}

TEST_CASE("ipe equals plain positional encoding at zero covariance") {
  GaussianRegion g;
  g.mean = Vec3(0.37, -1.42, 2.6);
  g.cov = Vec3::Zero();
  EncodingConfig cfg;
  cfg.octaves = 5;
  const Eigen::VectorXd enc = ipe_encode(g, cfg);
  REQUIRE(enc.size() == 30);
  for (int k = 0; k < 5; ++k) {
    const double freq = std::ldexp(1.0, k);
    for (int i = 0; i < 3; ++i) {
      CHECK(enc[6 * k + i] == doctest::Approx(std::sin(freq * g.mean[i])).epsilon(1e-12));
      CHECK(enc[6 * k + 3 + i] ==
            doctest::Approx(std::cos(freq * g.mean[i])).epsilon(1e-12));
    }
  }

  // Zero-mean region: sin components vanish, cos components are pure damping,
  // nonincreasing toward zero as the octave climbs.
  g.mean = Vec3::Zero();
  g.cov = Vec3(0.8, 0.8, 0.8);
  const Eigen::VectorXd damped = ipe_encode(g, cfg);
  double prev = 1.0;
  for (int k = 0; k < 5; ++k) {
    const double freq = std::ldexp(1.0, k);
    const double expect = std::exp(-0.5 * freq * freq * 0.8);
    for (int i = 0; i < 3; ++i) {
      CHECK(damped[6 * k + i] == 0.0);
      CHECK(damped[6 * k + 3 + i] == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(expect < prev);
    prev = expect;
  }

  g.cov = Vec3(-0.1, 0, 0);
  CHECK_THROWS_AS(ipe_encode(g, cfg), std::invalid_argument);
  cfg.octaves = 0;
  g.cov = Vec3::Zero();
  CHECK_THROWS_AS(ipe_encode(g, cfg), std::invalid_argument);
}

TEST_CASE("ipe matches Monte-Carlo trigonometric expectations") {
  GaussianRegion g;
  g.mean = Vec3(0.3, -0.8, 1.1);
  g.cov = Vec3(0.2, 0.05, 0.4);
  EncodingConfig cfg;
  cfg.octaves = 4;
  const Eigen::VectorXd enc = ipe_encode(g, cfg);

  Rng rng(31337);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(24);
  const int n = 1000000;
  for (int it = 0; it < n; ++it) {
    Vec3 x;
    for (int i = 0; i < 3; ++i) x[i] = g.mean[i] + std::sqrt(g.cov[i]) * rng.normal();
    for (int k = 0; k < 4; ++k) {
      const double freq = std::ldexp(1.0, k);
      for (int i = 0; i < 3; ++i) {
        acc[6 * k + i] += std::sin(freq * x[i]);
        acc[6 * k + 3 + i] += std::cos(freq * x[i]);
      }
    }
  }
  acc /= n;
  for (int j = 0; j < 24; ++j) CHECK(std::abs(acc[j] - enc[j]) <= 1e-2);
}

TEST_CASE("anneal weights unlock octaves on the exponential schedule") {
  EncodingConfig cfg;
  cfg.octaves = 6;
  cfg.slope_b = 10.0;

  cfg.anneal_t = 0.0;
  for (int k = 0; k < 6; ++k)
    CHECK(anneal_weight(k, cfg) == doctest::Approx(std::exp(-k / 10.0)).epsilon(1e-12));

  GaussianRegion g;
  g.mean = Vec3(0.4, 0.9, -1.3);
  g.cov = Vec3(0.01, 0.02, 0.03);
  cfg.anneal_t = 7.0;  // >= octaves - 1: fully open
  const Eigen::VectorXd open = annealed_encode(g, cfg);
  const Eigen::VectorXd plain = ipe_encode(g, cfg);
  CHECK((open - plain).lpNorm<Eigen::Infinity>() == 0.0);

  for (int k = 0; k < 6; ++k) {
    double prev = 0.0;
    for (double t = 0.0; t <= 6.0; t += 0.25) {
      cfg.anneal_t = t;
      const double w = anneal_weight(k, cfg);
      CHECK(w > 0.0);
      CHECK(w <= 1.0);
      CHECK(w >= prev);          // monotone unlock
      CHECK((w == 1.0) == (t >= k));
      prev = w;
    }
  }

  cfg.slope_b = 0.0;
  CHECK_THROWS_AS(anneal_weight(0, cfg), std::invalid_argument);
}

TEST_CASE("compositing: opaque slab depth, telescoping, and background") {
  RenderConfig rc;
  rc.near = 1.0;
  rc.far = 3.0;
  rc.background = Vec3(0.1, 0.2, 0.3);
  const int s = 40;
  std::vector<double> edges(s + 1);
  for (int i = 0; i <= s; ++i) edges[i] = 1.0 + 2.0 * i / s;
  const double spacing = 2.0 / s;

  const double slab_front = 1.8, slab_back = 2.2;
  std::vector<double> density(s);
  std::vector<Vec3> color(s, Vec3(0.9, 0.1, 0.1));
  for (int i = 0; i < s; ++i) {
    const double mid = 0.5 * (edges[i] + edges[i + 1]);
    density[i] = (mid >= slab_front && mid <= slab_back) ? 1e4 : 0.0;
  }
  const CompositeResult slab = composite_samples(density, color, edges, 1.0, rc);
  CHECK(std::abs(slab.depth - slab_front) <= spacing);
  CHECK(slab.weight_sum == doctest::Approx(1.0).epsilon(1e-9));
  CHECK((slab.color - Vec3(0.9, 0.1, 0.1)).norm() <= 1e-9);

  // Semi-transparent medium: weights telescope to 1 - final transmittance.
  double tau_total = 0.0;
  for (int i = 0; i < s; ++i) {
    density[i] = 0.3 + 0.1 * std::sin(2.0 * i);
    tau_total += density[i] * (edges[i + 1] - edges[i]) * 1.7;
  }
  const CompositeResult med = composite_samples(density, color, edges, 1.7, rc);
  CHECK(med.weight_sum == doctest::Approx(1.0 - std::exp(-tau_total)).epsilon(1e-12));
  CHECK(med.weight_sum < 1.0);

  std::fill(density.begin(), density.end(), 0.0);
  const CompositeResult empty = composite_samples(density, color, edges, 1.0, rc);
  CHECK((empty.color - rc.background).norm() == 0.0);
  CHECK(empty.weight_sum == 0.0);

  CHECK_THROWS_AS(composite_samples({1.0}, color, edges, 1.0, rc), std::invalid_argument);
}

TEST_CASE("render: transparent field hits the background and is flagged") {
  const FieldConfig cfg = small_field();
  ParamStore store = make_field_store(cfg, 11);
  store.value("nerf.sigma.w").v.setZero();
  store.value("nerf.sigma.b").at(0, 0) = -100.0;  // softplus -> ~1e-44 density

  RenderConfig rc;
  rc.background = Vec3(0.25, 0.5, 0.75);
  RigidTransform pose = RigidTransform::identity();
  CameraIntrinsics K;
  K.fx = K.fy = 48.0;
  K.cx = K.cy = 16.0;

  Rng rng(5);
  const RayRender r = render_ray(store, cfg, "nerf", pose, K, 16.5, 16.5, rc, rng);
  CHECK(r.background_only);
  CHECK(r.depth == rc.far);
  CHECK((r.color - rc.background).lpNorm<Eigen::Infinity>() <= 1e-30);
}

TEST_CASE("render: dense uniform field saturates near the near plane") {
  const FieldConfig cfg = small_field();
  ParamStore store = make_field_store(cfg, 12);
  store.value("nerf.sigma.w").v.setZero();
  store.value("nerf.sigma.b").at(0, 0) = 50.0;  // about 50 per unit length
  store.value("nerf.rgb.w").v.setZero();
  store.value("nerf.rgb.b").v.setZero();  // sigmoid -> exactly 0.5 gray

  RenderConfig rc;
  RigidTransform pose = RigidTransform::identity();
  CameraIntrinsics K;
  K.fx = K.fy = 48.0;
  K.cx = K.cy = 16.0;

  Rng rng(6);
  const RayRender r = render_ray(store, cfg, "nerf", pose, K, 10.5, 20.5, rc, rng);
  CHECK_FALSE(r.background_only);
  CHECK(r.depth >= rc.near);
  CHECK(r.depth <= rc.near + 0.1);
  CHECK((r.color - Vec3(0.5, 0.5, 0.5)).lpNorm<Eigen::Infinity>() <= 1e-6);

  Rng ra(42), rb(42);
  const RayRender a = render_ray(store, cfg, "nerf", pose, K, 3.5, 7.5, rc, ra);
  const RayRender b = render_ray(store, cfg, "nerf", pose, K, 3.5, 7.5, rc, rb);
  CHECK(a.color == b.color);
  CHECK(a.depth == b.depth);
}

TEST_CASE("render: invariant to axis rescaling with compensated bounds") {
  const FieldConfig cfg = small_field(4, 3, 24);
  ParamStore store = make_field_store(cfg, 13);

  Tensor o(2, 3), d(2, 3);
  o.at(0, 0) = 0.1;
  o.at(0, 2) = -0.2;
  o.at(1, 1) = 0.3;
  d.at(0, 0) = 0.05;
  d.at(0, 1) = -0.02;
  d.at(0, 2) = 1.0;
  d.at(1, 0) = -0.03;
  d.at(1, 1) = 0.04;
  d.at(1, 2) = 1.0;
  const double s = 2.5;

  RenderConfig rc;
  rc.samples_per_level = 16;
  Rng r1(99);
  Tape t1(&store);
  const RenderBatch b1 = render_rays(t1, cfg, "nerf", t1.constant(o), t1.constant(d),
                                     {0.01, 0.01}, rc, r1);

  Tensor ds = d;
  ds.v *= s;
  RenderConfig rcs = rc;
  rcs.near = rc.near / s;
  rcs.far = rc.far / s;
  Rng r2(99);
  Tape t2(&store);
  const RenderBatch b2 = render_rays(t2, cfg, "nerf", t2.constant(o), t2.constant(ds),
                                     {0.01 * s, 0.01 * s}, rcs, r2);

  const Tensor c1 = t1.value(b1.color), c2 = t2.value(b2.color);
  const Tensor d1 = t1.value(b1.depth), d2 = t2.value(b2.depth);
  const Tensor w1 = t1.value(b1.weight_sum);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c)
      CHECK(c2.at(r, c) == doctest::Approx(c1.at(r, c)).epsilon(1e-9));
    CHECK(d2.at(r, 0) == doctest::Approx(d1.at(r, 0) / s).epsilon(1e-9));
    CHECK(w1.at(r, 0) >= 0.0);
    CHECK(w1.at(r, 0) <= 1.0 + 1e-12);
  }
}

TEST_CASE("render: doubling samples barely changes a smooth field") {
  const FieldConfig cfg = small_field(4, 3, 24);
  ParamStore store = make_field_store(cfg, 14);
  RigidTransform pose = RigidTransform::identity();
  CameraIntrinsics K;
  K.fx = K.fy = 48.0;
  K.cx = K.cy = 16.0;

  RenderConfig rc32;
  rc32.samples_per_level = 32;
  RenderConfig rc64 = rc32;
  rc64.samples_per_level = 64;
  Rng ra(7), rb(7);
  const RayRender a = render_ray(store, cfg, "nerf", pose, K, 12.5, 9.5, rc32, ra);
  const RayRender b = render_ray(store, cfg, "nerf", pose, K, 12.5, 9.5, rc64, rb);
  CHECK((a.color - b.color).lpNorm<Eigen::Infinity>() <= 1e-2);
}

TEST_CASE("ray nodes reproduce the cone geometry and expose gradients") {
  const FieldConfig cfg = small_field();
  ParamStore store = make_field_store(cfg, 15);
  Rng prng(21);
  RigidTransform pose;
  pose.rotation = random_rotation(prng);
  pose.translation = Vec3(0.4, -0.2, 0.7);
  CameraIntrinsics K;
  K.fx = 52.0;
  K.fy = 44.0;
  K.cx = 15.5;
  K.cy = 16.5;
  const auto pixels = pixel_center_grid(3, 2);

  Tensor q(1, 4), tr(1, 3);
  q.at(0, 0) = pose.rotation.w;
  q.at(0, 1) = pose.rotation.x;
  q.at(0, 2) = pose.rotation.y;
  q.at(0, 3) = pose.rotation.z;
  for (int i = 0; i < 3; ++i) tr.at(0, i) = pose.translation[i];

  store.add("cam.q", q, false);
  store.add("cam.t", tr, false);
  Tensor f(1, 2);
  f.at(0, 0) = K.fx;
  f.at(0, 1) = K.fy;
  store.add("cam.f", f, false);

  Tape tape(&store);
  const RayNodes fixed = make_ray_nodes(tape, tape.param("cam.q"), tape.param("cam.t"), K,
                                        pixels);
  const RayNodes learned =
      make_ray_nodes(tape, tape.param("cam.q"), tape.param("cam.t"), tape.param("cam.f"),
                     K.cx, K.cy, pixels);
  const Tensor od = tape.value(fixed.origins), dd = tape.value(fixed.dirs);
  const Tensor ol = tape.value(learned.origins), dl = tape.value(learned.dirs);
  for (size_t r = 0; r < pixels.size(); ++r) {
    const ConicalFrustum cone = pixel_cone(pose, K, pixels[r].first, pixels[r].second);
    for (int i = 0; i < 3; ++i) {
      const int ri = static_cast<int>(r);
      CHECK(od.at(ri, i) == doctest::Approx(cone.origin[i]).epsilon(1e-12));
      CHECK(dd.at(ri, i) == doctest::Approx(cone.axis[i]).epsilon(1e-12));
      CHECK(ol.at(ri, i) == doctest::Approx(cone.origin[i]).epsilon(1e-12));
      CHECK(dl.at(ri, i) == doctest::Approx(cone.axis[i]).epsilon(1e-12));
    }
  }

  // Pose and intrinsics receive rendering gradients through the ray geometry.
  RenderConfig rc;
  rc.samples_per_level = 8;
  Rng rng(3);
  const std::vector<double> radii(pixels.size(), pixel_radius(K));
  const RenderBatch batch =
      render_rays(tape, cfg, "nerf", learned.origins, learned.dirs, radii, rc, rng);
  const int loss = loss_rgb(tape, batch.color,
                            std::vector<Vec3>(pixels.size(), Vec3(0.9, 0.1, 0.4)));
  store.zero_grad();
  tape.backward(loss);
  CHECK(store.grad("cam.q").v.abs().maxCoeff() > 0.0);
  CHECK(store.grad("cam.t").v.abs().maxCoeff() > 0.0);
  CHECK(store.grad("cam.f").v.abs().maxCoeff() > 0.0);
  CHECK(store.grad("nerf.trunk.w0").v.abs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(make_ray_nodes(tape, tape.param("cam.t"), tape.param("cam.t"), K, pixels),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_ray_nodes(tape, tape.param("cam.q"), tape.param("cam.t"), K, {}),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_ray_nodes(tape, tape.param("cam.q"), tape.param("cam.t"),
                                 tape.param("cam.q"), K.cx, K.cy, pixels),
                  std::invalid_argument);
}

TEST_CASE("loss_rgb closed forms and finite-difference gradients") {
  const FieldConfig cfg = small_field();
  ParamStore store = make_field_store(cfg, 16);
  RenderConfig rc;
  rc.samples_per_level = 6;
  rc.far = 3.0;

  Tensor o(2, 3), d(2, 3);
  d.at(0, 2) = 1.0;
  d.at(1, 0) = 0.05;
  d.at(1, 2) = 1.0;
  const std::vector<double> radii{0.01, 0.01};

  auto eval_loss = [&](bool coarse) {
    Rng rng(17);
    Tape tape(&store);
    const RenderBatch b = render_rays(tape, cfg, "nerf", tape.constant(o), tape.constant(d),
                                      radii, rc, rng);
    const int node = loss_rgb(tape, coarse ? b.coarse_color : b.color,
                              {Vec3(0.25, 0.25, 0.25), Vec3(0.6, 0.3, 0.2)});
    return tape.value(node).at(0, 0);
  };

  // Exact targets give exactly zero; a constant offset gives 3 n eps^2.
  {
    Rng rng(17);
    Tape tape(&store);
    const RenderBatch b = render_rays(tape, cfg, "nerf", tape.constant(o), tape.constant(d),
                                      radii, rc, rng);
    const Tensor cv = tape.value(b.color);
    std::vector<Vec3> exact, offset;
    const double eps = 0.01;
    for (int r = 0; r < 2; ++r) {
      exact.push_back(Vec3(cv.at(r, 0), cv.at(r, 1), cv.at(r, 2)));
      offset.push_back(exact.back() + Vec3(eps, eps, eps));
    }
    CHECK(tape.value(loss_rgb(tape, b.color, exact)).at(0, 0) == 0.0);
    CHECK(tape.value(loss_rgb(tape, b.color, offset)).at(0, 0) ==
          doctest::Approx(3 * 2 * eps * eps).epsilon(1e-12));
    CHECK_THROWS_AS(loss_rgb(tape, b.color, {exact[0]}), std::invalid_argument);
  }

  // Central differences on the coarse head: its sample placement is fixed by
  // the rng, so the tape gradient is the whole derivative.
  {
    Rng rng(17);
    Tape tape(&store);
    const RenderBatch b = render_rays(tape, cfg, "nerf", tape.constant(o), tape.constant(d),
                                      radii, rc, rng);
    const int node = loss_rgb(tape, b.coarse_color,
                              {Vec3(0.25, 0.25, 0.25), Vec3(0.6, 0.3, 0.2)});
    store.zero_grad();
    tape.backward(node);
  }
  const double h = 1e-5;
  for (const std::string name :
       {"nerf.trunk.w0", "nerf.trunk.w1", "nerf.sigma.w", "nerf.sigma.b", "nerf.rgb.w",
        "nerf.rgb.b"}) {
    Tensor& val = store.value(name);
    const int probe = std::min(3, val.rows * val.cols - 1);
    for (int idx = 0; idx <= probe; ++idx) {
      const double saved = val.v[idx];
      val.v[idx] = saved + h;
      const double hi = eval_loss(true);
      val.v[idx] = saved - h;
      const double lo = eval_loss(true);
      val.v[idx] = saved;
      const double fd = (hi - lo) / (2.0 * h);
      const double an = store.grad(name).v[idx];
      CHECK(std::abs(fd - an) <= 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-4}));
    }
  }
}

TEST_CASE("render input validation") {
  const FieldConfig cfg = small_field();
  ParamStore store = make_field_store(cfg, 18);
  Tape tape(&store);
  const int o = tape.constant(Tensor::zeros(2, 3));
  Tensor dv = Tensor::zeros(2, 3);
  dv.at(0, 2) = 1.0;
  dv.at(1, 2) = 1.0;
  const int d = tape.constant(dv);
  Rng rng(1);

  RenderConfig bad;
  bad.near = 0.0;
  CHECK_THROWS_AS(render_rays(tape, cfg, "nerf", o, d, {0.01, 0.01}, bad, rng),
                  std::invalid_argument);
  bad = RenderConfig{};
  bad.far = bad.near;
  CHECK_THROWS_AS(render_rays(tape, cfg, "nerf", o, d, {0.01, 0.01}, bad, rng),
                  std::invalid_argument);
  bad = RenderConfig{};
  bad.samples_per_level = 1;
  CHECK_THROWS_AS(render_rays(tape, cfg, "nerf", o, d, {0.01, 0.01}, bad, rng),
                  std::invalid_argument);
  bad = RenderConfig{};
  bad.background = Vec3(1.5, 0, 0);
  CHECK_THROWS_AS(render_rays(tape, cfg, "nerf", o, d, {0.01, 0.01}, bad, rng),
                  std::invalid_argument);
  const RenderConfig rc;
  CHECK_THROWS_AS(render_rays(tape, cfg, "nerf", o, d, {0.01}, rc, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(render_rays(tape, cfg, "nerf", o, tape.constant(Tensor::zeros(3, 3)),
                              {0.01, 0.01, 0.01}, rc, rng),
                  std::invalid_argument);
}

}  // TEST_SUITE
