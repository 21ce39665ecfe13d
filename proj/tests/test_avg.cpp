#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "posefield/avg.hpp"
#include "posefield/geom.hpp"
#include "posefield/viewgraph.hpp"

using namespace posefield;

namespace {

ViewGraph exact_graph_from(const std::vector<UnitQuaternion>& gt,
                           const std::vector<std::pair<int, int>>& pairs) {
  ViewGraph g;
  g.n = static_cast<int>(gt.size());
  g.estimates.assign(g.n, UnitQuaternion::identity());
  for (auto [i, j] : pairs) g.edges.push_back({i, j, gt[j] * gt[i].conjugate()});
  return g;
}

RotationSetErrors aligned_errors(const std::vector<UnitQuaternion>& est,
                                 const std::vector<UnitQuaternion>& gt) {
  return rotation_set_errors(est, gt, align_rotation_sets(est, gt));
}

std::vector<std::pair<int, int>> all_pairs(int n) {
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
  return pairs;
}

RigidTransform pose_from_center(const UnitQuaternion& r, const Vec3& center) {
  RigidTransform p;
  p.rotation = r;
  p.translation = -r.rotate(center);
  return p;
}

}  // namespace

TEST_SUITE("avg") {

TEST_CASE("robust losses match their closed forms") {
  RobustLossConfig l2{RobustLossConfig::Kind::L2, 0.0};
  CHECK(robust_rho(l2, 0.3) == doctest::Approx(0.045).epsilon(1e-12));
  CHECK(robust_weight(l2, 0.3) == 1.0);
  CHECK(robust_weight(l2, 100.0) == 1.0);

  RobustLossConfig hub{RobustLossConfig::Kind::Huber, 0.1};
  CHECK(robust_rho(hub, 0.05) == doctest::Approx(0.00125).epsilon(1e-12));
  CHECK(robust_weight(hub, 0.05) == 1.0);
  CHECK(robust_rho(hub, 0.2) == doctest::Approx(0.1 * 0.2 - 0.005).epsilon(1e-12));
  CHECK(robust_weight(hub, 0.2) == doctest::Approx(0.5).epsilon(1e-12));
  // Both branches agree at the elbow (value and slope).
  CHECK(robust_rho(hub, 0.1) == doctest::Approx(0.005).epsilon(1e-12));
  const double h = 1e-7;
  const double left = (robust_rho(hub, 0.1) - robust_rho(hub, 0.1 - h)) / h;
  const double right = (robust_rho(hub, 0.1 + h) - robust_rho(hub, 0.1)) / h;
  CHECK(left == doctest::Approx(right).epsilon(1e-5));

  RobustLossConfig l1{RobustLossConfig::Kind::L1Approx, 0.0};
  CHECK(robust_rho(l1, 0.5) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(robust_weight(l1, 0.5) == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(robust_weight(l1, 0.0) == doctest::Approx(1e6).epsilon(1e-10));

  RobustLossConfig bad{RobustLossConfig::Kind::Huber, 0.0};
  CHECK_THROWS_AS(robust_rho(bad, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(robust_weight(bad, 0.1), std::invalid_argument);

  // d_Q of a 90 degree rotation: 2 sin(22.5 degrees).
  CHECK(dq_of_angle(kPi / 2) == doctest::Approx(2.0 * std::sin(kPi / 8)).epsilon(1e-14));
}

TEST_CASE("exact relatives leave the bootstrap untouched") {
  Rng rng(411);
  std::vector<UnitQuaternion> gt;
  for (int v = 0; v < 6; ++v) gt.push_back(random_rotation(rng));
  ViewGraph g = exact_graph_from(gt, all_pairs(6));
  const auto init = mst_bootstrap(g);

  RobustLossConfig cfg;  // Huber default
  const auto res = irls_rotation_averaging(g, init, cfg);
  CHECK(res.iterations == 0);
  CHECK(res.objective_history.size() == 1);
  CHECK(res.objective_history.front() <= 1e-20);
  CHECK(res.converged);
  REQUIRE(res.estimates.size() == init.size());
  for (size_t v = 0; v < init.size(); ++v) {
    CHECK(res.estimates[v].w == init[v].w);
    CHECK(res.estimates[v].x == init[v].x);
    CHECK(res.estimates[v].y == init[v].y);
    CHECK(res.estimates[v].z == init[v].z);
  }
}

TEST_CASE("robust averaging contains a corrupted edge where least squares smears it") {
  // 4-clique with exact relatives except one edge composed with a 90 degree
  // rotation. The spanning tree avoids the bad edge, so every run starts from
  // a near-exact init and the differences below are properties of the loss.
  Rng rng(20240811);
  std::vector<UnitQuaternion> gt;
  for (int v = 0; v < 4; ++v) gt.push_back(random_rotation(rng));
  ViewGraph g = exact_graph_from(gt, all_pairs(4));
  REQUIRE(g.edges[5].i == 2);
  REQUIRE(g.edges[5].j == 3);
  const Vec3 axis = Vec3(0.3, -1.1, 0.7).normalized();
  g.edges[5].rel = UnitQuaternion::exp_map(axis * (kPi / 2)) * g.edges[5].rel;
  const auto init = mst_bootstrap(g);

  RobustLossConfig l2{RobustLossConfig::Kind::L2, 0.0};
  const auto res_l2 = irls_rotation_averaging(g, init, l2);
  const auto err_l2 = aligned_errors(res_l2.estimates, gt);

  RobustLossConfig hub{RobustLossConfig::Kind::Huber, dq_of_angle(deg2rad(10.0))};
  const auto res_hub = irls_rotation_averaging(g, init, hub);
  const auto err_hub = aligned_errors(res_hub.estimates, gt);

  RobustLossConfig l1{RobustLossConfig::Kind::L1Approx, 0.0};
  const auto res_l1 = irls_rotation_averaging(g, init, l1);
  const auto err_l1 = aligned_errors(res_l1.estimates, gt);

  INFO("l2 max deg " << rad2deg(err_l2.max_rad) << " mean " << rad2deg(err_l2.mean_rad));
  INFO("huber10 max deg " << rad2deg(err_hub.max_rad) << " mean "
                          << rad2deg(err_hub.mean_rad));
  INFO("l1 max deg " << rad2deg(err_l1.max_rad) << " mean " << rad2deg(err_l1.mean_rad));

  // Least squares spreads the 90 degree inconsistency across the clique: the
  // corrupted pair ends up straddling ground truth by about 45 degrees.
  CHECK(err_l2.max_rad >= deg2rad(10.0));
  // Huber's linear tail still pulls with constant force s against the unit
  // effective conductance of the remaining clique, leaving a bias of roughly
  // the scale (measured 4.7 degrees at a 10 degree scale).
  CHECK(err_hub.max_rad <= deg2rad(6.0));
  CHECK(err_hub.max_rad >= deg2rad(3.0));
  CHECK(err_hub.max_rad < 0.3 * err_l2.max_rad);
  // The L1 approximation rejects the minority edge outright: the four good
  // edges out-pull the single corrupted one at the median-like optimum.
  CHECK(err_l1.max_rad <= deg2rad(0.1));
}

TEST_CASE("accepted objective history never increases on noisy outlier graphs") {
  for (uint64_t seed : {7ull, 8ull, 9ull}) {
    SyntheticGraphSpec spec;
    spec.node_count_min = 18;
    spec.node_count_max = 24;
    spec.edge_density = 0.4;
    spec.outlier_fraction = 0.2;
    spec.seed = seed;
    const SyntheticGraph synth = generate_synthetic(spec);
    const auto init = mst_bootstrap(synth.graph);

    RobustLossConfig cfg;  // Huber default scale
    const auto res = irls_rotation_averaging(synth.graph, init, cfg);
    REQUIRE(res.objective_history.size() == static_cast<size_t>(res.iterations) + 1);
    CHECK(res.objective_history.front() ==
          doctest::Approx(averaging_objective(synth.graph, init, cfg)).epsilon(1e-12));
    for (size_t k = 1; k < res.objective_history.size(); ++k)
      CHECK(res.objective_history[k] <= res.objective_history[k - 1]);
    CHECK(res.objective_history.back() <= res.objective_history.front());
  }
}

TEST_CASE("plain averaging refines a noisy bootstrap toward ground truth") {
  SyntheticGraphSpec spec;
  spec.node_count_min = 20;
  spec.node_count_max = 26;
  spec.edge_density = 0.5;
  spec.noise_sigma_min_deg = 5.0;
  spec.noise_sigma_max_deg = 10.0;
  spec.seed = 31;
  const SyntheticGraph synth = generate_synthetic(spec);
  const auto init = mst_bootstrap(synth.graph);

  RobustLossConfig l2{RobustLossConfig::Kind::L2, 0.0};
  const auto res = irls_rotation_averaging(synth.graph, init, l2);
  CHECK(res.converged);

  const auto before = aligned_errors(init, synth.gt);
  const auto after = aligned_errors(res.estimates, synth.gt);
  INFO("bootstrap mean deg " << rad2deg(before.mean_rad) << " refined mean deg "
                             << rad2deg(after.mean_rad));
  CHECK(after.mean_rad < 0.8 * before.mean_rad);
  CHECK(res.objective_history.back() < res.objective_history.front());

  // Refined estimates are stationary: rerunning from them changes nothing.
  const auto again = irls_rotation_averaging(synth.graph, res.estimates, l2);
  CHECK(again.iterations <= 1);
}

TEST_CASE("starved iteration budget reports non-convergence") {
  SyntheticGraphSpec spec;
  spec.node_count_min = 20;
  spec.node_count_max = 26;
  spec.edge_density = 0.5;
  spec.seed = 32;
  const SyntheticGraph synth = generate_synthetic(spec);
  const auto init = mst_bootstrap(synth.graph);

  RobustLossConfig cfg;
  const auto res = irls_rotation_averaging(synth.graph, init, cfg, 1);
  CHECK(res.iterations == 1);
  CHECK_FALSE(res.converged);
  // The best iterate so far is still returned.
  CHECK(res.objective_history.back() <= res.objective_history.front());
}

TEST_CASE("averaging rejects malformed problems") {
  Rng rng(5);
  std::vector<UnitQuaternion> gt{random_rotation(rng), random_rotation(rng),
                                 random_rotation(rng), random_rotation(rng)};
  ViewGraph g = exact_graph_from(gt, {{0, 1}, {2, 3}});  // disconnected
  RobustLossConfig cfg;
  CHECK_THROWS_WITH_AS(irls_rotation_averaging(g, gt, cfg),
                       "irls: graph must be connected", std::invalid_argument);

  ViewGraph ok = exact_graph_from(gt, {{0, 1}, {1, 2}, {2, 3}});
  std::vector<UnitQuaternion> short_init(3);
  CHECK_THROWS_AS(irls_rotation_averaging(ok, short_init, cfg), std::invalid_argument);
}

TEST_CASE("translations recover exactly from consistent measurements") {
  Rng rng(71);
  const int n = 6;
  std::vector<UnitQuaternion> rot;
  std::vector<Vec3> t_gt;
  for (int v = 0; v < n; ++v) {
    rot.push_back(random_rotation(rng));
    t_gt.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
  }
  std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5},
                                         {5, 0}, {0, 3}, {1, 4}};
  std::vector<Vec3> rel;
  for (auto [i, j] : edges) {
    const Mat3 r_ij = (rot[j] * rot[i].conjugate()).to_matrix();
    rel.push_back(t_gt[j] - r_ij * t_gt[i]);
  }

  const auto sol = solve_translations(rot, rel, edges);
  CHECK(sol.residual <= 1e-9);
  CHECK(sol.translations[0].norm() == 0.0);
  // Compare modulo the gauge t_i -> t_i + R_i c that maps the pinned root
  // onto its ground truth.
  const Vec3 c = rot[0].conjugate().rotate(t_gt[0]);
  for (int v = 0; v < n; ++v) {
    const Vec3 mapped = sol.translations[v] + rot[v].rotate(c);
    CHECK((mapped - t_gt[v]).norm() <= 1e-9);
  }

  // A different root pins that node instead and still matches.
  const auto sol3 = solve_translations(rot, rel, edges, 3);
  CHECK(sol3.translations[3].norm() == 0.0);
  const Vec3 c3 = rot[3].conjugate().rotate(t_gt[3]);
  for (int v = 0; v < n; ++v) {
    const Vec3 mapped = sol3.translations[v] + rot[v].rotate(c3);
    CHECK((mapped - t_gt[v]).norm() <= 1e-9);
  }

  // Perturbing one measurement must show up in the residual.
  auto rel_bad = rel;
  rel_bad[2] += Vec3(0.1, 0, 0);
  const auto sol_bad = solve_translations(rot, rel_bad, edges);
  CHECK(sol_bad.residual > 1e-6);
}

TEST_CASE("zero relative translations give zero absolutes") {
  Rng rng(72);
  std::vector<UnitQuaternion> rot;
  for (int v = 0; v < 5; ++v) rot.push_back(random_rotation(rng));
  std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}};
  std::vector<Vec3> rel(edges.size(), Vec3::Zero());
  const auto sol = solve_translations(rot, rel, edges);
  CHECK(sol.residual <= 1e-12);
  for (const auto& t : sol.translations) CHECK(t.norm() <= 1e-12);
}

TEST_CASE("camera-center gauge shifts leave the measurements unchanged") {
  Rng rng(73);
  const int n = 5;
  std::vector<UnitQuaternion> rot;
  std::vector<Vec3> t_gt;
  for (int v = 0; v < n; ++v) {
    rot.push_back(random_rotation(rng));
    t_gt.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  }
  const Vec3 shift(0.7, -0.3, 1.9);  // world-origin move seen by every camera
  std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {0, 2}};
  for (auto [i, j] : edges) {
    const Mat3 r_ij = (rot[j] * rot[i].conjugate()).to_matrix();
    const Vec3 base = t_gt[j] - r_ij * t_gt[i];
    const Vec3 shifted = (t_gt[j] + rot[j].rotate(shift)) -
                         r_ij * (t_gt[i] + rot[i].rotate(shift));
    CHECK((base - shifted).norm() <= 1e-12);
  }
}

TEST_CASE("rank deficiency beyond the gauge is reported with null directions") {
  Rng rng(74);
  std::vector<UnitQuaternion> rot;
  for (int v = 0; v < 4; ++v) rot.push_back(random_rotation(rng));
  // Two islands: pinning node 0 leaves nodes 2 and 3 jointly free.
  std::vector<std::pair<int, int>> edges{{0, 1}, {2, 3}};
  std::vector<Vec3> rel(edges.size(), Vec3::Zero());
  try {
    solve_translations(rot, rel, edges);
    FAIL("expected rank-deficiency error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("null directions") != std::string::npos);
    const bool names_island = msg.find("node2") != std::string::npos ||
                              msg.find("node3") != std::string::npos;
    CHECK(names_island);
  }
}

TEST_CASE("translation solver rejects malformed problems") {
  Rng rng(75);
  std::vector<UnitQuaternion> rot{random_rotation(rng), random_rotation(rng)};
  std::vector<Vec3> rel{Vec3::Zero()};
  CHECK_THROWS_AS(solve_translations(rot, rel, {{0, 1}, {1, 0}}), std::invalid_argument);
  CHECK_THROWS_AS(solve_translations(rot, rel, {{0, 1}}, 7), std::invalid_argument);
  CHECK_THROWS_AS(solve_translations(rot, rel, {{0, 5}}), std::invalid_argument);
  CHECK_THROWS_AS(solve_translations({}, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS(solve_translations(rot, {}, {}), std::invalid_argument);
}

TEST_CASE("pose alignment is exact on identical sets") {
  Rng rng(81);
  std::vector<RigidTransform> gt;
  for (int v = 0; v < 6; ++v)
    gt.push_back(pose_from_center(random_rotation(rng),
                                  Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1),
                                       rng.uniform(-1, 1))));
  const auto align = align_pose_sets(gt, gt);
  CHECK(align.rotation.angle() <= 1e-7);
  CHECK(align.scale == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(align.translation.norm() <= 1e-9);
  CHECK_FALSE(align.degenerate_scale);
  for (double e : align.rotation_errors_rad) CHECK(e <= 1e-6);
  for (double e : align.center_errors) CHECK(e <= 1e-9);
}

TEST_CASE("pose alignment absorbs a rigid motion") {
  Rng rng(82);
  const UnitQuaternion gauge = random_rotation(rng);
  const Vec3 tau(0.4, -1.2, 2.0);
  std::vector<RigidTransform> gt, est;
  for (int v = 0; v < 6; ++v) {
    const UnitQuaternion r = random_rotation(rng);
    const Vec3 c(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    gt.push_back(pose_from_center(r, c));
    est.push_back(pose_from_center(r * gauge, gauge.conjugate().rotate(c - tau)));
  }
  const auto align = align_pose_sets(est, gt);
  CHECK(dq_distance(align.rotation, gauge) <= 1e-9);
  CHECK(align.scale == doctest::Approx(1.0).epsilon(1e-9));
  CHECK((align.translation - tau).norm() <= 1e-9);
  for (double e : align.rotation_errors_rad) CHECK(e <= 1e-6);
  for (double e : align.center_errors) CHECK(e <= 1e-9);
}

TEST_CASE("pose alignment recovers a random similarity") {
  Rng rng(83);
  const UnitQuaternion gauge = random_rotation(rng);
  const double scale = 2.37;
  const Vec3 tau(-0.9, 0.25, 1.6);
  std::vector<RigidTransform> gt, est;
  for (int v = 0; v < 7; ++v) {
    const UnitQuaternion r = random_rotation(rng);
    const Vec3 c(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    gt.push_back(pose_from_center(r, c));
    est.push_back(pose_from_center(r * gauge, gauge.conjugate().rotate(c - tau) / scale));
  }
  const auto align = align_pose_sets(est, gt);
  CHECK(dq_distance(align.rotation, gauge) <= 1e-9);
  CHECK(align.scale == doctest::Approx(scale).epsilon(1e-9));
  CHECK((align.translation - tau).norm() <= 1e-9);
  CHECK_FALSE(align.degenerate_scale);
  for (double e : align.rotation_errors_rad) CHECK(e <= 1e-6);
  for (double e : align.center_errors) CHECK(e <= 1e-9);
}

TEST_CASE("collinear centers pin the scale and flag degeneracy") {
  Rng rng(84);
  std::vector<RigidTransform> gt;
  for (int v = 0; v < 5; ++v)
    gt.push_back(pose_from_center(random_rotation(rng), Vec3(0.3 * v, 0.0, 0.0)));
  const auto align = align_pose_sets(gt, gt);
  CHECK(align.degenerate_scale);
  CHECK(align.scale == 1.0);
  for (double e : align.center_errors) CHECK(e <= 1e-9);
}

TEST_CASE("pose alignment rejects undersized or mismatched sets") {
  Rng rng(85);
  std::vector<RigidTransform> two{pose_from_center(random_rotation(rng), Vec3(0, 0, 0)),
                                  pose_from_center(random_rotation(rng), Vec3(1, 0, 0))};
  CHECK_THROWS_AS(align_pose_sets(two, two), std::invalid_argument);
  std::vector<RigidTransform> three = two;
  three.push_back(pose_from_center(random_rotation(rng), Vec3(0, 1, 0)));
  CHECK_THROWS_AS(align_pose_sets(three, two), std::invalid_argument);
}

TEST_CASE("rotation gauge alignment recovers the planted gauge") {
  Rng rng(91);
  const UnitQuaternion gauge = random_rotation(rng);
  std::vector<UnitQuaternion> gt, est;
  for (int v = 0; v < 7; ++v) {
    gt.push_back(random_rotation(rng));
    est.push_back(gt.back() * gauge.conjugate());
  }
  const UnitQuaternion found = align_rotation_sets(est, gt);
  CHECK(dq_distance(found, gauge) <= 1e-9);

  // Mild per-node noise moves the recovered gauge only mildly.
  std::vector<UnitQuaternion> noisy;
  const double var = deg2rad(1.0) * deg2rad(1.0);
  for (const auto& q : est) noisy.push_back(sample_axis_angle_noise(var, rng) * q);
  const auto errs = aligned_errors(noisy, gt);
  CHECK(errs.mean_rad <= deg2rad(2.0));
}

TEST_CASE("rotation error statistics match hand-computed values") {
  Rng rng(92);
  const Vec3 axis = Vec3(1.0, 2.0, -0.5).normalized();
  const std::vector<double> angles{0.01, 0.02, 0.03, 0.04, 0.1};
  std::vector<UnitQuaternion> gt, est;
  for (double a : angles) {
    gt.push_back(random_rotation(rng));
    est.push_back(gt.back() * UnitQuaternion::exp_map(axis * a));
  }
  const auto stats = rotation_set_errors(est, gt, UnitQuaternion::identity());
  CHECK(stats.mean_rad == doctest::Approx(0.04).epsilon(1e-10));
  CHECK(stats.median_rad == doctest::Approx(0.03).epsilon(1e-10));
  CHECK(stats.rms_rad == doctest::Approx(std::sqrt(0.0026)).epsilon(1e-10));
  CHECK(stats.max_rad == doctest::Approx(0.1).epsilon(1e-10));

  // Even count: median averages the middle pair.
  const auto stats4 = rotation_set_errors({est[0], est[1], est[2], est[3]},
                                          {gt[0], gt[1], gt[2], gt[3]},
                                          UnitQuaternion::identity());
  CHECK(stats4.median_rad == doctest::Approx(0.025).epsilon(1e-10));

  CHECK_THROWS_AS(rotation_set_errors({}, {}, UnitQuaternion::identity()),
                  std::invalid_argument);
}

}  // TEST_SUITE
