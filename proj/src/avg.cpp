#include "posefield/avg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace posefield {

double robust_rho(const RobustLossConfig& cfg, double d) {
  switch (cfg.kind) {
    case RobustLossConfig::Kind::L2:
      return 0.5 * d * d;
    case RobustLossConfig::Kind::Huber: {
      if (!(cfg.scale > 0.0)) throw std::invalid_argument("Huber scale must be positive");
      return d <= cfg.scale ? 0.5 * d * d : cfg.scale * d - 0.5 * cfg.scale * cfg.scale;
    }
    case RobustLossConfig::Kind::L1Approx:
      return std::sqrt(d * d + 1e-12);
  }
  throw std::logic_error("unknown robust loss kind");
}

double robust_weight(const RobustLossConfig& cfg, double d) {
  switch (cfg.kind) {
    case RobustLossConfig::Kind::L2:
      return 1.0;
    case RobustLossConfig::Kind::Huber: {
      if (!(cfg.scale > 0.0)) throw std::invalid_argument("Huber scale must be positive");
      return d <= cfg.scale ? 1.0 : cfg.scale / d;
    }
    case RobustLossConfig::Kind::L1Approx:
      return 1.0 / std::sqrt(d * d + 1e-12);
  }
  throw std::logic_error("unknown robust loss kind");
}

double averaging_objective(const ViewGraph& g, const std::vector<UnitQuaternion>& est,
                           const RobustLossConfig& cfg) {
  double obj = 0.0;
  for (const auto& e : g.edges)
    obj += robust_rho(cfg, dq_distance(e.rel, est[e.j] * est[e.i].conjugate()));
  return obj;
}

IrlsResult irls_rotation_averaging(const ViewGraph& g,
                                   const std::vector<UnitQuaternion>& init,
                                   const RobustLossConfig& cfg, int max_iters, double tol) {
  validate_graph(g);
  if (static_cast<int>(init.size()) != g.n)
    throw std::invalid_argument("irls: init does not cover all nodes");
  if (connected_components(g).size() != 1)
    throw std::invalid_argument("irls: graph must be connected");

  IrlsResult res;
  res.estimates = init;
  res.objective_history.push_back(averaging_objective(g, res.estimates, cfg));
  res.converged = true;

  const int n = g.n;
  const int root = 0;  // gauge pin; any node works, increments are relative
  for (int iter = 0; iter < max_iters; ++iter) {
    // Linearized residual r0 + delta_i - delta_j per edge, weighted by the
    // robust influence at the current d_Q residual.
    Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 3);
    for (const auto& e : g.edges) {
      const UnitQuaternion e0 = res.estimates[e.j].conjugate() * e.rel * res.estimates[e.i];
      const Vec3 r0 = e0.log_map();
      const double d = dq_distance(e.rel, res.estimates[e.j] * res.estimates[e.i].conjugate());
      const double w = robust_weight(cfg, d);
      lap(e.i, e.i) += w;
      lap(e.j, e.j) += w;
      lap(e.i, e.j) -= w;
      lap(e.j, e.i) -= w;
      rhs.row(e.i) -= w * r0.transpose();
      rhs.row(e.j) += w * r0.transpose();
    }

    // Pin the root and solve the reduced Laplacian once for all three axes.
    Eigen::MatrixXd lap_red(n - 1, n - 1);
    Eigen::MatrixXd rhs_red(n - 1, 3);
    auto reduced = [root](int v) { return v < root ? v : v - 1; };
    for (int a = 0; a < n; ++a) {
      if (a == root) continue;
      rhs_red.row(reduced(a)) = rhs.row(a);
      for (int b = 0; b < n; ++b) {
        if (b == root) continue;
        lap_red(reduced(a), reduced(b)) = lap(a, b);
      }
    }
    Eigen::MatrixXd delta_red = lap_red.ldlt().solve(rhs_red);
    Eigen::MatrixXd delta = Eigen::MatrixXd::Zero(n, 3);
    for (int a = 0; a < n; ++a)
      if (a != root) delta.row(a) = delta_red.row(reduced(a));

    if (delta.cwiseAbs().maxCoeff() <= 1e-12) break;  // stationary (e.g. exact input)

    // Step with halving until the true objective does not increase.
    const double current = res.objective_history.back();
    double step = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 25 && !accepted; ++halving, step *= 0.5) {
      std::vector<UnitQuaternion> candidate = res.estimates;
      for (int v = 0; v < n; ++v) {
        const Vec3 dv = step * delta.row(v).transpose();
        candidate[v] = candidate[v] * UnitQuaternion::exp_map(dv);
      }
      double obj = averaging_objective(g, candidate, cfg);
      if (obj <= current) {
        res.estimates = std::move(candidate);
        res.objective_history.push_back(obj);
        accepted = true;
      }
    }
    if (!accepted) break;  // no descent direction left at this linearization
    res.iterations = iter + 1;
    if (current - res.objective_history.back() < tol) break;
    if (iter == max_iters - 1) res.converged = false;
  }
  return res;
}

TranslationSolution solve_translations(const std::vector<UnitQuaternion>& rotations,
                                       const std::vector<Vec3>& relative_translations,
                                       const std::vector<std::pair<int, int>>& edge_list,
                                       int root) {
  const int n = static_cast<int>(rotations.size());
  if (relative_translations.size() != edge_list.size())
    throw std::invalid_argument("solve_translations: edge/measurement count mismatch");
  if (n == 0) throw std::invalid_argument("solve_translations: empty problem");
  if (root < 0 || root >= n) throw std::invalid_argument("solve_translations: bad root");
  if (edge_list.empty() && n > 1)
    throw std::invalid_argument("solve_translations: no edges for a multi-node problem");

  const int unknowns = 3 * (n - 1);
  auto col_of = [root](int v) { return 3 * (v < root ? v : v - 1); };
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3 * static_cast<int>(edge_list.size()), unknowns);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(3 * static_cast<int>(edge_list.size()));
  for (size_t e = 0; e < edge_list.size(); ++e) {
    auto [i, j] = edge_list[e];
    if (i < 0 || j < 0 || i >= n || j >= n)
      throw std::invalid_argument("solve_translations: node id out of range");
    const Mat3 r_ij = (rotations[j] * rotations[i].conjugate()).to_matrix();
    const int row = 3 * static_cast<int>(e);
    if (j != root) a.block<3, 3>(row, col_of(j)) = Mat3::Identity();
    if (i != root) a.block<3, 3>(row, col_of(i)) = -r_ij;
    b.segment<3>(row) = relative_translations[e];
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-9);
  const int rank = static_cast<int>(qr.rank());
  if (rank < unknowns) {
    // Name the null directions by their dominant (node, axis) components.
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    std::string msg = "translation system is rank-deficient beyond the gauge;"
                      " null directions:";
    const char* axes = "xyz";
    for (int k = unknowns - 1; k >= rank; --k) {
      int top;
      svd.matrixV().col(k).cwiseAbs().maxCoeff(&top);
      int node = top / 3;
      if (node >= root) ++node;
      msg += " node" + std::to_string(node) + "." + axes[top % 3];
    }
    throw std::invalid_argument(msg);
  }

  Eigen::VectorXd x = qr.solve(b);
  TranslationSolution sol;
  sol.translations.assign(n, Vec3::Zero());
  for (int v = 0; v < n; ++v)
    if (v != root) sol.translations[v] = x.segment<3>(col_of(v));
  sol.residual = (a * x - b).norm();
  return sol;
}

PoseAlignment align_pose_sets(const std::vector<RigidTransform>& est,
                              const std::vector<RigidTransform>& gt) {
  if (est.size() != gt.size()) throw std::invalid_argument("align_pose_sets: size mismatch");
  const int n = static_cast<int>(est.size());
  if (n < 3) throw std::invalid_argument("align_pose_sets: need at least 3 poses");

  Eigen::Matrix3Xd ce(3, n), cg(3, n);
  for (int i = 0; i < n; ++i) {
    ce.col(i) = est[i].camera_center();
    cg.col(i) = gt[i].camera_center();
  }
  const Vec3 mu_e = ce.rowwise().mean(), mu_g = cg.rowwise().mean();
  ce.colwise() -= mu_e;
  cg.colwise() -= mu_g;

  const Mat3 sigma = cg * ce.transpose() / n;
  Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 s_fix = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) s_fix(2, 2) = -1.0;
  const Mat3 g_rot = svd.matrixU() * s_fix * svd.matrixV().transpose();

  PoseAlignment out;
  out.rotation = UnitQuaternion::from_matrix(g_rot);

  const double var_e = ce.squaredNorm() / n;
  const Vec3 sv = svd.singularValues();
  // Collinear or coincident centers leave scale (and a rotation axis) free.
  if (var_e < 1e-18 || sv(1) < 1e-9 * std::max(sv(0), 1.0)) {
    out.degenerate_scale = true;
    out.scale = 1.0;
  } else {
    out.scale = (sv.array() * s_fix.diagonal().array()).sum() / var_e;
  }
  out.translation = mu_g - out.scale * (g_rot * mu_e);

  const Mat3 g_inv = g_rot.transpose();
  out.rotation_errors_rad.reserve(n);
  out.center_errors.reserve(n);
  for (int i = 0; i < n; ++i) {
    const Mat3 aligned = est[i].rotation.to_matrix() * g_inv;
    out.rotation_errors_rad.push_back(geodesic_angle(aligned, gt[i].rotation.to_matrix()));
    const Vec3 mapped =
        out.scale * (g_rot * est[i].camera_center()) + out.translation;
    out.center_errors.push_back((mapped - gt[i].camera_center()).norm());
  }
  return out;
}

UnitQuaternion align_rotation_sets(const std::vector<UnitQuaternion>& est,
                                   const std::vector<UnitQuaternion>& gt) {
  if (est.size() != gt.size() || est.empty())
    throw std::invalid_argument("align_rotation_sets: size mismatch");
  // dot(est_i * g, gt_i) is linear in g: c_i^T g. Maximizing sum (c_i^T g)^2
  // over unit g ignores per-term signs, exactly what d_Q needs.
  Eigen::Matrix4d acc = Eigen::Matrix4d::Zero();
  for (size_t i = 0; i < est.size(); ++i) {
    const UnitQuaternion c = est[i].conjugate() * gt[i];
    Eigen::Vector4d cv(c.w, c.x, c.y, c.z);
    acc += cv * cv.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(acc);
  Eigen::Vector4d top = eig.eigenvectors().col(3);  // largest eigenvalue
  return UnitQuaternion(top(0), top(1), top(2), top(3));
}

RotationSetErrors rotation_set_errors(const std::vector<UnitQuaternion>& est,
                                      const std::vector<UnitQuaternion>& gt,
                                      const UnitQuaternion& gauge) {
  if (est.size() != gt.size() || est.empty())
    throw std::invalid_argument("rotation_set_errors: size mismatch");
  std::vector<double> errs;
  errs.reserve(est.size());
  double sum = 0.0, sum_sq = 0.0, worst = 0.0;
  for (size_t i = 0; i < est.size(); ++i) {
    double e = geodesic_angle(est[i] * gauge, gt[i]);
    errs.push_back(e);
    sum += e;
    sum_sq += e * e;
    worst = std::max(worst, e);
  }
  std::sort(errs.begin(), errs.end());
  RotationSetErrors out;
  out.mean_rad = sum / errs.size();
  out.rms_rad = std::sqrt(sum_sq / errs.size());
  out.max_rad = worst;
  out.median_rad = errs.size() % 2 ? errs[errs.size() / 2]
                                   : 0.5 * (errs[errs.size() / 2 - 1] + errs[errs.size() / 2]);
  return out;
}

}  // namespace posefield
