#include "posefield/depth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace posefield {

namespace {

void validate_depth_map(const DepthMap& d, const char* where) {
  if (d.width <= 0 || d.height <= 0)
    throw std::invalid_argument(std::string(where) + ": empty depth map");
  const size_t n = static_cast<size_t>(d.width) * d.height;
  if (d.values.size() != n)
    throw std::invalid_argument(std::string(where) + ": values size mismatch");
  if (!d.valid.empty() && d.valid.size() != n)
    throw std::invalid_argument(std::string(where) + ": mask size mismatch");
}

// Uniform hash grid over a fixed point set. Shell search is exact: a point in
// a cell at Chebyshev index distance m is at least (m-1)*h away (the query
// cell is clamped into the grid, so along the offending axis the query sits
// inside or beyond the far side of its cell interval).
class NnGrid {
 public:
  explicit NnGrid(const std::vector<Vec3>& pts) : pts_(&pts) {
    lo_ = pts[0];
    Vec3 hi = pts[0];
    for (const Vec3& p : pts) {
      lo_ = lo_.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec3 ext = hi - lo_;
    const double diag = ext.norm();
    h_ = diag > 0.0 ? diag / std::cbrt(static_cast<double>(pts.size())) : 1.0;
    for (int a = 0; a < 3; ++a)
      dims_[a] = std::max(1, static_cast<int>(ext[a] / h_) + 1);
    for (int i = 0; i < static_cast<int>(pts.size()); ++i) {
      int c[3];
      cell_of(pts[static_cast<size_t>(i)], c);
      cells_[key(c)].push_back(i);
    }
  }

  int nn_index(const Vec3& q, double* best_sq_out = nullptr) const {
    int c0[3];
    cell_of(q, c0);
    double best = std::numeric_limits<double>::infinity();
    int best_idx = -1;
    int max_r = 0;
    for (int a = 0; a < 3; ++a)
      max_r = std::max(max_r, std::max(c0[a], dims_[a] - 1 - c0[a]));
    for (int r = 0; r <= max_r; ++r) {
      if (best_idx >= 0 && r >= 1) {
        const double lb = (r - 1) * h_;
        if (best <= lb * lb) break;
      }
      scan_shell(q, c0, r, &best, &best_idx);
    }
    if (best_sq_out) *best_sq_out = best;
    return best_idx;
  }

 private:
  static int64_t pack(int i, int j, int k) {
    return (static_cast<int64_t>(k) << 42) ^ (static_cast<int64_t>(j) << 21) ^ i;
  }
  int64_t key(const int c[3]) const { return pack(c[0], c[1], c[2]); }

  void cell_of(const Vec3& p, int c[3]) const {
    for (int a = 0; a < 3; ++a) {
      const int i = static_cast<int>(std::floor((p[a] - lo_[a]) / h_));
      c[a] = std::clamp(i, 0, dims_[a] - 1);
    }
  }

  void scan_shell(const Vec3& q, const int c0[3], int r, double* best, int* best_idx) const {
    const int ilo = std::max(0, c0[0] - r), ihi = std::min(dims_[0] - 1, c0[0] + r);
    const int jlo = std::max(0, c0[1] - r), jhi = std::min(dims_[1] - 1, c0[1] + r);
    const int klo = std::max(0, c0[2] - r), khi = std::min(dims_[2] - 1, c0[2] + r);
    for (int k = klo; k <= khi; ++k)
      for (int j = jlo; j <= jhi; ++j)
        for (int i = ilo; i <= ihi; ++i) {
          const int cheb = std::max({std::abs(i - c0[0]), std::abs(j - c0[1]),
                                     std::abs(k - c0[2])});
          if (cheb != r) continue;
          const int c[3] = {i, j, k};
          auto it = cells_.find(key(c));
          if (it == cells_.end()) continue;
          for (int idx : it->second) {
            const double d2 = (q - (*pts_)[static_cast<size_t>(idx)]).squaredNorm();
            if (d2 < *best) {
              *best = d2;
              *best_idx = idx;
            }
          }
        }
  }

  const std::vector<Vec3>* pts_;
  Vec3 lo_ = Vec3::Zero();
  double h_ = 1.0;
  int dims_[3] = {1, 1, 1};
  std::unordered_map<int64_t, std::vector<int>> cells_;
};

double mean_nn_sq(const std::vector<Vec3>& from, const NnGrid& to_grid) {
  double s = 0.0;
  for (const Vec3& p : from) {
    double d2 = 0.0;
    to_grid.nn_index(p, &d2);
    s += d2;
  }
  return s / static_cast<double>(from.size());
}

void validate_pose_graph(const std::vector<RigidTransform>& poses,
                         const std::vector<PointCloud>& clouds,
                         const std::vector<std::pair<int, int>>& pairs,
                         const char* where) {
  if (poses.size() != clouds.size())
    throw std::invalid_argument(std::string(where) + ": pose/cloud count mismatch");
  if (pairs.empty())
    throw std::invalid_argument(std::string(where) + ": no overlapping cloud pairs");
  const int n = static_cast<int>(poses.size());
  for (const auto& [i, j] : pairs) {
    if (i < 0 || j < 0 || i >= n || j >= n || i == j)
      throw std::out_of_range(std::string(where) + ": bad pair index");
    for (int v : {i, j}) {
      if (clouds[static_cast<size_t>(v)].frame != Frame::Camera)
        throw std::invalid_argument(std::string(where) + ": clouds must be camera-frame");
      if (clouds[static_cast<size_t>(v)].points.empty())
        throw std::invalid_argument(std::string(where) + ": empty point cloud");
    }
  }
}

std::vector<Vec3> transform_points(const std::vector<Vec3>& pts, const RigidTransform& t) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  for (const Vec3& p : pts) out.push_back(t.apply(p));
  return out;
}

diff::Tensor tensor_from_points(const std::vector<Vec3>& pts) {
  diff::Tensor t(static_cast<int>(pts.size()), 3);
  for (int r = 0; r < t.rows; ++r)
    for (int c = 0; c < 3; ++c) t.at(r, c) = pts[static_cast<size_t>(r)][c];
  return t;
}

}  // namespace

std::vector<double> transform_depth(const DepthMap& d) {
  validate_depth_map(d, "transform_depth");
  const double alpha = std::exp(d.log_alpha);
  std::vector<double> out(d.values.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = alpha * d.values[i] + d.beta;
  return out;
}

int transform_depth(diff::Tape& tape, int depth_values, int log_alpha, int beta) {
  if (tape.value(log_alpha).size() != 1 || tape.value(beta).size() != 1)
    throw std::invalid_argument("transform_depth: alignment parameters must be scalars");
  const int alpha = tape.exp(log_alpha);
  return tape.add_by_scalar_node(tape.mul_by_scalar_node(depth_values, alpha), beta);
}

double loss_depth(const DepthMap& d, const DepthMap& rendered) {
  validate_depth_map(d, "loss_depth");
  validate_depth_map(rendered, "loss_depth");
  if (rendered.width != d.width || rendered.height != d.height)
    throw std::invalid_argument("loss_depth: resolution mismatch");
  const double alpha = std::exp(d.log_alpha);
  double ss = 0.0;
  size_t used = 0;
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) {
      if (!d.is_valid(x, y) || !rendered.is_valid(x, y)) continue;
      const double r = alpha * d.at(x, y) + d.beta - rendered.at(x, y);
      ss += r * r;
      ++used;
    }
  if (used == 0) throw std::invalid_argument("loss_depth: no jointly valid pixels");
  return std::sqrt(ss);
}

int loss_depth(diff::Tape& tape, int dstar, int rendered) {
  const diff::Tensor& a = tape.value(dstar);
  const diff::Tensor& b = tape.value(rendered);
  if (!a.same_shape(b) || a.size() == 0)
    throw std::invalid_argument("loss_depth: operand shapes differ");
  // The tiny floor keeps the norm's gradient finite at an exact fit.
  return tape.sqrt(tape.add_scalar(tape.sum(tape.square(tape.sub(dstar, rendered))), 1e-30));
}

PointCloud unproject(const DepthMap& d, const CameraIntrinsics& k) {
  validate_depth_map(d, "unproject");
  if (k.fx == 0.0 || k.fy == 0.0)
    throw std::invalid_argument("unproject: zero focal length");
  const double alpha = std::exp(d.log_alpha);
  PointCloud out;
  out.frame = Frame::Camera;
  out.points.reserve(d.values.size());
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) {
      if (!d.is_valid(x, y)) continue;
      const double z = alpha * d.at(x, y) + d.beta;
      if (!(z > 0.0)) continue;
      const double u = x + 0.5, v = y + 0.5;
      out.points.emplace_back((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
    }
  return out;
}

PointCloud to_world(const PointCloud& cloud, const RigidTransform& pose) {
  if (cloud.frame != Frame::Camera)
    throw std::invalid_argument("to_world: cloud is not camera-frame");
  PointCloud out;
  out.frame = Frame::World;
  out.points = transform_points(cloud.points, pose.inverse());
  return out;
}

PointCloud subsample_cloud(const PointCloud& cloud, int max_points, Rng& rng) {
  if (max_points <= 0)
    throw std::invalid_argument("subsample_cloud: max_points must be positive");
  if (static_cast<int>(cloud.points.size()) <= max_points) return cloud;
  std::vector<Vec3> pool = cloud.points;
  const int n = static_cast<int>(pool.size());
  PointCloud out;
  out.frame = cloud.frame;
  out.points.reserve(static_cast<size_t>(max_points));
  for (int i = 0; i < max_points; ++i) {
    const int j = i + rng.uniform_int(n - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    out.points.push_back(pool[static_cast<size_t>(i)]);
  }
  return out;
}

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty())
    throw std::invalid_argument("chamfer: empty point cloud");
  if (a.frame != b.frame) throw std::invalid_argument("chamfer: frame mismatch");
  const NnGrid ga(a.points), gb(b.points);
  return 0.5 * (mean_nn_sq(a.points, gb) + mean_nn_sq(b.points, ga));
}

double pairwise_chamfer(const std::vector<RigidTransform>& poses,
                        const std::vector<PointCloud>& clouds,
                        const std::vector<std::pair<int, int>>& pairs) {
  validate_pose_graph(poses, clouds, pairs, "pairwise_chamfer");
  double total = 0.0;
  for (const auto& [i, j] : pairs) {
    const RigidTransform rel = poses[static_cast<size_t>(j)] * poses[static_cast<size_t>(i)].inverse();
    PointCloud moved;
    moved.frame = Frame::Camera;
    moved.points = transform_points(clouds[static_cast<size_t>(i)].points, rel);
    total += chamfer(moved, clouds[static_cast<size_t>(j)]);
  }
  return total;
}

std::vector<RigidTransform> update_pose_chamfer(const std::vector<RigidTransform>& poses,
                                                const std::vector<PointCloud>& clouds,
                                                const std::vector<std::pair<int, int>>& pairs,
                                                double step,
                                                double* chamfer_before,
                                                double* chamfer_after) {
  validate_pose_graph(poses, clouds, pairs, "update_pose_chamfer");
  if (!(step > 0.0))
    throw std::invalid_argument("update_pose_chamfer: step must be positive");
  const int n = static_cast<int>(poses.size());

  // Left-increment parameterization at zero: R <- Exp(w) R, t <- t + dt.
  diff::ParamStore store;
  for (int i = 0; i < n; ++i) {
    store.add("p" + std::to_string(i) + ".w", diff::Tensor::zeros(1, 3), false);
    store.add("p" + std::to_string(i) + ".dt", diff::Tensor::zeros(1, 3), false);
  }
  diff::Tape tape(&store);
  std::vector<int> rot(static_cast<size_t>(n)), trans(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const UnitQuaternion& q = poses[static_cast<size_t>(i)].rotation;
    diff::Tensor q0(1, 4);
    q0.at(0, 0) = q.w;
    q0.at(0, 1) = q.x;
    q0.at(0, 2) = q.y;
    q0.at(0, 3) = q.z;
    const int inc = tape.axisangle_to_quat(tape.param("p" + std::to_string(i) + ".w"));
    const int qi = tape.quat_mul_rows(inc, tape.constant(q0));
    rot[static_cast<size_t>(i)] = tape.reshape(tape.quat_to_rotmat(qi), 3, 3);
    diff::Tensor t0(1, 3);
    for (int c = 0; c < 3; ++c) t0.at(0, c) = poses[static_cast<size_t>(i)].translation[c];
    trans[static_cast<size_t>(i)] =
        tape.add(tape.param("p" + std::to_string(i) + ".dt"), tape.constant(t0));
  }

  // Frozen-match chamfer: both directions, matches taken at the current poses.
  int loss = -1;
  for (const auto& [i, j] : pairs) {
    const std::vector<Vec3>& src = clouds[static_cast<size_t>(i)].points;
    const std::vector<Vec3>& dst = clouds[static_cast<size_t>(j)].points;
    const int xw = tape.matmul(
        tape.add_rowvec(tape.constant(tensor_from_points(src)), tape.neg(trans[static_cast<size_t>(i)])),
        rot[static_cast<size_t>(i)]);
    const int xc = tape.add_rowvec(tape.matmul(xw, tape.transpose(rot[static_cast<size_t>(j)])),
                                   trans[static_cast<size_t>(j)]);
    const diff::Tensor xv = tape.value(xc);
    std::vector<Vec3> moved(src.size());
    for (size_t r = 0; r < moved.size(); ++r)
      moved[r] = Vec3(xv.at(static_cast<int>(r), 0), xv.at(static_cast<int>(r), 1),
                      xv.at(static_cast<int>(r), 2));

    const NnGrid gdst(dst);
    diff::Tensor matched(static_cast<int>(src.size()), 3);
    for (int r = 0; r < matched.rows; ++r) {
      const Vec3& m = dst[static_cast<size_t>(gdst.nn_index(moved[static_cast<size_t>(r)]))];
      for (int c = 0; c < 3; ++c) matched.at(r, c) = m[c];
    }
    const NnGrid gsrc(moved);
    std::vector<int> pick(dst.size());
    for (size_t r = 0; r < dst.size(); ++r) pick[r] = gsrc.nn_index(dst[r]);

    const int ta = tape.mul_scalar(tape.sum(tape.square(tape.sub(xc, tape.constant(matched)))),
                                   0.5 / static_cast<double>(src.size()));
    const int tb = tape.mul_scalar(
        tape.sum(tape.square(tape.sub(tape.gather_rows(xc, pick),
                                      tape.constant(tensor_from_points(dst))))),
        0.5 / static_cast<double>(dst.size()));
    const int term = tape.add(ta, tb);
    loss = loss < 0 ? term : tape.add(loss, term);
  }
  tape.backward(loss, 1.0, "cd");

  std::vector<Vec3> gw(static_cast<size_t>(n)), gdt(static_cast<size_t>(n));
  double gnorm2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const diff::Tensor& a = store.grad("p" + std::to_string(i) + ".w");
    const diff::Tensor& b = store.grad("p" + std::to_string(i) + ".dt");
    for (int c = 0; c < 3; ++c) {
      gw[static_cast<size_t>(i)][c] = a.at(0, c);
      gdt[static_cast<size_t>(i)][c] = b.at(0, c);
    }
    gnorm2 += gw[static_cast<size_t>(i)].squaredNorm() + gdt[static_cast<size_t>(i)].squaredNorm();
  }

  const double c0 = pairwise_chamfer(poses, clouds, pairs);
  if (chamfer_before) *chamfer_before = c0;
  if (gnorm2 == 0.0) {
    if (chamfer_after) *chamfer_after = c0;
    return poses;
  }

  // Halving line search on the re-matched objective.
  double s = step;
  for (int attempt = 0; attempt < 30; ++attempt) {
    std::vector<RigidTransform> cand(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      cand[static_cast<size_t>(i)].rotation =
          UnitQuaternion::exp_map(-s * gw[static_cast<size_t>(i)]) * poses[static_cast<size_t>(i)].rotation;
      cand[static_cast<size_t>(i)].translation =
          poses[static_cast<size_t>(i)].translation - s * gdt[static_cast<size_t>(i)];
    }
    const double c1 = pairwise_chamfer(cand, clouds, pairs);
    if (c1 <= c0) {
      if (chamfer_after) *chamfer_after = c1;
      return cand;
    }
    s *= 0.5;
  }
  if (chamfer_after) *chamfer_after = c0;
  return poses;
}

}  // namespace posefield
