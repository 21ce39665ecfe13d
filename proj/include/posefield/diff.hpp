#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "posefield/geom.hpp"

namespace posefield::diff {

// Dense row-major 2D tensor; scalars are 1x1.
struct Tensor {
  int rows = 0, cols = 0;
  Eigen::ArrayXd v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(Eigen::ArrayXd::Zero(static_cast<long>(r) * c)) {}

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor constant(int r, int c, double value);
  static Tensor scalar(double value);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor normal(Rng& rng, int r, int c, double stddev);
  static Tensor uniform(Rng& rng, int r, int c, double lo, double hi);

  long size() const { return static_cast<long>(rows) * cols; }
  double& at(int r, int c) { return v[static_cast<long>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<long>(r) * cols + c]; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
};

enum class Activation { Identity, ReLU, Softplus, Sigmoid };

// Named parameter blocks with gradients, adaptive-moment state, and
// loss-source routing bookkeeping (which loss labels may write each gradient).
class ParamStore {
 public:
  void add(const std::string& name, Tensor value, bool weight_decay = true);
  bool has(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  Tensor& grad(const std::string& name);
  void zero_grad();
  std::vector<std::string> names() const;  // insertion order

  void set_allowed_sources(const std::string& name, const std::set<std::string>& labels);
  void note_source(const std::string& name, const std::string& label);  // throws if disallowed
  const std::set<std::string>& seen_sources(const std::string& name) const;
  void clear_seen_sources();

  // Decoupled weight decay; bias-corrected moments; throws on NaN gradient,
  // naming the parameter. Increments the shared step count once per call.
  void adam_step(double lr, double weight_decay = 0.0, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);
  int step_count() const { return step_; }

  // Values only (no optimizer state): JSON header table + little-endian
  // float64 blob. load() merges by name; mismatched shapes throw.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  struct Entry {
    std::string name;
    Tensor value, grad, m, v;
    bool decay = true;
    std::set<std::string> allowed, seen;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
  int step_ = 0;
};

double lr_log_interp(int step, int total_steps, double lr_start, double lr_end);

// Reverse-mode tape over Tensor nodes. Build a fresh tape per training step;
// backward() seeds a scalar output and accumulates into ParamStore gradients
// under a source label. Non-parameter inputs enter as constants.
class Tape {
 public:
  explicit Tape(ParamStore* store = nullptr) : store_(store) {}

  int constant(Tensor value);
  int param(const std::string& name);  // leaf view of store value

  const Tensor& value(int id) const { return nodes_[check(id)].value; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // Elementwise binary (same shape).
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int min_bin(int a, int b);  // ties take a's branch

  // Scalar-constant and scalar-node arithmetic.
  int add_scalar(int a, double c);
  int mul_scalar(int a, double c);
  int add_by_scalar_node(int a, int s);  // s is 1x1
  int mul_by_scalar_node(int a, int s);

  // Elementwise unary.
  int neg(int a);
  int exp(int a);
  int log(int a);
  int sqrt(int a);
  int rsqrt(int a);
  int recip(int a);
  int sin(int a);
  int cos(int a);
  int relu(int a);
  int softplus(int a);
  int sigmoid(int a);
  int square(int a);
  int clamp_min(int a, double c);

  // Reductions.
  int sum(int a);                 // 1x1
  int mean(int a);                // 1x1
  int dot(int a, int b);          // 1x1, sum of elementwise product
  int row_sum(int a);             // m x n -> m x 1
  int sum_row_blocks(int a, int block);     // (B*block) x n -> B x n
  int cumsum_excl_rows(int a, int block);   // exclusive prefix sums within row blocks

  // Linear algebra and layout.
  int matmul(int a, int b);
  int transpose(int a);
  int add_rowvec(int a, int r);   // broadcast 1 x n across rows
  int mul_colvec(int a, int c);   // broadcast m x 1 across columns
  int concat_cols(int a, int b);
  int reshape(int a, int r, int c);
  int slice_rows(int a, int r0, int r1);
  int slice_cols(int a, int c0, int c1);
  int repeat_rows_blocked(int a, int times);  // each row repeated consecutively
  int gather_rows(int a, std::vector<int> rows);

  // Graph / geometry structured ops.
  int segment_attention(int scores, int values, std::vector<int> segment_of_row,
                        int num_segments);
  int quat_mul_rows(int a, int b);     // m x 4 Hamilton products
  int quat_to_rotmat(int q);           // unit m x 4 -> m x 9 row-major
  int axisangle_to_quat(int v);        // m x 3 -> m x 4, Taylor branch below 1e-8

  // Composite helpers.
  int affine(int x, int w, int b) { return add_rowvec(matmul(x, w), b); }
  int activate(int x, Activation act);
  int mlp_forward(const std::string& prefix, int layers, int x, Activation act);

  // Seeds d(output)/d(output) = seed_scale and accumulates leaf gradients into
  // the ParamStore under source_label. output must be 1x1. Repeated calls add.
  void backward(int output, double seed_scale = 1.0,
                const std::string& source_label = "loss");

  // Every differentiable op name, for exhaustive gradient checks.
  static std::vector<std::string> op_catalog();

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    std::string param_name;  // non-empty for leaves
    std::function<void(Tape&, const Tensor&)> back;
  };

  int check(int id) const;
  int push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back,
           std::string param_name = {});
  Tensor& lg(int id);  // local gradient buffer during backward

  ParamStore* store_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<Tensor> local_;
};

}  // namespace posefield::diff
