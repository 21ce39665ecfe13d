#include "posefield/diff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace posefield::diff {

using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

CMapMat as_mat(const Tensor& t) { return CMapMat(t.v.data(), t.rows, t.cols); }
MapMat as_mat(Tensor& t) { return MapMat(t.v.data(), t.rows, t.cols); }

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a) {
  throw std::invalid_argument(op + ": bad shape " + std::to_string(a.rows) + "x" +
                              std::to_string(a.cols));
}

void require_same(const std::string& op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument(op + ": shape mismatch " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                std::to_string(b.cols));
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor Tensor::constant(int r, int c, double value) {
  Tensor t(r, c);
  t.v.setConstant(value);
  return t;
}

Tensor Tensor::scalar(double value) { return constant(1, 1, value); }

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("from_rows: empty");
  Tensor t(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int r = 0; r < t.rows; ++r) {
    if (static_cast<int>(rows[r].size()) != t.cols)
      throw std::invalid_argument("from_rows: ragged rows");
    for (int c = 0; c < t.cols; ++c) t.at(r, c) = rows[r][c];
  }
  return t;
}

Tensor Tensor::normal(Rng& rng, int r, int c, double stddev) {
  Tensor t(r, c);
  for (long i = 0; i < t.size(); ++i) t.v[i] = rng.normal() * stddev;
  return t;
}

Tensor Tensor::uniform(Rng& rng, int r, int c, double lo, double hi) {
  Tensor t(r, c);
  for (long i = 0; i < t.size(); ++i) t.v[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

// ---------------------------------------------------------------------------
// ParamStore

void ParamStore::add(const std::string& name, Tensor value, bool weight_decay) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  Entry e;
  e.name = name;
  e.grad = Tensor::zeros(value.rows, value.cols);
  e.m = Tensor::zeros(value.rows, value.cols);
  e.v = Tensor::zeros(value.rows, value.cols);
  e.value = std::move(value);
  e.decay = weight_decay;
  index_[name] = static_cast<int>(entries_.size());
  entries_.push_back(std::move(e));
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return entries_[it->second];
}

Tensor& ParamStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::value(const std::string& name) const { return entry(name).value; }
Tensor& ParamStore::grad(const std::string& name) { return entry(name).grad; }

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.v.setZero();
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

void ParamStore::set_allowed_sources(const std::string& name,
                                     const std::set<std::string>& labels) {
  entry(name).allowed = labels;
}

void ParamStore::note_source(const std::string& name, const std::string& label) {
  Entry& e = entry(name);
  if (!e.allowed.empty() && !e.allowed.count(label))
    throw std::logic_error("gradient from loss '" + label + "' routed into parameter '" +
                           name + "' which only accepts " + [&] {
                             std::string s;
                             for (const auto& a : e.allowed) s += (s.empty() ? "" : ",") + a;
                             return s;
                           }());
  e.seen.insert(label);
}

const std::set<std::string>& ParamStore::seen_sources(const std::string& name) const {
  return entry(name).seen;
}

void ParamStore::clear_seen_sources() {
  for (auto& e : entries_) e.seen.clear();
}

void ParamStore::adam_step(double lr, double weight_decay, double beta1, double beta2,
                           double eps) {
  for (const auto& e : entries_)
    if (!e.grad.v.isFinite().all())
      throw std::runtime_error("non-finite gradient in parameter " + e.name);
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1, step_);
  const double bc2 = 1.0 - std::pow(beta2, step_);
  for (auto& e : entries_) {
    e.m.v = beta1 * e.m.v + (1.0 - beta1) * e.grad.v;
    e.v.v = beta2 * e.v.v + (1.0 - beta2) * e.grad.v.square();
    Eigen::ArrayXd mhat = e.m.v / bc1;
    Eigen::ArrayXd vhat = e.v.v / bc2;
    e.value.v -= lr * (mhat / (vhat.sqrt() + eps));
    if (e.decay && weight_decay > 0.0) e.value.v -= lr * weight_decay * e.value.v;
  }
}

double lr_log_interp(int step, int total_steps, double lr_start, double lr_end) {
  if (total_steps <= 1) return lr_start;
  double f = std::clamp(static_cast<double>(step) / (total_steps - 1), 0.0, 1.0);
  return std::exp(std::log(lr_start) + f * (std::log(lr_end) - std::log(lr_start)));
}

void ParamStore::save(const std::string& path) const {
  json header = json::array();
  uint64_t offset = 0;
  for (const auto& e : entries_) {
    header.push_back(json{{"name", e.name},
                          {"shape", {e.value.rows, e.value.cols}},
                          {"offset", offset}});
    offset += static_cast<uint64_t>(e.value.size());
  }
  std::string htext = header.dump();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& e : entries_)
    f.write(reinterpret_cast<const char*>(e.value.v.data()),
            static_cast<std::streamsize>(e.value.size() * 8));
  if (!f) throw std::runtime_error("short checkpoint write: " + path);
}

void ParamStore::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen == 0 || hlen > (1ull << 30))
    throw std::runtime_error("corrupt checkpoint header: " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("truncated checkpoint header: " + path);
  json header = json::parse(htext);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  for (const auto& h : header) {
    std::string name = h.at("name").get<std::string>();
    int r = h.at("shape")[0].get<int>(), c = h.at("shape")[1].get<int>();
    uint64_t off = h.at("offset").get<uint64_t>();
    if ((off + static_cast<uint64_t>(r) * c) * 8 > blob.size())
      throw std::runtime_error("checkpoint blob too short for " + name);
    Tensor t(r, c);
    std::memcpy(t.v.data(), blob.data() + off * 8, static_cast<size_t>(t.size()) * 8);
    if (has(name)) {
      Entry& e = entry(name);
      if (e.value.rows != r || e.value.cols != c)
        throw std::runtime_error("checkpoint shape mismatch for " + name);
      e.value = std::move(t);
    } else {
      add(name, std::move(t));
    }
  }
}

// ---------------------------------------------------------------------------
// Tape

int Tape::check(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::invalid_argument("invalid tape node id");
  return id;
}

int Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&, const Tensor&)> back,
               std::string param_name) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  n.param_name = std::move(param_name);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::lg(int id) {
  Tensor& g = local_[id];
  if (g.rows == 0) g = Tensor::zeros(nodes_[id].value.rows, nodes_[id].value.cols);
  return g;
}

int Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

int Tape::param(const std::string& name) {
  if (!store_) throw std::logic_error("tape has no parameter store");
  return push(store_->value(name), true, nullptr, name);
}

void Tape::backward(int output, double seed_scale, const std::string& source_label) {
  check(output);
  const Node& out = nodes_[output];
  if (out.value.rows != 1 || out.value.cols != 1)
    throw std::invalid_argument("backward requires a scalar output node");
  local_.assign(nodes_.size(), Tensor{});
  lg(output).v[0] = seed_scale;
  for (int i = output; i >= 0; --i) {
    if (local_[i].rows == 0 || !nodes_[i].needs_grad) continue;
    if (nodes_[i].back) nodes_[i].back(*this, local_[i]);
    if (!nodes_[i].param_name.empty()) {
      store_->grad(nodes_[i].param_name).v += local_[i].v;
      store_->note_source(nodes_[i].param_name, source_label);
    }
  }
  local_.clear();
}

// --- elementwise binary ---

int Tape::add(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("add", ta, tb);
  Tensor out = ta;
  out.v += tb.v;
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v;
    if (t.nodes_[b].needs_grad) t.lg(b).v += g.v;
  });
}

int Tape::sub(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("sub", ta, tb);
  Tensor out = ta;
  out.v -= tb.v;
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v;
    if (t.nodes_[b].needs_grad) t.lg(b).v -= g.v;
  });
}

int Tape::mul(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("mul", ta, tb);
  Tensor out = ta;
  out.v *= tb.v;
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v * t.nodes_[b].value.v;
    if (t.nodes_[b].needs_grad) t.lg(b).v += g.v * t.nodes_[a].value.v;
  });
}

int Tape::div(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("div", ta, tb);
  Tensor out = ta;
  out.v /= tb.v;
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    const Eigen::ArrayXd& bv = t.nodes_[b].value.v;
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v / bv;
    if (t.nodes_[b].needs_grad) t.lg(b).v -= g.v * t.nodes_[a].value.v / (bv * bv);
  });
}

int Tape::min_bin(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("min_bin", ta, tb);
  Tensor out = ta;
  out.v = ta.v.min(tb.v);
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    const Eigen::ArrayXd& av = t.nodes_[a].value.v;
    const Eigen::ArrayXd& bv = t.nodes_[b].value.v;
    Eigen::ArrayXd take_a = (av <= bv).cast<double>();
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v * take_a;
    if (t.nodes_[b].needs_grad) t.lg(b).v += g.v * (1.0 - take_a);
  });
}

// --- scalar arithmetic ---

int Tape::add_scalar(int a, double c) {
  Tensor out = value(check(a));
  out.v += c;
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v;
  });
}

int Tape::mul_scalar(int a, double c) {
  Tensor out = value(check(a));
  out.v *= c;
  return push(std::move(out), nodes_[a].needs_grad, [a, c](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v * c;
  });
}

int Tape::add_by_scalar_node(int a, int s) {
  const Tensor &ta = value(check(a)), &ts = value(check(s));
  if (ts.rows != 1 || ts.cols != 1) shape_fail("add_by_scalar_node", ts);
  Tensor out = ta;
  out.v += ts.v[0];
  bool ng = nodes_[a].needs_grad || nodes_[s].needs_grad;
  return push(std::move(out), ng, [a, s](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v;
    if (t.nodes_[s].needs_grad) t.lg(s).v[0] += g.v.sum();
  });
}

int Tape::mul_by_scalar_node(int a, int s) {
  const Tensor &ta = value(check(a)), &ts = value(check(s));
  if (ts.rows != 1 || ts.cols != 1) shape_fail("mul_by_scalar_node", ts);
  Tensor out = ta;
  out.v *= ts.v[0];
  bool ng = nodes_[a].needs_grad || nodes_[s].needs_grad;
  return push(std::move(out), ng, [a, s](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v * t.nodes_[s].value.v[0];
    if (t.nodes_[s].needs_grad) t.lg(s).v[0] += (g.v * t.nodes_[a].value.v).sum();
  });
}

// --- elementwise unary ---

int Tape::neg(int a) { return mul_scalar(a, -1.0); }

int Tape::exp(int a) {
  Tensor out = value(check(a));
  out.v = out.v.exp();
  int self = push(std::move(out), nodes_[a].needs_grad, nullptr);
  nodes_[self].back = [a, self](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v * t.nodes_[self].value.v;
  };
  return self;
}

int Tape::log(int a) {
  Tensor out = value(check(a));
  out.v = out.v.log();
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v / t.nodes_[a].value.v;
  });
}

int Tape::sqrt(int a) {
  Tensor out = value(check(a));
  out.v = out.v.sqrt();
  int self = push(std::move(out), nodes_[a].needs_grad, nullptr);
  nodes_[self].back = [a, self](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += 0.5 * g.v / t.nodes_[self].value.v;
  };
  return self;
}

int Tape::rsqrt(int a) {
  Tensor out = value(check(a));
  out.v = out.v.rsqrt();
  int self = push(std::move(out), nodes_[a].needs_grad, nullptr);
  nodes_[self].back = [a, self](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) {
      const Eigen::ArrayXd& o = t.nodes_[self].value.v;
      t.lg(a).v += -0.5 * g.v * o * o * o;
    }
  };
  return self;
}

int Tape::recip(int a) {
  Tensor out = value(check(a));
  out.v = out.v.inverse();
  int self = push(std::move(out), nodes_[a].needs_grad, nullptr);
  nodes_[self].back = [a, self](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) {
      const Eigen::ArrayXd& o = t.nodes_[self].value.v;
      t.lg(a).v += -g.v * o * o;
    }
  };
  return self;
}

int Tape::sin(int a) {
  Tensor out = value(check(a));
  out.v = out.v.sin();
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v * t.nodes_[a].value.v.cos();
  });
}

int Tape::cos(int a) {
  Tensor out = value(check(a));
  out.v = out.v.cos();
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v -= g.v * t.nodes_[a].value.v.sin();
  });
}

int Tape::relu(int a) {
  Tensor out = value(check(a));
  out.v = out.v.max(0.0);
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad)
      t.lg(a).v += g.v * (t.nodes_[a].value.v > 0.0).cast<double>();
  });
}

int Tape::softplus(int a) {
  Tensor out = value(check(a));
  for (long i = 0; i < out.size(); ++i) out.v[i] = stable_softplus(out.v[i]);
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (!t.nodes_[a].needs_grad) return;
    Tensor& ga = t.lg(a);
    const Eigen::ArrayXd& av = t.nodes_[a].value.v;
    for (long i = 0; i < ga.size(); ++i) ga.v[i] += g.v[i] * stable_sigmoid(av[i]);
  });
}

int Tape::sigmoid(int a) {
  Tensor out = value(check(a));
  for (long i = 0; i < out.size(); ++i) out.v[i] = stable_sigmoid(out.v[i]);
  int self = push(std::move(out), nodes_[a].needs_grad, nullptr);
  nodes_[self].back = [a, self](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) {
      const Eigen::ArrayXd& o = t.nodes_[self].value.v;
      t.lg(a).v += g.v * o * (1.0 - o);
    }
  };
  return self;
}

int Tape::square(int a) {
  Tensor out = value(check(a));
  out.v = out.v.square();
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += 2.0 * g.v * t.nodes_[a].value.v;
  });
}

int Tape::clamp_min(int a, double c) {
  Tensor out = value(check(a));
  out.v = out.v.max(c);
  return push(std::move(out), nodes_[a].needs_grad, [a, c](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad)
      t.lg(a).v += g.v * (t.nodes_[a].value.v > c).cast<double>();
  });
}

// --- reductions ---

int Tape::sum(int a) {
  Tensor out = Tensor::scalar(value(check(a)).v.sum());
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v[0];
  });
}

int Tape::mean(int a) {
  const Tensor& ta = value(check(a));
  double n = static_cast<double>(ta.size());
  Tensor out = Tensor::scalar(ta.v.sum() / n);
  return push(std::move(out), nodes_[a].needs_grad, [a, n](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v[0] / n;
  });
}

int Tape::dot(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("dot", ta, tb);
  Tensor out = Tensor::scalar((ta.v * tb.v).sum());
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v[0] * t.nodes_[b].value.v;
    if (t.nodes_[b].needs_grad) t.lg(b).v += g.v[0] * t.nodes_[a].value.v;
  });
}

int Tape::row_sum(int a) {
  const Tensor& ta = value(check(a));
  Tensor out(ta.rows, 1);
  out.v = as_mat(ta).rowwise().sum().array();
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (!t.nodes_[a].needs_grad) return;
    Tensor& ga = t.lg(a);
    as_mat(ga).colwise() += Eigen::Map<const Eigen::VectorXd>(g.v.data(), g.rows);
  });
}

int Tape::sum_row_blocks(int a, int block) {
  const Tensor& ta = value(check(a));
  if (block <= 0 || ta.rows % block != 0) shape_fail("sum_row_blocks", ta);
  int out_rows = ta.rows / block;
  Tensor out(out_rows, ta.cols);
  for (int r = 0; r < ta.rows; ++r)
    for (int c = 0; c < ta.cols; ++c) out.at(r / block, c) += ta.at(r, c);
  return push(std::move(out), nodes_[a].needs_grad, [a, block](Tape& t, const Tensor& g) {
    if (!t.nodes_[a].needs_grad) return;
    Tensor& ga = t.lg(a);
    for (int r = 0; r < ga.rows; ++r)
      for (int c = 0; c < ga.cols; ++c) ga.at(r, c) += g.at(r / block, c);
  });
}

int Tape::cumsum_excl_rows(int a, int block) {
  const Tensor& ta = value(check(a));
  if (block <= 0 || ta.rows % block != 0) shape_fail("cumsum_excl_rows", ta);
  Tensor out(ta.rows, ta.cols);
  for (int b0 = 0; b0 < ta.rows; b0 += block)
    for (int c = 0; c < ta.cols; ++c) {
      double acc = 0.0;
      for (int r = 0; r < block; ++r) {
        out.at(b0 + r, c) = acc;
        acc += ta.at(b0 + r, c);
      }
    }
  return push(std::move(out), nodes_[a].needs_grad, [a, block](Tape& t, const Tensor& g) {
    if (!t.nodes_[a].needs_grad) return;
    Tensor& ga = t.lg(a);
    for (int b0 = 0; b0 < ga.rows; b0 += block)
      for (int c = 0; c < ga.cols; ++c) {
        double acc = 0.0;
        for (int r = block - 1; r >= 0; --r) {
          ga.at(b0 + r, c) += acc;  // output rows strictly after r consume a_r
          acc += g.at(b0 + r, c);
        }
      }
  });
}

// --- linear algebra and layout ---

int Tape::matmul(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  if (ta.cols != tb.rows)
    throw std::invalid_argument("matmul: inner dims " + std::to_string(ta.cols) + " vs " +
                                std::to_string(tb.rows));
  Tensor out(ta.rows, tb.cols);
  as_mat(out) = as_mat(ta) * as_mat(tb);
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad)
      as_mat(t.lg(a)) += as_mat(g) * as_mat(t.nodes_[b].value).transpose();
    if (t.nodes_[b].needs_grad)
      as_mat(t.lg(b)) += as_mat(t.nodes_[a].value).transpose() * as_mat(g);
  });
}

int Tape::transpose(int a) {
  const Tensor& ta = value(check(a));
  Tensor out(ta.cols, ta.rows);
  as_mat(out) = as_mat(ta).transpose();
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) as_mat(t.lg(a)) += as_mat(g).transpose();
  });
}

int Tape::add_rowvec(int a, int r) {
  const Tensor &ta = value(check(a)), &tr = value(check(r));
  if (tr.rows != 1 || tr.cols != ta.cols) shape_fail("add_rowvec", tr);
  Tensor out = ta;
  as_mat(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(tr.v.data(), tr.cols);
  bool ng = nodes_[a].needs_grad || nodes_[r].needs_grad;
  return push(std::move(out), ng, [a, r](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v;
    if (t.nodes_[r].needs_grad) {
      Tensor& gr = t.lg(r);
      Eigen::Map<Eigen::RowVectorXd>(gr.v.data(), gr.cols) += as_mat(g).colwise().sum();
    }
  });
}

int Tape::mul_colvec(int a, int c) {
  const Tensor &ta = value(check(a)), &tc = value(check(c));
  if (tc.cols != 1 || tc.rows != ta.rows) shape_fail("mul_colvec", tc);
  Tensor out = ta;
  as_mat(out).array().colwise() *=
      Eigen::Map<const Eigen::ArrayXd>(tc.v.data(), tc.rows);
  bool ng = nodes_[a].needs_grad || nodes_[c].needs_grad;
  return push(std::move(out), ng, [a, c](Tape& t, const Tensor& g) {
    const Tensor& ta_ = t.nodes_[a].value;
    const Tensor& tc_ = t.nodes_[c].value;
    if (t.nodes_[a].needs_grad) {
      Tensor& ga = t.lg(a);
      as_mat(ga).array() +=
          as_mat(g).array().colwise() * Eigen::Map<const Eigen::ArrayXd>(tc_.v.data(), tc_.rows);
    }
    if (t.nodes_[c].needs_grad) {
      Tensor& gc = t.lg(c);
      Eigen::Map<Eigen::ArrayXd>(gc.v.data(), gc.rows) +=
          (as_mat(g).array() * as_mat(ta_).array()).rowwise().sum();
    }
  });
}

int Tape::concat_cols(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  if (ta.rows != tb.rows) throw std::invalid_argument("concat_cols: row mismatch");
  Tensor out(ta.rows, ta.cols + tb.cols);
  as_mat(out).leftCols(ta.cols) = as_mat(ta);
  as_mat(out).rightCols(tb.cols) = as_mat(tb);
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  int acols = ta.cols, bcols = tb.cols;
  return push(std::move(out), ng, [a, b, acols, bcols](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) as_mat(t.lg(a)) += as_mat(g).leftCols(acols);
    if (t.nodes_[b].needs_grad) as_mat(t.lg(b)) += as_mat(g).rightCols(bcols);
  });
}

int Tape::reshape(int a, int r, int c) {
  const Tensor& ta = value(check(a));
  if (static_cast<long>(r) * c != ta.size()) shape_fail("reshape", ta);
  Tensor out(r, c);
  out.v = ta.v;
  return push(std::move(out), nodes_[a].needs_grad, [a](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) t.lg(a).v += g.v;
  });
}

int Tape::slice_rows(int a, int r0, int r1) {
  const Tensor& ta = value(check(a));
  if (r0 < 0 || r1 > ta.rows || r0 >= r1) shape_fail("slice_rows", ta);
  Tensor out(r1 - r0, ta.cols);
  as_mat(out) = as_mat(ta).middleRows(r0, r1 - r0);
  return push(std::move(out), nodes_[a].needs_grad, [a, r0](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) as_mat(t.lg(a)).middleRows(r0, g.rows) += as_mat(g);
  });
}

int Tape::slice_cols(int a, int c0, int c1) {
  const Tensor& ta = value(check(a));
  if (c0 < 0 || c1 > ta.cols || c0 >= c1) shape_fail("slice_cols", ta);
  Tensor out(ta.rows, c1 - c0);
  as_mat(out) = as_mat(ta).middleCols(c0, c1 - c0);
  return push(std::move(out), nodes_[a].needs_grad, [a, c0](Tape& t, const Tensor& g) {
    if (t.nodes_[a].needs_grad) as_mat(t.lg(a)).middleCols(c0, g.cols) += as_mat(g);
  });
}

int Tape::repeat_rows_blocked(int a, int times) {
  const Tensor& ta = value(check(a));
  if (times <= 0) shape_fail("repeat_rows_blocked", ta);
  Tensor out(ta.rows * times, ta.cols);
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < ta.cols; ++c) out.at(r, c) = ta.at(r / times, c);
  return push(std::move(out), nodes_[a].needs_grad, [a, times](Tape& t, const Tensor& g) {
    if (!t.nodes_[a].needs_grad) return;
    Tensor& ga = t.lg(a);
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c) ga.at(r / times, c) += g.at(r, c);
  });
}

int Tape::gather_rows(int a, std::vector<int> rows) {
  const Tensor& ta = value(check(a));
  for (int r : rows)
    if (r < 0 || r >= ta.rows) throw std::invalid_argument("gather_rows: index out of range");
  Tensor out(static_cast<int>(rows.size()), ta.cols);
  for (size_t i = 0; i < rows.size(); ++i)
    as_mat(out).row(static_cast<int>(i)) = as_mat(ta).row(rows[i]);
  return push(std::move(out), nodes_[a].needs_grad,
              [a, rows = std::move(rows)](Tape& t, const Tensor& g) {
                if (!t.nodes_[a].needs_grad) return;
                Tensor& ga = t.lg(a);
                for (size_t i = 0; i < rows.size(); ++i)
                  as_mat(ga).row(rows[i]) += as_mat(g).row(static_cast<int>(i));
              });
}

// --- structured ops ---

int Tape::segment_attention(int scores, int values, std::vector<int> segment_of_row,
                            int num_segments) {
  const Tensor &ts = value(check(scores)), &tv = value(check(values));
  if (ts.cols != 1 || ts.rows != tv.rows) shape_fail("segment_attention", ts);
  if (static_cast<int>(segment_of_row.size()) != ts.rows)
    throw std::invalid_argument("segment_attention: segment list length mismatch");
  for (int s : segment_of_row)
    if (s < 0 || s >= num_segments)
      throw std::invalid_argument("segment_attention: segment id out of range");

  // Per-segment softmax weights over scores, then weighted sum of value rows.
  Eigen::ArrayXd seg_max = Eigen::ArrayXd::Constant(num_segments, -1e300);
  for (int r = 0; r < ts.rows; ++r)
    seg_max[segment_of_row[r]] = std::max(seg_max[segment_of_row[r]], ts.v[r]);
  Eigen::ArrayXd seg_denom = Eigen::ArrayXd::Zero(num_segments);
  Tensor weights(ts.rows, 1);
  for (int r = 0; r < ts.rows; ++r) {
    weights.v[r] = std::exp(ts.v[r] - seg_max[segment_of_row[r]]);
    seg_denom[segment_of_row[r]] += weights.v[r];
  }
  for (int r = 0; r < ts.rows; ++r) weights.v[r] /= seg_denom[segment_of_row[r]];

  Tensor out(num_segments, tv.cols);
  for (int r = 0; r < tv.rows; ++r)
    as_mat(out).row(segment_of_row[r]) += weights.v[r] * as_mat(tv).row(r);

  bool ng = nodes_[scores].needs_grad || nodes_[values].needs_grad;
  return push(std::move(out), ng,
              [scores, values, seg = std::move(segment_of_row), weights,
               num_segments](Tape& t, const Tensor& g) {
                const Tensor& tv_ = t.nodes_[values].value;
                const int m = tv_.rows;
                if (t.nodes_[values].needs_grad) {
                  Tensor& gv = t.lg(values);
                  for (int r = 0; r < m; ++r)
                    as_mat(gv).row(r) += weights.v[r] * as_mat(g).row(seg[r]);
                }
                if (t.nodes_[scores].needs_grad) {
                  // d_i = v_i . G_s;  gscore_i = w_i (d_i - sum_j w_j d_j).
                  Eigen::ArrayXd d(m);
                  for (int r = 0; r < m; ++r)
                    d[r] = (as_mat(tv_).row(r).array() * as_mat(g).row(seg[r]).array()).sum();
                  Eigen::ArrayXd seg_mean = Eigen::ArrayXd::Zero(num_segments);
                  for (int r = 0; r < m; ++r) seg_mean[seg[r]] += weights.v[r] * d[r];
                  Tensor& gs = t.lg(scores);
                  for (int r = 0; r < m; ++r)
                    gs.v[r] += weights.v[r] * (d[r] - seg_mean[seg[r]]);
                }
              });
}

int Tape::quat_mul_rows(int a, int b) {
  const Tensor &ta = value(check(a)), &tb = value(check(b));
  require_same("quat_mul_rows", ta, tb);
  if (ta.cols != 4) shape_fail("quat_mul_rows", ta);
  Tensor out(ta.rows, 4);
  for (int r = 0; r < ta.rows; ++r) {
    double aw = ta.at(r, 0), ax = ta.at(r, 1), ay = ta.at(r, 2), az = ta.at(r, 3);
    double bw = tb.at(r, 0), bx = tb.at(r, 1), by = tb.at(r, 2), bz = tb.at(r, 3);
    out.at(r, 0) = aw * bw - ax * bx - ay * by - az * bz;
    out.at(r, 1) = aw * bx + ax * bw + ay * bz - az * by;
    out.at(r, 2) = aw * by - ax * bz + ay * bw + az * bx;
    out.at(r, 3) = aw * bz + ax * by - ay * bx + az * bw;
  }
  bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
  return push(std::move(out), ng, [a, b](Tape& t, const Tensor& g) {
    const Tensor& ta_ = t.nodes_[a].value;
    const Tensor& tb_ = t.nodes_[b].value;
    for (int r = 0; r < ta_.rows; ++r) {
      double aw = ta_.at(r, 0), ax = ta_.at(r, 1), ay = ta_.at(r, 2), az = ta_.at(r, 3);
      double bw = tb_.at(r, 0), bx = tb_.at(r, 1), by = tb_.at(r, 2), bz = tb_.at(r, 3);
      double gw = g.at(r, 0), gx = g.at(r, 1), gy = g.at(r, 2), gz = g.at(r, 3);
      if (t.nodes_[a].needs_grad) {
        Tensor& ga = t.lg(a);
        ga.at(r, 0) += gw * bw + gx * bx + gy * by + gz * bz;
        ga.at(r, 1) += -gw * bx + gx * bw - gy * bz + gz * by;
        ga.at(r, 2) += -gw * by + gx * bz + gy * bw - gz * bx;
        ga.at(r, 3) += -gw * bz - gx * by + gy * bx + gz * bw;
      }
      if (t.nodes_[b].needs_grad) {
        Tensor& gb = t.lg(b);
        gb.at(r, 0) += gw * aw + gx * ax + gy * ay + gz * az;
        gb.at(r, 1) += -gw * ax + gx * aw + gy * az - gz * ay;
        gb.at(r, 2) += -gw * ay - gx * az + gy * aw + gz * ax;
        gb.at(r, 3) += -gw * az + gx * ay - gy * ax + gz * aw;
      }
    }
  });
}

int Tape::quat_to_rotmat(int q) {
  const Tensor& tq = value(check(q));
  if (tq.cols != 4) shape_fail("quat_to_rotmat", tq);
  Tensor out(tq.rows, 9);
  for (int r = 0; r < tq.rows; ++r) {
    double w = tq.at(r, 0), x = tq.at(r, 1), y = tq.at(r, 2), z = tq.at(r, 3);
    out.at(r, 0) = 1 - 2 * (y * y + z * z);
    out.at(r, 1) = 2 * (x * y - w * z);
    out.at(r, 2) = 2 * (x * z + w * y);
    out.at(r, 3) = 2 * (x * y + w * z);
    out.at(r, 4) = 1 - 2 * (x * x + z * z);
    out.at(r, 5) = 2 * (y * z - w * x);
    out.at(r, 6) = 2 * (x * z - w * y);
    out.at(r, 7) = 2 * (y * z + w * x);
    out.at(r, 8) = 1 - 2 * (x * x + y * y);
  }
  return push(std::move(out), nodes_[q].needs_grad, [q](Tape& t, const Tensor& g) {
    if (!t.nodes_[q].needs_grad) return;
    const Tensor& tq_ = t.nodes_[q].value;
    Tensor& gq = t.lg(q);
    for (int r = 0; r < tq_.rows; ++r) {
      double w = tq_.at(r, 0), x = tq_.at(r, 1), y = tq_.at(r, 2), z = tq_.at(r, 3);
      const double* gr = g.v.data() + static_cast<long>(r) * 9;
      gq.at(r, 0) += 2 * (-gr[1] * z + gr[2] * y + gr[3] * z - gr[5] * x - gr[6] * y + gr[7] * x);
      gq.at(r, 1) += 2 * (gr[1] * y + gr[2] * z + gr[3] * y - 2 * gr[4] * x - gr[5] * w +
                          gr[6] * z + gr[7] * w - 2 * gr[8] * x);
      gq.at(r, 2) += 2 * (-2 * gr[0] * y + gr[1] * x + gr[2] * w + gr[3] * x + gr[5] * z -
                          gr[6] * w + gr[7] * z - 2 * gr[8] * y);
      gq.at(r, 3) += 2 * (-2 * gr[0] * z - gr[1] * w + gr[2] * x + gr[3] * w - 2 * gr[4] * z +
                          gr[5] * y + gr[6] * x + gr[7] * y);
    }
  });
}

int Tape::axisangle_to_quat(int v) {
  const Tensor& tv = value(check(v));
  if (tv.cols != 3) shape_fail("axisangle_to_quat", tv);
  Tensor out(tv.rows, 4);
  for (int r = 0; r < tv.rows; ++r) {
    double vx = tv.at(r, 0), vy = tv.at(r, 1), vz = tv.at(r, 2);
    double th = std::sqrt(vx * vx + vy * vy + vz * vz);
    double w, k;
    if (th < 1e-8) {
      w = 1.0 - th * th / 8.0;
      k = 0.5 - th * th / 48.0;
    } else {
      w = std::cos(0.5 * th);
      k = std::sin(0.5 * th) / th;
    }
    out.at(r, 0) = w;
    out.at(r, 1) = k * vx;
    out.at(r, 2) = k * vy;
    out.at(r, 3) = k * vz;
  }
  return push(std::move(out), nodes_[v].needs_grad, [v](Tape& t, const Tensor& g) {
    if (!t.nodes_[v].needs_grad) return;
    const Tensor& tv_ = t.nodes_[v].value;
    Tensor& gv = t.lg(v);
    for (int r = 0; r < tv_.rows; ++r) {
      double vx = tv_.at(r, 0), vy = tv_.at(r, 1), vz = tv_.at(r, 2);
      double th2 = vx * vx + vy * vy + vz * vz;
      double th = std::sqrt(th2);
      double k, kappa;  // kappa = k'(th)/th
      if (th < 1e-8) {
        k = 0.5 - th2 / 48.0;
        kappa = -1.0 / 24.0;
      } else {
        double c2 = std::cos(0.5 * th);
        k = std::sin(0.5 * th) / th;
        kappa = (0.5 * c2 - k) / th2;
      }
      double gw = g.at(r, 0);
      double gx = g.at(r, 1), gy = g.at(r, 2), gz = g.at(r, 3);
      double dotgv = gx * vx + gy * vy + gz * vz;
      gv.at(r, 0) += gw * (-0.5 * k * vx) + k * gx + kappa * dotgv * vx;
      gv.at(r, 1) += gw * (-0.5 * k * vy) + k * gy + kappa * dotgv * vy;
      gv.at(r, 2) += gw * (-0.5 * k * vz) + k * gz + kappa * dotgv * vz;
    }
  });
}

int Tape::activate(int x, Activation act) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::ReLU: return relu(x);
    case Activation::Softplus: return softplus(x);
    case Activation::Sigmoid: return sigmoid(x);
  }
  throw std::logic_error("unknown activation");
}

int Tape::mlp_forward(const std::string& prefix, int layers, int x, Activation act) {
  for (int l = 0; l < layers; ++l) {
    int w = param(prefix + ".w" + std::to_string(l));
    int b = param(prefix + ".b" + std::to_string(l));
    x = activate(affine(x, w, b), act);
  }
  return x;
}

std::vector<std::string> Tape::op_catalog() {
  return {"add",        "sub",          "mul",         "div",
          "min_bin",    "add_scalar",   "mul_scalar",  "add_by_scalar_node",
          "mul_by_scalar_node",         "neg",         "exp",
          "log",        "sqrt",         "rsqrt",       "recip",
          "sin",        "cos",          "relu",        "softplus",
          "sigmoid",    "square",       "clamp_min",   "sum",
          "mean",       "dot",          "row_sum",     "sum_row_blocks",
          "cumsum_excl_rows",           "matmul",      "transpose",
          "add_rowvec", "mul_colvec",   "concat_cols", "reshape",
          "slice_rows", "slice_cols",   "repeat_rows_blocked",
          "gather_rows",                "segment_attention",
          "quat_mul_rows",              "quat_to_rotmat",
          "axisangle_to_quat"};
}

}  // namespace posefield::diff
