#include "posefield/mra.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "posefield/io.hpp"

namespace posefield {

using diff::Activation;
using diff::ParamStore;
using diff::Tape;
using diff::Tensor;

namespace {

Tensor quat_rows(const std::vector<UnitQuaternion>& qs) {
  Tensor t(static_cast<int>(qs.size()), 4);
  for (size_t r = 0; r < qs.size(); ++r) {
    t.at(static_cast<int>(r), 0) = qs[r].w;
    t.at(static_cast<int>(r), 1) = qs[r].x;
    t.at(static_cast<int>(r), 2) = qs[r].y;
    t.at(static_cast<int>(r), 3) = qs[r].z;
  }
  return t;
}

// Conjugation mask: negate the vector part of every quaternion row.
Tensor conj_mask(int rows) {
  Tensor t(rows, 4);
  for (int r = 0; r < rows; ++r) {
    t.at(r, 0) = 1.0;
    t.at(r, 1) = -1.0;
    t.at(r, 2) = -1.0;
    t.at(r, 3) = -1.0;
  }
  return t;
}

struct DirectedEdges {
  std::vector<int> src, dst;  // 2E entries, both orientations of each edge
  Tensor feat;                // 2E x 4 discrepancy quaternions
};

DirectedEdges directed_edges(const ViewGraph& g, const std::vector<UnitQuaternion>& boot) {
  std::vector<int> degree(g.n, 0);
  std::vector<UnitQuaternion> feats;
  DirectedEdges d;
  for (const auto& e : g.edges) {
    ++degree[e.i];
    ++degree[e.j];
    d.src.push_back(e.i);
    d.dst.push_back(e.j);
    feats.push_back(e.rel * boot[e.i] * boot[e.j].conjugate());
    d.src.push_back(e.j);
    d.dst.push_back(e.i);
    feats.push_back(e.rel.conjugate() * boot[e.j] * boot[e.i].conjugate());
  }
  for (int v = 0; v < g.n; ++v)
    if (degree[v] == 0)
      throw std::invalid_argument("message_pass: isolated node " + std::to_string(v));
  d.feat = quat_rows(feats);
  return d;
}

// Rowwise d_Q with a tiny floor inside the square root so the gradient stays
// finite at exact agreement.
int dq_rows(Tape& t, int a, int b) {
  const int d2 = t.row_sum(t.square(t.sub(a, b)));
  const int s2 = t.row_sum(t.square(t.add(a, b)));
  return t.sqrt(t.add_scalar(t.min_bin(d2, s2), 1e-18));
}

std::vector<double> aligned_errors_deg(const std::vector<UnitQuaternion>& est,
                                       const std::vector<UnitQuaternion>& gt) {
  const UnitQuaternion gauge = align_rotation_sets(est, gt);
  std::vector<double> errs;
  errs.reserve(est.size());
  for (size_t v = 0; v < est.size(); ++v)
    errs.push_back(rad2deg(geodesic_angle(est[v] * gauge, gt[v])));
  return errs;
}

MraEvalStats stats_of(std::vector<double> errs_deg) {
  MraEvalStats s;
  if (errs_deg.empty()) return s;
  double sum = 0.0, sum_sq = 0.0;
  for (double e : errs_deg) {
    sum += e;
    sum_sq += e * e;
  }
  std::sort(errs_deg.begin(), errs_deg.end());
  const size_t n = errs_deg.size();
  s.mean_deg = sum / n;
  s.rms_deg = std::sqrt(sum_sq / n);
  s.median_deg = n % 2 ? errs_deg[n / 2] : 0.5 * (errs_deg[n / 2 - 1] + errs_deg[n / 2]);
  return s;
}

}  // namespace

void init_mpnn_params(ParamStore& store, const MpnnConfig& cfg, const std::string& prefix,
                      Rng& rng) {
  if (cfg.rounds < 1 || cfg.state_dim < 1)
    throw std::invalid_argument("init_mpnn_params: rounds and state_dim must be positive");
  const int h = cfg.state_dim;
  auto dense = [&](const std::string& name, int in, int out) {
    store.add(name + ".w0", Tensor::normal(rng, in, out, std::sqrt(2.0 / in)));
    store.add(name + ".b0", Tensor::zeros(1, out), false);
  };
  dense(prefix + ".embed", 4, h);
  for (int t = 0; t < cfg.rounds; ++t) {
    const std::string psi = prefix + ".psi" + std::to_string(t);
    store.add(psi + ".w0", Tensor::normal(rng, 2 * h + 4, h, std::sqrt(2.0 / (2 * h + 4))));
    store.add(psi + ".b0", Tensor::zeros(1, h), false);
    store.add(psi + ".w1", Tensor::normal(rng, h, h, std::sqrt(2.0 / h)));
    store.add(psi + ".b1", Tensor::zeros(1, h), false);
    const std::string sc = prefix + ".score" + std::to_string(t);
    store.add(sc + ".w", Tensor::normal(rng, h, 1, std::sqrt(1.0 / h)));
    store.add(sc + ".b", Tensor::zeros(1, 1), false);
    dense(prefix + ".phi" + std::to_string(t), 2 * h, h);
  }
  store.add(prefix + ".head.w", Tensor::normal(rng, h, 4, 1e-3));
  Tensor head_b = Tensor::zeros(1, 4);
  head_b.at(0, 0) = 1.0;  // identity correction at init
  store.add(prefix + ".head.b", head_b, false);
}

int message_pass(Tape& tape, const MpnnConfig& cfg, const std::string& prefix,
                 const ViewGraph& g, const std::vector<UnitQuaternion>& bootstrap) {
  validate_graph(g);
  if (static_cast<int>(bootstrap.size()) != g.n)
    throw std::invalid_argument("message_pass: bootstrap does not cover all nodes");
  if (g.n == 0) throw std::invalid_argument("message_pass: empty graph");
  const DirectedEdges de = directed_edges(g, bootstrap);

  const int boot = tape.constant(quat_rows(bootstrap));
  const int efeat = tape.constant(de.feat);
  int h = tape.mlp_forward(prefix + ".embed", 1, boot, Activation::ReLU);
  for (int t = 0; t < cfg.rounds; ++t) {
    const std::string rt = std::to_string(t);
    const int hd = tape.gather_rows(h, de.dst);
    const int hs = tape.gather_rows(h, de.src);
    const int msg_in = tape.concat_cols(tape.concat_cols(hd, hs), efeat);
    const int msg = tape.mlp_forward(prefix + ".psi" + rt, 2, msg_in, Activation::ReLU);
    const int score = tape.affine(msg, tape.param(prefix + ".score" + rt + ".w"),
                                  tape.param(prefix + ".score" + rt + ".b"));
    const int pooled = tape.segment_attention(score, msg, de.dst, g.n);
    h = tape.mlp_forward(prefix + ".phi" + rt, 1, tape.concat_cols(h, pooled),
                         Activation::ReLU);
  }
  return h;
}

int predict_rotations(Tape& tape, const MpnnConfig& cfg, const std::string& prefix,
                      const ViewGraph& g, const std::vector<UnitQuaternion>& bootstrap) {
  const int states = message_pass(tape, cfg, prefix, g, bootstrap);
  const int raw = tape.affine(states, tape.param(prefix + ".head.w"),
                              tape.param(prefix + ".head.b"));
  const int inv_norm = tape.rsqrt(tape.clamp_min(tape.row_sum(tape.square(raw)), 1e-16));
  const int correction = tape.mul_colvec(raw, inv_norm);
  return tape.quat_mul_rows(correction, tape.constant(quat_rows(bootstrap)));
}

std::vector<UnitQuaternion> predict_rotations_values(
    ParamStore& store, const MpnnConfig& cfg, const std::string& prefix, const ViewGraph& g,
    const std::vector<UnitQuaternion>& bootstrap) {
  Tape tape(&store);
  const int pred = predict_rotations(tape, cfg, prefix, g, bootstrap);
  const Tensor& v = tape.value(pred);
  std::vector<UnitQuaternion> out;
  out.reserve(g.n);
  for (int r = 0; r < v.rows; ++r)
    out.emplace_back(v.at(r, 0), v.at(r, 1), v.at(r, 2), v.at(r, 3));
  return out;
}

int loss_mra(Tape& tape, int predictions, const ViewGraph& g,
             const std::vector<UnitQuaternion>& node_targets, const MraLossConfig& cfg) {
  if (cfg.beta < 0.0) throw std::invalid_argument("loss_mra: beta must be >= 0");
  if (static_cast<int>(node_targets.size()) != g.n)
    throw std::invalid_argument("loss_mra: targets do not cover all nodes");

  const int e = static_cast<int>(g.edges.size());
  std::vector<int> src, dst;
  std::vector<UnitQuaternion> rels;
  for (const auto& edge : g.edges) {
    src.push_back(edge.i);
    dst.push_back(edge.j);
    rels.push_back(edge.rel);
  }
  const int node_term = tape.sum(dq_rows(tape, predictions,
                                         tape.constant(quat_rows(node_targets))));
  if (e == 0) return tape.mul_scalar(node_term, cfg.beta);

  const int ps = tape.gather_rows(predictions, src);
  const int pd = tape.gather_rows(predictions, dst);
  const int ps_conj = tape.mul(ps, tape.constant(conj_mask(e)));
  const int pred_rel = tape.quat_mul_rows(pd, ps_conj);
  const int edge_term = tape.sum(dq_rows(tape, pred_rel, tape.constant(quat_rows(rels))));
  return tape.add(edge_term, tape.mul_scalar(node_term, cfg.beta));
}

ViewGraph dropout_edges(const ViewGraph& g, double fraction, Rng& rng) {
  validate_graph(g);
  if (fraction < 0.0 || fraction >= 1.0)
    throw std::invalid_argument("dropout_edges: fraction must be in [0, 1)");
  const int e = static_cast<int>(g.edges.size());
  if (fraction == 0.0 || e == 0) return g;

  // Kruskal over a shuffled order picks a random spanning tree (forest on
  // disconnected inputs) that is always retained.
  std::vector<int> order(e);
  std::iota(order.begin(), order.end(), 0);
  for (int k = e - 1; k > 0; --k) std::swap(order[k], order[rng.uniform_int(k + 1)]);
  std::vector<int> parent(g.n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  std::vector<char> in_tree(e, 0);
  int tree_edges = 0;
  for (int idx : order) {
    const int a = find(g.edges[idx].i), b = find(g.edges[idx].j);
    if (a != b) {
      parent[a] = b;
      in_tree[idx] = 1;
      ++tree_edges;
    }
  }

  // Drop probability on the droppable remainder so the expected removed count
  // is fraction * |E|.
  const int droppable = e - tree_edges;
  const double q = droppable > 0 ? std::min(1.0, fraction * e / droppable) : 0.0;
  ViewGraph out;
  out.n = g.n;
  out.estimates = g.estimates;
  for (int idx = 0; idx < e; ++idx) {
    if (in_tree[idx]) {
      out.edges.push_back(g.edges[idx]);
    } else if (rng.uniform() >= q) {
      out.edges.push_back(g.edges[idx]);
    }
  }
  return out;
}

MraEvalStats evaluate(ParamStore& store, const MpnnConfig& cfg, const std::string& prefix,
                      const std::vector<SyntheticGraph>& graphs,
                      std::vector<GraphEval>* per_graph, MraEvalStats* bootstrap_stats) {
  std::vector<double> pooled_after, pooled_before;
  if (per_graph) per_graph->clear();
  for (size_t k = 0; k < graphs.size(); ++k) {
    const SyntheticGraph& sg = graphs[k];
    const auto boot = mst_bootstrap(sg.graph);
    const auto pred = predict_rotations_values(store, cfg, prefix, sg.graph, boot);
    const auto before = aligned_errors_deg(boot, sg.gt);
    const auto after = aligned_errors_deg(pred, sg.gt);
    pooled_before.insert(pooled_before.end(), before.begin(), before.end());
    pooled_after.insert(pooled_after.end(), after.begin(), after.end());
    if (per_graph) {
      GraphEval row;
      row.graph_id = static_cast<int>(k);
      row.mean_deg_before = stats_of(before).mean_deg;
      row.mean_deg_after = stats_of(after).mean_deg;
      row.rms_before = stats_of(before).rms_deg;
      row.rms_after = stats_of(after).rms_deg;
      per_graph->push_back(row);
    }
  }
  if (bootstrap_stats) *bootstrap_stats = stats_of(pooled_before);
  return stats_of(pooled_after);
}

PretrainResult pretrain(const std::vector<SyntheticGraph>& dataset, const PretrainConfig& cfg,
                        ParamStore& store) {
  if (dataset.size() < 2)
    throw std::invalid_argument("pretrain: need at least 2 graphs for a train/test split");
  const int n_test = std::max<int>(1, static_cast<int>(dataset.size()) / 5);
  const int n_train = static_cast<int>(dataset.size()) - n_test;

  Rng rng(hash_combine(cfg.seed, 0x6d72615full));
  if (!store.has(cfg.prefix + ".head.w")) {
    Rng init_rng = rng.fork(1);
    init_mpnn_params(store, cfg.net, cfg.prefix, init_rng);
  }

  PretrainResult res;
  if (!cfg.checkpoint_path.empty()) store.save(cfg.checkpoint_path);

  std::vector<int> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  bool diverged = false;
  for (int epoch = 0; epoch < cfg.epochs && !diverged; ++epoch) {
    for (int k = n_train - 1; k > 0; --k) std::swap(order[k], order[rng.uniform_int(k + 1)]);
    for (int idx : order) {
      const SyntheticGraph& sg = dataset[idx];
      const ViewGraph gd = cfg.edge_dropout > 0.0
                               ? dropout_edges(sg.graph, cfg.edge_dropout, rng)
                               : sg.graph;
      const auto boot = mst_bootstrap(gd);
      // Express ground truth in the bootstrap's gauge: the graph features are
      // purely relative, so the dataset's absolute frame is unlearnable.
      const UnitQuaternion gauge = align_rotation_sets(sg.gt, boot);
      std::vector<UnitQuaternion> targets;
      targets.reserve(sg.gt.size());
      for (const auto& q : sg.gt) targets.push_back(q * gauge);
      Tape tape(&store);
      const int pred = predict_rotations(tape, cfg.net, cfg.prefix, gd, boot);
      const int loss = loss_mra(tape, pred, gd, targets, cfg.loss);
      if (!std::isfinite(tape.value(loss).at(0, 0))) {
        diverged = true;
        break;
      }
      store.zero_grad();
      tape.backward(loss, 1.0, "mra");
      try {
        store.adam_step(cfg.lr, cfg.weight_decay);
      } catch (const std::runtime_error&) {
        diverged = true;
        break;
      }
      ++res.steps_run;
    }
    if (!diverged && !cfg.checkpoint_path.empty()) store.save(cfg.checkpoint_path);
  }
  if (diverged) {
    res.aborted_nan = true;
    if (!cfg.checkpoint_path.empty() && std::filesystem::exists(cfg.checkpoint_path))
      store.load(cfg.checkpoint_path);
  }

  const std::vector<SyntheticGraph> test(dataset.end() - n_test, dataset.end());
  std::vector<GraphEval> rows;
  res.test_after = evaluate(store, cfg.net, cfg.prefix, test, &rows, &res.test_before);
  int improved = 0;
  for (const auto& r : rows)
    if (r.mean_deg_after < r.mean_deg_before) ++improved;
  res.frac_improved = rows.empty() ? 0.0 : static_cast<double>(improved) / rows.size();

  if (!cfg.metrics_csv_path.empty()) {
    CsvWriter csv({"graph_id", "mean_deg_before", "mean_deg_after", "rms_before",
                   "rms_after"});
    for (const auto& r : rows)
      csv.add_row({static_cast<double>(r.graph_id), r.mean_deg_before, r.mean_deg_after,
                   r.rms_before, r.rms_after});
    csv.save(cfg.metrics_csv_path);
  }
  return res;
}

}  // namespace posefield
