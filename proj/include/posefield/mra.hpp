#pragma once

#include <string>
#include <vector>

#include "posefield/avg.hpp"
#include "posefield/diff.hpp"
#include "posefield/viewgraph.hpp"

namespace posefield {

struct MpnnConfig {
  int rounds = 4;
  int state_dim = 32;
};

// Registers the message-passing weights under <prefix>.*: a node embedding,
// per-round edge message MLP, attention scorer and node update, and a head
// whose bias starts at the identity quaternion so the initial network is a
// no-op correction on the bootstrap.
void init_mpnn_params(diff::ParamStore& store, const MpnnConfig& cfg,
                      const std::string& prefix, Rng& rng);

// T rounds of attention-aggregated message passing over both directions of
// every edge; returns the n x state_dim states node on the tape. Node inputs
// are the bootstrap quaternions, edge inputs the per-direction discrepancy
// quaternions. Throws if any node has no incident edge.
int message_pass(diff::Tape& tape, const MpnnConfig& cfg, const std::string& prefix,
                 const ViewGraph& g, const std::vector<UnitQuaternion>& bootstrap);

// Refined absolute rotations as an n x 4 unit-quaternion tape node: the
// normalized head output left-composed onto the bootstrap.
int predict_rotations(diff::Tape& tape, const MpnnConfig& cfg, const std::string& prefix,
                      const ViewGraph& g, const std::vector<UnitQuaternion>& bootstrap);

// Gradient-free forward pass; canonicalized quaternions.
std::vector<UnitQuaternion> predict_rotations_values(
    diff::ParamStore& store, const MpnnConfig& cfg, const std::string& prefix,
    const ViewGraph& g, const std::vector<UnitQuaternion>& bootstrap);

struct MraLossConfig {
  double beta = 0.1;  // weight on the absolute (node) term; >= 0
};

// Sum over stored edges of d_Q(pred_j pred_i^-1, rel) plus beta times the sum
// over nodes of d_Q(pred_j, target_j). Targets are ground truth when known,
// otherwise the current bootstrap estimates.
int loss_mra(diff::Tape& tape, int predictions, const ViewGraph& g,
             const std::vector<UnitQuaternion>& node_targets, const MraLossConfig& cfg);

// Random spanning tree is always retained; the remaining edges are dropped
// with a probability chosen so the expected removed count is fraction * |E|.
ViewGraph dropout_edges(const ViewGraph& g, double fraction, Rng& rng);

struct MraEvalStats {
  double mean_deg = 0.0, median_deg = 0.0, rms_deg = 0.0;
};

struct GraphEval {
  int graph_id = 0;
  double mean_deg_before = 0.0, mean_deg_after = 0.0;
  double rms_before = 0.0, rms_after = 0.0;
};

// Per-node angular errors after optimal gauge alignment, pooled across all
// graphs; per-graph before/after rows optionally reported. "Before" is the
// spanning-tree bootstrap each prediction starts from.
MraEvalStats evaluate(diff::ParamStore& store, const MpnnConfig& cfg,
                      const std::string& prefix, const std::vector<SyntheticGraph>& graphs,
                      std::vector<GraphEval>* per_graph = nullptr,
                      MraEvalStats* bootstrap_stats = nullptr);

struct PretrainConfig {
  MpnnConfig net;
  std::string prefix = "mra";
  int epochs = 25;
  double lr = 5e-5;
  double weight_decay = 1e-4;
  double edge_dropout = 0.25;
  MraLossConfig loss;
  uint64_t seed = 0;
  std::string checkpoint_path;   // epoch-end snapshots; last good on divergence
  std::string metrics_csv_path;  // per-test-graph before/after rows (optional)
};

struct PretrainResult {
  MraEvalStats test_before, test_after;
  double frac_improved = 0.0;  // test graphs with mean_after < mean_before
  int steps_run = 0;
  bool aborted_nan = false;
};

// Per-graph stochastic steps with edge dropout; the last fifth of the dataset
// is held out as the test split. A non-finite loss or gradient aborts and
// restores the last epoch-end checkpoint.
PretrainResult pretrain(const std::vector<SyntheticGraph>& dataset,
                        const PretrainConfig& cfg, diff::ParamStore& store);

}  // namespace posefield
