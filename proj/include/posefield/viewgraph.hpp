#pragma once

#include <string>
#include <utility>
#include <vector>

#include "posefield/geom.hpp"
#include "posefield/io.hpp"

namespace posefield {

struct ViewGraphEdge {
  int i = 0, j = 0;          // directed: rel maps frame i to frame j
  UnitQuaternion rel;        // observed R_j * R_i^-1
};

// Directed view graph with per-node absolute rotation estimates.
struct ViewGraph {
  int n = 0;
  std::vector<UnitQuaternion> estimates;  // size n (identity until bootstrapped)
  std::vector<ViewGraphEdge> edges;
};

// Throws on self-edges, duplicate ordered pairs, or out-of-range ids.
void validate_graph(const ViewGraph& g);

// Node sets of the weakly connected components, each sorted, largest first.
std::vector<std::vector<int>> connected_components(const ViewGraph& g);

struct SyntheticGraphSpec {
  int node_count_min = 20, node_count_max = 50;
  double edge_density = 0.25;            // fraction of all unordered pairs
  double noise_sigma_min_deg = 5.0, noise_sigma_max_deg = 30.0;
  double outlier_fraction = 0.0;         // per-edge Bernoulli, capped at 0.3
  uint64_t seed = 0;
};

struct SyntheticGraph {
  ViewGraph graph;
  std::vector<UnitQuaternion> gt;        // one absolute rotation per node
  std::vector<char> outlier_mask;        // parallel to graph.edges
  double sigma_deg = 0.0;                // the per-graph noise level drawn
};

SyntheticGraph generate_synthetic(const SyntheticGraphSpec& spec);
std::vector<SyntheticGraph> generate_dataset(const SyntheticGraphSpec& base, int count,
                                             uint64_t master_seed);

struct CleanReport {
  std::vector<int> removed_edges;     // indices into the input edge list
  std::vector<int> retained_flagged;  // bad-cycle edges kept to preserve connectivity
  int triangle_count = 0;
  bool no_cycles = false;             // graph had no 3-cycles; nothing checked
};

// Removes edges all of whose 3-cycles compose to more than the threshold away
// from identity; never disconnects the graph (such edges are kept and flagged).
ViewGraph clean_cycles(const ViewGraph& g, double deviation_threshold_deg,
                       CleanReport* report = nullptr);

// Spanning-tree bootstrap: identity at the maximum-degree root (ties -> lowest
// id), absolutes chained along BFS tree paths. Throws if disconnected.
std::vector<UnitQuaternion> mst_bootstrap(const ViewGraph& g);

// Per-edge discrepancy between the observed relative and the one predicted by
// the estimates: e_uv = R~_uv * (R^_v R^_u^-1)^-1. Exactly right-gauge invariant.
std::vector<UnitQuaternion> edge_discrepancy(const ViewGraph& g,
                                             const std::vector<UnitQuaternion>& estimates);

std::vector<UnitQuaternion> relatives_from_absolutes(
    const std::vector<UnitQuaternion>& absolutes,
    const std::vector<std::pair<int, int>>& edge_list);

SerializedGraph to_serialized(const ViewGraph& g, const std::vector<UnitQuaternion>& gt);
ViewGraph graph_from_serialized(const SerializedGraph& s, std::vector<UnitQuaternion>* gt);

}  // namespace posefield
