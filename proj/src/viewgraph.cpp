#include "posefield/viewgraph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>
#include <set>
#include <stdexcept>

namespace posefield {

namespace {

// Union-find over node ids.
struct Dsu {
  std::vector<int> parent;
  explicit Dsu(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[b] = a;
    return true;
  }
};

bool connected_without(const ViewGraph& g, const std::vector<char>& removed) {
  if (g.n == 0) return true;
  Dsu dsu(g.n);
  int merges = 0;
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (!removed[e] && dsu.unite(g.edges[e].i, g.edges[e].j)) ++merges;
  return merges == g.n - 1;
}

}  // namespace

void validate_graph(const ViewGraph& g) {
  if (static_cast<int>(g.estimates.size()) != g.n)
    throw std::invalid_argument("view graph estimate count != node count");
  std::set<std::pair<int, int>> seen;
  for (const auto& e : g.edges) {
    if (e.i < 0 || e.j < 0 || e.i >= g.n || e.j >= g.n)
      throw std::invalid_argument("view graph edge references unknown node");
    if (e.i == e.j) throw std::invalid_argument("view graph contains a self-edge");
    if (!seen.insert({e.i, e.j}).second)
      throw std::invalid_argument("duplicate view graph edge " + std::to_string(e.i) + "->" +
                                  std::to_string(e.j));
  }
}

std::vector<std::vector<int>> connected_components(const ViewGraph& g) {
  Dsu dsu(g.n);
  for (const auto& e : g.edges) dsu.unite(e.i, e.j);
  std::map<int, std::vector<int>> groups;
  for (int v = 0; v < g.n; ++v) groups[dsu.find(v)].push_back(v);
  std::vector<std::vector<int>> out;
  for (auto& [root, members] : groups) out.push_back(std::move(members));
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() > b.size() : a[0] < b[0];
  });
  return out;
}

SyntheticGraph generate_synthetic(const SyntheticGraphSpec& spec) {
  if (spec.node_count_min < 2 || spec.node_count_max < spec.node_count_min)
    throw std::invalid_argument("node count range is empty");
  if (!(spec.edge_density > 0.0) || spec.edge_density > 1.0)
    throw std::invalid_argument("edge density must lie in (0, 1]");
  if (spec.noise_sigma_max_deg < spec.noise_sigma_min_deg || spec.noise_sigma_min_deg < 0.0)
    throw std::invalid_argument("noise sigma range is empty");
  if (spec.outlier_fraction < 0.0 || spec.outlier_fraction > 0.3)
    throw std::invalid_argument("outlier fraction must lie in [0, 0.3]");

  Rng rng(spec.seed);
  const int n = spec.node_count_min +
                static_cast<int>(rng.uniform_int(spec.node_count_max - spec.node_count_min + 1));
  const double sigma_deg =
      spec.noise_sigma_min_deg +
      (spec.noise_sigma_max_deg - spec.noise_sigma_min_deg) * rng.uniform();

  const long all_pairs = static_cast<long>(n) * (n - 1) / 2;
  const long target_edges = std::lround(spec.edge_density * static_cast<double>(all_pairs));
  if (target_edges < n - 1)
    throw std::invalid_argument("edge density too low to connect " + std::to_string(n) +
                                " nodes: yields " + std::to_string(target_edges) + " edges");

  SyntheticGraph out;
  out.sigma_deg = sigma_deg;
  out.graph.n = n;
  out.graph.estimates.assign(n, UnitQuaternion::identity());
  out.gt.reserve(n);
  for (int v = 0; v < n; ++v) out.gt.push_back(random_rotation(rng));

  // Random spanning tree, then extra unordered pairs up to the density target.
  std::vector<std::pair<int, int>> pairs;
  std::set<std::pair<int, int>> used;
  for (int v = 1; v < n; ++v) {
    int parent = static_cast<int>(rng.uniform_int(v));
    pairs.emplace_back(parent, v);
    used.insert({parent, v});
  }
  std::vector<std::pair<int, int>> extras;
  extras.reserve(all_pairs - (n - 1));
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      if (!used.count({a, b})) extras.emplace_back(a, b);
  for (size_t k = extras.size(); k > 1; --k)
    std::swap(extras[k - 1], extras[rng.uniform_int(k)]);
  for (long e = 0; e < target_edges - (n - 1); ++e) pairs.push_back(extras[e]);

  const double sigma_rad = deg2rad(sigma_deg);
  const double per_axis_var = sigma_rad * sigma_rad;
  for (const auto& [a, b] : pairs) {
    ViewGraphEdge edge;
    bool forward = rng.uniform() < 0.5;
    edge.i = forward ? a : b;
    edge.j = forward ? b : a;
    bool outlier = rng.uniform() < spec.outlier_fraction;
    UnitQuaternion noise = sample_axis_angle_noise(per_axis_var, rng);
    UnitQuaternion clean = out.gt[edge.j] * out.gt[edge.i].conjugate();
    edge.rel = outlier ? random_rotation(rng) : noise * clean;
    out.graph.edges.push_back(edge);
    out.outlier_mask.push_back(outlier ? 1 : 0);
  }
  validate_graph(out.graph);
  return out;
}

std::vector<SyntheticGraph> generate_dataset(const SyntheticGraphSpec& base, int count,
                                             uint64_t master_seed) {
  std::vector<SyntheticGraph> out;
  out.reserve(count);
  for (int g = 0; g < count; ++g) {
    SyntheticGraphSpec spec = base;
    spec.seed = hash_combine(master_seed, static_cast<uint64_t>(g));
    out.push_back(generate_synthetic(spec));
  }
  return out;
}

ViewGraph clean_cycles(const ViewGraph& g, double deviation_threshold_deg,
                       CleanReport* report) {
  validate_graph(g);
  CleanReport local;
  CleanReport& rep = report ? *report : local;
  rep = CleanReport{};

  // Undirected edge lookup: node pair -> edge index.
  std::map<std::pair<int, int>, int> by_pair;
  for (size_t e = 0; e < g.edges.size(); ++e) {
    int a = std::min(g.edges[e].i, g.edges[e].j), b = std::max(g.edges[e].i, g.edges[e].j);
    by_pair[{a, b}] = static_cast<int>(e);
  }
  std::vector<std::vector<int>> adj(g.n);
  for (const auto& e : g.edges) {
    adj[e.i].push_back(e.j);
    adj[e.j].push_back(e.i);
  }
  for (auto& nb : adj) {
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }

  // Traversal a->b: the observed relative oriented as R_b R_a^-1.
  auto oriented = [&](int a, int b) {
    const ViewGraphEdge& e = g.edges[by_pair.at({std::min(a, b), std::max(a, b)})];
    return (e.i == a) ? e.rel : e.rel.conjugate();
  };

  const double threshold = deg2rad(deviation_threshold_deg);
  std::vector<int> triangles_on(g.edges.size(), 0), bad_on(g.edges.size(), 0);
  std::vector<double> worst_angle(g.edges.size(), 0.0);
  for (int a = 0; a < g.n; ++a)
    for (int b : adj[a]) {
      if (b <= a) continue;
      for (int c : adj[b]) {
        if (c <= b || !by_pair.count({a, c})) continue;
        ++rep.triangle_count;
        UnitQuaternion loop = oriented(c, a) * oriented(b, c) * oriented(a, b);
        double angle = loop.angle();
        bool bad = angle > threshold;
        for (auto [u, v] : {std::pair{a, b}, {b, c}, {a, c}}) {
          int e = by_pair.at({u, v});
          ++triangles_on[e];
          if (bad) ++bad_on[e];
          worst_angle[e] = std::max(worst_angle[e], angle);
        }
      }
    }

  if (rep.triangle_count == 0) {
    rep.no_cycles = true;
    return g;
  }

  // An edge is suspect only when every triangle through it is bad.
  std::vector<int> candidates;
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (triangles_on[e] > 0 && bad_on[e] == triangles_on[e]) candidates.push_back(e);
  std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    return worst_angle[a] != worst_angle[b] ? worst_angle[a] > worst_angle[b] : a < b;
  });

  std::vector<char> removed(g.edges.size(), 0);
  for (int e : candidates) {
    removed[e] = 1;
    if (connected_without(g, removed)) {
      rep.removed_edges.push_back(e);
    } else {
      removed[e] = 0;
      rep.retained_flagged.push_back(e);
    }
  }
  std::sort(rep.removed_edges.begin(), rep.removed_edges.end());
  std::sort(rep.retained_flagged.begin(), rep.retained_flagged.end());

  ViewGraph out;
  out.n = g.n;
  out.estimates = g.estimates;
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (!removed[e]) out.edges.push_back(g.edges[e]);
  return out;
}

std::vector<UnitQuaternion> mst_bootstrap(const ViewGraph& g) {
  validate_graph(g);
  auto components = connected_components(g);
  if (components.size() != 1) {
    std::string msg = "view graph is disconnected: " + std::to_string(components.size()) +
                      " components with sizes";
    for (const auto& c : components) msg += " " + std::to_string(c.size());
    msg += "; smallest contains node " + std::to_string(components.back().front());
    throw std::invalid_argument(msg);
  }

  std::vector<std::vector<std::pair<int, int>>> adj(g.n);  // neighbor, edge index
  std::vector<int> degree(g.n, 0);
  for (size_t e = 0; e < g.edges.size(); ++e) {
    adj[g.edges[e].i].push_back({g.edges[e].j, static_cast<int>(e)});
    adj[g.edges[e].j].push_back({g.edges[e].i, static_cast<int>(e)});
    ++degree[g.edges[e].i];
    ++degree[g.edges[e].j];
  }
  int root = 0;
  for (int v = 1; v < g.n; ++v)
    if (degree[v] > degree[root]) root = v;  // ties keep the lowest id
  for (auto& nb : adj) std::sort(nb.begin(), nb.end());

  std::vector<UnitQuaternion> est(g.n, UnitQuaternion::identity());
  std::vector<char> seen(g.n, 0);
  std::queue<int> queue;
  queue.push(root);
  seen[root] = 1;
  while (!queue.empty()) {
    int u = queue.front();
    queue.pop();
    for (auto [v, e] : adj[u]) {
      if (seen[v]) continue;
      seen[v] = 1;
      // R_v = R~_uv R_u when the stored edge is u->v, else the inverse.
      const ViewGraphEdge& edge = g.edges[e];
      est[v] = (edge.i == u) ? edge.rel * est[u] : edge.rel.conjugate() * est[u];
      queue.push(v);
    }
  }
  return est;
}

std::vector<UnitQuaternion> edge_discrepancy(const ViewGraph& g,
                                             const std::vector<UnitQuaternion>& estimates) {
  if (static_cast<int>(estimates.size()) != g.n)
    throw std::invalid_argument("edge_discrepancy: estimates do not cover all nodes");
  std::vector<UnitQuaternion> out;
  out.reserve(g.edges.size());
  for (const auto& e : g.edges)
    out.push_back(e.rel * estimates[e.i] * estimates[e.j].conjugate());
  return out;
}

std::vector<UnitQuaternion> relatives_from_absolutes(
    const std::vector<UnitQuaternion>& absolutes,
    const std::vector<std::pair<int, int>>& edge_list) {
  std::vector<UnitQuaternion> out;
  out.reserve(edge_list.size());
  for (const auto& [i, j] : edge_list) {
    if (i < 0 || j < 0 || i >= static_cast<int>(absolutes.size()) ||
        j >= static_cast<int>(absolutes.size()))
      throw std::invalid_argument("relatives_from_absolutes: node id out of range");
    out.push_back(absolutes[j] * absolutes[i].conjugate());
  }
  return out;
}

SerializedGraph to_serialized(const ViewGraph& g, const std::vector<UnitQuaternion>& gt) {
  SerializedGraph s;
  s.n = g.n;
  for (const auto& e : g.edges) s.edges.emplace_back(e.i, e.j, e.rel);
  s.gt = gt;
  return s;
}

ViewGraph graph_from_serialized(const SerializedGraph& s, std::vector<UnitQuaternion>* gt) {
  ViewGraph g;
  g.n = s.n;
  g.estimates.assign(s.n, UnitQuaternion::identity());
  for (const auto& [i, j, q] : s.edges) g.edges.push_back({i, j, q});
  validate_graph(g);
  if (gt) *gt = s.gt;
  return g;
}

}  // namespace posefield
