#pragma once

// Shortest paths over the multimodal graph: single-source Dijkstra, path
// tracing, zone-to-zone skims and all-or-nothing link loading.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fourstep/distribution.hpp"
#include "fourstep/error.hpp"
#include "fourstep/network.hpp"

namespace fourstep::routing {

using network::MultimodalGraph;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();
inline constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

struct ShortestPathTree {
  std::size_t source = 0;
  std::vector<double> dist;           // kInfinity when unreachable
  std::vector<std::size_t> prev;      // predecessor node, kNoNode if none
  std::vector<std::size_t> prev_edge; // edge used to reach the node, kNoNode if none

  bool reachable(std::size_t v) const { return std::isfinite(dist.at(v)); }
};

// Binary heap with lazy insertion; equal tentative distances pop in ascending
// node index, and a node's predecessor only changes on a strict improvement.
inline ShortestPathTree dijkstra(const MultimodalGraph& g, std::size_t source) {
  if (source >= g.node_count()) throw NotFound("dijkstra: unknown source node index " + std::to_string(source));
  ShortestPathTree t;
  t.source = source;
  t.dist.assign(g.node_count(), kInfinity);
  t.prev.assign(g.node_count(), kNoNode);
  t.prev_edge.assign(g.node_count(), kNoNode);
  std::vector<char> done(g.node_count(), 0);

  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue;
  t.dist[source] = 0.0;
  queue.emplace(0.0, source);
  while (!queue.empty()) {
    const auto [d, u] = queue.top();
    queue.pop();
    if (done[u]) continue;
    done[u] = 1;
    for (const std::size_t k : g.out_edges(u)) {
      const auto& e = g.edge(k);
      if (e.impedance < 0.0) throw InvalidArgument("dijkstra: negative edge weight");
      const double alt = d + e.impedance;
      if (alt < t.dist[e.to]) {
        t.dist[e.to] = alt;
        t.prev[e.to] = u;
        t.prev_edge[e.to] = k;
        queue.emplace(alt, e.to);
      }
    }
  }
  return t;
}

inline ShortestPathTree dijkstra(const MultimodalGraph& g, const std::string& source_id) {
  return dijkstra(g, g.node_index(source_id));
}

struct RoutePath {
  std::vector<std::size_t> nodes;
  std::vector<std::size_t> edges;          // edges.size() == nodes.size() - 1
  std::vector<network::Mode> modes;        // per leg
  double total = 0.0;
};

inline RoutePath trace_path(const ShortestPathTree& tree, std::size_t target, const MultimodalGraph& g) {
  if (target >= tree.dist.size()) throw NotFound("trace_path: unknown target node index");
  if (!tree.reachable(target))
    throw NotFound("trace_path: node '" + g.node(target).id + "' is unreachable from '" + g.node(tree.source).id + "'");
  RoutePath p;
  for (std::size_t v = target; v != tree.source; v = tree.prev[v]) {
    p.nodes.push_back(v);
    p.edges.push_back(tree.prev_edge[v]);
  }
  p.nodes.push_back(tree.source);
  std::reverse(p.nodes.begin(), p.nodes.end());
  std::reverse(p.edges.begin(), p.edges.end());
  for (auto k : p.edges) {
    p.modes.push_back(g.edge(k).mode);
    p.total += g.edge(k).impedance;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Skims

struct SkimStats {
  std::size_t single_source_runs = 0;
};

// One tree per zone, rooted at the zone's anchor.
inline std::vector<ShortestPathTree> zone_trees(const MultimodalGraph& g, const std::vector<std::string>& zones,
                                                SkimStats* stats = nullptr) {
  std::vector<std::size_t> anchors;
  for (const auto& z : zones) anchors.push_back(g.anchor(z));
  std::vector<ShortestPathTree> trees;
  trees.reserve(zones.size());
  for (auto a : anchors) {
    trees.push_back(dijkstra(g, a));
    if (stats) ++stats->single_source_runs;
  }
  return trees;
}

inline distribution::CostMatrix skim_from_trees(const MultimodalGraph& g, const std::vector<std::string>& zones,
                                                const std::vector<ShortestPathTree>& trees, double intrazonal) {
  const std::size_t n = zones.size();
  distribution::CostMatrix c(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      c(i, j) = i == j ? intrazonal : trees[i].dist[g.anchor(zones[j])];
  return c;
}

// c_ij = shortest anchor(i) -> anchor(j) impedance; diagonal = intrazonal
// floor; unreachable pairs carry distribution::kUnreachable.
inline distribution::CostMatrix cost_skim(const MultimodalGraph& g, const std::vector<std::string>& zones,
                                          double intrazonal = distribution::kDefaultIntrazonalFloor,
                                          SkimStats* stats = nullptr) {
  for (const auto& z : zones)
    if (!g.has_anchor(z)) throw NotFound("cost_skim: zone '" + z + "' has no anchor node");
  return skim_from_trees(g, zones, zone_trees(g, zones, stats), intrazonal);
}

// All-or-nothing loading: every OD pair's trips go onto its traced path.
// Returns trips per edge index.
inline std::vector<double> link_loads(const MultimodalGraph& g, const std::vector<std::string>& zones,
                                      const std::vector<ShortestPathTree>& trees, const distribution::ODMatrix& od) {
  std::vector<double> load(g.edge_count(), 0.0);
  for (std::size_t i = 0; i < od.n; ++i)
    for (std::size_t j = 0; j < od.n; ++j) {
      const double t = od(i, j);
      if (t <= 0.0 || i == j) continue;
      const auto target = g.anchor(zones[j]);
      if (!trees[i].reachable(target)) continue;
      for (auto k : trace_path(trees[i], target, g).edges) load[k] += t;
    }
  return load;
}

// GeoJSON LineString Feature of the path's node coordinates ([lon, lat]).
// A single-node path repeats its point so the line stays valid.
inline nlohmann::json route_feature(const RoutePath& p, const MultimodalGraph& g) {
  nlohmann::json coords = nlohmann::json::array();
  for (auto v : p.nodes) coords.push_back({g.node(v).lon, g.node(v).lat});
  if (coords.size() == 1) coords.push_back(coords[0]);
  nlohmann::json modes = nlohmann::json::array();
  for (auto m : p.modes) modes.push_back(network::to_string(m));
  return {{"type", "Feature"},
          {"geometry", {{"type", "LineString"}, {"coordinates", coords}}},
          {"properties", {{"seconds", p.total}, {"modes", modes}}}};
}

inline std::string path_node_ids(const RoutePath& p, const MultimodalGraph& g) {
  std::string s;
  for (std::size_t i = 0; i < p.nodes.size(); ++i) {
    if (i) s += ' ';
    s += g.node(p.nodes[i]).id;
  }
  return s;
}

}  // namespace fourstep::routing
