#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clops/error.hpp"
#include "clops/geo.hpp"

namespace clops {

using NodeIndex = std::uint32_t;
using LinkIndex = std::uint32_t;

enum class Density : std::uint8_t { Low, Medium, High };

inline std::string_view to_string(Density d) {
  switch (d) {
  case Density::Low:
    return "low";
  case Density::Medium:
    return "medium";
  case Density::High:
    return "high";
  }
  return "medium";
}

inline std::optional<Density> parse_density(std::string_view s) {
  if (s == "low") {
    return Density::Low;
  }
  if (s == "medium") {
    return Density::Medium;
  }
  if (s == "high") {
    return Density::High;
  }
  return std::nullopt;
}

struct RoadNode {
  std::string id;
  GeoPoint pos;
  bool signalized = false;
  int in_lanes = 0;
  int out_lanes = 0;

  friend bool operator==(const RoadNode&, const RoadNode&) = default;
};

struct RoadLink {
  std::string id;
  std::string from;
  std::string to;
  double length_km = 0.0;
  int lanes = 1;
  Density density = Density::Medium;
  double speed_limit_mps = 13.89;

  double length_m() const noexcept { return length_km * 1000.0; }

  friend bool operator==(const RoadLink&, const RoadLink&) = default;
};

/// Static road layer. Immutable once constructed; the constructor validates
/// every invariant and throws ValidationError on the first violation.
class RoadGraph {
public:
  RoadGraph() = default;

  RoadGraph(std::vector<RoadNode> nodes, std::vector<RoadLink> links)
      : nodes_(std::move(nodes)), links_(std::move(links)) {
    index();
  }

  const std::vector<RoadNode>& nodes() const noexcept { return nodes_; }
  const std::vector<RoadLink>& links() const noexcept { return links_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t link_count() const noexcept { return links_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  const RoadNode& node(NodeIndex i) const { return nodes_.at(i); }
  const RoadLink& link(LinkIndex i) const { return links_.at(i); }

  std::optional<NodeIndex> find_node(std::string_view id) const {
    auto it = node_by_id_.find(std::string(id));
    if (it == node_by_id_.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  std::optional<LinkIndex> find_link(std::string_view id) const {
    auto it = link_by_id_.find(std::string(id));
    if (it == link_by_id_.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  NodeIndex from(LinkIndex l) const { return link_from_.at(l); }
  NodeIndex to(LinkIndex l) const { return link_to_.at(l); }

  std::span<const LinkIndex> out_links(NodeIndex n) const {
    return {out_.data() + out_offset_[n], out_.data() + out_offset_[n + 1]};
  }
  std::span<const LinkIndex> in_links(NodeIndex n) const {
    return {in_.data() + in_offset_[n], in_.data() + in_offset_[n + 1]};
  }

  double total_length_km() const {
    return std::accumulate(links_.begin(), links_.end(), 0.0,
                           [](double acc, const RoadLink& l) { return acc + l.length_km; });
  }

  /// Number of weakly connected components (isolated nodes count as one each).
  std::size_t component_count() const {
    std::vector<NodeIndex> parent(nodes_.size());
    std::iota(parent.begin(), parent.end(), NodeIndex{0});
    auto find = [&](NodeIndex x) {
      while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
      }
      return x;
    };
    std::size_t comps = nodes_.size();
    for (LinkIndex l = 0; l < links_.size(); ++l) {
      const NodeIndex a = find(link_from_[l]);
      const NodeIndex b = find(link_to_[l]);
      if (a != b) {
        parent[a] = b;
        --comps;
      }
    }
    return comps;
  }

  friend bool operator==(const RoadGraph& a, const RoadGraph& b) {
    return a.nodes_ == b.nodes_ && a.links_ == b.links_;
  }

private:
  void index() {
    node_by_id_.reserve(nodes_.size());
    for (NodeIndex i = 0; i < nodes_.size(); ++i) {
      const RoadNode& n = nodes_[i];
      if (n.id.empty()) {
        throw ValidationError("node with empty id at position " + std::to_string(i));
      }
      if (!n.pos.valid()) {
        throw ValidationError("node " + n.id + ": coordinates out of range");
      }
      if (n.in_lanes < 0 || n.out_lanes < 0) {
        throw ValidationError("node " + n.id + ": negative lane count");
      }
      if (!node_by_id_.emplace(n.id, i).second) {
        throw ValidationError("duplicate node id " + n.id);
      }
    }
    link_from_.resize(links_.size());
    link_to_.resize(links_.size());
    std::vector<std::uint32_t> out_deg(nodes_.size() + 1, 0);
    std::vector<std::uint32_t> in_deg(nodes_.size() + 1, 0);
    for (LinkIndex i = 0; i < links_.size(); ++i) {
      const RoadLink& l = links_[i];
      if (l.id.empty()) {
        throw ValidationError("link with empty id at position " + std::to_string(i));
      }
      if (!link_by_id_.emplace(l.id, i).second) {
        throw ValidationError("duplicate link id " + l.id);
      }
      auto f = node_by_id_.find(l.from);
      auto t = node_by_id_.find(l.to);
      if (f == node_by_id_.end()) {
        throw ValidationError("link " + l.id + ": unknown from node " + l.from);
      }
      if (t == node_by_id_.end()) {
        throw ValidationError("link " + l.id + ": unknown to node " + l.to);
      }
      if (l.from == l.to) {
        throw ValidationError("link " + l.id + ": from equals to");
      }
      if (!(l.length_km > 0.0) || !std::isfinite(l.length_km)) {
        throw ValidationError("link " + l.id + ": length must be positive");
      }
      if (l.lanes < 1) {
        throw ValidationError("link " + l.id + ": lanes must be >= 1");
      }
      if (!(l.speed_limit_mps > 0.0) || !std::isfinite(l.speed_limit_mps)) {
        throw ValidationError("link " + l.id + ": speed limit must be positive");
      }
      link_from_[i] = f->second;
      link_to_[i] = t->second;
      ++out_deg[f->second + 1];
      ++in_deg[t->second + 1];
    }
    for (NodeIndex n = 0; n < nodes_.size(); ++n) {
      const bool incident = out_deg[n + 1] + in_deg[n + 1] > 0;
      if (incident && nodes_[n].in_lanes + nodes_[n].out_lanes < 1) {
        throw ValidationError("node " + nodes_[n].id + ": in_lanes + out_lanes must be >= 1");
      }
    }
    out_offset_.assign(out_deg.begin(), out_deg.end());
    in_offset_.assign(in_deg.begin(), in_deg.end());
    std::partial_sum(out_offset_.begin(), out_offset_.end(), out_offset_.begin());
    std::partial_sum(in_offset_.begin(), in_offset_.end(), in_offset_.begin());
    out_.resize(links_.size());
    in_.resize(links_.size());
    std::vector<std::uint32_t> oc(out_offset_.begin(), out_offset_.end() - 1);
    std::vector<std::uint32_t> ic(in_offset_.begin(), in_offset_.end() - 1);
    for (LinkIndex i = 0; i < links_.size(); ++i) {
      out_[oc[link_from_[i]]++] = i;
      in_[ic[link_to_[i]]++] = i;
    }
  }

  std::vector<RoadNode> nodes_;
  std::vector<RoadLink> links_;
  std::unordered_map<std::string, NodeIndex> node_by_id_;
  std::unordered_map<std::string, LinkIndex> link_by_id_;
  std::vector<NodeIndex> link_from_;
  std::vector<NodeIndex> link_to_;
  std::vector<std::uint32_t> out_offset_{0};
  std::vector<std::uint32_t> in_offset_{0};
  std::vector<LinkIndex> out_;
  std::vector<LinkIndex> in_;
};

/// Fills in_lanes/out_lanes from incident link lane counts.
inline void derive_node_lanes(std::vector<RoadNode>& nodes, const std::vector<RoadLink>& links) {
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    where.emplace(nodes[i].id, i);
    nodes[i].in_lanes = 0;
    nodes[i].out_lanes = 0;
  }
  for (const RoadLink& l : links) {
    if (auto it = where.find(l.from); it != where.end()) {
      nodes[it->second].out_lanes += l.lanes;
    }
    if (auto it = where.find(l.to); it != where.end()) {
      nodes[it->second].in_lanes += l.lanes;
    }
  }
}

// ---------------------------------------------------------------------------
// Partitioning weights

enum class WeightMode : std::uint8_t { Mobility, Comm };

inline std::string_view to_string(WeightMode m) {
  return m == WeightMode::Mobility ? "mobility" : "comm";
}

inline std::optional<WeightMode> parse_weight_mode(std::string_view s) {
  if (s == "mobility") {
    return WeightMode::Mobility;
  }
  if (s == "comm") {
    return WeightMode::Comm;
  }
  return std::nullopt;
}

struct WeightedEdge {
  std::uint32_t u = 0;
  std::uint32_t v = 0;
  double w = 0.0;
};

/// Undirected weighted graph consumed by the partitioner. `edges()` keeps the
/// input list verbatim (one entry per road link when built from a RoadGraph,
/// parallel entries allowed); `neighbors()` is the merged adjacency.
class WeightedGraph {
public:
  struct Arc {
    std::uint32_t node;
    double weight;
  };

  WeightedGraph() = default;

  WeightedGraph(WeightMode mode, std::vector<double> node_weights, std::vector<WeightedEdge> edges)
      : mode_(mode), node_weights_(std::move(node_weights)), edges_(std::move(edges)) {
    const auto n = static_cast<std::uint32_t>(node_weights_.size());
    for (double w : node_weights_) {
      if (!(w >= 0.0) || !std::isfinite(w)) {
        throw ValidationError("node weights must be finite and non-negative");
      }
    }
    std::vector<WeightedEdge> canon;
    canon.reserve(edges_.size());
    for (const WeightedEdge& e : edges_) {
      if (e.u >= n || e.v >= n) {
        throw ValidationError("edge endpoint out of range");
      }
      if (!(e.w >= 0.0) || !std::isfinite(e.w)) {
        throw ValidationError("edge weights must be finite and non-negative");
      }
      if (e.u == e.v) {
        continue;
      }
      canon.push_back({std::min(e.u, e.v), std::max(e.u, e.v), e.w});
    }
    std::sort(canon.begin(), canon.end(), [](const WeightedEdge& a, const WeightedEdge& b) {
      return a.u != b.u ? a.u < b.u : a.v < b.v;
    });
    std::vector<WeightedEdge> merged;
    for (const WeightedEdge& e : canon) {
      if (!merged.empty() && merged.back().u == e.u && merged.back().v == e.v) {
        merged.back().w += e.w;
      } else {
        merged.push_back(e);
      }
    }
    offset_.assign(n + 1, 0);
    for (const WeightedEdge& e : merged) {
      ++offset_[e.u + 1];
      ++offset_[e.v + 1];
    }
    std::partial_sum(offset_.begin(), offset_.end(), offset_.begin());
    arcs_.resize(merged.size() * 2);
    std::vector<std::uint32_t> cursor(offset_.begin(), offset_.end() - 1);
    for (const WeightedEdge& e : merged) {
      arcs_[cursor[e.u]++] = {e.v, e.w};
      arcs_[cursor[e.v]++] = {e.u, e.w};
    }
    // Tie-breaking downstream relies on ascending neighbor ids.
    for (std::uint32_t i = 0; i < n; ++i) {
      std::sort(arcs_.begin() + offset_[i], arcs_.begin() + offset_[i + 1],
                [](const Arc& a, const Arc& b) { return a.node < b.node; });
    }
  }

  WeightMode mode() const noexcept { return mode_; }
  std::size_t size() const noexcept { return node_weights_.size(); }
  double node_weight(std::uint32_t i) const { return node_weights_[i]; }
  const std::vector<double>& node_weights() const noexcept { return node_weights_; }
  const std::vector<WeightedEdge>& edges() const noexcept { return edges_; }

  std::span<const Arc> neighbors(std::uint32_t i) const {
    return {arcs_.data() + offset_[i], arcs_.data() + offset_[i + 1]};
  }

  double total_node_weight() const {
    return std::accumulate(node_weights_.begin(), node_weights_.end(), 0.0);
  }

  /// Sum over non-self edges.
  double total_edge_weight() const {
    double s = 0.0;
    for (const WeightedEdge& e : edges_) {
      if (e.u != e.v) {
        s += e.w;
      }
    }
    return s;
  }

private:
  WeightMode mode_ = WeightMode::Mobility;
  std::vector<double> node_weights_;
  std::vector<WeightedEdge> edges_;
  std::vector<std::uint32_t> offset_{0};
  std::vector<Arc> arcs_;
};

inline constexpr double kDefaultSignalMultiplier = 4.0;

/// Lane-sum weight of an intersection; signalized intersections are scaled.
inline double node_weight(const RoadNode& n, double signal_multiplier = kDefaultSignalMultiplier) {
  const double lanes = static_cast<double>(n.in_lanes + n.out_lanes);
  return n.signalized ? signal_multiplier * lanes : lanes;
}

struct WeightOptions {
  // Priority index coefficients on (length, lanes, density); length and lanes
  // are min-max normalized over the graph, density is used as its code.
  double length_coeff = 1.0;
  double lanes_coeff = 1.0;
  double density_coeff = 1.0;
  double density_codes[3] = {1.0, 2.0, 3.0}; // low, medium, high
  double signal_multiplier = kDefaultSignalMultiplier;
  double comm_floor = 1e-6;
};

inline double density_code(Density d, const WeightOptions& opts = {}) {
  return opts.density_codes[static_cast<int>(d)];
}

/// Builds the partitioner input for one layer. Edge i corresponds to link i.
/// Mobility: priority = cL*norm(length) + cN*norm(lanes) + cD*density_code,
/// where norm is min-max over the graph (1.0 when max == min).
/// Comm: max(density_code / length_km, floor).
inline WeightedGraph link_weights(const RoadGraph& g, WeightMode mode, const WeightOptions& opts = {}) {
  if (opts.length_coeff < 0 || opts.lanes_coeff < 0 || opts.density_coeff < 0) {
    throw ValidationError("priority coefficients must be non-negative");
  }
  if (opts.signal_multiplier < 1.0) {
    throw ValidationError("signal multiplier must be >= 1");
  }
  std::vector<double> nw;
  nw.reserve(g.node_count());
  for (const RoadNode& n : g.nodes()) {
    nw.push_back(node_weight(n, opts.signal_multiplier));
  }

  auto minmax_norm = [](const std::vector<double>& xs) {
    std::vector<double> out(xs.size(), 1.0);
    if (xs.empty()) {
      return out;
    }
    const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
    const double span = *hi - *lo;
    if (span > 0.0) {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = (xs[i] - *lo) / span;
      }
    }
    return out;
  };

  std::vector<WeightedEdge> edges;
  edges.reserve(g.link_count());
  if (mode == WeightMode::Mobility) {
    std::vector<double> len;
    std::vector<double> lanes;
    for (const RoadLink& l : g.links()) {
      len.push_back(l.length_km);
      lanes.push_back(static_cast<double>(l.lanes));
    }
    const std::vector<double> nlen = minmax_norm(len);
    const std::vector<double> nlanes = minmax_norm(lanes);
    for (LinkIndex i = 0; i < g.link_count(); ++i) {
      const double w = opts.length_coeff * nlen[i] + opts.lanes_coeff * nlanes[i] +
                       opts.density_coeff * density_code(g.link(i).density, opts);
      edges.push_back({g.from(i), g.to(i), w});
    }
  } else {
    for (LinkIndex i = 0; i < g.link_count(); ++i) {
      const RoadLink& l = g.link(i);
      const double w = std::max(density_code(l.density, opts) / l.length_km, opts.comm_floor);
      edges.push_back({g.from(i), g.to(i), w});
    }
  }
  return WeightedGraph(mode, std::move(nw), std::move(edges));
}

} // namespace clops
