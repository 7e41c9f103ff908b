#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "clops/error.hpp"
#include "clops/netgraph.hpp"
#include "clops/rng.hpp"

namespace clops {

struct PartitionPlan {
  WeightMode mode = WeightMode::Mobility;
  int k = 1;
  std::vector<int> assignment; // indexed by node

  /// Throws ValidationError unless every node is assigned to a dense,
  /// non-empty partition index in [0, k).
  void validate(std::size_t node_count) const {
    if (k < 1) {
      throw ValidationError("plan: k must be >= 1");
    }
    if (assignment.size() != node_count) {
      throw ValidationError("plan: assignment covers " + std::to_string(assignment.size()) + " of " +
                            std::to_string(node_count) + " nodes");
    }
    std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
    for (int p : assignment) {
      if (p < 0 || p >= k) {
        throw ValidationError("plan: partition index " + std::to_string(p) + " out of range");
      }
      ++count[static_cast<std::size_t>(p)];
    }
    for (int p = 0; p < k; ++p) {
      if (count[static_cast<std::size_t>(p)] == 0) {
        throw ValidationError("plan: partition " + std::to_string(p) + " is empty");
      }
    }
  }

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

struct CutMetrics {
  double edge_cut = 0.0;
  std::size_t boundary_nodes = 0;
  double imbalance = 1.0; // max partition weight / (total / k)
};

struct CoarseLevel {
  WeightedGraph graph;
  std::vector<std::uint32_t> matching; // fine node -> coarse node
};

struct PartitionOptions {
  double epsilon = 0.05;
  std::uint64_t seed = 1;
  int kl_max_passes = 8;
  int initial_trials = 8;
  std::size_t coarsen_floor = 20;
};

struct ObjectiveCoeffs {
  double edge_cut = 1.0;
  double boundary_nodes = 1.0;
  double imbalance = 10.0;
};

inline CutMetrics cut_metrics(const WeightedGraph& g, const PartitionPlan& plan) {
  if (plan.assignment.size() != g.size()) {
    throw ValidationError("plan does not cover the graph: " + std::to_string(plan.assignment.size()) +
                          " assignments for " + std::to_string(g.size()) + " nodes");
  }
  CutMetrics m;
  std::vector<char> boundary(g.size(), 0);
  for (const WeightedEdge& e : g.edges()) {
    if (e.u != e.v && plan.assignment[e.u] != plan.assignment[e.v]) {
      m.edge_cut += e.w;
      boundary[e.u] = 1;
      boundary[e.v] = 1;
    }
  }
  m.boundary_nodes = static_cast<std::size_t>(std::count(boundary.begin(), boundary.end(), 1));
  std::vector<double> pw(static_cast<std::size_t>(std::max(plan.k, 1)), 0.0);
  for (std::uint32_t i = 0; i < g.size(); ++i) {
    pw[static_cast<std::size_t>(plan.assignment[i])] += g.node_weight(i);
  }
  const double total = g.total_node_weight();
  m.imbalance = total > 0.0 ? *std::max_element(pw.begin(), pw.end()) / (total / plan.k) : 1.0;
  return m;
}

inline double objective_value(const CutMetrics& m, const ObjectiveCoeffs& c) {
  return c.edge_cut * m.edge_cut + c.boundary_nodes * static_cast<double>(m.boundary_nodes) +
         c.imbalance * (m.imbalance - 1.0);
}

// ---------------------------------------------------------------------------
// Coarsening

/// One round of heavy-edge matching. Nodes are visited in seeded random order;
/// each unmatched node pairs with the unmatched neighbor over its heaviest
/// link (lowest id on ties) or stays single.
inline CoarseLevel match_heavy_edges(const WeightedGraph& g, Rng& rng) {
  const auto n = static_cast<std::uint32_t>(g.size());
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0U);
  rng.shuffle(order);

  constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> mate(n, kNone);
  for (std::uint32_t u : order) {
    if (mate[u] != kNone) {
      continue;
    }
    std::uint32_t best = kNone;
    double best_w = -1.0;
    for (const auto& arc : g.neighbors(u)) {
      if (mate[arc.node] != kNone) {
        continue;
      }
      if (arc.weight > best_w) {
        best = arc.node;
        best_w = arc.weight;
      }
    }
    if (best == kNone) {
      mate[u] = u;
    } else {
      mate[u] = best;
      mate[best] = u;
    }
  }

  CoarseLevel level;
  level.matching.assign(n, kNone);
  std::uint32_t next = 0;
  for (std::uint32_t u = 0; u < n; ++u) {
    if (level.matching[u] != kNone) {
      continue;
    }
    level.matching[u] = next;
    level.matching[mate[u]] = next;
    ++next;
  }
  std::vector<double> cw(next, 0.0);
  for (std::uint32_t u = 0; u < n; ++u) {
    cw[level.matching[u]] += g.node_weight(u);
  }
  std::vector<WeightedEdge> ce;
  for (std::uint32_t u = 0; u < n; ++u) {
    for (const auto& arc : g.neighbors(u)) {
      if (arc.node <= u) {
        continue;
      }
      const std::uint32_t a = level.matching[u];
      const std::uint32_t b = level.matching[arc.node];
      if (a != b) {
        ce.push_back({a, b, arc.weight});
      }
    }
  }
  // Merge parallel coarse edges so edges() carries one entry per coarse pair.
  std::vector<WeightedEdge> merged;
  {
    for (WeightedEdge& e : ce) {
      if (e.u > e.v) {
        std::swap(e.u, e.v);
      }
    }
    std::sort(ce.begin(), ce.end(), [](const WeightedEdge& a, const WeightedEdge& b) {
      return a.u != b.u ? a.u < b.u : a.v < b.v;
    });
    for (const WeightedEdge& e : ce) {
      if (!merged.empty() && merged.back().u == e.u && merged.back().v == e.v) {
        merged.back().w += e.w;
      } else {
        merged.push_back(e);
      }
    }
  }
  level.graph = WeightedGraph(g.mode(), std::move(cw), std::move(merged));
  return level;
}

/// Multilevel coarsening. Always produces at least one level for graphs with
/// two or more nodes; continues while the node count exceeds max(20, 2k) and
/// each level removes at least 10% of the nodes.
inline std::vector<CoarseLevel> coarsen(const WeightedGraph& g, int k, Rng& rng,
                                        std::size_t floor_nodes = 20) {
  std::vector<CoarseLevel> levels;
  if (g.size() < 2) {
    return levels;
  }
  const std::size_t threshold = std::max<std::size_t>(floor_nodes, static_cast<std::size_t>(2 * k));
  const WeightedGraph* current = &g;
  while (true) {
    CoarseLevel level = match_heavy_edges(*current, rng);
    const std::size_t before = current->size();
    const std::size_t after = level.graph.size();
    if (after == before) {
      break;
    }
    levels.push_back(std::move(level));
    current = &levels.back().graph;
    if (after <= threshold || static_cast<double>(before - after) < 0.1 * static_cast<double>(before)) {
      break;
    }
  }
  return levels;
}

inline std::vector<CoarseLevel> coarsen(const WeightedGraph& g, int k = 2, std::uint64_t seed = 1) {
  Rng rng(seed);
  return coarsen(g, k, rng);
}

// ---------------------------------------------------------------------------
// Bisection machinery

namespace part_detail {

/// Per-side weight ceilings for a bisection with side-0 share `frac0`.
struct Balance {
  double max_w[2] = {0, 0};
  double slack = 0; // largest node weight: temporary overshoot allowed mid-pass

  static Balance make(const WeightedGraph& g, double frac0, double eps) {
    Balance b;
    const double total = g.total_node_weight();
    double wmin = std::numeric_limits<double>::infinity();
    double wmax = 0.0;
    for (double w : g.node_weights()) {
      if (w > 0.0) {
        wmin = std::min(wmin, w);
      }
      wmax = std::max(wmax, w);
    }
    if (!(total > 0.0)) {
      b.max_w[0] = b.max_w[1] = std::numeric_limits<double>::infinity();
      return b;
    }
    const double f[2] = {frac0, 1.0 - frac0};
    for (int s = 0; s < 2; ++s) {
      const double ideal = f[s] * total;
      b.max_w[s] = std::max((1.0 + eps) * ideal, ideal + wmin * (1.0 - 1e-9));
    }
    b.slack = wmax;
    return b;
  }

  double violation(const double pw[2]) const {
    return std::max(0.0, pw[0] - max_w[0]) + std::max(0.0, pw[1] - max_w[1]);
  }
};

inline double bisection_cut(const WeightedGraph& g, const std::vector<int>& side) {
  double cut = 0.0;
  for (std::uint32_t u = 0; u < g.size(); ++u) {
    for (const auto& arc : g.neighbors(u)) {
      if (arc.node > u && side[u] != side[arc.node]) {
        cut += arc.weight;
      }
    }
  }
  return cut;
}

inline void side_weights(const WeightedGraph& g, const std::vector<int>& side, double pw[2]) {
  pw[0] = pw[1] = 0.0;
  for (std::uint32_t u = 0; u < g.size(); ++u) {
    pw[side[u]] += g.node_weight(u);
  }
}

/// Boundary Kernighan-Lin/Fiduccia-Mattheyses passes. Returns the refined
/// sides; the cut never exceeds the input cut.
inline std::vector<int> refine(const WeightedGraph& g, std::vector<int> side, const Balance& bal,
                               int max_passes) {
  const auto n = static_cast<std::uint32_t>(g.size());
  if (n < 2) {
    return side;
  }
  double pw[2];
  side_weights(g, side, pw);
  double cut = bisection_cut(g, side);
  const double input_cut = cut;
  constexpr double kTol = 1e-9;

  std::vector<double> gain(n);
  std::vector<double> ext(n);
  std::vector<char> locked(n);
  std::vector<std::uint32_t> moves;

  for (int pass = 0; pass < max_passes; ++pass) {
    for (std::uint32_t u = 0; u < n; ++u) {
      double e = 0.0;
      double in = 0.0;
      for (const auto& arc : g.neighbors(u)) {
        (side[arc.node] != side[u] ? e : in) += arc.weight;
      }
      ext[u] = e;
      gain[u] = e - in;
    }
    std::fill(locked.begin(), locked.end(), 0);
    moves.clear();

    const double start_cut = cut;
    const double start_viol = bal.violation(pw);
    double best_cut = cut;
    double best_viol = start_viol;
    std::size_t best_prefix = 0;
    std::size_t since_best = 0;

    while (since_best < 64) {
      const double viol = bal.violation(pw);
      const int heavy = pw[0] - bal.max_w[0] > pw[1] - bal.max_w[1] ? 0 : 1;
      std::uint32_t pick = n;
      for (std::uint32_t u = 0; u < n; ++u) {
        if (locked[u]) {
          continue;
        }
        const int from = side[u];
        const int to = 1 - from;
        if (viol > 0.0) {
          if (from != heavy) {
            continue;
          }
        } else {
          if (ext[u] <= 0.0) {
            continue; // boundary vertices only
          }
          if (pw[to] + g.node_weight(u) > bal.max_w[to] + bal.slack) {
            continue;
          }
        }
        if (pick == n || gain[u] > gain[pick] + kTol) {
          pick = u;
        }
      }
      if (pick == n) {
        break;
      }
      const int from = side[pick];
      const int to = 1 - from;
      cut -= gain[pick];
      pw[from] -= g.node_weight(pick);
      pw[to] += g.node_weight(pick);
      side[pick] = to;
      locked[pick] = 1;
      gain[pick] = -gain[pick];
      ext[pick] = 0.0;
      for (const auto& arc : g.neighbors(pick)) {
        const std::uint32_t v = arc.node;
        if (side[v] == to) {
          gain[v] -= 2.0 * arc.weight;
          ext[v] -= arc.weight;
        } else {
          gain[v] += 2.0 * arc.weight;
          ext[v] += arc.weight;
        }
        ext[pick] += side[v] != to ? arc.weight : 0.0;
      }
      moves.push_back(pick);
      ++since_best;

      const double v_now = bal.violation(pw);
      const bool within_input = cut <= input_cut + kTol;
      const bool better = v_now < best_viol - kTol || (v_now <= best_viol + kTol && cut < best_cut - kTol);
      if (within_input && better) {
        best_cut = cut;
        best_viol = v_now;
        best_prefix = moves.size();
        since_best = 0;
      }
    }

    // Roll back moves past the best prefix.
    for (std::size_t i = moves.size(); i > best_prefix; --i) {
      const std::uint32_t u = moves[i - 1];
      const int from = side[u];
      pw[from] -= g.node_weight(u);
      pw[1 - from] += g.node_weight(u);
      side[u] = 1 - from;
    }
    cut = bisection_cut(g, side);
    const bool improved = cut < start_cut - kTol || bal.violation(pw) < start_viol - kTol;
    if (!improved) {
      break;
    }
  }
  return side;
}

/// Greedy repair of a balance violation; may raise the cut.
inline void rebalance(const WeightedGraph& g, std::vector<int>& side, const Balance& bal) {
  double pw[2];
  side_weights(g, side, pw);
  const auto n = static_cast<std::uint32_t>(g.size());
  while (bal.violation(pw) > 1e-12) {
    const int heavy = pw[0] - bal.max_w[0] > pw[1] - bal.max_w[1] ? 0 : 1;
    std::uint32_t pick = n;
    double pick_gain = 0.0;
    std::size_t heavy_count = 0;
    for (std::uint32_t u = 0; u < n; ++u) {
      heavy_count += side[u] == heavy ? 1 : 0;
    }
    if (heavy_count <= 1) {
      return;
    }
    for (std::uint32_t u = 0; u < n; ++u) {
      if (side[u] != heavy || g.node_weight(u) <= 0.0) {
        continue;
      }
      // Do not overshoot the other side's ceiling when a lighter move exists.
      if (pw[1 - heavy] + g.node_weight(u) > bal.max_w[1 - heavy] + 1e-12 && pick != n) {
        continue;
      }
      double gn = 0.0;
      for (const auto& arc : g.neighbors(u)) {
        gn += side[arc.node] != side[u] ? arc.weight : -arc.weight;
      }
      if (pick == n || gn > pick_gain + 1e-9) {
        pick = u;
        pick_gain = gn;
      }
    }
    if (pick == n) {
      return;
    }
    const double before = bal.violation(pw);
    pw[heavy] -= g.node_weight(pick);
    pw[1 - heavy] += g.node_weight(pick);
    side[pick] = 1 - heavy;
    if (bal.violation(pw) >= before) {
      // Undo: no single move helps.
      pw[heavy] += g.node_weight(pick);
      pw[1 - heavy] -= g.node_weight(pick);
      side[pick] = heavy;
      return;
    }
  }
}

/// Moves nodes until each side holds at least the requested node count.
inline void ensure_min_counts(const WeightedGraph& g, std::vector<int>& side, std::size_t need0,
                              std::size_t need1) {
  const auto n = static_cast<std::uint32_t>(g.size());
  auto count = [&](int s) { return static_cast<std::size_t>(std::count(side.begin(), side.end(), s)); };
  for (int s = 0; s < 2; ++s) {
    const std::size_t need = s == 0 ? need0 : need1;
    while (count(s) < need) {
      std::uint32_t pick = n;
      double best = 0.0;
      for (std::uint32_t u = 0; u < n; ++u) {
        if (side[u] == s) {
          continue;
        }
        double gn = -g.node_weight(u) * 1e-6;
        for (const auto& arc : g.neighbors(u)) {
          gn += side[arc.node] == s ? arc.weight : -arc.weight;
        }
        if (pick == n || gn > best + 1e-12) {
          pick = u;
          best = gn;
        }
      }
      side[pick] = s;
    }
  }
}

} // namespace part_detail

/// Breadth-first region growing from `seed_node` until the grown side reaches
/// `frac0` of the total node weight. Disconnected remainders are continued
/// from the lowest unvisited node. Neither side is left empty.
inline std::vector<int> grow_bisection(const WeightedGraph& g, std::uint32_t seed_node, double frac0 = 0.5) {
  const auto n = static_cast<std::uint32_t>(g.size());
  std::vector<int> side(n, 1);
  if (n == 0) {
    return side;
  }
  const double target = frac0 * g.total_node_weight();
  std::vector<char> seen(n, 0);
  std::deque<std::uint32_t> queue{seed_node};
  seen[seed_node] = 1;
  double acc = 0.0;
  std::size_t grown = 0;
  std::uint32_t last = seed_node;
  std::uint32_t scan = 0;
  while (acc < target || grown == 0) {
    if (queue.empty()) {
      while (scan < n && seen[scan]) {
        ++scan;
      }
      if (scan == n) {
        break;
      }
      seen[scan] = 1;
      queue.push_back(scan);
    }
    const std::uint32_t u = queue.front();
    queue.pop_front();
    side[u] = 0;
    acc += g.node_weight(u);
    ++grown;
    last = u;
    for (const auto& arc : g.neighbors(u)) {
      if (!seen[arc.node]) {
        seen[arc.node] = 1;
        queue.push_back(arc.node);
      }
    }
  }
  if (grown == n && n > 1) {
    side[last] = 1;
  }
  return side;
}

inline PartitionPlan plan_from_sides(const WeightedGraph& g, std::vector<int> side) {
  return PartitionPlan{g.mode(), 2, std::move(side)};
}

/// Graph-growing bisection: several seeded region-growing trials, each
/// followed by boundary refinement, keeping the best balanced result.
inline PartitionPlan initial_bisect(const WeightedGraph& g, Rng& rng, const PartitionOptions& opts = {},
                                    double frac0 = 0.5) {
  using namespace part_detail;
  const auto n = static_cast<std::uint32_t>(g.size());
  if (n < 2) {
    throw ValidationError("initial_bisect needs at least two nodes");
  }
  const Balance bal = Balance::make(g, frac0, opts.epsilon);
  std::vector<std::uint32_t> seeds(n);
  std::iota(seeds.begin(), seeds.end(), 0U);
  rng.shuffle(seeds);
  const std::size_t trials = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(opts.initial_trials, 1)));

  std::vector<int> best;
  double best_cut = 0.0;
  double best_viol = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<int> side = grow_bisection(g, seeds[t], frac0);
    side = refine(g, std::move(side), bal, opts.kl_max_passes);
    rebalance(g, side, bal);
    side = refine(g, std::move(side), bal, opts.kl_max_passes);
    double pw[2];
    side_weights(g, side, pw);
    const double viol = bal.violation(pw);
    const double cut = bisection_cut(g, side);
    if (best.empty() || viol < best_viol - 1e-9 || (viol <= best_viol + 1e-9 && cut < best_cut - 1e-9)) {
      best = std::move(side);
      best_cut = cut;
      best_viol = viol;
    }
  }
  return plan_from_sides(g, std::move(best));
}

inline PartitionPlan initial_bisect(const WeightedGraph& g, std::uint64_t seed = 1) {
  Rng rng(seed);
  return initial_bisect(g, rng);
}

/// Boundary KL refinement of a bisection. The returned edge cut is never
/// larger than the input cut; balance is held to 1 + epsilon where the input
/// already satisfies it.
inline PartitionPlan kl_refine(const WeightedGraph& g, const PartitionPlan& plan, int max_passes = 8,
                               double epsilon = 0.05, double frac0 = 0.5) {
  if (plan.k != 2) {
    throw ValidationError("kl_refine expects a bisection");
  }
  if (plan.assignment.size() != g.size()) {
    throw ValidationError("kl_refine: plan does not cover the graph");
  }
  const auto bal = part_detail::Balance::make(g, frac0, epsilon);
  PartitionPlan out = plan;
  out.assignment = part_detail::refine(g, plan.assignment, bal, max_passes);
  return out;
}

namespace part_detail {

inline WeightedGraph induced_subgraph(const WeightedGraph& g, const std::vector<std::uint32_t>& nodes) {
  std::vector<std::uint32_t> local(g.size(), std::numeric_limits<std::uint32_t>::max());
  std::vector<double> w;
  w.reserve(nodes.size());
  for (std::uint32_t i = 0; i < nodes.size(); ++i) {
    local[nodes[i]] = i;
    w.push_back(g.node_weight(nodes[i]));
  }
  std::vector<WeightedEdge> edges;
  for (std::uint32_t u : nodes) {
    for (const auto& arc : g.neighbors(u)) {
      if (arc.node > u && local[arc.node] != std::numeric_limits<std::uint32_t>::max()) {
        edges.push_back({local[u], local[arc.node], arc.weight});
      }
    }
  }
  return WeightedGraph(g.mode(), std::move(w), std::move(edges));
}

/// Coarsen -> grow + refine the coarsest graph -> project and refine level by level.
inline std::vector<int> multilevel_bisect(const WeightedGraph& g, double frac0, double eps, Rng& rng,
                                          const PartitionOptions& opts) {
  PartitionOptions local = opts;
  local.epsilon = eps;
  const Balance bal = Balance::make(g, frac0, eps);
  if (g.size() <= std::max<std::size_t>(opts.coarsen_floor, 4)) {
    return initial_bisect(g, rng, local, frac0).assignment;
  }
  std::vector<CoarseLevel> levels = coarsen(g, 2, rng, opts.coarsen_floor);
  if (levels.empty()) {
    return initial_bisect(g, rng, local, frac0).assignment;
  }
  std::vector<int> side = initial_bisect(levels.back().graph, rng, local, frac0).assignment;
  for (std::size_t i = levels.size(); i-- > 0;) {
    const WeightedGraph& fine = i == 0 ? g : levels[i - 1].graph;
    const Balance fb = i == 0 ? bal : Balance::make(fine, frac0, eps);
    std::vector<int> projected(fine.size());
    for (std::uint32_t u = 0; u < fine.size(); ++u) {
      projected[u] = side[levels[i].matching[u]];
    }
    projected = refine(fine, std::move(projected), fb, opts.kl_max_passes);
    rebalance(fine, projected, fb);
    side = refine(fine, std::move(projected), fb, opts.kl_max_passes);
  }
  return side;
}

inline void recursive_bisect(const WeightedGraph& g, const std::vector<std::uint32_t>& nodes, int k,
                             int first_part, double eps, Rng& rng, const PartitionOptions& opts,
                             std::vector<int>& assignment) {
  if (k == 1) {
    for (std::uint32_t u : nodes) {
      assignment[u] = first_part;
    }
    return;
  }
  const int k0 = (k + 1) / 2;
  const int k1 = k / 2;
  const double frac0 = static_cast<double>(k0) / k;
  const WeightedGraph sub = induced_subgraph(g, nodes);
  std::vector<int> side = multilevel_bisect(sub, frac0, eps, rng, opts);
  ensure_min_counts(sub, side, static_cast<std::size_t>(k0), static_cast<std::size_t>(k1));
  std::vector<std::uint32_t> left;
  std::vector<std::uint32_t> right;
  for (std::uint32_t i = 0; i < nodes.size(); ++i) {
    (side[i] == 0 ? left : right).push_back(nodes[i]);
  }
  recursive_bisect(g, left, k0, first_part, eps, rng, opts, assignment);
  recursive_bisect(g, right, k1, first_part + k0, eps, rng, opts, assignment);
}

} // namespace part_detail

/// k-way partition by recursive multilevel bisection with ceil(k/2):floor(k/2)
/// weight targets at every split.
inline PartitionPlan partition_kway(const WeightedGraph& g, int k, const PartitionOptions& opts = {}) {
  if (k < 1) {
    throw ValidationError("k must be >= 1");
  }
  if (static_cast<std::size_t>(k) > g.size()) {
    throw ValidationError("k = " + std::to_string(k) + " exceeds node count " + std::to_string(g.size()));
  }
  if (!(opts.epsilon > 0.0)) {
    throw ValidationError("epsilon must be positive");
  }
  PartitionPlan plan{g.mode(), k, std::vector<int>(g.size(), 0)};
  if (k == 1) {
    return plan;
  }
  const int depth = static_cast<int>(std::ceil(std::log2(static_cast<double>(k))));
  const double eps_level = std::pow(1.0 + opts.epsilon, 1.0 / depth) - 1.0;
  Rng rng(opts.seed);
  std::vector<std::uint32_t> all(g.size());
  std::iota(all.begin(), all.end(), 0U);
  part_detail::recursive_bisect(g, all, k, 0, eps_level, rng, opts, plan.assignment);
  return plan;
}

inline PartitionPlan partition_kway(const WeightedGraph& g, int k, double epsilon, std::uint64_t seed) {
  PartitionOptions opts;
  opts.epsilon = epsilon;
  opts.seed = seed;
  return partition_kway(g, k, opts);
}

struct SearchResult {
  PartitionPlan plan;
  CutMetrics metrics;
  double objective = 0.0;
};

/// Partitions for every k in [k_min, k_max] and keeps the lowest objective
/// (smallest k on ties).
inline SearchResult search_k(const WeightedGraph& g, int k_min, int k_max, const ObjectiveCoeffs& coeffs = {},
                             const PartitionOptions& opts = {}) {
  if (k_min < 1 || k_max < k_min) {
    throw ValidationError("empty k range [" + std::to_string(k_min) + ", " + std::to_string(k_max) + "]");
  }
  if (static_cast<std::size_t>(k_max) > g.size()) {
    throw ValidationError("k_max exceeds node count");
  }
  SearchResult best;
  bool have = false;
  for (int k = k_min; k <= k_max; ++k) {
    PartitionPlan plan = partition_kway(g, k, opts);
    CutMetrics m = cut_metrics(g, plan);
    const double obj = objective_value(m, coeffs);
    if (!have || obj < best.objective - 1e-12) {
      best = {std::move(plan), m, obj};
      have = true;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Plan files

inline nlohmann::json plan_to_json(const PartitionPlan& plan, const RoadGraph& g, const CutMetrics& m) {
  nlohmann::json assignment = nlohmann::json::object();
  for (NodeIndex i = 0; i < g.node_count(); ++i) {
    assignment[g.node(i).id] = plan.assignment.at(i);
  }
  return {{"mode", std::string(to_string(plan.mode))},
          {"k", plan.k},
          {"assignment", assignment},
          {"metrics", {{"edge_cut", m.edge_cut}, {"boundary_nodes", m.boundary_nodes}, {"imbalance", m.imbalance}}}};
}

inline PartitionPlan plan_from_json(const nlohmann::json& doc, const RoadGraph& g) {
  if (!doc.is_object() || !doc.contains("mode") || !doc.contains("k") || !doc.contains("assignment")) {
    throw SchemaError("plan", "expected {mode, k, assignment}");
  }
  PartitionPlan plan;
  auto mode = parse_weight_mode(doc.at("mode").get<std::string>());
  if (!mode) {
    throw SchemaError("plan.mode", "expected mobility|comm");
  }
  plan.mode = *mode;
  plan.k = doc.at("k").get<int>();
  plan.assignment.assign(g.node_count(), -1);
  const auto& a = doc.at("assignment");
  if (!a.is_object()) {
    throw SchemaError("plan.assignment", "expected object");
  }
  for (const auto& [id, part] : a.items()) {
    auto ni = g.find_node(id);
    if (!ni) {
      throw ValidationError("plan assigns unknown node " + id);
    }
    plan.assignment[*ni] = part.get<int>();
  }
  for (NodeIndex i = 0; i < g.node_count(); ++i) {
    if (plan.assignment[i] < 0) {
      throw ValidationError("plan does not assign node " + g.node(i).id);
    }
  }
  plan.validate(g.node_count());
  return plan;
}

} // namespace clops
