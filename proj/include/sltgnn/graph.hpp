#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sltgnn/matrix.hpp"

namespace sltgnn {

using Edge = std::pair<std::uint32_t, std::uint32_t>;

/// A node-classification instance: symmetric normalized adjacency, node
/// features, integer labels and disjoint train/val/test index sets.
struct Graph {
  CsrMatrix adjacency;  // normalized, square, |V| x |V|
  DenseMatrix features;
  std::vector<std::int32_t> labels;
  std::vector<std::uint32_t> train_idx;
  std::vector<std::uint32_t> val_idx;
  std::vector<std::uint32_t> test_idx;

  std::size_t num_nodes() const { return adjacency.num_rows; }
  std::size_t feature_dim() const { return features.cols; }
  std::size_t num_classes() const {
    std::int32_t m = 0;
    for (auto l : labels) m = std::max(m, l);
    return static_cast<std::size_t>(m) + 1;
  }

  void validate() const {
    if (adjacency.num_rows != adjacency.num_cols)
      throw std::invalid_argument("graph: adjacency not square");
    if (features.rows != adjacency.num_rows)
      throw std::invalid_argument("graph: feature row count != |V|");
    if (labels.size() != adjacency.num_rows)
      throw std::invalid_argument("graph: label count != |V|");
    std::vector<std::uint8_t> seen(num_nodes(), 0);
    for (const auto* split : {&train_idx, &val_idx, &test_idx})
      for (auto i : *split) {
        if (i >= num_nodes())
          throw std::invalid_argument("graph: split index " +
                                      std::to_string(i) + " out of range");
        if (seen[i]++)
          throw std::invalid_argument("graph: splits overlap at node " +
                                      std::to_string(i));
      }
  }
};

namespace detail {

/// Deduplicated undirected neighbor sets with one self-loop per node.
inline std::vector<std::set<std::uint32_t>> neighbor_sets(
    const std::vector<Edge>& edges, std::size_t num_nodes) {
  std::vector<std::set<std::uint32_t>> adj(num_nodes);
  for (std::size_t i = 0; i < num_nodes; ++i)
    adj[i].insert(static_cast<std::uint32_t>(i));
  for (const auto& [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes)
      throw std::invalid_argument("edge endpoint out of range: (" +
                                  std::to_string(u) + "," + std::to_string(v) +
                                  ") with " + std::to_string(num_nodes) +
                                  " nodes");
    adj[u].insert(v);
    adj[v].insert(u);
  }
  return adj;
}

}  // namespace detail

/// Builds the symmetric degree-normalized adjacency with self-loops:
/// entry (u,v) = 1/sqrt(d_u * d_v) where d is the degree after self-loop
/// insertion. Duplicate input edges collapse; self-loops appear exactly
/// once. Each unordered pair's value is computed once and mirrored, so
/// the output is exactly symmetric.
inline CsrMatrix normalize_adjacency(const std::vector<Edge>& edges,
                                     std::size_t num_nodes) {
  auto adj = detail::neighbor_sets(edges, num_nodes);
  std::vector<double> inv_sqrt_deg(num_nodes);
  for (std::size_t i = 0; i < num_nodes; ++i)
    inv_sqrt_deg[i] = 1.0 / std::sqrt(static_cast<double>(adj[i].size()));

  CsrMatrix out;
  out.num_rows = out.num_cols = num_nodes;
  out.row_offsets.resize(num_nodes + 1);
  out.row_offsets[0] = 0;
  for (std::size_t i = 0; i < num_nodes; ++i)
    out.row_offsets[i + 1] =
        out.row_offsets[i] + static_cast<std::uint32_t>(adj[i].size());
  out.col_indices.reserve(out.row_offsets[num_nodes]);
  out.values.reserve(out.row_offsets[num_nodes]);
  for (std::size_t u = 0; u < num_nodes; ++u)
    for (std::uint32_t v : adj[u]) {
      out.col_indices.push_back(v);
      out.values.push_back(
          static_cast<float>(inv_sqrt_deg[u] * inv_sqrt_deg[v]));
    }
  return out;
}

/// Unnormalized A+I in CSR (sum aggregation), same dedup rules.
inline CsrMatrix adjacency_plus_identity(const std::vector<Edge>& edges,
                                         std::size_t num_nodes) {
  auto adj = detail::neighbor_sets(edges, num_nodes);
  CsrMatrix out;
  out.num_rows = out.num_cols = num_nodes;
  out.row_offsets.resize(num_nodes + 1);
  out.row_offsets[0] = 0;
  for (std::size_t i = 0; i < num_nodes; ++i)
    out.row_offsets[i + 1] =
        out.row_offsets[i] + static_cast<std::uint32_t>(adj[i].size());
  for (std::size_t u = 0; u < num_nodes; ++u)
    for (std::uint32_t v : adj[u]) {
      out.col_indices.push_back(v);
      out.values.push_back(1.0f);
    }
  return out;
}

/// A+I recovered from a normalized adjacency: the sparsity patterns are
/// identical (every normalized entry is positive), only the values change.
inline CsrMatrix sum_adjacency(const CsrMatrix& normalized) {
  CsrMatrix out = normalized;
  std::fill(out.values.begin(), out.values.end(), 1.0f);
  return out;
}

}  // namespace sltgnn
