#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hge/csv.hpp"

namespace hge {

// Sparse bidirectional incidence structure. Nodes are diagnostic features,
// hyperedges are patients; ids are dense 0-based integers in input order with
// labels carried separately. Immutable after construction, safe for
// concurrent reads.
struct Hypergraph {
  int node_count = 0;
  int edge_count = 0;
  std::vector<std::vector<int>> edges_of_node;  // sorted edge ids per node
  std::vector<std::vector<int>> nodes_of_edge;  // sorted node ids per edge
  std::vector<std::string> node_labels;
  std::vector<std::string> edge_labels;

  int degree(int v) const { return static_cast<int>(edges_of_node[v].size()); }
  int edge_size(int e) const {
    return static_cast<int>(nodes_of_edge[e].size());
  }

  std::int64_t incidence_count() const {
    std::int64_t k = 0;
    for (const auto& e : nodes_of_edge) k += static_cast<std::int64_t>(e.size());
    return k;
  }

  int edge_index(const std::string& patient_id) const {
    for (int e = 0; e < edge_count; ++e)
      if (edge_labels[e] == patient_id) return e;
    throw std::invalid_argument("hypergraph: unknown patient id '" +
                                patient_id + "'");
  }
};

enum class EmptyRowPolicy { kReject, kDrop };

struct BinaryRow {
  std::string patient_id;
  std::vector<std::uint8_t> bits;
};

struct BuildResult {
  Hypergraph hg;
  std::vector<std::string> dropped_patients;  // only under kDrop
};

// One hyperedge per patient containing exactly the feature nodes set to 1.
// Features never set in any row remain as isolated nodes. An all-zero row has
// no hyperedge embedding, so by default it is rejected; the permissive policy
// drops it and reports it for the run manifest.
inline BuildResult build_from_binary_matrix(
    const std::vector<BinaryRow>& rows,
    const std::vector<std::string>& feature_names,
    EmptyRowPolicy policy = EmptyRowPolicy::kReject) {
  BuildResult out;
  Hypergraph& hg = out.hg;
  hg.node_count = static_cast<int>(feature_names.size());
  hg.node_labels = feature_names;
  hg.edges_of_node.assign(hg.node_count, {});
  for (const BinaryRow& row : rows) {
    if (row.bits.size() != feature_names.size())
      throw std::invalid_argument("hypergraph: row '" + row.patient_id +
                                  "' has " + std::to_string(row.bits.size()) +
                                  " cells, vocabulary has " +
                                  std::to_string(feature_names.size()));
    std::vector<int> members;
    for (int v = 0; v < hg.node_count; ++v) {
      if (row.bits[v] == 1) {
        members.push_back(v);
      } else if (row.bits[v] != 0) {
        throw std::invalid_argument("hypergraph: non-binary cell for '" +
                                    row.patient_id + "'");
      }
    }
    if (members.empty()) {
      if (policy == EmptyRowPolicy::kReject)
        throw std::invalid_argument(
            "hypergraph: patient '" + row.patient_id +
            "' has no positive features (empty hyperedge)");
      out.dropped_patients.push_back(row.patient_id);
      continue;
    }
    const int e = hg.edge_count++;
    for (int v : members) hg.edges_of_node[v].push_back(e);
    hg.nodes_of_edge.push_back(std::move(members));
    hg.edge_labels.push_back(row.patient_id);
  }
  return out;
}

// Inverse of build_from_binary_matrix, used for round-trip checks.
inline std::vector<BinaryRow> emit_binary_matrix(const Hypergraph& hg) {
  std::vector<BinaryRow> rows(hg.edge_count);
  for (int e = 0; e < hg.edge_count; ++e) {
    rows[e].patient_id = hg.edge_labels[e];
    rows[e].bits.assign(hg.node_count, 0);
    for (int v : hg.nodes_of_edge[e]) rows[e].bits[v] = 1;
  }
  return rows;
}

// D(v) = (sum of |e| over incident edges) / (unique vertices co-occurring
// with v, counting v itself). Always >= 1 for a non-isolated node; undefined
// for isolated ones.
inline double duplication_score(const Hypergraph& hg, int v) {
  if (v < 0 || v >= hg.node_count)
    throw std::out_of_range("duplication_score: node " + std::to_string(v));
  const auto& edges = hg.edges_of_node[v];
  if (edges.empty())
    throw std::invalid_argument("duplication_score: undefined duplication for isolated node " +
                                std::to_string(v));
  std::int64_t total = 0;
  std::unordered_set<int> uni;
  for (int e : edges) {
    total += hg.edge_size(e);
    uni.insert(hg.nodes_of_edge[e].begin(), hg.nodes_of_edge[e].end());
  }
  return static_cast<double>(total) / static_cast<double>(uni.size());
}

struct IncidenceStats {
  std::vector<double> duplication;  // D(v); NaN for isolated nodes
  std::vector<double> log_weight;   // w_v = log D(v); NaN for isolated nodes
  std::vector<std::uint8_t> defined;
  double w_max = 0.0;
  double w_avg = 0.0;
  double w_min = 0.0;
  int defined_count = 0;
};

inline IncidenceStats incidence_stats(const Hypergraph& hg) {
  IncidenceStats st;
  st.duplication.assign(hg.node_count, std::nan(""));
  st.log_weight.assign(hg.node_count, std::nan(""));
  st.defined.assign(hg.node_count, 0);
  double sum = 0.0;
  double mx = -std::numeric_limits<double>::infinity();
  double mn = std::numeric_limits<double>::infinity();
  for (int v = 0; v < hg.node_count; ++v) {
    if (hg.edges_of_node[v].empty()) continue;
    const double d = duplication_score(hg, v);
    const double w = std::log(d);
    st.duplication[v] = d;
    st.log_weight[v] = w;
    st.defined[v] = 1;
    ++st.defined_count;
    sum += w;
    mx = std::max(mx, w);
    mn = std::min(mn, w);
  }
  if (st.defined_count == 0)
    throw std::invalid_argument("incidence_stats: all nodes isolated");
  st.w_max = mx;
  st.w_min = mn;
  st.w_avg = sum / static_cast<double>(st.defined_count);
  return st;
}

// Minimal incidence view consumed by the encoder: the member node lists of a
// batch of hyperedges over a fixed node universe. Works for the base
// hypergraph, an augmented view, or an edge mini-batch.
struct EdgeSets {
  int node_count = 0;
  std::vector<std::vector<int>> members;  // per edge, node ids
  std::vector<int> edge_ids;              // position in the originating graph

  static EdgeSets from_hypergraph(const Hypergraph& hg) {
    EdgeSets s;
    s.node_count = hg.node_count;
    s.members = hg.nodes_of_edge;
    s.edge_ids.resize(hg.edge_count);
    for (int e = 0; e < hg.edge_count; ++e) s.edge_ids[e] = e;
    return s;
  }

  EdgeSets subset(const std::vector<int>& edge_idx) const {
    EdgeSets s;
    s.node_count = node_count;
    s.members.reserve(edge_idx.size());
    s.edge_ids.reserve(edge_idx.size());
    for (int e : edge_idx) {
      s.members.push_back(members[e]);
      s.edge_ids.push_back(edge_ids[e]);
    }
    return s;
  }

  int edge_count() const { return static_cast<int>(members.size()); }
};

// ---- external formats ----------------------------------------------------

// CSV with header `patient_id,<feature names...>` and 0/1 cells.
inline std::pair<std::vector<BinaryRow>, std::vector<std::string>>
read_binary_matrix_csv(const std::string& path) {
  csv::Table t = csv::read_file(path);
  if (t.header.empty() || t.header[0] != "patient_id")
    throw std::runtime_error("binary matrix csv: first column must be patient_id in " +
                             path);
  std::vector<std::string> features(t.header.begin() + 1, t.header.end());
  std::vector<BinaryRow> rows;
  rows.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    BinaryRow br;
    br.patient_id = r[0];
    br.bits.reserve(features.size());
    for (std::size_t i = 1; i < r.size(); ++i)
      br.bits.push_back(static_cast<std::uint8_t>(csv::parse_bit(r[i])));
    rows.push_back(std::move(br));
  }
  return {std::move(rows), std::move(features)};
}

inline void write_binary_matrix_csv(const std::string& path,
                                    const std::vector<BinaryRow>& rows,
                                    const std::vector<std::string>& features) {
  csv::Writer w(path);
  std::vector<std::string> header{"patient_id"};
  header.insert(header.end(), features.begin(), features.end());
  w.row(header);
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.patient_id};
    for (auto b : r.bits) cells.push_back(b ? "1" : "0");
    w.row(cells);
  }
}

// coordinate-list debug dump, one `edge_id,node_id` line per incidence
inline void dump_incidence(const Hypergraph& hg, std::ostream& os) {
  os << "edge_id,node_id\n";
  for (int e = 0; e < hg.edge_count; ++e)
    for (int v : hg.nodes_of_edge[e]) os << e << ',' << v << '\n';
}

}  // namespace hge
