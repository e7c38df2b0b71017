#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hge/autodiff.hpp"
#include "hge/hypergraph.hpp"
#include "hge/rng.hpp"

// Hypergraph transformer. Per layer, multi-head set attention runs first over
// each hyperedge's member nodes (nodes -> edges) and then over each node's
// incident hyperedges (edges -> nodes, same layer), with mean pooling turning
// the updated member rows into the set's single embedding vector.

namespace hge {

struct EncoderConfig {
  int d_hi = 32;       // embedding width
  int heads = 4;       // attention heads H
  int layers = 2;      // message-passing layers L
  double dropout = 0.0;

  int d_k() const { return d_hi / heads; }

  void validate() const {
    if (d_hi < 1 || heads < 1 || layers < 1)
      throw std::invalid_argument("encoder config: d_hi, heads, layers must be >= 1");
    if (d_k() < 1)
      throw std::invalid_argument("encoder config: d_k = floor(d_hi/H) must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("encoder config: dropout must be in [0,1)");
  }
};

// One multi-head attention block: per-head projections, output projection,
// and the layer-norm affine.
struct AttentionBlock {
  std::vector<ad::Parameter> wq, wk, wv;  // H matrices, d_hi x d_k
  ad::Parameter wo;                       // (H*d_k) x d_hi
  ad::Parameter bo;                       // 1 x d_hi
  ad::Parameter ln_gain, ln_bias;         // 1 x d_hi

  static AttentionBlock init(const EncoderConfig& cfg, const std::string& name,
                             RngStream& rng) {
    AttentionBlock b;
    const int d = cfg.d_hi, dk = cfg.d_k();
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string hn = name + ".h" + std::to_string(h);
      b.wq.emplace_back(hn + ".wq", Tensor::gaussian(d, dk, proj_std, rng));
      b.wk.emplace_back(hn + ".wk", Tensor::gaussian(d, dk, proj_std, rng));
      b.wv.emplace_back(hn + ".wv", Tensor::gaussian(d, dk, proj_std, rng));
    }
    const int hd = cfg.heads * dk;
    b.wo = ad::Parameter(name + ".wo",
                         Tensor::gaussian(hd, d, 1.0 / std::sqrt(hd), rng));
    b.bo = ad::Parameter(name + ".bo", Tensor({1, static_cast<std::size_t>(d)}));
    Tensor gain({1, static_cast<std::size_t>(d)});
    gain.fill(1.0);
    b.ln_gain = ad::Parameter(name + ".ln_gain", gain);
    b.ln_bias = ad::Parameter(name + ".ln_bias",
                              Tensor({1, static_cast<std::size_t>(d)}));
    return b;
  }

  void collect(std::vector<ad::Parameter*>& out) {
    for (auto& p : wq) out.push_back(&p);
    for (auto& p : wk) out.push_back(&p);
    for (auto& p : wv) out.push_back(&p);
    out.push_back(&wo);
    out.push_back(&bo);
    out.push_back(&ln_gain);
    out.push_back(&ln_bias);
  }
};

// Trainable encoder state: the node embedding table plus per-layer blocks for
// both message directions. The table row count is pinned to the hypergraph it
// was initialized for.
struct EncoderState {
  EncoderConfig cfg;
  ad::Parameter node_table;                 // node_count x d_hi
  std::vector<AttentionBlock> node_to_edge;  // one per layer
  std::vector<AttentionBlock> edge_to_node;  // one per layer

  static EncoderState init(const EncoderConfig& cfg, int node_count,
                           RngStream& rng) {
    cfg.validate();
    if (node_count < 1)
      throw std::invalid_argument("encoder state: node_count must be >= 1");
    EncoderState st;
    st.cfg = cfg;
    // learned initial embeddings, zero-mean Gaussian, deviation 1/sqrt(d_hi)
    st.node_table = ad::Parameter(
        "node_table",
        Tensor::gaussian(node_count, cfg.d_hi,
                         1.0 / std::sqrt(static_cast<double>(cfg.d_hi)), rng));
    for (int l = 0; l < cfg.layers; ++l) {
      st.node_to_edge.push_back(AttentionBlock::init(
          cfg, "l" + std::to_string(l) + ".v2e", rng));
      st.edge_to_node.push_back(AttentionBlock::init(
          cfg, "l" + std::to_string(l) + ".e2v", rng));
    }
    return st;
  }

  int node_count() const { return static_cast<int>(node_table.value.rows()); }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    out.push_back(&node_table);
    for (auto& b : node_to_edge) b.collect(out);
    for (auto& b : edge_to_node) b.collect(out);
    return out;
  }
};

// Set attention over a batch of row segments: per-head scaled dot-product
// attention within each segment, heads concatenated, output projection,
// residual, layer norm. Rows in, rows out.
inline ad::Var set_attention_rows(ad::Tape& tape, AttentionBlock& block,
                                  ad::Var rows, ad::SegmentsPtr segs,
                                  const EncoderConfig& cfg,
                                  const Tensor* dropout_mask = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_k()));
  std::vector<ad::Var> head_outputs;
  head_outputs.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h) {
    ad::Var q = ad::matmul(rows, tape.leaf(block.wq[h]));
    ad::Var k = ad::matmul(rows, tape.leaf(block.wk[h]));
    ad::Var v = ad::matmul(rows, tape.leaf(block.wv[h]));
    ad::Var scores = ad::segment_qkt(q, k, segs, scale);
    ad::Var attn = ad::segment_softmax(scores, segs);
    head_outputs.push_back(ad::segment_av(attn, v, segs));
  }
  ad::Var cat = cfg.heads == 1 ? head_outputs[0]
                               : ad::concat_last_dim(head_outputs);
  ad::Var proj = ad::linear(cat, tape.leaf(block.wo), tape.leaf(block.bo));
  if (dropout_mask != nullptr)
    proj = ad::mul(proj, tape.constant(*dropout_mask));
  ad::Var res = ad::add(rows, proj);
  return ad::layer_norm(res, tape.leaf(block.ln_gain), tape.leaf(block.ln_bias));
}

// Spec-level set_attention over a single set (one segment).
inline ad::Var set_attention(ad::Tape& tape, AttentionBlock& block, ad::Var x_s,
                             const EncoderConfig& cfg) {
  const int n = static_cast<int>(x_s.val().rows());
  if (n == 0) throw std::invalid_argument("set_attention: empty set");
  auto segs = ad::SegmentSpec::from_sizes({n});
  return set_attention_rows(tape, block, x_s, segs, cfg);
}

struct EncodeOutput {
  ad::Var nodes;  // node_count x d_hi
  ad::Var edges;  // edge_count x d_hi (order of sets.members)
};

namespace detail {

inline Tensor inverted_dropout_mask(std::size_t r, std::size_t c, double rate,
                                    RngStream& rng) {
  Tensor m({r, c});
  const double keep = 1.0 - rate;
  for (auto& x : m.data) x = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return m;
}

}  // namespace detail

// Full forward pass. Nodes with no incident edge in `sets` keep their table
// row as output and contribute to nothing. Dropout masks are drawn only when
// training with a nonzero rate.
inline EncodeOutput encode(ad::Tape& tape, const EdgeSets& sets,
                           EncoderState& state, bool training = false,
                           RngStream* dropout_rng = nullptr) {
  const EncoderConfig& cfg = state.cfg;
  if (sets.edge_count() == 0)
    throw std::invalid_argument("encode: hypergraph has no edges");
  if (sets.node_count != state.node_count())
    throw std::invalid_argument("encode: node universe " +
                                std::to_string(sets.node_count) +
                                " does not match table rows " +
                                std::to_string(state.node_count()));
  const int n_edges = sets.edge_count();

  // flattened member indices for the node -> edge direction
  std::vector<int> edge_sizes(n_edges);
  std::vector<int> member_idx;
  for (int e = 0; e < n_edges; ++e) {
    if (sets.members[e].empty())
      throw std::invalid_argument("encode: empty hyperedge at position " +
                                  std::to_string(e));
    edge_sizes[e] = static_cast<int>(sets.members[e].size());
    member_idx.insert(member_idx.end(), sets.members[e].begin(),
                      sets.members[e].end());
  }
  auto edge_segs = ad::SegmentSpec::from_sizes(edge_sizes);

  // incident edges per node; nodes with degree 0 bypass the update
  std::vector<std::vector<int>> incident(sets.node_count);
  for (int e = 0; e < n_edges; ++e)
    for (int v : sets.members[e]) incident[v].push_back(e);
  std::vector<int> active_nodes;
  for (int v = 0; v < sets.node_count; ++v)
    if (!incident[v].empty()) active_nodes.push_back(v);
  if (active_nodes.empty())
    throw std::invalid_argument("encode: no non-isolated nodes");

  // node sets: the node's own embedding as an extra query row, then its edges
  std::vector<int> node_sizes(active_nodes.size());
  std::vector<int> node_idx;
  for (std::size_t a = 0; a < active_nodes.size(); ++a) {
    const int v = active_nodes[a];
    node_sizes[a] = 1 + static_cast<int>(incident[v].size());
    node_idx.push_back(v);
    for (int e : incident[v]) node_idx.push_back(sets.node_count + e);
  }
  auto node_segs = ad::SegmentSpec::from_sizes(node_sizes);

  const bool use_dropout = training && cfg.dropout > 0.0;
  if (use_dropout && dropout_rng == nullptr)
    throw std::invalid_argument("encode: dropout requires an rng stream");

  ad::Var x_nodes = tape.leaf(state.node_table);
  ad::Var x_edges;
  for (int l = 0; l < cfg.layers; ++l) {
    Tensor mask_ve, mask_ev;
    if (use_dropout) {
      mask_ve = detail::inverted_dropout_mask(member_idx.size(),
                                              cfg.d_hi, cfg.dropout,
                                              *dropout_rng);
      mask_ev = detail::inverted_dropout_mask(node_idx.size(), cfg.d_hi,
                                              cfg.dropout, *dropout_rng);
    }
    // f_{V->E}: members' previous-layer rows -> updated rows -> mean pool
    ad::Var gathered = ad::gather_rows(x_nodes, member_idx);
    ad::Var updated = set_attention_rows(tape, state.node_to_edge[l], gathered,
                                         edge_segs, cfg,
                                         use_dropout ? &mask_ve : nullptr);
    x_edges = ad::segment_mean(updated, edge_segs);

    // f_{E->V}: same-layer edge rows plus the node's own row as query
    ad::Var combined = ad::concat_rows(x_nodes, x_edges);
    ad::Var gathered_n = ad::gather_rows(combined, node_idx);
    ad::Var updated_n = set_attention_rows(tape, state.edge_to_node[l],
                                           gathered_n, node_segs, cfg,
                                           use_dropout ? &mask_ev : nullptr);
    ad::Var pooled = ad::segment_mean(updated_n, node_segs);
    x_nodes = ad::row_scatter_replace(x_nodes, active_nodes, pooled);
  }
  return EncodeOutput{x_nodes, x_edges};
}

// Plain forward returning values only; used wherever gradients are not needed
// (augmentor logits, frozen-transfer extraction).
inline std::pair<Tensor, Tensor> encode_values(const EdgeSets& sets,
                                               EncoderState& state) {
  ad::Tape tape;
  EncodeOutput out = encode(tape, sets, state);
  return {out.nodes.val(), out.edges.val()};
}

// x_tr for one patient: the final-layer hyperedge embedding row.
inline std::vector<double> patient_embedding(const Tensor& edge_embeddings,
                                             const Hypergraph& hg,
                                             const std::string& patient_id) {
  const int e = hg.edge_index(patient_id);
  if (static_cast<std::size_t>(e) >= edge_embeddings.rows())
    throw std::invalid_argument("patient_embedding: embeddings table too small");
  return std::vector<double>(edge_embeddings.row_ptr(e),
                             edge_embeddings.row_ptr(e) + edge_embeddings.cols());
}

}  // namespace hge
