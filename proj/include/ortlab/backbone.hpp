#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ortlab/graph.hpp"
#include "ortlab/rng.hpp"

namespace ortlab {

/// Single-stream ViT: template and search tokens are embedded separately,
/// concatenated (template first), and attended over jointly.
struct ViTConfig {
  std::size_t embed_dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t patch = 8;
  std::size_t template_hw = 32;
  std::size_t search_hw = 64;
  bool attention_enabled = true;  // diagnostic: false skips token mixing

  std::size_t template_tokens() const {
    return (template_hw / patch) * (template_hw / patch);
  }
  std::size_t search_tokens() const {
    return (search_hw / patch) * (search_hw / patch);
  }
  std::size_t token_count() const { return template_tokens() + search_tokens(); }
  std::size_t patch_dim() const { return 3 * patch * patch; }
  std::size_t search_grid() const { return search_hw / patch; }

  void validate() const {
    require(patch > 0 && template_hw % patch == 0 && search_hw % patch == 0,
            "vit: patch must divide image sizes");
    require(heads > 0 && embed_dim % heads == 0, "vit: heads must divide embed_dim");
  }
};

/// Token tensor plus the index bookkeeping that recovers the template and
/// search parts of the joint sequence.
template <typename T>
struct TokenBatch {
  typename Graph<T>::Var tokens;
  std::size_t n_template = 0;
  std::size_t n_search = 0;

  std::vector<std::size_t> template_indices() const {
    std::vector<std::size_t> idx(n_template);
    for (std::size_t i = 0; i < n_template; ++i) idx[i] = i;
    return idx;
  }
  std::vector<std::size_t> search_indices() const {
    std::vector<std::size_t> idx(n_search);
    for (std::size_t i = 0; i < n_search; ++i) idx[i] = n_template + i;
    return idx;
  }
};

/// Binds model tensors onto a graph, either as named trainable parameters
/// or as frozen constants (teacher during distillation, evaluation).
template <typename T>
struct Binder {
  Graph<T>& graph;
  std::string prefix;
  bool trainable = true;

  typename Graph<T>::Var operator()(const std::string& name, Tensor<T>& t) const {
    return trainable ? graph.parameter(prefix + name, t) : graph.constant(t);
  }
};

/// Rows are patches in row-major order; features are channel-major within
/// the patch: [c][py][px].
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  require(image.rank() == 3, "patchify: image must be [3,H,W]");
  std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  require(h % patch == 0 && w % patch == 0, "patchify: patch must divide dims");
  std::size_t gh = h / patch, gw = w / patch;
  Tensor<T> out({gh * gw, c * patch * patch});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* row = out.data() + (gy * gw + gx) * out.dim(1);
      std::size_t k = 0;
      for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            row[k++] = image(cc, gy * patch + py, gx * patch + px);
    }
  return out;
}

template <typename T>
class Backbone {
 public:
  using Var = typename Graph<T>::Var;

  struct Block {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1, b1, w2, b2;
  };

  ViTConfig cfg;
  Tensor<T> patch_w, patch_b;
  Tensor<T> pos_z, pos_x;
  std::vector<Block> blocks;
  Tensor<T> lnf_g, lnf_b;

  static Backbone init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone m;
    m.cfg = cfg;
    std::size_t d = cfg.embed_dim;
    auto tn = [&rng](Shape shape) {
      Tensor<T> t(std::move(shape));
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(rng.trunc_normal(0.02));
      return t;
    };
    m.patch_w = tn({cfg.patch_dim(), d});
    m.patch_b = Tensor<T>({d});
    m.pos_z = tn({cfg.template_tokens(), d});
    m.pos_x = tn({cfg.search_tokens(), d});
    m.blocks.resize(cfg.depth);
    for (auto& b : m.blocks) {
      b.ln1_g = Tensor<T>::full({d}, T(1));
      b.ln1_b = Tensor<T>({d});
      b.wq = tn({d, d});
      b.bq = Tensor<T>({d});
      b.wk = tn({d, d});
      b.bk = Tensor<T>({d});
      b.wv = tn({d, d});
      b.bv = Tensor<T>({d});
      b.wo = tn({d, d});
      b.bo = Tensor<T>({d});
      b.ln2_g = Tensor<T>::full({d}, T(1));
      b.ln2_b = Tensor<T>({d});
      b.w1 = tn({d, 4 * d});
      b.b1 = Tensor<T>({4 * d});
      b.w2 = tn({4 * d, d});
      b.b2 = Tensor<T>({d});
    }
    m.lnf_g = Tensor<T>::full({d}, T(1));
    m.lnf_b = Tensor<T>({d});
    return m;
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn("patch.w", patch_w);
    fn("patch.b", patch_b);
    fn("pos.z", pos_z);
    fn("pos.x", pos_x);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Block& b = blocks[i];
      std::string p = "blk" + std::to_string(i) + ".";
      fn(p + "ln1.g", b.ln1_g);
      fn(p + "ln1.b", b.ln1_b);
      fn(p + "wq", b.wq);
      fn(p + "bq", b.bq);
      fn(p + "wk", b.wk);
      fn(p + "bk", b.bk);
      fn(p + "wv", b.wv);
      fn(p + "bv", b.bv);
      fn(p + "wo", b.wo);
      fn(p + "bo", b.bo);
      fn(p + "ln2.g", b.ln2_g);
      fn(p + "ln2.b", b.ln2_b);
      fn(p + "mlp.w1", b.w1);
      fn(p + "mlp.b1", b.b1);
      fn(p + "mlp.w2", b.w2);
      fn(p + "mlp.b2", b.b2);
    }
    fn("final.g", lnf_g);
    fn("final.b", lnf_b);
  }

  /// Patch-embed template and search images, add the learned positional
  /// tables (separate per region), template tokens first.
  TokenBatch<T> tokenize(Binder<T> bind, const Tensor<T>& z, const Tensor<T>& x) {
    require(z.rank() == 3 && z.dim(0) == 3 && z.dim(1) == cfg.template_hw &&
                z.dim(2) == cfg.template_hw,
            "tokenize: template dims do not match config");
    require(x.rank() == 3 && x.dim(0) == 3 && x.dim(1) == cfg.search_hw &&
                x.dim(2) == cfg.search_hw,
            "tokenize: search dims do not match config");
    Graph<T>& g = bind.graph;
    auto w = bind("patch.w", patch_w);
    auto b = bind("patch.b", patch_b);
    auto pz = g.add(g.add(g.matmul(g.constant(patchify(z, cfg.patch)), w), b),
                    bind("pos.z", pos_z));
    auto px = g.add(g.add(g.matmul(g.constant(patchify(x, cfg.patch)), w), b),
                    bind("pos.x", pos_x));
    TokenBatch<T> batch;
    batch.tokens = g.concat_rows(pz, px);
    batch.n_template = cfg.template_tokens();
    batch.n_search = cfg.search_tokens();
    return batch;
  }

  /// Pre-norm transformer stack over the joint token sequence, then a
  /// final layernorm. Depth 0 reduces to layernormed embeddings.
  Var forward(Binder<T> bind, const TokenBatch<T>& batch) {
    Graph<T>& g = bind.graph;
    std::size_t d = cfg.embed_dim;
    std::size_t dh = d / cfg.heads;
    T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    Var x = batch.tokens;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Block& blk = blocks[i];
      std::string p = "blk" + std::to_string(i) + ".";
      if (cfg.attention_enabled) {
        auto h = g.layernorm(x, bind(p + "ln1.g", blk.ln1_g), bind(p + "ln1.b", blk.ln1_b));
        auto q = g.add(g.matmul(h, bind(p + "wq", blk.wq)), bind(p + "bq", blk.bq));
        auto k = g.add(g.matmul(h, bind(p + "wk", blk.wk)), bind(p + "bk", blk.bk));
        auto v = g.add(g.matmul(h, bind(p + "wv", blk.wv)), bind(p + "bv", blk.bv));
        std::vector<Var> heads;
        heads.reserve(cfg.heads);
        for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
          auto qh = g.slice_cols(q, hh * dh, dh);
          auto kh = g.slice_cols(k, hh * dh, dh);
          auto vh = g.slice_cols(v, hh * dh, dh);
          auto scores = g.scale(g.matmul(qh, g.transpose(kh)), att_scale);
          heads.push_back(g.matmul(g.softmax_rows(scores), vh));
        }
        auto att = g.add(g.matmul(g.concat_cols(heads), bind(p + "wo", blk.wo)),
                         bind(p + "bo", blk.bo));
        x = g.add(x, att);
      }
      auto h2 = g.layernorm(x, bind(p + "ln2.g", blk.ln2_g), bind(p + "ln2.b", blk.ln2_b));
      auto mlp = g.add(
          g.matmul(g.gelu(g.add(g.matmul(h2, bind(p + "mlp.w1", blk.w1)),
                                bind(p + "mlp.b1", blk.b1))),
                   bind(p + "mlp.w2", blk.w2)),
          bind(p + "mlp.b2", blk.b2));
      x = g.add(x, mlp);
    }
    return g.layernorm(x, bind("final.g", lnf_g), bind("final.b", lnf_b));
  }
};

/// Recover the template and search parts of the output sequence from the
/// recorded index partition. Rows keep their original patch order.
template <typename T>
std::pair<typename Graph<T>::Var, typename Graph<T>::Var> split_tokens(
    Graph<T>& g, typename Graph<T>::Var out, const TokenBatch<T>& batch) {
  require(g.value(out).rank() == 2 &&
              g.value(out).dim(0) == batch.n_template + batch.n_search,
          "split_tokens: row count does not match index sets");
  auto tmpl = g.slice_rows(out, 0, batch.n_template);
  auto srch = g.slice_rows(out, batch.n_template, batch.n_search);
  return {tmpl, srch};
}

}  // namespace ortlab
