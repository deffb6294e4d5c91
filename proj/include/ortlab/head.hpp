#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ortlab/backbone.hpp"
#include "ortlab/box.hpp"
#include "ortlab/graph.hpp"

namespace ortlab {

/// Head outputs over the search grid: classification p in [0,1]^{GxG},
/// within-cell offsets o in [0,1]^{2xGxG} (channel 0 = x, 1 = y), and
/// normalized sizes s in [0,1]^{2xGxG} (channel 0 = w, 1 = h).
template <typename T>
struct PredictionMaps {
  Tensor<T> p;  // [G,G]
  Tensor<T> o;  // [2,G,G]
  Tensor<T> s;  // [2,G,G]
  std::size_t grid = 0;
};

/// Graph-side head outputs in token order: row g = cell (g/G, g%G).
template <typename T>
struct HeadOut {
  typename Graph<T>::Var p;  // [G^2,1]
  typename Graph<T>::Var o;  // [G^2,2]
  typename Graph<T>::Var s;  // [G^2,2]
  std::size_t grid = 0;
};

/// Four Conv(3x3)-BN-ReLU stages halving channels (floor 8), then three
/// sigmoid 1x1 projection branches.
template <typename T>
class Head {
 public:
  using Var = typename Graph<T>::Var;
  static constexpr std::size_t kStages = 4;

  struct Stage {
    Tensor<T> kernel, gain, bias;
    BatchNormState<T> bn;
  };

  std::size_t in_dim = 32;
  std::size_t grid = 8;
  std::vector<Stage> stages;
  Tensor<T> wp, bp, wo, bo, ws, bs;

  static std::vector<std::size_t> channel_plan(std::size_t in_dim) {
    std::vector<std::size_t> c{in_dim};
    for (std::size_t i = 0; i < kStages; ++i)
      c.push_back(std::max<std::size_t>(8, c.back() / 2));
    return c;
  }

  static Head init(std::size_t in_dim, std::size_t grid, Rng& rng) {
    Head m;
    m.in_dim = in_dim;
    m.grid = grid;
    auto tn = [&rng](Shape shape) {
      Tensor<T> t(std::move(shape));
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(rng.trunc_normal(0.02));
      return t;
    };
    auto plan = channel_plan(in_dim);
    m.stages.resize(kStages);
    for (std::size_t i = 0; i < kStages; ++i) {
      m.stages[i].kernel = tn({plan[i + 1], plan[i], 3, 3});
      m.stages[i].gain = Tensor<T>::full({plan[i + 1]}, T(1));
      m.stages[i].bias = Tensor<T>({plan[i + 1]});
      m.stages[i].bn = BatchNormState<T>::make(plan[i + 1]);
    }
    std::size_t c = plan.back();
    m.wp = tn({c, 1});
    m.bp = Tensor<T>({1});
    m.wo = tn({c, 2});
    m.bo = Tensor<T>({2});
    m.ws = tn({c, 2});
    m.bs = Tensor<T>({2});
    return m;
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      std::string p = "conv" + std::to_string(i) + ".";
      fn(p + "k", stages[i].kernel);
      fn(p + "bn.g", stages[i].gain);
      fn(p + "bn.b", stages[i].bias);
    }
    fn("cls.w", wp);
    fn("cls.b", bp);
    fn("off.w", wo);
    fn("off.b", bo);
    fn("size.w", ws);
    fn("size.b", bs);
  }

  /// Non-trainable state that still belongs in a checkpoint.
  template <typename Fn>
  void for_each_buffer(Fn&& fn) {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      std::string p = "conv" + std::to_string(i) + ".bn.";
      fn(p + "rm", stages[i].bn.running_mean);
      fn(p + "rv", stages[i].bn.running_var);
    }
  }

  std::int64_t bn_batches() const { return stages.empty() ? 0 : stages[0].bn.batches; }
  void set_bn_batches(std::int64_t n) {
    for (auto& st : stages) st.bn.batches = n;
  }

  /// search_tokens: [G^2, d] in row-major patch order.
  HeadOut<T> forward(Binder<T> bind, Var search_tokens, BnMode mode) {
    Graph<T>& g = bind.graph;
    const Tensor<T>& tv = g.value(search_tokens);
    require(tv.rank() == 2 && tv.dim(0) == grid * grid,
            "head: token count does not match a square grid");
    require(tv.dim(1) == in_dim, "head: token dim mismatch");
    auto x = g.reshape(g.transpose(search_tokens), {in_dim, grid, grid});
    for (std::size_t i = 0; i < stages.size(); ++i) {
      std::string p = "conv" + std::to_string(i) + ".";
      x = g.conv2d(x, bind(p + "k", stages[i].kernel));
      x = g.batchnorm(x, bind(p + "bn.g", stages[i].gain),
                      bind(p + "bn.b", stages[i].bias), stages[i].bn, mode);
      x = g.relu(x);
    }
    std::size_t c = g.value(x).dim(0);
    auto feat = g.transpose(g.reshape(x, {c, grid * grid}));
    HeadOut<T> out;
    out.grid = grid;
    out.p = g.sigmoid(g.add(g.matmul(feat, bind("cls.w", wp)), bind("cls.b", bp)));
    out.o = g.sigmoid(g.add(g.matmul(feat, bind("off.w", wo)), bind("off.b", bo)));
    out.s = g.sigmoid(g.add(g.matmul(feat, bind("size.w", ws)), bind("size.b", bs)));
    return out;
  }
};

template <typename T>
PredictionMaps<T> maps_from(const Graph<T>& g, const HeadOut<T>& out) {
  std::size_t gr = out.grid;
  PredictionMaps<T> m;
  m.grid = gr;
  m.p = Tensor<T>({gr, gr});
  m.o = Tensor<T>({2, gr, gr});
  m.s = Tensor<T>({2, gr, gr});
  const Tensor<T>& pv = g.value(out.p);
  const Tensor<T>& ov = g.value(out.o);
  const Tensor<T>& sv = g.value(out.s);
  for (std::size_t r = 0; r < gr; ++r)
    for (std::size_t c = 0; c < gr; ++c) {
      std::size_t t = r * gr + c;
      m.p(r, c) = pv[t];
      m.o(0, r, c) = ov(t, 0);
      m.o(1, r, c) = ov(t, 1);
      m.s(0, r, c) = sv(t, 0);
      m.s(1, r, c) = sv(t, 1);
    }
  return m;
}

/// Highest classification score wins; ties go to the first cell in
/// row-major order. Box = ((col + o_x)/G, (row + o_y)/G, s_w, s_h).
template <typename T>
Box decode_box(const PredictionMaps<T>& m) {
  std::size_t gr = m.grid;
  std::size_t br = 0, bc = 0;
  T best = m.p(0, 0);
  for (std::size_t r = 0; r < gr; ++r)
    for (std::size_t c = 0; c < gr; ++c)
      if (m.p(r, c) > best) {
        best = m.p(r, c);
        br = r;
        bc = c;
      }
  Box b;
  b.cx = (static_cast<double>(bc) + static_cast<double>(m.o(0, br, bc))) / gr;
  b.cy = (static_cast<double>(br) + static_cast<double>(m.o(1, br, bc))) / gr;
  b.w = static_cast<double>(m.s(0, br, bc));
  b.h = static_cast<double>(m.s(1, br, bc));
  return b;
}

/// Classification target and regression targets at the center cell.
template <typename T>
struct Targets {
  Tensor<T> y;  // [G,G], peak exactly 1 at the center cell
  std::size_t row = 0, col = 0;
  double ox = 0, oy = 0;  // fractional offsets in [0,1)
  double sw = 0, sh = 0;
};

template <typename T>
Targets<T> make_targets(const Box& gt, std::size_t grid) {
  gt.validate_normalized();
  Targets<T> t;
  double colf = gt.cx * grid, rowf = gt.cy * grid;
  t.col = std::min<std::size_t>(grid - 1, static_cast<std::size_t>(std::floor(colf)));
  t.row = std::min<std::size_t>(grid - 1, static_cast<std::size_t>(std::floor(rowf)));
  t.ox = colf - static_cast<double>(t.col);
  t.oy = rowf - static_cast<double>(t.row);
  t.sw = gt.w;
  t.sh = gt.h;
  double std_cells = std::max(1.0, std::sqrt(gt.w * gt.h) * grid / 6.0);
  t.y = Tensor<T>({grid, grid});
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) {
      double dr = static_cast<double>(r) - static_cast<double>(t.row);
      double dc = static_cast<double>(c) - static_cast<double>(t.col);
      t.y(r, c) = static_cast<T>(
          std::exp(-(dr * dr + dc * dc) / (2.0 * std_cells * std_cells)));
    }
  return t;
}

}  // namespace ortlab
