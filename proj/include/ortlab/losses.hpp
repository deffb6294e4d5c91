#pragma once

#include <cmath>
#include <vector>

#include "ortlab/box.hpp"
#include "ortlab/graph.hpp"
#include "ortlab/head.hpp"

namespace ortlab {

struct LossConfig {
  double lambda_iou = 2.0;
  double lambda_l1 = 5.0;
  double gamma = 2.0e-4;  // invariance-loss weight in the teacher total
  double alpha = 1.0;     // distillation weight at zero deviation
  double beta = 1.0;      // distillation weight slope in the GIoU deviation
  double sigma = 0.3;     // template masking ratio
  double mu = 0.99;       // running-mean momentum
  int focal_a = 2;
  int focal_c = 4;

  void validate() const {
    require(lambda_iou >= 0 && lambda_l1 >= 0, "loss: lambdas must be >= 0");
    require(gamma >= 0, "loss: gamma must be >= 0");
    require(sigma >= 0 && sigma <= 1, "loss: sigma must be in [0,1]");
    require(alpha >= 0, "loss: alpha must be >= 0");
    require(mu >= 0 && mu < 1, "loss: mu must be in [0,1)");
    require(focal_a >= 1 && focal_c >= 0, "loss: focal exponents out of range");
  }
};

/// Exponential moving average of the GIoU loss; the first update seeds the
/// value directly, later ones apply value <- mu*value + (1-mu)*x.
struct RunningMean {
  double value = 0.0;
  double momentum = 0.99;
  bool initialized = false;

  void update(double x) {
    value = initialized ? momentum * value + (1.0 - momentum) * x : x;
    initialized = true;
  }
};

template <typename T>
struct BoxVar {
  typename Graph<T>::Var cx, cy, w, h;  // each shaped [1]
};

template <typename T>
BoxVar<T> constant_box(Graph<T>& g, const Box& b) {
  return BoxVar<T>{g.scalar(static_cast<T>(b.cx)), g.scalar(static_cast<T>(b.cy)),
                   g.scalar(static_cast<T>(b.w)), g.scalar(static_cast<T>(b.h))};
}

namespace detail {
template <typename T>
typename Graph<T>::Var ipow(Graph<T>& g, typename Graph<T>::Var x, int n) {
  require(n >= 1, "ipow: exponent must be >= 1");
  auto acc = x;
  for (int i = 1; i < n; ++i) acc = g.mul(acc, x);
  return acc;
}
}  // namespace detail

// ---- GIoU ----------------------------------------------------------------

/// IoU minus the fraction of the smallest enclosing box not covered by the
/// union. Differentiable through min/max subgradients.
template <typename T>
typename Graph<T>::Var giou(Graph<T>& g, const BoxVar<T>& a, const BoxVar<T>& b) {
  require(g.value(a.w)[0] > 0 && g.value(a.h)[0] > 0 && g.value(b.w)[0] > 0 &&
              g.value(b.h)[0] > 0,
          "giou: degenerate box");
  auto half = [&](typename Graph<T>::Var v) { return g.scale(v, T(0.5)); };
  auto ax1 = g.sub(a.cx, half(a.w)), ax2 = g.add(a.cx, half(a.w));
  auto ay1 = g.sub(a.cy, half(a.h)), ay2 = g.add(a.cy, half(a.h));
  auto bx1 = g.sub(b.cx, half(b.w)), bx2 = g.add(b.cx, half(b.w));
  auto by1 = g.sub(b.cy, half(b.h)), by2 = g.add(b.cy, half(b.h));
  auto zero = g.scalar(T(0));
  auto iw = g.maximum(zero, g.sub(g.minimum(ax2, bx2), g.maximum(ax1, bx1)));
  auto ih = g.maximum(zero, g.sub(g.minimum(ay2, by2), g.maximum(ay1, by1)));
  auto inter = g.mul(iw, ih);
  auto uni = g.sub(g.add(g.mul(a.w, a.h), g.mul(b.w, b.h)), inter);
  auto iou = g.div(inter, uni);
  auto cw = g.sub(g.maximum(ax2, bx2), g.minimum(ax1, bx1));
  auto ch = g.sub(g.maximum(ay2, by2), g.minimum(ay1, by1));
  auto carea = g.mul(cw, ch);
  return g.sub(iou, g.div(g.sub(carea, uni), carea));
}

inline double giou(const Box& a, const Box& b) {
  Graph<double> g;
  return g.value(giou(g, constant_box(g, a), constant_box(g, b)))[0];
}

// ---- focal classification loss --------------------------------------------

/// Weighted focal loss with a single positive cell (y = 1 there):
///   -(1/N_pos) [ (1-p)^a log p  +  sum_neg (1-y)^c p^a log(1-p) ].
/// The positive cell is gathered out so its log term never touches the
/// negative branch (the perfect-prediction limit stays finite).
template <typename T>
typename Graph<T>::Var focal_loss(Graph<T>& g, typename Graph<T>::Var p,
                                  const Tensor<T>& y, const LossConfig& cfg) {
  const Tensor<T>& pv = g.value(p);
  std::size_t n = y.size();
  require(pv.size() == n, "focal: p/y size mismatch");
  std::size_t pos = n;
  for (std::size_t i = 0; i < n; ++i)
    if (y[i] == T(1)) {
      require(pos == n, "focal: more than one positive cell");
      pos = i;
    }
  require(pos < n, "focal: no positive cell");

  auto pflat = g.reshape(p, {n, 1});
  auto pp = g.gather_rows(pflat, {pos});
  auto pos_term =
      g.mul(detail::ipow(g, g.affine(pp, T(-1), T(1)), cfg.focal_a), g.log(pp));

  typename Graph<T>::Var total = g.sum(pos_term);
  if (n > 1) {
    std::vector<std::size_t> others;
    others.reserve(n - 1);
    Tensor<T> wn({n - 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
      if (i == pos) continue;
      wn[others.size()] = static_cast<T>(
          std::pow(1.0 - static_cast<double>(y[i]), cfg.focal_c));
      others.push_back(i);
    }
    auto pn = g.gather_rows(pflat, others);
    auto neg_term = g.mul(g.constant(wn),
                          g.mul(detail::ipow(g, pn, cfg.focal_a),
                                g.log(g.affine(pn, T(-1), T(1)))));
    total = g.add(total, g.sum(neg_term));
  }
  return g.scale(total, T(-1));  // N_pos = 1
}

template <typename T>
T focal_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg) {
  Graph<T> g;
  return g.value(focal_loss(g, g.constant(p), y, cfg))[0];
}

// ---- prediction loss -------------------------------------------------------

template <typename T>
struct PredParts {
  typename Graph<T>::Var cls, iou_loss, l1, total;
};

/// L_pred = L_cls + lambda_iou * L_iou + lambda_l1 * L_1, with the box
/// regression read at the ground-truth center cell.
template <typename T>
PredParts<T> pred_loss(Graph<T>& g, const HeadOut<T>& out, const Targets<T>& tgt,
                       const Box& gt, const LossConfig& cfg) {
  cfg.validate();
  std::size_t gr = out.grid;
  std::size_t idx = tgt.row * gr + tgt.col;
  auto cls = focal_loss(g, out.p, tgt.y, cfg);

  auto orow = g.gather_rows(out.o, {idx});
  auto srow = g.gather_rows(out.s, {idx});
  T inv_g = T(1) / static_cast<T>(gr);
  BoxVar<T> pred;
  pred.cx = g.affine(g.reshape(g.slice_cols(orow, 0, 1), {1}), inv_g,
                     static_cast<T>(tgt.col) * inv_g);
  pred.cy = g.affine(g.reshape(g.slice_cols(orow, 1, 1), {1}), inv_g,
                     static_cast<T>(tgt.row) * inv_g);
  pred.w = g.reshape(g.slice_cols(srow, 0, 1), {1});
  pred.h = g.reshape(g.slice_cols(srow, 1, 1), {1});
  BoxVar<T> gtv = constant_box(g, gt);

  auto iou_loss = g.affine(giou(g, pred, gtv), T(-1), T(1));  // 1 - GIoU
  auto l1 = g.scale(g.add(g.add(g.abs(g.sub(pred.cx, gtv.cx)),
                                g.abs(g.sub(pred.cy, gtv.cy))),
                          g.add(g.abs(g.sub(pred.w, gtv.w)),
                                g.abs(g.sub(pred.h, gtv.h)))),
                    T(0.25));

  PredParts<T> parts;
  parts.cls = cls;
  parts.iou_loss = iou_loss;
  parts.l1 = l1;
  parts.total = g.add(g.add(cls, g.scale(iou_loss, static_cast<T>(cfg.lambda_iou))),
                      g.scale(l1, static_cast<T>(cfg.lambda_l1)));
  return parts;
}

struct PredValues {
  double cls = 0, iou_loss = 0, l1 = 0, total = 0;
};

/// Value-only prediction loss on finished maps (held-out evaluation).
template <typename T>
PredValues pred_loss(const PredictionMaps<T>& maps, const Box& gt,
                     const LossConfig& cfg) {
  std::size_t gr = maps.grid;
  Graph<double> g;
  Tensor<double> pf({gr * gr, 1}), of({gr * gr, 2}), sf({gr * gr, 2});
  for (std::size_t r = 0; r < gr; ++r)
    for (std::size_t c = 0; c < gr; ++c) {
      std::size_t t = r * gr + c;
      pf[t] = static_cast<double>(maps.p(r, c));
      of(t, 0) = static_cast<double>(maps.o(0, r, c));
      of(t, 1) = static_cast<double>(maps.o(1, r, c));
      sf(t, 0) = static_cast<double>(maps.s(0, r, c));
      sf(t, 1) = static_cast<double>(maps.s(1, r, c));
    }
  HeadOut<double> out{g.constant(pf), g.constant(of), g.constant(sf), gr};
  Targets<double> tgt = make_targets<double>(gt, gr);
  LossConfig c64 = cfg;
  PredParts<double> parts = pred_loss(g, out, tgt, gt, c64);
  return PredValues{g.value(parts.cls)[0], g.value(parts.iou_loss)[0],
                    g.value(parts.l1)[0], g.value(parts.total)[0]};
}

// ---- invariance and distillation losses ------------------------------------

/// Mean squared difference between the template features of the plain and
/// masked forward passes (mean over all |K_Z| x d entries).
template <typename T>
typename Graph<T>::Var orr_loss(Graph<T>& g, typename Graph<T>::Var t_plain,
                                typename Graph<T>::Var t_masked) {
  require(g.value(t_plain).same_shape(g.value(t_masked)), "orr_loss: shape mismatch");
  auto d = g.sub(t_plain, t_masked);
  return g.mean(g.mul(d, d));
}

template <typename T>
T orr_loss(const Tensor<T>& a, const Tensor<T>& b) {
  Graph<T> g;
  return g.value(orr_loss(g, g.constant(a), g.constant(b)))[0];
}

/// Distillation weight: alpha + beta * (l_iou - mean), clamped to
/// [0, 2*alpha] so the weight can never go negative.
inline double afkd_weight(double l_iou, const RunningMean& mean, double alpha,
                          double beta) {
  require(mean.initialized, "afkd_weight: running mean not initialized");
  require(alpha >= 0, "afkd_weight: alpha must be >= 0");
  double w = alpha + beta * (l_iou - mean.value);
  return std::min(std::max(w, 0.0), 2.0 * alpha);
}

/// weight * MSE over all K x d token features; the teacher side must be a
/// constant (no gradient flows into it).
template <typename T>
typename Graph<T>::Var afkd_loss(Graph<T>& g, typename Graph<T>::Var t_teacher,
                                 typename Graph<T>::Var t_student, double weight) {
  require(g.value(t_teacher).same_shape(g.value(t_student)),
          "afkd_loss: shape mismatch (self-similar backbones required)");
  require(!g.requires_grad(t_teacher), "afkd_loss: teacher must be frozen");
  auto d = g.sub(t_teacher, t_student);
  return g.scale(g.mean(g.mul(d, d)), static_cast<T>(weight));
}

template <typename T>
T afkd_loss(const Tensor<T>& t_teacher, const Tensor<T>& t_student, double weight) {
  Graph<T> g;
  return g.value(afkd_loss(g, g.constant(t_teacher), g.constant(t_student), weight))[0];
}

// ---- totals ----------------------------------------------------------------

template <typename T>
typename Graph<T>::Var teacher_total(Graph<T>& g, typename Graph<T>::Var pred_total,
                                     typename Graph<T>::Var orr, const LossConfig& cfg) {
  return g.add(pred_total, g.scale(orr, static_cast<T>(cfg.gamma)));
}

template <typename T>
typename Graph<T>::Var student_total(Graph<T>& g, typename Graph<T>::Var pred_total,
                                     typename Graph<T>::Var afkd) {
  return g.add(pred_total, afkd);
}

}  // namespace ortlab
