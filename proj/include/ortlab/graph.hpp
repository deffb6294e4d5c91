#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ortlab/tensor.hpp"

namespace ortlab {

enum class BnMode { kTrain, kEval };

/// Per-channel running statistics owned by the layer that uses them.
/// Updated only by train-mode batchnorm; eval before any update is an error.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  std::int64_t batches = 0;

  static BatchNormState make(std::size_t channels) {
    BatchNormState s;
    s.running_mean = Tensor<T>({channels});
    s.running_var = Tensor<T>::full({channels}, T(1));
    return s;
  }
};

/// Reverse-mode tape. Nodes are recorded in creation order, which is a
/// valid topological order; backward() walks it once in reverse. Values are
/// immutable once produced. Ops verify shapes up front and reject any
/// non-finite output instead of propagating it.
///
/// Parameters are named leaves deduplicated by name, so a weight used by
/// two branches of the same forward pass accumulates one gradient. Leaves
/// created as constants never get gradient buffers.
template <typename T>
class Graph {
 public:
  struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // ---- leaves ----------------------------------------------------------

  Var constant(Tensor<T> v) { return push(std::move(v), false); }
  Var scalar(T v) { return constant(Tensor<T>::scalar(v)); }
  Var input(Tensor<T> v) { return push(std::move(v), true); }

  Var parameter(const std::string& name, Tensor<T>& storage) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second.var;
    Var v = push(storage, true);
    params_.emplace(name, ParamRef{&storage, v});
    return v;
  }

  // ---- accessors -------------------------------------------------------

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool has_grad(Var v) const { return !nodes_[v.id].grad.empty(); }
  const Tensor<T>& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Smallest distance to a non-differentiable point seen by any kinked op
  /// (relu/abs/min/max) since the last reset. Gradient checks use this to
  /// reject instances sitting on a kink.
  double kink_margin() const { return kink_margin_; }
  void reset_kink_margin() { kink_margin_ = std::numeric_limits<double>::infinity(); }

  // ---- elementwise -----------------------------------------------------

  /// a + b. b may share a's shape, be a scalar, or be a length-n vector
  /// added to every row of a 2-D a (bias broadcast).
  Var add(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.same_shape(bv)) {
      Tensor<T> out = av;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
      return record("add", std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
        acc_all(a, g);
        acc_all(b, g);
      });
    }
    if (bv.size() == 1) {
      Tensor<T> out = av;
      T c = bv[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
      return record("add", std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
        acc_all(a, g);
        if (wants(b)) {
          T s = 0;
          for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
          gbuf(b)[0] += s;
        }
      });
    }
    require(av.rank() == 2 && bv.rank() == 1 && bv.dim(0) == av.dim(1),
            "add: incompatible shapes " + shape_str(av.shape()) + " vs " +
                shape_str(bv.shape()));
    std::size_t m = av.dim(0), n = av.dim(1);
    Tensor<T> out = av;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) += bv[j];
    return record("add", std::move(out), {a, b},
                  [this, a, b, m, n](const Tensor<T>& g) {
                    acc_all(a, g);
                    if (wants(b)) {
                      Tensor<T>& gb = gbuf(b);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                    }
                  });
  }

  Var sub(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    bool scalar_b = bv.size() == 1 && av.size() != 1;
    require(av.same_shape(bv) || scalar_b,
            "sub: shape mismatch " + shape_str(av.shape()) + " vs " +
                shape_str(bv.shape()));
    Tensor<T> out = av;
    if (scalar_b)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[0];
    else
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return record("sub", std::move(out), {a, b},
                  [this, a, b, scalar_b](const Tensor<T>& g) {
                    acc_all(a, g);
                    if (!wants(b)) return;
                    Tensor<T>& gb = gbuf(b);
                    if (scalar_b) {
                      T s = 0;
                      for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
                      gb[0] -= s;
                    } else {
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                    }
                  });
  }

  Var mul(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    bool scalar_b = bv.size() == 1 && av.size() != 1;
    require(av.same_shape(bv) || scalar_b,
            "mul: shape mismatch " + shape_str(av.shape()) + " vs " +
                shape_str(bv.shape()));
    Tensor<T> out = av;
    if (scalar_b)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[0];
    else
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return record("mul", std::move(out), {a, b},
                  [this, a, b, scalar_b](const Tensor<T>& g) {
                    const Tensor<T>& av2 = val(a);
                    const Tensor<T>& bv2 = val(b);
                    if (wants(a)) {
                      Tensor<T>& ga = gbuf(a);
                      if (scalar_b)
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[0];
                      else
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                    }
                    if (wants(b)) {
                      Tensor<T>& gb = gbuf(b);
                      if (scalar_b) {
                        T s = 0;
                        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av2[i];
                        gb[0] += s;
                      } else {
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                      }
                    }
                  });
  }

  Var div(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    bool scalar_b = bv.size() == 1 && av.size() != 1;
    require(av.same_shape(bv) || scalar_b,
            "div: shape mismatch " + shape_str(av.shape()) + " vs " +
                shape_str(bv.shape()));
    Tensor<T> out = av;
    if (scalar_b)
      for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[0];
    else
      for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    return record("div", std::move(out), {a, b},
                  [this, a, b, scalar_b](const Tensor<T>& g) {
                    const Tensor<T>& av2 = val(a);
                    const Tensor<T>& bv2 = val(b);
                    if (wants(a)) {
                      Tensor<T>& ga = gbuf(a);
                      if (scalar_b)
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[0];
                      else
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[i];
                    }
                    if (wants(b)) {
                      Tensor<T>& gb = gbuf(b);
                      if (scalar_b) {
                        T s = 0;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          T q = bv2[0];
                          s -= g[i] * av2[i] / (q * q);
                        }
                        gb[0] += s;
                      } else {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          T q = bv2[i];
                          gb[i] -= g[i] * av2[i] / (q * q);
                        }
                      }
                    }
                  });
  }

  /// k*a + c, elementwise with constant k and c.
  Var affine(Var a, T k, T c) {
    Tensor<T> out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * out[i] + c;
    return record("affine", std::move(out), {a}, [this, a, k](const Tensor<T>& g) {
      if (!wants(a)) return;
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
    });
  }

  Var scale(Var a, T k) { return affine(a, k, T(0)); }
  Var neg(Var a) { return affine(a, T(-1), T(0)); }

  Var abs(Var a) {
    const Tensor<T>& av = val(a);
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
      note_kink(std::abs(static_cast<double>(out[i])));
      out[i] = std::abs(out[i]);
    }
    return record("abs", std::move(out), {a}, [this, a](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& av2 = val(a);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += av2[i] > 0 ? g[i] : (av2[i] < 0 ? -g[i] : T(0));
    });
  }

  Var log(Var a) {
    Tensor<T> out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
    return record("log", std::move(out), {a}, [this, a](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& av = val(a);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
    });
  }

  Var exp(Var a) {
    Tensor<T> out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
    Var r = record("exp", std::move(out), {a}, [](const Tensor<T>&) {});
    set_backprop(r, [this, a, r](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& ov = val(r);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
    });
    return r;
  }

  Var relu(Var a) {
    const Tensor<T>& av = val(a);
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
      note_kink(std::abs(static_cast<double>(out[i])));
      out[i] = out[i] > 0 ? out[i] : T(0);
    }
    return record("relu", std::move(out), {a}, [this, a](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& av2 = val(a);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av2[i] > 0) ga[i] += g[i];
    });
  }

  /// GELU, tanh approximation.
  Var gelu(Var a) {
    static constexpr double kC0 = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kC1 = 0.044715;
    const Tensor<T>& av = val(a);
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
      double x = static_cast<double>(av[i]);
      double t = std::tanh(kC0 * (x + kC1 * x * x * x));
      out[i] = static_cast<T>(0.5 * x * (1.0 + t));
    }
    return record("gelu", std::move(out), {a}, [this, a](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& av2 = val(a);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = static_cast<double>(av2[i]);
        double t = std::tanh(kC0 * (x + kC1 * x * x * x));
        double d = 0.5 * (1.0 + t) +
                   0.5 * x * (1.0 - t * t) * kC0 * (1.0 + 3.0 * kC1 * x * x);
        ga[i] += g[i] * static_cast<T>(d);
      }
    });
  }

  Var sigmoid(Var a) {
    const Tensor<T>& av = val(a);
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
      double x = static_cast<double>(av[i]);
      out[i] = static_cast<T>(x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x)));
    }
    Var r = record("sigmoid", std::move(out), {a}, [](const Tensor<T>&) {});
    set_backprop(r, [this, a, r](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& s = val(r);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (T(1) - s[i]);
    });
    return r;
  }

  Var minimum(Var a, Var b) { return min_max(a, b, /*take_min=*/true); }
  Var maximum(Var a, Var b) { return min_max(a, b, /*take_min=*/false); }

  // ---- linear algebra --------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
            "matmul: shape mismatch " + shape_str(av.shape()) + " x " +
                shape_str(bv.shape()));
    std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    mm(av.data(), bv.data(), out.data(), m, k, n);
    return record("matmul", std::move(out), {a, b},
                  [this, a, b, m, k, n](const Tensor<T>& g) {
                    if (wants(a)) mm_nt(g.data(), val(b).data(), gbuf(a).data(), m, n, k);
                    if (wants(b)) mm_tn(val(a).data(), g.data(), gbuf(b).data(), m, k, n);
                  });
  }

  Var transpose(Var a) {
    const Tensor<T>& av = val(a);
    require(av.rank() == 2, "transpose expects rank-2");
    std::size_t m = av.dim(0), n = av.dim(1);
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out(j, i) = av(i, j);
    return record("transpose", std::move(out), {a},
                  [this, a, m, n](const Tensor<T>& g) {
                    if (!wants(a)) return;
                    Tensor<T>& ga = gbuf(a);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
                  });
  }

  Var reshape(Var a, Shape shape) {
    const Tensor<T>& av = val(a);
    require(shape_numel(shape) == av.size(), "reshape: element count mismatch");
    Tensor<T> out(std::move(shape));
    std::copy(av.data(), av.data() + av.size(), out.data());
    return record("reshape", std::move(out), {a}, [this, a](const Tensor<T>& g) {
      acc_all(a, g);
    });
  }

  // ---- gather / slice / concat ----------------------------------------

  Var slice_rows(Var a, std::size_t start, std::size_t count) {
    const Tensor<T>& av = val(a);
    require(av.rank() == 2 && start + count <= av.dim(0), "slice_rows out of range");
    std::size_t n = av.dim(1);
    Tensor<T> out({count, n});
    std::copy(av.data() + start * n, av.data() + (start + count) * n, out.data());
    return record("slice_rows", std::move(out), {a},
                  [this, a, start, n](const Tensor<T>& g) {
                    if (!wants(a)) return;
                    Tensor<T>& ga = gbuf(a);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[start * n + i] += g[i];
                  });
  }

  Var gather_rows(Var a, std::vector<std::size_t> idx) {
    const Tensor<T>& av = val(a);
    require(av.rank() == 2, "gather_rows expects rank-2");
    std::size_t n = av.dim(1);
    for (std::size_t r : idx) require(r < av.dim(0), "gather_rows: index out of range");
    Tensor<T> out({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(av.data() + idx[i] * n, av.data() + (idx[i] + 1) * n,
                out.data() + i * n);
    return record("gather_rows", std::move(out), {a},
                  [this, a, idx = std::move(idx), n](const Tensor<T>& g) {
                    if (!wants(a)) return;
                    Tensor<T>& ga = gbuf(a);
                    for (std::size_t i = 0; i < idx.size(); ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        ga[idx[i] * n + j] += g[i * n + j];
                  });
  }

  Var slice_cols(Var a, std::size_t start, std::size_t count) {
    const Tensor<T>& av = val(a);
    require(av.rank() == 2 && start + count <= av.dim(1), "slice_cols out of range");
    std::size_t m = av.dim(0), n = av.dim(1);
    Tensor<T> out({m, count});
    for (std::size_t i = 0; i < m; ++i)
      std::copy(av.data() + i * n + start, av.data() + i * n + start + count,
                out.data() + i * count);
    return record("slice_cols", std::move(out), {a},
                  [this, a, start, count, m, n](const Tensor<T>& g) {
                    if (!wants(a)) return;
                    Tensor<T>& ga = gbuf(a);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < count; ++j)
                        ga[i * n + start + j] += g[i * count + j];
                  });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    std::size_t m = val(parts[0]).dim(0), n = 0;
    for (Var p : parts) {
      require(val(p).rank() == 2 && val(p).dim(0) == m, "concat_cols: row mismatch");
      n += val(p).dim(1);
    }
    Tensor<T> out({m, n});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor<T>& pv = val(p);
      std::size_t w = pv.dim(1);
      for (std::size_t i = 0; i < m; ++i)
        std::copy(pv.data() + i * w, pv.data() + (i + 1) * w,
                  out.data() + i * n + off);
      off += w;
    }
    return record("concat_cols", std::move(out), parts,
                  [this, parts, m, n](const Tensor<T>& g) {
                    std::size_t off2 = 0;
                    for (Var p : parts) {
                      std::size_t w = val(p).dim(1);
                      if (wants(p)) {
                        Tensor<T>& gp = gbuf(p);
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < w; ++j)
                            gp[i * w + j] += g[i * n + off2 + j];
                      }
                      off2 += w;
                    }
                  });
  }

  Var concat_rows(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
            "concat_rows: column mismatch");
    std::size_t n = av.dim(1), ma = av.dim(0), mb = bv.dim(0);
    Tensor<T> out({ma + mb, n});
    std::copy(av.data(), av.data() + av.size(), out.data());
    std::copy(bv.data(), bv.data() + bv.size(), out.data() + av.size());
    return record("concat_rows", std::move(out), {a, b},
                  [this, a, b, ma, mb, n](const Tensor<T>& g) {
                    if (wants(a)) {
                      Tensor<T>& ga = gbuf(a);
                      for (std::size_t i = 0; i < ma * n; ++i) ga[i] += g[i];
                    }
                    if (wants(b)) {
                      Tensor<T>& gb = gbuf(b);
                      for (std::size_t i = 0; i < mb * n; ++i) gb[i] += g[ma * n + i];
                    }
                  });
  }

  // ---- reductions ------------------------------------------------------

  Var sum(Var a) {
    const Tensor<T>& av = val(a);
    T s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
    return record("sum", Tensor<T>::scalar(s), {a}, [this, a](const Tensor<T>& g) {
      if (!wants(a)) return;
      Tensor<T>& ga = gbuf(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
    });
  }

  Var mean(Var a) {
    const Tensor<T>& av = val(a);
    T s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
    T inv = T(1) / static_cast<T>(av.size());
    return record("mean", Tensor<T>::scalar(s * inv), {a},
                  [this, a, inv](const Tensor<T>& g) {
                    if (!wants(a)) return;
                    Tensor<T>& ga = gbuf(a);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * inv;
                  });
  }

  // ---- normalizations and structured ops --------------------------------

  /// Row softmax over the last dimension, stabilized by max subtraction.
  Var softmax_rows(Var a) {
    const Tensor<T>& av = val(a);
    require(av.rank() >= 1 && av.dim(av.rank() - 1) >= 1, "softmax: empty last dim");
    std::size_t n = av.dim(av.rank() - 1);
    std::size_t rows = av.size() / n;
    Tensor<T> out = av;
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out.data() + r * n;
      T mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      T inv = T(1) / s;
      for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
    }
    Var r = record("softmax", std::move(out), {a}, [](const Tensor<T>&) {});
    set_backprop(r, [this, a, r, n, rows](const Tensor<T>& g) {
      if (!wants(a)) return;
      const Tensor<T>& y = val(r);
      Tensor<T>& ga = gbuf(a);
      for (std::size_t rr = 0; rr < rows; ++rr) {
        const T* yr = y.data() + rr * n;
        const T* gr = g.data() + rr * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        T* gar = ga.data() + rr * n;
        for (std::size_t j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    });
    return r;
  }

  /// Per-row normalization over the last dim (>= 2 wide), then affine.
  Var layernorm(Var a, Var gain, Var bias) {
    static constexpr double kEps = 1e-5;
    const Tensor<T>& av = val(a);
    std::size_t d = av.dim(av.rank() - 1);
    require(d >= 2, "layernorm: last dim must be >= 2");
    require(val(gain).size() == d && val(bias).size() == d,
            "layernorm: gain/bias length mismatch");
    std::size_t rows = av.size() / d;
    Tensor<T> out = av;
    Tensor<T> xhat({rows, d});
    std::vector<T> inv_std(rows);
    const Tensor<T>& gv = val(gain);
    const Tensor<T>& bv = val(bias);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* x = av.data() + r * d;
      T m = 0;
      for (std::size_t j = 0; j < d; ++j) m += x[j];
      m /= static_cast<T>(d);
      T v = 0;
      for (std::size_t j = 0; j < d; ++j) v += (x[j] - m) * (x[j] - m);
      v /= static_cast<T>(d);
      T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(v) + kEps));
      inv_std[r] = s;
      T* o = out.data() + r * d;
      T* xh = xhat.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) {
        xh[j] = (x[j] - m) * s;
        o[j] = gv[j] * xh[j] + bv[j];
      }
    }
    return record(
        "layernorm", std::move(out), {a, gain, bias},
        [this, a, gain, bias, d, rows, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](const Tensor<T>& g) {
          const Tensor<T>& gv2 = val(gain);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * d;
            const T* xh = xhat.data() + r * d;
            if (wants(gain)) {
              Tensor<T>& gg = gbuf(gain);
              for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * xh[j];
            }
            if (wants(bias)) {
              Tensor<T>& gb = gbuf(bias);
              for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
            }
            if (wants(a)) {
              T mean_dxhat = 0, mean_dxhat_xhat = 0;
              for (std::size_t j = 0; j < d; ++j) {
                T dxh = gr[j] * gv2[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh[j];
              }
              mean_dxhat /= static_cast<T>(d);
              mean_dxhat_xhat /= static_cast<T>(d);
              Tensor<T>& ga = gbuf(a);
              T* gar = ga.data() + r * d;
              for (std::size_t j = 0; j < d; ++j) {
                T dxh = gr[j] * gv2[j];
                gar[j] += inv_std[r] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
              }
            }
          }
        });
  }

  /// 3x3 cross-correlation with zero padding 1; spatial size preserved.
  /// x: [C,H,W], kernel: [C2,C,3,3].
  Var conv2d(Var x, Var kernel) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& kv = val(kernel);
    require(xv.rank() == 3, "conv2d: input must be [C,H,W]");
    require(kv.rank() == 4 && kv.dim(2) == 3 && kv.dim(3) == 3,
            "conv2d: kernel must be [C2,C,3,3]");
    require(kv.dim(1) == xv.dim(0), "conv2d: channel mismatch");
    std::size_t ci = xv.dim(0), h = xv.dim(1), w = xv.dim(2), co = kv.dim(0);
    Tensor<T> out({co, h, w});
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t ic = 0; ic < ci; ++ic)
        for (std::size_t dy = 0; dy < 3; ++dy)
          for (std::size_t dx = 0; dx < 3; ++dx) {
            T kw = kv[((oc * ci + ic) * 3 + dy) * 3 + dx];
            if (kw == T(0)) continue;
            long oy0 = std::max<long>(0, 1 - static_cast<long>(dy));
            long oy1 = std::min<long>(h, h + 1 - static_cast<long>(dy));
            long ox0 = std::max<long>(0, 1 - static_cast<long>(dx));
            long ox1 = std::min<long>(w, w + 1 - static_cast<long>(dx));
            for (long oy = oy0; oy < oy1; ++oy) {
              const T* xrow = xv.data() + (ic * h + oy + dy - 1) * w + dx - 1;
              T* orow = out.data() + (oc * h + oy) * w;
              for (long ox = ox0; ox < ox1; ++ox) orow[ox] += kw * xrow[ox];
            }
          }
    return record(
        "conv2d", std::move(out), {x, kernel},
        [this, x, kernel, ci, co, h, w](const Tensor<T>& g) {
          const Tensor<T>& xv2 = val(x);
          const Tensor<T>& kv2 = val(kernel);
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t ic = 0; ic < ci; ++ic)
              for (std::size_t dy = 0; dy < 3; ++dy)
                for (std::size_t dx = 0; dx < 3; ++dx) {
                  long oy0 = std::max<long>(0, 1 - static_cast<long>(dy));
                  long oy1 = std::min<long>(h, h + 1 - static_cast<long>(dy));
                  long ox0 = std::max<long>(0, 1 - static_cast<long>(dx));
                  long ox1 = std::min<long>(w, w + 1 - static_cast<long>(dx));
                  std::size_t kix = ((oc * ci + ic) * 3 + dy) * 3 + dx;
                  T kw = kv2[kix];
                  T dk = 0;
                  for (long oy = oy0; oy < oy1; ++oy) {
                    const T* grow = g.data() + (oc * h + oy) * w;
                    std::size_t xoff = (ic * h + oy + dy - 1) * w + dx - 1;
                    if (wants(x)) {
                      T* gx = gbuf(x).data() + xoff;
                      for (long ox = ox0; ox < ox1; ++ox) gx[ox] += kw * grow[ox];
                    }
                    if (wants(kernel)) {
                      const T* xrow = xv2.data() + xoff;
                      for (long ox = ox0; ox < ox1; ++ox) dk += xrow[ox] * grow[ox];
                    }
                  }
                  if (wants(kernel)) gbuf(kernel)[kix] += dk;
                }
        });
  }

  /// Batch normalization over [N,C,H,W] or [C,H,W] (N=1). Train mode uses
  /// batch statistics and updates the running stats with momentum 0.1;
  /// eval mode uses the running stats and requires at least one prior
  /// train-mode update. Population variance throughout.
  Var batchnorm(Var x, Var gain, Var bias, BatchNormState<T>& state, BnMode mode) {
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;
    const Tensor<T>& xv = val(x);
    require(xv.rank() == 3 || xv.rank() == 4, "batchnorm: input must be [N,]CHW");
    bool batched = xv.rank() == 4;
    std::size_t n = batched ? xv.dim(0) : 1;
    std::size_t c = xv.dim(batched ? 1 : 0);
    std::size_t hw = xv.dim(batched ? 2 : 1) * xv.dim(batched ? 3 : 2);
    std::size_t m = n * hw;  // elements per channel
    require(val(gain).size() == c && val(bias).size() == c,
            "batchnorm: gain/bias length mismatch");
    require(state.running_mean.size() == c, "batchnorm: state channel mismatch");

    std::vector<T> ch_mean(c), ch_inv_std(c);
    if (mode == BnMode::kTrain) {
      require(m >= 2, "batchnorm train mode needs N*H*W >= 2");
      for (std::size_t cc = 0; cc < c; ++cc) {
        double s = 0;
        for (std::size_t b = 0; b < n; ++b) {
          const T* p = xv.data() + (b * c + cc) * hw;
          for (std::size_t i = 0; i < hw; ++i) s += p[i];
        }
        double mu = s / m;
        double v = 0;
        for (std::size_t b = 0; b < n; ++b) {
          const T* p = xv.data() + (b * c + cc) * hw;
          for (std::size_t i = 0; i < hw; ++i) v += (p[i] - mu) * (p[i] - mu);
        }
        v /= m;
        ch_mean[cc] = static_cast<T>(mu);
        ch_inv_std[cc] = static_cast<T>(1.0 / std::sqrt(v + kEps));
        state.running_mean[cc] =
            static_cast<T>((1.0 - kMomentum) * state.running_mean[cc] + kMomentum * mu);
        state.running_var[cc] =
            static_cast<T>((1.0 - kMomentum) * state.running_var[cc] + kMomentum * v);
      }
      state.batches += 1;
    } else {
      require(state.batches > 0, "batchnorm eval before any train-mode update");
      for (std::size_t cc = 0; cc < c; ++cc) {
        ch_mean[cc] = state.running_mean[cc];
        ch_inv_std[cc] = static_cast<T>(
            1.0 / std::sqrt(static_cast<double>(state.running_var[cc]) + kEps));
      }
    }

    Tensor<T> out(xv.shape());
    Tensor<T> xhat(xv.shape());
    const Tensor<T>& gv = val(gain);
    const Tensor<T>& bv = val(bias);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t cc = 0; cc < c; ++cc) {
        const T* p = xv.data() + (b * c + cc) * hw;
        T* o = out.data() + (b * c + cc) * hw;
        T* xh = xhat.data() + (b * c + cc) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          xh[i] = (p[i] - ch_mean[cc]) * ch_inv_std[cc];
          o[i] = gv[cc] * xh[i] + bv[cc];
        }
      }

    bool train = mode == BnMode::kTrain;
    return record(
        "batchnorm", std::move(out), {x, gain, bias},
        [this, x, gain, bias, n, c, hw, m, train, xhat = std::move(xhat),
         ch_inv_std = std::move(ch_inv_std)](const Tensor<T>& g) {
          const Tensor<T>& gv2 = val(gain);
          for (std::size_t cc = 0; cc < c; ++cc) {
            T dg = 0, db = 0;
            for (std::size_t b = 0; b < n; ++b) {
              const T* gr = g.data() + (b * c + cc) * hw;
              const T* xh = xhat.data() + (b * c + cc) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                dg += gr[i] * xh[i];
                db += gr[i];
              }
            }
            if (wants(gain)) gbuf(gain)[cc] += dg;
            if (wants(bias)) gbuf(bias)[cc] += db;
            if (!wants(x)) continue;
            Tensor<T>& gx = gbuf(x);
            if (train) {
              T mean_dy = db / static_cast<T>(m);
              T mean_dy_xhat = dg / static_cast<T>(m);
              for (std::size_t b = 0; b < n; ++b) {
                const T* gr = g.data() + (b * c + cc) * hw;
                const T* xh = xhat.data() + (b * c + cc) * hw;
                T* gxr = gx.data() + (b * c + cc) * hw;
                for (std::size_t i = 0; i < hw; ++i)
                  gxr[i] += gv2[cc] * ch_inv_std[cc] *
                            (gr[i] - mean_dy - xh[i] * mean_dy_xhat);
              }
            } else {
              for (std::size_t b = 0; b < n; ++b) {
                const T* gr = g.data() + (b * c + cc) * hw;
                T* gxr = gx.data() + (b * c + cc) * hw;
                for (std::size_t i = 0; i < hw; ++i)
                  gxr[i] += gv2[cc] * ch_inv_std[cc] * gr[i];
              }
            }
          }
        });
  }

  // ---- backward --------------------------------------------------------

  /// Reverse pass from a scalar loss. Gradients of every reachable
  /// parameter are accumulated; parameters the loss does not depend on are
  /// reported as zeros by named_gradients(). Nodes that do not require
  /// gradients never get a buffer.
  void backward(Var loss) {
    require(val(loss).size() == 1, "backward: loss must be scalar");
    if (!nodes_[loss.id].requires_grad) return;
    gbuf(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.grad.empty() && node.backprop) node.backprop(node.grad);
    }
  }

  /// Named gradient table per the parameter registry; zero tensors for
  /// parameters the loss did not reach.
  std::map<std::string, Tensor<T>> named_gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, ref] : params_) {
      const Node& node = nodes_[ref.var.id];
      out.emplace(name, node.grad.empty() ? Tensor<T>(node.value.shape()) : node.grad);
    }
    return out;
  }

  bool param_registered(const std::string& name) const { return params_.count(name) > 0; }
  bool param_reached(const std::string& name) const {
    auto it = params_.find(name);
    return it != params_.end() && !nodes_[it->second.var.id].grad.empty();
  }

  /// Visit (name, storage, grad-or-null) for every registered parameter.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (auto& [name, ref] : params_) {
      const Node& node = nodes_[ref.var.id];
      fn(name, *ref.storage, node.grad.empty() ? nullptr : &node.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(const Tensor<T>&)> backprop;
  };

  struct ParamRef {
    Tensor<T>* storage;
    Var var;
  };

  const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }
  bool wants(Var v) const { return nodes_[v.id].requires_grad; }

  Tensor<T>& gbuf(Var v) {
    Node& node = nodes_[v.id];
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  void acc_all(Var v, const Tensor<T>& g) {
    if (!wants(v)) return;
    Tensor<T>& gv = gbuf(v);
    for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
  }

  Var push(Tensor<T> v, bool requires_grad) {
    Node node;
    node.value = std::move(v);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var record(const char* opname, Tensor<T> out, const std::vector<Var>& parents,
             std::function<void(const Tensor<T>&)> backprop) {
    ensure_finite(out, opname);
    bool rg = false;
    for (Var p : parents) rg = rg || nodes_[p.id].requires_grad;
    Var v = push(std::move(out), rg);
    if (rg) nodes_[v.id].backprop = std::move(backprop);
    return v;
  }

  void set_backprop(Var v, std::function<void(const Tensor<T>&)> fn) {
    if (nodes_[v.id].requires_grad) nodes_[v.id].backprop = std::move(fn);
  }

  Var min_max(Var a, Var b, bool take_min) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    require(av.same_shape(bv), "min/max: shape mismatch");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) {
      note_kink(std::abs(static_cast<double>(av[i] - bv[i])));
      out[i] = take_min ? std::min(av[i], bv[i]) : std::max(av[i], bv[i]);
    }
    return record(take_min ? "minimum" : "maximum", std::move(out), {a, b},
                  [this, a, b, take_min](const Tensor<T>& g) {
                    const Tensor<T>& av2 = val(a);
                    const Tensor<T>& bv2 = val(b);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      bool pick_a = take_min ? av2[i] <= bv2[i] : av2[i] >= bv2[i];
                      Var tgt = pick_a ? a : b;
                      if (wants(tgt)) gbuf(tgt)[i] += g[i];
                    }
                  });
  }

  void note_kink(double dist) { kink_margin_ = std::min(kink_margin_, dist); }

  // C += A[m,k] * B[k,n]
  static void mm(const T* __restrict a, const T* __restrict b, T* __restrict c,
                 std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      T* ci = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        T aip = a[i * k + p];
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }

  // C[m,k] += A[m,n] * B[k,n]^T
  static void mm_nt(const T* __restrict a, const T* __restrict b, T* __restrict c,
                    std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const T* ai = a + i * n;
        const T* bj = b + j * n;
        T s = 0;
        for (std::size_t p = 0; p < n; ++p) s += ai[p] * bj[p];
        c[i * k + j] += s;
      }
  }

  // C[k,n] += A[m,k]^T * B[m,n]
  static void mm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* bi = b + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        T aip = a[i * k + p];
        T* cp = c + p * n;
        for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, ParamRef> params_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

/// Central-difference gradient estimate of a scalar function, the
/// verification oracle for backward().
template <typename F>
Tensor<double> finite_diff(F&& f, Tensor<double> x, double h) {
  require(h > 0, "finite_diff: step must be positive");
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double saved = x[i];
    x[i] = saved + h;
    double fp = f(x);
    x[i] = saved - h;
    double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw ComputeError("finite_diff: objective is non-finite");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace ortlab
