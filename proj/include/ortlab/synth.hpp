#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ortlab/box.hpp"
#include "ortlab/rng.hpp"
#include "ortlab/tensor.hpp"

namespace ortlab {

// ---- textures -------------------------------------------------------------

namespace noise {

inline double lattice(std::uint64_t seed, long ix, long iy) {
  std::uint64_t h = splitmix64(seed ^ (static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ull) ^
                               (static_cast<std::uint64_t>(iy) * 0xC2B2AE3D27D4EB4Full));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double bilerp_noise(std::uint64_t seed, double x, double y) {
  long ix = static_cast<long>(std::floor(x)), iy = static_cast<long>(std::floor(y));
  double fx = x - ix, fy = y - iy;
  double v00 = lattice(seed, ix, iy), v10 = lattice(seed, ix + 1, iy);
  double v01 = lattice(seed, ix, iy + 1), v11 = lattice(seed, ix + 1, iy + 1);
  double a = v00 + (v10 - v00) * fx;
  double b = v01 + (v11 - v01) * fx;
  return a + (b - a) * fy;
}

/// Two-octave value noise in [0,1].
inline double value(std::uint64_t seed, double x, double y) {
  return 0.65 * bilerp_noise(seed, x / 16.0, y / 16.0) +
         0.35 * bilerp_noise(seed ^ 0xA5A5A5A5ull, x / 6.0, y / 6.0);
}

}  // namespace noise

// ---- geometry -------------------------------------------------------------

/// Area of the intersection of a disk (center (cx,cy), radius r) with an
/// axis-aligned rectangle, in closed form.
inline double disk_rect_area(double cx, double cy, double r, double x1, double y1,
                             double x2, double y2) {
  if (r <= 0.0) return 0.0;
  // Shift so the disk is centered at the origin.
  x1 -= cx; x2 -= cx; y1 -= cy; y2 -= cy;
  // Antiderivative of the chord half-height sqrt(r^2-u^2).
  auto cap = [r](double u) {
    u = std::clamp(u, -r, r);
    return 0.5 * (u * std::sqrt(std::max(0.0, r * r - u * u)) +
                  r * r * std::asin(u / r));
  };
  // Integral over u in [a,b] of min(sqrt(r^2-u^2), y) for y >= 0.
  auto strip = [&](double a, double b, double y) {
    if (y <= 0.0) return 0.0;
    a = std::clamp(a, -r, r);
    b = std::clamp(b, -r, r);
    if (b <= a) return 0.0;
    if (y >= r) return cap(b) - cap(a);
    double u = std::sqrt(r * r - y * y);  // chord equals y at +/-u
    double lo = std::min(b, -u), hi = std::max(a, u);
    double out = 0.0;
    if (lo > a) out += cap(lo) - cap(a);                          // left of -u
    if (hi < b) out += cap(b) - cap(hi);                          // right of +u
    double mid_a = std::max(a, -u), mid_b = std::min(b, u);
    if (mid_b > mid_a) out += y * (mid_b - mid_a);                // flat part
    return out;
  };
  // Signed area below a horizontal line within the vertical strip: the
  // region {a<=u<=b, -chord<=v<=min(chord,y)}.
  auto below = [&](double a, double b, double y) {
    if (y <= -r) return 0.0;
    if (y >= 0.0) return strip(a, b, r) + strip(a, b, y);
    return strip(a, b, r) - strip(a, b, -y);
  };
  return below(x1, x2, y2) - below(x1, x2, y1);
}

// ---- scene configuration ----------------------------------------------------

struct OccluderSpec {
  enum class Shape { kRect, kDisk };
  Shape shape = Shape::kRect;
  double coverage = 0.5;       // fraction of the target to cover
  std::size_t from = 0, to = 0;  // active frame interval [from, to)
};

struct SceneConfig {
  std::size_t canvas = 128;
  double target_min = 16.0, target_max = 28.0;  // side range, px
  double vel_max = 3.0;                         // px/frame
  double jitter = 0.25;   // search-window center jitter, fraction of side
  std::size_t length = 40;
  std::vector<OccluderSpec> occluders;
  std::size_t template_hw = 32;
  std::size_t search_hw = 64;

  void validate() const {
    require(canvas >= 32, "scene: canvas too small");
    require(target_min >= 4.0 && target_max >= target_min &&
                target_max <= canvas / 2.0,
            "scene: bad target size range");
    require(length >= 1, "scene: length must be >= 1");
    require(jitter >= 0.0 && jitter <= 0.5, "scene: jitter must be in [0,0.5]");
    for (const auto& oc : occluders) {
      require(oc.coverage >= 0.0 && oc.coverage <= 1.0,
              "scene: coverage must be in [0,1]");
      require(oc.from <= oc.to, "scene: occluder interval inverted");
    }
  }
};

template <typename T>
struct SceneFrame {
  Tensor<T> image;  // [3, canvas, canvas], values in [0,1]
  Box gt;           // normalized to the canvas
  double occluded_fraction = 0.0;
  bool occluded() const { return occluded_fraction > 0.0; }
};

template <typename T>
struct Sequence {
  std::vector<SceneFrame<T>> frames;
};

// ---- generation -------------------------------------------------------------

namespace detail {

struct TargetState {
  double cx, cy, w, h, vx, vy;
};

inline double solve_disk_radius(double coverage, double tx1, double ty1, double tx2,
                                double ty2, double ocx, double ocy) {
  double target_area = (tx2 - tx1) * (ty2 - ty1);
  double want = coverage * target_area;
  if (want <= 0.0) return 0.0;
  double lo = 0.0, hi = std::hypot(tx2 - tx1, ty2 - ty1);
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    if (disk_rect_area(ocx, ocy, mid, tx1, ty1, tx2, ty2) < want)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Deterministic moving-target sequence. The trajectory, textures, and
/// occluder draws use independent substreams of the seed, so editing the
/// occluder schedule never perturbs the ground-truth track.
template <typename T>
Sequence<T> generate_sequence(const SceneConfig& cfg, const Rng& seed_rng) {
  cfg.validate();
  Rng traj = seed_rng.child(1);
  Rng tex = seed_rng.child(2);
  Rng occ = seed_rng.child(3);

  const double canvas = static_cast<double>(cfg.canvas);
  std::uint64_t bg_seed = tex.next_u64();
  std::uint64_t tg_seed = tex.next_u64();
  std::uint64_t oc_seed = tex.next_u64();

  detail::TargetState t;
  t.w = traj.uniform(cfg.target_min, cfg.target_max);
  t.h = traj.uniform(cfg.target_min, cfg.target_max);
  t.cx = traj.uniform(t.w / 2 + 1.0, canvas - t.w / 2 - 1.0);
  t.cy = traj.uniform(t.h / 2 + 1.0, canvas - t.h / 2 - 1.0);
  t.vx = traj.uniform(-cfg.vel_max, cfg.vel_max);
  t.vy = traj.uniform(-cfg.vel_max, cfg.vel_max);

  Sequence<T> seq;
  seq.frames.reserve(cfg.length);
  for (std::size_t f = 0; f < cfg.length; ++f) {
    SceneFrame<T> frame;
    frame.image = Tensor<T>({3, cfg.canvas, cfg.canvas});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < cfg.canvas; ++y)
        for (std::size_t x = 0; x < cfg.canvas; ++x)
          frame.image(c, y, x) = static_cast<T>(
              0.20 + 0.35 * noise::value(bg_seed + c, x, y));

    double tx1 = t.cx - t.w / 2, ty1 = t.cy - t.h / 2;
    double tx2 = t.cx + t.w / 2, ty2 = t.cy + t.h / 2;
    long px1 = std::max<long>(0, static_cast<long>(std::floor(tx1)));
    long py1 = std::max<long>(0, static_cast<long>(std::floor(ty1)));
    long px2 = std::min<long>(cfg.canvas - 1, static_cast<long>(std::ceil(tx2)));
    long py2 = std::min<long>(cfg.canvas - 1, static_cast<long>(std::ceil(ty2)));
    for (std::size_t c = 0; c < 3; ++c)
      for (long y = py1; y <= py2; ++y)
        for (long x = px1; x <= px2; ++x) {
          double fx = x + 0.5, fy = y + 0.5;
          if (fx < tx1 || fx > tx2 || fy < ty1 || fy > ty2) continue;
          frame.image(c, y, x) = static_cast<T>(
              0.55 + 0.40 * noise::value(tg_seed + 7 * c, fx - tx1, fy - ty1));
        }

    double covered = 0.0;
    for (std::size_t k = 0; k < cfg.occluders.size(); ++k) {
      const OccluderSpec& oc = cfg.occluders[k];
      bool active = f >= oc.from && f < oc.to;
      // Fixed per-frame draws keep the occlusion stream aligned whether or
      // not the interval is active.
      double jx = occ.uniform(-0.1, 0.1) * t.w;
      double jy = occ.uniform(-0.1, 0.1) * t.h;
      if (!active || oc.coverage <= 0.0) continue;
      double ocx = t.cx + jx, ocy = t.cy + jy;
      if (oc.shape == OccluderSpec::Shape::kRect) {
        double s = std::sqrt(oc.coverage);
        double ow = t.w * s, oh = t.h * s;
        double ox1 = ocx - ow / 2, oy1 = ocy - oh / 2;
        double ox2 = ocx + ow / 2, oy2 = ocy + oh / 2;
        double iw = std::max(0.0, std::min(ox2, tx2) - std::max(ox1, tx1));
        double ih = std::max(0.0, std::min(oy2, ty2) - std::max(oy1, ty1));
        covered += iw * ih / (t.w * t.h);
        for (std::size_t c = 0; c < 3; ++c)
          for (long y = std::max<long>(0, std::floor(oy1));
               y <= std::min<long>(cfg.canvas - 1, std::ceil(oy2)); ++y)
            for (long x = std::max<long>(0, std::floor(ox1));
                 x <= std::min<long>(cfg.canvas - 1, std::ceil(ox2)); ++x) {
              double fx = x + 0.5, fy = y + 0.5;
              if (fx < ox1 || fx > ox2 || fy < oy1 || fy > oy2) continue;
              frame.image(c, y, x) = static_cast<T>(
                  0.35 + 0.50 * noise::value(oc_seed + 13 * (c + 1) + 31 * k,
                                             fx - ox1, fy - oy1));
            }
      } else {
        double r = detail::solve_disk_radius(oc.coverage, tx1, ty1, tx2, ty2, ocx, ocy);
        covered += disk_rect_area(ocx, ocy, r, tx1, ty1, tx2, ty2) / (t.w * t.h);
        long span = static_cast<long>(std::ceil(r)) + 1;
        for (std::size_t c = 0; c < 3; ++c)
          for (long y = std::max<long>(0, static_cast<long>(ocy) - span);
               y <= std::min<long>(cfg.canvas - 1, static_cast<long>(ocy) + span); ++y)
            for (long x = std::max<long>(0, static_cast<long>(ocx) - span);
                 x <= std::min<long>(cfg.canvas - 1, static_cast<long>(ocx) + span);
                 ++x) {
              double fx = x + 0.5, fy = y + 0.5;
              if ((fx - ocx) * (fx - ocx) + (fy - ocy) * (fy - ocy) > r * r) continue;
              frame.image(c, y, x) = static_cast<T>(
                  0.35 + 0.50 * noise::value(oc_seed + 13 * (c + 1) + 31 * k,
                                             fx - ocx + r, fy - ocy + r));
            }
      }
    }
    frame.occluded_fraction = std::min(1.0, covered);
    frame.gt = Box{t.cx / canvas, t.cy / canvas, t.w / canvas, t.h / canvas};
    seq.frames.push_back(std::move(frame));

    double nx = t.cx + t.vx + traj.normal(0.0, 0.5);
    double ny = t.cy + t.vy + traj.normal(0.0, 0.5);
    if (nx - t.w / 2 < 1.0 || nx + t.w / 2 > canvas - 1.0) {
      t.vx = -t.vx;
      nx = std::clamp(nx, t.w / 2 + 1.0, canvas - t.w / 2 - 1.0);
    }
    if (ny - t.h / 2 < 1.0 || ny + t.h / 2 > canvas - 1.0) {
      t.vy = -t.vy;
      ny = std::clamp(ny, t.h / 2 + 1.0, canvas - t.h / 2 - 1.0);
    }
    t.cx = nx;
    t.cy = ny;
  }
  return seq;
}

// ---- crops ------------------------------------------------------------------

struct SearchWindow {
  double cx = 0, cy = 0, side = 1;  // canvas pixels
};

/// Bilinear crop-resize with zero padding outside the source image.
template <typename T>
Tensor<T> crop_resize(const Tensor<T>& img, double cx, double cy, double side,
                      std::size_t out_hw) {
  std::size_t h = img.dim(1), w = img.dim(2);
  Tensor<T> out({3, out_hw, out_hw});
  double scale = side / static_cast<double>(out_hw);
  double x0 = cx - side / 2, y0 = cy - side / 2;
  auto sample = [&](std::size_t c, double sx, double sy) -> double {
    long ix = static_cast<long>(std::floor(sx)), iy = static_cast<long>(std::floor(sy));
    double fx = sx - ix, fy = sy - iy;
    auto at = [&](long xx, long yy) -> double {
      if (xx < 0 || yy < 0 || xx >= static_cast<long>(w) || yy >= static_cast<long>(h))
        return 0.0;
      return static_cast<double>(img(c, yy, xx));
    };
    double a = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * fx;
    double b = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * fx;
    return a + (b - a) * fy;
  };
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t oy = 0; oy < out_hw; ++oy)
      for (std::size_t ox = 0; ox < out_hw; ++ox) {
        double sx = x0 + (ox + 0.5) * scale - 0.5;
        double sy = y0 + (oy + 0.5) * scale - 0.5;
        out(c, oy, ox) = static_cast<T>(sample(c, sx, sy));
      }
  return out;
}

inline Box frame_to_window(const Box& frame_box, double canvas, const SearchWindow& win) {
  Box b;
  b.cx = (frame_box.cx * canvas - (win.cx - win.side / 2)) / win.side;
  b.cy = (frame_box.cy * canvas - (win.cy - win.side / 2)) / win.side;
  b.w = frame_box.w * canvas / win.side;
  b.h = frame_box.h * canvas / win.side;
  return b;
}

inline Box window_to_frame(const Box& win_box, double canvas, const SearchWindow& win) {
  Box b;
  b.cx = ((win.cx - win.side / 2) + win_box.cx * win.side) / canvas;
  b.cy = ((win.cy - win.side / 2) + win_box.cy * win.side) / canvas;
  b.w = win_box.w * win.side / canvas;
  b.h = win_box.h * win.side / canvas;
  return b;
}

template <typename T>
struct Sample {
  Tensor<T> z;  // [3, template_hw, template_hw]
  Tensor<T> x;  // [3, search_hw, search_hw]
  Box gt;       // in search-window coordinates
  double occluded_fraction = 0.0;
  SearchWindow window;
};

/// Template crop at 2x context around the target, search crop at 4x context
/// around a jittered center; the ground truth is re-expressed in
/// search-window coordinates.
template <typename T>
Sample<T> make_sample(const SceneFrame<T>& frame, const SceneConfig& cfg, Rng& rng) {
  const double canvas = static_cast<double>(cfg.canvas);
  double cx = frame.gt.cx * canvas, cy = frame.gt.cy * canvas;
  double w = frame.gt.w * canvas, h = frame.gt.h * canvas;
  require(w > 0 && h > 0, "make_sample: degenerate ground truth");
  double ctx = std::sqrt(w * h);

  Sample<T> s;
  s.z = crop_resize(frame.image, cx, cy, 2.0 * ctx, cfg.template_hw);
  double side = 4.0 * ctx;
  double jx = rng.uniform(-cfg.jitter, cfg.jitter) * side;
  double jy = rng.uniform(-cfg.jitter, cfg.jitter) * side;
  s.window = SearchWindow{cx + jx, cy + jy, side};
  s.x = crop_resize(frame.image, s.window.cx, s.window.cy, side, cfg.search_hw);
  s.gt = frame_to_window(frame.gt, canvas, s.window);
  s.gt.validate_normalized();
  s.occluded_fraction = frame.occluded_fraction;
  return s;
}

/// Fixed training pool: frames drawn from fresh short sequences.
template <typename T>
std::vector<Sample<T>> generate_pool(SceneConfig cfg, std::size_t count,
                                     std::uint64_t seed, bool with_occluders) {
  if (!with_occluders) cfg.occluders.clear();
  std::vector<Sample<T>> pool;
  pool.reserve(count);
  std::uint64_t k = 0;
  while (pool.size() < count) {
    Rng seq_rng(derive_seed(seed, 2 * k));
    Rng jit_rng(derive_seed(seed, 2 * k + 1));
    Sequence<T> seq = generate_sequence<T>(cfg, seq_rng);
    for (const SceneFrame<T>& f : seq.frames) {
      if (pool.size() >= count) break;
      pool.push_back(make_sample(f, cfg, jit_rng));
    }
    ++k;
  }
  return pool;
}

template <typename T>
std::vector<Sequence<T>> generate_benchmark(const SceneConfig& cfg, std::size_t n,
                                            std::uint64_t seed) {
  std::vector<Sequence<T>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(generate_sequence<T>(cfg, Rng(derive_seed(seed, 1000 + i))));
  return out;
}

}  // namespace ortlab
