#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "ortlab/rng.hpp"
#include "ortlab/tensor.hpp"

namespace ortlab {

/// Template patch grid: the template image is split into block x block
/// pixel cells; masks operate on the rows x cols cell matrix.
struct GridSpec {
  std::size_t template_h = 32;
  std::size_t template_w = 32;
  std::size_t block = 8;

  std::size_t rows() const { return template_h / block; }
  std::size_t cols() const { return template_w / block; }
  std::size_t cells() const { return rows() * cols(); }

  void validate() const {
    require(block > 0 && template_h % block == 0 && template_w % block == 0,
            "grid: block must divide template dims");
    require(rows() >= 1 && cols() >= 1, "grid: needs at least one cell");
  }
};

struct Domain {
  double xmin = -1.0, xmax = 1.0, ymin = -1.0, ymax = 1.0;
  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  bool contains(double x, double y) const {
    return x >= xmin && x <= xmax && y >= ymin && y <= ymax;
  }
};

enum class CoordMode { kNormalized, kRaw };

/// Simulation window for a grid. Normalized mode maps the template onto
/// [-1,1]^2 so the intensity bell covers it meaningfully; raw mode uses
/// one unit square per cell with the origin at the center.
inline Domain domain_for(const GridSpec& grid, CoordMode mode) {
  if (mode == CoordMode::kNormalized) return Domain{-1.0, 1.0, -1.0, 1.0};
  double hw = static_cast<double>(grid.cols()) / 2.0;
  double hh = static_cast<double>(grid.rows()) / 2.0;
  return Domain{-hw, hw, -hh, hh};
}

/// Realized intensity: lambda(x,y) = gamma * exp(-((x/rho)^2+(y/rho)^2)) / Z
/// with Z chosen so the intensity integrates to gamma over the domain.
struct IntensitySpec {
  std::uint64_t gamma = 0;
  CoordMode coordinate_mode = CoordMode::kNormalized;
  double rho = 1.0;

  void validate() const { require(rho > 0.0, "intensity: rho must be positive"); }
};

struct PointPattern {
  std::vector<std::pair<double, double>> points;
  std::size_t size() const { return points.size(); }
};

enum class MaskPolarity { kPointsKeep, kPointsMask };
enum class MaskSource { kUniform, kCox };

/// Binary cell matrix. `bits` marks cells hit by the generator; polarity
/// says whether set bits are the kept cells or the masked cells.
struct MaskMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> bits;
  MaskPolarity polarity = MaskPolarity::kPointsKeep;
  MaskSource source = MaskSource::kCox;

  std::uint8_t bit(std::size_t i, std::size_t j) const { return bits[i * cols + j]; }
  bool keep(std::size_t i, std::size_t j) const {
    bool set = bit(i, j) != 0;
    return polarity == MaskPolarity::kPointsKeep ? set : !set;
  }
  std::size_t keep_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) n += keep(i, j) ? 1 : 0;
    return n;
  }
};

// ---- intensity ----------------------------------------------------------

inline double erf_integral_1d(double a, double b, double rho) {
  static constexpr double kHalfSqrtPi = 0.8862269254527580137;
  return rho * kHalfSqrtPi * (std::erf(b / rho) - std::erf(a / rho));
}

/// Integral of exp(-((x/rho)^2+(y/rho)^2)) over the domain, evaluated
/// separably through the error function (absolute error well under 1e-9).
inline double normalization_constant(const IntensitySpec& spec, const Domain& dom) {
  spec.validate();
  require(dom.xmax >= dom.xmin && dom.ymax >= dom.ymin, "domain: inverted bounds");
  return erf_integral_1d(dom.xmin, dom.xmax, spec.rho) *
         erf_integral_1d(dom.ymin, dom.ymax, spec.rho);
}

inline double intensity_at(double x, double y, const IntensitySpec& spec,
                           const Domain& dom) {
  if (spec.gamma == 0) return 0.0;
  double z = normalization_constant(spec, dom);
  require(z > 0.0, "intensity: zero-area domain");
  double u = x / spec.rho, v = y / spec.rho;
  return static_cast<double>(spec.gamma) * std::exp(-(u * u + v * v)) / z;
}

/// Expected point count per cell: Lambda(cell), computed separably. The
/// values sum to gamma over the full grid.
inline std::vector<double> cell_masses(const IntensitySpec& spec, const Domain& dom,
                                       const GridSpec& grid) {
  grid.validate();
  double z = normalization_constant(spec, dom);
  require(z > 0.0, "cell_masses: zero-area domain");
  std::size_t rows = grid.rows(), cols = grid.cols();
  std::vector<double> fx(cols), fy(rows);
  for (std::size_t j = 0; j < cols; ++j) {
    double a = dom.xmin + dom.width() * static_cast<double>(j) / cols;
    double b = dom.xmin + dom.width() * static_cast<double>(j + 1) / cols;
    fx[j] = erf_integral_1d(a, b, spec.rho);
  }
  for (std::size_t i = 0; i < rows; ++i) {
    double a = dom.ymin + dom.height() * static_cast<double>(i) / rows;
    double b = dom.ymin + dom.height() * static_cast<double>(i + 1) / rows;
    fy[i] = erf_integral_1d(a, b, spec.rho);
  }
  std::vector<double> mass(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      mass[i * cols + j] = static_cast<double>(spec.gamma) * fy[i] * fx[j] / z;
  return mass;
}

// ---- simulation ---------------------------------------------------------

/// Gamma ~ Poisson(varsigma), the random total mass of the Cox process.
inline std::uint64_t sample_gamma(double varsigma, Rng& rng) {
  require(varsigma >= 0.0, "sample_gamma: varsigma must be >= 0");
  return rng.poisson(varsigma);
}

/// Homogeneous Poisson process: Poisson(rate*area) points i.i.d. uniform.
inline PointPattern simulate_homogeneous(double rate, const Domain& dom, Rng& rng) {
  require(rate >= 0.0, "simulate_homogeneous: rate must be >= 0");
  PointPattern out;
  std::uint64_t n = rng.poisson(rate * dom.area());
  out.points.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    double x = rng.uniform(dom.xmin, dom.xmax);
    double y = rng.uniform(dom.ymin, dom.ymax);
    out.points.emplace_back(x, y);
  }
  return out;
}

/// Keep each candidate with probability lambda(p)/lambda_max.
inline PointPattern thin(const PointPattern& candidates, const IntensitySpec& spec,
                         const Domain& dom, double lambda_max, Rng& rng) {
  PointPattern out;
  if (candidates.points.empty()) return out;
  require(lambda_max > 0.0, "thin: lambda_max must be positive");
  double z = normalization_constant(spec, dom);
  require(z > 0.0, "thin: zero-area domain");
  double scale = static_cast<double>(spec.gamma) / z;
  for (auto [x, y] : candidates.points) {
    double u = x / spec.rho, v = y / spec.rho;
    double lam = scale * std::exp(-(u * u + v * v));
    require(lam <= lambda_max * (1.0 + 1e-12),
            "thin: lambda exceeds lambda_max at a candidate");
    if (rng.uniform() < lam / lambda_max) out.points.emplace_back(x, y);
  }
  return out;
}

/// Finite Cox process: draw the random mass Gamma ~ Poisson(varsigma), then
/// simulate the inhomogeneous process by thinning a homogeneous candidate
/// process run at the peak intensity (the center value).
inline PointPattern simulate_cox(double varsigma, const IntensitySpec& tmpl,
                                 const Domain& dom, Rng& rng) {
  IntensitySpec spec = tmpl;
  spec.gamma = sample_gamma(varsigma, rng);
  if (spec.gamma == 0) return PointPattern{};
  double lambda_max = intensity_at(0.0, 0.0, spec, dom);
  PointPattern candidates = simulate_homogeneous(lambda_max, dom, rng);
  return thin(candidates, spec, dom, lambda_max, rng);
}

/// Inhomogeneous process with gamma fixed (the Poisson draw of the Cox
/// hierarchy bypassed); used by calibration tests.
inline PointPattern simulate_inhomogeneous(const IntensitySpec& spec, const Domain& dom,
                                           Rng& rng) {
  if (spec.gamma == 0) return PointPattern{};
  double lambda_max = intensity_at(0.0, 0.0, spec, dom);
  PointPattern candidates = simulate_homogeneous(lambda_max, dom, rng);
  return thin(candidates, spec, dom, lambda_max, rng);
}

// ---- masks --------------------------------------------------------------

/// Bin a point pattern onto the cell grid: a cell's bit is set iff at
/// least one point lands in its half-open rectangle; points on the max
/// edge snap to the last cell.
inline MaskMatrix pattern_to_mask(const PointPattern& pattern, const GridSpec& grid,
                                  const Domain& dom, MaskPolarity polarity) {
  grid.validate();
  MaskMatrix m;
  m.rows = grid.rows();
  m.cols = grid.cols();
  m.bits.assign(m.rows * m.cols, 0);
  m.polarity = polarity;
  m.source = MaskSource::kCox;
  for (auto [x, y] : pattern.points) {
    require(dom.contains(x, y), "pattern_to_mask: point outside domain");
    auto cell = [](double v, double lo, double extent, std::size_t n) {
      auto idx = static_cast<long>(std::floor((v - lo) / extent * n));
      if (idx < 0) idx = 0;
      if (idx >= static_cast<long>(n)) idx = static_cast<long>(n) - 1;
      return static_cast<std::size_t>(idx);
    };
    std::size_t j = cell(x, dom.xmin, dom.width(), m.cols);
    std::size_t i = cell(y, dom.ymin, dom.height(), m.rows);
    m.bits[i * m.cols + j] = 1;
  }
  return m;
}

inline std::int64_t round_half_away(double x) { return std::llround(x); }

/// Keep count for a masking ratio over an n-cell grid.
inline std::size_t keep_count_for(double sigma, std::size_t cells) {
  require(sigma >= 0.0 && sigma <= 1.0, "sigma must be in [0,1]");
  return static_cast<std::size_t>(round_half_away((1.0 - sigma) * cells));
}

/// MAE-style baseline: i.i.d. uniform scores per cell, keep exactly the K
/// largest, K = round((1-sigma) * cells). Ties break toward the lower
/// row-major index.
inline MaskMatrix uniform_topk(const GridSpec& grid, double sigma, Rng& rng) {
  grid.validate();
  std::size_t n = grid.cells();
  std::size_t k = keep_count_for(sigma, n);
  std::vector<double> score(n);
  for (double& s : score) s = rng.uniform();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  MaskMatrix m;
  m.rows = grid.rows();
  m.cols = grid.cols();
  m.bits.assign(n, 0);
  m.polarity = MaskPolarity::kPointsKeep;
  m.source = MaskSource::kUniform;
  for (std::size_t i = 0; i < k; ++i) m.bits[order[i]] = 1;
  return m;
}

/// Zero every block x block pixel patch whose cell is masked, across all
/// channels; kept cells pass through untouched. Idempotent.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& image, const MaskMatrix& mask,
                     const GridSpec& grid) {
  grid.validate();
  require(image.rank() == 3 && image.dim(1) == grid.template_h &&
              image.dim(2) == grid.template_w,
          "apply_mask: image does not match grid");
  require(mask.rows == grid.rows() && mask.cols == grid.cols(),
          "apply_mask: mask does not match grid");
  Tensor<T> out = image;
  std::size_t c = image.dim(0), b = grid.block, w = grid.template_w;
  for (std::size_t i = 0; i < mask.rows; ++i)
    for (std::size_t j = 0; j < mask.cols; ++j) {
      if (mask.keep(i, j)) continue;
      for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t y = i * b; y < (i + 1) * b; ++y) {
          T* row = out.data() + (cc * grid.template_h + y) * w + j * b;
          for (std::size_t x = 0; x < b; ++x) row[x] = T(0);
        }
    }
  return out;
}

// ---- the full masking operators ----------------------------------------

/// Configuration of the random template-masking operator used in training.
struct MaskerConfig {
  double sigma = 0.3;
  MaskSource source = MaskSource::kCox;
  MaskPolarity polarity = MaskPolarity::kPointsKeep;
  CoordMode coordinate_mode = CoordMode::kNormalized;
  double rho = 1.0;

  void validate() const {
    require(sigma >= 0.0 && sigma <= 1.0, "mask: sigma must be in [0,1]");
    require(rho > 0.0, "mask: rho must be positive");
  }
};

/// Expected Cox mass for a masking ratio: with points-keep polarity the
/// points are the kept cells, so E[points] = round((1-sigma)*cells);
/// points-mask inverts the role.
inline double varsigma_for(const MaskerConfig& cfg, const GridSpec& grid) {
  std::size_t n = grid.cells();
  double frac = cfg.polarity == MaskPolarity::kPointsKeep ? 1.0 - cfg.sigma : cfg.sigma;
  return static_cast<double>(round_half_away(frac * n));
}

inline MaskMatrix draw_mask(const MaskerConfig& cfg, const GridSpec& grid, Rng& rng) {
  cfg.validate();
  grid.validate();
  if (cfg.source == MaskSource::kUniform) return uniform_topk(grid, cfg.sigma, rng);
  Domain dom = domain_for(grid, cfg.coordinate_mode);
  IntensitySpec spec;
  spec.coordinate_mode = cfg.coordinate_mode;
  spec.rho = cfg.rho;
  PointPattern pat = simulate_cox(varsigma_for(cfg, grid), spec, dom, rng);
  MaskMatrix m = pattern_to_mask(pat, grid, dom, cfg.polarity);
  return m;
}

}  // namespace ortlab
