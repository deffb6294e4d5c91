#include "ortlab/pointproc.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "support.hpp"

using namespace ortlab;
using testsupport::simpson_2d;

namespace {

IntensitySpec spec_with(std::uint64_t gamma, double rho = 1.0) {
  IntensitySpec s;
  s.gamma = gamma;
  s.rho = rho;
  return s;
}

const Domain kUnit{-1.0, 1.0, -1.0, 1.0};

// Independent quadrature of the cell masses: Simpson integration of the
// bell over each cell, normalized over the domain.
std::vector<double> simpson_cell_weights(const Domain& dom, const GridSpec& grid,
                                         double rho) {
  auto bell = [rho](double x, double y) {
    return std::exp(-((x / rho) * (x / rho) + (y / rho) * (y / rho)));
  };
  double total = simpson_2d(bell, dom.xmin, dom.xmax, dom.ymin, dom.ymax, 256);
  std::vector<double> w(grid.cells());
  for (std::size_t i = 0; i < grid.rows(); ++i)
    for (std::size_t j = 0; j < grid.cols(); ++j) {
      double x0 = dom.xmin + dom.width() * static_cast<double>(j) / grid.cols();
      double x1 = dom.xmin + dom.width() * static_cast<double>(j + 1) / grid.cols();
      double y0 = dom.ymin + dom.height() * static_cast<double>(i) / grid.rows();
      double y1 = dom.ymin + dom.height() * static_cast<double>(i + 1) / grid.rows();
      w[i * grid.cols() + j] = simpson_2d(bell, x0, x1, y0, y1, 64) / total;
    }
  return w;
}

}  // namespace

TEST(NormalizationConstant, MatchesSimpsonOracle) {
  IntensitySpec s = spec_with(1);
  double z = normalization_constant(s, kUnit);
  double oracle = simpson_2d(
      [](double x, double y) { return std::exp(-(x * x + y * y)); }, -1, 1, -1, 1, 512);
  EXPECT_NEAR(z, oracle, 1e-9);
  // Closed form: (sqrt(pi) * erf(1))^2 = 2.230985...
  EXPECT_NEAR(z, 2.2309851414041346, 1e-12);
}

TEST(NormalizationConstant, PointDomainIsZero) {
  IntensitySpec s = spec_with(1);
  Domain pt{0.3, 0.3, -0.2, -0.2};
  EXPECT_DOUBLE_EQ(normalization_constant(s, pt), 0.0);
}

TEST(NormalizationConstant, RhoScaling) {
  for (double rho : {0.5, 1.0, 2.0, 3.0}) {
    Domain dom{-rho, rho, -rho, rho};
    double z = normalization_constant(spec_with(1, rho), dom);
    double z1 = normalization_constant(spec_with(1, 1.0), kUnit);
    EXPECT_NEAR(z, rho * rho * z1, 1e-12 * std::max(1.0, rho * rho));
  }
}

TEST(IntensityAt, ZeroGammaEverywhereZero) {
  IntensitySpec s = spec_with(0);
  EXPECT_DOUBLE_EQ(intensity_at(0.0, 0.0, s, kUnit), 0.0);
  EXPECT_DOUBLE_EQ(intensity_at(0.7, -0.3, s, kUnit), 0.0);
}

TEST(IntensityAt, CenterIsGlobalMaximumAndSymmetric) {
  IntensitySpec s = spec_with(45);
  double center = intensity_at(0.0, 0.0, s, kUnit);
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    double x = rng.uniform(-1.0, 1.0), y = rng.uniform(-1.0, 1.0);
    EXPECT_LE(intensity_at(x, y, s, kUnit), center + 1e-15);
    EXPECT_NEAR(intensity_at(x, y, s, kUnit), intensity_at(-x, y, s, kUnit), 1e-12);
    EXPECT_NEAR(intensity_at(x, y, s, kUnit), intensity_at(x, -y, s, kUnit), 1e-12);
  }
}

TEST(SampleGamma, DegenerateAndMoments) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_gamma(0.0, rng), 0u);
  EXPECT_THROW(sample_gamma(-0.5, rng), ValidationError);

  const int n = 100000;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) xs[i] = static_cast<double>(sample_gamma(45.0, rng));
  double mean = testsupport::mean_of(xs);
  double var = testsupport::variance_of(xs);
  EXPECT_NEAR(mean, 45.0, 3.0 * std::sqrt(45.0 / n));
  EXPECT_NEAR(var, 45.0, 0.1 * 45.0);
}

TEST(SimulateHomogeneous, RateZeroAndSupport) {
  Rng rng(7);
  EXPECT_EQ(simulate_homogeneous(0.0, kUnit, rng).size(), 0u);
  PointPattern p = simulate_homogeneous(20.0, kUnit, rng);
  for (auto [x, y] : p.points) EXPECT_TRUE(kUnit.contains(x, y));
}

TEST(SimulateHomogeneous, CountCalibration) {
  Rng rng(11);
  const int sims = 20000;
  const double rate = 12.5;
  std::vector<double> counts(sims);
  for (int i = 0; i < sims; ++i)
    counts[i] = static_cast<double>(simulate_homogeneous(rate, kUnit, rng).size());
  double expect = rate * kUnit.area();
  double se = std::sqrt(testsupport::variance_of(counts) / sims);
  EXPECT_NEAR(testsupport::mean_of(counts), expect, 3.0 * se);
}

TEST(Thin, FlatIntensityKeepsAll) {
  // With a huge bandwidth the bell is flat to ~1e-18 over the domain, so
  // the acceptance ratio exceeds every canonical uniform draw.
  Rng rng(13);
  IntensitySpec s = spec_with(50, 1e9);
  double lam_max = intensity_at(0.0, 0.0, s, kUnit);
  PointPattern cand = simulate_homogeneous(lam_max, kUnit, rng);
  ASSERT_GT(cand.size(), 0u);
  PointPattern kept = thin(cand, s, kUnit, lam_max, rng);
  EXPECT_EQ(kept.size(), cand.size());
}

TEST(Thin, GammaZeroKeepsNone) {
  Rng rng(17);
  PointPattern cand = simulate_homogeneous(10.0, kUnit, rng);
  PointPattern kept = thin(cand, spec_with(0), kUnit, 1.0, rng);
  EXPECT_EQ(kept.size(), 0u);
}

TEST(Thin, LambdaMaxTooSmallRejected) {
  Rng rng(19);
  IntensitySpec s = spec_with(45);
  PointPattern cand;
  cand.points.emplace_back(0.0, 0.0);  // peak intensity point
  double lam_center = intensity_at(0.0, 0.0, s, kUnit);
  EXPECT_THROW(thin(cand, s, kUnit, 0.5 * lam_center, rng), ValidationError);
}

TEST(Thin, AcceptanceFractionCalibration) {
  Rng rng(23);
  IntensitySpec s = spec_with(45);
  double lam_max = intensity_at(0.0, 0.0, s, kUnit);
  const int sims = 20000;
  std::vector<double> fractions;
  fractions.reserve(sims);
  long total_cand = 0, total_kept = 0;
  for (int i = 0; i < sims; ++i) {
    PointPattern cand = simulate_homogeneous(lam_max, kUnit, rng);
    PointPattern kept = thin(cand, s, kUnit, lam_max, rng);
    total_cand += static_cast<long>(cand.size());
    total_kept += static_cast<long>(kept.size());
  }
  // Each candidate is kept with average probability Gamma/(lam_max*area).
  double p_expect = 45.0 / (lam_max * kUnit.area());
  double p_hat = static_cast<double>(total_kept) / static_cast<double>(total_cand);
  double se = std::sqrt(p_expect * (1.0 - p_expect) / static_cast<double>(total_cand));
  EXPECT_NEAR(p_hat, p_expect, 3.0 * se);
}

TEST(SimulateCox, VarsigmaZeroIsEmpty) {
  Rng rng(29);
  for (int i = 0; i < 20; ++i)
    EXPECT_EQ(simulate_cox(0.0, spec_with(0), kUnit, rng).size(), 0u);
}

TEST(SimulateCox, MeanCountEqualsVarsigma) {
  Rng rng(31);
  const int sims = 20000;
  const double varsigma = 11.0;
  std::vector<double> counts(sims);
  for (int i = 0; i < sims; ++i)
    counts[i] = static_cast<double>(simulate_cox(varsigma, spec_with(0), kUnit, rng).size());
  double se = std::sqrt(testsupport::variance_of(counts) / sims);
  EXPECT_NEAR(testsupport::mean_of(counts), varsigma, 3.0 * se);
}

TEST(SimulateCox, PerCellCountsMatchQuadrature) {
  GridSpec grid{32, 32, 8};  // 4x4 cells
  Rng rng(37);
  const int sims = 20000;
  const double varsigma = 11.0;
  std::vector<double> w = simpson_cell_weights(kUnit, grid, 1.0);
  std::vector<std::vector<double>> counts(grid.cells(),
                                          std::vector<double>(sims, 0.0));
  for (int s = 0; s < sims; ++s) {
    PointPattern p = simulate_cox(varsigma, spec_with(0), kUnit, rng);
    for (auto [x, y] : p.points) {
      std::size_t j = std::min<std::size_t>(3, static_cast<std::size_t>((x + 1.0) * 2));
      std::size_t i = std::min<std::size_t>(3, static_cast<std::size_t>((y + 1.0) * 2));
      counts[i * 4 + j][s] += 1.0;
    }
  }
  for (std::size_t c = 0; c < grid.cells(); ++c) {
    double mean = testsupport::mean_of(counts[c]);
    double se = std::sqrt(testsupport::variance_of(counts[c]) / sims);
    EXPECT_NEAR(mean, varsigma * w[c], 3.0 * se) << "cell " << c;
  }
}

TEST(SimulateCox, CenterCellBeatsCornerCell) {
  GridSpec grid{32, 32, 8};
  Rng rng(41);
  const int sims = 50000;
  const double varsigma = 11.0;
  Domain dom = domain_for(grid, CoordMode::kNormalized);
  long center_hits = 0, corner_hits = 0;
  for (int s = 0; s < sims; ++s) {
    PointPattern p = simulate_cox(varsigma, spec_with(0), dom, rng);
    MaskMatrix m = pattern_to_mask(p, grid, dom, MaskPolarity::kPointsKeep);
    center_hits += m.bit(1, 1) | m.bit(1, 2) | m.bit(2, 1) | m.bit(2, 2) ? 1 : 0;
    corner_hits += m.bit(0, 0) ? 1 : 0;
  }
  EXPECT_GT(center_hits, corner_hits);
}

TEST(ThinningExactness, MatchesDiscreteRejectionOracle) {
  // Continuous thinning sampler vs an independent discrete sampler whose
  // support is the cell midpoints and whose cell probabilities come from
  // the Simpson quadrature. Cell-occupancy frequencies must agree.
  GridSpec grid{32, 32, 8};  // 4x4
  Domain dom = domain_for(grid, CoordMode::kNormalized);
  const std::uint64_t gamma = 45;
  const int sims = 50000;
  std::vector<double> w = simpson_cell_weights(dom, grid, 1.0);
  double wmax = *std::max_element(w.begin(), w.end());

  Rng rng_cont(43);
  std::vector<long> occ_cont(grid.cells(), 0);
  IntensitySpec s = spec_with(gamma);
  for (int k = 0; k < sims; ++k) {
    PointPattern p = simulate_inhomogeneous(s, dom, rng_cont);
    MaskMatrix m = pattern_to_mask(p, grid, dom, MaskPolarity::kPointsKeep);
    for (std::size_t c = 0; c < grid.cells(); ++c) occ_cont[c] += m.bits[c];
  }

  Rng rng_disc(47);
  std::vector<long> occ_disc(grid.cells(), 0);
  for (int k = 0; k < sims; ++k) {
    std::uint64_t n = rng_disc.poisson(static_cast<double>(gamma));
    std::vector<std::uint8_t> hit(grid.cells(), 0);
    for (std::uint64_t i = 0; i < n; ++i) {
      for (;;) {
        std::size_t c = rng_disc.index(grid.cells());
        if (rng_disc.uniform() < w[c] / wmax) {
          hit[c] = 1;
          break;
        }
      }
    }
    for (std::size_t c = 0; c < grid.cells(); ++c) occ_disc[c] += hit[c];
  }

  for (std::size_t c = 0; c < grid.cells(); ++c) {
    double p1 = static_cast<double>(occ_cont[c]) / sims;
    double p2 = static_cast<double>(occ_disc[c]) / sims;
    double pooled = 0.5 * (p1 + p2);
    double se = std::sqrt(pooled * (1.0 - pooled) * 2.0 / sims);
    EXPECT_NEAR(p1, p2, 3.0 * se) << "cell " << c;
  }
}

TEST(PatternToMask, EmptyPatternPointsKeepMasksEverything) {
  GridSpec grid{16, 16, 8};
  MaskMatrix m = pattern_to_mask(PointPattern{}, grid, kUnit, MaskPolarity::kPointsKeep);
  EXPECT_EQ(m.keep_count(), 0u);
}

TEST(PatternToMask, SinglePointSetsExactlyThatCell) {
  GridSpec grid{32, 32, 8};
  PointPattern p;
  p.points.emplace_back(-0.75, -0.75);  // center of cell (0,0)
  MaskMatrix m = pattern_to_mask(p, grid, kUnit, MaskPolarity::kPointsKeep);
  EXPECT_EQ(m.bit(0, 0), 1);
  std::size_t set = 0;
  for (auto b : m.bits) set += b;
  EXPECT_EQ(set, 1u);
}

TEST(PatternToMask, DuplicatePointsCollapse) {
  GridSpec grid{32, 32, 8};
  PointPattern one, five;
  one.points.emplace_back(0.1, 0.1);
  for (int i = 0; i < 5; ++i) five.points.emplace_back(0.05 + 0.02 * i, 0.12);
  MaskMatrix a = pattern_to_mask(one, grid, kUnit, MaskPolarity::kPointsKeep);
  MaskMatrix b = pattern_to_mask(five, grid, kUnit, MaskPolarity::kPointsKeep);
  EXPECT_EQ(a.bits, b.bits);
}

TEST(PatternToMask, MaxEdgeSnapsToLastCell) {
  GridSpec grid{32, 32, 8};
  PointPattern p;
  p.points.emplace_back(1.0, 1.0);
  MaskMatrix m = pattern_to_mask(p, grid, kUnit, MaskPolarity::kPointsKeep);
  EXPECT_EQ(m.bit(3, 3), 1);
}

TEST(UniformTopK, ExtremesAndExactCount) {
  GridSpec grid{64, 64, 8};  // 8x8
  Rng rng(53);
  MaskMatrix all = uniform_topk(grid, 0.0, rng);
  EXPECT_EQ(all.keep_count(), 64u);
  MaskMatrix none = uniform_topk(grid, 1.0, rng);
  EXPECT_EQ(none.keep_count(), 0u);
  for (int i = 0; i < 200; ++i) {
    double sigma = rng.uniform();
    MaskMatrix m = uniform_topk(grid, sigma, rng);
    EXPECT_EQ(m.keep_count(), keep_count_for(sigma, 64));
  }
}

TEST(UniformTopK, PerCellKeepFrequency) {
  GridSpec grid{64, 64, 8};
  Rng rng(1);
  const int draws = 10000;
  std::vector<long> kept(64, 0);
  for (int d = 0; d < draws; ++d) {
    MaskMatrix m = uniform_topk(grid, 0.3, rng);
    ASSERT_EQ(m.keep_count(), 45u);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) kept[i * 8 + j] += m.keep(i, j) ? 1 : 0;
  }
  double p = 45.0 / 64.0;
  double se = std::sqrt(p * (1.0 - p) / draws);
  for (std::size_t c = 0; c < 64; ++c)
    EXPECT_NEAR(static_cast<double>(kept[c]) / draws, p, 3.0 * se) << "cell " << c;
}

TEST(ApplyMask, IdentityAndAnnihilator) {
  GridSpec grid{16, 16, 8};
  Rng rng(61);
  Tensor<float> img({3, 16, 16});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(rng.uniform());

  MaskMatrix keep_all;
  keep_all.rows = keep_all.cols = 2;
  keep_all.bits.assign(4, 1);
  Tensor<float> same = apply_mask(img, keep_all, grid);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(same[i], img[i]);

  MaskMatrix mask_all = keep_all;
  mask_all.bits.assign(4, 0);
  Tensor<float> zero = apply_mask(img, mask_all, grid);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(zero[i], 0.0f);
}

TEST(ApplyMask, SingleCellPixelOracleAndIdempotence) {
  GridSpec grid{16, 16, 8};
  Rng rng(67);
  Tensor<float> img({3, 16, 16});
  for (std::size_t i = 0; i < img.size(); ++i)
    img[i] = static_cast<float>(rng.uniform(0.1, 1.0));
  MaskMatrix m;
  m.rows = m.cols = 2;
  m.bits = {1, 0, 1, 1};  // cell (0,1) masked
  Tensor<float> out = apply_mask(img, m, grid);
  std::size_t zeroed = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        bool in_block = y < 8 && x >= 8;
        if (in_block) {
          EXPECT_EQ(out(c, y, x), 0.0f);
          ++zeroed;
        } else {
          EXPECT_EQ(out(c, y, x), img(c, y, x));
        }
      }
  EXPECT_EQ(zeroed, 3u * 8u * 8u);
  Tensor<float> twice = apply_mask(out, m, grid);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(twice[i], out[i]);
}

TEST(MaskerConfig, VarsigmaDerivation) {
  GridSpec grid{64, 64, 8};
  MaskerConfig cfg;
  cfg.sigma = 0.3;
  EXPECT_DOUBLE_EQ(varsigma_for(cfg, grid), 45.0);
  cfg.polarity = MaskPolarity::kPointsMask;
  EXPECT_DOUBLE_EQ(varsigma_for(cfg, grid), 19.0);
}

TEST(DrawMask, UniformSourceAndCoxSourceRun) {
  GridSpec grid{32, 32, 8};
  Rng rng(71);
  MaskerConfig cfg;
  cfg.source = MaskSource::kUniform;
  MaskMatrix u = uniform_topk(grid, cfg.sigma, rng);
  EXPECT_EQ(u.keep_count(), keep_count_for(cfg.sigma, grid.cells()));
  cfg.source = MaskSource::kCox;
  MaskMatrix c = draw_mask(cfg, grid, rng);
  EXPECT_EQ(c.rows, 4u);
  EXPECT_EQ(c.cols, 4u);
}
