#include <catch2/catch_amalgamated.hpp>

#include "detsum/space.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

using namespace detsum;

namespace {

ModelConfig line_config(int pts, double h) {
  ModelConfig cfg;
  cfg.dim = 1;
  cfg.pointsPerDim = pts;
  cfg.spacing = h;
  return cfg;
}

struct Model {
  ParticleSpace sp;
  OneBodyOp op;
  PoissonOp pop;
};

Model build(const ModelConfig& cfg) {
  Model m;
  build_grid_model(cfg, m.sp, m.op, m.pop);
  return m;
}

}  // namespace

TEST_CASE("grid kinetic matrix reproduces the second-difference stencil") {
  Model m = build(line_config(3, 1.0));
  Matrix want(3, 3);
  want << 1.0, -0.5, 0.0, -0.5, 1.0, -0.5, 0.0, -0.5, 1.0;
  CHECK((m.op.Tmat - want).norm() <= 1e-14);
  CHECK(m.op.Vdiag.norm() == 0.0);
  CHECK(m.sp.Ms == 3);
  CHECK(m.sp.Mtot == 6);
}

TEST_CASE("kinetic matrix is symmetric positive semidefinite") {
  for (int dim = 1; dim <= 3; ++dim) {
    ModelConfig cfg;
    cfg.dim = dim;
    cfg.pointsPerDim = (dim == 3) ? 4 : 7;
    cfg.spacing = 0.3;
    Model m = build(cfg);
    CHECK((m.op.Tmat - m.op.Tmat.transpose()).norm() <= 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> es(m.op.Tmat);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10 * m.op.Tmat.norm());
  }
}

TEST_CASE("nuclear potential evaluates the softened kernel") {
  ModelConfig cfg = line_config(5, 0.5);
  cfg.softening = 0.1;
  Nucleus nuc;
  nuc.charge = 1.0;
  nuc.position = {1.0, 0.0, 0.0};  // exactly the third grid point
  cfg.nuclei.push_back(nuc);
  Model m = build(cfg);
  CHECK(std::abs(m.op.Vdiag[2] - (-10.0)) <= 1e-12);
  // Off-center value follows the same formula.
  CHECK(std::abs(m.op.Vdiag[0] - (-1.0 / std::sqrt(1.0 + 0.01))) <= 1e-12);
}

TEST_CASE("poisson kernel matrix is symmetric with positive entries") {
  ModelConfig cfg;
  cfg.dim = 2;
  cfg.pointsPerDim = 5;
  cfg.spacing = 0.7;
  cfg.origin = {-1.0, 0.5, 0.0};
  Model m = build(cfg);
  CHECK((m.pop.Pmat - m.pop.Pmat.transpose()).norm() == 0.0);
  CHECK(m.pop.Pmat.minCoeff() > 0.0);
  CHECK(std::isfinite(m.pop.Pmat.diagonal().maxCoeff()));
  // Diagonal is the coincidence limit 1/a.
  CHECK(std::abs(m.pop.Pmat(3, 3) - 1.0 / cfg.softening) <= 1e-12);
}

TEST_CASE("integration combines quadrature and spin sum") {
  Model m = build(line_config(4, 0.5));
  SECTION("constant function") {
    CHECK(std::abs(integrate(m.sp, Orbital::Ones(8)) - 4.0) <= 1e-14);
  }
  SECTION("random function against a direct loop") {
    auto rng = make_rng(7);
    Orbital f = random_vector(rng, m.sp.Mtot);
    double direct = 0.0;
    for (int s = 0; s < 2; ++s)
      for (int j = 0; j < m.sp.Ms; ++j) direct += m.sp.weights[j] * f[m.sp.gamma(j, s)];
    CHECK(std::abs(integrate(m.sp, f) - direct) <= 1e-14);
  }
  SECTION("inner product is positive") {
    auto rng = make_rng(8);
    Orbital f = random_vector(rng, m.sp.Mtot);
    CHECK(inner(m.sp, f, f) >= 0.0);
  }
  SECTION("length mismatch is rejected") {
    CHECK_THROWS_AS(integrate(m.sp, Orbital::Ones(7)), std::invalid_argument);
  }
}

TEST_CASE("one-body application acts per spin channel") {
  Model m = build(line_config(9, 0.4));
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.op.Tmat);
  const Vector evec = es.eigenvectors().col(2);
  const double eval = es.eigenvalues()[2];
  Orbital f = Orbital::Zero(m.sp.Mtot);
  f.segment(m.sp.Ms, m.sp.Ms) = evec;  // spin-down channel only
  Orbital got = apply_TV(m.sp, m.op, f);
  CHECK((got.segment(m.sp.Ms, m.sp.Ms) - eval * evec).norm() <= 1e-10);
  CHECK(got.segment(0, m.sp.Ms).norm() <= 1e-14);
}

TEST_CASE("poisson application sums the density over spins") {
  ModelConfig cfg = line_config(6, 0.8);
  Model m = build(cfg);
  auto rng = make_rng(21);
  Vector spatial = random_vector(rng, m.sp.Ms);
  Orbital up = Orbital::Zero(m.sp.Mtot);
  up.segment(0, m.sp.Ms) = spatial;
  Orbital down = Orbital::Zero(m.sp.Mtot);
  down.segment(m.sp.Ms, m.sp.Ms) = spatial;
  CHECK((apply_WP(m.sp, m.pop, up) - apply_WP(m.sp, m.pop, down)).norm() <= 1e-14);

  SECTION("self-adjoint under the composite inner product") {
    Orbital f = random_vector(rng, m.sp.Mtot);
    Orbital g = random_vector(rng, m.sp.Mtot);
    const double lhs = inner(m.sp, f, broadcast(m.sp, apply_WP(m.sp, m.pop, g)));
    const double rhs = inner(m.sp, broadcast(m.sp, apply_WP(m.sp, m.pop, f)), g);
    CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, std::abs(lhs)));
  }
  SECTION("spatial multiply matches broadcast then pointwise product") {
    Orbital f = random_vector(rng, m.sp.Mtot);
    CHECK((mul_spatial(m.sp, spatial, f) - broadcast(m.sp, spatial).cwiseProduct(f)).norm() <=
          1e-14);
  }
}

TEST_CASE("delta vectors are quadrature-normalized point evaluations") {
  Model m = build(line_config(5, 0.3));
  auto rng = make_rng(3);
  Orbital f = random_vector(rng, m.sp.Mtot);
  for (int g = 0; g < m.sp.Mtot; ++g) {
    Orbital d = delta_vector(m.sp, g);
    CHECK(std::abs(integrate(m.sp, d.cwiseProduct(f)) - f[g]) <= 1e-12);
    CHECK(std::abs(inner(m.sp, d, d) - 1.0 / m.sp.weights[m.sp.spatial_of(g)]) <= 1e-12);
  }
  SECTION("weighted sum of all deltas is the constant one") {
    Orbital acc = Orbital::Zero(m.sp.Mtot);
    for (int g = 0; g < m.sp.Mtot; ++g)
      acc += m.sp.weights[m.sp.spatial_of(g)] * delta_vector(m.sp, g);
    CHECK((acc - Orbital::Ones(m.sp.Mtot)).norm() <= 1e-12);
  }
  SECTION("out-of-range index is rejected") {
    CHECK_THROWS_AS(delta_vector(m.sp, m.sp.Mtot), std::invalid_argument);
  }
}

TEST_CASE("invalid geometry is rejected") {
  ModelConfig bad = line_config(1, 1.0);
  ParticleSpace sp;
  OneBodyOp op;
  PoissonOp pop;
  CHECK_THROWS_AS(build_grid_model(bad, sp, op, pop), std::invalid_argument);
  bad = line_config(4, -1.0);
  CHECK_THROWS_AS(build_grid_model(bad, sp, op, pop), std::invalid_argument);
  bad = line_config(4, 1.0);
  bad.boundary = "periodic";
  CHECK_THROWS_AS(build_grid_model(bad, sp, op, pop), std::invalid_argument);
}
