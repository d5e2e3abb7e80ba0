#pragma once

// Discretized single-particle space: a uniform grid crossed with two spin
// levels, plus the kinetic/potential and Poisson-kernel operators acting on
// it. Functions over the composite index gamma = (grid point, spin) are
// stored spin-major: gamma = s*Ms + j.

#include "detsum/core.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace detsum {

struct Nucleus {
  double charge = 1.0;
  std::array<double, 3> position{0.0, 0.0, 0.0};  // trailing entries unused below dim
};

struct ModelConfig {
  int dim = 1;
  int pointsPerDim = 2;
  double spacing = 1.0;
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  std::vector<Nucleus> nuclei;
  double softening = 0.2;
  std::string boundary = "dirichlet";
};

struct ParticleSpace {
  int dim = 1;
  std::vector<std::array<double, 3>> points;  // Ms spatial coordinates
  Vector weights;                             // Ms positive quadrature weights
  int Ms = 0;
  int Mtot = 0;  // 2*Ms, two spin levels

  int gamma(int j, int spin) const { return spin * Ms + j; }
  int spatial_of(int g) const { return g % Ms; }
  int spin_of(int g) const { return g / Ms; }
};

struct OneBodyOp {
  Matrix Tmat;   // symmetric kinetic matrix, one spin channel
  Vector Vdiag;  // nuclear potential sampled on the grid
};

struct PoissonOp {
  Matrix Pmat;  // regularized kernel values P(j, j'), symmetric positive
};

namespace detail {

inline double soft_inv_dist(const std::array<double, 3>& a, const std::array<double, 3>& b,
                            int dim, double soft) {
  double d2 = 0.0;
  for (int k = 0; k < dim; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
  return 1.0 / std::sqrt(d2 + soft * soft);
}

}  // namespace detail

// Uniform grid with weight h^d, second-order central-difference Laplacian
// with zero boundary values, softened nuclear and electron-electron kernels.
inline void build_grid_model(const ModelConfig& cfg, ParticleSpace& sp, OneBodyOp& op,
                             PoissonOp& pop) {
  require(cfg.dim >= 1 && cfg.dim <= 3, "model: dim must be 1, 2 or 3");
  require(cfg.pointsPerDim >= 2, "model: need at least 2 points per dimension");
  require(cfg.spacing > 0.0, "model: spacing must be positive");
  require(cfg.softening > 0.0, "model: softening must be positive");
  require(cfg.boundary == "dirichlet", "model: unsupported boundary condition");
  for (const Nucleus& nuc : cfg.nuclei)
    require(nuc.charge > 0.0, "model: nuclear charge must be positive");

  const int n = cfg.pointsPerDim;
  const double h = cfg.spacing;
  int ms = 1;
  for (int k = 0; k < cfg.dim; ++k) ms *= n;

  sp.dim = cfg.dim;
  sp.Ms = ms;
  sp.Mtot = 2 * ms;
  sp.points.resize(ms);
  for (int j = 0; j < ms; ++j) {
    int rest = j;
    std::array<double, 3> r{0.0, 0.0, 0.0};
    for (int k = cfg.dim - 1; k >= 0; --k) {
      r[k] = cfg.origin[k] + (rest % n) * h;
      rest /= n;
    }
    sp.points[j] = r;
  }
  sp.weights = Vector::Constant(ms, std::pow(h, cfg.dim));

  op.Tmat = Matrix::Zero(ms, ms);
  const double stencil = 0.5 / (h * h);
  for (int j = 0; j < ms; ++j) {
    op.Tmat(j, j) = 2.0 * stencil * cfg.dim;
    // Neighbors along each axis; the grid index varies fastest in the last
    // coordinate. Out-of-range neighbors are the Dirichlet zero boundary.
    int stride = 1;
    for (int k = cfg.dim - 1; k >= 0; --k) {
      const int coord = (j / stride) % n;
      if (coord > 0) op.Tmat(j, j - stride) = -stencil;
      if (coord < n - 1) op.Tmat(j, j + stride) = -stencil;
      stride *= n;
    }
  }

  op.Vdiag = Vector::Zero(ms);
  for (int j = 0; j < ms; ++j)
    for (const Nucleus& nuc : cfg.nuclei)
      op.Vdiag[j] -=
          nuc.charge * detail::soft_inv_dist(sp.points[j], nuc.position, cfg.dim, cfg.softening);

  pop.Pmat.resize(ms, ms);
  for (int j = 0; j < ms; ++j)
    for (int jp = j; jp < ms; ++jp) {
      const double val = detail::soft_inv_dist(sp.points[j], sp.points[jp], cfg.dim, cfg.softening);
      pop.Pmat(j, jp) = val;
      pop.Pmat(jp, j) = val;
    }
}

// Integral over the composite space: spatial quadrature plus spin sum.
inline double integrate(const ParticleSpace& sp, const Orbital& f) {
  require(static_cast<int>(f.size()) == sp.Mtot, "integrate: orbital length mismatch");
  double acc = 0.0;
  for (int s = 0; s < 2; ++s) acc += sp.weights.dot(f.segment(s * sp.Ms, sp.Ms));
  return acc;
}

inline double inner(const ParticleSpace& sp, const Orbital& f, const Orbital& g) {
  require(f.size() == g.size(), "inner: length mismatch");
  return integrate(sp, f.cwiseProduct(g));
}

// (T + V) f, acting identically on each spin channel. An empty Tmat means
// the potential-only operator (used where the kinetic part is handled by the
// Green's function).
inline Orbital apply_TV(const ParticleSpace& sp, const OneBodyOp& op, const Orbital& f) {
  require(static_cast<int>(f.size()) == sp.Mtot, "apply_TV: orbital length mismatch");
  Orbital out(sp.Mtot);
  for (int s = 0; s < 2; ++s) {
    auto seg = f.segment(s * sp.Ms, sp.Ms);
    if (op.Tmat.size() == 0)
      out.segment(s * sp.Ms, sp.Ms) = op.Vdiag.cwiseProduct(seg);
    else
      out.segment(s * sp.Ms, sp.Ms) = op.Tmat * seg + op.Vdiag.cwiseProduct(seg);
  }
  return out;
}

// Poisson-kernel convolution of the spin-summed density of f. The result
// depends on r only (length Ms); broadcast() lifts it back to gamma space.
inline Vector apply_WP(const ParticleSpace& sp, const PoissonOp& pop, const Orbital& f) {
  require(static_cast<int>(f.size()) == sp.Mtot, "apply_WP: orbital length mismatch");
  Vector dens = sp.weights.cwiseProduct(f.segment(0, sp.Ms) + f.segment(sp.Ms, sp.Ms));
  return pop.Pmat * dens;
}

inline Orbital broadcast(const ParticleSpace& sp, const Vector& spatial) {
  require(static_cast<int>(spatial.size()) == sp.Ms, "broadcast: spatial length mismatch");
  Orbital out(sp.Mtot);
  out.segment(0, sp.Ms) = spatial;
  out.segment(sp.Ms, sp.Ms) = spatial;
  return out;
}

// Pointwise product of a spatial (spin-independent) function with an orbital.
inline Orbital mul_spatial(const ParticleSpace& sp, const Vector& spatial, const Orbital& f) {
  require(static_cast<int>(spatial.size()) == sp.Ms && static_cast<int>(f.size()) == sp.Mtot,
          "mul_spatial: length mismatch");
  Orbital out(sp.Mtot);
  for (int s = 0; s < 2; ++s)
    out.segment(s * sp.Ms, sp.Ms) = spatial.cwiseProduct(f.segment(s * sp.Ms, sp.Ms));
  return out;
}

// Quadrature-normalized point mass: integrate(delta * f) = f(gamma).
inline Orbital delta_vector(const ParticleSpace& sp, int gamma) {
  require(gamma >= 0 && gamma < sp.Mtot, "delta_vector: index out of range");
  Orbital out = Orbital::Zero(sp.Mtot);
  out[gamma] = 1.0 / sp.weights[sp.spatial_of(gamma)];
  return out;
}

}  // namespace detsum
