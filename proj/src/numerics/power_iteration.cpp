#include "lipcert/numerics/power_iteration.hpp"

#include <cmath>
#include <memory>

#include "lipcert/errors.hpp"
#include "lipcert/kernels/kernels.hpp"
#include "lipcert/numerics/linalg.hpp"

namespace lipcert::numerics {

namespace {

const kernels::Ops& K() { return kernels::active(); }

// Modified Gram-Schmidt over the columns held in `cols`. A column that
// projects to (numerical) zero is replaced by a deterministic random draw and
// re-projected; if even that collapses the column is left zero, which simply
// wastes a block slot.
void orthonormalize_columns(std::vector<std::vector<double>>& cols,
                            std::uint64_t salt) {
  for (std::size_t j = 0; j < cols.size(); ++j) {
    const std::size_t n = cols[j].size();
    for (int attempt = 0; attempt < 2; ++attempt) {
      for (std::size_t i = 0; i < j; ++i) {
        const double p = K().dot(cols[i].data(), cols[j].data(), n);
        if (p != 0.0) K().axpy(-p, cols[i].data(), cols[j].data(), n);
      }
      const double nj = norm2(cols[j]);
      if (nj > 1e-12) {
        K().scal(1.0 / nj, cols[j].data(), n);
        break;
      }
      if (attempt == 1) {
        std::fill(cols[j].begin(), cols[j].end(), 0.0);
        break;
      }
      std::mt19937_64 rng(salt ^ (0x9e3779b97f4a7c15ull + j));
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (auto& x : cols[j]) x = gauss(rng);
    }
  }
}

// Cyclic Jacobi eigensolver for a small symmetric matrix (row-major m, b*b).
// Returns the largest eigenvalue; `vec` receives its eigenvector. Gap-free
// machine-precision convergence is the point: the block Gram matrix inherits
// the operator's clustered spectrum.
double jacobi_largest_eigenpair(std::vector<double> m, std::size_t b,
                                std::vector<double>& vec) {
  std::vector<double> q(b * b, 0.0);
  for (std::size_t i = 0; i < b; ++i) q[i * b + i] = 1.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < b; ++i) scale = std::max(scale, std::abs(m[i * b + i]));
  for (int sweep = 0; sweep < 50; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < b; ++p)
      for (std::size_t r = p + 1; r < b; ++r) off = std::max(off, std::abs(m[p * b + r]));
    if (off <= 1e-15 * std::max(scale, 1e-300)) break;
    for (std::size_t p = 0; p < b; ++p)
      for (std::size_t r = p + 1; r < b; ++r) {
        const double apq = m[p * b + r];
        if (apq == 0.0) continue;
        const double theta = (m[r * b + r] - m[p * b + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < b; ++k) {
          const double mkp = m[k * b + p], mkq = m[k * b + r];
          m[k * b + p] = c * mkp - s * mkq;
          m[k * b + r] = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < b; ++k) {
          const double mpk = m[p * b + k], mqk = m[r * b + k];
          m[p * b + k] = c * mpk - s * mqk;
          m[r * b + k] = s * mpk + c * mqk;
        }
        for (std::size_t k = 0; k < b; ++k) {
          const double qkp = q[k * b + p], qkq = q[k * b + r];
          q[k * b + p] = c * qkp - s * qkq;
          q[k * b + r] = s * qkp + c * qkq;
        }
      }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < b; ++i)
    if (m[i * b + i] > m[best * b + best]) best = i;
  vec.assign(b, 0.0);
  for (std::size_t k = 0; k < b; ++k) vec[k] = q[k * b + best];
  return m[best * b + best];
}

}  // namespace

LinearOperator LinearOperator::from_matrix(const Matrix& a) {
  auto m = std::make_shared<Matrix>(a);
  LinearOperator op;
  op.out_dim = m->rows();
  op.in_dim = m->cols();
  op.apply = [m](std::span<const double> in, std::span<double> out) {
    const std::size_t r = m->rows(), c = m->cols();
    for (std::size_t i = 0; i < r; ++i)
      out[i] = K().dot(m->data() + i * c, in.data(), c);
  };
  op.apply_transpose = [m](std::span<const double> in, std::span<double> out) {
    const std::size_t r = m->rows(), c = m->cols();
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < r; ++i)
      K().axpy(in[i], m->data() + i * c, out.data(), c);
  };
  return op;
}

void SpectralEstimate::random_init(std::size_t in_dim, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  v.assign(in_dim, 0.0);
  for (auto& x : v) x = gauss(rng);
  double n = norm2(v);
  if (n == 0.0) {  // cannot happen with a normal draw, but stay safe
    v.assign(in_dim, 0.0);
    if (in_dim > 0) v[0] = 1.0;
  } else {
    K().scal(1.0 / n, v.data(), in_dim);
  }
  sigma = 0.0;
  iterations_run = 0;
  converged = false;
}

SpectralEstimate& power_iteration(const LinearOperator& op,
                                  SpectralEstimate& state,
                                  std::size_t max_iters, double tol) {
  if (!op.apply || !op.apply_transpose)
    throw ConfigError("power_iteration: operator has no apply functions");
  if (op.in_dim == 0 || op.out_dim == 0)
    throw ShapeMismatch("power_iteration: zero-dimensional operator");
  if (state.fresh()) {
    // Deterministic start so repeated runs agree bit-for-bit.
    std::mt19937_64 rng(0x9e3779b97f4a7c15ull ^
                        (0x100000001b3ull * (op.in_dim + 1)));
    state.random_init(op.in_dim, rng);
  }
  if (state.v.size() != op.in_dim)
    throw ShapeMismatch("power_iteration: state dimension does not match operator");
  state.u.resize(op.out_dim, 0.0);

  std::vector<double> w(op.out_dim);
  state.converged = false;
  for (std::size_t it = 0; it < max_iters; ++it) {
    double prev = state.sigma;
    op.apply(state.v, w);
    double nw = norm2(w);
    if (nw == 0.0) {
      // v sits in the kernel; for the zero operator this is the answer.
      state.sigma = 0.0;
      state.iterations_run += 1;
      state.converged = true;
      return state;
    }
    state.u = w;
    K().scal(1.0 / nw, state.u.data(), op.out_dim);
    op.apply_transpose(state.u, state.v);
    double sigma = norm2(state.v);
    if (sigma > 0.0) K().scal(1.0 / sigma, state.v.data(), op.in_dim);
    state.sigma = sigma;
    state.iterations_run += 1;
    if (std::abs(sigma - prev) <= tol * sigma) {
      state.converged = true;
      return state;
    }
  }
  return state;
}

SpectralEstimate& power_iteration_block(const LinearOperator& op,
                                        SpectralEstimate& state,
                                        std::size_t block,
                                        std::size_t max_sweeps, double tol) {
  if (!op.apply || !op.apply_transpose)
    throw ConfigError("power_iteration_block: operator has no apply functions");
  if (op.in_dim == 0 || op.out_dim == 0)
    throw ShapeMismatch("power_iteration_block: zero-dimensional operator");
  if (block == 0) throw ConfigError("power_iteration_block: block size 0");
  block = std::min({block, op.in_dim, op.out_dim});

  if (state.fresh()) {
    std::mt19937_64 rng(0x9e3779b97f4a7c15ull ^
                        (0x100000001b3ull * (op.in_dim + 1)));
    state.random_init(op.in_dim, rng);
  }
  if (state.v.size() != op.in_dim)
    throw ShapeMismatch(
        "power_iteration_block: state dimension does not match operator");
  state.u.resize(op.out_dim, 0.0);

  // Column 0 carries the warm start; the rest are deterministic random.
  std::vector<std::vector<double>> basis(block);
  basis[0] = state.v;
  for (std::size_t j = 1; j < block; ++j) {
    basis[j].assign(op.in_dim, 0.0);
    std::mt19937_64 rng(0xd1b54a32d192ed03ull + 7919 * j);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& x : basis[j]) x = gauss(rng);
  }
  orthonormalize_columns(basis, 0);

  std::vector<std::vector<double>> image(block,
                                         std::vector<double>(op.out_dim));
  std::vector<double> gram(block * block), ritz;
  state.converged = false;
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    const double prev = state.sigma;
    for (std::size_t j = 0; j < block; ++j) op.apply(basis[j], image[j]);
    for (std::size_t i = 0; i < block; ++i)
      for (std::size_t j = i; j < block; ++j) {
        gram[i * block + j] = gram[j * block + i] =
            K().dot(image[i].data(), image[j].data(), op.out_dim);
      }
    const double lambda = jacobi_largest_eigenpair(gram, block, ritz);
    const double sigma = std::sqrt(std::max(lambda, 0.0));
    state.iterations_run += 1;
    if (sigma == 0.0) {
      // The whole block sits in the kernel; for the zero operator this is
      // the answer. Leave the unit start vector in place.
      state.sigma = 0.0;
      state.converged = true;
      return state;
    }
    state.sigma = sigma;
    const bool done = std::abs(sigma - prev) <= tol * sigma;
    if (done || sweep + 1 == max_sweeps) {
      // Leading Ritz pair of the current subspace: v = B*s, u = (A B)*s / sigma.
      std::fill(state.v.begin(), state.v.end(), 0.0);
      std::fill(state.u.begin(), state.u.end(), 0.0);
      for (std::size_t j = 0; j < block; ++j) {
        if (ritz[j] == 0.0) continue;
        K().axpy(ritz[j], basis[j].data(), state.v.data(), op.in_dim);
        K().axpy(ritz[j], image[j].data(), state.u.data(), op.out_dim);
      }
      const double nv = norm2(state.v);
      if (nv > 0.0) K().scal(1.0 / nv, state.v.data(), op.in_dim);
      const double nu = norm2(state.u);
      if (nu > 0.0) K().scal(1.0 / nu, state.u.data(), op.out_dim);
      state.converged = done;
      return state;
    }
    // B <- orth(A^T orth(A B)): orthonormalize the image first so the
    // back-projected columns do not all collapse onto the dominant direction.
    orthonormalize_columns(image, 2 * sweep + 1);
    for (std::size_t j = 0; j < block; ++j) op.apply_transpose(image[j], basis[j]);
    orthonormalize_columns(basis, 2 * sweep + 2);
  }
  return state;
}

double spectral_norm_oracle(const Matrix& a) {
  if (a.rank() != 2) throw ShapeMismatch("spectral_norm_oracle: need a matrix");
  const std::size_t m = a.rows(), n = a.cols();
  // Explicit Gram matrix G = A^T A, plain loops on purpose: this reference
  // path must not share code with the estimator it checks.
  std::vector<double> g(n * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < n; ++p) {
      double aip = a[i * n + p];
      if (aip == 0.0) continue;
      for (std::size_t q = 0; q < n; ++q) g[p * n + q] += aip * a[i * n + q];
    }

  double best = 0.0;
  std::vector<double> v(n), gv(n);
  for (int restart = 0; restart < 10; ++restart) {
    std::mt19937_64 rng(1000 + restart);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& x : v) x = gauss(rng);
    double nv = 0.0;
    for (double x : v) nv += x * x;
    nv = std::sqrt(nv);
    if (nv == 0.0) continue;
    for (auto& x : v) x /= nv;

    double lambda = 0.0;
    for (int it = 0; it < 10000; ++it) {
      for (std::size_t p = 0; p < n; ++p) {
        double s = 0.0;
        for (std::size_t q = 0; q < n; ++q) s += g[p * n + q] * v[q];
        gv[p] = s;
      }
      double rayleigh = 0.0;
      for (std::size_t p = 0; p < n; ++p) rayleigh += v[p] * gv[p];
      double ngv = 0.0;
      for (double x : gv) ngv += x * x;
      ngv = std::sqrt(ngv);
      if (ngv == 0.0) {
        lambda = 0.0;
        break;
      }
      for (std::size_t p = 0; p < n; ++p) v[p] = gv[p] / ngv;
      if (std::abs(rayleigh - lambda) <= 1e-15 * std::max(rayleigh, 1.0)) {
        lambda = rayleigh;
        break;
      }
      lambda = rayleigh;
    }
    best = std::max(best, lambda);
  }
  return std::sqrt(std::max(best, 0.0));
}

}  // namespace lipcert::numerics
