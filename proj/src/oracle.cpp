#include "dunst/oracle.hpp"

#include <cmath>
#include <stdexcept>

#include "dunst/math.hpp"

namespace dunst {

DiscreteJoint::DiscreteJoint(int nx_, int ny_, int nz_)
    : nx(nx_), ny(ny_), nz(nz_), table(static_cast<size_t>(nx_) * ny_ * nz_, 0.0) {
  if (nx < 1 || ny < 1 || nz < 1 || nx > 16 || ny > 16 || nz > 16)
    throw std::invalid_argument("DiscreteJoint: support sizes must be in 1..16");
}

double& DiscreteJoint::at(int x, int y, int z) {
  return table[static_cast<size_t>((x * ny + y)) * nz + z];
}
double DiscreteJoint::at(int x, int y, int z) const {
  return table[static_cast<size_t>((x * ny + y)) * nz + z];
}

void DiscreteJoint::validate(double tol) const {
  if (nx > 16 || ny > 16 || nz > 16)
    throw std::invalid_argument("DiscreteJoint: support too large");
  double mass = 0.0;
  for (double v : table) {
    if (v < 0.0) throw std::invalid_argument("DiscreteJoint: negative entry");
    mass += v;
  }
  if (std::abs(mass - 1.0) > tol)
    throw std::invalid_argument("DiscreteJoint: mass differs from 1");
}

DiscreteJoint DiscreteJoint::uniform(int nx, int ny, int nz) {
  DiscreteJoint j(nx, ny, nz);
  double v = 1.0 / j.cells();
  for (double& c : j.table) c = v;
  return j;
}

DiscreteJoint DiscreteJoint::random(int nx, int ny, int nz, Rng& rng) {
  DiscreteJoint j(nx, ny, nz);
  Eigen::VectorXd s = random_simplex(j.cells(), rng);
  for (int i = 0; i < j.cells(); ++i) j.table[i] = s[i];
  return j;
}

TabularModel TabularModel::random(int nx, int ny, int nz, Rng& rng) {
  TabularModel m;
  m.nx = nx;
  m.ny = ny;
  m.nz = nz;
  auto fill = [&](Eigen::MatrixXd& t, int rows, int cols) {
    t.resize(rows, cols);
    for (int r = 0; r < rows; ++r) t.row(r) = random_simplex(cols, rng).transpose();
  };
  fill(m.x_given_zy, nz * ny, nx);
  fill(m.y_given_zx, nz * nx, ny);
  fill(m.z_given_y, ny, nz);
  fill(m.z_given_x, nx, nz);
  fill(m.post_z_xy, nx * ny, nz);
  return m;
}

void TabularModel::validate(double tol) const {
  auto check = [&](const Eigen::MatrixXd& t, int rows, int cols, const char* name) {
    if (t.rows() != rows || t.cols() != cols)
      throw std::invalid_argument(std::string("TabularModel: bad shape for ") + name);
    for (int r = 0; r < rows; ++r) {
      if (t.row(r).minCoeff() < 0.0)
        throw std::invalid_argument(std::string("TabularModel: negative entry in ") + name);
      if (std::abs(t.row(r).sum() - 1.0) > tol)
        throw std::invalid_argument(std::string("TabularModel: non-simplex row in ") + name);
    }
  };
  check(x_given_zy, nz * ny, nx, "x_given_zy");
  check(y_given_zx, nz * nx, ny, "y_given_zx");
  check(z_given_y, ny, nz, "z_given_y");
  check(z_given_x, nx, nz, "z_given_x");
  check(post_z_xy, nx * ny, nz, "post_z_xy");
}

void TabularModel::set_posterior_to_true_gen() {
  for (int x = 0; x < nx; ++x)
    for (int y = 0; y < ny; ++y) {
      Eigen::VectorXd joint(nz);
      for (int z = 0; z < nz; ++z)
        joint[z] = x_given_zy(z * ny + y, x) * z_given_y(y, z);
      post_z_xy.row(x * ny + y) = (joint / joint.sum()).transpose();
    }
}

void TabularModel::set_posterior_to_true_cls() {
  for (int x = 0; x < nx; ++x)
    for (int y = 0; y < ny; ++y) {
      Eigen::VectorXd joint(nz);
      for (int z = 0; z < nz; ++z)
        joint[z] = y_given_zx(z * nx + x, y) * z_given_x(x, z);
      post_z_xy.row(x * ny + y) = (joint / joint.sum()).transpose();
    }
}

namespace {

// Shared enumeration core for both bounds. For each (x, y):
//   elbo = sum_z post(z) log like(z)  -  KL[post(z) || prior(z)]
//   log_marginal = log sum_z like(z) prior(z)
// where like/prior are the direction-specific factors.
ElboResult elbo_core(const TabularModel& m, bool generation) {
  ElboResult r;
  r.elbo.resize(m.nx, m.ny);
  r.log_marginal.resize(m.nx, m.ny);
  r.gap.resize(m.nx, m.ny);
  r.posterior_kl.resize(m.nx, m.ny);
  for (int x = 0; x < m.nx; ++x)
    for (int y = 0; y < m.ny; ++y) {
      Eigen::VectorXd like(m.nz), prior(m.nz);
      for (int z = 0; z < m.nz; ++z) {
        if (generation) {
          like[z] = m.x_given_zy(z * m.ny + y, x);
          prior[z] = m.z_given_y(y, z);
        } else {
          like[z] = m.y_given_zx(z * m.nx + x, y);
          prior[z] = m.z_given_x(x, z);
        }
      }
      Eigen::VectorXd post = m.post_z_xy.row(x * m.ny + y).transpose();
      double recon = 0.0;
      for (int z = 0; z < m.nz; ++z)
        if (post[z] > 0.0) recon += post[z] * std::log(like[z]);
      double elbo = recon - discrete_kl(post, prior);
      Eigen::VectorXd joint = like.cwiseProduct(prior);
      double marginal = joint.sum();
      double lm = std::log(marginal);
      r.elbo(x, y) = elbo;
      r.log_marginal(x, y) = lm;
      r.gap(x, y) = lm - elbo;
      r.posterior_kl(x, y) = discrete_kl(post, joint / marginal);
    }
  return r;
}

void require_same_support(const DiscreteJoint& a, const DiscreteJoint& b) {
  if (a.nx != b.nx || a.ny != b.ny || a.nz != b.nz)
    throw std::invalid_argument("oracle: joint supports differ");
}

}  // namespace

ElboResult elbo_gap_gen(const TabularModel& m) { return elbo_core(m, true); }
ElboResult elbo_gap_cls(const TabularModel& m) { return elbo_core(m, false); }

Theorem1Result theorem1_identity(const DiscreteJoint& p, const DiscreteJoint& q_prime,
                                 const DiscreteJoint& u, const DiscreteJoint& q,
                                 double alpha, double beta, double gamma) {
  require_same_support(p, q_prime);
  require_same_support(p, u);
  require_same_support(p, q);
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
    throw std::invalid_argument("theorem1_identity: negative mixture weight");
  const int n = p.cells();
  Eigen::VectorXd pv(n), qv(n), mix(n);
  for (int i = 0; i < n; ++i) {
    pv[i] = p.table[i];
    qv[i] = q.table[i];
    mix[i] = alpha * p.table[i] + beta * q_prime.table[i] + gamma * u.table[i];
  }
  Theorem1Result r;
  for (int i = 0; i < n; ++i)
    if (pv[i] > 0.0) r.lhs += pv[i] * std::log(mix[i] / qv[i]);
  r.rhs = discrete_kl(pv, qv) - discrete_kl(pv, mix);
  r.residual = std::abs(r.lhs - r.rhs);
  return r;
}

StDecomposition st_objective_decomposition(const DiscreteJoint& p,
                                           const DiscreteJoint& q_prime,
                                           const DiscreteJoint& u,
                                           const DiscreteJoint& q) {
  require_same_support(p, q_prime);
  require_same_support(p, u);
  require_same_support(p, q);
  const int n = p.cells();
  StDecomposition d;
  double neg_entropies = 0.0;
  for (int i = 0; i < n; ++i) {
    double mass = p.table[i] + q_prime.table[i] + u.table[i];
    if (mass > 0.0) d.mixture_objective -= mass * std::log(q.table[i]);
    for (double v : {p.table[i], q_prime.table[i], u.table[i]})
      if (v > 0.0) neg_entropies += v * std::log(v);
  }
  Eigen::VectorXd qv = Eigen::Map<const Eigen::VectorXd>(q.table.data(), n);
  auto as_vec = [n](const DiscreteJoint& j) {
    return Eigen::Map<const Eigen::VectorXd>(j.table.data(), n);
  };
  d.kl_sum = discrete_kl(as_vec(p), qv) + discrete_kl(as_vec(q_prime), qv) +
             discrete_kl(as_vec(u), qv);
  d.constant = -neg_entropies;  // mixture_objective = kl_sum + constant
  return d;
}

DiscreteJoint mixture_minimizer(const DiscreteJoint& p, const DiscreteJoint& q_prime,
                                const DiscreteJoint& u) {
  require_same_support(p, q_prime);
  require_same_support(p, u);
  DiscreteJoint out(p.nx, p.ny, p.nz);
  for (int i = 0; i < p.cells(); ++i)
    out.table[i] = (p.table[i] + q_prime.table[i] + u.table[i]) / 3.0;
  return out;
}

double tabular_log_marginal_gen(const TabularModel& m, int x, int y) {
  double marginal = 0.0;
  for (int z = 0; z < m.nz; ++z)
    marginal += m.x_given_zy(z * m.ny + y, x) * m.z_given_y(y, z);
  return std::log(marginal);
}

double tabular_iw_bound(const TabularModel& m, int x, int y, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("tabular_iw_bound: k must be >= 1");
  Eigen::VectorXd post = m.post_z_xy.row(x * m.ny + y).transpose();
  std::vector<double> probs(post.data(), post.data() + post.size());
  Eigen::VectorXd logw(k);
  for (int i = 0; i < k; ++i) {
    int z = rng.categorical(probs);
    logw[i] = std::log(m.x_given_zy(z * m.ny + y, x)) +
              std::log(m.z_given_y(y, z)) - std::log(post[z]);
  }
  return logsumexp(logw) - std::log(static_cast<double>(k));
}

}  // namespace dunst
