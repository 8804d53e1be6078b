#include "nhode/graph.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace nhode {

bool all_finite(const Mat& m) { return m.allFinite(); }

int Graph::check_id(int id) const {
  if (id < 0 || id >= count_) throw std::invalid_argument("graph: bad node id");
  return id;
}

Node& Graph::emplace(OpKind op, int a, int b, int c) {
  if (count_ == static_cast<int>(nodes_.size())) nodes_.emplace_back();
  Node& n = nodes_[count_++];
  n.op = op;
  n.a = a;
  n.b = b;
  n.c = c;
  n.coeff = 1.0;
  return n;
}

int Graph::input(const Mat& v) {
  if (!all_finite(v)) throw std::invalid_argument("graph: non-finite input");
  Node& n = emplace(OpKind::Input, -1, -1, -1);
  n.value = v;
  return count_ - 1;
}

void Graph::set_input(int id, const Mat& v) {
  Node& n = nodes_[check_id(id)];
  if (n.op != OpKind::Input) throw std::invalid_argument("graph: not an input node");
  if (n.value.rows() != v.rows() || n.value.cols() != v.cols())
    throw std::invalid_argument("graph: input shape mismatch");
  if (!all_finite(v)) throw std::invalid_argument("graph: non-finite input");
  n.value = v;
}

// Builders must not hold references to parent values across emplace(): the
// node vector may reallocate. Shapes are checked first, values re-fetched
// through nodes_ afterwards.

int Graph::affine(int w, int x, int b) {
  if (value(x).cols() != 1 || value(b).cols() != 1 || value(w).cols() != value(x).rows() ||
      value(w).rows() != value(b).rows())
    throw std::invalid_argument("graph: affine shape mismatch");
  Node& n = emplace(OpKind::Affine, w, x, b);
  n.value.resize(nodes_[w].value.rows(), 1);
  n.value.noalias() = nodes_[w].value * nodes_[x].value;
  n.value += nodes_[b].value;
  return count_ - 1;
}

int Graph::matvec_t(int w, int x) {
  if (value(x).cols() != 1 || value(w).rows() != value(x).rows())
    throw std::invalid_argument("graph: matvec_t shape mismatch");
  Node& n = emplace(OpKind::MatVecT, w, x, -1);
  n.value.resize(nodes_[w].value.cols(), 1);
  n.value.noalias() = nodes_[w].value.transpose() * nodes_[x].value;
  return count_ - 1;
}

int Graph::tanh(int x) {
  check_id(x);
  Node& n = emplace(OpKind::Tanh, x, -1, -1);
  n.value = nodes_[x].value.array().tanh();
  return count_ - 1;
}

int Graph::mul(int a, int b) {
  if (value(b).size() != 1 &&
      (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()))
    throw std::invalid_argument("graph: mul shape mismatch");
  Node& n = emplace(OpKind::Mul, a, b, -1);
  if (nodes_[b].value.size() == 1)
    n.value = nodes_[a].value * nodes_[b].value(0, 0);
  else
    n.value = nodes_[a].value.cwiseProduct(nodes_[b].value);
  return count_ - 1;
}

int Graph::add(int a, int b) {
  if (value(b).size() != 1 &&
      (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()))
    throw std::invalid_argument("graph: add shape mismatch");
  Node& n = emplace(OpKind::Add, a, b, -1);
  if (nodes_[b].value.size() == 1)
    n.value = nodes_[a].value.array() + nodes_[b].value(0, 0);
  else
    n.value = nodes_[a].value + nodes_[b].value;
  return count_ - 1;
}

int Graph::sub(int a, int b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    throw std::invalid_argument("graph: sub shape mismatch");
  Node& n = emplace(OpKind::Sub, a, b, -1);
  n.value = nodes_[a].value - nodes_[b].value;
  return count_ - 1;
}

int Graph::negate(int x) {
  check_id(x);
  Node& n = emplace(OpKind::Negate, x, -1, -1);
  n.value = -nodes_[x].value;
  return count_ - 1;
}

int Graph::scale(int x, double c) {
  check_id(x);
  Node& n = emplace(OpKind::Scale, x, -1, -1);
  n.coeff = c;
  n.value = c * nodes_[x].value;
  return count_ - 1;
}

int Graph::square(int x) {
  check_id(x);
  Node& n = emplace(OpKind::Square, x, -1, -1);
  n.value = nodes_[x].value.array().square();
  return count_ - 1;
}

int Graph::sum(int x) {
  check_id(x);
  Node& n = emplace(OpKind::Sum, x, -1, -1);
  n.value.resize(1, 1);
  n.value(0, 0) = nodes_[x].value.sum();
  return count_ - 1;
}

int Graph::concat(int a, int b) {
  if (value(a).cols() != 1 || value(b).cols() != 1)
    throw std::invalid_argument("graph: concat expects column vectors");
  Node& n = emplace(OpKind::Concat, a, b, -1);
  n.value.resize(nodes_[a].value.rows() + nodes_[b].value.rows(), 1);
  n.value.topRows(nodes_[a].value.rows()) = nodes_[a].value;
  n.value.bottomRows(nodes_[b].value.rows()) = nodes_[b].value;
  return count_ - 1;
}

int Graph::gather(int x, std::vector<int> idx) {
  if (value(x).cols() != 1) throw std::invalid_argument("graph: gather expects a column vector");
  for (int i : idx)
    if (i < 0 || i >= value(x).rows())
      throw std::invalid_argument("graph: gather index out of range");
  Node& n = emplace(OpKind::Gather, x, -1, -1);
  n.indices = std::move(idx);
  n.value.resize(static_cast<int>(n.indices.size()), 1);
  for (size_t i = 0; i < n.indices.size(); ++i)
    n.value(static_cast<int>(i), 0) = nodes_[x].value(n.indices[i], 0);
  return count_ - 1;
}

namespace {

inline int pair_count(int particles) { return particles * (particles - 1) / 2; }

// d(q)_m = |q_j - q_k| for pairs ordered lexicographically, j < k.
void eval_pairdist(const Mat& q, int np, int d, Mat& out) {
  out.resize(pair_count(np), 1);
  int m = 0;
  for (int j = 0; j < np; ++j)
    for (int k = j + 1; k < np; ++k, ++m)
      out(m, 0) = (q.block(j * d, 0, d, 1) - q.block(k * d, 0, d, 1)).norm();
}

// value = sum_m g_m * d r_m / d q  (the vector-Jacobian product of the
// distance map), written blockwise: +g_m u_m at particle j, -g_m u_m at k.
void eval_pairdist_vjp(const Mat& q, const Mat& g, int np, int d, Mat& out) {
  out.setZero(np * d, 1);
  int m = 0;
  for (int j = 0; j < np; ++j)
    for (int k = j + 1; k < np; ++k, ++m) {
      Eigen::VectorXd w = q.block(j * d, 0, d, 1) - q.block(k * d, 0, d, 1);
      double r = w.norm();
      if (r < kDistanceFloor) continue;  // direction undefined; treated as zero
      w *= g(m, 0) / r;
      out.block(j * d, 0, d, 1) += w;
      out.block(k * d, 0, d, 1) -= w;
    }
}

}  // namespace

int Graph::pairwise_dist(int q, int particles, int dim) {
  if (value(q).cols() != 1 || value(q).rows() != particles * dim)
    throw std::invalid_argument("graph: pairwise_dist shape mismatch");
  Node& n = emplace(OpKind::PairDist, q, -1, -1);
  n.particles = particles;
  n.dim = dim;
  eval_pairdist(nodes_[q].value, particles, dim, n.value);
  return count_ - 1;
}

int Graph::pairwise_dist_vjp(int q, int g, int particles, int dim) {
  if (value(q).cols() != 1 || value(q).rows() != particles * dim || value(g).cols() != 1 ||
      value(g).rows() != pair_count(particles))
    throw std::invalid_argument("graph: pairwise_dist_vjp shape mismatch");
  Node& n = emplace(OpKind::PairDistVjp, q, g, -1);
  n.particles = particles;
  n.dim = dim;
  eval_pairdist_vjp(nodes_[q].value, nodes_[g].value, particles, dim, n.value);
  return count_ - 1;
}

void Graph::eval(Node& n) {
  switch (n.op) {
    case OpKind::Input:
      break;
    case OpKind::Affine:
      n.value.noalias() = nodes_[n.a].value * nodes_[n.b].value;
      n.value += nodes_[n.c].value;
      break;
    case OpKind::MatVecT:
      n.value.noalias() = nodes_[n.a].value.transpose() * nodes_[n.b].value;
      break;
    case OpKind::Tanh:
      n.value = nodes_[n.a].value.array().tanh();
      break;
    case OpKind::Mul:
      if (nodes_[n.b].value.size() == 1)
        n.value = nodes_[n.a].value * nodes_[n.b].value(0, 0);
      else
        n.value = nodes_[n.a].value.cwiseProduct(nodes_[n.b].value);
      break;
    case OpKind::Add:
      if (nodes_[n.b].value.size() == 1)
        n.value = nodes_[n.a].value.array() + nodes_[n.b].value(0, 0);
      else
        n.value = nodes_[n.a].value + nodes_[n.b].value;
      break;
    case OpKind::Sub:
      n.value = nodes_[n.a].value - nodes_[n.b].value;
      break;
    case OpKind::Negate:
      n.value = -nodes_[n.a].value;
      break;
    case OpKind::Scale:
      n.value = n.coeff * nodes_[n.a].value;
      break;
    case OpKind::Square:
      n.value = nodes_[n.a].value.array().square();
      break;
    case OpKind::Sum:
      n.value(0, 0) = nodes_[n.a].value.sum();
      break;
    case OpKind::Concat:
      n.value.topRows(nodes_[n.a].value.rows()) = nodes_[n.a].value;
      n.value.bottomRows(nodes_[n.b].value.rows()) = nodes_[n.b].value;
      break;
    case OpKind::Gather:
      for (size_t i = 0; i < n.indices.size(); ++i)
        n.value(static_cast<int>(i), 0) = nodes_[n.a].value(n.indices[i], 0);
      break;
    case OpKind::PairDist:
      eval_pairdist(nodes_[n.a].value, n.particles, n.dim, n.value);
      break;
    case OpKind::PairDistVjp:
      eval_pairdist_vjp(nodes_[n.a].value, nodes_[n.b].value, n.particles, n.dim, n.value);
      break;
  }
}

void Graph::forward() {
  for (int i = 0; i < count_; ++i)
    if (nodes_[i].op != OpKind::Input) eval(nodes_[i]);
}

void Graph::backward_scalar(int root, double seed) {
  backward(root, Mat::Constant(1, 1, seed));
}

void Graph::backward(int root, const Mat& seed) {
  check_id(root);
  if (count_ == 0) throw std::runtime_error("graph: backward on empty graph");
  const Mat& rv = nodes_[root].value;
  if (seed.rows() != rv.rows() || seed.cols() != rv.cols())
    throw std::invalid_argument("graph: seed shape mismatch");

  for (int i = 0; i < count_; ++i) {
    Node& n = nodes_[i];
    n.adjoint.resize(n.value.rows(), n.value.cols());
    n.adjoint.setZero();
  }
  nodes_[root].adjoint = seed;

  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    const Mat& s = n.adjoint;
    switch (n.op) {
      case OpKind::Input:
        break;
      case OpKind::Affine:
        nodes_[n.a].adjoint.noalias() += s * nodes_[n.b].value.transpose();
        nodes_[n.b].adjoint.noalias() += nodes_[n.a].value.transpose() * s;
        nodes_[n.c].adjoint += s;
        break;
      case OpKind::MatVecT:
        nodes_[n.a].adjoint.noalias() += nodes_[n.b].value * s.transpose();
        nodes_[n.b].adjoint.noalias() += nodes_[n.a].value * s;
        break;
      case OpKind::Tanh:
        nodes_[n.a].adjoint.array() += s.array() * (1.0 - n.value.array().square());
        break;
      case OpKind::Mul:
        if (nodes_[n.b].value.size() == 1) {
          nodes_[n.a].adjoint += s * nodes_[n.b].value(0, 0);
          nodes_[n.b].adjoint(0, 0) += (s.array() * nodes_[n.a].value.array()).sum();
        } else {
          nodes_[n.a].adjoint.array() += s.array() * nodes_[n.b].value.array();
          nodes_[n.b].adjoint.array() += s.array() * nodes_[n.a].value.array();
        }
        break;
      case OpKind::Add:
        nodes_[n.a].adjoint += s;
        if (nodes_[n.b].value.size() == 1)
          nodes_[n.b].adjoint(0, 0) += s.sum();
        else
          nodes_[n.b].adjoint += s;
        break;
      case OpKind::Sub:
        nodes_[n.a].adjoint += s;
        nodes_[n.b].adjoint -= s;
        break;
      case OpKind::Negate:
        nodes_[n.a].adjoint -= s;
        break;
      case OpKind::Scale:
        nodes_[n.a].adjoint += n.coeff * s;
        break;
      case OpKind::Square:
        nodes_[n.a].adjoint.array() += 2.0 * s.array() * nodes_[n.a].value.array();
        break;
      case OpKind::Sum:
        nodes_[n.a].adjoint.array() += s(0, 0);
        break;
      case OpKind::Concat:
        nodes_[n.a].adjoint += s.topRows(nodes_[n.a].value.rows());
        nodes_[n.b].adjoint += s.bottomRows(nodes_[n.b].value.rows());
        break;
      case OpKind::Gather:
        for (size_t k = 0; k < n.indices.size(); ++k)
          nodes_[n.a].adjoint(n.indices[k], 0) += s(static_cast<int>(k), 0);
        break;
      case OpKind::PairDist: {
        const Mat& q = nodes_[n.a].value;
        Mat& aq = nodes_[n.a].adjoint;
        const int d = n.dim;
        int m = 0;
        for (int j = 0; j < n.particles; ++j)
          for (int k = j + 1; k < n.particles; ++k, ++m) {
            double r = n.value(m, 0);
            if (r < kDistanceFloor) continue;
            Eigen::VectorXd u = (q.block(j * d, 0, d, 1) - q.block(k * d, 0, d, 1)) * (s(m, 0) / r);
            aq.block(j * d, 0, d, 1) += u;
            aq.block(k * d, 0, d, 1) -= u;
          }
        break;
      }
      case OpKind::PairDistVjp: {
        // value = sum_m g_m u_m (+j, -k); u_m = w_m / r_m.
        // d u / d w = (I - u u^T) / r, so with t = s_j - s_k:
        //   adj_g_m += u . t,  adj_w = g_m (I - u u^T) t / r  (+j, -k).
        const Mat& q = nodes_[n.a].value;
        const Mat& g = nodes_[n.b].value;
        Mat& aq = nodes_[n.a].adjoint;
        Mat& ag = nodes_[n.b].adjoint;
        const int d = n.dim;
        int m = 0;
        for (int j = 0; j < n.particles; ++j)
          for (int k = j + 1; k < n.particles; ++k, ++m) {
            Eigen::VectorXd w = q.block(j * d, 0, d, 1) - q.block(k * d, 0, d, 1);
            double r = w.norm();
            if (r < kDistanceFloor) continue;
            Eigen::VectorXd u = w / r;
            Eigen::VectorXd t = s.block(j * d, 0, d, 1) - s.block(k * d, 0, d, 1);
            ag(m, 0) += u.dot(t);
            Eigen::VectorXd aw = (g(m, 0) / r) * (t - u * u.dot(t));
            aq.block(j * d, 0, d, 1) += aw;
            aq.block(k * d, 0, d, 1) -= aw;
          }
        break;
      }
    }
  }
}

Vec finite_difference_gradient(const std::function<double(const Vec&)>& f,
                               const Vec& x, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_difference_gradient: step must be > 0");
  Vec g(x.size());
  Vec xp = x;
  for (int i = 0; i < x.size(); ++i) {
    double xi = x[i];
    xp[i] = xi + step;
    double fp = f(xp);
    xp[i] = xi - step;
    double fm = f(xp);
    xp[i] = xi;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace nhode
