#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace nhode {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Reverse-mode differentiation over an explicit graph of dense ops.
//
// Nodes are appended in topological order and evaluated eagerly, so value(id)
// is available as soon as a node is created. backward() runs a single reverse
// sweep and accumulates adjoints for every node, in particular for the Input
// nodes that hold network parameters.
//
// Second derivatives of an MLP never appear here: the input gradient of a
// tanh MLP is emitted as ordinary graph ops (see mlp.hpp), after which one
// reverse sweep differentiates it with respect to the parameters.

enum class OpKind : std::uint8_t {
  Input,     // bound tensor (data, parameters, constants)
  Affine,    // W*x + b
  MatVecT,   // W^T * x
  Tanh,      // elementwise
  Mul,       // elementwise product; second operand may be a scalar (1x1)
  Add,       // elementwise sum; second operand may be a scalar (1x1)
  Sub,       // a - b, same shape
  Negate,    // -x
  Scale,     // c * x, fixed coefficient
  Square,    // elementwise x^2
  Sum,       // scalar sum of all entries
  Concat,    // stack two column vectors
  Gather,    // subset of a column vector's entries
  PairDist,  // pairwise particle distances of a position vector
  PairDistVjp  // q-gradient of g . d(q); carries the distance-map Jacobian
};

struct Node {
  OpKind op = OpKind::Input;
  int a = -1, b = -1, c = -1;
  double coeff = 1.0;           // Scale only
  std::vector<int> indices;     // Gather only
  int particles = 0, dim = 0;   // PairDist / PairDistVjp only
  Mat value;
  Mat adjoint;
};

class Graph {
 public:
  // --- construction (forward values computed immediately) ---
  int input(const Mat& v);
  int constant(double v) { return input(Mat::Constant(1, 1, v)); }
  int affine(int w, int x, int b);
  int matvec_t(int w, int x);
  int tanh(int x);
  int mul(int a, int b);
  int add(int a, int b);
  int sub(int a, int b);
  int negate(int x);
  int scale(int x, double c);
  int square(int x);
  int sum(int x);
  int concat(int a, int b);
  int gather(int x, std::vector<int> idx);
  int pairwise_dist(int q, int particles, int dim);
  int pairwise_dist_vjp(int q, int g, int particles, int dim);

  // --- evaluation ---
  const Mat& value(int id) const { return nodes_[check_id(id)].value; }
  const Mat& adjoint(int id) const { return nodes_[check_id(id)].adjoint; }

  // Rebind an Input node; shapes must match. Values of dependent nodes are
  // stale until forward() is called.
  void set_input(int id, const Mat& v);

  // Recompute every non-input node in topological order.
  void forward();

  // Reverse sweep from `root`, seeding with `seed` (shape of root's value).
  void backward(int root, const Mat& seed);
  void backward_scalar(int root, double seed = 1.0);

  // Drop all nodes but keep buffers, so a graph instance can be rebuilt with
  // the same structure without reallocating.
  void reset() { count_ = 0; }

  int size() const { return count_; }

 private:
  int check_id(int id) const;
  Node& emplace(OpKind op, int a, int b, int c);
  void eval(Node& n);

  std::vector<Node> nodes_;
  int count_ = 0;
};

// Distances below this are treated as zero direction in distance gradients.
inline constexpr double kDistanceFloor = 1e-12;

// Central finite differences of a scalar function, the standard oracle used
// by the test suites against analytic and reverse-mode gradients.
Vec finite_difference_gradient(const std::function<double(const Vec&)>& f,
                               const Vec& x, double step);

bool all_finite(const Mat& m);

}  // namespace nhode
