#pragma once

#include "nhode/graph.hpp"
#include "nhode/rng.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace nhode {

// Fully connected network, tanh on hidden layers, identity output.
struct MlpParams {
  std::vector<Mat> weights;  // out x in
  std::vector<Vec> biases;

  int layer_count() const { return static_cast<int>(weights.size()); }
  int input_dim() const { return weights.empty() ? 0 : static_cast<int>(weights.front().cols()); }
  int output_dim() const { return weights.empty() ? 0 : static_cast<int>(weights.back().rows()); }
  int parameter_count() const;
  void validate() const;  // consecutive dims compatible, values finite
};

// hidden_layers of width `hidden_width` between input and output.
// Weights uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
MlpParams init_mlp(int input_dim, int hidden_width, int hidden_layers, int output_dim,
                   CounterRng& rng);

// Plain (graph-free) evaluation.
Vec mlp_eval(const MlpParams& p, const Vec& z);

// Ids of the parameter Input nodes of one MLP inside a graph.
struct MlpNodeIds {
  std::vector<int> weights;
  std::vector<int> biases;
};

MlpNodeIds emit_mlp_params(Graph& g, const MlpParams& p);

// Emits the forward pass; returns the output node.
int emit_mlp_forward(Graph& g, const MlpNodeIds& ids, int z);

// Emits grad_z MLP(z) for a scalar-output MLP as explicit graph ops: the
// layer-Jacobian chain W1^T D1 ... W_L^T with D_i = diag(1 - tanh^2(a_i)).
// Because the result is itself a graph value, a later backward() pass yields
// d(grad_z MLP)/d(params), which is what rollout training needs.
int emit_mlp_input_gradient(Graph& g, const MlpNodeIds& ids, const MlpParams& p, int z);

// Flat views used by the optimizer.
Vec flatten(const MlpParams& p);
void unflatten(const Vec& v, MlpParams& p);
Vec flatten_adjoints(const Graph& g, const MlpNodeIds& ids);

// Binary container: magic "NHODE001", u32 layer count, then per layer
// u32 in_dim, u32 out_dim; payload per layer is the row-major f64 weight
// matrix followed by the bias vector. All integers and floats little-endian.
void save_mlp(std::ostream& out, const MlpParams& p);
MlpParams load_mlp(std::istream& in);
void save_mlp_file(const std::string& path, const MlpParams& p);
MlpParams load_mlp_file(const std::string& path);

}  // namespace nhode
