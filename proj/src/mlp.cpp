#include "nhode/mlp.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nhode {

int MlpParams::parameter_count() const {
  int n = 0;
  for (size_t l = 0; l < weights.size(); ++l)
    n += static_cast<int>(weights[l].size() + biases[l].size());
  return n;
}

void MlpParams::validate() const {
  if (weights.size() != biases.size())
    throw std::invalid_argument("mlp: weight/bias layer count mismatch");
  for (size_t l = 0; l < weights.size(); ++l) {
    if (biases[l].size() != weights[l].rows())
      throw std::invalid_argument("mlp: bias dimension mismatch");
    if (l > 0 && weights[l].cols() != weights[l - 1].rows())
      throw std::invalid_argument("mlp: consecutive layer dimensions incompatible");
    if (!all_finite(weights[l]) || !all_finite(biases[l]))
      throw std::invalid_argument("mlp: non-finite parameter");
  }
}

MlpParams init_mlp(int input_dim, int hidden_width, int hidden_layers, int output_dim,
                   CounterRng& rng) {
  if (input_dim < 1 || output_dim < 1 || hidden_width < 1 || hidden_layers < 0)
    throw std::invalid_argument("mlp: bad architecture");
  MlpParams p;
  int in = input_dim;
  for (int l = 0; l < hidden_layers + 1; ++l) {
    int out = (l == hidden_layers) ? output_dim : hidden_width;
    Mat w(out, in);
    double bound = std::sqrt(6.0 / (in + out));
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = rng.uniform(-bound, bound);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vec::Zero(out));
    in = out;
  }
  return p;
}

Vec mlp_eval(const MlpParams& p, const Vec& z) {
  if (z.size() != p.input_dim()) throw std::invalid_argument("mlp: input dimension mismatch");
  Vec h = z;
  const int L = p.layer_count();
  for (int l = 0; l < L; ++l) {
    Vec a = p.weights[l] * h + p.biases[l];
    h = (l + 1 == L) ? a : a.array().tanh().matrix();
  }
  return h;
}

MlpNodeIds emit_mlp_params(Graph& g, const MlpParams& p) {
  MlpNodeIds ids;
  for (size_t l = 0; l < p.weights.size(); ++l) {
    ids.weights.push_back(g.input(p.weights[l]));
    ids.biases.push_back(g.input(p.biases[l]));
  }
  return ids;
}

int emit_mlp_forward(Graph& g, const MlpNodeIds& ids, int z) {
  const int L = static_cast<int>(ids.weights.size());
  int h = z;
  for (int l = 0; l < L; ++l) {
    int a = g.affine(ids.weights[l], h, ids.biases[l]);
    h = (l + 1 == L) ? a : g.tanh(a);
  }
  return h;
}

int emit_mlp_input_gradient(Graph& g, const MlpNodeIds& ids, const MlpParams& p, int z) {
  if (p.output_dim() != 1)
    throw std::invalid_argument("mlp: input gradient requires scalar output");
  const int L = p.layer_count();

  std::vector<int> hidden;  // tanh activations, innermost first
  int h = z;
  for (int l = 0; l + 1 < L; ++l) {
    int a = g.affine(ids.weights[l], h, ids.biases[l]);
    h = g.tanh(a);
    hidden.push_back(h);
  }

  // Backward chain through the layers, kept in the graph.
  int u = g.matvec_t(ids.weights[L - 1], g.constant(1.0));
  for (int l = L - 2; l >= 0; --l) {
    int ones = g.input(Mat::Ones(g.value(hidden[l]).rows(), 1));
    int d = g.sub(ones, g.square(hidden[l]));  // 1 - tanh^2
    u = g.matvec_t(ids.weights[l], g.mul(d, u));
  }
  return u;
}

Vec flatten(const MlpParams& p) {
  Vec v(p.parameter_count());
  int off = 0;
  for (size_t l = 0; l < p.weights.size(); ++l) {
    const Mat& w = p.weights[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) v[off++] = w(r, c);
    for (int i = 0; i < p.biases[l].size(); ++i) v[off++] = p.biases[l][i];
  }
  return v;
}

void unflatten(const Vec& v, MlpParams& p) {
  if (v.size() != p.parameter_count()) throw std::invalid_argument("mlp: flat size mismatch");
  int off = 0;
  for (size_t l = 0; l < p.weights.size(); ++l) {
    Mat& w = p.weights[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = v[off++];
    for (int i = 0; i < p.biases[l].size(); ++i) p.biases[l][i] = v[off++];
  }
}

Vec flatten_adjoints(const Graph& g, const MlpNodeIds& ids) {
  int n = 0;
  for (size_t l = 0; l < ids.weights.size(); ++l)
    n += static_cast<int>(g.value(ids.weights[l]).size() + g.value(ids.biases[l]).size());
  Vec v(n);
  int off = 0;
  for (size_t l = 0; l < ids.weights.size(); ++l) {
    const Mat& aw = g.adjoint(ids.weights[l]);
    for (int r = 0; r < aw.rows(); ++r)
      for (int c = 0; c < aw.cols(); ++c) v[off++] = aw(r, c);
    const Mat& ab = g.adjoint(ids.biases[l]);
    for (int i = 0; i < ab.rows(); ++i) v[off++] = ab(i, 0);
  }
  return v;
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("mlp container: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("mlp container: truncated payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

constexpr char kMagic[8] = {'N', 'H', 'O', 'D', 'E', '0', '0', '1'};

}  // namespace

void save_mlp(std::ostream& out, const MlpParams& p) {
  p.validate();
  out.write(kMagic, 8);
  write_u32(out, static_cast<std::uint32_t>(p.layer_count()));
  for (int l = 0; l < p.layer_count(); ++l) {
    write_u32(out, static_cast<std::uint32_t>(p.weights[l].cols()));
    write_u32(out, static_cast<std::uint32_t>(p.weights[l].rows()));
  }
  for (int l = 0; l < p.layer_count(); ++l) {
    const Mat& w = p.weights[l];
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) write_f64(out, w(r, c));
    for (int i = 0; i < p.biases[l].size(); ++i) write_f64(out, p.biases[l][i]);
  }
}

MlpParams load_mlp(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("mlp container: bad magic");
  std::uint32_t layers = read_u32(in);
  if (layers == 0 || layers > 1024) throw std::runtime_error("mlp container: bad layer count");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> dims(layers);
  for (auto& d : dims) {
    d.first = read_u32(in);   // in
    d.second = read_u32(in);  // out
  }
  MlpParams p;
  for (auto& d : dims) {
    Mat w(d.second, d.first);
    for (int r = 0; r < w.rows(); ++r)
      for (int c = 0; c < w.cols(); ++c) w(r, c) = read_f64(in);
    Vec b(d.second);
    for (int i = 0; i < b.size(); ++i) b[i] = read_f64(in);
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  p.validate();
  return p;
}

void save_mlp_file(const std::string& path, const MlpParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  save_mlp(out, p);
}

MlpParams load_mlp_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return load_mlp(in);
}

}  // namespace nhode
