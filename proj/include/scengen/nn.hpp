#pragma once

#include <fstream>

#include "json.hpp"
#include "scengen/tensor.hpp"

namespace scengen::nn {

using ad::Init;
using ad::Parameter;
using ad::ParameterStore;
using ad::Tape;
using ad::Tensor;

// y = x W + b with W [in x out]. Weight init is fan-in-scaled uniform unless
// overridden; zero_init layers start as the zero map (weights and bias).
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, int in, int out,
         Init w_init = Init::kFanIn, Init b_init = Init::kZeros,
         double b_value = 0.0)
      : w_(&ps.create(name + ".w", in, out, w_init)),
        b_(&ps.create(name + ".b", 1, out, b_init, b_value)) {}

  Tensor operator()(Tape& t, const Tensor& x) const {
    return ad::add_rowvec(ad::matmul(x, t.use(*w_)), t.use(*b_));
  }

  Parameter& weight() { return *w_; }
  Parameter& bias() { return *b_; }
  const Parameter& weight() const { return *w_; }
  const Parameter& bias() const { return *b_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
};

// Fully connected stack with SiLU between layers, none after the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& ps, const std::string& name, std::vector<int> dims,
      bool zero_init_last = false) {
    if (dims.size() < 2) throw ValidationError("Mlp: need at least two dims");
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = (i + 2 == dims.size());
      layers_.emplace_back(ps, name + ".l" + std::to_string(i), dims[i],
                           dims[i + 1],
                           last && zero_init_last ? Init::kZeros : Init::kFanIn);
    }
  }

  Tensor operator()(Tape& t, Tensor x) const {
    for (size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i](t, x);
      if (i + 1 < layers_.size()) x = ad::silu_t(x);
    }
    return x;
  }

 private:
  std::vector<Linear> layers_;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  static Adam over(ParameterStore& ps, double lr) {
    std::vector<Parameter*> ptrs;
    for (const auto& p : ps.all()) ptrs.push_back(p.get());
    return Adam(std::move(ptrs), lr);
  }

  // Subset selected by name prefix; keeps stage-wise freezing explicit.
  static Adam over_prefixes(ParameterStore& ps,
                            const std::vector<std::string>& prefixes,
                            double lr) {
    std::vector<Parameter*> ptrs;
    for (const auto& p : ps.all())
      for (const auto& pre : prefixes)
        if (p->name.rfind(pre, 0) == 0) {
          ptrs.push_back(p.get());
          break;
        }
    if (ptrs.empty()) throw ValidationError("Adam: no parameters matched");
    return Adam(std::move(ptrs), lr);
  }

  void zero_grads() {
    for (auto* p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (auto* p : params_) {
      for (size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        p->m[i] = b1_ * p->m[i] + (1.0 - b1_) * g;
        p->v[i] = b2_ * p->v[i] + (1.0 - b2_) * g * g;
        p->value[i] -= lr_ * (p->m[i] / c1) / (std::sqrt(p->v[i] / c2) + eps_);
      }
    }
  }

  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

// Interleaved sin/cos embedding of an integer step at geometrically spaced
// frequencies covering [1, 1/10000]. k=0 gives (0, 1, 0, 1, ...), and the
// norm is sqrt(width/2) for every k.
inline std::vector<double> sinusoidal_embed(int k, int width) {
  if (width <= 0 || width % 2 != 0)
    throw ValidationError("sinusoidal_embed: width must be positive and even");
  const int half = width / 2;
  std::vector<double> e(static_cast<size_t>(width));
  for (int i = 0; i < half; ++i) {
    const double exponent = half > 1 ? static_cast<double>(i) / (half - 1) : 0.0;
    const double omega = std::pow(10000.0, -exponent);
    e[static_cast<size_t>(2 * i)] = std::sin(omega * k);
    e[static_cast<size_t>(2 * i) + 1] = std::cos(omega * k);
  }
  return e;
}

// Feature modulation: out = h_s * (k_s * GroupNorm(f) + k_b), with h_s an
// affine projection of the scene encoding and (k_s, k_b) projections of the
// step embedding. Projections start at identity (weights zero, scale biases
// one) so a fresh block is exactly GroupNorm.
class AdaGn {
 public:
  AdaGn() = default;
  AdaGn(ParameterStore& ps, const std::string& name, int width, int h_dim,
        int t_dim, int groups = 8)
      : groups_(groups),
        hs_(ps, name + ".hs", h_dim, width, Init::kZeros, Init::kOnes),
        ks_(ps, name + ".ks", t_dim, width, Init::kZeros, Init::kOnes),
        kb_(ps, name + ".kb", t_dim, width, Init::kZeros, Init::kZeros) {
    if (width % groups != 0)
      throw ValidationError("AdaGn: width must be divisible by group count");
  }

  // f [n x width], h [n x h_dim], t_feat [n x t_dim] (already broadcast).
  Tensor operator()(Tape& t, const Tensor& f, const Tensor& h,
                    const Tensor& t_feat) const {
    Tensor gn = ad::group_norm(f, groups_, 1e-5);
    Tensor hs = hs_(t, h);
    Tensor ks = ks_(t, t_feat);
    Tensor kb = kb_(t, t_feat);
    return ad::mul(hs, ad::add(ad::mul(ks, gn), kb));
  }

 private:
  int groups_ = 8;
  Linear hs_, ks_, kb_;
};

// Message passing over the complete directed graph of agents. Each layer
// computes per-edge messages from (sender, receiver, optional role labels,
// optional edge features), mean-aggregates per receiver, and updates node
// states. A single agent receives a zero message, so its output depends only
// on its own features. Permutation equivariance follows from the shared
// per-edge/per-node maps.
class InteractionNet {
 public:
  InteractionNet() = default;
  InteractionNet(ParameterStore& ps, const std::string& name, int width,
                 int aux_dim = 0, bool use_roles = false, int layers = 2,
                 int edge_hidden = 64)
      : width_(width), aux_dim_(aux_dim), use_roles_(use_roles) {
    const int node_in = width + (use_roles ? 1 : 0);
    for (int l = 0; l < layers; ++l) {
      const std::string ln = name + ".layer" + std::to_string(l);
      layers_.push_back(Layer{
          Mlp(ps, ln + ".edge", {2 * node_in + aux_dim, edge_hidden, width}),
          Linear(ps, ln + ".node", node_in + width, width)});
    }
  }

  static void edge_lists(int n, std::vector<int>& src, std::vector<int>& dst) {
    src.clear();
    dst.clear();
    for (int d = 0; d < n; ++d)
      for (int s = 0; s < n; ++s)
        if (s != d) {
          src.push_back(s);
          dst.push_back(d);
        }
  }

  // nodes [n x width]; roles: one label per agent (required iff constructed
  // with use_roles); edge_aux [E x aux_dim] in edge_lists order (required iff
  // aux_dim > 0 and n > 1).
  Tensor operator()(Tape& t, Tensor nodes, const std::vector<double>& roles = {},
                    const Tensor& edge_aux = {}) const {
    const int n = nodes.rows();
    if (use_roles_ && roles.size() != static_cast<size_t>(n))
      throw ValidationError("InteractionNet: role labels missing");
    std::vector<int> src, dst;
    edge_lists(n, src, dst);
    if (aux_dim_ > 0 && n > 1) {
      if (!edge_aux.valid() || edge_aux.rows() != static_cast<int>(src.size()) ||
          edge_aux.cols() != aux_dim_)
        throw ValidationError("InteractionNet: edge feature shape mismatch");
    }
    Tensor role_col;
    if (use_roles_) role_col = t.constant(n, 1, roles);

    Tensor x = nodes;
    for (const auto& layer : layers_) {
      Tensor xr = use_roles_ ? ad::concat_cols(x, role_col) : x;
      Tensor msg;
      if (n > 1) {
        Tensor es = ad::gather_rows(xr, src);
        Tensor ed = ad::gather_rows(xr, dst);
        Tensor ein = aux_dim_ > 0 ? ad::concat_cols({es, ed, edge_aux})
                                  : ad::concat_cols(es, ed);
        msg = ad::segment_mean_rows(layer.edge(t, ein), dst, n);
      } else {
        msg = t.alloc(1, width_);
      }
      x = ad::silu_t(layer.node(t, ad::concat_cols(xr, msg)));
    }
    return x;
  }

  int width() const { return width_; }
  int aux_dim() const { return aux_dim_; }
  bool uses_roles() const { return use_roles_; }

 private:
  struct Layer {
    Mlp edge;
    Linear node;
  };
  int width_ = 0, aux_dim_ = 0;
  bool use_roles_ = false;
  std::vector<Layer> layers_;
};

// Standard GRU cell, biases zero at init. The hidden state stays bounded:
// h' is a convex blend of h and a tanh candidate.
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore& ps, const std::string& name, int in, int hidden)
      : hidden_(hidden),
        xr_(ps, name + ".xr", in, hidden),
        hr_(ps, name + ".hr", hidden, hidden),
        xu_(ps, name + ".xu", in, hidden),
        hu_(ps, name + ".hu", hidden, hidden),
        xc_(ps, name + ".xc", in, hidden),
        hc_(ps, name + ".hc", hidden, hidden) {}

  Tensor step(Tape& t, const Tensor& x, const Tensor& h) const {
    Tensor r = ad::sigmoid_t(ad::add(xr_(t, x), hr_(t, h)));
    Tensor u = ad::sigmoid_t(ad::add(xu_(t, x), hu_(t, h)));
    Tensor c = ad::tanh_t(ad::add(xc_(t, x), hc_(t, ad::mul(r, h))));
    // h' = h + u * (c - h)
    return ad::add(h, ad::mul(u, ad::sub(c, h)));
  }

  int hidden() const { return hidden_; }

 private:
  int hidden_ = 0;
  Linear xr_, hr_, xu_, hu_, xc_, hc_;
};

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line (names, shapes, version, free-form meta)
// followed by each parameter's values as little-endian 64-bit floats in
// header order.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "SGCKPT1";

inline void save_checkpoint(const ParameterStore& ps, const std::string& path,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  static_assert(sizeof(double) == 8);
  nlohmann::json header;
  header["version"] = 1;
  header["meta"] = meta;
  auto params = nlohmann::json::array();
  for (const auto& p : ps.all())
    params.push_back({{"name", p->name}, {"rows", p->rows}, {"cols", p->cols}});
  header["params"] = params;

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("save_checkpoint: cannot open " + path);
  f << kCheckpointMagic << "\n" << header.dump() << "\n";
  for (const auto& p : ps.all())
    f.write(reinterpret_cast<const char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  if (!f) throw ValidationError("save_checkpoint: write failed for " + path);
}

// Loads into an already-constructed store; the parameter sets must match
// exactly by name and shape. Returns the header's meta object.
inline nlohmann::json load_checkpoint(ParameterStore& ps,
                                      const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("load_checkpoint: cannot open " + path);
  std::string magic, header_line;
  if (!std::getline(f, magic) || magic != kCheckpointMagic)
    throw ValidationError("load_checkpoint: bad magic in " + path);
  if (!std::getline(f, header_line))
    throw ValidationError("load_checkpoint: missing header in " + path);
  nlohmann::json header = nlohmann::json::parse(header_line, nullptr, false);
  if (header.is_discarded())
    throw ValidationError("load_checkpoint: malformed header in " + path);
  const auto& params = header.at("params");
  if (params.size() != ps.all().size())
    throw ValidationError("load_checkpoint: parameter count mismatch in " + path);
  for (const auto& desc : params) {
    const std::string name = desc.at("name").get<std::string>();
    Parameter* p = ps.find(name);
    if (!p)
      throw ValidationError("load_checkpoint: unknown parameter " + name);
    if (p->rows != desc.at("rows").get<int>() ||
        p->cols != desc.at("cols").get<int>())
      throw ValidationError("load_checkpoint: shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(p->value.data()),
           static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!f)
      throw ValidationError("load_checkpoint: truncated payload at " + name);
  }
  return header.value("meta", nlohmann::json::object());
}

}  // namespace scengen::nn
