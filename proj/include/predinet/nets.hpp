#pragma once

// Input CNN, central modules (PrediNet and the MLP1 / MLP2 / RN / MHA
// baselines) and the output MLP, composed as CNN -> central -> MLP.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/graph.hpp"
#include "predinet/ops.hpp"
#include "predinet/optim.hpp"
#include "predinet/random.hpp"
#include "predinet/tensor.hpp"

namespace predinet {

enum class Arch { predinet, mha, rn, mlp1, mlp2 };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::predinet: return "predinet";
    case Arch::mha: return "mha";
    case Arch::rn: return "rn";
    case Arch::mlp1: return "mlp1";
    case Arch::mlp2: return "mlp2";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  for (auto a : {Arch::predinet, Arch::mha, Arch::rn, Arch::mlp1, Arch::mlp2})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown architecture '" + s + "' (expected predinet, mha, rn, mlp1 or mlp2)");
}

enum class ParamGroup { cnn, central, output };

inline std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::cnn: return "cnn";
    case ParamGroup::central: return "central";
    case ParamGroup::output: return "output";
  }
  return "?";
}

/// Range of the two coordinate columns appended to L: unit maps the patch
/// grid onto [0,1], centred onto [-1,1].
enum class Coordinates { unit, centred };

inline std::string to_string(Coordinates c) { return c == Coordinates::unit ? "unit" : "centred"; }

inline Coordinates parse_coordinates(const std::string& s) {
  if (s == "unit") return Coordinates::unit;
  if (s == "centred" || s == "centered") return Coordinates::centred;
  throw ConfigError("unknown coordinate convention '" + s + "' (unit, centred)");
}

struct ModelConfig {
  Arch arch = Arch::predinet;
  std::size_t heads = 32;      // k
  std::size_t relations = 16;  // j
  std::size_t key_size = 16;   // g; also the MHA key/query size
  std::size_t label_arity = 2;
  std::size_t task_id_width = 0;

  std::size_t image_size = 36;
  std::size_t image_channels = 3;
  std::size_t cnn_channels = 32;
  std::size_t cnn_filter = 12;
  std::size_t cnn_stride = 6;

  std::size_t output_hidden = 8;
  std::size_t mlp2_hidden = 1024;
  std::size_t rn_hidden = 256;

  Coordinates coordinates = Coordinates::centred;
  double init_gain = 1.4142135623730951;  // weight std = init_gain / sqrt(fan_in)

  std::size_t grid() const { return (image_size - cnn_filter) / cnn_stride + 1; }
  std::size_t objects() const { return grid() * grid(); }     // n
  std::size_t feature_size() const { return cnn_channels + 2; }  // m
  std::size_t head_width() const { return relations + 4; }
  std::size_t central_width() const { return heads * head_width(); }  // k(j+4)

  void validate() const {
    if (heads == 0 || relations == 0 || key_size == 0) throw ConfigError("model: k, j and g must be positive");
    if (label_arity < 2) throw ConfigError("model: label arity must be at least 2");
    if (cnn_filter > image_size || (image_size - cnn_filter) % cnn_stride != 0) {
      throw ConfigError("model: CNN output size is not integral");
    }
    if (!(init_gain > 0) || !std::isfinite(init_gain)) throw ConfigError("model: init_gain must be positive");
  }
};

template <class T = float>
struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor<T> tensor;
};

/// Ordered, named parameter tensors. Insertion order is stable and defines
/// checkpoint and optimizer order.
template <class T = float>
class ParameterStore {
 public:
  Tensor<T>& add(std::string name, ParamGroup group, Tensor<T> t) {
    if (find(name)) throw UsageError("duplicate parameter " + name);
    t.set_requires_grad(true);
    params_.push_back({std::move(name), group, std::move(t)});
    return params_.back().tensor;
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }
  const Tensor<T>* find(const std::string& name) const {
    for (auto& p : params_)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }

  Tensor<T>& at(const std::string& name) {
    if (auto* t = find(name)) return *t;
    throw UsageError("no parameter named " + name);
  }
  const Tensor<T>& at(const std::string& name) const {
    if (auto* t = find(name)) return *t;
    throw UsageError("no parameter named " + name);
  }

  std::vector<NamedParam<T>>& entries() { return params_; }
  const std::vector<NamedParam<T>>& entries() const { return params_; }

  std::vector<Tensor<T>*> tensors(std::initializer_list<ParamGroup> groups) {
    std::vector<Tensor<T>*> out;
    for (auto& p : params_)
      if (std::find(groups.begin(), groups.end(), p.group) != groups.end()) out.push_back(&p.tensor);
    return out;
  }

  std::vector<Tensor<T>*> all() { return tensors({ParamGroup::cnn, ParamGroup::central, ParamGroup::output}); }

  /// Marks every tensor of a group trainable or frozen.
  void set_trainable(ParamGroup group, bool on) {
    for (auto& p : params_)
      if (p.group == group) {
        p.tensor.set_requires_grad(on);
        p.tensor.clear_grad();
      }
  }

  std::size_t count(std::optional<ParamGroup> group = std::nullopt) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!group || p.group == *group) n += p.tensor.size();
    return n;
  }

 private:
  std::vector<NamedParam<T>> params_;
};

/// Outputs of a central module for one batch.
template <class T = float>
struct CentralOutput {
  Var<T> r_star;                   // [B, k(j+4)]
  std::optional<Var<T>> attention1;  // PrediNet: [B,k,n]
  std::optional<Var<T>> attention2;  // PrediNet: [B,k,n]
  std::optional<Var<T>> attention;   // MHA: [B*k,n,n]
  std::optional<Var<T>> differences;  // PrediNet: [B,k,j]
  std::optional<Var<T>> positions1;   // PrediNet: [B,k,2]
  std::optional<Var<T>> positions2;
};

template <class T = float>
struct ModelOutput {
  Var<T> features;  // L: [B,n,m]
  CentralOutput<T> central;
  Var<T> logits;  // [B, label_arity]
};

/// Creates the CNN parameters.
template <class T>
void init_cnn(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t F = cfg.cnn_filter, C = cfg.image_channels, O = cfg.cnn_channels;
  store.add("cnn.filters", ParamGroup::cnn, init_params<T>({F, F, C, O}, rng, InitScheme::weights(F * F * C, cfg.init_gain)));
  store.add("cnn.bias", ParamGroup::cnn, Tensor<T>({O}));
}

/// Creates the parameters of the configured central module.
template <class T>
void init_central(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t n = cfg.objects(), m = cfg.feature_size(), k = cfg.heads, g = cfg.key_size;
  const std::size_t out = cfg.central_width();
  auto w = [&](const std::string& name, Shape s, std::size_t fan_in) {
    store.add(name, ParamGroup::central, init_params<T>(s, rng, InitScheme::weights(fan_in, cfg.init_gain)));
  };
  auto b = [&](const std::string& name, std::size_t size) { store.add(name, ParamGroup::central, Tensor<T>({size})); };
  switch (cfg.arch) {
    case Arch::predinet:
      w("predinet.w_k", {m, g}, m);
      w("predinet.w_q1", {n * m, k * g}, n * m);
      w("predinet.w_q2", {n * m, k * g}, n * m);
      w("predinet.w_s", {m, cfg.relations}, m);
      break;
    case Arch::mha:
      w("mha.w_q", {m, k * g}, m);
      w("mha.w_k", {m, k * g}, m);
      w("mha.w_v", {m, k * cfg.head_width()}, m);
      w("mha.mix", {k, n}, n);
      break;
    case Arch::rn:
      w("rn.w1", {2 * m, cfg.rn_hidden}, 2 * m);
      w("rn.w2", {cfg.rn_hidden, out}, cfg.rn_hidden);
      break;
    case Arch::mlp1:
      w("mlp1.w", {n * m, out}, n * m);
      b("mlp1.b", out);
      break;
    case Arch::mlp2:
      w("mlp2.w1", {n * m, cfg.mlp2_hidden}, n * m);
      b("mlp2.b1", cfg.mlp2_hidden);
      w("mlp2.w2", {cfg.mlp2_hidden, out}, cfg.mlp2_hidden);
      b("mlp2.b2", out);
      break;
  }
}

/// Creates the output MLP parameters (input width k(j+4) + task-id width).
template <class T>
void init_output(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t in = cfg.central_width() + cfg.task_id_width;
  store.add("out.w1", ParamGroup::output, init_params<T>({in, cfg.output_hidden}, rng, InitScheme::weights(in, cfg.init_gain)));
  store.add("out.b1", ParamGroup::output, Tensor<T>({cfg.output_hidden}));
  store.add("out.w2", ParamGroup::output,
            init_params<T>({cfg.output_hidden, cfg.label_arity}, rng, InitScheme::weights(cfg.output_hidden, cfg.init_gain)));
  store.add("out.b2", ParamGroup::output, Tensor<T>({cfg.label_arity}));
}

/// Patch coordinates for every row of L: (x, y) = (col, row)/(grid-1), or
/// 2*(col, row)/(grid-1) - 1 for centred coordinates.
template <class T>
Tensor<T> patch_coordinates(const ModelConfig& cfg, std::size_t batch) {
  const std::size_t grid = cfg.grid(), n = cfg.objects();
  const double denom = grid > 1 ? static_cast<double>(grid - 1) : 1.0;
  auto coord = [&](std::size_t i) {
    const double u = static_cast<double>(i) / denom;
    return static_cast<T>(cfg.coordinates == Coordinates::centred ? 2 * u - 1 : u);
  };
  Tensor<T> t({batch, n, 2});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      t[(b * n + i) * 2 + 0] = coord(i % grid);
      t[(b * n + i) * 2 + 1] = coord(i / grid);
    }
  return t;
}

/// Conv (ReLU, bias) to a grid of feature vectors, with patch coordinates
/// appended: [B,H,W,C] -> L [B, n, channels + 2].
template <class T>
Var<T> cnn_forward(Graph<T>& g, Var<T> images, ParameterStore<T>& store, const ModelConfig& cfg) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.image_channels) {
    throw DimensionError("cnn_forward: expected images [B," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_channels) + "], got " + to_string(s));
  }
  const std::size_t B = s[0];
  auto conv = conv2d(images, g.parameter(store.at("cnn.filters")), g.parameter(store.at("cnn.bias")), cfg.cnn_stride);
  auto feats = reshape(relu(conv), Shape{B, cfg.objects(), cfg.cnn_channels});
  return concat<T>({feats, g.constant(patch_coordinates<T>(cfg, B))});
}

/// PrediNet central module. Per head h:
///   Q1 = flatten(L) W_Q1^h, Q2 = flatten(L) W_Q2^h, K = L W_K,
///   E1 = softmax(Q1 K^T) L, E2 = softmax(Q2 K^T) L,
///   D  = E1 W_S - E2 W_S,  R^h = (D, last two of E1, last two of E2).
/// W_K and W_S are shared across heads; there are no biases.
template <class T>
CentralOutput<T> predinet_forward(Graph<T>& g, Var<T> L, ParameterStore<T>& store, const ModelConfig& cfg) {
  const auto& s = L.shape();
  const std::size_t n = cfg.objects(), m = cfg.feature_size(), k = cfg.heads, gk = cfg.key_size, j = cfg.relations;
  if (s.size() != 3 || s[1] != n || s[2] != m) {
    throw DimensionError("predinet_forward: expected L [B," + std::to_string(n) + "," + std::to_string(m) + "], got " + to_string(s));
  }
  const std::size_t B = s[0];
  auto flat = reshape(L, Shape{B, n * m});
  auto q1 = reshape(matmul(flat, g.parameter(store.at("predinet.w_q1"))), Shape{B, k, gk});
  auto q2 = reshape(matmul(flat, g.parameter(store.at("predinet.w_q2"))), Shape{B, k, gk});
  auto keys = reshape(matmul(reshape(L, Shape{B * n, m}), g.parameter(store.at("predinet.w_k"))), Shape{B, n, gk});
  auto a1 = softmax_rows(bmm(q1, keys, true));  // [B,k,n]
  auto a2 = softmax_rows(bmm(q2, keys, true));
  auto e1 = bmm(a1, L);  // [B,k,m]
  auto e2 = bmm(a2, L);
  auto ws = g.parameter(store.at("predinet.w_s"));
  auto s1 = matmul(reshape(e1, Shape{B * k, m}), ws);
  auto s2 = matmul(reshape(e2, Shape{B * k, m}), ws);
  auto d = reshape(sub(s1, s2), Shape{B, k, j});
  auto p1 = slice_last(e1, m - 2, m);
  auto p2 = slice_last(e2, m - 2, m);
  CentralOutput<T> out;
  out.r_star = reshape(concat<T>({d, p1, p2}), Shape{B, k * (j + 4)});
  out.attention1 = a1;
  out.attention2 = a2;
  out.differences = d;
  out.positions1 = p1;
  out.positions2 = p2;
  return out;
}

/// Multi-head attention baseline: per head softmax(Q K^T) V over the rows of
/// L, followed by a learned weighting of the n attended rows.
template <class T>
CentralOutput<T> mha_forward(Graph<T>& g, Var<T> L, ParameterStore<T>& store, const ModelConfig& cfg) {
  const auto& s = L.shape();
  const std::size_t n = cfg.objects(), m = cfg.feature_size(), k = cfg.heads, dk = cfg.key_size, dv = cfg.head_width();
  if (s.size() != 3 || s[1] != n || s[2] != m) {
    throw DimensionError("mha_forward: expected L [B," + std::to_string(n) + "," + std::to_string(m) + "], got " + to_string(s));
  }
  const std::size_t B = s[0];
  auto rows = reshape(L, Shape{B * n, m});
  auto per_head = [&](const char* name, std::size_t width) {
    auto x = reshape(matmul(rows, g.parameter(store.at(name))), Shape{B, n, k, width});
    return reshape(swap_axes12(x), Shape{B * k, n, width});
  };
  auto q = per_head("mha.w_q", dk);
  auto key = per_head("mha.w_k", dk);
  auto v = per_head("mha.w_v", dv);
  auto att = softmax_rows(bmm(q, key, true));  // [B*k,n,n]
  auto attended = bmm(att, v);                 // [B*k,n,dv]
  auto mix = reshape(repeat(g.parameter(store.at("mha.mix")), B), Shape{B * k, 1, n});
  CentralOutput<T> out;
  out.r_star = reshape(bmm(mix, attended), Shape{B, k * dv});
  out.attention = att;
  return out;
}

/// Relation-net baseline: a bias-free 2-layer ReLU MLP over all n^2 ordered
/// pairs of rows of L, averaged element-wise.
template <class T>
CentralOutput<T> rn_forward(Graph<T>& g, Var<T> L, ParameterStore<T>& store, const ModelConfig& cfg) {
  const auto& s = L.shape();
  const std::size_t n = cfg.objects(), m = cfg.feature_size(), out_w = cfg.central_width();
  if (s.size() != 3 || s[1] != n || s[2] != m) {
    throw DimensionError("rn_forward: expected L [B," + std::to_string(n) + "," + std::to_string(m) + "], got " + to_string(s));
  }
  const std::size_t B = s[0];
  auto pairs = reshape(pair_concat(L), Shape{B * n * n, 2 * m});
  auto h = relu(matmul(pairs, g.parameter(store.at("rn.w1"))));
  auto o = relu(matmul(h, g.parameter(store.at("rn.w2"))));
  CentralOutput<T> out;
  out.r_star = mean_axis1(reshape(o, Shape{B, n * n, out_w}));
  return out;
}

/// MLP1 / MLP2 baselines over flatten(L), ReLU layers with bias.
template <class T>
CentralOutput<T> mlp_forward(Graph<T>& g, Var<T> L, ParameterStore<T>& store, const ModelConfig& cfg) {
  const auto& s = L.shape();
  const std::size_t n = cfg.objects(), m = cfg.feature_size();
  if (s.size() != 3 || s[1] != n || s[2] != m) {
    throw DimensionError("mlp_forward: expected L [B," + std::to_string(n) + "," + std::to_string(m) + "], got " + to_string(s));
  }
  auto flat = reshape(L, Shape{s[0], n * m});
  auto layer = [&](Var<T> x, const char* w, const char* b) {
    return relu(add_bias(matmul(x, g.parameter(store.at(w))), g.parameter(store.at(b))));
  };
  CentralOutput<T> out;
  if (cfg.arch == Arch::mlp1) {
    out.r_star = layer(flat, "mlp1.w", "mlp1.b");
  } else {
    out.r_star = layer(layer(flat, "mlp2.w1", "mlp2.b1"), "mlp2.w2", "mlp2.b2");
  }
  return out;
}

template <class T>
CentralOutput<T> central_forward(Graph<T>& g, Var<T> L, ParameterStore<T>& store, const ModelConfig& cfg) {
  switch (cfg.arch) {
    case Arch::predinet: return predinet_forward(g, L, store, cfg);
    case Arch::mha: return mha_forward(g, L, store, cfg);
    case Arch::rn: return rn_forward(g, L, store, cfg);
    case Arch::mlp1:
    case Arch::mlp2: return mlp_forward(g, L, store, cfg);
  }
  throw ConfigError("unknown architecture");
}

/// The full network: CNN, a central module, and an output MLP.
template <class T = float>
class Model {
 public:
  Model() = default;

  Model(ModelConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    init_cnn(store_, cfg_, rng);
    init_central(store_, cfg_, rng);
    init_output(store_, cfg_, rng);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterStore<T>& params() noexcept { return store_; }
  const ParameterStore<T>& params() const noexcept { return store_; }

  /// Replaces every tensor of `group` with fresh draws from the init scheme.
  void reinitialize(ParamGroup group, Rng& rng) {
    ParameterStore<T> fresh;
    switch (group) {
      case ParamGroup::cnn: init_cnn(fresh, cfg_, rng); break;
      case ParamGroup::central: init_central(fresh, cfg_, rng); break;
      case ParamGroup::output: init_output(fresh, cfg_, rng); break;
    }
    replace_group(group, std::move(fresh));
  }

  /// Changes the task-id width and re-initialises the output MLP to match.
  void reset_output(std::size_t task_id_width, std::size_t label_arity, Rng& rng) {
    cfg_.task_id_width = task_id_width;
    cfg_.label_arity = label_arity;
    cfg_.validate();
    reinitialize(ParamGroup::output, rng);
  }

  /// `task_ids` is [B, task_id_width] (ignored when the width is 0).
  /// `slot_mask`, when given, multiplies R* element-wise (head ablation).
  ModelOutput<T> forward(Graph<T>& g, const Tensor<T>& images, const Tensor<T>* task_ids = nullptr,
                         const std::vector<T>* slot_mask = nullptr) {
    ModelOutput<T> out;
    out.features = cnn_forward(g, g.constant(images), store_, cfg_);
    out.central = central_forward(g, out.features, store_, cfg_);
    out.logits = output_forward(g, out.central.r_star, task_ids, slot_mask);
    return out;
  }

  /// Output MLP on a given R* [B, k(j+4)].
  Var<T> output_forward(Graph<T>& g, Var<T> r, const Tensor<T>* task_ids = nullptr,
                        const std::vector<T>* slot_mask = nullptr) {
    const std::size_t B = r.value().dim(0);
    if (slot_mask) {
      if (slot_mask->size() != cfg_.central_width()) throw DimensionError("forward: slot mask width mismatch");
      Tensor<T> mask({B, cfg_.central_width()});
      for (std::size_t b = 0; b < B; ++b) std::copy(slot_mask->begin(), slot_mask->end(), mask.data().begin() + b * slot_mask->size());
      r = mul(r, g.constant(std::move(mask)));
    }
    if (cfg_.task_id_width > 0) {
      if (!task_ids || task_ids->rank() != 2 || task_ids->dim(0) != B || task_ids->dim(1) != cfg_.task_id_width) {
        throw ConfigError("forward: model expects task ids of width " + std::to_string(cfg_.task_id_width));
      }
      r = concat<T>({r, g.constant(*task_ids)});
    } else if (task_ids && task_ids->size() > 0) {
      throw ConfigError("forward: task ids given to a model without a task-id input");
    }
    auto h = relu(add_bias(matmul(r, g.parameter(store_.at("out.w1"))), g.parameter(store_.at("out.b1"))));
    return add_bias(matmul(h, g.parameter(store_.at("out.w2"))), g.parameter(store_.at("out.b2")));
  }

  /// Copy with every tensor converted to another scalar type.
  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.cfg_ = cfg_;
    for (const auto& p : store_.entries()) {
      auto& t = m.store_.add(p.name, p.group, p.tensor.template cast<U>());
      t.set_requires_grad(p.tensor.requires_grad());
    }
    return m;
  }

 private:
  template <class>
  friend class Model;

  void replace_group(ParamGroup group, ParameterStore<T> fresh) {
    ParameterStore<T> merged;
    auto& old = store_.entries();
    // keep cnn, central, output order
    for (auto grp : {ParamGroup::cnn, ParamGroup::central, ParamGroup::output}) {
      auto& src = grp == group ? fresh.entries() : old;
      for (auto& p : src)
        if (p.group == grp) {
          const bool trainable = grp == group ? true : p.tensor.requires_grad();
          auto& t = merged.add(p.name, p.group, std::move(p.tensor));
          t.set_requires_grad(trainable);
        }
    }
    store_ = std::move(merged);
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
};

}  // namespace predinet
