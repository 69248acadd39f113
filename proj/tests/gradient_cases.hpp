#pragma once

// Finite-difference cases shared by the gradient tests and the acceptance run.
// Everything runs in double through the same templates as training.

#include <functional>
#include <vector>

#include "predinet/nets.hpp"
#include "predinet/protocol.hpp"
#include "test_util.hpp"

namespace gradcases {

using namespace predinet;
using testutil::random_tensor;
using testutil::readout;

inline constexpr double kTol = 1e-3;
inline constexpr int kSeeds = 20;

using Vars = std::vector<Var<double>>;

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor<double>>(Rng&)> inputs;
  testutil::Builder build;
};

inline std::vector<OpCase> op_cases() {
  return {
      {"matmul", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4, 5}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, matmul(v[0], v[1])); }},
      {"bmm", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r), random_tensor({2, 4, 5}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, bmm(v[0], v[1])); }},
      {"bmm_transposed", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r), random_tensor({2, 5, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, bmm(v[0], v[1], true)); }},
      {"conv2d",
       [](Rng& r) { return std::vector{random_tensor({2, 10, 10, 2}, r), random_tensor({4, 4, 2, 3}, r), random_tensor({3}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, conv2d(v[0], v[1], v[2], 2)); }},
      {"conv2d_unbatched",
       [](Rng& r) { return std::vector{random_tensor({7, 7, 3}, r), random_tensor({3, 3, 3, 2}, r), random_tensor({2}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, conv2d(v[0], v[1], v[2], 1)); }},
      {"softmax_rows", [](Rng& r) { return std::vector{random_tensor({2, 3, 6}, r, -3, 3)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, softmax_rows(v[0])); }},
      {"relu", [](Rng& r) { return std::vector{testutil::off_zero_tensor({4, 5}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, relu(v[0])); }},
      {"add", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, add(v[0], v[1])); }},
      {"sub", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, sub(v[0], v[1])); }},
      {"mul", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, mul(v[0], v[1])); }},
      {"mul_self", [](Rng& r) { return std::vector{random_tensor({3, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, mul(v[0], v[0])); }},
      {"scale", [](Rng& r) { return std::vector{random_tensor({3, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, scale(v[0], -1.7)); }},
      {"add_bias", [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r), random_tensor({4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, add_bias(v[0], v[1])); }},
      {"concat",
       [](Rng& r) { return std::vector{random_tensor({2, 3, 2}, r), random_tensor({2, 3, 1}, r), random_tensor({2, 3, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, concat<double>({v[0], v[1], v[2]})); }},
      {"slice_last", [](Rng& r) { return std::vector{random_tensor({2, 3, 6}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, slice_last(v[0], 1, 4)); }},
      {"split", [](Rng& r) { return std::vector{random_tensor({3, 7}, r)}; },
       [](Graph<double>& g, const Vars& v) {
         auto parts = split(v[0], {2, 4, 1});
         return add(readout(g, parts[0], 1), add(readout(g, parts[1], 2), readout(g, parts[2], 3)));
       }},
      {"reshape", [](Rng& r) { return std::vector{random_tensor({2, 6}, r)}; },
       [](Graph<double>& g, const Vars& v) {
         Rng w = derive_rng(5);
         return readout(g, matmul(reshape(v[0], Shape{4, 3}), g.constant(random_tensor({3, 2}, w))));
       }},
      {"flatten", [](Rng& r) { return std::vector{random_tensor({2, 3, 2}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, flatten(v[0])); }},
      {"swap_axes12", [](Rng& r) { return std::vector{random_tensor({2, 3, 4, 2}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, swap_axes12(v[0])); }},
      {"repeat", [](Rng& r) { return std::vector{random_tensor({3, 2}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, repeat(v[0], 3)); }},
      {"pair_concat", [](Rng& r) { return std::vector{random_tensor({2, 3, 2}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, pair_concat(v[0])); }},
      {"mean_axis1", [](Rng& r) { return std::vector{random_tensor({2, 5, 3}, r)}; },
       [](Graph<double>& g, const Vars& v) { return readout(g, mean_axis1(v[0])); }},
      {"sum", [](Rng& r) { return std::vector{random_tensor({3, 3}, r)}; },
       [](Graph<double>&, const Vars& v) { return scale(sum(v[0]), 0.3); }},
      {"softmax_cross_entropy", [](Rng& r) { return std::vector{random_tensor({4, 3}, r, -2, 2)}; },
       [](Graph<double>&, const Vars& v) {
         return softmax_cross_entropy(v[0], std::vector<std::size_t>{0, 2, 1, 2});
       }},
      {"softmax_cross_entropy_onehot", [](Rng& r) { return std::vector{random_tensor({2, 4}, r, -2, 2)}; },
       [](Graph<double>&, const Vars& v) {
         return softmax_cross_entropy(v[0], Tensor<double>({2, 4}, std::vector<double>{0, 0, 1, 0, 1, 0, 0, 0}));
       }},
      // a composite that reuses a node in several consumers
      {"attention_block",
       [](Rng& r) { return std::vector{random_tensor({2, 3, 4}, r), random_tensor({2, 5, 4}, r)}; },
       [](Graph<double>& g, const Vars& v) {
         auto a = softmax_rows(bmm(v[0], v[1], true));
         return readout(g, add(bmm(a, v[1]), concat<double>({slice_last(bmm(a, v[1]), 0, 2), slice_last(v[0], 2, 4)})));
       }},
  };
}

inline testutil::GradCheck op_grad_check(const OpCase& c, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 17);
  return testutil::grad_check(c.inputs(rng), c.build, rng);
}

inline constexpr Arch kArchitectures[] = {Arch::predinet, Arch::mha, Arch::rn, Arch::mlp1, Arch::mlp2};

/// Entries probed per parameter tensor; RN is slow to re-evaluate.
inline std::size_t model_probes(Arch a) { return a == Arch::rn ? 4 : 8; }

inline ModelConfig small_config(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.heads = 3;
  c.relations = 4;
  c.key_size = 5;
  c.cnn_channels = 6;
  c.output_hidden = 5;
  c.mlp2_hidden = 12;
  c.rn_hidden = 10;
  c.task_id_width = 2;
  return c;
}

struct ModelCheck {
  double max_rel = 0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // probes skipped because a ReLU switched inside [-h, h]
};

/// Worst relative error over a random sample of entries of every parameter.
/// When a probe misses and its one-sided slopes disagree, some ReLU switched
/// inside [-h, h]. The side that did not cross still measures the derivative
/// of the piece the point lies on, so that side is compared instead.
inline ModelCheck model_grad_check(Arch arch, std::uint64_t seed, std::size_t per_tensor) {
  Rng rng = derive_rng(seed, 3);
  Model<double> model = Model<float>(small_config(arch), rng).cast<double>();
  // biases away from zero so no ReLU sits exactly on its kink
  for (auto& p : model.params().entries())
    if (p.tensor.rank() == 1)
      for (auto& v : p.tensor.data()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);

  const std::vector<TaskSpec> tasks{rg::parse_task("same"), rg::parse_task("between")};
  Rng data = derive_rng(seed, 4);
  auto batch = make_batch<double>(tasks, 0, ObjectSetId::train_pentominoes, 2, data);
  // off-grid task inputs exercise the concat path with non-trivial values
  for (auto& v : batch.task_ids.data()) v += 0.25;

  auto loss_of = [&] {
    Graph<double> g(false);
    auto out = model.forward(g, batch.images, &batch.task_ids);
    return softmax_cross_entropy(out.logits, batch.labels).value()[0];
  };
  Graph<double> g;
  auto out = model.forward(g, batch.images, &batch.task_ids);
  g.backward(softmax_cross_entropy(out.logits, batch.labels));

  ModelCheck res;
  const double f0 = loss_of();
  auto rel_err = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-5}); };
  auto central = [&](Tensor<double>& t, std::size_t k, double h, double& right, double& left) {
    const double keep = t[k];
    t[k] = keep + h;
    const double up = loss_of();
    t[k] = keep - h;
    const double down = loss_of();
    t[k] = keep;
    right = (up - f0) / h;
    left = (f0 - down) / h;
    return (up - down) / (2 * h);
  };
  for (auto& p : model.params().entries()) {
    auto& t = p.tensor;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.size(), 0.0);
    for (std::size_t s = 0; s < std::min(per_tensor, t.size()); ++s) {
      const std::size_t k = uniform_index(rng, t.size());
      double right = 0, left = 0;
      double rel = rel_err(analytic[k], central(t, k, 1e-6, right, left));
      if (rel >= kTol && std::abs(right - left) > std::abs(analytic[k] - (right + left) / 2)) {
        ++res.kinks;
        rel = std::min(rel_err(analytic[k], right), rel_err(analytic[k], left));
      }
      res.max_rel = std::max(res.max_rel, rel);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace gradcases
