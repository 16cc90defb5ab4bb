#pragma once

// Random well-conditioned inputs for every primitive, shared by the unit
// tests and the acceptance run.

#include <vector>

#include "fd_oracle.hpp"
#include "patchstorm/ops.hpp"

namespace patchstorm::testing {

using ops::OpAttrs;
using ops::OpKind;

struct OpCase {
  OpKind kind;
  std::vector<Tensor> inputs;
  OpAttrs attrs;
  std::vector<bool> differentiable;
};

// Random well-conditioned inputs for each op kind.
inline OpCase make_case(OpKind kind, Rng& rng) {
  auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
  OpCase c{kind, {}, {}, {}};
  const std::size_t m = dim(1, 5), n = dim(1, 6), k = dim(1, 4);
  switch (kind) {
    case OpKind::matmul:
      c.inputs = {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
      break;
    case OpKind::add:
      if (rng.uniform() < 0.5) {
        c.inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})};
      } else {
        c.inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {n})};
      }
      break;
    case OpKind::sub:
    case OpKind::elementwise_mul:
      c.inputs = {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})};
      break;
    case OpKind::scale:
      c.inputs = {random_tensor(rng, {m, n})};
      c.attrs.scalar = rng.uniform(-3.0, 3.0);
      break;
    case OpKind::gelu:
      c.inputs = {random_tensor(rng, {m, n}, -3.0, 3.0)};
      break;
    case OpKind::softmax_lastdim:
      c.inputs = {random_tensor(rng, {m, n}, -2.0, 2.0)};
      break;
    case OpKind::layernorm_lastdim: {
      const std::size_t nn = dim(2, 6);
      c.inputs = {random_tensor(rng, {m, nn}), random_tensor(rng, {nn}, 0.5, 1.5), random_tensor(rng, {nn})};
      break;
    }
    case OpKind::reshape:
      c.inputs = {random_tensor(rng, {m, n})};
      c.attrs.shape = {n, m};
      break;
    case OpKind::transpose2d:
      c.inputs = {random_tensor(rng, {m, n})};
      break;
    case OpKind::slice: {
      c.inputs = {random_tensor(rng, {m, n, k})};
      c.attrs.axis = rng.below(3);
      const std::size_t len = c.inputs[0].dim(c.attrs.axis);
      c.attrs.begin = rng.below(len);
      c.attrs.end = c.attrs.begin + 1 + rng.below(len - c.attrs.begin);
      break;
    }
    case OpKind::concat: {
      c.attrs.axis = rng.below(2);
      const std::size_t parts = dim(1, 3);
      for (std::size_t p = 0; p < parts; ++p) {
        c.inputs.push_back(c.attrs.axis == 0 ? random_tensor(rng, {dim(1, 3), n}) : random_tensor(rng, {m, dim(1, 3)}));
      }
      break;
    }
    case OpKind::mean_lastdim:
      c.inputs = {random_tensor(rng, {m, n})};
      break;
    case OpKind::l2_normalize_lastdim:
      c.inputs = {random_tensor(rng, {m, n}, 0.2, 1.0)};
      break;
    case OpKind::embedding_gather: {
      c.inputs = {random_tensor(rng, {m + 1, n})};
      const std::size_t count = dim(1, 7);
      for (std::size_t i = 0; i < count; ++i) c.attrs.indices.push_back(rng.below(m + 1));
      break;
    }
  }
  c.differentiable.assign(c.inputs.size(), true);
  return c;
}

inline constexpr OpKind kAllKinds[] = {
    OpKind::matmul,          OpKind::add,         OpKind::sub,          OpKind::elementwise_mul,
    OpKind::scale,           OpKind::gelu,        OpKind::softmax_lastdim, OpKind::layernorm_lastdim,
    OpKind::reshape,         OpKind::transpose2d, OpKind::slice,        OpKind::concat,
    OpKind::mean_lastdim,    OpKind::l2_normalize_lastdim, OpKind::embedding_gather,
};

}  // namespace patchstorm::testing
