#pragma once

// Randomized finite-difference cases, one per autodiff primitive. Each draws
// fresh input shapes and values from the generator it is given.

#include <functional>
#include <random>
#include <vector>

#include "fd_oracle.hpp"

namespace ulab::testing {

struct PrimitiveCase {
  const char* name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  LossBuilder build;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  auto dims = [](std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::vector<PrimitiveCase> cases;
  cases.push_back({"matmul",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), k = dims(r, 1, 4), n = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {m, k}), random_tensor(r, {k, n}),
                                                random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::matmul(v[0], v[1]), v[2]);
                   }});
  cases.push_back({"matmul_nt",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), k = dims(r, 1, 4), n = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {m, k}), random_tensor(r, {n, k}),
                                                random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::matmul_nt(v[0], v[1]), v[2]);
                   }});
  cases.push_back({"add_sub_mul",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {m, n}), random_tensor(r, {m, n}),
                                                random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     Var y = ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1]));
                     return weighted_sum(ops::scale(y, 0.7), v[2]);
                   }});
  cases.push_back({"add_bias",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {m, n}), random_tensor(r, {n}),
                                                random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::add_bias(v[0], v[1]), v[2]);
                   }});
  cases.push_back({"gelu",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {m, n}, 2.0),
                                                random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::gelu(v[0]), v[1]);
                   }});
  cases.push_back({"layer_norm",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 2, 6);
                     return std::vector<Tensor>{random_tensor(r, {m, n}), random_tensor(r, {n}),
                                                random_tensor(r, {n}), random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::layer_norm(v[0], v[1], v[2]), v[3]);
                   }});
  cases.push_back({"softmax",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4), n = dims(r, 1, 5);
                     return std::vector<Tensor>{random_tensor(r, {m, n}, 2.0),
                                                random_tensor(r, {m, n})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::softmax(v[0], false), v[1]);
                   }});
  cases.push_back({"causal_softmax",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 5);
                     return std::vector<Tensor>{random_tensor(r, {m, m}, 2.0),
                                                random_tensor(r, {m, m})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     return weighted_sum(ops::softmax(v[0], true), v[1]);
                   }});
  cases.push_back({"embedding",
                   [=](std::mt19937_64& r) {
                     const auto vocab = dims(r, 2, 5), d = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {vocab, d}),
                                                random_tensor(r, {4, d})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     const std::size_t vocab = v[0].value().rows();
                     std::vector<TokenId> ids{0, static_cast<TokenId>(vocab - 1), 1, 0};
                     return weighted_sum(ops::embedding(v[0], ids), v[1]);
                   }});
  cases.push_back({"slice_concat_set_row",
                   [=](std::mt19937_64& r) {
                     const auto m = dims(r, 1, 4);
                     return std::vector<Tensor>{random_tensor(r, {m, 5}), random_tensor(r, {m, 5})};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     Var a = ops::slice_cols(v[0], 0, 2);
                     Var b = ops::slice_cols(v[0], 2, 3);
                     std::vector<Var> parts{b, a};
                     Var c = ops::concat_cols(parts);
                     std::vector<double> row(5, 0.25);
                     return weighted_sum(ops::set_row(c, 0, row), v[1]);
                   }});
  cases.push_back({"masked_cross_entropy",
                   [=](std::mt19937_64& r) {
                     const auto vocab = dims(r, 2, 6);
                     return std::vector<Tensor>{random_tensor(r, {3, vocab}, 2.0)};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     const auto vocab = static_cast<TokenId>(v[0].value().cols());
                     std::vector<TokenId> t{0, vocab - 1, 1 % vocab};
                     bool mask[3] = {true, false, true};
                     return ops::masked_cross_entropy(v[0], t, mask);
                   }});
  cases.push_back({"masked_kl",
                   [=](std::mt19937_64& r) {
                     const auto vocab = dims(r, 2, 6);
                     return std::vector<Tensor>{random_tensor(r, {3, vocab}, 2.0)};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     std::mt19937_64 ref_rng(v[0].value().cols());
                     const Tensor ref = random_tensor(ref_rng, v[0].value().shape(), 2.0);
                     bool mask[3] = {true, true, false};
                     return ops::masked_kl(v[0], log_softmax_rows(ref), mask);
                   }});
  cases.push_back({"weighted_cross_entropy",
                   [=](std::mt19937_64& r) {
                     const auto vocab = dims(r, 2, 6);
                     return std::vector<Tensor>{random_tensor(r, {3, vocab}, 2.0)};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     const auto vocab = static_cast<TokenId>(v[0].value().cols());
                     std::vector<TokenId> t{vocab - 1, 0, 1 % vocab};
                     const double w[3] = {-0.75, 0.0, 1.5};
                     return ops::weighted_cross_entropy(v[0], t, w);
                   }});
  cases.push_back({"weighted_kl",
                   [=](std::mt19937_64& r) {
                     const auto vocab = dims(r, 2, 6);
                     return std::vector<Tensor>{random_tensor(r, {3, vocab}, 2.0)};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     std::mt19937_64 ref_rng(v[0].value().cols() + 11);
                     const Tensor ref = random_tensor(ref_rng, v[0].value().shape(), 2.0);
                     const double w[3] = {0.5, 2.0, 0.0};
                     return ops::weighted_kl(v[0], log_softmax_rows(ref), w);
                   }});
  cases.push_back({"causal_attention",
                   [=](std::mt19937_64& r) {
                     const auto n = dims(r, 1, 6), heads = dims(r, 1, 3), dh = dims(r, 1, 3);
                     const Shape s{n, heads * dh};
                     return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s),
                                                random_tensor(r, s), random_tensor(r, s),
                                                Tensor({heads}, 0.0)};
                   },
                   [](Tape&, const std::vector<Var>& v) {
                     // The last input only carries the head count; segments split
                     // the rows in two when there are enough of them.
                     const std::size_t n = v[0].value().rows();
                     std::vector<std::size_t> seg;
                     if (n >= 2) seg = {n / 2, n - n / 2};
                     Var y = ops::causal_attention(v[0], v[1], v[2], v[4].value().size(), seg);
                     return weighted_sum(y, v[3]);
                   }});
  return cases;
}


}  // namespace ulab::testing
