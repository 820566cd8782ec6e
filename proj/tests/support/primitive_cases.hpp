#pragma once

// Randomized gradient-check cases, one generator per tape primitive.

#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace safeft::testing {

struct PrimitiveCase {
  std::string name;
  std::function<GradChecker(std::uint64_t seed)> make;
};

inline std::size_t extent(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cases;
  cases.push_back({"matmul", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto m = extent(r, 1, 5), k = extent(r, 1, 5), n = extent(r, 1, 5);
                     return GradChecker({random_tensor({m, k}, r), random_tensor({k, n}, r)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); }, s);
                   }});
  cases.push_back({"batched_matmul", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto b = extent(r, 1, 3), m = extent(r, 1, 4), k = extent(r, 1, 4), n = extent(r, 1, 4);
                     return GradChecker({random_tensor({b, m, k}, r), random_tensor({b, k, n}, r)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); }, s);
                   }});
  cases.push_back({"add", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const Shape sh{extent(r, 1, 5), extent(r, 1, 5)};
                     return GradChecker({random_tensor(sh, r), random_tensor(sh, r)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.add(v[0], v[1]); }, s);
                   }});
  cases.push_back({"add_bias", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto rows = extent(r, 1, 5), cols = extent(r, 1, 5);
                     return GradChecker({random_tensor({rows, cols}, r), random_tensor({cols}, r)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.add_bias(v[0], v[1]); }, s);
                   }});
  cases.push_back({"scale", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const double f = std::normal_distribution<double>(0.0, 2.0)(r);
                     return GradChecker({random_tensor({extent(r, 1, 5), extent(r, 1, 5)}, r)},
                                        [f](Tape& t, const std::vector<Var>& v) { return t.scale(v[0], f); }, s);
                   }});
  cases.push_back({"transpose", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const bool batched = s % 2 == 1;
                     Shape sh = batched ? Shape{extent(r, 1, 3), extent(r, 1, 4), extent(r, 1, 4)}
                                        : Shape{extent(r, 1, 5), extent(r, 1, 5)};
                     return GradChecker({random_tensor(sh, r)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.transpose(v[0]); }, s);
                   }});
  cases.push_back({"row_softmax", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const bool batched = s % 2 == 1;
                     Shape sh = batched ? Shape{extent(r, 1, 3), extent(r, 1, 4), extent(r, 2, 5)}
                                        : Shape{extent(r, 1, 5), extent(r, 2, 6)};
                     return GradChecker({random_tensor(sh, r, 2.0)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.row_softmax(v[0]); }, s);
                   }});
  cases.push_back({"layer_norm", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto rows = extent(r, 1, 5), cols = extent(r, 2, 6);
                     return GradChecker(
                         {random_tensor({rows, cols}, r), random_tensor({cols}, r), random_tensor({cols}, r)},
                         [](Tape& t, const std::vector<Var>& v) { return t.layer_norm(v[0], v[1], v[2]); }, s);
                   }});
  cases.push_back({"gelu", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     return GradChecker({random_tensor({extent(r, 1, 5), extent(r, 1, 5)}, r, 2.0)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.gelu(v[0]); }, s);
                   }});
  cases.push_back({"embedding_lookup", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto vocab = extent(r, 2, 7), d = extent(r, 1, 5), n = extent(r, 1, 8);
                     std::vector<std::int64_t> ids(n);
                     for (auto& id : ids) id = static_cast<std::int64_t>(extent(r, 0, vocab - 1));
                     return GradChecker({random_tensor({vocab, d}, r)},
                                        [ids](Tape& t, const std::vector<Var>& v) { return t.embedding(v[0], ids); },
                                        s);
                   }});
  cases.push_back({"cross_entropy_mean", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto n = extent(r, 1, 6), k = extent(r, 2, 5);
                     std::vector<std::int64_t> labels(n);
                     for (auto& y : labels) y = static_cast<std::int64_t>(extent(r, 0, k - 1));
                     return GradChecker(
                         {random_tensor({n, k}, r, 2.0)},
                         [labels](Tape& t, const std::vector<Var>& v) { return t.cross_entropy_mean(v[0], labels); }, s);
                   }});
  cases.push_back({"dropout", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     TapeOptions o;
                     o.training = true;
                     o.seed = s;
                     o.step = s * 3;
                     return GradChecker({random_tensor({extent(r, 1, 6), extent(r, 1, 6)}, r)},
                                        [](Tape& t, const std::vector<Var>& v) { return t.dropout(v[0], 0.3); }, s, o);
                   }});
  cases.push_back({"split_heads", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto b = extent(r, 1, 3), q = extent(r, 1, 3), h = extent(r, 1, 3), hd = extent(r, 1, 3);
                     return GradChecker({random_tensor({b * q, h * hd}, r)},
                                        [b, q, h](Tape& t, const std::vector<Var>& v) {
                                          return t.split_heads(v[0], b, q, h);
                                        },
                                        s);
                   }});
  cases.push_back({"merge_heads", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto b = extent(r, 1, 3), q = extent(r, 1, 3), h = extent(r, 1, 3), hd = extent(r, 1, 3);
                     return GradChecker({random_tensor({b * h, q, hd}, r)},
                                        [b, q, h](Tape& t, const std::vector<Var>& v) {
                                          return t.merge_heads(v[0], b, q, h);
                                        },
                                        s);
                   }});
  cases.push_back({"mean_pool", [](std::uint64_t s) {
                     std::mt19937_64 r(s);
                     const auto groups = extent(r, 1, 4), seq = extent(r, 1, 4), d = extent(r, 1, 4);
                     std::vector<std::int64_t> lengths(groups);
                     for (auto& l : lengths) l = static_cast<std::int64_t>(extent(r, 1, seq));
                     return GradChecker({random_tensor({groups * seq, d}, r)},
                                        [lengths, seq](Tape& t, const std::vector<Var>& v) {
                                          return t.mean_pool(v[0], lengths, seq);
                                        },
                                        s);
                   }});
  return cases;
}

}  // namespace safeft::testing
