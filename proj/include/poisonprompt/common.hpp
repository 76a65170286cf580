#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace poisonprompt {

using TokenId = std::int32_t;
using Index = Eigen::Index;

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <class S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient stops being finite.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

namespace detail {

inline unsigned& thread_setting() {
  static unsigned threads = 0;
  return threads;
}

}  // namespace detail

/// Worker threads used by parallel evaluation; 0 means hardware concurrency.
inline void set_num_threads(unsigned n) { detail::thread_setting() = n; }

inline unsigned num_threads() {
  unsigned n = detail::thread_setting();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Runs body(i) for i in [0, n). Each index must write only its own output
/// slot, so results never depend on the thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Sums per-chunk partial results in chunk order. The partition into
/// `chunks` pieces is fixed, so the floating-point result is reproducible
/// regardless of how many threads run it.
template <class T, class Body>
T parallel_chunk_sum(std::size_t n, std::size_t chunks, const T& zero, Body&& body) {
  chunks = std::max<std::size_t>(1, std::min(chunks, n));
  std::vector<T> partial(chunks, zero);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t begin = n * c / chunks;
    const std::size_t end = n * (c + 1) / chunks;
    for (std::size_t i = begin; i < end; ++i) body(i, partial[c]);
  });
  T total = zero;
  for (auto& p : partial) total += p;
  return total;
}

/// Indices of the k largest values, ties broken by ascending index.
template <class Scores>
std::vector<Index> top_k_indices(const Scores& scores, Index k,
                                 const std::function<bool(Index)>& keep = {}) {
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(scores.size()));
  for (Index i = 0; i < scores.size(); ++i)
    if (!keep || keep(i)) order.push_back(i);
  auto better = [&](Index a, Index b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max<Index>(k, 0)),
                                          order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                    order.end(), better);
  order.resize(take);
  return order;
}

template <class Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& v) {
  using S = typename Derived::Scalar;
  const S m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.derived().array() - m).exp().sum());
}

}  // namespace poisonprompt
