#pragma once

// Connectionist Temporal Classification over a T×C log-probability matrix
// with the blank at class 0. Alignment lattice: the target interleaved with
// blanks (length 2L+1); forward/backward recursions run in log space.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fpthd/common.hpp"
#include "fpthd/nn/params.hpp"

namespace fpthd::ctc {

inline constexpr int kBlank = 0;
/// Floor for log probabilities inside the recursions.
inline constexpr double kLogZero = -1e30;

using LabelSequence = std::vector<int>;

inline double log_add(double a, double b) {
  if (a < b) std::swap(a, b);
  if (b <= kLogZero) return a;
  return a + std::log1p(std::exp(b - a));
}

/// Minimum number of frames needed to emit `target`.
inline int required_frames(const LabelSequence& target) {
  int n = static_cast<int>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

inline bool feasible(int valid_len, const LabelSequence& target) {
  return valid_len >= required_frames(target);
}

struct Loss {
  double value = 0.0;  // +inf when infeasible
  bool feasible = true;
};

namespace detail {

template <class Derived>
void check_inputs(const Eigen::MatrixBase<Derived>& logprobs, int valid_len, const LabelSequence& target) {
  const auto classes = static_cast<int>(logprobs.cols());
  if (valid_len < 0 || valid_len > logprobs.rows()) throw Error("ctc: valid length out of range");
  for (int label : target)
    if (label <= kBlank || label >= classes) throw Error("ctc: label " + std::to_string(label) + " out of range");
  for (int t = 0; t < valid_len; ++t) {
    double s = 0.0;
    for (int c = 0; c < classes; ++c) s += std::exp(static_cast<double>(logprobs(t, c)));
    if (std::abs(s - 1.0) > 1e-4) throw Error("ctc: row " + std::to_string(t) + " is not a log-distribution");
  }
}

inline std::vector<int> extended(const LabelSequence& target) {
  std::vector<int> ext(2 * target.size() + 1, kBlank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

template <class Derived>
double lp(const Eigen::MatrixBase<Derived>& m, int t, int c) {
  return std::max(static_cast<double>(m(t, c)), kLogZero);
}

// alpha[t][s]: log prob of all prefixes ending in lattice state s at frame t.
template <class Derived>
std::vector<std::vector<double>> forward(const Eigen::MatrixBase<Derived>& logprobs, int valid_len,
                                         const std::vector<int>& ext) {
  const std::size_t S = ext.size();
  std::vector<std::vector<double>> alpha(static_cast<std::size_t>(valid_len), std::vector<double>(S, kLogZero));
  if (valid_len == 0) return alpha;
  alpha[0][0] = lp(logprobs, 0, ext[0]);
  if (S > 1) alpha[0][1] = lp(logprobs, 0, ext[1]);
  for (int t = 1; t < valid_len; ++t) {
    const auto& prev = alpha[static_cast<std::size_t>(t - 1)];
    auto& cur = alpha[static_cast<std::size_t>(t)];
    for (std::size_t s = 0; s < S; ++s) {
      double a = prev[s];
      if (s >= 1) a = log_add(a, prev[s - 1]);
      if (s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]) a = log_add(a, prev[s - 2]);
      cur[s] = a <= kLogZero ? kLogZero : a + lp(logprobs, t, ext[s]);
    }
  }
  return alpha;
}

// beta[t][s]: log prob of all suffixes after frame t given state s at t
// (excludes the emission at t).
template <class Derived>
std::vector<std::vector<double>> backward(const Eigen::MatrixBase<Derived>& logprobs, int valid_len,
                                          const std::vector<int>& ext) {
  const std::size_t S = ext.size();
  std::vector<std::vector<double>> beta(static_cast<std::size_t>(valid_len), std::vector<double>(S, kLogZero));
  if (valid_len == 0) return beta;
  auto& last = beta[static_cast<std::size_t>(valid_len - 1)];
  last[S - 1] = 0.0;
  if (S > 1) last[S - 2] = 0.0;
  for (int t = valid_len - 2; t >= 0; --t) {
    const auto& next = beta[static_cast<std::size_t>(t + 1)];
    auto& cur = beta[static_cast<std::size_t>(t)];
    for (std::size_t s = 0; s < S; ++s) {
      double b = next[s] + lp(logprobs, t + 1, ext[s]);
      if (s + 1 < S) b = log_add(b, next[s + 1] + lp(logprobs, t + 1, ext[s + 1]));
      if (s + 2 < S && ext[s + 2] != kBlank && ext[s + 2] != ext[s])
        b = log_add(b, next[s + 2] + lp(logprobs, t + 1, ext[s + 2]));
      cur[s] = std::max(b, kLogZero);
    }
  }
  return beta;
}

}  // namespace detail

/// -log P(target | logprobs[0..valid_len)).
template <class Derived>
Loss ctc_loss(const Eigen::MatrixBase<Derived>& logprobs, int valid_len, const LabelSequence& target) {
  detail::check_inputs(logprobs, valid_len, target);
  if (!feasible(valid_len, target)) return {std::numeric_limits<double>::infinity(), false};
  if (valid_len == 0) return {0.0, true};
  const auto ext = detail::extended(target);
  const auto alpha = detail::forward(logprobs, valid_len, ext);
  const auto& last = alpha.back();
  double ll = last.back();
  if (ext.size() > 1) ll = log_add(ll, last[ext.size() - 2]);
  return {std::max(0.0, -ll), true};
}

/// d(loss)/d(logprobs); rows at or beyond valid_len are zero.
template <class Derived>
Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> ctc_grad(
    const Eigen::MatrixBase<Derived>& logprobs, int valid_len, const LabelSequence& target) {
  detail::check_inputs(logprobs, valid_len, target);
  if (!feasible(valid_len, target)) throw Error("ctc: infeasible target");
  using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  M grad = M::Zero(logprobs.rows(), logprobs.cols());
  if (valid_len == 0) return grad;
  const auto ext = detail::extended(target);
  const auto alpha = detail::forward(logprobs, valid_len, ext);
  const auto beta = detail::backward(logprobs, valid_len, ext);
  const auto& last = alpha.back();
  double ll = last.back();
  if (ext.size() > 1) ll = log_add(ll, last[ext.size() - 2]);
  for (int t = 0; t < valid_len; ++t) {
    const auto& a = alpha[static_cast<std::size_t>(t)];
    const auto& b = beta[static_cast<std::size_t>(t)];
    for (std::size_t s = 0; s < ext.size(); ++s) {
      const double lg = a[s] + b[s] - ll;
      if (lg > -700.0) grad(t, ext[s]) -= std::exp(lg);
    }
  }
  return grad;
}

/// Best-path decoding: per-frame argmax (ties to the smaller index), collapse
/// repeats, drop blanks.
template <class Derived>
LabelSequence greedy_decode(const Eigen::MatrixBase<Derived>& logprobs, int valid_len) {
  LabelSequence out;
  int prev = -1;
  const int n = std::min<int>(valid_len, static_cast<int>(logprobs.rows()));
  for (int t = 0; t < n; ++t) {
    int best = 0;
    for (int c = 1; c < logprobs.cols(); ++c)
      if (logprobs(t, c) > logprobs(t, best)) best = c;
    if (best != prev && best != kBlank) out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace fpthd::ctc
