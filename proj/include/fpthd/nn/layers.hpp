#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "fpthd/nn/params.hpp"

namespace fpthd::nn {

/// C×H×W activation stored as a C × (H·W) row-major matrix.
template <class T>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Mat<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), data(Mat<T>::Zero(c, h * w)) {}
};

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel_h = 3;
  int kernel_w = 3;
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 1;
  int pad_w = 1;

  int out_height(int h) const { return (h + 2 * pad_h - kernel_h) / stride_h + 1; }
  int out_width(int w) const { return (w + 2 * pad_w - kernel_w) / stride_w + 1; }
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

template <class T>
struct ConvCache {
  Mat<T> cols;
  int in_height = 0;
  int in_width = 0;
};

/// 2-D convolution via im2col + GEMM.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, const ConvSpec& spec) : spec_(spec) {
    weight_ = store.add(name + ".weight", {spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w}, true);
    bias_ = store.add(name + ".bias", {spec.out_channels}, false);
  }

  const ConvSpec& spec() const { return spec_; }
  int weight_id() const { return weight_; }
  int bias_id() const { return bias_; }
  int fan_in() const { return spec_.in_channels * spec_.kernel_h * spec_.kernel_w; }

  FeatureMap<T> forward(const ParamStore<T>& store, const FeatureMap<T>& x, ConvCache<T>* cache) const {
    if (x.channels != spec_.in_channels) throw Error("conv: channel mismatch");
    const int ho = spec_.out_height(x.height);
    const int wo = spec_.out_width(x.width);
    if (ho <= 0 || wo <= 0) throw Error("conv: input smaller than kernel");
    Mat<T> cols(fan_in(), ho * wo);
    im2col(x, ho, wo, cols);
    FeatureMap<T> y;
    y.channels = spec_.out_channels;
    y.height = ho;
    y.width = wo;
    const auto w = store.value_mat(weight_, spec_.out_channels, fan_in());
    const auto b = store.value_mat(bias_, spec_.out_channels, 1);
    y.data.noalias() = w * cols;
    y.data.colwise() += b.col(0);
    if (cache != nullptr) {
      cache->cols = std::move(cols);
      cache->in_height = x.height;
      cache->in_width = x.width;
    }
    return y;
  }

  /// Accumulates weight/bias gradients and returns the input gradient.
  FeatureMap<T> backward(ParamStore<T>& store, const FeatureMap<T>& dy, const ConvCache<T>& cache,
                         bool need_input_grad = true) const {
    auto dw = store.grad_mat(weight_, spec_.out_channels, fan_in());
    auto db = store.grad_mat(bias_, spec_.out_channels, 1);
    dw.noalias() += dy.data * cache.cols.transpose();
    db.col(0) += dy.data.rowwise().sum();
    if (!need_input_grad) return {};
    const auto w = std::as_const(store).value_mat(weight_, spec_.out_channels, fan_in());
    Mat<T> dcols = w.transpose() * dy.data;
    FeatureMap<T> dx(spec_.in_channels, cache.in_height, cache.in_width);
    col2im(dcols, dy.height, dy.width, dx);
    return dx;
  }

 private:
  void im2col(const FeatureMap<T>& x, int ho, int wo, Mat<T>& cols) const {
    const int kh = spec_.kernel_h, kw = spec_.kernel_w;
    for (int c = 0; c < spec_.in_channels; ++c)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          T* dst = cols.row((c * kh + ki) * kw + kj).data();
          const T* src = x.data.row(c).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * spec_.stride_h - spec_.pad_h + ki;
            T* d = dst + static_cast<std::ptrdiff_t>(oy) * wo;
            if (iy < 0 || iy >= x.height) {
              std::fill(d, d + wo, T(0));
              continue;
            }
            const T* s = src + static_cast<std::ptrdiff_t>(iy) * x.width;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * spec_.stride_w - spec_.pad_w + kj;
              d[ox] = (ix >= 0 && ix < x.width) ? s[ix] : T(0);
            }
          }
        }
  }

  void col2im(const Mat<T>& dcols, int ho, int wo, FeatureMap<T>& dx) const {
    const int kh = spec_.kernel_h, kw = spec_.kernel_w;
    for (int c = 0; c < spec_.in_channels; ++c)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          const T* src = dcols.row((c * kh + ki) * kw + kj).data();
          T* dst = dx.data.row(c).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * spec_.stride_h - spec_.pad_h + ki;
            if (iy < 0 || iy >= dx.height) continue;
            const T* s = src + static_cast<std::ptrdiff_t>(oy) * wo;
            T* d = dst + static_cast<std::ptrdiff_t>(iy) * dx.width;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * spec_.stride_w - spec_.pad_w + kj;
              if (ix >= 0 && ix < dx.width) d[ix] += s[ox];
            }
          }
        }
  }

  ConvSpec spec_;
  int weight_ = -1;
  int bias_ = -1;
};

template <class T>
void relu_inplace(Mat<T>& m) {
  m = m.cwiseMax(T(0));
}

/// Gradient of ReLU given its output.
template <class T>
void relu_backward_inplace(Mat<T>& grad, const Mat<T>& output) {
  grad = (output.array() > T(0)).select(grad, T(0));
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
struct LinearCache {
  Mat<T> input;
};

/// y = x·W + b with W stored in × out.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int in, int out) : in_(in), out_(out) {
    weight_ = store.add(name + ".weight", {in, out}, true);
    bias_ = store.add(name + ".bias", {out}, false);
  }
  int in() const { return in_; }
  int out() const { return out_; }
  int weight_id() const { return weight_; }
  int bias_id() const { return bias_; }

  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, LinearCache<T>* cache) const {
    Mat<T> y = x * store.value_mat(weight_, in_, out_);
    y.rowwise() += store.value_mat(bias_, 1, out_).row(0);
    if (cache != nullptr) cache->input = x;
    return y;
  }

  Mat<T> backward(ParamStore<T>& store, const Mat<T>& dy, const LinearCache<T>& cache) const {
    store.grad_mat(weight_, in_, out_).noalias() += cache.input.transpose() * dy;
    store.grad_mat(bias_, 1, out_).row(0) += dy.colwise().sum();
    return dy * std::as_const(store).value_mat(weight_, in_, out_).transpose();
  }

 private:
  int in_ = 0, out_ = 0;
  int weight_ = -1, bias_ = -1;
};

template <class T>
struct LayerNormCache {
  Mat<T> normalized;
  std::vector<T> inv_std;
};

/// Per-row normalization over the feature dimension.
template <class T>
class LayerNorm {
 public:
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, int dim) : dim_(dim) {
    gamma_ = store.add(name + ".gamma", {dim}, false);
    beta_ = store.add(name + ".beta", {dim}, false);
  }
  int gamma_id() const { return gamma_; }
  int beta_id() const { return beta_; }

  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, LayerNormCache<T>* cache) const {
    const auto g = store.value_mat(gamma_, 1, dim_).row(0);
    const auto b = store.value_mat(beta_, 1, dim_).row(0);
    Mat<T> xhat(x.rows(), x.cols());
    std::vector<T> inv(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const T mean = x.row(r).mean();
      const T var = (x.row(r).array() - mean).square().mean();
      const T is = T(1) / std::sqrt(var + T(kEps));
      xhat.row(r) = (x.row(r).array() - mean) * is;
      inv[static_cast<std::size_t>(r)] = is;
    }
    Mat<T> y = (xhat.array().rowwise() * g.array()).rowwise() + b.array();
    if (cache != nullptr) {
      cache->normalized = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  Mat<T> backward(ParamStore<T>& store, const Mat<T>& dy, const LayerNormCache<T>& cache) const {
    const auto g = std::as_const(store).value_mat(gamma_, 1, dim_).row(0);
    store.grad_mat(gamma_, 1, dim_).row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
    store.grad_mat(beta_, 1, dim_).row(0) += dy.colwise().sum();
    Mat<T> dxhat = dy.array().rowwise() * g.array();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const T m1 = dxhat.row(r).mean();
      const T m2 = (dxhat.row(r).array() * cache.normalized.row(r).array()).mean();
      dx.row(r) = cache.inv_std[static_cast<std::size_t>(r)] *
                  (dxhat.row(r).array() - m1 - cache.normalized.row(r).array() * m2);
    }
    return dx;
  }

 private:
  int dim_ = 0;
  int gamma_ = -1, beta_ = -1;
};

template <class T>
struct AttentionCache {
  LinearCache<T> qkv_in;
  LinearCache<T> out_in;
  Mat<T> qkv;                 // T × 3D
  std::vector<Mat<T>> probs;  // per head, T × T
};

/// Multi-head self-attention. `key_visible[j] == false` removes key j from
/// every query's softmax (its logit is treated as -inf).
template <class T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, int dim, int heads)
      : dim_(dim), heads_(heads) {
    if (dim % heads != 0) throw Error("attention: dim must be divisible by heads");
    qkv_ = Linear<T>(store, name + ".qkv", dim, 3 * dim);
    proj_ = Linear<T>(store, name + ".proj", dim, dim);
  }
  const Linear<T>& qkv() const { return qkv_; }
  const Linear<T>& proj() const { return proj_; }

  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, const std::vector<bool>& key_visible,
                 AttentionCache<T>* cache) const {
    const int n = static_cast<int>(x.rows());
    const int hd = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    AttentionCache<T> local;
    AttentionCache<T>& c = cache != nullptr ? *cache : local;
    c.qkv = qkv_.forward(store, x, &c.qkv_in);
    c.probs.assign(static_cast<std::size_t>(heads_), Mat<T>());
    Mat<T> concat(n, dim_);
    for (int h = 0; h < heads_; ++h) {
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(dim_ + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * dim_ + h * hd, hd);
      Mat<T> s = (q * k.transpose()) * scale;
      for (int i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < n; ++j)
          if (key_visible[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j));
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
          const T e = key_visible[static_cast<std::size_t>(j)] ? std::exp(s(i, j) - mx) : T(0);
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      concat.middleCols(h * hd, hd).noalias() = s * v;
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    return proj_.forward(store, concat, &c.out_in);
  }

  Mat<T> backward(ParamStore<T>& store, const Mat<T>& dy, const AttentionCache<T>& c) const {
    const int n = static_cast<int>(dy.rows());
    const int hd = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const Mat<T> dconcat = proj_.backward(store, dy, c.out_in);
    Mat<T> dqkv = Mat<T>::Zero(n, 3 * dim_);
    for (int h = 0; h < heads_; ++h) {
      const auto& p = c.probs[static_cast<std::size_t>(h)];
      const auto q = c.qkv.middleCols(h * hd, hd);
      const auto k = c.qkv.middleCols(dim_ + h * hd, hd);
      const auto v = c.qkv.middleCols(2 * dim_ + h * hd, hd);
      const auto dout = dconcat.middleCols(h * hd, hd);
      const Mat<T> dp = dout * v.transpose();
      dqkv.middleCols(2 * dim_ + h * hd, hd).noalias() = p.transpose() * dout;
      Mat<T> ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
      ds *= scale;
      dqkv.middleCols(h * hd, hd).noalias() = ds * k;
      dqkv.middleCols(dim_ + h * hd, hd).noalias() = ds.transpose() * q;
    }
    return qkv_.backward(store, dqkv, c.qkv_in);
  }

 private:
  int dim_ = 0, heads_ = 1;
  Linear<T> qkv_;
  Linear<T> proj_;
};

template <class T>
struct BlockCache {
  LayerNormCache<T> ln1, ln2;
  AttentionCache<T> attn;
  LinearCache<T> fc1, fc2;
  Mat<T> hidden_pre;  // fc1 output before GELU
};

/// Pre-norm transformer encoder block.
template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& store, const std::string& name, int dim, int heads, int ffn_dim)
      : ln1_(store, name + ".ln1", dim),
        attn_(store, name + ".attn", dim, heads),
        ln2_(store, name + ".ln2", dim),
        fc1_(store, name + ".fc1", dim, ffn_dim),
        fc2_(store, name + ".fc2", ffn_dim, dim) {}

  const MultiHeadAttention<T>& attention() const { return attn_; }
  const Linear<T>& fc1() const { return fc1_; }
  const Linear<T>& fc2() const { return fc2_; }
  const LayerNorm<T>& ln1() const { return ln1_; }
  const LayerNorm<T>& ln2() const { return ln2_; }

  Mat<T> forward(const ParamStore<T>& store, const Mat<T>& x, const std::vector<bool>& key_visible,
                 BlockCache<T>* cache) const {
    BlockCache<T> local;
    BlockCache<T>& c = cache != nullptr ? *cache : local;
    Mat<T> x1 = x + attn_.forward(store, ln1_.forward(store, x, &c.ln1), key_visible, &c.attn);
    c.hidden_pre = fc1_.forward(store, ln2_.forward(store, x1, &c.ln2), &c.fc1);
    const Mat<T> hidden = c.hidden_pre.unaryExpr([](T v) { return gelu(v); });
    x1 += fc2_.forward(store, hidden, &c.fc2);
    return x1;
  }

  Mat<T> backward(ParamStore<T>& store, const Mat<T>& dy, const BlockCache<T>& c) const {
    Mat<T> dhidden = fc2_.backward(store, dy, c.fc2);
    dhidden.array() *= c.hidden_pre.unaryExpr([](T v) { return gelu_derivative(v); }).array();
    Mat<T> dx1 = dy + ln2_.backward(store, fc1_.backward(store, dhidden, c.fc1), c.ln2);
    return dx1 + ln1_.backward(store, attn_.backward(store, dx1, c.attn), c.ln1);
  }

 private:
  LayerNorm<T> ln1_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> ln2_;
  Linear<T> fc1_;
  Linear<T> fc2_;
};

/// Row-wise log-softmax.
template <class T>
Mat<T> log_softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    const T lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

/// Maps d(loss)/d(logprobs) to d(loss)/d(logits) through log-softmax.
template <class T>
Mat<T> log_softmax_backward(const Mat<T>& dlogprobs, const Mat<T>& logprobs) {
  const auto rowsum = dlogprobs.rowwise().sum();
  return dlogprobs - (logprobs.array().exp().colwise() * rowsum.array()).matrix();
}

}  // namespace fpthd::nn
