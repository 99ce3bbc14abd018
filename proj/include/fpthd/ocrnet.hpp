#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fpthd/ctc.hpp"
#include "fpthd/geometry.hpp"
#include "fpthd/nn/layers.hpp"
#include "fpthd/nn/params.hpp"
#include "fpthd/random.hpp"
#include "fpthd/raster.hpp"

namespace fpthd {

/// Ordered set of output characters. Label 0 is the CTC blank; chars[i] has
/// label i + 1.
class Charset {
 public:
  Charset() = default;
  explicit Charset(std::u32string chars);

  /// Sorted union of the code points of all (NFC-normalized) texts.
  static Charset from_texts(std::span<const std::string> texts);

  const std::u32string& chars() const { return chars_; }
  int size() const { return static_cast<int>(chars_.size()); }
  int classes() const { return size() + 1; }
  std::optional<int> label_of(char32_t cp) const;
  char32_t char_of(int label) const;

  /// Throws fpthd::Error naming the first unknown character.
  ctc::LabelSequence encode(std::string_view utf8) const;
  std::string decode(const ctc::LabelSequence& labels) const;
  /// Distinct characters of `utf8` that are not in the set.
  std::u32string missing(std::string_view utf8) const;

  friend bool operator==(const Charset&, const Charset&) = default;

 private:
  std::u32string chars_;
};

struct ConvStageSpec {
  enum class Kind : std::uint8_t { plain = 0, residual = 1 };
  Kind kind = Kind::plain;
  nn::ConvSpec conv;
  bool relu = true;
  friend bool operator==(const ConvStageSpec&, const ConvStageSpec&) = default;
};

struct OcrConfig {
  int input_height = 64;
  int input_width = 512;
  int stride = 8;  // horizontal pixels per token
  int token_dim = 128;
  int blocks = 4;
  int heads = 4;
  int ffn_dim = 512;
  std::vector<ConvStageSpec> conv_stages;

  int tokens() const { return input_width / stride; }

  /// Residual conv stack 16→32→64→D (six conv layers, stride 8 across and
  /// 64 down) feeding `blocks` encoder blocks.
  static OcrConfig standard(int token_dim = 128, int blocks = 4, int heads = 4);
  /// Two conv layers over an 8×64 input, D = 8, one block, T = 8.
  static OcrConfig micro();

  friend bool operator==(const OcrConfig&, const OcrConfig&) = default;
};

/// Masking hyper-parameters applied in training mode.
struct MaskingConfig {
  double mask_ratio = 0.4;
  double attn_mask_ratio = 0.1;
  int max_span = 8;
};

/// Model input: a standardized input_height × input_width raster plus the
/// number of tokens that cover real (non-padding) columns.
struct OcrInput {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  int valid_tokens = 0;
};

/// Resizes to the model height (aspect preserved, width capped), right-pads
/// with the line's background and standardizes with statistics of the
/// unpadded part (eps 1e-6).
OcrInput prepare_input(const Raster& line, const OcrConfig& cfg);

struct SpanMask {
  std::vector<bool> masked;
  std::vector<std::pair<int, int>> spans;  // (start, length)

  int count() const;
};

/// Masks exactly round(mask_ratio·T) positions in disjoint, non-touching
/// spans of length <= max_span.
SpanMask sample_span_mask(int length, double mask_ratio, int max_span, Rng& rng);

/// T×D sinusoidal table: (t,2i) = sin(t/10000^(2i/D)), (t,2i+1) = cos(...).
template <class T>
nn::Mat<T> sinusoidal_positions(int length, int dim) {
  if (dim % 2 != 0) throw Error("sinusoidal positions need an even dimension");
  nn::Mat<T> pe(length, dim);
  for (int t = 0; t < length; ++t)
    for (int i = 0; i < dim / 2; ++i) {
      const double angle = t / std::pow(10000.0, 2.0 * i / dim);
      pe(t, 2 * i) = static_cast<T>(std::sin(angle));
      pe(t, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  return pe;
}

/// Rows flagged in `mask` are replaced by `mask_token`.
template <class T>
nn::Mat<T> apply_mask(const nn::Mat<T>& tokens, const SpanMask& mask, std::span<const T> mask_token) {
  if (static_cast<Eigen::Index>(mask.masked.size()) != tokens.rows())
    throw Error("apply_mask: mask length does not match token count");
  if (static_cast<Eigen::Index>(mask_token.size()) != tokens.cols())
    throw Error("apply_mask: mask token width does not match");
  nn::Mat<T> out = tokens;
  for (Eigen::Index t = 0; t < tokens.rows(); ++t)
    if (mask.masked[static_cast<std::size_t>(t)])
      for (Eigen::Index d = 0; d < tokens.cols(); ++d) out(t, d) = mask_token[static_cast<std::size_t>(d)];
  return out;
}

/// Picks round(ratio·T) key positions to hide among the first `valid`
/// positions (never all of them).
std::vector<bool> sample_visible_keys(int length, int valid, double ratio, Rng* rng);

template <class T>
struct ForwardResult {
  nn::Mat<T> logprobs;  // T × classes
  int valid_tokens = 0;
};

/// CNN tokenizer, span masking with a learned mask token, sinusoidal
/// positions, pre-norm transformer encoder (no class token) and a per-token
/// linear head.
template <class T>
class OcrModel {
 public:
  struct StageCache {
    nn::ConvCache<T> c1, c2;
    nn::Mat<T> hidden;  // residual branch activation
    nn::Mat<T> output;
  };
  struct Tape {
    std::vector<StageCache> stages;
    SpanMask mask;
    std::vector<std::vector<bool>> key_visible;
    std::vector<nn::BlockCache<T>> blocks;
    nn::LayerNormCache<T> final_ln;
    nn::LinearCache<T> head;
    nn::Mat<T> logprobs;
    int valid_tokens = 0;
  };

  OcrModel() = default;
  OcrModel(OcrConfig cfg, Charset charset, std::uint64_t seed);

  const OcrConfig& config() const { return cfg_; }
  const Charset& charset() const { return charset_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  int mask_token_id() const { return mask_token_; }
  const nn::TransformerBlock<T>& block(int i) const { return blocks_[static_cast<std::size_t>(i)]; }

  /// T×D tokens from a prepared input.
  nn::Mat<T> extract_tokens(const OcrInput& input, Tape* tape = nullptr) const;

  /// Adds positions and runs the encoder blocks. Keys at or beyond
  /// `valid_tokens` are never attended to; with `rng` set each block also
  /// hides round(attn_mask_ratio·T) random keys.
  nn::Mat<T> encode(const nn::Mat<T>& tokens, int valid_tokens, double attn_mask_ratio, Rng* rng,
                    Tape* tape = nullptr) const;

  /// Full forward pass to per-token log-probabilities. Training mode applies
  /// span masking and attention masking drawn from `rng`.
  ForwardResult<T> forward(const OcrInput& input, bool train_mode, const MaskingConfig& masking, Rng& rng,
                           Tape* tape = nullptr) const;

  /// Accumulates parameter gradients for d(loss)/d(logprobs).
  void backward(const Tape& tape, const nn::Mat<T>& dlogprobs);

  /// Zeroes every residual branch output projection of the encoder blocks.
  void zero_residual_branches();

  template <class U>
  OcrModel<U> cast() const {
    OcrModel<U> out(cfg_, charset_, 0);
    out.params().copy_values_from(params_);
    return out;
  }

 private:
  nn::FeatureMap<T> run_stage(std::size_t i, const nn::FeatureMap<T>& x, StageCache* cache) const;
  nn::FeatureMap<T> stage_backward(std::size_t i, nn::FeatureMap<T> dy, const StageCache& cache);

  OcrConfig cfg_;
  Charset charset_;
  nn::ParamStore<T> params_;
  std::vector<std::pair<nn::Conv2d<T>, nn::Conv2d<T>>> stages_;
  int mask_token_ = -1;
  std::vector<nn::TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> final_ln_;
  nn::Linear<T> head_;
  nn::Mat<T> positions_;
};

/// Prepares `line` and runs the model; see OcrModel::forward.
template <class T>
ForwardResult<T> forward_logits(const Raster& line, const OcrModel<T>& model, bool train_mode, Rng& rng,
                                 const MaskingConfig& masking = {}) {
  return model.forward(prepare_input(line, model.config()), train_mode, masking, rng);
}

/// Greedy transcription of one line image.
std::string recognize(const OcrModel<float>& model, const Raster& line);

void save_ocr_checkpoint(const std::filesystem::path& path, const OcrModel<float>& model);
OcrModel<float> load_ocr_checkpoint(const std::filesystem::path& path);
std::string serialize_ocr_checkpoint(const OcrModel<float>& model);
OcrModel<float> deserialize_ocr_checkpoint(std::string_view bytes);

extern template class OcrModel<float>;
extern template class OcrModel<double>;

}  // namespace fpthd
