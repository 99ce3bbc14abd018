#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fpthd/common.hpp"
#include "fpthd/nn/optim.hpp"
#include "fpthd/ocrnet.hpp"
#include "fpthd/random.hpp"
#include "fpthd/raster.hpp"

namespace fpthd {

enum class BaseOptimizer { sgd, adamw };

struct TrainConfig {
  double max_lr = 1e-3;
  int train_batch = 64;
  int val_batch = 8;
  double weight_decay = 0.5;
  double mask_ratio = 0.4;
  double attn_mask_ratio = 0.1;
  int max_span = 8;
  int image_width = 512;
  int image_height = 64;
  int projection = 8;
  int morph_max_kernel = 2;
  int morph_iterations = 1;
  double sample_prob = 0.5;
  double alpha = 1.0;
  std::int64_t total_iterations = 100000;
  double sam_rho = 0.05;
  std::uint64_t seed = 0;

  BaseOptimizer optimizer = BaseOptimizer::sgd;
  std::int64_t validation_interval = 0;  // 0: max(100, total / 200)
  double rotation_degrees = 0.0;         // 0 disables rotation augmentation
  int token_dim = 128;
  int blocks = 4;
  int heads = 4;

  /// Throws fpthd::Error naming the first invalid field.
  void validate() const;
  OcrConfig model_config() const;
  MaskingConfig masking() const { return {mask_ratio, attn_mask_ratio, max_span}; }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Cosine decay from max_lr at iteration 0 to max_lr / 100 at `total`.
double cosine_lr(std::int64_t iteration, std::int64_t total, double max_lr);
std::int64_t validation_interval(const TrainConfig& cfg);

/// With probability `apply_prob`, dilates or erodes the ink (dark pixels) with
/// a k×k element, k ~ U{1..max_kernel}, `iterations` times.
Raster morph_augment(const Raster& line, int max_kernel, int iterations, double apply_prob, Rng& rng);

/// Rotation about the image center by `degrees`, background-filled.
Raster rotate(const Raster& line, double degrees);

class DivergenceError : public Error {
 public:
  DivergenceError() : Error("divergence") {}
};

struct SamResult {
  double loss = 0.0;       // loss at the unperturbed point
  double grad_norm = 0.0;  // ‖g‖ at the unperturbed point
};

/// One sharpness-aware step. `grad_fn` must fill `g` with the gradient at the
/// current `w` and return the loss; it is called twice on the same batch.
template <class T, class GradFn>
SamResult sam_step(std::span<T> w, std::span<const T> g, GradFn&& grad_fn, const std::vector<bool>& decay, double lr,
                   double rho, double weight_decay, BaseOptimizer optimizer = BaseOptimizer::sgd,
                   nn::AdamState<T>* adam = nullptr) {
  if (!(rho > 0.0)) throw Error("sam: rho must be positive");
  auto check = [&] {
    for (const T& v : g)
      if (!std::isfinite(static_cast<double>(v))) throw DivergenceError();
  };
  SamResult res;
  res.loss = grad_fn();
  check();
  double sq = 0.0;
  for (const T& v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  res.grad_norm = std::sqrt(sq);
  const std::vector<T> w0(w.begin(), w.end());
  // A zero gradient has no ascent direction; the step is then plain decay.
  const double scale = res.grad_norm > 0.0 ? rho / res.grad_norm : 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(static_cast<double>(w[i]) + scale * static_cast<double>(g[i]));
  grad_fn();
  check();
  std::copy(w0.begin(), w0.end(), w.begin());
  if (optimizer == BaseOptimizer::sgd) {
    nn::sgd_update<T>(w, g, decay, lr, weight_decay);
  } else {
    if (adam == nullptr) throw Error("sam: adaptive base optimizer needs a state");
    nn::adamw_update<T>(w, g, decay, *adam, lr, weight_decay);
  }
  if (!std::isfinite(res.loss)) throw DivergenceError();
  return res;
}

struct LineSample {
  std::string id;
  Raster image;
  std::string text;
};

struct TrainLogRow {
  std::int64_t iteration = 0;
  double train_loss = 0.0;
  double val_cer = 0.0;
  double val_wer = 0.0;
  double lr = 0.0;
  friend bool operator==(const TrainLogRow&, const TrainLogRow&) = default;
};

struct TrainOptions {
  std::filesystem::path checkpoint_path;  // best validation CER model
  std::filesystem::path log_path;         // CSV metrics log
  std::filesystem::path state_path;       // resumable state, written at every validation
  bool resume = false;                    // continue from state_path
  std::optional<std::int64_t> stop_after;  // stop early at this iteration (schedule still uses total)
  std::function<void(const TrainLogRow&)> on_log;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  double best_cer = 1e300;
  std::int64_t iterations_run = 0;
  std::int64_t skipped_samples = 0;
};

/// CER/WER of greedy transcriptions (no masking, no augmentation).
struct ValidationScore {
  double cer = 0.0;
  double wer = 0.0;
};
ValidationScore validate(const OcrModel<float>& model, std::span<const LineSample> val);

/// Mean CTC loss (times alpha) over a batch; accumulates parameter gradients
/// into `model` when `with_grad`. Masks are drawn from per-sample seeds so
/// repeated calls see identical masks.
double batch_loss(OcrModel<float>& model, std::span<const OcrInput> inputs, std::span<const ctc::LabelSequence> labels,
                  const TrainConfig& cfg, std::uint64_t mask_seed, bool with_grad, std::int64_t* skipped = nullptr);

std::string train_log_header();
std::string format_log_row(const TrainLogRow& row);

TrainResult train_loop(OcrModel<float>& model, std::span<const LineSample> train, std::span<const LineSample> val,
                       const TrainConfig& cfg, const TrainOptions& options = {});

}  // namespace fpthd
