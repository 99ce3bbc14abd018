#include "fpthd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "binary_io.hpp"
#include "fpthd/metrics.hpp"
#include "fpthd/unicode.hpp"

namespace fpthd {

namespace {

constexpr std::uint64_t kBatchStream = 0xba7c4;
constexpr std::uint64_t kMaskStream = 0x3a5c;
constexpr std::string_view kStateMagic{"FPTHD-S\0", 8};
constexpr std::uint32_t kStateVersion = 1;

struct LoopState {
  std::int64_t iteration = 0;
  double best_cer = std::numeric_limits<double>::infinity();
  double loss_sum = 0.0;
  std::int64_t loss_count = 0;
  std::int64_t skipped = 0;
  std::vector<TrainLogRow> log;
};

void save_state(const std::filesystem::path& path, const OcrModel<float>& model, const nn::AdamState<float>& adam,
                const LoopState& st) {
  binio::Writer w;
  w.bytes(kStateMagic);
  w.u32(kStateVersion);
  w.u64(static_cast<std::uint64_t>(st.iteration));
  w.f64(st.best_cer);
  w.f64(st.loss_sum);
  w.u64(static_cast<std::uint64_t>(st.loss_count));
  w.u64(static_cast<std::uint64_t>(st.skipped));
  binio::write_params(w, model.params());
  w.u64(static_cast<std::uint64_t>(adam.step));
  w.u64(adam.m.size());
  for (float v : adam.m) w.f32(v);
  for (float v : adam.v) w.f32(v);
  w.u32(static_cast<std::uint32_t>(st.log.size()));
  for (const auto& r : st.log) {
    w.u64(static_cast<std::uint64_t>(r.iteration));
    w.f64(r.train_loss);
    w.f64(r.val_cer);
    w.f64(r.val_wer);
    w.f64(r.lr);
  }
  write_file_atomic(path, w.data());
}

LoopState load_state(const std::filesystem::path& path, OcrModel<float>& model, nn::AdamState<float>& adam) {
  const std::string bytes = read_file(path);
  binio::Reader r(bytes);
  if (bytes.size() < kStateMagic.size() || r.bytes(kStateMagic.size()) != kStateMagic)
    throw Error("'" + path.string() + "' is not a training state file");
  if (r.u32() != kStateVersion) throw Error("'" + path.string() + "': unsupported training state version");
  LoopState st;
  st.iteration = static_cast<std::int64_t>(r.u64());
  st.best_cer = r.f64();
  st.loss_sum = r.f64();
  st.loss_count = static_cast<std::int64_t>(r.u64());
  st.skipped = static_cast<std::int64_t>(r.u64());
  binio::read_params(r, model.params());
  adam.step = static_cast<std::int64_t>(r.u64());
  const auto n = r.u64();
  if (n != 0 && n != model.params().size()) throw Error("training state optimizer size mismatch");
  adam.m.resize(n);
  adam.v.resize(n);
  for (auto& v : adam.m) v = r.f32();
  for (auto& v : adam.v) v = r.f32();
  const auto rows = r.u32();
  for (std::uint32_t i = 0; i < rows; ++i) {
    TrainLogRow row;
    row.iteration = static_cast<std::int64_t>(r.u64());
    row.train_loss = r.f64();
    row.val_cer = r.f64();
    row.val_wer = r.f64();
    row.lr = r.f64();
    st.log.push_back(row);
  }
  if (!r.done()) throw Error("training state has trailing bytes");
  return st;
}

Raster invert(const Raster& r) {
  Raster out = r;
  for (auto& v : out.pixels) v = 1.0F - v;
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  auto ratio = [](double v, const char* name) {
    if (!(v >= 0.0 && v < 1.0)) throw Error(std::string(name) + " must be in [0,1)");
  };
  ratio(mask_ratio, "mask_ratio");
  ratio(attn_mask_ratio, "attn_mask_ratio");
  ratio(sample_prob, "sample_prob");
  if (!(max_lr > 0.0)) throw Error("max_lr must be positive");
  if (!(weight_decay >= 0.0)) throw Error("weight_decay must be non-negative");
  if (train_batch < 1) throw Error("train_batch must be >= 1");
  if (val_batch < 1) throw Error("val_batch must be >= 1");
  if (max_span < 1) throw Error("max_span must be >= 1");
  if (morph_max_kernel < 1) throw Error("morph_max_kernel must be >= 1");
  if (morph_iterations < 0) throw Error("morph_iterations must be >= 0");
  if (total_iterations < 0) throw Error("total_iterations must be >= 0");
  if (validation_interval < 0) throw Error("validation_interval must be >= 0");
  if (!(sam_rho > 0.0)) throw Error("sam_rho must be positive");
  if (!(alpha > 0.0)) throw Error("alpha must be positive");
  if (image_height != 64) throw Error("image height must be 64 for the convolutional tokenizer");
  if (projection != 8) throw Error("projection must be 8 for the convolutional tokenizer");
  if (image_width < 8 || image_width % 8 != 0) throw Error("image width must be a positive multiple of 8");
  if (token_dim < 2 || token_dim % 2 != 0) throw Error("token_dim must be even");
  if (heads < 1 || token_dim % heads != 0) throw Error("token_dim must be divisible by heads");
  if (blocks < 0) throw Error("blocks must be >= 0");
}

OcrConfig TrainConfig::model_config() const {
  OcrConfig c = OcrConfig::standard(token_dim, blocks, heads);
  c.input_width = image_width;
  c.input_height = image_height;
  c.stride = projection;
  return c;
}

double cosine_lr(std::int64_t iteration, std::int64_t total, double max_lr) {
  if (total <= 0) return max_lr;
  const double t = std::clamp(static_cast<double>(iteration) / static_cast<double>(total), 0.0, 1.0);
  const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  const double min_lr = max_lr / 100.0;
  if (iteration >= total) return min_lr;
  return max_lr * c + min_lr * (1.0 - c);
}

std::int64_t validation_interval(const TrainConfig& cfg) {
  if (cfg.validation_interval > 0) return cfg.validation_interval;
  return std::max<std::int64_t>(100, cfg.total_iterations / 200);
}

Raster morph_augment(const Raster& line, int max_kernel, int iterations, double apply_prob, Rng& rng) {
  if (max_kernel < 1) throw Error("morph_augment: max_kernel must be >= 1");
  if (!rng.bernoulli(apply_prob)) return line;
  const bool dilation = rng.bernoulli(0.5);
  const int k = static_cast<int>(rng.uniform_int(1, max_kernel));
  if (k == 1 || iterations <= 0) return line;
  Raster ink = invert(line);
  for (int i = 0; i < iterations; ++i) ink = dilation ? dilate(ink, k) : erode(ink, k);
  return invert(ink);
}

Raster rotate(const Raster& line, double degrees) {
  if (line.empty() || degrees == 0.0) return line;
  const float bg = median_border(line);
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  const double cx = line.width / 2.0, cy = line.height / 2.0;
  Raster out(line.width, line.height, bg);
  for (int y = 0; y < line.height; ++y)
    for (int x = 0; x < line.width; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double sx = c * dx + s * dy + cx - 0.5;
      const double sy = -s * dx + c * dy + cy - 0.5;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      double acc = 0.0;
      for (int j = 0; j < 2; ++j)
        for (int i = 0; i < 2; ++i) {
          const double wgt = (i ? fx : 1.0 - fx) * (j ? fy : 1.0 - fy);
          const int px = x0 + i, py = y0 + j;
          acc += wgt * (line.contains(px, py) ? line.at(px, py) : bg);
        }
      out.at(x, y) = static_cast<float>(acc);
    }
  return out;
}

ValidationScore validate(const OcrModel<float>& model, std::span<const LineSample> val) {
  metrics::Counts chars, words;
  for (const auto& s : val) {
    const std::string hyp = recognize(model, s.image);
    const auto c = metrics::char_counts(s.text, hyp);
    const auto w = metrics::word_counts(s.text, hyp);
    chars.edits += c.edits;
    chars.length += c.length;
    words.edits += w.edits;
    words.length += w.length;
  }
  return {chars.rate(), words.rate()};
}

double batch_loss(OcrModel<float>& model, std::span<const OcrInput> inputs, std::span<const ctc::LabelSequence> labels,
                  const TrainConfig& cfg, std::uint64_t mask_seed, bool with_grad, std::int64_t* skipped) {
  if (inputs.size() != labels.size()) throw Error("batch_loss: inputs and labels differ in count");
  std::size_t usable = 0;
  for (std::size_t b = 0; b < inputs.size(); ++b)
    if (ctc::feasible(inputs[b].valid_tokens, labels[b])) ++usable;
  if (skipped) *skipped += static_cast<std::int64_t>(inputs.size() - usable);
  if (usable == 0) return 0.0;
  const MaskingConfig masking = cfg.masking();
  const double scale = cfg.alpha / static_cast<double>(usable);
  double total = 0.0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (!ctc::feasible(inputs[b].valid_tokens, labels[b])) continue;
    Rng rng(derive_seed(mask_seed, b));
    OcrModel<float>::Tape tape;
    const auto out = model.forward(inputs[b], true, masking, rng, with_grad ? &tape : nullptr);
    const auto loss = ctc::ctc_loss(out.logprobs, out.valid_tokens, labels[b]);
    total += loss.value;
    if (with_grad) {
      const auto g = ctc::ctc_grad(out.logprobs, out.valid_tokens, labels[b]);
      nn::Mat<float> dl = (g * scale).cast<float>();
      model.backward(tape, dl);
    }
  }
  return cfg.alpha * total / static_cast<double>(usable);
}

std::string train_log_header() { return "iteration,train_loss,val_cer,val_wer,lr\n"; }

std::string format_log_row(const TrainLogRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.iteration), r.train_loss,
                r.val_cer, r.val_wer, r.lr);
  return buf;
}

TrainResult train_loop(OcrModel<float>& model, std::span<const LineSample> train, std::span<const LineSample> val,
                       const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train.empty()) throw Error("training set is empty");
  const Charset& charset = model.charset();
  std::string offenders;
  auto check_chars = [&](std::span<const LineSample> set, const char* name) {
    for (const auto& s : set) {
      const auto miss = charset.missing(s.text);
      if (!miss.empty()) offenders += std::string("  ") + name + " '" + s.id + "': " + unicode::encode_utf8(miss) + "\n";
    }
  };
  check_chars(train, "train");
  check_chars(val, "val");
  if (!offenders.empty()) throw Error("characters missing from the charset:\n" + offenders);
  if (model.config().input_width != cfg.image_width || model.config().input_height != cfg.image_height)
    throw Error("model input size does not match the training configuration");

  std::vector<ctc::LabelSequence> labels;
  labels.reserve(train.size());
  for (const auto& s : train) labels.push_back(charset.encode(s.text));

  auto& params = model.params();
  const auto decay = nn::decay_mask(params);
  nn::AdamState<float> adam;
  LoopState st;
  if (options.resume) {
    if (options.state_path.empty()) throw Error("resume requested without a state file");
    st = load_state(options.state_path, model, adam);
    log_info("resuming at iteration " + std::to_string(st.iteration));
  }
  const std::int64_t total = cfg.total_iterations;
  const std::int64_t stop = std::min(total, options.stop_after.value_or(total));
  const std::int64_t every = validation_interval(cfg);
  const int batch = cfg.train_batch;

  auto write_log = [&] {
    if (options.log_path.empty()) return;
    std::string csv = train_log_header();
    for (const auto& r : st.log) csv += format_log_row(r);
    write_file_atomic(options.log_path, csv);
  };
  write_log();

  std::vector<OcrInput> inputs(static_cast<std::size_t>(batch));
  std::vector<ctc::LabelSequence> batch_labels(static_cast<std::size_t>(batch));
  TrainResult result;
  for (std::int64_t it = st.iteration; it < stop; ++it) {
    const double lr = cosine_lr(it, total, cfg.max_lr);
    Rng rng(derive_seed(cfg.seed, kBatchStream, static_cast<std::uint64_t>(it)));
    for (int b = 0; b < batch; ++b) {
      const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1));
      Raster img = morph_augment(train[idx].image, cfg.morph_max_kernel, cfg.morph_iterations, cfg.sample_prob, rng);
      if (cfg.rotation_degrees > 0.0) img = rotate(img, rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees));
      inputs[static_cast<std::size_t>(b)] = prepare_input(img, model.config());
      batch_labels[static_cast<std::size_t>(b)] = labels[idx];
    }
    const std::uint64_t mask_seed = derive_seed(cfg.seed, kMaskStream, static_cast<std::uint64_t>(it));
    int calls = 0;
    auto grad_fn = [&] {
      params.zero_grad();
      return batch_loss(model, inputs, batch_labels, cfg, mask_seed, true, calls++ == 0 ? &st.skipped : nullptr);
    };
    SamResult step;
    try {
      step = sam_step<float>(params.values(), params.grads(), grad_fn, decay, lr, cfg.sam_rho, cfg.weight_decay, cfg.optimizer,
                      &adam);
    } catch (const DivergenceError&) {
      if (!options.state_path.empty()) save_state(options.state_path, model, adam, st);
      log(LogLevel::error, "training diverged at iteration " + std::to_string(it));
      throw;
    }
    st.loss_sum += step.loss;
    ++st.loss_count;
    st.iteration = it + 1;
    ++result.iterations_run;

    if (st.iteration % every == 0 || st.iteration == total) {
      const auto score = validate(model, val);
      TrainLogRow row{st.iteration, st.loss_count ? st.loss_sum / static_cast<double>(st.loss_count) : 0.0, score.cer,
                      score.wer, lr};
      st.loss_sum = 0.0;
      st.loss_count = 0;
      st.log.push_back(row);
      if (score.cer < st.best_cer) {
        st.best_cer = score.cer;
        if (!options.checkpoint_path.empty()) save_ocr_checkpoint(options.checkpoint_path, model);
      }
      write_log();
      if (!options.state_path.empty()) save_state(options.state_path, model, adam, st);
      char buf[160];
      std::snprintf(buf, sizeof buf, "iter %lld loss %.4f val CER %.4f WER %.4f lr %.3g",
                    static_cast<long long>(row.iteration), row.train_loss, row.val_cer, row.val_wer, row.lr);
      log_info(buf);
      if (options.on_log) options.on_log(row);
    }
  }
  if (stop < total && !options.state_path.empty()) save_state(options.state_path, model, adam, st);
  if (!std::isfinite(st.best_cer) && !options.checkpoint_path.empty() &&
      !(options.resume && std::filesystem::exists(options.checkpoint_path)))
    save_ocr_checkpoint(options.checkpoint_path, model);
  if (st.skipped > 0) log_warn(std::to_string(st.skipped) + " samples skipped because their targets do not fit the line");
  result.log = st.log;
  result.best_cer = st.best_cer;
  result.skipped_samples = st.skipped;
  return result;
}

}  // namespace fpthd
