#include "fpthd/ocrnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "binary_io.hpp"
#include "fpthd/unicode.hpp"

namespace fpthd {

// ---------------------------------------------------------------- charset

Charset::Charset(std::u32string chars) : chars_(std::move(chars)) {
  std::set<char32_t> seen;
  for (char32_t c : chars_)
    if (!seen.insert(c).second) throw Error("charset contains duplicate character '" + unicode::encode_utf8(c) + "'");
}

Charset Charset::from_texts(std::span<const std::string> texts) {
  std::set<char32_t> all;
  for (const auto& t : texts)
    for (char32_t c : unicode::decode_utf8(unicode::nfc(t))) all.insert(c);
  return Charset(std::u32string(all.begin(), all.end()));
}

std::optional<int> Charset::label_of(char32_t cp) const {
  const auto pos = chars_.find(cp);
  if (pos == std::u32string::npos) return std::nullopt;
  return static_cast<int>(pos) + 1;
}

char32_t Charset::char_of(int label) const {
  if (label < 1 || label > size()) throw Error("label " + std::to_string(label) + " outside charset");
  return chars_[static_cast<std::size_t>(label - 1)];
}

ctc::LabelSequence Charset::encode(std::string_view utf8) const {
  ctc::LabelSequence out;
  for (char32_t c : unicode::decode_utf8(unicode::nfc(utf8))) {
    const auto label = label_of(c);
    if (!label) throw Error("character '" + unicode::encode_utf8(c) + "' is not in the charset");
    out.push_back(*label);
  }
  return out;
}

std::string Charset::decode(const ctc::LabelSequence& labels) const {
  std::u32string s;
  for (int l : labels) s.push_back(char_of(l));
  return unicode::encode_utf8(s);
}

std::u32string Charset::missing(std::string_view utf8) const {
  std::u32string out;
  for (char32_t c : unicode::decode_utf8(unicode::nfc(utf8)))
    if (!label_of(c) && out.find(c) == std::u32string::npos) out.push_back(c);
  return out;
}

// ---------------------------------------------------------------- config

OcrConfig OcrConfig::standard(int token_dim, int blocks, int heads) {
  using K = ConvStageSpec::Kind;
  OcrConfig cfg;
  cfg.token_dim = token_dim;
  cfg.blocks = blocks;
  cfg.heads = heads;
  cfg.ffn_dim = 4 * token_dim;
  // 64×512 → 32×256 → 8×128 → 4×64 → (residual) → 1×64
  cfg.conv_stages = {
      {K::plain, {1, 16, 3, 3, 2, 2, 1, 1}, true},
      {K::plain, {16, 32, 3, 3, 4, 2, 1, 1}, true},
      {K::plain, {32, 64, 3, 3, 2, 2, 1, 1}, true},
      {K::residual, {64, 64, 3, 3, 1, 1, 1, 1}, true},
      {K::plain, {64, token_dim, 4, 3, 4, 1, 0, 1}, false},
  };
  return cfg;
}

OcrConfig OcrConfig::micro() {
  using K = ConvStageSpec::Kind;
  OcrConfig cfg;
  cfg.input_height = 8;
  cfg.input_width = 64;
  cfg.stride = 8;
  cfg.token_dim = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  // 8×64 → 4×32 → 1×8
  cfg.conv_stages = {
      {K::plain, {1, 4, 3, 3, 2, 2, 1, 1}, true},
      {K::plain, {4, 8, 4, 3, 4, 4, 0, 1}, false},
  };
  return cfg;
}

// ---------------------------------------------------------------- input

OcrInput prepare_input(const Raster& line, const OcrConfig& cfg) {
  if (line.empty()) throw Error("empty line image");
  const int h = cfg.input_height;
  const int w = cfg.input_width;
  const long scaled = std::lround(static_cast<double>(line.width) * h / line.height);
  const int valid_w = static_cast<int>(std::clamp<long>(scaled, 1, w));
  Raster r = resize(line, valid_w, h);
  for (auto& v : r.pixels) v = std::clamp(v, 0.0F, 1.0F);
  const float background = median(r.pixels);
  double mean = 0.0;
  for (float v : r.pixels) mean += v;
  mean /= static_cast<double>(r.pixels.size());
  double var = 0.0;
  for (float v : r.pixels) var += (v - mean) * (v - mean);
  var /= static_cast<double>(r.pixels.size());
  const double denom = std::sqrt(var) + 1e-6;

  OcrInput in;
  in.height = h;
  in.width = w;
  in.pixels.assign(static_cast<std::size_t>(h) * w, static_cast<float>((background - mean) / denom));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < valid_w; ++x)
      in.pixels[static_cast<std::size_t>(y) * w + x] = static_cast<float>((r.at(x, y) - mean) / denom);
  in.valid_tokens = std::clamp((valid_w + cfg.stride - 1) / cfg.stride, 1, cfg.tokens());
  return in;
}

// ---------------------------------------------------------------- masking

int SpanMask::count() const {
  return static_cast<int>(std::count(masked.begin(), masked.end(), true));
}

SpanMask sample_span_mask(int length, double mask_ratio, int max_span, Rng& rng) {
  if (length < 0) throw Error("span mask: negative length");
  if (max_span < 1) throw Error("span mask: max_span must be >= 1");
  if (!(mask_ratio >= 0.0)) throw Error("span mask: ratio must be non-negative");
  const long target = std::lround(mask_ratio * length);
  if (target > length || mask_ratio >= 1.0) throw Error("span mask: infeasible mask ratio");

  SpanMask m;
  m.masked.assign(static_cast<std::size_t>(length), false);
  auto free_range = [&](int a, int b) {
    for (int i = a; i < b; ++i)
      if (m.masked[static_cast<std::size_t>(i)]) return false;
    return true;
  };
  auto place = [&](int a, int b) {
    for (int i = a; i < b; ++i) m.masked[static_cast<std::size_t>(i)] = true;
    m.spans.emplace_back(a, b - a);
  };

  int count = 0;
  int attempts = 0;
  constexpr int kMaxAttempts = 1000;
  while (count < target) {
    const int remaining = static_cast<int>(target) - count;
    if (attempts < kMaxAttempts) {
      const int len = static_cast<int>(rng.uniform_int(1, max_span));
      // Starts may overhang either end by 2/3 of the span before clipping;
      // this keeps edge positions as likely to be masked as interior ones.
      const int overhang = (2 * len) / 3;
      const int s = static_cast<int>(rng.uniform_int(-overhang, length - len + overhang));
      const int a = std::max(0, s);
      const int b = std::min({length, s + len, a + remaining});
      if (a < b && free_range(std::max(0, a - 1), std::min(length, b + 1))) {
        place(a, b);
        count += b - a;
      } else {
        ++attempts;
      }
      continue;
    }
    // Rejection budget exhausted: fill the largest free gap, keeping a
    // separator from neighbouring spans when the gap allows it.
    int best_a = -1, best_len = 0;
    bool best_separated = false;
    for (int i = 0; i < length;) {
      if (m.masked[static_cast<std::size_t>(i)]) {
        ++i;
        continue;
      }
      int j = i;
      while (j < length && !m.masked[static_cast<std::size_t>(j)]) ++j;
      const int ua = i > 0 ? i + 1 : i;
      const int ub = j < length ? j - 1 : j;
      const bool separated = ub > ua;
      const int a = separated ? ua : i;
      const int len = separated ? ub - ua : j - i;
      if ((separated && !best_separated) || (separated == best_separated && len > best_len)) {
        best_a = a;
        best_len = len;
        best_separated = separated;
      }
      i = j;
    }
    if (best_a < 0) throw Error("span mask: no free positions left");
    const int len = std::min({best_len, max_span, remaining});
    place(best_a, best_a + len);
    count += len;
  }
  std::sort(m.spans.begin(), m.spans.end());
  return m;
}

std::vector<bool> sample_visible_keys(int length, int valid, double ratio, Rng* rng) {
  std::vector<bool> visible(static_cast<std::size_t>(length), false);
  valid = std::clamp(valid, 1, length);
  for (int j = 0; j < valid; ++j) visible[static_cast<std::size_t>(j)] = true;
  if (rng == nullptr || ratio <= 0.0) return visible;
  const int hide = std::min<int>(static_cast<int>(std::lround(ratio * length)), valid - 1);
  std::vector<int> idx(static_cast<std::size_t>(valid));
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < hide; ++k) {
    const auto pick = static_cast<std::size_t>(rng->uniform_int(k, valid - 1));
    std::swap(idx[static_cast<std::size_t>(k)], idx[pick]);
    visible[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = false;
  }
  return visible;
}

// ---------------------------------------------------------------- model

template <class T>
OcrModel<T>::OcrModel(OcrConfig cfg, Charset charset, std::uint64_t seed)
    : cfg_(std::move(cfg)), charset_(std::move(charset)) {
  if (cfg_.stride <= 0 || cfg_.input_width % cfg_.stride != 0)
    throw Error("input width must be a multiple of the token stride");
  if (cfg_.token_dim % 2 != 0) throw Error("token dimension must be even");
  Rng rng(derive_seed(seed, 0x6f63726e6574ULL));

  int c = 1, h = cfg_.input_height, w = cfg_.input_width;
  for (std::size_t i = 0; i < cfg_.conv_stages.size(); ++i) {
    const auto& st = cfg_.conv_stages[i];
    if (st.conv.in_channels != c) throw Error("conv stage " + std::to_string(i) + ": channel mismatch");
    const std::string name = "conv" + std::to_string(i);
    nn::Conv2d<T> a(params_, name + ".a", st.conv);
    nn::Conv2d<T> b;
    params_.init_normal(a.weight_id(), std::sqrt((st.relu ? 2.0 : 1.0) / a.fan_in()), rng);
    if (st.kind == ConvStageSpec::Kind::residual) {
      if (st.conv.in_channels != st.conv.out_channels || st.conv.stride_h != 1 || st.conv.stride_w != 1 ||
          st.conv.out_height(h) != h || st.conv.out_width(w) != w)
        throw Error("residual stage " + std::to_string(i) + " must preserve shape");
      b = nn::Conv2d<T>(params_, name + ".b", st.conv);
      params_.init_normal(b.weight_id(), 0.5 * std::sqrt(2.0 / b.fan_in()), rng);
    }
    stages_.emplace_back(std::move(a), std::move(b));
    c = st.conv.out_channels;
    h = st.conv.out_height(h);
    w = st.conv.out_width(w);
  }
  if (c != cfg_.token_dim || h != 1 || w != cfg_.tokens())
    throw Error("conv stack must reduce the input to 1 × " + std::to_string(cfg_.tokens()) + " × " +
                std::to_string(cfg_.token_dim) + ", got " + std::to_string(h) + " × " + std::to_string(w) +
                " × " + std::to_string(c));

  const int d = cfg_.token_dim;
  mask_token_ = params_.add("mask_token", {d}, false);
  params_.init_normal(mask_token_, 0.02, rng);
  for (int b = 0; b < cfg_.blocks; ++b) {
    blocks_.emplace_back(params_, "block" + std::to_string(b), d, cfg_.heads, cfg_.ffn_dim);
    const auto& blk = blocks_.back();
    for (const auto* lin : {&blk.attention().qkv(), &blk.attention().proj(), &blk.fc1(), &blk.fc2()})
      params_.init_normal(lin->weight_id(), std::sqrt(2.0 / (lin->in() + lin->out())), rng);
    params_.fill(blk.ln1().gamma_id(), T(1));
    params_.fill(blk.ln2().gamma_id(), T(1));
  }
  final_ln_ = nn::LayerNorm<T>(params_, "final_ln", d);
  params_.fill(final_ln_.gamma_id(), T(1));
  head_ = nn::Linear<T>(params_, "head", d, charset_.classes());
  params_.init_normal(head_.weight_id(), std::sqrt(1.0 / d), rng);
  positions_ = sinusoidal_positions<T>(cfg_.tokens(), d);
}

template <class T>
nn::FeatureMap<T> OcrModel<T>::run_stage(std::size_t i, const nn::FeatureMap<T>& x, StageCache* cache) const {
  const auto& st = cfg_.conv_stages[i];
  const auto& [a, b] = stages_[i];
  nn::FeatureMap<T> y;
  if (st.kind == ConvStageSpec::Kind::plain) {
    y = a.forward(params_, x, cache ? &cache->c1 : nullptr);
  } else {
    nn::FeatureMap<T> hmap = a.forward(params_, x, cache ? &cache->c1 : nullptr);
    nn::relu_inplace(hmap.data);
    y = b.forward(params_, hmap, cache ? &cache->c2 : nullptr);
    y.data += x.data;
    if (cache) cache->hidden = std::move(hmap.data);
  }
  if (st.relu) nn::relu_inplace(y.data);
  if (cache) cache->output = y.data;
  return y;
}

template <class T>
nn::FeatureMap<T> OcrModel<T>::stage_backward(std::size_t i, nn::FeatureMap<T> dy, const StageCache& cache) {
  const auto& st = cfg_.conv_stages[i];
  const auto& [a, b] = stages_[i];
  const bool need_input = i > 0;
  if (st.relu) nn::relu_backward_inplace(dy.data, cache.output);
  if (st.kind == ConvStageSpec::Kind::plain) return a.backward(params_, dy, cache.c1, need_input);
  nn::FeatureMap<T> dh = b.backward(params_, dy, cache.c2);
  nn::relu_backward_inplace(dh.data, cache.hidden);
  nn::FeatureMap<T> dx = a.backward(params_, dh, cache.c1, true);
  dx.data += dy.data;
  return dx;
}

template <class T>
nn::Mat<T> OcrModel<T>::extract_tokens(const OcrInput& input, Tape* tape) const {
  if (input.pixels.empty()) throw Error("empty OCR input");
  if (input.height != cfg_.input_height || input.width != cfg_.input_width)
    throw Error("OCR input must be " + std::to_string(cfg_.input_width) + "×" + std::to_string(cfg_.input_height));
  nn::FeatureMap<T> x(1, input.height, input.width);
  for (std::size_t i = 0; i < input.pixels.size(); ++i) x.data(0, static_cast<Eigen::Index>(i)) = static_cast<T>(input.pixels[i]);
  if (tape) tape->stages.assign(stages_.size(), StageCache{});
  for (std::size_t i = 0; i < stages_.size(); ++i) x = run_stage(i, x, tape ? &tape->stages[i] : nullptr);
  return x.data.transpose();
}

template <class T>
nn::Mat<T> OcrModel<T>::encode(const nn::Mat<T>& tokens, int valid_tokens, double attn_mask_ratio, Rng* rng,
                               Tape* tape) const {
  if (tokens.rows() != positions_.rows() || tokens.cols() != positions_.cols())
    throw Error("encode: token matrix has the wrong shape");
  if (!tokens.allFinite()) throw Error("encode: non-finite input tokens");
  const int n = static_cast<int>(tokens.rows());
  nn::Mat<T> x = tokens + positions_;
  if (tape) {
    tape->blocks.assign(blocks_.size(), nn::BlockCache<T>{});
    tape->key_visible.clear();
  }
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    auto visible = sample_visible_keys(n, valid_tokens, attn_mask_ratio, rng);
    x = blocks_[b].forward(params_, x, visible, tape ? &tape->blocks[b] : nullptr);
    if (tape) tape->key_visible.push_back(std::move(visible));
  }
  return x;
}

template <class T>
ForwardResult<T> OcrModel<T>::forward(const OcrInput& input, bool train_mode, const MaskingConfig& masking, Rng& rng,
                                      Tape* tape) const {
  nn::Mat<T> tokens = extract_tokens(input, tape);
  const int n = static_cast<int>(tokens.rows());
  const int valid = std::clamp(input.valid_tokens, 1, n);
  SpanMask mask;
  mask.masked.assign(static_cast<std::size_t>(n), false);
  if (train_mode && masking.mask_ratio > 0.0) {
    const SpanMask sub = sample_span_mask(valid, masking.mask_ratio, masking.max_span, rng);
    std::copy(sub.masked.begin(), sub.masked.end(), mask.masked.begin());
    mask.spans = sub.spans;
    tokens = apply_mask<T>(tokens, mask, params_.value(mask_token_));
  }
  nn::Mat<T> x = encode(tokens, valid, train_mode ? masking.attn_mask_ratio : 0.0, train_mode ? &rng : nullptr, tape);
  nn::Mat<T> h = final_ln_.forward(params_, x, tape ? &tape->final_ln : nullptr);
  nn::Mat<T> logits = head_.forward(params_, h, tape ? &tape->head : nullptr);
  ForwardResult<T> out{nn::log_softmax_rows(logits), valid};
  if (tape) {
    tape->mask = std::move(mask);
    tape->logprobs = out.logprobs;
    tape->valid_tokens = valid;
  }
  return out;
}

template <class T>
void OcrModel<T>::backward(const Tape& tape, const nn::Mat<T>& dlogprobs) {
  nn::Mat<T> dx = head_.backward(params_, nn::log_softmax_backward(dlogprobs, tape.logprobs), tape.head);
  dx = final_ln_.backward(params_, dx, tape.final_ln);
  for (std::size_t b = blocks_.size(); b-- > 0;) dx = blocks_[b].backward(params_, dx, tape.blocks[b]);
  auto dmask = params_.grad(mask_token_);
  for (Eigen::Index t = 0; t < dx.rows(); ++t) {
    if (!tape.mask.masked[static_cast<std::size_t>(t)]) continue;
    for (Eigen::Index d = 0; d < dx.cols(); ++d) dmask[static_cast<std::size_t>(d)] += dx(t, d);
    dx.row(t).setZero();
  }
  nn::FeatureMap<T> dy(cfg_.token_dim, 1, cfg_.tokens());
  dy.data = dx.transpose();
  for (std::size_t i = stages_.size(); i-- > 0;) dy = stage_backward(i, std::move(dy), tape.stages[i]);
}

template <class T>
void OcrModel<T>::zero_residual_branches() {
  for (const auto& blk : blocks_)
    for (const auto* lin : {&blk.attention().proj(), &blk.fc2()}) {
      params_.fill(lin->weight_id(), T(0));
      params_.fill(lin->bias_id(), T(0));
    }
}

template class OcrModel<float>;
template class OcrModel<double>;

std::string recognize(const OcrModel<float>& model, const Raster& line) {
  Rng rng(0);
  const auto out = forward_logits(line, model, false, rng);
  return model.charset().decode(ctc::greedy_decode(out.logprobs, out.valid_tokens));
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr std::string_view kOcrMagic{"FPTHD-O\0", 8};
constexpr std::uint32_t kOcrVersion = 1;
}  // namespace

std::string serialize_ocr_checkpoint(const OcrModel<float>& model) {
  binio::Writer w;
  w.bytes(kOcrMagic);
  w.u32(kOcrVersion);
  const auto& c = model.config();
  for (int v : {c.input_height, c.input_width, c.stride, c.token_dim, c.blocks, c.heads, c.ffn_dim}) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(c.conv_stages.size()));
  for (const auto& st : c.conv_stages) {
    w.u8(static_cast<std::uint8_t>(st.kind));
    w.u8(st.relu ? 1 : 0);
    const auto& s = st.conv;
    for (int v : {s.in_channels, s.out_channels, s.kernel_h, s.kernel_w, s.stride_h, s.stride_w, s.pad_h, s.pad_w}) w.i32(v);
  }
  const auto& chars = model.charset().chars();
  w.u32(static_cast<std::uint32_t>(chars.size()));
  for (char32_t ch : chars) {
    const auto bytes = unicode::encode_utf8(ch);
    w.u8(static_cast<std::uint8_t>(bytes.size()));
    w.bytes(bytes);
  }
  binio::write_params(w, model.params());
  return w.data();
}

OcrModel<float> deserialize_ocr_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes);
  if (bytes.size() < kOcrMagic.size() || r.bytes(kOcrMagic.size()) != kOcrMagic)
    throw Error("not an OCR checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kOcrVersion) throw Error("unsupported OCR checkpoint version " + std::to_string(version));
  OcrConfig c;
  c.input_height = static_cast<int>(r.u32());
  c.input_width = static_cast<int>(r.u32());
  c.stride = static_cast<int>(r.u32());
  c.token_dim = static_cast<int>(r.u32());
  c.blocks = static_cast<int>(r.u32());
  c.heads = static_cast<int>(r.u32());
  c.ffn_dim = static_cast<int>(r.u32());
  const auto stages = r.u32();
  if (stages > 64) throw Error("OCR checkpoint: implausible stage count");
  for (std::uint32_t i = 0; i < stages; ++i) {
    ConvStageSpec st;
    const auto kind = r.u8();
    if (kind > 1) throw Error("OCR checkpoint: unknown stage kind");
    st.kind = static_cast<ConvStageSpec::Kind>(kind);
    st.relu = r.u8() != 0;
    auto& s = st.conv;
    for (int* v : {&s.in_channels, &s.out_channels, &s.kernel_h, &s.kernel_w, &s.stride_h, &s.stride_w, &s.pad_h, &s.pad_w})
      *v = r.i32();
    c.conv_stages.push_back(st);
  }
  const auto nchars = r.u32();
  std::u32string chars;
  for (std::uint32_t i = 0; i < nchars; ++i) {
    const auto len = r.u8();
    const auto cps = unicode::decode_utf8(r.bytes(len));
    if (cps.size() != 1) throw Error("OCR checkpoint: malformed charset entry");
    chars.push_back(cps[0]);
  }
  OcrModel<float> model(c, Charset(std::move(chars)), 0);
  binio::read_params(r, model.params());
  if (!r.done()) throw Error("OCR checkpoint has trailing bytes");
  return model;
}

void save_ocr_checkpoint(const std::filesystem::path& path, const OcrModel<float>& model) {
  write_file_atomic(path, serialize_ocr_checkpoint(model));
}

OcrModel<float> load_ocr_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_ocr_checkpoint(read_file(path));
  } catch (const Error& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
}

}  // namespace fpthd
