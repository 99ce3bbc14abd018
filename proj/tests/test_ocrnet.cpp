#include <gtest/gtest.h>

#include <cmath>

#include "fpthd/ocrnet.hpp"
#include "support.hpp"

using namespace fpthd;

namespace {

OcrModel<double> micro_model(std::uint64_t seed = 1) {
  return OcrModel<double>(OcrConfig::micro(), Charset(U"abc"), seed);
}

Raster random_line(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Raster r(w, h);
  for (auto& v : r.pixels) v = static_cast<float>(rng.uniform());
  return r;
}

}  // namespace

TEST(Charset, FromTexts) {
  std::vector<std::string> texts = {"cab", "n\xCC\x83" "a", " b"};
  const auto cs = Charset::from_texts(texts);
  EXPECT_EQ(cs.chars(), U" abcñ");
  EXPECT_EQ(cs.classes(), 6);
  EXPECT_EQ(cs.label_of(U'a'), 2);
  EXPECT_EQ(cs.decode(cs.encode("cañ")), "cañ");
  EXPECT_THROW(cs.encode("x"), Error);
  EXPECT_EQ(cs.missing("axbxz"), U"xz");
}

TEST(Tokenizer, StandardShape) {
  const auto cfg = OcrConfig::standard(16, 1, 2);
  OcrModel<float> model(cfg, Charset(U"ab"), 3);
  const auto input = prepare_input(Raster(512, 64, 0.9F), cfg);
  EXPECT_EQ(model.extract_tokens(input).rows(), 64);
  EXPECT_EQ(model.extract_tokens(input).cols(), 16);
  EXPECT_EQ(input.valid_tokens, 64);
  EXPECT_EQ(prepare_input(Raster(256, 64, 0.9F), cfg).valid_tokens, 32);
  EXPECT_EQ(prepare_input(Raster(100, 64, 0.9F), cfg).valid_tokens, 13);
  EXPECT_EQ(prepare_input(Raster(2000, 32, 0.9F), cfg).valid_tokens, 64);
}

TEST(Tokenizer, ConstantInputGivesEqualTokens) {
  auto model = micro_model();
  for (const auto& e : model.params().entries())
    if (e.name.find("bias") != std::string::npos && e.name.rfind("conv", 0) == 0)
      for (auto& v : model.params().value(static_cast<int>(&e - model.params().entries().data()))) v = 0.0;
  OcrInput in;
  in.height = 8;
  in.width = 64;
  in.pixels.assign(8 * 64, 0.0F);
  in.valid_tokens = 8;
  const auto tokens = model.extract_tokens(in);
  // Zero padding at the outer columns makes the end tokens differ; interior
  // tokens see identical receptive fields.
  for (int t = 2; t < 7; ++t) EXPECT_LT((tokens.row(t) - tokens.row(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Positions, ClosedForm) {
  const auto pe = sinusoidal_positions<double>(10, 8);
  for (int d = 0; d < 8; ++d) EXPECT_EQ(pe(0, d), d % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe(1, 0), 0.8414709848, 1e-9);
  EXPECT_NEAR(pe(1, 1), 0.5403023059, 1e-9);
  for (int t = 0; t < 10; ++t) EXPECT_NEAR(pe.row(t).squaredNorm(), 4.0, 1e-12);
  EXPECT_THROW(sinusoidal_positions<double>(3, 5), Error);
}

TEST(SpanMask, CountsAndRuns) {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const auto m = sample_span_mask(64, 0.4, 8, rng);
    ASSERT_EQ(m.count(), 26);
    int run = 0;
    for (bool b : m.masked) {
      run = b ? run + 1 : 0;
      ASSERT_LE(run, 8);
    }
    int total = 0;
    for (auto [s, l] : m.spans) {
      ASSERT_GE(l, 1);
      ASSERT_LE(l, 8);
      total += l;
    }
    ASSERT_EQ(total, 26);
  }
}

TEST(SpanMask, ZeroRatio) {
  Rng rng(1);
  const auto m = sample_span_mask(64, 0.0, 8, rng);
  EXPECT_EQ(m.count(), 0);
  EXPECT_TRUE(m.spans.empty());
}

TEST(SpanMask, FrequencyIsRoughlyUniform) {
  Rng rng(2024);
  std::vector<int> hits(64, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto m = sample_span_mask(64, 0.4, 8, rng);
    for (int t = 0; t < 64; ++t) hits[static_cast<std::size_t>(t)] += m.masked[static_cast<std::size_t>(t)];
  }
  for (int t = 0; t < 64; ++t) {
    const double f = static_cast<double>(hits[static_cast<std::size_t>(t)]) / draws;
    EXPECT_GE(f, 0.30) << t;
    EXPECT_LE(f, 0.50) << t;
  }
}

TEST(SpanMask, SeededReproducible) {
  Rng a(77), b(77);
  EXPECT_EQ(sample_span_mask(40, 0.4, 8, a).masked, sample_span_mask(40, 0.4, 8, b).masked);
}

TEST(ApplyMask, Rows) {
  nn::Mat<double> tokens = nn::Mat<double>::Random(10, 4);
  const std::vector<double> tok{9, 8, 7, 6};
  SpanMask none;
  none.masked.assign(10, false);
  EXPECT_EQ(apply_mask<double>(tokens, none, tok), tokens);
  SpanMask all;
  all.masked.assign(10, true);
  const auto full = apply_mask<double>(tokens, all, tok);
  for (int t = 0; t < 10; ++t)
    for (int d = 0; d < 4; ++d) EXPECT_EQ(full(t, d), tok[static_cast<std::size_t>(d)]);
  SpanMask one;
  one.masked.assign(10, false);
  one.masked[5] = one.masked[6] = one.masked[7] = true;
  one.spans = {{5, 3}};
  const auto part = apply_mask<double>(tokens, one, tok);
  for (int t = 0; t < 10; ++t)
    for (int d = 0; d < 4; ++d)
      EXPECT_EQ(part(t, d), (t >= 5 && t <= 7) ? tok[static_cast<std::size_t>(d)] : tokens(t, d));
}

TEST(Encoder, IdentityBlocksAddPositions) {
  auto model = micro_model();
  model.zero_residual_branches();
  nn::Mat<double> tokens = nn::Mat<double>::Random(8, 8);
  const auto out = model.encode(tokens, 8, 0.0, nullptr);
  const auto expect = tokens + sinusoidal_positions<double>(8, 8);
  EXPECT_LT((out - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, HiddenKeysGetNoAttention) {
  OcrModel<double> model(OcrConfig::standard(16, 1, 2), Charset(U"ab"), 5);
  nn::Mat<double> tokens = nn::Mat<double>::Random(64, 16);
  Rng rng(3);
  OcrModel<double>::Tape tape;
  model.encode(tokens, 64, 0.1, &rng, &tape);
  ASSERT_EQ(tape.key_visible.size(), 1u);
  const auto& vis = tape.key_visible[0];
  EXPECT_EQ(std::count(vis.begin(), vis.end(), false), 6);
  for (const auto& p : tape.blocks[0].attn.probs)
    for (int q = 0; q < 64; ++q) {
      EXPECT_NEAR(p.row(q).sum(), 1.0, 1e-12);
      for (int k = 0; k < 64; ++k)
        if (!vis[static_cast<std::size_t>(k)]) EXPECT_EQ(p(q, k), 0.0);
    }
}

TEST(Encoder, PaddingKeysAreInvisible) {
  OcrModel<double> model(OcrConfig::standard(16, 1, 2), Charset(U"ab"), 5);
  nn::Mat<double> tokens = nn::Mat<double>::Random(64, 16);
  const auto a = model.encode(tokens, 20, 0.0, nullptr);
  tokens.bottomRows(44).setRandom();
  const auto b = model.encode(tokens, 20, 0.0, nullptr);
  EXPECT_LT((a.topRows(20) - b.topRows(20)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, LogSoftmaxAndDeterminism) {
  OcrModel<float> model(OcrConfig::standard(16, 1, 2), Charset(U"abc"), 9);
  const auto line = random_line(300, 64, 4);
  Rng r1(0), r2(0);
  const auto a = forward_logits(line, model, false, r1);
  const auto b = forward_logits(line, model, false, r2);
  EXPECT_EQ(a.logprobs, b.logprobs);
  for (int t = 0; t < a.logprobs.rows(); ++t) EXPECT_NEAR(a.logprobs.row(t).array().exp().sum(), 1.0, 1e-5);
  Rng s1(42), s2(42);
  EXPECT_EQ(forward_logits(line, model, true, s1).logprobs, forward_logits(line, model, true, s2).logprobs);
}

TEST(Gradients, MicroModelInference) {
  const auto res = support::ocr_gradient_check(1, false);
  EXPECT_LE(res.check.max_rel_error, 1e-4) << "param " << res.check.worst_index << " analytic "
                                             << res.check.worst_analytic << " numeric " << res.check.worst_numeric;
}

TEST(Gradients, MicroModelWithMasking) {
  for (std::uint64_t seed : {2, 3}) {
    const auto res = support::ocr_gradient_check(seed, true);
    EXPECT_LE(res.check.max_rel_error, 1e-4) << "seed " << seed << " param " << res.check.worst_index;
  }
}

TEST(Checkpoint, RoundTrip) {
  OcrModel<float> model(OcrConfig::standard(16, 1, 2), Charset(U"abcñ"), 9);
  const auto bytes = serialize_ocr_checkpoint(model);
  const auto back = deserialize_ocr_checkpoint(bytes);
  EXPECT_EQ(back.config(), model.config());
  EXPECT_EQ(back.charset(), model.charset());
  EXPECT_EQ(back.params().values(), model.params().values());
  EXPECT_EQ(serialize_ocr_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsCorruption) {
  OcrModel<float> model(OcrConfig::micro(), Charset(U"ab"), 9);
  auto bytes = serialize_ocr_checkpoint(model);
  EXPECT_THROW(deserialize_ocr_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_ocr_checkpoint(bad_magic), Error);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(deserialize_ocr_checkpoint(bad_version), Error);
  EXPECT_THROW(deserialize_ocr_checkpoint(bytes + "x"), Error);
}
