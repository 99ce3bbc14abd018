#pragma once

// Fixtures shared by the unit tests and the acceptance runner.

#include <string>
#include <vector>

#include "fpthd/ctc.hpp"
#include "fpthd/ocrnet.hpp"
#include "oracles.hpp"

namespace support {

struct OcrGradResult {
  oracle::GradCheck check;
  double loss = 0.0;
};

/// Analytic vs central-difference gradients of the CTC loss of the micro
/// model (64-bit) on a random 8×64 line. `train_mode` includes span and
/// attention masking, replayed from the same seed on every evaluation.
inline OcrGradResult ocr_gradient_check(std::uint64_t seed, bool train_mode, double eps = 1e-5,
                                        double floor = 1e-5) {
  using fpthd::Rng;
  Rng rng(seed);
  fpthd::OcrModel<double> model(fpthd::OcrConfig::micro(), fpthd::Charset(U"abc"), seed);
  fpthd::Raster line(64, 8);
  for (auto& v : line.pixels) v = static_cast<float>(rng.uniform());
  const auto input = fpthd::prepare_input(line, model.config());
  fpthd::ctc::LabelSequence target(static_cast<std::size_t>(rng.uniform_int(1, 4)));
  for (auto& c : target) c = static_cast<int>(rng.uniform_int(1, 3));
  fpthd::MaskingConfig masking{0.25, 0.25, 2};
  const std::uint64_t mask_seed = fpthd::derive_seed(seed, 99);

  auto loss = [&] {
    Rng r(mask_seed);
    const auto out = model.forward(input, train_mode, masking, r);
    return fpthd::ctc::ctc_loss(out.logprobs, out.valid_tokens, target).value;
  };
  model.params().zero_grad();
  Rng r(mask_seed);
  fpthd::OcrModel<double>::Tape tape;
  const auto out = model.forward(input, train_mode, masking, r, &tape);
  const auto g = fpthd::ctc::ctc_grad(out.logprobs, out.valid_tokens, target);
  model.backward(tape, g);
  const auto analytic = model.params().grads();
  OcrGradResult res;
  res.loss = loss();
  res.check = oracle::check_gradient(model.params().values(), analytic, loss, eps, floor);
  return res;
}

}  // namespace support
