#pragma once

// Bitmap-font renderer for synthetic lines and two-column pages.

#include <string>
#include <string_view>
#include <vector>

#include "fpthd/formats.hpp"
#include "fpthd/geometry.hpp"
#include "fpthd/random.hpp"
#include "fpthd/raster.hpp"
#include "fpthd/train.hpp"

namespace fpthd::synth {

/// Letters the font can draw; ' ' separates words.
inline constexpr std::u32string_view kAlphabet = U"acdeimnosñ";

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 9;  // rows 0-2 ascender/diacritic zone, 3-8 body
inline constexpr int kAdvance = 6;
inline constexpr int kSpaceAdvance = 4;
inline constexpr int kAscenderCells = 10;
inline constexpr int kDescenderCells = 2;

struct Style {
  int scale = 3;
  float paper = 0.92F;
  float ink = 0.12F;
  float noise = 0.03F;
};

/// Width in pixels of `text` at the given scale.
int text_width(std::string_view utf8, int scale);

/// Draws `text` with its baseline (bottom of the body rows) at `baseline_y`
/// and its left edge at `x`.
void draw_text(Raster& canvas, std::string_view utf8, int x, int baseline_y, int scale, float ink);

/// Random words over the alphabet, at most `max_chars` code points.
std::string random_text(Rng& rng, int min_words, int max_words, int max_chars);

// Default spread covers a layout model at DOWNSAMPLE 5: baselines land on map
// cell centres (±2.5 px) and rounded coordinates, line ends overshoot by up to
// two cells.
struct LineJitter {
  double baseline_y = 3.0;   // ± pixels
  double heights = 0.10;     // ± fraction
  double ends = 10.0;        // ± pixels
};

/// Renders `text` on a small canvas and crops it through rectify_and_crop,
/// with the crop geometry jittered as a layout detector would.
LineSample render_line(const std::string& text, Rng& rng, const Style& style, int line_height, int interp,
                       const LineJitter& jitter);

std::vector<LineSample> make_line_corpus(int count, std::uint64_t seed, const Style& style, int line_height,
                                         const std::string& id_prefix);

struct PageSpec {
  int width = 720;
  int height = 420;
  int columns = 2;
  int lines_per_column = 6;
  int line_pitch = 54;
  int margin = 30;
  int gutter = 60;
};

struct SynthPage {
  Raster image;
  TranscribedPage truth;  // layout in reading order plus line texts
  std::string text;       // truth lines joined with '\n'
};

SynthPage render_page(const std::string& page_id, Rng& rng, const Style& style, const PageSpec& spec);

}  // namespace fpthd::synth
