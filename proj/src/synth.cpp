#include "fpthd/synth.hpp"

#include <algorithm>
#include <array>
#include <map>

#include "fpthd/unicode.hpp"

namespace fpthd::synth {

namespace {

using Glyph = std::array<const char*, kGlyphHeight>;

const std::map<char32_t, Glyph>& font() {
  static const std::map<char32_t, Glyph> glyphs = {
      {U'a', {".....", ".....", ".....", ".###.", "....#", ".####", "#...#", "#...#", ".####"}},
      {U'c', {".....", ".....", ".....", ".####", "#....", "#....", "#....", "#....", ".####"}},
      {U'd', {"....#", "....#", "....#", ".####", "#...#", "#...#", "#...#", "#...#", ".####"}},
      {U'e', {".....", ".....", ".....", ".###.", "#...#", "#####", "#....", "#....", ".###."}},
      {U'i', {".....", "..#..", ".....", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
      {U'm', {".....", ".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#", "#.#.#"}},
      {U'n', {".....", ".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#", "#...#"}},
      {U'o', {".....", ".....", ".....", ".###.", "#...#", "#...#", "#...#", "#...#", ".###."}},
      {U's', {".....", ".....", ".....", ".####", "#....", ".###.", "....#", "....#", "####."}},
      {U'ñ', {".....", ".##.#", "#..#.", "#.##.", "##..#", "#...#", "#...#", "#...#", "#...#"}},
  };
  return glyphs;
}

const Glyph& glyph(char32_t c) {
  const auto it = font().find(c);
  if (it == font().end()) throw Error("synthetic font has no glyph for '" + unicode::encode_utf8(c) + "'");
  return it->second;
}

void add_noise(Raster& r, Rng& rng, float sigma) {
  for (auto& v : r.pixels) v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0F, 1.0F);
}

}  // namespace

int text_width(std::string_view utf8, int scale) {
  int w = 0;
  const auto cps = unicode::decode_utf8(utf8);
  for (std::size_t i = 0; i < cps.size(); ++i) {
    if (cps[i] == U' ') {
      w += kSpaceAdvance;
    } else {
      glyph(cps[i]);
      w += i + 1 < cps.size() ? kAdvance : kGlyphWidth;
    }
  }
  return w * scale;
}

void draw_text(Raster& canvas, std::string_view utf8, int x, int baseline_y, int scale, float ink) {
  const int top = baseline_y - kGlyphHeight * scale;
  int pen = x;
  for (char32_t c : unicode::decode_utf8(utf8)) {
    if (c == U' ') {
      pen += kSpaceAdvance * scale;
      continue;
    }
    const Glyph& g = glyph(c);
    for (int r = 0; r < kGlyphHeight; ++r)
      for (int q = 0; q < kGlyphWidth; ++q) {
        if (g[static_cast<std::size_t>(r)][q] != '#') continue;
        for (int dy = 0; dy < scale; ++dy)
          for (int dx = 0; dx < scale; ++dx) {
            const int px = pen + q * scale + dx, py = top + r * scale + dy;
            if (canvas.contains(px, py)) canvas.at(px, py) = ink;
          }
      }
    pen += kAdvance * scale;
  }
}

std::string random_text(Rng& rng, int min_words, int max_words, int max_chars) {
  const int words = static_cast<int>(rng.uniform_int(min_words, max_words));
  std::u32string out;
  for (int w = 0; w < words; ++w) {
    const int len = static_cast<int>(rng.uniform_int(2, 5));
    std::u32string word;
    for (int i = 0; i < len; ++i)
      word.push_back(kAlphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kAlphabet.size()) - 1))]);
    const std::size_t extra = out.empty() ? word.size() : word.size() + 1;
    if (!out.empty() && static_cast<int>(out.size() + extra) > max_chars) break;
    if (!out.empty()) out.push_back(U' ');
    out += word;
  }
  return unicode::encode_utf8(out);
}

LineSample render_line(const std::string& text, Rng& rng, const Style& style, int line_height, int interp,
                       const LineJitter& jitter) {
  const int s = style.scale;
  const int margin = 12;
  const int w = text_width(text, s);
  const int asc = kAscenderCells * s, desc = kDescenderCells * s;
  Raster canvas(w + 2 * margin, asc + desc + 2 * margin, style.paper);
  const int base = margin + asc;
  draw_text(canvas, text, margin, base, s, style.ink);
  add_noise(canvas, rng, style.noise);
  TextLineGeom line;
  const double y = base + rng.uniform(-jitter.baseline_y, jitter.baseline_y);
  const double x0 = margin - 2 + rng.uniform(-jitter.ends, jitter.ends);
  const double x1 = margin + w + 2 + rng.uniform(-jitter.ends, jitter.ends);
  line.baseline.points = {{x0, y}, {x1, y}};
  line.ascender_height = asc * (1.0 + rng.uniform(-jitter.heights, jitter.heights));
  line.descender_height = desc * (1.0 + rng.uniform(-jitter.heights, jitter.heights));
  LineSample out;
  out.text = text;
  out.image = rectify_and_crop(canvas, line, line_height, 1.0, interp, style.paper).image;
  return out;
}

std::vector<LineSample> make_line_corpus(int count, std::uint64_t seed, const Style& style, int line_height,
                                         const std::string& id_prefix) {
  std::vector<LineSample> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, 0x5e7, static_cast<std::uint64_t>(i)));
    // Up to the 16 characters a default page column holds, so a recognizer
    // trained here sees every token position page lines use.
    auto sample = render_line(random_text(rng, 1, 4, 16), rng, style, line_height, 2, {});
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05d", i);
    sample.id = id_prefix + buf;
    out.push_back(std::move(sample));
  }
  return out;
}

SynthPage render_page(const std::string& page_id, Rng& rng, const Style& style, const PageSpec& spec) {
  const int s = style.scale;
  SynthPage page;
  page.image = Raster(spec.width, spec.height, style.paper);
  auto& layout = page.truth.layout;
  layout.page_id = page_id;
  layout.width = spec.width;
  layout.height = spec.height;
  page.truth.image_filename = page_id + ".png";
  const int col_w = (spec.width - 2 * spec.margin - (spec.columns - 1) * spec.gutter) / spec.columns;
  const int max_chars = std::max(2, col_w / (kAdvance * s));
  const int asc = kAscenderCells * s, desc = kDescenderCells * s;
  std::vector<std::string> lines_text;
  for (int c = 0; c < spec.columns; ++c) {
    Region region;
    region.id = "r" + std::to_string(c + 1);
    const int x = spec.margin + c * (col_w + spec.gutter);
    double right = x;
    for (int l = 0; l < spec.lines_per_column; ++l) {
      std::string text = random_text(rng, 2, 4, max_chars);
      while (text_width(text, s) > col_w) text = random_text(rng, 2, 4, max_chars);
      const int base = spec.margin + asc + l * spec.line_pitch;
      if (base + desc >= spec.height) break;
      draw_text(page.image, text, x, base, s, style.ink);
      TextLineGeom line;
      line.id = region.id + "_l" + std::to_string(l + 1);
      const double w = text_width(text, s);
      line.baseline.points = {{x - 2.0, static_cast<double>(base)}, {x + w + 2.0, static_cast<double>(base)}};
      line.ascender_height = asc;
      line.descender_height = desc;
      line.polygon = polygon_from_baseline(line.baseline, asc, desc);
      right = std::max(right, x + w + 2.0);
      page.truth.texts[line.id] = text;
      lines_text.push_back(text);
      region.lines.push_back(std::move(line));
    }
    const double top = spec.margin - 2.0;
    const double bottom = region.lines.empty() ? top + 1 : region.lines.back().baseline.points[0].y + desc + 2.0;
    region.polygon = {{x - 4.0, top}, {right + 2.0, top}, {right + 2.0, bottom}, {x - 4.0, bottom}};
    layout.regions.push_back(std::move(region));
  }
  add_noise(page.image, rng, style.noise);
  for (std::size_t i = 0; i < lines_text.size(); ++i) page.text += (i ? "\n" : "") + lines_text[i];
  return page;
}

}  // namespace fpthd::synth
