#pragma once

// Fixtures shared by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "fpthd/formats.hpp"
#include "fpthd/geometry.hpp"
#include "fpthd/layout.hpp"
#include "fpthd/random.hpp"
#include "fpthd/raster.hpp"
#include "fpthd/synth.hpp"

namespace fixtures {

using namespace fpthd;

inline ProbabilityMaps ridge_maps(int w, int h, int ds) {
  ProbabilityMaps m(w, h, ds);
  std::fill(m.ascender.begin(), m.ascender.end(), 4.0F);
  std::fill(m.descender.begin(), m.descender.end(), 2.0F);
  return m;
}

inline void paint_row(ProbabilityMaps& m, int row, int x0, int x1, float v) {
  for (int x = x0; x <= x1; ++x) m.baseline[m.index(x, row)] = v;
}

inline std::vector<const TextLineGeom*> all_lines(const PageLayout& p) {
  std::vector<const TextLineGeom*> out;
  for (const auto& r : p.regions)
    for (const auto& l : r.lines) out.push_back(&l);
  return out;
}

inline TextLineGeom make_line(std::string id, std::vector<Point> base, double asc, double desc) {
  TextLineGeom l;
  l.id = std::move(id);
  l.baseline.points = std::move(base);
  l.ascender_height = asc;
  l.descender_height = desc;
  l.polygon = polygon_from_baseline(l.baseline, asc, desc);
  for (auto& p : l.polygon) p = {std::round(p.x), std::round(p.y)};
  return l;
}

inline TranscribedPage one_line_page() {
  TranscribedPage p;
  p.layout.page_id = "page-1";
  p.layout.width = 100;
  p.layout.height = 120;
  p.image_filename = "page-1.png";
  Region r;
  r.id = "r1";
  r.polygon = {{0, 80}, {10, 80}, {10, 100}, {0, 100}};
  r.lines = {make_line("r1_l1", {{0, 95}, {10, 95}}, 5, 2)};
  p.layout.regions = {r};
  p.texts["r1_l1"] = "dñi";
  return p;
}

inline TranscribedPage two_by_two_page() {
  TranscribedPage p;
  p.layout.page_id = "folio_12";
  p.layout.width = 400;
  p.layout.height = 300;
  p.image_filename = "folio 12.jpg";
  const char* texts[2][2] = {{"Dñi nostri *Iesu*", "# 1585. anno"}, {"cap. [iv] <b>", "- item_x\\y"}};
  for (int r = 0; r < 2; ++r) {
    Region g;
    g.id = "r" + std::to_string(r + 1);
    g.polygon = {{10.0 + 200 * r, 10}, {190.0 + 200 * r, 10}, {190.0 + 200 * r, 200}, {10.0 + 200 * r, 200}};
    for (int l = 0; l < 2; ++l) {
      const std::string id = g.id + "_l" + std::to_string(l + 1);
      g.lines.push_back(make_line(id, {{20.0 + 200 * r, 60.0 + 50 * l}, {180.0 + 200 * r, 62.0 + 50 * l}}, 20, 6.5));
      p.texts[id] = texts[r][l];
    }
    p.layout.regions.push_back(g);
  }
  p.confidences["r1_l1"] = 0.875;
  return p;
}

inline TranscribedPage random_page(Rng& rng) {
  TranscribedPage p;
  p.layout.page_id = "p" + std::to_string(rng.uniform_int(0, 9999));
  p.layout.width = static_cast<int>(rng.uniform_int(100, 3000));
  p.layout.height = static_cast<int>(rng.uniform_int(100, 3000));
  p.image_filename = p.layout.page_id + ".png";
  static const char* const words[] = {"dñi", "a&b", "<x>", "\"q\"", "it's", "mano", "# 3.", "ſ", "ẽ", " "};
  const auto nreg = rng.uniform_int(0, 4);
  for (std::int64_t r = 0; r < nreg; ++r) {
    Region g;
    g.id = "r" + std::to_string(r + 1);
    for (int k = 0; k < 4; ++k)
      g.polygon.push_back({static_cast<double>(rng.uniform_int(0, p.layout.width)),
                           static_cast<double>(rng.uniform_int(0, p.layout.height))});
    const auto nl = rng.uniform_int(0, 4);
    for (std::int64_t l = 0; l < nl; ++l) {
      TextLineGeom line;
      line.id = g.id + "_l" + std::to_string(l + 1);
      double x = static_cast<double>(rng.uniform_int(0, 50));
      const auto npts = rng.uniform_int(2, 6);
      for (std::int64_t k = 0; k < npts; ++k) {
        line.baseline.points.push_back({x, static_cast<double>(rng.uniform_int(0, p.layout.height))});
        x += static_cast<double>(rng.uniform_int(1, 80));
      }
      line.ascender_height = rng.uniform(0.5, 60.0);
      line.descender_height = rng.bernoulli(0.2) ? 0.0 : rng.uniform(0.0, 30.0);
      for (int k = 0; k < 6; ++k)
        line.polygon.push_back({static_cast<double>(rng.uniform_int(0, 500)), static_cast<double>(rng.uniform_int(0, 500))});
      if (rng.bernoulli(0.8)) {
        std::string t;
        const auto nw = rng.uniform_int(0, 5);
        for (std::int64_t w = 0; w < nw; ++w) t += words[rng.uniform_int(0, 9)];
        p.texts[line.id] = t;
        if (rng.bernoulli(0.5)) p.confidences[line.id] = rng.uniform();
      }
      g.lines.push_back(line);
    }
    p.layout.regions.push_back(g);
  }
  return p;
}

inline Raster smooth_image(int w, int h) {
  Raster img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = static_cast<float>(0.5 + 0.4 * std::sin((x + 0.5) / 37.0) * std::cos((y + 0.5) / 23.0));
  return img;
}

inline double sine_curve(double x) { return 10.0 * std::sin(2.0 * std::numbers::pi * x / 200.0); }

// Text whose baseline follows y = 100 + sine_curve(x): glyphs are rendered
// flat, then every ink sub-pixel is carried to arc length x along the curve
// and offset along its normal.
inline Raster curved_text_page(const synth::Style& style) {
  // Every column of 'o' has its ink centroid at the same height, so spread
  // left after rectification is geometric.
  const std::string text = "oooooo oooooo oooooo oooooo";
  const int w = synth::text_width(text, style.scale) + 40;
  Raster flat(w, 200, style.paper);
  synth::draw_text(flat, text, 20, 100, style.scale, style.ink);
  std::vector<double> xs{0.0}, arc{0.0};
  for (double x = 0.01; x <= w + 200; x += 0.01) {
    arc.push_back(arc.back() + std::hypot(0.01, sine_curve(x) - sine_curve(x - 0.01)));
    xs.push_back(x);
  }
  Raster curved(w, 200, style.paper);
  const int sub = 4;
  for (int y = 0; y < flat.height; ++y)
    for (int x = 0; x < flat.width; ++x) {
      if (flat.at(x, y) == style.paper) continue;
      for (int j = 0; j < sub; ++j)
        for (int i = 0; i < sub; ++i) {
          const double s = x + (i + 0.5) / sub;
          const double v = 100.0 - (y + (j + 0.5) / sub);  // height above the baseline
          const auto k = static_cast<std::size_t>(std::lower_bound(arc.begin(), arc.end(), s) - arc.begin());
          const double px = xs[k];
          const double slope = (sine_curve(px + 1e-4) - sine_curve(px - 1e-4)) / 2e-4;
          const double norm = std::hypot(1.0, slope);
          const double cx = px + v * slope / norm;
          const double cy = 100.0 + sine_curve(px) - v / norm;
          const int qx = static_cast<int>(std::floor(cx)), qy = static_cast<int>(std::floor(cy));
          if (curved.contains(qx, qy)) curved.at(qx, qy) = style.ink;
        }
    }
  return curved;
}

inline std::string random_string(Rng& rng, int max_len) {
  static const char* const alphabet[] = {"a", "b", "c", " ", "ñ", "õ"};
  std::string s;
  const auto n = rng.uniform_int(0, max_len);
  for (std::int64_t i = 0; i < n; ++i) s += alphabet[rng.uniform_int(0, 5)];
  return s;
}

}  // namespace fixtures
