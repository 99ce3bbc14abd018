#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <array>

#include "fpthd/layout.hpp"
#include "fpthd/nn/layers.hpp"
#include "fpthd/synth.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fpthd;
using namespace fixtures;

namespace {

// 8-connected components of the thresholded map, then transitive union of
// components with overlapping columns whose row gap is at most `range`.
int brute_force_line_count(const ProbabilityMaps& m, double thr, int range) {
  std::vector<std::pair<int, int>> cells;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.baseline[m.index(x, y)] > thr) cells.emplace_back(x, y);
  const std::size_t n = cells.size();
  std::vector<std::size_t> comp(n);
  for (std::size_t i = 0; i < n; ++i) comp[i] = i;
  auto relabel = [&](std::size_t from, std::size_t to) {
    for (auto& c : comp)
      if (c == from) c = to;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (std::abs(cells[i].first - cells[j].first) <= 1 && std::abs(cells[i].second - cells[j].second) <= 1 &&
          comp[i] != comp[j])
        relabel(comp[j], comp[i]);
  // Boxes of the 8-connected components, then merge pairs of components.
  std::map<std::size_t, std::array<int, 4>> box;  // minx, maxx, miny, maxy
  for (std::size_t k = 0; k < n; ++k) {
    auto [x, y] = cells[k];
    auto it = box.try_emplace(comp[k], std::array<int, 4>{x, x, y, y}).first;
    auto& bx = it->second;
    bx = {std::min(bx[0], x), std::max(bx[1], x), std::min(bx[2], y), std::max(bx[3], y)};
  }
  std::map<std::size_t, std::size_t> group;
  for (const auto& [id, _] : box) group[id] = id;
  for (const auto& [i, A] : box)
    for (const auto& [j, B] : box) {
      if (i >= j) continue;
      const bool xover = std::max(A[0], B[0]) <= std::min(A[1], B[1]);
      const int vgap = std::max(A[2], B[2]) - std::min(A[3], B[3]) - 1;
      if (!xover || vgap > range || group[i] == group[j]) continue;
      const auto from = group[j], to = group[i];
      for (auto& [_, g] : group)
        if (g == from) g = to;
    }
  for (auto& c : comp) c = group[c];
  std::sort(comp.begin(), comp.end());
  return static_cast<int>(std::unique(comp.begin(), comp.end()) - comp.begin());
}

// Baseline y at x by linear interpolation, or NaN outside the polyline.
double baseline_y_at(const Baseline& b, double x) {
  const auto& p = b.points;
  if (p.empty() || x < p.front().x || x > p.back().x) return std::nan("");
  for (std::size_t i = 1; i < p.size(); ++i)
    if (x <= p[i].x) {
      const double t = (x - p[i - 1].x) / (p[i].x - p[i - 1].x);
      return p[i - 1].y + t * (p[i].y - p[i - 1].y);
    }
  return p.back().y;
}

// Random ridges of varying length, height and slope.
ProbabilityMaps random_ridges(Rng& rng, int w, int h, int ds) {
  auto m = ridge_maps(w, h, ds);
  const int n = static_cast<int>(rng.uniform_int(1, 6));
  for (int k = 0; k < n; ++k) {
    const int x0 = static_cast<int>(rng.uniform_int(0, w - 2));
    const int x1 = static_cast<int>(rng.uniform_int(x0 + 1, w - 1));
    const double y0 = rng.uniform(0, h - 1), slope = rng.uniform(-0.2, 0.2);
    for (int x = x0; x <= x1; ++x) {
      const int y = std::clamp(static_cast<int>(y0 + slope * (x - x0)), 0, h - 1);
      m.baseline[m.index(x, y)] = static_cast<float>(rng.uniform(0.3, 1.0));
    }
  }
  return m;
}

}  // namespace

TEST(Decode, SingleRidge) {
  auto m = ridge_maps(60, 30, 5);
  paint_row(m, 10, 2, 50, 0.9F);
  LayoutDecoderConfig cfg;
  const auto page = decode_baselines(m, cfg);
  const auto lines = all_lines(page);
  ASSERT_EQ(lines.size(), 1u);
  const auto& l = *lines[0];
  for (const auto& p : l.baseline.points) EXPECT_LE(std::abs(p.y / 5.0 - 10.5), 0.5);
  EXPECT_NEAR(l.baseline.points.front().y, 52.5, 0.5);
  EXPECT_EQ(l.ascender_height, 20.0);
  EXPECT_EQ(l.descender_height, 10.0);
  EXPECT_LE(l.baseline.points.front().x, 2 * 5 + 2.5);
  EXPECT_GE(l.baseline.points.back().x, 51 * 5 - 2.5);
  EXPECT_EQ(page.regions[0].id, "r1");
  EXPECT_EQ(l.id, "r1_l1");
  EXPECT_FALSE(l.polygon.empty());
}

TEST(Decode, EmptyMaps) {
  ProbabilityMaps m(40, 20, 5);
  const auto page = decode_baselines(m, {});
  EXPECT_TRUE(page.regions.empty());
  EXPECT_EQ(page.width, 200);
  EXPECT_EQ(page.height, 100);
}

TEST(Decode, VerticalConnectionRange) {
  auto m = ridge_maps(60, 30, 5);
  paint_row(m, 10, 2, 30, 0.9F);
  paint_row(m, 12, 20, 50, 0.9F);
  LayoutDecoderConfig cfg;
  cfg.vertical_connection_range = 3;
  EXPECT_EQ(all_lines(decode_baselines(m, cfg)).size(), 1u);
  EXPECT_EQ(brute_force_line_count(m, cfg.detection_threshold, 3), 1);
  cfg.vertical_connection_range = 0;
  EXPECT_EQ(all_lines(decode_baselines(m, cfg)).size(), 2u);
  EXPECT_EQ(brute_force_line_count(m, cfg.detection_threshold, 0), 2);
}

TEST(Decode, MatchesBruteForceGrouping) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto m = ridge_maps(40, 30, 4);
    for (int k = 0; k < 6; ++k) {
      const int row = static_cast<int>(rng.uniform_int(1, 28));
      const int x0 = static_cast<int>(rng.uniform_int(0, 30));
      paint_row(m, row, x0, std::min(39, x0 + static_cast<int>(rng.uniform_int(3, 20))), 0.8F);
    }
    for (int range : {0, 1, 3}) {
      LayoutDecoderConfig cfg;
      cfg.vertical_connection_range = range;
      EXPECT_EQ(static_cast<int>(all_lines(decode_baselines(m, cfg)).size()),
                brute_force_line_count(m, cfg.detection_threshold, range))
          << trial << " " << range;
    }
  }
}

TEST(Decode, ThresholdMonotonicity) {
  auto m = ridge_maps(80, 50, 5);
  const float peaks[] = {0.15F, 0.35F, 0.55F, 0.75F, 0.95F};
  for (int k = 0; k < 5; ++k) {
    const int row = 5 + 9 * k;
    for (int x = 0; x < 80; ++x) {
      const double bump = std::exp(-std::pow((x - 40.0) / 22.0, 2));
      m.baseline[m.index(x, row)] = static_cast<float>(peaks[k] * bump);
    }
  }
  std::size_t prev_count = 1000;
  double prev_extent = 1e9;
  for (int i = 0; i < 10; ++i) {
    LayoutDecoderConfig cfg;
    cfg.detection_threshold = 0.05 + 0.09 * i;
    const auto page = decode_baselines(m, cfg);
    const auto lines = all_lines(page);
    double extent = 0.0;
    for (const auto* l : lines) extent += l->baseline.points.back().x - l->baseline.points.front().x;
    EXPECT_LE(lines.size(), prev_count) << cfg.detection_threshold;
    EXPECT_LE(extent, prev_extent + 1e-9) << cfg.detection_threshold;
    prev_count = lines.size();
    prev_extent = extent;
  }
  EXPECT_EQ(prev_count, 1u);
}

TEST(Decode, RegionsAndReadingOrder) {
  auto m = ridge_maps(100, 40, 5);
  for (int y = 2; y < 38; ++y) {
    for (int x = 2; x < 45; ++x) m.region[m.index(x, y)] = 0.9F;
    for (int x = 55; x < 98; ++x) m.region[m.index(x, y)] = 0.9F;
  }
  for (int row : {8, 18, 28}) {
    paint_row(m, row, 4, 42, 0.9F);
    paint_row(m, row, 57, 95, 0.9F);
  }
  const auto page = decode_baselines(m, {});
  ASSERT_EQ(page.regions.size(), 2u);
  for (const auto& r : page.regions) ASSERT_EQ(r.lines.size(), 3u);
  EXPECT_LT(page.regions[0].lines[0].baseline.points.front().x, 250);
  EXPECT_GT(page.regions[1].lines[0].baseline.points.front().x, 250);
  EXPECT_LT(page.regions[0].lines[0].baseline.points.front().y, page.regions[0].lines[1].baseline.points.front().y);
  EXPECT_EQ(page.regions[1].lines[2].id, "r2_l3");

  LayoutDecoderConfig no_regions;
  no_regions.detect_regions = false;
  EXPECT_EQ(decode_baselines(m, no_regions).regions.size(), 6u);
}

TEST(Decode, PreScaleMapsBackToImage) {
  auto m = ridge_maps(60, 30, 5);
  paint_row(m, 10, 2, 50, 0.9F);
  m.pre_scale = 0.5;
  m.image_width = 600;
  m.image_height = 300;
  const auto page = decode_baselines(m, {});
  const auto lines = all_lines(page);
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_NEAR(lines[0]->baseline.points.front().y, 105.0, 1.0);
  EXPECT_EQ(lines[0]->ascender_height, 40.0);
}

TEST(Decode, Simplify) {
  std::vector<Point> pts;
  for (int x = 0; x <= 100; ++x) pts.push_back({static_cast<double>(x), 0.01 * (x % 2)});
  EXPECT_EQ(simplify_polyline(pts, 0.5).size(), 2u);
  std::vector<Point> corner{{0, 0}, {5, 5}, {10, 0}};
  EXPECT_EQ(simplify_polyline(corner, 0.5).size(), 3u);
}

TEST(Decode, ConfigValidation) {
  LayoutDecoderConfig cfg;
  cfg.detection_threshold = 1.5;
  EXPECT_THROW(decode_baselines(ProbabilityMaps(4, 4, 1), cfg), Error);
  ProbabilityMaps bad(4, 4, 1);
  bad.region.resize(3);
  EXPECT_THROW(decode_baselines(bad, {}), Error);
}

TEST(LayoutNetTest, ZeroWeightsGiveHalf) {
  LayoutNetConfig cfg;
  cfg.widths = {4, 4, 4, 4, 4};
  LayoutNet<float> net(cfg, 1);
  std::fill(net.params().values().begin(), net.params().values().end(), 0.0F);
  const auto maps = predict_maps(Raster(100, 80, 0.7F), net);
  EXPECT_EQ(maps.width, 20);
  EXPECT_EQ(maps.height, 16);
  for (float v : maps.baseline) EXPECT_EQ(v, 0.5F);
  for (float v : maps.region) EXPECT_EQ(v, 0.5F);
}

TEST(LayoutNetTest, MegapixelLimit) {
  LayoutNetConfig cfg;
  cfg.widths = {2, 2, 2, 2, 2};
  LayoutNet<float> net(cfg, 1);
  const auto maps = predict_maps(Raster(1000, 6000, 0.9F), net, 5.0);
  const double s = std::sqrt(5e6 / 6e6);
  EXPECT_DOUBLE_EQ(maps.pre_scale, s);
  EXPECT_EQ(maps.width, (static_cast<int>(std::lround(1000 * s)) + 4) / 5);
  EXPECT_EQ(maps.height, (static_cast<int>(std::lround(6000 * s)) + 4) / 5);
  EXPECT_EQ(maps.image_width, 1000);
}

TEST(LayoutNetTest, GradientsMatchFiniteDifferences) {
  LayoutNetConfig cfg;
  cfg.downsample = 1;
  cfg.widths = {2, 3, 2, 2, 2};
  LayoutNet<double> net(cfg, 3);
  Rng rng(4);
  // Zero biases put every all-zero receptive field exactly on the ReLU kink,
  // where central differences average the two one-sided slopes.
  for (std::size_t id = 0; id < net.params().entries().size(); ++id)
    if (net.params().entries()[id].name.ends_with(".bias")) net.params().init_normal(static_cast<int>(id), 0.1, rng);
  nn::FeatureMap<double> x(1, 16, 16);
  for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data.data()[i] = rng.uniform();
  nn::Mat<double> weights = nn::Mat<double>::Random(4, 256);
  auto loss = [&] { return (net.forward(x).data.array() * weights.array()).sum(); };
  LayoutNet<double>::Cache cache;
  net.forward(x, &cache);
  nn::FeatureMap<double> dy(4, 16, 16);
  dy.data = weights;
  net.params().zero_grad();
  net.backward(cache, dy);
  const auto analytic = net.params().grads();
  const auto res = oracle::check_gradient(net.params().values(), analytic, loss, 1e-6, 1e-6);
  EXPECT_LE(res.max_rel_error, 1e-4) << res.worst_index << " " << res.worst_analytic << " " << res.worst_numeric;
}

TEST(LayoutNetTest, GoldenMaps) {
  LayoutNetConfig cfg;
  cfg.widths = {4, 8, 8, 8, 8};
  cfg.downsample = 2;
  LayoutNet<float> net(cfg, 1234);
  Rng rng(99);
  Raster img(64, 64);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  const auto a = predict_maps(img, net);
  const auto b = predict_maps(img, net);
  EXPECT_EQ(a.baseline, b.baseline);
  EXPECT_EQ(a.ascender, b.ascender);

  std::string text;
  char buf[32];
  for (const auto* v : {&a.baseline, &a.ascender, &a.descender, &a.region})
    for (float f : *v) {
      std::snprintf(buf, sizeof buf, "%.9g\n", f);
      text += buf;
    }
  const auto path = std::filesystem::path(FPTHD_GOLDEN_DIR) / "layout_maps_64.txt";
  if (std::getenv("FPTHD_REGEN_GOLDEN")) write_file_atomic(path, text);
  ASSERT_TRUE(std::filesystem::exists(path));
  const auto golden = read_file(path);
  auto parse = [](const std::string& s) {
    std::vector<double> v;
    std::size_t pos = 0;
    while (pos < s.size()) {
      const auto nl = s.find('\n', pos);
      v.push_back(std::stod(s.substr(pos, nl - pos)));
      pos = nl + 1;
    }
    return v;
  };
  const auto ours = parse(text), frozen = parse(golden);
  ASSERT_EQ(ours.size(), frozen.size());
  for (std::size_t i = 0; i < ours.size(); ++i) EXPECT_NEAR(ours[i], frozen[i], 1e-5 * (1 + std::abs(frozen[i]))) << i;
}

TEST(Targets, Rasterize) {
  PageLayout page;
  Region r;
  r.polygon = {{0, 0}, {100, 0}, {100, 50}, {0, 50}};
  TextLineGeom l;
  l.baseline.points = {{10, 52}, {90, 52}};
  l.ascender_height = 20;
  l.descender_height = 10;
  r.lines = {l};
  page.regions = {r};
  const auto t = rasterize_targets(page, 120, 80, 5);
  EXPECT_EQ(t.width, 24);
  EXPECT_EQ(t.height, 16);
  auto at = [&](const std::vector<float>& v, int x, int y) { return v[static_cast<std::size_t>(y) * 24 + x]; };
  EXPECT_EQ(at(t.baseline, 5, 10), 1.0F);
  EXPECT_EQ(at(t.baseline, 5, 9), 0.0F);
  EXPECT_EQ(at(t.baseline, 1, 10), 0.0F);  // cell center 7.5 is left of the line
  EXPECT_EQ(at(t.ascender, 5, 11), 4.0F);
  EXPECT_EQ(at(t.descender, 5, 9), 2.0F);
  EXPECT_EQ(at(t.height_mask, 5, 12), 0.0F);
  EXPECT_EQ(at(t.region, 19, 9), 1.0F);
  EXPECT_EQ(at(t.region, 20, 9), 0.0F);
  EXPECT_EQ(at(t.region, 5, 10), 0.0F);
}

TEST(LayoutTraining, ZeroIterationsAndCheckpoint) {
  LayoutNetConfig cfg;
  cfg.widths = {2, 2, 2, 2, 2};
  LayoutNet<float> net(cfg, 1);
  const auto before = net.params().values();
  LayoutSample s;
  s.image = Raster(40, 40, 0.9F);
  s.target = rasterize_targets({}, 40, 40, 5);
  LayoutTrainConfig tc;
  tc.iterations = 0;
  std::vector<LayoutSample> corpus{s};
  EXPECT_TRUE(train_layout_net(net, corpus, tc).losses.empty());
  EXPECT_EQ(net.params().values(), before);
  const auto bytes = serialize_layout_checkpoint(net);
  const auto back = deserialize_layout_checkpoint(bytes);
  EXPECT_EQ(back.config(), net.config());
  EXPECT_EQ(back.params().values(), before);
  EXPECT_THROW(deserialize_layout_checkpoint(bytes.substr(0, 20)), Error);
}

TEST(Decode, ScaleConsistency) {
  Rng rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const auto unit = random_ridges(rng, 48, 32, 1);
    const auto a = decode_baselines(unit, {});
    for (int ds : {2, 3, 5}) {
      auto scaled = unit;
      scaled.downsample = ds;
      const auto b = decode_baselines(scaled, {});
      const auto la = all_lines(a), lb = all_lines(b);
      ASSERT_EQ(la.size(), lb.size());
      for (std::size_t i = 0; i < la.size(); ++i) {
        ASSERT_EQ(la[i]->baseline.points.size(), lb[i]->baseline.points.size());
        for (std::size_t k = 0; k < la[i]->baseline.points.size(); ++k) {
          EXPECT_NEAR(la[i]->baseline.points[k].x * ds, lb[i]->baseline.points[k].x, 0.5);
          EXPECT_NEAR(la[i]->baseline.points[k].y * ds, lb[i]->baseline.points[k].y, 0.5);
        }
      }
    }
  }
}

TEST(Decode, OutputWithinPage) {
  Rng rng(22);
  for (int trial = 0; trial < 40; ++trial) {
    auto m = random_ridges(rng, 40, 30, 4);
    std::fill(m.ascender.begin(), m.ascender.end(), 12.0F);  // reaches past the top edge
    std::fill(m.descender.begin(), m.descender.end(), 12.0F);
    const auto page = decode_baselines(m, {});
    for (const auto& r : page.regions) {
      for (const auto& p : r.polygon) {
        EXPECT_TRUE(p.x >= 0 && p.x <= page.width && p.y >= 0 && p.y <= page.height);
      }
      for (const auto& l : r.lines)
        for (const auto* poly : {&l.polygon, &l.baseline.points})
          for (const auto& p : *poly) EXPECT_TRUE(p.x >= 0 && p.x <= page.width && p.y >= 0 && p.y <= page.height);
    }
  }
}

TEST(LayoutTraining, RecoversSyntheticBaselines) {
  const synth::Style style;
  const synth::PageSpec spec;
  const int ds = 5;
  Rng rng(31);
  std::vector<synth::SynthPage> pages;
  std::vector<LayoutSample> corpus;
  for (int i = 0; i < 20; ++i) {
    pages.push_back(synth::render_page("p" + std::to_string(i), rng, style, spec));
    corpus.push_back({pages.back().image, rasterize_targets(pages.back().truth.layout, spec.width, spec.height, ds)});
  }
  LayoutNetConfig nc;
  nc.downsample = ds;
  LayoutNet<float> net(nc, 7);
  LayoutTrainConfig tc;
  tc.iterations = 500;
  const auto res = train_layout_net(net, corpus, tc);
  ASSERT_EQ(res.losses.size(), 500u);
  const auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += res.losses[i];
    return s / static_cast<double>(to - from);
  };
  EXPECT_LT(mean(450, 500), mean(0, 50));

  int found = 0, total = 0;
  for (const auto& page : pages) {
    const auto detected = decode_baselines(predict_maps(page.image, net), {});
    const auto lines = all_lines(detected);
    for (const auto& r : page.truth.layout.regions)
      for (const auto& truth : r.lines) {
        ++total;
        const auto& pts = truth.baseline.points;
        const double mid = 0.5 * (pts.front().x + pts.back().x);
        const double y = baseline_y_at(truth.baseline, mid);
        for (const auto* l : lines)
          if (std::abs(baseline_y_at(l->baseline, mid) - y) <= ds) {
            ++found;
            break;
          }
      }
  }
  EXPECT_GE(found, (total * 9 + 9) / 10) << found << " of " << total;
}
