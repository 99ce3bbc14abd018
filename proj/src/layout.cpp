#include "fpthd/layout.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "binary_io.hpp"
#include "fpthd/nn/optim.hpp"
#include "fpthd/random.hpp"

namespace fpthd {

// ---------------------------------------------------------------- maps

ProbabilityMaps::ProbabilityMaps(int w, int h, int ds)
    : width(w),
      height(h),
      downsample(ds),
      baseline(static_cast<std::size_t>(w) * h, 0.0F),
      ascender(baseline.size(), 0.0F),
      descender(baseline.size(), 0.0F),
      region(baseline.size(), 0.0F) {}

void ProbabilityMaps::validate() const {
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (width < 0 || height < 0 || downsample < 1) throw Error("probability maps: bad dimensions");
  if (baseline.size() != n || ascender.size() != n || descender.size() != n || region.size() != n)
    throw Error("probability maps differ in size");
  if (!(pre_scale > 0.0)) throw Error("probability maps: pre_scale must be positive");
}

void LayoutDecoderConfig::validate() const {
  if (!(detection_threshold > 0.0 && detection_threshold < 1.0)) throw Error("detection threshold must be in (0,1)");
  if (vertical_connection_range < 0) throw Error("vertical connection range must be >= 0");
  if (!(line_end_weight >= 0.0)) throw Error("line end weight must be >= 0");
  if (!(max_megapixels > 0.0)) throw Error("max megapixels must be positive");
}

// ---------------------------------------------------------------- decoding

namespace {

double point_segment_distance(const Point& p, const Point& a, const Point& b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

void rdp(const std::vector<Point>& pts, std::size_t lo, std::size_t hi, double tol, std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double best = -1.0;
  std::size_t idx = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = point_segment_distance(pts[i], pts[lo], pts[hi]);
    if (d > best) {
      best = d;
      idx = i;
    }
  }
  if (best > tol) {
    keep[idx] = true;
    rdp(pts, lo, idx, tol, keep);
    rdp(pts, idx, hi, tol, keep);
  }
}

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

struct Box {
  int minx = 1 << 30, maxx = -1, miny = 1 << 30, maxy = -1;
  void add(int x, int y) {
    minx = std::min(minx, x);
    maxx = std::max(maxx, x);
    miny = std::min(miny, y);
    maxy = std::max(maxy, y);
  }
};

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Polygon box_polygon(double l, double t, double r, double b) { return {{l, t}, {r, t}, {r, b}, {l, b}}; }

Point arc_midpoint(const Baseline& bl) {
  const double half = arc_length(bl) / 2.0;
  double acc = 0.0;
  for (std::size_t i = 1; i < bl.points.size(); ++i) {
    const auto& a = bl.points[i - 1];
    const auto& b = bl.points[i];
    const double seg = std::hypot(b.x - a.x, b.y - a.y);
    if (acc + seg >= half && seg > 0.0) {
      const double t = (half - acc) / seg;
      return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
    }
    acc += seg;
  }
  return bl.points.back();
}

}  // namespace

std::vector<Point> simplify_polyline(const std::vector<Point>& points, double tolerance) {
  if (points.size() <= 2) return points;
  std::vector<bool> keep(points.size(), false);
  keep.front() = keep.back() = true;
  rdp(points, 0, points.size() - 1, tolerance, keep);
  std::vector<Point> out;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (keep[i]) out.push_back(points[i]);
  return out;
}

std::vector<int> label_components(const std::vector<bool>& mask, int width, int height, int* count) {
  std::vector<int> labels(mask.size(), -1);
  int next = 0;
  std::vector<int> stack;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto i = static_cast<std::size_t>(y) * width + x;
      if (!mask[i] || labels[i] >= 0) continue;
      labels[i] = next;
      stack.assign(1, static_cast<int>(i));
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cx = cur % width, cy = cur / width;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
            const auto j = static_cast<std::size_t>(ny) * width + nx;
            if (mask[j] && labels[j] < 0) {
              labels[j] = next;
              stack.push_back(static_cast<int>(j));
            }
          }
      }
      ++next;
    }
  if (count) *count = next;
  return labels;
}

PageLayout decode_baselines(const ProbabilityMaps& maps, const LayoutDecoderConfig& cfg) {
  maps.validate();
  cfg.validate();
  const int w = maps.width, h = maps.height;
  const double f = maps.downsample / maps.pre_scale;  // map units to image pixels
  PageLayout page;
  page.width = maps.image_width > 0 ? maps.image_width : w * maps.downsample;
  page.height = maps.image_height > 0 ? maps.image_height : h * maps.downsample;
  if (!cfg.detect_lines || w == 0 || h == 0) return page;

  const double thr = cfg.detection_threshold;
  std::vector<bool> mask(maps.baseline.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = maps.baseline[i] > thr;
  int ncomp = 0;
  const auto labels = label_components(mask, w, h, &ncomp);
  std::vector<Box> boxes(static_cast<std::size_t>(ncomp));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (const int l = labels[maps.index(x, y)]; l >= 0) boxes[static_cast<std::size_t>(l)].add(x, y);

  UnionFind uf(ncomp);
  const int merge_gap = 2 * (cfg.vertical_connection_range + 1);
  for (int a = 0; a < ncomp; ++a)
    for (int b = a + 1; b < ncomp; ++b) {
      const Box& A = boxes[static_cast<std::size_t>(a)];
      const Box& B = boxes[static_cast<std::size_t>(b)];
      const int vgap = std::max(A.miny, B.miny) - std::min(A.maxy, B.maxy) - 1;
      const int hgap = std::max(A.minx, B.minx) - std::min(A.maxx, B.maxx) - 1;
      if (hgap < 0 && vgap <= cfg.vertical_connection_range) uf.unite(a, b);
      else if (cfg.merge_lines && vgap < 0 && hgap <= merge_gap) uf.unite(a, b);
    }

  // Per group: column → (Σp, Σp·y, max p), columns kept sorted by x.
  struct Column {
    double sum_p = 0.0, sum_py = 0.0, max_p = 0.0;
  };
  std::map<int, std::map<int, Column>> groups;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int l = labels[maps.index(x, y)];
      if (l < 0) continue;
      auto& col = groups[uf.find(l)][x];
      const double p = maps.baseline[maps.index(x, y)];
      col.sum_p += p;
      col.sum_py += p * (y + 0.5);
      col.max_p = std::max(col.max_p, p);
    }

  std::vector<TextLineGeom> lines;
  for (auto& [root, cols] : groups) {
    const double trim = cfg.line_end_weight * thr;
    while (!cols.empty() && cols.begin()->second.max_p < trim) cols.erase(cols.begin());
    while (!cols.empty() && std::prev(cols.end())->second.max_p < trim) cols.erase(std::prev(cols.end()));
    if (cols.empty()) continue;
    std::vector<Point> pts;
    for (const auto& [x, c] : cols) pts.push_back({x + 0.5, c.sum_py / c.sum_p});
    if (cfg.smooth_predictions && pts.size() >= 3) {
      std::vector<Point> sm = pts;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const std::size_t lo = i == 0 ? 0 : i - 1, hi = std::min(pts.size() - 1, i + 1);
        double s = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) s += pts[j].y;
        sm[i].y = s / static_cast<double>(hi - lo + 1);
      }
      pts = std::move(sm);
    }
    std::vector<double> asc, desc;
    for (const auto& p : pts) {
      const int x = static_cast<int>(std::floor(p.x));
      const int y = std::clamp(static_cast<int>(std::floor(p.y)), 0, h - 1);
      asc.push_back(maps.ascender[maps.index(x, y)]);
      desc.push_back(maps.descender[maps.index(x, y)]);
    }
    std::vector<Point> simple;
    if (pts.size() == 1) {
      simple = {{pts[0].x - 0.5, pts[0].y}, {pts[0].x + 0.5, pts[0].y}};
    } else {
      double tol = 0.5;
      simple = simplify_polyline(pts, tol);
      while (simple.size() > 32) simple = simplify_polyline(pts, tol *= 1.5);
      simple.front().x -= 0.5;
      simple.back().x += 0.5;
    }
    TextLineGeom line;
    for (const auto& p : simple) line.baseline.points.push_back({p.x * f, p.y * f});
    line.ascender_height = std::max(1.0, median_of(asc) * f);
    line.descender_height = std::max(0.0, median_of(desc) * f);
    lines.push_back(std::move(line));
  }

  if (cfg.adjust_heights && !lines.empty()) {
    std::vector<double> asc, desc;
    for (const auto& l : lines) {
      asc.push_back(l.ascender_height);
      desc.push_back(l.descender_height);
    }
    const double ma = median_of(asc), md = median_of(desc);
    for (auto& l : lines) {
      l.ascender_height = ma;
      l.descender_height = md;
    }
  }

  // Clamp to the page; drop lines that collapse.
  {
    PageLayout tmp;
    tmp.width = page.width;
    tmp.height = page.height;
    for (auto& l : lines) l.polygon = polygon_from_baseline(l.baseline, l.ascender_height, l.descender_height);
    tmp.regions.push_back({"tmp", {}, std::move(lines)});
    clamp_to_page(tmp);
    lines.clear();
    for (auto& l : tmp.regions[0].lines)
      if (l.baseline.points.size() >= 2 && arc_length(l.baseline) >= 1.0) lines.push_back(std::move(l));
  }

  std::vector<int> owner(lines.size(), -1);
  int nreg = 0;
  std::vector<int> rlabels;
  if (cfg.detect_regions) {
    std::vector<bool> rmask(maps.region.size());
    for (std::size_t i = 0; i < rmask.size(); ++i) rmask[i] = maps.region[i] > thr;
    rlabels = label_components(rmask, w, h, &nreg);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const Point mid = arc_midpoint(lines[i].baseline);
      const int x = std::clamp(static_cast<int>(std::floor(mid.x / f)), 0, w - 1);
      const int y = std::clamp(static_cast<int>(std::floor(mid.y / f)), 0, h - 1);
      owner[i] = rlabels[maps.index(x, y)];
    }
  }

  std::vector<Region> regions;
  std::map<int, std::size_t> region_of_label;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto lb = bounds_of(lines[i].polygon);
    if (owner[i] < 0) {
      regions.push_back({"s" + std::to_string(i), box_polygon(lb.left, lb.top, lb.right, lb.bottom), {lines[i]}});
      continue;
    }
    auto [it, inserted] = region_of_label.try_emplace(owner[i], regions.size());
    if (inserted) {
      Box b;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (rlabels[maps.index(x, y)] == owner[i]) b.add(x, y);
      regions.push_back({"c" + std::to_string(owner[i]),
                         box_polygon(b.minx * f, b.miny * f, (b.maxx + 1) * f, (b.maxy + 1) * f), {}});
    }
    Region& r = regions[it->second];
    r.lines.push_back(lines[i]);
    const auto rb = bounds_of(r.polygon);
    r.polygon = box_polygon(std::min(rb.left, lb.left), std::min(rb.top, lb.top), std::max(rb.right, lb.right),
                            std::max(rb.bottom, lb.bottom));
  }
  for (std::size_t i = 0; i < regions.size(); ++i)
    for (std::size_t j = 0; j < regions[i].lines.size(); ++j)
      regions[i].lines[j].id = regions[i].id + "_" + std::to_string(j);
  page.regions = std::move(regions);
  clamp_to_page(page);
  page = sort_reading_order(std::move(page));
  for (std::size_t i = 0; i < page.regions.size(); ++i) {
    auto& r = page.regions[i];
    r.id = "r" + std::to_string(i + 1);
    for (std::size_t j = 0; j < r.lines.size(); ++j) r.lines[j].id = r.id + "_l" + std::to_string(j + 1);
  }
  return page;
}

// ---------------------------------------------------------------- network

namespace {

template <class T>
nn::FeatureMap<T> upsample2(const nn::FeatureMap<T>& x) {
  nn::FeatureMap<T> y(x.channels, 2 * x.height, 2 * x.width);
  for (int c = 0; c < x.channels; ++c)
    for (int r = 0; r < y.height; ++r)
      for (int q = 0; q < y.width; ++q) y.data(c, r * y.width + q) = x.data(c, (r / 2) * x.width + q / 2);
  return y;
}

template <class T>
nn::FeatureMap<T> upsample2_backward(const nn::FeatureMap<T>& dy) {
  nn::FeatureMap<T> dx(dy.channels, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c)
    for (int r = 0; r < dy.height; ++r)
      for (int q = 0; q < dy.width; ++q) dx.data(c, (r / 2) * dx.width + q / 2) += dy.data(c, r * dy.width + q);
  return dx;
}

template <class T>
nn::FeatureMap<T> with_data(int c, int h, int w, nn::Mat<T> data) {
  nn::FeatureMap<T> m;
  m.channels = c;
  m.height = h;
  m.width = w;
  m.data = std::move(data);
  return m;
}

}  // namespace

template <class T>
LayoutNet<T>::LayoutNet(LayoutNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.downsample < 1) throw Error("layout net: downsample must be >= 1");
  Rng rng(derive_seed(seed, 0x1a70));
  const auto& wd = cfg_.widths;
  for (int k = 0; k <= kDepth; ++k) {
    nn::ConvSpec s;
    s.in_channels = k == 0 ? 1 : wd[static_cast<std::size_t>(k - 1)];
    s.out_channels = wd[static_cast<std::size_t>(k)];
    s.stride_h = s.stride_w = k == 0 ? 1 : 2;
    down_.emplace_back(params_, "down" + std::to_string(k), s);
    params_.init_normal(down_.back().weight_id(), std::sqrt(2.0 / down_.back().fan_in()), rng);
  }
  for (int k = kDepth - 1; k >= 0; --k) {
    nn::ConvSpec s;
    s.in_channels = wd[static_cast<std::size_t>(k + 1)];
    s.out_channels = wd[static_cast<std::size_t>(k)];
    up_.emplace_back(params_, "up" + std::to_string(k), s);
    params_.init_normal(up_.back().weight_id(), std::sqrt(2.0 / up_.back().fan_in()), rng);
  }
  nn::ConvSpec hs;
  hs.in_channels = wd[0];
  hs.out_channels = 4;
  hs.kernel_h = hs.kernel_w = 1;
  hs.pad_h = hs.pad_w = 0;
  head_ = nn::Conv2d<T>(params_, "head", hs);
  params_.init_normal(head_.weight_id(), std::sqrt(1.0 / head_.fan_in()), rng);
  params_.value(head_.bias_id())[0] = T(-2);  // baselines are sparse
}

template <class T>
nn::FeatureMap<T> LayoutNet<T>::forward(const nn::FeatureMap<T>& x, Cache* cache) const {
  if (x.channels != 1 || x.height % kMultiple != 0 || x.width % kMultiple != 0 || x.height == 0 || x.width == 0)
    throw Error("layout net input must be 1 channel with sides a positive multiple of 16");
  Cache local;
  Cache& c = cache ? *cache : local;
  c.height = x.height;
  c.width = x.width;
  c.down.assign(down_.size(), {});
  c.up.assign(up_.size(), {});
  c.down_out.assign(down_.size(), {});
  c.up_out.assign(up_.size(), {});
  std::vector<nn::FeatureMap<T>> skips;
  nn::FeatureMap<T> y = x;
  for (std::size_t k = 0; k < down_.size(); ++k) {
    y = down_[k].forward(params_, y, &c.down[k]);
    nn::relu_inplace(y.data);
    c.down_out[k] = y.data;
    skips.push_back(y);
  }
  for (std::size_t j = 0; j < up_.size(); ++j) {
    const std::size_t level = down_.size() - 2 - j;
    y = up_[j].forward(params_, upsample2(y), &c.up[j]);
    nn::relu_inplace(y.data);
    c.up_out[j] = y.data;
    y.data += skips[level].data;
  }
  return head_.forward(params_, y, &c.head);
}

template <class T>
void LayoutNet<T>::backward(const Cache& c, const nn::FeatureMap<T>& dlogits) {
  std::vector<nn::Mat<T>> dskip(down_.size());
  nn::FeatureMap<T> dy = head_.backward(params_, dlogits, c.head);
  for (std::size_t j = up_.size(); j-- > 0;) {
    const std::size_t level = down_.size() - 2 - j;
    dskip[level] = dy.data;
    nn::relu_backward_inplace(dy.data, c.up_out[j]);
    dy = upsample2_backward(up_[j].backward(params_, dy, c.up[j]));
  }
  for (std::size_t k = down_.size(); k-- > 0;) {
    if (dskip[k].size() != 0) dy.data += dskip[k];
    nn::relu_backward_inplace(dy.data, c.down_out[k]);
    dy = down_[k].backward(params_, dy, c.down[k], k > 0);
  }
}

template class LayoutNet<float>;
template class LayoutNet<double>;

nn::FeatureMap<float> layout_input(const Raster& image, int downsample, int* map_width, int* map_height) {
  if (image.empty()) throw Error("empty page image");
  Raster ink = image;
  for (auto& v : ink.pixels) v = 1.0F - std::clamp(v, 0.0F, 1.0F);
  const Raster small = downsample_blocks(ink, downsample);
  const int m = LayoutNet<float>::kMultiple;
  const int ph = (small.height + m - 1) / m * m;
  const int pw = (small.width + m - 1) / m * m;
  nn::FeatureMap<float> x(1, ph, pw);
  for (int y = 0; y < small.height; ++y)
    for (int q = 0; q < small.width; ++q) x.data(0, y * pw + q) = small.at(q, y);
  if (map_width) *map_width = small.width;
  if (map_height) *map_height = small.height;
  return x;
}

ProbabilityMaps predict_maps(const Raster& image, const LayoutNet<float>& net, double max_megapixels) {
  if (image.empty()) throw Error("empty page image");
  if (!(max_megapixels > 0.0)) throw Error("max megapixels must be positive");
  const double pixels = static_cast<double>(image.width) * image.height;
  double scale = 1.0;
  const Raster* src = &image;
  Raster scaled;
  if (pixels > max_megapixels * 1e6) {
    scale = std::sqrt(max_megapixels * 1e6 / pixels);
    scaled = resize(image, std::max(1, static_cast<int>(std::lround(image.width * scale))),
                    std::max(1, static_cast<int>(std::lround(image.height * scale))));
    src = &scaled;
  }
  int mw = 0, mh = 0;
  const auto x = layout_input(*src, net.config().downsample, &mw, &mh);
  const auto out = net.forward(x);
  ProbabilityMaps maps(mw, mh, net.config().downsample);
  maps.pre_scale = scale;
  maps.image_width = image.width;
  maps.image_height = image.height;
  for (int y = 0; y < mh; ++y)
    for (int q = 0; q < mw; ++q) {
      const auto i = maps.index(q, y);
      const auto col = static_cast<Eigen::Index>(y) * x.width + q;
      maps.baseline[i] = nn::sigmoid(out.data(0, col));
      maps.ascender[i] = nn::softplus(out.data(1, col));
      maps.descender[i] = nn::softplus(out.data(2, col));
      maps.region[i] = nn::sigmoid(out.data(3, col));
    }
  return maps;
}

// ---------------------------------------------------------------- training

LayoutTarget rasterize_targets(const PageLayout& layout, int image_width, int image_height, int ds) {
  if (ds < 1) throw Error("downsample must be >= 1");
  LayoutTarget t;
  t.width = (image_width + ds - 1) / ds;
  t.height = (image_height + ds - 1) / ds;
  const auto n = static_cast<std::size_t>(t.width) * t.height;
  t.baseline.assign(n, 0.0F);
  t.ascender.assign(n, 0.0F);
  t.descender.assign(n, 0.0F);
  t.region.assign(n, 0.0F);
  t.height_mask.assign(n, 0.0F);
  auto idx = [&](int x, int y) { return static_cast<std::size_t>(y) * t.width + x; };
  for (const auto& region : layout.regions) {
    if (region.polygon.size() >= 3)
      for (int y = 0; y < t.height; ++y)
        for (int x = 0; x < t.width; ++x)
          if (point_in_polygon({(x + 0.5) * ds, (y + 0.5) * ds}, region.polygon)) t.region[idx(x, y)] = 1.0F;
    for (const auto& line : region.lines) {
      const auto& pts = line.baseline.points;
      if (pts.size() < 2) continue;
      for (int x = 0; x < t.width; ++x) {
        const double ix = (x + 0.5) * ds;
        if (ix < pts.front().x || ix > pts.back().x) continue;
        std::size_t s = 1;
        while (s + 1 < pts.size() && pts[s].x < ix) ++s;
        const auto& a = pts[s - 1];
        const auto& b = pts[s];
        const double y = a.y + (b.y - a.y) * (ix - a.x) / (b.x - a.x);
        const int row = static_cast<int>(std::floor(y / ds));
        if (row < 0 || row >= t.height) continue;
        t.baseline[idx(x, row)] = 1.0F;
        for (int r = std::max(0, row - 1); r <= std::min(t.height - 1, row + 1); ++r) {
          t.ascender[idx(x, r)] = static_cast<float>(line.ascender_height / ds);
          t.descender[idx(x, r)] = static_cast<float>(line.descender_height / ds);
          t.height_mask[idx(x, r)] = 1.0F;
        }
      }
    }
  }
  return t;
}

double layout_loss(LayoutNet<float>& net, const LayoutSample& sample, const LayoutTrainConfig& cfg, bool with_grad) {
  int mw = 0, mh = 0;
  const auto x = layout_input(sample.image, net.config().downsample, &mw, &mh);
  const auto& t = sample.target;
  if (mw != t.width || mh != t.height)
    throw Error("layout target is " + std::to_string(t.width) + "×" + std::to_string(t.height) + " but the image maps to " +
                std::to_string(mw) + "×" + std::to_string(mh));
  LayoutNet<float>::Cache cache;
  const auto out = net.forward(x, with_grad ? &cache : nullptr);
  nn::FeatureMap<float> d(4, x.height, x.width);
  const double cells = static_cast<double>(mw) * mh;
  double masked = 0.0;
  for (float m : t.height_mask) masked += m;
  masked = std::max(masked, 1.0);
  const double pw = cfg.baseline_pos_weight;
  double loss = 0.0;
  auto softplus_d = [](double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); };
  for (int y = 0; y < mh; ++y)
    for (int q = 0; q < mw; ++q) {
      const auto i = static_cast<std::size_t>(y) * mw + q;
      const auto col = static_cast<Eigen::Index>(y) * x.width + q;
      for (int ch : {0, 3}) {
        const double z = out.data(ch, col);
        const double tgt = ch == 0 ? t.baseline[i] : t.region[i];
        const double wpos = ch == 0 ? pw : 1.0;
        loss += (wpos * tgt * softplus_d(-z) + (1.0 - tgt) * softplus_d(z)) / cells;
        const double p = 1.0 / (1.0 + std::exp(-z));
        d.data(ch, col) = static_cast<float>((p * (wpos * tgt + 1.0 - tgt) - wpos * tgt) / cells);
      }
      if (t.height_mask[i] > 0.0F)
        for (int ch : {1, 2}) {
          const double z = out.data(ch, col);
          const double tgt = ch == 1 ? t.ascender[i] : t.descender[i];
          const double hgt = softplus_d(z);
          loss += cfg.height_weight * std::abs(hgt - tgt) / masked;
          const double sign = hgt > tgt ? 1.0 : (hgt < tgt ? -1.0 : 0.0);
          d.data(ch, col) = static_cast<float>(cfg.height_weight * sign / (1.0 + std::exp(-z)) / masked);
        }
    }
  if (with_grad) net.backward(cache, d);
  return loss;
}

LayoutTrainResult train_layout_net(LayoutNet<float>& net, std::span<const LayoutSample> corpus,
                                   const LayoutTrainConfig& cfg) {
  if (cfg.iterations < 0) throw Error("layout training: iterations must be >= 0");
  LayoutTrainResult res;
  if (cfg.iterations == 0) return res;
  if (corpus.empty()) throw Error("layout training needs at least one sample");
  for (const auto& s : corpus) {
    int mw = 0, mh = 0;
    layout_input(s.image, net.config().downsample, &mw, &mh);
    if (mw != s.target.width || mh != s.target.height) throw Error("layout target dimensions do not match the image");
  }
  auto& params = net.params();
  const std::vector<bool> no_decay(params.size(), false);
  nn::AdamState<float> adam;
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    Rng rng(derive_seed(cfg.seed, 0x1a7, static_cast<std::uint64_t>(it)));
    const auto& s = corpus[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))];
    params.zero_grad();
    const double loss = layout_loss(net, s, cfg, true);
    if (!std::isfinite(loss)) throw Error("layout training diverged");
    nn::adamw_update<float>(params.values(), params.grads(), no_decay, adam, cfg.lr, 0.0);
    res.losses.push_back(loss);
  }
  return res;
}

// ---------------------------------------------------------------- checkpoint

namespace {
constexpr std::string_view kLayoutMagic{"FPTHD-L\0", 8};
constexpr std::uint32_t kLayoutVersion = 1;
}  // namespace

std::string serialize_layout_checkpoint(const LayoutNet<float>& net) {
  binio::Writer w;
  w.bytes(kLayoutMagic);
  w.u32(kLayoutVersion);
  w.u32(static_cast<std::uint32_t>(net.config().downsample));
  w.u32(static_cast<std::uint32_t>(net.config().widths.size()));
  for (int c : net.config().widths) w.u32(static_cast<std::uint32_t>(c));
  binio::write_params(w, net.params());
  return w.data();
}

LayoutNet<float> deserialize_layout_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes);
  if (bytes.size() < kLayoutMagic.size() || r.bytes(kLayoutMagic.size()) != kLayoutMagic)
    throw Error("not a layout checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kLayoutVersion) throw Error("unsupported layout checkpoint version " + std::to_string(version));
  LayoutNetConfig cfg;
  cfg.downsample = static_cast<int>(r.u32());
  if (r.u32() != cfg.widths.size()) throw Error("layout checkpoint: unexpected depth");
  for (int& c : cfg.widths) {
    c = static_cast<int>(r.u32());
    if (c < 1 || c > 4096) throw Error("layout checkpoint: implausible channel width");
  }
  LayoutNet<float> net(cfg, 0);
  binio::read_params(r, net.params());
  if (!r.done()) throw Error("layout checkpoint has trailing bytes");
  return net;
}

void save_layout_checkpoint(const std::filesystem::path& path, const LayoutNet<float>& net) {
  write_file_atomic(path, serialize_layout_checkpoint(net));
}

LayoutNet<float> load_layout_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_layout_checkpoint(read_file(path));
  } catch (const Error& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
}

}  // namespace fpthd
