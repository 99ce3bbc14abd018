#include "fpthd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "fpthd/common.hpp"

namespace fpthd {

std::size_t PageLayout::line_count() const {
  std::size_t n = 0;
  for (const auto& r : regions) n += r.lines.size();
  return n;
}

void validate_baseline(const Baseline& baseline) {
  const auto& p = baseline.points;
  if (p.size() < 2) throw Error("baseline needs at least two points");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(p[i].x) || !std::isfinite(p[i].y)) throw Error("baseline point is not finite");
    if (i > 0 && !(p[i].x > p[i - 1].x)) throw Error("baseline x must be strictly increasing");
  }
}

double arc_length(const Baseline& baseline) {
  double len = 0.0;
  const auto& p = baseline.points;
  for (std::size_t i = 1; i < p.size(); ++i) len += std::hypot(p[i].x - p[i - 1].x, p[i].y - p[i - 1].y);
  return len;
}

namespace {

struct Vec2 {
  double x, y;
};

Vec2 normalized(Vec2 v) {
  const double n = std::hypot(v.x, v.y);
  return n > 0.0 ? Vec2{v.x / n, v.y / n} : Vec2{0.0, -1.0};
}

// Upward unit normal of each vertex: the bisector of the adjacent segment
// normals. For a tangent (tx,ty) in image coordinates the upward normal is
// (ty,-tx).
std::vector<Vec2> vertex_normals(const std::vector<Point>& p) {
  const std::size_t n = p.size();
  std::vector<Vec2> seg(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Vec2 t = normalized({p[i + 1].x - p[i].x, p[i + 1].y - p[i].y});
    seg[i] = {t.y, -t.x};
  }
  std::vector<Vec2> out(n);
  out[0] = seg[0];
  out[n - 1] = seg[n - 2];
  for (std::size_t i = 1; i + 1 < n; ++i) out[i] = normalized({seg[i - 1].x + seg[i].x, seg[i - 1].y + seg[i].y});
  return out;
}

}  // namespace

Polygon polygon_from_baseline(const Baseline& baseline, double ascender_height,
                              double descender_height) {
  validate_baseline(baseline);
  if (arc_length(baseline) < 1e-9) throw Error("degenerate line");
  if (ascender_height + descender_height <= 0.0) throw Error("zero extent");
  const auto& p = baseline.points;
  const auto normals = vertex_normals(p);
  Polygon poly;
  poly.reserve(2 * p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    poly.push_back({p[i].x + ascender_height * normals[i].x, p[i].y + ascender_height * normals[i].y});
  for (std::size_t i = p.size(); i-- > 0;)
    poly.push_back({p[i].x - descender_height * normals[i].x, p[i].y - descender_height * normals[i].y});
  return poly;
}

bool point_in_polygon(const Point& pt, const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n == 0) return false;
  constexpr double kEdgeEps = 1e-9;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % n];
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((pt.x - a.x) * dx + (pt.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    if (std::hypot(a.x + t * dx - pt.x, a.y + t * dy - pt.y) <= kEdgeEps) return true;
  }
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > pt.y) != (b.y > pt.y)) {
      const double x_cross = a.x + (pt.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (pt.x < x_cross) inside = !inside;
    }
  }
  return inside;
}

Bounds bounds_of(const Polygon& polygon) {
  Bounds b{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
           -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& p : polygon) {
    b.left = std::min(b.left, p.x);
    b.top = std::min(b.top, p.y);
    b.right = std::max(b.right, p.x);
    b.bottom = std::max(b.bottom, p.y);
  }
  return b;
}

Bounds bounds_of(const Region& region) {
  Polygon pts = region.polygon;
  if (pts.empty()) {
    for (const auto& l : region.lines) {
      pts.insert(pts.end(), l.polygon.begin(), l.polygon.end());
      pts.insert(pts.end(), l.baseline.points.begin(), l.baseline.points.end());
    }
  }
  if (pts.empty()) return {};
  return bounds_of(pts);
}

namespace {

// Interpolating kernels on the integer grid. Each returns the taps (offset
// from `base`, weight) for a fractional grid coordinate.
struct Taps1D {
  int base = 0;
  int count = 0;
  double w[3] = {0.0, 0.0, 0.0};
};

Taps1D kernel_taps(double g, int order) {
  Taps1D t;
  switch (order) {
    case 0:
      t.base = static_cast<int>(std::floor(g + 0.5));
      t.count = 1;
      t.w[0] = 1.0;
      break;
    case 1: {
      t.base = static_cast<int>(std::floor(g));
      const double f = g - t.base;
      t.count = 2;
      t.w[0] = 1.0 - f;
      t.w[1] = f;
      break;
    }
    case 2: {
      // Interpolating quadratic: w(x) = 1 - 2x² for |x| <= 1/2,
      // x² - 5|x|/2 + 3/2 for 1/2 < |x| <= 3/2. Exact on integer positions.
      const int nearest = static_cast<int>(std::floor(g + 0.5));
      const double d = g - nearest;
      t.base = nearest - 1;
      t.count = 3;
      t.w[0] = d * d - 0.5 * d;
      t.w[1] = 1.0 - 2.0 * d * d;
      t.w[2] = d * d + 0.5 * d;
      break;
    }
    default:
      throw Error("unsupported interpolation order " + std::to_string(order));
  }
  return t;
}

}  // namespace

LineImage rectify_and_crop(const Raster& image, const TextLineGeom& line, int target_height,
                           double line_scale, int interp_order, float background) {
  if (image.empty()) throw Error("rectify_and_crop: empty image");
  if (target_height < 8) throw Error("target height must be >= 8");
  validate_baseline(line.baseline);
  const double length = arc_length(line.baseline);
  if (length < 1.0) throw Error("degenerate line");
  const double extent = line_scale * (line.ascender_height + line.descender_height);
  if (!(extent > 0.0)) throw Error("zero extent");
  if (interp_order < 0 || interp_order > 2)
    throw Error("unsupported interpolation order " + std::to_string(interp_order));

  const long rounded = std::lround(length * target_height / extent);
  const int width = static_cast<int>(std::max<long>(1, rounded));

  // Work relative to an integer origin so that integer translations of the
  // page and geometry reproduce the crop bit for bit.
  const auto& src = line.baseline.points;
  const double ox = std::floor(src.front().x);
  const double oy = std::floor(src.front().y);
  std::vector<Point> p(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) p[i] = {src[i].x - ox, src[i].y - oy};
  const auto normals = vertex_normals(p);
  std::vector<double> cum(p.size(), 0.0);
  for (std::size_t i = 1; i < p.size(); ++i) cum[i] = cum[i - 1] + std::hypot(p[i].x - p[i - 1].x, p[i].y - p[i - 1].y);

  const int base_x = static_cast<int>(ox);
  const int base_y = static_cast<int>(oy);
  const double above = line_scale * line.ascender_height;

  LineImage out{Raster(width, target_height, background), line.id};
  std::size_t seg = 0;
  for (int c = 0; c < width; ++c) {
    const double s = (c + 0.5) * cum.back() / width;
    while (seg + 2 < p.size() && s > cum[seg + 1]) ++seg;
    const double seg_len = cum[seg + 1] - cum[seg];
    const double u = seg_len > 0.0 ? std::clamp((s - cum[seg]) / seg_len, 0.0, 1.0) : 0.0;
    const double px = p[seg].x + u * (p[seg + 1].x - p[seg].x);
    const double py = p[seg].y + u * (p[seg + 1].y - p[seg].y);
    const Vec2 n = normalized({(1.0 - u) * normals[seg].x + u * normals[seg + 1].x,
                               (1.0 - u) * normals[seg].y + u * normals[seg + 1].y});
    for (int r = 0; r < target_height; ++r) {
      const double v = above - (r + 0.5) * extent / target_height;
      // Continuous coordinates put pixel centres at +0.5; shift to the grid.
      const double gx = px + v * n.x - 0.5;
      const double gy = py + v * n.y - 0.5;
      const Taps1D tx = kernel_taps(gx, interp_order);
      const Taps1D ty = kernel_taps(gy, interp_order);
      double acc = 0.0;
      for (int j = 0; j < ty.count; ++j) {
        if (ty.w[j] == 0.0) continue;
        const int yy = base_y + ty.base + j;
        double row = 0.0;
        for (int i = 0; i < tx.count; ++i) {
          if (tx.w[i] == 0.0) continue;
          const int xx = base_x + tx.base + i;
          const double val = image.contains(xx, yy) ? image.at(xx, yy) : background;
          row += tx.w[i] * val;
        }
        acc += ty.w[j] * row;
      }
      out.image.at(c, r) = static_cast<float>(acc);
    }
  }
  return out;
}

LineImage rectify_and_crop(const Raster& image, const TextLineGeom& line, int target_height,
                           double line_scale, int interp_order) {
  if (image.empty()) throw Error("rectify_and_crop: empty image");
  return rectify_and_crop(image, line, target_height, line_scale, interp_order, median_border(image));
}

namespace {

double mean_baseline_y(const TextLineGeom& l) {
  if (l.baseline.points.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : l.baseline.points) s += p.y;
  return s / static_cast<double>(l.baseline.points.size());
}

double leftmost_x(const TextLineGeom& l) {
  double x = std::numeric_limits<double>::infinity();
  for (const auto& p : l.baseline.points) x = std::min(x, p.x);
  for (const auto& p : l.polygon) x = std::min(x, p.x);
  return x;
}

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

}  // namespace

PageLayout sort_reading_order(PageLayout layout) {
  for (auto& region : layout.regions) {
    std::stable_sort(region.lines.begin(), region.lines.end(), [](const TextLineGeom& a, const TextLineGeom& b) {
      return std::make_tuple(mean_baseline_y(a), leftmost_x(a), a.id) <
             std::make_tuple(mean_baseline_y(b), leftmost_x(b), b.id);
    });
  }
  auto& regions = layout.regions;
  const std::size_t n = regions.size();
  if (n < 2) return layout;

  std::vector<Bounds> bounds(n);
  for (std::size_t i = 0; i < n; ++i) bounds[i] = bounds_of(regions[i]);
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double overlap = std::min(bounds[i].right, bounds[j].right) - std::max(bounds[i].left, bounds[j].left);
      const double narrower = std::min(bounds[i].right - bounds[i].left, bounds[j].right - bounds[j].left);
      if (overlap >= 0.0 && overlap >= 0.5 * narrower) parent[find_root(parent, i)] = find_root(parent, j);
    }

  struct Column {
    double left = std::numeric_limits<double>::infinity();
    double top = std::numeric_limits<double>::infinity();
    std::string first_id;
  };
  std::vector<Column> columns(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& c = columns[find_root(parent, i)];
    c.left = std::min(c.left, bounds[i].left);
    c.top = std::min(c.top, bounds[i].top);
    if (c.first_id.empty() || regions[i].id < c.first_id) c.first_id = regions[i].id;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ca = columns[find_root(parent, a)];
    const auto& cb = columns[find_root(parent, b)];
    return std::make_tuple(ca.left, ca.top, ca.first_id, bounds[a].top, bounds[a].left, regions[a].id) <
           std::make_tuple(cb.left, cb.top, cb.first_id, bounds[b].top, bounds[b].left, regions[b].id);
  });
  std::vector<Region> sorted;
  sorted.reserve(n);
  for (std::size_t i : order) sorted.push_back(std::move(regions[i]));
  regions = std::move(sorted);
  return layout;
}

void clamp_to_page(PageLayout& layout) {
  const double w = layout.width;
  const double h = layout.height;
  auto clamp_pt = [&](Point& p) {
    p.x = std::clamp(p.x, 0.0, w);
    p.y = std::clamp(p.y, 0.0, h);
  };
  for (auto& region : layout.regions) {
    for (auto& p : region.polygon) clamp_pt(p);
    for (auto& line : region.lines) {
      for (auto& p : line.polygon) clamp_pt(p);
      std::vector<Point> kept;
      for (auto p : line.baseline.points) {
        clamp_pt(p);
        if (kept.empty() || p.x > kept.back().x) kept.push_back(p);
      }
      line.baseline.points = std::move(kept);
    }
  }
}

}  // namespace fpthd
