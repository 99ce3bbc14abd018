#pragma once

#include <string>
#include <vector>

#include "fpthd/raster.hpp"

namespace fpthd {

/// Pixel coordinate; y grows downward.
struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

using Polygon = std::vector<Point>;

/// Polyline the glyphs of a text line sit on. Points run left to right with
/// strictly increasing x.
struct Baseline {
  std::vector<Point> points;
  friend bool operator==(const Baseline&, const Baseline&) = default;
};

struct TextLineGeom {
  std::string id;
  Baseline baseline;
  double ascender_height = 0.0;
  double descender_height = 0.0;
  Polygon polygon;
  friend bool operator==(const TextLineGeom&, const TextLineGeom&) = default;
};

struct Region {
  std::string id;
  Polygon polygon;
  std::vector<TextLineGeom> lines;
  friend bool operator==(const Region&, const Region&) = default;
};

struct PageLayout {
  std::string page_id;
  int width = 0;
  int height = 0;
  std::vector<Region> regions;
  friend bool operator==(const PageLayout&, const PageLayout&) = default;

  std::size_t line_count() const;
};

/// Rectified, fixed-height raster of one text line.
struct LineImage {
  Raster image;
  std::string line_id;
};

/// Throws fpthd::Error unless the baseline has >= 2 points with strictly
/// increasing x.
void validate_baseline(const Baseline& baseline);
double arc_length(const Baseline& baseline);

/// Offsets the baseline by +ascender along the upward (bisector) normal and
/// by -descender downward. Returns 2·n vertices: the top edge left to right
/// followed by the bottom edge right to left.
Polygon polygon_from_baseline(const Baseline& baseline, double ascender_height,
                              double descender_height);

/// Inclusive of the boundary.
bool point_in_polygon(const Point& p, const Polygon& polygon);

struct Bounds {
  double left = 0.0, top = 0.0, right = 0.0, bottom = 0.0;
};
Bounds bounds_of(const Polygon& polygon);
Bounds bounds_of(const Region& region);

/// Samples the band [-scale·ascender, +scale·descender] around the baseline
/// along its normals and resamples it to `target_height` rows. Samples that
/// fall outside the image take `background`.
LineImage rectify_and_crop(const Raster& image, const TextLineGeom& line, int target_height,
                           double line_scale, int interp_order, float background);

/// Same, using the median border intensity of `image` as background.
LineImage rectify_and_crop(const Raster& image, const TextLineGeom& line, int target_height,
                           double line_scale, int interp_order);

/// Column-major reading order: regions whose x-intervals overlap by at least
/// half the narrower width share a column; columns run left to right, regions
/// top to bottom, lines by mean baseline y.
PageLayout sort_reading_order(PageLayout layout);

/// Clamps every coordinate into [0,width]×[0,height] and drops baseline
/// points that collapse onto their predecessor's x.
void clamp_to_page(PageLayout& layout);

}  // namespace fpthd
