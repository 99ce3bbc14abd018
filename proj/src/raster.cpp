#include "fpthd/raster.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "fpthd/common.hpp"

namespace fpthd {

Raster load_image(const std::filesystem::path& path) {
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw Error("cannot read image '" + path.string() + "'");
  Raster out(img.cols, img.rows);
  for (int y = 0; y < img.rows; ++y) {
    const auto* row = img.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.cols; ++x) out.at(x, y) = static_cast<float>(row[x]) / 255.0F;
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const Raster& image) {
  if (image.empty()) throw Error("cannot encode an empty image");
  cv::Mat m(image.height, image.width, CV_8UC1);
  for (int y = 0; y < image.height; ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width; ++x) {
      const float v = std::clamp(image.at(x, y), 0.0F, 1.0F);
      row[x] = static_cast<std::uint8_t>(std::lround(v * 255.0F));
    }
  }
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", m, buf)) throw Error("PNG encoding failed");
  return buf;
}

void save_png(const std::filesystem::path& path, const Raster& image) {
  const auto buf = encode_png(image);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(buf.data()), buf.size()));
}

namespace {

// Separable 1-D resampling. Each output cell covers [i*scale, (i+1)*scale)
// in source coordinates; shrinking integrates the source box, enlarging
// interpolates linearly between pixel centres.
struct Tap {
  int index;
  float weight;
};

std::vector<std::vector<Tap>> resample_taps(int src_len, int dst_len) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(dst_len));
  const double scale = static_cast<double>(src_len) / dst_len;
  for (int i = 0; i < dst_len; ++i) {
    auto& t = taps[static_cast<std::size_t>(i)];
    if (scale > 1.0) {
      const double a = i * scale;
      const double b = (i + 1) * scale;
      double total = 0.0;
      for (int s = static_cast<int>(std::floor(a)); s < static_cast<int>(std::ceil(b)); ++s) {
        const double w = std::min<double>(b, s + 1) - std::max<double>(a, s);
        if (w <= 0.0 || s < 0 || s >= src_len) continue;
        t.push_back({s, static_cast<float>(w)});
        total += w;
      }
      for (auto& tap : t) tap.weight = static_cast<float>(tap.weight / total);
    } else {
      const double c = (i + 0.5) * scale - 0.5;
      int s0 = static_cast<int>(std::floor(c));
      const double f = c - s0;
      const int lo = std::clamp(s0, 0, src_len - 1);
      const int hi = std::clamp(s0 + 1, 0, src_len - 1);
      if (lo == hi || f == 0.0) {
        t.push_back({lo, 1.0F});
      } else {
        t.push_back({lo, static_cast<float>(1.0 - f)});
        t.push_back({hi, static_cast<float>(f)});
      }
    }
  }
  return taps;
}

}  // namespace

Raster resize(const Raster& src, int new_width, int new_height) {
  if (src.empty() || new_width <= 0 || new_height <= 0) throw Error("resize: empty image or target");
  if (new_width == src.width && new_height == src.height) return src;
  const auto xt = resample_taps(src.width, new_width);
  const auto yt = resample_taps(src.height, new_height);
  Raster tmp(new_width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < new_width; ++x) {
      float acc = 0.0F;
      for (const auto& t : xt[static_cast<std::size_t>(x)]) acc += t.weight * src.at(t.index, y);
      tmp.at(x, y) = acc;
    }
  Raster out(new_width, new_height);
  for (int y = 0; y < new_height; ++y)
    for (int x = 0; x < new_width; ++x) {
      float acc = 0.0F;
      for (const auto& t : yt[static_cast<std::size_t>(y)]) acc += t.weight * tmp.at(x, t.index);
      out.at(x, y) = acc;
    }
  return out;
}

Raster downsample_blocks(const Raster& src, int factor) {
  if (factor < 1) throw Error("downsample factor must be >= 1");
  if (factor == 1) return src;
  const int w = (src.width + factor - 1) / factor;
  const int h = (src.height + factor - 1) / factor;
  Raster out(w, h);
  for (int by = 0; by < h; ++by)
    for (int bx = 0; bx < w; ++bx) {
      double acc = 0.0;
      int n = 0;
      for (int y = by * factor; y < std::min(src.height, (by + 1) * factor); ++y)
        for (int x = bx * factor; x < std::min(src.width, (bx + 1) * factor); ++x) {
          acc += src.at(x, y);
          ++n;
        }
      out.at(bx, by) = static_cast<float>(acc / n);
    }
  return out;
}

float median(std::span<const float> values) {
  if (values.empty()) throw Error("median of empty set");
  std::vector<float> v(values.begin(), values.end());
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const float upper = *mid;
  const float lower = *std::max_element(v.begin(), mid);
  return 0.5F * (lower + upper);
}

float median_border(const Raster& image) {
  if (image.empty()) throw Error("median_border: empty image");
  std::vector<float> border;
  border.reserve(2 * static_cast<std::size_t>(image.width + image.height));
  for (int x = 0; x < image.width; ++x) {
    border.push_back(image.at(x, 0));
    if (image.height > 1) border.push_back(image.at(x, image.height - 1));
  }
  for (int y = 1; y + 1 < image.height; ++y) {
    border.push_back(image.at(0, y));
    if (image.width > 1) border.push_back(image.at(image.width - 1, y));
  }
  return median(border);
}

Raster crop_rect(const Raster& src, int x0, int y0, int w, int h, float fill) {
  Raster out(w, h, fill);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (src.contains(x0 + x, y0 + y)) out.at(x, y) = src.at(x0 + x, y0 + y);
  return out;
}

Raster dilate(const Raster& src, int k) {
  if (k <= 1) return src;
  Raster out(src.width, src.height, 0.0F);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      float m = src.at(x, y);
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          if (src.contains(x - dx, y - dy)) m = std::max(m, src.at(x - dx, y - dy));
      out.at(x, y) = m;
    }
  return out;
}

Raster erode(const Raster& src, int k) {
  if (k <= 1) return src;
  Raster out(src.width, src.height, 0.0F);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      float m = src.at(x, y);
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          m = std::min(m, src.contains(x + dx, y + dy) ? src.at(x + dx, y + dy) : 0.0F);
      out.at(x, y) = m;
    }
  return out;
}

}  // namespace fpthd
