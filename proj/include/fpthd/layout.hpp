#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fpthd/geometry.hpp"
#include "fpthd/nn/layers.hpp"
#include "fpthd/nn/params.hpp"
#include "fpthd/raster.hpp"

namespace fpthd {

/// Four aligned maps at 1/downsample of the (possibly pre-scaled) image.
/// Map cell (c, r) covers image pixels [c·ds, (c+1)·ds) × [r·ds, (r+1)·ds).
struct ProbabilityMaps {
  int width = 0;
  int height = 0;
  int downsample = 1;
  std::vector<float> baseline;   // [0,1]
  std::vector<float> ascender;   // heights in map cells
  std::vector<float> descender;  // heights in map cells
  std::vector<float> region;     // [0,1]
  double pre_scale = 1.0;        // image was resized by this factor before mapping
  int image_width = 0;           // original image size; 0 means width·downsample
  int image_height = 0;

  ProbabilityMaps() = default;
  ProbabilityMaps(int w, int h, int ds);

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  /// Throws fpthd::Error unless all four maps have width·height cells.
  void validate() const;
};

struct LayoutDecoderConfig {
  double detection_threshold = 0.2;
  int vertical_connection_range = 3;
  double line_end_weight = 1.0;
  bool merge_lines = false;
  bool smooth_predictions = false;
  double max_megapixels = 5.0;
  bool detect_lines = true;
  bool detect_regions = true;
  bool adjust_heights = false;

  void validate() const;
  friend bool operator==(const LayoutDecoderConfig&, const LayoutDecoderConfig&) = default;
};

/// Ramer–Douglas–Peucker reduction with the given tolerance.
std::vector<Point> simplify_polyline(const std::vector<Point>& points, double tolerance);

/// 8-connected component labels (-1 for background) in row-major scan order.
std::vector<int> label_components(const std::vector<bool>& mask, int width, int height, int* count = nullptr);

PageLayout decode_baselines(const ProbabilityMaps& maps, const LayoutDecoderConfig& cfg);

struct LayoutNetConfig {
  int downsample = 5;
  std::array<int, 5> widths{16, 32, 64, 64, 64};  // full-res encoder, then four stride-2 stages
  friend bool operator==(const LayoutNetConfig&, const LayoutNetConfig&) = default;
};

/// Encoder–decoder over the inverted, block-averaged page: four stride-2 conv
/// stages down, nearest upsampling + conv with additive skips back up, and a
/// 1×1 head producing [baseline, ascender, descender, region] logits.
template <class T>
class LayoutNet {
 public:
  static constexpr int kDepth = 4;
  static constexpr int kMultiple = 1 << kDepth;

  struct Cache {
    std::vector<nn::ConvCache<T>> down, up;
    std::vector<nn::Mat<T>> down_out, up_out;
    nn::ConvCache<T> head;
    int height = 0, width = 0;
  };

  LayoutNet() = default;
  LayoutNet(LayoutNetConfig cfg, std::uint64_t seed);

  const LayoutNetConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// 1×H×W input (H, W multiples of 16) to 4×H×W raw logits.
  nn::FeatureMap<T> forward(const nn::FeatureMap<T>& x, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const nn::FeatureMap<T>& dlogits);

 private:
  LayoutNetConfig cfg_;
  nn::ParamStore<T> params_;
  std::vector<nn::Conv2d<T>> down_;  // enc0 + 4 strided
  std::vector<nn::Conv2d<T>> up_;    // 4 decoder convs
  nn::Conv2d<T> head_;
};

extern template class LayoutNet<float>;
extern template class LayoutNet<double>;

/// Inverted (ink high) image averaged over ds×ds blocks and zero-padded to a
/// multiple of 16. Writes the unpadded map size.
nn::FeatureMap<float> layout_input(const Raster& image, int downsample, int* map_width, int* map_height);

/// Runs the network. Images above `max_megapixels` are first shrunk by
/// √(max·1e6 / (w·h)).
ProbabilityMaps predict_maps(const Raster& image, const LayoutNet<float>& net, double max_megapixels = 5.0);

/// Training targets at map resolution.
struct LayoutTarget {
  int width = 0;
  int height = 0;
  std::vector<float> baseline, ascender, descender, region;
  std::vector<float> height_mask;  // 1 where height losses apply
};

/// Rasterizes a ground-truth layout: the baseline cell of each map column
/// (row floor(y/ds)) is 1, heights in map cells are painted one row around
/// it, and region cells are those whose centers fall inside a region polygon.
LayoutTarget rasterize_targets(const PageLayout& layout, int image_width, int image_height, int downsample);

struct LayoutSample {
  Raster image;
  LayoutTarget target;
};

struct LayoutTrainConfig {
  std::int64_t iterations = 500;
  double lr = 2e-3;
  double baseline_pos_weight = 4.0;
  double height_weight = 0.5;
  std::uint64_t seed = 0;
};

struct LayoutTrainResult {
  std::vector<double> losses;  // one per iteration
};

/// Adam on BCE (baseline, region) + masked L1 (heights).
LayoutTrainResult train_layout_net(LayoutNet<float>& net, std::span<const LayoutSample> corpus,
                                   const LayoutTrainConfig& cfg);

/// Loss of one sample, optionally accumulating gradients.
double layout_loss(LayoutNet<float>& net, const LayoutSample& sample, const LayoutTrainConfig& cfg, bool with_grad);

std::string serialize_layout_checkpoint(const LayoutNet<float>& net);
LayoutNet<float> deserialize_layout_checkpoint(std::string_view bytes);
void save_layout_checkpoint(const std::filesystem::path& path, const LayoutNet<float>& net);
LayoutNet<float> load_layout_checkpoint(const std::filesystem::path& path);

}  // namespace fpthd
