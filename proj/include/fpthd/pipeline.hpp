#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fpthd/formats.hpp"
#include "fpthd/layout.hpp"
#include "fpthd/ocrnet.hpp"
#include "fpthd/train.hpp"

namespace fpthd {

struct DatasetEntry {
  std::filesystem::path image;
  std::string text;  // NFC
  friend bool operator==(const DatasetEntry&, const DatasetEntry&) = default;
};

struct DatasetManifest {
  std::vector<DatasetEntry> entries;  // sorted by path
  Charset charset;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Reads either a TSV file (`relative_image_path<TAB>text`, paths relative to
/// the file) or a directory tree of `.png` files with sibling `.txt` files.
DatasetManifest load_manifest(const std::filesystem::path& source);
std::vector<LineSample> load_samples(const DatasetManifest& manifest);

struct LineCrop {
  LineImageRef ref;
  std::string line_id;
  Raster image;
};

struct RecognizedLine {
  std::string text;
  double confidence = 0.0;  // geometric mean of the per-frame best probability
};
RecognizedLine recognize_line(const OcrModel<float>& model, const Raster& line);

/// Crops every line of `layout` in reading order.
std::vector<LineCrop> crop_lines(const Raster& image, const PageLayout& layout, const CropperConfig& cfg);

/// One page through layout → crop → OCR. `given_layout` replaces layout
/// analysis; `crops` (when set) receives the line images.
TranscribedPage transcribe_page(const Raster& image, const std::string& page_id, const PipelineConfig& cfg,
                                const LayoutNet<float>* layout_net, const OcrModel<float>* ocr,
                                const PageLayout* given_layout = nullptr, std::vector<LineCrop>* crops = nullptr);

// ---------------------------------------------------------------- commands

enum ExitCode { kExitOk = 0, kExitPartial = 1, kExitConfig = 2 };

struct TranscribeOptions {
  std::vector<std::filesystem::path> inputs;  // images or directories of images
  std::filesystem::path out_dir;
  std::filesystem::path layout_checkpoint;
  std::filesystem::path ocr_checkpoint;
  std::filesystem::path page_xml_dir;  // layouts used when layout analysis is off
  std::filesystem::path crop_dir;      // defaults to out_dir/crops
  PipelineConfig config;
  bool keep_crops = true;
  int jobs = 0;  // 0: hardware concurrency
  bool layout_only = false;
  bool crop_only = false;
};

/// Expands directories to their PNG/JPEG files, sorted.
std::vector<std::filesystem::path> collect_images(const std::vector<std::filesystem::path>& inputs);

int cmd_transcribe(const TranscribeOptions& options, std::ostream& err);
int cmd_layout(TranscribeOptions options, std::ostream& err);
int cmd_crop(TranscribeOptions options, std::ostream& err);

struct TrainCommandOptions {
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
  std::filesystem::path checkpoint;
  std::filesystem::path log_csv;  // default: checkpoint + ".csv"
  std::filesystem::path state;    // default: checkpoint + ".state"
  bool resume = false;
  TrainConfig config;
};
int cmd_train(const TrainCommandOptions& options, std::ostream& out, std::ostream& err);

struct EvaluateOptions {
  std::filesystem::path hyp_dir;
  std::filesystem::path ref_dir;
  std::filesystem::path csv;  // optional
};
int cmd_evaluate(const EvaluateOptions& options, std::ostream& out, std::ostream& err);

struct TrainLayoutOptions {
  std::filesystem::path data_dir;  // page images with sibling PAGE XML files
  std::filesystem::path checkpoint;
  LayoutTrainConfig config;
  int downsample = 5;
};
int cmd_train_layout(const TrainLayoutOptions& options, std::ostream& out, std::ostream& err);

struct SynthOptions {
  std::filesystem::path out_dir;
  int train_lines = 200;
  int val_lines = 40;
  int pages = 5;
  std::uint64_t seed = 1;
};
/// Writes lines/{train,val}/*.png+.txt with TSV manifests and pages/*.png
/// with ground-truth PAGE XML and TXT.
int cmd_synth(const SynthOptions& options, std::ostream& out, std::ostream& err);

}  // namespace fpthd
