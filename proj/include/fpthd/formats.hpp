#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fpthd/geometry.hpp"
#include "fpthd/layout.hpp"
#include "fpthd/train.hpp"

namespace fpthd {

/// Layout plus per-line transcriptions keyed by line id.
struct TranscribedPage {
  PageLayout layout;
  std::string image_filename;
  std::map<std::string, std::string> texts;
  std::map<std::string, double> confidences;  // optional, in [0,1]

  friend bool operator==(const TranscribedPage&, const TranscribedPage&) = default;
};

/// "<page_id>-rNNN-lNNN.png" with 1-based, zero-padded indices.
struct LineImageRef {
  std::string page_id;
  int region_index = 0;
  int line_index = 0;
  std::string file_name;
  friend bool operator==(const LineImageRef&, const LineImageRef&) = default;
};

LineImageRef make_line_ref(std::string_view page_id, int region_index, int line_index);
/// The suffix is matched at the end, so page ids may contain hyphens.
std::optional<LineImageRef> parse_line_image_name(std::string_view file_name);

/// File stem with every character outside [A-Za-z0-9_.-] replaced by '_' and
/// a "p_" prefix when it would not start an XML name.
std::string sanitize_page_id(std::string_view stem);
bool is_xml_name(std::string_view s);

std::string emit_page_xml(const TranscribedPage& page);

struct PageParseResult {
  TranscribedPage page;
  std::vector<std::string> warnings;
};
/// Throws fpthd::Error (with line numbers) on malformed XML, a missing Page
/// element or unparsable coordinates.
PageParseResult parse_page_xml(std::string_view xml);

std::string emit_markdown(const TranscribedPage& page);
/// Backslash-escapes Markdown syntax characters in one line of text.
std::string escape_markdown(std::string_view text);
std::string emit_txt(const TranscribedPage& page);

// ---------------------------------------------------------------- config

struct PipelineFlags {
  bool run_layout = true;
  bool run_cropper = true;
  bool run_ocr = true;
  bool run_decoder = false;  // accepted, no effect
  friend bool operator==(const PipelineFlags&, const PipelineFlags&) = default;
};

struct CropperConfig {
  int interp = 2;
  double line_scale = 1.0;
  int line_height = 50;
  friend bool operator==(const CropperConfig&, const CropperConfig&) = default;
};

struct PipelineConfig {
  PipelineFlags flags;
  std::string layout_method = "LAYOUT_CNN";
  std::string layout_model_path = "./ParseNet_296000.pt";
  bool layout_use_cpu = false;
  int downsample = 5;
  LayoutDecoderConfig decoder;
  std::string sorter_method = "REGION_SORTER_SMART";
  CropperConfig cropper;
  std::string ocr_json = "./ocr_engine.json";
  std::string ocr_model_path;
  bool ocr_use_cpu = false;
  TrainConfig train;

  void validate() const;
  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

struct ConfigParseResult {
  PipelineConfig config;
  std::vector<std::string> warnings;
};

/// INI text with [PAGE_PARSER], [LAYOUT_PARSER_1], [LAYOUT_PARSER_2],
/// [LINE_CROPPER], [OCR] and [TRAIN] sections. Keys are case-insensitive;
/// unknown keys produce warnings.
ConfigParseResult parse_config(std::string_view text);
ConfigParseResult load_config(const std::filesystem::path& path);
/// INI text that parses back to `cfg`.
std::string emit_config(const PipelineConfig& cfg);

}  // namespace fpthd
