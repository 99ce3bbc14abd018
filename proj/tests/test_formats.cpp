#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "fpthd/formats.hpp"
#include "fpthd/random.hpp"
#include "fixtures.hpp"

using namespace fpthd;
using namespace fixtures;
namespace fs = std::filesystem;

namespace {

const fs::path kGolden = FPTHD_GOLDEN_DIR;
const fs::path kData = FPTHD_TEST_DATA_DIR;

void expect_golden(const std::string& name, const std::string& text) {
  const auto path = kGolden / name;
  if (std::getenv("FPTHD_REGEN_GOLDEN")) write_file_atomic(path, text);
  ASSERT_TRUE(fs::exists(path)) << path;
  EXPECT_EQ(read_file(path), text) << name;
}

// Minimal Markdown reading for escaped text: a backslash before ASCII
// punctuation yields the punctuation character.
std::string unescape_markdown(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && std::ispunct(static_cast<unsigned char>(s[i + 1]))) {
      out += s[++i];
      continue;
    }
    out += s[i];
  }
  return out;
}

// True when `s` would render with markup: an unescaped emphasis, code, link,
// html, heading, list or table marker.
bool has_live_markup(const std::string& s) {
  bool at_start = true;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c == '\\') {
      ++i;
      at_start = false;
      continue;
    }
    if (std::string_view("*_`[]<>|~").find(c) != std::string_view::npos) return true;
    if (at_start && (c == '#' || c == '-' || c == '+' || c == '=')) return true;
    if (at_start && std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t j = i;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      if (j < s.size() && (s[j] == '.' || s[j] == ')')) return true;
    }
    at_start = false;
  }
  return false;
}

}  // namespace

TEST(PageXml, GoldenOneLine) {
  const auto xml = emit_page_xml(one_line_page());
  EXPECT_NE(xml.find("<Baseline points=\"0,95 10,95\"/>"), std::string::npos);
  EXPECT_NE(xml.find("<Unicode>dñi</Unicode>"), std::string::npos);
  expect_golden("one_line.xml", xml);
}

TEST(PageXml, GoldenTwoRegions) { expect_golden("two_regions.xml", emit_page_xml(two_by_two_page())); }

TEST(PageXml, EmptyLayout) {
  TranscribedPage p;
  p.layout.page_id = "blank";
  p.layout.width = 10;
  p.layout.height = 10;
  const auto xml = emit_page_xml(p);
  EXPECT_NE(xml.find("<Page "), std::string::npos);
  EXPECT_EQ(xml.find("TextRegion"), std::string::npos);
  EXPECT_EQ(parse_page_xml(xml).page, p);
}

TEST(PageXml, RoundTripRandomLayouts) {
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    const auto page = random_page(rng);
    const auto xml = emit_page_xml(page);
    const auto parsed = parse_page_xml(xml);
    EXPECT_TRUE(parsed.warnings.empty());
    ASSERT_EQ(parsed.page, page) << xml;
    EXPECT_EQ(emit_page_xml(parsed.page), xml);
    EXPECT_EQ(emit_page_xml(page), xml);
  }
}

TEST(PageXml, CoordsParsing) {
  const std::string xml = R"(<?xml version="1.0" encoding="UTF-8"?>
<PcGts xmlns="http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15">
  <Metadata><Creator>someone</Creator></Metadata>
  <Page imageFilename="a.png" imageWidth="100" imageHeight="100">
    <TextRegion id="r1">
      <Coords points="10,20 30,40 50,60"/>
      <TextLine id="r1_l1">
        <Coords points="0,80 40,80 40,100 0,100"/>
        <Baseline points="0,95 40,95"/>
      </TextLine>
      <TextLine id="r1_l2">
        <Coords points="0,0 1,1 2,0"/>
      </TextLine>
    </TextRegion>
  </Page>
</PcGts>)";
  const auto res = parse_page_xml(xml);
  const auto& r = res.page.layout.regions.at(0);
  EXPECT_EQ(r.polygon, (Polygon{{10, 20}, {30, 40}, {50, 60}}));
  ASSERT_EQ(r.lines.size(), 1u);
  EXPECT_EQ(r.lines[0].ascender_height, 15.0);
  EXPECT_EQ(r.lines[0].descender_height, 5.0);
  // Metadata is skipped with one warning; the line without a baseline with another.
  EXPECT_EQ(res.warnings.size(), 2u);
}

TEST(PageXml, RejectsMalformed) {
  EXPECT_THROW(parse_page_xml("<PcGts"), Error);
  EXPECT_THROW(parse_page_xml("<Other/>"), Error);
}

TEST(Markdown, Golden) {
  const auto md = emit_markdown(two_by_two_page());
  expect_golden("two_regions.md", md);
}

TEST(Markdown, EmptyPage) {
  TranscribedPage p;
  p.layout.page_id = "empty";
  EXPECT_EQ(emit_markdown(p), "# empty\n");
}

TEST(Markdown, EscapingRoundTrips) {
  Rng rng(8);
  const std::string pieces[] = {"#", "*", "_", "`", "[", "]", "<", ">", "|", "~", "\\", "-", "+", "=", "1.", "12)",
                                " ", "a", "ñ", "ẽ", "."};
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    const auto n = rng.uniform_int(0, 8);
    for (std::int64_t k = 0; k < n; ++k) s += pieces[rng.uniform_int(0, 20)];
    const auto e = escape_markdown(s);
    EXPECT_EQ(unescape_markdown(e), s) << s;
    EXPECT_FALSE(has_live_markup(e)) << s << " -> " << e;
  }
}

TEST(Txt, Fixtures) {
  TranscribedPage p;
  EXPECT_EQ(emit_txt(p), "");
  Region r;
  r.lines = {make_line("a", {{0, 10}, {5, 10}}, 2, 1), make_line("b", {{0, 20}, {5, 20}}, 2, 1)};
  p.layout.regions = {r};
  p.texts = {{"a", "abc"}, {"b", "def"}};
  EXPECT_EQ(emit_txt(p), "abc\ndef");
  expect_golden("two_regions.txt", emit_txt(two_by_two_page()));
}

TEST(LineNames, RoundTrip) {
  const auto ref = make_line_ref("folio-2", 3, 12);
  EXPECT_EQ(ref.file_name, "folio-2-r003-l012.png");
  EXPECT_EQ(parse_line_image_name(ref.file_name), ref);
  EXPECT_EQ(make_line_ref("p", 1234, 1).file_name, "p-r1234-l001.png");
  EXPECT_EQ(parse_line_image_name("p-r1234-l001.png")->region_index, 1234);
  EXPECT_FALSE(parse_line_image_name("p-r01-l001.png"));
  EXPECT_FALSE(parse_line_image_name("p.png"));
}

TEST(LineNames, PageIds) {
  EXPECT_EQ(sanitize_page_id("folio 12"), "folio_12");
  EXPECT_EQ(sanitize_page_id("12a"), "p_12a");
  EXPECT_EQ(sanitize_page_id("dñi"), "d_i");
  EXPECT_TRUE(is_xml_name(sanitize_page_id("-x")));
  EXPECT_TRUE(is_xml_name("abc.d-1"));
  EXPECT_FALSE(is_xml_name("1abc"));
}

TEST(Config, PipelineDefaultsVerbatim) {
  const auto res = load_config(kData / "pipeline_defaults.ini");
  EXPECT_TRUE(res.warnings.empty());
  EXPECT_EQ(res.config, PipelineConfig{});
  EXPECT_EQ(res.config.decoder.detection_threshold, 0.2);
  EXPECT_EQ(res.config.downsample, 5);
  EXPECT_EQ(res.config.cropper.line_height, 50);
  EXPECT_FALSE(res.config.decoder.merge_lines);
  EXPECT_FALSE(res.config.flags.run_decoder);
}

TEST(Config, TrainDefaultsVerbatim) {
  const auto res = load_config(kData / "train_defaults.ini");
  EXPECT_TRUE(res.warnings.empty());
  const auto& t = res.config.train;
  EXPECT_EQ(t, TrainConfig{});
  EXPECT_EQ(t.mask_ratio, 0.4);
  EXPECT_EQ(t.image_width, 512);
  EXPECT_EQ(t.image_height, 64);
  EXPECT_EQ(t.max_span, 8);
  EXPECT_EQ(t.total_iterations, 100000);
  EXPECT_EQ(t.val_batch, 8);
}

TEST(Config, EmptyIsDefault) { EXPECT_EQ(parse_config("").config, PipelineConfig{}); }

TEST(Config, FormattingVariants) {
  for (const char* v : {"RUN_OCR = YES", "run_ocr=yes", "  Run-OCR :   Yes  ", "run ocr = true", "RUN_OCR=1"}) {
    const auto res = parse_config(std::string("[page_parser]\nRUN_OCR = no\n") + v + "\n");
    EXPECT_TRUE(res.config.flags.run_ocr) << v;
  }
  EXPECT_FALSE(parse_config("[PAGE_PARSER]\n# comment\n; other\nRUN_OCR = off\n").config.flags.run_ocr);
}

TEST(Config, Errors) {
  try {
    parse_config("[LAYOUT_PARSER_1]\nDOWNSAMPLE = five\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).find("[LAYOUT_PARSER_1] DOWNSAMPLE"), 0u) << e.what();
  }
  EXPECT_THROW(parse_config("[TRAIN]\nIMAGE_SIZE = 512\n"), Error);
  EXPECT_THROW(parse_config("[LAYOUT_PARSER_1]\nDETECTION_THRESHOLD = 2\n"), Error);
  EXPECT_EQ(parse_config("[LINE_CROPPER]\nFOO = 1\n").warnings.size(), 1u);
}

TEST(Config, EmitRoundTrip) {
  PipelineConfig c;
  c.decoder.detection_threshold = 0.35;
  c.cropper.line_height = 64;
  c.train.optimizer = BaseOptimizer::adamw;
  c.train.image_width = 256;
  c.flags.run_ocr = false;
  c.ocr_model_path = "models/ocr.ckpt";
  EXPECT_EQ(parse_config(emit_config(c)).config, c);
}
