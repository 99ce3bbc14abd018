#include "fpthd/formats.hpp"

#include <expat.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <memory>
#include <regex>
#include <set>

#include "fpthd/common.hpp"
#include "fpthd/unicode.hpp"

namespace fpthd {

namespace {

constexpr std::string_view kPageNs = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15";

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string xml_escape(std::string_view s, bool attribute) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += attribute ? "&quot;" : "\""; break;
      case '\r': out += "&#13;"; break;
      case '\n': out += attribute ? "&#10;" : "\n"; break;
      case '\t': out += attribute ? "&#9;" : "\t"; break;
      default: out += c;
    }
  }
  return out;
}

std::string points_attr(const std::vector<Point>& pts) {
  std::string out;
  for (const auto& p : pts) {
    if (!out.empty()) out += ' ';
    out += std::to_string(std::lround(p.x)) + ',' + std::to_string(std::lround(p.y));
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

bool parse_number(std::string_view s, double& out) {
  const auto t = trim(s);
  if (t.empty()) return false;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  return res.ec == std::errc() && res.ptr == t.data() + t.size() && std::isfinite(out);
}

// ---- minimal DOM over expat

struct Node {
  std::string name;
  std::vector<std::pair<std::string, std::string>> attrs;
  std::vector<std::unique_ptr<Node>> children;
  std::string text;
  long line = 0;

  const std::string* attr(std::string_view key) const {
    for (const auto& [k, v] : attrs)
      if (k == key) return &v;
    return nullptr;
  }
};

struct DomBuilder {
  std::unique_ptr<Node> root;
  std::vector<Node*> stack;
  XML_Parser parser = nullptr;
};

std::string local_name(const char* qname) {
  std::string_view s(qname);
  const auto bar = s.rfind('|');
  return std::string(bar == std::string_view::npos ? s : s.substr(bar + 1));
}

void XMLCALL on_start(void* ud, const XML_Char* name, const XML_Char** atts) {
  auto* b = static_cast<DomBuilder*>(ud);
  auto node = std::make_unique<Node>();
  node->name = local_name(name);
  node->line = static_cast<long>(XML_GetCurrentLineNumber(b->parser));
  for (int i = 0; atts[i] != nullptr; i += 2) node->attrs.emplace_back(local_name(atts[i]), atts[i + 1]);
  Node* raw = node.get();
  if (b->stack.empty()) {
    b->root = std::move(node);
  } else {
    b->stack.back()->children.push_back(std::move(node));
  }
  b->stack.push_back(raw);
}

void XMLCALL on_end(void* ud, const XML_Char*) { static_cast<DomBuilder*>(ud)->stack.pop_back(); }

void XMLCALL on_text(void* ud, const XML_Char* s, int len) {
  auto* b = static_cast<DomBuilder*>(ud);
  if (!b->stack.empty()) b->stack.back()->text.append(s, static_cast<std::size_t>(len));
}

std::unique_ptr<Node> parse_dom(std::string_view xml) {
  DomBuilder b;
  std::unique_ptr<XML_ParserStruct, decltype(&XML_ParserFree)> parser(XML_ParserCreateNS("UTF-8", '|'),
                                                                      &XML_ParserFree);
  if (!parser) throw Error("cannot create XML parser");
  b.parser = parser.get();
  XML_SetUserData(parser.get(), &b);
  XML_SetElementHandler(parser.get(), on_start, on_end);
  XML_SetCharacterDataHandler(parser.get(), on_text);
  if (XML_Parse(parser.get(), xml.data(), static_cast<int>(xml.size()), XML_TRUE) == XML_STATUS_ERROR) {
    throw Error("malformed XML at line " + std::to_string(XML_GetCurrentLineNumber(parser.get())) + ", column " +
                std::to_string(XML_GetCurrentColumnNumber(parser.get())) + ": " +
                XML_ErrorString(XML_GetErrorCode(parser.get())));
  }
  if (!b.root) throw Error("empty XML document");
  return std::move(b.root);
}

std::vector<Point> parse_points(const Node& n, const std::string& value) {
  std::vector<Point> pts;
  std::size_t pos = 0;
  while (pos < value.size()) {
    const auto start = value.find_first_not_of(" \t\r\n", pos);
    if (start == std::string::npos) break;
    auto end = value.find_first_of(" \t\r\n", start);
    if (end == std::string::npos) end = value.size();
    const std::string_view tok(value.data() + start, end - start);
    const auto comma = tok.find(',');
    Point p;
    if (comma == std::string_view::npos || !parse_number(tok.substr(0, comma), p.x) ||
        !parse_number(tok.substr(comma + 1), p.y))
      throw Error("unparsable point '" + std::string(tok) + "' in <" + n.name + "> at line " + std::to_string(n.line));
    pts.push_back(p);
    pos = end;
  }
  return pts;
}

class Walker {
 public:
  std::vector<std::string> warnings;

  void unknown_element(const Node& n, const std::string& parent) {
    warnings.push_back("line " + std::to_string(n.line) + ": ignoring unknown element <" + n.name + "> in <" + parent +
                       ">");
  }
  void check_attrs(const Node& n, std::initializer_list<std::string_view> known) {
    for (const auto& [k, v] : n.attrs)
      if (std::find(known.begin(), known.end(), k) == known.end())
        warnings.push_back("line " + std::to_string(n.line) + ": ignoring attribute '" + k + "' on <" + n.name + ">");
  }
};

const Node* find_page(const Node& root, Walker& w) {
  if (root.name == "Page") return &root;
  if (root.name != "PcGts") throw Error("root element <" + root.name + "> is not PcGts");
  w.check_attrs(root, {"pcGtsId", "schemaLocation"});
  const Node* page = nullptr;
  for (const auto& c : root.children) {
    if (c->name == "Page" && page == nullptr) {
      page = c.get();
    } else {
      w.unknown_element(*c, root.name);
    }
  }
  if (page == nullptr) throw Error("missing Page element");
  return page;
}

int parse_int_attr(const Node& n, std::string_view key) {
  const auto* v = n.attr(key);
  if (v == nullptr) return 0;
  double d = 0.0;
  if (!parse_number(*v, d) || d < 0 || d != std::floor(d))
    throw Error("attribute " + std::string(key) + "='" + *v + "' at line " + std::to_string(n.line) +
                " is not a non-negative integer");
  return static_cast<int>(d);
}

void parse_heights(const std::string& custom, TextLineGeom& line, bool& found) {
  static const std::regex re(R"(heights\s*\{\s*ascender\s*:\s*([^;\s]+)\s*;\s*descender\s*:\s*([^;\s]+)\s*;?\s*\})");
  std::smatch m;
  if (std::regex_search(custom, m, re)) {
    double a = 0, d = 0;
    if (parse_number(m[1].str(), a) && parse_number(m[2].str(), d)) {
      line.ascender_height = a;
      line.descender_height = d;
      found = true;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- naming

LineImageRef make_line_ref(std::string_view page_id, int region_index, int line_index) {
  if (region_index < 1 || line_index < 1) throw Error("line image indices are 1-based");
  char buf[48];
  std::snprintf(buf, sizeof buf, "-r%03d-l%03d.png", region_index, line_index);
  return {std::string(page_id), region_index, line_index, std::string(page_id) + buf};
}

std::optional<LineImageRef> parse_line_image_name(std::string_view file_name) {
  static const std::regex re(R"(^(.+)-r(\d{3,})-l(\d{3,})\.png$)");
  std::cmatch m;
  if (!std::regex_match(file_name.data(), file_name.data() + file_name.size(), m, re)) return std::nullopt;
  LineImageRef ref;
  ref.page_id = m[1].str();
  ref.region_index = std::stoi(m[2].str());
  ref.line_index = std::stoi(m[3].str());
  ref.file_name = std::string(file_name);
  if (ref.region_index < 1 || ref.line_index < 1) return std::nullopt;
  return ref;
}

std::string sanitize_page_id(std::string_view stem) {
  std::string out;
  // One '_' per code point; malformed bytes count one each.
  const std::u32string cps = unicode::is_valid_utf8(stem) ? unicode::decode_utf8(stem)
                                                          : std::u32string(stem.begin(), stem.end());
  for (char32_t c : cps) {
    const bool ok = c < 0x80 && (std::isalnum(static_cast<int>(c)) || c == '_' || c == '-' || c == '.');
    out += ok ? static_cast<char>(c) : '_';
  }
  if (out.empty() || !(std::isalpha(static_cast<unsigned char>(out[0])) || out[0] == '_')) out = "p_" + out;
  return out;
}

bool is_xml_name(std::string_view s) {
  if (s.empty()) return false;
  auto start_ok = [](unsigned char c) { return std::isalpha(c) || c == '_' || c >= 0x80; };
  auto rest_ok = [&](unsigned char c) { return start_ok(c) || std::isdigit(c) || c == '-' || c == '.'; };
  if (!start_ok(static_cast<unsigned char>(s[0]))) return false;
  return std::all_of(s.begin() + 1, s.end(), [&](char c) { return rest_ok(static_cast<unsigned char>(c)); });
}

// ---------------------------------------------------------------- PAGE XML

std::string emit_page_xml(const TranscribedPage& page) {
  const auto& L = page.layout;
  auto check_id = [](const std::string& id) {
    if (!is_xml_name(id)) throw Error("invalid XML id '" + id + "'");
  };
  check_id(L.page_id);
  std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<PcGts xmlns=\"" + std::string(kPageNs) + "\" pcGtsId=\"" + xml_escape(L.page_id, true) + "\">\n";
  out += "  <Page imageFilename=\"" + xml_escape(page.image_filename, true) + "\" imageWidth=\"" +
         std::to_string(L.width) + "\" imageHeight=\"" + std::to_string(L.height) + "\">\n";
  for (const auto& r : L.regions) {
    check_id(r.id);
    out += "    <TextRegion id=\"" + xml_escape(r.id, true) + "\">\n";
    out += "      <Coords points=\"" + points_attr(r.polygon) + "\"/>\n";
    for (const auto& l : r.lines) {
      check_id(l.id);
      out += "      <TextLine id=\"" + xml_escape(l.id, true) + "\" custom=\"heights {ascender:" +
             format_double(l.ascender_height) + "; descender:" + format_double(l.descender_height) + ";}\">\n";
      out += "        <Coords points=\"" + points_attr(l.polygon) + "\"/>\n";
      out += "        <Baseline points=\"" + points_attr(l.baseline.points) + "\"/>\n";
      if (const auto it = page.texts.find(l.id); it != page.texts.end()) {
        out += "        <TextEquiv";
        if (const auto c = page.confidences.find(l.id); c != page.confidences.end())
          out += " conf=\"" + format_double(c->second) + "\"";
        out += ">\n          <Unicode>" + xml_escape(it->second, false) + "</Unicode>\n        </TextEquiv>\n";
      }
      out += "      </TextLine>\n";
    }
    out += "    </TextRegion>\n";
  }
  out += "  </Page>\n</PcGts>\n";
  return out;
}

PageParseResult parse_page_xml(std::string_view xml) {
  const auto root = parse_dom(xml);
  Walker w;
  PageParseResult res;
  auto& page = res.page;
  const Node* pnode = find_page(*root, w);
  if (const auto* id = root->attr("pcGtsId")) page.layout.page_id = *id;
  w.check_attrs(*pnode, {"imageFilename", "imageWidth", "imageHeight"});
  if (const auto* f = pnode->attr("imageFilename")) page.image_filename = *f;
  page.layout.width = parse_int_attr(*pnode, "imageWidth");
  page.layout.height = parse_int_attr(*pnode, "imageHeight");
  if (page.layout.page_id.empty()) {
    page.layout.page_id = sanitize_page_id(std::filesystem::path(page.image_filename).stem().string());
  }
  std::set<std::string> ids;
  for (const auto& rn : pnode->children) {
    if (rn->name != "TextRegion") {
      w.unknown_element(*rn, "Page");
      continue;
    }
    w.check_attrs(*rn, {"id", "custom", "type"});
    Region region;
    if (const auto* id = rn->attr("id")) region.id = *id;
    if (region.id.empty()) throw Error("TextRegion without id at line " + std::to_string(rn->line));
    if (!ids.insert(region.id).second) throw Error("duplicate id '" + region.id + "' at line " + std::to_string(rn->line));
    for (const auto& c : rn->children) {
      if (c->name == "Coords") {
        if (const auto* p = c->attr("points")) region.polygon = parse_points(*c, *p);
        continue;
      }
      if (c->name != "TextLine") {
        w.unknown_element(*c, "TextRegion");
        continue;
      }
      w.check_attrs(*c, {"id", "custom"});
      TextLineGeom line;
      if (const auto* id = c->attr("id")) line.id = *id;
      if (line.id.empty()) throw Error("TextLine without id at line " + std::to_string(c->line));
      if (!ids.insert(line.id).second) throw Error("duplicate id '" + line.id + "' at line " + std::to_string(c->line));
      bool has_baseline = false, has_heights = false;
      std::optional<std::string> text;
      std::optional<double> conf;
      if (const auto* custom = c->attr("custom")) parse_heights(*custom, line, has_heights);
      for (const auto& e : c->children) {
        if (e->name == "Coords") {
          if (const auto* p = e->attr("points")) line.polygon = parse_points(*e, *p);
        } else if (e->name == "Baseline") {
          if (const auto* p = e->attr("points")) {
            line.baseline.points = parse_points(*e, *p);
            has_baseline = true;
          }
        } else if (e->name == "TextEquiv") {
          if (text) continue;
          for (const auto& u : e->children)
            if (u->name == "Unicode") text = u->text;
          if (const auto* cf = e->attr("conf")) {
            double v = 0.0;
            if (!parse_number(*cf, v)) throw Error("unparsable conf '" + *cf + "' at line " + std::to_string(e->line));
            conf = v;
          }
        } else {
          w.unknown_element(*e, "TextLine");
        }
      }
      if (!has_baseline || line.baseline.points.size() < 2) {
        w.warnings.push_back("line " + std::to_string(c->line) + ": TextLine '" + line.id +
                             "' has no usable Baseline; skipped");
        continue;
      }
      if (!has_heights) {
        double top = 1e300, bottom = -1e300, mean = 0.0;
        for (const auto& p : line.polygon) {
          top = std::min(top, p.y);
          bottom = std::max(bottom, p.y);
        }
        for (const auto& p : line.baseline.points) mean += p.y;
        mean /= static_cast<double>(line.baseline.points.size());
        line.ascender_height = line.polygon.empty() ? 1.0 : std::max(1.0, mean - top);
        line.descender_height = line.polygon.empty() ? 0.0 : std::max(0.0, bottom - mean);
      }
      if (text) page.texts[line.id] = *text;
      if (text && conf) page.confidences[line.id] = *conf;
      region.lines.push_back(std::move(line));
    }
    page.layout.regions.push_back(std::move(region));
  }
  res.warnings = std::move(w.warnings);
  return res;
}

// ---------------------------------------------------------------- Markdown / TXT

std::string escape_markdown(std::string_view text) {
  static const std::string_view special = "\\`*_[]<>#~|";
  std::string out;
  std::size_t i = 0;
  // Line-start markers: list bullets, setext underlines and ordered lists.
  if (!text.empty() && (text[0] == '-' || text[0] == '+' || text[0] == '=')) {
    out += '\\';
  } else {
    std::size_t d = 0;
    while (d < text.size() && std::isdigit(static_cast<unsigned char>(text[d]))) ++d;
    if (d > 0 && d < text.size() && (text[d] == '.' || text[d] == ')')) {
      out.append(text.substr(0, d));
      out += '\\';
      i = d;
    }
  }
  for (; i < text.size(); ++i) {
    if (special.find(text[i]) != std::string_view::npos) out += '\\';
    out += text[i];
  }
  return out;
}

std::string emit_markdown(const TranscribedPage& page) {
  std::string out = "# " + escape_markdown(page.layout.page_id) + "\n";
  for (const auto& r : page.layout.regions) {
    out += "\n<!-- region: " + r.id + " -->\n";
    for (std::size_t i = 0; i < r.lines.size(); ++i) {
      const auto& l = r.lines[i];
      const auto it = page.texts.find(l.id);
      out += it != page.texts.end() ? escape_markdown(it->second) : "<!-- line " + l.id + ": no text -->";
      out += i + 1 < r.lines.size() ? "  \n" : "\n";
    }
  }
  return out;
}

std::string emit_txt(const TranscribedPage& page) {
  std::string out;
  bool first = true;
  for (const auto& r : page.layout.regions)
    for (const auto& l : r.lines) {
      const auto it = page.texts.find(l.id);
      if (it == page.texts.end()) continue;
      if (!first) out += '\n';
      out += it->second;
      first = false;
    }
  return out;
}

// ---------------------------------------------------------------- config

namespace {

struct ConfigReader {
  std::vector<std::string> warnings;

  static bool to_bool(const std::string& v, bool& out) {
    const auto u = upper(v);
    if (u == "YES" || u == "TRUE" || u == "ON" || u == "1") {
      out = true;
      return true;
    }
    if (u == "NO" || u == "FALSE" || u == "OFF" || u == "0") {
      out = false;
      return true;
    }
    return false;
  }

  [[noreturn]] static void type_error(const std::string& section, const std::string& key, const std::string& value,
                                      const char* what) {
    throw Error("[" + section + "] " + key + ": expected " + what + ", got '" + value + "'");
  }

  static void set(bool& dst, const std::string& s, const std::string& k, const std::string& v) {
    if (!to_bool(v, dst)) type_error(s, k, v, "yes/no");
  }
  static void set(double& dst, const std::string& s, const std::string& k, const std::string& v) {
    if (!parse_number(v, dst)) type_error(s, k, v, "a number");
  }
  template <class Int>
    requires std::is_integral_v<Int>
  static void set(Int& dst, const std::string& s, const std::string& k, const std::string& v) {
    const auto t = trim(v);
    Int out{};
    const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
    if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) type_error(s, k, v, "an integer");
    dst = out;
  }
  static void set(std::string& dst, const std::string&, const std::string&, const std::string& v) { dst = v; }
};

std::string normalize_key(std::string_view key) {
  std::string out;
  for (char c : trim(key)) {
    const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (u == ' ' || u == '-' || u == '\t') {
      if (!out.empty() && out.back() != '_') out += '_';
    } else {
      out += u;
    }
  }
  return out;
}

}  // namespace

void PipelineConfig::validate() const {
  decoder.validate();
  if (downsample < 1) throw Error("[LAYOUT_PARSER_1] DOWNSAMPLE must be >= 1");
  if (cropper.line_height < 8) throw Error("[LINE_CROPPER] LINE_HEIGHT must be >= 8");
  if (cropper.interp < 0 || cropper.interp > 2) throw Error("[LINE_CROPPER] INTERP must be 0, 1 or 2");
  if (!(cropper.line_scale > 0.0)) throw Error("[LINE_CROPPER] LINE_SCALE must be positive");
  train.validate();
}

ConfigParseResult parse_config(std::string_view text) {
  ConfigParseResult res;
  auto& c = res.config;
  ConfigReader rd;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line = trim(line.substr(3));
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error("config line " + std::to_string(line_no) + ": unterminated section header");
      section = normalize_key(line.substr(1, line.size() - 2));
      static const std::set<std::string> known = {"PAGE_PARSER", "LAYOUT_PARSER_1", "LAYOUT_PARSER_2",
                                                  "LINE_CROPPER", "OCR", "TRAIN"};
      if (!known.contains(section)) res.warnings.push_back("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find_first_of("=:");
    if (eq == std::string::npos) throw Error("config line " + std::to_string(line_no) + ": expected KEY = VALUE");
    const std::string key = normalize_key(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string& s = section;
    auto unknown = [&] { res.warnings.push_back("unknown key [" + s + "] " + key); };
    if (s == "PAGE_PARSER") {
      if (key == "RUN_LAYOUT_PARSER") rd.set(c.flags.run_layout, s, key, value);
      else if (key == "RUN_LINE_CROPPER") rd.set(c.flags.run_cropper, s, key, value);
      else if (key == "RUN_OCR") rd.set(c.flags.run_ocr, s, key, value);
      else if (key == "RUN_DECODER") rd.set(c.flags.run_decoder, s, key, value);
      else unknown();
    } else if (s == "LAYOUT_PARSER_1") {
      auto& d = c.decoder;
      if (key == "METHOD") rd.set(c.layout_method, s, key, value);
      else if (key == "DETECT_LINES") rd.set(d.detect_lines, s, key, value);
      else if (key == "DETECT_REGIONS") rd.set(d.detect_regions, s, key, value);
      else if (key == "MERGE_LINES") rd.set(d.merge_lines, s, key, value);
      else if (key == "ADJUST_HEIGHTS") rd.set(d.adjust_heights, s, key, value);
      else if (key == "MODEL_PATH") rd.set(c.layout_model_path, s, key, value);
      else if (key == "MAX_MEGAPIXELS") rd.set(d.max_megapixels, s, key, value);
      else if (key == "USE_CPU") rd.set(c.layout_use_cpu, s, key, value);
      else if (key == "DOWNSAMPLE") rd.set(c.downsample, s, key, value);
      else if (key == "DETECTION_THRESHOLD") rd.set(d.detection_threshold, s, key, value);
      else if (key == "LINE_END_WEIGHT") rd.set(d.line_end_weight, s, key, value);
      else if (key == "VERTICAL_LINE_CONNECTION_RANGE") rd.set(d.vertical_connection_range, s, key, value);
      else if (key == "SMOOTH_LINE_PREDICTIONS") rd.set(d.smooth_predictions, s, key, value);
      else unknown();
    } else if (s == "LAYOUT_PARSER_2") {
      if (key == "METHOD") rd.set(c.sorter_method, s, key, value);
      else unknown();
    } else if (s == "LINE_CROPPER") {
      if (key == "INTERP") rd.set(c.cropper.interp, s, key, value);
      else if (key == "LINE_SCALE") rd.set(c.cropper.line_scale, s, key, value);
      else if (key == "LINE_HEIGHT") rd.set(c.cropper.line_height, s, key, value);
      else unknown();
    } else if (s == "OCR") {
      if (key == "OCR_JSON") rd.set(c.ocr_json, s, key, value);
      else if (key == "USE_CPU") rd.set(c.ocr_use_cpu, s, key, value);
      else if (key == "MODEL_PATH") rd.set(c.ocr_model_path, s, key, value);
      else unknown();
    } else if (s == "TRAIN") {
      auto& t = c.train;
      // Short keys, plus the long descriptive names of the training table.
      if (key == "MAX_LR" || key == "MAXIMUM_LEARNING_RATE") rd.set(t.max_lr, s, key, value);
      else if (key == "TRAIN_BATCH" || key == "TRAINING_BATCH_SIZE") rd.set(t.train_batch, s, key, value);
      else if (key == "VAL_BATCH" || key == "VALIDATION_BATCH_SIZE") rd.set(t.val_batch, s, key, value);
      else if (key == "WEIGHT_DECAY" || key == "WEIGHT_DECAY_FACTOR") rd.set(t.weight_decay, s, key, value);
      else if (key == "MASK_RATIO" || key == "MASK_RATIO_FOR_THE_INPUT") rd.set(t.mask_ratio, s, key, value);
      else if (key == "ATTN_MASK_RATIO" || key == "ATTENTION_MASK_RATIO") rd.set(t.attn_mask_ratio, s, key, value);
      else if (key == "MAX_SPAN" || key == "MAXIMUM_SPAN_LENGTH_FOR_ATTENTION") rd.set(t.max_span, s, key, value);
      else if (key == "IMAGE_SIZE" || key == "IMAGE_SIZE_FOR_INPUT") {
        static const std::regex re(R"(^\s*(\d+)\s*[xX*]\s*(\d+)\s*$)");
        std::smatch m;
        if (!std::regex_match(value, m, re)) rd.type_error(s, key, value, "WIDTH x HEIGHT");
        t.image_width = std::stoi(m[1].str());
        t.image_height = std::stoi(m[2].str());
      } else if (key == "PROJECTION" || key == "PROJECTION_SIZE") rd.set(t.projection, s, key, value);
      else if (key == "MORPH_MAX_KERNEL" || key == "MAXIMUM_KERNEL_SIZE_FOR_DILATION_EROSION")
        rd.set(t.morph_max_kernel, s, key, value);
      else if (key == "MORPH_ITERATIONS" || key == "NUMBER_OF_ITERATIONS_FOR_DILATION_EROSION")
        rd.set(t.morph_iterations, s, key, value);
      else if (key == "SAMPLE_PROB" || key == "PROBABILITY_FACTOR_FOR_RANDOM_SAMPLING")
        rd.set(t.sample_prob, s, key, value);
      else if (key == "ALPHA" || key == "ALPHA_PARAMETER") rd.set(t.alpha, s, key, value);
      else if (key == "TOTAL_ITERATIONS" || key == "TOTAL_NUMBER_OF_ITERATIONS") rd.set(t.total_iterations, s, key, value);
      else if (key == "SAM_RHO") rd.set(t.sam_rho, s, key, value);
      else if (key == "SEED") rd.set(t.seed, s, key, value);
      else if (key == "VALIDATION_INTERVAL") rd.set(t.validation_interval, s, key, value);
      else if (key == "ROTATION_DEGREES") rd.set(t.rotation_degrees, s, key, value);
      else if (key == "TOKEN_DIM") rd.set(t.token_dim, s, key, value);
      else if (key == "BLOCKS") rd.set(t.blocks, s, key, value);
      else if (key == "HEADS") rd.set(t.heads, s, key, value);
      else if (key == "OPTIMIZER") {
        const auto u = upper(value);
        if (u == "SGD") t.optimizer = BaseOptimizer::sgd;
        else if (u == "ADAMW") t.optimizer = BaseOptimizer::adamw;
        else rd.type_error(s, key, value, "sgd or adamw");
      } else unknown();
    } else if (s.empty()) {
      res.warnings.push_back("key " + key + " outside any section ignored");
    } else {
      unknown();
    }
  }
  if (c.layout_method != "LAYOUT_CNN") res.warnings.push_back("layout METHOD " + c.layout_method + " treated as LAYOUT_CNN");
  if (c.sorter_method != "REGION_SORTER_SMART")
    res.warnings.push_back("sorter METHOD " + c.sorter_method + " treated as REGION_SORTER_SMART");
  c.validate();
  return res;
}

ConfigParseResult load_config(const std::filesystem::path& path) {
  try {
    return parse_config(read_file(path));
  } catch (const Error& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
}

std::string emit_config(const PipelineConfig& c) {
  auto yn = [](bool b) { return std::string(b ? "yes" : "no"); };
  auto num = [](double v) { return format_double(v); };
  const auto& d = c.decoder;
  const auto& t = c.train;
  std::string o;
  o += "[PAGE_PARSER]\n";
  o += "RUN_LAYOUT_PARSER = " + yn(c.flags.run_layout) + "\n";
  o += "RUN_LINE_CROPPER = " + yn(c.flags.run_cropper) + "\n";
  o += "RUN_OCR = " + yn(c.flags.run_ocr) + "\n";
  o += "RUN_DECODER = " + yn(c.flags.run_decoder) + "\n\n";
  o += "[LAYOUT_PARSER_1]\n";
  o += "METHOD = " + c.layout_method + "\n";
  o += "DETECT_LINES = " + yn(d.detect_lines) + "\n";
  o += "DETECT_REGIONS = " + yn(d.detect_regions) + "\n";
  o += "MERGE_LINES = " + yn(d.merge_lines) + "\n";
  o += "ADJUST_HEIGHTS = " + yn(d.adjust_heights) + "\n";
  o += "MODEL_PATH = " + c.layout_model_path + "\n";
  o += "MAX_MEGAPIXELS = " + num(d.max_megapixels) + "\n";
  o += "USE_CPU = " + yn(c.layout_use_cpu) + "\n";
  o += "DOWNSAMPLE = " + std::to_string(c.downsample) + "\n";
  o += "DETECTION_THRESHOLD = " + num(d.detection_threshold) + "\n";
  o += "LINE_END_WEIGHT = " + num(d.line_end_weight) + "\n";
  o += "VERTICAL_LINE_CONNECTION_RANGE = " + std::to_string(d.vertical_connection_range) + "\n";
  o += "SMOOTH_LINE_PREDICTIONS = " + yn(d.smooth_predictions) + "\n\n";
  o += "[LAYOUT_PARSER_2]\nMETHOD = " + c.sorter_method + "\n\n";
  o += "[LINE_CROPPER]\n";
  o += "INTERP = " + std::to_string(c.cropper.interp) + "\n";
  o += "LINE_SCALE = " + num(c.cropper.line_scale) + "\n";
  o += "LINE_HEIGHT = " + std::to_string(c.cropper.line_height) + "\n\n";
  o += "[OCR]\n";
  o += "OCR_JSON = " + c.ocr_json + "\n";
  o += "USE_CPU = " + yn(c.ocr_use_cpu) + "\n";
  if (!c.ocr_model_path.empty()) o += "MODEL_PATH = " + c.ocr_model_path + "\n";
  o += "\n[TRAIN]\n";
  o += "MAX_LR = " + num(t.max_lr) + "\n";
  o += "TRAIN_BATCH = " + std::to_string(t.train_batch) + "\n";
  o += "VAL_BATCH = " + std::to_string(t.val_batch) + "\n";
  o += "WEIGHT_DECAY = " + num(t.weight_decay) + "\n";
  o += "MASK_RATIO = " + num(t.mask_ratio) + "\n";
  o += "ATTN_MASK_RATIO = " + num(t.attn_mask_ratio) + "\n";
  o += "MAX_SPAN = " + std::to_string(t.max_span) + "\n";
  o += "IMAGE_SIZE = " + std::to_string(t.image_width) + " x " + std::to_string(t.image_height) + "\n";
  o += "PROJECTION = " + std::to_string(t.projection) + "\n";
  o += "MORPH_MAX_KERNEL = " + std::to_string(t.morph_max_kernel) + "\n";
  o += "MORPH_ITERATIONS = " + std::to_string(t.morph_iterations) + "\n";
  o += "SAMPLE_PROB = " + num(t.sample_prob) + "\n";
  o += "ALPHA = " + num(t.alpha) + "\n";
  o += "TOTAL_ITERATIONS = " + std::to_string(t.total_iterations) + "\n";
  o += "SAM_RHO = " + num(t.sam_rho) + "\n";
  o += "SEED = " + std::to_string(t.seed) + "\n";
  o += "OPTIMIZER = " + std::string(t.optimizer == BaseOptimizer::sgd ? "sgd" : "adamw") + "\n";
  o += "VALIDATION_INTERVAL = " + std::to_string(t.validation_interval) + "\n";
  o += "ROTATION_DEGREES = " + num(t.rotation_degrees) + "\n";
  o += "TOKEN_DIM = " + std::to_string(t.token_dim) + "\n";
  o += "BLOCKS = " + std::to_string(t.blocks) + "\n";
  o += "HEADS = " + std::to_string(t.heads) + "\n";
  return o;
}

}  // namespace fpthd
