#include "fpthd/metrics.hpp"

#include <cstdio>

#include "fpthd/common.hpp"
#include "fpthd/unicode.hpp"

namespace fpthd::metrics {

namespace {

std::u32string chars_of(std::string_view s) { return unicode::decode_utf8(unicode::nfc(s)); }

std::string format_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::int64_t edit_distance(std::string_view a, std::string_view b) { return levenshtein(chars_of(a), chars_of(b)); }

Counts char_counts(std::string_view ref, std::string_view hyp) {
  const auto r = chars_of(ref);
  return {levenshtein(r, chars_of(hyp)), static_cast<std::int64_t>(r.size())};
}

Counts word_counts(std::string_view ref, std::string_view hyp) {
  const auto r = unicode::split_words(chars_of(ref));
  return {levenshtein(r, unicode::split_words(chars_of(hyp))), static_cast<std::int64_t>(r.size())};
}

double cer(std::string_view ref, std::string_view hyp) { return char_counts(ref, hyp).rate(); }
double wer(std::string_view ref, std::string_view hyp) { return word_counts(ref, hyp).rate(); }

std::string normalize_page_text(std::string_view text) {
  const auto cps = unicode::decode_utf8(unicode::nfc(text));
  std::u32string out, line;
  auto flush = [&] {
    while (!line.empty() && unicode::is_whitespace(line.back())) line.pop_back();
    if (!line.empty()) {
      if (!out.empty()) out.push_back(U'\n');
      out += line;
    }
    line.clear();
  };
  for (char32_t c : cps) {
    if (c == U'\n') {
      flush();
    } else if (c != U'\r') {
      line.push_back(c);
    }
  }
  flush();
  return unicode::encode_utf8(out);
}

EvalReport evaluate_pages(std::span<const PagePair> pairs) {
  EvalReport rep;
  for (const auto& p : pairs) {
    const auto ref = normalize_page_text(p.reference);
    const auto hyp = normalize_page_text(p.hypothesis);
    PageScore s;
    s.id = p.id;
    s.chars = char_counts(ref, hyp);
    s.words = word_counts(ref, hyp);
    s.cer = s.chars.rate();
    s.wer = s.words.rate();
    s.empty_reference = s.chars.length == 0;
    rep.total_char_edits += s.chars.edits;
    rep.total_chars += s.chars.length;
    rep.total_word_edits += s.words.edits;
    rep.total_words += s.words.length;
    rep.per_line.push_back(std::move(s));
  }
  rep.cer = Counts{rep.total_char_edits, rep.total_chars}.rate();
  rep.wer = Counts{rep.total_word_edits, rep.total_words}.rate();
  return rep;
}

EvalReport evaluate_pages(std::span<const std::string> refs, std::span<const std::string> hyps) {
  if (refs.size() != hyps.size())
    throw Error("evaluate_pages: " + std::to_string(refs.size()) + " references but " + std::to_string(hyps.size()) +
                " hypotheses");
  std::vector<PagePair> pairs;
  for (std::size_t i = 0; i < refs.size(); ++i) pairs.push_back({std::to_string(i), refs[i], hyps[i]});
  return evaluate_pages(pairs);
}

std::string report_csv(const EvalReport& r) {
  std::string out = "id,cer,wer,char_edits,chars,word_edits,words\n";
  auto row = [&](const std::string& id, double c, double w, std::int64_t ce, std::int64_t cn, std::int64_t we,
                 std::int64_t wn) {
    std::string quoted = id;
    if (id.find_first_of(",\"\n") != std::string::npos) {
      quoted = "\"";
      for (char ch : id) {
        if (ch == '"') quoted += '"';
        quoted += ch;
      }
      quoted += '"';
    }
    out += quoted + ',' + format_rate(c) + ',' + format_rate(w) + ',' + std::to_string(ce) + ',' + std::to_string(cn) +
           ',' + std::to_string(we) + ',' + std::to_string(wn) + '\n';
  };
  for (const auto& s : r.per_line)
    row(s.id, s.cer, s.wer, s.chars.edits, s.chars.length, s.words.edits, s.words.length);
  row("TOTAL", r.cer, r.wer, r.total_char_edits, r.total_chars, r.total_word_edits, r.total_words);
  return out;
}

std::string report_summary(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "pages: %zu\nCER: %.2f%% (%lld / %lld)\nWER: %.2f%% (%lld / %lld)\n", r.per_line.size(),
                100.0 * r.cer, static_cast<long long>(r.total_char_edits), static_cast<long long>(r.total_chars),
                100.0 * r.wer, static_cast<long long>(r.total_word_edits), static_cast<long long>(r.total_words));
  std::string out = buf;
  for (const auto& s : r.per_line)
    if (s.empty_reference) out += "warning: empty reference for '" + s.id + "'\n";
  return out;
}

}  // namespace fpthd::metrics
