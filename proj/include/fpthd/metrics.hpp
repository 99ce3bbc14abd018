#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fpthd::metrics {

/// Levenshtein distance with unit costs over any random-access sequences.
template <class Seq>
std::int64_t levenshtein(const Seq& a, const Seq& b) {
  const std::size_t n = b.size();
  std::vector<std::int64_t> row(n + 1);
  for (std::size_t j = 0; j <= n; ++j) row[j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::int64_t diag = row[0];
    row[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= n; ++j) {
      const std::int64_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[n];
}

/// Edit distance between the NFC forms of two UTF-8 strings, in code points.
std::int64_t edit_distance(std::string_view a, std::string_view b);

struct Counts {
  std::int64_t edits = 0;
  std::int64_t length = 0;  // reference length
  double rate() const { return static_cast<double>(edits) / static_cast<double>(std::max<std::int64_t>(length, 1)); }
};

Counts char_counts(std::string_view ref, std::string_view hyp);
Counts word_counts(std::string_view ref, std::string_view hyp);
double cer(std::string_view ref, std::string_view hyp);
double wer(std::string_view ref, std::string_view hyp);

/// Trims trailing whitespace on every line, drops empty lines and joins the
/// rest with '\n'.
std::string normalize_page_text(std::string_view text);

struct PageScore {
  std::string id;
  double cer = 0.0;
  double wer = 0.0;
  Counts chars;
  Counts words;
  bool empty_reference = false;
};

struct EvalReport {
  double cer = 0.0;
  double wer = 0.0;
  std::int64_t total_char_edits = 0;
  std::int64_t total_chars = 0;
  std::int64_t total_word_edits = 0;
  std::int64_t total_words = 0;
  std::vector<PageScore> per_line;  // one entry per evaluated page or line
};

struct PagePair {
  std::string id;
  std::string reference;
  std::string hypothesis;
};

/// Micro-averaged CER/WER over normalized page texts.
EvalReport evaluate_pages(std::span<const PagePair> pairs);
/// Pairs refs[i] with hyps[i]; throws fpthd::Error when the counts differ.
EvalReport evaluate_pages(std::span<const std::string> refs, std::span<const std::string> hyps);

/// `id,cer,wer,char_edits,chars,word_edits,words` rows plus a final `TOTAL` row.
std::string report_csv(const EvalReport& report);
std::string report_summary(const EvalReport& report);

}  // namespace fpthd::metrics
