#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fpthd::unicode {

/// Decodes UTF-8; throws fpthd::Error on malformed input.
std::u32string decode_utf8(std::string_view text);
std::string encode_utf8(std::u32string_view text);
std::string encode_utf8(char32_t cp);
bool is_valid_utf8(std::string_view text);

/// Canonical composition (NFC).
std::string nfc(std::string_view text);

bool is_whitespace(char32_t cp);

/// Splits on runs of whitespace; no empty tokens.
std::vector<std::u32string> split_words(std::u32string_view text);

}  // namespace fpthd::unicode
