#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fpthd {

/// Base error for every failure the library reports.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, silent = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();
void log(LogLevel level, std::string_view message);

inline void log_info(std::string_view m) { log(LogLevel::info, m); }
inline void log_warn(std::string_view m) { log(LogLevel::warn, m); }

/// Writes `contents` to `path` through a sibling temp file and a rename, so
/// readers never observe a truncated file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace fpthd
