#pragma once

#include <filesystem>
#include <mutex>
#include <string_view>

namespace preq {

/// Serialized appender for line-oriented files. Each line goes out in a single write to an
/// O_APPEND descriptor, so a crash leaves whole lines only (or a torn tail that
/// `repair_tail` removes on the next open).
class LineSink {
 public:
  enum class Mode { append, truncate };

  explicit LineSink(const std::filesystem::path& path, Mode mode = Mode::append);
  ~LineSink();
  LineSink(const LineSink&) = delete;
  LineSink& operator=(const LineSink&) = delete;

  /// Appends `line` plus '\n'. `line` must not contain a newline.
  void write_line(std::string_view line);
  void flush();

  /// Truncates a trailing partial line (no terminating newline). Returns bytes removed.
  static std::size_t repair_tail(const std::filesystem::path& path);

 private:
  std::mutex mu_;
  int fd_ = -1;
  std::filesystem::path path_;
};

}  // namespace preq
