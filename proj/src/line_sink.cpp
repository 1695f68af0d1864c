#include "preq/line_sink.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <string>

#include "preq/error.hpp"

namespace preq {

LineSink::LineSink(const std::filesystem::path& path, Mode mode) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  int flags = O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC;
  if (mode == Mode::truncate) flags |= O_TRUNC;
  fd_ = ::open(path.c_str(), flags, 0644);
  if (fd_ < 0) {
    throw DataIntegrityError("cannot open " + path.string() + " for writing: " + std::strerror(errno));
  }
}

LineSink::~LineSink() {
  if (fd_ >= 0) ::close(fd_);
}

void LineSink::write_line(std::string_view line) {
  if (line.find('\n') != std::string_view::npos) {
    throw ContractViolation("line sink: record contains a newline");
  }
  std::string buf;
  buf.reserve(line.size() + 1);
  buf.append(line);
  buf.push_back('\n');
  std::lock_guard lock(mu_);
  const char* p = buf.data();
  std::size_t left = buf.size();
  while (left > 0) {
    const ssize_t n = ::write(fd_, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw DataIntegrityError("write to " + path_.string() + " failed: " + std::strerror(errno));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

void LineSink::flush() {
  std::lock_guard lock(mu_);
  ::fsync(fd_);
}

std::size_t LineSink::repair_tail(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec || size == 0) return 0;
  std::ifstream in(path, std::ios::binary);
  // Walk back to the last newline.
  std::uintmax_t keep = size;
  char c = 0;
  while (keep > 0) {
    in.seekg(static_cast<std::streamoff>(keep - 1));
    in.get(c);
    if (c == '\n') break;
    --keep;
  }
  in.close();
  if (keep == size) return 0;
  std::filesystem::resize_file(path, keep);
  return static_cast<std::size_t>(size - keep);
}

}  // namespace preq
