#pragma once

// Little-endian binary container helpers shared by the dataset and
// checkpoint formats.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "valerian/common.hpp"

namespace valerian::io {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot open '" + path.string() + "' for writing");
  }

  void magic(const char (&tag)[5]) { out_.write(tag, 4); }

  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }

  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  template <class T>
  void put_array(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(T)));
  }

  void finish() {
    out_.flush();
    if (!out_) throw Error("write failed for '" + path_.string() + "'");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open '" + path.string() + "'");
  }

  void expect_magic(const char (&tag)[5]) {
    char got[4] = {};
    in_.read(got, 4);
    if (!in_ || std::memcmp(got, tag, 4) != 0) {
      throw FormatError("'" + path_.string() + "': bad magic header, expected " +
                        std::string(tag));
    }
  }

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    T value{};
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in_) truncated();
    return value;
  }

  std::string get_string() {
    const auto n = checked_count(get<std::uint64_t>(), 1);
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) truncated();
    return s;
  }

  template <class T>
  std::vector<T> get_array() {
    const auto n = checked_count(get<std::uint64_t>(), sizeof(T));
    std::vector<T> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in_) truncated();
    return v;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::size_t checked_count(std::uint64_t n, std::size_t elem) {
    // Guards against garbage lengths in corrupt files before allocating.
    const auto pos = in_.tellg();
    in_.seekg(0, std::ios::end);
    const auto end = in_.tellg();
    in_.seekg(pos);
    if (n * elem > static_cast<std::uint64_t>(end - pos)) truncated();
    return static_cast<std::size_t>(n);
  }

  [[noreturn]] void truncated() {
    throw FormatError("'" + path_.string() + "': truncated or corrupt file");
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace valerian::io
