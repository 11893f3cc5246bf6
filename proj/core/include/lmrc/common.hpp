#pragma once

#include <atomic>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmrc {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape);

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Shape mismatches, invalid operands, misuse of the graph API.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration keys or values (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or inconsistent on-disk artifacts (CLI exit code 3).
class ArtifactError : public Error {
 public:
  enum class Kind { BadMagic, CrcMismatch, VersionMismatch, DescriptorMismatch, Io };
  ArtifactError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Malformed dataset files (CLI exit code 3).
class DataError : public Error {
 public:
  enum class Kind { BadMagic, Truncated, CountMismatch, BadRecordSize, Io };
  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

namespace warnings {

enum class Counter : int {
  LogClamp = 0,
  NonFiniteGradient,
  ZeroVectorCosine,
  EmptyDataset,
  NonFiniteLoss,
  kCount,
};

std::uint64_t count(Counter c);
void bump(Counter c, std::uint64_t by = 1);
void reset();

}  // namespace warnings

}  // namespace lmrc
