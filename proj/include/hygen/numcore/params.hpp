#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hygen/numcore/functional.hpp"

namespace hygen {

using Rng = std::mt19937_64;

/// Named parameter matrices for one or more networks. Iteration follows insertion order.
class ParamBundle {
 public:
  void add(const std::string& name, Matrix value);
  void set(const std::string& name, Matrix value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  bool empty() const { return names_.empty(); }
  std::size_t element_count() const;

  /// Same names and shapes, all zeros.
  ParamBundle zeros_like() const;
  /// Sub-bundle of entries whose name starts with `prefix`.
  ParamBundle with_prefix(std::string_view prefix) const;
  /// Copies every entry of `other` into this bundle, adding or overwriting.
  void merge(const ParamBundle& other);
  /// Copies values of entries whose name starts with `from` into entries renamed with `to`.
  void copy_prefix(const ParamBundle& src, std::string_view from, std::string_view to);

  bool all_finite() const;
  bool operator==(const ParamBundle& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Fills a fresh entry with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform(ParamBundle& bundle, const std::string& name, Eigen::Index rows,
                  Eigen::Index cols, Eigen::Index fan_in, Rng& rng);

/// Adds a dense layer `name.w` (in x out) and `name.b` (1 x out).
void init_linear(ParamBundle& bundle, const std::string& name, Eigen::Index in, Eigen::Index out,
                 Rng& rng);

/// 64-bit FNV-1a over names, shapes and raw bytes of entries matching `prefix`.
std::uint64_t fingerprint(const ParamBundle& bundle, std::string_view prefix = {});

/// NDJSON: one {"name","shape","data"} object per line, doubles printed with 17 digits.
void write_params(const ParamBundle& bundle, std::ostream& out);
ParamBundle read_params(std::istream& in);
void save_params(const ParamBundle& bundle, const std::string& path);
ParamBundle load_params(const std::string& path);

}  // namespace hygen
