#include "hygen/numcore/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hygen/numcore/format.hpp"

namespace hygen {

void ParamBundle::add(const std::string& name, Matrix value) {
  if (contains(name)) throw ContractError("parameter already exists: " + name);
  index_.emplace(name, names_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
}

void ParamBundle::set(const std::string& name, Matrix value) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    add(name, std::move(value));
    return;
  }
  values_[it->second] = std::move(value);
}

Matrix& ParamBundle::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return values_[it->second];
}

const Matrix& ParamBundle::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return values_[it->second];
}

std::size_t ParamBundle::element_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

ParamBundle ParamBundle::zeros_like() const {
  ParamBundle out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  }
  return out;
}

ParamBundle ParamBundle::with_prefix(std::string_view prefix) const {
  ParamBundle out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (std::string_view(names_[i]).substr(0, prefix.size()) == prefix) {
      out.add(names_[i], values_[i]);
    }
  }
  return out;
}

void ParamBundle::merge(const ParamBundle& other) {
  for (std::size_t i = 0; i < other.names_.size(); ++i) set(other.names_[i], other.values_[i]);
}

void ParamBundle::copy_prefix(const ParamBundle& src, std::string_view from, std::string_view to) {
  for (const auto& name : src.names()) {
    if (std::string_view(name).substr(0, from.size()) != from) continue;
    set(std::string(to) + name.substr(from.size()), src.at(name));
  }
}

bool ParamBundle::all_finite() const {
  for (const auto& v : values_) {
    if (!v.allFinite()) return false;
  }
  return true;
}

bool ParamBundle::operator==(const ParamBundle& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const auto& a = values_[i];
    const auto& b = other.values_[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (a.size() != 0 && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0) {
      return false;
    }
  }
  return true;
}

void init_uniform(ParamBundle& bundle, const std::string& name, Eigen::Index rows,
                  Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  bundle.add(name, std::move(m));
}

void init_linear(ParamBundle& bundle, const std::string& name, Eigen::Index in, Eigen::Index out,
                 Rng& rng) {
  init_uniform(bundle, name + ".w", in, out, in, rng);
  init_uniform(bundle, name + ".b", 1, out, in, rng);
}

std::uint64_t fingerprint(const ParamBundle& bundle, std::string_view prefix) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& name : bundle.names()) {
    if (std::string_view(name).substr(0, prefix.size()) != prefix) continue;
    const Matrix& m = bundle.at(name);
    mix(name.data(), name.size());
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    mix(shape, sizeof(shape));
    mix(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  return h;
}

void write_params(const ParamBundle& bundle, std::ostream& out) {
  for (const auto& name : bundle.names()) {
    const Matrix& m = bundle.at(name);
    out << "{\"name\":" << nlohmann::json(name).dump() << ",\"shape\":[" << m.rows() << ','
        << m.cols() << "],\"data\":[";
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (i) out << ',';
      out << format_double(m.data()[i]);
    }
    out << "]}\n";
  }
}

ParamBundle read_params(std::istream& in) {
  ParamBundle bundle;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(lineno, e.what());
    }
    try {
      const auto name = j.at("name").get<std::string>();
      const auto shape = j.at("shape").get<std::vector<Eigen::Index>>();
      const auto data = j.at("data").get<std::vector<double>>();
      if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(data.size())) {
        throw ParseError(lineno, "shape does not match data length for " + name);
      }
      Matrix m(shape[0], shape[1]);
      std::copy(data.begin(), data.end(), m.data());
      bundle.add(name, std::move(m));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return bundle;
}

void save_params(const ParamBundle& bundle, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path);
  write_params(bundle, out);
  if (!out) throw DataError("write failed: " + path);
}

ParamBundle load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open params file: " + path);
  return read_params(in);
}

}  // namespace hygen
