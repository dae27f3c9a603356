#include "hloba/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hloba/error.hpp"

namespace hloba::json_io {

namespace {

void emit(const nlohmann::json& j, std::string& out, int indent, int depth) {
  const auto newline = [&](int d) {
    if (indent < 0) return;
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      for (const auto& [key, value] : j.items()) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        out += nlohmann::json(key).dump();
        out += indent < 0 ? ":" : ": ";
        emit(value, out, indent, depth + 1);
      }
      newline(depth);
      out += '}';
      return;
    }
    case nlohmann::json::value_t::array: {
      out += '[';
      // Numeric arrays stay on one line.
      const bool flat = std::all_of(j.begin(), j.end(), [](const auto& e) { return e.is_number(); });
      bool first = true;
      for (const auto& value : j) {
        if (!first) out += flat ? ", " : ",";
        first = false;
        if (!flat) newline(depth + 1);
        emit(value, out, indent, depth + 1);
      }
      if (!flat && !j.empty()) newline(depth);
      out += ']';
      return;
    }
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) {
        out += "null";
        return;
      }
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += buf;
      // Keep integral-valued doubles recognisably floating point.
      if (std::string_view(buf).find_first_of(".eEn") == std::string_view::npos) out += ".0";
      return;
    }
    default:
      out += j.dump();
  }
}

}  // namespace

std::string dump(const nlohmann::json& doc, int indent) {
  std::string out;
  emit(doc, out, indent, 0);
  return out;
}

void write_file(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigurationError("cannot open " + path.string() + " for writing");
  f << dump(doc) << '\n';
  if (!f) throw ConfigurationError("failed writing " + path.string());
}

nlohmann::json read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigurationError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigurationError(path.string() + ": " + e.what());
  }
}

nlohmann::json to_json(const Eigen::VectorXd& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& array) {
  if (!array.is_array()) throw ConfigurationError("expected a JSON array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(array.size()));
  for (std::size_t i = 0; i < array.size(); ++i) {
    if (!array[i].is_number()) throw ConfigurationError("expected a JSON array of numbers");
    v[static_cast<Eigen::Index>(i)] = array[i].get<double>();
  }
  return v;
}

}  // namespace hloba::json_io
