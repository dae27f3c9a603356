#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include <Eigen/Core>

namespace hloba::json_io {

/// Serializes with every floating-point number printed to 17 significant digits, so that
/// parsing the output reproduces each double exactly.
std::string dump(const nlohmann::json& doc, int indent = 2);

void write_file(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_file(const std::filesystem::path& path);

nlohmann::json to_json(const Eigen::VectorXd& v);
Eigen::VectorXd vector_from_json(const nlohmann::json& array);

}  // namespace hloba::json_io
