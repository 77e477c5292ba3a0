#pragma once

#include "selfcons/datagen.hpp"
#include "selfcons/diagnostics.hpp"
#include "selfcons/langevin.hpp"
#include "selfcons/saddle.hpp"
#include "selfcons/spectral.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace selfcons {

std::string code_version();

/// 16 hex digits of FNV-1a over the compact dump of `config`.
std::string config_hash(const nlohmann::json& config);

/// Shortest round-trip decimal form; identical doubles give identical text.
std::string format_double(double x);

using CsvCell = std::variant<double, long long, std::string>;

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<CsvCell>> rows;

  void add(std::vector<CsvCell> row);
};

/// First line: "# config_hash=<hash> version=<version>".
void write_csv(const std::filesystem::path& path, const CsvTable& table,
               const std::string& config_hash);

struct CsvContent {
  std::vector<std::string> comments;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

CsvContent read_csv(const std::filesystem::path& path);

/// Flat binary container: "SCBIN001", uint64 count, then per matrix uint64 rows,
/// uint64 cols and rows*cols little-endian doubles in row-major order.
void write_matrices(const std::filesystem::path& path, const std::vector<Mat>& matrices);
std::vector<Mat> read_matrices(const std::filesystem::path& path);

/// <base>.bin holds {X, g as a column}; <base>.json records n, d, measure, seed, teacher.
void save_dataset(const std::filesystem::path& base, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& base);

/// Columns index, target, prediction, discrepancy.
CsvTable gp_table(const Vec& targets, const Vec& predictions);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

nlohmann::json to_json(const SaddleSolution& s);
nlohmann::json to_json(const SpValidityReport& r);
nlohmann::json to_json(const SpectralReport& r, bool with_eigenvalues = false);
nlohmann::json to_json(const EnsembleStats& s);
nlohmann::json to_json(const EkSolution& e);

}  // namespace selfcons
