#include "selfcons/io.hpp"

#include "selfcons/rng.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#ifndef SELFCONS_VERSION
#define SELFCONS_VERSION "0.0.0"
#endif

namespace selfcons {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "binary container assumes a little-endian host");

std::string code_version() { return SELFCONS_VERSION; }

std::string config_hash(const json& config) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_tag(config.dump());
  return os.str();
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

void CsvTable::add(std::vector<CsvCell> row) {
  require_shape(row.size() == columns.size(), "CsvTable: row width != column count");
  rows.push_back(std::move(row));
}

namespace {

std::string cell_text(const CsvCell& c) {
  if (const auto* d = std::get_if<double>(&c)) return format_double(*d);
  if (const auto* i = std::get_if<long long>(&c)) return std::to_string(*i);
  const auto& s = std::get<std::string>(c);
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur += '"';
        ++k;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, mode);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  return f;
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw Error("binary container truncated");
  return v;
}

constexpr char kMagic[8] = {'S', 'C', 'B', 'I', 'N', '0', '0', '1'};

}  // namespace

void write_csv(const fs::path& path, const CsvTable& table, const std::string& hash) {
  auto f = open_out(path);
  f << "# config_hash=" << hash << " version=" << code_version() << "\n";
  for (std::size_t k = 0; k < table.columns.size(); ++k)
    f << (k ? "," : "") << table.columns[k];
  f << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t k = 0; k < row.size(); ++k) f << (k ? "," : "") << cell_text(row[k]);
    f << "\n";
  }
}

CsvContent read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  CsvContent out;
  std::string line;
  bool header = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      out.comments.push_back(line);
    } else if (!header) {
      out.columns = split_line(line);
      header = true;
    } else {
      out.rows.push_back(split_line(line));
    }
  }
  return out;
}

void write_matrices(const fs::path& path, const std::vector<Mat>& matrices) {
  auto f = open_out(path, std::ios::out | std::ios::binary);
  f.write(kMagic, sizeof kMagic);
  put<std::uint64_t>(f, matrices.size());
  for (const auto& m : matrices) {
    put<std::uint64_t>(f, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(f, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(f, m(i, j));
  }
}

std::vector<Mat> read_matrices(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw Error(path.string() + " is not a matrix container");
  const auto count = get<std::uint64_t>(f);
  std::vector<Mat> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto r = get<std::uint64_t>(f), c = get<std::uint64_t>(f);
    Mat m(r, c);
    for (std::uint64_t i = 0; i < r; ++i)
      for (std::uint64_t j = 0; j < c; ++j) m(i, j) = get<double>(f);
    out.push_back(std::move(m));
  }
  return out;
}

void save_dataset(const fs::path& base, const Dataset& data) {
  require_shape(data.X.rows() == data.g.size(), "save_dataset: targets length != n");
  fs::path bin = base, side = base;
  bin += ".bin";
  side += ".json";
  write_matrices(bin, {Mat(data.X), Mat(data.g)});
  write_json(side, {{"n", data.n()},
                    {"d", data.d()},
                    {"measure", data.measure.name()},
                    {"seed", data.seed},
                    {"teacher", data.teacher}});
}

Dataset load_dataset(const fs::path& base) {
  fs::path bin = base, side = base;
  bin += ".bin";
  side += ".json";
  const auto mats = read_matrices(bin);
  if (mats.size() != 2) throw Error("dataset container must hold X and g");
  const json meta = read_json(side);
  Dataset d;
  d.X = mats[0];
  d.g = mats[1].col(0);
  d.measure = Measure::parse(meta.at("measure").get<std::string>());
  d.seed = meta.at("seed").get<std::uint64_t>();
  d.teacher = meta.value("teacher", json::object());
  if (meta.at("n").get<Eigen::Index>() != d.n() || meta.at("d").get<Eigen::Index>() != d.d())
    throw Error("dataset sidecar does not match the container shape");
  return d;
}

CsvTable gp_table(const Vec& targets, const Vec& predictions) {
  require_shape(targets.size() == predictions.size(), "gp_table: length mismatch");
  CsvTable t{{"index", "target", "prediction", "discrepancy"}, {}};
  for (Eigen::Index k = 0; k < targets.size(); ++k)
    t.add({static_cast<long long>(k), targets(k), predictions(k), targets(k) - predictions(k)});
  return t;
}

void write_json(const fs::path& path, const json& j) {
  auto f = open_out(path);
  f << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  return json::parse(f);
}

json to_json(const SaddleSolution& s) {
  json stages = json::array();
  for (const auto& st : s.anneal_trace)
    stages.push_back({{"sigma2", st.sigma2},
                      {"iterations", st.iterations},
                      {"start_residual", st.start_residual},
                      {"final_residual", st.final_residual},
                      {"converged", st.converged},
                      {"method", st.method}});
  return {{"sigma2", s.sigma2},
          {"converged", s.converged},
          {"status", s.status},
          {"residual", s.residual},
          {"iterations", s.iterations},
          {"residual_trace", s.residual_trace},
          {"anneal_trace", stages},
          {"wall_seconds", s.wall_seconds},
          {"jitter", s.gram ? s.gram->jitter() : 0.0}};
}

json to_json(const SpValidityReport& r) {
  return {{"criterion_simple", r.criterion_simple},
          {"criterion_simple_min", r.criterion_simple_min},
          {"heuristic_error", r.heuristic_error},
          {"criterion_full", r.criterion_full},
          {"verdict", to_string(r.verdict)}};
}

json to_json(const SpectralReport& r, bool with_eigenvalues) {
  json j = {{"S", r.S},
            {"C", r.C},
            {"lambda_minus", r.mp.lower},
            {"lambda_plus", r.mp.upper},
            {"Q", r.Q},
            {"Q_stderr", r.Q_stderr},
            {"c_crit", r.c_crit},
            {"in_bulk", r.in_bulk},
            {"eigenvalue_count", r.eigenvalues.size()}};
  if (with_eigenvalues) j["eigenvalues"] = r.eigenvalues;
  return j;
}

json to_json(const EnsembleStats& s) {
  json moments = json::array();
  for (const auto& m : s.moments)
    moments.push_back({{"group", m.name},
                       {"gamma", m.gamma},
                       {"target_variance", m.target_variance},
                       {"mean", m.mean},
                       {"variance", m.variance},
                       {"excess_kurtosis", m.excess_kurtosis},
                       {"samples", m.samples}});
  return {{"model", s.model},
          {"n_seeds", s.n_seeds},
          {"samples_per_seed", s.samples_per_seed},
          {"alpha_train", s.alpha_train},
          {"alpha_train_stderr", s.alpha_train_stderr},
          {"alpha_test", s.alpha_test},
          {"alpha_test_stderr", s.alpha_test_stderr},
          {"snapshots", s.weight_snapshots.size()},
          {"moments", moments},
          {"wall_seconds", s.wall_seconds}};
}

json to_json(const EkSolution& e) {
  json br = json::array();
  for (const auto& [a, b] : e.brackets) br.push_back({a, b});
  return {{"alpha_train", e.alpha_train}, {"alpha_test", e.alpha_test},
          {"q_train", e.q_train},         {"q_test", e.q_test},
          {"alpha_pole", e.alpha_pole},   {"found", e.found},
          {"brackets", br},               {"branch_report", e.branch_report}};
}

}  // namespace selfcons
