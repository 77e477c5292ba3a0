#include "config.hpp"

#include "selfcons/datagen.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace selfcons::cli {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& p : v) s += (s.empty() ? "" : "\n") + p;
  return s;
}

}  // namespace

SchemaError::SchemaError(const std::vector<std::string>& problems)
    : std::runtime_error(join(problems)), problems_(problems) {}

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::gp_baseline: return "gp_baseline";
    case Experiment::saddle_solve: return "saddle_solve";
    case Experiment::ek_sweep: return "ek_sweep";
    case Experiment::langevin_sweep: return "langevin_sweep";
    case Experiment::spectrum_sweep: return "spectrum_sweep";
    case Experiment::phase_retrieval: return "phase_retrieval";
    case Experiment::diagnostics: return "diagnostics";
  }
  return "?";
}

namespace {

const std::map<std::string, Experiment> kExperiments = {
    {"gp_baseline", Experiment::gp_baseline},       {"saddle_solve", Experiment::saddle_solve},
    {"ek_sweep", Experiment::ek_sweep},             {"langevin_sweep", Experiment::langevin_sweep},
    {"spectrum_sweep", Experiment::spectrum_sweep}, {"phase_retrieval", Experiment::phase_retrieval},
    {"diagnostics", Experiment::diagnostics}};

json scalar_to_json(const YAML::Node& node) {
  const std::string s = node.Scalar();
  if (node.Tag() == "!") return s;  // quoted
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  if (s == "null" || s == "~" || s.empty()) return nullptr;
  long long i = 0;
  auto [pi, ei] = std::from_chars(s.data(), s.data() + s.size(), i);
  if (ei == std::errc() && pi == s.data() + s.size()) return i;
  double d = 0.0;
  auto [pd, ed] = std::from_chars(s.data(), s.data() + s.size(), d);
  if (ed == std::errc() && pd == s.data() + s.size()) return d;
  return s;
}

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Scalar: return scalar_to_json(node);
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& item : node) a.push_back(yaml_to_json(item));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : node) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
  }
  return nullptr;
}

enum class Kind { integer, number, boolean, string, int_list, number_list, opt_int, opt_number };

using Block = std::vector<std::pair<std::string, Kind>>;

const std::map<std::string, Block> kSchema = {
    {"model",
     {{"kind", Kind::string}, {"S", Kind::int_list}, {"N", Kind::opt_int}, {"C", Kind::int_list},
      {"sigma_a2", Kind::number}, {"sigma_w2", Kind::number}, {"d", Kind::integer},
      {"M", Kind::integer}}},
    {"data",
     {{"n", Kind::int_list}, {"n_over_d", Kind::number_list}, {"n_test", Kind::integer},
      {"measure", Kind::string}, {"teacher_normalize", Kind::boolean},
      {"target_scale", Kind::number}, {"seeds", Kind::integer}}},
    {"solver",
     {{"sigma2", Kind::number}, {"method", Kind::string}, {"damping", Kind::number},
      {"tol", Kind::number}, {"stage_tol", Kind::number}, {"max_iter", Kind::integer},
      {"anneal_start", Kind::number}, {"anneal_stages", Kind::integer},
      {"cnn_mode", Kind::string}, {"q", Kind::opt_number}}},
    {"langevin",
     {{"eta", Kind::opt_number}, {"eta_gamma", Kind::number}, {"steps", Kind::integer},
      {"burn_in", Kind::integer}, {"thin", Kind::integer}, {"seeds", Kind::integer},
      {"rao_blackwell", Kind::boolean}, {"blocks_per_seed", Kind::integer},
      {"preconditioned", Kind::boolean}, {"trajectory_stride", Kind::integer},
      {"scale_steps_with_C", Kind::boolean}, {"save_snapshots", Kind::boolean},
      {"cold_start", Kind::boolean}}},
    {"diagnostics", {{"min_simple", Kind::number}, {"max_correction", Kind::number}}},
};

json defaults() {
  const ModelBlock m;
  const DataBlock d;
  const SolverBlock s;
  const LangevinBlock l;
  const DiagnosticsBlock g;
  return {{"seed", 0},
          {"output", "results"},
          {"model",
           {{"kind", m.kind}, {"S", m.S}, {"N", nullptr}, {"C", m.C}, {"sigma_a2", m.sigma_a2},
            {"sigma_w2", m.sigma_w2}, {"d", m.d}, {"M", m.M}}},
          {"data",
           {{"n", d.n}, {"n_over_d", json::array()}, {"n_test", d.n_test}, {"measure", d.measure},
            {"teacher_normalize", d.teacher_normalize}, {"target_scale", d.target_scale},
            {"seeds", d.seeds}}},
          {"solver",
           {{"sigma2", s.sigma2}, {"method", s.method}, {"damping", s.damping}, {"tol", s.tol},
            {"stage_tol", s.stage_tol}, {"max_iter", s.max_iter},
            {"anneal_start", s.anneal_start}, {"anneal_stages", s.anneal_stages},
            {"cnn_mode", s.cnn_mode}, {"q", nullptr}}},
          {"langevin",
           {{"eta", nullptr}, {"eta_gamma", l.eta_gamma}, {"steps", l.steps},
            {"burn_in", l.burn_in}, {"thin", l.thin}, {"seeds", l.seeds},
            {"rao_blackwell", l.rao_blackwell}, {"blocks_per_seed", l.blocks_per_seed},
            {"preconditioned", l.preconditioned}, {"trajectory_stride", l.trajectory_stride},
            {"scale_steps_with_C", l.scale_steps_with_C}, {"save_snapshots", l.save_snapshots},
            {"cold_start", l.cold_start}}},
          {"diagnostics", {{"min_simple", g.min_simple}, {"max_correction", g.max_correction}}}};
}

/// Checks and normalizes one value; returns false with a message on mismatch.
bool coerce(json& v, Kind k, std::string& why) {
  const auto is_num = [](const json& x) { return x.is_number(); };
  switch (k) {
    case Kind::integer:
      if (v.is_number_integer()) return true;
      why = "expected an integer";
      return false;
    case Kind::number:
      if (is_num(v)) {
        v = v.get<double>();
        return true;
      }
      why = "expected a number";
      return false;
    case Kind::boolean:
      if (v.is_boolean()) return true;
      why = "expected true or false";
      return false;
    case Kind::string:
      if (v.is_string()) return true;
      why = "expected a string";
      return false;
    case Kind::opt_int:
      if (v.is_null() || v.is_number_integer()) return true;
      why = "expected an integer or null";
      return false;
    case Kind::opt_number:
      if (v.is_null()) return true;
      if (is_num(v)) {
        v = v.get<double>();
        return true;
      }
      why = "expected a number or null";
      return false;
    case Kind::int_list:
    case Kind::number_list: {
      if (!v.is_array()) v = json::array({v});
      for (auto& x : v) {
        if (k == Kind::int_list ? !x.is_number_integer() : !is_num(x)) {
          why = k == Kind::int_list ? "expected an integer or a list of integers"
                                    : "expected a number or a list of numbers";
          return false;
        }
        if (k == Kind::number_list) x = x.get<double>();
      }
      return true;
    }
  }
  return false;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  std::vector<std::string> problems;
  json user;
  try {
    user = yaml_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw SchemaError({std::string("yaml: ") + e.what()});
  }
  if (!user.is_object()) throw SchemaError({"config must be a mapping"});

  json merged = defaults();
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string& key = it.key();
    if (key == "experiment") {
      merged[key] = it.value();
    } else if (key == "seed") {
      if (!it.value().is_number_unsigned() && !(it.value().is_number_integer() && it.value() >= 0))
        problems.push_back("seed: expected a non-negative integer");
      else
        merged[key] = it.value();
    } else if (key == "output") {
      if (!it.value().is_string()) problems.push_back("output: expected a string");
      else merged[key] = it.value();
    } else if (auto sch = kSchema.find(key); sch != kSchema.end()) {
      if (it.value().is_null()) continue;
      if (!it.value().is_object()) {
        problems.push_back(key + ": expected a mapping");
        continue;
      }
      for (auto f = it.value().begin(); f != it.value().end(); ++f) {
        const auto& fields = sch->second;
        auto spec = std::find_if(fields.begin(), fields.end(),
                                 [&](const auto& p) { return p.first == f.key(); });
        if (spec == fields.end()) {
          problems.push_back(key + "." + f.key() + ": unknown key");
          continue;
        }
        json v = f.value();
        std::string why;
        if (!coerce(v, spec->second, why)) problems.push_back(key + "." + f.key() + ": " + why);
        else merged[key][f.key()] = v;
      }
    } else {
      problems.push_back(key + ": unknown key");
    }
  }

  ExperimentConfig c;
  if (!merged.contains("experiment") || !merged["experiment"].is_string()) {
    problems.push_back("experiment: required string");
  } else if (auto e = kExperiments.find(merged["experiment"].get<std::string>());
             e == kExperiments.end()) {
    problems.push_back("experiment: unknown experiment '" + merged["experiment"].get<std::string>() + "'");
  } else {
    c.experiment = e->second;
  }
  if (!problems.empty()) throw SchemaError(problems);

  c.seed = merged["seed"].get<std::uint64_t>();
  c.output = merged["output"].get<std::string>();
  const auto& m = merged["model"];
  c.model.kind = m["kind"];
  c.model.S = m["S"].get<std::vector<int>>();
  if (!m["N"].is_null()) c.model.N = m["N"].get<int>();
  c.model.C = m["C"].get<std::vector<int>>();
  c.model.sigma_a2 = m["sigma_a2"];
  c.model.sigma_w2 = m["sigma_w2"];
  c.model.d = m["d"];
  c.model.M = m["M"];
  const auto& d = merged["data"];
  c.data.n = d["n"].get<std::vector<long>>();
  c.data.n_over_d = d["n_over_d"].get<std::vector<double>>();
  c.data.n_test = d["n_test"];
  c.data.measure = d["measure"];
  c.data.teacher_normalize = d["teacher_normalize"];
  c.data.target_scale = d["target_scale"];
  c.data.seeds = d["seeds"];
  const auto& s = merged["solver"];
  c.solver.sigma2 = s["sigma2"];
  c.solver.method = s["method"];
  c.solver.damping = s["damping"];
  c.solver.tol = s["tol"];
  c.solver.stage_tol = s["stage_tol"];
  c.solver.max_iter = s["max_iter"];
  c.solver.anneal_start = s["anneal_start"];
  c.solver.anneal_stages = s["anneal_stages"];
  c.solver.cnn_mode = s["cnn_mode"];
  if (!s["q"].is_null()) c.solver.q = s["q"].get<double>();
  const auto& l = merged["langevin"];
  if (!l["eta"].is_null()) c.langevin.eta = l["eta"].get<double>();
  c.langevin.eta_gamma = l["eta_gamma"];
  c.langevin.steps = l["steps"];
  c.langevin.burn_in = l["burn_in"];
  c.langevin.thin = l["thin"];
  c.langevin.seeds = l["seeds"];
  c.langevin.rao_blackwell = l["rao_blackwell"];
  c.langevin.blocks_per_seed = l["blocks_per_seed"];
  c.langevin.preconditioned = l["preconditioned"];
  c.langevin.trajectory_stride = l["trajectory_stride"];
  c.langevin.scale_steps_with_C = l["scale_steps_with_C"];
  c.langevin.save_snapshots = l["save_snapshots"];
  c.langevin.cold_start = l["cold_start"];
  c.diagnostics.min_simple = merged["diagnostics"]["min_simple"];
  c.diagnostics.max_correction = merged["diagnostics"]["max_correction"];

  // value checks
  const auto need = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };
  need(c.model.kind == "cnn" || c.model.kind == "quad", "model.kind: must be cnn or quad");
  for (int v : c.model.S) need(v >= 1, "model.S: entries must be >= 1");
  for (int v : c.model.C) need(v >= 1, "model.C: entries must be >= 1");
  need(!c.model.C.empty(), "model.C: must not be empty");
  need(!c.model.N || *c.model.N >= 1, "model.N: must be >= 1");
  need(c.model.sigma_a2 > 0 && c.model.sigma_w2 > 0, "model: prior variances must be positive");
  need(c.model.d >= 1 && c.model.M >= 1, "model: d and M must be >= 1");
  for (long v : c.data.n) need(v >= 1, "data.n: entries must be >= 1");
  for (double v : c.data.n_over_d) need(v > 0, "data.n_over_d: entries must be positive");
  need(c.data.n_test >= 0, "data.n_test: must be >= 0");
  need(c.data.seeds >= 1, "data.seeds: must be >= 1");
  try {
    (void)Measure::parse(c.data.measure);
  } catch (const std::exception& e) {
    problems.push_back(std::string("data.measure: ") + e.what());
  }
  need(c.solver.sigma2 > 0, "solver.sigma2: must be positive");
  need(c.solver.method == "damped_fixed_point" || c.solver.method == "newton_krylov",
       "solver.method: must be damped_fixed_point or newton_krylov");
  need(c.solver.damping > 0 && c.solver.damping <= 1, "solver.damping: must lie in (0, 1]");
  need(c.solver.tol > 0 && c.solver.stage_tol > 0, "solver: tolerances must be positive");
  need(c.solver.max_iter >= 1 && c.solver.anneal_stages >= 1, "solver: iteration counts must be >= 1");
  need(c.solver.cnn_mode == "resummed" || c.solver.cnn_mode == "series",
       "solver.cnn_mode: must be resummed or series");
  need(!c.langevin.eta || *c.langevin.eta > 0, "langevin.eta: must be positive");
  need(c.langevin.eta_gamma > 0 && c.langevin.eta_gamma < 1, "langevin.eta_gamma: must lie in (0, 1)");
  need(c.langevin.steps >= 1 && c.langevin.thin >= 1 && c.langevin.seeds >= 1 &&
           c.langevin.blocks_per_seed >= 1,
       "langevin: steps, thin, seeds and blocks_per_seed must be >= 1");
  need(c.langevin.burn_in < c.langevin.steps, "langevin.burn_in: must be < steps");

  const bool S_pairs = c.model.S.size() > 1;
  if (S_pairs) need(c.model.S.size() == c.data.n.size(), "model.S: a list of S needs a matching list data.n (zipped pairs)");
  const bool cnn_only = c.experiment == Experiment::ek_sweep ||
                        c.experiment == Experiment::langevin_sweep ||
                        c.experiment == Experiment::spectrum_sweep;
  if (cnn_only) need(c.model.kind == "cnn", to_string(c.experiment) + ": needs model.kind cnn");
  if (c.experiment == Experiment::phase_retrieval) {
    need(c.model.kind == "quad", "phase_retrieval: needs model.kind quad");
    need(!c.data.n_over_d.empty(), "phase_retrieval: needs data.n_over_d");
  }
  if (!problems.empty()) throw SchemaError(problems);

  merged["experiment"] = to_string(c.experiment);
  c.canonical = merged;
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw SchemaError({"cannot read config " + path.string()});
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace selfcons::cli
