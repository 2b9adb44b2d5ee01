// Experiment CLI: builds estimator families, runs the verification harness or
// a one-shot estimate, and writes trials.csv + summary.json per run.
//
// Exit codes: 0 success, 1 input/configuration error, 2 contract violation
// (violation fraction above delta, excessive non-convergence, or a failed
// concentration check).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "affagg/affagg.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace affagg;

namespace {

struct OutputOptions {
  std::string out = "out";
  std::string tag;  // empty: timestamp
  int jobs = 1;
  std::string config;  // consumed before CLI11 parsing; listed for --help only
};

void add_output_options(CLI::App* cmd, OutputOptions& oo) {
  cmd->add_option("--out", oo.out, "output directory root")->capture_default_str();
  cmd->add_option("--tag", oo.tag, "run tag replacing the timestamp (reproducible paths)");
  cmd->add_option("--jobs", oo.jobs, "parallel trial workers")
      ->check(CLI::Range(1, 256))
      ->capture_default_str();
  cmd->add_option("--config", oo.config,
                  "flat key=value file applied as defaults (flags win)");
}

// Flat key=value configuration: lines become --key=value tokens injected where
// --config appeared; keys the command line already sets are dropped, so
// explicit flags override the file.
std::vector<std::string> load_config_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path);
  const auto trim = [](const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::vector<std::string> tokens;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw InputError("config " + path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    if (key.empty())
      throw InputError("config " + path + ":" + std::to_string(lineno) + ": empty key");
    tokens.push_back("--" + key + "=" + value);
  }
  return tokens;
}

std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    std::size_t span = 0;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw InputError("--config needs a file path");
      path = args[i + 1];
      span = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      span = 1;
    } else {
      continue;
    }
    std::vector<std::string> kept;
    for (const auto& tok : load_config_tokens(path)) {
      const std::string key = tok.substr(0, tok.find('='));
      bool overridden = false;
      for (std::size_t j = 0; j < args.size(); ++j) {
        if (j >= i && j < i + span) continue;
        if (args[j] == key || args[j].rfind(key + "=", 0) == 0) {
          overridden = true;
          break;
        }
      }
      if (!overridden) kept.push_back(tok);
    }
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
               args.begin() + static_cast<std::ptrdiff_t>(i + span));
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(i), kept.begin(), kept.end());
    break;  // one config file per invocation
  }
  // bare key=value tokens are overrides too, unless they sit where a flag
  // expects its value
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& tok = args[i];
    if (tok.empty() || tok[0] == '-') continue;
    const std::string& prev = args[i - 1];
    if (prev.rfind("--", 0) == 0 && prev.find('=') == std::string::npos) continue;
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) continue;
    bool key_like = std::isalpha(static_cast<unsigned char>(tok[0])) != 0;
    for (std::size_t c = 1; c < eq && key_like; ++c) {
      const char ch = tok[c];
      key_like = std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_';
    }
    if (key_like) args[i] = "--" + tok;
  }
  return args;
}

std::string default_tag() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::localtime(&now));
  return buf;
}

fs::path prepare_dir(const OutputOptions& oo, const std::string& subcommand, std::string* tag_out) {
  const std::string tag = oo.tag.empty() ? default_tag() : oo.tag;
  if (tag_out) *tag_out = tag;
  const fs::path dir = fs::path(oo.out) / (subcommand + "-" + tag);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir.string());
  return dir;
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << body;
}

struct SyntheticDesign {
  long long p = -1;
  long long n = -1;
  unsigned long long seed = 0;
};

bool parse_gaussian_spec(const std::string& spec, SyntheticDesign& out) {
  if (spec.rfind("gaussian:", 0) != 0) return false;
  std::stringstream ss(spec.substr(9));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw InputError("bad synthetic design token '" + item + "' in " + spec);
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    try {
      if (key == "p")
        out.p = std::stoll(val);
      else if (key == "n")
        out.n = std::stoll(val);
      else if (key == "seed")
        out.seed = std::stoull(val);
      else
        throw InputError("unknown synthetic design key '" + key + "' (valid: p, n, seed)");
    } catch (const std::invalid_argument&) {
      throw InputError("bad value '" + val + "' for design key '" + key + "'");
    }
  }
  if (out.p < 1 || out.n < 1)
    throw InputError("synthetic design needs p >= 1 and n >= 1: " + spec);
  return true;
}

// --design accepts a CSV path or "gaussian:p=8,n=50,seed=3".
Eigen::MatrixXd resolve_design(const std::string& spec) {
  SyntheticDesign sd;
  if (parse_gaussian_spec(spec, sd)) return gaussian_design(sd.n, sd.p, sd.seed);
  return load_design_csv(spec);
}

double parse_lambda(const std::string& s, double auto_value) {
  if (s == "auto") return auto_value;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("--lambda must be a number or 'auto', got '" + s + "'");
  }
}

json summary_of(const RunSummary& s) {
  return json{{"trials", s.trials},
              {"violations", s.violations},
              {"nonconverged", s.nonconverged},
              {"violation_fraction", s.violation_fraction},
              {"binom_upper_99", s.binom_upper_99},
              {"mean_lhs", s.mean_lhs},
              {"mean_rhs", s.mean_rhs},
              {"mean_slack", s.mean_slack}};
}

// ---- verify-t1 / verify-t2 / verify-sparsity --------------------------------

struct VerifyOptions {
  std::string design = "gaussian:p=8,n=50,seed=3";
  int p = -1;  // shorthand overrides for synthetic designs
  int n = -1;
  double sigma = 1.0;
  double delta = 0.1;
  double nu = 0.5;
  std::string lambda = "auto";
  int trials = 1000;
  std::uint64_t seed = 1;
  int beta_nonzeros = 2;
  double beta_scale = 3.0;
  int max_cardinality = -1;  // -1: p

  std::string resolved_design() const {
    if (p < 0 && n < 0) return design;
    SyntheticDesign sd;
    if (!parse_gaussian_spec(design, sd))
      throw InputError("--p/--n apply to synthetic designs only (use --design gaussian:...)");
    if (p > 0) sd.p = p;
    if (n > 0) sd.n = n;
    return "gaussian:p=" + std::to_string(sd.p) + ",n=" + std::to_string(sd.n) +
           ",seed=" + std::to_string(sd.seed);
  }
};

void add_verify_options(CLI::App* cmd, VerifyOptions& vo, bool with_nu) {
  cmd->add_option("--design", vo.design, "design CSV or gaussian:p=..,n=..,seed=..")
      ->capture_default_str();
  cmd->add_option("--p", vo.p, "synthetic design columns (overrides --design)");
  cmd->add_option("--n", vo.n, "synthetic design rows (overrides --design)");
  cmd->add_option("--sigma", vo.sigma, "noise standard deviation")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--delta", vo.delta, "confidence level of the bound")
      ->check(CLI::Range(1e-12, 0.999999))
      ->capture_default_str();
  if (with_nu)
    cmd->add_option("--nu", vo.nu, "Q-aggregation mixing parameter")
        ->check(CLI::Range(1e-9, 1.0 - 1e-9))
        ->capture_default_str();
  cmd->add_option("--lambda", vo.lambda, "temperature, or 'auto' for the standard value")
      ->capture_default_str();
  cmd->add_option("--trials", vo.trials, "Monte Carlo trials")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--seed", vo.seed, "master seed")->capture_default_str();
  cmd->add_option("--beta-nonzeros", vo.beta_nonzeros, "support size of the true beta")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--beta-scale", vo.beta_scale, "magnitude of the true coefficients")
      ->capture_default_str();
  cmd->add_option("--max-cardinality", vo.max_cardinality,
                  "pattern cardinality cap (-1: all subsets)")
      ->capture_default_str();
}

struct BuiltSparsity {
  Eigen::MatrixXd X;
  std::vector<SparsityPattern> patterns;
  ExperimentSetup ex;
  double lambda_resolved = 0.0;
  int p = 0;
  int max_cardinality = 0;
};

BuiltSparsity build_sparsity(const VerifyOptions& vo, bool ew) {
  Eigen::MatrixXd X = resolve_design(vo.resolved_design());
  const int p = static_cast<int>(X.cols());
  const int max_card = vo.max_cardinality < 0 ? p : vo.max_cardinality;
  if (vo.beta_nonzeros > p)
    throw InputError("--beta-nonzeros exceeds the number of design columns");
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int i = 0; i < vo.beta_nonzeros; ++i)
    beta(i) = (i % 2 == 0 ? 1.0 : -1.0) * vo.beta_scale;
  GaussianMeanModel model(X * beta, vo.sigma);
  SparsityFamily sf = sparsity_pattern_family(X, max_card, vo.sigma);
  const double auto_lambda = ew ? ew_bound_lambda_threshold(vo.sigma, sf.family.family_V())
                                : q_bound_lambda_threshold(vo.sigma, vo.nu, sf.family.family_V());
  const double lambda = parse_lambda(vo.lambda, auto_lambda);
  ExperimentSetup ex(std::move(sf.family), std::move(model), lambda, vo.nu, vo.delta);
  return BuiltSparsity{std::move(X), std::move(sf.patterns), std::move(ex),
                       lambda,       p,                      max_card};
}

json verify_config_json(const VerifyOptions& vo, const BuiltSparsity& b, const OutputOptions& oo,
                        const std::string& tag, bool with_nu) {
  json cfg{{"design", vo.resolved_design()},
           {"p", b.p},
           {"n", static_cast<int>(b.X.rows())},
           {"M", static_cast<int>(b.ex.family.M())},
           {"max_cardinality", b.max_cardinality},
           {"sigma", vo.sigma},
           {"delta", vo.delta},
           {"lambda", vo.lambda},
           {"lambda_resolved", b.lambda_resolved},
           {"family_V", b.ex.family.family_V()},
           {"trials", vo.trials},
           {"seed", vo.seed},
           {"beta_nonzeros", vo.beta_nonzeros},
           {"beta_scale", vo.beta_scale},
           {"jobs", oo.jobs},
           {"tag", tag}};
  if (with_nu) cfg["nu"] = vo.nu;
  return cfg;
}

int emit_run(const fs::path& dir, json doc, const RunResult& run, double delta) {
  const bool ok = run.summary.violation_fraction <= delta && run_converged_ok(run.summary);
  doc["summary"] = summary_of(run.summary);
  doc["ok"] = ok;
  write_text(dir / "trials.csv", trials_csv(run.records));
  write_text(dir / "summary.json", doc.dump(2) + "\n");
  std::cout << "wrote " << dir.string() << " violation_fraction="
            << run.summary.violation_fraction << (ok ? " (ok)" : " (CONTRACT VIOLATION)")
            << "\n";
  return ok ? 0 : 2;
}

int run_verify_t2(const VerifyOptions& vo, const OutputOptions& oo, int& exit_code) {
  BuiltSparsity b = build_sparsity(vo, false);
  std::string tag;
  const fs::path dir = prepare_dir(oo, "verify-t2", &tag);
  std::vector<double> per_j;
  RunResult run = verify_q_bound(b.ex, vo.trials, vo.seed, oo.jobs, &per_j);
  json doc{{"subcommand", "verify-t2"},
           {"config", verify_config_json(vo, b, oo, tag, true)},
           {"per_j_violation_fraction", per_j}};
  exit_code = emit_run(dir, std::move(doc), run, vo.delta);
  return exit_code;
}

int run_verify_t1(const VerifyOptions& vo, const OutputOptions& oo, int& exit_code) {
  BuiltSparsity b = build_sparsity(vo, true);
  std::string tag;
  const fs::path dir = prepare_dir(oo, "verify-t1", &tag);
  RunResult run = verify_ew_bound(b.ex, vo.trials, vo.seed, oo.jobs);
  json doc{{"subcommand", "verify-t1"}, {"config", verify_config_json(vo, b, oo, tag, false)}};
  exit_code = emit_run(dir, std::move(doc), run, vo.delta);
  return exit_code;
}

int run_verify_sparsity(const VerifyOptions& vo, const std::string& variant,
                        const OutputOptions& oo, int& exit_code) {
  const bool ew = variant == "ew";
  BuiltSparsity b = build_sparsity(vo, ew);
  std::string tag;
  const fs::path dir = prepare_dir(oo, "verify-sparsity", &tag);
  RunResult run = verify_sparsity(b.patterns, b.p, b.ex, ew ? AggVariant::EW : AggVariant::Q,
                                  vo.trials, vo.seed, oo.jobs);
  json cfg = verify_config_json(vo, b, oo, tag, !ew);
  cfg["variant"] = variant;
  json doc{{"subcommand", "verify-sparsity"}, {"config", std::move(cfg)}};
  exit_code = emit_run(dir, std::move(doc), run, vo.delta);
  return exit_code;
}

// ---- verify-univagg ----------------------------------------------------------

struct UnivaggOptions {
  int M = 6;
  int n = 30;
  double B = 1.0;
  int D = 2;
  double q = 0.5;
  double R = 1.0;
  std::string classes = "all";
  int trials = 500;
  double delta = 0.1;
  double sigma = 1.0;
  std::string lambda = "auto";
  double nu = 0.5;
  int truth_nonzeros = 2;
  double truth_scale = 0.6;
  std::uint64_t seed = 1;
  std::uint64_t dict_seed = 12345;
  std::string family = "fixed";
  UnivaggConstants consts;
};

int run_univagg(const UnivaggOptions& uo, const OutputOptions& oo, int& exit_code) {
  RandomStream dict_rng(uo.dict_seed);
  Eigen::MatrixXd dict(uo.n, uo.M);
  for (int j = 0; j < uo.M; ++j)
    dict.col(j) = uo.B * dict_rng.gaussian_vector(uo.n).normalized();
  if (uo.truth_nonzeros > uo.M) throw InputError("--truth-nonzeros exceeds M");
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(uo.n);
  for (int j = 0; j < uo.truth_nonzeros; ++j)
    mu += (j % 2 == 0 ? 1.0 : -1.0) * uo.truth_scale * dict.col(j);
  GaussianMeanModel model(mu, uo.sigma);

  std::vector<ThetaClass> classes;
  if (uo.classes == "all") {
    for (const auto& [name, cls] : theta_class_names()) classes.push_back(cls);
  } else {
    std::stringstream ss(uo.classes);
    std::string item;
    while (std::getline(ss, item, ',')) classes.push_back(parse_theta_class(item));
  }

  const double lambda = parse_lambda(uo.lambda, 20.0 * uo.sigma * uo.sigma);
  const UnivaggFamily kind = [&] {
    if (uo.family == "fixed") return UnivaggFamily::FixedVectors;
    if (uo.family == "pattern") return UnivaggFamily::PatternProjections;
    throw InputError("--family must be 'fixed' or 'pattern'");
  }();

  std::string tag;
  const fs::path dir = prepare_dir(oo, "verify-univagg", &tag);
  UnivaggResult res = check_univagg(dict, model, classes, uo.consts, uo.trials, uo.seed, lambda,
                                    uo.nu, uo.delta, uo.D, uo.q, uo.R, uo.B, kind, oo.jobs);

  bool all_ok = run_converged_ok(res.summary);
  json class_arr = json::array();
  for (const auto& v : res.classes) {
    all_ok = all_ok && v.ok;
    class_arr.push_back(json{{"class", theta_class_name(v.cls)},
                             {"oracle_term", v.oracle_term},
                             {"bound", v.bound},
                             {"rhs", v.rhs},
                             {"violations", v.violations},
                             {"fraction", v.fraction},
                             {"ok", v.ok}});
  }
  json doc{{"subcommand", "verify-univagg"},
           {"config",
            json{{"M", uo.M},
                 {"n", uo.n},
                 {"B", uo.B},
                 {"D", uo.D},
                 {"q", uo.q},
                 {"R", uo.R},
                 {"classes", uo.classes},
                 {"family", uo.family},
                 {"trials", uo.trials},
                 {"delta", uo.delta},
                 {"sigma", uo.sigma},
                 {"lambda", uo.lambda},
                 {"lambda_resolved", lambda},
                 {"nu", uo.nu},
                 {"truth_nonzeros", uo.truth_nonzeros},
                 {"truth_scale", uo.truth_scale},
                 {"seed", uo.seed},
                 {"dict_seed", uo.dict_seed},
                 {"constants",
                  json{{"pattern", uo.consts.pattern},
                       {"floor", uo.consts.floor_term},
                       {"lq_lead", uo.consts.lq_lead},
                       {"nu_scale", uo.consts.nu_scale}}},
                 {"jobs", oo.jobs},
                 {"tag", tag}}},
           {"classes", std::move(class_arr)},
           {"summary", summary_of(res.summary)},
           {"ok", all_ok}};
  write_text(dir / "trials.csv", trials_csv(res.records));
  write_text(dir / "summary.json", doc.dump(2) + "\n");
  std::cout << "wrote " << dir.string() << (all_ok ? " (ok)" : " (CONTRACT VIOLATION)") << "\n";
  exit_code = all_ok ? 0 : 2;
  return exit_code;
}

// ---- maurey-check --------------------------------------------------------------

struct MaureyOptions {
  int M = 50;
  int n = 30;
  int m = 5;
  double q = 1.0;
  int runs = 1000;
  int max_resamples = 10;
  int draws = 10000;
  double target_noise = 0.1;
  std::uint64_t seed = 1;
  std::uint64_t dict_seed = 777;
};

int run_maurey_check(const MaureyOptions& mo, const OutputOptions& oo, int& exit_code) {
  RandomStream setup_rng(mo.dict_seed);
  Eigen::MatrixXd dict(mo.n, mo.M);
  for (int j = 0; j < mo.M; ++j) dict.col(j) = setup_rng.gaussian_vector(mo.n).normalized();
  Eigen::VectorXd theta(mo.M);
  for (int j = 0; j < mo.M; ++j) theta(j) = setup_rng.uniform01() + 1e-3;
  theta /= theta.lpNorm<1>();  // dense point of B_1(1)
  const Eigen::VectorXd mu = dict * theta + mo.target_noise * setup_rng.gaussian_vector(mo.n);

  // success-rate pass: one sparsifier call per seeded run
  std::vector<TrialRecord> records(static_cast<std::size_t>(mo.runs));
  int successes = 0;
  for (int t = 0; t < mo.runs; ++t) {
    RandomStream rng(mo.seed, static_cast<std::uint64_t>(t));
    MaureyResult res = maurey_sparsify(theta, dict, mu, mo.q, mo.m, rng, mo.max_resamples);
    TrialRecord rec;
    rec.trial = t;
    rec.seed = rng.seed();
    rec.lhs = res.err;
    rec.rhs = res.base_err + res.allowance;
    rec.violated = !res.success;
    rec.converged = res.success;
    rec.iterations = res.resamples;
    if (res.success) ++successes;
    if (l0_norm(res.theta_m) > 2.0 * mo.m) throw std::logic_error("sparsity cap breached");
    records[static_cast<std::size_t>(t)] = rec;
  }
  const double success_rate = static_cast<double>(successes) / mo.runs;

  // expectation pass: single draws, no resampling
  std::vector<double> errs;
  errs.reserve(static_cast<std::size_t>(mo.draws));
  double base_err = 0.0, allowance = 0.0;
  for (int t = 0; t < mo.draws; ++t) {
    RandomStream rng(mo.seed ^ 0x9E3779B97F4A7C15ull, static_cast<std::uint64_t>(t));
    MaureyResult res = maurey_sparsify(theta, dict, mu, mo.q, mo.m, rng, 1);
    errs.push_back(res.err);
    base_err = res.base_err;
    allowance = res.allowance;
  }
  const double mean_err = mean(errs);
  const double se = standard_error(errs);
  const bool mean_ok = mean_err <= base_err + allowance + 3.0 * se;
  const bool rate_ok = success_rate >= 0.99;

  std::string tag;
  const fs::path dir = prepare_dir(oo, "maurey-check", &tag);
  json doc{{"subcommand", "maurey-check"},
           {"config",
            json{{"M", mo.M},
                 {"n", mo.n},
                 {"m", mo.m},
                 {"q", mo.q},
                 {"runs", mo.runs},
                 {"max_resamples", mo.max_resamples},
                 {"draws", mo.draws},
                 {"target_noise", mo.target_noise},
                 {"seed", mo.seed},
                 {"dict_seed", mo.dict_seed},
                 {"tag", tag}}},
           {"success_rate", success_rate},
           {"base_err", base_err},
           {"allowance", allowance},
           {"mean_single_draw_err", mean_err},
           {"mean_se", se},
           {"rate_ok", rate_ok},
           {"mean_ok", mean_ok},
           {"ok", rate_ok && mean_ok}};
  write_text(dir / "trials.csv", trials_csv(records));
  write_text(dir / "summary.json", doc.dump(2) + "\n");
  std::cout << "wrote " << dir.string() << " success_rate=" << success_rate
            << ((rate_ok && mean_ok) ? " (ok)" : " (CONTRACT VIOLATION)") << "\n";
  exit_code = (rate_ok && mean_ok) ? 0 : 2;
  return exit_code;
}

// ---- chi2-check ----------------------------------------------------------------

struct Chi2Options {
  int k = 10;
  std::vector<double> a;  // overrides --k when given
  double t = 2.0;
  int trials = 100000;
  double u = -1.0;
  std::uint64_t seed = 1;
};

int run_chi2_check(const Chi2Options& co, const OutputOptions& oo, int& exit_code) {
  Eigen::VectorXd a;
  if (!co.a.empty()) {
    a.resize(static_cast<Eigen::Index>(co.a.size()));
    for (std::size_t i = 0; i < co.a.size(); ++i) a(static_cast<Eigen::Index>(i)) = co.a[i];
  } else {
    if (co.k < 1) throw InputError("--k must be >= 1");
    a = Eigen::VectorXd::Ones(co.k);
  }
  Chi2Result res = check_chi2_tail(a, co.t, co.trials, co.seed, co.u, oo.jobs);
  const bool ok = res.tail_ok && (!res.mgf_checked || res.mgf_ok);

  std::string tag;
  const fs::path dir = prepare_dir(oo, "chi2-check", &tag);
  json doc{{"subcommand", "chi2-check"},
           {"config",
            json{{"a", co.a.empty() ? json("ones:" + std::to_string(co.k)) : json(co.a)},
                 {"t", co.t},
                 {"trials", co.trials},
                 {"u", res.u},
                 {"seed", co.seed},
                 {"jobs", oo.jobs},
                 {"tag", tag}}},
           {"threshold", res.threshold},
           {"tail_fraction", res.tail_fraction},
           {"e_minus_t", res.e_minus_t},
           {"tail_se_null", res.tail_se_null},
           {"tail_ok", res.tail_ok},
           {"mgf_checked", res.mgf_checked},
           {"mgf_empirical", res.mgf_empirical},
           {"mgf_bound", res.mgf_bound},
           {"mgf_rel_se", res.mgf_rel_se},
           {"mgf_ok", res.mgf_ok},
           {"summary", summary_of(res.summary)},
           {"ok", ok}};
  write_text(dir / "trials.csv", trials_csv(res.records));
  write_text(dir / "summary.json", doc.dump(2) + "\n");
  std::cout << "wrote " << dir.string() << " tail_fraction=" << res.tail_fraction
            << (ok ? " (ok)" : " (CONTRACT VIOLATION)") << "\n";
  exit_code = ok ? 0 : 2;
  return exit_code;
}

// ---- estimate ------------------------------------------------------------------

struct EstimateOptions {
  std::string design;
  std::string y_path;
  double sigma = 1.0;
  std::string method = "q";
  std::string lambda = "auto";
  double nu = 0.5;
  int max_cardinality = -1;
};

int run_estimate(const EstimateOptions& eo, const OutputOptions& oo, int& exit_code) {
  Eigen::MatrixXd X = resolve_design(eo.design);
  Eigen::VectorXd y = load_vector_csv(eo.y_path);
  if (y.size() != X.rows()) throw InputError("observation length does not match design rows");
  const int p = static_cast<int>(X.cols());
  const int max_card = eo.max_cardinality < 0 ? p : eo.max_cardinality;
  SparsityFamily sf = sparsity_pattern_family(X, max_card, eo.sigma);

  const bool ew = eo.method == "ew";
  if (!ew && eo.method != "q") throw InputError("--method must be 'q' or 'ew'");
  const double auto_lambda = ew
      ? ew_bound_lambda_threshold(eo.sigma, sf.family.family_V())
      : q_bound_lambda_threshold(eo.sigma, eo.nu, sf.family.family_V());
  const double lambda = parse_lambda(eo.lambda, auto_lambda);

  SimplexWeights weights = SimplexWeights(Eigen::VectorXd::Ones(1));
  Eigen::VectorXd aggregate;
  double objective = 0.0;
  bool converged = true;
  int iterations = 0;
  if (ew) {
    const Eigen::MatrixXd est = sf.family.apply_all(y);
    weights = exp_weights_from_losses(squared_losses(y, est), sf.family.penalties(),
                                      sf.family.prior(), lambda);
    aggregate = est * weights.vec();
    objective = ew_variational_objective(weights, squared_losses(y, est),
                                         sf.family.penalties(), sf.family.prior(), lambda);
  } else {
    QaggConfig cfg;
    cfg.lambda = lambda;
    cfg.nu = eo.nu;
    QaggSolution sol = solve_q_aggregate(y, sf.family, cfg);
    weights = sol.theta_hat;
    aggregate = sol.aggregate;
    objective = sol.objective;
    converged = sol.converged;
    iterations = sol.iterations;
  }

  std::string tag;
  const fs::path dir = prepare_dir(oo, "estimate", &tag);
  std::string wcsv = "member,cardinality,indices,weight\n";
  for (Eigen::Index j = 0; j < sf.family.M(); ++j) {
    std::string idx;
    for (int i : sf.patterns[static_cast<std::size_t>(j)].indices) {
      if (!idx.empty()) idx += '|';
      idx += std::to_string(i + 1);  // 1-based in the report
    }
    wcsv += std::to_string(j) + "," +
            std::to_string(sf.patterns[static_cast<std::size_t>(j)].cardinality()) + "," + idx +
            "," + format_double(weights[j]) + "\n";
  }
  std::string ecsv = "index,value\n";
  for (Eigen::Index i = 0; i < aggregate.size(); ++i)
    ecsv += std::to_string(i) + "," + format_double(aggregate(i)) + "\n";

  json doc{{"subcommand", "estimate"},
           {"config",
            json{{"design", eo.design},
                 {"y", eo.y_path},
                 {"p", p},
                 {"n", static_cast<int>(X.rows())},
                 {"M", static_cast<int>(sf.family.M())},
                 {"max_cardinality", max_card},
                 {"sigma", eo.sigma},
                 {"method", eo.method},
                 {"lambda", eo.lambda},
                 {"lambda_resolved", lambda},
                 {"nu", eo.nu},
                 {"tag", tag}}},
           {"objective", objective},
           {"iterations", iterations},
           {"converged", converged},
           {"ok", true}};
  write_text(dir / "weights.csv", wcsv);
  write_text(dir / "estimate.csv", ecsv);
  write_text(dir / "summary.json", doc.dump(2) + "\n");
  std::cout << "wrote " << dir.string() << "\n";
  exit_code = 0;
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"affagg: aggregation of affine estimators in the Gaussian mean model"};
  app.require_subcommand(1);
  int exit_code = 0;

  OutputOptions oo_t2, oo_t1, oo_sp, oo_ua, oo_mk, oo_c2, oo_est;
  VerifyOptions vo_t2, vo_t1, vo_sp;

  auto* t2 = app.add_subcommand("verify-t2", "Q-aggregation high-probability oracle inequality");
  add_verify_options(t2, vo_t2, true);
  add_output_options(t2, oo_t2);
  t2->callback([&] { run_verify_t2(vo_t2, oo_t2, exit_code); });

  auto* t1 = app.add_subcommand("verify-t1", "exponential-weights weak oracle inequality");
  add_verify_options(t1, vo_t1, false);
  add_output_options(t1, oo_t1);
  t1->callback([&] { run_verify_t1(vo_t1, oo_t1, exit_code); });

  std::string sp_variant = "q";
  auto* sp = app.add_subcommand("verify-sparsity", "sparsity-pattern aggregation oracle bound");
  add_verify_options(sp, vo_sp, true);
  sp->add_option("--variant", sp_variant, "aggregate to test: q or ew")
      ->check(CLI::IsMember({"q", "ew"}))
      ->capture_default_str();
  add_output_options(sp, oo_sp);
  sp->callback([&] { run_verify_sparsity(vo_sp, sp_variant, oo_sp, exit_code); });

  UnivaggOptions uo;
  auto* ua = app.add_subcommand("verify-univagg", "seven-class universal aggregation check");
  ua->add_option("--M", uo.M)->check(CLI::Range(1, 20))->capture_default_str();
  ua->add_option("--n", uo.n)->check(CLI::PositiveNumber)->capture_default_str();
  ua->add_option("--B", uo.B)->check(CLI::PositiveNumber)->capture_default_str();
  ua->add_option("--D", uo.D)->check(CLI::PositiveNumber)->capture_default_str();
  ua->add_option("--q", uo.q)->check(CLI::Range(1e-9, 1.0))->capture_default_str();
  ua->add_option("--R", uo.R)->check(CLI::PositiveNumber)->capture_default_str();
  ua->add_option("--classes", uo.classes, "'all' or comma list of theta classes")
      ->capture_default_str();
  ua->add_option("--trials", uo.trials)->check(CLI::PositiveNumber)->capture_default_str();
  ua->add_option("--delta", uo.delta)->check(CLI::Range(1e-12, 0.999999))->capture_default_str();
  ua->add_option("--sigma", uo.sigma)->check(CLI::PositiveNumber)->capture_default_str();
  ua->add_option("--lambda", uo.lambda)->capture_default_str();
  ua->add_option("--nu", uo.nu)->check(CLI::Range(1e-9, 1.0 - 1e-9))->capture_default_str();
  ua->add_option("--truth-nonzeros", uo.truth_nonzeros)->capture_default_str();
  ua->add_option("--truth-scale", uo.truth_scale)->capture_default_str();
  ua->add_option("--seed", uo.seed)->capture_default_str();
  ua->add_option("--dict-seed", uo.dict_seed)->capture_default_str();
  ua->add_option("--family", uo.family, "aggregated family: fixed or pattern")
      ->check(CLI::IsMember({"fixed", "pattern"}))
      ->capture_default_str();
  ua->add_option("--const-pattern", uo.consts.pattern)->capture_default_str();
  ua->add_option("--const-floor", uo.consts.floor_term)->capture_default_str();
  ua->add_option("--const-lq", uo.consts.lq_lead)->capture_default_str();
  ua->add_option("--const-nu-scale", uo.consts.nu_scale)->capture_default_str();
  add_output_options(ua, oo_ua);
  ua->callback([&] { run_univagg(uo, oo_ua, exit_code); });

  MaureyOptions mo;
  auto* mk = app.add_subcommand("maurey-check", "constructive sparsifier contract check");
  mk->add_option("--M", mo.M)->check(CLI::Range(2, 10000))->capture_default_str();
  mk->add_option("--n", mo.n)->check(CLI::PositiveNumber)->capture_default_str();
  mk->add_option("--m", mo.m)->check(CLI::PositiveNumber)->capture_default_str();
  mk->add_option("--q", mo.q)->check(CLI::Range(1e-9, 1.0))->capture_default_str();
  mk->add_option("--runs", mo.runs)->check(CLI::PositiveNumber)->capture_default_str();
  mk->add_option("--max-resamples", mo.max_resamples)
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  mk->add_option("--draws", mo.draws)->check(CLI::PositiveNumber)->capture_default_str();
  mk->add_option("--target-noise", mo.target_noise)->capture_default_str();
  mk->add_option("--seed", mo.seed)->capture_default_str();
  mk->add_option("--dict-seed", mo.dict_seed)->capture_default_str();
  add_output_options(mk, oo_mk);
  mk->callback([&] { run_maurey_check(mo, oo_mk, exit_code); });

  Chi2Options co;
  auto* c2 = app.add_subcommand("chi2-check", "chi-square deviation and MGF check");
  c2->add_option("--k", co.k, "a = vector of k ones")->capture_default_str();
  c2->add_option("--a", co.a, "explicit coefficient list")->delimiter(',');
  c2->add_option("--t", co.t)->check(CLI::PositiveNumber)->capture_default_str();
  c2->add_option("--trials", co.trials)->check(CLI::PositiveNumber)->capture_default_str();
  c2->add_option("--u", co.u, "MGF argument (negative: 1/(4 |a|_inf))")->capture_default_str();
  c2->add_option("--seed", co.seed)->capture_default_str();
  add_output_options(c2, oo_c2);
  c2->callback([&] { run_chi2_check(co, oo_c2, exit_code); });

  EstimateOptions eo;
  auto* est = app.add_subcommand("estimate", "one-shot aggregation on given data");
  est->add_option("--design", eo.design, "design CSV or gaussian:p=..,n=..,seed=..")->required();
  est->add_option("--y", eo.y_path, "observation vector CSV (single column)")->required();
  est->add_option("--sigma", eo.sigma)->check(CLI::PositiveNumber)->capture_default_str();
  est->add_option("--method", eo.method)->check(CLI::IsMember({"q", "ew"}))->capture_default_str();
  est->add_option("--lambda", eo.lambda)->capture_default_str();
  est->add_option("--nu", eo.nu)->check(CLI::Range(1e-9, 1.0 - 1e-9))->capture_default_str();
  est->add_option("--max-cardinality", eo.max_cardinality)->capture_default_str();
  add_output_options(est, oo_est);
  est->callback([&] { run_estimate(eo, oo_est, exit_code); });

  RateQuery rq;
  std::string rq_class = "model-selection";
  auto* rates = app.add_subcommand("rates", "print a Table-1 optimal aggregation rate");
  rates->add_option("--class", rq_class, "theta class")->required();
  rates->add_option("--n", rq.n)->capture_default_str();
  rates->add_option("--M", rq.M)->capture_default_str();
  rates->add_option("--D", rq.D)->capture_default_str();
  rates->add_option("--sigma", rq.sigma)->capture_default_str();
  rates->add_option("--B", rq.B)->capture_default_str();
  rates->add_option("--R", rq.R)->capture_default_str();
  rates->add_option("--delta", rq.delta)->capture_default_str();
  rates->add_option("--q", rq.q)->capture_default_str();
  rates->callback([&] {
    rq.theta_class = parse_theta_class(rq_class);
    std::printf("%.5g\n", aggregation_rate(rq));
  });

  try {
    std::vector<std::string> args = expand_config_args(argc, argv);
    std::reverse(args.begin(), args.end());  // CLI11 vector parse wants reversed args
    app.parse(args);
  } catch (const CLI::ExtrasError& e) {
    app.exit(e);
    std::cerr << "unknown option or config key; run the subcommand with --help "
                 "for the list of valid keys\n";
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
