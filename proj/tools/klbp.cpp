// klbp: command-line front end. Every command writes one JSON report.
//
// Exit codes: 0 ok, 1 file error, 2 schema error, 3 structural validation
// failure, 4 a check failed, 5 any other library error.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "klbp/klbp.hpp"

using namespace klbp;

namespace {

//==============================================================================
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256: init failed");
  }

  void update(const std::string& bytes) {
    if (EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size()) != 1) throw std::runtime_error("sha256: update failed");
  }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw std::runtime_error("sha256: final failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

//! Report under construction plus the digest of every input file read.
class Run {
 public:
  json outputs = json::object();

  json load(const std::string& path) {
    const auto text = read_file(path);
    sha_.update(text);
    ++files_;
    try {
      return json::parse(text);
    } catch (const json::parse_error& e) {
      throw SchemaError("'" + path + "' is not valid JSON: " + e.what());
    }
  }

  void check(const std::string& name, double error, double tolerance) {
    CheckSet cs;
    cs.record(name, error, tolerance);
    add(cs);
  }

  void add(const CheckSet& cs, const std::string& prefix = "") {
    for (const auto& [name, c] : cs.checks()) {
      checks_[prefix + name] = {{"max_error", c.worst},
                                {"tolerance", c.tolerance},
                                {"count", c.count},
                                {"failures", c.failures},
                                {"pass", c.failures == 0}};
      pass_ = pass_ && c.failures == 0;
    }
  }

  void fail() { pass_ = false; }
  bool passed() const { return pass_; }

  json report(const std::string& command, std::optional<double> seconds) {
    json j;
    j["schema"] = "v1";
    j["command"] = command;
    j["input_digest"] = files_ ? sha_.hex() : "";
    j["outputs"] = outputs;
    j["checks"] = checks_;
    j["pass"] = pass_;
    if (seconds) j["wall_time_s"] = *seconds;
    return j;
  }

 private:
  Sha256 sha_;
  std::size_t files_ = 0;
  json checks_ = json::object();
  bool pass_ = true;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, sep);)
    if (!p.empty()) out.push_back(p);
  return out;
}

double parse_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw SchemaError(what + ": '" + s + "' is not a number");
}

std::vector<double> parse_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& p : split(s, ',')) out.push_back(parse_number(p, what));
  return out;
}

//! "w=0,x=1" -> {w: 0, x: 1}
std::map<std::string, double> parse_assignment(const std::string& s) {
  std::map<std::string, double> out;
  for (const auto& p : split(s, ',')) {
    const auto eq = p.find('=');
    if (eq == std::string::npos || eq == 0) throw SchemaError("--at: expected name=value, got '" + p + "'");
    out[p.substr(0, eq)] = parse_number(p.substr(eq + 1), "--at " + p.substr(0, eq));
  }
  return out;
}

json beliefs_json(const SpnCircuit& c, const std::vector<VariableBelief>& b) {
  json j = json::object();
  for (std::size_t i = 0; i < b.size(); ++i) j[c.variables()[i]] = b[i].full();
  return j;
}

json beliefs_json(const FactorGraph& fg, const std::vector<DistVec>& b) {
  json j = json::object();
  for (std::size_t i = 0; i < b.size(); ++i) j[fg.variables()[i].id] = b[i].vector();
  return j;
}

json validation_json(const ValidationReport& rep) {
  return {{"valid", rep.valid}, {"violations", rep.violations}, {"warnings", rep.warnings}};
}

//==============================================================================
// Options shared by the subcommands.
struct Options {
  std::string circuit, evidence, fg, graph, at, point, factor = "exp:1", model, theta, prefix, kind, generator = "kl";
  bool log_domain = false, loopy = false, all = false, tree = false, exp_only = false;
  double lo = std::log(0.5), hi = 0.0, damping = 0.0, tol = 1e-10, h = 1e-3;
  std::size_t samples = 200, iters = 1, max_iters = 10'000, count = 100, budget = kJointBudget;
  std::uint64_t seed = 1;
  std::size_t vars = 4, states = 3, nodes = 25, card = 3, inputs = 4, grid = 5, thetas = 3;
};

//==============================================================================
struct LoadedSpn {
  SpnCircuit circuit;
  Evidence evidence;
};

LoadedSpn load_spn(Run& run, const Options& o) {
  auto c = SpnCircuit::build(spn_from_json(run.load(o.circuit)));
  Evidence e;
  if (o.evidence.empty()) {
    for (std::size_t card : c.min_cardinality()) e.lambda.emplace_back(card, 1.0);
  } else {
    e = evidence_from_map(c, evidence_from_json(run.load(o.evidence)));
  }
  return {std::move(c), std::move(e)};
}

int cmd_spn_validate(Run& run, const Options& o) {
  const auto raw = spn_from_json(run.load(o.circuit));
  const auto rep = SpnCircuit::validate(raw);
  run.outputs = validation_json(rep);
  if (!rep.valid) {
    run.fail();
    return 3;
  }
  const auto c = SpnCircuit::build(raw);
  json scopes = json::object();
  for (const auto& n : c.nodes()) {
    json s = json::array();
    for (std::size_t v : n.scope) s.push_back(c.variables()[v]);
    scopes[n.id] = s;
  }
  run.outputs["scopes"] = scopes;
  run.outputs["variables"] = c.variables();
  run.outputs["nodes"] = c.size();
  run.outputs["depth"] = c.depth();
  run.outputs["tree"] = c.is_tree();
  return 0;
}

int cmd_spn_eval(Run& run, const Options& o) {
  const auto [c, e] = load_spn(run, o);
  const auto v = upward_pass(c, e);
  json values = json::object();
  for (std::size_t i = 0; i < c.size(); ++i) values[c.nodes()[i].id] = v.S[i];
  run.outputs["values"] = values;
  run.outputs["S"] = v.root();
  run.check("log_domain_root", std::abs(std::exp(log_upward_pass(c, e).root()) - v.root()) / v.root(), 1e-9);
  return 0;
}

int cmd_spn_marginals(Run& run, const Options& o) {
  const auto [c, e] = load_spn(run, o);
  std::vector<VariableBelief> b;
  if (o.log_domain) {
    const auto lv = log_upward_pass(c, e);
    b = log_variable_marginals(c, e, lv, log_downward_pass(c, lv));
    run.outputs["log_S"] = lv.root();
  } else {
    b = klbp::spn_marginals(c, e);
    run.outputs["log_S"] = std::log(upward_pass(c, e).root());
  }
  run.outputs["marginals"] = beliefs_json(c, b);
  try {
    run.check("oracle_enumeration", max_belief_error(b, enumerate_spn_marginals(c, e)), 1e-10);
  } catch (const BudgetError& err) {
    run.outputs["oracle_skipped"] = err.what();
  }
  return 0;
}

int cmd_spn_gates(Run& run, const Options& o) {
  const auto [c, e] = load_spn(run, o);
  const auto v = upward_pass(c, e);
  const auto a = downward_pass(c, v);
  json gates = json::object();
  CheckSet cs;
  for (const auto& g : gate_report(c, v, a)) {
    gates[c.nodes()[g.node].id] = {{"local", g.local}, {"visit", g.visit}, {"global", g.global}};
    for (std::size_t k = 0; k < g.local.size(); ++k)
      cs.record("global_equals_visit_times_local", std::abs(g.global[k] - g.visit * g.local[k]), 1e-12);
    if (g.node == c.root()) cs.record("root_visit", std::abs(g.visit - 1.0), 1e-12);
  }
  if (c.is_tree() && e.soft()) {
    const auto sfg = spn_to_factor_graph(c, e);
    const auto nb = spn_fg_node_beliefs(sfg);
    for (const auto& g : gate_report(c, v, a)) {
      const auto fg_gate = spn_fg_gate(sfg, nb, g.node);
      for (std::size_t k = 0; k < fg_gate.size(); ++k)
        cs.record("factor_graph_gate", std::abs(fg_gate[k] - g.global[k]), 1e-10);
    }
  }
  run.outputs["gates"] = gates;
  run.add(cs);
  return 0;
}

int cmd_spn_kkt(Run& run, const Options& o) {
  const auto [c, e] = load_spn(run, o);
  const auto v = upward_pass(c, e);
  const auto k = kkt_multipliers(c, v, downward_pass(c, v));
  json visit = json::object(), mu = json::object();
  for (const auto& [node, pi] : k.visit) visit[c.nodes()[node].id] = pi;
  for (const auto& ed : k.edges) {
    const auto& p = c.nodes()[ed.product];
    mu[p.id + ">" + c.nodes()[p.children[ed.position]].id] = ed.mu;
  }
  run.outputs["visit"] = visit;
  run.outputs["multipliers"] = mu;
  run.check("sum_identity", k.sum_identity_residual, 1e-12);
  run.check("edge_identity", k.edge_identity_residual, 1e-12);
  run.check("positivity", k.positive ? 0.0 : 1.0, 0.0);
  return 0;
}

int cmd_spn_region(Run& run, const Options& o) {
  auto [c, e] = load_spn(run, o);
  run.outputs["unrolled"] = !c.is_tree();
  const auto tree = c.is_tree() ? c : unroll(c);
  const auto r = region_two_step(tree, e, o.budget);
  json vm = json::object();
  for (std::size_t i = 0; i < r.variable_marginals.size(); ++i) vm[tree.variables()[i]] = r.variable_marginals[i];
  run.outputs["joint_size"] = r.joint_size;
  run.outputs["marginals"] = vm;
  run.outputs["consensus_residual"] = r.consensus_residual;
  run.outputs["product_residual"] = r.product_residual;
  const auto b = klbp::spn_marginals(c, e);
  double err = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) err = std::max(err, max_abs_diff(b[i].full(), r.variable_marginals[i]));
  run.check("marginals_vs_circuit", err, 1e-10);
  run.check("consensus", r.consensus_residual, 1e-12);
  run.check("product_form", r.product_residual, 1e-12);
  return 0;
}

int cmd_spn_lipschitz(Run& run, const Options& o) {
  const auto [c, e] = load_spn(run, o);
  const auto rep = lipschitz_probe(c, e, LogBox::uniform(e, o.lo, o.hi), o.samples, o.seed);
  run.outputs = {{"l_hat", rep.l_hat}, {"worst_ratio", rep.worst_ratio}, {"pairs", rep.pairs},
                 {"violations", rep.violations}, {"box", {o.lo, o.hi}}, {"seed", o.seed}};
  run.check("pair_bound", static_cast<double>(rep.violations), 0.0);
  return 0;
}

//==============================================================================
int cmd_fg_bp(Run& run, const Options& o) {
  const auto fg = factor_graph_from_json(run.load(o.fg));
  const auto rep = validate_fg(fg);
  if (!rep.valid) {
    run.outputs = validation_json(rep);
    run.fail();
    return 3;
  }
  run.outputs["warnings"] = rep.warnings;
  std::vector<DistVec> b;
  const bool tree = fg_is_tree(fg) && !o.loopy;
  if (tree) {
    b = bp_run_tree(fg);
  } else {
    const auto res = bp_run_loopy(fg, {o.damping, o.tol, static_cast<int>(o.max_iters)});
    b = bp_beliefs(fg, res.messages);
    run.outputs["iterations"] = res.iterations;
    run.outputs["residual"] = res.residual;
    run.check("converged", res.converged ? 0.0 : 1.0, 0.0);
  }
  run.outputs["schedule"] = tree ? "tree" : "loopy";
  run.outputs["beliefs"] = beliefs_json(fg, b);
  try {
    const double err = max_belief_error(b, enumerate_fg_marginals(fg));
    // Loopy BP is approximate on cycles; the gap is reported, not checked.
    if (fg_is_tree(fg))
      run.check("oracle_enumeration", err, tree ? 1e-10 : 1e-8);
    else
      run.outputs["exact_gap"] = err;
  } catch (const BudgetError& err) {
    run.outputs["oracle_skipped"] = err.what();
  }
  return 0;
}

int cmd_fg_wr(Run& run, const Options& o) {
  const auto fg = factor_graph_from_json(run.load(o.fg));
  auto space = replicate_lift(fg, o.budget);
  Generator gen = NegativeEntropy{};
  if (o.generator == "euclid")
    gen = Mahalanobis::identity(space.shape.size());
  else if (o.generator != "kl")
    throw SchemaError("--generator: expected kl or euclid");
  const WrContext ctx(std::move(space), gen);
  auto s = ctx.initial_state();
  double step = 0.0;
  for (std::size_t k = 0; k < o.iters; ++k) {
    auto next = wr_step(s, ctx);
    const auto ga = ctx.grad(next.q), gb = ctx.grad(s.q);
    double sq = 0.0;
    for (std::size_t i = 0; i < ga.size(); ++i) sq += (ga[i] - gb[i]) * (ga[i] - gb[i]);
    step = std::sqrt(sq);
    s = std::move(next);
  }
  const auto wr = wr_beliefs(s, ctx.space());
  json b = json::object();
  for (std::size_t i = 0; i < wr.size(); ++i) b[fg.variables()[i].id] = wr[i];
  run.outputs["beliefs"] = b;
  run.outputs["iterations"] = s.iteration;
  run.outputs["last_step"] = step;
  run.outputs["lift_size"] = ctx.space().shape.size();
  if (o.generator == "kl" && o.iters > 0) {
    try {
      const auto exact = enumerate_fg_marginals(fg);
      double err = 0.0;
      for (std::size_t i = 0; i < wr.size(); ++i) err = std::max(err, max_abs_diff(wr[i], exact[i].probs()));
      run.check("oracle_enumeration", err, 1e-10);
    } catch (const BudgetError& err) {
      run.outputs["oracle_skipped"] = err.what();
    }
  }
  return 0;
}

int cmd_fg_project(Run& run, const Options& o) {
  const auto fg = factor_graph_from_json(run.load(o.fg));
  const auto res = bp_run_loopy(fg, {o.damping, o.tol, static_cast<int>(o.max_iters)});
  run.check("converged", res.converged ? 0.0 : 1.0, 0.0);
  const auto space = replicate_lift(fg, o.budget);
  const auto q = message_lift(fg, res.messages, space);
  const auto tq = t_proj(q, space);
  const double residual = max_abs_diff(tq.probs(), i_project_diagonal(q, space.shape).probs());
  const auto beliefs = bp_beliefs(fg, res.messages);
  const auto face_axes = space.shape.face_axes();
  double face_err = 0.0;
  json faces = json::object();
  for (std::size_t v = 0; v < face_axes.size(); ++v) {
    const std::size_t keep[] = {v};
    const auto m = detail::marginal(tq.probs(), face_axes, keep);
    faces[fg.variables()[v].id] = m;
    face_err = std::max(face_err, max_abs_diff(m, beliefs[v].probs()));
  }
  run.outputs["lift_size"] = space.shape.size();
  run.outputs["fixed_point_residual"] = residual;
  run.outputs["face_marginals"] = faces;
  run.check("fixed_point", residual, 1e-8);
  run.check("face_marginals_vs_bp", face_err, 1e-8);
  return 0;
}

//==============================================================================
struct LoadedDag {
  CompGraph graph;
  std::map<std::string, double> point;
};

LoadedDag load_dag(Run& run, const Options& o) {
  const auto raw = comp_graph_from_json(run.load(o.graph));
  const auto rep = validate_dag(raw);
  run.outputs["warnings"] = rep.warnings;
  auto g = CompGraph::build(raw);
  std::map<std::string, double> point;
  if (!o.point.empty()) {
    const auto j = run.load(o.point);
    if (!j.is_object()) throw SchemaError("point file: expected an object of input values");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!it.value().is_number()) throw SchemaError("point file: value of '" + it.key() + "' is not a number");
      point[it.key()] = it.value().get<double>();
    }
  }
  for (const auto& [k, v] : parse_assignment(o.at)) point[k] = v;
  return {std::move(g), std::move(point)};
}

int cmd_dag_eval(Run& run, const Options& o) {
  const auto [g, point] = load_dag(run, o);
  const auto t = forward_eval(g, point);
  json values = json::object();
  for (std::size_t i = 0; i < g.size(); ++i) values[g.nodes()[i].id] = t.values[i];
  run.outputs["values"] = values;
  run.outputs["z"] = t.values[g.output()];
  return 0;
}

int cmd_dag_adjoints(Run& run, const Options& o) {
  const auto [g, point] = load_dag(run, o);
  const auto f = parse_output_factor(o.factor);
  const auto t = forward_eval(g, point);
  const auto a = backward_adjoints(g, t, f);
  json adj = json::object();
  for (std::size_t i = 0; i < g.size(); ++i) adj[g.nodes()[i].id] = a.s[i];
  run.outputs["adjoints"] = adj;
  run.outputs["z"] = t.values[g.output()];
  run.outputs["factor"] = output_factor_to_json(f);
  const double seed = seed_score(f, t.values[g.output()]);
  CheckSet cs;
  for (const auto& [id, x] : point) {
    const double h = fd_step(x);
    auto up = point, dn = point;
    up[id] += h;
    dn[id] -= h;
    const double dz = (forward_eval(g, up).values[g.output()] - forward_eval(g, dn).values[g.output()]) / (2.0 * h);
    cs.record("finite_difference", relative_error(a.s[g.index_of(id)], seed * dz), 1e-6);
  }
  run.add(cs);
  return 0;
}

int cmd_dag_gauge(Run& run, const Options& o) {
  const auto [g, point] = load_dag(run, o);
  const auto f = parse_output_factor(o.factor);
  const auto t = forward_eval(g, point);
  Rng rng(o.seed);
  EdgeScales scales;
  for (const auto& n : g.nodes())
    for (std::size_t in : n.inputs) scales[{g.nodes()[in].id, n.id}] = std::exp(uniform(rng, -1.0, 1.0));
  json slopes = json::object();
  CheckSet cs;
  for (const auto& [id, x] : point) {
    const std::vector<double> grid{x - o.h, x, x + o.h};
    const double plain = grid_slope(grid, downward_log_belief(g, t, f, id, grid));
    const double gauged = grid_slope(grid, downward_log_belief(g, t, f, id, grid, scales));
    slopes[id] = {{"plain", plain}, {"rescaled", gauged}};
    cs.record("slope_invariance", std::abs(plain - gauged) / std::max(1.0, std::abs(plain)), 1e-12);
  }
  run.outputs["slopes"] = slopes;
  run.outputs["seed"] = o.seed;
  run.add(cs);
  return 0;
}

//==============================================================================
PosteriorModel load_model(Run& run, const Options& o) {
  auto m = posterior_from_json(run.load(o.model));
  if (!o.theta.empty()) {
    auto th = parse_list(o.theta, "--theta");
    if (th.size() != m.theta.size()) throw ShapeError("--theta: model has " + std::to_string(m.theta.size()) + " parameters");
    m.theta = std::move(th);
  }
  return m;
}

int cmd_posterior_grad(Run& run, const Options& o) {
  const auto m = load_model(run, o);
  const auto g = posterior_grad_enum(m, m.theta);
  run.outputs["gradient"] = g.gradient;
  run.outputs["log_marginal_likelihood"] = log_marginal_likelihood_enum(m, m.theta);
  const auto fd = finite_diff_grad([&](std::span<const double> th) { return log_marginal_likelihood_enum(m, th); },
                                   m.theta);
  CheckSet cs;
  for (std::size_t k = 0; k < fd.size(); ++k) cs.record("finite_difference", relative_error(g.gradient[k], fd[k]), 1e-6);
  if (std::holds_alternative<ExpScale>(m.likelihood)) {
    const auto bp = posterior_grad_bp(m, m.theta);
    run.outputs["gradient_bp"] = bp;
    for (std::size_t k = 0; k < bp.size(); ++k) cs.record("bp_vs_enumeration", std::abs(bp[k] - g.gradient[k]), 1e-10);
  }
  run.add(cs);
  return 0;
}

int cmd_posterior_dirac(Run& run, const Options& o) {
  const auto m = load_model(run, o);
  std::vector<double> x_star;
  if (o.at.empty()) {
    for (const auto& in : m.inputs) x_star.push_back(in.grid.front());
  } else {
    x_star = parse_list(o.at, "--at");
  }
  const auto [left, right] = dirac_limit_check(m, m.theta, x_star);
  run.outputs["x_star"] = x_star;
  run.outputs["posterior_gradient"] = left;
  run.outputs["seeded_adjoints"] = right;
  CheckSet cs;
  for (std::size_t k = 0; k < left.size(); ++k) cs.record("dirac_limit", std::abs(left[k] - right[k]), 1e-10);
  run.add(cs);
  return 0;
}

//==============================================================================
const std::vector<std::string> kKinds = {"spn", "fg", "dag", "posterior", "projection"};

OutputFactor random_factor(Rng& rng, std::size_t k) {
  if (k % 2 == 0) return ExpScale{uniform(rng, -2.0, 2.0)};
  if (k % 4 == 1) return NegLossTemp{LossKind::Squared, uniform(rng, -1.0, 1.0), uniform(rng, 0.5, 2.0)};
  return NegLossTemp{LossKind::Logistic, static_cast<double>(uniform_int(rng, 0, 1)), uniform(rng, 0.5, 2.0)};
}

CheckSet compare_generated(const std::string& kind, Rng& rng, std::size_t k) {
  if (kind == "spn") {
    const auto gen = random_spn(rng);
    const auto c = SpnCircuit::build(gen.circuit);
    return verify_spn(c, evidence_from_map(c, gen.evidence));
  }
  if (kind == "fg") return verify_fg(k % 5 == 4 ? three_cycle(rng, k % 2 == 0) : random_tree_fg(rng));
  if (kind == "dag") {
    const auto gd = random_dag(rng);
    return verify_dag(CompGraph::build(gd.graph), gd.point, random_factor(rng, k), rng);
  }
  if (kind == "posterior") return verify_posterior(random_posterior(rng));
  return verify_projections(rng);
}

CheckSet compare_files(Run& run, const std::string& kind, const std::string& prefix, std::uint64_t seed) {
  if (kind == "spn") {
    auto c = SpnCircuit::build(spn_from_json(run.load(prefix + ".circuit.json")));
    const auto e = evidence_from_map(c, evidence_from_json(run.load(prefix + ".evidence.json")));
    return verify_spn(c, e);
  }
  if (kind == "fg") return verify_fg(factor_graph_from_json(run.load(prefix + ".fg.json")));
  if (kind == "dag") {
    const auto g = CompGraph::build(comp_graph_from_json(run.load(prefix + ".graph.json")));
    const auto j = run.load(prefix + ".point.json");
    std::map<std::string, double> point;
    for (auto it = j.begin(); it != j.end(); ++it) point[it.key()] = detail::number(it.value(), "point." + it.key());
    Rng rng(seed);
    return verify_dag(g, point, ExpScale{1.0}, rng);
  }
  if (kind == "posterior") return verify_posterior(posterior_from_json(run.load(prefix + ".posterior.json")));
  throw SchemaError("--prefix works with kinds spn, fg, dag, posterior");
}

int cmd_oracle_compare(Run& run, const Options& o) {
  std::vector<std::string> kinds;
  if (o.all) {
    kinds = kKinds;
  } else if (!o.kind.empty()) {
    if (std::find(kKinds.begin(), kKinds.end(), o.kind) == kKinds.end())
      throw SchemaError("--kind: expected one of spn, fg, dag, posterior, projection");
    kinds = {o.kind};
  } else {
    throw SchemaError("oracle compare: give --kind or --all");
  }
  if (!o.prefix.empty()) {
    if (kinds.size() != 1) throw SchemaError("--prefix needs a single --kind");
    const auto cs = compare_files(run, kinds.front(), o.prefix, o.seed);
    run.outputs[kinds.front()] = {{"instances", 1}};
    run.add(cs, kinds.front() + ".");
    return 0;
  }
  for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
    // One stream per kind so a kind's instances do not depend on --all.
    Rng rng(o.seed + 1000003 * (std::find(kKinds.begin(), kKinds.end(), kinds[ki]) - kKinds.begin()));
    CheckSet total;
    for (std::size_t k = 0; k < o.count; ++k) total.merge(compare_generated(kinds[ki], rng, k));
    run.outputs[kinds[ki]] = {{"instances", o.count}, {"pass", total.passed()}};
    run.add(total, kinds[ki] + ".");
  }
  run.outputs["seed"] = o.seed;
  return 0;
}

//==============================================================================
void write_file(Run& run, const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write '" + path + "'");
  out << dump_stable(j);
  if (!out) throw FileError("write to '" + path + "' failed");
  run.outputs["files"].push_back(path);
}

int gen(Run& run, const Options& o, const std::string& kind) {
  Rng rng(o.seed);
  run.outputs["files"] = json::array();
  run.outputs["seed"] = o.seed;
  if (kind == "spn") {
    SpnGenOptions opt;
    opt.max_vars = o.vars;
    opt.max_states = o.states;
    opt.min_states = std::min<std::size_t>(2, o.states);
    opt.max_nodes = o.nodes;
    opt.tree = o.tree;
    const auto g = random_spn(rng, opt);
    write_file(run, o.prefix + ".circuit.json", spn_to_json(g.circuit));
    json l = json::object();
    for (const auto& [k, v] : g.evidence) l[k] = v;
    write_file(run, o.prefix + ".evidence.json", {{"lambda", l}});
  } else if (kind == "fg") {
    FgGenOptions opt;
    opt.max_vars = o.vars;
    opt.max_card = o.card;
    write_file(run, o.prefix + ".fg.json", factor_graph_to_json(random_tree_fg(rng, opt)));
  } else if (kind == "dag") {
    DagGenOptions opt;
    opt.max_nodes = o.nodes;
    const auto g = random_dag(rng, opt);
    write_file(run, o.prefix + ".graph.json", comp_graph_to_json(g.graph));
    json p = json::object();
    for (const auto& [k, v] : g.point) p[k] = v;
    write_file(run, o.prefix + ".point.json", p);
  } else {
    PosteriorGenOptions opt;
    opt.max_inputs = o.inputs;
    opt.max_grid = o.grid;
    opt.max_theta = o.thetas;
    opt.exp_only = o.exp_only;
    write_file(run, o.prefix + ".posterior.json", posterior_to_json(random_posterior(rng, opt)));
  }
  return 0;
}

}  // namespace

//==============================================================================
int main(int argc, char** argv) {
  CLI::App app{"Exact inference, differentiation and projection checks for circuits, factor graphs and DAGs"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out_path;
  bool timing = false;
  app.add_option("-o,--report", out_path, "Write the report here instead of stdout");
  app.add_flag("--timing", timing, "Add wall time to the report (breaks byte stability)");

  Options o;
  std::function<int(Run&)> action;
  auto bind = [&](CLI::App* cmd, std::function<int(Run&, const Options&)> fn) {
    cmd->callback([&action, &o, fn] { action = [&o, fn](Run& r) { return fn(r, o); }; });
  };

  auto* spn = app.add_subcommand("spn", "Circuit passes")->require_subcommand(1);
  auto spn_cmd = [&](const std::string& name, const std::string& help, auto fn, bool needs_evidence = true) {
    auto* c = spn->add_subcommand(name, help);
    c->add_option("--circuit", o.circuit, "Circuit JSON")->required();
    if (needs_evidence) c->add_option("--evidence", o.evidence, "Evidence JSON (default: all indicators 1)");
    bind(c, fn);
    return c;
  };
  spn_cmd("validate", "Structural checks", cmd_spn_validate, false);
  spn_cmd("eval", "Upward pass values", cmd_spn_eval);
  spn_cmd("marginals", "Variable marginals", cmd_spn_marginals)->add_flag("--log", o.log_domain, "Use the log-domain passes");
  spn_cmd("gates", "Sum-node gates", cmd_spn_gates);
  spn_cmd("kkt", "Visit probabilities and edge multipliers", cmd_spn_kkt);
  spn_cmd("region", "Region-level two-step projection", cmd_spn_region)->add_option("--budget", o.budget, "Joint size limit");
  auto* lip = spn_cmd("lipschitz", "Empirical Lipschitz probe", cmd_spn_lipschitz);
  lip->add_option("--lo", o.lo, "Lower log-evidence bound");
  lip->add_option("--hi", o.hi, "Upper log-evidence bound");
  lip->add_option("--samples", o.samples, "Sample count");
  lip->add_option("--seed", o.seed, "Sampler seed");

  auto* fg = app.add_subcommand("fg", "Factor graphs")->require_subcommand(1);
  auto fg_cmd = [&](const std::string& name, const std::string& help, auto fn) {
    auto* c = fg->add_subcommand(name, help);
    c->add_option("--fg", o.fg, "Factor graph JSON")->required();
    bind(c, fn);
    return c;
  };
  auto* bp = fg_cmd("bp", "Belief propagation", cmd_fg_bp);
  bp->add_flag("--loopy", o.loopy, "Use synchronous sweeps even on trees");
  for (auto* c : {bp, fg_cmd("project", "Two-step operator at the converged BP state", cmd_fg_project)}) {
    c->add_option("--damping", o.damping, "Damping in [0,1)");
    c->add_option("--tol", o.tol, "Message change tolerance");
    c->add_option("--max-iters", o.max_iters, "Sweep limit");
  }
  auto* wr = fg_cmd("wr", "Hybrid projection iteration on the replicated lift", cmd_fg_wr);
  wr->add_option("--iters", o.iters, "Outer iterations");
  wr->add_option("--generator", o.generator, "kl or euclid");
  wr->add_option("--budget", o.budget, "Lift size limit");

  auto* dag = app.add_subcommand("dag", "Computation graphs")->require_subcommand(1);
  auto dag_cmd = [&](const std::string& name, const std::string& help, auto fn) {
    auto* c = dag->add_subcommand(name, help);
    c->add_option("--graph", o.graph, "Graph JSON")->required();
    c->add_option("--at", o.at, "Input values, e.g. w=0,x=1");
    c->add_option("--point", o.point, "Input values as a JSON object");
    bind(c, fn);
    return c;
  };
  dag_cmd("eval", "Forward values", cmd_dag_eval);
  dag_cmd("adjoints", "Reverse sweep", cmd_dag_adjoints)->add_option("--factor", o.factor, "exp:A, sq:TARGET:T or logistic:LABEL:T");
  auto* gauge = dag_cmd("gauge", "Log-belief slopes under edge rescaling", cmd_dag_gauge);
  gauge->add_option("--factor", o.factor, "Output factor");
  gauge->add_option("--seed", o.seed, "Rescaling seed");
  gauge->add_option("--half-width", o.h, "Grid half-width");

  auto* post = app.add_subcommand("posterior", "Posterior-expected sensitivities")->require_subcommand(1);
  for (auto [name, help, fn] : {std::tuple{"grad", "Posterior gradient", cmd_posterior_grad},
                                std::tuple{"dirac", "Point-mass limit", cmd_posterior_dirac}}) {
    auto* c = post->add_subcommand(name, help);
    c->add_option("--model", o.model, "Model JSON")->required();
    c->add_option("--theta", o.theta, "Parameter override, comma separated");
    if (std::string(name) == "dirac") c->add_option("--at", o.at, "Point per input, comma separated");
    bind(c, fn);
  }

  auto* oracle = app.add_subcommand("oracle", "Reference comparisons")->require_subcommand(1);
  auto* cmp = oracle->add_subcommand("compare", "Engine vs brute force on generated or given instances");
  cmp->add_option("--kind", o.kind, "spn, fg, dag, posterior or projection");
  cmp->add_flag("--all", o.all, "Every kind");
  cmp->add_option("--count", o.count, "Instances per kind");
  cmp->add_option("--seed", o.seed, "Generator seed");
  cmp->add_option("--prefix", o.prefix, "Compare files written by gen instead");
  bind(cmp, cmd_oracle_compare);

  auto* gen_cmd = app.add_subcommand("gen", "Random instances")->require_subcommand(1);
  for (const std::string kind : {"spn", "fg", "dag", "posterior"}) {
    auto* c = gen_cmd->add_subcommand(kind, "Random " + kind + " instance");
    c->add_option("--seed", o.seed, "Generator seed");
    c->add_option("--out", o.prefix, "Output path prefix")->required();
    if (kind == "spn") {
      c->add_option("--vars", o.vars, "Max variables");
      c->add_option("--states", o.states, "Max states per variable");
      c->add_option("--nodes", o.nodes, "Max nodes");
      c->add_flag("--tree", o.tree, "No shared sub-circuits");
    } else if (kind == "fg") {
      c->add_option("--vars", o.vars, "Max variables");
      c->add_option("--card", o.card, "Max cardinality");
    } else if (kind == "dag") {
      c->add_option("--nodes", o.nodes, "Max nodes");
    } else {
      c->add_option("--inputs", o.inputs, "Max inputs");
      c->add_option("--grid", o.grid, "Max grid size");
      c->add_option("--theta", o.thetas, "Max parameters");
      c->add_flag("--exp-only", o.exp_only, "Exponential likelihood only");
    }
    c->callback([&action, &o, kind] { action = [&o, kind](Run& r) { return gen(r, o, kind); }; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string command;
  for (int i = 1; i < argc; ++i) command += (i > 1 ? " " : "") + std::string(argv[i]);

  const auto start = std::chrono::steady_clock::now();
  Run run;
  int status = 0;
  try {
    status = action(run);
  } catch (const FileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
  std::optional<double> seconds;
  if (timing) seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto text = dump_stable(run.report(command, seconds));
  if (out_path.empty()) {
    std::cout << text;
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out || !(out << text)) {
      std::cerr << "error: cannot write '" << out_path << "'\n";
      return 1;
    }
  }
  if (status) return status;
  return run.passed() ? 0 : 4;
}
