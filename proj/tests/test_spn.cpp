#include "doctest.h"

#include <cmath>

#include "klbp/lipschitz.hpp"
#include "klbp/oracle.hpp"
#include "klbp/random.hpp"
#include "klbp/spn_fg.hpp"

using namespace klbp;

namespace {

RawSpnNode leaf(std::string id, std::string var, long long state) {
  return {std::move(id), "leaf", {}, std::move(var), state};
}

RawSpnNode product(std::string id, std::vector<std::string> children) {
  RawSpnNode n{std::move(id), "product", {}, std::nullopt, std::nullopt};
  for (auto& c : children) n.children.push_back({std::move(c), std::nullopt});
  return n;
}

RawSpnNode sum(std::string id, std::vector<std::pair<std::string, double>> children) {
  RawSpnNode n{std::move(id), "sum", {}, std::nullopt, std::nullopt};
  for (auto& [c, w] : children) n.children.push_back({std::move(c), w});
  return n;
}

// Mixture of two product terms over binary X and Y.
RawSpn mixture_raw(double w1 = 0.6, double w2 = 0.4) {
  return {{leaf("X0", "X", 0), leaf("X1", "X", 1), leaf("Y0", "Y", 0), leaf("Y1", "Y", 1),
           product("P1", {"X0", "Y0"}), product("P2", {"X1", "Y1"}), sum("r", {{"P1", w1}, {"P2", w2}})},
          "r"};
}

Evidence mixture_evidence() { return {{{1.0, 0.5}, {1.0, 0.8}}}; }

double max_error(const std::vector<VariableBelief>& a, const std::vector<VariableBelief>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i].full(), b[i].full()));
  return m;
}

double max_error(const std::vector<VariableBelief>& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i].full(), b[i]));
  return m;
}

}  // namespace

TEST_CASE("circuit validation") {
  const auto rep = SpnCircuit::validate(mixture_raw());
  CHECK(rep.valid);
  const auto c = SpnCircuit::build(mixture_raw());
  CHECK(c.variables() == std::vector<std::string>{"X", "Y"});
  CHECK(c.nodes()[c.index_of("P1")].scope == std::vector<std::size_t>{0, 1});
  CHECK(c.nodes()[c.root()].scope == std::vector<std::size_t>{0, 1});
  CHECK(c.is_tree());
  CHECK(c.depth() == 3);

  const RawSpn shared{{leaf("X0", "X", 0), leaf("X1", "X", 1), product("P", {"X0", "X1"})}, "P"};
  const auto rs = SpnCircuit::validate(shared);
  CHECK_FALSE(rs.valid);
  CHECK(rs.violations[0].find("decomposability") != std::string::npos);
  CHECK_THROWS_AS(SpnCircuit::build(shared), ValidationError);

  const RawSpn incomplete{{leaf("X0", "X", 0), leaf("Y0", "Y", 0), sum("s", {{"X0", 0.5}, {"Y0", 0.5}})}, "s"};
  const auto ri = SpnCircuit::validate(incomplete);
  CHECK_FALSE(ri.valid);
  CHECK(ri.violations[0].find("completeness") != std::string::npos);

  const RawSpn zero_w{{leaf("X0", "X", 0), leaf("X1", "X", 1), sum("s", {{"X0", 0.0}, {"X1", 1.0}})}, "s"};
  CHECK_FALSE(SpnCircuit::validate(zero_w).valid);
  const RawSpn dangling{{leaf("X0", "X", 0), product("P", {"X0", "nope"})}, "P"};
  CHECK_FALSE(SpnCircuit::validate(dangling).valid);
}

TEST_CASE("upward and downward passes on the two-term mixture") {
  const auto c = SpnCircuit::build(mixture_raw());
  const auto e = mixture_evidence();
  const auto v = upward_pass(c, e);
  CHECK(v.S[c.index_of("P1")] == 1.0);
  CHECK(v.S[c.index_of("P2")] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(v.root() == doctest::Approx(0.76).epsilon(1e-15));
  const auto a = downward_pass(c, v);
  CHECK(a.D[c.root()] == 1.0);
  CHECK(a.D[c.index_of("P1")] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(a.D[c.index_of("P2")] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(a.D[c.index_of("Y1")] == doctest::Approx(0.2).epsilon(1e-15));

  const auto b = variable_marginals(c, e, v, a);
  CHECK(b[0].full()[0] == doctest::Approx(0.6 / 0.76).epsilon(1e-14));
  CHECK(b[0].full()[0] == doctest::Approx(0.7894737).epsilon(1e-7));
  CHECK(max_error(b, enumerate_spn_marginals(c, e)) <= 1e-12);

  const auto gates = gate_report(c, v, a);
  REQUIRE(gates.size() == 1);
  CHECK(gates[0].local[0] == doctest::Approx(0.6 / 0.76).epsilon(1e-14));
  CHECK(gates[0].local[1] == doctest::Approx(0.16 / 0.76).epsilon(1e-14));
  CHECK(gates[0].visit == 1.0);

  const auto k = kkt_multipliers(c, v, a);
  CHECK(k.positive);
  bool found = false;
  for (const auto& ed : k.edges)
    if (ed.product == c.index_of("P1") && ed.position == 0) {
      CHECK(ed.mu == doctest::Approx(0.6 / 0.76).epsilon(1e-14));
      found = true;
    }
  CHECK(found);
}

TEST_CASE("trivial and hard evidence") {
  const auto c = SpnCircuit::build(mixture_raw(0.5, 0.5));
  CHECK(upward_pass(c, {{{1.0, 1.0}, {1.0, 1.0}}}).root() == doctest::Approx(1.0).epsilon(1e-15));

  const auto c2 = SpnCircuit::build(mixture_raw());
  const Evidence hard{{{1.0, 0.0}, {1.0, 0.8}}};
  CHECK(upward_pass(c2, hard).root() == doctest::Approx(0.6).epsilon(1e-15));
  const auto b = spn_marginals(c2, hard);
  CHECK(b[0].full()[1] == 0.0);
  CHECK(b[0].support == std::vector<std::size_t>{0});
  CHECK(max_error(b, enumerate_spn_marginals(c2, hard)) <= 1e-12);

  CHECK_THROWS_AS(upward_pass(c2, {{{0.0, 0.0}, {1.0, 1.0}}}), NumericError);
  CHECK_THROWS_AS(upward_pass(c2, {{{1.0, -1.0}, {1.0, 1.0}}}), DomainError);
  CHECK_THROWS_AS(upward_pass(c2, {{{1.0}, {1.0, 1.0}}}), ShapeError);
  CHECK_THROWS_AS(evidence_from_map(c2, {{"X", {1.0, 1.0}}}), ShapeError);
}

TEST_CASE("marginals match enumeration on random circuits") {
  Rng rng(51);
  for (int t = 0; t < 100; ++t) {
    const auto gen = random_spn(rng);
    const auto c = SpnCircuit::build(gen.circuit);
    const auto e = evidence_from_map(c, gen.evidence);
    const auto v = upward_pass(c, e);
    const auto a = downward_pass(c, v);
    const auto b = variable_marginals(c, e, v, a);
    CHECK(max_error(b, enumerate_spn_marginals(c, e)) <= 1e-10);
    CHECK(v.root() > 0.0);
    for (double d : a.D) CHECK(d > 0.0);

    // Euler identity: sum_t lambda dS/dlambda = S for every variable.
    const auto d = indicator_derivatives(c, e, a);
    for (std::size_t i = 0; i < c.num_variables(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d[i].size(); ++k) s += e.lambda[i][k] * d[i][k];
      CHECK(std::abs(s - v.root()) <= 1e-10 * v.root());
    }

    // Marginals are the log-derivatives of S in log lambda.
    for (std::size_t i = 0; i < c.num_variables(); ++i)
      for (std::size_t k = 0; k < e.lambda[i].size(); ++k) {
        const double h = 1e-5;
        auto up = e, dn = e;
        up.lambda[i][k] *= std::exp(h);
        dn.lambda[i][k] *= std::exp(-h);
        const double fd = (std::log(upward_pass(c, up).root()) - std::log(upward_pass(c, dn).root())) / (2.0 * h);
        CHECK(std::abs(fd - b[i].full()[k]) <= 1e-6);
      }

    // Global gates are the visit probability times the local gate.
    for (const auto& g : gate_report(c, v, a)) {
      CHECK(g.visit > 0.0);
      CHECK(g.visit <= 1.0 + 1e-12);
      for (std::size_t k = 0; k < g.local.size(); ++k) CHECK(std::abs(g.global[k] - g.visit * g.local[k]) <= 1e-12);
      if (g.node == c.root()) CHECK(g.visit == doctest::Approx(1.0).epsilon(1e-15));
    }

    const auto k = kkt_multipliers(c, v, a);
    CHECK(k.positive);
    CHECK(k.sum_identity_residual <= 1e-12);
    CHECK(k.edge_identity_residual <= 1e-12);
  }
}

TEST_CASE("factor graph of a tree circuit") {
  const auto c = SpnCircuit::build(mixture_raw());
  const auto e = mixture_evidence();
  const auto sfg = spn_to_factor_graph(c, e);
  CHECK(fg_is_tree(sfg.graph));
  const auto nb = spn_fg_node_beliefs(sfg);
  const auto vm = spn_fg_variable_marginals(c, e, sfg, nb);
  CHECK(max_error(spn_marginals(c, e), vm) <= 1e-12);
  const auto gate = spn_fg_gate(sfg, nb, c.root());
  CHECK(gate[0] == doctest::Approx(0.6 / 0.76).epsilon(1e-12));
  CHECK(gate[1] == doctest::Approx(0.16 / 0.76).epsilon(1e-12));

  const RawSpn single{{leaf("A", "X", 0)}, "A"};
  const auto cs = SpnCircuit::build(single);
  const Evidence es{{{0.3}}};
  const auto ss = spn_to_factor_graph(cs, es);
  const auto vs = spn_fg_variable_marginals(cs, es, ss, spn_fg_node_beliefs(ss));
  CHECK(vs[0][0] == doctest::Approx(1.0).epsilon(1e-15));

  const RawSpn shared{{leaf("X0", "X", 0), leaf("X1", "X", 1), leaf("Y0", "Y", 0), product("P1", {"X0", "Y0"}),
                       product("P2", {"X1", "Y0"}), sum("r", {{"P1", 0.5}, {"P2", 0.5}})},
                      "r"};
  const auto csh = SpnCircuit::build(shared);
  CHECK_FALSE(csh.is_tree());
  CHECK_THROWS_AS(spn_to_factor_graph(csh, {{{1.0, 1.0}, {1.0}}}), ValidationError);
  CHECK_THROWS_AS(spn_to_factor_graph(c, {{{1.0, 0.0}, {1.0, 1.0}}}), DomainError);
}

TEST_CASE("tree BP on circuit factor graphs matches the circuit and enumeration") {
  Rng rng(53);
  SpnGenOptions opt;
  opt.tree = true;
  for (int t = 0; t < 50; ++t) {
    const auto gen = random_spn(rng, opt);
    const auto c = SpnCircuit::build(gen.circuit);
    REQUIRE(c.is_tree());
    const auto e = evidence_from_map(c, gen.evidence);
    const auto sfg = spn_to_factor_graph(c, e);
    const auto nb = spn_fg_node_beliefs(sfg);
    const auto vm = spn_fg_variable_marginals(c, e, sfg, nb);
    CHECK(max_error(spn_marginals(c, e), vm) <= 1e-10);
    CHECK(max_error(enumerate_spn_marginals(c, e), vm) <= 1e-10);
    const auto v = upward_pass(c, e);
    for (const auto& g : gate_report(c, v, downward_pass(c, v))) {
      const auto fg_gate = spn_fg_gate(sfg, nb, g.node);
      std::vector<double> expect = g.global;
      for (double& x : expect) x /= g.visit;
      double mass = 0.0;
      for (double x : fg_gate) mass += x;
      for (double& x : expect) x *= mass;
      CHECK(max_abs_diff(fg_gate, expect) <= 1e-10);
      CHECK(std::abs(mass - g.visit) <= 1e-10);
    }
  }
}

TEST_CASE("region two-step projection") {
  const auto c = SpnCircuit::build(mixture_raw());
  const auto e = mixture_evidence();
  const auto r = region_two_step(c, e);
  CHECK(max_error(spn_marginals(c, e), r.variable_marginals) <= 1e-10);
  CHECK(r.consensus_residual <= 1e-12);
  CHECK(r.product_residual <= 1e-12);
  CHECK(r.node_marginals.size() == c.size());
  CHECK_THROWS_AS(region_two_step(c, e, 16), BudgetError);
}

TEST_CASE("Lipschitz probe") {
  const auto c = SpnCircuit::build(mixture_raw());
  const auto e = mixture_evidence();
  const auto rep = lipschitz_probe(c, e, LogBox::uniform(e, std::log(0.5), 0.0), 200, 7);
  CHECK(rep.passed());
  CHECK(rep.pairs == 100);
  CHECK(rep.l_hat > 0.0);
  CHECK(rep.worst_ratio <= 1.05);
  const auto again = lipschitz_probe(c, e, LogBox::uniform(e, std::log(0.5), 0.0), 200, 7);
  CHECK(again.l_hat == rep.l_hat);

  const auto single = SpnCircuit::build({{leaf("A", "X", 0)}, "A"});
  const Evidence es{{{0.7}}};
  const auto flat = lipschitz_probe(single, es, LogBox::uniform(es, -1.0, 1.0), 20, 1);
  CHECK(flat.passed());
  CHECK(flat.l_hat == 0.0);

  CHECK_THROWS_AS(lipschitz_probe(c, e, LogBox::uniform(e, 1.0, 0.0), 10, 1), DomainError);
  CHECK_THROWS_AS(lipschitz_probe(c, e, LogBox{{{0.0, 1.0}}}, 10, 1), ShapeError);
}

TEST_CASE("log-domain passes") {
  Rng rng(55);
  for (int t = 0; t < 50; ++t) {
    const auto gen = random_spn(rng);
    const auto c = SpnCircuit::build(gen.circuit);
    const auto e = evidence_from_map(c, gen.evidence);
    const auto v = upward_pass(c, e);
    const auto lv = log_upward_pass(c, e);
    CHECK(std::abs(std::exp(lv.root()) - v.root()) <= 1e-9 * v.root());
    CHECK(max_error(log_variable_marginals(c, e, lv, log_downward_pass(c, lv)), spn_marginals(c, e)) <= 1e-9);
  }

  // A long product whose value underflows in the linear domain.
  RawSpn deep;
  std::vector<std::string> terms;
  for (int i = 0; i < 200; ++i) {
    const std::string v = "V" + std::to_string(i);
    deep.nodes.push_back(leaf(v + "a", v, 0));
    deep.nodes.push_back(leaf(v + "b", v, 1));
    deep.nodes.push_back(sum(v + "s", {{v + "a", 0.3}, {v + "b", 0.7}}));
    terms.push_back(v + "s");
  }
  deep.nodes.push_back(product("root", terms));
  deep.root = "root";
  const auto c = SpnCircuit::build(deep);
  Evidence tiny;
  for (int i = 0; i < 200; ++i) tiny.lambda.push_back({1e-3, 1e-2});
  CHECK_THROWS_AS(upward_pass(c, tiny), NumericError);
  const auto lv = log_upward_pass(c, tiny);
  const auto b = log_variable_marginals(c, tiny, lv, log_downward_pass(c, lv));
  const double expect = 0.3e-3 / (0.3e-3 + 0.7e-2);
  for (const auto& vb : b) CHECK(vb.full()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("unrolling shared circuits") {
  Rng rng(57);
  int shared = 0;
  for (int t = 0; t < 30; ++t) {
    const auto gen = random_spn(rng);
    const auto c = SpnCircuit::build(gen.circuit);
    const auto e = evidence_from_map(c, gen.evidence);
    const auto u = unroll(c);
    CHECK(u.is_tree());
    shared += c.is_tree() ? 0 : 1;
    CHECK(std::abs(upward_pass(u, e).root() - upward_pass(c, e).root()) <= 1e-12 * upward_pass(c, e).root());
    CHECK(max_error(spn_marginals(u, e), spn_marginals(c, e)) <= 1e-12);
  }
  CHECK(shared > 0);

  const RawSpn dag{{leaf("X0", "X", 0), leaf("X1", "X", 1), leaf("Y0", "Y", 0), product("P1", {"X0", "Y0"}),
                    product("P2", {"X1", "Y0"}), sum("r", {{"P1", 0.5}, {"P2", 0.5}})},
                   "r"};
  CHECK_THROWS_AS(unroll(SpnCircuit::build(dag), 5), BudgetError);
}

TEST_CASE("batch marginals keep input order") {
  Rng rng(59);
  const auto gen = random_spn(rng);
  const auto c = SpnCircuit::build(gen.circuit);
  const auto e0 = evidence_from_map(c, gen.evidence);
  std::vector<Evidence> batch;
  for (int k = 0; k < 17; ++k) {
    auto e = e0;
    for (auto& l : e.lambda)
      for (double& x : l) x = uniform(rng, 0.1, 2.0);
    batch.push_back(std::move(e));
  }
  const auto out = batch_marginals(c, batch, 4);
  REQUIRE(out.size() == batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) CHECK(max_error(out[k], spn_marginals(c, batch[k])) == 0.0);

  batch[5].lambda[0].assign(batch[5].lambda[0].size(), 0.0);
  CHECK_THROWS_AS(batch_marginals(c, batch, 3), NumericError);
}
