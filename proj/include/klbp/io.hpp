#pragma once

// JSON input formats and a deterministic JSON writer for reports.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "klbp/comp_graph.hpp"
#include "klbp/factor_graph.hpp"
#include "klbp/posterior.hpp"
#include "klbp/spn.hpp"

namespace klbp {

using json = nlohmann::json;

inline json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw SchemaError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

//==============================================================================
// Deterministic writer: object keys sorted (json objects are ordered maps),
// doubles printed with 17 significant digits, two-space indentation.

namespace detail {

inline void format_double(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  out += s;
}

inline void write_json(std::string& out, const json& j, int indent, int depth) {
  const std::string pad(static_cast<std::size_t>(indent * (depth + 1)), ' ');
  const std::string close_pad(static_cast<std::size_t>(indent * depth), ' ');
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad + json(it.key()).dump() + ": ";
        write_json(out, it.value(), indent, depth + 1);
      }
      out += "\n" + close_pad + "}";
      return;
    }
    case json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      bool scalars = true;
      for (const auto& e : j) scalars = scalars && !e.is_structured();
      if (scalars) {
        out += "[";
        for (std::size_t i = 0; i < j.size(); ++i) {
          if (i) out += ", ";
          write_json(out, j[i], indent, depth + 1);
        }
        out += "]";
        return;
      }
      out += "[\n";
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ",\n";
        out += pad;
        write_json(out, j[i], indent, depth + 1);
      }
      out += "\n" + close_pad + "]";
      return;
    }
    case json::value_t::number_float: format_double(out, j.get<double>()); return;
    default: out += j.dump(); return;
  }
}

}  // namespace detail

inline std::string dump_stable(const json& j) {
  std::string out;
  detail::write_json(out, j, 2, 0);
  out += "\n";
  return out;
}

//==============================================================================
namespace detail {

inline const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw SchemaError(where + ": missing field '" + key + "'");
  return *it;
}

inline std::string id_string(const json& j, const std::string& where) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer() || j.is_number_unsigned()) return std::to_string(j.get<long long>());
  throw SchemaError(where + ": id must be a string or an integer");
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) throw SchemaError(where + ": expected a number");
  return j.get<double>();
}

inline std::vector<double> numbers(const json& j, const std::string& where) {
  if (!j.is_array()) throw SchemaError(where + ": expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number(j[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

inline const json& array_field(const json& j, const char* key, const std::string& where) {
  const auto& a = field(j, key, where);
  if (!a.is_array()) throw SchemaError(where + ": field '" + key + "' must be an array");
  return a;
}

}  // namespace detail

//------------------------------------------------------------------------------
// Factor graphs: {"variables":[{"id","cardinality"}],"factors":[{"id","vars","table"}]}

inline FactorGraph factor_graph_from_json(const json& j) {
  std::vector<FgVariable> vars;
  std::map<std::string, std::size_t> index;
  const auto& jv = detail::array_field(j, "variables", "factor graph");
  for (std::size_t i = 0; i < jv.size(); ++i) {
    const std::string where = "variables[" + std::to_string(i) + "]";
    const std::string id = detail::id_string(detail::field(jv[i], "id", where), where);
    const auto& card = detail::field(jv[i], "cardinality", where);
    if (!card.is_number_integer() || card.get<long long>() <= 0)
      throw SchemaError(where + ": cardinality must be a positive integer");
    if (!index.emplace(id, vars.size()).second) throw SchemaError(where + ": duplicate variable id '" + id + "'");
    vars.push_back({id, card.get<std::size_t>()});
  }
  std::vector<FgFactor> factors;
  const auto& jf = detail::array_field(j, "factors", "factor graph");
  for (std::size_t i = 0; i < jf.size(); ++i) {
    const std::string where = "factors[" + std::to_string(i) + "]";
    FgFactor f;
    f.id = detail::id_string(detail::field(jf[i], "id", where), where);
    for (const auto& v : detail::array_field(jf[i], "vars", where)) {
      const auto id = detail::id_string(v, where);
      const auto it = index.find(id);
      if (it == index.end()) throw SchemaError(where + ": unknown variable '" + id + "'");
      f.vars.push_back(it->second);
    }
    f.table = detail::numbers(detail::field(jf[i], "table", where), where + ".table");
    factors.push_back(std::move(f));
  }
  return FactorGraph(std::move(vars), std::move(factors));
}

inline json factor_graph_to_json(const FactorGraph& fg) {
  json j;
  j["variables"] = json::array();
  for (const auto& v : fg.variables()) j["variables"].push_back({{"id", v.id}, {"cardinality", v.cardinality}});
  j["factors"] = json::array();
  for (const auto& f : fg.factors()) {
    json vars = json::array();
    for (std::size_t v : f.vars) vars.push_back(fg.variables()[v].id);
    j["factors"].push_back({{"id", f.id}, {"vars", vars}, {"table", f.table}});
  }
  return j;
}

//------------------------------------------------------------------------------
// Computation graphs: {"nodes":[{"id","op","inputs","value"?}],"output":id}

inline RawCompGraph comp_graph_from_json(const json& j) {
  RawCompGraph g;
  const auto& jn = detail::array_field(j, "nodes", "graph");
  for (std::size_t i = 0; i < jn.size(); ++i) {
    const std::string where = "nodes[" + std::to_string(i) + "]";
    RawNode n;
    n.id = detail::id_string(detail::field(jn[i], "id", where), where);
    const auto& op = detail::field(jn[i], "op", where);
    if (!op.is_string()) throw SchemaError(where + ": op must be a string");
    n.op = op.get<std::string>();
    if (jn[i].contains("inputs")) {
      const auto& in = jn[i]["inputs"];
      if (!in.is_array()) throw SchemaError(where + ": inputs must be an array");
      for (const auto& x : in) n.inputs.push_back(detail::id_string(x, where));
    }
    if (jn[i].contains("value")) n.value = detail::number(jn[i]["value"], where + ".value");
    g.nodes.push_back(std::move(n));
  }
  g.output = detail::id_string(detail::field(j, "output", "graph"), "graph.output");
  return g;
}

inline json comp_graph_to_json(const RawCompGraph& g) {
  json j;
  j["nodes"] = json::array();
  for (const auto& n : g.nodes) {
    json jn = {{"id", n.id}, {"op", n.op}, {"inputs", n.inputs}};
    if (n.value) jn["value"] = *n.value;
    j["nodes"].push_back(std::move(jn));
  }
  j["output"] = g.output;
  return j;
}

//------------------------------------------------------------------------------
// Circuits: {"nodes":[{"id","kind","children":[{"id","weight"?}],"var"?,"state"?}],"root":id}

inline RawSpn spn_from_json(const json& j) {
  RawSpn c;
  const auto& jn = detail::array_field(j, "nodes", "circuit");
  for (std::size_t i = 0; i < jn.size(); ++i) {
    const std::string where = "nodes[" + std::to_string(i) + "]";
    RawSpnNode n;
    n.id = detail::id_string(detail::field(jn[i], "id", where), where);
    const auto& kind = detail::field(jn[i], "kind", where);
    if (!kind.is_string()) throw SchemaError(where + ": kind must be a string");
    n.kind = kind.get<std::string>();
    if (jn[i].contains("children")) {
      const auto& ch = jn[i]["children"];
      if (!ch.is_array()) throw SchemaError(where + ": children must be an array");
      for (std::size_t k = 0; k < ch.size(); ++k) {
        const std::string cw = where + ".children[" + std::to_string(k) + "]";
        RawSpnChild c2;
        if (ch[k].is_object()) {
          c2.id = detail::id_string(detail::field(ch[k], "id", cw), cw);
          if (ch[k].contains("weight")) c2.weight = detail::number(ch[k]["weight"], cw + ".weight");
        } else {
          c2.id = detail::id_string(ch[k], cw);
        }
        n.children.push_back(std::move(c2));
      }
    }
    if (jn[i].contains("var")) n.var = detail::id_string(jn[i]["var"], where + ".var");
    if (jn[i].contains("state")) {
      const auto& s = jn[i]["state"];
      if (!s.is_number_integer()) throw SchemaError(where + ": state must be an integer");
      n.state = s.get<long long>();
    }
    c.nodes.push_back(std::move(n));
  }
  c.root = detail::id_string(detail::field(j, "root", "circuit"), "circuit.root");
  return c;
}

inline json spn_to_json(const RawSpn& c) {
  json j;
  j["nodes"] = json::array();
  for (const auto& n : c.nodes) {
    json jn = {{"id", n.id}, {"kind", n.kind}};
    if (n.kind != "leaf") {
      jn["children"] = json::array();
      for (const auto& ch : n.children) {
        json jc = {{"id", ch.id}};
        if (ch.weight) jc["weight"] = *ch.weight;
        jn["children"].push_back(std::move(jc));
      }
    }
    if (n.var) jn["var"] = *n.var;
    if (n.state) jn["state"] = *n.state;
    j["nodes"].push_back(std::move(jn));
  }
  j["root"] = c.root;
  return j;
}

//------------------------------------------------------------------------------
// Evidence: {"lambda":{"var":[per-state reals]}}

inline std::map<std::string, std::vector<double>> evidence_from_json(const json& j) {
  const auto& l = detail::field(j, "lambda", "evidence");
  if (!l.is_object()) throw SchemaError("evidence: lambda must be an object keyed by variable");
  std::map<std::string, std::vector<double>> out;
  for (auto it = l.begin(); it != l.end(); ++it) out[it.key()] = detail::numbers(it.value(), "lambda." + it.key());
  return out;
}

inline json evidence_to_json(const SpnCircuit& c, const Evidence& e) {
  json l = json::object();
  for (std::size_t i = 0; i < c.num_variables(); ++i) l[c.variables()[i]] = e.lambda[i];
  return {{"lambda", l}};
}

//------------------------------------------------------------------------------
// Output factors as flags: exp:ALPHA | sq:TARGET:T | logistic:LABEL:T

inline OutputFactor parse_output_factor(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  auto num = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw SchemaError("output factor '" + spec + "': '" + s + "' is not a number");
    }
  };
  OutputFactor f;
  if (parts.size() == 2 && parts[0] == "exp") {
    f = ExpScale{num(parts[1])};
  } else if (parts.size() == 3 && (parts[0] == "sq" || parts[0] == "squared")) {
    f = NegLossTemp{LossKind::Squared, num(parts[1]), num(parts[2])};
  } else if (parts.size() == 3 && parts[0] == "logistic") {
    f = NegLossTemp{LossKind::Logistic, num(parts[1]), num(parts[2])};
  } else {
    throw SchemaError("output factor '" + spec + "': expected exp:ALPHA, sq:TARGET:T or logistic:LABEL:T");
  }
  try {
    check_factor(f);
  } catch (const DomainError& e) {
    throw SchemaError(e.what());
  }
  return f;
}

inline json output_factor_to_json(const OutputFactor& f) {
  if (const auto* e = std::get_if<ExpScale>(&f)) return {{"kind", "exp"}, {"alpha", e->alpha}};
  const auto& n = std::get<NegLossTemp>(f);
  if (n.kind == LossKind::Squared) return {{"kind", "squared"}, {"target", n.param}, {"T", n.temperature}};
  return {{"kind", "logistic"}, {"label", n.param}, {"T", n.temperature}};
}

inline OutputFactor output_factor_from_json(const json& j) {
  const auto& kind = detail::field(j, "kind", "likelihood");
  if (!kind.is_string()) throw SchemaError("likelihood: kind must be a string");
  const auto k = kind.get<std::string>();
  OutputFactor f;
  if (k == "exp") {
    f = ExpScale{detail::number(detail::field(j, "alpha", "likelihood"), "likelihood.alpha")};
  } else if (k == "squared") {
    f = NegLossTemp{LossKind::Squared, detail::number(detail::field(j, "target", "likelihood"), "likelihood.target"),
                    detail::number(detail::field(j, "T", "likelihood"), "likelihood.T")};
  } else if (k == "logistic") {
    f = NegLossTemp{LossKind::Logistic, detail::number(detail::field(j, "label", "likelihood"), "likelihood.label"),
                    detail::number(detail::field(j, "T", "likelihood"), "likelihood.T")};
  } else {
    throw SchemaError("likelihood: unknown kind '" + k + "'");
  }
  try {
    check_factor(f);
  } catch (const DomainError& e) {
    throw SchemaError(e.what());
  }
  return f;
}

//------------------------------------------------------------------------------
// Posterior models: {"inputs":[{"grid","prior","graph"}],"theta":[...],"likelihood":{...}}

inline PosteriorModel posterior_from_json(const json& j) {
  PosteriorModel m;
  const auto& ji = detail::array_field(j, "inputs", "model");
  for (std::size_t i = 0; i < ji.size(); ++i) {
    const std::string where = "inputs[" + std::to_string(i) + "]";
    auto grid = detail::numbers(detail::field(ji[i], "grid", where), where + ".grid");
    auto prior = detail::numbers(detail::field(ji[i], "prior", where), where + ".prior");
    DistVec p;
    try {
      p = DistVec(prior);
    } catch (const Error& e) {
      throw SchemaError(where + ".prior: " + e.what());
    }
    auto raw = comp_graph_from_json(detail::field(ji[i], "graph", where));
    m.inputs.push_back({std::move(grid), std::move(p), CompGraph::build(raw)});
  }
  m.theta = detail::numbers(detail::field(j, "theta", "model"), "model.theta");
  m.likelihood = output_factor_from_json(detail::field(j, "likelihood", "model"));
  check_model(m, m.theta);
  return m;
}

inline json posterior_to_json(const PosteriorModel& m) {
  json j;
  j["inputs"] = json::array();
  for (const auto& in : m.inputs)
    j["inputs"].push_back({{"grid", in.grid}, {"prior", in.prior.vector()}, {"graph", comp_graph_to_json(in.graph.to_raw())}});
  j["theta"] = m.theta;
  j["likelihood"] = output_factor_to_json(m.likelihood);
  return j;
}

inline json dist_to_json(const DistVec& d) {
  json outcomes = json::array();
  for (std::size_t i = 0; i < d.size(); ++i)
    outcomes.push_back(d.labels().empty() ? json(i) : json(d.labels()[i]));
  return {{"outcomes", outcomes}, {"probs", d.vector()}};
}

}  // namespace klbp
