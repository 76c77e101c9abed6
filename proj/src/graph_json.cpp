#include <cmath>
#include <json.hpp>

#include "tabl/arch_ir.hpp"
#include "tabl/error.hpp"

namespace tabl {
namespace {

using Json = nlohmann::ordered_json;

Json hyper_value(double v) {
  if (v == std::floor(v) && std::abs(v) < 9.0e15) return static_cast<std::int64_t>(v);
  return v;
}

[[noreturn]] void schema(const std::string& what, const std::string& where) {
  throw ValidationError("malformed graph spec: " + what, {where});
}

const Json& field(const Json& obj, const char* name, const std::string& where) {
  const auto it = obj.find(name);
  if (it == obj.end()) schema("missing field '" + std::string(name) + "'", where);
  return *it;
}

std::string as_string(const Json& j, const std::string& where) {
  if (!j.is_string()) schema("expected a string", where);
  return j.get<std::string>();
}

std::size_t as_count(const Json& j, const std::string& where) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    schema("expected a non-negative integer", where);
  }
  return j.get<std::size_t>();
}

void line_column(std::string_view text, std::size_t byte, std::size_t& line, std::size_t& col) {
  line = 1;
  col = 1;
  const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, text.size());
  for (std::size_t i = 0; i < end; ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
}

}  // namespace

std::string serialize(const ArchGraph& g) {
  Json doc;
  doc["name"] = g.name();
  doc["dim"] = g.dim();
  doc["mode"] = std::string(to_string(g.mode()));
  Json nodes = Json::array();
  for (const auto& n : g.nodes()) {
    Json node;
    node["id"] = n.id;
    node["kind"] = std::string(to_string(n.kind));
    Json hyper = Json::object();
    for (const auto& [k, v] : n.hyper) hyper[k] = hyper_value(v);
    node["hyper"] = std::move(hyper);
    nodes.push_back(std::move(node));
  }
  doc["nodes"] = std::move(nodes);
  Json edges = Json::array();
  for (const auto& e : g.edges()) edges.push_back(Json::array({e.src, e.dst, e.port}));
  doc["edges"] = std::move(edges);
  return doc.dump(2) + "\n";
}

ArchGraph deserialize(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 0, col = 0;
    line_column(text, e.byte, line, col);
    std::string what = e.what();
    const auto pos = what.find("parse error");
    if (pos != std::string::npos) what = what.substr(pos);
    throw ParseError(what, line, col);
  }
  if (!doc.is_object()) schema("top level must be an object", "<document>");

  GraphSpec spec;
  spec.name = as_string(field(doc, "name", "<document>"), "name");
  spec.dim = as_count(field(doc, "dim", "<document>"), "dim");
  if (const auto it = doc.find("mode"); it != doc.end()) {
    const std::string mode = as_string(*it, "mode");
    if (mode == "standard") {
      spec.mode = GraphMode::kStandard;
    } else if (mode == "ablated") {
      spec.mode = GraphMode::kAblated;
    } else {
      schema("unknown mode '" + mode + "'", "mode");
    }
  }

  const Json& nodes = field(doc, "nodes", "<document>");
  if (!nodes.is_array()) schema("'nodes' must be an array", "nodes");
  std::vector<std::string> unknown;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string where = "nodes[" + std::to_string(i) + "]";
    const Json& n = nodes[i];
    if (!n.is_object()) schema("node must be an object", where);
    BlockNode node;
    node.id = as_string(field(n, "id", where), where + ".id");
    const std::string kind = as_string(field(n, "kind", where), where + ".kind");
    const auto parsed = parse_node_kind(kind);
    if (!parsed) {
      unknown.push_back(kind);
      continue;
    }
    node.kind = *parsed;
    if (const auto h = n.find("hyper"); h != n.end()) {
      if (!h->is_object()) schema("'hyper' must be an object", where + ".hyper");
      for (const auto& [k, v] : h->items()) {
        if (!v.is_number()) schema("hyperparameter must be a number", where + ".hyper." + k);
        node.hyper[k] = v.get<double>();
      }
    }
    spec.nodes.push_back(std::move(node));
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ValidationError("unknown block kind: " + list, unknown);
  }

  const Json& edges = field(doc, "edges", "<document>");
  if (!edges.is_array()) schema("'edges' must be an array", "edges");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string where = "edges[" + std::to_string(i) + "]";
    const Json& e = edges[i];
    if (!e.is_array() || e.size() != 3) schema("edge must be [src, dst, port]", where);
    spec.edges.push_back({as_string(e[0], where), as_string(e[1], where), as_count(e[2], where)});
  }
  return ArchGraph::build(std::move(spec));
}

}  // namespace tabl
