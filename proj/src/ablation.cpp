#include "tabl/ablation.hpp"

#include <map>
#include <set>
#include <sstream>

#include "tabl/error.hpp"

namespace tabl {
namespace {

// Output channel count per node; needs only hyperparameters.
std::vector<std::size_t> infer_channels(const ArchGraph& g) {
  std::vector<std::size_t> ch(g.nodes().size(), 0);
  for (std::size_t u : g.topo_order()) {
    const BlockNode& n = g.nodes()[u];
    const auto& prod = g.producers(u);
    switch (n.kind) {
      case NodeKind::kInput: ch[u] = n.count("channels"); break;
      case NodeKind::kOutput:
      case NodeKind::kViTEncoder:
      case NodeKind::kSwinStage: ch[u] = ch[prod[0]]; break;
      case NodeKind::kPatchMerging: ch[u] = 2 * ch[prod[0]]; break;
      case NodeKind::kViTTokenizer: ch[u] = n.count("d"); break;
      case NodeKind::kSegHead: ch[u] = n.count("classes"); break;
      default: ch[u] = n.count("out"); break;
    }
  }
  return ch;
}

std::string fresh_id(const std::string& base, const std::set<std::string>& taken) {
  std::string id = base + "_lin";
  while (taken.count(id) != 0) id += "_";
  return id;
}

}  // namespace

std::vector<std::string> find_transformer_nodes(const ArchGraph& g) {
  std::vector<std::string> out;
  for (std::size_t u : g.topo_order()) {
    if (is_transformer(g.nodes()[u].kind)) out.push_back(g.nodes()[u].id);
  }
  return out;
}

std::vector<AblationRewrite> plan_rewrites(const ArchGraph& g) {
  AblationRewrite vit{NodeKind::kViTEncoder, "LinearProjectionTokenizer", {}};
  AblationRewrite swin{NodeKind::kSwinStage, "LinearProjection+PatchMerging", {}};
  for (const auto& id : find_transformer_nodes(g)) {
    (g.node(id).kind == NodeKind::kViTEncoder ? vit : swin).matched_nodes.push_back(id);
  }
  std::vector<AblationRewrite> out;
  if (!vit.matched_nodes.empty()) out.push_back(vit);
  if (!swin.matched_nodes.empty()) out.push_back(swin);
  return out;
}

ArchGraph ablate(const ArchGraph& g) {
  if (find_transformer_nodes(g).empty()) return g;

  const auto& nodes = g.nodes();
  const std::size_t n = nodes.size();
  const std::vector<std::size_t> channels = infer_channels(g);

  std::set<std::string> taken;
  for (const auto& node : nodes) taken.insert(node.id);

  // Where consumers of each node now read from (by old node index).
  std::vector<std::size_t> source(n);
  std::vector<bool> removed(n, false);
  std::vector<bool> tokenizer_to_project(n, false);
  for (std::size_t u : g.topo_order()) {
    source[u] = u;
    if (nodes[u].kind == NodeKind::kViTEncoder) {
      removed[u] = true;
      source[u] = source[g.producers(u)[0]];
      // Tokenizers reach the encoder directly or through token Fusion nodes.
      std::vector<std::size_t> stack{source[u]};
      while (!stack.empty()) {
        const std::size_t v = stack.back();
        stack.pop_back();
        if (nodes[v].kind == NodeKind::kViTTokenizer) tokenizer_to_project[v] = true;
        if (nodes[v].kind == NodeKind::kFusion) {
          for (std::size_t p : g.producers(v)) stack.push_back(p);
        }
      }
    }
  }

  std::map<std::size_t, std::string> renamed;
  GraphSpec spec;
  spec.name = g.name();
  spec.dim = g.dim();
  spec.mode = GraphMode::kAblated;
  for (std::size_t u = 0; u < n; ++u) {
    if (removed[u]) continue;
    const BlockNode& old = nodes[u];
    if (old.kind == NodeKind::kSwinStage) {
      BlockNode rep{fresh_id(old.id, taken), NodeKind::kLinearProjection,
                    {{"out", static_cast<double>(channels[u])}, {"patch", 1.0}}};
      taken.insert(rep.id);
      renamed[u] = rep.id;
      spec.nodes.push_back(std::move(rep));
    } else if (tokenizer_to_project[u]) {
      BlockNode rep{fresh_id(old.id, taken), NodeKind::kLinearProjection,
                    {{"out", static_cast<double>(old.count("d"))},
                     {"patch", static_cast<double>(old.count("patch"))}}};
      taken.insert(rep.id);
      renamed[u] = rep.id;
      spec.nodes.push_back(std::move(rep));
    } else {
      spec.nodes.push_back(old);
    }
  }
  auto id_of = [&](std::size_t u) {
    const auto it = renamed.find(u);
    return it == renamed.end() ? nodes[u].id : it->second;
  };
  for (const auto& e : g.edges()) {
    const std::size_t s = g.index_of(e.src), d = g.index_of(e.dst);
    if (removed[d]) continue;  // internal to a removed encoder chain
    spec.edges.push_back({id_of(source[s]), id_of(d), e.port});
  }
  return ArchGraph::build(std::move(spec));
}

CompatReport verify_compat(const ArchGraph& original, const ArchGraph& ablated,
                           const Shape& input_shape) {
  CompatReport report;
  const ShapeAnnotation a = infer_shapes(original, input_shape);
  ShapeAnnotation b;
  try {
    b = infer_shapes(ablated, input_shape);
  } catch (const ShapeError& e) {
    report.ok = false;
    report.first_mismatch = std::string("ablated graph fails shape inference: ") + e.what();
    return report;
  }

  // Map each ablated node to the original node it stands in for.
  std::vector<std::string> counterpart(ablated.nodes().size());
  std::vector<bool> site(ablated.nodes().size(), false);
  for (std::size_t u = 0; u < ablated.nodes().size(); ++u) {
    const std::string& id = ablated.nodes()[u].id;
    if (original.contains(id)) {
      counterpart[u] = id;
      const auto& op = original.producers(original.index_of(id));
      const auto& np = ablated.producers(u);
      for (std::size_t p = 0; p < np.size(); ++p) {
        if (p >= op.size() || original.nodes()[op[p]].id != ablated.nodes()[np[p]].id) site[u] = true;
      }
    } else {
      site[u] = true;
      if (id.size() > 4 && id.ends_with("_lin")) {
        std::string base = id.substr(0, id.size() - 4);
        while (!original.contains(base) && !base.empty() && base.back() == '_') base.pop_back();
        if (original.contains(base)) counterpart[u] = base;
      }
    }
    if (site[u]) report.rewrite_sites.push_back(id);
  }

  std::vector<bool> downstream(ablated.nodes().size(), false);
  for (std::size_t u : ablated.topo_order()) {
    if (site[u]) downstream[u] = true;
    for (std::size_t p : ablated.producers(u)) {
      if (downstream[p]) downstream[u] = true;
    }
  }

  auto record = [&](const std::string& node, const std::string& port, const Shape& o, const Shape& n) {
    report.entries.push_back({node, port, o, n});
    if (o != n && report.ok) {
      report.ok = false;
      report.first_mismatch = node + " " + port + ": " + to_string(o) + " vs " + to_string(n);
    }
  };
  for (std::size_t u : ablated.topo_order()) {
    if (!downstream[u]) continue;
    const std::string& id = ablated.nodes()[u].id;
    if (counterpart[u].empty()) {
      record(id, "out", Shape{}, b.node_out[u]);
      continue;
    }
    const std::size_t o = original.index_of(counterpart[u]);
    if (counterpart[u] == id) {
      const auto before = port_shapes(original, a, o);
      const auto after = port_shapes(ablated, b, u);
      for (std::size_t p = 0; p < after.size(); ++p) {
        record(id, "in:" + std::to_string(p), p < before.size() ? before[p] : Shape{}, after[p]);
      }
    }
    record(id, "out", a.node_out[o], b.node_out[u]);
  }
  return report;
}

std::string format_report(const CompatReport& report) {
  std::ostringstream os;
  os << "compat: " << (report.ok ? "ok" : "FAILED") << "\n";
  os << "rewrite sites:";
  if (report.rewrite_sites.empty()) os << " (none)";
  for (const auto& s : report.rewrite_sites) os << " " << s;
  os << "\n";
  for (const auto& e : report.entries) {
    os << "  " << e.node << " " << e.port << "  " << to_string(e.original) << " -> "
       << to_string(e.ablated) << (e.original == e.ablated ? "" : "  MISMATCH") << "\n";
  }
  if (!report.ok) os << "first mismatch: " << report.first_mismatch << "\n";
  return os.str();
}

double param_ratio(const ArchGraph& original, const ArchGraph& ablated, const Shape& input_shape) {
  const std::size_t s = count_params(original, infer_shapes(original, input_shape)).total;
  if (s == 0) throw UsageError("parameter ratio undefined: original graph has no parameters");
  const std::size_t abl = count_params(ablated, infer_shapes(ablated, input_shape)).total;
  return static_cast<double>(abl) / static_cast<double>(s);
}

}  // namespace tabl
