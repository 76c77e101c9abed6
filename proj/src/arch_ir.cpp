#include "tabl/arch_ir.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>

#include "tabl/error.hpp"
#include "tabl/rng.hpp"

namespace tabl {
namespace {

struct HyperRule {
  std::string_view name;
  bool required;
  bool integral;
};

struct KindInfo {
  NodeKind kind;
  std::string_view name;
  std::size_t ports;
  std::vector<HyperRule> hyper;
};

const std::vector<KindInfo>& kind_table() {
  static const std::vector<KindInfo> table = {
      {NodeKind::kInput, "Input", 0, {{"channels", true, true}}},
      {NodeKind::kOutput, "Output", 1, {}},
      {NodeKind::kConv, "Conv", 1, {{"out", true, true}, {"stride", false, true}}},
      {NodeKind::kDecoderConv, "DecoderConv", 2, {{"out", true, true}}},
      {NodeKind::kViTTokenizer, "ViTTokenizer", 1, {{"patch", true, true}, {"d", true, true}}},
      {NodeKind::kViTEncoder,
       "ViTEncoder",
       1,
       {{"depth", true, true}, {"heads", true, true}, {"mlp_ratio", false, false}}},
      {NodeKind::kSwinStage,
       "SwinStage",
       1,
       {{"depth", true, true},
        {"window", true, true},
        {"heads", true, true},
        {"mlp_ratio", false, false}}},
      {NodeKind::kPatchMerging, "PatchMerging", 1, {}},
      {NodeKind::kLinearProjection, "LinearProjection", 1, {{"out", true, true}, {"patch", false, true}}},
      {NodeKind::kUpsample, "Upsample", 1, {{"out", true, true}}},
      {NodeKind::kFusion, "Fusion", 2, {{"out", true, true}}},
      {NodeKind::kSegHead, "SegHead", 1, {{"classes", true, true}}},
  };
  return table;
}

const KindInfo& info(NodeKind kind) {
  for (const auto& k : kind_table()) {
    if (k.kind == kind) return k;
  }
  throw UsageError("unknown node kind");
}

constexpr double kDefaultMlpRatio = 4.0;

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += ", ";
    out += s;
  }
  return out;
}

[[noreturn]] void invalid(const std::string& what, std::vector<std::string> offenders) {
  throw ValidationError(what + ": " + join(offenders), std::move(offenders));
}

std::string edge_name(const Edge& e) { return e.src + "->" + e.dst + ":" + std::to_string(e.port); }

void validate_hyper(const BlockNode& n, std::vector<std::string>& bad) {
  const KindInfo& k = info(n.kind);
  for (const auto& [name, value] : n.hyper) {
    const auto rule = std::find_if(k.hyper.begin(), k.hyper.end(),
                                   [&](const HyperRule& r) { return r.name == name; });
    if (rule == k.hyper.end()) {
      bad.push_back(n.id + "." + name + " (unknown)");
    } else if (!std::isfinite(value) || value <= 0.0) {
      bad.push_back(n.id + "." + name + " (must be positive)");
    } else if (rule->integral && value != std::floor(value)) {
      bad.push_back(n.id + "." + name + " (must be an integer)");
    }
  }
  for (const auto& r : k.hyper) {
    if (r.required && n.hyper.find(r.name) == n.hyper.end()) {
      bad.push_back(n.id + "." + std::string(r.name) + " (missing)");
    }
  }
}

}  // namespace

std::string_view to_string(NodeKind kind) { return info(kind).name; }

std::optional<NodeKind> parse_node_kind(std::string_view name) {
  for (const auto& k : kind_table()) {
    if (k.name == name) return k.kind;
  }
  return std::nullopt;
}

std::size_t port_count(NodeKind kind) { return info(kind).ports; }

bool is_transformer(NodeKind kind) {
  return kind == NodeKind::kViTEncoder || kind == NodeKind::kSwinStage;
}

std::string_view to_string(GraphMode mode) {
  return mode == GraphMode::kAblated ? "ablated" : "standard";
}

std::size_t BlockNode::count(std::string_view name) const {
  const auto it = hyper.find(name);
  if (it == hyper.end()) {
    throw ConfigError("node '" + id + "' lacks hyperparameter '" + std::string(name) + "'");
  }
  return static_cast<std::size_t>(it->second);
}

std::size_t BlockNode::count(std::string_view name, std::size_t fallback) const {
  const auto it = hyper.find(name);
  return it == hyper.end() ? fallback : static_cast<std::size_t>(it->second);
}

double BlockNode::real(std::string_view name, double fallback) const {
  const auto it = hyper.find(name);
  return it == hyper.end() ? fallback : it->second;
}

// ---------------------------------------------------------------------------

ArchGraph ArchGraph::build(GraphSpec spec) {
  if (spec.dim != 2 && spec.dim != 3) {
    invalid("graph dimensionality must be 2 or 3", {spec.name});
  }
  ArchGraph g;
  g.spec_ = std::move(spec);
  const auto& nodes = g.spec_.nodes;
  const std::size_t n = nodes.size();

  std::vector<std::string> dup;
  for (std::size_t i = 0; i < n; ++i) {
    if (nodes[i].id.empty()) dup.push_back("<empty id>");
    if (!g.index_.emplace(nodes[i].id, i).second) dup.push_back(nodes[i].id);
  }
  if (!dup.empty()) invalid("duplicate node ids", dup);

  std::vector<std::string> inputs, outputs, bad_hyper;
  for (const auto& node : nodes) {
    if (node.kind == NodeKind::kInput) inputs.push_back(node.id);
    if (node.kind == NodeKind::kOutput) outputs.push_back(node.id);
    validate_hyper(node, bad_hyper);
  }
  if (inputs.size() != 1) invalid("graph needs exactly one Input node", inputs.empty() ? std::vector<std::string>{g.spec_.name} : inputs);
  if (outputs.size() != 1) invalid("graph needs exactly one Output node", outputs.empty() ? std::vector<std::string>{g.spec_.name} : outputs);
  if (!bad_hyper.empty()) invalid("invalid hyperparameters", bad_hyper);
  g.input_ = g.index_.at(inputs[0]);
  g.output_ = g.index_.at(outputs[0]);

  std::vector<std::string> dangling, bad_port, doubled, unfed;
  g.producers_.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) g.producers_[i].assign(port_count(nodes[i].kind), n);
  std::vector<std::vector<std::size_t>> out_edges(n);
  for (const auto& e : g.spec_.edges) {
    const auto s = g.index_.find(e.src), d = g.index_.find(e.dst);
    if (s == g.index_.end() || d == g.index_.end()) {
      dangling.push_back(edge_name(e));
      continue;
    }
    if (e.port >= g.producers_[d->second].size()) {
      bad_port.push_back(edge_name(e));
      continue;
    }
    std::size_t& slot = g.producers_[d->second][e.port];
    if (slot != n) {
      doubled.push_back(edge_name(e));
      continue;
    }
    slot = s->second;
    out_edges[s->second].push_back(d->second);
  }
  if (!dangling.empty()) invalid("dangling edges", dangling);
  if (!bad_port.empty()) invalid("edges into nonexistent ports", bad_port);
  if (!doubled.empty()) invalid("ports fed by more than one edge", doubled);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < g.producers_[i].size(); ++p) {
      if (g.producers_[i][p] == n) unfed.push_back(nodes[i].id + ":" + std::to_string(p));
    }
  }
  if (!unfed.empty()) invalid("unconnected input ports", unfed);

  // Kahn's algorithm, smallest declaration index first.
  std::vector<std::size_t> indeg(n, 0);
  for (std::size_t i = 0; i < n; ++i) indeg[i] = g.producers_[i].size();
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indeg[i] == 0) ready.push(i);
  }
  while (!ready.empty()) {
    const std::size_t u = ready.top();
    ready.pop();
    g.topo_.push_back(u);
    for (std::size_t v : out_edges[u]) {
      if (--indeg[v] == 0) ready.push(v);
    }
  }
  if (g.topo_.size() != n) {
    // Report a back edge found by DFS over the remaining nodes.
    std::vector<int> state(n, 0);
    std::vector<std::string> back;
    std::vector<std::pair<std::size_t, std::size_t>> stack;
    for (std::size_t root = 0; root < n && back.empty(); ++root) {
      if (indeg[root] == 0 || state[root] != 0) continue;
      stack.push_back({root, 0});
      state[root] = 1;
      while (!stack.empty() && back.empty()) {
        auto& [u, next] = stack.back();
        if (next < out_edges[u].size()) {
          const std::size_t v = out_edges[u][next++];
          if (state[v] == 1) {
            back.push_back(nodes[u].id + "->" + nodes[v].id);
          } else if (state[v] == 0) {
            state[v] = 1;
            stack.push_back({v, 0});
          }
        } else {
          state[u] = 2;
          stack.pop_back();
        }
      }
    }
    invalid("graph contains a cycle; back edge", back);
  }

  std::vector<bool> fwd(n, false), bwd(n, false);
  for (std::size_t u : g.topo_) {
    if (u == g.input_) fwd[u] = true;
    if (!fwd[u]) continue;
    for (std::size_t v : out_edges[u]) fwd[v] = true;
  }
  bwd[g.output_] = true;
  for (auto it = g.topo_.rbegin(); it != g.topo_.rend(); ++it) {
    for (std::size_t v : out_edges[*it]) {
      if (bwd[v]) bwd[*it] = true;
    }
  }
  std::vector<std::string> stray;
  for (std::size_t i = 0; i < n; ++i) {
    if (!fwd[i] || !bwd[i]) stray.push_back(nodes[i].id);
  }
  if (!stray.empty()) invalid("nodes not on an Input-to-Output path", stray);
  return g;
}

std::size_t ArchGraph::index_of(std::string_view id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw UsageError("no node '" + std::string(id) + "' in graph " + spec_.name);
  return it->second;
}

bool ArchGraph::contains(std::string_view id) const { return index_.find(id) != index_.end(); }

bool ArchGraph::structurally_equal(const ArchGraph& other) const {
  if (spec_.name != other.spec_.name || spec_.dim != other.spec_.dim ||
      spec_.mode != other.spec_.mode || spec_.nodes.size() != other.spec_.nodes.size()) {
    return false;
  }
  for (const auto& node : spec_.nodes) {
    if (!other.contains(node.id) || !(other.node(node.id) == node)) return false;
  }
  std::multiset<Edge> a(spec_.edges.begin(), spec_.edges.end());
  std::multiset<Edge> b(other.spec_.edges.begin(), other.spec_.edges.end());
  return a == b;
}

bool operator==(const ArchGraph& a, const ArchGraph& b) { return a.structurally_equal(b); }

// ---------------------------------------------------------------------------
// Shape inference

namespace {

Shape spatial(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

Shape with_channels(std::size_t c, const Shape& sp) {
  Shape s{c};
  s.insert(s.end(), sp.begin(), sp.end());
  return s;
}

[[noreturn]] void node_error(const BlockNode& n, const std::string& what) {
  throw NodeShapeError(n.id, std::string(to_string(n.kind)) + ": " + what);
}

Shape divide_spatial(const BlockNode& n, const Shape& in, std::size_t factor, const char* what) {
  Shape sp = spatial(in);
  for (auto& e : sp) {
    if (factor == 0 || e % factor != 0) {
      node_error(n, "input " + to_string(in) + " not divisible by " + what + " " + std::to_string(factor));
    }
    e /= factor;
  }
  return sp;
}

Shape infer_node(const BlockNode& n, const std::vector<Shape>& in) {
  switch (n.kind) {
    case NodeKind::kInput:
      return {};
    case NodeKind::kOutput:
      return in[0];
    case NodeKind::kConv:
      return with_channels(n.count("out"), divide_spatial(n, in[0], n.count("stride", 1), "stride"));
    case NodeKind::kDecoderConv: {
      Shape up = spatial(in[0]);
      for (auto& e : up) e *= 2;
      if (spatial(in[1]) != up) {
        node_error(n, "skip " + to_string(in[1]) + " does not match upsampled main input " +
                          to_string(with_channels(n.count("out"), up)) + " (from " + to_string(in[0]) + ")");
      }
      return with_channels(n.count("out"), up);
    }
    case NodeKind::kViTTokenizer:
      return with_channels(n.count("d"), divide_spatial(n, in[0], n.count("patch"), "patch"));
    case NodeKind::kViTEncoder:
      if (in[0][0] % n.count("heads") != 0) {
        node_error(n, "width " + std::to_string(in[0][0]) + " not divisible into " +
                          std::to_string(n.count("heads")) + " heads");
      }
      return in[0];
    case NodeKind::kSwinStage: {
      if (in[0][0] % n.count("heads") != 0) {
        node_error(n, "width " + std::to_string(in[0][0]) + " not divisible into " +
                          std::to_string(n.count("heads")) + " heads");
      }
      for (std::size_t e : spatial(in[0])) {
        const std::size_t w = effective_window(n.count("window"), e);
        if (e % w != 0) {
          node_error(n, "input " + to_string(in[0]) + " not divisible by window " + std::to_string(w));
        }
      }
      return in[0];
    }
    case NodeKind::kPatchMerging:
      return with_channels(2 * in[0][0], divide_spatial(n, in[0], 2, "merge factor"));
    case NodeKind::kLinearProjection:
      return with_channels(n.count("out"), divide_spatial(n, in[0], n.count("patch", 1), "patch"));
    case NodeKind::kUpsample: {
      Shape up = spatial(in[0]);
      for (auto& e : up) e *= 2;
      return with_channels(n.count("out"), up);
    }
    case NodeKind::kFusion:
      if (spatial(in[0]) != spatial(in[1])) {
        node_error(n, "operands " + to_string(in[0]) + " and " + to_string(in[1]) + " differ spatially");
      }
      return with_channels(n.count("out"), spatial(in[0]));
    case NodeKind::kSegHead:
      return with_channels(n.count("classes"), spatial(in[0]));
  }
  node_error(n, "unhandled kind");
}

}  // namespace

ShapeAnnotation infer_shapes(const ArchGraph& g, const Shape& input_shape) {
  const BlockNode& in_node = g.nodes()[g.input_node()];
  if (input_shape.size() != g.dim() + 1) {
    throw NodeShapeError(in_node.id, "input shape " + to_string(input_shape) + " has rank " +
                                         std::to_string(input_shape.size()) + ", expected " +
                                         std::to_string(g.dim() + 1) + " for a " +
                                         std::to_string(g.dim()) + "D graph");
  }
  if (input_shape[0] != in_node.count("channels")) {
    throw NodeShapeError(in_node.id, "input shape " + to_string(input_shape) + " has " +
                                         std::to_string(input_shape[0]) + " channels, expected " +
                                         std::to_string(in_node.count("channels")));
  }
  for (std::size_t e : input_shape) {
    if (e == 0) throw NodeShapeError(in_node.id, "input shape " + to_string(input_shape) + " is empty");
  }

  const std::size_t n = g.nodes().size();
  ShapeAnnotation ann;
  ann.input = input_shape;
  ann.node_out.assign(n, {});
  ann.downsample_in.assign(n, {});
  const Shape base = spatial(input_shape);
  for (std::size_t u : g.topo_order()) {
    const BlockNode& node = g.nodes()[u];
    std::vector<Shape> in;
    for (std::size_t p : g.producers(u)) in.push_back(ann.node_out[p]);
    if (node.kind == NodeKind::kInput) {
      ann.node_out[u] = input_shape;
      ann.downsample_in[u].assign(g.dim(), 1);
      continue;
    }
    const Shape sp = spatial(in[0]);
    auto& ds = ann.downsample_in[u];
    for (std::size_t a = 0; a < sp.size(); ++a) {
      if (sp[a] > base[a] || base[a] % sp[a] != 0 || !is_power_of_two(base[a] / sp[a])) {
        throw NodeShapeError(node.id, "input extent " + std::to_string(sp[a]) +
                                          " is not a power-of-two reduction of " +
                                          std::to_string(base[a]));
      }
      ds.push_back(base[a] / sp[a]);
    }
    ann.node_out[u] = infer_node(node, in);
    if (node.kind == NodeKind::kViTEncoder &&
        *std::min_element(ds.begin(), ds.end()) >= 8) {
      ann.warnings.push_back("ViTEncoder '" + node.id + "' sees " + std::to_string(ds[0]) +
                             "x downsampled feature maps");
    }
  }
  for (const auto& e : g.edges()) ann.edge_shape.push_back(ann.node_out[g.index_of(e.src)]);
  ann.output = ann.node_out[g.output_node()];
  return ann;
}

std::vector<Shape> port_shapes(const ArchGraph& g, const ShapeAnnotation& ann, std::size_t node) {
  std::vector<Shape> out;
  for (std::size_t p : g.producers(node)) out.push_back(ann.node_out[p]);
  return out;
}

BlockKind node_block_kind(NodeKind kind) {
  switch (kind) {
    case NodeKind::kConv: return BlockKind::kConvBlock;
    case NodeKind::kDecoderConv: return BlockKind::kDecoderBlock;
    case NodeKind::kViTTokenizer: return BlockKind::kTokenizer;
    case NodeKind::kViTEncoder: return BlockKind::kVitEncoder;
    case NodeKind::kSwinStage: return BlockKind::kSwinStage;
    case NodeKind::kPatchMerging: return BlockKind::kPatchMerging;
    case NodeKind::kLinearProjection: return BlockKind::kLinearProjection;
    case NodeKind::kUpsample: return BlockKind::kUpsample;
    case NodeKind::kFusion: return BlockKind::kFusion;
    case NodeKind::kSegHead: return BlockKind::kSegHead;
    case NodeKind::kInput:
    case NodeKind::kOutput: break;
  }
  return BlockKind::kLinearProjection;
}

ParamSpec node_param_spec(const ArchGraph& g, const ShapeAnnotation& ann, std::size_t node) {
  const BlockNode& n = g.nodes()[node];
  const std::size_t dim = g.dim();
  const std::vector<Shape> in = port_shapes(g, ann, node);
  const Shape& out = ann.node_out[node];
  switch (n.kind) {
    case NodeKind::kInput:
    case NodeKind::kOutput:
      return {};
    case NodeKind::kConv:
      return conv_block_params(dim, in[0][0], out[0]);
    case NodeKind::kDecoderConv:
      return decoder_block_params(dim, in[0][0], in[1][0], out[0]);
    case NodeKind::kViTTokenizer:
      return tokenizer_params(dim, in[0][0], n.count("patch"), out[0], numel(spatial(out)));
    case NodeKind::kViTEncoder:
      return vit_encoder_params(n.count("depth"), in[0][0], n.real("mlp_ratio", kDefaultMlpRatio));
    case NodeKind::kSwinStage:
      return swin_stage_params(n.count("depth"), in[0][0], n.real("mlp_ratio", kDefaultMlpRatio));
    case NodeKind::kPatchMerging:
      return patch_merging_params(dim, in[0][0]);
    case NodeKind::kLinearProjection:
      return linear_projection_params(dim, in[0][0], out[0], n.count("patch", 1));
    case NodeKind::kUpsample:
      return upsample_params(dim, in[0][0], out[0]);
    case NodeKind::kFusion:
      return fusion_params(dim, in[0][0], in[1][0], out[0]);
    case NodeKind::kSegHead:
      return linear_projection_params(dim, in[0][0], out[0], 1);
  }
  return {};
}

ParamCount count_params(const ArchGraph& g, const ShapeAnnotation& ann) {
  ParamCount c;
  for (std::size_t u = 0; u < g.nodes().size(); ++u) {
    const std::size_t k = param_count(node_param_spec(g, ann, u));
    c.per_node[g.nodes()[u].id] = k;
    c.total += k;
  }
  return c;
}

GraphParams init_params(const ArchGraph& g, const ShapeAnnotation& ann, const RngStream& rng) {
  GraphParams params;
  for (std::size_t u = 0; u < g.nodes().size(); ++u) {
    const BlockNode& n = g.nodes()[u];
    const ParamSpec spec = node_param_spec(g, ann, u);
    if (spec.empty()) continue;
    RngStream stream = rng.fork(hash_name(n.id.data(), n.id.size()));
    params.emplace(n.id, BlockParams::init(node_block_kind(n.kind), spec, stream));
  }
  return params;
}

Tensor execute(const ArchGraph& g, const ShapeAnnotation& ann, const Tensor& x,
               const GraphParams& params) {
  if (x.shape() != ann.input) {
    throw NodeShapeError(g.nodes()[g.input_node()].id, "input tensor " + to_string(x.shape()) +
                                                           " differs from annotated " +
                                                           to_string(ann.input));
  }
  const std::size_t n = g.nodes().size();
  std::vector<Tensor> value(n);
  static const BlockParams kNone;
  for (std::size_t u : g.topo_order()) {
    const BlockNode& node = g.nodes()[u];
    std::vector<Tensor> in;
    for (std::size_t p : g.producers(u)) in.push_back(value[p]);

    const ParamSpec spec = node_param_spec(g, ann, u);
    const BlockParams* p = &kNone;
    if (!spec.empty()) {
      const auto it = params.find(node.id);
      if (it == params.end()) throw NodeShapeError(node.id, "no parameters supplied");
      try {
        it->second.validate(spec);
      } catch (const ShapeError& e) {
        throw NodeShapeError(node.id, e.what());
      }
      p = &it->second;
    }

    Tensor y;
    switch (node.kind) {
      case NodeKind::kInput: y = x; break;
      case NodeKind::kOutput: y = in[0]; break;
      case NodeKind::kConv: y = conv_block(in[0], node.count("stride", 1), *p); break;
      case NodeKind::kDecoderConv: y = decoder_block(in[0], in[1], *p); break;
      case NodeKind::kViTTokenizer: {
        const TokenGrid t = vit_tokenize(in[0], node.count("patch"), *p);
        y = tokens_to_map(t.tokens, t.grid);
        break;
      }
      case NodeKind::kViTEncoder:
        y = vit_encoder(in[0], node.count("depth"), node.count("heads"),
                        node.real("mlp_ratio", kDefaultMlpRatio), *p);
        break;
      case NodeKind::kSwinStage:
        y = swin_stage(in[0], node.count("depth"), node.count("window"), node.count("heads"),
                       node.real("mlp_ratio", kDefaultMlpRatio), *p);
        break;
      case NodeKind::kPatchMerging: y = patch_merging(in[0], *p); break;
      case NodeKind::kLinearProjection: y = linear_projection(in[0], node.count("patch", 1), *p); break;
      case NodeKind::kUpsample: y = upsample(in[0], *p); break;
      case NodeKind::kFusion: y = fusion(in[0], in[1], *p); break;
      case NodeKind::kSegHead: y = linear_projection(in[0], 1, *p); break;
    }
    if (y.shape() != ann.node_out[u]) {
      throw NodeShapeError(node.id, "produced " + to_string(y.shape()) + ", annotated " +
                                        to_string(ann.node_out[u]));
    }
    value[u] = std::move(y);
  }
  return value[g.output_node()];
}

std::vector<Tensor> parameter_list(const GraphParams& params) {
  std::vector<Tensor> out;
  for (const auto& [id, block] : params) {
    for (const auto& [name, t] : block.entries()) out.push_back(t);
  }
  return out;
}

}  // namespace tabl
