#pragma once

// Architecture graph IR: nodes are blocks, edges carry channel-first feature
// maps [C, S...]. Token sequences appear on edges as maps [d, grid...].

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tabl/blocks.hpp"
#include "tabl/tensor.hpp"

namespace tabl {

class RngStream;

enum class NodeKind {
  kInput,
  kOutput,
  kConv,
  kDecoderConv,
  kViTTokenizer,
  kViTEncoder,
  kSwinStage,
  kPatchMerging,
  kLinearProjection,
  kUpsample,
  kFusion,
  kSegHead,
};

std::string_view to_string(NodeKind kind);
std::optional<NodeKind> parse_node_kind(std::string_view name);
// Number of input ports (Fusion and DecoderConv take two; port 1 of
// DecoderConv is the skip).
std::size_t port_count(NodeKind kind);
bool is_transformer(NodeKind kind);

enum class GraphMode { kStandard, kAblated };
std::string_view to_string(GraphMode mode);

using Hyper = std::map<std::string, double, std::less<>>;

struct BlockNode {
  std::string id;
  NodeKind kind = NodeKind::kConv;
  Hyper hyper;

  // Integer hyperparameter; throws ConfigError when absent and no fallback.
  std::size_t count(std::string_view name) const;
  std::size_t count(std::string_view name, std::size_t fallback) const;
  double real(std::string_view name, double fallback) const;

  bool operator==(const BlockNode&) const = default;
};

struct Edge {
  std::string src;
  std::string dst;
  std::size_t port = 0;

  bool operator==(const Edge&) const = default;
  auto operator<=>(const Edge&) const = default;
};

struct GraphSpec {
  std::string name;
  std::size_t dim = 3;
  GraphMode mode = GraphMode::kStandard;
  std::vector<BlockNode> nodes;
  std::vector<Edge> edges;
};

// Validated, immutable graph.
class ArchGraph {
 public:
  // Throws ValidationError listing offending ids on duplicate ids, dangling
  // or duplicate edges, bad ports, cycles, unreachable nodes or bad hypers.
  static ArchGraph build(GraphSpec spec);

  const GraphSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }
  std::size_t dim() const { return spec_.dim; }
  GraphMode mode() const { return spec_.mode; }
  const std::vector<BlockNode>& nodes() const { return spec_.nodes; }
  const std::vector<Edge>& edges() const { return spec_.edges; }

  std::size_t index_of(std::string_view id) const;
  bool contains(std::string_view id) const;
  const BlockNode& node(std::string_view id) const { return spec_.nodes[index_of(id)]; }
  // Node indices in a deterministic topological order.
  const std::vector<std::size_t>& topo_order() const { return topo_; }
  // Producer node index per input port.
  const std::vector<std::size_t>& producers(std::size_t node) const { return producers_[node]; }
  std::size_t input_node() const { return input_; }
  std::size_t output_node() const { return output_; }

  // Same name, dim, mode, node set (by id) and edge set.
  bool structurally_equal(const ArchGraph& other) const;

 private:
  GraphSpec spec_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<std::size_t> topo_;
  std::vector<std::vector<std::size_t>> producers_;
  std::size_t input_ = 0;
  std::size_t output_ = 0;
};

bool operator==(const ArchGraph& a, const ArchGraph& b);

struct ShapeAnnotation {
  Shape input;
  std::vector<Shape> node_out;                          // per node index
  std::vector<Shape> edge_shape;                        // per edge index
  std::vector<std::vector<std::size_t>> downsample_in;  // per node index, per axis
  std::vector<std::string> warnings;
  Shape output;
};

// Input shape is [C, S...]. Throws NodeShapeError naming the first node whose
// shape rule fails.
ShapeAnnotation infer_shapes(const ArchGraph& g, const Shape& input_shape);

// Shapes arriving at each input port of `node`.
std::vector<Shape> port_shapes(const ArchGraph& g, const ShapeAnnotation& ann, std::size_t node);

// Parameter declarations of a node given its inferred input shapes.
ParamSpec node_param_spec(const ArchGraph& g, const ShapeAnnotation& ann, std::size_t node);
BlockKind node_block_kind(NodeKind kind);

struct ParamCount {
  std::map<std::string, std::size_t> per_node;
  std::size_t total = 0;
};

ParamCount count_params(const ArchGraph& g, const ShapeAnnotation& ann);

using GraphParams = std::map<std::string, BlockParams, std::less<>>;

// Each node draws from its own stream forked from `rng` by node id.
GraphParams init_params(const ArchGraph& g, const ShapeAnnotation& ann, const RngStream& rng);

// Runs the graph in topological order. Parameter problems throw
// NodeShapeError naming the node and the parameter.
Tensor execute(const ArchGraph& g, const ShapeAnnotation& ann, const Tensor& x,
               const GraphParams& params);

// Every trainable tensor, in a deterministic order.
std::vector<Tensor> parameter_list(const GraphParams& params);

std::string serialize(const ArchGraph& g);
// Throws ParseError (with line and column) on malformed JSON and
// ValidationError on schema or structural problems.
ArchGraph deserialize(std::string_view text);

}  // namespace tabl
