#pragma once

// Transformer ablation: delete ViT encoders and Swin stages and substitute
// shape-compatible linear operators.

#include <string>
#include <vector>

#include "tabl/arch_ir.hpp"

namespace tabl {

// ViTEncoder and SwinStage ids in topological order.
std::vector<std::string> find_transformer_nodes(const ArchGraph& g);

struct AblationRewrite {
  NodeKind target = NodeKind::kViTEncoder;
  std::string replacement;  // "LinearProjectionTokenizer" or "LinearProjection+PatchMerging"
  std::vector<std::string> matched_nodes;
};

std::vector<AblationRewrite> plan_rewrites(const ArchGraph& g);

// Returns a new graph:
//  - each ViTEncoder is removed and its consumers read from the encoder's
//    producer (chains collapse to the first non-encoder producer);
//  - a ViTTokenizer feeding an encoder (directly or through Fusion nodes)
//    becomes LinearProjection(out=d, patch=p), without position embedding;
//  - each SwinStage becomes a position-wise LinearProjection of equal width;
//    PatchMerging nodes are untouched.
// Replacement nodes take the id `<old>_lin`. A graph with nothing to rewrite
// is returned unchanged, mode included.
ArchGraph ablate(const ArchGraph& g);

struct CompatEntry {
  std::string node;  // consumer id in the ablated graph
  std::string port;  // "in:<k>" or "out"
  Shape original;
  Shape ablated;
};

struct CompatReport {
  std::vector<std::string> rewrite_sites;
  std::vector<CompatEntry> entries;
  bool ok = true;
  std::string first_mismatch;  // empty when ok
};

// Compares shapes of every port downstream of a rewrite site.
CompatReport verify_compat(const ArchGraph& original, const ArchGraph& ablated,
                           const Shape& input_shape);

std::string format_report(const CompatReport& report);

// count_params(ablated) / count_params(original); throws UsageError when the
// original has no parameters.
double param_ratio(const ArchGraph& original, const ArchGraph& ablated, const Shape& input_shape);

}  // namespace tabl
