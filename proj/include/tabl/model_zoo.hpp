#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "tabl/arch_ir.hpp"

namespace tabl {

enum class Scale { kPaper, kToy };

std::string_view to_string(Scale scale);
Scale parse_scale(std::string_view text);  // throws UsageError

struct ModelInfo {
  std::string id;
  std::size_t dim;
  std::string topology;  // encoder_replacement, bottleneck, dual_branch, interleaved,
                         // pure_transformer, convolutional
};

// All templates in a stable order.
const std::vector<ModelInfo>& list_models();
const ModelInfo& model_info(std::string_view id);  // throws UsageError

// Canonical input shape: [1, 128^3] / [1, 512^2] at paper scale,
// [1, 32^3] / [1, 64^2] at toy scale.
Shape canonical_input(std::string_view id, Scale scale);
// Output classes of the segmentation head.
std::size_t zoo_classes(Scale scale);

ArchGraph build_model(std::string_view id, Scale scale);

}  // namespace tabl
