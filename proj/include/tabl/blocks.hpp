#pragma once

// Architecture blocks of the segmentation zoo and their compensatory
// replacements. Feature maps are channel-first [C, S...] with 2 or 3 spatial
// axes; token sequences are [N, d] in row-major spatial order.
//
// Each block has a parameter declaration function (`*_params`) that is the
// single source of parameter names, shapes and initializers. Static parameter
// counting, initialization and shape validation all read it.

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tabl/tensor.hpp"

namespace tabl {

class RngStream;

enum class BlockKind {
  kConvBlock,
  kDecoderBlock,
  kUpsample,
  kPatchEmbed,
  kTokenizer,
  kAttention,
  kTransformer,
  kVitEncoder,
  kSwinBlock,
  kSwinStage,
  kPatchMerging,
  kLinearProjection,
  kFusion,
  kSegHead,
};

std::string_view to_string(BlockKind kind);

enum class Init { kZeros, kOnes, kNormal };

struct ParamDecl {
  std::string name;
  Shape shape;
  Init init = Init::kZeros;
  double sd = 0.0;  // for kNormal
};

using ParamSpec = std::vector<ParamDecl>;

std::size_t param_count(const ParamSpec& spec);
// Prepends `prefix` to every name in `inner` and appends to `out`.
void append_prefixed(ParamSpec& out, std::string_view prefix, const ParamSpec& inner);

class BlockParams {
 public:
  BlockParams() = default;
  explicit BlockParams(BlockKind kind) : kind_(kind) {}

  // Fresh parameters for `spec`, drawn from `rng`; all require gradients.
  static BlockParams init(BlockKind kind, const ParamSpec& spec, RngStream& rng);

  BlockKind kind() const { return kind_; }
  void set(std::string name, Tensor value);
  bool contains(std::string_view name) const;
  // Throws ConfigError naming the missing parameter.
  const Tensor& at(std::string_view name) const;
  std::size_t param_count() const;
  const std::map<std::string, Tensor, std::less<>>& entries() const { return entries_; }

  // Throws ShapeError naming the first parameter whose presence or shape
  // disagrees with `spec`.
  void validate(const ParamSpec& spec) const;

 private:
  BlockKind kind_ = BlockKind::kConvBlock;
  std::map<std::string, Tensor, std::less<>> entries_;
};

struct TokenGrid {
  Tensor tokens;                  // [N, d]
  std::vector<std::size_t> grid;  // spatial extents, product N
  std::vector<std::size_t> patch;
};

// [C, S...] -> [N, C] and back.
Tensor map_to_tokens(const Tensor& map);
Tensor tokens_to_map(const Tensor& tokens, const std::vector<std::size_t>& grid);

std::size_t mlp_hidden(std::size_t d, double mlp_ratio);

// --- parameter declarations ---
ParamSpec patch_embed_params(std::size_t dim, std::size_t c_in, std::size_t patch, std::size_t d);
ParamSpec tokenizer_params(std::size_t dim, std::size_t c_in, std::size_t patch, std::size_t d,
                           std::size_t n_tokens);
ParamSpec attention_params(std::size_t d);
ParamSpec transformer_params(std::size_t d, double mlp_ratio);
ParamSpec vit_encoder_params(std::size_t depth, std::size_t d, double mlp_ratio);
ParamSpec swin_stage_params(std::size_t depth, std::size_t c, double mlp_ratio);
ParamSpec patch_merging_params(std::size_t dim, std::size_t c);
ParamSpec conv_block_params(std::size_t dim, std::size_t c_in, std::size_t c_out);
ParamSpec decoder_block_params(std::size_t dim, std::size_t c_in, std::size_t c_skip,
                               std::size_t c_out);
ParamSpec upsample_params(std::size_t dim, std::size_t c_in, std::size_t c_out);
// Linear map of each non-overlapping patch (patch 1: position-wise).
ParamSpec linear_projection_params(std::size_t dim, std::size_t c_in, std::size_t c_out,
                                   std::size_t patch);
ParamSpec fusion_params(std::size_t dim, std::size_t c_a, std::size_t c_b, std::size_t c_out);

// --- blocks ---

// Linear projection of flattened non-overlapping patches; no position term.
TokenGrid patch_embed(const Tensor& x, std::size_t patch, const BlockParams& params);
// patch_embed plus a learned position embedding `pos` of shape [N, d].
TokenGrid vit_tokenize(const Tensor& x, std::size_t patch, const BlockParams& params);

// Global multi-head self-attention, softmax(QK^T / sqrt(d/heads)) V per head.
TokenGrid mhsa(const TokenGrid& t, std::size_t heads, const BlockParams& params,
               std::string_view prefix = "");
// Attention over the last two axes of [..., N, d]; `mask` (if defined) is
// added to the logits and must broadcast against [..., heads, N, N].
Tensor attention(const Tensor& tokens, std::size_t heads, const BlockParams& params,
                 std::string_view prefix, const Tensor* mask);

// Pre-norm block: t + MHSA(LN(t)), then + MLP(LN(.)) with GELU.
TokenGrid transformer_block(const TokenGrid& t, std::size_t heads, double mlp_ratio,
                            const BlockParams& params, std::string_view prefix = "");

// Windowed attention over tokens [N, C] laid out on `grid`: cyclic shift by
// -shift, partition into windows, attend within windows (wrapped regions
// masked), merge and shift back.
Tensor window_attention(const Tensor& tokens, const std::vector<std::size_t>& grid,
                        const std::vector<std::size_t>& window,
                        const std::vector<std::size_t>& shift, std::size_t heads,
                        const BlockParams& params, std::string_view prefix = "");

// Swin block on a [C, S...] map; window and shift apply to every axis.
Tensor swin_block(const Tensor& x, std::size_t window, std::size_t shift, std::size_t heads,
                  double mlp_ratio, const BlockParams& params, std::string_view prefix = "");
Tensor swin_block(const Tensor& x, const std::vector<std::size_t>& window,
                  const std::vector<std::size_t>& shift, std::size_t heads, double mlp_ratio,
                  const BlockParams& params, std::string_view prefix = "");

// Cyclic shift of a [C, S...] map by `shift` positions per axis (positive
// moves content toward higher indices).
Tensor roll(const Tensor& x, const std::vector<long>& shift);

// Window extent actually used on an axis of extent `extent`.
std::size_t effective_window(std::size_t window, std::size_t extent);

Tensor vit_encoder(const Tensor& x, std::size_t depth, std::size_t heads, double mlp_ratio,
                   const BlockParams& params);
// Alternates shift 0 and window/2; axes no larger than the window are not shifted.
Tensor swin_stage(const Tensor& x, std::size_t depth, std::size_t window, std::size_t heads,
                  double mlp_ratio, const BlockParams& params);

// [C, S...] -> [2C, S/2...]: gather 2^dim neighbours, layer-norm, project (no bias).
Tensor patch_merging(const Tensor& x, const BlockParams& params);

// Two (conv 3^dim, instance norm, leaky ReLU) stages; the first conv carries `stride`.
Tensor conv_block(const Tensor& x, std::size_t stride, const BlockParams& params,
                  std::string_view prefix = "");
// Transposed-conv x2 upsample to c_out, concat skip, conv_block.
Tensor decoder_block(const Tensor& x, const Tensor& skip, const BlockParams& params);
Tensor upsample(const Tensor& x, const BlockParams& params);
Tensor linear_projection(const Tensor& x, std::size_t patch, const BlockParams& params);
// Concat along channels, 1x1 conv, instance norm, leaky ReLU.
Tensor fusion(const Tensor& a, const Tensor& b, const BlockParams& params);

}  // namespace tabl
