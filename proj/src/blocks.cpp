#include "tabl/blocks.hpp"

#include <cmath>
#include <numeric>

#include "tabl/error.hpp"
#include "tabl/ops.hpp"
#include "tabl/rng.hpp"

namespace tabl {
namespace {

Shape spatial_of(const Tensor& map) { return Shape(map.shape().begin() + 1, map.shape().end()); }

Shape kernel_shape(std::size_t a, std::size_t b, std::size_t dim, std::size_t k) {
  Shape s{a, b};
  for (std::size_t i = 0; i < dim; ++i) s.push_back(k);
  return s;
}

std::size_t ipow(std::size_t base, std::size_t exp) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < exp; ++i) r *= base;
  return r;
}

ParamDecl normal(std::string name, Shape shape, double fan_in, double gain = 1.0) {
  return {std::move(name), std::move(shape), Init::kNormal, std::sqrt(gain / fan_in)};
}
ParamDecl zeros(std::string name, Shape shape) { return {std::move(name), std::move(shape), Init::kZeros, 0.0}; }
ParamDecl ones(std::string name, Shape shape) { return {std::move(name), std::move(shape), Init::kOnes, 0.0}; }

std::string key(std::string_view prefix, std::string_view name) {
  std::string k(prefix);
  k += name;
  return k;
}

Tensor linear(const Tensor& x, const BlockParams& p, std::string_view prefix) {
  return add(matmul(x, p.at(key(prefix, "w"))), p.at(key(prefix, "b")));
}

std::vector<std::size_t> row_major_strides(const std::vector<std::size_t>& extents) {
  std::vector<std::size_t> s(extents.size(), 1);
  for (std::size_t i = extents.size(); i-- > 1;) s[i - 1] = s[i] * extents[i];
  return s;
}

void check_map(const Tensor& x, const char* op) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected a [C, S...] map with 2 or 3 spatial axes, got " +
                     to_string(x.shape()));
  }
}

}  // namespace

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::kConvBlock: return "conv_block";
    case BlockKind::kDecoderBlock: return "decoder_block";
    case BlockKind::kUpsample: return "upsample";
    case BlockKind::kPatchEmbed: return "patch_embed";
    case BlockKind::kTokenizer: return "tokenizer";
    case BlockKind::kAttention: return "attention";
    case BlockKind::kTransformer: return "transformer";
    case BlockKind::kVitEncoder: return "vit_encoder";
    case BlockKind::kSwinBlock: return "swin_block";
    case BlockKind::kSwinStage: return "swin_stage";
    case BlockKind::kPatchMerging: return "patch_merging";
    case BlockKind::kLinearProjection: return "linear_projection";
    case BlockKind::kFusion: return "fusion";
    case BlockKind::kSegHead: return "seg_head";
  }
  return "unknown";
}

std::size_t param_count(const ParamSpec& spec) {
  std::size_t n = 0;
  for (const auto& d : spec) n += numel(d.shape);
  return n;
}

void append_prefixed(ParamSpec& out, std::string_view prefix, const ParamSpec& inner) {
  for (const auto& d : inner) {
    ParamDecl copy = d;
    copy.name = key(prefix, d.name);
    out.push_back(std::move(copy));
  }
}

BlockParams BlockParams::init(BlockKind kind, const ParamSpec& spec, RngStream& rng) {
  BlockParams p(kind);
  for (const auto& d : spec) {
    Tensor t;
    switch (d.init) {
      case Init::kZeros: t = Tensor::zeros(d.shape, true); break;
      case Init::kOnes: t = Tensor::full(d.shape, 1.0, true); break;
      case Init::kNormal: t = Tensor::randn(d.shape, rng, d.sd, true); break;
    }
    p.set(d.name, std::move(t));
  }
  return p;
}

void BlockParams::set(std::string name, Tensor value) { entries_[std::move(name)] = std::move(value); }

bool BlockParams::contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

const Tensor& BlockParams::at(std::string_view name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ConfigError("missing parameter '" + std::string(name) + "' for " +
                      std::string(to_string(kind_)));
  }
  return it->second;
}

std::size_t BlockParams::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void BlockParams::validate(const ParamSpec& spec) const {
  for (const auto& d : spec) {
    const auto it = entries_.find(d.name);
    if (it == entries_.end()) throw ShapeError("parameter '" + d.name + "' is missing");
    if (it->second.shape() != d.shape) {
      throw ShapeError("parameter '" + d.name + "' has shape " + to_string(it->second.shape()) +
                       ", expected " + to_string(d.shape));
    }
  }
  if (entries_.size() != spec.size()) {
    for (const auto& [name, t] : entries_) {
      bool declared = false;
      for (const auto& d : spec) declared = declared || d.name == name;
      if (!declared) throw ShapeError("unexpected parameter '" + name + "'");
    }
  }
}

Tensor map_to_tokens(const Tensor& map) {
  const std::size_t c = map.shape()[0];
  return transpose(reshape(map, {c, map.numel() / c}));
}

Tensor tokens_to_map(const Tensor& tokens, const std::vector<std::size_t>& grid) {
  if (tokens.rank() != 2 || tokens.shape()[0] != numel(grid)) {
    throw ShapeError("tokens " + to_string(tokens.shape()) + " do not fill grid " + to_string(grid));
  }
  Shape shape{tokens.shape()[1]};
  shape.insert(shape.end(), grid.begin(), grid.end());
  return reshape(transpose(tokens), shape);
}

std::size_t mlp_hidden(std::size_t d, double mlp_ratio) {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(d)));
}

// ---------------------------------------------------------------------------
// Parameter declarations

ParamSpec patch_embed_params(std::size_t dim, std::size_t c_in, std::size_t patch, std::size_t d) {
  const double fan_in = static_cast<double>(c_in * ipow(patch, dim));
  return {normal("proj.w", kernel_shape(d, c_in, dim, patch), fan_in), zeros("proj.b", {d})};
}

ParamSpec tokenizer_params(std::size_t dim, std::size_t c_in, std::size_t patch, std::size_t d,
                           std::size_t n_tokens) {
  ParamSpec spec = patch_embed_params(dim, c_in, patch, d);
  spec.push_back({"pos", {n_tokens, d}, Init::kNormal, 0.02});
  return spec;
}

ParamSpec attention_params(std::size_t d) {
  const double f = static_cast<double>(d);
  return {normal("q.w", {d, d}, f), zeros("q.b", {d}), normal("k.w", {d, d}, f), zeros("k.b", {d}),
          normal("v.w", {d, d}, f), zeros("v.b", {d}), normal("o.w", {d, d}, f), zeros("o.b", {d})};
}

ParamSpec transformer_params(std::size_t d, double mlp_ratio) {
  const std::size_t h = mlp_hidden(d, mlp_ratio);
  ParamSpec spec{ones("ln1.g", {d}), zeros("ln1.b", {d})};
  append_prefixed(spec, "attn.", attention_params(d));
  spec.push_back(ones("ln2.g", {d}));
  spec.push_back(zeros("ln2.b", {d}));
  spec.push_back(normal("fc1.w", {d, h}, static_cast<double>(d), 2.0));
  spec.push_back(zeros("fc1.b", {h}));
  spec.push_back(normal("fc2.w", {h, d}, static_cast<double>(h)));
  spec.push_back(zeros("fc2.b", {d}));
  return spec;
}

ParamSpec vit_encoder_params(std::size_t depth, std::size_t d, double mlp_ratio) {
  ParamSpec spec;
  const ParamSpec layer = transformer_params(d, mlp_ratio);
  for (std::size_t i = 0; i < depth; ++i) {
    append_prefixed(spec, "layers." + std::to_string(i) + ".", layer);
  }
  return spec;
}

ParamSpec swin_stage_params(std::size_t depth, std::size_t c, double mlp_ratio) {
  return vit_encoder_params(depth, c, mlp_ratio);
}

ParamSpec patch_merging_params(std::size_t dim, std::size_t c) {
  const std::size_t wide = ipow(2, dim) * c;
  return {ones("norm.g", {wide}), zeros("norm.b", {wide}),
          normal("reduction.w", {wide, 2 * c}, static_cast<double>(wide))};
}

ParamSpec conv_block_params(std::size_t dim, std::size_t c_in, std::size_t c_out) {
  const std::size_t taps = ipow(3, dim);
  return {normal("conv1.w", kernel_shape(c_out, c_in, dim, 3), static_cast<double>(c_in * taps), 2.0),
          zeros("conv1.b", {c_out}),
          ones("norm1.g", {c_out}),
          zeros("norm1.b", {c_out}),
          normal("conv2.w", kernel_shape(c_out, c_out, dim, 3), static_cast<double>(c_out * taps), 2.0),
          zeros("conv2.b", {c_out}),
          ones("norm2.g", {c_out}),
          zeros("norm2.b", {c_out})};
}

ParamSpec upsample_params(std::size_t dim, std::size_t c_in, std::size_t c_out) {
  return {normal("up.w", kernel_shape(c_in, c_out, dim, 2), static_cast<double>(c_in)),
          zeros("up.b", {c_out})};
}

ParamSpec decoder_block_params(std::size_t dim, std::size_t c_in, std::size_t c_skip,
                               std::size_t c_out) {
  ParamSpec spec = upsample_params(dim, c_in, c_out);
  append_prefixed(spec, "block.", conv_block_params(dim, c_out + c_skip, c_out));
  return spec;
}

ParamSpec linear_projection_params(std::size_t dim, std::size_t c_in, std::size_t c_out,
                                   std::size_t patch) {
  return {normal("proj.w", kernel_shape(c_out, c_in, dim, patch),
                 static_cast<double>(c_in * ipow(patch, dim))),
          zeros("proj.b", {c_out})};
}

ParamSpec fusion_params(std::size_t dim, std::size_t c_a, std::size_t c_b, std::size_t c_out) {
  return {normal("proj.w", kernel_shape(c_out, c_a + c_b, dim, 1), static_cast<double>(c_a + c_b), 2.0),
          zeros("proj.b", {c_out}), ones("norm.g", {c_out}), zeros("norm.b", {c_out})};
}

// ---------------------------------------------------------------------------
// Blocks

TokenGrid patch_embed(const Tensor& x, std::size_t patch, const BlockParams& params) {
  check_map(x, "patch_embed");
  const std::size_t dim = x.rank() - 1;
  if (patch == 0) throw ConfigError("patch_embed: patch size must be positive");
  for (std::size_t i = 0; i < dim; ++i) {
    if (x.shape()[1 + i] % patch != 0) {
      throw ShapeError("patch_embed: extent " + std::to_string(x.shape()[1 + i]) +
                       " not divisible by patch " + std::to_string(patch));
    }
  }
  const std::vector<std::size_t> stride(dim, patch), pad(dim, 0);
  const Tensor map = conv_nd(x, params.at("proj.w"), params.at("proj.b"), stride, pad);
  return {map_to_tokens(map), spatial_of(map), std::vector<std::size_t>(dim, patch)};
}

TokenGrid vit_tokenize(const Tensor& x, std::size_t patch, const BlockParams& params) {
  TokenGrid t = patch_embed(x, patch, params);
  t.tokens = add(t.tokens, params.at("pos"));
  return t;
}

Tensor attention(const Tensor& tokens, std::size_t heads, const BlockParams& params,
                 std::string_view prefix, const Tensor* mask) {
  if (tokens.rank() < 2) throw ShapeError("attention: tokens must be [..., N, d]");
  const std::size_t d = tokens.shape().back();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible into " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const std::size_t n = tokens.shape()[tokens.rank() - 2];
  const Shape lead(tokens.shape().begin(), tokens.shape().end() - 2);
  const std::size_t r = lead.size();

  Shape split = lead;
  split.insert(split.end(), {n, heads, dh});
  // [..., N, h, dh] -> [..., h, N, dh]
  std::vector<std::size_t> to_heads(r + 3);
  std::iota(to_heads.begin(), to_heads.end(), 0);
  std::swap(to_heads[r], to_heads[r + 1]);

  auto project = [&](std::string_view which) {
    const Tensor y = linear(tokens, params, key(prefix, std::string(which) + "."));
    return permute(reshape(y, split), to_heads);
  };
  const Tensor q = project("q");
  const Tensor k = project("k");
  const Tensor v = project("v");
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask != nullptr) logits = add(logits, *mask);
  const Tensor mixed = matmul(softmax(logits, logits.rank() - 1), v);
  Shape merged = lead;
  merged.insert(merged.end(), {n, d});
  const Tensor out = reshape(permute(mixed, to_heads), merged);
  return linear(out, params, key(prefix, "o."));
}

TokenGrid mhsa(const TokenGrid& t, std::size_t heads, const BlockParams& params,
               std::string_view prefix) {
  return {attention(t.tokens, heads, params, prefix, nullptr), t.grid, t.patch};
}

namespace {

Tensor mlp(const Tensor& x, const BlockParams& params, std::string_view prefix) {
  return linear(gelu(linear(x, params, key(prefix, "fc1."))), params, key(prefix, "fc2."));
}

Tensor ln(const Tensor& x, const BlockParams& params, std::string_view prefix, const char* which) {
  const std::string base = key(prefix, which);
  return layer_norm(x, params.at(base + ".g"), params.at(base + ".b"));
}

}  // namespace

TokenGrid transformer_block(const TokenGrid& t, std::size_t heads, double mlp_ratio,
                            const BlockParams& params, std::string_view prefix) {
  (void)mlp_ratio;  // hidden width is carried by fc1's shape
  const Tensor h = add(t.tokens, attention(ln(t.tokens, params, prefix, "ln1"), heads, params,
                                           key(prefix, "attn."), nullptr));
  const Tensor out = add(h, mlp(ln(h, params, prefix, "ln2"), params, prefix));
  return {out, t.grid, t.patch};
}

std::size_t effective_window(std::size_t window, std::size_t extent) {
  return window < extent ? window : extent;
}

Tensor roll(const Tensor& x, const std::vector<long>& shift) {
  check_map(x, "roll");
  const std::vector<std::size_t> grid(x.shape().begin() + 1, x.shape().end());
  if (shift.size() != grid.size()) throw UsageError("roll: shift rank mismatch");
  const std::size_t c = x.shape()[0];
  const std::size_t n = numel(grid);
  const auto strides = row_major_strides(grid);
  auto index = std::make_shared<std::vector<std::size_t>>(c * n);
  for (std::size_t pos = 0; pos < n; ++pos) {
    std::size_t src = 0;
    for (std::size_t a = 0; a < grid.size(); ++a) {
      const long g = static_cast<long>(grid[a]);
      const long coord = static_cast<long>((pos / strides[a]) % grid[a]);
      const long from = (((coord - shift[a]) % g) + g) % g;
      src += static_cast<std::size_t>(from) * strides[a];
    }
    for (std::size_t ch = 0; ch < c; ++ch) (*index)[ch * n + pos] = ch * n + src;
  }
  return gather(x, std::move(index), x.shape());
}

Tensor window_attention(const Tensor& tokens, const std::vector<std::size_t>& grid,
                        const std::vector<std::size_t>& window,
                        const std::vector<std::size_t>& shift, std::size_t heads,
                        const BlockParams& params, std::string_view prefix) {
  const std::size_t dim = grid.size();
  if (window.size() != dim || shift.size() != dim) throw UsageError("window_attention: rank mismatch");
  if (tokens.rank() != 2 || tokens.shape()[0] != numel(grid)) {
    throw ShapeError("window_attention: tokens " + to_string(tokens.shape()) +
                     " do not fill grid " + to_string(grid));
  }
  for (std::size_t a = 0; a < dim; ++a) {
    if (window[a] == 0 || grid[a] % window[a] != 0) {
      throw ShapeError("window_attention: extent " + std::to_string(grid[a]) +
                       " not divisible by window " + std::to_string(window[a]));
    }
    if (shift[a] != 0 && 2 * shift[a] != window[a]) {
      throw ConfigError("window_attention: shift must be 0 or window/2");
    }
  }
  const std::size_t c = tokens.shape()[1];
  std::vector<std::size_t> nwin(dim);
  for (std::size_t a = 0; a < dim; ++a) nwin[a] = grid[a] / window[a];
  const std::size_t n_windows = numel(nwin);
  const std::size_t per_window = numel(window);
  const auto gstride = row_major_strides(grid);
  const auto wstride = row_major_strides(nwin);
  const auto jstride = row_major_strides(window);

  // Token feeding slot (w, j), and its region label in the shifted frame.
  std::vector<std::size_t> source(n_windows * per_window);
  std::vector<std::size_t> region(n_windows * per_window);
  bool shifted = false;
  for (std::size_t a = 0; a < dim; ++a) shifted = shifted || shift[a] != 0;
  for (std::size_t w = 0; w < n_windows; ++w) {
    for (std::size_t j = 0; j < per_window; ++j) {
      std::size_t src = 0, label = 0;
      for (std::size_t a = 0; a < dim; ++a) {
        const std::size_t p = ((w / wstride[a]) % nwin[a]) * window[a] + (j / jstride[a]) % window[a];
        src += ((p + shift[a]) % grid[a]) * gstride[a];
        std::size_t r = 0;
        if (shift[a] != 0) r = p < grid[a] - window[a] ? 0 : (p < grid[a] - shift[a] ? 1 : 2);
        label = label * 3 + r;
      }
      source[w * per_window + j] = src;
      region[w * per_window + j] = label;
    }
  }
  auto fwd = std::make_shared<std::vector<std::size_t>>(n_windows * per_window * c);
  auto inv = std::make_shared<std::vector<std::size_t>>(n_windows * per_window * c);
  for (std::size_t s = 0; s < source.size(); ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*fwd)[s * c + ch] = source[s] * c + ch;
      (*inv)[source[s] * c + ch] = s * c + ch;
    }
  }
  const Tensor windows = gather(tokens, fwd, {n_windows, per_window, c});
  Tensor mask;
  if (shifted) {
    constexpr double kMasked = -1e9;
    std::vector<double> m(n_windows * per_window * per_window, 0.0);
    for (std::size_t w = 0; w < n_windows; ++w) {
      for (std::size_t i = 0; i < per_window; ++i) {
        for (std::size_t j = 0; j < per_window; ++j) {
          if (region[w * per_window + i] != region[w * per_window + j]) {
            m[(w * per_window + i) * per_window + j] = kMasked;
          }
        }
      }
    }
    mask = Tensor({n_windows, 1, per_window, per_window}, std::move(m));
  }
  const Tensor attended = attention(windows, heads, params, prefix, shifted ? &mask : nullptr);
  return gather(attended, inv, tokens.shape());
}

Tensor swin_block(const Tensor& x, const std::vector<std::size_t>& window,
                  const std::vector<std::size_t>& shift, std::size_t heads, double mlp_ratio,
                  const BlockParams& params, std::string_view prefix) {
  check_map(x, "swin_block");
  (void)mlp_ratio;
  const std::vector<std::size_t> grid(x.shape().begin() + 1, x.shape().end());
  const Tensor t = map_to_tokens(x);
  const Tensor h = add(t, window_attention(ln(t, params, prefix, "ln1"), grid, window, shift, heads,
                                           params, key(prefix, "attn.")));
  const Tensor out = add(h, mlp(ln(h, params, prefix, "ln2"), params, prefix));
  return tokens_to_map(out, grid);
}

Tensor swin_block(const Tensor& x, std::size_t window, std::size_t shift, std::size_t heads,
                  double mlp_ratio, const BlockParams& params, std::string_view prefix) {
  check_map(x, "swin_block");
  const std::size_t dim = x.rank() - 1;
  return swin_block(x, std::vector<std::size_t>(dim, window), std::vector<std::size_t>(dim, shift),
                    heads, mlp_ratio, params, prefix);
}

Tensor vit_encoder(const Tensor& x, std::size_t depth, std::size_t heads, double mlp_ratio,
                   const BlockParams& params) {
  check_map(x, "vit_encoder");
  TokenGrid t{map_to_tokens(x), spatial_of(x), {}};
  for (std::size_t i = 0; i < depth; ++i) {
    t = transformer_block(t, heads, mlp_ratio, params, "layers." + std::to_string(i) + ".");
  }
  return tokens_to_map(t.tokens, t.grid);
}

Tensor swin_stage(const Tensor& x, std::size_t depth, std::size_t window, std::size_t heads,
                  double mlp_ratio, const BlockParams& params) {
  check_map(x, "swin_stage");
  const Shape grid = spatial_of(x);
  std::vector<std::size_t> win(grid.size());
  for (std::size_t a = 0; a < grid.size(); ++a) win[a] = effective_window(window, grid[a]);
  Tensor h = x;
  for (std::size_t i = 0; i < depth; ++i) {
    std::vector<std::size_t> shift(grid.size(), 0);
    if (i % 2 == 1) {
      for (std::size_t a = 0; a < grid.size(); ++a) shift[a] = win[a] < grid[a] ? win[a] / 2 : 0;
    }
    h = swin_block(h, win, shift, heads, mlp_ratio, params, "layers." + std::to_string(i) + ".");
  }
  return h;
}

Tensor patch_merging(const Tensor& x, const BlockParams& params) {
  check_map(x, "patch_merging");
  const std::size_t dim = x.rank() - 1;
  const std::size_t c = x.shape()[0];
  const Shape grid = spatial_of(x);
  std::vector<std::size_t> half(dim);
  for (std::size_t a = 0; a < dim; ++a) {
    if (grid[a] % 2 != 0) {
      throw ShapeError("patch_merging: odd extent " + std::to_string(grid[a]) + " in " +
                       to_string(x.shape()));
    }
    half[a] = grid[a] / 2;
  }
  const std::size_t n_out = numel(half);
  const std::size_t offsets = ipow(2, dim);
  const auto gstride = row_major_strides(grid);
  const auto hstride = row_major_strides(half);
  const std::size_t n_in = numel(grid);
  auto index = std::make_shared<std::vector<std::size_t>>(n_out * offsets * c);
  for (std::size_t t = 0; t < n_out; ++t) {
    for (std::size_t o = 0; o < offsets; ++o) {
      std::size_t pos = 0;
      for (std::size_t a = 0; a < dim; ++a) {
        const std::size_t bit = (o >> (dim - 1 - a)) & 1U;
        pos += (2 * ((t / hstride[a]) % half[a]) + bit) * gstride[a];
      }
      for (std::size_t ch = 0; ch < c; ++ch) (*index)[(t * offsets + o) * c + ch] = ch * n_in + pos;
    }
  }
  const Tensor merged = gather(x, std::move(index), {n_out, offsets * c});
  const Tensor normed = layer_norm(merged, params.at("norm.g"), params.at("norm.b"));
  return tokens_to_map(matmul(normed, params.at("reduction.w")), half);
}

Tensor conv_block(const Tensor& x, std::size_t stride, const BlockParams& params,
                  std::string_view prefix) {
  check_map(x, "conv_block");
  const std::size_t dim = x.rank() - 1;
  const std::vector<std::size_t> s(dim, stride), one(dim, 1), pad(dim, 1);
  auto stage = [&](const Tensor& in, const char* conv, const char* norm,
                   const std::vector<std::size_t>& st) {
    const std::string c = key(prefix, conv), n = key(prefix, norm);
    const Tensor y = conv_nd(in, params.at(c + ".w"), params.at(c + ".b"), st, pad);
    return leaky_relu(instance_norm(y, params.at(n + ".g"), params.at(n + ".b")), 0.01);
  };
  return stage(stage(x, "conv1", "norm1", s), "conv2", "norm2", one);
}

Tensor upsample(const Tensor& x, const BlockParams& params) {
  check_map(x, "upsample");
  return conv_transpose_2x(x, params.at("up.w"), params.at("up.b"));
}

Tensor decoder_block(const Tensor& x, const Tensor& skip, const BlockParams& params) {
  const Tensor up = upsample(x, params);
  if (skip.rank() != up.rank() || spatial_of(skip) != spatial_of(up)) {
    throw ShapeError("decoder_block: skip " + to_string(skip.shape()) +
                     " does not match upsampled " + to_string(up.shape()));
  }
  return conv_block(concat({up, skip}, 0), 1, params, "block.");
}

Tensor linear_projection(const Tensor& x, std::size_t patch, const BlockParams& params) {
  check_map(x, "linear_projection");
  const std::size_t dim = x.rank() - 1;
  for (std::size_t a = 0; a < dim; ++a) {
    if (patch == 0 || x.shape()[1 + a] % patch != 0) {
      throw ShapeError("linear_projection: extent " + std::to_string(x.shape()[1 + a]) +
                       " not divisible by patch " + std::to_string(patch));
    }
  }
  return conv_nd(x, params.at("proj.w"), params.at("proj.b"), std::vector<std::size_t>(dim, patch),
                 std::vector<std::size_t>(dim, 0));
}

Tensor fusion(const Tensor& a, const Tensor& b, const BlockParams& params) {
  check_map(a, "fusion");
  if (b.rank() != a.rank() || spatial_of(a) != spatial_of(b)) {
    throw ShapeError("fusion: operands " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ spatially");
  }
  const std::size_t dim = a.rank() - 1;
  const Tensor y = conv_nd(concat({a, b}, 0), params.at("proj.w"), params.at("proj.b"),
                           std::vector<std::size_t>(dim, 1), std::vector<std::size_t>(dim, 0));
  return leaky_relu(instance_norm(y, params.at("norm.g"), params.at("norm.b")), 0.01);
}

}  // namespace tabl
