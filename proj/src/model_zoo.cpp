#include "tabl/model_zoo.hpp"

#include <algorithm>
#include <functional>

#include "tabl/error.hpp"

namespace tabl {
namespace {

class Builder {
 public:
  Builder(std::string name, std::size_t dim, Scale scale) : scale_(scale) {
    spec_.name = std::move(name);
    spec_.dim = dim;
  }

  bool paper() const { return scale_ == Scale::kPaper; }
  std::size_t width(std::size_t c) const { return paper() ? c : std::max<std::size_t>(1, c / 4); }
  std::size_t depth(std::size_t d) const { return paper() ? d : std::max<std::size_t>(1, d / 2); }
  std::size_t heads(std::size_t h, std::size_t channels) const {
    std::size_t k = paper() ? h : std::max<std::size_t>(1, h / 4);
    while (channels % k != 0) --k;
    return k;
  }

  std::string add(const std::string& id, NodeKind kind, Hyper hyper,
                  const std::vector<std::string>& inputs) {
    spec_.nodes.push_back({id, kind, std::move(hyper)});
    for (std::size_t p = 0; p < inputs.size(); ++p) spec_.edges.push_back({inputs[p], id, p});
    return id;
  }

  std::string input() { return add("input", NodeKind::kInput, {{"channels", 1}}, {}); }
  std::string conv(const std::string& id, const std::string& x, std::size_t out, std::size_t stride = 1) {
    Hyper h{{"out", double(out)}};
    if (stride != 1) h["stride"] = double(stride);
    return add(id, NodeKind::kConv, std::move(h), {x});
  }
  std::string decoder(const std::string& id, const std::string& x, const std::string& skip, std::size_t out) {
    return add(id, NodeKind::kDecoderConv, {{"out", double(out)}}, {x, skip});
  }
  std::string upsample(const std::string& id, const std::string& x, std::size_t out) {
    return add(id, NodeKind::kUpsample, {{"out", double(out)}}, {x});
  }
  std::string tokenizer(const std::string& id, const std::string& x, std::size_t patch, std::size_t d) {
    return add(id, NodeKind::kViTTokenizer, {{"patch", double(patch)}, {"d", double(d)}}, {x});
  }
  std::string vit(const std::string& id, const std::string& x, std::size_t depth, std::size_t heads,
                  double mlp_ratio = 4.0) {
    return add(id, NodeKind::kViTEncoder,
               {{"depth", double(depth)}, {"heads", double(heads)}, {"mlp_ratio", mlp_ratio}}, {x});
  }
  std::string swin(const std::string& id, const std::string& x, std::size_t depth, std::size_t window,
                   std::size_t heads) {
    return add(id, NodeKind::kSwinStage,
               {{"depth", double(depth)}, {"window", double(window)}, {"heads", double(heads)}, {"mlp_ratio", 4.0}},
               {x});
  }
  std::string merge(const std::string& id, const std::string& x) {
    return add(id, NodeKind::kPatchMerging, {}, {x});
  }
  std::string project(const std::string& id, const std::string& x, std::size_t out, std::size_t patch) {
    return add(id, NodeKind::kLinearProjection, {{"out", double(out)}, {"patch", double(patch)}}, {x});
  }
  std::string fuse(const std::string& id, const std::string& a, const std::string& b, std::size_t out) {
    return add(id, NodeKind::kFusion, {{"out", double(out)}}, {a, b});
  }

  ArchGraph finish(const std::string& x) {
    add("head", NodeKind::kSegHead, {{"classes", double(zoo_classes(scale_))}}, {x});
    add("output", NodeKind::kOutput, {}, {"head"});
    return ArchGraph::build(std::move(spec_));
  }

 private:
  Scale scale_;
  GraphSpec spec_;
};

std::string level(const char* prefix, std::size_t i) { return prefix + std::to_string(i); }

// ViT-B encoder split into taps; conv skips rebuilt from intermediate taps by
// transposed-conv chains; conv decoder.
ArchGraph unetr(Scale scale) {
  Builder b("unetr", 3, scale);
  const std::size_t patch = b.paper() ? 16 : 8;
  std::size_t levels = 0;
  while ((std::size_t{1} << levels) < patch) ++levels;
  const std::size_t d = b.width(768), f = b.width(16);
  const std::size_t heads = b.heads(12, d), depth = b.depth(12 / levels);

  const std::string in = b.input();
  std::vector<std::string> skips{b.conv("enc1", in, f)};
  std::string x = b.tokenizer("tokenizer", in, patch, d);
  std::vector<std::string> taps;
  for (std::size_t i = 1; i <= levels; ++i) {
    x = b.vit(level("vit", i), x, depth, heads);
    taps.push_back(x);
  }
  for (std::size_t i = 1; i < levels; ++i) {
    const std::size_t c = f << i;
    std::string s = taps[i - 1];
    for (std::size_t j = 0; j < levels - i; ++j) {
      const std::string base = level("enc", i + 1) + "." + std::to_string(j);
      s = b.upsample(base + ".up", s, c);
      s = b.conv(base + ".conv", s, c);
    }
    skips.push_back(s);
  }
  x = taps.back();
  for (std::size_t i = levels; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], f << i);
  return b.finish(x);
}

// Swin encoder over a patch-2 embedding, conv skips on every resolution.
ArchGraph swinunetr(Scale scale) {
  Builder b("swinunetr", 3, scale);
  const std::size_t fs = b.width(24);
  const std::size_t window = b.paper() ? 8 : 4;
  const std::size_t depth = b.depth(2);
  const std::size_t base_heads[4] = {3, 6, 12, 24};

  const std::string in = b.input();
  const std::string enc1 = b.conv("enc1", in, fs);
  const std::string embed = b.project("patch_embed", in, fs, 2);
  const std::string enc2 = b.conv("enc2", embed, fs);
  std::vector<std::string> hidden;
  std::string x = embed;
  std::size_t c = fs;
  for (std::size_t k = 0; k < 4; ++k) {
    x = b.swin(level("stage", k + 1), x, depth, window, b.heads(base_heads[k], c));
    x = b.merge(level("merge", k + 1), x);
    c *= 2;
    hidden.push_back(x);
  }
  const std::string enc3 = b.conv("enc3", hidden[0], 2 * fs);
  const std::string enc4 = b.conv("enc4", hidden[1], 4 * fs);
  const std::string enc10 = b.conv("enc10", hidden[3], 16 * fs);
  x = b.decoder("dec5", enc10, hidden[2], 8 * fs);
  x = b.decoder("dec4", x, enc4, 4 * fs);
  x = b.decoder("dec3", x, enc3, 2 * fs);
  x = b.decoder("dec2", x, enc2, fs);
  x = b.decoder("dec1", x, enc1, fs);
  return b.finish(x);
}

// Conv encoder down to 8x, ViT bottleneck, conv decoder.
ArchGraph transbts(Scale scale) {
  Builder b("transbts", 3, scale);
  const std::size_t base = b.width(16), d = b.width(512);
  const std::string in = b.input();
  std::vector<std::string> skips{b.conv("enc1", in, base)};
  std::string x = skips.back();
  for (std::size_t i = 1; i <= 3; ++i) {
    x = b.conv(level("enc", i + 1), x, base << i, 2);
    skips.push_back(x);
  }
  x = b.conv("enc5", x, base << 3);
  x = b.conv("pre_vit", x, d);
  x = b.tokenizer("tokenizer", x, 1, d);
  x = b.vit("vit", x, b.depth(4), b.heads(8, d), 8.0);
  x = b.conv("dec_bottleneck", x, base << 3);
  for (std::size_t i = 3; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], base << i);
  return b.finish(x);
}

// 2D CNN encoder to 16x, ViT-B over the bottleneck grid, cascaded upsampler.
ArchGraph transunet(Scale scale) {
  Builder b("transunet", 2, scale);
  const std::size_t d = b.width(768);
  const std::size_t widths[5] = {b.width(64), b.width(128), b.width(256), b.width(512), b.width(768)};
  const std::string in = b.input();
  std::vector<std::string> skips{b.conv("enc1", in, widths[0])};
  std::string x = skips.back();
  for (std::size_t i = 1; i < 5; ++i) {
    x = b.conv(level("enc", i + 1), x, widths[i], 2);
    if (i < 4) skips.push_back(x);
  }
  x = b.tokenizer("tokenizer", x, 1, d);
  x = b.vit("vit", x, b.depth(12), b.heads(12, d));
  x = b.conv("dec_bottleneck", x, widths[3]);
  const std::size_t outs[4] = {b.width(16), b.width(64), b.width(128), b.width(256)};
  for (std::size_t i = 4; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], outs[i]);
  return b.finish(x);
}

// Transformer and CNN branches in parallel, fused at 16x, conv decoder on CNN skips.
ArchGraph transfuse(Scale scale) {
  Builder b("transfuse", 2, scale);
  const std::size_t d = b.width(384);
  const std::size_t widths[5] = {b.width(64), b.width(128), b.width(256), b.width(512), b.width(512)};
  const std::string in = b.input();
  std::string t = b.tokenizer("tokenizer", in, 16, d);
  t = b.vit("vit", t, b.depth(8), b.heads(6, d));
  std::vector<std::string> skips{b.conv("cnn1", in, widths[0])};
  std::string x = skips.back();
  for (std::size_t i = 1; i < 5; ++i) {
    x = b.conv(level("cnn", i + 1), x, widths[i], 2);
    if (i < 4) skips.push_back(x);
  }
  x = b.fuse("bifusion", t, x, widths[4]);
  const std::size_t outs[4] = {b.width(16), b.width(32), b.width(64), b.width(128)};
  for (std::size_t i = 4; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], outs[i]);
  return b.finish(x);
}

// Conv encoder; two token scales fused into one ViT; conv decoder.
ArchGraph cotr(Scale scale) {
  Builder b("cotr", 3, scale);
  const std::size_t d = b.width(384);
  const std::size_t widths[5] = {b.width(32), b.width(64), b.width(128), b.width(256), b.width(512)};
  const std::string in = b.input();
  std::vector<std::string> skips{b.conv("enc1", in, widths[0])};
  std::string x = skips.back();
  for (std::size_t i = 1; i < 5; ++i) {
    x = b.conv(level("enc", i + 1), x, widths[i], 2);
    skips.push_back(x);
  }
  const std::string t1 = b.tokenizer("tokenizer_hi", skips[3], 2, d);
  const std::string t2 = b.tokenizer("tokenizer_lo", skips[4], 1, d);
  x = b.fuse("token_fusion", t1, t2, d);
  x = b.vit("vit", x, b.depth(6), b.heads(6, d));
  const std::size_t outs[4] = {widths[0], widths[1], widths[2], widths[3]};
  for (std::size_t i = 4; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], outs[i]);
  return b.finish(x);
}

// Swin encoder and decoder over a patch-4 embedding; skips fused after each
// expanding step.
ArchGraph nnformer(Scale scale) {
  Builder b("nnformer", 3, scale);
  const std::size_t c0 = b.width(96);
  const std::size_t window = b.paper() ? 4 : 2;
  const std::size_t depth = b.depth(2);
  const std::size_t base_heads[4] = {3, 6, 12, 24};
  const std::string in = b.input();
  std::string x = b.project("embed", in, c0, 4);
  std::vector<std::string> skips;
  std::size_t c = c0;
  for (std::size_t k = 0; k < 4; ++k) {
    x = b.swin(level("enc_stage", k + 1), x, depth, window, b.heads(base_heads[k], c));
    if (k < 3) {
      skips.push_back(x);
      x = b.merge(level("merge", k + 1), x);
      c *= 2;
    }
  }
  for (std::size_t k = 3; k-- > 0;) {
    c /= 2;
    x = b.upsample(level("expand", k + 1), x, c);
    x = b.fuse(level("skip", k + 1), x, skips[k], c);
    x = b.swin(level("dec_stage", k + 1), x, depth, window, b.heads(base_heads[k], c));
  }
  x = b.upsample("final_up1", x, c0 / 2);
  x = b.upsample("final_up2", x, c0 / 4);
  return b.finish(x);
}

// 2D UNet with transformer layers interleaved after the deeper conv stages.
ArchGraph utnet(Scale scale) {
  Builder b("utnet", 2, scale);
  const std::size_t widths[5] = {b.width(32), b.width(64), b.width(128), b.width(256), b.width(384)};
  const std::string in = b.input();
  std::vector<std::string> skips{b.conv("enc1", in, widths[0])};
  std::string x = skips.back();
  for (std::size_t i = 1; i < 5; ++i) {
    x = b.conv(level("enc", i + 1), x, widths[i], 2);
    if (i >= 2) x = b.vit(level("vit", i - 1), x, 1, b.heads(4, widths[i]));
    if (i < 4) skips.push_back(x);
  }
  const std::size_t outs[4] = {widths[0], widths[1], widths[2], widths[3]};
  for (std::size_t i = 4; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], outs[i]);
  return b.finish(x);
}

// Plain conv encoder-decoder.
ArchGraph conv_baseline(Scale scale) {
  Builder b("conv_baseline", 3, scale);
  const std::size_t widths[5] = {b.width(32), b.width(64), b.width(128), b.width(256), b.width(320)};
  const std::string in = b.input();
  std::vector<std::string> skips{b.conv("enc1", in, widths[0])};
  std::string x = skips.back();
  for (std::size_t i = 1; i < 5; ++i) {
    x = b.conv(level("enc", i + 1), x, widths[i], 2);
    if (i < 4) skips.push_back(x);
  }
  for (std::size_t i = 4; i-- > 0;) x = b.decoder(level("dec", i + 1), x, skips[i], widths[i]);
  return b.finish(x);
}

struct Entry {
  ModelInfo info;
  std::function<ArchGraph(Scale)> build;
};

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      {{"unetr", 3, "encoder_replacement"}, unetr},
      {{"transbts", 3, "bottleneck"}, transbts},
      {{"swinunetr", 3, "encoder_replacement"}, swinunetr},
      {{"cotr", 3, "interleaved"}, cotr},
      {{"nnformer", 3, "pure_transformer"}, nnformer},
      {{"transunet", 2, "bottleneck"}, transunet},
      {{"transfuse", 2, "dual_branch"}, transfuse},
      {{"utnet", 2, "interleaved"}, utnet},
      {{"conv_baseline", 3, "convolutional"}, conv_baseline},
  };
  return entries;
}

const Entry& entry(std::string_view id) {
  for (const auto& e : registry()) {
    if (e.info.id == id) return e;
  }
  throw UsageError("unknown model '" + std::string(id) + "'");
}

}  // namespace

std::string_view to_string(Scale scale) { return scale == Scale::kPaper ? "paper" : "toy"; }

Scale parse_scale(std::string_view text) {
  if (text == "paper") return Scale::kPaper;
  if (text == "toy") return Scale::kToy;
  throw UsageError("unknown scale '" + std::string(text) + "' (expected paper or toy)");
}

const std::vector<ModelInfo>& list_models() {
  static const std::vector<ModelInfo> infos = [] {
    std::vector<ModelInfo> out;
    for (const auto& e : registry()) out.push_back(e.info);
    return out;
  }();
  return infos;
}

const ModelInfo& model_info(std::string_view id) { return entry(id).info; }

Shape canonical_input(std::string_view id, Scale scale) {
  const std::size_t dim = model_info(id).dim;
  const std::size_t extent = dim == 3 ? (scale == Scale::kPaper ? 128 : 32) : (scale == Scale::kPaper ? 512 : 64);
  Shape s{1};
  for (std::size_t i = 0; i < dim; ++i) s.push_back(extent);
  return s;
}

std::size_t zoo_classes(Scale scale) { return scale == Scale::kPaper ? 3 : 2; }

ArchGraph build_model(std::string_view id, Scale scale) { return entry(id).build(scale); }

}  // namespace tabl
