// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "graph_gen.hpp"
#include "metric_oracle.hpp"
#include "tabl/ablation.hpp"
#include "tabl/blocks.hpp"
#include "tabl/grad_check.hpp"
#include "tabl/harness.hpp"
#include "tabl/model_zoo.hpp"
#include "tabl/ops.hpp"

#ifndef TABL_CLI_PATH
#error "TABL_CLI_PATH must name the CLI binary"
#endif

namespace fs = std::filesystem;
using namespace tabl;

namespace {

// AC1
constexpr double kUnetrParams = 93.0e6, kUnetrParamsTol = 0.15;
constexpr double kUnetrAblParams = 7.5e6, kUnetrAblParamsTol = 0.30;
constexpr double kUnetrRatio = 0.08, kUnetrRatioTol = 0.04;
constexpr double kSwinRatio = 0.91, kSwinRatioTol = 0.08;
// AC2
constexpr double kLowRatioMax = 0.45, kHighRatioMin = 0.6;
// AC5
constexpr double kGradTol = 1e-4, kSwinGlobalTol = 1e-10, kSoftmaxTol = 1e-9;
// AC6
constexpr int kMetricPairs = 200;
constexpr std::size_t kMetricMaxExtent = 16;
// AC7
constexpr double kBaselineDscMin = 80.0;  // percent
// Runtime budgets, seconds.
constexpr double kBudget[9] = {0, 5, 10, 120, 60, 120, 120, 1800, 10};

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, x);
  return buf;
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / ("tabl_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

// Runs the CLI with stdout and stderr captured to files; returns the exit status.
int cli(const std::string& args, std::string* out = nullptr) {
  const fs::path o = scratch_dir() / "stdout.txt", e = scratch_dir() / "stderr.txt";
  const std::string cmd = std::string("\"") + TABL_CLI_PATH + "\" " + args + " > \"" + o.string() + "\" 2> \"" +
                          e.string() + "\"";
  const int status = std::system(cmd.c_str());
  if (out) {
    std::ifstream in(o);
    std::ostringstream ss;
    ss << in.rdbuf();
    *out = ss.str();
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

bool within(double value, double target, double rel) { return std::abs(value - target) <= rel * target; }

Outcome ac1() {
  Outcome o;
  std::string text;
  o.require(cli("params unetr --scale paper --json", &text) == 0, "params unetr exited non-zero");
  const auto u = nlohmann::json::parse(text);
  const double s = u.at("standard").get<double>(), a = u.at("ablated").get<double>();
  const double r = u.at("ratio").get<double>();
  o.require(within(s, kUnetrParams, kUnetrParamsTol), "unetr S " + fmt(s / 1e6) + " M");
  o.require(within(a, kUnetrAblParams, kUnetrAblParamsTol), "unetr Abl " + fmt(a / 1e6) + " M");
  o.require(std::abs(r - kUnetrRatio) <= kUnetrRatioTol, "unetr ratio " + fmt(r));
  o.require(cli("params swinunetr --scale paper --json", &text) == 0, "params swinunetr exited non-zero");
  const double sr = nlohmann::json::parse(text).at("ratio").get<double>();
  o.require(std::abs(sr - kSwinRatio) <= kSwinRatioTol, "swinunetr ratio " + fmt(sr));
  const ArchGraph g = build_model("unetr", Scale::kPaper);
  o.require(param_ratio(g, ablate(g), canonical_input("unetr", Scale::kPaper)) == r, "CLI ratio differs from library");
  if (o.pass) {
    o.detail = "unetr " + fmt(s / 1e6) + " M -> " + fmt(a / 1e6) + " M, ratio " + fmt(r, 3) + "; swinunetr ratio " +
               fmt(sr, 3);
  }
  return o;
}

Outcome ac2() {
  Outcome o;
  std::string summary;
  auto ratio = [](const std::string& id) {
    const ArchGraph g = build_model(id, Scale::kPaper);
    return param_ratio(g, ablate(g), canonical_input(id, Scale::kPaper));
  };
  for (const char* id : {"unetr", "nnformer", "transunet"}) {
    const double r = ratio(id);
    o.require(r < kLowRatioMax, std::string(id) + " ratio " + fmt(r));
    summary += std::string(id) + " " + fmt(r, 3) + " ";
  }
  for (const char* id : {"cotr", "utnet", "swinunetr"}) {
    const double r = ratio(id);
    o.require(r > kHighRatioMin, std::string(id) + " ratio " + fmt(r));
    summary += std::string(id) + " " + fmt(r, 3) + " ";
  }
  if (o.pass) o.detail = summary;
  return o;
}

Outcome ac3() {
  Outcome o;
  for (const auto& m : list_models()) {
    const ArchGraph g = build_model(m.id, Scale::kToy);
    const ArchGraph a = ablate(g);
    const Shape in = canonical_input(m.id, Scale::kToy);
    const CompatReport r = verify_compat(g, a, in);
    o.require(r.ok, m.id + ": " + r.first_mismatch);
    o.require(find_transformer_nodes(a).empty(), m.id + ": transformer nodes remain");
    RngStream rng(1, 3);
    const Tensor x = Tensor::uniform(in, rng, -1.0, 1.0);
    const ShapeAnnotation sg = infer_shapes(g, in), sa = infer_shapes(a, in);
    const Tensor yg = execute(g, sg, x, init_params(g, sg, RngStream(2, 0)));
    const Tensor ya = execute(a, sa, x, init_params(a, sa, RngStream(2, 0)));
    o.require(yg.shape() == ya.shape(), m.id + ": output " + to_string(yg.shape()) + " vs " + to_string(ya.shape()));
    o.require(yg.shape() == sg.output, m.id + ": executed shape differs from inferred");
  }
  if (o.pass) o.detail = "9 toy models compatible, attention-free and shape-identical after ablation";
  return o;
}

Outcome ac4() {
  Outcome o;
  RngStream rng(4004, 0);
  std::size_t with_attention = 0;
  for (int i = 0; i < 1000 && o.pass; ++i) {
    const auto gen = testing::random_graph(rng);
    const std::string before = serialize(gen.graph);
    const ArchGraph a = ablate(gen.graph);
    o.require(serialize(gen.graph) == before, "graph " + std::to_string(i) + " mutated");
    o.require(ablate(a) == a, "graph " + std::to_string(i) + " not idempotent");
    o.require(serialize(ablate(a)) == serialize(a), "graph " + std::to_string(i) + " serializes differently");
    with_attention += !find_transformer_nodes(gen.graph).empty();
  }
  if (o.pass) o.detail = "1000 graphs (" + std::to_string(with_attention) + " with attention)";
  return o;
}

BlockParams dense_params(BlockKind kind, const ParamSpec& spec, std::uint64_t seed) {
  BlockParams p(kind);
  RngStream rng(seed, 9);
  for (const auto& d : spec) p.set(d.name, Tensor::uniform(d.shape, rng, -0.5, 0.5));
  return p;
}

// Gradient check against the input(s) and every parameter tensor.
double block_grad(const BlockParams& p, const std::vector<Tensor>& inputs,
                  const std::function<Tensor(const std::vector<Tensor>&, const BlockParams&)>& f) {
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    worst = std::max(worst, grad_check(
                                [&](const Tensor& x) {
                                  auto in = inputs;
                                  in[i] = x;
                                  return sum(square(f(in, p)));
                                },
                                inputs[i]));
  }
  for (const auto& [name, t] : p.entries()) {
    worst = std::max(worst, grad_check(
                                [&, n = name](const Tensor& w) {
                                  BlockParams q = p;
                                  q.set(n, w);
                                  return sum(square(f(inputs, q)));
                                },
                                t));
  }
  return worst;
}

Outcome ac5() {
  Outcome o;
  RngStream rng(55, 0);
  auto rand = [&](const Shape& s) { return Tensor::uniform(s, rng, -1.0, 1.0); };
  std::vector<std::pair<std::string, double>> errs;
  const std::size_t c = 4;
  errs.emplace_back("patch_embed", block_grad(dense_params(BlockKind::kPatchEmbed, patch_embed_params(2, 2, 2, c), 1),
                                              {rand({2, 4, 4})}, [](const auto& in, const auto& p) {
                                                return patch_embed(in[0], 2, p).tokens;
                                              }));
  errs.emplace_back("tokenizer", block_grad(dense_params(BlockKind::kTokenizer, tokenizer_params(3, 1, 2, c, 8), 2),
                                            {rand({1, 4, 4, 4})}, [](const auto& in, const auto& p) {
                                              return vit_tokenize(in[0], 2, p).tokens;
                                            }));
  errs.emplace_back("attention", block_grad(dense_params(BlockKind::kAttention, attention_params(c), 3), {rand({5, c})},
                                            [](const auto& in, const auto& p) {
                                              return mhsa({in[0], {5}, {1}}, 2, p).tokens;
                                            }));
  errs.emplace_back("transformer",
                    block_grad(dense_params(BlockKind::kTransformer, transformer_params(c, 2.0), 4), {rand({5, c})},
                               [](const auto& in, const auto& p) {
                                 return transformer_block({in[0], {5}, {1}}, 2, 2.0, p).tokens;
                               }));
  errs.emplace_back("vit_encoder",
                    block_grad(dense_params(BlockKind::kVitEncoder, vit_encoder_params(2, c, 2.0), 5),
                               {rand({c, 2, 2})},
                               [](const auto& in, const auto& p) { return vit_encoder(in[0], 2, 2, 2.0, p); }));
  errs.emplace_back("swin_block",
                    block_grad(dense_params(BlockKind::kSwinBlock, transformer_params(c, 2.0), 6),
                               {rand({c, 4, 4, 2})}, [](const auto& in, const auto& p) {
                                 return swin_block(in[0], {2, 2, 2}, {1, 1, 0}, 2, 2.0, p);
                               }));
  errs.emplace_back("swin_stage",
                    block_grad(dense_params(BlockKind::kSwinStage, swin_stage_params(2, c, 2.0), 7), {rand({c, 4, 4})},
                               [](const auto& in, const auto& p) { return swin_stage(in[0], 2, 2, 2, 2.0, p); }));
  errs.emplace_back("patch_merging",
                    block_grad(dense_params(BlockKind::kPatchMerging, patch_merging_params(3, 2), 8),
                               {rand({2, 2, 2, 2})},
                               [](const auto& in, const auto& p) { return patch_merging(in[0], p); }));
  errs.emplace_back("conv_block", block_grad(dense_params(BlockKind::kConvBlock, conv_block_params(3, 2, 2), 9),
                                             {rand({2, 4, 4, 4})},
                                             [](const auto& in, const auto& p) { return conv_block(in[0], 2, p); }));
  errs.emplace_back("decoder_block",
                    block_grad(dense_params(BlockKind::kDecoderBlock, decoder_block_params(2, 3, 2, 2), 10),
                               {rand({3, 2, 2}), rand({2, 4, 4})},
                               [](const auto& in, const auto& p) { return decoder_block(in[0], in[1], p); }));
  errs.emplace_back("upsample", block_grad(dense_params(BlockKind::kUpsample, upsample_params(3, 2, 3), 11),
                                           {rand({2, 2, 2, 2})},
                                           [](const auto& in, const auto& p) { return upsample(in[0], p); }));
  errs.emplace_back("linear_projection",
                    block_grad(dense_params(BlockKind::kLinearProjection, linear_projection_params(2, 2, 3, 2), 12),
                               {rand({2, 4, 4})},
                               [](const auto& in, const auto& p) { return linear_projection(in[0], 2, p); }));
  errs.emplace_back("fusion", block_grad(dense_params(BlockKind::kFusion, fusion_params(2, 2, 3, 2), 13),
                                         {rand({2, 4, 4}), rand({3, 4, 4})},
                                         [](const auto& in, const auto& p) { return fusion(in[0], in[1], p); }));
  double worst = 0.0;
  for (const auto& [name, e] : errs) {
    o.require(e < kGradTol, name + " grad error " + fmt(e));
    worst = std::max(worst, e);
  }

  // Full-extent unshifted window against global attention.
  const BlockParams sp = dense_params(BlockKind::kSwinBlock, transformer_params(8, 2.0), 14);
  double swin_diff = 0.0;
  for (const Shape& s : {Shape{8, 4, 4}, Shape{8, 2, 2, 4}}) {
    const Tensor x = rand(s);
    const Shape grid(s.begin() + 1, s.end());
    const Tensor a = swin_block(x, grid, std::vector<std::size_t>(grid.size(), 0), 2, 2.0, sp);
    std::vector<std::size_t> ones(grid.size(), 1);
    const TokenGrid t = transformer_block({map_to_tokens(x), grid, ones}, 2, 2.0, sp);
    const Tensor b = tokens_to_map(t.tokens, grid);
    for (std::size_t i = 0; i < a.numel(); ++i) swin_diff = std::max(swin_diff, std::abs(a[i] - b[i]));
  }
  o.require(swin_diff <= kSwinGlobalTol, "swin vs global attention differs by " + fmt(swin_diff));

  double softmax_err = 0.0;
  const Tensor logits = Tensor::uniform({64, 33}, rng, -40.0, 40.0);
  for (std::size_t axis : {0u, 1u}) {
    const Tensor p = softmax(logits, axis);
    const Tensor s = sum(p, axis);
    for (std::size_t i = 0; i < s.numel(); ++i) softmax_err = std::max(softmax_err, std::abs(s[i] - 1.0));
  }
  o.require(softmax_err <= kSoftmaxTol, "softmax rows sum off by " + fmt(softmax_err));
  if (o.pass) {
    o.detail = std::to_string(errs.size()) + " blocks, worst grad error " + fmt(worst, 3) + "; swin-global " +
               fmt(swin_diff, 3) + "; softmax " + fmt(softmax_err, 3);
  }
  return o;
}

Outcome ac6() {
  Outcome o;
  const LabelVolume empty({6, 6, 6}, {1.0, 1.0, 1.0});
  LabelVolume a = empty, shifted = empty, far = empty;
  for (std::size_t z = 1; z < 3; ++z)
    for (std::size_t y = 1; y < 3; ++y)
      for (std::size_t x = 1; x < 3; ++x) {
        a.labels[(z * 6 + y) * 6 + x] = 1;
        shifted.labels[(z * 6 + y) * 6 + x + 1] = 1;
        far.labels[((z + 3) * 6 + y + 3) * 6 + x + 3] = 1;
      }
  o.require(dice(a, a, 1) == 1.0, "dice(A, A) != 1");
  o.require(dice(a, far, 1) == 0.0, "disjoint dice != 0");
  o.require(dice(a, shifted, 1) == 0.5, "shifted cube dice != 0.5");

  RngStream rng(6006, 0);
  std::size_t anisotropic = 0, comparisons = 0;
  for (int t = 0; t < kMetricPairs && o.pass; ++t) {
    const auto [p, g] = testing::random_mask_pair(rng, kMetricMaxExtent);
    anisotropic += std::set<double>(p.spacing.begin(), p.spacing.end()).size() > 1;
    for (Label c = 1; c <= 2; ++c) {
      for (double tau : {0.0, 1.0, 1.5, 2.0}) {
        const double got = surface_dice(p, g, c, tau), want = testing::brute_surface_dice(p, g, c, tau);
        o.require(got == want, "pair " + std::to_string(t) + " class " + std::to_string(c) + " tau " + fmt(tau) +
                                   ": " + fmt(got, 17) + " vs " + fmt(want, 17));
        ++comparisons;
      }
    }
  }
  o.require(anisotropic > 0, "no anisotropic pairs generated");
  if (o.pass) {
    o.detail = std::to_string(comparisons) + " exact matches over " + std::to_string(kMetricPairs) + " pairs (" +
               std::to_string(anisotropic) + " anisotropic); dice 1.0/0.0/0.5";
  }
  return o;
}

Outcome ac7() {
  Outcome o;
  const ExperimentConfig cfg;  // conv_baseline, unetr, swinunetr; toy scale; 5 folds
  const ExperimentReport r = run_experiment(cfg);
  const std::string text = emit_report(r, ReportFormat::kText);
  std::cout << text;
  write(scratch_dir() / "report.txt", text);
  o.require(r.models.size() == 3, "expected 3 model rows");
  for (const auto& m : r.models) o.require(m.error.empty(), m.model + ": " + m.error);
  if (!o.pass) return o;
  const ModelReport& base = r.models[0];
  o.require(base.standard && !base.ablated && !base.ratio, "conv_baseline rows");
  const double dsc = base.standard ? base.standard->dsc.mean : 0.0;
  o.require(dsc >= kBaselineDscMin, "conv_baseline mean DSC " + fmt(dsc));
  Shape in{1};
  in.insert(in.end(), cfg.data.grid.begin(), cfg.data.grid.end());
  for (std::size_t i = 1; i < 3; ++i) {
    const ModelReport& m = r.models[i];
    o.require(m.standard && m.ablated && m.ratio, m.model + " lacks S/Abl/ratio");
    const ArchGraph g = build_model(m.model, Scale::kToy);
    o.require(m.ratio && *m.ratio == param_ratio(g, ablate(g), in), m.model + " ratio differs from param_ratio");
    o.require(text.find(m.model + " (S)") != std::string::npos, m.model + " S row missing");
  }
  o.require(text.find("Abl.") != std::string::npos && text.find("Diff. / Ratio") != std::string::npos,
            "Abl./Diff rows missing");
  o.require(text.find("conv_baseline (S)") != std::string::npos, "baseline row missing");

  // Determinism: retrain one fold and compare with the report.
  const auto data = gen_dataset(cfg.data);
  const auto folds = kfold_split(data.size(), cfg.folds, cfg.train.seed);
  const ArchGraph ua = ablate(build_model("unetr", Scale::kToy));
  const TrainResult again = train(ua, data, {folds[0]}, cfg.train);
  o.require(100.0 * again.folds[0].val.mean_dsc == r.models[1].ablated->fold_dsc[0], "fold 0 rerun differs");
  if (o.pass) {
    o.detail = "conv_baseline DSC " + format_mean_sd(base.standard->dsc) + "; unetr ratio " +
               format_fixed(*r.models[1].ratio, 2) + "; swinunetr ratio " + format_fixed(*r.models[2].ratio, 2) +
               "; rerun identical";
  }
  return o;
}

Outcome ac8() {
  Outcome o;
  std::size_t graphs = 0;
  for (Scale scale : {Scale::kPaper, Scale::kToy}) {
    for (const auto& m : list_models()) {
      const ArchGraph g = build_model(m.id, scale);
      const std::string text = serialize(g);
      const ArchGraph back = deserialize(text);
      o.require(back == g && serialize(back) == text, m.id + " round trip differs");
      ++graphs;
    }
  }
  const fs::path dir = scratch_dir();
  const std::string spec = (dir / "unetr.json").string(), abl = (dir / "unetr_abl.json").string();
  o.require(cli("export unetr --scale toy -o \"" + spec + "\"") == 0, "export exit code");
  o.require(cli("ablate \"" + spec + "\" -o \"" + abl + "\"") == 0, "ablate exit code");
  o.require(cli("params unetr --scale toy") == 0, "params exit code");

  write(dir / "broken.json", "{\"name\": \"x\",\n  \"dim\": 3,\n  \"nodes\": [\n");
  o.require(cli("ablate \"" + (dir / "broken.json").string() + "\"") == 2, "malformed JSON should exit 2");
  o.require(cli("params no_such_model") == 2, "unknown model should exit 2");
  o.require(cli("train unetr --mode sideways") == 2, "bad mode should exit 2");

  GraphSpec bad = deserialize(serialize(ablate(build_model("unetr", Scale::kToy)))).spec();
  for (auto& n : bad.nodes) {
    if (n.kind == NodeKind::kSegHead) n.hyper["classes"] += 1;
  }
  write(dir / "corrupt.json", serialize(ArchGraph::build(bad)));
  o.require(cli("ablate \"" + spec + "\" --check \"" + (dir / "corrupt.json").string() + "\"") == 3,
            "compat failure should exit 3");

  write(dir / "wild.json", R"({"data": {"n_cases": 4, "grid": [16, 16, 16]}, "train": {"epochs": 1, "lr": 1e300}})");
  o.require(cli("train conv_baseline --folds 2 --config \"" + (dir / "wild.json").string() + "\"") == 4,
            "divergence should exit 4");
  if (o.pass) o.detail = std::to_string(graphs) + " templates round-trip; exit codes 0/2/3/4 as documented";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{ac1, ac2, ac3, ac4, ac5, ac6, ac7, ac8};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (int k = 1; k <= 8; ++k) {
    if (!selected.empty() && !selected.count(k)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[std::size_t(k - 1)]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > kBudget[k]) {
      o.detail += (o.pass ? "" : "; ") + std::string("over budget");
      o.pass = false;
    }
    std::printf("AC%d %s  %s  [%.1f s / %.0f s]\n", k, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs, kBudget[k]);
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::error_code ec;
  fs::remove_all(scratch_dir(), ec);
  return failures == 0 ? 0 : 1;
}
