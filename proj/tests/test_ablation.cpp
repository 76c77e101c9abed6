#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "graph_gen.hpp"
#include "tabl/ablation.hpp"
#include "tabl/error.hpp"
#include "tabl/model_zoo.hpp"

using namespace tabl;

namespace {

// Conv - tokenizer - encoder - conv.
ArchGraph cac_chain() {
  GraphSpec s;
  s.name = "cac";
  s.dim = 3;
  s.nodes = {{"in", NodeKind::kInput, {{"channels", 1}}},
             {"c1", NodeKind::kConv, {{"out", 4}}},
             {"tok", NodeKind::kViTTokenizer, {{"patch", 2}, {"d", 8}}},
             {"vit", NodeKind::kViTEncoder, {{"depth", 2}, {"heads", 2}}},
             {"c2", NodeKind::kConv, {{"out", 4}}},
             {"head", NodeKind::kSegHead, {{"classes", 2}}},
             {"out", NodeKind::kOutput, {}}};
  s.edges = {{"in", "c1", 0}, {"c1", "tok", 0}, {"tok", "vit", 0}, {"vit", "c2", 0},
             {"c2", "head", 0}, {"head", "out", 0}};
  return ArchGraph::build(s);
}

std::size_t count_kind(const ArchGraph& g, NodeKind kind) {
  std::size_t n = 0;
  for (const auto& node : g.nodes()) n += node.kind == kind;
  return n;
}

}  // namespace

TEST_CASE("find_transformer_nodes") {
  CHECK(find_transformer_nodes(build_model("conv_baseline", Scale::kToy)).empty());

  const ArchGraph unetr = build_model("unetr", Scale::kPaper);
  const auto ids = find_transformer_nodes(unetr);
  std::size_t layers = 0;
  for (const auto& id : ids) {
    CHECK(unetr.node(id).kind == NodeKind::kViTEncoder);
    layers += unetr.node(id).count("depth");
  }
  CHECK(layers == 12);  // one ViT-B, split at its decoder taps

  const ArchGraph nnf = build_model("nnformer", Scale::kToy);
  const auto stages = find_transformer_nodes(nnf);
  CHECK(stages.size() == count_kind(nnf, NodeKind::kSwinStage));
  CHECK(stages.size() == 7);
  for (const auto& id : stages) CHECK(nnf.node(id).kind == NodeKind::kSwinStage);

  // Topological order.
  const auto& topo = unetr.topo_order();
  std::size_t last = 0;
  for (const auto& id : ids) {
    const auto pos = std::find(topo.begin(), topo.end(), unetr.index_of(id)) - topo.begin();
    CHECK(static_cast<std::size_t>(pos) >= last);
    last = static_cast<std::size_t>(pos);
  }
}

TEST_CASE("ablate C-A-C chain") {
  const ArchGraph g = cac_chain();
  const ArchGraph a = ablate(g);
  CHECK(a.mode() == GraphMode::kAblated);
  CHECK(!a.contains("vit"));
  CHECK(!a.contains("tok"));
  REQUIRE(a.contains("tok_lin"));
  CHECK(a.node("tok_lin").kind == NodeKind::kLinearProjection);
  CHECK(a.node("tok_lin").count("out") == 8);
  CHECK(a.node("tok_lin").count("patch") == 2);
  CHECK(a.nodes()[a.producers(a.index_of("c2"))[0]].id == "tok_lin");

  const Shape in{1, 8, 8, 8};
  const ShapeAnnotation sa = infer_shapes(g, in), sb = infer_shapes(a, in);
  CHECK(sa.node_out[g.index_of("c1")] == sb.node_out[a.index_of("c1")]);
  CHECK(sa.node_out[g.index_of("vit")] == sb.node_out[a.index_of("tok_lin")]);
  CHECK(sa.node_out[g.index_of("c2")] == sb.node_out[a.index_of("c2")]);

  const CompatReport r = verify_compat(g, a, in);
  CHECK(r.ok);
  CHECK(r.rewrite_sites == std::vector<std::string>{"tok_lin", "c2"});
  CHECK(!r.entries.empty());
}

TEST_CASE("ablate Swin stages keeps PatchMerging") {
  const ArchGraph g = build_model("swinunetr", Scale::kToy);
  const ArchGraph a = ablate(g);
  CHECK(count_kind(a, NodeKind::kSwinStage) == 0);
  CHECK(count_kind(a, NodeKind::kPatchMerging) == count_kind(g, NodeKind::kPatchMerging));
  const Shape in = canonical_input("swinunetr", Scale::kToy);
  const ShapeAnnotation sa = infer_shapes(g, in);
  for (const auto& id : find_transformer_nodes(g)) {
    const BlockNode& rep = a.node(id + "_lin");
    CHECK(rep.kind == NodeKind::kLinearProjection);
    CHECK(rep.count("patch") == 1);
    CHECK(rep.count("out") == sa.node_out[g.index_of(id)][0]);
  }
  CHECK(verify_compat(g, a, in).ok);
}

TEST_CASE("ablate algebra on zoo graphs") {
  for (Scale scale : {Scale::kPaper, Scale::kToy}) {
    for (const auto& m : list_models()) {
      const ArchGraph g = build_model(m.id, scale);
      const std::string before = serialize(g);
      const ArchGraph a = ablate(g);
      CHECK(serialize(g) == before);
      CHECK(find_transformer_nodes(a).empty());
      CHECK(ablate(a) == a);
      const Shape in = canonical_input(m.id, scale);
      const CompatReport r = verify_compat(g, a, in);
      CHECK_MESSAGE(r.ok, m.id << ": " << r.first_mismatch);
      const double ratio = param_ratio(g, a, in);
      if (find_transformer_nodes(g).empty()) {
        CHECK(ratio == 1.0);
        CHECK(a == g);
        CHECK(r.rewrite_sites.empty());
      } else {
        CHECK(ratio > 0.0);
        CHECK(ratio < 1.0);
      }
    }
  }
}

TEST_CASE("verify_compat detects a corrupted replacement") {
  const ArchGraph g = build_model("unetr", Scale::kToy);
  const ArchGraph a = ablate(g);
  GraphSpec bad = a.spec();
  for (auto& n : bad.nodes) {
    if (n.id == "tokenizer_lin") n.hyper["out"] = n.hyper["out"] + 1;
  }
  const CompatReport r = verify_compat(g, ArchGraph::build(bad), canonical_input("unetr", Scale::kToy));
  CHECK(!r.ok);
  CHECK(r.first_mismatch.rfind("tokenizer_lin out", 0) == 0);

  const ArchGraph base = build_model("conv_baseline", Scale::kToy);
  const CompatReport same = verify_compat(base, base, canonical_input("conv_baseline", Scale::kToy));
  CHECK(same.ok);
  CHECK(same.rewrite_sites.empty());
  CHECK(same.entries.empty());

  // A replacement that breaks inference downstream also reports failure.
  GraphSpec broken = a.spec();
  for (auto& n : broken.nodes) {
    if (n.id == "tokenizer_lin") n.hyper["patch"] = 4;
  }
  const CompatReport r2 = verify_compat(g, ArchGraph::build(broken), canonical_input("unetr", Scale::kToy));
  CHECK(!r2.ok);
  CHECK(format_report(r2).find("FAILED") != std::string::npos);
}

TEST_CASE("param_ratio") {
  GraphSpec s;
  s.name = "pass";
  s.dim = 2;
  s.nodes = {{"in", NodeKind::kInput, {{"channels", 1}}}, {"out", NodeKind::kOutput, {}}};
  s.edges = {{"in", "out", 0}};
  const ArchGraph empty = ArchGraph::build(s);
  CHECK_THROWS_AS(param_ratio(empty, empty, {1, 4, 4}), UsageError);

  const ArchGraph u = build_model("unetr", Scale::kPaper);
  CHECK(param_ratio(u, ablate(u), {1, 128, 128, 128}) == doctest::Approx(0.08).epsilon(0.5));
  const ArchGraph sw = build_model("swinunetr", Scale::kPaper);
  const double r = param_ratio(sw, ablate(sw), {1, 128, 128, 128});
  CHECK(r >= 0.83);
  CHECK(r <= 0.99);
}

TEST_CASE("ablate on random graphs") {
  RngStream rng(31337, 0);
  for (int i = 0; i < 1000; ++i) {
    const auto gen = testing::random_graph(rng);
    const std::string before = serialize(gen.graph);
    const ArchGraph a = ablate(gen.graph);
    REQUIRE(serialize(gen.graph) == before);
    REQUIRE(ablate(a) == a);
    REQUIRE(find_transformer_nodes(a).empty());
    const CompatReport r = verify_compat(gen.graph, a, gen.input);
    REQUIRE_MESSAGE(r.ok, before << "\n" << r.first_mismatch);
    if (!find_transformer_nodes(gen.graph).empty()) {
      const auto n0 = count_params(gen.graph, infer_shapes(gen.graph, gen.input)).total;
      const auto n1 = count_params(a, infer_shapes(a, gen.input)).total;
      REQUIRE(n1 < n0);
    }
  }
}
