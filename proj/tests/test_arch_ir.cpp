#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "graph_gen.hpp"
#include "tabl/arch_ir.hpp"
#include "tabl/error.hpp"
#include "tabl/grad_check.hpp"
#include "tabl/model_zoo.hpp"
#include "tabl/ops.hpp"
#include "tabl/rng.hpp"

using namespace tabl;

namespace {

GraphSpec minimal_spec() {
  GraphSpec s;
  s.name = "minimal";
  s.dim = 3;
  s.nodes = {{"in", NodeKind::kInput, {{"channels", 1}}},
             {"conv", NodeKind::kConv, {{"out", 4}}},
             {"head", NodeKind::kSegHead, {{"classes", 2}}},
             {"out", NodeKind::kOutput, {}}};
  s.edges = {{"in", "conv", 0}, {"conv", "head", 0}, {"head", "out", 0}};
  return s;
}

std::vector<std::string> offenders_of(const GraphSpec& s) {
  try {
    ArchGraph::build(s);
  } catch (const ValidationError& e) {
    return e.offenders();
  }
  return {};
}

Tensor rand_tensor(const Shape& shape, std::uint64_t seed) {
  RngStream rng(seed, 0);
  return Tensor::uniform(shape, rng, -1.0, 1.0);
}

}  // namespace

TEST_CASE("build_graph accepts a minimal chain") {
  const ArchGraph g = ArchGraph::build(minimal_spec());
  CHECK(g.nodes().size() == 4);
  CHECK(g.nodes()[g.input_node()].id == "in");
  CHECK(g.nodes()[g.output_node()].id == "out");
  CHECK(g.topo_order() == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("build_graph structural errors") {
  SUBCASE("cycle names the back edge") {
    GraphSpec s = minimal_spec();
    s.nodes.insert(s.nodes.begin() + 2, {"fuse", NodeKind::kFusion, {{"out", 4}}});
    s.edges = {{"in", "conv", 0}, {"conv", "fuse", 0}, {"fuse", "fuse", 1}, {"fuse", "head", 0}, {"head", "out", 0}};
    CHECK(offenders_of(s) == std::vector<std::string>{"fuse->fuse"});

    GraphSpec t = minimal_spec();
    t.nodes.push_back({"a", NodeKind::kFusion, {{"out", 2}}});
    t.nodes.push_back({"b", NodeKind::kConv, {{"out", 2}}});
    t.edges = {{"in", "a", 0}, {"b", "a", 1}, {"a", "b", 0}, {"a", "conv", 0}, {"conv", "head", 0}, {"head", "out", 0}};
    const auto off = offenders_of(t);
    REQUIRE(off.size() == 1);
    CHECK((off[0] == "a->b" || off[0] == "b->a"));
  }
  SUBCASE("duplicate ids") {
    GraphSpec s = minimal_spec();
    s.nodes.push_back({"conv", NodeKind::kConv, {{"out", 1}}});
    CHECK(offenders_of(s) == std::vector<std::string>{"conv"});
  }
  SUBCASE("dangling edge") {
    GraphSpec s = minimal_spec();
    s.edges.push_back({"ghost", "head", 0});
    CHECK(offenders_of(s) == std::vector<std::string>{"ghost->head:0"});
  }
  SUBCASE("port fed twice, missing port, bad port") {
    GraphSpec s = minimal_spec();
    s.edges.push_back({"in", "head", 0});
    CHECK(offenders_of(s) == std::vector<std::string>{"in->head:0"});
    GraphSpec t = minimal_spec();
    t.edges.erase(t.edges.begin() + 1);
    CHECK(offenders_of(t) == std::vector<std::string>{"head:0"});
    GraphSpec u = minimal_spec();
    u.edges.push_back({"in", "conv", 1});
    CHECK(offenders_of(u) == std::vector<std::string>{"in->conv:1"});
  }
  SUBCASE("input and output multiplicity") {
    GraphSpec s = minimal_spec();
    s.nodes.push_back({"in2", NodeKind::kInput, {{"channels", 1}}});
    CHECK(offenders_of(s) == std::vector<std::string>{"in", "in2"});
  }
  SUBCASE("nodes off the input-output path") {
    GraphSpec s = minimal_spec();
    s.nodes.push_back({"side", NodeKind::kConv, {{"out", 2}}});
    s.edges.push_back({"conv", "side", 0});
    CHECK(offenders_of(s) == std::vector<std::string>{"side"});
  }
  SUBCASE("hyperparameters") {
    GraphSpec s = minimal_spec();
    s.nodes[1].hyper["out"] = 0;
    CHECK(offenders_of(s).size() == 1);
    s.nodes[1].hyper["out"] = 2.5;
    CHECK(offenders_of(s).size() == 1);
    s.nodes[1].hyper = {};
    CHECK(offenders_of(s) == std::vector<std::string>{"conv.out (missing)"});
    GraphSpec t = minimal_spec();
    t.nodes.insert(t.nodes.begin() + 2, {"vit", NodeKind::kViTEncoder, {{"depth", 0}, {"heads", 1}}});
    CHECK(!offenders_of(t).empty());
  }
}

TEST_CASE("infer_shapes examples") {
  SUBCASE("toy UNETR tokenizer edge") {
    const ArchGraph g = build_model("unetr", Scale::kToy);
    const ShapeAnnotation ann = infer_shapes(g, {1, 32, 32, 32});
    const Shape& tok = ann.node_out[g.index_of("tokenizer")];
    CHECK(tok == Shape{192, 4, 4, 4});
    CHECK(tok[1] * tok[2] * tok[3] == 64);
    for (std::size_t i = 0; i < g.edges().size(); ++i) {
      CHECK(ann.edge_shape[i] == ann.node_out[g.index_of(g.edges()[i].src)]);
    }
    CHECK(ann.output == Shape{2, 32, 32, 32});
  }
  SUBCASE("PatchMerging chain") {
    GraphSpec s;
    s.name = "pm";
    s.dim = 3;
    s.nodes = {{"in", NodeKind::kInput, {{"channels", 48}}},
               {"m1", NodeKind::kPatchMerging, {}},
               {"m2", NodeKind::kPatchMerging, {}},
               {"out", NodeKind::kOutput, {}}};
    s.edges = {{"in", "m1", 0}, {"m1", "m2", 0}, {"m2", "out", 0}};
    const ShapeAnnotation ann = infer_shapes(ArchGraph::build(s), {48, 32, 32, 32});
    CHECK(ann.output == Shape{192, 8, 8, 8});
    CHECK(ann.downsample_in[2] == std::vector<std::size_t>{2, 2, 2});
  }
  SUBCASE("bottleneck transformer sees 8x downsampled maps") {
    const ArchGraph g = build_model("transbts", Scale::kPaper);
    const ShapeAnnotation ann = infer_shapes(g, {1, 128, 128, 128});
    CHECK(ann.downsample_in[g.index_of("vit")] == std::vector<std::size_t>{8, 8, 8});
    CHECK(ann.warnings.size() == 1);
  }
  SUBCASE("failures carry the node id") {
    const ArchGraph g = build_model("unetr", Scale::kToy);
    try {
      infer_shapes(g, {1, 36, 32, 32});
      FAIL("expected a shape error");
    } catch (const NodeShapeError& e) {
      CHECK(!e.node_id().empty());
      CHECK(g.contains(e.node_id()));
    }
    CHECK_THROWS_AS(infer_shapes(g, {1, 32, 32}), NodeShapeError);
    CHECK_THROWS_AS(infer_shapes(g, {2, 32, 32, 32}), NodeShapeError);

    GraphSpec s = minimal_spec();
    s.nodes.insert(s.nodes.begin() + 2, {"dec", NodeKind::kDecoderConv, {{"out", 2}}});
    s.edges = {{"in", "conv", 0}, {"conv", "dec", 0}, {"in", "dec", 1}, {"dec", "head", 0}, {"head", "out", 0}};
    try {
      infer_shapes(ArchGraph::build(s), {1, 4, 4, 4});
      FAIL("expected a shape error");
    } catch (const NodeShapeError& e) {
      CHECK(e.node_id() == "dec");
      CHECK(std::string(e.what()).find("[1,4,4,4]") != std::string::npos);
    }
  }
}

TEST_CASE("count_params") {
  SUBCASE("passthrough graph has no parameters") {
    GraphSpec s;
    s.name = "pass";
    s.dim = 2;
    s.nodes = {{"in", NodeKind::kInput, {{"channels", 3}}}, {"out", NodeKind::kOutput, {}}};
    s.edges = {{"in", "out", 0}};
    const ArchGraph g = ArchGraph::build(s);
    CHECK(count_params(g, infer_shapes(g, {3, 4, 4})).total == 0);
  }
  SUBCASE("single transformer block at ViT-B width") {
    GraphSpec s;
    s.name = "tb";
    s.dim = 3;
    s.nodes = {{"in", NodeKind::kInput, {{"channels", 768}}},
               {"vit", NodeKind::kViTEncoder, {{"depth", 1}, {"heads", 12}, {"mlp_ratio", 4}}},
               {"out", NodeKind::kOutput, {}}};
    s.edges = {{"in", "vit", 0}, {"vit", "out", 0}};
    const ArchGraph g = ArchGraph::build(s);
    const ParamCount c = count_params(g, infer_shapes(g, {768, 8, 8, 8}));
    CHECK(c.total == 7087872);
    CHECK(c.per_node.at("vit") == 7087872);
  }
  SUBCASE("UNETR at paper scale") {
    const ArchGraph g = build_model("unetr", Scale::kPaper);
    const double total = double(count_params(g, infer_shapes(g, {1, 128, 128, 128})).total);
    CHECK(total >= 93.0e6 * 0.85);
    CHECK(total <= 93.0e6 * 1.15);
  }
  SUBCASE("static counts match materialized parameters") {
    for (const auto& m : list_models()) {
      const ArchGraph g = build_model(m.id, Scale::kToy);
      const ShapeAnnotation ann = infer_shapes(g, canonical_input(m.id, Scale::kToy));
      const ParamCount c = count_params(g, ann);
      const GraphParams p = init_params(g, ann, RngStream(1, 2));
      std::size_t sum = 0;
      for (const auto& [id, n] : c.per_node) {
        const auto it = p.find(id);
        const std::size_t materialized = it == p.end() ? 0 : it->second.param_count();
        CHECK_MESSAGE(materialized == n, m.id << "/" << id);
        sum += n;
      }
      CHECK(sum == c.total);
    }
  }
  SUBCASE("invariant under declaration reordering") {
    RngStream rng(9, 9);
    for (const auto& m : list_models()) {
      const ArchGraph g = build_model(m.id, Scale::kPaper);
      const Shape in = canonical_input(m.id, Scale::kPaper);
      const std::size_t total = count_params(g, infer_shapes(g, in)).total;
      GraphSpec s = g.spec();
      for (std::size_t i = s.nodes.size(); i > 1; --i) std::swap(s.nodes[i - 1], s.nodes[rng.below(i)]);
      for (std::size_t i = s.edges.size(); i > 1; --i) std::swap(s.edges[i - 1], s.edges[rng.below(i)]);
      const ArchGraph h = ArchGraph::build(s);
      CHECK(count_params(h, infer_shapes(h, in)).total == total);
      CHECK(h == g);
    }
  }
}

TEST_CASE("execute") {
  SUBCASE("Input to Output returns the input") {
    GraphSpec s;
    s.name = "id";
    s.dim = 2;
    s.nodes = {{"in", NodeKind::kInput, {{"channels", 2}}}, {"out", NodeKind::kOutput, {}}};
    s.edges = {{"in", "out", 0}};
    const ArchGraph g = ArchGraph::build(s);
    const ShapeAnnotation ann = infer_shapes(g, {2, 3, 5});
    const Tensor x = rand_tensor({2, 3, 5}, 1);
    const Tensor y = execute(g, ann, x, {});
    CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  }
  SUBCASE("parameter mismatches name node and parameter") {
    const ArchGraph g = ArchGraph::build(minimal_spec());
    const ShapeAnnotation ann = infer_shapes(g, {1, 4, 4, 4});
    GraphParams p = init_params(g, ann, RngStream(3, 0));
    p.at("conv").set("conv2.w", Tensor::zeros({4, 4, 3, 3, 1}));
    try {
      execute(g, ann, rand_tensor({1, 4, 4, 4}, 2), p);
      FAIL("expected a shape error");
    } catch (const NodeShapeError& e) {
      CHECK(e.node_id() == "conv");
      CHECK(std::string(e.what()).find("conv2.w") != std::string::npos);
    }
    p.erase("head");
    CHECK_THROWS_AS(execute(g, ann, rand_tensor({1, 4, 4, 4}, 2), p), NodeShapeError);
  }
  SUBCASE("end-to-end gradient check on the smallest zoo graph") {
    std::string smallest;
    std::size_t fewest = SIZE_MAX;
    for (const auto& m : list_models()) {
      const ArchGraph g = build_model(m.id, Scale::kToy);
      const std::size_t n = count_params(g, infer_shapes(g, canonical_input(m.id, Scale::kToy))).total;
      if (n < fewest) {
        fewest = n;
        smallest = m.id;
      }
    }
    const ArchGraph g = build_model(smallest, Scale::kToy);
    // Smallest input the graph's strides admit keeps finite differences cheap.
    Shape in = canonical_input(smallest, Scale::kToy);
    for (std::size_t a = 1; a < in.size(); ++a) in[a] = 16;
    const ShapeAnnotation ann = infer_shapes(g, in);
    const GraphParams p = init_params(g, ann, RngStream(4, 4));
    const Tensor x = rand_tensor(in, 5);
    const Tensor target = rand_tensor(ann.output, 6);
    auto loss = [&](const GraphParams& q, const Tensor& input) {
      return sum(square(sub(execute(g, ann, input, q), target)));
    };
    CHECK(grad_check([&](const Tensor& t) { return loss(p, t); }, x) < 1e-4);
    for (const auto& [node, name] : std::vector<std::pair<std::string, std::string>>{
             {"head", "proj.w"}, {"dec1", "block.norm2.g"}, {"enc1", "conv1.b"}}) {
      if (!p.count(node)) continue;
      auto f = [&](const Tensor& w) {
        GraphParams q = p;
        q.at(node).set(name, w);
        return loss(q, x);
      };
      CHECK_MESSAGE(grad_check(f, p.at(node).at(name)) < 1e-4, node << "." << name);
    }
  }
  SUBCASE("random graphs: runtime shape equals inferred shape") {
    RngStream rng(2024, 0);
    for (int i = 0; i < 1000; ++i) {
      const auto gen = testing::random_graph(rng);
      const ShapeAnnotation ann = infer_shapes(gen.graph, gen.input);
      const GraphParams p = init_params(gen.graph, ann, rng.fork(i));
      const Tensor y = execute(gen.graph, ann, rand_tensor(gen.input, i), p);
      REQUIRE_MESSAGE(y.shape() == ann.output, serialize(gen.graph));
    }
  }
}

TEST_CASE("serialization") {
  SUBCASE("zoo graphs round-trip bit-exactly") {
    for (Scale scale : {Scale::kPaper, Scale::kToy}) {
      for (const auto& m : list_models()) {
        const ArchGraph g = build_model(m.id, scale);
        const std::string text = serialize(g);
        const ArchGraph back = deserialize(text);
        CHECK(back == g);
        CHECK(serialize(back) == text);
      }
    }
  }
  SUBCASE("random graphs round-trip") {
    RngStream rng(77, 0);
    for (int i = 0; i < 200; ++i) {
      const auto gen = testing::random_graph(rng);
      CHECK(deserialize(serialize(gen.graph)) == gen.graph);
    }
  }
  SUBCASE("non-integral hypers survive") {
    GraphSpec s = minimal_spec();
    s.nodes.insert(s.nodes.begin() + 2, {"vit", NodeKind::kViTEncoder, {{"depth", 1}, {"heads", 2}, {"mlp_ratio", 0.1 + 0.2}}});
    s.edges = {{"in", "conv", 0}, {"conv", "vit", 0}, {"vit", "head", 0}, {"head", "out", 0}};
    const ArchGraph g = ArchGraph::build(s);
    CHECK(deserialize(serialize(g)).node("vit").hyper.at("mlp_ratio") == 0.1 + 0.2);
  }
  SUBCASE("empty and malformed documents") {
    CHECK_THROWS_AS(deserialize(""), ParseError);
    try {
      deserialize("{\n  \"name\": \"x\",\n  \"dim\": 3,,\n}");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(e.column() > 1);
    }
    CHECK_THROWS_AS(deserialize("[1, 2]"), ValidationError);
    CHECK_THROWS_AS(deserialize(R"({"name": "x", "dim": 3, "nodes": []})"), ValidationError);
  }
  SUBCASE("unknown kind names the kind") {
    const std::string text = R"({"name": "x", "dim": 2, "nodes": [
      {"id": "in", "kind": "Input", "hyper": {"channels": 1}},
      {"id": "a", "kind": "Deformable", "hyper": {}},
      {"id": "out", "kind": "Output"}], "edges": [["in", "a", 0], ["a", "out", 0]]})";
    try {
      deserialize(text);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(e.offenders() == std::vector<std::string>{"Deformable"});
    }
  }
}
