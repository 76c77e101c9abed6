#pragma once

// Random valid graphs for property tests, composed from a main chain with
// skip and fusion edges back to earlier nodes of matching extent.

#include <string>
#include <vector>

#include "tabl/arch_ir.hpp"
#include "tabl/rng.hpp"

namespace tabl::testing {

struct GenOptions {
  std::size_t max_steps = 8;
  std::size_t max_channels = 8;
  std::size_t max_extent_log2 = 3;  // input extent 2^k
};

struct Generated {
  ArchGraph graph;
  Shape input;
};

inline Generated random_graph(RngStream& rng, const GenOptions& opt = {}) {
  struct Site {
    std::string id;
    std::size_t channels;
    std::size_t extent;
  };
  const std::size_t dim = 2 + rng.below(2);
  const std::size_t base = std::size_t{1} << (1 + rng.below(opt.max_extent_log2));
  const std::size_t c_in = 1 + rng.below(2);
  GraphSpec spec;
  spec.name = "random";
  spec.dim = dim;
  std::vector<Site> sites;
  std::size_t counter = 0;
  auto pick_channels = [&] { return 1 + rng.below(opt.max_channels); };
  auto divisor_of = [&](std::size_t c) {
    std::vector<std::size_t> ds;
    for (std::size_t h = 1; h <= c; ++h) {
      if (c % h == 0) ds.push_back(h);
    }
    return ds[rng.below(ds.size())];
  };
  auto add = [&](NodeKind kind, Hyper hyper, std::vector<std::string> in, std::size_t c, std::size_t e) {
    const std::string id = std::string(to_string(kind)) + "_" + std::to_string(counter++);
    spec.nodes.push_back({id, kind, std::move(hyper)});
    for (std::size_t p = 0; p < in.size(); ++p) spec.edges.push_back({in[p], id, p});
    sites.push_back({id, c, e});
    return sites.back();
  };

  Site cur = add(NodeKind::kInput, {{"channels", double(c_in)}}, {}, c_in, base);
  const std::size_t steps = 1 + rng.below(opt.max_steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::uint64_t choice = rng.below(10);
    if (choice == 0) {
      const std::size_t stride = cur.extent >= 2 && rng.below(2) ? 2 : 1;
      const std::size_t out = pick_channels();
      cur = add(NodeKind::kConv, {{"out", double(out)}, {"stride", double(stride)}}, {cur.id}, out,
                cur.extent / stride);
    } else if (choice == 1 && cur.extent >= 2) {
      cur = add(NodeKind::kPatchMerging, {}, {cur.id}, 2 * cur.channels, cur.extent / 2);
    } else if (choice == 2) {
      const std::size_t patch = cur.extent >= 2 && rng.below(2) ? 2 : 1;
      const std::size_t out = pick_channels();
      cur = add(NodeKind::kLinearProjection, {{"out", double(out)}, {"patch", double(patch)}}, {cur.id}, out,
                cur.extent / patch);
    } else if (choice == 3) {
      const std::size_t patch = cur.extent >= 2 && rng.below(2) ? 2 : 1;
      const std::size_t d = 2 * (1 + rng.below(opt.max_channels / 2));
      cur = add(NodeKind::kViTTokenizer, {{"patch", double(patch)}, {"d", double(d)}}, {cur.id}, d,
                cur.extent / patch);
      const std::size_t encoders = rng.below(3);
      for (std::size_t k = 0; k < encoders; ++k) {
        cur = add(NodeKind::kViTEncoder,
                  {{"depth", double(1 + rng.below(2))}, {"heads", double(divisor_of(d))}, {"mlp_ratio", 2.0}},
                  {cur.id}, d, cur.extent);
      }
    } else if (choice == 4) {
      cur = add(NodeKind::kViTEncoder,
                {{"depth", 1.0}, {"heads", double(divisor_of(cur.channels))}, {"mlp_ratio", 1.5}}, {cur.id},
                cur.channels, cur.extent);
    } else if (choice == 5) {
      const std::size_t window = std::size_t{1} << rng.below(3);
      cur = add(NodeKind::kSwinStage,
                {{"depth", double(1 + rng.below(2))},
                 {"window", double(window)},
                 {"heads", double(divisor_of(cur.channels))},
                 {"mlp_ratio", 2.0}},
                {cur.id}, cur.channels, cur.extent);
    } else if (choice == 6 && cur.extent < base) {
      const std::size_t out = pick_channels();
      cur = add(NodeKind::kUpsample, {{"out", double(out)}}, {cur.id}, out, cur.extent * 2);
    } else if (choice == 7 && cur.extent < base) {
      std::vector<Site> skips;
      for (const auto& site : sites) {
        if (site.extent == cur.extent * 2) skips.push_back(site);
      }
      if (skips.empty()) continue;
      const Site skip = skips[rng.below(skips.size())];
      const std::size_t out = pick_channels();
      cur = add(NodeKind::kDecoderConv, {{"out", double(out)}}, {cur.id, skip.id}, out, cur.extent * 2);
    } else if (choice >= 8) {
      std::vector<Site> same;
      for (std::size_t i = 0; i + 1 < sites.size(); ++i) {
        if (sites[i].extent == cur.extent && sites[i].id != cur.id) same.push_back(sites[i]);
      }
      if (same.empty()) continue;
      const Site other = same[rng.below(same.size())];
      const std::size_t out = pick_channels();
      std::vector<std::string> in{cur.id, other.id};
      if (rng.below(2)) std::swap(in[0], in[1]);
      cur = add(NodeKind::kFusion, {{"out", double(out)}}, in, out, cur.extent);
    }
  }
  cur = add(NodeKind::kSegHead, {{"classes", double(1 + rng.below(3))}}, {cur.id}, 0, cur.extent);
  add(NodeKind::kOutput, {}, {cur.id}, 0, cur.extent);

  // Declaration order is shuffled so that topological sorting does real work.
  for (std::size_t i = spec.nodes.size(); i > 1; --i) std::swap(spec.nodes[i - 1], spec.nodes[rng.below(i)]);

  Shape input{c_in};
  for (std::size_t a = 0; a < dim; ++a) input.push_back(base);
  return {ArchGraph::build(std::move(spec)), input};
}

}  // namespace tabl::testing
