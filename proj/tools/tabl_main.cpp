// Command-line front end: model inspection, ablation, training and reports.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "tabl/ablation.hpp"
#include "tabl/harness.hpp"
#include "tabl/model_zoo.hpp"
#include "tabl/seg_metrics.hpp"

namespace fs = std::filesystem;
using namespace tabl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitValidation = 2;
constexpr int kExitCompat = 3;
constexpr int kExitDivergence = 4;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out << text;
}

std::string millions(std::size_t n) { return format_fixed(double(n) / 1e6, 3) + " M"; }

Shape parse_shape(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(part, &used);
      if (used != part.size() || v <= 0) throw std::invalid_argument(part);
      s.push_back(std::size_t(v));
    } catch (const std::logic_error&) {
      throw UsageError("bad shape '" + text + "': expected positive integers like 1,32,32,32");
    }
  }
  if (s.size() < 3) throw UsageError("shape needs channels plus 2 or 3 spatial extents");
  return s;
}

Shape default_input(const ArchGraph& g) {
  for (const auto& m : list_models()) {
    if (m.id == g.name() && m.dim == g.dim()) return canonical_input(m.id, Scale::kToy);
  }
  std::size_t channels = 1;
  for (const auto& n : g.nodes()) {
    if (n.kind == NodeKind::kInput) channels = n.count("channels");
  }
  Shape s{channels};
  s.insert(s.end(), g.dim(), g.dim() == 3 ? 32 : 64);
  return s;
}

int cmd_describe(const std::string& model, const std::string& scale_name) {
  const Scale scale = parse_scale(scale_name);
  const ModelInfo& info = model_info(model);
  const ArchGraph g = build_model(model, scale);
  const Shape in = canonical_input(model, scale);
  const ShapeAnnotation ann = infer_shapes(g, in);
  const ParamCount pc = count_params(g, ann);
  std::cout << "model     " << info.id << "\n"
            << "dim       " << info.dim << "D\n"
            << "topology  " << info.topology << "\n"
            << "scale     " << to_string(scale) << "\n"
            << "input     " << to_string(in) << "\n"
            << "output    " << to_string(ann.output) << "\n"
            << "params    " << pc.total << " (" << millions(pc.total) << ")\n";
  const auto transformers = find_transformer_nodes(g);
  std::cout << "attention";
  if (transformers.empty()) std::cout << " none";
  for (const auto& id : transformers) std::cout << " " << id;
  std::cout << "\n\n";

  std::size_t wid = 2, wkind = 4;
  for (const auto& n : g.nodes()) {
    wid = std::max(wid, n.id.size());
    wkind = std::max(wkind, to_string(n.kind).size());
  }
  auto pad = [](std::string s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
  std::cout << pad("id", wid) << "  " << pad("kind", wkind) << "  " << pad("output", 22) << "  "
            << pad("down", 10) << "  params\n";
  for (std::size_t u : g.topo_order()) {
    const BlockNode& n = g.nodes()[u];
    std::string down;
    for (std::size_t f : ann.downsample_in[u]) down += (down.empty() ? "" : "x") + std::to_string(f);
    std::cout << pad(n.id, wid) << "  " << pad(std::string(to_string(n.kind)), wkind) << "  "
              << pad(to_string(ann.node_out[u]), 22) << "  " << pad(down, 10) << "  " << pc.per_node.at(n.id) << "\n";
  }
  for (const auto& w : ann.warnings) std::cout << "warning: " << w << "\n";
  return kExitOk;
}

int cmd_params(const std::string& model, const std::string& scale_name, bool json) {
  const Scale scale = parse_scale(scale_name);
  const ArchGraph g = build_model(model, scale);
  const ArchGraph a = ablate(g);
  const Shape in = canonical_input(model, scale);
  const std::size_t s = count_params(g, infer_shapes(g, in)).total;
  const std::size_t abl = count_params(a, infer_shapes(a, in)).total;
  const double ratio = param_ratio(g, a, in);
  if (json) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", ratio);
    std::cout << "{\"model\": \"" << model << "\", \"scale\": \"" << to_string(scale) << "\", \"standard\": " << s
              << ", \"ablated\": " << abl << ", \"ratio\": " << buf << "}\n";
    return kExitOk;
  }
  std::cout << "model     " << model << " (" << to_string(scale) << ")\n"
            << "standard  " << s << " (" << millions(s) << ")\n"
            << "ablated   " << abl << " (" << millions(abl) << ")\n"
            << "ratio     " << format_fixed(ratio, 3) << "\n";
  return kExitOk;
}

int cmd_export(const std::string& model, const std::string& scale_name, const std::string& out) {
  const std::string text = serialize(build_model(model, parse_scale(scale_name)));
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    write_file(out, text);
  }
  return kExitOk;
}

int cmd_ablate(const std::string& path, const std::string& out, const std::string& input, const std::string& check) {
  const ArchGraph g = deserialize(read_file(path));
  const ArchGraph a = check.empty() ? ablate(g) : deserialize(read_file(check));
  const Shape in = input.empty() ? default_input(g) : parse_shape(input);
  const CompatReport report = verify_compat(g, a, in);
  std::cerr << format_report(report);
  if (!report.ok) return kExitCompat;
  const std::string text = serialize(a);
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    write_file(out, text);
  }
  return kExitOk;
}

ExperimentConfig load_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : config_from_json(read_file(path));
}

int cmd_train(const std::string& model, const std::string& mode, std::size_t folds, std::uint64_t seed,
              const std::string& config, const std::string& run_dir) {
  if (mode != "s" && mode != "abl") throw UsageError("--mode must be s or abl");
  ExperimentConfig cfg = load_config(config);
  cfg.folds = folds;
  cfg.train.seed = seed;
  const ArchGraph g = build_model(model, Scale::kToy);
  ArchGraph net = g;
  Shape in{1};
  in.insert(in.end(), cfg.data.grid.begin(), cfg.data.grid.end());
  if (mode == "abl") {
    if (find_transformer_nodes(g).empty()) throw UsageError(model + " has no attention blocks to ablate");
    net = ablate(g);
    const CompatReport report = verify_compat(g, net, in);
    if (!report.ok) {
      std::cerr << format_report(report);
      return kExitCompat;
    }
  }
  const auto data = gen_dataset(cfg.data);
  const auto split = kfold_split(data.size(), cfg.folds, cfg.train.seed);
  const TrainResult r = train(net, data, split, cfg.train);
  for (const auto& f : r.folds) {
    std::cout << "fold " << f.fold << "  loss " << format_fixed(f.epoch_loss.empty() ? 0.0 : f.epoch_loss.back(), 4)
              << "  dsc " << format_fixed(100.0 * f.val.mean_dsc, 1) << "  sdc "
              << format_fixed(100.0 * f.val.mean_sdc, 1) << "\n";
  }
  const ModeRow row = summarize(r);
  std::cout << model << " (" << mode << ")  DSC " << format_mean_sd(row.dsc) << "  SDC " << format_mean_sd(row.sdc)
            << "  params " << millions(r.params) << "\n";
  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    const fs::path file = fs::path(run_dir) / (model + "_" + mode + ".json");
    write_file(file.string(), train_result_to_json(model, mode == "abl" ? GraphMode::kAblated : GraphMode::kStandard, r));
    std::cout << "wrote " << file.string() << "\n";
  }
  return kExitOk;
}

ReportFormat parse_format(const std::string& f) {
  if (f == "text") return ReportFormat::kText;
  if (f == "csv") return ReportFormat::kCsv;
  throw UsageError("--format must be text or csv");
}

int cmd_report(const std::string& run_dir, const std::string& format) {
  const ReportFormat fmt = parse_format(format);
  if (!fs::is_directory(run_dir)) throw UsageError(run_dir + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const std::string name = e.path().filename().string();
    if (e.path().extension() == ".json" && (name.ends_with("_s.json") || name.ends_with("_abl.json"))) {
      files.push_back(e.path());
    }
  }
  // Zoo order, standard before ablated.
  auto rank = [](const fs::path& p) {
    const std::string stem = p.stem().string();
    const bool abl = stem.ends_with("_abl");
    const std::string model = stem.substr(0, stem.size() - (abl ? 4 : 2));
    const auto& models = list_models();
    const auto it = std::find_if(models.begin(), models.end(), [&](const ModelInfo& m) { return m.id == model; });
    return std::tuple(std::size_t(it - models.begin()), model, abl);
  };
  std::sort(files.begin(), files.end(), [&](const fs::path& a, const fs::path& b) { return rank(a) < rank(b); });
  ExperimentReport report;
  for (const auto& f : files) merge_result_json(report, read_file(f.string()));
  std::cout << emit_report(report, fmt);
  return kExitOk;
}

int cmd_experiment(const std::string& config, const std::string& run_dir, const std::string& format) {
  const ReportFormat fmt = parse_format(format);
  const ExperimentConfig cfg = load_config(config);
  const ExperimentReport r = run_experiment(cfg);
  std::cout << emit_report(r, fmt);
  if (!run_dir.empty()) {
    fs::create_directories(run_dir);
    write_file((fs::path(run_dir) / "config.json").string(), config_to_json(cfg));
    write_file((fs::path(run_dir) / "report.txt").string(), emit_report(r, ReportFormat::kText));
    write_file((fs::path(run_dir) / "report.csv").string(), emit_report(r, ReportFormat::kCsv));
    write_file((fs::path(run_dir) / "report.json").string(), report_to_json(r));
  }
  for (const auto& m : r.models) {
    if (!m.error.empty()) return kExitCompat;
  }
  return kExitOk;
}

int cmd_eval(const std::string& pred, const std::string& gt, std::size_t classes, double tolerance) {
  const MetricResult m = evaluate(load_labels(pred), load_labels(gt), classes, tolerance);
  for (std::size_t c = 0; c < classes; ++c) {
    std::cout << "class " << c + 1 << "  dsc " << format_fixed(100.0 * m.dsc[c], 1) << "  sdc "
              << format_fixed(100.0 * m.sdc[c], 1) << "\n";
  }
  std::cout << "mean     dsc " << format_fixed(100.0 * m.mean_dsc, 1) << "  sdc "
            << format_fixed(100.0 * m.mean_sdc, 1) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-ablation toolkit for segmentation networks"};
  app.require_subcommand(1);

  std::string model, scale = "paper", out, input, path, mode = "s", config, run_dir, format = "text", pred, gt, check;
  std::size_t folds = 5, classes = 1;
  std::uint64_t seed = 0;
  double tolerance = 1.0;
  bool json = false;

  auto* describe = app.add_subcommand("describe", "Topology, per-node shapes and parameter counts");
  describe->add_option("model", model, "Model id")->required();
  describe->add_option("--scale", scale, "paper or toy")->capture_default_str();

  auto* params = app.add_subcommand("params", "Standard and ablated parameter counts");
  params->add_option("model", model, "Model id")->required();
  params->add_option("--scale", scale, "paper or toy")->capture_default_str();
  params->add_flag("--json", json, "Machine-readable output");

  auto* exp = app.add_subcommand("export", "Write a zoo template as graph JSON");
  exp->add_option("model", model, "Model id")->required();
  exp->add_option("--scale", scale, "paper or toy")->capture_default_str();
  exp->add_option("-o,--output", out, "Output file (default stdout)");

  auto* abl = app.add_subcommand("ablate", "Remove attention blocks from a graph JSON");
  abl->add_option("spec", path, "Graph JSON")->required();
  abl->add_option("-o,--output", out, "Output file (default stdout)");
  abl->add_option("--input", input, "Input shape for the compatibility check, e.g. 1,32,32,32");
  abl->add_option("--check", check, "Verify this ablated graph against the spec instead of generating one");

  auto* tr = app.add_subcommand("train", "Cross-validated toy-scale training of one model");
  tr->add_option("model", model, "Model id")->required();
  tr->add_option("--mode", mode, "s or abl")->capture_default_str();
  tr->add_option("--folds", folds, "Number of folds")->capture_default_str();
  tr->add_option("--seed", seed, "Training seed")->capture_default_str();
  tr->add_option("--config", config, "Experiment config JSON");
  tr->add_option("--run-dir", run_dir, "Directory for the result JSON");

  auto* rep = app.add_subcommand("report", "Assemble a results table from a run directory");
  rep->add_option("run-dir", run_dir, "Directory written by train")->required();
  rep->add_option("--format", format, "text or csv")->capture_default_str();

  auto* ex = app.add_subcommand("experiment", "Train every configured model in both modes and report");
  ex->add_option("--config", config, "Experiment config JSON");
  ex->add_option("--run-dir", run_dir, "Directory for config and reports");
  ex->add_option("--format", format, "text or csv")->capture_default_str();

  auto* cfg = app.add_subcommand("config", "Print the default experiment config");

  auto* ev = app.add_subcommand("eval", "DSC and SDC between two label files");
  ev->add_option("pred", pred, "Predicted labels")->required();
  ev->add_option("gt", gt, "Reference labels")->required();
  ev->add_option("--classes", classes, "Foreground classes")->capture_default_str();
  ev->add_option("--tolerance", tolerance, "Surface tolerance in mm")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*describe) return cmd_describe(model, scale);
    if (*params) return cmd_params(model, scale, json);
    if (*exp) return cmd_export(model, scale, out);
    if (*abl) return cmd_ablate(path, out, input, check);
    if (*tr) return cmd_train(model, mode, folds, seed, config, run_dir);
    if (*rep) return cmd_report(run_dir, format);
    if (*ex) return cmd_experiment(config, run_dir, format);
    if (*cfg) {
      std::cout << config_to_json(ExperimentConfig{});
      return kExitOk;
    }
    if (*ev) return cmd_eval(pred, gt, classes, tolerance);
  } catch (const TrainingError& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what();
    for (const auto& o : e.offenders()) std::cerr << (&o == &e.offenders().front() ? ": " : ", ") << o;
    std::cerr << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const GenerationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
