#include "tabl/harness.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>

#include "tabl/ablation.hpp"
#include "tabl/kernels/kernels.hpp"
#include "tabl/model_zoo.hpp"
#include "tabl/ops.hpp"
#include "tabl/rng.hpp"

namespace tabl {

namespace {

std::uint64_t stream_key(const std::string& text) { return hash_name(text.data(), text.size()); }

std::vector<std::size_t> coords_of(const Shape& grid, std::size_t flat) {
  std::vector<std::size_t> c(grid.size());
  for (std::size_t a = grid.size(); a-- > 0;) {
    c[a] = flat % grid[a];
    flat /= grid[a];
  }
  return c;
}

}  // namespace

void DatasetConfig::validate() const {
  if (n_cases == 0) throw ConfigError("dataset needs at least one case");
  if (grid.size() != 2 && grid.size() != 3) throw ConfigError("dataset grid must be 2D or 3D");
  if (spacing.size() != grid.size()) throw ConfigError("spacing rank does not match grid");
  for (std::size_t e : grid) {
    if (e < 4) throw ConfigError("dataset extents must be at least 4");
  }
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("spacing must be finite and positive");
  }
  if (classes == 0) throw ConfigError("dataset needs at least one foreground class");
  if (min_blobs == 0 || min_blobs > max_blobs) throw ConfigError("blob count range is empty");
  if (!(min_radius > 0.0) || min_radius > max_radius || max_radius > 0.5) {
    throw ConfigError("radius range must satisfy 0 < min <= max <= 0.5");
  }
  if (!(noise_sd >= 0.0) || !(intensity_step > 0.0)) throw ConfigError("bad intensity parameters");
}

std::vector<Case> gen_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  const std::size_t rank = cfg.grid.size();
  const std::size_t total = numel(cfg.grid);
  std::vector<Case> out;
  out.reserve(cfg.n_cases);
  for (std::size_t n = 0; n < cfg.n_cases; ++n) {
    RngStream rng(cfg.seed, n);
    LabelVolume labels(cfg.grid, cfg.spacing);
    bool covered = false;
    for (std::size_t attempt = 0; attempt <= cfg.max_retries && !covered; ++attempt) {
      std::fill(labels.labels.begin(), labels.labels.end(), Label{0});
      for (std::size_t c = 1; c <= cfg.classes; ++c) {
        const std::size_t blobs = cfg.min_blobs + rng.below(cfg.max_blobs - cfg.min_blobs + 1);
        for (std::size_t b = 0; b < blobs; ++b) {
          std::vector<double> centre(rank), radius(rank);
          for (std::size_t a = 0; a < rank; ++a) {
            const double extent = double(cfg.grid[a]);
            radius[a] = std::max(1.0, rng.uniform(cfg.min_radius, cfg.max_radius) * extent);
            centre[a] = rng.uniform(radius[a], extent - radius[a]);
          }
          for (std::size_t i = 0; i < total; ++i) {
            const auto x = coords_of(cfg.grid, i);
            double r = 0.0;
            for (std::size_t a = 0; a < rank; ++a) {
              const double t = (double(x[a]) + 0.5 - centre[a]) / radius[a];
              r += t * t;
            }
            if (r <= 1.0) labels.labels[i] = Label(c);
          }
        }
      }
      std::vector<std::size_t> counts(cfg.classes + 1, 0);
      for (Label l : labels.labels) ++counts[l];
      covered = std::all_of(counts.begin() + 1, counts.end(),
                            [&](std::size_t k) { return k >= cfg.min_class_voxels; });
    }
    if (!covered) {
      throw GenerationError("case " + std::to_string(n) + ": could not place every class after " +
                            std::to_string(cfg.max_retries) + " retries");
    }
    Shape shape{1};
    shape.insert(shape.end(), cfg.grid.begin(), cfg.grid.end());
    std::vector<double> image(total);
    for (std::size_t i = 0; i < total; ++i) {
      image[i] = double(labels.labels[i]) * cfg.intensity_step + rng.normal(0.0, cfg.noise_sd);
    }
    out.push_back({Tensor(shape, std::move(image)), std::move(labels)});
  }
  return out;
}

std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw UsageError("kfold_split needs k >= 1");
  if (k > n) throw UsageError("kfold_split: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  RngStream rng(seed, stream_key("kfold"));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<Fold> folds(k);
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    std::vector<char> in_val(n, 0);
    for (std::size_t j = start; j < start + size; ++j) in_val[perm[j]] = 1;
    folds[f].val.assign(perm.begin() + std::ptrdiff_t(start), perm.begin() + std::ptrdiff_t(start + size));
    std::sort(folds[f].val.begin(), folds[f].val.end());
    for (std::size_t i = 0; i < n; ++i) {
      if (!in_val[i]) folds[f].train.push_back(i);
    }
    start += size;
  }
  return folds;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0) || !(weight_decay >= 0.0)) throw ConfigError("bad learning rate or weight decay");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw ConfigError("bad AdamW moments");
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction outside [0, 1]");
  if (!(tolerance_mm >= 0.0)) throw ConfigError("tolerance must be non-negative");
  if (patch.empty()) throw ConfigError("patch size is empty");
}

Tensor dice_ce_loss(const Tensor& logits, const LabelVolume& labels) {
  const std::size_t classes = logits.dim(0);
  const std::size_t voxels = logits.numel() / classes;
  if (classes < 2) throw UsageError("dice_ce_loss needs at least two output channels");
  if (labels.size() != voxels) throw ShapeError("labels do not match logits " + to_string(logits.shape()));
  const Tensor lsm = reshape(log_softmax(logits, 0), {classes, voxels});

  auto target = std::make_shared<std::vector<std::size_t>>(voxels);
  std::vector<double> onehot(classes * voxels, 0.0), counts(classes, 0.0);
  for (std::size_t v = 0; v < voxels; ++v) {
    const std::size_t c = labels.labels[v];
    if (c >= classes) throw UsageError("label " + std::to_string(c) + " has no output channel");
    (*target)[v] = c * voxels + v;
    onehot[c * voxels + v] = 1.0;
    counts[c] += 1.0;
  }
  const Tensor ce = neg(mean(gather(reshape(lsm, {classes * voxels}), target, {voxels})));

  const Tensor probs = exp(lsm);
  const Tensor inter = sum(probs * Tensor({classes, voxels}, std::move(onehot)), 1);
  const Tensor denom = sum(probs, 1) + Tensor({classes}, std::move(counts));
  constexpr double kSmooth = 1.0;
  // (2I + s) / (|P| + |G| + s) in log space.
  const Tensor ratio = exp(log(add_scalar(inter * 2.0, kSmooth)) - log(add_scalar(denom, kSmooth)));
  auto fg = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t c = 1; c < classes; ++c) fg->push_back(c);
  const Tensor soft_dice = mean(gather(ratio, fg, {classes - 1}));
  return add_scalar(ce - soft_dice, 1.0);
}

LabelVolume predict_labels(const Tensor& logits, const std::vector<double>& spacing) {
  const std::size_t classes = logits.dim(0);
  const Shape grid(logits.shape().begin() + 1, logits.shape().end());
  const std::size_t voxels = numel(grid);
  LabelVolume out(grid, spacing);
  const auto data = logits.data();
  for (std::size_t v = 0; v < voxels; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (data[c * voxels + v] > data[best * voxels + v]) best = c;
    }
    out.labels[v] = Label(best);
  }
  return out;
}

namespace {

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const TrainConfig& tc) : params_(std::move(params)), tc_(tc) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const kernels::AdamWStep st{lr,
                                tc_.beta1,
                                tc_.beta2,
                                tc_.adam_eps,
                                tc_.weight_decay,
                                1.0 - std::pow(tc_.beta1, double(t_)),
                                1.0 - std::pow(tc_.beta2, double(t_))};
    std::vector<double> next;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto g = params_[i].grad();
      const auto w = params_[i].data();
      next.assign(w.begin(), w.end());
      kernels::active().adamw(st, next.data(), g.data(), m_[i].data(), v_[i].data(), next.size());
      for (double x : next) {
        if (!std::isfinite(x)) throw NumericError("non-finite parameter after AdamW update");
      }
      params_[i].assign(next);
    }
  }

 private:
  std::vector<Tensor> params_;
  const TrainConfig& tc_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

GraphParams detached(const GraphParams& params) {
  GraphParams out;
  for (const auto& [id, block] : params) {
    BlockParams copy = block;
    for (const auto& [name, t] : block.entries()) copy.set(name, t.detach());
    out.emplace(id, std::move(copy));
  }
  return out;
}

}  // namespace

TrainResult train(const ArchGraph& g, const std::vector<Case>& data, const std::vector<Fold>& folds,
                  const TrainConfig& tc) {
  tc.validate();
  if (data.empty()) throw UsageError("train needs data");
  const Shape& grid = data.front().labels.grid;
  if (tc.patch != grid) {
    throw ConfigError("patch " + to_string(tc.patch) + " must equal the dataset grid " + to_string(grid));
  }
  if (grid.size() != g.dim()) throw ConfigError("dataset rank does not match model dimension");
  const Shape input = data.front().image.shape();
  const ShapeAnnotation ann = infer_shapes(g, input);
  const std::size_t classes = ann.output[0];
  if (classes < 2) throw ConfigError("model must output at least two channels");

  TrainResult result;
  result.params = count_params(g, ann).total;
  const std::string key = g.name() + "|" + std::string(to_string(g.mode()));
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const Fold& fold = folds[f];
    for (std::size_t i : fold.train) {
      if (std::find(fold.val.begin(), fold.val.end(), i) != fold.val.end()) {
        throw UsageError("fold " + std::to_string(f) + " trains on validation case " + std::to_string(i));
      }
    }
    RngStream rng(tc.seed, stream_key(key + "|" + std::to_string(f)));
    const GraphParams params = init_params(g, ann, rng.fork(1));
    RngStream order_rng = rng.fork(2);
    AdamW opt(parameter_list(params), tc);

    FoldResult fr;
    fr.fold = f;
    const std::size_t per_epoch = (fold.train.size() + tc.batch_size - 1) / tc.batch_size;
    const std::size_t total_steps = per_epoch * tc.epochs;
    const std::size_t warmup =
        std::max<std::size_t>(1, std::size_t(std::ceil(tc.warmup_fraction * double(total_steps))));
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
      std::vector<std::size_t> order = fold.train;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
        const std::size_t end = std::min(order.size(), start + tc.batch_size);
        opt.zero_grad();
        for (std::size_t j = start; j < end; ++j) {
          const Case& c = data[order[j]];
          double value = 0.0;
          try {
            const Tensor loss = dice_ce_loss(execute(g, ann, c.image, params), c.labels) * (1.0 / double(end - start));
            value = loss.item();
            if (!std::isfinite(value)) throw NumericError("loss is not finite");
            backward(loss);
          } catch (const NumericError& e) {
            throw TrainingError(std::string("divergence: ") + e.what(), epoch, f);
          }
          epoch_loss += value * double(end - start);
        }
        const double lr = tc.lr * std::min(1.0, double(step + 1) / double(warmup));
        try {
          opt.step(lr);
        } catch (const NumericError& e) {
          throw TrainingError(std::string("divergence: ") + e.what(), epoch, f);
        }
        ++step;
      }
      fr.epoch_loss.push_back(epoch_loss / double(order.size()));
    }
    fr.steps = step;

    const GraphParams frozen = detached(params);
    std::vector<double> dsc(classes - 1, 0.0), sdc(classes - 1, 0.0);
    for (std::size_t i : fold.val) {
      const Case& c = data[i];
      LabelVolume pred;
      try {
        pred = predict_labels(execute(g, ann, c.image, frozen), c.labels.spacing);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("divergence in validation: ") + e.what(), tc.epochs ? tc.epochs - 1 : 0, f);
      }
      const MetricResult m = evaluate(pred, c.labels, classes - 1, tc.tolerance_mm);
      for (std::size_t k = 0; k + 1 < classes; ++k) {
        dsc[k] += m.dsc[k] / double(fold.val.size());
        sdc[k] += m.sdc[k] / double(fold.val.size());
      }
    }
    fr.val.dsc = dsc;
    fr.val.sdc = sdc;
    for (std::size_t k = 0; k + 1 < classes; ++k) {
      fr.val.mean_dsc += dsc[k] / double(classes - 1);
      fr.val.mean_sdc += sdc[k] / double(classes - 1);
    }
    result.folds.push_back(std::move(fr));
  }
  return result;
}

ModeRow summarize(const TrainResult& r) {
  ModeRow row;
  row.params = r.params;
  for (const auto& f : r.folds) {
    row.fold_dsc.push_back(100.0 * f.val.mean_dsc);
    row.fold_sdc.push_back(100.0 * f.val.mean_sdc);
  }
  if (!row.fold_dsc.empty()) {
    row.dsc = aggregate_folds(row.fold_dsc);
    row.sdc = aggregate_folds(row.fold_sdc);
  }
  return row;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  const std::vector<Case> data = gen_dataset(cfg.data);
  const std::vector<Fold> folds = kfold_split(data.size(), cfg.folds, cfg.train.seed);
  Shape input{1};
  input.insert(input.end(), cfg.data.grid.begin(), cfg.data.grid.end());
  ExperimentReport report;
  for (const auto& id : cfg.models) {
    ModelReport row;
    row.model = id;
    const ArchGraph g = build_model(id, Scale::kToy);
    const bool has_transformer = !find_transformer_nodes(g).empty();
    std::optional<ArchGraph> a;
    try {
      if (has_transformer) {
        a = ablate(g);
        const CompatReport compat = verify_compat(g, *a, input);
        if (!compat.ok) {
          row.error = "compat failure: " + compat.first_mismatch;
          report.models.push_back(std::move(row));
          continue;
        }
      }
      infer_shapes(g, input);
    } catch (const ShapeError& e) {
      row.error = e.what();
      report.models.push_back(std::move(row));
      continue;
    }
    if (cfg.run_standard) row.standard = summarize(train(g, data, folds, cfg.train));
    if (a && cfg.run_ablated) row.ablated = summarize(train(*a, data, folds, cfg.train));
    if (a) row.ratio = param_ratio(g, *a, input);
    report.models.push_back(std::move(row));
  }
  return report;
}

std::string format_fixed(double value, int decimals) {
  double scale = 1.0;
  for (int i = 0; i < decimals; ++i) scale *= 10.0;
  const long long n = std::llround(value * scale);  // half away from zero
  const long long whole = std::llabs(n) / static_cast<long long>(scale);
  const long long frac = std::llabs(n) % static_cast<long long>(scale);
  std::string out = n < 0 ? "-" : "";
  out += std::to_string(whole);
  if (decimals > 0) {
    std::string digits = std::to_string(frac);
    out += "." + std::string(std::size_t(decimals) - digits.size(), '0') + digits;
  }
  return out;
}

std::string format_mean_sd(const MeanSd& v) {
  return format_fixed(v.mean, 1) + " ± " + format_fixed(v.sd, 1);
}

namespace {

// Display width, counting each UTF-8 code point once.
std::size_t width(const std::string& s) {
  std::size_t w = 0;
  for (unsigned char ch : s) w += (ch & 0xC0) != 0x80;
  return w;
}

std::string pad(const std::string& s, std::size_t w) { return s + std::string(w > width(s) ? w - width(s) : 0, ' '); }

std::string full(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

std::string emit_report(const ExperimentReport& r, ReportFormat format) {
  std::ostringstream out;
  if (format == ReportFormat::kCsv) {
    out << "model,row,dsc_mean,dsc_sd,sdc_mean,sdc_sd,params_m,ratio,note\n";
    for (const auto& m : r.models) {
      const std::string model = csv_field(m.model);
      if (!m.error.empty()) {
        out << model << ",error,,,,,,," << csv_field(m.error) << "\n";
        continue;
      }
      auto mode = [&](const char* name, const ModeRow& row) {
        out << model << "," << name << "," << full(row.dsc.mean) << "," << full(row.dsc.sd) << ","
            << full(row.sdc.mean) << "," << full(row.sdc.sd) << "," << full(double(row.params) / 1e6) << ",,\n";
      };
      if (m.standard) mode("S", *m.standard);
      if (m.ablated) mode("Abl", *m.ablated);
      if (m.standard && m.ablated) {
        out << model << ",Diff," << full(m.standard->dsc.mean - m.ablated->dsc.mean) << ",,"
            << full(m.standard->sdc.mean - m.ablated->sdc.mean) << ",,," << (m.ratio ? full(*m.ratio) : "")
            << ",\n";
      }
    }
    return out.str();
  }

  std::vector<std::array<std::string, 4>> rows;
  rows.push_back({"Model", "DSC", "SDC", "Pars (Mi)"});
  std::vector<bool> rule_after{true};
  for (const auto& m : r.models) {
    if (!m.error.empty()) {
      rows.push_back({m.model, "aborted: " + m.error, "", ""});
      rule_after.push_back(true);
      continue;
    }
    auto mode = [&](const std::string& label, const ModeRow& row) {
      rows.push_back({label, format_mean_sd(row.dsc), format_mean_sd(row.sdc),
                      format_fixed(double(row.params) / 1e6, 3)});
      rule_after.push_back(false);
    };
    if (m.standard) mode(m.model + " (S)", *m.standard);
    if (m.ablated) mode(m.standard ? "Abl." : m.model + " (Abl.)", *m.ablated);
    if (m.standard && m.ablated) {
      rows.push_back({"Diff. / Ratio", format_fixed(m.standard->dsc.mean - m.ablated->dsc.mean, 1),
                      format_fixed(m.standard->sdc.mean - m.ablated->sdc.mean, 1),
                      m.ratio ? format_fixed(*m.ratio, 2) : ""});
      rule_after.push_back(false);
    }
    rule_after.back() = true;
  }
  std::array<std::size_t, 4> w{};
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < 4; ++c) w[c] = std::max(w[c], width(row[c]));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string line;
    for (std::size_t c = 0; c < 4; ++c) line += (c ? " | " : "") + pad(rows[i][c], w[c]);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << "\n";
    if (rule_after[i] && i + 1 < rows.size()) {
      std::string rule;
      for (std::size_t c = 0; c < 4; ++c) rule += (c ? "-+-" : "") + std::string(w[c], '-');
      out << rule << "\n";
    }
  }
  return out.str();
}

}  // namespace tabl
