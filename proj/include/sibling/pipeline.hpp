#pragma once

// End-to-end experiment commands. Everything lives under the config's output
// directory:
//
//   dataset.sibw
//   models/{surrogate,fr_aux,<target ids>}.sibw, models/train_log.csv
//   calibration/<model id>.json
//   attacks/<arm>.sibw, attacks/<arm>_loss.csv, attacks/<arm>_timing.json
//   report/report.csv, report/report.md
//   report/<arm>/pair_NNN_{perturbation,saliency_F,saliency_A}.pgm
//   report/<arm>_loss.txt, report/control_zero.pgm
//
// Every file except *_timing.json is a pure function of the config.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sibling/attack.hpp"
#include "sibling/config.hpp"
#include "sibling/container.hpp"
#include "sibling/eval.hpp"
#include "sibling/models.hpp"
#include "sibling/synthface.hpp"

namespace sibling {

namespace fs = std::filesystem;

inline const std::vector<std::size_t>& aux_fr_widths() {
  static const std::vector<std::size_t> w{128, 64, 48, 32};
  return w;
}

inline constexpr const char* kAuxFrId = "fr_aux";
inline constexpr const char* kSurrogateId = "surrogate";

struct Paths {
  fs::path root;

  fs::path dataset() const { return root / "dataset.sibw"; }
  fs::path model(const std::string& id) const {
    return root / "models" / (id + ".sibw");
  }
  fs::path train_log() const { return root / "models" / "train_log.csv"; }
  fs::path calibration(const std::string& id) const {
    return root / "calibration" / (id + ".json");
  }
  fs::path archive(const std::string& arm) const {
    return root / "attacks" / (arm + ".sibw");
  }
  fs::path loss_csv(const std::string& arm) const {
    return root / "attacks" / (arm + "_loss.csv");
  }
  fs::path timing(const std::string& arm) const {
    return root / "attacks" / (arm + "_timing.json");
  }
  fs::path report_dir() const { return root / "report"; }
  fs::path report_csv() const { return report_dir() / "report.csv"; }
  fs::path report_md() const { return report_dir() / "report.md"; }
};

inline Paths paths_for(const ExperimentConfig& c) { return Paths{c.output_dir}; }

// ---------------------------------------------------------------------------
// Helpers

/// Runs fn(i) for i in [0, n) on `workers` threads. Each index writes only its
/// own output slot, so results do not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  // Report the lowest failing index so the error is deterministic too.
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline void require_file(const fs::path& p, const std::string& what,
                         const std::string& hint) {
  if (!fs::exists(p)) {
    throw Error(ErrorCode::kMissing,
                "missing " + what + " (" + p.string() + "); run " + hint + " first");
  }
}

// ---------------------------------------------------------------------------
// Dataset cache

inline std::vector<NamedTensor> dataset_to_tensors(const Dataset& ds) {
  const std::size_t n = ds.samples.size();
  Tensor images(Shape{n, kImageSide, kImageSide, 1});
  Tensor ids(Shape{n});
  Tensor attrs(Shape{n, kNumAttributes});
  Tensor variation(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.samples[i];
    std::copy(s.image.data().begin(), s.image.data().end(),
              images.data().begin() + std::ptrdiff_t(i * kImagePixels));
    ids[i] = double(s.id_index);
    for (std::size_t j = 0; j < kNumAttributes; ++j) {
      attrs[i * kNumAttributes + j] = double(s.attributes[j]);
    }
    variation[i] = double(s.variation_seed);
  }
  auto as_tensor = [](const std::vector<std::size_t>& v) {
    Tensor t(Shape{v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = double(v[i]);
    return t;
  };
  return {
      {"meta", Tensor::vector({double(ds.seed), double(ds.n_identities),
                               double(ds.samples_per_identity)})},
      {"images", images},
      {"id_index", ids},
      {"attributes", attrs},
      {"variation_seed", variation},
      {"train_ids", as_tensor(ds.train_ids)},
      {"heldout_ids", as_tensor(ds.heldout_ids)},
  };
}

inline Dataset dataset_from_tensors(const std::vector<NamedTensor>& ts) {
  const Tensor& meta = find_tensor(ts, "meta");
  if (meta.size() != 3) throw Error(ErrorCode::kFormat, "dataset: bad meta");
  Dataset ds;
  ds.seed = std::uint64_t(meta[0]);
  ds.n_identities = std::size_t(meta[1]);
  ds.samples_per_identity = std::size_t(meta[2]);
  const std::size_t n = ds.n_identities * ds.samples_per_identity;
  const Tensor& images = find_tensor(ts, "images");
  const Tensor& ids = find_tensor(ts, "id_index");
  const Tensor& attrs = find_tensor(ts, "attributes");
  const Tensor& variation = find_tensor(ts, "variation_seed");
  if (images.size() != n * kImagePixels || ids.size() != n ||
      attrs.size() != n * kNumAttributes || variation.size() != n) {
    throw Error(ErrorCode::kFormat, "dataset: inconsistent tensor sizes");
  }
  for (std::size_t i = 0; i < n; ++i) {
    FaceSample s;
    s.image = Tensor(image_shape(),
                     std::vector<double>(images.data().begin() +
                                             std::ptrdiff_t(i * kImagePixels),
                                         images.data().begin() +
                                             std::ptrdiff_t((i + 1) * kImagePixels)));
    s.id_index = std::size_t(ids[i]);
    for (std::size_t j = 0; j < kNumAttributes; ++j) {
      s.attributes[j] = attrs[i * kNumAttributes + j] != 0.0;
    }
    s.variation_seed = std::uint64_t(variation[i]);
    ds.samples.push_back(std::move(s));
  }
  auto as_ids = [](const Tensor& t) {
    std::vector<std::size_t> v;
    for (double x : t.data()) v.push_back(std::size_t(x));
    return v;
  };
  ds.train_ids = as_ids(find_tensor(ts, "train_ids"));
  ds.heldout_ids = as_ids(find_tensor(ts, "heldout_ids"));
  return ds;
}

inline Dataset load_dataset(const Paths& p) {
  require_file(p.dataset(), "dataset", "gen-data");
  return dataset_from_tensors(load_container(p.dataset()));
}

// ---------------------------------------------------------------------------
// Models

struct ModelSet {
  SurrogateModel surrogate;
  TargetModel fr_aux;
  std::vector<TargetModel> targets;  // config order

  const TargetModel& target(const std::string& id) const {
    for (const auto& t : targets) {
      if (t.model_id() == id) return t;
    }
    throw Error(ErrorCode::kConfig, "no target model named '" + id + "'");
  }

  /// Face recognizers scored in the report, surrogate first.
  std::vector<const FaceRecognizer*> scored_fr() const {
    std::vector<const FaceRecognizer*> out{&surrogate};
    for (const auto& t : targets) {
      if (t.kind() == TargetKind::kFaceRecognition) out.push_back(&t);
    }
    return out;
  }
};

inline ModelSet load_models(const ExperimentConfig& c) {
  const Paths p = paths_for(c);
  auto need = [&](const std::string& id) {
    require_file(p.model(id), "weights for '" + id + "'", "train");
    return p.model(id);
  };
  ModelSet m;
  m.surrogate = load_surrogate(need(kSurrogateId));
  m.fr_aux = load_target(need(kAuxFrId), kAuxFrId);
  for (const auto& t : c.models.targets) {
    m.targets.push_back(load_target(need(t.id), t.id));
    if (m.targets.back().kind() != t.kind) {
      throw Error(ErrorCode::kFormat, "weights for '" + t.id + "' have the wrong kind");
    }
  }
  return m;
}

inline PairSet calibration_pairs(const ExperimentConfig& c, const Dataset& ds) {
  return sample_pairs(ds, c.eval.n_calibration_pairs, PairKind::kImpostor,
                      c.eval.calibration_seed, ds.heldout_ids);
}

inline PairSet attack_pairs(const ExperimentConfig& c, const Dataset& ds) {
  return sample_pairs(ds, c.eval.n_attack_pairs, PairKind::kImpostor,
                      c.eval.pair_seed, ds.heldout_ids);
}

// ---------------------------------------------------------------------------
// gen-data / train / calibrate

inline void cmd_gen_data(const ExperimentConfig& c) {
  const Dataset ds = make_dataset(c.dataset.seed, c.dataset.n_identities,
                                  c.dataset.samples_per_identity);
  save_container(paths_for(c).dataset(), dataset_to_tensors(ds));
}

/// Trains every model; `workers` > 1 trains models concurrently (each model
/// is still trained single-threaded, so weights do not depend on it).
inline void cmd_train(const ExperimentConfig& c, std::size_t workers = 1) {
  const Paths p = paths_for(c);
  const Dataset ds = load_dataset(p);
  TrainOptions opt;
  opt.epochs = c.models.epochs;
  opt.lr = c.models.lr;
  opt.batch_size = c.models.batch_size;
  opt.seed = c.models.train_seed;

  const std::size_t n_models = 2 + c.models.targets.size();
  std::vector<std::string> ids(n_models);
  std::vector<TrainResult> logs(n_models);
  parallel_for(n_models, workers, [&](std::size_t i) {
    if (i == 0) {
      SurrogateModel m = build_surrogate(c.models.surrogate_seed);
      logs[i] = train_surrogate(m, ds, opt);
      ids[i] = kSurrogateId;
      save_weights(m, p.model(ids[i]));
      return;
    }
    TargetModel m =
        i == 1 ? TargetModel::build(kAuxFrId, TargetKind::kFaceRecognition,
                                    aux_fr_widths(), c.models.aux_fr_seed)
               : TargetModel::build(c.models.targets[i - 2].id,
                                    c.models.targets[i - 2].kind,
                                    c.models.targets[i - 2].widths,
                                    c.models.targets[i - 2].seed);
    logs[i] = train_target(m, ds, opt);
    ids[i] = m.model_id();
    save_weights(m, p.model(ids[i]));
  });

  std::string csv = "model,epoch,loss\n";
  for (std::size_t i = 0; i < n_models; ++i) {
    for (std::size_t e = 0; e < logs[i].epoch_loss.size(); ++e) {
      csv += ids[i] + "," + std::to_string(e + 1) + "," +
             fmt(logs[i].epoch_loss[e], 9) + "\n";
    }
  }
  write_file(p.train_log(), csv);
}

inline std::string calibration_json(const ThresholdCalibration& cal) {
  nlohmann::json j{{"model_id", cal.model_id},
                   {"tau", cal.tau},
                   {"target_fpr", cal.target_fpr},
                   {"n", cal.n_impostor_pairs},
                   {"realized_fpr", cal.realized_fpr}};
  return j.dump(2) + "\n";
}

inline ThresholdCalibration parse_calibration(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ThresholdCalibration cal;
    cal.model_id = j.at("model_id").get<std::string>();
    cal.tau = j.at("tau").get<double>();
    cal.target_fpr = j.at("target_fpr").get<double>();
    cal.n_impostor_pairs = j.at("n").get<std::size_t>();
    cal.realized_fpr = j.at("realized_fpr").get<double>();
    return cal;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("calibration: ") + e.what());
  }
}

/// Calibrates the surrogate and every FR target on held-out impostor pairs.
inline std::vector<ThresholdCalibration> cmd_calibrate(const ExperimentConfig& c) {
  const Paths p = paths_for(c);
  const ModelSet models = load_models(c);
  const Dataset ds = load_dataset(p);
  const PairSet pairs = calibration_pairs(c, ds);
  std::vector<ThresholdCalibration> out;
  for (const FaceRecognizer* m : models.scored_fr()) {
    out.push_back(calibrate_threshold(*m, ds, pairs, c.eval.target_fpr));
    write_file(p.calibration(out.back().model_id), calibration_json(out.back()));
  }
  return out;
}

inline ThresholdCalibration load_calibration(const ExperimentConfig& c,
                                             const std::string& id) {
  const auto path = paths_for(c).calibration(id);
  require_file(path, "calibration for '" + id + "'", "calibrate");
  return parse_calibration(read_file(path));
}

// ---------------------------------------------------------------------------
// attack

struct AttackArchive {
  std::string arm;
  std::vector<SamplePair> pairs;
  std::vector<Tensor> x_adv;
  std::vector<Tensor> eps;
  double xi = 0.0;
};

inline AttackResult run_arm(const std::string& arm, const ModelSet& models,
                            const Tensor& x_a, const Tensor& x_v,
                            const AttackConfig& cfg) {
  const std::vector<const FaceRecognizer*> single{&models.surrogate};
  const std::vector<const FaceRecognizer*> ensemble{&models.surrogate,
                                                    &models.fr_aux};
  if (arm == "pgd_single") return pgd_attack(single, x_a, x_v, cfg);
  if (arm == "pgd_ensemble") return pgd_attack(ensemble, x_a, x_v, cfg);
  if (arm == "mifgsm") return mifgsm_attack(single, x_a, x_v, cfg);
  if (arm == "basic_joint") return basic_joint_attack(models.surrogate, x_a, x_v, cfg);
  if (arm == "jtmo" || arm == "sibling") {
    return sibling_attack(models.surrogate, x_a, x_v, cfg);
  }
  throw Error(ErrorCode::kArgument, "unknown algorithm '" + arm + "'");
}

inline std::vector<NamedTensor> archive_to_tensors(const AttackArchive& a) {
  const std::size_t n = a.pairs.size();
  Tensor pairs(Shape{n, 2});
  Tensor x(Shape{n, kImageSide, kImageSide, 1});
  Tensor e(Shape{n, kImageSide, kImageSide, 1});
  for (std::size_t i = 0; i < n; ++i) {
    pairs[2 * i] = double(a.pairs[i].attacker);
    pairs[2 * i + 1] = double(a.pairs[i].victim);
    std::copy(a.x_adv[i].data().begin(), a.x_adv[i].data().end(),
              x.data().begin() + std::ptrdiff_t(i * kImagePixels));
    std::copy(a.eps[i].data().begin(), a.eps[i].data().end(),
              e.data().begin() + std::ptrdiff_t(i * kImagePixels));
  }
  return {{"meta", Tensor::vector({a.xi})}, {"pairs", pairs}, {"x_adv", x},
          {"eps", e}};
}

inline AttackArchive archive_from_tensors(const std::vector<NamedTensor>& ts,
                                          std::string arm) {
  AttackArchive a;
  a.arm = std::move(arm);
  a.xi = find_tensor(ts, "meta")[0];
  const Tensor& pairs = find_tensor(ts, "pairs");
  const Tensor& x = find_tensor(ts, "x_adv");
  const Tensor& e = find_tensor(ts, "eps");
  const std::size_t n = pairs.rank() == 2 ? pairs.dim(0) : 0;
  if (pairs.rank() != 2 || pairs.dim(1) != 2 || x.size() != n * kImagePixels ||
      e.size() != n * kImagePixels) {
    throw Error(ErrorCode::kFormat, "attack archive: inconsistent tensor sizes");
  }
  auto slice = [](const Tensor& t, std::size_t i) {
    return Tensor(image_shape(),
                  std::vector<double>(
                      t.data().begin() + std::ptrdiff_t(i * kImagePixels),
                      t.data().begin() + std::ptrdiff_t((i + 1) * kImagePixels)));
  };
  for (std::size_t i = 0; i < n; ++i) {
    a.pairs.push_back({std::size_t(pairs[2 * i]), std::size_t(pairs[2 * i + 1])});
    a.x_adv.push_back(slice(x, i));
    a.eps.push_back(slice(e, i));
  }
  return a;
}

inline AttackArchive load_archive(const ExperimentConfig& c, const std::string& arm) {
  const auto path = paths_for(c).archive(arm);
  require_file(path, "attack archive for '" + arm + "'", "attack --algorithm " + arm);
  return archive_from_tensors(load_container(path), arm);
}

/// Mean over pairs of each trace column, one row per iteration.
inline std::string loss_csv(const std::vector<std::vector<TracePoint>>& traces) {
  std::string out = "t,objective,loss_fr,loss_ar\n";
  if (traces.empty()) return out;
  const std::size_t len = traces.front().size();
  for (std::size_t t = 0; t < len; ++t) {
    double obj = 0.0, fr = 0.0, ar = 0.0;
    bool has_split = true;
    for (const auto& tr : traces) {
      obj += tr[t].objective;
      has_split = has_split && tr[t].loss_fr && tr[t].loss_ar;
      if (has_split) {
        fr += *tr[t].loss_fr;
        ar += *tr[t].loss_ar;
      }
    }
    const double n = double(traces.size());
    out += std::to_string(traces.front()[t].t) + "," + fmt(obj / n, 9) + ",";
    out += has_split ? fmt(fr / n, 9) + "," + fmt(ar / n, 9) : std::string("NA,NA");
    out += "\n";
  }
  return out;
}

struct AttackRun {
  AttackArchive archive;
  double runtime_s = 0.0;
  std::size_t invariant_checks = 0;
};

inline AttackRun cmd_attack(const ExperimentConfig& c, const std::string& arm,
                            std::size_t workers = 1,
                            bool check_invariants = false) {
  const Paths p = paths_for(c);
  AttackConfig cfg = c.attack_config(arm);
  cfg.check_invariants = check_invariants;
  const ModelSet models = load_models(c);
  const Dataset ds = load_dataset(p);
  const PairSet pairs = attack_pairs(c, ds);
  const std::size_t n = pairs.pairs.size();

  AttackRun run;
  run.archive.arm = arm;
  run.archive.xi = cfg.xi;
  run.archive.pairs = pairs.pairs;
  run.archive.x_adv.resize(n);
  run.archive.eps.resize(n);
  std::vector<std::vector<TracePoint>> traces(n);
  std::vector<std::size_t> checks(n);
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(n, workers, [&](std::size_t i) {
    const auto& pair = pairs.pairs[i];
    AttackResult r = run_arm(arm, models, ds.samples[pair.attacker].image,
                             ds.samples[pair.victim].image, cfg);
    run.archive.x_adv[i] = std::move(r.x_adv);
    run.archive.eps[i] = std::move(r.eps);
    traces[i] = std::move(r.trace);
    checks[i] = r.invariant_checks;
  });
  run.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (auto k : checks) run.invariant_checks += k;

  save_container(p.archive(arm), archive_to_tensors(run.archive));
  write_file(p.loss_csv(arm), loss_csv(traces));
  nlohmann::json timing{{"runtime_s", run.runtime_s}, {"workers", workers}};
  write_file(p.timing(arm), timing.dump(2) + "\n");
  return run;
}

// ---------------------------------------------------------------------------
// evaluate

inline std::string arm_label(const std::string& arm) {
  return arm == "jtmo" ? "jtmo (gamma3=0 interpretation)" : arm;
}

inline std::string report_csv(const EvalReport& r) {
  std::string out =
      "algorithm,target,asr,ssim,mse,pred_eye,pred_nose,pred_mouth,pred_other,"
      "runtime_s,seed\n";
  for (const auto& row : r.rows) {
    out += row.algorithm + "," + row.target + "," + fmt(row.asr) + "," +
           fmt(row.ssim) + "," + fmt(row.mse);
    for (double v : row.pred_diff) out += "," + fmt(v);
    out += "," + (row.runtime_s ? fmt(*row.runtime_s, 3) : std::string("NA"));
    out += "," + std::to_string(row.seed) + "\n";
  }
  return out;
}

inline std::string report_markdown(const EvalReport& r,
                                   const std::string& held_out_target) {
  std::string out = "# Attack report\n\nPrimary black-box target: `" +
                    held_out_target + "`.\n\n";
  out += "| algorithm | target | asr | ssim | mse | pred_eye | pred_nose | "
         "pred_mouth | pred_other |\n";
  out += "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& row : r.rows) {
    out += "| " + arm_label(row.algorithm) + " | " + row.target + " | " +
           fmt(row.asr, 3) + " | " + fmt(row.ssim, 3) + " | " + fmt(row.mse, 3);
    for (double v : row.pred_diff) out += " | " + fmt(v, 3);
    out += " |\n";
  }
  return out;
}

inline EvalReport cmd_evaluate(const ExperimentConfig& c) {
  const Paths p = paths_for(c);
  const ModelSet models = load_models(c);
  const Dataset ds = load_dataset(p);
  const TargetModel& ar = models.target(c.eval.ar_target);

  std::map<std::string, double> tau;
  for (const FaceRecognizer* m : models.scored_fr()) {
    tau[m->model_id()] = load_calibration(c, m->model_id()).tau;
  }

  EvalReport report;
  for (const auto& arm : c.eval.algorithms) {
    const AttackArchive a = load_archive(c, arm);
    std::optional<double> runtime;
    if (c.eval.include_runtime && fs::exists(p.timing(arm))) {
      runtime = nlohmann::json::parse(read_file(p.timing(arm))).at("runtime_s").get<double>();
    }
    const std::size_t n = a.pairs.size();
    double ssim_sum = 0.0, mse_sum = 0.0;
    std::vector<ImagePair> image_pairs;
    std::vector<const Tensor*> adv_imgs, victim_imgs;
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& x_a = ds.samples.at(a.pairs[i].attacker).image;
      ssim_sum += ssim(a.x_adv[i], x_a);
      mse_sum += mse(a.x_adv[i], x_a);
      image_pairs.push_back({&a.x_adv[i], &x_a});
      adv_imgs.push_back(&a.x_adv[i]);
      victim_imgs.push_back(&ds.samples.at(a.pairs[i].victim).image);
    }
    std::vector<double> pd;
    for (const auto& g : attribute_groups()) {
      pd.push_back(pred_diff(ar, image_pairs, g));
    }
    for (const FaceRecognizer* m : models.scored_fr()) {
      const Tensor ea = fr_embed_batch(*m, adv_imgs);
      const Tensor ev = fr_embed_batch(*m, victim_imgs);
      std::vector<double> scores;
      for (std::size_t i = 0; i < n; ++i) scores.push_back(row_cosine(ea, i, ev, i));
      ReportRow row;
      row.algorithm = arm;
      row.target = m->model_id();
      row.asr = asr(scores, tau.at(row.target));
      row.ssim = ssim_sum / double(n);
      row.mse = mse_sum / double(n);
      row.pred_diff = pd;
      row.runtime_s = runtime;
      row.seed = c.seed;
      report.rows.push_back(std::move(row));
    }
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const ReportRow& x, const ReportRow& y) {
              return std::tie(x.algorithm, x.target) < std::tie(y.algorithm, y.target);
            });
  write_file(p.report_csv(), report_csv(report));
  write_file(p.report_md(), report_markdown(report, c.eval.held_out_target));
  return report;
}

/// Parses report.csv back into rows (used by tests and the acceptance run).
inline EvalReport parse_report_csv(const std::string& text) {
  EvalReport r;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw Error(ErrorCode::kFormat, "report: bad row: " + line);
    ReportRow row;
    row.algorithm = f[0];
    row.target = f[1];
    row.asr = std::stod(f[2]);
    row.ssim = std::stod(f[3]);
    row.mse = std::stod(f[4]);
    for (int k = 5; k < 9; ++k) row.pred_diff.push_back(std::stod(f[k]));
    if (f[9] != "NA") row.runtime_s = std::stod(f[9]);
    row.seed = std::stoull(f[10]);
    r.rows.push_back(std::move(row));
  }
  return r;
}

// ---------------------------------------------------------------------------
// report

/// Text plot of a column from a loss CSV: one line per sampled iteration.
inline std::string ascii_trace(const std::string& csv, const std::string& arm) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::size_t, std::vector<double>>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 4) continue;
    std::vector<double> v{std::stod(f[1])};
    if (f[2] != "NA") {
      v.push_back(std::stod(f[2]));
      v.push_back(std::stod(f[3]));
    }
    rows.emplace_back(std::stoull(f[0]), v);
  }
  std::string out = "loss vs iteration, " + arm_label(arm) +
                    " (mean over pairs; o = objective, F = L_F, A = L_A)\n";
  if (rows.empty()) return out;
  double lo = rows.front().second[0], hi = lo;
  for (const auto& [t, v] : rows) {
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  const std::size_t width = 60;
  const std::size_t stride = std::max<std::size_t>(1, rows.size() / 40);
  for (std::size_t r = 0; r < rows.size(); r += stride) {
    std::string bar(width + 1, ' ');
    const char marks[] = {'o', 'F', 'A'};
    for (std::size_t k = rows[r].second.size(); k-- > 0;) {
      const double x = rows[r].second[k];
      const auto col = hi > lo ? std::size_t(std::lround((x - lo) / (hi - lo) * width)) : 0;
      bar[col] = marks[k];
    }
    char head[32];
    std::snprintf(head, sizeof head, "%5zu |", rows[r].first);
    out += head + bar + "\n";
  }
  out += "range [" + fmt(lo, 4) + ", " + fmt(hi, 4) + "]\n";
  return out;
}

struct ReportSummary {
  std::size_t perturbation_images = 0;
  std::size_t saliency_images = 0;
};

inline ReportSummary cmd_report(const ExperimentConfig& c) {
  const Paths p = paths_for(c);
  require_file(p.report_csv(), "evaluation report", "evaluate");
  const ModelSet models = load_models(c);
  const Dataset ds = load_dataset(p);
  ReportSummary s;
  const fs::path dir = p.report_dir();
  write_file(dir / "control_zero.pgm",
             encode_pgm(render_perturbation(Tensor(image_shape()), c.attack.xi)));
  for (const auto& arm : c.eval.algorithms) {
    const AttackArchive a = load_archive(c, arm);
    for (std::size_t i = 0; i < a.pairs.size(); ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "pair_%03zu", i);
      const fs::path base = dir / arm / stem;
      write_file(base.string() + "_perturbation.pgm",
                 encode_pgm(render_perturbation(a.eps[i], a.xi)));
      ++s.perturbation_images;
      const Tensor& x_v = ds.samples.at(a.pairs[i].victim).image;
      for (Branch b : {Branch::kFr, Branch::kAr}) {
        const Tensor map = saliency_map(models.surrogate, a.x_adv[i], x_v, b);
        write_file(base.string() + "_saliency_" + branch_name(b) + ".pgm",
                   encode_pgm(render_map(map)));
        ++s.saliency_images;
      }
    }
    const auto loss_path = p.loss_csv(arm);
    require_file(loss_path, "loss trace for '" + arm + "'", "attack --algorithm " + arm);
    const std::string csv = read_file(loss_path);
    write_file(dir / (arm + "_loss.csv"), csv);
    write_file(dir / (arm + "_loss.txt"), ascii_trace(csv, arm));
  }
  return s;
}

/// Runs gen-data through evaluate for the configured algorithms.
inline EvalReport run_pipeline(const ExperimentConfig& c, std::size_t workers) {
  cmd_gen_data(c);
  cmd_train(c, workers);
  cmd_calibrate(c);
  for (const auto& arm : c.eval.algorithms) cmd_attack(c, arm, workers);
  return cmd_evaluate(c);
}

}  // namespace sibling
