// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   acceptance [config.json] [work_dir]

#include <chrono>
#include <cstdio>
#include <functional>

#include "gradcheck_suite.hpp"
#include "oracle_cases.hpp"
#include "sibling/config.hpp"
#include "sibling/pipeline.hpp"

using namespace sibling;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int n, const std::function<Verdict()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("error: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("criterion %d: %s  %s  (%.1fs)\n", n, v.pass ? "PASS" : "FAIL", v.detail.c_str(), s);
  std::fflush(stdout);
  failures += v.pass ? 0 : 1;
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const ReportRow& row(const EvalReport& r, const std::string& arm, const std::string& target) {
  for (const auto& x : r.rows)
    if (x.algorithm == arm && x.target == target) return x;
  throw Error(ErrorCode::kArgument, "no report row " + arm + "/" + target);
}

double pred_total(const ReportRow& r) {
  double s = 0;
  for (double v : r.pred_diff) s += v;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config_path = argc > 1 ? argv[1] : SIBLING_DEFAULT_CONFIG;
  const fs::path work = argc > 2 ? argv[2] : fs::path("acceptance_out");
  ExperimentConfig cfg = parse_config(config_path);
  cfg.output_dir = (work / "run_w1").string();
  ExperimentConfig cfg4 = cfg;
  cfg4.output_dir = (work / "run_w4").string();
  fs::remove_all(work);

  criterion(1, [] {
    double worst = 0;
    std::string at;
    auto cases = test::op_cases();
    cases.push_back(test::adv_loss_case(Branch::kFr));
    cases.push_back(test::adv_loss_case(Branch::kAr));
    for (const auto& c : cases) {
      const double e = test::worst_error(c, 100, 1234);
      if (e >= worst) {
        worst = e;
        at = c.name;
      }
    }
    return Verdict{worst < 1e-4, std::to_string(cases.size()) + " cases x 100 trials, worst rel err " +
                                     num(worst * 1e6, 2) + "e-6 (" + at + ")"};
  });

  criterion(2, [] {
    std::size_t ok = 0;
    for (std::uint64_t k = 0; k < 10; ++k) {
      const auto o = test::run_oracle_case(k);
      ok += o.eps_equal && o.x_adv_equal && o.losses_equal;
    }
    return Verdict{ok == 10, std::to_string(ok) + "/10 toy cases bitwise equal to the reference"};
  });

  // Full default pipeline with in-loop checks. The later criteria read its outputs.
  EvalReport report;
  criterion(3, [&] {
    cmd_gen_data(cfg);
    cmd_train(cfg, 1);
    cmd_calibrate(cfg);
    std::size_t checks = 0, bad = 0, pairs = 0;
    const Dataset ds = load_dataset(paths_for(cfg));
    for (const auto& arm : cfg.eval.algorithms) {
      const auto run = cmd_attack(cfg, arm, 1, true);
      checks += run.invariant_checks;
      const auto& a = run.archive;
      for (std::size_t i = 0; i < a.pairs.size(); ++i, ++pairs) {
        const Tensor& x_a = ds.samples.at(a.pairs[i].attacker).image;
        for (std::size_t j = 0; j < x_a.size(); ++j) {
          const double e = a.eps[i][j], x = x_a[j] + e;
          bad += std::abs(e) > cfg.attack.xi || x < 0.0 || x > 1.0 || a.x_adv[i][j] != x;
        }
      }
    }
    report = cmd_evaluate(cfg);
    return Verdict{bad == 0 && checks > 0,
                   std::to_string(cfg.eval.algorithms.size()) + " arms, " + std::to_string(pairs) +
                       " attacks, " + std::to_string(checks) + " in-loop checks, " +
                       std::to_string(bad) + " final violations"};
  });

  criterion(4, [&] {
    const ModelSet m = load_models(cfg);
    const Dataset ds = load_dataset(paths_for(cfg));
    const auto pairs = attack_pairs(cfg, ds);
    const auto& p = pairs.pairs.at(0);
    const Tensor& x_a = ds.samples[p.attacker].image;
    const Tensor& x_v = ds.samples[p.victim].image;
    auto state = PerturbationState::start(x_a, x_v, cfg.attack.xi);
    const auto inner = branch_objective(m.surrogate, Branch::kFr, x_v);
    const double a = cfg.attack.alpha;
    const Tensor e1 = jtmo_inner_step(inner, state, a, 0.1);
    const bool g1 = test::bitwise_equal(e1, jtmo_inner_step(inner, state, a, 1.0)) &&
                    test::bitwise_equal(e1, jtmo_inner_step(inner, state, a, 7.3));
    InnerTrajectory traj;
    for (std::size_t i = 0; i < cfg.attack.N; ++i) {
      state.eps = jtmo_inner_step(inner, state, a, cfg.attack.gamma1);
      traj.snapshots.push_back(state.eps);
    }
    const auto outer = branch_objective(m.surrogate, Branch::kAr, x_v);
    auto step = [&](double g2, double g3) {
      return ctgs_outer_step(outer, state, traj, a, g2, g3);
    };
    const Tensor e2 = step(0.9, 0.01);
    const bool g2 = test::bitwise_equal(e2, step(2.0, 0.01)) && test::bitwise_equal(e2, step(100.0, 0.01));
    std::size_t differ = 0;
    const Tensor lo = step(0.9, 0.01), hi = step(0.9, 10.0);
    for (std::size_t i = 0; i < lo.size(); ++i) differ += lo[i] != hi[i];
    return Verdict{g1 && g2 && differ > 0,
                   std::string("gamma1 ") + (g1 ? "invariant" : "NOT invariant") + ", gamma2 " +
                       (g2 ? "invariant" : "NOT invariant") + ", gamma3 0.01 vs 10 differs on " +
                       std::to_string(differ) + " pixels"};
  });

  criterion(5, [&] {
    const double v = row(report, "sibling", kSurrogateId).asr;
    return Verdict{v >= 0.95, "sibling surrogate ASR " + num(v)};
  });

  criterion(6, [&] {
    const auto& t = cfg.eval.held_out_target;
    const double s = row(report, "sibling", t).asr, p = row(report, "pgd_single", t).asr,
                 b = row(report, "basic_joint", t).asr, j = row(report, "jtmo", t).asr;
    const bool ok = s - p >= 0.05 && s > p && s - b >= 0.05 && j >= b;
    return Verdict{ok, t + ": sibling " + num(s) + ", pgd_single " + num(p) + ", basic_joint " +
                           num(b) + ", jtmo " + num(j) + " (needs sibling-pgd >= .05, sibling-basic >= .05, jtmo >= basic)"};
  });

  criterion(7, [&] {
    const auto& t = cfg.eval.held_out_target;
    const double s = pred_total(row(report, "sibling", t)), p = pred_total(row(report, "pgd_single", t));
    return Verdict{s > p, cfg.eval.ar_target + " pred_diff sibling " + num(s, 2) + " vs pgd_single " + num(p, 2)};
  });

  criterion(8, [&] {
    Rng rng(8);
    std::size_t asr_ok = 0;
    for (int k = 0; k < 1000; ++k) {
      std::vector<double> s(1 + rng.below(50));
      for (double& v : s) v = std::round(rng.uniform() * 20) / 20;
      const double tau = std::round(rng.uniform() * 20) / 20;
      std::size_t c = 0;
      for (double v : s) c += v >= tau;
      asr_ok += asr(s, tau) == double(c) / double(s.size());
    }
    Tensor x(Shape{16, 16, 1}), a(Shape{16, 16, 1}), b(Shape{16, 16, 1});
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = rng.uniform();
      a[i] = 0.2;
      b[i] = 0.8;
    }
    const double self = ssim(x, x), constant = ssim(a, b);
    // Recount every calibrated threshold of the pipeline run.
    const ModelSet m = load_models(cfg);
    const Dataset ds = load_dataset(paths_for(cfg));
    const auto pairs = calibration_pairs(cfg, ds);
    bool fpr_ok = true;
    std::string fprs;
    for (const FaceRecognizer* fr : m.scored_fr()) {
      const auto cal = load_calibration(cfg, fr->model_id());
      const auto scores = pair_scores(*fr, ds, pairs);
      const double realized = fraction_at_or_above(scores, cal.tau);
      fpr_ok = fpr_ok && realized <= cal.target_fpr + 1.0 / double(scores.size());
      fprs += " " + fr->model_id() + "=" + num(realized);
    }
    const bool ok = asr_ok == 1000 && std::abs(self - 1.0) <= 1e-9 &&
                    std::abs(constant - 0.4707) <= 1e-4 && fpr_ok;
    return Verdict{ok, "asr " + std::to_string(asr_ok) + "/1000, ssim(x,x)=" + num(self, 12) +
                           ", constant pair " + num(constant, 5) + ", realized fpr" + fprs};
  });

  criterion(9, [&] {
    run_pipeline(cfg4, 4);
    const std::string a = read_file(paths_for(cfg).report_csv());
    const std::string b = read_file(paths_for(cfg4).report_csv());
    std::size_t same = 0;
    for (const auto& arm : cfg.eval.algorithms)
      same += read_file(paths_for(cfg).archive(arm)) == read_file(paths_for(cfg4).archive(arm));
    return Verdict{a == b && same == cfg.eval.algorithms.size(),
                   std::string("report.csv ") + (a == b ? "identical" : "DIFFERS") +
                       " for --workers 1 vs 4, archives identical " + std::to_string(same) + "/" +
                       std::to_string(cfg.eval.algorithms.size())};
  });

  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
