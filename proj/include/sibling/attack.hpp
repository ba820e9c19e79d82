#pragma once

// Impersonation attacks under an L-inf budget: PGD, MI-FGSM, the averaged
// joint-loss baseline, and the alternating inner/outer schedule with
// cross-task gradient aggregation.
//
// Every algorithm keeps one accumulated perturbation `eps` relative to the
// original attacker image and re-projects the total after every update.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sibling/error.hpp"
#include "sibling/models.hpp"
#include "sibling/tensor.hpp"

namespace sibling {

enum class Branch { kFr, kAr };

inline Branch other(Branch b) {
  return b == Branch::kFr ? Branch::kAr : Branch::kFr;
}

inline const char* branch_name(Branch b) { return b == Branch::kFr ? "F" : "A"; }

enum class Algorithm { kPgd, kMifgsm, kBasicJoint, kJtmo, kSibling };

inline const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::kPgd: return "pgd";
    case Algorithm::kMifgsm: return "mifgsm";
    case Algorithm::kBasicJoint: return "basic_joint";
    case Algorithm::kJtmo: return "jtmo";
    case Algorithm::kSibling: return "sibling";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "pgd") return Algorithm::kPgd;
  if (s == "mifgsm") return Algorithm::kMifgsm;
  if (s == "basic_joint") return Algorithm::kBasicJoint;
  if (s == "jtmo") return Algorithm::kJtmo;
  if (s == "sibling") return Algorithm::kSibling;
  throw Error(ErrorCode::kArgument, "unknown algorithm '" + std::string(s) + "'");
}

struct AttackConfig {
  double xi = 40.0 / 255.0;
  double alpha = 2.0 / 255.0;
  std::size_t iterations = 200;   // T
  std::size_t inner_steps = 4;    // N
  double gamma1 = 0.1;
  double gamma2 = 0.9;
  double gamma3 = 0.01;
  double lambda1 = 0.5;
  double lambda2 = 0.5;
  Algorithm algorithm = Algorithm::kSibling;
  double mifgsm_mu = 1.0;
  std::uint64_t seed = 0;
  /// Branch used for the inner steps on odd iterations.
  Branch first_inner = Branch::kFr;
  /// Re-verify the perturbation constraints after every projected update.
  bool check_invariants = false;

  void validate() const {
    auto fail = [](const std::string& m) {
      throw Error(ErrorCode::kConfig, "attack config: " + m);
    };
    if (!(xi > 0.0) || !std::isfinite(xi)) fail("xi must be > 0");
    if (!(alpha > 0.0) || !std::isfinite(alpha)) fail("alpha must be > 0");
    if (inner_steps < 1) fail("N must be >= 1");
    if (!(gamma1 > 0.0) || !(gamma2 > 0.0) || !(gamma3 > 0.0)) {
      if (!(algorithm == Algorithm::kJtmo && gamma3 == 0.0 && gamma1 > 0.0 &&
            gamma2 > 0.0)) {
        fail("gammas must be > 0");
      }
    }
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) fail("lambdas must be >= 0");
    if (!(mifgsm_mu >= 0.0)) fail("mifgsm_mu must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Projection and the perturbation state

/// Clamps every entry to [-xi, xi], then so that x_a + eps stays in [0, 1].
/// The sum is re-checked in floating point so the bound holds exactly.
inline Tensor project(const Tensor& eps, const Tensor& x_a, double xi) {
  if (eps.size() != x_a.size()) {
    throw Error(ErrorCode::kShape, "project: eps " + shape_str(eps.shape()) +
                                       " vs image " + shape_str(x_a.shape()));
  }
  Tensor out = eps;
  auto e = out.data();
  auto x = x_a.data();
  for (std::size_t i = 0; i < e.size(); ++i) {
    double v = std::clamp(e[i], -xi, xi);
    v = std::clamp(v, -x[i], 1.0 - x[i]);
    while (x[i] + v > 1.0) v = std::nextafter(v, -INFINITY);
    while (x[i] + v < 0.0) v = std::nextafter(v, INFINITY);
    e[i] = v;
  }
  return out;
}

inline Tensor clamp01(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

inline Tensor adversarial_image(const Tensor& x_a, const Tensor& eps) {
  Tensor out = x_a;
  auto o = out.data();
  auto e = eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(o[i] + e[i], 0.0, 1.0);
  return out;
}

struct PerturbationState {
  Tensor x_a;
  Tensor x_v;
  Tensor eps;
  double xi = 40.0 / 255.0;

  static PerturbationState start(Tensor x_a, Tensor x_v, double xi) {
    Tensor eps(x_a.shape());
    return {std::move(x_a), std::move(x_v), std::move(eps), xi};
  }

  Tensor x_adv() const { return adversarial_image(x_a, eps); }

  bool within_budget() const {
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (std::abs(eps[i]) > xi) return false;
      const double v = x_a[i] + eps[i];
      if (v < 0.0 || v > 1.0) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// Losses

/// Differentiable scalar objective of the adversarial image.
using Objective = std::function<Var(Tape&, Var x_adv)>;

/// Victim-side features for one branch, computed once per pair.
inline Tensor branch_features(const SurrogateModel& model, Branch branch,
                              const Tensor& image) {
  return branch == Branch::kFr ? fr_embed(model, image)
                               : ar_features(model, image);
}

inline Var branch_output(Tape& tape, const SurrogateModel& model,
                         Branch branch, Var x_adv) {
  return branch == Branch::kFr ? model.fr_embedding(tape, x_adv)
                               : model.ar_features(tape, x_adv);
}

/// 1 - cos(f(x_adv), f(x_v)) on the given branch.
inline Var adv_loss(Tape& tape, Branch branch, const SurrogateModel& model,
                    Var x_adv, const Tensor& victim_features) {
  Var f = branch_output(tape, model, branch, x_adv);
  Var c = cosine_similarity(f, tape.borrow(victim_features));
  return sub(tape.constant(Tensor::scalar(1.0)), c);
}

inline double adv_loss(Branch branch, const SurrogateModel& model,
                       const Tensor& x_adv, const Tensor& x_v) {
  const Tensor fv = branch_features(model, branch, x_v);
  Tape tape;
  return adv_loss(tape, branch, model, tape.borrow(x_adv), fv).value().item();
}

/// lambda1 * L_F + lambda2 * L_A
inline Var joint_loss(Tape& tape, const SurrogateModel& model, Var x_adv,
                      const Tensor& victim_fr, const Tensor& victim_ar,
                      double lambda1, double lambda2) {
  return add(scale(adv_loss(tape, Branch::kFr, model, x_adv, victim_fr), lambda1),
             scale(adv_loss(tape, Branch::kAr, model, x_adv, victim_ar), lambda2));
}

inline double joint_loss(const SurrogateModel& model, const Tensor& x_adv,
                         const Tensor& x_v, double lambda1, double lambda2) {
  const Tensor fr = branch_features(model, Branch::kFr, x_v);
  const Tensor ar = branch_features(model, Branch::kAr, x_v);
  Tape tape;
  return joint_loss(tape, model, tape.borrow(x_adv), fr, ar, lambda1, lambda2)
      .value()
      .item();
}

inline Objective branch_objective(const SurrogateModel& model, Branch branch,
                                  const Tensor& x_v) {
  return [&model, branch, fv = branch_features(model, branch, x_v)](
             Tape& tape, Var x) { return adv_loss(tape, branch, model, x, fv); };
}

/// Mean of the FR adversarial losses over the ensemble.
inline Objective fr_ensemble_objective(
    const std::vector<const FaceRecognizer*>& models, const Tensor& x_v) {
  if (models.empty()) {
    throw Error(ErrorCode::kArgument, "attack needs at least one FR model");
  }
  std::vector<Tensor> victims;
  for (const auto* m : models) victims.push_back(fr_embed(*m, x_v));
  return [models, victims = std::move(victims)](Tape& tape, Var x) {
    Var total;
    for (std::size_t i = 0; i < models.size(); ++i) {
      Var c = cosine_similarity(models[i]->fr_embedding(tape, x),
                                tape.borrow(victims[i]));
      Var l = sub(tape.constant(Tensor::scalar(1.0)), c);
      total = i == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / double(models.size()));
  };
}

inline Objective joint_objective(const SurrogateModel& model, const Tensor& x_v,
                                 double lambda1, double lambda2) {
  return [&model, fr = branch_features(model, Branch::kFr, x_v),
          ar = branch_features(model, Branch::kAr, x_v), lambda1,
          lambda2](Tape& tape, Var x) {
    return joint_loss(tape, model, x, fr, ar, lambda1, lambda2);
  };
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

inline LossAndGrad loss_and_grad(const Objective& f, const Tensor& x_adv) {
  Tape tape;
  Var x = tape.leaf(x_adv);
  Var y = f(tape, x);
  const double loss = y.value().item();
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::kNumeric, "attack: non-finite loss");
  }
  tape.backward(y);
  return {loss, tape.grad(x)};
}

inline double loss_value(const Objective& f, const Tensor& x_adv) {
  Tape tape;
  const double loss = f(tape, tape.borrow(x_adv)).value().item();
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::kNumeric, "attack: non-finite loss");
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Update rules

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// project(eps - alpha * sign(scale * direction))
inline Tensor signed_step(const Tensor& eps, const Tensor& direction,
                          double scale_factor, const Tensor& x_a, double xi,
                          double alpha) {
  Tensor next = eps;
  auto e = next.data();
  auto d = direction.data();
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] = e[i] - alpha * sign(scale_factor * d[i]);
  }
  return project(next, x_a, xi);
}

/// Inner update from a given gradient: project(eps - alpha*sign(gamma1*grad)).
inline Tensor inner_update(const Tensor& eps, const Tensor& grad,
                           const Tensor& x_a, double xi, double alpha,
                           double gamma1) {
  return signed_step(eps, grad, gamma1, x_a, xi, alpha);
}

/// g_N + gamma3 * sum_{i<N} g_i
inline Tensor aggregate_cross_task(std::span<const Tensor> grads,
                                   double gamma3) {
  if (grads.empty()) {
    throw Error(ErrorCode::kArgument, "ctgs: empty gradient set");
  }
  const Tensor& last = grads.back();
  Tensor history(last.shape());
  for (std::size_t i = 0; i + 1 < grads.size(); ++i) {
    auto h = history.data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < h.size(); ++k) h[k] += g[k];
  }
  Tensor out = last;
  auto o = out.data();
  auto h = history.data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = o[k] + gamma3 * h[k];
  return out;
}

/// Outer update from the other branch's gradients at every inner snapshot:
/// project(eps_N - alpha * sign(gamma2 * (g_N + gamma3 * sum_{i<N} g_i))).
inline Tensor ctgs_update(const Tensor& final_snapshot,
                          std::span<const Tensor> grads, const Tensor& x_a,
                          double xi, double alpha, double gamma2,
                          double gamma3) {
  return signed_step(final_snapshot, aggregate_cross_task(grads, gamma3),
                     gamma2, x_a, xi, alpha);
}

/// Snapshots of the inner steps and the other branch's gradients at them.
struct InnerTrajectory {
  Branch branch = Branch::kFr;
  std::vector<Tensor> snapshots;
  std::vector<Tensor> cross_grads;
};

inline void check_state(const PerturbationState& s, bool enabled,
                        std::size_t* counter) {
  if (!enabled) return;
  if (!s.within_budget()) {
    throw Error(ErrorCode::kNumeric, "attack: perturbation left the L-inf ball");
  }
  if (counter) ++*counter;
}

/// One inner step on `objective` (the chosen branch's loss).
inline Tensor jtmo_inner_step(const Objective& objective,
                              const PerturbationState& state, double alpha,
                              double gamma1) {
  const auto lg = loss_and_grad(objective, state.x_adv());
  return inner_update(state.eps, lg.grad, state.x_a, state.xi, alpha, gamma1);
}

/// Outer step on `other_objective`, evaluated at every snapshot of `traj`.
/// Fills traj.cross_grads.
inline Tensor ctgs_outer_step(const Objective& other_objective,
                              const PerturbationState& state,
                              InnerTrajectory& traj, double alpha,
                              double gamma2, double gamma3) {
  if (traj.snapshots.empty()) {
    throw Error(ErrorCode::kArgument, "ctgs: trajectory has no snapshots");
  }
  traj.cross_grads.clear();
  for (const Tensor& snap : traj.snapshots) {
    traj.cross_grads.push_back(
        loss_and_grad(other_objective, adversarial_image(state.x_a, snap)).grad);
  }
  if (traj.cross_grads.size() != traj.snapshots.size()) {
    throw Error(ErrorCode::kArgument, "ctgs: trajectory length mismatch");
  }
  return ctgs_update(traj.snapshots.back(), traj.cross_grads, state.x_a,
                     state.xi, alpha, gamma2, gamma3);
}

// ---------------------------------------------------------------------------
// Full attacks

struct TracePoint {
  std::size_t t = 0;
  double objective = 0.0;
  std::optional<double> loss_fr;
  std::optional<double> loss_ar;
};

struct AttackResult {
  Tensor x_adv;
  Tensor eps;
  std::vector<TracePoint> trace;  // t = 0..T, objective after t iterations
  std::size_t invariant_checks = 0;
};

namespace detail {

inline TracePoint surrogate_trace(std::size_t t, const Objective& fr,
                                  const Objective& ar, const Tensor& x_adv,
                                  double lambda1, double lambda2) {
  TracePoint p;
  p.t = t;
  p.loss_fr = loss_value(fr, x_adv);
  p.loss_ar = loss_value(ar, x_adv);
  p.objective = lambda1 * *p.loss_fr + lambda2 * *p.loss_ar;
  return p;
}

/// Shared driver for the single-objective sign-gradient attacks.
/// `direction(grad)` maps the raw gradient to the update direction.
template <class Direction>
AttackResult iterate_signed(const Objective& objective, const Tensor& x_a,
                            const Tensor& x_v, const AttackConfig& cfg,
                            Direction&& direction) {
  cfg.validate();
  auto state = PerturbationState::start(x_a, x_v, cfg.xi);
  AttackResult result;
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const auto lg = loss_and_grad(objective, state.x_adv());
    result.trace.push_back({t - 1, lg.loss, std::nullopt, std::nullopt});
    state.eps = signed_step(state.eps, direction(lg.grad), 1.0, state.x_a,
                            state.xi, cfg.alpha);
    check_state(state, cfg.check_invariants, &result.invariant_checks);
  }
  result.trace.push_back(
      {cfg.iterations, loss_value(objective, state.x_adv()), std::nullopt,
       std::nullopt});
  result.x_adv = state.x_adv();
  result.eps = state.eps;
  return result;
}

}  // namespace detail

/// PGD with the mean FR loss over one or more models.
inline AttackResult pgd_attack(const std::vector<const FaceRecognizer*>& models,
                               const Tensor& x_a, const Tensor& x_v,
                               const AttackConfig& cfg) {
  return detail::iterate_signed(fr_ensemble_objective(models, x_v), x_a, x_v,
                                cfg, [](const Tensor& g) { return g; });
}

/// MI-FGSM: g <- mu * g + grad / max(|grad|_1, 1e-12); step on sign(g).
inline AttackResult mifgsm_attack(
    const std::vector<const FaceRecognizer*>& models, const Tensor& x_a,
    const Tensor& x_v, const AttackConfig& cfg) {
  Tensor momentum(x_a.shape());
  const double mu = cfg.mifgsm_mu;
  return detail::iterate_signed(
      fr_ensemble_objective(models, x_v), x_a, x_v, cfg,
      [&momentum, mu](const Tensor& g) {
        double l1 = 0.0;
        for (double v : g.data()) l1 += std::abs(v);
        l1 = std::max(l1, 1e-12);
        auto m = momentum.data();
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = mu * m[i] + g[i] / l1;
        return momentum;
      });
}

/// Sign-gradient descent on lambda1 * L_F + lambda2 * L_A of the surrogate.
inline AttackResult basic_joint_attack(const SurrogateModel& model,
                                       const Tensor& x_a, const Tensor& x_v,
                                       const AttackConfig& cfg) {
  return detail::iterate_signed(
      joint_objective(model, x_v, cfg.lambda1, cfg.lambda2), x_a, x_v, cfg,
      [](const Tensor& g) { return g; });
}

/// Alternating inner/outer schedule. Iteration t runs N inner steps on one
/// branch (F on odd t when first_inner == F), then one outer step on the other
/// branch from its gradients at all N inner snapshots.
inline AttackResult sibling_attack(const SurrogateModel& model,
                                   const Tensor& x_a, const Tensor& x_v,
                                   const AttackConfig& cfg) {
  cfg.validate();
  const Objective fr = branch_objective(model, Branch::kFr, x_v);
  const Objective ar = branch_objective(model, Branch::kAr, x_v);
  auto objective_for = [&](Branch b) -> const Objective& {
    return b == Branch::kFr ? fr : ar;
  };

  auto state = PerturbationState::start(x_a, x_v, cfg.xi);
  AttackResult result;
  result.trace.push_back(detail::surrogate_trace(0, fr, ar, state.x_adv(),
                                                 cfg.lambda1, cfg.lambda2));
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const Branch inner = t % 2 == 1 ? cfg.first_inner : other(cfg.first_inner);
    InnerTrajectory traj;
    traj.branch = inner;
    for (std::size_t i = 0; i < cfg.inner_steps; ++i) {
      state.eps = jtmo_inner_step(objective_for(inner), state, cfg.alpha,
                                  cfg.gamma1);
      check_state(state, cfg.check_invariants, &result.invariant_checks);
      traj.snapshots.push_back(state.eps);
    }
    state.eps = ctgs_outer_step(objective_for(other(inner)), state, traj,
                                cfg.alpha, cfg.gamma2, cfg.gamma3);
    check_state(state, cfg.check_invariants, &result.invariant_checks);
    result.trace.push_back(detail::surrogate_trace(t, fr, ar, state.x_adv(),
                                                   cfg.lambda1, cfg.lambda2));
  }
  result.x_adv = state.x_adv();
  result.eps = state.eps;
  return result;
}

}  // namespace sibling
