#pragma once

// Experiment configuration: strict JSON (unknown keys rejected, errors name
// the JSON path). Only the top-level "seed" is required; every sub-seed
// defaults to that seed plus a fixed offset, so nothing draws on ambient
// entropy.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sibling/attack.hpp"
#include "sibling/container.hpp"
#include "sibling/error.hpp"

namespace sibling {

/// Attack arms of the ablation ladder as named on the command line.
inline const std::vector<std::string>& arm_names() {
  static const std::vector<std::string> names{
      "pgd_single", "pgd_ensemble", "mifgsm", "basic_joint", "jtmo", "sibling"};
  return names;
}

inline bool is_arm(const std::string& name) {
  for (const auto& n : arm_names()) {
    if (n == name) return true;
  }
  return false;
}

struct TargetSpec {
  std::string id;
  TargetKind kind = TargetKind::kFaceRecognition;
  std::vector<std::size_t> widths;
  std::uint64_t seed = 0;

  friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  struct DatasetSection {
    std::uint64_t seed = 0;
    std::size_t n_identities = 64;
    std::size_t samples_per_identity = 20;
    friend bool operator==(const DatasetSection&, const DatasetSection&) = default;
  } dataset;

  struct ModelsSection {
    std::uint64_t surrogate_seed = 0;
    std::uint64_t aux_fr_seed = 0;
    std::vector<TargetSpec> targets;
    std::size_t epochs = 30;
    double lr = 0.05;
    std::size_t batch_size = 32;
    std::uint64_t train_seed = 0;
    friend bool operator==(const ModelsSection&, const ModelsSection&) = default;
  } models;

  struct AttackSection {
    double xi = 40.0 / 255.0;
    double alpha = 2.0 / 255.0;
    std::size_t T = 200;
    std::size_t N = 4;
    double gamma1 = 0.1;
    double gamma2 = 0.9;
    double gamma3 = 0.01;
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    double mifgsm_mu = 1.0;
    std::uint64_t seed = 0;
    friend bool operator==(const AttackSection&, const AttackSection&) = default;
  } attack;

  struct EvalSection {
    std::size_t n_attack_pairs = 200;
    std::size_t n_calibration_pairs = 2000;
    double target_fpr = 0.001;
    std::uint64_t calibration_seed = 0;
    std::uint64_t pair_seed = 0;
    std::string held_out_target = "fr_target_a";
    std::string ar_target = "ar_target";
    std::vector<std::string> algorithms = arm_names();
    bool include_runtime = false;
    friend bool operator==(const EvalSection&, const EvalSection&) = default;
  } eval;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  /// AttackConfig for one arm; "jtmo" is the full schedule with gamma3 = 0.
  AttackConfig attack_config(const std::string& arm) const {
    AttackConfig c;
    c.xi = attack.xi;
    c.alpha = attack.alpha;
    c.iterations = attack.T;
    c.inner_steps = attack.N;
    c.gamma1 = attack.gamma1;
    c.gamma2 = attack.gamma2;
    c.gamma3 = attack.gamma3;
    c.lambda1 = attack.lambda1;
    c.lambda2 = attack.lambda2;
    c.mifgsm_mu = attack.mifgsm_mu;
    c.seed = attack.seed;
    if (arm == "pgd_single" || arm == "pgd_ensemble") {
      c.algorithm = Algorithm::kPgd;
    } else if (arm == "mifgsm") {
      c.algorithm = Algorithm::kMifgsm;
    } else if (arm == "basic_joint") {
      c.algorithm = Algorithm::kBasicJoint;
    } else if (arm == "jtmo") {
      c.algorithm = Algorithm::kJtmo;
      c.gamma3 = 0.0;
    } else if (arm == "sibling") {
      c.algorithm = Algorithm::kSibling;
    } else {
      throw Error(ErrorCode::kArgument, "unknown algorithm '" + arm + "'");
    }
    return c;
  }

  const TargetSpec& target(const std::string& id) const {
    for (const auto& t : models.targets) {
      if (t.id == id) return t;
    }
    throw Error(ErrorCode::kConfig, "no target model named '" + id + "'");
  }
};

namespace detail {

using json = nlohmann::json;

inline constexpr std::uint64_t kMaxSeed = (std::uint64_t{1} << 53) - 1;

[[noreturn]] inline void config_error(const std::string& path,
                                      const std::string& msg) {
  throw Error(ErrorCode::kConfig, path + ": " + msg);
}

inline void reject_unknown(const json& obj, const std::string& path,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) config_error(path, "expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) config_error(path + "." + it.key(), "unknown key");
  }
}

inline double read_number(const json& v, const std::string& path) {
  if (!v.is_number()) config_error(path, "expected a number");
  return v.get<double>();
}

inline std::uint64_t read_uint(const json& v, const std::string& path) {
  if (!v.is_number_integer()) config_error(path, "expected an integer");
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  const auto s = v.get<std::int64_t>();
  if (s < 0) config_error(path, "expected a non-negative integer");
  return std::uint64_t(s);
}

inline std::uint64_t read_seed(const json& v, const std::string& path) {
  const auto s = read_uint(v, path);
  if (s > kMaxSeed) config_error(path, "seed must be below 2^53");
  return s;
}

inline std::string read_string(const json& v, const std::string& path) {
  if (!v.is_string()) config_error(path, "expected a string");
  return v.get<std::string>();
}

inline bool read_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) config_error(path, "expected a boolean");
  return v.get<bool>();
}

template <class F>
void optional_field(const json& obj, const char* key, const std::string& path,
                    F&& read) {
  if (obj.contains(key)) read(obj.at(key), path + "." + key);
}

inline TargetKind parse_target_kind(const json& v, const std::string& path) {
  const auto s = read_string(v, path);
  if (s == "fr") return TargetKind::kFaceRecognition;
  if (s == "ar") return TargetKind::kAttributeRecognition;
  config_error(path, "expected \"fr\" or \"ar\"");
}

inline std::vector<TargetSpec> default_targets(std::uint64_t seed) {
  return {
      {"fr_target_a", TargetKind::kFaceRecognition, {96, 48, 24}, seed + 3},
      {"fr_target_b", TargetKind::kFaceRecognition, {160, 80, 40}, seed + 4},
      {"ar_target", TargetKind::kAttributeRecognition, {96, 48, 8}, seed + 5},
  };
}

}  // namespace detail

/// Checks cross-field constraints after parsing.
inline void validate(const ExperimentConfig& c) {
  using detail::config_error;
  const auto& a = c.attack;
  if (!(a.xi > 0.0)) config_error("$.attack.xi", "must be > 0");
  if (!(a.alpha > 0.0)) config_error("$.attack.alpha", "must be > 0");
  if (a.T < 1) config_error("$.attack.T", "must be >= 1");
  if (a.N < 1) config_error("$.attack.N", "must be >= 1");
  if (!(a.gamma1 > 0.0)) config_error("$.attack.gamma1", "must be > 0");
  if (!(a.gamma2 > 0.0)) config_error("$.attack.gamma2", "must be > 0");
  if (!(a.gamma3 > 0.0)) config_error("$.attack.gamma3", "must be > 0");
  if (!(a.lambda1 >= 0.0)) config_error("$.attack.lambda1", "must be >= 0");
  if (!(a.lambda2 >= 0.0)) config_error("$.attack.lambda2", "must be >= 0");
  if (!(a.mifgsm_mu >= 0.0)) config_error("$.attack.mifgsm_mu", "must be >= 0");
  if (c.dataset.n_identities < 3) {
    config_error("$.dataset.n_identities", "must be >= 3");
  }
  if (c.dataset.samples_per_identity < 2) {
    config_error("$.dataset.samples_per_identity", "must be >= 2");
  }
  if (c.models.batch_size < 1) config_error("$.models.batch_size", "must be >= 1");
  if (!(c.models.lr > 0.0)) config_error("$.models.lr", "must be > 0");
  if (c.eval.n_attack_pairs < 1) {
    config_error("$.eval.n_attack_pairs", "must be >= 1");
  }
  if (c.eval.n_calibration_pairs < 1) {
    config_error("$.eval.n_calibration_pairs", "must be >= 1");
  }
  if (!(c.eval.target_fpr > 0.0 && c.eval.target_fpr < 1.0)) {
    config_error("$.eval.target_fpr", "must be in (0, 1)");
  }
  std::set<std::string> ids;
  bool has_fr = false, has_ar = false;
  for (std::size_t i = 0; i < c.models.targets.size(); ++i) {
    const auto& t = c.models.targets[i];
    const std::string p = "$.models.targets[" + std::to_string(i) + "]";
    if (t.id.empty() || t.id == "surrogate" || t.id == "fr_aux" ||
        !ids.insert(t.id).second) {
      config_error(p + ".id", "must be unique and not a reserved name");
    }
    if (t.widths.empty()) config_error(p + ".widths", "must not be empty");
    for (std::size_t w : t.widths) {
      if (w < 1) config_error(p + ".widths", "widths must be >= 1");
    }
    if (t.kind == TargetKind::kAttributeRecognition &&
        t.widths.back() != kNumAttributes) {
      config_error(p + ".widths", "AR targets must end in 8 outputs");
    }
    has_fr = has_fr || t.kind == TargetKind::kFaceRecognition;
    has_ar = has_ar || t.kind == TargetKind::kAttributeRecognition;
  }
  if (!has_fr || !has_ar) {
    config_error("$.models.targets", "need at least one fr and one ar target");
  }
  if (c.target(c.eval.held_out_target).kind != TargetKind::kFaceRecognition) {
    config_error("$.eval.held_out_target", "must name an fr target");
  }
  if (c.target(c.eval.ar_target).kind != TargetKind::kAttributeRecognition) {
    config_error("$.eval.ar_target", "must name an ar target");
  }
  if (c.eval.algorithms.empty()) config_error("$.eval.algorithms", "empty");
  for (const auto& a : c.eval.algorithms) {
    if (!is_arm(a)) config_error("$.eval.algorithms", "unknown algorithm " + a);
  }
}

/// `seed_override` replaces the top-level seed before sub-seed defaults are
/// derived (explicit sub-seeds are kept).
inline ExperimentConfig parse_config_json(
    const nlohmann::json& root, std::optional<std::uint64_t> seed_override = {}) {
  using namespace detail;
  ExperimentConfig c;
  reject_unknown(root, "$",
                 {"seed", "output_dir", "dataset", "models", "attack", "eval"});
  if (!root.contains("seed")) config_error("$.seed", "missing required key");
  c.seed = seed_override ? *seed_override : read_seed(root.at("seed"), "$.seed");
  if (c.seed > kMaxSeed) config_error("$.seed", "seed must be below 2^53");
  optional_field(root, "output_dir", "$", [&](const json& v, const std::string& p) {
    c.output_dir = read_string(v, p);
  });

  // Sub-seed defaults.
  c.dataset.seed = c.seed;
  c.models.surrogate_seed = c.seed + 1;
  c.models.aux_fr_seed = c.seed + 2;
  c.models.targets = default_targets(c.seed);
  c.models.train_seed = c.seed + 6;
  c.attack.seed = c.seed;
  c.eval.calibration_seed = c.seed + 8;
  c.eval.pair_seed = c.seed + 9;

  if (root.contains("dataset")) {
    const json& d = root.at("dataset");
    const std::string p = "$.dataset";
    reject_unknown(d, p, {"seed", "n_identities", "samples_per_identity"});
    optional_field(d, "seed", p, [&](const json& v, const std::string& q) {
      c.dataset.seed = read_seed(v, q);
    });
    optional_field(d, "n_identities", p, [&](const json& v, const std::string& q) {
      c.dataset.n_identities = read_uint(v, q);
    });
    optional_field(d, "samples_per_identity", p,
                   [&](const json& v, const std::string& q) {
                     c.dataset.samples_per_identity = read_uint(v, q);
                   });
  }

  if (root.contains("models")) {
    const json& m = root.at("models");
    const std::string p = "$.models";
    reject_unknown(m, p,
                   {"surrogate_seed", "aux_fr_seed", "targets", "epochs", "lr",
                    "batch_size", "train_seed"});
    optional_field(m, "surrogate_seed", p, [&](const json& v, const std::string& q) {
      c.models.surrogate_seed = read_seed(v, q);
    });
    optional_field(m, "aux_fr_seed", p, [&](const json& v, const std::string& q) {
      c.models.aux_fr_seed = read_seed(v, q);
    });
    optional_field(m, "epochs", p, [&](const json& v, const std::string& q) {
      c.models.epochs = read_uint(v, q);
    });
    optional_field(m, "lr", p, [&](const json& v, const std::string& q) {
      c.models.lr = read_number(v, q);
    });
    optional_field(m, "batch_size", p, [&](const json& v, const std::string& q) {
      c.models.batch_size = read_uint(v, q);
    });
    optional_field(m, "train_seed", p, [&](const json& v, const std::string& q) {
      c.models.train_seed = read_seed(v, q);
    });
    optional_field(m, "targets", p, [&](const json& v, const std::string& q) {
      if (!v.is_array()) config_error(q, "expected an array");
      c.models.targets.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string tp = q + "[" + std::to_string(i) + "]";
        const json& t = v[i];
        reject_unknown(t, tp, {"id", "kind", "widths", "seed"});
        for (const char* k : {"id", "kind", "widths", "seed"}) {
          if (!t.contains(k)) config_error(tp + "." + k, "missing required key");
        }
        TargetSpec spec;
        spec.id = read_string(t.at("id"), tp + ".id");
        spec.kind = parse_target_kind(t.at("kind"), tp + ".kind");
        spec.seed = read_seed(t.at("seed"), tp + ".seed");
        const json& w = t.at("widths");
        if (!w.is_array()) config_error(tp + ".widths", "expected an array");
        for (std::size_t k = 0; k < w.size(); ++k) {
          spec.widths.push_back(
              read_uint(w[k], tp + ".widths[" + std::to_string(k) + "]"));
        }
        c.models.targets.push_back(std::move(spec));
      }
    });
  }

  if (root.contains("attack")) {
    const json& a = root.at("attack");
    const std::string p = "$.attack";
    reject_unknown(a, p,
                   {"xi", "alpha", "T", "N", "gamma1", "gamma2", "gamma3",
                    "lambda1", "lambda2", "mifgsm_mu", "seed"});
    auto num = [&](const char* key, double& dst) {
      optional_field(a, key, p, [&](const json& v, const std::string& q) {
        dst = read_number(v, q);
      });
    };
    num("xi", c.attack.xi);
    num("alpha", c.attack.alpha);
    num("gamma1", c.attack.gamma1);
    num("gamma2", c.attack.gamma2);
    num("gamma3", c.attack.gamma3);
    num("lambda1", c.attack.lambda1);
    num("lambda2", c.attack.lambda2);
    num("mifgsm_mu", c.attack.mifgsm_mu);
    optional_field(a, "T", p, [&](const json& v, const std::string& q) {
      c.attack.T = read_uint(v, q);
    });
    optional_field(a, "N", p, [&](const json& v, const std::string& q) {
      c.attack.N = read_uint(v, q);
    });
    optional_field(a, "seed", p, [&](const json& v, const std::string& q) {
      c.attack.seed = read_seed(v, q);
    });
  }

  if (root.contains("eval")) {
    const json& e = root.at("eval");
    const std::string p = "$.eval";
    reject_unknown(e, p,
                   {"n_attack_pairs", "n_calibration_pairs", "target_fpr",
                    "calibration_seed", "pair_seed", "held_out_target",
                    "ar_target", "algorithms", "include_runtime"});
    optional_field(e, "n_attack_pairs", p, [&](const json& v, const std::string& q) {
      c.eval.n_attack_pairs = read_uint(v, q);
    });
    optional_field(e, "n_calibration_pairs", p,
                   [&](const json& v, const std::string& q) {
                     c.eval.n_calibration_pairs = read_uint(v, q);
                   });
    optional_field(e, "target_fpr", p, [&](const json& v, const std::string& q) {
      c.eval.target_fpr = read_number(v, q);
    });
    optional_field(e, "calibration_seed", p,
                   [&](const json& v, const std::string& q) {
                     c.eval.calibration_seed = read_seed(v, q);
                   });
    optional_field(e, "pair_seed", p, [&](const json& v, const std::string& q) {
      c.eval.pair_seed = read_seed(v, q);
    });
    optional_field(e, "held_out_target", p, [&](const json& v, const std::string& q) {
      c.eval.held_out_target = read_string(v, q);
    });
    optional_field(e, "ar_target", p, [&](const json& v, const std::string& q) {
      c.eval.ar_target = read_string(v, q);
    });
    optional_field(e, "include_runtime", p, [&](const json& v, const std::string& q) {
      c.eval.include_runtime = read_bool(v, q);
    });
    optional_field(e, "algorithms", p, [&](const json& v, const std::string& q) {
      if (!v.is_array()) config_error(q, "expected an array");
      c.eval.algorithms.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        c.eval.algorithms.push_back(
            read_string(v[i], q + "[" + std::to_string(i) + "]"));
      }
    });
  }

  validate(c);
  return c;
}

inline ExperimentConfig parse_config_text(
    const std::string& text, std::optional<std::uint64_t> seed_override = {}) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kConfig, std::string("$: invalid JSON: ") + e.what());
  }
  return parse_config_json(root, seed_override);
}

/// Reads a config file; SIBLING_SEED, when set, overrides the top-level seed.
inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::optional<std::uint64_t> override_seed;
  if (const char* env = std::getenv("SIBLING_SEED"); env && *env) {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (*end != '\0') {
      throw Error(ErrorCode::kConfig, "SIBLING_SEED: not an unsigned integer");
    }
    override_seed = v;
  }
  return parse_config_text(read_file(path), override_seed);
}

/// Full form with every default made explicit.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& t : c.models.targets) {
    targets.push_back({{"id", t.id},
                       {"kind", t.kind == TargetKind::kFaceRecognition ? "fr" : "ar"},
                       {"widths", t.widths},
                       {"seed", t.seed}});
  }
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"dataset",
       {{"seed", c.dataset.seed},
        {"n_identities", c.dataset.n_identities},
        {"samples_per_identity", c.dataset.samples_per_identity}}},
      {"models",
       {{"surrogate_seed", c.models.surrogate_seed},
        {"aux_fr_seed", c.models.aux_fr_seed},
        {"targets", targets},
        {"epochs", c.models.epochs},
        {"lr", c.models.lr},
        {"batch_size", c.models.batch_size},
        {"train_seed", c.models.train_seed}}},
      {"attack",
       {{"xi", c.attack.xi},
        {"alpha", c.attack.alpha},
        {"T", c.attack.T},
        {"N", c.attack.N},
        {"gamma1", c.attack.gamma1},
        {"gamma2", c.attack.gamma2},
        {"gamma3", c.attack.gamma3},
        {"lambda1", c.attack.lambda1},
        {"lambda2", c.attack.lambda2},
        {"mifgsm_mu", c.attack.mifgsm_mu},
        {"seed", c.attack.seed}}},
      {"eval",
       {{"n_attack_pairs", c.eval.n_attack_pairs},
        {"n_calibration_pairs", c.eval.n_calibration_pairs},
        {"target_fpr", c.eval.target_fpr},
        {"calibration_seed", c.eval.calibration_seed},
        {"pair_seed", c.eval.pair_seed},
        {"held_out_target", c.eval.held_out_target},
        {"ar_target", c.eval.ar_target},
        {"algorithms", c.eval.algorithms},
        {"include_runtime", c.eval.include_runtime}}},
  };
}

inline std::string serialize_config(const ExperimentConfig& c) {
  return to_json(c).dump(2) + "\n";
}

}  // namespace sibling
