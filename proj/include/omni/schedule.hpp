#pragma once

// Interleaved JAVG / TTS-only step planning, the staged curriculum and the
// cosine learning-rate curve.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "omni/denoiser.hpp"
#include "omni/errors.hpp"
#include "omni/params.hpp"

namespace omni {

enum class ScheduleErrorKind { InvalidRatio, OutOfRange, UnknownGroup, CurriculumOrder, InvalidConfig };

class ScheduleError : public Error {
 public:
  ScheduleError(ScheduleErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  ScheduleErrorKind kind() const noexcept { return kind_; }

 private:
  ScheduleErrorKind kind_;
};

enum class StageName { Stage1_SingleSubject, Stage2_MultiSubject, Stage3_CrossPair };
enum class DataRegime { InPair, CrossPair };

inline const char* to_string(StageName s) {
  switch (s) {
    case StageName::Stage1_SingleSubject: return "stage1_single_subject";
    case StageName::Stage2_MultiSubject: return "stage2_multi_subject";
    case StageName::Stage3_CrossPair: return "stage3_cross_pair";
  }
  return "?";
}

inline const char* to_string(DataRegime r) { return r == DataRegime::InPair ? "in_pair" : "cross_pair"; }

struct StageConfig {
  StageName name = StageName::Stage1_SingleSubject;
  std::size_t steps = 1;
  double javg_ratio = 1.0;
  std::size_t javg_batch = 64;
  std::size_t tts_batch = 1024;
  DataRegime data_regime = DataRegime::InPair;

  bool operator==(const StageConfig&) const = default;
};

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double lr_init = 1e-4;
  double lr_final = 1e-5;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
      throw ScheduleError(ScheduleErrorKind::InvalidConfig, "optimizer betas must lie in (0, 1)");
    }
    if (!(lr_final < lr_init) || !(lr_final >= 0.0)) {
      throw ScheduleError(ScheduleErrorKind::InvalidConfig, "learning rate must decay: need 0 <= lr_final < lr_init");
    }
    if (weight_decay < 0.0 || !(eps > 0.0)) {
      throw ScheduleError(ScheduleErrorKind::InvalidConfig, "weight decay must be >= 0 and eps > 0");
    }
  }

  bool operator==(const OptimConfig&) const = default;
};

struct PlanStep {
  std::size_t global_step = 0;
  std::size_t stage_index = 0;
  StageName stage = StageName::Stage1_SingleSubject;
  StepKind kind = StepKind::Javg;
  double lr = 0.0;
};

struct StepPlan {
  std::vector<StageConfig> stages;
  std::vector<PlanStep> steps;

  std::size_t size() const noexcept { return steps.size(); }
};

inline void check_ratio(double r) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw ScheduleError(ScheduleErrorKind::InvalidRatio, "JAVG ratio " + std::to_string(r) + " is outside [0, 1]");
  }
}

/// Deterministic interleaving: step i is JAVG iff floor(i*r) > floor((i-1)*r),
/// so a stage opens on a JAVG step and every window of length q holds
/// exactly p JAVG steps when r = p/q.
inline StepKind step_kind(std::size_t step_index, double r) {
  check_ratio(r);
  if (r == 0.0) return StepKind::TtsOnly;
  // the small lift keeps products such as 3 * (1/3) from landing a hair under an integer
  constexpr double lift = 1e-9;
  const double i = static_cast<double>(step_index);
  const double here = std::floor(i * r + lift);
  const double before = std::floor((i - 1.0) * r + lift);
  return here > before ? StepKind::Javg : StepKind::TtsOnly;
}

/// Cosine decay from lr_init at step 0 to lr_final at step total-1.
inline double lr_at(std::size_t step, std::size_t total, const OptimConfig& optim) {
  if (total < 2 || step >= total) {
    throw ScheduleError(ScheduleErrorKind::OutOfRange,
                        "lr_at: step " + std::to_string(step) + " outside a schedule of " + std::to_string(total));
  }
  const double progress = static_cast<double>(step) / static_cast<double>(total - 1);
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  // convex form so both endpoints are exact
  return optim.lr_init * w + optim.lr_final * (1.0 - w);
}

inline StepPlan build_plan(const std::vector<StageConfig>& stages, const OptimConfig& optim) {
  if (stages.empty()) throw ScheduleError(ScheduleErrorKind::InvalidConfig, "plan needs at least one stage");
  optim.validate();
  std::size_t total = 0;
  bool seen_cross_pair = false;
  for (const auto& s : stages) {
    check_ratio(s.javg_ratio);
    if (s.steps == 0 || s.javg_batch == 0 || s.tts_batch == 0) {
      throw ScheduleError(ScheduleErrorKind::InvalidConfig, std::string(to_string(s.name)) + ": steps and batches must be positive");
    }
    if (s.data_regime == DataRegime::CrossPair) {
      seen_cross_pair = true;
    } else if (seen_cross_pair) {
      throw ScheduleError(ScheduleErrorKind::CurriculumOrder,
                          std::string(to_string(s.name)) + ": in-pair stage scheduled after a cross-pair stage");
    }
    total += s.steps;
  }
  if (total < 2) throw ScheduleError(ScheduleErrorKind::InvalidConfig, "plan needs at least two steps in total");

  StepPlan plan;
  plan.stages = stages;
  plan.steps.reserve(total);
  std::size_t g = 0;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    for (std::size_t i = 0; i < stages[si].steps; ++i, ++g) {
      plan.steps.push_back(PlanStep{g, si, stages[si].name, step_kind(i, stages[si].javg_ratio), lr_at(g, total, optim)});
    }
  }
  return plan;
}

/// The three-stage table: 20K steps at 1:1 (batches 64 / 1024, in-pair),
/// 10K all-JAVG multi-subject steps, 10K all-JAVG cross-pair steps. Step
/// counts are divided by `scale` (at least one step per stage remains).
inline std::vector<StageConfig> default_stages(std::size_t scale = 1) {
  if (scale == 0) throw ScheduleError(ScheduleErrorKind::InvalidConfig, "scale divisor must be positive");
  auto scaled = [scale](std::size_t n) { return std::max<std::size_t>(1, n / scale); };
  return {
      {StageName::Stage1_SingleSubject, scaled(20000), 0.5, 64, 1024, DataRegime::InPair},
      {StageName::Stage2_MultiSubject, scaled(10000), 1.0, 64, 1024, DataRegime::InPair},
      {StageName::Stage3_CrossPair, scaled(10000), 1.0, 64, 1024, DataRegime::CrossPair},
  };
}

inline const std::set<std::string>& known_groups() {
  static const std::set<std::string> groups{"ocf", "mtpca", kVideoGroup, kAudioGroup, kCrossModalGroup};
  return groups;
}

/// Parameter groups that a TTS-only step must leave untouched.
inline bool frozen_in(StepKind kind, const std::string& group) {
  return kind == StepKind::TtsOnly && (group == kCrossModalGroup || group == kVideoGroup);
}

/// Zeroes the cross-modal and video-tower gradients of a TTS-only step;
/// JAVG gradients pass through unchanged.
inline GradMap gate_gradients(GradMap grads, StepKind kind) {
  for (auto& [name, g] : grads) {
    const std::string group = group_of(name);
    if (!known_groups().contains(group)) {
      throw ScheduleError(ScheduleErrorKind::UnknownGroup, "gradient '" + name + "' belongs to unknown group '" + group + "'");
    }
    if (frozen_in(kind, group)) g = Matrix(g.rows(), g.cols());
  }
  return grads;
}

/// Only the conditioning modules follow the cosine curve; everything else
/// trains at lr_init.
inline bool follows_cosine(const std::string& group) { return group == "ocf" || group == "mtpca"; }

/// CSV with header step,stage,kind,lr. lr is printed with 17 significant digits.
inline std::string plan_to_csv(const StepPlan& plan) {
  std::ostringstream os;
  os.precision(17);
  os << "step,stage,kind,lr\n";
  for (const auto& s : plan.steps) {
    os << s.global_step << ',' << to_string(s.stage) << ',' << (s.kind == StepKind::Javg ? 'J' : 'T') << ',' << s.lr << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Config files: {"optim": {beta1, beta2, weight_decay, lr_init, lr_final},
//                "stages": [{name, steps, javg_ratio, javg_batch, tts_batch, data_regime}]}
// Missing optim fields keep their defaults.

inline StageName stage_name_from(const std::string& s) {
  if (s == "stage1_single_subject" || s == "stage1") return StageName::Stage1_SingleSubject;
  if (s == "stage2_multi_subject" || s == "stage2") return StageName::Stage2_MultiSubject;
  if (s == "stage3_cross_pair" || s == "stage3") return StageName::Stage3_CrossPair;
  throw ScheduleError(ScheduleErrorKind::InvalidConfig, "unknown stage name '" + s + "'");
}

inline DataRegime regime_from(const std::string& s) {
  if (s == "in_pair") return DataRegime::InPair;
  if (s == "cross_pair") return DataRegime::CrossPair;
  throw ScheduleError(ScheduleErrorKind::InvalidConfig, "unknown data regime '" + s + "'");
}

struct ScheduleConfig {
  std::vector<StageConfig> stages;
  OptimConfig optim;
};

inline ScheduleConfig schedule_config_from_json(const nlohmann::json& j, std::size_t scale = 1) {
  if (scale == 0) throw ScheduleError(ScheduleErrorKind::InvalidConfig, "scale divisor must be positive");
  ScheduleConfig cfg;
  try {
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      cfg.optim.beta1 = o.value("beta1", cfg.optim.beta1);
      cfg.optim.beta2 = o.value("beta2", cfg.optim.beta2);
      cfg.optim.weight_decay = o.value("weight_decay", cfg.optim.weight_decay);
      cfg.optim.lr_init = o.value("lr_init", cfg.optim.lr_init);
      cfg.optim.lr_final = o.value("lr_final", cfg.optim.lr_final);
    }
    for (const auto& s : j.at("stages")) {
      StageConfig st;
      st.name = stage_name_from(s.at("name").get<std::string>());
      st.steps = std::max<std::size_t>(1, s.at("steps").get<std::size_t>() / scale);
      st.javg_ratio = s.at("javg_ratio").get<double>();
      st.javg_batch = s.value("javg_batch", st.javg_batch);
      st.tts_batch = s.value("tts_batch", st.tts_batch);
      st.data_regime = regime_from(s.value("data_regime", std::string("in_pair")));
      cfg.stages.push_back(st);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ScheduleError(ScheduleErrorKind::InvalidConfig, std::string("schedule config: ") + e.what());
  }
  return cfg;
}

}  // namespace omni
