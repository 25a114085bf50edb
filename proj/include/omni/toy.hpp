#pragma once

// Synthetic paired task for end-to-end training runs.
//
// A handful of identities each own image and voice reference latents. The
// clean video/audio latents of a clip are a fixed linear map of the
// identity's references plus a per-row pattern, so a denoiser that reads its
// references (and the fused caption context) can predict the velocity far
// better than the zero-initialized heads do at step 0.

#include <chrono>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "omni/caption.hpp"
#include "omni/denoiser.hpp"
#include "omni/fusion.hpp"
#include "omni/optim.hpp"
#include "omni/positions.hpp"
#include "omni/schedule.hpp"
#include "omni/speech_gate.hpp"

namespace omni {

struct ToyConfig {
  std::uint64_t seed = 0;
  std::size_t scale = 80;  // 40K default steps / 80 = 500
  std::size_t d = 8;
  std::size_t identities = 4;
  std::size_t video_rows = 4;
  std::size_t audio_rows = 4;
  std::size_t javg_batch = 4;
  std::size_t tts_batch = 16;
  std::size_t eval_samples = 32;
  double clean_scale = 1.5;
  // toy-sized step sizes; the full-scale 1e-4 -> 1e-5 barely moves a model this small in 500 steps
  double lr_init = 3e-3;
  double lr_final = 3e-4;
  std::string caption = "A <sub1> is tall with calm voice . <sub1> says <S> hi there <E>";
};

struct ToyStepLog {
  std::size_t step = 0;
  StepKind kind = StepKind::Javg;
  double lr = 0.0;
  double loss = 0.0;
};

struct ToyReport {
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::size_t javg_steps = 0;
  std::size_t tts_steps = 0;
  double initial_loss = 0.0;  // JAVG flow loss on the fixed eval set before training
  double final_loss = 0.0;    // same set after the last step
  std::size_t severance_violations = 0;
  double seconds = 0.0;
  std::vector<ToyStepLog> log;

  double reduction() const { return initial_loss > 0.0 ? 1.0 - final_loss / initial_loss : 0.0; }
};

namespace toy_detail {

struct Identity {
  Matrix img;   // 2 x d, doubles as the image reference tokens of the caption
  Matrix voice; // 1 x d
  Matrix tts;   // 2 x d phoneme embeddings of the utterance
};

struct World {
  ToyConfig cfg;
  OmniCaption caption;
  SpeechMask mask;
  PositionalAssignment assignment;
  std::vector<std::size_t> tts_counts;
  Matrix c_txt;
  std::vector<Identity> ids;
  Matrix map_v, map_a;          // d x d
  Matrix pattern_v, pattern_a;  // per-row offsets
};

struct Sample {
  std::size_t identity = 0;
  DenoiserState state;
  Matrix target_v, target_a;
  Matrix cond_img, cond_voice;  // references as seen by the conditioning path
};

inline Matrix mean_row(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(0, c) += m(r, c) / static_cast<double>(m.rows());
  return out;
}

inline Matrix clean_latents(const Matrix& ref, const Matrix& map, const Matrix& pattern, double scale) {
  const Matrix mu = mean_row(ref);
  Matrix out = pattern;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t i = 0; i < map.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < map.cols(); ++j) s += map(i, j) * mu(0, j);
      out(r, i) += scale * s;
    }
  return out;
}

inline World make_world(const ToyConfig& cfg) {
  World w;
  w.cfg = cfg;
  w.caption = parse_caption(cfg.caption);
  w.mask = build_speech_mask(w.caption);
  std::map<std::size_t, std::size_t> tts;
  for (std::size_t u = 0; u < w.caption.utterances.size(); ++u) {
    tts[u] = 2;
    w.tts_counts.push_back(2);
  }
  const int sid = w.caption.subjects.front().subject_id;
  w.assignment = assign_positions(w.caption, {{sid, ImageGrid{1, 2}}}, {{sid, 1}}, tts);
  Rng rng(cfg.seed ^ 0x5eed'7011ULL);
  const std::size_t d = cfg.d;
  w.c_txt = random_normal(w.caption.tokens.size(), d, rng);
  for (std::size_t k = 0; k < cfg.identities; ++k) {
    w.ids.push_back({random_normal(2, d, rng), random_normal(1, d, rng),
                     random_normal(2 * w.caption.utterances.size(), d, rng)});
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  w.map_v = random_normal(d, d, rng, s);
  w.map_a = random_normal(d, d, rng, s);
  w.pattern_v = random_normal(cfg.video_rows, d, rng, 0.5);
  w.pattern_a = random_normal(cfg.audio_rows, d, rng, 0.5);
  return w;
}

inline Sample draw(const World& w, Rng& rng, DataRegime regime) {
  Sample s;
  s.identity = std::uniform_int_distribution<std::size_t>(0, w.ids.size() - 1)(rng);
  const Identity& id = w.ids[s.identity];
  const std::size_t d = w.cfg.d;
  const Matrix clean_v = clean_latents(id.img, w.map_v, w.pattern_v, w.cfg.clean_scale);
  const Matrix clean_a = clean_latents(id.voice, w.map_a, w.pattern_a, w.cfg.clean_scale);
  const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const Matrix noise_v = random_normal(w.cfg.video_rows, d, rng);
  const Matrix noise_a = random_normal(w.cfg.audio_rows, d, rng);
  s.state.t = t;
  s.state.z_v = Matrix(clean_v.rows(), d);
  s.state.z_a = Matrix(clean_a.rows(), d);
  s.target_v = Matrix(clean_v.rows(), d);
  s.target_a = Matrix(clean_a.rows(), d);
  for (std::size_t i = 0; i < clean_v.size(); ++i) {
    s.state.z_v.flat()[i] = (1.0 - t) * clean_v.flat()[i] + t * noise_v.flat()[i];
    s.target_v.flat()[i] = noise_v.flat()[i] - clean_v.flat()[i];
  }
  for (std::size_t i = 0; i < clean_a.size(); ++i) {
    s.state.z_a.flat()[i] = (1.0 - t) * clean_a.flat()[i] + t * noise_a.flat()[i];
    s.target_a.flat()[i] = noise_a.flat()[i] - clean_a.flat()[i];
  }
  // cross-pair: references come from "another clip" of the same identity
  auto ref = [&](const Matrix& m) {
    if (regime == DataRegime::InPair) return m;
    Matrix j = random_normal(m.rows(), m.cols(), rng, 0.1);
    for (std::size_t i = 0; i < j.size(); ++i) j.flat()[i] += m.flat()[i];
    return j;
  };
  s.state.ref_v = ref(id.img);
  s.state.ref_a = ref(id.voice);
  s.cond_img = s.state.ref_v;
  s.cond_voice = s.state.ref_a;
  return s;
}

/// caption -> MTP-CA -> OCF -> context for the denoiser
inline ad::Var context(ParamBinder& p, const World& w, const OcfConfig& ocf, const MtpcaConfig& mt, const Sample& s) {
  ad::Tape& tape = p.tape();
  ad::Var c_tts = tape.constant(w.ids[s.identity].tts);
  ad::Var gated = mtpca_forward(p, mt, tape.constant(w.c_txt), c_tts, w.tts_counts, w.mask);
  return ocf_forward(p, ocf, gated, tape.constant(s.cond_img), tape.constant(s.cond_voice), c_tts, w.assignment,
                     ocf.rope());
}

inline ad::Var sample_loss(ParamBinder& p, const World& w, const OcfConfig& ocf, const MtpcaConfig& mt,
                           const DenoiserConfig& dc, const Sample& s, StepKind kind) {
  ad::Tape& tape = p.tape();
  ad::Var ctx = context(p, w, ocf, mt, s);
  const StateVars sv = state_constants(tape, s.state, dc);
  if (kind == StepKind::TtsOnly) {
    ad::Var pred = audio_only_forward(p, dc, sv.z_a, sv.ref_a, sv.t, ctx);
    ad::Var ta = tape.constant(s.target_a);
    return flow_loss(pred, pred, ta, ta, kind);
  }
  JointPrediction pred = joint_forward(p, dc, sv, ctx);
  return flow_loss(pred.v, pred.a, tape.constant(s.target_v), tape.constant(s.target_a), kind);
}

inline double eval_loss(const ParamSet& params, const World& w, const OcfConfig& ocf, const MtpcaConfig& mt,
                        const DenoiserConfig& dc, const std::vector<Sample>& set) {
  double total = 0.0;
  for (const Sample& s : set) {
    ad::Tape tape;
    ParamBinder p(tape, params, false);
    total += sample_loss(p, w, ocf, mt, dc, s, StepKind::Javg).value()(0, 0);
  }
  return total / static_cast<double>(set.size());
}

}  // namespace toy_detail

inline ToyReport run_toy_training(const ToyConfig& cfg) {
  using namespace toy_detail;
  const auto started = std::chrono::steady_clock::now();
  const World world = make_world(cfg);

  const OcfConfig ocf{cfg.d, 1, 1, 2};
  const MtpcaConfig mt{cfg.d, 1};
  const DenoiserConfig dc{cfg.d, cfg.d, cfg.d, 2, 1, 2, 4};
  ParamSet params = init_ocf_params(ocf, cfg.seed).tensors;
  params.merge(init_mtpca_params(mt, cfg.seed + 1).tensors);
  params.merge(init_denoiser_params(dc, cfg.seed + 2).tensors);

  OptimConfig optim;
  optim.lr_init = cfg.lr_init;
  optim.lr_final = cfg.lr_final;
  std::vector<StageConfig> stages = default_stages(cfg.scale);
  for (auto& st : stages) {
    st.javg_batch = cfg.javg_batch;
    st.tts_batch = cfg.tts_batch;
  }
  const StepPlan plan = build_plan(stages, optim);

  Rng eval_rng(cfg.seed ^ 0xe7a1ULL);
  std::vector<Sample> eval_set;
  for (std::size_t i = 0; i < cfg.eval_samples; ++i) eval_set.push_back(draw(world, eval_rng, DataRegime::InPair));

  ToyReport report;
  report.seed = cfg.seed;
  report.steps = plan.size();
  report.initial_loss = eval_loss(params, world, ocf, mt, dc, eval_set);

  AdamW opt(optim);
  Rng rng(cfg.seed ^ 0x7a1bULL);
  for (const PlanStep& step : plan.steps) {
    const StageConfig& stage = plan.stages[step.stage_index];
    const std::size_t batch = step.kind == StepKind::Javg ? stage.javg_batch : stage.tts_batch;
    GradMap grads = zeros_like(params);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const Sample s = draw(world, rng, stage.data_regime);
      ad::Tape tape;
      ParamBinder p(tape, params, true);
      ad::Var loss = sample_loss(p, world, ocf, mt, dc, s, step.kind);
      tape.backward(loss);
      loss_sum += loss.value()(0, 0);
      for (const auto& [name, g] : p.gradients()) {
        auto dst = grads[name].flat();
        auto src = g.flat();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i] / static_cast<double>(batch);
      }
    }
    if (step.kind == StepKind::TtsOnly) {
      for (const auto& [name, g] : grads) {
        if (!frozen_in(step.kind, group_of(name))) continue;
        for (double v : g.flat())
          if (v != 0.0) {
            ++report.severance_violations;
            break;
          }
      }
      ++report.tts_steps;
    } else {
      ++report.javg_steps;
    }
    grads = gate_gradients(std::move(grads), step.kind);
    opt.step(
        params, grads,
        [&](const std::string& name) { return follows_cosine(group_of(name)) ? step.lr : optim.lr_init; },
        [&](const std::string& name) { return frozen_in(step.kind, group_of(name)); });
    report.log.push_back({step.global_step, step.kind, step.lr, loss_sum / static_cast<double>(batch)});
  }

  report.final_loss = eval_loss(params, world, ocf, mt, dc, eval_set);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace omni
