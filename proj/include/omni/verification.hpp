#pragma once

// Seeded self-checks shared by the `check` subcommand and the test suites:
// finite-difference gradient checks of the three differentiable modules and
// the TTS-only severance contract.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "omni/autodiff.hpp"
#include "omni/denoiser.hpp"
#include "omni/fusion.hpp"
#include "omni/gradcheck.hpp"
#include "omni/params.hpp"
#include "omni/schedule.hpp"
#include "omni/speech_gate.hpp"

namespace omni::verify {

/// Analytic gradients of build(binder) -> 1x1 against central differences,
/// over every tensor in `values` (parameters and inputs alike).
template <class Build>
GradCheckResult check_scenario(ParamSet values, Build&& build, double step = 1e-5) {
  ad::Tape tape;
  ParamBinder bind(tape, values, true);
  ad::Var loss = build(bind);
  tape.backward(loss);
  const GradMap analytic = bind.gradients();
  return finite_difference_check(values, analytic, [&](const ParamSet& v) {
    ad::Tape t;
    ParamBinder b(t, v, false);
    return build(b).value()(0, 0);
  }, step);
}

/// Replaces every tensor with N(0, scale^2) noise, including the ones that
/// initialize to zero, so every pathway carries signal.
inline void randomize(ParamSet& ps, Rng& rng, double scale = 0.5) {
  for (auto& [name, m] : ps) {
    const bool gain = name.ends_with("norm");
    Matrix r = random_normal(m.rows(), m.cols(), rng, gain ? 0.2 : scale);
    if (gain)
      for (double& v : r.flat()) v += 1.0;
    m = std::move(r);
  }
}

/// Small synthetic coordinate layout: text at 0..T-1 with a +2 gap after
/// the first half, image tokens at the gap, audio one step later, TTS
/// spread over the last text tokens.
inline PositionalAssignment synthetic_assignment(std::size_t text, std::size_t image_h, std::size_t image_w,
                                                 std::size_t audio, std::size_t tts) {
  PositionalAssignment a;
  const std::size_t split = text / 2;
  for (std::size_t i = 0; i < text; ++i) a.text_coords.push_back({static_cast<double>(i < split ? i : i + 2), 0, 0});
  const double e = split == 0 ? -1.0 : a.text_coords[split - 1].t;
  if (image_h * image_w > 0) {
    auto& img = a.image_coords[1];
    for (std::size_t h = 0; h < image_h; ++h)
      for (std::size_t w = 0; w < image_w; ++w) img.push_back({e + 1, static_cast<double>(h), static_cast<double>(w)});
  }
  if (audio > 0) {
    auto& aud = a.audio_coords[1];
    for (std::size_t j = 0; j < audio; ++j) aud.push_back({e + 2, static_cast<double>(j), 0});
  }
  if (tts > 0 && text > 0) a.tts_coords[0] = tts_positions(a.text_coords[split].t, a.text_coords.back().t, tts);
  return a;
}

inline GradCheckResult ocf_gradient_check(std::uint64_t seed, std::size_t d = 8, std::size_t text = 6,
                                          std::size_t layers = 2) {
  Rng rng(seed);
  OcfParams params = init_ocf_params(OcfConfig{d, layers, 1, 2}, seed);
  randomize(params.tensors, rng);
  const PositionalAssignment assign = synthetic_assignment(text, 1, 2, 2, 2);
  ParamSet all = params.tensors;
  all["in.c_txt"] = random_normal(text, d, rng);
  all["in.c_v"] = random_normal(assign.image_count(), d, rng);
  all["in.c_a"] = random_normal(assign.audio_count(), d, rng);
  all["in.c_tts"] = random_normal(assign.tts_count(), d, rng);
  const Matrix weights = random_normal(text, d, rng);
  const OcfConfig cfg = params.config;
  return check_scenario(std::move(all), [&](ParamBinder& p) {
    ad::Var out = ocf_forward(p, cfg, p("in.c_txt"), p("in.c_v"), p("in.c_a"), p("in.c_tts"), assign, cfg.rope());
    return ad::weighted_sum(out, weights);
  });
}

inline GradCheckResult mtpca_gradient_check(std::uint64_t seed, std::size_t d = 8, std::size_t text = 6) {
  Rng rng(seed);
  MtpcaParams params = init_mtpca_params(MtpcaConfig{d, 1}, seed);
  randomize(params.tensors, rng);
  // two utterance runs: positions {1,2} and {4}
  SpeechMask mask;
  mask.values.assign(text, 0);
  mask.utterance.assign(text, -1);
  for (std::size_t i : {1u, 2u}) {
    if (i < text) {
      mask.values[i] = 1;
      mask.utterance[i] = 0;
    }
  }
  if (text > 4) {
    mask.values[4] = 1;
    mask.utterance[4] = 1;
  }
  const std::vector<std::size_t> counts = text > 4 ? std::vector<std::size_t>{3, 2} : std::vector<std::size_t>{3};
  ParamSet all = params.tensors;
  all["in.c_txt"] = random_normal(text, d, rng);
  all["in.c_tts"] = random_normal(counts.size() == 2 ? 5 : 3, d, rng);
  const Matrix weights = random_normal(text, d, rng);
  const MtpcaConfig cfg = params.config;
  return check_scenario(std::move(all), [&](ParamBinder& p) {
    return ad::weighted_sum(mtpca_forward(p, cfg, p("in.c_txt"), p("in.c_tts"), counts, mask), weights);
  });
}

inline GradCheckResult denoiser_gradient_check(std::uint64_t seed, std::size_t n_v = 8, std::size_t n_a = 4,
                                               std::size_t d = 8) {
  Rng rng(seed);
  DenoiserConfig cfg{d, d, d, 2, 1, 2, 4};
  DenoiserParams params = init_denoiser_params(cfg, seed, DenoiserInit{false, false});
  randomize(params.tensors, rng);
  ParamSet all = params.tensors;
  all["in.z_v"] = random_normal(n_v, d, rng);
  all["in.z_a"] = random_normal(n_a, d, rng);
  all["in.ref_v"] = random_normal(2, d, rng);
  all["in.ref_a"] = random_normal(1, d, rng);
  all["in.context"] = random_normal(3, d, rng);
  const Matrix target_v = random_normal(n_v, d, rng);
  const Matrix target_a = random_normal(n_a, d, rng);
  const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return check_scenario(std::move(all), [&](ParamBinder& p) {
    StateVars s{p("in.z_v"), p("in.z_a"), p("in.ref_v"), p("in.ref_a"), t};
    JointPrediction pred = joint_forward(p, cfg, s, p("in.context"));
    ad::Tape& tape = p.tape();
    return flow_loss(pred.v, pred.a, tape.constant(target_v), tape.constant(target_a), StepKind::Javg);
  });
}

struct SeveranceResult {
  bool coupling_grads_zero = true;     // every cross_modal gradient entry is exactly 0
  bool video_grads_zero = true;        // every video-tower gradient entry is exactly 0
  bool audio_grads_nonzero = false;    // sanity: the audio tower did learn something
  bool invariant_to_video = true;      // output bitwise unchanged under z_v / ref_v / video weight noise
  bool gate_is_noop = true;            // gate_gradients changes nothing on these gradients
  std::string detail;

  bool ok() const {
    return coupling_grads_zero && video_grads_zero && audio_grads_nonzero && invariant_to_video && gate_is_noop;
  }
};

/// One TTS-only step on random nonzero parameters.
inline SeveranceResult severance_check(std::uint64_t seed, std::size_t n_v = 8, std::size_t n_a = 4, std::size_t d = 8) {
  Rng rng(seed);
  DenoiserConfig cfg{d, d, d, 2, 1, 2, 4};
  DenoiserParams params = init_denoiser_params(cfg, seed, DenoiserInit{false, false});
  randomize(params.tensors, rng);
  DenoiserState state{random_normal(n_v, d, rng), random_normal(n_a, d, rng),
                      std::uniform_real_distribution<double>(0.0, 1.0)(rng), random_normal(2, d, rng),
                      random_normal(1, d, rng)};
  const Matrix context = random_normal(3, d, rng);
  const Matrix target_a = random_normal(n_a, d, rng);

  SeveranceResult r;
  ad::Tape tape;
  ParamBinder p(tape, params.tensors, true);
  const StateVars sv = state_constants(tape, state, cfg);
  ad::Var pred = audio_only_forward(p, cfg, sv.z_a, sv.ref_a, sv.t, tape.constant(context));
  ad::Var loss = flow_loss(pred, pred, tape.constant(target_a), tape.constant(target_a), StepKind::TtsOnly);
  tape.backward(loss);
  const GradMap grads = p.gradients();
  for (const auto& [name, g] : grads) {
    const std::string group = group_of(name);
    bool all_zero = true;
    for (double v : g.flat()) all_zero = all_zero && v == 0.0;
    if (group == kCrossModalGroup && !all_zero) {
      r.coupling_grads_zero = false;
      r.detail += "nonzero coupling grad " + name + "; ";
    }
    if (group == kVideoGroup && !all_zero) {
      r.video_grads_zero = false;
      r.detail += "nonzero video grad " + name + "; ";
    }
    if (group == kAudioGroup && !all_zero) r.audio_grads_nonzero = true;
  }
  const GradMap gated = gate_gradients(grads, StepKind::TtsOnly);
  for (const auto& [name, g] : grads) r.gate_is_noop = r.gate_is_noop && bitwise_equal(g, gated.at(name));

  const Matrix base = audio_only_forward(state, context, params);
  DenoiserState perturbed = state;
  perturbed.z_v = random_normal(n_v, d, rng, 3.0);
  perturbed.ref_v = random_normal(2, d, rng, 3.0);
  DenoiserParams scrambled = params;
  for (auto& [name, m] : scrambled.tensors) {
    const std::string group = group_of(name);
    if (group == kVideoGroup || group == kCrossModalGroup) m = random_normal(m.rows(), m.cols(), rng);
  }
  r.invariant_to_video = bitwise_equal(base, audio_only_forward(perturbed, context, scrambled));
  if (!r.invariant_to_video) r.detail += "audio-only output moved under video perturbation; ";
  return r;
}

}  // namespace omni::verify
