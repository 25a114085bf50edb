#pragma once

// omni command line: one subcommand per module contract.
//
//   parse | positions | mask | ocf-demo | train-toy | schedule | check
//
// Exit codes: 0 success, 1 module error (diagnostic on stderr), 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "omni/omni.hpp"

namespace omni::cli {

inline constexpr int kOk = 0;
inline constexpr int kModuleError = 1;
inline constexpr int kUsageError = 2;

/// Thrown for bad flag values that CLI11 cannot see (e.g. "--image 1:3y4").
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write '" + path.string() + "'");
}

/// Output path: explicit flag wins, else <out dir>/<default name>, else none.
inline std::optional<std::filesystem::path> artifact(const std::string& flag, const std::string& out_dir,
                                                     const std::string& default_name) {
  if (!flag.empty()) return std::filesystem::path(flag);
  if (!out_dir.empty()) return std::filesystem::path(out_dir) / default_name;
  return std::nullopt;
}

/// Parses a caption file; caption errors are rethrown with the file name
/// prefixed so they read as file:line:col.
inline OmniCaption load_caption(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_caption(text);
  } catch (const CaptionError& e) {
    throw Error(path + ":" + e.what());
  }
}

// "key:value" pairs; the value part is handed to `parse_value`
template <class K, class V, class F>
std::map<K, V> parse_pairs(const std::vector<std::string>& specs, const char* flag, F&& parse_value) {
  std::map<K, V> out;
  for (const auto& s : specs) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw UsageError(std::string(flag) + " expects key:value, got '" + s + "'");
    try {
      std::size_t used = 0;
      const long long key = std::stoll(s.substr(0, colon), &used);
      if (used != colon || key < 0) throw std::invalid_argument("key");
      out[static_cast<K>(key)] = parse_value(s.substr(colon + 1));
    } catch (const std::logic_error&) {
      throw UsageError(std::string(flag) + ": cannot parse '" + s + "'");
    }
  }
  return out;
}

inline std::size_t parse_count(const std::string& s) {
  std::size_t used = 0;
  const long long v = std::stoll(s, &used);
  if (used != s.size() || v < 0) throw std::invalid_argument("count");
  return static_cast<std::size_t>(v);
}

inline ImageGrid parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw std::invalid_argument("grid");
  return ImageGrid{parse_count(s.substr(0, x)), parse_count(s.substr(x + 1))};
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace detail

/// Runs the command line. argv[0] is the program name.
inline int run_cli(const std::vector<std::string>& argv, Streams io = {std::cout, std::cerr}) {
  CLI::App app{"omni: caption grammar, positions, fusion, gating, scheduling and toy training"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 0;
  std::size_t scale = 0;  // 0: subcommand default
  std::string out_dir;
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--scale", scale, "divide all step counts by N")->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "output directory for artifacts");

  // parse
  std::string caption_path, json_path;
  auto* parse = app.add_subcommand("parse", "parse a caption and report its structure");
  parse->add_option("--caption", caption_path, "caption text file")->required();
  parse->add_option("--json", json_path, "write the parsed caption as JSON");

  // positions
  std::vector<std::string> image_specs, audio_specs, tts_specs;
  auto* positions = app.add_subcommand("positions", "assign 3D rotary coordinates");
  positions->add_option("--caption", caption_path, "caption text file")->required();
  positions->add_option("--image", image_specs, "subject:HxW image grid (repeatable)");
  positions->add_option("--audio", audio_specs, "subject:N audio reference length (repeatable)");
  positions->add_option("--tts", tts_specs, "utterance:N phoneme count (repeatable)");
  positions->add_option("--json", json_path, "write coordinates as JSON");

  // mask
  auto* mask = app.add_subcommand("mask", "build the speech mask of a caption");
  mask->add_option("--caption", caption_path, "caption text file")->required();
  mask->add_option("--json", json_path, "write the mask as JSON");

  // ocf-demo
  std::size_t d = 16, layers = 2, heads = 1;
  std::string load_path;
  auto* ocf = app.add_subcommand("ocf-demo", "run fusion on a caption, save and reload a checkpoint");
  ocf->add_option("--caption", caption_path, "caption text file (default: built-in one-subject fixture)");
  ocf->add_option("--d", d, "model width");
  ocf->add_option("--layers", layers, "fusion layers");
  ocf->add_option("--heads", heads, "attention heads");
  ocf->add_option("--load", load_path, "load parameters from this checkpoint instead of initializing");

  // train-toy
  std::size_t toy_d = 8;
  auto* train = app.add_subcommand("train-toy", "train the toy pipeline on the synthetic paired task");
  train->add_option("--d", toy_d, "model width");

  // schedule
  std::string stages_spec = "default", csv_path;
  auto* schedule = app.add_subcommand("schedule", "export the step plan as CSV");
  schedule->add_option("--stages", stages_spec, "'default' or a JSON stage config file");
  schedule->add_option("--csv", csv_path, "write the CSV here (default: stdout or <out>/plan.csv)");

  // check
  bool grads = false, severance = false;
  std::size_t trials = 3;
  auto* check = app.add_subcommand("check", "finite-difference and severance self-checks");
  check->add_flag("--grads", grads, "gradient checks of fusion, gate and denoiser");
  check->add_flag("--severance", severance, "TTS-only severance checks");
  check->add_option("--trials", trials, "seeded trials per check")->check(CLI::PositiveNumber);

  std::vector<std::string> args(argv.size() > 1 ? argv.begin() + 1 : argv.end(), argv.end());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    io.out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    io.out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    io.err << "usage error: " << e.what() << "\n" << app.help();
    return kUsageError;
  }

  try {
    if (*parse) {
      const OmniCaption c = detail::load_caption(caption_path);
      const auto diags = validate_caption(c);
      nlohmann::json j = caption_to_json(c);
      io.out << c.tokens.size() << " tokens, " << c.subjects.size() << " subjects, " << c.utterances.size()
             << " utterances\n";
      for (const auto& s : c.subjects)
        io.out << "sub" << s.subject_id << " span (" << s.span_start << "," << s.span_end << ")\n";
      for (const auto& u : c.utterances)
        io.out << "utterance sub" << u.speaker_id << " j=" << u.utterance_index << " content (" << u.content_start
               << "," << u.content_end << ")\n";
      for (const auto& dg : diags) io.err << caption_path << ": invariant " << to_string(dg.invariant) << ": " << dg.message << "\n";
      if (auto path = detail::artifact(json_path, out_dir, "caption.json")) detail::write_file(*path, j.dump(2) + "\n");
      return diags.empty() ? kOk : kModuleError;
    }

    if (*positions) {
      const OmniCaption c = detail::load_caption(caption_path);
      const auto grids = detail::parse_pairs<int, ImageGrid>(image_specs, "--image", detail::parse_grid);
      const auto audio = detail::parse_pairs<int, std::size_t>(audio_specs, "--audio", detail::parse_count);
      const auto tts = detail::parse_pairs<std::size_t, std::size_t>(tts_specs, "--tts", detail::parse_count);
      const PositionalAssignment a = assign_positions(c, grids, audio, tts);
      const nlohmann::json j = assignment_to_json(a);
      io.out << a.text_coords.size() << " text, " << a.image_count() << " image, " << a.audio_count() << " audio, "
             << a.tts_count() << " tts coordinates\n";
      if (auto path = detail::artifact(json_path, out_dir, "positions.json")) detail::write_file(*path, j.dump(2) + "\n");
      else io.out << j.dump() << "\n";
      return kOk;
    }

    if (*mask) {
      const OmniCaption c = detail::load_caption(caption_path);
      const SpeechMask m = build_speech_mask(c);
      std::string bits;
      for (auto v : m.values) bits += v ? '1' : '0';
      io.out << bits << "\n";
      // every active position must sit strictly inside a speech span
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.values[i] && c.tokens[i].kind != TokenKind::Word) throw SpeechGateError("mask covers a tag at token " + std::to_string(i));
      }
      if (auto path = detail::artifact(json_path, out_dir, "mask.json")) detail::write_file(*path, mask_to_json(m).dump(2) + "\n");
      return kOk;
    }

    if (*ocf) {
      const OmniCaption c = caption_path.empty()
                                ? parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> hi there <E>")
                                : detail::load_caption(caption_path);
      const OcfConfig cfg{d, layers, heads, 2};
      OcfParams params = init_ocf_params(cfg, seed);
      if (!load_path.empty()) {
        Checkpoint ck = read_checkpoint(load_path);
        require_same_layout(params.tensors, ck.params);
        params.tensors = std::move(ck.params);
      }
      // one 2x2 image grid and a 2-token audio reference per subject, two phonemes per utterance
      std::map<int, ImageGrid> grids;
      std::map<int, std::size_t> audio;
      std::map<std::size_t, std::size_t> tts;
      for (const auto& s : c.subjects) {
        grids[s.subject_id] = {2, 2};
        audio[s.subject_id] = 2;
      }
      for (std::size_t u = 0; u < c.utterances.size(); ++u) tts[u] = 2;
      Rng rng(seed);
      ConditionBundle b;
      b.assignment = assign_positions(c, grids, audio, tts);
      b.c_txt = random_normal(c.tokens.size(), d, rng);
      b.c_v = random_normal(b.assignment.image_count(), d, rng);
      b.c_a = random_normal(b.assignment.audio_count(), d, rng);
      b.c_tts = random_normal(b.assignment.tts_count(), d, rng);
      const Matrix enriched = ocf_forward(b, params, cfg.rope());
      double max_delta = 0.0;
      for (std::size_t i = 0; i < enriched.size(); ++i)
        max_delta = std::max(max_delta, std::abs(enriched.flat()[i] - b.c_txt.flat()[i]));
      const bool identity = bitwise_equal(enriched, b.c_txt);
      io.out << "fused length " << b.c_txt.rows() + b.c_v.rows() + b.c_a.rows() + b.c_tts.rows() << ", max |delta| "
             << detail::fmt_double(max_delta) << (identity ? " (identity)" : "") << "\n";
      if (load_path.empty() && !identity) throw Error("freshly initialized fusion is not the identity");
      if (!out_dir.empty()) {
        const auto ck = std::filesystem::path(out_dir) / "ocf.ckpt";
        std::filesystem::create_directories(out_dir);
        write_checkpoint(ck.string(), params.tensors,
                         {{"d", d}, {"layers", layers}, {"heads", heads}, {"seed", seed}});
        // round trip: same tensors, same output
        const Checkpoint back = read_checkpoint(ck.string());
        require_same_layout(params.tensors, back.params);
        for (const auto& [name, m] : params.tensors)
          if (!bitwise_equal(m, back.params.at(name))) throw CheckpointError("round trip changed tensor '" + name + "'");
        const Matrix again = ocf_forward(b, OcfParams{cfg, back.params}, cfg.rope());
        if (!bitwise_equal(again, enriched)) throw CheckpointError("reloaded parameters give a different output");
        nlohmann::json j{{"identity", identity}, {"max_abs_delta", max_delta}, {"text_tokens", b.c_txt.rows()}};
        detail::write_file(std::filesystem::path(out_dir) / "ocf_demo.json", j.dump(2) + "\n");
        io.out << "checkpoint " << ck.string() << " round trip ok\n";
      }
      return kOk;
    }

    if (*train) {
      ToyConfig tc;
      tc.seed = seed;
      tc.d = toy_d;
      if (scale != 0) tc.scale = scale;
      const ToyReport r = run_toy_training(tc);
      io.out << "seed " << r.seed << ": " << r.steps << " steps (" << r.javg_steps << " JAVG, " << r.tts_steps
             << " TTS-only), eval loss " << detail::fmt_double(r.initial_loss) << " -> "
             << detail::fmt_double(r.final_loss) << " (" << detail::fmt_double(100.0 * r.reduction()) << "% lower)\n";
      io.err << "train-toy took " << detail::fmt_double(r.seconds) << " s\n";
      if (!out_dir.empty()) {
        std::ostringstream csv;
        csv.precision(17);
        csv << "step,kind,lr,loss\n";
        for (const auto& s : r.log) csv << s.step << ',' << (s.kind == StepKind::Javg ? 'J' : 'T') << ',' << s.lr << ',' << s.loss << '\n';
        detail::write_file(std::filesystem::path(out_dir) / "train_loss.csv", csv.str());
        nlohmann::json j{{"seed", r.seed},
                         {"steps", r.steps},
                         {"javg_steps", r.javg_steps},
                         {"tts_steps", r.tts_steps},
                         {"initial_loss", r.initial_loss},
                         {"final_loss", r.final_loss},
                         {"reduction", r.reduction()},
                         {"severance_violations", r.severance_violations}};
        detail::write_file(std::filesystem::path(out_dir) / "train_toy.json", j.dump(2) + "\n");
      }
      if (r.severance_violations > 0) throw Error("TTS-only steps produced gradients on frozen groups");
      return kOk;
    }

    if (*schedule) {
      const std::size_t div = scale == 0 ? 1 : scale;
      ScheduleConfig sc;
      if (stages_spec == "default") {
        sc.stages = default_stages(div);
      } else {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(detail::read_file(stages_spec));
        } catch (const nlohmann::json::parse_error& e) {
          throw ScheduleError(ScheduleErrorKind::InvalidConfig, stages_spec + ": " + e.what());
        }
        sc = schedule_config_from_json(j, div);
      }
      const std::string csv = plan_to_csv(build_plan(sc.stages, sc.optim));
      if (auto path = detail::artifact(csv_path, out_dir, "plan.csv")) detail::write_file(*path, csv);
      else io.out << csv;
      return kOk;
    }

    if (*check) {
      if (!grads && !severance) grads = severance = true;
      bool ok = true;
      std::ostringstream report;
      if (grads) {
        struct Row {
          const char* name;
          GradCheckResult (*fn)(std::uint64_t);
        };
        const Row rows[] = {{"ocf_forward", [](std::uint64_t s) { return verify::ocf_gradient_check(s); }},
                            {"mtpca_forward", [](std::uint64_t s) { return verify::mtpca_gradient_check(s); }},
                            {"joint_forward", [](std::uint64_t s) { return verify::denoiser_gradient_check(s); }}};
        for (const Row& row : rows) {
          GradCheckResult all;
          for (std::size_t t = 0; t < trials; ++t) all.merge(row.fn(seed + t));
          const bool pass = all.max_rel_error < 1e-4;
          ok = ok && pass;
          report << (pass ? "ok   " : "FAIL ") << row.name << " max rel error " << detail::fmt_double(all.max_rel_error)
                 << " over " << all.entries << " entries (worst " << all.worst << ")\n";
        }
      }
      if (severance) {
        std::size_t failed = 0;
        for (std::size_t t = 0; t < trials; ++t) {
          const auto r = verify::severance_check(seed + t);
          if (!r.ok()) {
            ++failed;
            report << "  trial " << seed + t << ": " << r.detail << "\n";
          }
        }
        ok = ok && failed == 0;
        report << (failed == 0 ? "ok   " : "FAIL ") << "severance " << trials - failed << "/" << trials << " trials\n";
      }
      io.out << report.str();
      if (!out_dir.empty()) detail::write_file(std::filesystem::path(out_dir) / "check.txt", report.str());
      return ok ? kOk : kModuleError;
    }
  } catch (const UsageError& e) {
    io.err << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kModuleError;
  }
  return kUsageError;
}

}  // namespace omni::cli
