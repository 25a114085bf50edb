#pragma once

// Semantic-anchored coordinate assignment. Text tokens advance the temporal
// axis one step at a time. When the terminating "." of subject k's
// descriptor lands at temporal position e, that subject's image tokens sit
// at (e+1, h, w), its audio tokens at (e+2, j, 0), and text resumes at e+3.
// Offsets compose left to right, so later descriptors are measured in the
// already-shifted space. TTS tokens are spread linearly over the temporal
// span of their utterance content with the third axis set to 1.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "omni/caption.hpp"
#include "omni/errors.hpp"
#include "omni/rope.hpp"

namespace omni {

enum class PositionErrorKind { MissingSubject, MissingUtterance, InvalidSpan, InvalidCount };

class PositionError : public Error {
 public:
  PositionError(PositionErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  PositionErrorKind kind() const noexcept { return kind_; }

 private:
  PositionErrorKind kind_;
};

struct ImageGrid {
  std::size_t height = 0;
  std::size_t width = 0;
};

struct PositionalAssignment {
  std::vector<Coord3D> text_coords;
  std::map<int, std::vector<Coord3D>> image_coords;          // per subject, row-major over (h, w)
  std::map<int, std::vector<Coord3D>> audio_coords;          // per subject, j = 0..J-1
  std::map<std::size_t, std::vector<Coord3D>> tts_coords;    // per utterance ordinal

  std::size_t image_count() const { return total(image_coords); }
  std::size_t audio_count() const { return total(audio_coords); }
  std::size_t tts_count() const { return total(tts_coords); }

  /// Coordinates in fused-sequence order: text, image (ascending subject),
  /// audio (ascending subject), TTS (ascending utterance).
  std::vector<Coord3D> flattened() const {
    std::vector<Coord3D> out = text_coords;
    for (const auto& [k, v] : image_coords) out.insert(out.end(), v.begin(), v.end());
    for (const auto& [k, v] : audio_coords) out.insert(out.end(), v.begin(), v.end());
    for (const auto& [k, v] : tts_coords) out.insert(out.end(), v.begin(), v.end());
    return out;
  }

  bool operator==(const PositionalAssignment&) const = default;

 private:
  template <class Map>
  static std::size_t total(const Map& m) {
    std::size_t n = 0;
    for (const auto& [k, v] : m) n += v.size();
    return n;
  }
};

/// count points evenly spaced over [t_start, t_end] on the TTS plane
/// (a2 = 0, a3 = 1). A single point sits at t_start.
inline std::vector<Coord3D> tts_positions(double t_start, double t_end, std::size_t count) {
  if (t_start > t_end) {
    throw PositionError(PositionErrorKind::InvalidSpan,
                        "tts span start " + std::to_string(t_start) + " exceeds end " + std::to_string(t_end));
  }
  if (count == 0) throw PositionError(PositionErrorKind::InvalidCount, "tts token count must be positive");
  std::vector<Coord3D> out(count);
  if (count == 1) {
    out[0] = {t_start, 0.0, 1.0};
    return out;
  }
  const double step = (t_end - t_start) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) out[i] = {t_start + step * static_cast<double>(i), 0.0, 1.0};
  out.back().t = t_end;
  return out;
}

inline PositionalAssignment assign_positions(const OmniCaption& caption,
                                             const std::map<int, ImageGrid>& image_grids = {},
                                             const std::map<int, std::size_t>& audio_lengths = {},
                                             const std::map<std::size_t, std::size_t>& tts_counts = {}) {
  for (const auto& [id, grid] : image_grids) {
    if (!caption.find_subject(id)) {
      throw PositionError(PositionErrorKind::MissingSubject, "image grid given for undeclared subject " + std::to_string(id));
    }
  }
  for (const auto& [id, len] : audio_lengths) {
    if (!caption.find_subject(id)) {
      throw PositionError(PositionErrorKind::MissingSubject, "audio length given for undeclared subject " + std::to_string(id));
    }
  }
  for (const auto& [u, count] : tts_counts) {
    if (u >= caption.utterances.size()) {
      throw PositionError(PositionErrorKind::MissingUtterance,
                          "tts count given for utterance " + std::to_string(u) + " but the caption has " +
                              std::to_string(caption.utterances.size()));
    }
  }

  std::map<std::size_t, int> descriptor_end;  // token index of "." -> subject id
  for (const auto& s : caption.subjects) descriptor_end.emplace(s.span_end, s.subject_id);

  PositionalAssignment out;
  out.text_coords.resize(caption.tokens.size());
  double t = 0.0;
  for (std::size_t i = 0; i < caption.tokens.size(); ++i) {
    out.text_coords[i] = {t, 0.0, 0.0};
    auto it = descriptor_end.find(i);
    if (it == descriptor_end.end()) {
      t += 1.0;
      continue;
    }
    const int id = it->second;
    const double e = t;
    if (auto g = image_grids.find(id); g != image_grids.end()) {
      auto& coords = out.image_coords[id];
      for (std::size_t h = 0; h < g->second.height; ++h)
        for (std::size_t w = 0; w < g->second.width; ++w)
          coords.push_back({e + 1.0, static_cast<double>(h), static_cast<double>(w)});
    }
    if (auto a = audio_lengths.find(id); a != audio_lengths.end()) {
      auto& coords = out.audio_coords[id];
      for (std::size_t j = 0; j < a->second; ++j) coords.push_back({e + 2.0, static_cast<double>(j), 0.0});
    }
    t = e + 3.0;
  }

  for (const auto& [u, count] : tts_counts) {
    const auto& utt = caption.utterances[u];
    out.tts_coords[u] =
        tts_positions(out.text_coords[utt.content_start].t, out.text_coords[utt.content_end].t, count);
  }
  return out;
}

inline nlohmann::json coords_to_json(const std::vector<Coord3D>& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : v) arr.push_back({c.t, c.a2, c.a3});
  return arr;
}

/// {text:[[t,a2,a3],...], image:{subj:[...]}, audio:{subj:[...]}, tts:{utterance:[...]}}
inline nlohmann::json assignment_to_json(const PositionalAssignment& a) {
  nlohmann::json j;
  j["text"] = coords_to_json(a.text_coords);
  j["image"] = nlohmann::json::object();
  for (const auto& [k, v] : a.image_coords) j["image"][std::to_string(k)] = coords_to_json(v);
  j["audio"] = nlohmann::json::object();
  for (const auto& [k, v] : a.audio_coords) j["audio"][std::to_string(k)] = coords_to_json(v);
  j["tts"] = nlohmann::json::object();
  for (const auto& [k, v] : a.tts_coords) j["tts"][std::to_string(k)] = coords_to_json(v);
  return j;
}

}  // namespace omni
