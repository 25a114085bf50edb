#pragma once

// Structured omni-captions. A caption is a whitespace-tokenized prompt laid
// out as
//
//   <label> <subN> is <visual> [,] with <acoustic> .      (one per subject)
//   <environment and actions, anchors refer to declared subjects>
//   <label> <subK> says <S> <spoken words> <E> [.]         (zero or more)
//
// Descriptors come first in ascending subject order, then the global
// section, then speech sentences. Nothing but speech sentences may follow
// the first speech sentence.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "omni/errors.hpp"

namespace omni {

enum class TokenKind { Word, AnchorTag, SpeechStart, SpeechEnd };

struct Token {
  std::string text;
  std::size_t index = 0;
  TokenKind kind = TokenKind::Word;
  int subject_id = 0;  // set for AnchorTag only

  bool operator==(const Token&) const = default;
};

/// Half-open token-index range [begin, end).
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end <= begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  bool operator==(const TokenRange&) const = default;
};

struct SubjectDescriptor {
  int subject_id = 0;
  TokenRange label;
  std::size_t anchor = 0;  // index of the <subN> token
  TokenRange visual_desc;
  TokenRange acoustic_desc;
  std::size_t span_start = 0;  // s_k, inclusive
  std::size_t span_end = 0;    // e_k, inclusive: the terminating "."

  bool operator==(const SubjectDescriptor&) const = default;
};

struct SpeechUtterance {
  int speaker_id = 0;
  std::size_t content_start = 0;  // first token after <S>
  std::size_t content_end = 0;    // last token before <E>, inclusive
  std::size_t utterance_index = 0;  // j: per-speaker ordinal

  bool operator==(const SpeechUtterance&) const = default;
};

struct OmniCaption {
  std::vector<Token> tokens;
  std::vector<SubjectDescriptor> subjects;
  TokenRange global_section;
  std::vector<SpeechUtterance> utterances;

  bool operator==(const OmniCaption&) const = default;

  const SubjectDescriptor* find_subject(int id) const {
    for (const auto& s : subjects)
      if (s.subject_id == id) return &s;
    return nullptr;
  }
};

enum class CaptionErrorKind { EmptyInput, UnterminatedSpeech, UnknownAnchor, MalformedDescriptor, MalformedSpeech };

inline const char* to_string(CaptionErrorKind k) {
  switch (k) {
    case CaptionErrorKind::EmptyInput: return "EmptyInput";
    case CaptionErrorKind::UnterminatedSpeech: return "UnterminatedSpeech";
    case CaptionErrorKind::UnknownAnchor: return "UnknownAnchor";
    case CaptionErrorKind::MalformedDescriptor: return "MalformedDescriptor";
    case CaptionErrorKind::MalformedSpeech: return "MalformedSpeech";
  }
  return "?";
}

/// Parse failure located at a token and at a 1-based line:column of the
/// source text.
class CaptionError : public Error {
 public:
  CaptionError(CaptionErrorKind kind, std::size_t token, std::size_t line, std::size_t column,
               const std::string& detail)
      : Error(std::to_string(line) + ":" + std::to_string(column) + ": " + to_string(kind) + ": " + detail),
        kind_(kind),
        token_(token),
        line_(line),
        column_(column) {}

  CaptionErrorKind kind() const noexcept { return kind_; }
  std::size_t token_index() const noexcept { return token_; }
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  CaptionErrorKind kind_;
  std::size_t token_;
  std::size_t line_;
  std::size_t column_;
};

namespace caption_detail {

/// Kind of a raw token text; AnchorTag requires "<sub" + positive integer
/// without leading zeros + ">".
inline TokenKind classify(std::string_view text, int* subject_id = nullptr) {
  if (text == "<S>") return TokenKind::SpeechStart;
  if (text == "<E>") return TokenKind::SpeechEnd;
  if (text.size() > 5 && text.starts_with("<sub") && text.ends_with(">")) {
    const std::string_view digits = text.substr(4, text.size() - 5);
    if (digits.front() == '0' || digits.size() > 9) return TokenKind::Word;
    int value = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || value <= 0) return TokenKind::Word;
    if (subject_id) *subject_id = value;
    return TokenKind::AnchorTag;
  }
  return TokenKind::Word;
}

struct SourcePos {
  std::size_t line = 1;
  std::size_t column = 1;
};

struct Lexed {
  std::vector<Token> tokens;
  std::vector<SourcePos> where;
};

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

/// Whitespace split; a trailing '.' or ',' glued to a word or tag is split
/// off into its own token.
inline Lexed lex(std::string_view text) {
  Lexed out;
  SourcePos pos;
  std::size_t i = 0;
  auto emit = [&](std::string t, SourcePos p) {
    Token tok;
    tok.index = out.tokens.size();
    tok.kind = classify(t, &tok.subject_id);
    tok.text = std::move(t);
    out.tokens.push_back(std::move(tok));
    out.where.push_back(p);
  };
  while (i < text.size()) {
    if (is_space(text[i])) {
      if (text[i] == '\n') {
        ++pos.line;
        pos.column = 1;
      } else {
        ++pos.column;
      }
      ++i;
      continue;
    }
    const std::size_t start = i;
    const SourcePos at = pos;
    while (i < text.size() && !is_space(text[i])) ++i;
    std::string_view word = text.substr(start, i - start);
    pos.column += word.size();
    std::size_t cut = word.size();
    while (cut > 1 && (word[cut - 1] == '.' || word[cut - 1] == ',')) --cut;
    emit(std::string(word.substr(0, cut)), at);
    for (std::size_t k = cut; k < word.size(); ++k) emit(std::string(1, word[k]), SourcePos{at.line, at.column + k});
  }
  return out;
}

class Parser {
 public:
  explicit Parser(Lexed lexed) : lx_(std::move(lexed)), toks_(lx_.tokens) {}

  OmniCaption run() {
    const std::size_t n = toks_.size();
    if (n == 0) fail(CaptionErrorKind::EmptyInput, 0, "caption has no tokens");

    OmniCaption cap;
    std::size_t pos = 0;
    int last_id = 0;

    // descriptors
    while (pos < n) {
      auto d = try_descriptor(pos, last_id);
      if (!d) break;
      declared_.insert(d->subject_id);
      last_id = d->subject_id;
      pos = d->span_end + 1;
      cap.subjects.push_back(*d);
    }

    // global section ends where the sentence holding the first <S> begins
    std::size_t first_s = pos;
    while (first_s < n && toks_[first_s].kind != TokenKind::SpeechStart) ++first_s;
    std::size_t speech_begin = first_s;
    if (first_s < n) {
      speech_begin = pos;
      for (std::size_t k = pos; k < first_s; ++k)
        if (is_period(k)) speech_begin = k + 1;
    }
    for (std::size_t k = pos; k < speech_begin; ++k) {
      check_reference(k);
      if (toks_[k].kind == TokenKind::SpeechEnd) fail(CaptionErrorKind::MalformedSpeech, k, "'<E>' without '<S>'");
    }
    cap.global_section = {pos, speech_begin};

    // speech sentences
    std::map<int, std::size_t> per_speaker;
    std::size_t p = speech_begin;
    while (p < n) {
      std::size_t s = p;
      std::optional<std::size_t> speaker_tok;
      for (; s < n && toks_[s].kind != TokenKind::SpeechStart; ++s) {
        check_reference(s);
        if (toks_[s].kind == TokenKind::SpeechEnd) fail(CaptionErrorKind::MalformedSpeech, s, "'<E>' without '<S>'");
        if (toks_[s].kind == TokenKind::AnchorTag) speaker_tok = s;
      }
      if (s == n) {
        fail(CaptionErrorKind::MalformedSpeech, p,
             "text after a speech sentence must itself be a speech sentence (global text may not follow speech)");
      }
      if (!speaker_tok) fail(CaptionErrorKind::MalformedSpeech, s, "speech sentence has no speaker anchor before '<S>'");
      std::size_t e = s + 1;
      for (; e < n && toks_[e].kind != TokenKind::SpeechEnd; ++e) {
        if (toks_[e].kind == TokenKind::SpeechStart) fail(CaptionErrorKind::UnterminatedSpeech, s, "'<S>' reopened before '<E>'");
      }
      if (e == n) fail(CaptionErrorKind::UnterminatedSpeech, s, "'<S>' has no matching '<E>'");
      if (e == s + 1) fail(CaptionErrorKind::MalformedSpeech, s, "empty speech content");
      for (std::size_t k = s + 1; k < e; ++k) {
        if (toks_[k].kind == TokenKind::AnchorTag) fail(CaptionErrorKind::MalformedSpeech, k, "anchor tag inside speech content");
      }
      const int speaker = toks_[*speaker_tok].subject_id;
      cap.utterances.push_back(SpeechUtterance{speaker, s + 1, e - 1, per_speaker[speaker]++});
      p = e + 1;
      if (p < n && is_period(p)) ++p;
    }

    cap.tokens = toks_;
    return cap;
  }

 private:
  [[noreturn]] void fail(CaptionErrorKind kind, std::size_t tok, const std::string& detail) const {
    const SourcePos at = tok < lx_.where.size() ? lx_.where[tok] : SourcePos{};
    throw CaptionError(kind, tok, at.line, at.column, detail);
  }

  bool is_period(std::size_t i) const { return toks_[i].kind == TokenKind::Word && toks_[i].text == "."; }
  bool is_word(std::size_t i, std::string_view w) const {
    return toks_[i].kind == TokenKind::Word && toks_[i].text == w;
  }

  void check_reference(std::size_t i) const {
    if (toks_[i].kind == TokenKind::AnchorTag && !declared_.contains(toks_[i].subject_id)) {
      fail(CaptionErrorKind::UnknownAnchor, i, "'" + toks_[i].text + "' is used before any descriptor declares it");
    }
  }

  // A sentence starting at pos is a descriptor iff its first anchor is
  // undeclared and directly followed by "is". Anything else ends the
  // descriptor block.
  std::optional<SubjectDescriptor> try_descriptor(std::size_t pos, int last_id) const {
    const std::size_t n = toks_.size();
    std::size_t a = pos;
    for (; a < n; ++a) {
      const TokenKind k = toks_[a].kind;
      if (k == TokenKind::SpeechStart || k == TokenKind::SpeechEnd || is_period(a)) return std::nullopt;
      if (k == TokenKind::AnchorTag) break;
    }
    if (a == n) return std::nullopt;
    const int id = toks_[a].subject_id;
    if (declared_.contains(id) || a + 1 >= n || !is_word(a + 1, "is")) return std::nullopt;

    if (a == pos) fail(CaptionErrorKind::MalformedDescriptor, a, "descriptor needs an identity label before '" + toks_[a].text + "'");
    if (id <= last_id) {
      fail(CaptionErrorKind::MalformedDescriptor, a, "descriptors must appear in ascending subject order");
    }
    std::size_t end = a + 2;
    while (end < n && !is_period(end)) ++end;
    if (end == n) fail(CaptionErrorKind::MalformedDescriptor, a, "descriptor is not terminated by '.'");

    std::optional<std::size_t> with;
    for (std::size_t k = a + 2; k < end; ++k) {
      if (is_word(k, "with") && is_word(k - 1, ",")) {
        with = k;
        break;
      }
    }
    if (!with) {
      for (std::size_t k = a + 2; k < end; ++k)
        if (is_word(k, "with")) {
          with = k;
          break;
        }
    }
    if (!with) fail(CaptionErrorKind::MalformedDescriptor, a, "descriptor lacks the 'with <acoustic description>' clause");

    const std::size_t visual_end = is_word(*with - 1, ",") ? *with - 1 : *with;
    if (visual_end <= a + 2) fail(CaptionErrorKind::MalformedDescriptor, a + 1, "empty visual description after 'is'");
    if (*with + 1 >= end) fail(CaptionErrorKind::MalformedDescriptor, *with, "empty acoustic description after 'with'");

    for (std::size_t k = pos; k <= end; ++k) {
      if (k == a) continue;
      const TokenKind kk = toks_[k].kind;
      if (kk == TokenKind::SpeechStart || kk == TokenKind::SpeechEnd) {
        fail(CaptionErrorKind::MalformedDescriptor, k, "speech markers are not allowed inside a descriptor");
      }
      if (kk == TokenKind::AnchorTag && toks_[k].subject_id != id) check_reference(k);
    }

    SubjectDescriptor d;
    d.subject_id = id;
    d.label = {pos, a};
    d.anchor = a;
    d.visual_desc = {a + 2, visual_end};
    d.acoustic_desc = {*with + 1, end};
    d.span_start = pos;
    d.span_end = end;
    return d;
  }

  Lexed lx_;
  const std::vector<Token>& toks_;
  std::set<int> declared_;
};

}  // namespace caption_detail

/// Parses caption text into its structured form. Throws CaptionError.
inline OmniCaption parse_caption(std::string_view text) {
  return caption_detail::Parser(caption_detail::lex(text)).run();
}

/// Canonical form: token texts joined by single spaces.
inline std::string serialize_caption(const OmniCaption& caption) {
  std::string out;
  for (const auto& t : caption.tokens) {
    if (!out.empty()) out += ' ';
    out += t.text;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation of an arbitrary (possibly hand-built) caption structure.

enum class CaptionInvariant {
  TokenIndex,           // token indices are not 0..n-1
  TagText,              // kind or subject id disagrees with the token text
  DescriptorStructure,  // label/anchor/visual/acoustic not ordered inside the span
  DescriptorOverlap,    // two descriptor spans share tokens
  DescriptorOrder,      // descriptors not ascending by id and position
  UnknownAnchor,        // anchor id not declared by any descriptor
  SpeechBoundary,       // utterance content not framed by <S> ... <E>
  EmptySpeech,          // utterance content is empty or out of range
  SpeakerMismatch,      // nearest anchor before <S> is not the speaker
  UtteranceIndex,       // j does not count utterances per speaker
  SectionOrder,         // descriptors, global section, speech out of order
  UnpairedSpeechMarker, // #<S> != #<E> != #utterances
};

inline const char* to_string(CaptionInvariant inv) {
  switch (inv) {
    case CaptionInvariant::TokenIndex: return "TokenIndex";
    case CaptionInvariant::TagText: return "TagText";
    case CaptionInvariant::DescriptorStructure: return "DescriptorStructure";
    case CaptionInvariant::DescriptorOverlap: return "DescriptorOverlap";
    case CaptionInvariant::DescriptorOrder: return "DescriptorOrder";
    case CaptionInvariant::UnknownAnchor: return "UnknownAnchor";
    case CaptionInvariant::SpeechBoundary: return "SpeechBoundary";
    case CaptionInvariant::EmptySpeech: return "EmptySpeech";
    case CaptionInvariant::SpeakerMismatch: return "SpeakerMismatch";
    case CaptionInvariant::UtteranceIndex: return "UtteranceIndex";
    case CaptionInvariant::SectionOrder: return "SectionOrder";
    case CaptionInvariant::UnpairedSpeechMarker: return "UnpairedSpeechMarker";
  }
  return "?";
}

struct Diagnostic {
  CaptionInvariant invariant;
  TokenRange range;
  std::string message;

  bool operator==(const Diagnostic&) const = default;
};

inline std::vector<Diagnostic> validate_caption(const OmniCaption& c) {
  std::vector<Diagnostic> out;
  const std::size_t n = c.tokens.size();
  auto report = [&](CaptionInvariant inv, std::size_t b, std::size_t e, std::string msg) {
    out.push_back(Diagnostic{inv, {b, e}, std::move(msg)});
  };

  for (std::size_t i = 0; i < n; ++i) {
    const Token& t = c.tokens[i];
    if (t.index != i) report(CaptionInvariant::TokenIndex, i, i + 1, "token index " + std::to_string(t.index));
    int id = 0;
    const TokenKind k = caption_detail::classify(t.text, &id);
    if (k != t.kind || (k == TokenKind::AnchorTag && id != t.subject_id)) {
      report(CaptionInvariant::TagText, i, i + 1, "kind does not match text '" + t.text + "'");
    }
  }

  std::set<int> declared;
  std::size_t descriptors_end = 0;
  for (const auto& s : c.subjects) {
    declared.insert(s.subject_id);
    const bool in_bounds = s.span_start <= s.span_end && s.span_end < n;
    const bool ordered = in_bounds && s.label.begin == s.span_start && s.label.end == s.anchor &&
                         s.anchor < s.visual_desc.begin && !s.visual_desc.empty() &&
                         s.visual_desc.end <= s.acoustic_desc.begin && !s.acoustic_desc.empty() &&
                         s.acoustic_desc.end <= s.span_end && s.anchor < n &&
                         c.tokens[s.anchor].kind == TokenKind::AnchorTag &&
                         c.tokens[s.anchor].subject_id == s.subject_id;
    if (!ordered) {
      report(CaptionInvariant::DescriptorStructure, s.span_start, std::min(s.span_end + 1, n),
             "descriptor of subject " + std::to_string(s.subject_id) + " is not label <sub> visual with acoustic .");
    }
    descriptors_end = std::max(descriptors_end, s.span_end + 1);
  }
  for (std::size_t i = 0; i < c.subjects.size(); ++i) {
    for (std::size_t j = i + 1; j < c.subjects.size(); ++j) {
      const auto& a = c.subjects[i];
      const auto& b = c.subjects[j];
      const std::size_t lo = std::max(a.span_start, b.span_start);
      const std::size_t hi = std::min(a.span_end, b.span_end);
      if (lo <= hi) {
        report(CaptionInvariant::DescriptorOverlap, lo, hi + 1,
               "descriptors of subjects " + std::to_string(a.subject_id) + " and " + std::to_string(b.subject_id) +
                   " overlap");
      }
    }
    if (i > 0) {
      const auto& prev = c.subjects[i - 1];
      const auto& cur = c.subjects[i];
      if (cur.subject_id <= prev.subject_id || cur.span_start <= prev.span_start) {
        report(CaptionInvariant::DescriptorOrder, cur.span_start, std::min(cur.span_end + 1, n),
               "descriptor of subject " + std::to_string(cur.subject_id) + " is out of order");
      }
    }
  }

  const TokenRange& g = c.global_section;
  if (g.begin > g.end || g.end > n || g.begin < descriptors_end) {
    report(CaptionInvariant::SectionOrder, std::min(g.begin, n), std::min(g.end, n),
           "global section must follow every descriptor");
  }

  for (std::size_t i = 0; i < n; ++i) {
    const Token& t = c.tokens[i];
    if (t.kind == TokenKind::AnchorTag && !declared.contains(t.subject_id)) {
      report(CaptionInvariant::UnknownAnchor, i, i + 1, "'" + t.text + "' has no descriptor");
    }
  }

  std::map<int, std::size_t> per_speaker;
  std::size_t prev_end = 0;
  for (const auto& u : c.utterances) {
    if (u.content_start > u.content_end || u.content_end >= n || u.content_start == 0) {
      report(CaptionInvariant::EmptySpeech, std::min(u.content_start, n), std::min(u.content_end + 1, n),
             "utterance content is empty or out of range");
      continue;
    }
    if (c.tokens[u.content_start - 1].kind != TokenKind::SpeechStart || u.content_end + 1 >= n ||
        c.tokens[u.content_end + 1].kind != TokenKind::SpeechEnd) {
      report(CaptionInvariant::SpeechBoundary, u.content_start, u.content_end + 1, "content is not framed by <S> ... <E>");
    }
    for (std::size_t k = u.content_start; k <= u.content_end; ++k) {
      if (c.tokens[k].kind != TokenKind::Word) {
        report(CaptionInvariant::SpeechBoundary, k, k + 1, "tag inside speech content");
      }
    }
    std::optional<std::size_t> nearest;
    for (std::size_t k = u.content_start; k-- > 0;) {
      if (c.tokens[k].kind == TokenKind::AnchorTag) {
        nearest = k;
        break;
      }
    }
    if (!nearest || c.tokens[*nearest].subject_id != u.speaker_id) {
      const std::size_t at = nearest.value_or(u.content_start - 1);
      report(CaptionInvariant::SpeakerMismatch, at, at + 1,
             "nearest anchor before <S> is not speaker " + std::to_string(u.speaker_id));
    }
    if (u.utterance_index != per_speaker[u.speaker_id]++) {
      report(CaptionInvariant::UtteranceIndex, u.content_start, u.content_end + 1,
             "utterance index " + std::to_string(u.utterance_index) + " out of sequence");
    }
    if (u.content_start < g.end || u.content_start < prev_end) {
      report(CaptionInvariant::SectionOrder, u.content_start, u.content_end + 1,
             "speech must follow the global section in order");
    }
    prev_end = u.content_end + 1;
  }

  std::size_t starts = 0, ends = 0;
  for (const auto& t : c.tokens) {
    starts += t.kind == TokenKind::SpeechStart;
    ends += t.kind == TokenKind::SpeechEnd;
  }
  if (starts != ends || starts != c.utterances.size()) {
    report(CaptionInvariant::UnpairedSpeechMarker, 0, n,
           std::to_string(starts) + " <S>, " + std::to_string(ends) + " <E>, " + std::to_string(c.utterances.size()) +
               " utterances");
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON dump: {tokens:[{i,text,kind}], subjects:[{id,s,e}],
// utterances:[{speaker,start,end,j}], global:{start,end}}. Subject spans and
// utterance content are inclusive; global is half-open.

inline const char* to_string(TokenKind k) {
  switch (k) {
    case TokenKind::Word: return "word";
    case TokenKind::AnchorTag: return "anchor";
    case TokenKind::SpeechStart: return "speech_start";
    case TokenKind::SpeechEnd: return "speech_end";
  }
  return "?";
}

inline nlohmann::json caption_to_json(const OmniCaption& c) {
  nlohmann::json j;
  j["tokens"] = nlohmann::json::array();
  for (const auto& t : c.tokens) j["tokens"].push_back({{"i", t.index}, {"text", t.text}, {"kind", to_string(t.kind)}});
  j["subjects"] = nlohmann::json::array();
  for (const auto& s : c.subjects) j["subjects"].push_back({{"id", s.subject_id}, {"s", s.span_start}, {"e", s.span_end}});
  j["utterances"] = nlohmann::json::array();
  for (const auto& u : c.utterances) {
    j["utterances"].push_back(
        {{"speaker", u.speaker_id}, {"start", u.content_start}, {"end", u.content_end}, {"j", u.utterance_index}});
  }
  j["global"] = {{"start", c.global_section.begin}, {"end", c.global_section.end}};
  return j;
}

}  // namespace omni
