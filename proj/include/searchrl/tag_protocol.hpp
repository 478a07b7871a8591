#pragma once

// Tag grammar of a search-augmented rollout: streaming parser, serializer and
// the format validator that backs the format reward.

#include <algorithm>
#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"

namespace searchrl {

struct TagTable {
  std::string think_open = "<think>";
  std::string think_close = "</think>";
  std::string answer_open = "<answer>";
  std::string answer_close = "</answer>";
  std::string query_open = "<|begin_of_query|>";
  std::string query_close = "<|end_of_query|>";
  std::string docs_open = "<|begin_of_documents|>";
  std::string docs_close = "<|end_of_documents|>";

  std::array<const std::string*, 8> literals() const {
    return {&think_open,  &think_close, &answer_open, &answer_close,
            &query_open,  &query_close, &docs_open,   &docs_close};
  }

  bool is_tag(std::string_view s) const {
    for (const auto* lit : literals()) {
      if (*lit == s) return true;
    }
    return false;
  }

  /// Throws InvalidConfig if a literal is empty, does not start with '<', or
  /// two literals collide (one a prefix of another).
  void validate() const {
    auto lits = literals();
    for (std::size_t i = 0; i < lits.size(); ++i) {
      if (lits[i]->empty() || (*lits[i])[0] != '<') {
        throw Error(ErrorCode::InvalidConfig,
                    "tag literals must be non-empty and start with '<'");
      }
      for (std::size_t j = 0; j < lits.size(); ++j) {
        if (i != j && lits[j]->starts_with(*lits[i])) {
          throw Error(ErrorCode::InvalidConfig,
                      "tag literal '" + *lits[i] + "' is a prefix of '" +
                          *lits[j] + "'");
        }
      }
    }
  }
};

enum class SegmentKind { Think, Query, Documents, Answer, Plain };

inline const char* to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::Think: return "think";
    case SegmentKind::Query: return "query";
    case SegmentKind::Documents: return "documents";
    case SegmentKind::Answer: return "answer";
    case SegmentKind::Plain: return "plain";
  }
  return "plain";
}

inline SegmentKind segment_kind_from_string(std::string_view s) {
  if (s == "think") return SegmentKind::Think;
  if (s == "query") return SegmentKind::Query;
  if (s == "documents") return SegmentKind::Documents;
  if (s == "answer") return SegmentKind::Answer;
  if (s == "plain") return SegmentKind::Plain;
  throw Error(ErrorCode::Parse, "unknown segment kind '" + std::string(s) + "'");
}

/// Half-open range of token indices.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end == begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const TokenSpan&) const = default;
};

/// One parsed piece of a transcript. A think block that contains queries is
/// split into several Think segments; `opened`/`closed` record which piece
/// carries the block's tags so serialization is byte-exact.
struct Segment {
  SegmentKind kind = SegmentKind::Plain;
  std::string text;
  TokenSpan token_span;
  bool opened = true;
  bool closed = true;
  bool injected = false;  // Documents written by the rollout engine

  bool operator==(const Segment&) const = default;
};

enum class Violation {
  MissingThink,
  MissingAnswer,
  AnswerNotShort,
  GarbledOutput,
  UnexecutedDocuments,
  MalformedQueryTags,
  DanglingTag,
};

inline const char* to_string(Violation v) {
  switch (v) {
    case Violation::MissingThink: return "MissingThink";
    case Violation::MissingAnswer: return "MissingAnswer";
    case Violation::AnswerNotShort: return "AnswerNotShort";
    case Violation::GarbledOutput: return "GarbledOutput";
    case Violation::UnexecutedDocuments: return "UnexecutedDocuments";
    case Violation::MalformedQueryTags: return "MalformedQueryTags";
    case Violation::DanglingTag: return "DanglingTag";
  }
  return "Unknown";
}

inline Violation violation_from_string(std::string_view s) {
  for (auto v : {Violation::MissingThink, Violation::MissingAnswer,
                 Violation::AnswerNotShort, Violation::GarbledOutput,
                 Violation::UnexecutedDocuments, Violation::MalformedQueryTags,
                 Violation::DanglingTag}) {
    if (s == to_string(v)) return v;
  }
  throw Error(ErrorCode::Parse, "unknown violation '" + std::string(s) + "'");
}

struct Transcript {
  std::vector<Segment> segments;
  bool complete = false;
  // Structural problems seen while parsing (stray closers, tags inside a
  // query, unterminated blocks). Folded into the verdict by validate_format.
  std::vector<Violation> structural;

  bool operator==(const Transcript&) const = default;
};

/// Splits text into lossless pieces: optional leading whitespace followed by
/// a tag literal, an alphanumeric run, or a single (UTF-8) character. Trailing
/// whitespace becomes its own piece. Concatenating the pieces gives `text`.
inline std::vector<std::string> split_pieces(std::string_view text,
                                             const TagTable& tags = {}) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto lits = tags.literals();
  while (i < text.size()) {
    std::size_t j = i;
    while (j < text.size() && is_space(text[j])) ++j;
    if (j == text.size()) {
      out.emplace_back(text.substr(i));
      break;
    }
    std::size_t k = j;
    bool matched = false;
    if (text[j] == '<') {
      for (const auto* lit : lits) {
        if (text.substr(j).starts_with(*lit)) {
          k = j + lit->size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) {
      if (is_alnum(text[j])) {
        while (k < text.size() && is_alnum(text[k])) ++k;
      } else {
        const auto lead = static_cast<unsigned char>(text[j]);
        std::size_t len = 1;
        if (lead >= 0xF0) len = 4;
        else if (lead >= 0xE0) len = 3;
        else if (lead >= 0xC0) len = 2;
        k = std::min(text.size(), j + len);
      }
    }
    out.emplace_back(text.substr(i, k - i));
    i = k;
  }
  return out;
}

/// Incremental parser. Feed generated tokens with feed(); the engine writes
/// retrieved documents with feed_injected(). A completed closing query tag
/// produces a halt; parsing resumes transparently after injection.
class StreamParser {
 public:
  struct Step {
    std::vector<Segment> emitted;
    std::vector<std::string> halt_queries;  // stripped query text per halt
    bool answer_closed = false;
  };

  explicit StreamParser(TagTable tags = {}) : tags_(std::move(tags)) {}

  Step feed(std::string_view piece) {
    return feed_pieces(std::span<const std::string_view>(&piece, 1), false);
  }

  Step feed(std::span<const std::string> pieces) {
    std::vector<std::string_view> views(pieces.begin(), pieces.end());
    return feed_pieces(views, false);
  }

  Step feed_injected(std::span<const std::string> pieces) {
    std::vector<std::string_view> views(pieces.begin(), pieces.end());
    return feed_pieces(views, true);
  }

  /// Ends the stream; any open block becomes a DanglingTag.
  Step finish() {
    Step step;
    if (finished_) return step;
    finished_ = true;
    scan_ = text_.size();  // a pending partial tag is plain text
    const std::size_t end = text_.size();
    switch (mode_) {
      case Mode::Outside:
        flush_plain(end, step);
        break;
      case Mode::Done:
        if (end > plain_start_) {
          emit(SegmentKind::Plain, plain_start_, end, plain_start_, end, false,
               false, step);
        }
        break;
      default:
        add_structural(Violation::DanglingTag);
        emit(current_kind(), seg_start_, end, content_start_, end, seg_opened_,
             false, step);
        break;
    }
    return step;
  }

  const Transcript& transcript() const { return transcript_; }
  const std::string& text() const { return text_; }
  std::size_t token_count() const { return starts_.size(); }
  std::size_t halts() const { return halts_; }
  bool answer_closed() const { return mode_ == Mode::Done; }
  const TagTable& tags() const { return tags_; }

  /// Segment kind the next generated token would belong to.
  SegmentKind open_kind() const {
    switch (mode_) {
      case Mode::Think: return SegmentKind::Think;
      case Mode::Query: return SegmentKind::Query;
      case Mode::Documents: return SegmentKind::Documents;
      case Mode::Answer: return SegmentKind::Answer;
      default: return SegmentKind::Plain;
    }
  }

 private:
  enum class Mode { Outside, Think, Query, Documents, Answer, Done };

  SegmentKind current_kind() const { return open_kind(); }

  Step feed_pieces(std::span<const std::string_view> pieces, bool injected) {
    Step step;
    if (finished_) {
      throw Error(ErrorCode::InvalidArgument, "feed after finish");
    }
    for (auto p : pieces) {
      starts_.push_back(text_.size());
      text_.append(p);
    }
    injecting_ = injected;
    scan(step);
    injecting_ = false;
    return step;
  }

  void add_structural(Violation v) { transcript_.structural.push_back(v); }

  TokenSpan span_for(std::size_t a, std::size_t b) const {
    auto lo = std::lower_bound(starts_.begin(), starts_.end(), a);
    auto hi = std::lower_bound(starts_.begin(), starts_.end(), b);
    return {static_cast<std::size_t>(lo - starts_.begin()),
            static_cast<std::size_t>(hi - starts_.begin())};
  }

  void emit(SegmentKind kind, std::size_t seg_begin, std::size_t seg_end,
            std::size_t content_begin, std::size_t content_end, bool opened,
            bool closed, Step& step) {
    Segment s;
    s.kind = kind;
    s.text = text_.substr(content_begin, content_end - content_begin);
    s.token_span = span_for(seg_begin, seg_end);
    s.opened = opened;
    s.closed = closed;
    s.injected = kind == SegmentKind::Documents && seg_injected_;
    if (kind == SegmentKind::Plain) {
      s.opened = s.closed = false;
    }
    // Untagged empty think pieces carry no bytes.
    if (kind == SegmentKind::Think && !opened && !closed && s.text.empty()) {
      return;
    }
    transcript_.segments.push_back(s);
    step.emitted.push_back(std::move(s));
  }

  void flush_plain(std::size_t upto, Step& step) {
    if (upto > plain_start_) {
      emit(SegmentKind::Plain, plain_start_, upto, plain_start_, upto, false,
           false, step);
    }
    plain_start_ = upto;
  }

  void open_block(Mode mode, std::size_t pos, std::size_t len) {
    parent_ = mode_ == Mode::Think ? Mode::Think : Mode::Outside;
    mode_ = mode;
    seg_start_ = pos;
    content_start_ = pos + len;
    seg_opened_ = true;
    seg_injected_ = mode == Mode::Documents && injecting_;
  }

  // Returns to the enclosing block after a query or documents block closed at
  // `after`.
  void return_to_parent(std::size_t after) {
    seg_injected_ = false;
    if (parent_ == Mode::Think) {
      mode_ = Mode::Think;
      seg_start_ = after;
      content_start_ = after;
      seg_opened_ = false;
    } else {
      mode_ = Mode::Outside;
      plain_start_ = after;
    }
  }

  const std::string* match_tag(std::size_t pos, bool& partial) const {
    partial = false;
    std::string_view rest(text_.data() + pos, text_.size() - pos);
    for (const auto* lit : tags_.literals()) {
      if (rest.starts_with(*lit)) return lit;
      if (rest.size() < lit->size() && lit->starts_with(rest)) partial = true;
    }
    return nullptr;
  }

  void scan(Step& step) {
    while (scan_ < text_.size()) {
      if (mode_ == Mode::Done) {
        scan_ = text_.size();
        return;
      }
      const std::size_t pos = text_.find('<', scan_);
      if (pos == std::string::npos) {
        scan_ = text_.size();
        return;
      }
      bool partial = false;
      const std::string* tag = match_tag(pos, partial);
      if (!tag) {
        if (partial) {  // wait for more input
          scan_ = pos;
          return;
        }
        scan_ = pos + 1;
        continue;
      }
      scan_ = pos + tag->size();
      on_tag(*tag, pos, step);
    }
  }

  void on_tag(const std::string& tag, std::size_t pos, Step& step) {
    const TagTable& t = tags_;
    const std::size_t len = tag.size();
    const std::size_t after = pos + len;
    switch (mode_) {
      case Mode::Outside:
        if (tag == t.think_open) {
          flush_plain(pos, step);
          open_block(Mode::Think, pos, len);
        } else if (tag == t.answer_open) {
          flush_plain(pos, step);
          open_block(Mode::Answer, pos, len);
        } else if (tag == t.query_open) {
          flush_plain(pos, step);
          open_block(Mode::Query, pos, len);
        } else if (tag == t.docs_open) {
          flush_plain(pos, step);
          open_block(Mode::Documents, pos, len);
        } else {
          add_structural(tag == t.query_close ? Violation::MalformedQueryTags
                                              : Violation::DanglingTag);
        }
        break;
      case Mode::Think:
        if (tag == t.think_close) {
          emit(SegmentKind::Think, seg_start_, after, content_start_, pos,
               seg_opened_, true, step);
          mode_ = Mode::Outside;
          plain_start_ = after;
        } else if (tag == t.query_open || tag == t.docs_open) {
          emit(SegmentKind::Think, seg_start_, pos, content_start_, pos,
               seg_opened_, false, step);
          open_block(tag == t.query_open ? Mode::Query : Mode::Documents, pos,
                     len);
        } else {
          add_structural(tag == t.query_close ? Violation::MalformedQueryTags
                                              : Violation::DanglingTag);
        }
        break;
      case Mode::Query:
        if (tag == t.query_close) {
          emit(SegmentKind::Query, seg_start_, after, content_start_, pos,
               true, true, step);
          const std::string& q = transcript_.segments.back().text;
          if (is_blank(q)) add_structural(Violation::MalformedQueryTags);
          step.halt_queries.emplace_back(trim(q));
          ++halts_;
          return_to_parent(after);
        } else {
          add_structural(Violation::MalformedQueryTags);
        }
        break;
      case Mode::Documents:
        if (tag == t.docs_close) {
          emit(SegmentKind::Documents, seg_start_, after, content_start_, pos,
               true, true, step);
          return_to_parent(after);
        }
        break;
      case Mode::Answer:
        if (tag == t.answer_close) {
          emit(SegmentKind::Answer, seg_start_, after, content_start_, pos,
               true, true, step);
          transcript_.complete = true;
          step.answer_closed = true;
          mode_ = Mode::Done;
          plain_start_ = after;
        } else {
          add_structural(tag == t.query_open || tag == t.query_close
                             ? Violation::MalformedQueryTags
                             : Violation::DanglingTag);
        }
        break;
      case Mode::Done:
        break;
    }
  }

  TagTable tags_;
  std::string text_;
  std::vector<std::size_t> starts_;
  std::size_t scan_ = 0;
  Mode mode_ = Mode::Outside;
  Mode parent_ = Mode::Outside;
  std::size_t plain_start_ = 0;
  std::size_t seg_start_ = 0;
  std::size_t content_start_ = 0;
  bool seg_opened_ = true;
  bool seg_injected_ = false;
  bool injecting_ = false;
  bool finished_ = false;
  std::size_t halts_ = 0;
  Transcript transcript_;
};

/// Parses a complete piece sequence (nothing injected).
inline Transcript parse_pieces(std::span<const std::string> pieces,
                               const TagTable& tags = {}) {
  StreamParser p(tags);
  p.feed(pieces);
  p.finish();
  return p.transcript();
}

inline Transcript parse_text(std::string_view text, const TagTable& tags = {}) {
  const auto pieces = split_pieces(text, tags);
  return parse_pieces(pieces, tags);
}

inline std::string serialize(const Transcript& t, const TagTable& tags = {}) {
  std::string out;
  for (const auto& s : t.segments) {
    const std::string* open = nullptr;
    const std::string* close = nullptr;
    switch (s.kind) {
      case SegmentKind::Think: open = &tags.think_open; close = &tags.think_close; break;
      case SegmentKind::Query: open = &tags.query_open; close = &tags.query_close; break;
      case SegmentKind::Documents: open = &tags.docs_open; close = &tags.docs_close; break;
      case SegmentKind::Answer: open = &tags.answer_open; close = &tags.answer_close; break;
      case SegmentKind::Plain: break;
    }
    if (open && s.opened) out += *open;
    out += s.text;
    if (close && s.closed) out += *close;
  }
  return out;
}

inline std::optional<std::string> extract_answer(const Transcript& t) {
  for (const auto& s : t.segments) {
    if (s.kind == SegmentKind::Answer && s.closed) {
      return std::string(trim(s.text));
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Format validation

struct FormatConfig {
  std::size_t answer_word_limit = 20;
  std::size_t max_ngram_repeats = 10;  // R_max
  // Allowed characters for generated text. Empty means "any valid UTF-8
  // scalar except control characters (tab/newline/CR excepted) and U+FFFD".
  std::u32string allowed_chars;
  // Think blocks with only whitespace (or only nested queries) count as
  // MissingThink.
  bool require_think_content = true;
  // Non-whitespace text outside every tag counts as MissingThink.
  bool allow_untagged_text = false;
};

/// Queries the rollout engine executed, in order.
struct ExecutionLog {
  std::vector<std::string> executed_queries;
};

struct FormatVerdict {
  bool ok = true;
  std::vector<Violation> violations;
};

namespace detail {

// Decodes UTF-8; returns false on any malformed, overlong or surrogate
// sequence.
inline bool decode_utf8(std::string_view s, std::u32string& out) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    char32_t cp = 0;
    std::size_t len = 0;
    if (c < 0x80) { cp = c; len = 1; }
    else if ((c & 0xE0) == 0xC0) { cp = c & 0x1F; len = 2; }
    else if ((c & 0xF0) == 0xE0) { cp = c & 0x0F; len = 3; }
    else if ((c & 0xF8) == 0xF0) { cp = c & 0x07; len = 4; }
    else return false;
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr char32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      return false;
    }
    out.push_back(cp);
    i += len;
  }
  return true;
}

inline bool char_allowed(char32_t cp, const FormatConfig& cfg) {
  if (!cfg.allowed_chars.empty()) {
    return cp == U' ' || cp == U'\n' || cp == U'\t' || cp == U'\r' ||
           cfg.allowed_chars.find(cp) != std::u32string::npos;
  }
  if (cp == U'\t' || cp == U'\n' || cp == U'\r') return true;
  if (cp < 0x20 || cp == 0x7F || (cp >= 0x80 && cp < 0xA0)) return false;
  return cp != 0xFFFD;
}

// True if some stretch of the word sequence is periodic with period <= 4 and
// longer than 4 * max_repeats words, i.e. a 4-gram (or a shorter unit)
// repeated more than max_repeats times back to back.
inline bool has_degenerate_repetition(const std::vector<std::string>& words,
                                      std::size_t max_repeats) {
  const std::size_t limit = 4 * max_repeats;
  for (std::size_t period = 1; period <= 4; ++period) {
    std::size_t run = period;
    for (std::size_t i = period; i < words.size(); ++i) {
      if (words[i] == words[i - period]) {
        ++run;
        if (run > limit) return true;
      } else {
        run = period;
      }
    }
  }
  return false;
}

}  // namespace detail

/// Applies the three format rules. Pure: identical inputs give identical
/// verdicts.
inline FormatVerdict validate_format(const Transcript& t,
                                     const ExecutionLog& log,
                                     const FormatConfig& cfg = {},
                                     const TagTable& tags = {}) {
  std::vector<Violation> v(t.structural.begin(), t.structural.end());

  // Rule 1: reasoning in think, short final answer in answer.
  bool think_ok = false;
  bool in_block = false;
  bool block_has_text = false;
  std::size_t answers = 0;
  for (const auto& s : t.segments) {
    if (s.kind == SegmentKind::Think) {
      if (s.opened) {
        in_block = true;
        block_has_text = false;
      }
      if (!is_blank(s.text)) block_has_text = true;
      if (s.closed && in_block) {
        if (block_has_text || !cfg.require_think_content) think_ok = true;
        in_block = false;
      }
    } else if (s.kind == SegmentKind::Answer && s.closed) {
      ++answers;
      if (split_whitespace(s.text).size() > cfg.answer_word_limit) {
        v.push_back(Violation::AnswerNotShort);
      }
    } else if (s.kind == SegmentKind::Plain && answers == 0 &&
               !cfg.allow_untagged_text && !is_blank(s.text)) {
      v.push_back(Violation::MissingThink);
    }
  }
  if (!think_ok) v.push_back(Violation::MissingThink);
  if (!t.complete || answers == 0) v.push_back(Violation::MissingAnswer);

  // Rule 2: nothing garbled in generated text.
  std::string generated;
  for (const auto& s : t.segments) {
    if (s.kind != SegmentKind::Documents || !s.injected) {
      generated += s.text;
      generated += ' ';
    }
  }
  std::u32string cps;
  bool garbled = !detail::decode_utf8(generated, cps);
  if (!garbled) {
    garbled = std::any_of(cps.begin(), cps.end(), [&](char32_t c) {
      return !detail::char_allowed(c, cfg);
    });
  }
  if (!garbled) {
    std::vector<std::string> words;
    for (auto& p : split_pieces(generated, tags)) {
      auto w = trim(p);
      if (!w.empty()) words.emplace_back(w);
    }
    garbled = detail::has_degenerate_repetition(words, cfg.max_ngram_repeats);
  }
  if (garbled) v.push_back(Violation::GarbledOutput);

  // Rule 3: documents only right after a query the engine executed.
  std::size_t executed = 0;
  for (std::size_t i = 0; i < t.segments.size(); ++i) {
    const auto& s = t.segments[i];
    if (s.kind != SegmentKind::Documents) continue;
    const Segment* prev = nullptr;
    for (std::size_t j = i; j-- > 0;) {
      const auto& c = t.segments[j];
      const bool skippable =
          (c.kind == SegmentKind::Plain ||
           (c.kind == SegmentKind::Think && !c.opened && !c.closed)) &&
          is_blank(c.text);
      if (!skippable) {
        prev = &c;
        break;
      }
    }
    const bool ok = s.injected && prev && prev->kind == SegmentKind::Query &&
                    executed < log.executed_queries.size() &&
                    log.executed_queries[executed] == trim(prev->text);
    if (ok) {
      ++executed;
    } else {
      v.push_back(Violation::UnexecutedDocuments);
    }
  }

  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return {v.empty(), std::move(v)};
}

// ---------------------------------------------------------------------------
// Line-delimited transcript records

inline nlohmann::json to_json(const Segment& s) {
  return {{"kind", to_string(s.kind)},
          {"text", s.text},
          {"token_span", {s.token_span.begin, s.token_span.end}},
          {"opened", s.opened},
          {"closed", s.closed},
          {"injected", s.injected}};
}

inline Segment segment_from_json(const nlohmann::json& j) {
  Segment s;
  s.kind = segment_kind_from_string(j.at("kind").get<std::string>());
  s.text = j.at("text").get<std::string>();
  s.token_span = {j.at("token_span").at(0).get<std::size_t>(),
                  j.at("token_span").at(1).get<std::size_t>()};
  s.opened = j.value("opened", true);
  s.closed = j.value("closed", true);
  s.injected = j.value("injected", false);
  return s;
}

inline nlohmann::json to_json(const Transcript& t) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : t.segments) segs.push_back(to_json(s));
  nlohmann::json structural = nlohmann::json::array();
  for (auto v : t.structural) structural.push_back(to_string(v));
  return {{"segments", segs}, {"complete", t.complete},
          {"structural", structural}};
}

inline Transcript transcript_from_json(const nlohmann::json& j) {
  Transcript t;
  for (const auto& s : j.at("segments")) t.segments.push_back(segment_from_json(s));
  t.complete = j.at("complete").get<bool>();
  if (j.contains("structural")) {
    for (const auto& v : j.at("structural")) {
      t.structural.push_back(violation_from_string(v.get<std::string>()));
    }
  }
  return t;
}

}  // namespace searchrl
