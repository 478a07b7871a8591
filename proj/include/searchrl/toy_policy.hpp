#pragma once

// A log-linear next-token policy over a compact vocabulary.
//
// logit(v) = sum over active context features f of W[f][col(v)]
//          + sum over pointer slots s with v in cands(s) of P[s]
//
// Context features: bias, previous token, token before that, and the parse
// state (segment kind x retrieval-count bucket x position-in-segment bucket x
// think-closed), plus two coarser conjunctions. col(v) is v's own column
// unless the vocabulary puts v in a class, in which case the class shares one
// column. Pointer slots tie weights across the vocabulary: "v is the k-th
// question word", "v is the k-th word of the latest retrieved documents", and
// bag variants (question, documents, current segment, past queries, words
// after a question word, words after a pair of last-query words). Pointer
// weights are indexed by the same parse state (and by segment x position).
//
// Two optional admissibility rules give some tokens logit -inf: the tag
// grammar (structural_mask) and copy-only classes (copy_class).
//
// d log pi(a) / d W[f][c] = [col(a) == c] - sum_{col(v) == c} p(v)   for active f
// d log pi(a) / d P[s]    = [a in cands(s)] - sum_{v in cands(s)} p(v)

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl {

/// Token table of the toy policy: id 0 is <unk>, ids 1..8 are the tags, the
/// rest are words and punctuation in insertion order.
class ToyVocab {
 public:
  static constexpr TokenId kUnk = 0;

  ToyVocab() : ToyVocab(std::vector<std::string>{}) {}

  /// Words named in `classes` share one output column per class.
  explicit ToyVocab(const std::vector<std::string>& words, TagTable tags = {},
                    std::map<std::string, std::string> classes = {})
      : tags_(std::move(tags)), classes_(std::move(classes)) {
    tags_.validate();
    add("<unk>");
    for (const auto* lit : tags_.literals()) add(*lit);
    for (const auto& w : words) {
      if (!lookup_.contains(w)) add(w);
    }
    std::map<std::string, std::size_t> class_col;
    for (const auto& w : words_) {
      auto it = classes_.find(w);
      if (it == classes_.end()) {
        column_.push_back(columns_++);
        continue;
      }
      auto [c, fresh] = class_col.emplace(it->second, columns_);
      if (fresh) ++columns_;
      column_.push_back(c->second);
    }
  }

  std::size_t size() const { return words_.size(); }
  const TagTable& tags() const { return tags_; }
  const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& words() const { return words_; }
  const std::map<std::string, std::string>& classes() const { return classes_; }
  std::size_t columns() const { return columns_; }
  std::size_t column(TokenId id) const { return column_[static_cast<std::size_t>(id)]; }

  std::optional<TokenId> find(std::string_view core) const {
    auto it = lookup_.find(std::string(core));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view core) const { return find(core).value_or(kUnk); }

  TokenId think_open() const { return 1; }
  TokenId think_close() const { return 2; }
  TokenId answer_open() const { return 3; }
  TokenId answer_close() const { return 4; }
  TokenId query_open() const { return 5; }
  TokenId query_close() const { return 6; }
  TokenId docs_open() const { return 7; }
  TokenId docs_close() const { return 8; }

  bool is_tag(TokenId id) const { return id >= 1 && id <= 8; }
  bool is_word(TokenId id) const {
    return id > 8 && static_cast<std::size_t>(id) < words_.size() &&
           is_alnum(words_[static_cast<std::size_t>(id)][0]);
  }

  /// Text a generated token contributes: tags verbatim, words with a leading
  /// space, punctuation bare.
  std::string piece(TokenId id) const {
    const auto& w = word(id);
    return is_word(id) ? " " + w : w;
  }

  Token make(TokenId id) const { return {id, piece(id)}; }

  std::vector<Token> tokenize(std::string_view text) const {
    std::vector<Token> out;
    for (auto& p : split_pieces(text, tags_)) {
      auto core = trim(p);
      out.push_back({core.empty() ? kUnk : id(core), std::move(p)});
    }
    return out;
  }

  /// Ids of the word tokens in `text`, in order.
  std::vector<TokenId> word_ids(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& t : tokenize(text)) {
      if (is_word(t.id)) out.push_back(t.id);
    }
    return out;
  }

 private:
  void add(const std::string& w) {
    lookup_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }

  TagTable tags_;
  std::map<std::string, std::string> classes_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> lookup_;
  std::vector<std::size_t> column_;
  std::size_t columns_ = 0;
};

struct ToyFeatureSpec {
  std::size_t question_slots = 12;
  std::size_t doc_slots = 20;
  std::size_t pos_buckets = 5;
  std::size_t ret_buckets = 4;
  bool pointers = true;
  // Tag grammar: text only inside blocks, queries only while thinking, no
  // empty blocks, one think block, never documents.
  bool structural_mask = false;
  // Inside queries and answers, words of this vocabulary class are admissible
  // only after they appeared in the question or a retrieved document. Empty
  // disables the rule.
  std::string copy_class;

  bool operator==(const ToyFeatureSpec&) const = default;

  /// Settings used for training on the synthetic world.
  static ToyFeatureSpec desk() {
    ToyFeatureSpec s;
    s.structural_mask = true;
    s.copy_class = "entity";
    return s;
  }
};

inline nlohmann::json to_json(const ToyFeatureSpec& f) {
  return {{"question_slots", f.question_slots}, {"doc_slots", f.doc_slots},
          {"pos_buckets", f.pos_buckets},       {"ret_buckets", f.ret_buckets},
          {"pointers", f.pointers},             {"structural_mask", f.structural_mask},
          {"copy_class", f.copy_class}};
}

inline void from_json_into(const nlohmann::json& j, ToyFeatureSpec& f) {
  f.question_slots = j.value("question_slots", f.question_slots);
  f.doc_slots = j.value("doc_slots", f.doc_slots);
  f.pos_buckets = j.value("pos_buckets", f.pos_buckets);
  f.ret_buckets = j.value("ret_buckets", f.ret_buckets);
  f.pointers = j.value("pointers", f.pointers);
  f.structural_mask = j.value("structural_mask", f.structural_mask);
  f.copy_class = j.value("copy_class", f.copy_class);
}

enum class ToyBag { Question, Docs, Segment, Queries, Induction, Hop };

/// Parse-state tracker over a token sequence; the source of all features.
class ToyTracker {
 public:
  enum Seg { kOutside = 0, kThink = 1, kQuery = 2, kDocs = 3, kAnswer = 4 };
  static constexpr std::size_t kSegments = 5;

  ToyTracker(const ToyVocab& vocab, std::vector<TokenId> question)
      : vocab_(&vocab), question_(std::move(question)) {
    question_bag_ = unique(question_);
    seen_ = question_bag_;
  }

  void push(TokenId id) {
    const ToyVocab& v = *vocab_;
    prev2_ = prev1_;
    prev1_ = id;
    if (!v.is_tag(id)) {
      if (v.is_word(id)) {
        ++pos_;
        cur_words_.push_back(id);
      }
      return;
    }
    const Seg before = seg_;
    if (seg_ == kOutside || seg_ == kThink) {
      if (id == v.think_open() && seg_ == kOutside) {
        seg_ = kThink;
        think_opened_ = true;
      } else if (id == v.think_close() && seg_ == kThink) {
        seg_ = kOutside;
        think_closed_ = true;
      } else if (id == v.answer_open() && seg_ == kOutside) {
        seg_ = kAnswer;
      } else if (id == v.query_open() || id == v.docs_open()) {
        parent_ = seg_;
        seg_ = id == v.query_open() ? kQuery : kDocs;
      }
    } else if (seg_ == kQuery && id == v.query_close()) {
      for (auto w : cur_words_) query_bag_.push_back(w);
      query_bag_ = unique(query_bag_);
      last_query_ = unique(cur_words_);
      seg_ = parent_;
    } else if (seg_ == kDocs && id == v.docs_close()) {
      seg_ = parent_;
    } else if (seg_ == kAnswer && id == v.answer_close()) {
      seg_ = kOutside;
      done_ = true;
    }
    if (seg_ != before) {
      pos_ = 0;
      cur_words_.clear();
    }
  }

  /// An injected documents block, one word-id list per passage line; the
  /// tracker sees only its content.
  void observe(const std::vector<std::vector<TokenId>>& lines) {
    ++retrievals_;
    last_docs_.clear();
    induction_.clear();
    hop_.clear();
    auto in_query = [&](TokenId t) {
      return std::binary_search(last_query_.begin(), last_query_.end(), t);
    };
    for (const auto& d : lines) {
      last_docs_.insert(last_docs_.end(), d.begin(), d.end());
      for (std::size_t i = 1; i < d.size(); ++i) {
        if (std::find(question_bag_.begin(), question_bag_.end(), d[i - 1]) != question_bag_.end()) {
          induction_.push_back(d[i]);
        }
        // words that follow two distinct consecutive words of the last query
        if (i >= 2 && d[i - 2] != d[i - 1] && in_query(d[i - 2]) && in_query(d[i - 1])) {
          hop_.push_back(d[i]);
        }
      }
    }
    docs_bag_ = unique(last_docs_);
    seen_.insert(seen_.end(), docs_bag_.begin(), docs_bag_.end());
    seen_ = unique(seen_);
    induction_ = unique(induction_);
    hop_ = unique(hop_);
    prev2_ = vocab_->docs_open();
    prev1_ = vocab_->docs_close();
    pos_ = 0;
    cur_words_.clear();
  }

  Seg seg() const { return seg_; }
  std::size_t pos() const { return pos_; }
  std::size_t retrievals() const { return retrievals_; }
  bool think_opened() const { return think_opened_; }
  bool think_closed() const { return think_closed_; }
  bool done() const { return done_; }
  std::optional<TokenId> prev1() const { return prev1_; }
  std::optional<TokenId> prev2() const { return prev2_; }
  const std::vector<TokenId>& question() const { return question_; }
  const std::vector<TokenId>& question_bag() const { return question_bag_; }
  const std::vector<TokenId>& last_docs() const { return last_docs_; }
  const std::vector<TokenId>& docs_bag() const { return docs_bag_; }
  const std::vector<TokenId>& induction() const { return induction_; }
  const std::vector<TokenId>& query_bag() const { return query_bag_; }
  const std::vector<TokenId>& hop() const { return hop_; }
  /// Question words plus every retrieved word so far, sorted.
  const std::vector<TokenId>& seen() const { return seen_; }
  std::vector<TokenId> segment_bag() const { return unique(cur_words_); }

 private:
  static std::vector<TokenId> unique(std::vector<TokenId> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  }

  const ToyVocab* vocab_;
  std::vector<TokenId> question_;
  std::vector<TokenId> question_bag_;
  Seg seg_ = kOutside;
  Seg parent_ = kOutside;
  std::size_t pos_ = 0;
  std::size_t retrievals_ = 0;
  bool think_opened_ = false;
  bool think_closed_ = false;
  bool done_ = false;
  std::optional<TokenId> prev1_;
  std::optional<TokenId> prev2_;
  std::vector<TokenId> cur_words_;
  std::vector<TokenId> last_docs_;
  std::vector<TokenId> docs_bag_;
  std::vector<TokenId> induction_;
  std::vector<TokenId> query_bag_;
  std::vector<TokenId> last_query_;
  std::vector<TokenId> hop_;
  std::vector<TokenId> seen_;
};

/// Sparse gradient of one log-prob: (flat parameter index, value) pairs.
struct SparseGrad {
  std::vector<std::pair<std::size_t, double>> entries;

  double at(std::size_t index) const {
    double s = 0.0;
    for (const auto& [i, v] : entries) {
      if (i == index) s += v;
    }
    return s;
  }
};

/// Everything computed at one decision point.
struct ScoredStep {
  std::vector<std::size_t> active_rows;
  std::size_t state = 0;
  std::size_t seg_pos = 0;
  std::vector<double> logits;  // -inf for <unk>
  double logprob = 0.0;        // of the chosen token
  SparseGrad grad;             // of that log-prob
};

class ToyPolicy : public Policy {
 public:
  ToyPolicy() : ToyPolicy(ToyVocab{}) {}

  explicit ToyPolicy(ToyVocab vocab, ToyFeatureSpec spec = {})
      : vocab_(std::move(vocab)), spec_(spec) {
    layout();
    weights_.assign(param_count_, 0.0);
  }

  // -- layout -------------------------------------------------------------

  std::size_t vocab_size() const { return vocab_.size(); }
  const ToyVocab& vocab() const { return vocab_; }
  const ToyFeatureSpec& spec() const { return spec_; }
  std::size_t row_count() const { return rows_; }
  std::size_t state_count() const { return states_; }
  std::size_t slot_count() const { return slots_; }
  std::size_t seg_pos_count() const { return ToyTracker::kSegments * spec_.pos_buckets; }

  std::size_t parameter_count() const { return param_count_; }
  std::span<double> parameters() { return weights_; }
  std::span<const double> parameters() const { return weights_; }

  std::size_t weight_index(std::size_t row, TokenId v) const {
    return row * vocab_.columns() + vocab_.column(v);
  }
  std::size_t pointer_state_index(std::size_t state, std::size_t slot) const {
    return pointer_state_off_ + state * slots_ + slot;
  }
  std::size_t pointer_segpos_index(std::size_t seg_pos, std::size_t slot) const {
    return pointer_segpos_off_ + seg_pos * slots_ + slot;
  }

  /// Parse-state index for (segment, retrieval bucket, position bucket, think closed).
  std::size_t state_of(std::size_t seg, std::size_t ret, std::size_t pos, bool think_closed) const {
    return ((seg * spec_.ret_buckets + std::min(ret, spec_.ret_buckets - 1)) * spec_.pos_buckets +
            std::min(pos, spec_.pos_buckets - 1)) * 2 + (think_closed ? 1 : 0);
  }
  std::size_t state_row(std::size_t state) const { return state_off_ + state; }
  /// Pointer slot ids: question positions, then document positions, then the bags.
  std::size_t question_slot(std::size_t k) const { return k; }
  std::size_t doc_slot(std::size_t k) const { return spec_.question_slots + k; }
  std::size_t bag_slot(ToyBag b) const {
    return spec_.question_slots + spec_.doc_slots + static_cast<std::size_t>(b);
  }

  ToyPolicy snapshot() const { return *this; }

  // -- Policy -------------------------------------------------------------

  std::vector<Token> tokenize(std::string_view text) const override {
    return vocab_.tokenize(text);
  }

  std::string descriptor() const override {
    return "toy:v" + std::to_string(vocab_.size()) + ":p" + std::to_string(param_count_);
  }

  Generation generate(const Context& ctx, const GenerateRequest& req,
                      Rng& rng) const override {
    Generation out;
    ToyTracker tr = replay(ctx, {});
    std::string text;
    std::vector<double> logits;
    std::vector<double> probs;
    for (std::size_t n = 0; n < req.max_tokens; ++n) {
      compute_logits(tr, logits);
      const double lse = softmax(logits, probs);
      const TokenId tok = sample(logits, req.temperature, rng);
      out.tokens.push_back(vocab_.make(tok));
      out.logprobs.push_back(logits[static_cast<std::size_t>(tok)] - lse);
      tr.push(tok);
      const std::size_t before = text.size();
      text += out.tokens.back().piece;
      bool stop = false;
      for (const auto& s : req.stop) {
        if (s.empty()) continue;
        const std::size_t from = before >= s.size() ? before - s.size() + 1 : 0;
        if (text.find(s, from) != std::string::npos) stop = true;
      }
      if (stop) break;
    }
    return out;
  }

  std::vector<double> score(const Context& ctx,
                            std::span<const Token> continuation) const override {
    std::vector<double> out(continuation.size(), 0.0);
    walk(ctx, continuation, [&](std::size_t i, const ToyTracker& tr, TokenId tok) {
      std::vector<double> logits;
      compute_logits(tr, logits);
      out[i] = logits[static_cast<std::size_t>(tok)] - log_sum_exp(logits);
    });
    return out;
  }

  void accumulate_logprob_grad(const Context& ctx, std::span<const Token> continuation,
                               std::span<const double> coeffs,
                               std::span<double> grad) const {
    if (coeffs.size() != continuation.size()) {
      throw Error(ErrorCode::LengthMismatch, "coefficient count differs from token count");
    }
    std::vector<double> logits;
    std::vector<double> probs;
    walk(ctx, continuation, [&](std::size_t i, const ToyTracker& tr, TokenId tok) {
      const double c = coeffs[i];
      if (c == 0.0) return;
      compute_logits(tr, logits);
      softmax(logits, probs);
      add_grad(tr, tok, probs, c, grad);
    });
  }

  // -- Direct access for tests and tooling -------------------------------

  /// Logits of the next token after ctx.response (next_distribution).
  std::vector<double> logits(const Context& ctx) const {
    ToyTracker tr = replay(ctx, {});
    std::vector<double> out;
    compute_logits(tr, out);
    return out;
  }

  /// log pi(token | ctx) with its sparse gradient (logprob_grad).
  ScoredStep score_step(const Context& ctx, TokenId token) const {
    check_token(token);
    ToyTracker tr = replay(ctx, {});
    ScoredStep s;
    s.active_rows = active_rows(tr);
    s.state = state_index(tr);
    s.seg_pos = seg_pos_index(tr);
    compute_logits(tr, s.logits);
    std::vector<double> probs;
    const double lse = softmax(s.logits, probs);
    s.logprob = s.logits[static_cast<std::size_t>(token)] - lse;
    std::vector<double> col_grad(vocab_.columns(), 0.0);
    std::vector<bool> col_used(vocab_.columns(), false);
    for (std::size_t v = 1; v < vocab_.size(); ++v) {
      const auto c = vocab_.column(static_cast<TokenId>(v));
      col_grad[c] += (static_cast<TokenId>(v) == token ? 1.0 : 0.0) - probs[v];
      col_used[c] = true;
    }
    for (auto row : s.active_rows) {
      for (std::size_t c = 0; c < col_grad.size(); ++c) {
        if (col_used[c]) s.grad.entries.emplace_back(row * vocab_.columns() + c, col_grad[c]);
      }
    }
    if (spec_.pointers) {
      for_each_slot(tr, [&](std::size_t slot, std::span<const TokenId> cands) {
        double mass = 0.0;
        bool hit = false;
        for (auto c : cands) {
          mass += probs[static_cast<std::size_t>(c)];
          hit = hit || c == token;
        }
        const double g = (hit ? 1.0 : 0.0) - mass;
        s.grad.entries.emplace_back(pointer_state_index(s.state, slot), g);
        s.grad.entries.emplace_back(pointer_segpos_index(s.seg_pos, slot), g);
      });
    }
    return s;
  }

  SparseGrad logprob_grad(const Context& ctx, TokenId token) const {
    return score_step(ctx, token).grad;
  }

  // -- Serialization ------------------------------------------------------

  nlohmann::json to_json() const {
    const auto& t = vocab_.tags();
    std::vector<std::string> words(vocab_.words().begin() + 9, vocab_.words().end());
    return {{"kind", "toy"},
            {"vocab", words},
            {"classes", vocab_.classes()},
            {"tags",
             {t.think_open, t.think_close, t.answer_open, t.answer_close,
              t.query_open, t.query_close, t.docs_open, t.docs_close}},
            {"features", searchrl::to_json(spec_)},
            {"weights", weights_}};
  }

  static ToyPolicy from_json(const nlohmann::json& j) {
    TagTable tags;
    const auto& t = j.at("tags");
    tags.think_open = t.at(0); tags.think_close = t.at(1);
    tags.answer_open = t.at(2); tags.answer_close = t.at(3);
    tags.query_open = t.at(4); tags.query_close = t.at(5);
    tags.docs_open = t.at(6); tags.docs_close = t.at(7);
    ToyFeatureSpec spec;
    from_json_into(j.at("features"), spec);
    std::map<std::string, std::string> classes;
    if (j.contains("classes")) classes = j.at("classes").get<std::map<std::string, std::string>>();
    ToyPolicy p(ToyVocab(j.at("vocab").get<std::vector<std::string>>(), tags, std::move(classes)),
                spec);
    auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != p.parameter_count()) {
      throw Error(ErrorCode::Parse, "toy policy weight count mismatch");
    }
    for (double x : w) {
      if (!std::isfinite(x)) throw Error(ErrorCode::Parse, "non-finite toy policy weight");
    }
    p.weights_ = std::move(w);
    return p;
  }

 private:
  void layout() {
    copy_column_.reset();
    if (!spec_.copy_class.empty()) {
      for (const auto& [w, cls] : vocab_.classes()) {
        if (cls == spec_.copy_class) {
          if (auto id = vocab_.find(w)) copy_column_ = vocab_.column(*id);
          break;
        }
      }
    }
    const std::size_t c = vocab_.columns();
    const std::size_t segs = ToyTracker::kSegments;
    states_ = segs * spec_.ret_buckets * spec_.pos_buckets * 2;
    prev1_off_ = 1;
    prev2_off_ = prev1_off_ + c + 1;
    state_off_ = prev2_off_ + c + 1;
    segret_off_ = state_off_ + states_;
    segpos_off_ = segret_off_ + segs * spec_.ret_buckets;
    rows_ = segpos_off_ + segs * spec_.pos_buckets;
    slots_ = spec_.pointers ? spec_.question_slots + spec_.doc_slots + kBagSlots : 0;
    pointer_state_off_ = rows_ * vocab_.columns();
    pointer_segpos_off_ = pointer_state_off_ + states_ * slots_;
    param_count_ = pointer_segpos_off_ + seg_pos_count() * slots_;
  }

  static constexpr std::size_t kBagSlots = 6;

  void check_token(TokenId t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_.size()) {
      throw Error(ErrorCode::UnknownToken, "token id " + std::to_string(t) + " not in vocabulary");
    }
  }

  std::size_t ret_bucket(const ToyTracker& tr) const {
    return std::min(tr.retrievals(), spec_.ret_buckets - 1);
  }
  std::size_t pos_bucket(const ToyTracker& tr) const {
    return std::min(tr.pos(), spec_.pos_buckets - 1);
  }
  std::size_t state_index(const ToyTracker& tr) const {
    return state_of(static_cast<std::size_t>(tr.seg()), tr.retrievals(), tr.pos(),
                    tr.think_closed());
  }
  std::size_t seg_pos_index(const ToyTracker& tr) const {
    return static_cast<std::size_t>(tr.seg()) * spec_.pos_buckets + pos_bucket(tr);
  }

  std::vector<std::size_t> active_rows(const ToyTracker& tr) const {
    const std::size_t c = vocab_.columns();
    const auto p1 = tr.prev1();
    const auto p2 = tr.prev2();
    return {0,
            prev1_off_ + (p1 ? vocab_.column(*p1) : c),
            prev2_off_ + (p2 ? vocab_.column(*p2) : c),
            state_off_ + state_index(tr),
            segret_off_ + static_cast<std::size_t>(tr.seg()) * spec_.ret_buckets + ret_bucket(tr),
            segpos_off_ + seg_pos_index(tr)};
  }

  template <typename F>
  void for_each_slot(const ToyTracker& tr, F&& f) const {
    const auto& q = tr.question();
    for (std::size_t k = 0; k < spec_.question_slots; ++k) {
      if (k < q.size()) f(k, std::span<const TokenId>(&q[k], 1));
    }
    const auto& d = tr.last_docs();
    for (std::size_t k = 0; k < spec_.doc_slots; ++k) {
      if (k < d.size()) f(spec_.question_slots + k, std::span<const TokenId>(&d[k], 1));
    }
    const std::size_t base = spec_.question_slots + spec_.doc_slots;
    f(base + 0, std::span<const TokenId>(tr.question_bag()));
    f(base + 1, std::span<const TokenId>(tr.docs_bag()));
    const auto seg_bag = tr.segment_bag();
    f(base + 2, std::span<const TokenId>(seg_bag));
    f(base + 3, std::span<const TokenId>(tr.query_bag()));
    f(base + 4, std::span<const TokenId>(tr.induction()));
    f(base + 5, std::span<const TokenId>(tr.hop()));
  }

  void compute_logits(const ToyTracker& tr, std::vector<double>& logits) const {
    const std::size_t v = vocab_.size();
    logits.assign(v, 0.0);
    for (auto row : active_rows(tr)) {
      const double* w = &weights_[row * vocab_.columns()];
      for (std::size_t i = 0; i < v; ++i) logits[i] += w[vocab_.column(static_cast<TokenId>(i))];
    }
    if (spec_.pointers) {
      const std::size_t st = state_index(tr);
      const std::size_t sp = seg_pos_index(tr);
      for_each_slot(tr, [&](std::size_t slot, std::span<const TokenId> cands) {
        const double b = weights_[pointer_state_index(st, slot)] +
                         weights_[pointer_segpos_index(sp, slot)];
        for (auto c : cands) logits[static_cast<std::size_t>(c)] += b;
      });
    }
    constexpr double kOff = -std::numeric_limits<double>::infinity();
    logits[ToyVocab::kUnk] = kOff;
    if (spec_.structural_mask) {
      // the tag grammar: text only inside blocks, queries only while thinking
      const auto seg = tr.seg();
      const bool content = tr.pos() > 0;
      auto allow = [&](TokenId t, bool ok) {
        if (!ok) logits[static_cast<std::size_t>(t)] = kOff;
      };
      if (seg == ToyTracker::kOutside) {
        for (std::size_t i = 9; i < v; ++i) logits[i] = kOff;
      }
      allow(vocab_.think_open(), seg == ToyTracker::kOutside && !tr.think_opened());
      allow(vocab_.think_close(), seg == ToyTracker::kThink && content);
      allow(vocab_.answer_open(), seg == ToyTracker::kOutside);
      allow(vocab_.answer_close(), seg == ToyTracker::kAnswer && content);
      allow(vocab_.query_open(), seg == ToyTracker::kThink);
      allow(vocab_.query_close(), seg == ToyTracker::kQuery && content);
      allow(vocab_.docs_open(), false);
      allow(vocab_.docs_close(), false);
    }
    if (copy_column_ && (tr.seg() == ToyTracker::kQuery || tr.seg() == ToyTracker::kAnswer)) {
      const auto& seen = tr.seen();
      for (std::size_t i = 9; i < v; ++i) {
        const auto t = static_cast<TokenId>(i);
        if (vocab_.column(t) == *copy_column_ && !std::binary_search(seen.begin(), seen.end(), t)) {
          logits[i] = kOff;
        }
      }
    }
  }

  static double log_sum_exp(const std::vector<double>& logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : logits) m = std::max(m, x);
    double s = 0.0;
    for (double x : logits) s += std::exp(x - m);
    return m + std::log(s);
  }

  // probs = softmax(logits); returns log-sum-exp.
  static double softmax(const std::vector<double>& logits, std::vector<double>& probs) {
    const double lse = log_sum_exp(logits);
    probs.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = std::exp(logits[i] - lse);
    return lse;
  }

  TokenId sample(const std::vector<double>& logits, double temperature, Rng& rng) const {
    if (temperature <= 0.0) {
      std::size_t best = 1;
      for (std::size_t i = 2; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
      }
      return static_cast<TokenId>(best);
    }
    std::vector<double> scaled(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
    std::vector<double> probs;
    softmax(scaled, probs);
    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t last = 1;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      last = i;
      acc += probs[i];
      if (u < acc) return static_cast<TokenId>(i);
    }
    return static_cast<TokenId>(last);
  }

  void add_grad(const ToyTracker& tr, TokenId tok, const std::vector<double>& probs,
                double c, std::span<double> grad) const {
    const std::size_t v = vocab_.size();
    for (auto row : active_rows(tr)) {
      double* g = &grad[row * vocab_.columns()];
      for (std::size_t i = 1; i < v; ++i) g[vocab_.column(static_cast<TokenId>(i))] -= c * probs[i];
      g[vocab_.column(tok)] += c;
    }
    if (spec_.pointers) {
      const std::size_t st = state_index(tr);
      const std::size_t sp = seg_pos_index(tr);
      for_each_slot(tr, [&](std::size_t slot, std::span<const TokenId> cands) {
        double mass = 0.0;
        bool hit = false;
        for (auto cand : cands) {
          mass += probs[static_cast<std::size_t>(cand)];
          hit = hit || cand == tok;
        }
        const double g = c * ((hit ? 1.0 : 0.0) - mass);
        grad[pointer_state_index(st, slot)] += g;
        grad[pointer_segpos_index(sp, slot)] += g;
      });
    }
  }

  // Replays ctx.response; observed spans are consumed as observations.
  ToyTracker replay(const Context& ctx, std::span<const Token> continuation) const {
    ToyTracker tr(vocab_, vocab_.word_ids(ctx.question));
    walk_into(tr, ctx, continuation, [](std::size_t, const ToyTracker&, TokenId) {});
    return tr;
  }

  template <typename F>
  void walk(const Context& ctx, std::span<const Token> continuation, F&& on_token) const {
    ToyTracker tr(vocab_, vocab_.word_ids(ctx.question));
    walk_into(tr, ctx, continuation, on_token);
  }

  // Pushes response ++ continuation through the tracker. on_token
  // is called for each generated continuation token before it is pushed.
  template <typename F>
  void walk_into(ToyTracker& tr, const Context& ctx, std::span<const Token> continuation,
                 F&& on_token) const {
    const std::size_t nr = ctx.response.size();
    const std::size_t total = nr + continuation.size();
    std::size_t span_idx = 0;
    for (std::size_t i = 0; i < total;) {
      if (span_idx < ctx.observed.size() && ctx.observed[span_idx].begin == i) {
        const auto sp = ctx.observed[span_idx];
        const std::string empty;
        const std::string& obs =
            span_idx < ctx.observations.size() ? ctx.observations[span_idx] : empty;
        std::vector<std::vector<TokenId>> lines;
        for (auto line : split_lines(obs)) lines.push_back(vocab_.word_ids(line));
        tr.observe(lines);
        ++span_idx;
        i = std::max(sp.end, i + 1);
        continue;
      }
      const Token& t = i < nr ? ctx.response[i] : continuation[i - nr];
      check_token(t.id);
      if (i >= nr) on_token(i - nr, tr, t.id);
      tr.push(t.id);
      ++i;
    }
  }

  ToyVocab vocab_;
  ToyFeatureSpec spec_;
  std::optional<std::size_t> copy_column_;
  std::size_t states_ = 0;
  std::size_t prev1_off_ = 0;
  std::size_t prev2_off_ = 0;
  std::size_t state_off_ = 0;
  std::size_t segret_off_ = 0;
  std::size_t segpos_off_ = 0;
  std::size_t rows_ = 0;
  std::size_t slots_ = 0;
  std::size_t pointer_state_off_ = 0;
  std::size_t pointer_segpos_off_ = 0;
  std::size_t param_count_ = 0;
  std::vector<double> weights_;
};

static_assert(TrainablePolicy<ToyPolicy>);

}  // namespace searchrl
