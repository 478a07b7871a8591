#pragma once

// Retrieval environment: an in-memory BM25 index over titled passages plus the
// pluggable web-search path (search client + summarizer).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "searchrl/common.hpp"
#include "searchrl/tag_protocol.hpp"

namespace searchrl {

struct Passage {
  std::string id;
  std::string title;
  std::string body;

  bool operator==(const Passage&) const = default;
};

/// Query/document normalization: lowercase, split on non-alphanumerics.
inline std::vector<std::string> normalize_terms(std::string_view text) {
  std::vector<std::string> terms;
  std::string cur;
  for (char c : text) {
    if (is_alnum(c)) {
      cur.push_back(to_lower(c));
    } else if (!cur.empty()) {
      terms.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) terms.push_back(std::move(cur));
  return terms;
}

struct Posting {
  std::uint32_t doc = 0;  // index into Corpus::passages()
  std::uint32_t tf = 0;

  bool operator==(const Posting&) const = default;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

/// Immutable after build; safe to search from many threads.
class Corpus {
 public:
  /// Indexes title and body of every passage. Throws EmptyCorpus or
  /// DuplicateId.
  static Corpus build(std::vector<Passage> passages) {
    if (passages.empty()) {
      throw Error(ErrorCode::EmptyCorpus, "cannot index an empty passage list");
    }
    Corpus c;
    c.passages_ = std::move(passages);
    c.doc_lengths_.reserve(c.passages_.size());
    for (std::uint32_t d = 0; d < c.passages_.size(); ++d) {
      const auto& p = c.passages_[d];
      if (p.title.empty()) {
        throw Error(ErrorCode::InvalidArgument, "passage '" + p.id + "' has an empty title");
      }
      if (!c.by_id_.emplace(p.id, d).second) {
        throw Error(ErrorCode::DuplicateId, "duplicate passage id '" + p.id + "'");
      }
      std::map<std::string, std::uint32_t> tf;
      auto terms = normalize_terms(p.title + " " + p.body);
      for (auto& t : terms) ++tf[t];
      for (auto& [term, n] : tf) c.index_[term].push_back({d, n});
      c.doc_lengths_.push_back(static_cast<std::uint32_t>(terms.size()));
      c.total_length_ += terms.size();
    }
    c.avg_length_ = static_cast<double>(c.total_length_) /
                    static_cast<double>(c.passages_.size());
    return c;
  }

  const std::vector<Passage>& passages() const { return passages_; }
  std::size_t size() const { return passages_.size(); }
  const std::map<std::string, std::vector<Posting>>& index() const { return index_; }
  std::uint32_t doc_length(std::size_t doc) const { return doc_lengths_.at(doc); }
  double average_length() const { return avg_length_; }

  const std::vector<Posting>* postings(const std::string& term) const {
    auto it = index_.find(term);
    return it == index_.end() ? nullptr : &it->second;
  }

  const Passage* find(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    return it == by_id_.end() ? nullptr : &passages_[it->second];
  }

  double idf(const std::string& term) const {
    const auto* p = postings(term);
    const double df = p ? static_cast<double>(p->size()) : 0.0;
    const double n = static_cast<double>(passages_.size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
  }

 private:
  std::vector<Passage> passages_;
  std::unordered_map<std::string, std::uint32_t> by_id_;
  std::map<std::string, std::vector<Posting>> index_;
  std::vector<std::uint32_t> doc_lengths_;
  std::size_t total_length_ = 0;
  double avg_length_ = 0.0;
};

struct Hit {
  std::string id;
  double score = 0.0;
};

struct RetrievalResult {
  std::string query;
  std::vector<Hit> hits;
  std::vector<std::string> lines;  // one rendered hit per line
  std::string rendered;            // lines wrapped in the document tags
  bool failed = false;             // backend error; rendered is empty documents
};

namespace detail {

inline std::string one_line(std::string_view s, const TagTable& tags) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) out.push_back(c == '\n' || c == '\r' ? ' ' : c);
  // Tag literals inside environment text would break the documents block.
  for (const auto* lit : tags.literals()) {
    for (auto pos = out.find(*lit); pos != std::string::npos; pos = out.find(*lit, pos)) {
      out.erase(pos, lit->size());
    }
  }
  return out;
}

}  // namespace detail

inline std::string render_documents(const std::vector<std::string>& lines,
                                    const TagTable& tags = {}) {
  return tags.docs_open + join(lines, "\n") + tags.docs_close;
}

/// BM25 top-k. Hits sorted by score descending, ties by ascending id; only
/// passages sharing at least one term with the query are returned.
inline RetrievalResult search(const Corpus& corpus, std::string_view query,
                              std::size_t k_top, const TagTable& tags = {},
                              Bm25Params params = {}) {
  RetrievalResult r;
  r.query = std::string(query);
  auto terms = normalize_terms(query);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

  std::unordered_map<std::uint32_t, double> scores;
  for (const auto& term : terms) {
    const auto* plist = corpus.postings(term);
    if (!plist) continue;
    const double idf = corpus.idf(term);
    for (const auto& p : *plist) {
      const double tf = p.tf;
      const double norm =
          params.k1 * (1.0 - params.b +
                       params.b * corpus.doc_length(p.doc) / corpus.average_length());
      scores[p.doc] += idf * tf * (params.k1 + 1.0) / (tf + norm);
    }
  }
  std::vector<std::pair<std::uint32_t, double>> ranked(scores.begin(), scores.end());
  const auto& ps = corpus.passages();
  std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return ps[a.first].id < ps[b.first].id;
  });
  if (ranked.size() > k_top) ranked.resize(k_top);
  for (const auto& [doc, score] : ranked) {
    r.hits.push_back({ps[doc].id, score});
    r.lines.push_back(detail::one_line(ps[doc].title + ": " + ps[doc].body, tags));
  }
  r.rendered = render_documents(r.lines, tags);
  return r;
}

/// Anything the rollout engine can query. Implementations throw Error with
/// NetworkError or SummarizerError on backend failure.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual RetrievalResult retrieve(std::string_view query) const = 0;
};

class LocalRetriever : public Retriever {
 public:
  LocalRetriever(std::shared_ptr<const Corpus> corpus, std::size_t k_top = 5,
                 TagTable tags = {})
      : corpus_(std::move(corpus)), k_top_(k_top), tags_(std::move(tags)) {}

  RetrievalResult retrieve(std::string_view query) const override {
    return search(*corpus_, query, k_top_, tags_);
  }

  const Corpus& corpus() const { return *corpus_; }
  std::size_t k_top() const { return k_top_; }

 private:
  std::shared_ptr<const Corpus> corpus_;
  std::size_t k_top_;
  TagTable tags_;
};

// ---------------------------------------------------------------------------
// Web search

struct WebPage {
  std::string url;
  std::string title;
  std::string content;
};

struct SearchRequest {
  std::string query;
  int max_results = 3;
};

struct SearchResponse {
  std::vector<WebPage> pages;
};

class SearchClient {
 public:
  virtual ~SearchClient() = default;
  virtual SearchResponse search(const SearchRequest& req) const = 0;
};

struct SummaryRequest {
  std::string query;
  std::string content;
};

class Summarizer {
 public:
  virtual ~Summarizer() = default;
  virtual std::string summarize(const SummaryRequest& req) const = 0;
};

class IdentitySummarizer : public Summarizer {
 public:
  std::string summarize(const SummaryRequest& req) const override { return req.content; }
};

/// Keeps the first `sentences` sentences ('.', '!' or '?' followed by
/// whitespace or end of text).
class TruncatingSummarizer : public Summarizer {
 public:
  explicit TruncatingSummarizer(std::size_t sentences = 3) : sentences_(sentences) {}

  std::string summarize(const SummaryRequest& req) const override {
    const std::string& s = req.content;
    std::size_t count = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const char c = s[i];
      if ((c == '.' || c == '!' || c == '?') &&
          (i + 1 == s.size() || is_space(s[i + 1]))) {
        if (++count == sentences_) return std::string(trim(s.substr(0, i + 1)));
      }
    }
    return std::string(trim(s));
  }

 private:
  std::size_t sentences_;
};

inline nlohmann::json to_json(const WebPage& p) {
  return {{"url", p.url}, {"title", p.title}, {"content", p.content}};
}

inline WebPage web_page_from_json(const nlohmann::json& j) {
  return {j.value("url", ""), j.value("title", ""), j.value("content", "")};
}

/// File-backed fake of the search API. Each line of the file is
/// {"query": ..., "pages": [...]} or {"query": ..., "error": "..."}; a query
/// of "*" matches anything not listed. Lookup normalizes the query terms.
class FileSearchClient : public SearchClient {
 public:
  explicit FileSearchClient(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open search fixture '" + path + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (is_blank(line)) continue;
      add(nlohmann::json::parse(line));
    }
  }

  explicit FileSearchClient(const std::vector<nlohmann::json>& records) {
    for (const auto& r : records) add(r);
  }

  SearchResponse search(const SearchRequest& req) const override {
    auto it = entries_.find(join(normalize_terms(req.query), " "));
    if (it == entries_.end()) it = entries_.find("*");
    if (it == entries_.end()) return {};
    if (!it->second.error.empty()) {
      throw Error(ErrorCode::NetworkError, it->second.error);
    }
    SearchResponse resp{it->second.pages};
    if (req.max_results >= 0 &&
        resp.pages.size() > static_cast<std::size_t>(req.max_results)) {
      resp.pages.resize(static_cast<std::size_t>(req.max_results));
    }
    return resp;
  }

 private:
  struct Entry {
    std::vector<WebPage> pages;
    std::string error;
  };

  void add(const nlohmann::json& j) {
    Entry e;
    const auto q = j.at("query").get<std::string>();
    if (j.contains("error")) e.error = j.at("error").get<std::string>();
    if (j.contains("pages")) {
      for (const auto& p : j.at("pages")) e.pages.push_back(web_page_from_json(p));
    }
    entries_[q == "*" ? q : join(normalize_terms(q), " ")] = std::move(e);
  }

  std::map<std::string, Entry> entries_;
};

/// Web search path: fetch pages, summarize each, render like local search.
class WebRetriever : public Retriever {
 public:
  WebRetriever(std::shared_ptr<const SearchClient> client,
               std::shared_ptr<const Summarizer> summarizer, int max_pages = 3,
               TagTable tags = {})
      : client_(std::move(client)),
        summarizer_(std::move(summarizer)),
        max_pages_(max_pages),
        tags_(std::move(tags)) {}

  RetrievalResult retrieve(std::string_view query) const override {
    RetrievalResult r;
    r.query = std::string(query);
    auto resp = client_->search({r.query, max_pages_});
    if (max_pages_ >= 0 && resp.pages.size() > static_cast<std::size_t>(max_pages_)) {
      resp.pages.resize(static_cast<std::size_t>(max_pages_));
    }
    const double n = static_cast<double>(resp.pages.size());
    for (std::size_t i = 0; i < resp.pages.size(); ++i) {
      const auto& page = resp.pages[i];
      std::string summary;
      try {
        summary = summarizer_->summarize({r.query, page.content});
      } catch (const Error&) {
        throw;
      } catch (const std::exception& e) {
        throw Error(ErrorCode::SummarizerError, e.what());
      }
      const std::string line =
          page.title.empty() ? summary : page.title + ": " + summary;
      r.hits.push_back({page.url, n - static_cast<double>(i)});
      r.lines.push_back(detail::one_line(line, tags_));
    }
    r.rendered = render_documents(r.lines, tags_);
    return r;
  }

 private:
  std::shared_ptr<const SearchClient> client_;
  std::shared_ptr<const Summarizer> summarizer_;
  int max_pages_;
  TagTable tags_;
};

// ---------------------------------------------------------------------------
// Corpus files: one {"id", "title", "body"} record per line.

inline nlohmann::json to_json(const Passage& p) {
  return {{"id", p.id}, {"title", p.title}, {"body", p.body}};
}

inline std::vector<Passage> read_passages(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open corpus file '" + path + "'");
  std::vector<Passage> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (is_blank(line)) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("title").get<std::string>(),
                     j.at("body").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse,
                  path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_passages(const std::string& path, const std::vector<Passage>& ps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write corpus file '" + path + "'");
  for (const auto& p : ps) out << to_json(p).dump() << '\n';
}

/// Index dump: term -> [[passage id, tf], ...], sorted by term.
inline nlohmann::json index_to_json(const Corpus& c) {
  nlohmann::json terms = nlohmann::json::object();
  for (const auto& [term, plist] : c.index()) {
    auto arr = nlohmann::json::array();
    for (const auto& p : plist) arr.push_back({c.passages()[p.doc].id, p.tf});
    terms[term] = std::move(arr);
  }
  return {{"format", "searchrl-index"},
          {"version", 1},
          {"passages", c.size()},
          {"average_length", c.average_length()},
          {"terms", std::move(terms)}};
}

}  // namespace searchrl
