#pragma once

// Pair-file ingestion, a corpus-built word tokenizer, in-batch-negative
// batching, and a clustered synthetic corpus generator.

#include "idlab/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace idlab {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PairRecord {
  std::string query;
  std::string document;
  std::string key;
  std::string split;
  bool explicit_key = false;
};

/// Stable document key derived from content.
inline std::string content_key(const std::string& document) { return hex64(fnv1a(document)); }

enum class PairFormat { Tsv, JsonLines };

inline PairFormat parse_pair_format(const std::string& s) {
  if (s == "tsv" || s == "tab") return PairFormat::Tsv;
  if (s == "jsonl" || s == "records") return PairFormat::JsonLines;
  throw DataError("unknown pair format '" + s + "'");
}

struct LoadReport {
  std::vector<PairRecord> records;
  std::size_t lines = 0;
  std::size_t malformed = 0;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline bool parse_tsv_line(const std::string& line, PairRecord& rec) {
  auto fields = split_tabs(line);
  if (fields.size() < 2 || fields.size() > 4) return false;
  if (fields[0].empty() || fields[1].empty()) return false;
  rec.query = fields[0];
  rec.document = fields[1];
  if (fields.size() >= 3 && !fields[2].empty()) {
    rec.key = fields[2];
    rec.explicit_key = true;
  } else {
    rec.key = content_key(rec.document);
  }
  if (fields.size() == 4) rec.split = fields[3];
  return true;
}

inline bool parse_json_line(const std::string& line, PairRecord& rec) {
  auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  if (!j.contains("query") || !j.contains("document")) return false;
  if (!j["query"].is_string() || !j["document"].is_string()) return false;
  rec.query = j["query"].get<std::string>();
  rec.document = j["document"].get<std::string>();
  if (rec.query.empty() || rec.document.empty()) return false;
  if (j.contains("key") && j["key"].is_string() && !j["key"].get<std::string>().empty()) {
    rec.key = j["key"].get<std::string>();
    rec.explicit_key = true;
  } else {
    rec.key = content_key(rec.document);
  }
  if (j.contains("split") && j["split"].is_string()) rec.split = j["split"].get<std::string>();
  return true;
}

}  // namespace detail

/// Parses pair records from an in-memory stream. More than 10% malformed
/// lines is fatal.
inline LoadReport parse_pairs(std::istream& in, PairFormat format) {
  LoadReport report;
  std::string line;
  while (std::getline(in, line)) {
    ++report.lines;
    PairRecord rec;
    const bool ok = format == PairFormat::Tsv ? detail::parse_tsv_line(line, rec)
                                              : detail::parse_json_line(line, rec);
    if (ok) {
      report.records.push_back(std::move(rec));
    } else {
      ++report.malformed;
    }
  }
  if (report.malformed * 10 > report.lines) {
    throw DataError("too many malformed lines: " + std::to_string(report.malformed) + " of " +
                    std::to_string(report.lines));
  }
  return report;
}

inline LoadReport load_pairs(const std::filesystem::path& path, PairFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read pair file " + path.string());
  return parse_pairs(in, format);
}

inline std::string dump_pairs(const std::vector<PairRecord>& records, PairFormat format) {
  std::string out;
  for (const auto& r : records) {
    if (format == PairFormat::Tsv) {
      out += r.query;
      out += '\t';
      out += r.document;
      if (r.explicit_key || !r.split.empty()) {
        out += '\t';
        if (r.explicit_key) out += r.key;
      }
      if (!r.split.empty()) {
        out += '\t';
        out += r.split;
      }
    } else {
      nlohmann::ordered_json j;
      j["query"] = r.query;
      j["document"] = r.document;
      if (r.explicit_key) j["key"] = r.key;
      if (!r.split.empty()) j["split"] = r.split;
      out += j.dump();
    }
    out += '\n';
  }
  return out;
}

/// Distinct documents in first-seen order, deduplicated by key.
inline std::vector<std::pair<std::string, std::string>> unique_documents(
    const std::vector<PairRecord>& records) {
  std::vector<std::pair<std::string, std::string>> docs;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(r.key).second) docs.emplace_back(r.key, r.document);
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Tokenizer

using TokenSeq = std::vector<int>;

/// Lowercased alphanumeric runs; bytes >= 0x80 are kept inside words.
inline std::vector<std::string> normalize_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

class Vocab {
 public:
  static constexpr int kUnk = 0;
  static constexpr const char* kUnkWord = "[unk]";

  Vocab() : words_{kUnkWord} {}

  /// Words with frequency >= min_count, ordered by descending frequency
  /// then lexicographically.
  static Vocab build(const std::vector<std::string>& texts, std::size_t min_count = 1) {
    std::map<std::string, std::size_t> freq;
    for (const auto& t : texts) {
      for (auto& w : normalize_words(t)) ++freq[w];
    }
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [w, n] : items) {
      if (n >= min_count) v.add(w);
    }
    return v;
  }

  static Vocab from_words(const std::vector<std::string>& words) {
    Vocab v;
    if (words.empty() || words[0] != kUnkWord) throw DataError("vocabulary must start with [unk]");
    for (std::size_t i = 1; i < words.size(); ++i) v.add(words[i]);
    return v;
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Maps text to ids, keeping the first max_length tokens. Text with no words
/// becomes a single unknown token.
inline TokenSeq tokenize(const std::string& text, const Vocab& vocab, std::size_t max_length = 32) {
  TokenSeq ids;
  for (const auto& w : normalize_words(text)) {
    if (ids.size() >= max_length) break;
    ids.push_back(vocab.id(w));
  }
  if (ids.empty()) ids.push_back(Vocab::kUnk);
  return ids;
}

/// True when every token is unknown.
inline bool all_unknown(const TokenSeq& seq) {
  return std::all_of(seq.begin(), seq.end(), [](int t) { return t == Vocab::kUnk; });
}

// ---------------------------------------------------------------------------
// Batching

/// Query i's positive document is documents[i]. Items sharing a group label
/// (same query text or same document key) are never negatives for each other.
struct Batch {
  std::vector<TokenSeq> queries;
  std::vector<TokenSeq> documents;
  std::vector<int> groups;
  std::vector<std::size_t> record_index;

  std::size_t size() const { return queries.size(); }
  std::size_t positive(std::size_t q) const { return q; }
};

/// Group labels renumbered 0.. in order of first appearance.
inline std::vector<int> group_labels(const std::vector<PairRecord>& records,
                                     const std::vector<std::size_t>& members) {
  const std::size_t n = members.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::unordered_map<std::string, std::size_t> by_query, by_key;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[members[i]];
    auto [qi, qnew] = by_query.emplace(r.query, i);
    if (!qnew) parent[find(i)] = find(qi->second);
    auto [ki, knew] = by_key.emplace(r.key, i);
    if (!knew) parent[find(i)] = find(ki->second);
  }
  std::vector<int> labels(n);
  std::unordered_map<std::size_t, int> renumber;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, fresh] = renumber.emplace(find(i), static_cast<int>(renumber.size()));
    labels[i] = it->second;
  }
  return labels;
}

/// Tokenized corpus plus seeded per-epoch shuffling.
class BatchStream {
 public:
  BatchStream(const std::vector<PairRecord>& records, const Vocab& vocab, std::size_t batch_size,
              std::uint64_t seed, std::size_t max_length = 32)
      : records_(&records), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 2) throw DataError("batch size must be at least 2");
    if (records.empty()) throw DataError("empty corpus");
    if (batch_size > records.size()) {
      std::cerr << "warning: batch size " << batch_size << " exceeds corpus size "
                << records.size() << "; using a single smaller batch\n";
      batch_size_ = records.size();
    }
    queries_.reserve(records.size());
    documents_.reserve(records.size());
    for (const auto& r : records) {
      queries_.push_back(tokenize(r.query, vocab, max_length));
      documents_.push_back(tokenize(r.document, vocab, max_length));
    }
  }

  std::size_t batch_size() const { return batch_size_; }
  std::size_t batches_per_epoch() const {
    return (records_->size() + batch_size_ - 1) / batch_size_;
  }

  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(records_->size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed_, "batch-shuffle", epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  /// Batch number `step` of the stream; each epoch is a fresh shuffle.
  Batch at(std::size_t step) {
    const std::size_t bpe = batches_per_epoch();
    const std::size_t epoch = step / bpe;
    const std::size_t within = step % bpe;
    if (epoch != cached_epoch_ || order_.empty()) {
      order_ = epoch_order(epoch);
      cached_epoch_ = epoch;
    }
    const std::size_t begin = within * batch_size_;
    const std::size_t end = std::min(begin + batch_size_, order_.size());
    std::vector<std::size_t> members(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order_.begin() + static_cast<std::ptrdiff_t>(end));
    return assemble(members);
  }

  Batch assemble(const std::vector<std::size_t>& members) const {
    Batch b;
    b.record_index = members;
    for (std::size_t m : members) {
      b.queries.push_back(queries_[m]);
      b.documents.push_back(documents_[m]);
    }
    b.groups = group_labels(*records_, members);
    return b;
  }

 private:
  const std::vector<PairRecord>* records_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::vector<TokenSeq> queries_;
  std::vector<TokenSeq> documents_;
  std::vector<std::size_t> order_;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
};

/// All batches of one epoch.
inline std::vector<Batch> make_batches(const std::vector<PairRecord>& records, const Vocab& vocab,
                                       std::size_t batch_size, std::uint64_t seed,
                                       std::size_t epoch = 0, std::size_t max_length = 32) {
  BatchStream stream(records, vocab, batch_size, seed, max_length);
  std::vector<Batch> out;
  const std::size_t bpe = stream.batches_per_epoch();
  for (std::size_t i = 0; i < bpe; ++i) out.push_back(stream.at(epoch * bpe + i));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic clustered corpus

struct SynthCorpus {
  std::vector<PairRecord> records;
  std::map<std::string, int> cluster_of;  // document key -> cluster
};

struct SynthShape {
  std::size_t topic_words = 8;       // words shared by every document of a cluster
  std::size_t doc_topic_words = 3;
  std::size_t doc_content_words = 13;
  std::size_t query_content_words = 6;
};

/// Each cluster owns a disjoint slice of the vocabulary whose first
/// `topic_words` entries are its topic words. Documents draw topic and content
/// words from their cluster; queries are subsets of their document's content
/// words plus one cluster topic word.
inline SynthCorpus synth_corpus(std::size_t n_clusters, std::size_t docs_per_cluster,
                                std::size_t queries_per_doc, std::size_t vocab_size,
                                std::uint64_t seed, const SynthShape& shape = {}) {
  if (n_clusters == 0 || docs_per_cluster == 0 || queries_per_doc == 0 || vocab_size == 0) {
    throw DataError("synthetic corpus counts must be at least 1");
  }
  if (vocab_size < n_clusters * shape.topic_words) {
    throw DataError("vocab_size " + std::to_string(vocab_size) + " < n_clusters x " +
                    std::to_string(shape.topic_words));
  }
  const std::size_t per_cluster = vocab_size / n_clusters;
  const std::size_t content_pool = per_cluster - shape.topic_words;
  const std::size_t doc_content = std::min(shape.doc_content_words, content_pool);
  const std::size_t doc_topic = std::min(shape.doc_topic_words, shape.topic_words);
  const std::size_t query_content = std::min(shape.query_content_words, doc_content);

  auto word = [](std::size_t id) { return "w" + std::to_string(id); };
  auto sample = [](Rng& rng, std::size_t pool, std::size_t k) {
    std::vector<std::size_t> idx(pool);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    return idx;
  };

  SynthCorpus out;
  Rng rng(derive_seed(seed, "synth-corpus"));
  std::set<std::string> seen;
  for (std::size_t c = 0; c < n_clusters; ++c) {
    const std::size_t base = c * per_cluster;
    for (std::size_t d = 0; d < docs_per_cluster; ++d) {
      std::vector<std::size_t> content;
      std::string text;
      do {
        content.clear();
        std::vector<std::size_t> words;
        for (std::size_t t : sample(rng, shape.topic_words, doc_topic)) words.push_back(base + t);
        for (std::size_t w : sample(rng, content_pool, doc_content)) {
          content.push_back(base + shape.topic_words + w);
          words.push_back(content.back());
        }
        std::shuffle(words.begin(), words.end(), rng);
        text.clear();
        for (std::size_t w : words) {
          if (!text.empty()) text += ' ';
          text += word(w);
        }
      } while (!seen.insert(text).second);
      const std::string key = content_key(text);
      out.cluster_of.emplace(key, static_cast<int>(c));
      for (std::size_t q = 0; q < queries_per_doc; ++q) {
        std::vector<std::size_t> words;
        std::uniform_int_distribution<std::size_t> topic(0, shape.topic_words - 1);
        words.push_back(base + topic(rng));
        for (std::size_t i : sample(rng, doc_content, query_content)) words.push_back(content[i]);
        std::shuffle(words.begin(), words.end(), rng);
        std::string query;
        for (std::size_t w : words) {
          if (!query.empty()) query += ' ';
          query += word(w);
        }
        PairRecord rec;
        rec.query = std::move(query);
        rec.document = text;
        rec.key = key;
        out.records.push_back(std::move(rec));
      }
    }
  }
  return out;
}

/// Sidecar lines `key<TAB>cluster_id` in corpus order.
inline std::string dump_clusters(const SynthCorpus& corpus) {
  std::string out;
  std::set<std::string> seen;
  for (const auto& r : corpus.records) {
    if (!seen.insert(r.key).second) continue;
    out += r.key + "\t" + std::to_string(corpus.cluster_of.at(r.key)) + "\n";
  }
  return out;
}

/// Tags the last query of every `stride`-th document (with at least two
/// queries) as "heldout" and every other record as "train".
inline void mark_heldout(std::vector<PairRecord>& records, std::size_t stride) {
  std::map<std::string, std::vector<std::size_t>> by_key;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& v = by_key[records[i].key];
    if (v.empty()) order.push_back(records[i].key);
    v.push_back(i);
  }
  for (auto& r : records) r.split = "train";
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& idx = by_key[order[k]];
    if (stride > 0 && k % stride == 0 && idx.size() >= 2) records[idx.back()].split = "heldout";
  }
}

inline std::vector<PairRecord> filter_split(const std::vector<PairRecord>& records,
                                            const std::string& split) {
  std::vector<PairRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

}  // namespace idlab
