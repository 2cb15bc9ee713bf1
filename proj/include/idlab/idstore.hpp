#pragma once

// One-to-many DocId -> document key postings in corpus ("natural") order.

#include "idlab/docid.hpp"
#include "idlab/util.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace idlab {

class IdStore {
 public:
  explicit IdStore(IdLayout layout = {}) : layout_(layout) {}

  const IdLayout& layout() const { return layout_; }

  /// Appends key to the posting of id. Invalid ids are rejected and counted;
  /// a repeated (id, key) pair is ignored. Returns true when stored.
  bool insert(const DocId& id, const std::string& key) {
    if (!id.valid(layout_) || key.empty()) {
      ++rejected_;
      return false;
    }
    auto& posting = postings_[id];
    if (!posting.keys_seen.insert(key).second) return false;
    posting.keys.push_back(key);
    ++documents_;
    return true;
  }

  template <typename Range>
  static IdStore build(const IdLayout& layout, const Range& assignments) {
    IdStore s(layout);
    for (const auto& [id, key] : assignments) s.insert(id, key);
    return s;
  }

  std::size_t rejected() const { return rejected_; }
  std::size_t document_count() const { return documents_; }
  std::size_t unique_id_count() const { return postings_.size(); }

  /// First min(limit, |posting|) keys in natural order; unknown id -> empty.
  std::vector<std::string> lookup(const DocId& id, std::size_t limit = 1000) const {
    auto it = postings_.find(id);
    if (it == postings_.end()) return {};
    const auto& keys = it->second.keys;
    return {keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(std::min(limit, keys.size()))};
  }

  /// Seeded uniform subset of size min(limit, |posting|), kept in natural order.
  std::vector<std::string> lookup_random(const DocId& id, std::size_t limit, std::uint64_t seed) const {
    auto it = postings_.find(id);
    if (it == postings_.end()) return {};
    const auto& keys = it->second.keys;
    if (keys.size() <= limit) return keys;
    std::vector<std::size_t> idx(keys.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, id.str()));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
    std::vector<std::string> out;
    for (std::size_t i : idx) out.push_back(keys[i]);
    return out;
  }

  std::size_t posting_size(const DocId& id) const {
    auto it = postings_.find(id);
    return it == postings_.end() ? 0 : it->second.keys.size();
  }

  /// posting size -> number of DocIds with that size
  std::map<std::size_t, std::size_t> utilization_histogram() const {
    std::map<std::size_t, std::size_t> h;
    for (const auto& kv : postings_) ++h[kv.second.keys.size()];
    return h;
  }

  std::size_t max_posting_size() const {
    std::size_t m = 0;
    for (const auto& kv : postings_) m = std::max(m, kv.second.keys.size());
    return m;
  }

  std::vector<DocId> ids() const {
    std::vector<DocId> out;
    for (const auto& kv : postings_) out.push_back(kv.first);
    return out;
  }

  /// `c1,c2,c3,c4<TAB>key` lines sorted by codes, then insertion order.
  std::string to_index_file() const {
    std::string out;
    for (const auto& [id, posting] : postings_) {
      const std::string prefix = id.str() + "\t";
      for (const auto& k : posting.keys) {
        out += prefix;
        out += k;
        out += '\n';
      }
    }
    return out;
  }

  static IdStore from_index_file(const std::string& text, const IdLayout& layout) {
    IdStore s(layout);
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        ++s.rejected_;
        continue;
      }
      DocId id;
      try {
        id = DocId::parse(line.substr(0, tab));
      } catch (const IdError&) {
        ++s.rejected_;
        continue;
      }
      s.insert(id, line.substr(tab + 1));
    }
    return s;
  }

  /// Nested {code, ids, documents, children | samples} nodes. Only DocIds
  /// whose posting has at least `min_posting` documents are included; nodes
  /// at `max_depth` are leaves holding up to five sample keys.
  nlohmann::json export_prefix_tree(int max_depth = -1, std::size_t min_posting = 1) const {
    if (max_depth < 0 || max_depth > layout_.length) max_depth = layout_.length;
    nlohmann::json root = {{"code", nullptr}, {"ids", 0}, {"documents", 0}, {"children", nlohmann::json::array()}};
    for (const auto& [id, posting] : postings_) {
      if (posting.keys.size() < min_posting) continue;
      nlohmann::json* node = &root;
      root["ids"] = root["ids"].get<std::size_t>() + 1;
      root["documents"] = root["documents"].get<std::size_t>() + posting.keys.size();
      for (int d = 0; d < max_depth; ++d) {
        auto& children = (*node)["children"];
        const int code = id.codes[static_cast<std::size_t>(d)];
        // Children are appended in sorted code order because postings_ is sorted.
        if (children.empty() || children.back()["code"].get<int>() != code) {
          nlohmann::json child = {{"code", code}, {"ids", 0}, {"documents", 0}};
          if (d + 1 < max_depth) {
            child["children"] = nlohmann::json::array();
          } else {
            child["postings"] = nlohmann::json::array();
            child["samples"] = nlohmann::json::array();
          }
          children.push_back(std::move(child));
        }
        node = &children.back();
        (*node)["ids"] = (*node)["ids"].get<std::size_t>() + 1;
        (*node)["documents"] = (*node)["documents"].get<std::size_t>() + posting.keys.size();
      }
      if (max_depth == 0) continue;
      (*node)["postings"].push_back(posting.keys.size());
      for (const auto& k : posting.keys) {
        if ((*node)["samples"].size() >= 5) break;
        (*node)["samples"].push_back(k);
      }
    }
    return nlohmann::json{{"depth", max_depth}, {"min_posting", min_posting}, {"root", root}};
  }

  /// Distinct DocIds represented in an exported tree.
  static std::size_t tree_unique_ids(const nlohmann::json& tree) {
    std::size_t n = 0;
    std::vector<const nlohmann::json*> stack{&tree.at("root")};
    while (!stack.empty()) {
      const nlohmann::json* node = stack.back();
      stack.pop_back();
      if (node->contains("postings")) n += node->at("postings").size();
      if (node->contains("children")) {
        for (const auto& c : node->at("children")) stack.push_back(&c);
      }
    }
    return n;
  }

 private:
  struct Posting {
    std::vector<std::string> keys;
    std::set<std::string> keys_seen;
  };

  IdLayout layout_;
  std::map<DocId, Posting> postings_;
  std::size_t documents_ = 0;
  std::size_t rejected_ = 0;
};

/// `size,count` lines for plotting.
inline std::string histogram_csv(const std::map<std::size_t, std::size_t>& h) {
  std::string out = "size,count\n";
  for (const auto& [size, count] : h) out += std::to_string(size) + "," + std::to_string(count) + "\n";
  return out;
}

}  // namespace idlab
