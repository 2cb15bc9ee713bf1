#include "idlab/textdata.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

using namespace idlab;

namespace {

LoadReport parse(const std::string& text, PairFormat f = PairFormat::Tsv) {
  std::istringstream in(text);
  return parse_pairs(in, f);
}

std::vector<PairRecord> tiny_records(std::size_t n) {
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    PairRecord r;
    r.query = "query " + std::to_string(i);
    r.document = "document text " + std::to_string(i);
    r.key = content_key(r.document);
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("tab-separated pairs load in order", "[textdata]") {
  auto rep = parse("what is a cat\ta small animal\nhow tall\tvery tall\n");
  REQUIRE(rep.records.size() == 2);
  CHECK(rep.records[0].query == "what is a cat");
  CHECK(rep.records[1].document == "very tall");
  CHECK(rep.records[0].key == content_key("a small animal"));
  CHECK(rep.malformed == 0);
}

TEST_CASE("malformed lines are skipped and counted", "[textdata]") {
  std::string text;
  for (int i = 0; i < 10; ++i) text += "q" + std::to_string(i) + "\td" + std::to_string(i) + "\n";
  text += "no tab here\n";
  auto rep = parse(text);
  CHECK(rep.records.size() == 10);
  CHECK(rep.malformed == 1);
  CHECK_THROWS_AS(parse("a\tb\nbad\nworse\n"), DataError);
  CHECK_THROWS_AS(load_pairs("/nonexistent/pairs.tsv", PairFormat::Tsv), DataError);
}

TEST_CASE("pair files round-trip byte-identically", "[textdata]") {
  const std::string tsv =
      "what is the capital of france\tparis is the capital and largest city of france\n"
      "dogs\tthe domestic dog is a descendant of the wolf\tdoc-7\n"
      "cats\tcats are small carnivores\tdoc-9\theldout\n"
      "fish\tfish live in water\t\ttrain\n";
  auto rep = parse(tsv);
  REQUIRE(rep.malformed == 0);
  CHECK(dump_pairs(rep.records, PairFormat::Tsv) == tsv);
  CHECK(rep.records[1].key == "doc-7");
  CHECK(rep.records[3].key == content_key("fish live in water"));

  const std::string jsonl = dump_pairs(rep.records, PairFormat::JsonLines);
  auto back = parse(jsonl, PairFormat::JsonLines);
  REQUIRE(back.records.size() == rep.records.size());
  CHECK(dump_pairs(back.records, PairFormat::JsonLines) == jsonl);
  CHECK(dump_pairs(back.records, PairFormat::Tsv) == tsv);
}

TEST_CASE("tokenization", "[textdata]") {
  Vocab v = Vocab::build({"hello world", "Hello there"});
  CHECK(v.words()[0] == "[unk]");
  CHECK(tokenize("Hello, world", v) == TokenSeq{v.id("hello"), v.id("world")});
  CHECK(tokenize("zebra", v) == TokenSeq{Vocab::kUnk});
  CHECK(tokenize("!!!", v) == TokenSeq{Vocab::kUnk});
  CHECK(all_unknown(tokenize("zebra okapi", v)));

  std::string long_text;
  for (int i = 0; i < 100; ++i) long_text += "w" + std::to_string(i) + " ";
  Vocab big = Vocab::build({long_text});
  TokenSeq t = tokenize(long_text, big, 32);
  REQUIRE(t.size() == 32);
  for (int i = 0; i < 32; ++i) CHECK(t[static_cast<std::size_t>(i)] == big.id("w" + std::to_string(i)));
  CHECK(tokenize(long_text, big, 32) == t);
}

TEST_CASE("vocabulary frequency cutoff and order", "[textdata]") {
  Vocab v = Vocab::build({"b a a", "c a b"}, 2);
  REQUIRE(v.size() == 3);
  CHECK(v.words()[1] == "a");
  CHECK(v.words()[2] == "b");
  CHECK(v.id("c") == Vocab::kUnk);
  Vocab again = Vocab::from_words(v.words());
  CHECK(again.words() == v.words());
}

TEST_CASE("batching", "[textdata]") {
  auto recs = tiny_records(10);
  Vocab v = Vocab::build({"query document text 0 1 2 3 4 5 6 7 8 9"});
  auto batches = make_batches(recs, v, 4, 1);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);

  auto again = make_batches(recs, v, 4, 1);
  for (std::size_t i = 0; i < batches.size(); ++i) CHECK(batches[i].record_index == again[i].record_index);
  auto other_epoch = make_batches(recs, v, 4, 1, 1);
  bool differs = false;
  for (std::size_t i = 0; i < batches.size(); ++i) differs = differs || batches[i].record_index != other_epoch[i].record_index;
  CHECK(differs);

  auto single = make_batches(recs, v, 50, 1);
  REQUIRE(single.size() == 1);
  CHECK(single[0].size() == 10);
  CHECK_THROWS_AS(make_batches(recs, v, 1, 1), DataError);
}

TEST_CASE("group labels join shared queries and documents", "[textdata]") {
  auto recs = tiny_records(5);
  recs[3].query = recs[0].query;
  recs[4].document = recs[1].document;
  recs[4].key = recs[1].key;
  auto labels = group_labels(recs, {0, 1, 2, 3, 4});
  CHECK(labels[0] == labels[3]);
  CHECK(labels[1] == labels[4]);
  CHECK(labels[0] != labels[1]);
  CHECK(labels[2] != labels[0]);
  CHECK(labels[2] != labels[1]);
}

TEST_CASE("every batch satisfies alignment and grouping", "[textdata][property]") {
  auto corpus = synth_corpus(4, 10, 3, 64, 2);
  Vocab v = Vocab::build([&] {
    std::vector<std::string> t;
    for (auto& r : corpus.records) t.push_back(r.query + " " + r.document);
    return t;
  }());
  BatchStream stream(corpus.records, v, 16, 9);
  for (std::size_t s = 0; s < 3 * stream.batches_per_epoch(); ++s) {
    Batch b = stream.at(s);
    REQUIRE(b.queries.size() == b.documents.size());
    REQUIRE(b.groups.size() == b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      CHECK(b.positive(i) == i);
      const auto& ri = corpus.records[b.record_index[i]];
      CHECK(b.documents[i] == tokenize(ri.document, v));
      for (std::size_t j = 0; j < b.size(); ++j) {
        const auto& rj = corpus.records[b.record_index[j]];
        if (ri.query == rj.query || ri.key == rj.key) CHECK(b.groups[i] == b.groups[j]);
      }
    }
  }
}

TEST_CASE("synthetic corpus", "[textdata]") {
  auto c = synth_corpus(16, 125, 2, 4096, 7);
  CHECK(c.records.size() == 4000);
  CHECK(unique_documents(c.records).size() == 2000);
  CHECK(c.cluster_of.size() == 2000);

  auto again = synth_corpus(16, 125, 2, 4096, 7);
  CHECK(dump_pairs(again.records, PairFormat::Tsv) == dump_pairs(c.records, PairFormat::Tsv));
  CHECK(dump_clusters(again) == dump_clusters(c));

  // Cluster c owns words w[c*256, (c+1)*256).
  for (const auto& r : c.records) {
    const int cl = c.cluster_of.at(r.key);
    for (const auto& w : normalize_words(r.document + " " + r.query)) {
      const int id = std::stoi(w.substr(1));
      CHECK(id / 256 == cl);
    }
  }
  CHECK_THROWS_AS(synth_corpus(16, 1, 1, 100, 1), DataError);
  CHECK_THROWS_AS(synth_corpus(0, 1, 1, 100, 1), DataError);
}

TEST_CASE("synthetic documents' nearest neighbours stay in cluster", "[textdata][property]") {
  auto c = synth_corpus(16, 125, 2, 4096, 7);
  auto docs = unique_documents(c.records);
  std::vector<std::map<std::string, double>> bags;
  for (const auto& [key, text] : docs) {
    std::map<std::string, double> bag;
    for (const auto& w : normalize_words(text)) bag[w] += 1.0;
    double n = 0;
    for (auto& kv : bag) n += kv.second * kv.second;
    for (auto& kv : bag) kv.second /= std::sqrt(n);
    bags.push_back(std::move(bag));
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < docs.size(); ++j) {
      if (i == j) continue;
      double dot = 0;
      for (const auto& [w, x] : bags[i]) {
        auto it = bags[j].find(w);
        if (it != bags[j].end()) dot += x * it->second;
      }
      if (dot > best) {
        best = dot;
        arg = j;
      }
    }
    same += c.cluster_of.at(docs[i].first) == c.cluster_of.at(docs[arg].first);
  }
  CHECK(static_cast<double>(same) >= 0.95 * static_cast<double>(docs.size()));
}

TEST_CASE("held-out marking keeps every document in training", "[textdata]") {
  auto c = synth_corpus(2, 5, 2, 64, 3);
  mark_heldout(c.records, 2);
  auto train = filter_split(c.records, "train");
  auto held = filter_split(c.records, "heldout");
  CHECK(held.size() == 5);
  CHECK(train.size() + held.size() == c.records.size());
  std::set<std::string> train_keys;
  for (auto& r : train) train_keys.insert(r.key);
  for (auto& r : held) CHECK(train_keys.count(r.key) == 1);
}
