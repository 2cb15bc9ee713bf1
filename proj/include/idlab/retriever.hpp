#pragma once

// Encoder + indexer + decoder sharing one parameter store and vocabulary.

#include "idlab/docid.hpp"
#include "idlab/indexer.hpp"
#include "idlab/model.hpp"
#include "idlab/params.hpp"
#include "idlab/textdata.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace idlab {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  IndexerConfig indexer;
  std::size_t max_length = 32;

  nlohmann::json to_json() const {
    return {
        {"vocab_size", encoder.vocab_size},
        {"embed_dim", encoder.embed_dim},
        {"hidden", encoder.hidden},
        {"dim", encoder.dim},
        {"decoder_hidden", decoder.hidden},
        {"id_length", decoder.layout.length},
        {"codes_per_slice", decoder.layout.codes_per_slice},
        {"indexer", to_string(indexer.kind)},
        {"mlp_hidden", indexer.mlp_hidden},
        {"mlp_output_scale", indexer.output_init_scale},
        {"dropout", indexer.dropout},
        {"sinkhorn_epsilon", indexer.sinkhorn.epsilon},
        {"sinkhorn_iterations", indexer.sinkhorn.iterations},
        {"max_length", max_length},
    };
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.encoder.vocab_size = j.at("vocab_size").get<int>();
    c.encoder.embed_dim = j.at("embed_dim").get<int>();
    c.encoder.hidden = j.at("hidden").get<int>();
    c.encoder.dim = j.at("dim").get<int>();
    IdLayout layout{j.at("id_length").get<int>(), j.at("codes_per_slice").get<int>()};
    c.decoder.dim = c.encoder.dim;
    c.decoder.hidden = j.at("decoder_hidden").get<int>();
    c.decoder.layout = layout;
    c.indexer.kind = parse_indexer_kind(j.at("indexer").get<std::string>());
    c.indexer.layout = layout;
    c.indexer.dim = c.encoder.dim;
    c.indexer.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.indexer.output_init_scale = j.at("mlp_output_scale").get<double>();
    c.indexer.dropout = j.at("dropout").get<double>();
    c.indexer.sinkhorn.epsilon = j.at("sinkhorn_epsilon").get<double>();
    c.indexer.sinkhorn.iterations = j.at("sinkhorn_iterations").get<int>();
    c.max_length = j.at("max_length").get<std::size_t>();
    return c;
  }
};

template <typename T>
class Retriever {
 public:
  /// Each component draws its initial weights from its own derived stream.
  Retriever(Vocab vocab, ModelConfig cfg, std::uint64_t seed)
      : vocab_(std::move(vocab)), cfg_(std::move(cfg)) {
    cfg_.encoder.vocab_size = static_cast<int>(vocab_.size());
    cfg_.decoder.dim = cfg_.encoder.dim;
    cfg_.indexer.dim = cfg_.encoder.dim;
    cfg_.indexer.layout = cfg_.decoder.layout;
    cfg_.indexer.sinkhorn.validate();
    Rng enc_rng(derive_seed(seed, "init/encoder"));
    Rng dec_rng(derive_seed(seed, "init/decoder"));
    Rng idx_rng(derive_seed(seed, "init/indexer"));
    encoder_ = std::make_unique<Encoder<T>>(store_, cfg_.encoder, enc_rng);
    decoder_ = std::make_unique<Decoder<T>>(store_, cfg_.decoder, dec_rng);
    indexer_ = make_indexer(store_, cfg_.indexer, idx_rng);
  }

  Retriever(const Retriever&) = delete;
  Retriever& operator=(const Retriever&) = delete;

  const Vocab& vocab() const { return vocab_; }
  const ModelConfig& config() const { return cfg_; }
  const IdLayout& layout() const { return cfg_.decoder.layout; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const Encoder<T>& encoder() const { return *encoder_; }
  const Decoder<T>& decoder() const { return *decoder_; }
  Indexer<T>& indexer() { return *indexer_; }
  const Indexer<T>& indexer() const { return *indexer_; }

  TokenSeq tokenize(const std::string& text) const { return idlab::tokenize(text, vocab_, cfg_.max_length); }

  /// Unit-norm representations computed in chunks.
  Matrix<T> encode(const std::vector<std::string>& texts, std::size_t chunk = 512) const {
    Matrix<T> out(static_cast<Index>(texts.size()), cfg_.encoder.dim);
    for (std::size_t b = 0; b < texts.size(); b += chunk) {
      const std::size_t e = std::min(texts.size(), b + chunk);
      std::vector<TokenSeq> seqs;
      for (std::size_t i = b; i < e; ++i) seqs.push_back(tokenize(texts[i]));
      out.middleRows(static_cast<Index>(b), static_cast<Index>(e - b)) = encoder_->encode(seqs);
    }
    return out;
  }

  /// Inference-mode DocIds for documents.
  std::vector<DocId> assign(const std::vector<std::string>& documents) const {
    if (documents.empty()) return {};
    return indexer_->docids(encode(documents));
  }

  std::vector<BeamHit<T>> retrieve(const std::string& query, int beam) const {
    return decoder_->beam_search(encode({query}), beam);
  }

  std::vector<BeamHit<T>> retrieve_encoded(const Matrix<T>& query_row, int beam) const {
    return decoder_->beam_search(query_row, beam);
  }

 private:
  Vocab vocab_;
  ModelConfig cfg_;
  ParamStore<T> store_;
  std::unique_ptr<Encoder<T>> encoder_;
  std::unique_ptr<Decoder<T>> decoder_;
  std::unique_ptr<Indexer<T>> indexer_;
};

}  // namespace idlab
