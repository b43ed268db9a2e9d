/*
 * Copyright 2026 The DPGE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "dpge/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "dpge/error.hpp"

namespace dpge::data {
namespace {

using model::kClsId;
using model::kMaskId;
using model::kNumSpecialTokens;
using model::kPadId;
using model::kSepId;
using model::kUnkId;

bool valid_utf8(const std::string& text) {
  std::size_t i = 0;
  const auto cont = [&](std::size_t j) {
    return j < text.size() && (static_cast<unsigned char>(text[j]) & 0xC0u) == 0x80u;
  };
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (c < 0x80u) {
      ++i;
    } else if ((c & 0xE0u) == 0xC0u) {
      if (c < 0xC2u || !cont(i + 1)) return false;
      i += 2;
    } else if ((c & 0xF0u) == 0xE0u) {
      if (!cont(i + 1) || !cont(i + 2)) return false;
      i += 3;
    } else if ((c & 0xF8u) == 0xF0u) {
      if (c > 0xF4u || !cont(i + 1) || !cont(i + 2) || !cont(i + 3)) return false;
      i += 4;
    } else {
      return false;
    }
  }
  return true;
}

std::vector<std::string> whitespace_tokens(const std::string& line) {
  std::vector<std::string> tokens;
  std::istringstream stream(line);
  std::string token;
  while (stream >> token) tokens.push_back(std::move(token));
  return tokens;
}

}  // namespace

std::size_t Corpus::total_tokens() const {
  std::size_t n = 0;
  for (const auto& doc : documents) {
    for (const auto& sentence : doc) n += sentence.size();
  }
  return n;
}

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("corpus: cannot open '" + path + "'");
  return parse_corpus(in, path);
}

Corpus parse_corpus(std::istream& in, const std::string& origin) {
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("corpus: read failure on '" + origin + "'");
  if (!valid_utf8(text)) throw IoError("corpus: '" + origin + "' is not valid UTF-8");

  Corpus corpus;
  std::vector<std::vector<std::string>> doc;
  std::istringstream lines(text);
  std::string line;
  const auto flush_doc = [&] {
    if (!doc.empty()) corpus.documents.push_back(std::move(doc));
    doc.clear();
  };
  while (std::getline(lines, line)) {
    auto tokens = whitespace_tokens(line);
    if (tokens.empty()) {
      flush_doc();  // blank (or all-whitespace) line separates documents
    } else {
      doc.push_back(std::move(tokens));
    }
  }
  flush_doc();
  return corpus;
}

Vocab Vocab::build(const Corpus& corpus, std::size_t size) {
  if (size < kNumSpecialTokens + 1) {
    throw ValidationError("vocab: size must be at least 6");
  }
  // std::map keys are sorted, which implements the lexicographic tie-break
  // directly when we later sort by (count desc, token asc).
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : corpus.documents) {
    for (const auto& sentence : doc) {
      for (const auto& token : sentence) ++counts[token];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab vocab;
  vocab.tokens_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  const std::size_t keep = std::min(size - kNumSpecialTokens, ranked.size());
  for (std::size_t i = 0; i < keep; ++i) {
    vocab.to_id_[ranked[i].first] = static_cast<int>(vocab.tokens_.size());
    vocab.tokens_.push_back(ranked[i].first);
  }
  return vocab;
}

int Vocab::id_of(const std::string& token) const {
  const auto it = to_id_.find(token);
  return it == to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token_of(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("vocab: token id out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

namespace {

struct PackedPair {
  std::vector<int> tokens_a, tokens_b;
  int nsp_label = 0;
};

EncodedExample encode_pair(const PackedPair& pair, const PretrainOptions& options,
                           std::size_t vocab_size, rng::Stream& stream) {
  const int L = options.seq_len;
  EncodedExample ex;
  ex.token_ids.assign(static_cast<std::size_t>(L), kPadId);
  ex.segment_ids.assign(static_cast<std::size_t>(L), 0);
  ex.attention_mask.assign(static_cast<std::size_t>(L), 0);
  ex.mlm_targets.assign(static_cast<std::size_t>(L), -1);
  ex.nsp_label = pair.nsp_label;

  int at = 0;
  std::vector<int> eligible;
  const auto emit = [&](int id, int segment, bool maskable) {
    if (maskable) eligible.push_back(at);
    ex.token_ids[static_cast<std::size_t>(at)] = id;
    ex.segment_ids[static_cast<std::size_t>(at)] = segment;
    ex.attention_mask[static_cast<std::size_t>(at)] = 1;
    ++at;
  };
  emit(kClsId, 0, false);
  for (const int id : pair.tokens_a) emit(id, 0, true);
  emit(kSepId, 0, false);
  for (const int id : pair.tokens_b) emit(id, 1, true);
  emit(kSepId, 1, false);

  if (options.mask_rate > 0.0 && !eligible.empty()) {
    const auto n_eligible = static_cast<double>(eligible.size());
    std::size_t n_mask = static_cast<std::size_t>(std::floor(options.mask_rate * n_eligible));
    n_mask = std::max<std::size_t>(1, std::min(n_mask, eligible.size()));
    // partial Fisher-Yates draw of n_mask distinct positions
    for (std::size_t i = 0; i < n_mask; ++i) {
      const std::size_t j = i + stream.uniform_int(eligible.size() - i);
      std::swap(eligible[i], eligible[j]);
      const int pos = eligible[i];
      const std::int32_t original = ex.token_ids[static_cast<std::size_t>(pos)];
      ex.mlm_targets[static_cast<std::size_t>(pos)] = original;
      const double roll = stream.uniform();
      if (roll < 0.8) {
        ex.token_ids[static_cast<std::size_t>(pos)] = kMaskId;
      } else if (roll < 0.9) {
        ex.token_ids[static_cast<std::size_t>(pos)] = static_cast<std::int32_t>(
            kNumSpecialTokens + stream.uniform_int(vocab_size - kNumSpecialTokens));
      }
      // else: keep the original token
    }
  }
  return ex;
}

}  // namespace

std::vector<EncodedExample> make_pretrain_examples(const Corpus& corpus, const Vocab& vocab,
                                                   const PretrainOptions& options,
                                                   std::uint64_t seed) {
  if (options.seq_len < 8) throw ValidationError("pretrain examples: seq_len must be >= 8");
  if (options.mask_rate < 0.0 || options.mask_rate > 1.0) {
    throw ValidationError("pretrain examples: mask_rate must lie in [0, 1]");
  }
  if (corpus.documents.size() < 2) {
    throw ConfigError("pretrain examples: NSP negatives need a corpus with >= 2 documents");
  }

  rng::Stream stream(seed, 0x0DA7A);
  const int budget = options.seq_len - 3;  // CLS + 2x SEP
  std::vector<EncodedExample> out;

  const auto encode_sentence = [&vocab](const std::vector<std::string>& sentence) {
    std::vector<int> ids;
    ids.reserve(sentence.size());
    for (const auto& token : sentence) ids.push_back(vocab.id_of(token));
    return ids;
  };

  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    const auto& doc = corpus.documents[d];
    std::size_t i = 0;
    // Pairs are only formed where a true next sentence exists, so the label
    // is an unconditioned fair coin and the 50/50 property holds exactly.
    while (i + 1 < doc.size()) {
      PackedPair pair;
      pair.tokens_a = encode_sentence(doc[i]);
      if (stream.bernoulli(0.5)) {
        pair.nsp_label = 1;
        pair.tokens_b = encode_sentence(doc[i + 1]);
        i += 2;
      } else {
        pair.nsp_label = 0;
        std::size_t other = stream.uniform_int(corpus.documents.size() - 1);
        if (other >= d) ++other;  // uniform over documents != d
        const auto& other_doc = corpus.documents[other];
        pair.tokens_b = encode_sentence(other_doc[stream.uniform_int(other_doc.size())]);
        i += 1;
      }
      // truncate the longer sentence first
      while (pair.tokens_a.size() + pair.tokens_b.size() > static_cast<std::size_t>(budget)) {
        auto& longer = pair.tokens_a.size() >= pair.tokens_b.size() ? pair.tokens_a : pair.tokens_b;
        longer.pop_back();
      }
      if (pair.tokens_a.empty() && pair.tokens_b.empty()) continue;
      out.push_back(encode_pair(pair, options, vocab.size(), stream));
    }
  }
  return out;
}

std::vector<EncodedExample> make_synthetic_classification(int vocab_size, std::size_t n,
                                                          const ClassificationOptions& options,
                                                          std::uint64_t seed) {
  if (n < 2) throw ValidationError("synthetic classification: n must be >= 2");
  if (options.seq_len < 8) throw ValidationError("synthetic classification: seq_len must be >= 8");
  const int triggers = options.trigger_tokens;
  if (triggers < 1 || vocab_size < kNumSpecialTokens + triggers + 8) {
    throw ValidationError("synthetic classification: vocab too small for trigger + content tokens");
  }
  const int content_lo = kNumSpecialTokens;
  const int content_hi = vocab_size - triggers;  // triggers occupy the top of the id range

  rng::Stream stream(seed, 0xC1A55);
  std::vector<EncodedExample> out;
  out.reserve(n);
  for (std::size_t idx = 0; idx < n; ++idx) {
    const int label = idx % 2 == 0 ? 1 : 0;  // ceil(n/2) positives
    const int L = options.seq_len;
    const std::size_t min_len = 6;
    const std::size_t max_len = static_cast<std::size_t>(L) - 2;
    const std::size_t len = min_len + stream.uniform_int(max_len - min_len + 1);

    EncodedExample ex;
    ex.token_ids.assign(static_cast<std::size_t>(L), kPadId);
    ex.segment_ids.assign(static_cast<std::size_t>(L), 0);
    ex.attention_mask.assign(static_cast<std::size_t>(L), 0);
    ex.class_label = label;

    ex.token_ids[0] = kClsId;
    ex.attention_mask[0] = 1;
    for (std::size_t j = 0; j < len; ++j) {
      ex.token_ids[1 + j] = static_cast<std::int32_t>(
          content_lo + stream.uniform_int(static_cast<std::uint64_t>(content_hi - content_lo)));
      ex.attention_mask[1 + j] = 1;
    }
    ex.token_ids[1 + len] = kSepId;
    ex.attention_mask[1 + len] = 1;

    if (label == 1) {
      const std::size_t k = 1 + stream.uniform_int(3);
      for (std::size_t t = 0; t < k; ++t) {
        const std::size_t pos = 1 + stream.uniform_int(len);
        ex.token_ids[pos] = static_cast<std::int32_t>(
            content_hi + static_cast<int>(stream.uniform_int(static_cast<std::uint64_t>(triggers))));
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::string make_synthetic_corpus(std::size_t approx_tokens, std::uint64_t seed) {
  rng::Stream stream(seed, 0xC0125);
  constexpr int kWords = 256;
  const auto word = [](int id) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "w%03d", id);
    return std::string(buf);
  };
  std::ostringstream text;
  std::size_t emitted = 0;
  bool first_doc = true;
  while (emitted < approx_tokens) {
    if (!first_doc) text << "\n";
    first_doc = false;
    const std::size_t sentences = 4 + stream.uniform_int(7);
    for (std::size_t s = 0; s < sentences; ++s) {
      const std::size_t words = 6 + stream.uniform_int(7);
      int prev = -1;
      for (std::size_t w = 0; w < words; ++w) {
        int id;
        if (prev >= 0 && stream.bernoulli(0.4)) {
          id = (prev + 1) % kWords;  // weak bigram structure
        } else {
          const double u = stream.uniform();
          id = static_cast<int>(u * u * kWords);  // skewed unigram distribution
          id = std::min(id, kWords - 1);
        }
        if (w > 0) text << ' ';
        text << word(id);
        prev = id;
        ++emitted;
      }
      text << '\n';
    }
  }
  return text.str();
}

namespace detail {

std::vector<std::size_t> split_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng::Stream stream(seed, 0x5811);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const std::size_t j = i + stream.uniform_int(n - i);
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

std::size_t validation_count(std::size_t n, double fraction) {
  if (fraction <= 0.0 || fraction >= 1.0) {
    throw ValidationError("split_validation: fraction must lie in (0, 1)");
  }
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

}  // namespace detail

model::Batch gather_batch(std::span<const EncodedExample> dataset,
                          std::span<const std::size_t> indices, model::Mode mode) {
  if (indices.empty()) throw ValidationError("gather_batch: empty index set");
  const auto& first = dataset[indices[0]];
  const int L = static_cast<int>(first.token_ids.size());

  model::Batch batch;
  batch.batch_size = static_cast<int>(indices.size());
  batch.seq_len = L;
  const std::size_t n = indices.size() * static_cast<std::size_t>(L);
  batch.token_ids.reserve(n);
  batch.segment_ids.reserve(n);
  batch.attention_mask.reserve(n);
  const bool pretrain = mode == model::Mode::kPretrain;
  if (pretrain) batch.mlm_targets.reserve(n);

  for (const std::size_t idx : indices) {
    const auto& ex = dataset[idx];
    if (static_cast<int>(ex.token_ids.size()) != L) {
      throw ValidationError("gather_batch: examples have inconsistent sequence lengths");
    }
    batch.token_ids.insert(batch.token_ids.end(), ex.token_ids.begin(), ex.token_ids.end());
    batch.segment_ids.insert(batch.segment_ids.end(), ex.segment_ids.begin(),
                             ex.segment_ids.end());
    batch.attention_mask.insert(batch.attention_mask.end(), ex.attention_mask.begin(),
                                ex.attention_mask.end());
    if (pretrain) {
      if (ex.mlm_targets.empty() || ex.nsp_label < 0) {
        throw ValidationError("gather_batch: example lacks pretraining targets");
      }
      batch.mlm_targets.insert(batch.mlm_targets.end(), ex.mlm_targets.begin(),
                               ex.mlm_targets.end());
      batch.nsp_labels.push_back(ex.nsp_label);
    } else {
      if (ex.class_label < 0) {
        throw ValidationError("gather_batch: example lacks a class label");
      }
      batch.class_labels.push_back(ex.class_label);
    }
  }
  return batch;
}

model::Batch gather_batch(std::span<const EncodedExample> dataset, model::Mode mode) {
  std::vector<std::size_t> indices(dataset.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  return gather_batch(dataset, indices, mode);
}

}  // namespace dpge::data
