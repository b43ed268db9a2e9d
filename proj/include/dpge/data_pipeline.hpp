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
#ifndef DPGE_DATA_PIPELINE_HPP_
#define DPGE_DATA_PIPELINE_HPP_

#include <cstdint>
#include <istream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dpge/model.hpp"
#include "dpge/rng.hpp"

// Corpus loading, frequency vocabulary, MLM/NSP instance construction, the
// synthetic downstream classification task and validation splitting. Every
// generator is a pure function of (inputs, seed).

namespace dpge::data {

// Corpus file format: UTF-8 text, blank-line-separated documents,
// newline-separated sentences, whitespace tokenization.
struct Corpus {
  std::vector<std::vector<std::vector<std::string>>> documents;

  std::size_t total_tokens() const;
};

Corpus load_corpus(const std::string& path);
Corpus parse_corpus(std::istream& in, const std::string& origin = "<stream>");

// Frequency vocabulary over fixed specials PAD=0 UNK=1 CLS=2 SEP=3 MASK=4.
class Vocab {
 public:
  // Keeps the top (size - 5) tokens by frequency, ties broken
  // lexicographically. Requires size >= 6.
  static Vocab build(const Corpus& corpus, std::size_t size);

  int id_of(const std::string& token) const;
  const std::string& token_of(int id) const;
  std::size_t size() const { return tokens_.size(); }

 private:
  std::unordered_map<std::string, int> to_id_;
  std::vector<std::string> tokens_;
};

// One sequence-level training instance; rows of a model::Batch.
struct EncodedExample {
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> attention_mask;
  std::vector<std::int32_t> mlm_targets;  // -1 = unmasked; empty in classify data
  std::int32_t nsp_label = -1;
  std::int32_t class_label = -1;
};

struct PretrainOptions {
  int seq_len = 64;
  double mask_rate = 0.15;  // of eligible positions; 80/10/10 mask/random/keep
};

// Sentence-pair packing with 50% true-next-sentence pairs and 50% random
// negatives from other documents. Requires a corpus with at least two
// documents (NSP negatives are impossible otherwise -> ConfigError).
std::vector<EncodedExample> make_pretrain_examples(const Corpus& corpus, const Vocab& vocab,
                                                   const PretrainOptions& options,
                                                   std::uint64_t seed);

struct ClassificationOptions {
  int seq_len = 64;
  int trigger_tokens = 8;  // size of the trigger family at the top of the id range
};

// Balanced binary task: positives carry 1-3 tokens from the trigger family
// embedded in otherwise-random content tokens; negatives never do.
std::vector<EncodedExample> make_synthetic_classification(int vocab_size, std::size_t n,
                                                          const ClassificationOptions& options,
                                                          std::uint64_t seed);

// Deterministic plain-text corpus with a skewed unigram distribution and a
// weak bigram structure, roughly `approx_tokens` tokens.
std::string make_synthetic_corpus(std::size_t approx_tokens, std::uint64_t seed);

// Disjoint, exhaustive, deterministic split; |validation| = round(fraction*N).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_validation(const std::vector<T>& items,
                                                           double fraction, std::uint64_t seed);

model::Batch gather_batch(std::span<const EncodedExample> dataset,
                          std::span<const std::size_t> indices, model::Mode mode);
model::Batch gather_batch(std::span<const EncodedExample> dataset, model::Mode mode);

// ---- template implementation ----

namespace detail {
std::vector<std::size_t> split_permutation(std::size_t n, std::uint64_t seed);
std::size_t validation_count(std::size_t n, double fraction);
}  // namespace detail

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_validation(const std::vector<T>& items,
                                                           double fraction, std::uint64_t seed) {
  const auto perm = detail::split_permutation(items.size(), seed);
  const std::size_t v = detail::validation_count(items.size(), fraction);
  std::pair<std::vector<T>, std::vector<T>> out;
  out.second.reserve(v);
  out.first.reserve(items.size() - v);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    (i < v ? out.second : out.first).push_back(items[perm[i]]);
  }
  return out;
}

}  // namespace dpge::data

#endif  // DPGE_DATA_PIPELINE_HPP_
