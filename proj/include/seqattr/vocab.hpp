#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "seqattr/common.hpp"

namespace seqattr {

// Ordered closed set of M attribute phrases plus BOS/EOS/PAD specials.
// Indices [0, M) are attributes; bos = M, eos = M+1, pad = M+2.
class AttributeVocabulary {
 public:
  AttributeVocabulary() = default;
  explicit AttributeVocabulary(std::vector<std::string> attributes);

  int num_attributes() const { return static_cast<int>(attributes_.size()); }
  int total_size() const { return num_attributes() + 3; }
  int bos() const { return num_attributes(); }
  int eos() const { return num_attributes() + 1; }
  int pad() const { return num_attributes() + 2; }
  int max_seq_len() const { return num_attributes() + 2; }  // BOS..EOS padded

  bool is_attribute(int token) const {
    return token >= 0 && token < num_attributes();
  }
  const std::string& attribute(int i) const {
    return attributes_[static_cast<size_t>(i)];
  }
  const std::vector<std::string>& attributes() const { return attributes_; }
  std::string token_text(int token) const;  // attribute phrase or <BOS> etc.

  // groups of attribute indices for the group masking strategy; may be empty
  const std::vector<std::vector<int>>& groups() const { return groups_; }
  void set_groups(std::vector<std::vector<int>> groups);

  const std::map<std::string, std::string>& prompt_overrides() const {
    return prompt_overrides_;
  }
  void set_prompt_overrides(std::map<std::string, std::string> overrides) {
    prompt_overrides_ = std::move(overrides);
  }

  // JSON file: {"attributes": [...], "groups": [[...]], "prompt_overrides": {}}
  static AttributeVocabulary load_json(const std::string& path);
  void save_json(const std::string& path) const;

 private:
  std::vector<std::string> attributes_;
  std::vector<std::vector<int>> groups_;
  std::map<std::string, std::string> prompt_overrides_;
};

// Sentence pattern with exactly one <CLASS> slot, plus optional per-attribute
// fully written overrides.
struct PromptTemplate {
  std::string name;
  std::string pattern;
  std::map<std::string, std::string> overrides;

  static PromptTemplate bare();    // "<CLASS>"
  static PromptTemplate photo();   // "A photo of a <CLASS>"
  static PromptTemplate custom(std::map<std::string, std::string> overrides);
  static PromptTemplate named(const std::string& name,
                              const AttributeVocabulary& vocab);

  void validate() const;  // pattern must contain exactly one placeholder
};

std::string expand_prompt(const std::string& attribute,
                          const PromptTemplate& tmpl);

// Emission order of attributes in ground-truth sequences: order[rank] is the
// attribute emitted at that rank when positive.
using AttributeOrder = std::vector<int>;

AttributeOrder make_order_canonical(int m);
AttributeOrder make_order_inverse(int m);
AttributeOrder make_order_shuffle(int m, uint64_t seed);
// text forms: "canonical" | "inverse" | "shuffle:<seed>"
AttributeOrder make_order(const std::string& kind, int m);

using TokenSeq = std::vector<int>;

// [BOS] + positive attributes sorted by `order` + [EOS] + PAD to length M+2
TokenSeq labels_to_sequence(const std::vector<uint8_t>& labels,
                            const AttributeVocabulary& vocab,
                            const AttributeOrder& order);

// multi-hot with bit j set iff attribute j appears before the first EOS
std::vector<uint8_t> sequence_to_labels(const TokenSeq& seq,
                                        const AttributeVocabulary& vocab);

}  // namespace seqattr
