#include "seqattr/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

namespace seqattr {

using nlohmann::json;

AttributeVocabulary::AttributeVocabulary(std::vector<std::string> attributes)
    : attributes_(std::move(attributes)) {
  std::set<std::string> seen;
  for (const auto& a : attributes_) {
    if (a.empty()) throw ConfigError("vocabulary: empty attribute phrase");
    if (!seen.insert(a).second)
      throw ConfigError("vocabulary: duplicate attribute phrase '" + a + "'");
  }
}

std::string AttributeVocabulary::token_text(int token) const {
  if (is_attribute(token)) return attribute(token);
  if (token == bos()) return "<BOS>";
  if (token == eos()) return "<EOS>";
  if (token == pad()) return "<PAD>";
  throw DataError("vocabulary: token " + std::to_string(token) +
                  " outside vocabulary of size " + std::to_string(total_size()));
}

void AttributeVocabulary::set_groups(std::vector<std::vector<int>> groups) {
  std::set<int> seen;
  for (const auto& g : groups) {
    if (g.empty()) throw ConfigError("vocabulary: empty attribute group");
    for (int idx : g) {
      if (idx < 0 || idx >= num_attributes())
        throw ConfigError("vocabulary: group index " + std::to_string(idx) +
                          " out of range for M=" +
                          std::to_string(num_attributes()));
      if (!seen.insert(idx).second)
        throw ConfigError("vocabulary: attribute " + std::to_string(idx) +
                          " appears in more than one group");
    }
  }
  groups_ = std::move(groups);
}

AttributeVocabulary AttributeVocabulary::load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("vocabulary: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("vocabulary: invalid JSON in " + path + ": " + e.what());
  }
  if (!j.contains("attributes") || !j["attributes"].is_array())
    throw DataError("vocabulary: missing 'attributes' array in " + path);
  AttributeVocabulary vocab(
      j["attributes"].get<std::vector<std::string>>());
  if (j.contains("groups"))
    vocab.set_groups(j["groups"].get<std::vector<std::vector<int>>>());
  if (j.contains("prompt_overrides"))
    vocab.set_prompt_overrides(
        j["prompt_overrides"].get<std::map<std::string, std::string>>());
  return vocab;
}

void AttributeVocabulary::save_json(const std::string& path) const {
  json j;
  j["attributes"] = attributes_;
  if (!groups_.empty()) j["groups"] = groups_;
  if (!prompt_overrides_.empty()) j["prompt_overrides"] = prompt_overrides_;
  std::ofstream out(path);
  if (!out) throw DataError("vocabulary: cannot write " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// prompts
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kSlot = "<CLASS>";
}

PromptTemplate PromptTemplate::bare() { return {"class", kSlot, {}}; }

PromptTemplate PromptTemplate::photo() {
  return {"photo", std::string("A photo of a ") + kSlot, {}};
}

PromptTemplate PromptTemplate::custom(
    std::map<std::string, std::string> overrides) {
  return {"custom", std::string("this pedestrian has ") + kSlot,
          std::move(overrides)};
}

PromptTemplate PromptTemplate::named(const std::string& name,
                                     const AttributeVocabulary& vocab) {
  if (name == "class") return bare();
  if (name == "photo") return photo();
  if (name == "custom") return custom(vocab.prompt_overrides());
  throw ConfigError("unknown prompt template '" + name +
                    "' (expected class|photo|custom)");
}

void PromptTemplate::validate() const {
  size_t first = pattern.find(kSlot);
  if (first == std::string::npos)
    throw ConfigError("prompt template '" + name + "' has no " + kSlot +
                      " placeholder");
  if (pattern.find(kSlot, first + 1) != std::string::npos)
    throw ConfigError("prompt template '" + name +
                      "' has more than one placeholder");
}

std::string expand_prompt(const std::string& attribute,
                          const PromptTemplate& tmpl) {
  if (attribute.empty()) throw ConfigError("expand_prompt: empty attribute");
  tmpl.validate();
  auto it = tmpl.overrides.find(attribute);
  if (it != tmpl.overrides.end()) return it->second;
  std::string out = tmpl.pattern;
  out.replace(out.find(kSlot), std::string(kSlot).size(), attribute);
  return out;
}

// ---------------------------------------------------------------------------
// attribute order
// ---------------------------------------------------------------------------

AttributeOrder make_order_canonical(int m) {
  AttributeOrder o(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) o[static_cast<size_t>(i)] = i;
  return o;
}

AttributeOrder make_order_inverse(int m) {
  AttributeOrder o = make_order_canonical(m);
  std::reverse(o.begin(), o.end());
  return o;
}

AttributeOrder make_order_shuffle(int m, uint64_t seed) {
  AttributeOrder o = make_order_canonical(m);
  Rng rng(subseed(seed, "shuffle-order"));
  rng.shuffle(o);
  return o;
}

AttributeOrder make_order(const std::string& kind, int m) {
  if (m < 1) throw ConfigError("make_order: M must be >= 1");
  if (kind == "canonical") return make_order_canonical(m);
  if (kind == "inverse") return make_order_inverse(m);
  if (kind.rfind("shuffle:", 0) == 0) {
    uint64_t seed;
    try {
      seed = std::stoull(kind.substr(8));
    } catch (const std::exception&) {
      throw ConfigError("make_order: bad shuffle seed in '" + kind + "'");
    }
    return make_order_shuffle(m, seed);
  }
  throw ConfigError("make_order: unknown order '" + kind +
                    "' (expected canonical|inverse|shuffle:<seed>)");
}

// ---------------------------------------------------------------------------
// label <-> sequence bijection
// ---------------------------------------------------------------------------

TokenSeq labels_to_sequence(const std::vector<uint8_t>& labels,
                            const AttributeVocabulary& vocab,
                            const AttributeOrder& order) {
  const int m = vocab.num_attributes();
  if (static_cast<int>(labels.size()) != m)
    throw DataError("labels_to_sequence: label length " +
                    std::to_string(labels.size()) + " != M=" +
                    std::to_string(m));
  if (static_cast<int>(order.size()) != m)
    throw ConfigError("labels_to_sequence: order is not a permutation of M");
  for (uint8_t v : labels)
    if (v != 0 && v != 1)
      throw DataError("labels_to_sequence: labels must be binary");

  TokenSeq seq;
  seq.reserve(static_cast<size_t>(vocab.max_seq_len()));
  seq.push_back(vocab.bos());
  for (int attr : order)
    if (labels[static_cast<size_t>(attr)]) seq.push_back(attr);
  seq.push_back(vocab.eos());
  while (static_cast<int>(seq.size()) < vocab.max_seq_len())
    seq.push_back(vocab.pad());
  return seq;
}

std::vector<uint8_t> sequence_to_labels(const TokenSeq& seq,
                                        const AttributeVocabulary& vocab) {
  std::vector<uint8_t> labels(static_cast<size_t>(vocab.num_attributes()), 0);
  for (int token : seq) {
    if (token < 0 || token >= vocab.total_size())
      throw DataError("sequence_to_labels: token " + std::to_string(token) +
                      " outside vocabulary");
    if (token == vocab.eos()) break;
    if (vocab.is_attribute(token)) labels[static_cast<size_t>(token)] = 1;
  }
  return labels;
}

}  // namespace seqattr
