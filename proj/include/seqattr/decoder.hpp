#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqattr/encoders.hpp"
#include "seqattr/layers.hpp"
#include "seqattr/tensor.hpp"
#include "seqattr/vocab.hpp"

namespace seqattr {

// Self-attention masking strategies under ablation. Causal is the paper's
// default; Group lets attributes within a semantic group see each other;
// Sparse(K) hides only the next K future positions (deliberately leaky);
// None admits everything.
struct MaskStrategy {
  enum class Kind { Causal, Group, Sparse, None };
  Kind kind = Kind::Causal;
  int sparse_k = 1;
  std::vector<std::vector<int>> groups;  // attribute indices per group

  // "causal" | "group" | "sparse-K" | "none"
  static MaskStrategy parse(const std::string& text);
  std::string to_string() const;
};

// token-independent strategies only; Group raises ConfigError here
MaskMatrix build_mask(const MaskStrategy& strategy, int len);
// all strategies; Group ranks each position's group by first occurrence,
// specials are singleton groups in sequence order
MaskMatrix build_mask(const MaskStrategy& strategy, const TokenSeq& tokens,
                      const AttributeVocabulary& vocab);

struct DecoderConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int visual_dim = 64;  // width of incoming visual tokens (blob pathway)
  void validate() const;
};

// Everything needed to rebuild a model deterministically; serialised verbatim
// into checkpoints.
struct ModelSpec {
  DecoderConfig dec;
  std::string mask = "causal";
  bool image_frontend = false;
  VisualEncoderConfig vis;
  std::string prompt_name = "custom";
  std::vector<std::string> attributes;
  std::vector<std::vector<int>> groups;
  std::map<std::string, std::string> prompt_overrides;
  std::vector<int> order;  // attribute emission order for training targets
  uint64_t init_seed = 1;

  AttributeVocabulary make_vocab() const;
  PromptTemplate make_prompt() const;
  int vocab_size() const { return static_cast<int>(attributes.size()) + 3; }
  int max_seq() const { return static_cast<int>(attributes.size()) + 2; }
  // width of the tensor handed to decode_forward
  int visual_input_width() const {
    return image_frontend ? vis.d_model : dec.visual_dim;
  }
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

struct DecoderOutput {
  Tensor log_probs;                // (L x vocab), rows are log-distributions
  std::vector<Tensor> self_attn;   // per layer (L x L), head-mean, detached
  std::vector<Tensor> cross_attn;  // per layer (L x R), head-mean, detached
};

struct TeacherForced {
  DecoderOutput out;       // row t scores target position t
  std::vector<int> targets;
};

// The sequence generation model: attribute query embeddings from the text
// pathway, an optional from-scratch visual encoder, the masked transformer
// decoder stack, and the closed-vocabulary output projection.
class SeqGenModel {
 public:
  explicit SeqGenModel(ModelSpec spec);  // fresh, seeded initialisation

  const ModelSpec& spec() const { return spec_; }
  const AttributeVocabulary& vocab() const { return vocab_; }
  const MaskStrategy& mask_strategy() const { return mask_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const TextEncoder& text() const { return *text_; }
  const VisualEncoder* visual_encoder() const {
    return vis_ ? &*vis_ : nullptr;
  }

  // (vocab_size x d_model) rows: prompt-derived attribute embeddings, then
  // learned BOS/EOS/PAD rows; rebuilt per call so the text pathway trains
  Tensor query_embeddings() const;

  // embed shifted inputs, run masked self-attention + cross-attention + FFN
  // blocks, project onto the closed vocabulary
  DecoderOutput decode_forward(const TokenSeq& inputs,
                               const Tensor& visual) const;

  // inputs = gt[0..n-2], targets = gt[1..n-1]; one parallel forward pass
  TeacherForced teacher_forced_logits(const TokenSeq& gt_sequence,
                                      const Tensor& visual) const;

  Tensor visual_from_image(const Image& img) const;

  // rebuild from a checkpoint spec, overwriting parameters with the given
  // name -> tensor map; unknown or missing names and shape mismatches throw
  static SeqGenModel restore(
      ModelSpec spec,
      const std::vector<std::pair<std::string, Tensor>>& tensors);

 private:
  Tensor project_visual(const Tensor& visual) const;

  ModelSpec spec_;
  AttributeVocabulary vocab_;
  PromptTemplate prompt_;
  MaskStrategy mask_;
  ParamStore params_;
  std::unique_ptr<TextEncoder> text_;
  std::optional<VisualEncoder> vis_;
  std::vector<std::string> prompt_sentences_;

  Tensor special_emb_, dec_pos_, out_w_, out_b_;
  struct Layer {
    AttentionParams self_attn, cross_attn;
    LayerNormParams ln1, ln2, ln3;
    FfnParams ffn;
  };
  std::vector<Layer> layers_;
  Tensor proj_w_, proj_b_;  // defined only when visual width != d_model
  bool has_proj_ = false;
};

// SQPR container: magic "SQPR", version u32, length-prefixed JSON config
// blob, then named tensors (name-length/name/rank/dims/payload), all
// little-endian. Payload width follows config["payload_dtype"] ("f32"
// default, "f64" for training checkpoints that must resume bit-exactly).
struct SqprFile {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void write_sqpr(const std::string& path, const nlohmann::json& config,
                const std::vector<std::pair<std::string, Tensor>>& tensors);
SqprFile read_sqpr(const std::string& path);

}  // namespace seqattr
