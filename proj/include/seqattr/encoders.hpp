#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqattr/tensor.hpp"
#include "seqattr/vocab.hpp"

namespace seqattr {

// 8-bit interleaved image, row-major (y, x, channel)
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

// binary PPM (P6) / PGM (P5), maxval 255
Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);

// pad to max(h, w) square with black pixels, original at the top-left
Image pad_to_square_raw(const Image& img);
// nearest-neighbour resize
Image resize(const Image& img, int side);
// pad_to_square_raw followed by resize to `side`
Image pad_to_square(const Image& img, int side);

struct VisualEncoderConfig {
  int image_side = 32;
  int patch_side = 8;
  int channels = 3;
  int d_model = 64;
  int encoder_layers = 2;
  int heads = 4;
  int d_ff = 256;

  int patches_per_side() const { return image_side / patch_side; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_side * patch_side * channels; }
  void validate() const;
};

// Small from-scratch ViT: patch projection, class token, learned positions,
// bidirectional encoder blocks. Parameters are registered into the caller's
// store under the given prefix.
class VisualEncoder {
 public:
  VisualEncoder(VisualEncoderConfig cfg, ParamStore& params,
                const std::string& prefix, Rng& init_rng);
  // rebind to an existing store (checkpoint load path)
  VisualEncoder(VisualEncoderConfig cfg, const ParamStore& params,
                const std::string& prefix);

  const VisualEncoderConfig& config() const { return cfg_; }

  // non-overlapping patch flattening + learned linear map, row-major order
  Tensor patch_embed(const Image& img) const;
  // class token, position embeddings, encoder blocks
  Tensor encode_tokens(const Tensor& patch_tokens) const;
  Tensor encode(const Image& img) const;

 private:
  void bind(const ParamStore& params, const std::string& prefix);

  VisualEncoderConfig cfg_;
  Tensor patch_w_, patch_b_;
  Tensor cls_, pos_;
  struct Block {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln2_g, ln2_b;
  };
  std::vector<Block> blocks_;
};

// Whitespace word tokenizer + learned word embeddings + mean pooling; the
// desk-scale stand-in for a pre-trained text encoder. Row 0 is <unk>.
class TextEncoder {
 public:
  TextEncoder(std::vector<std::string> words, int d_model, ParamStore& params,
              const std::string& prefix, Rng& init_rng);
  TextEncoder(std::vector<std::string> words, int d_model,
              const ParamStore& params, const std::string& prefix);

  static std::vector<std::string> build_word_list(
      const std::vector<std::string>& sentences);
  static std::vector<std::string> split_words(const std::string& sentence);

  const std::vector<std::string>& words() const { return words_; }
  std::vector<int> word_ids(const std::string& sentence) const;
  // mean of word-embedding rows -> (1 x d)
  Tensor encode(const std::string& sentence) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  Tensor embeddings_;
};

// Feature blob: magic "SQFB", version u32, rows u32, cols u32, then
// rows*cols little-endian float32. Values round-trip bit-exactly because all
// in-memory features are kept at float32 resolution.
Tensor load_feature_blob(const std::string& path);
void save_feature_blob(const Tensor& tokens, const std::string& path);

}  // namespace seqattr
