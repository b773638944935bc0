#include "seqattr/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "seqattr/layers.hpp"

namespace seqattr {

// ---------------------------------------------------------------------------
// images
// ---------------------------------------------------------------------------

namespace {

int next_pnm_int(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comment lines
  for (;;) {
    int c = in.peek();
    if (c == EOF) throw DataError("ppm: truncated header in " + path);
    if (std::isspace(c)) {
      in.get();
    } else if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      break;
    }
  }
  int value;
  if (!(in >> value)) throw DataError("ppm: malformed header in " + path);
  return value;
}

}  // namespace

Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  int channels;
  if (m0 == 'P' && m1 == '6') {
    channels = 3;
  } else if (m0 == 'P' && m1 == '5') {
    channels = 1;
  } else {
    throw DataError("ppm: unsupported magic in " + path +
                    " (expected P5 or P6)");
  }
  Image img;
  img.width = next_pnm_int(in, path);
  img.height = next_pnm_int(in, path);
  int maxval = next_pnm_int(in, path);
  if (maxval != 255)
    throw DataError("ppm: only maxval 255 supported in " + path);
  in.get();  // single whitespace after maxval
  img.channels = channels;
  size_t n = static_cast<size_t>(img.width) * img.height * channels;
  img.pixels.resize(n);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw DataError("ppm: truncated pixel data in " + path + ": expected " +
                    std::to_string(n) + " bytes, got " +
                    std::to_string(in.gcount()));
  return img;
}

void save_ppm(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("ppm: can only write 1- or 3-channel images");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("ppm: cannot write " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

Image pad_to_square_raw(const Image& img) {
  if (img.height < 1 || img.width < 1 || img.channels < 1)
    throw DataError("pad_to_square: zero-dimension image (" +
                    std::to_string(img.height) + "x" +
                    std::to_string(img.width) + ")");
  const int side = std::max(img.height, img.width);
  Image out;
  out.height = out.width = side;
  out.channels = img.channels;
  out.pixels.assign(
      static_cast<size_t>(side) * side * img.channels, 0);
  for (int y = 0; y < img.height; ++y) {
    const size_t src = static_cast<size_t>(y) * img.width * img.channels;
    const size_t dst = static_cast<size_t>(y) * side * img.channels;
    std::copy(img.pixels.begin() + static_cast<std::ptrdiff_t>(src),
              img.pixels.begin() +
                  static_cast<std::ptrdiff_t>(src + static_cast<size_t>(img.width) * img.channels),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(dst));
  }
  return out;
}

Image resize(const Image& img, int side) {
  if (side < 1) throw DataError("resize: target side must be >= 1");
  Image out;
  out.height = out.width = side;
  out.channels = img.channels;
  out.pixels.resize(static_cast<size_t>(side) * side * img.channels);
  for (int y = 0; y < side; ++y) {
    int sy = std::min(img.height - 1,
                      static_cast<int>((y + 0.5) * img.height / side));
    for (int x = 0; x < side; ++x) {
      int sx = std::min(img.width - 1,
                        static_cast<int>((x + 0.5) * img.width / side));
      for (int c = 0; c < img.channels; ++c)
        out.pixels[(static_cast<size_t>(y) * side + x) * img.channels + c] =
            img.at(sy, sx, c);
    }
  }
  return out;
}

Image pad_to_square(const Image& img, int side) {
  return resize(pad_to_square_raw(img), side);
}

// ---------------------------------------------------------------------------
// visual encoder
// ---------------------------------------------------------------------------

void VisualEncoderConfig::validate() const {
  if (image_side < 1 || patch_side < 1 || channels < 1 || d_model < 1 ||
      encoder_layers < 0 || heads < 1 || d_ff < 1)
    throw ConfigError("visual encoder: non-positive dimension");
  if (image_side % patch_side != 0)
    throw ConfigError("visual encoder: image_side " +
                      std::to_string(image_side) +
                      " not divisible by patch_side " +
                      std::to_string(patch_side));
  if (d_model % heads != 0)
    throw ConfigError("visual encoder: d_model not divisible by heads");
}

VisualEncoder::VisualEncoder(VisualEncoderConfig cfg, ParamStore& params,
                             const std::string& prefix, Rng& init_rng)
    : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.d_model;
  const double pb = std::sqrt(1.0 / cfg_.patch_dim());
  const double db = std::sqrt(1.0 / d);
  params.add(prefix + ".patch.w",
             Tensor::uniform({cfg_.patch_dim(), d}, init_rng, pb));
  params.add(prefix + ".patch.b", Tensor::zeros({d}));
  params.add(prefix + ".cls", Tensor::uniform({1, d}, init_rng, db));
  params.add(prefix + ".pos",
             Tensor::uniform({cfg_.num_patches() + 1, d}, init_rng, db));
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    AttentionParams::create(d, params, lp + ".self", init_rng);
    LayerNormParams::create(d, params, lp + ".ln1");
    FfnParams::create(d, cfg_.d_ff, params, lp + ".ffn", init_rng);
    LayerNormParams::create(d, params, lp + ".ln2");
  }
  bind(params, prefix);
}

VisualEncoder::VisualEncoder(VisualEncoderConfig cfg, const ParamStore& params,
                             const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  bind(params, prefix);
}

void VisualEncoder::bind(const ParamStore& params, const std::string& prefix) {
  patch_w_ = params.get(prefix + ".patch.w");
  patch_b_ = params.get(prefix + ".patch.b");
  cls_ = params.get(prefix + ".cls");
  pos_ = params.get(prefix + ".pos");
  blocks_.clear();
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    Block b;
    auto attn = AttentionParams::bind(params, lp + ".self");
    b.wq = attn.wq; b.bq = attn.bq; b.wk = attn.wk; b.bk = attn.bk;
    b.wv = attn.wv; b.bv = attn.bv; b.wo = attn.wo; b.bo = attn.bo;
    auto ln1 = LayerNormParams::bind(params, lp + ".ln1");
    b.ln1_g = ln1.gain; b.ln1_b = ln1.bias;
    auto ffn = FfnParams::bind(params, lp + ".ffn");
    b.ffn_w1 = ffn.w1; b.ffn_b1 = ffn.b1; b.ffn_w2 = ffn.w2; b.ffn_b2 = ffn.b2;
    auto ln2 = LayerNormParams::bind(params, lp + ".ln2");
    b.ln2_g = ln2.gain; b.ln2_b = ln2.bias;
    blocks_.push_back(b);
  }
}

Tensor VisualEncoder::patch_embed(const Image& img) const {
  if (img.height != cfg_.image_side || img.width != cfg_.image_side ||
      img.channels != cfg_.channels)
    throw ShapeError("patch_embed: image " + std::to_string(img.height) + "x" +
                     std::to_string(img.width) + "x" +
                     std::to_string(img.channels) + " does not match config " +
                     std::to_string(cfg_.image_side) + "x" +
                     std::to_string(cfg_.image_side) + "x" +
                     std::to_string(cfg_.channels));
  const int pps = cfg_.patches_per_side();
  const int ps = cfg_.patch_side;
  std::vector<double> flat(static_cast<size_t>(cfg_.num_patches()) *
                           cfg_.patch_dim());
  size_t w = 0;
  for (int py = 0; py < pps; ++py)
    for (int px = 0; px < pps; ++px)
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          for (int c = 0; c < cfg_.channels; ++c)
            flat[w++] = img.at(py * ps + y, px * ps + x, c) / 255.0;
  Tensor patches =
      Tensor::from({cfg_.num_patches(), cfg_.patch_dim()}, std::move(flat));
  return add_rowvec(matmul(patches, patch_w_), patch_b_);
}

Tensor VisualEncoder::encode_tokens(const Tensor& patch_tokens) const {
  if (patch_tokens.rank() != 2 || patch_tokens.dim(0) != cfg_.num_patches() ||
      patch_tokens.dim(1) != cfg_.d_model)
    throw ShapeError("visual_encode: tokens " + shape_str(patch_tokens.shape()) +
                     " do not match config (" +
                     std::to_string(cfg_.num_patches()) + "x" +
                     std::to_string(cfg_.d_model) + ")");
  Tensor x = add(concat_rows({cls_, patch_tokens}), pos_);
  const MaskMatrix open = MaskMatrix::all_admissible(cfg_.num_patches() + 1);
  for (const Block& blk : blocks_) {
    AttentionParams attn{blk.wq, blk.bq, blk.wk, blk.bk,
                         blk.wv, blk.bv, blk.wo, blk.bo};
    MhaResult a = multi_head_attention(x, x, attn, cfg_.heads, &open);
    x = layer_norm(add(x, a.output), blk.ln1_g, blk.ln1_b);
    Tensor f = ffn_forward(x, {blk.ffn_w1, blk.ffn_b1, blk.ffn_w2, blk.ffn_b2});
    x = layer_norm(add(x, f), blk.ln2_g, blk.ln2_b);
  }
  return x;
}

Tensor VisualEncoder::encode(const Image& img) const {
  return encode_tokens(patch_embed(img));
}

// ---------------------------------------------------------------------------
// text encoder
// ---------------------------------------------------------------------------

std::vector<std::string> TextEncoder::split_words(const std::string& sentence) {
  std::vector<std::string> words;
  std::istringstream stream(sentence);
  std::string w;
  while (stream >> w) words.push_back(w);
  return words;
}

std::vector<std::string> TextEncoder::build_word_list(
    const std::vector<std::string>& sentences) {
  std::vector<std::string> words = {"<unk>"};
  std::unordered_map<std::string, int> seen = {{"<unk>", 0}};
  for (const auto& s : sentences)
    for (const auto& w : split_words(s))
      if (seen.emplace(w, static_cast<int>(words.size())).second)
        words.push_back(w);
  return words;
}

TextEncoder::TextEncoder(std::vector<std::string> words, int d_model,
                         ParamStore& params, const std::string& prefix,
                         Rng& init_rng)
    : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i)
    index_[words_[i]] = static_cast<int>(i);
  params.add(prefix + ".word_emb",
             Tensor::uniform({static_cast<int>(words_.size()), d_model},
                             init_rng, std::sqrt(1.0 / d_model)));
  embeddings_ = params.get(prefix + ".word_emb");
}

TextEncoder::TextEncoder(std::vector<std::string> words, int d_model,
                         const ParamStore& params, const std::string& prefix)
    : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i)
    index_[words_[i]] = static_cast<int>(i);
  embeddings_ = params.get(prefix + ".word_emb");
  if (embeddings_.dim(0) != static_cast<int>(words_.size()) ||
      embeddings_.dim(1) != d_model)
    throw ConfigError("text encoder: embedding table " +
                      shape_str(embeddings_.shape()) +
                      " does not match word list of " +
                      std::to_string(words_.size()));
}

std::vector<int> TextEncoder::word_ids(const std::string& sentence) const {
  std::vector<int> ids;
  for (const auto& w : split_words(sentence)) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? 0 : it->second);
  }
  return ids;
}

Tensor TextEncoder::encode(const std::string& sentence) const {
  std::vector<int> ids = word_ids(sentence);
  if (ids.empty())
    throw DataError("text_encode_attribute: empty sentence");
  return mean_rows(gather_rows(embeddings_, ids));
}

// ---------------------------------------------------------------------------
// feature blobs
// ---------------------------------------------------------------------------

namespace {
constexpr char kBlobMagic[4] = {'S', 'Q', 'F', 'B'};
constexpr uint32_t kBlobVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
}  // namespace

Tensor load_feature_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("feature blob: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < 16)
    throw DataError("feature blob: " + path + " too short (" +
                    std::to_string(bytes.size()) + " bytes) for header");
  if (std::memcmp(bytes.data(), kBlobMagic, 4) != 0)
    throw DataError("feature blob: bad magic at offset 0 in " + path);
  uint32_t version, rows, cols;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&rows, bytes.data() + 8, 4);
  std::memcpy(&cols, bytes.data() + 12, 4);
  if (version != kBlobVersion)
    throw DataError("feature blob: unsupported version " +
                    std::to_string(version) + " at offset 4 in " + path);
  const size_t expected = 16 + static_cast<size_t>(rows) * cols * 4;
  if (bytes.size() != expected)
    throw DataError("feature blob: " + path + ": expected " +
                    std::to_string(expected) + " bytes, got " +
                    std::to_string(bytes.size()));
  std::vector<double> data(static_cast<size_t>(rows) * cols);
  for (size_t i = 0; i < data.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 16 + i * 4, 4);
    data[i] = static_cast<double>(f);
  }
  return Tensor::from({static_cast<int>(rows), static_cast<int>(cols)},
                      std::move(data));
}

void save_feature_blob(const Tensor& tokens, const std::string& path) {
  if (tokens.rank() != 2)
    throw ShapeError("feature blob: expected rank-2 tokens, got " +
                     shape_str(tokens.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("feature blob: cannot write " + path);
  out.write(kBlobMagic, 4);
  write_u32(out, kBlobVersion);
  write_u32(out, static_cast<uint32_t>(tokens.dim(0)));
  write_u32(out, static_cast<uint32_t>(tokens.dim(1)));
  for (double v : tokens.data()) {
    float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

}  // namespace seqattr
