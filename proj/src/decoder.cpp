#include "seqattr/decoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace seqattr {

using nlohmann::json;

// ---------------------------------------------------------------------------
// masking strategies
// ---------------------------------------------------------------------------

MaskStrategy MaskStrategy::parse(const std::string& text) {
  MaskStrategy s;
  if (text == "causal") {
    s.kind = Kind::Causal;
  } else if (text == "group") {
    s.kind = Kind::Group;
  } else if (text == "none") {
    s.kind = Kind::None;
  } else if (text.rfind("sparse-", 0) == 0) {
    s.kind = Kind::Sparse;
    try {
      s.sparse_k = std::stoi(text.substr(7));
    } catch (const std::exception&) {
      throw ConfigError("mask: bad sparse width in '" + text + "'");
    }
    if (s.sparse_k < 1) throw ConfigError("mask: sparse K must be >= 1");
  } else {
    throw ConfigError("mask: unknown strategy '" + text +
                      "' (expected causal|group|sparse-K|none)");
  }
  return s;
}

std::string MaskStrategy::to_string() const {
  switch (kind) {
    case Kind::Causal:
      return "causal";
    case Kind::Group:
      return "group";
    case Kind::Sparse:
      return "sparse-" + std::to_string(sparse_k);
    case Kind::None:
      return "none";
  }
  return "causal";
}

MaskMatrix build_mask(const MaskStrategy& strategy, int len) {
  if (len < 1) throw ShapeError("build_mask: length must be >= 1");
  MaskMatrix m;
  m.n = len;
  m.admissible.assign(static_cast<size_t>(len) * len, 0);
  switch (strategy.kind) {
    case MaskStrategy::Kind::Causal:
      for (int i = 0; i < len; ++i)
        for (int j = 0; j <= i; ++j) m.set(i, j, true);
      break;
    case MaskStrategy::Kind::Sparse:
      // the next K positions stay hidden; anything beyond them leaks through
      for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j)
          if (j <= i || j > i + strategy.sparse_k) m.set(i, j, true);
      break;
    case MaskStrategy::Kind::None:
      m.admissible.assign(m.admissible.size(), 1);
      break;
    case MaskStrategy::Kind::Group:
      throw ConfigError(
          "build_mask: group strategy is token-dependent; pass the token "
          "sequence");
  }
  return m;
}

MaskMatrix build_mask(const MaskStrategy& strategy, const TokenSeq& tokens,
                      const AttributeVocabulary& vocab) {
  const int len = static_cast<int>(tokens.size());
  if (strategy.kind != MaskStrategy::Kind::Group)
    return build_mask(strategy, len);
  if (len < 1) throw ShapeError("build_mask: empty token sequence");
  if (strategy.groups.empty())
    throw ConfigError("build_mask: group strategy without attribute groups");

  std::unordered_map<int, int> attr_to_group;
  for (size_t g = 0; g < strategy.groups.size(); ++g)
    for (int attr : strategy.groups[g]) attr_to_group[attr] = static_cast<int>(g);

  // Rank each position's group by first occurrence; specials get fresh
  // singleton ranks. Admissible iff the key's rank does not exceed the
  // query's, so same-group positions see each other and order is causal
  // across groups.
  std::vector<int> rank(static_cast<size_t>(len));
  std::unordered_map<int, int> group_rank;
  int next_rank = 0;
  for (int i = 0; i < len; ++i) {
    const int t = tokens[static_cast<size_t>(i)];
    if (vocab.is_attribute(t)) {
      auto it = attr_to_group.find(t);
      if (it == attr_to_group.end())
        throw ConfigError("build_mask: attribute '" + vocab.attribute(t) +
                          "' is not covered by any group");
      auto [rit, fresh] = group_rank.emplace(it->second, next_rank);
      if (fresh) ++next_rank;
      rank[static_cast<size_t>(i)] = rit->second;
    } else {
      rank[static_cast<size_t>(i)] = next_rank++;
    }
  }
  MaskMatrix m;
  m.n = len;
  m.admissible.assign(static_cast<size_t>(len) * len, 0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      if (rank[static_cast<size_t>(j)] <= rank[static_cast<size_t>(i)])
        m.set(i, j, true);
  return m;
}

// ---------------------------------------------------------------------------
// spec
// ---------------------------------------------------------------------------

void DecoderConfig::validate() const {
  if (layers < 0 || heads < 1 || d_model < 1 || d_ff < 1 || visual_dim < 1)
    throw ConfigError("decoder config: non-positive dimension");
  if (d_model % heads != 0)
    throw ConfigError("decoder config: d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
}

AttributeVocabulary ModelSpec::make_vocab() const {
  AttributeVocabulary v(attributes);
  if (!groups.empty()) v.set_groups(groups);
  v.set_prompt_overrides(prompt_overrides);
  return v;
}

PromptTemplate ModelSpec::make_prompt() const {
  PromptTemplate p = PromptTemplate::named(prompt_name, make_vocab());
  p.validate();
  return p;
}

void to_json(json& j, const ModelSpec& spec) {
  j = json{{"layers", spec.dec.layers},
           {"heads", spec.dec.heads},
           {"d_model", spec.dec.d_model},
           {"d_ff", spec.dec.d_ff},
           {"visual_dim", spec.dec.visual_dim},
           {"mask", spec.mask},
           {"image_frontend", spec.image_frontend},
           {"prompt", spec.prompt_name},
           {"attributes", spec.attributes},
           {"groups", spec.groups},
           {"prompt_overrides", spec.prompt_overrides},
           {"order", spec.order},
           {"init_seed", spec.init_seed}};
  if (spec.image_frontend) {
    j["vis"] = json{{"image_side", spec.vis.image_side},
                    {"patch_side", spec.vis.patch_side},
                    {"channels", spec.vis.channels},
                    {"d_model", spec.vis.d_model},
                    {"encoder_layers", spec.vis.encoder_layers},
                    {"heads", spec.vis.heads},
                    {"d_ff", spec.vis.d_ff}};
  }
}

void from_json(const json& j, ModelSpec& spec) {
  j.at("layers").get_to(spec.dec.layers);
  j.at("heads").get_to(spec.dec.heads);
  j.at("d_model").get_to(spec.dec.d_model);
  j.at("d_ff").get_to(spec.dec.d_ff);
  j.at("visual_dim").get_to(spec.dec.visual_dim);
  j.at("mask").get_to(spec.mask);
  j.at("image_frontend").get_to(spec.image_frontend);
  j.at("prompt").get_to(spec.prompt_name);
  j.at("attributes").get_to(spec.attributes);
  j.at("groups").get_to(spec.groups);
  j.at("prompt_overrides").get_to(spec.prompt_overrides);
  j.at("order").get_to(spec.order);
  j.at("init_seed").get_to(spec.init_seed);
  if (spec.image_frontend) {
    const auto& v = j.at("vis");
    v.at("image_side").get_to(spec.vis.image_side);
    v.at("patch_side").get_to(spec.vis.patch_side);
    v.at("channels").get_to(spec.vis.channels);
    v.at("d_model").get_to(spec.vis.d_model);
    v.at("encoder_layers").get_to(spec.vis.encoder_layers);
    v.at("heads").get_to(spec.vis.heads);
    v.at("d_ff").get_to(spec.vis.d_ff);
  }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

SeqGenModel::SeqGenModel(ModelSpec spec)
    : spec_(std::move(spec)), vocab_(spec_.make_vocab()),
      prompt_(spec_.make_prompt()) {
  spec_.dec.validate();
  if (spec_.attributes.empty())
    throw ConfigError("model: vocabulary has no attributes");
  if (spec_.order.empty())
    spec_.order = make_order_canonical(vocab_.num_attributes());
  if (static_cast<int>(spec_.order.size()) != vocab_.num_attributes())
    throw ConfigError("model: order length does not match M");

  mask_ = MaskStrategy::parse(spec_.mask);
  if (mask_.kind == MaskStrategy::Kind::Group) {
    if (vocab_.groups().empty())
      throw ConfigError("model: group mask requires 'groups' in vocabulary");
    mask_.groups = vocab_.groups();
  }

  for (const auto& attr : vocab_.attributes())
    prompt_sentences_.push_back(expand_prompt(attr, prompt_));

  const int d = spec_.dec.d_model;
  Rng rng(subseed(spec_.init_seed, "init"));
  const double db = std::sqrt(1.0 / d);

  text_ = std::make_unique<TextEncoder>(
      TextEncoder::build_word_list(prompt_sentences_), d, params_, "text", rng);
  special_emb_ = params_.add("text.special_emb", Tensor::uniform({3, d}, rng, db));
  dec_pos_ = params_.add("dec.pos",
                         Tensor::uniform({spec_.max_seq(), d}, rng, db));
  for (int l = 0; l < spec_.dec.layers; ++l) {
    const std::string lp = "dec.l" + std::to_string(l);
    Layer layer;
    layer.self_attn = AttentionParams::create(d, params_, lp + ".self", rng);
    layer.ln1 = LayerNormParams::create(d, params_, lp + ".ln1");
    layer.cross_attn = AttentionParams::create(d, params_, lp + ".cross", rng);
    layer.ln2 = LayerNormParams::create(d, params_, lp + ".ln2");
    layer.ffn = FfnParams::create(d, spec_.dec.d_ff, params_, lp + ".ffn", rng);
    layer.ln3 = LayerNormParams::create(d, params_, lp + ".ln3");
    layers_.push_back(layer);
  }
  out_w_ = params_.add("dec.out.w",
                       Tensor::uniform({d, spec_.vocab_size()}, rng, db));
  out_b_ = params_.add("dec.out.b", Tensor::zeros({spec_.vocab_size()}));

  if (spec_.image_frontend)
    vis_.emplace(spec_.vis, params_, "vis", rng);

  const int in_width = spec_.visual_input_width();
  if (in_width != d) {
    has_proj_ = true;
    proj_w_ = params_.add("proj.w", Tensor::uniform({in_width, d}, rng,
                                                    std::sqrt(1.0 / in_width)));
    proj_b_ = params_.add("proj.b", Tensor::zeros({d}));
  }
}

SeqGenModel SeqGenModel::restore(
    ModelSpec spec, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  SeqGenModel model(std::move(spec));
  size_t used = 0;
  for (const auto& [name, tensor] : tensors) {
    Tensor* param = model.params_.find(name);
    if (!param)
      throw DataError("checkpoint: unexpected tensor '" + name + "'");
    if (param->shape() != tensor.shape())
      throw DataError("checkpoint: tensor '" + name + "' has shape " +
                      shape_str(tensor.shape()) + ", model expects " +
                      shape_str(param->shape()));
    param->data() = tensor.data();
    ++used;
  }
  if (used != model.params_.count())
    throw DataError("checkpoint: has " + std::to_string(used) +
                    " model tensors, model expects " +
                    std::to_string(model.params_.count()));
  return model;
}

Tensor SeqGenModel::query_embeddings() const {
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(vocab_.total_size()));
  for (const auto& sentence : prompt_sentences_)
    rows.push_back(text_->encode(sentence));
  for (int s = 0; s < 3; ++s) rows.push_back(slice_rows(special_emb_, s, 1));
  return concat_rows(rows);
}

Tensor SeqGenModel::project_visual(const Tensor& visual) const {
  if (visual.rank() != 2 || visual.dim(1) != spec_.visual_input_width())
    throw ShapeError("decode_forward: visual tokens " +
                     shape_str(visual.shape()) + " do not match model width " +
                     std::to_string(spec_.visual_input_width()));
  if (!has_proj_) return visual;
  return add_rowvec(matmul(visual, proj_w_), proj_b_);
}

DecoderOutput SeqGenModel::decode_forward(const TokenSeq& inputs,
                                          const Tensor& visual) const {
  const int len = static_cast<int>(inputs.size());
  if (len < 1) throw ShapeError("decode_forward: empty input sequence");
  if (len > spec_.max_seq())
    throw ShapeError("decode_forward: length " + std::to_string(len) +
                     " exceeds configured max M+2=" +
                     std::to_string(spec_.max_seq()));
  for (int t : inputs)
    if (t < 0 || t >= vocab_.total_size())
      throw DataError("decode_forward: token " + std::to_string(t) +
                      " outside vocabulary");

  Tensor queries = query_embeddings();
  Tensor x = add(gather_rows(queries, inputs), slice_rows(dec_pos_, 0, len));
  const MaskMatrix mask = build_mask(mask_, inputs, vocab_);
  Tensor vis = project_visual(visual);

  DecoderOutput out;
  for (const Layer& layer : layers_) {
    MhaResult self = multi_head_attention(x, x, layer.self_attn,
                                          spec_.dec.heads, &mask);
    x = residual_norm(x, self.output, layer.ln1);
    MhaResult cross = multi_head_attention(x, vis, layer.cross_attn,
                                           spec_.dec.heads, nullptr);
    x = residual_norm(x, cross.output, layer.ln2);
    x = residual_norm(x, ffn_forward(x, layer.ffn), layer.ln3);
    out.self_attn.push_back(self.attn_mean);
    out.cross_attn.push_back(cross.attn_mean);
  }
  out.log_probs = log_softmax(add_rowvec(matmul(x, out_w_), out_b_), 1);
  return out;
}

TeacherForced SeqGenModel::teacher_forced_logits(const TokenSeq& gt_sequence,
                                                 const Tensor& visual) const {
  if (gt_sequence.size() < 2)
    throw DataError("teacher_forced_logits: sequence too short");
  if (gt_sequence.front() != vocab_.bos())
    throw DataError("teacher_forced_logits: sequence lacking BOS");
  TeacherForced tf;
  TokenSeq inputs(gt_sequence.begin(), gt_sequence.end() - 1);
  tf.targets.assign(gt_sequence.begin() + 1, gt_sequence.end());
  tf.out = decode_forward(inputs, visual);
  return tf;
}

Tensor SeqGenModel::visual_from_image(const Image& img) const {
  if (!vis_)
    throw ConfigError("model has no image frontend; supply feature blobs");
  return vis_->encode(img);
}

// ---------------------------------------------------------------------------
// SQPR container
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'S', 'Q', 'P', 'R'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), 4);
}

uint32_t take_u32(const std::vector<char>& bytes, size_t& off,
                  const std::string& path) {
  if (off + 4 > bytes.size())
    throw DataError("checkpoint: truncated at offset " + std::to_string(off) +
                    " in " + path);
  uint32_t v;
  std::memcpy(&v, bytes.data() + off, 4);
  off += 4;
  return v;
}
}  // namespace

void write_sqpr(const std::string& path, const json& config,
                const std::vector<std::pair<std::string, Tensor>>& tensors) {
  const std::string dtype = config.value("payload_dtype", "f32");
  if (dtype != "f32" && dtype != "f64")
    throw ConfigError("checkpoint: unknown payload_dtype '" + dtype + "'");

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string blob = config.dump();
  put_u32(out, static_cast<uint32_t>(blob.size()));
  out += blob;
  for (const auto& [name, tensor] : tensors) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(tensor.rank()));
    for (int d : tensor.shape()) put_u32(out, static_cast<uint32_t>(d));
    if (dtype == "f32") {
      for (double v : tensor.data()) {
        float f = static_cast<float>(v);
        out.append(reinterpret_cast<const char*>(&f), 4);
      }
    } else {
      out.append(reinterpret_cast<const char*>(tensor.data().data()),
                 tensor.data().size() * 8);
    }
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("checkpoint: cannot write " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

SqprFile read_sqpr(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("checkpoint: cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(file)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic at offset 0 in " + path);
  size_t off = 4;
  const uint32_t version = take_u32(bytes, off, path);
  if (version != kVersion)
    throw DataError("checkpoint: unsupported version " +
                    std::to_string(version) + " in " + path);
  const uint32_t blob_len = take_u32(bytes, off, path);
  if (off + blob_len > bytes.size())
    throw DataError("checkpoint: truncated config blob at offset " +
                    std::to_string(off) + " in " + path);
  SqprFile out;
  try {
    out.config = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                             bytes.begin() +
                                 static_cast<std::ptrdiff_t>(off + blob_len));
  } catch (const json::exception& e) {
    throw DataError("checkpoint: invalid config blob in " + path + ": " +
                    e.what());
  }
  off += blob_len;
  const std::string dtype = out.config.value("payload_dtype", "f32");
  const size_t word = dtype == "f64" ? 8 : 4;

  while (off < bytes.size()) {
    const uint32_t name_len = take_u32(bytes, off, path);
    if (off + name_len > bytes.size())
      throw DataError("checkpoint: truncated tensor name at offset " +
                      std::to_string(off) + " in " + path);
    std::string name(bytes.data() + off, name_len);
    off += name_len;
    const uint32_t rank = take_u32(bytes, off, path);
    std::vector<int> shape;
    int64_t count = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      int d = static_cast<int>(take_u32(bytes, off, path));
      shape.push_back(d);
      count *= d;
    }
    if (off + static_cast<size_t>(count) * word > bytes.size())
      throw DataError("checkpoint: truncated payload of '" + name +
                      "' at offset " + std::to_string(off) + " in " + path);
    std::vector<double> data(static_cast<size_t>(count));
    if (word == 4) {
      for (int64_t i = 0; i < count; ++i) {
        float f;
        std::memcpy(&f, bytes.data() + off + static_cast<size_t>(i) * 4, 4);
        data[static_cast<size_t>(i)] = static_cast<double>(f);
      }
    } else {
      std::memcpy(data.data(), bytes.data() + off,
                  static_cast<size_t>(count) * 8);
    }
    off += static_cast<size_t>(count) * word;
    out.tensors.emplace_back(std::move(name),
                             Tensor::from(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace seqattr
