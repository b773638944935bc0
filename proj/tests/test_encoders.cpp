#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "seqattr/encoders.hpp"
#include "support/gradcheck.hpp"

using namespace seqattr;
namespace fs = std::filesystem;

namespace {

Image solid(int h, int w, int c, uint8_t value) {
  Image img;
  img.height = h;
  img.width = w;
  img.channels = c;
  img.pixels.assign(static_cast<size_t>(h) * w * c, value);
  return img;
}

VisualEncoderConfig tiny_cfg() {
  VisualEncoderConfig cfg;
  cfg.image_side = 4;
  cfg.patch_side = 2;
  cfg.channels = 1;
  cfg.d_model = 8;
  cfg.encoder_layers = 1;
  cfg.heads = 2;
  cfg.d_ff = 16;
  return cfg;
}

}  // namespace

TEST_CASE("pad_to_square pads right/bottom with black, top-left anchored") {
  Image tall = solid(200, 100, 3, 200);
  Image padded = pad_to_square_raw(tall);
  CHECK(padded.height == 200);
  CHECK(padded.width == 200);
  // original content intact, appended columns black
  CHECK(padded.at(0, 0, 0) == 200);
  CHECK(padded.at(199, 99, 2) == 200);
  CHECK(padded.at(0, 100, 0) == 0);
  CHECK(padded.at(199, 199, 2) == 0);

  Image square = solid(100, 100, 3, 55);
  Image out = pad_to_square(square, 32);
  CHECK(out.height == 32);
  CHECK(out.width == 32);
  for (uint8_t p : out.pixels) CHECK(p == 55);

  Image black = pad_to_square(solid(30, 50, 1, 0), 16);
  for (uint8_t p : black.pixels) CHECK(p == 0);

  CHECK_THROWS_AS(pad_to_square_raw(solid(0, 10, 3, 0)), DataError);
}

TEST_CASE("ppm round trip and error paths") {
  fs::path dir = fs::temp_directory_path() / "seqattr_enc_test";
  fs::create_directories(dir);
  Image img = solid(3, 5, 3, 10);
  img.pixels[0] = 200;
  std::string path = (dir / "img.ppm").string();
  save_ppm(img, path);
  Image back = load_ppm(path);
  CHECK(back.height == 3);
  CHECK(back.width == 5);
  CHECK(back.pixels == img.pixels);

  {
    std::ofstream bad(dir / "bad.ppm", std::ios::binary);
    bad << "P6\n5 3\n255\nxx";
  }
  CHECK_THROWS_AS(load_ppm((dir / "bad.ppm").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("patch_embed locality and constructed weights") {
  VisualEncoderConfig cfg = tiny_cfg();
  ParamStore params;
  Rng rng(5);
  VisualEncoder enc(cfg, params, "vis", rng);

  // zero image, zero bias -> zero tokens
  Tensor z = enc.patch_embed(solid(4, 4, 1, 0));
  CHECK(z.shape() == std::vector<int>{4, 8});
  for (double v : z.data()) CHECK(v == 0.0);

  // identity-like projection reproduces (normalised) pixel values
  {
    VisualEncoderConfig idc = tiny_cfg();
    idc.d_model = idc.patch_dim();  // 4
    idc.heads = 2;
    ParamStore ps;
    Rng r2(9);
    VisualEncoder ide(idc, ps, "vis", r2);
    Tensor& w = *ps.find("vis.patch.w");
    std::fill(w.data().begin(), w.data().end(), 0.0);
    for (int i = 0; i < idc.patch_dim(); ++i) w.mut(i, i) = 1.0;
    Image img = solid(4, 4, 1, 0);
    for (size_t i = 0; i < img.pixels.size(); ++i)
      img.pixels[i] = static_cast<uint8_t>(10 * i);
    Tensor t = ide.patch_embed(img);
    // patch (0,0) is pixels (0,0),(0,1),(1,0),(1,1)
    CHECK(t.at(0, 0) == doctest::Approx(img.at(0, 0, 0) / 255.0));
    CHECK(t.at(0, 1) == doctest::Approx(img.at(0, 1, 0) / 255.0));
    CHECK(t.at(0, 2) == doctest::Approx(img.at(1, 0, 0) / 255.0));
    CHECK(t.at(0, 3) == doctest::Approx(img.at(1, 1, 0) / 255.0));
  }

  // perturbing only patch (0,0) changes only token row 0
  Image a = solid(4, 4, 1, 100);
  Image b = a;
  b.pixels[0] = 101;  // inside patch (0,0)
  Tensor ta = enc.patch_embed(a);
  Tensor tb = enc.patch_embed(b);
  bool row0_changed = false;
  for (int j = 0; j < 8; ++j) row0_changed |= ta.at(0, j) != tb.at(0, j);
  CHECK(row0_changed);
  for (int i = 1; i < 4; ++i)
    for (int j = 0; j < 8; ++j) CHECK(ta.at(i, j) == tb.at(i, j));

  CHECK_THROWS_AS(enc.patch_embed(solid(5, 5, 1, 0)), ShapeError);
}

TEST_CASE("visual_encode passthrough, position sensitivity, determinism") {
  VisualEncoderConfig cfg = tiny_cfg();
  cfg.encoder_layers = 0;
  ParamStore params;
  Rng rng(13);
  VisualEncoder enc(cfg, params, "vis", rng);

  Rng drng(21);
  Tensor tokens = Tensor::uniform({4, 8}, drng, 1.0);
  Tensor out = enc.encode_tokens(tokens);
  CHECK(out.shape() == std::vector<int>{5, 8});
  const Tensor cls = params.get("vis.cls");
  const Tensor pos = params.get("vis.pos");
  for (int j = 0; j < 8; ++j)
    CHECK(out.at(0, j) == cls.at(0, j) + pos.at(0, j));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(out.at(i + 1, j) == tokens.at(i, j) + pos.at(i + 1, j));

  // with encoder layers, permuting patch rows changes the output
  VisualEncoderConfig cfg2 = tiny_cfg();
  ParamStore params2;
  Rng rng2(13);
  VisualEncoder enc2(cfg2, params2, "vis", rng2);
  std::vector<double> permuted = tokens.data();
  for (int j = 0; j < 8; ++j) std::swap(permuted[j], permuted[8 + j]);
  Tensor out_a = enc2.encode_tokens(tokens);
  Tensor out_b = enc2.encode_tokens(Tensor::from({4, 8}, permuted));
  bool changed = false;
  for (size_t i = 0; i < out_a.data().size(); ++i)
    changed |= out_a.data()[i] != out_b.data()[i];
  CHECK(changed);

  // same seed -> identical parameters -> identical outputs
  ParamStore params3;
  Rng rng3(13);
  VisualEncoder enc3(cfg2, params3, "vis", rng3);
  Tensor out_c = enc3.encode_tokens(tokens);
  CHECK(out_a.data() == out_c.data());

  // visual token count invariant
  VisualEncoderConfig big;
  big.image_side = 32;
  big.patch_side = 8;
  CHECK(big.num_patches() + 1 == 17);
}

TEST_CASE("text encoder mean pooling") {
  ParamStore params;
  Rng rng(31);
  TextEncoder text({"<unk>", "a", "x", "y"}, 4, params, "text", rng);
  const Tensor emb = params.get("text.word_emb");

  Tensor one = text.encode("a");
  for (int j = 0; j < 4; ++j) CHECK(one.at(0, j) == emb.at(1, j));

  Tensor twice = text.encode("a a");
  for (int j = 0; j < 4; ++j) CHECK(twice.at(0, j) == one.at(0, j));

  Tensor xy = text.encode("x y");
  for (int j = 0; j < 4; ++j)
    CHECK(xy.at(0, j) == doctest::Approx((emb.at(2, j) + emb.at(3, j)) / 2));

  // unknown words map to the <unk> row
  Tensor unk = text.encode("zzz");
  for (int j = 0; j < 4; ++j) CHECK(unk.at(0, j) == emb.at(0, j));

  CHECK_THROWS_AS(text.encode("   "), DataError);

  auto words = TextEncoder::build_word_list({"a b", "b c"});
  CHECK(words == std::vector<std::string>{"<unk>", "a", "b", "c"});
}

TEST_CASE("feature blob round trip and format errors") {
  fs::path dir = fs::temp_directory_path() / "seqattr_blob_test";
  fs::create_directories(dir);
  std::string path = (dir / "t.sqfb").string();

  // float32-resolution values survive the round trip bit-exactly
  Tensor t = Tensor::from({2, 3}, {1.0f, -2.5f, 0.0f, 3.25f, 1e-3f,
                                   static_cast<double>(1.7f)});
  for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  save_feature_blob(t, path);
  Tensor back = load_feature_blob(path);
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());

  // write-then-read-then-write is byte identical
  std::string path2 = (dir / "t2.sqfb").string();
  save_feature_blob(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);

  // truncation names expected vs actual byte counts
  {
    std::ofstream trunc(dir / "trunc.sqfb", std::ios::binary);
    trunc.write(b1.data(), static_cast<std::streamsize>(b1.size() - 4));
  }
  CHECK_THROWS_WITH_AS(load_feature_blob((dir / "trunc.sqfb").string()),
                       doctest::Contains("expected 40 bytes, got 36"),
                       DataError);

  {
    std::ofstream bad(dir / "bad.sqfb", std::ios::binary);
    bad << "NOPE" << std::string(16, '\0');
  }
  CHECK_THROWS_WITH_AS(load_feature_blob((dir / "bad.sqfb").string()),
                       doctest::Contains("bad magic"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("visual encoder gradients match finite differences") {
  VisualEncoderConfig cfg = tiny_cfg();
  ParamStore params;
  Rng rng(77);
  VisualEncoder enc(cfg, params, "vis", rng);
  Image img = solid(4, 4, 1, 0);
  Rng prng(3);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(prng.bounded(256));

  auto build = [&]() {
    Tensor out = enc.encode(img);
    // mean squared activation keeps the loss O(1) so FD noise stays small
    return scale(sum(mul(out, out)), 1.0 / out.size());
  };
  auto rep = seqattr::testing::gradient_check(
      params, [&]() { return build().item(); }, build);
  INFO("worst ", rep.worst_param, " analytic ", rep.analytic, " numeric ",
       rep.numeric);
  CHECK(rep.max_rel_error < 1e-4);
}
