#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "medprompt/checkpoint.hpp"
#include "medprompt/tensor_io.hpp"

using namespace medprompt;

namespace {

/// Self-cleaning temp file path.
struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name)
      : path((std::filesystem::temp_directory_path() / name).string()) {
    std::remove(path.c_str());
  }
  ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  REQUIRE(os.good());
  os.write(bytes.data(), std::streamsize(bytes.size()));
}

uint32_t u32_at(const std::string& s, size_t off) {
  uint32_t v;
  std::memcpy(&v, s.data() + off, 4);
  return v;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, uint64_t seed) {
  Rng rng(seed);
  Tensor<Scalar> t = Tensor<Scalar>::empty(shape);
  for (Index i = 0; i < t.numel(); ++i) t.data()[i] = Scalar(rng.uniform(-2.0, 2.0));
  return t;
}

bool throws_containing(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
  } catch (const TensorError& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.num_blocks = {1, 1, 1, 1};
  cfg.num_heads = {1, 1, 2, 2};
  cfg.num_prompts = 2;
  cfg.prompt_base_size = 4;
  return cfg;
}

}  // namespace

TEST_CASE("tensor files round-trip losslessly in both dtypes") {
  TempFile f32_file("mp_io_roundtrip.f32.mpt");
  auto tf = random_tensor<float>({2, 3, 5, 4}, 1);
  save_tensor(tf, f32_file.path);
  CHECK(bit_equal(load_tensor<float>(f32_file.path), tf));

  TempFile f64_file("mp_io_roundtrip.f64.mpt");
  auto td = random_tensor<double>({7}, 2);
  save_tensor(td, f64_file.path);
  CHECK(bit_equal(load_tensor<double>(f64_file.path), td));
}

TEST_CASE("tensor file layout is pinned byte by byte") {
  TempFile f("mp_io_layout.mpt");
  Tensor<double> t = Tensor<double>::zeros({2, 3});
  for (Index i = 0; i < 6; ++i) t.data()[i] = double(i) * 0.25;
  save_tensor(t, f.path);
  const std::string bytes = slurp(f.path);
  REQUIRE(bytes.size() == 4 + 4 + 4 + 2 * 4 + 1 + 6 * 8);
  CHECK(bytes.substr(0, 4) == "MPTF");
  CHECK(u32_at(bytes, 4) == kTensorFormatVersion);
  CHECK(u32_at(bytes, 8) == 2);   // rank
  CHECK(u32_at(bytes, 12) == 2);  // dims
  CHECK(u32_at(bytes, 16) == 3);
  CHECK(uint8_t(bytes[20]) == 2);  // f64 tag
  double payload[6];
  std::memcpy(payload, bytes.data() + 21, sizeof(payload));
  for (Index i = 0; i < 6; ++i) CHECK(payload[i] == double(i) * 0.25);
}

TEST_CASE("tensor file errors are distinct diagnostics") {
  TempFile f("mp_io_errors.mpt");
  auto t = random_tensor<float>({4, 4}, 3);
  save_tensor(t, f.path);
  const std::string good = slurp(f.path);

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    spit(f.path, bad);
    CHECK(throws_containing([&] { load_tensor<float>(f.path); }, "bad magic"));
  }
  SUBCASE("truncated payload") {
    spit(f.path, good.substr(0, good.size() - 5));
    CHECK(throws_containing([&] { load_tensor<float>(f.path); }, "truncated payload"));
  }
  SUBCASE("dimension overflow") {
    std::string bad = good;
    const uint32_t huge = 0xFFFFFFFFu;
    std::memcpy(bad.data() + 12, &huge, 4);
    std::memcpy(bad.data() + 16, &huge, 4);
    spit(f.path, bad);
    CHECK(throws_containing([&] { load_tensor<float>(f.path); }, "dimension overflow"));
  }
  SUBCASE("dtype mismatch") {
    CHECK(throws_containing([&] { load_tensor<double>(f.path); }, "dtype mismatch"));
  }
  SUBCASE("version mismatch") {
    std::string bad = good;
    const uint32_t v = 99;
    std::memcpy(bad.data() + 4, &v, 4);
    spit(f.path, bad);
    CHECK(throws_containing([&] { load_tensor<float>(f.path); }, "version mismatch"));
  }
  SUBCASE("missing file") {
    CHECK(throws_containing([&] { load_tensor<float>(f.path + ".nope"); }, "cannot open"));
  }
}

TEST_CASE("constant half image exports as pgm bytes of 128") {
  TempFile f("mp_io_half.pgm");
  Tensor<double> img = Tensor<double>::zeros({1, 1, 3, 5});
  img.array() = 0.5;
  save_pgm(img, f.path);
  const std::string bytes = slurp(f.path);
  const std::string header = "P5\n5 3\n255\n";
  REQUIRE(bytes.size() == header.size() + 15);
  CHECK(bytes.substr(0, header.size()) == header);
  for (size_t i = header.size(); i < bytes.size(); ++i) CHECK(uint8_t(bytes[i]) == 128);
}

TEST_CASE("pgm quantizes with rounding and clamps out-of-range values") {
  TempFile f("mp_io_quant.pgm");
  Tensor<float> img = Tensor<float>::zeros({1, 1, 1, 6});
  img.data()[0] = -0.5f;          // clamps to 0
  img.data()[1] = 0.0f;           // 0
  img.data()[2] = 0.1f;           // round(25.5) = 26
  img.data()[3] = 1.0f;           // 255
  img.data()[4] = 1.7f;           // clamps to 255
  img.data()[5] = 100.0f / 255.0f;  // exact byte 100
  save_pgm(img, f.path);
  auto back = load_pgm<float>(f.path);
  REQUIRE((back.shape() == Shape{1, 1, 1, 6}));
  CHECK(back.data()[0] == 0.0f);
  CHECK(back.data()[1] == 0.0f);
  CHECK(back.data()[2] == 26.0f / 255.0f);
  CHECK(back.data()[3] == 1.0f);
  CHECK(back.data()[4] == 1.0f);
  CHECK(back.data()[5] == 100.0f / 255.0f);
}

TEST_CASE("pgm reader handles comments and rejects malformed files") {
  TempFile f("mp_io_parse.pgm");
  SUBCASE("comment lines in the header") {
    spit(f.path, std::string("P5\n# a comment\n2 # trailing\n2\n255\n") +
                     std::string("\x00\x40\x80\xff", 4));
    auto img = load_pgm<double>(f.path);
    REQUIRE((img.shape() == Shape{1, 1, 2, 2}));
    CHECK(img.data()[0] == 0.0);
    CHECK(img.data()[3] == 1.0);
  }
  SUBCASE("bad magic") {
    spit(f.path, "P2\n2 2\n255\nabcd");
    CHECK(throws_containing([&] { load_pgm<double>(f.path); }, "bad magic"));
  }
  SUBCASE("truncated raster") {
    spit(f.path, std::string("P5\n4 4\n255\n") + "xyz");
    CHECK(throws_containing([&] { load_pgm<double>(f.path); }, "truncated payload"));
  }
  SUBCASE("oversized extents") {
    spit(f.path, "P5\n99999999 2\n255\n");
    CHECK(throws_containing([&] { load_pgm<double>(f.path); }, "dimension overflow"));
  }
}

TEST_CASE("rank-2 tensors export to pgm and reload as nchw") {
  TempFile f("mp_io_rank2.pgm");
  Tensor<double> img = Tensor<double>::zeros({2, 3});
  img.array() = 1.0;
  save_pgm(img, f.path);
  auto back = load_pgm<double>(f.path);
  CHECK((back.shape() == Shape{1, 1, 2, 3}));
  CHECK(back.array().minCoeff() == 1.0);
}

TEST_CASE("checkpoints restore parameters and optimizer state bit-exactly") {
  TempFile f("mp_io_ckpt.mpck");
  ModelConfig cfg = tiny_config();
  Model<double> source(cfg, AblationFlags{}, 11);
  Adam<double> opt(source.parameters(), AdamConfig<double>{});

  // Take two optimizer steps with synthetic gradients so m, v, and t are
  // non-trivial before saving.
  Rng rng(5);
  for (int step = 0; step < 2; ++step) {
    for (Parameter<double>* p : source.parameters())
      for (Index i = 0; i < p->grad.numel(); ++i) p->grad.data()[i] = rng.uniform(-1.0, 1.0);
    opt.step();
    source.zero_grad();
  }
  save_checkpoint(f.path, source, &opt, 2, "rng-state-blob");

  Model<double> target(cfg, AblationFlags{}, 99);
  Adam<double> target_opt(target.parameters(), AdamConfig<double>{});
  bool differs = false;
  for (size_t i = 0; i < source.parameters().size(); ++i)
    differs |= !bit_equal(source.parameters()[i]->value, target.parameters()[i]->value);
  CHECK(differs);  // different init seeds really produce different weights

  ResumeInfo info = load_checkpoint(f.path, target, &target_opt);
  CHECK(info.step == 2);
  CHECK(info.rng_state == "rng-state-blob");
  CHECK(info.had_optimizer);

  auto sp = source.parameters();
  auto tp = target.parameters();
  REQUIRE(sp.size() == tp.size());
  for (size_t i = 0; i < sp.size(); ++i) {
    CHECK(sp[i]->name == tp[i]->name);
    CHECK(bit_equal(sp[i]->value, tp[i]->value));
  }
  CHECK(target_opt.steps_taken() == 2);
  for (size_t i = 0; i < sp.size(); ++i) {
    CHECK(bit_equal(opt.m(i), target_opt.m(i)));
    CHECK(bit_equal(opt.v(i), target_opt.v(i)));
  }

  // Loading weights only (no optimizer) also works on an optimizer-less call.
  Model<double> weights_only(cfg, AblationFlags{}, 7);
  ResumeInfo info2 = load_checkpoint<double>(f.path, weights_only, nullptr);
  CHECK(info2.had_optimizer);
  CHECK(bit_equal(weights_only.parameters()[0]->value, sp[0]->value));
}

TEST_CASE("checkpoint header is readable without loading weights") {
  TempFile f("mp_io_ckpt_header.mpck");
  ModelConfig cfg = tiny_config();
  Model<float> model(cfg, ablation_from_name("no_pfb"), 3);
  save_checkpoint<float>(f.path, model, nullptr, 17, "state");
  CheckpointHeader h = read_checkpoint_header(f.path);
  CHECK(h.dtype == dtype_tag_of<float>::value);
  CHECK(h.config.base_channels == 4);
  CHECK(h.config.num_prompts == 2);
  CHECK(!h.ablation.use_pfb);
  CHECK(h.ablation.use_peb);
  CHECK(h.init_seed == 3);
  CHECK(h.step == 17);
  CHECK(h.rng_state == "state");
}

TEST_CASE("checkpoint errors are distinct diagnostics") {
  TempFile f("mp_io_ckpt_err.mpck");
  ModelConfig cfg = tiny_config();
  Model<double> model(cfg, AblationFlags{}, 1);
  save_checkpoint<double>(f.path, model, nullptr, 0, "s");

  SUBCASE("version mismatch") {
    std::string bad = slurp(f.path);
    const uint32_t v = 42;
    std::memcpy(bad.data() + 4, &v, 4);
    spit(f.path, bad);
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, model, nullptr); },
                            "version mismatch"));
  }
  SUBCASE("bad magic") {
    std::string bad = slurp(f.path);
    bad[1] = '?';
    spit(f.path, bad);
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, model, nullptr); },
                            "bad magic"));
  }
  SUBCASE("config mismatch on architecture") {
    ModelConfig other = cfg;
    other.num_prompts = 3;
    Model<double> mismatched(other, AblationFlags{}, 1);
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, mismatched, nullptr); },
                            "config mismatch"));
  }
  SUBCASE("config mismatch on ablation") {
    Model<double> mismatched(cfg, ablation_from_name("no_peb"), 1);
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, mismatched, nullptr); },
                            "config mismatch"));
  }
  SUBCASE("missing parameter name") {
    auto contents = read_checkpoint<double>(f.path);
    contents.params[0].first = "not/a/real/parameter";
    write_checkpoint(f.path, contents);
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, model, nullptr); },
                            "missing parameter"));
  }
  SUBCASE("payload size mismatch") {
    auto contents = read_checkpoint<double>(f.path);
    contents.params[0].second = Tensor<double>::zeros({1, 2, 3});
    write_checkpoint(f.path, contents);
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, model, nullptr); },
                            "payload size mismatch"));
  }
  SUBCASE("dtype mismatch") {
    CHECK(throws_containing([&] { read_checkpoint<float>(f.path); }, "dtype mismatch"));
  }
  SUBCASE("truncated parameter table") {
    std::string bad = slurp(f.path);
    spit(f.path, bad.substr(0, bad.size() / 2));
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, model, nullptr); },
                            "truncated payload"));
  }
  SUBCASE("optimizer state absent but requested") {
    Adam<double> opt(model.parameters(), AdamConfig<double>{});
    CHECK(throws_containing([&] { load_checkpoint<double>(f.path, model, &opt); },
                            "no optimizer state"));
  }
}
