#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "medprompt/cli.hpp"
#include "medprompt/config.hpp"
#include "medprompt/tensor_io.hpp"
#include "medprompt/phantom.hpp"

using namespace medprompt;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

/// Runs the CLI in-process with stdout/stderr captured.
CliResult cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("medprompt");
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* saved_out = std::cout.rdbuf(out.rdbuf());
  auto* saved_err = std::cerr.rdbuf(err.rdbuf());
  CliResult r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(saved_out);
  std::cerr.rdbuf(saved_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Temp directory removed on scope exit.
struct TempDir {
  std::filesystem::path dir;
  explicit TempDir(const std::string& name)
      : dir(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(dir);
  }
  ~TempDir() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& name = "") const {
    return name.empty() ? dir.string() : (dir / name).string();
  }
};

const std::vector<std::string> kTinySets = {
    "--set", "epochs=1",
    "--set", "n_train=2",
    "--set", "n_test=2",
    "--set", "phantom.size=32",
    "--set", "model.base_channels=4",
    "--set", "model.num_blocks=1,1,1,1",
    "--set", "model.num_heads=1,1,2,2",
    "--set", "model.num_prompts=2",
    "--set", "model.prompt_base_size=4",
};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTinySets.begin(), kTinySets.end());
  return args;
}

}  // namespace

TEST_CASE("config text parses values, comments, and dotted keys") {
  RunConfig cfg;
  apply_config_text(cfg,
                    "# a comment\n"
                    "epochs = 7\n"
                    "lr=0.003   # trailing comment\n"
                    "\n"
                    "ablation=no_pfb\n"
                    "model.num_blocks = 2,2, 2 ,2\n"
                    "phantom.size=40\n"
                    "precision=f64\n");
  CHECK(cfg.train.epochs == 7);
  CHECK(cfg.train.lr == 0.003);
  CHECK(!cfg.train.ablation.use_pfb);
  CHECK(cfg.train.model.num_blocks[0] == 2);
  CHECK(cfg.train.model.num_blocks[3] == 2);
  CHECK(cfg.train.phantom.size == 40);
  CHECK(cfg.precision == "f64");
}

TEST_CASE("config rejects unknown keys and malformed values") {
  RunConfig cfg;
  CHECK_THROWS_AS(apply_config_text(cfg, "epohcs=3\n"), TensorError);
  CHECK_THROWS_AS(apply_config_text(cfg, "epochs=three\n"), TensorError);
  CHECK_THROWS_AS(apply_config_text(cfg, "epochs=3x\n"), TensorError);
  CHECK_THROWS_AS(apply_config_text(cfg, "model.num_blocks=1,2,3\n"), TensorError);
  CHECK_THROWS_AS(apply_config_text(cfg, "precision=f16\n"), TensorError);
  CHECK_THROWS_AS(apply_config_text(cfg, "ablation=no_everything\n"), TensorError);
  CHECK_THROWS_AS(apply_config_text(cfg, "just a line\n"), TensorError);
  CHECK_THROWS_AS(apply_config_override(cfg, "epochs"), TensorError);
}

TEST_CASE("overrides win over file values and echo round-trips") {
  RunConfig cfg;
  apply_config_text(cfg, "epochs=3\nlr=0.5\n");
  apply_config_override(cfg, "epochs=9");
  CHECK(cfg.train.epochs == 9);
  CHECK(cfg.train.lr == 0.5);

  cfg.train.lr = 1.0 / 3.0;  // not representable in short decimal
  cfg.train.mixup_alpha = 0.2;
  const std::string echo = effective_config_text(cfg);
  RunConfig back;
  apply_config_text(back, echo);
  CHECK(back.train.lr == cfg.train.lr);
  CHECK(back.train.epochs == 9);
  CHECK(effective_config_text(back) == echo);
}

TEST_CASE("usage errors exit 1 with no success output") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"train"}).code == 1);  // --out is required
  const CliResult bad_flag = cli({"train", "--out", "/tmp/x", "--bogus"});
  CHECK(bad_flag.code == 1);
  CHECK(bad_flag.out.empty());
  CHECK(!bad_flag.err.empty());
  const CliResult bad_set = cli({"train", "--out", "/tmp/x", "--set", "epohcs=1"});
  CHECK(bad_set.code == 1);
  CHECK(bad_set.err.find("config error") != std::string::npos);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("missing files exit 2 with the path in the message") {
  TempDir tmp("mp_cli_missing");
  const CliResult r =
      cli({"eval", "--checkpoint", tmp.path("nope.mpck"), "--out", tmp.path()});
  CHECK(r.code == 2);
  CHECK(r.err.find("nope.mpck") != std::string::npos);
  CHECK(r.out.empty());

  const CliResult r2 = cli({"train", "--config", tmp.path("nope.cfg"), "--out", tmp.path()});
  CHECK(r2.code == 1);  // unreadable config is a usage problem
  CHECK(r2.err.find("nope.cfg") != std::string::npos);
}

TEST_CASE("gradcheck subcommand reports a passing max relative error") {
  const CliResult r = cli({"gradcheck", "--elems", "1"});
  CHECK(r.code == 0);
  CHECK(r.out.find("max relative error") != std::string::npos);
  CHECK(r.out.find("passed") != std::string::npos);
}

TEST_CASE("train, eval, and translate compose into a working pipeline") {
  TempDir train_dir("mp_cli_train");
  const CliResult train = cli(with_tiny({"train", "--out", train_dir.path()}));
  CAPTURE(train.err);
  REQUIRE(train.code == 0);
  CHECK(train.out.find("checkpoint written") != std::string::npos);
  for (const char* name : {"effective.cfg", "manifest.txt", "train_log.csv", "model.mpck",
                           "eval_report.txt", "eval_report.csv"})
    CHECK(std::filesystem::exists(train_dir.path(name)));

  // The effective config is a parseable, complete echo.
  RunConfig echoed;
  apply_config_text(echoed, read_text_file(train_dir.path("effective.cfg")));
  CHECK(echoed.train.epochs == 1);
  CHECK(echoed.train.model.base_channels == 4);

  TempDir eval_dir("mp_cli_eval");
  const CliResult eval = cli(with_tiny({"eval", "--checkpoint", train_dir.path("model.mpck"),
                                        "--out", eval_dir.path()}));
  CAPTURE(eval.err);
  REQUIRE(eval.code == 0);
  const std::string csv = read_text_file(eval_dir.path("eval_report.csv"));
  CHECK(csv.find("direction,psnr,ssim,mae") == 0);
  CHECK(csv.find("a2b,") != std::string::npos);
  CHECK(csv.find("b2a,") != std::string::npos);

  // Translate a pgm exported from the same generator; dims must round-trip.
  TempDir tr_dir("mp_cli_translate");
  PhantomSpec spec;
  spec.size = 32;
  auto data = make_dataset<float>(2, 2, spec, 3);
  std::filesystem::create_directories(tr_dir.dir);
  save_pgm(data.test[0].input, tr_dir.path("input.pgm"));
  const CliResult tr = cli({"translate", "--checkpoint", train_dir.path("model.mpck"),
                            "--input", tr_dir.path("input.pgm"), "--out", tr_dir.path()});
  CAPTURE(tr.err);
  REQUIRE(tr.code == 0);
  auto out_pgm = load_pgm<float>(tr_dir.path("translated.pgm"));
  CHECK((out_pgm.shape() == Shape{1, 1, 32, 32}));
  auto out_mpt = load_tensor<float>(tr_dir.path("translated.mpt"));
  CHECK((out_mpt.shape() == Shape{1, 1, 32, 32}));
  CHECK(out_mpt.array().minCoeff() >= 0.0f);
  CHECK(out_mpt.array().maxCoeff() <= 1.0f);

  // A wrong-size input is a runtime failure, not a crash.
  save_pgm(Tensor<float>::zeros({1, 1, 30, 30}), tr_dir.path("odd.pgm"));
  const CliResult bad = cli({"translate", "--checkpoint", train_dir.path("model.mpck"),
                             "--input", tr_dir.path("odd.pgm"), "--out", tr_dir.path()});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("divisible by 8") != std::string::npos);
}

TEST_CASE("rerunning from the effective config reproduces the f64 log bit-exactly") {
  TempDir first("mp_cli_repro1"), second("mp_cli_repro2");
  auto args = with_tiny({"train", "--out", first.path()});
  args.insert(args.end(), {"--set", "precision=f64", "--set", "master_seed=5"});
  REQUIRE(cli(args).code == 0);

  const CliResult rerun = cli({"train", "--config", first.path("effective.cfg"), "--out",
                               second.path()});
  REQUIRE(rerun.code == 0);
  CHECK(read_text_file(first.path("train_log.csv")) ==
        read_text_file(second.path("train_log.csv")));
  CHECK(read_text_file(first.path("eval_report.csv")) ==
        read_text_file(second.path("eval_report.csv")));
}

TEST_CASE("ablate writes a four-variant table") {
  TempDir dir("mp_cli_ablate");
  auto args = with_tiny({"ablate", "--out", dir.path(), "--seeds", "1"});
  const CliResult r = cli(args);
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  const std::string table = read_text_file(dir.path("ablation.txt"));
  for (const char* variant : {"full", "no_peb", "no_pfb", "no_transformer"})
    CHECK(table.find(variant) != std::string::npos);
  const std::string csv = read_text_file(dir.path("ablation.csv"));
  CHECK(size_t(std::count(csv.begin(), csv.end(), '\n')) == 1 + 8);

  const CliResult bad_seeds = cli(with_tiny({"ablate", "--out", dir.path(), "--seeds", "a,b"}));
  CHECK(bad_seeds.code == 2);
}
