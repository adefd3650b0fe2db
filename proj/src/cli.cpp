#include "medprompt/cli.hpp"

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "medprompt/checkpoint.hpp"
#include "medprompt/config.hpp"
#include "medprompt/gradcheck.hpp"
#include "medprompt/losses.hpp"
#include "medprompt/tensor_io.hpp"
#include "medprompt/trainer.hpp"

namespace medprompt {

namespace {

struct CliArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string checkpoint;
  std::string input;
  std::string seeds = "1,2,3";
  int64_t gradcheck_elems = 2;
};

/// Resolves defaults -> config file -> --set overrides, in that order.
RunConfig resolve_config(const CliArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) apply_config_text(cfg, read_text_file(args.config_path));
  for (const std::string& assignment : args.sets) apply_config_override(cfg, assignment);
  return cfg;
}

std::string out_path(const CliArgs& args, const std::string& name) {
  return (std::filesystem::path(args.out_dir) / name).string();
}

void write_effective_config(const CliArgs& args, const RunConfig& cfg) {
  std::filesystem::create_directories(args.out_dir);
  write_text_file(out_path(args, "effective.cfg"), effective_config_text(cfg));
}

void print_epoch(const EpochRecord& row) {
  std::cerr << "epoch " << row.epoch << "  loss " << format_fixed(row.train_loss, 6);
  if (row.evaluated)
    std::cerr << "  psnr a2b " << format_fixed(row.eval.a2b.psnr, 2) << "  b2a "
              << format_fixed(row.eval.b2a.psnr, 2);
  std::cerr << "\n";
}

template <typename Scalar>
int train_with(const CliArgs& args, const RunConfig& cfg) {
  TrainingRun<Scalar> run = run_training<Scalar>(cfg.train, print_epoch);
  write_text_file(out_path(args, "manifest.txt"), manifest_text(run.data));
  write_text_file(out_path(args, "train_log.csv"), run.result.log);
  write_text_file(out_path(args, "eval_report.txt"), run.result.final_eval.to_text());
  write_text_file(out_path(args, "eval_report.csv"), run.result.final_eval.to_csv());
  save_checkpoint(out_path(args, "model.mpck"), *run.model, run.opt.get(),
                  run.result.steps, str_cat("counter-based master_seed=", cfg.train.master_seed));
  std::cout << "trained " << run.result.steps << " steps; checkpoint written to "
            << out_path(args, "model.mpck") << "\n"
            << run.result.final_eval.to_text();
  return 0;
}

int cmd_train(const CliArgs& args, const RunConfig& cfg) {
  validate(cfg.train);
  write_effective_config(args, cfg);
  return cfg.precision == "f64" ? train_with<double>(args, cfg) : train_with<float>(args, cfg);
}

template <typename Scalar>
int eval_with(const CliArgs& args, const RunConfig& cfg, const CheckpointHeader& header) {
  Model<Scalar> model(header.config, header.ablation, header.init_seed);
  load_checkpoint<Scalar>(args.checkpoint, model, nullptr);
  Dataset<Scalar> data = make_dataset<Scalar>(cfg.train.n_train, cfg.train.n_test,
                                              cfg.train.phantom, cfg.train.master_seed);
  EvalReport report = evaluate(model, data.test);
  write_text_file(out_path(args, "eval_report.txt"), report.to_text());
  write_text_file(out_path(args, "eval_report.csv"), report.to_csv());
  std::cout << report.to_text();
  return 0;
}

int cmd_eval(const CliArgs& args, RunConfig cfg) {
  const CheckpointHeader header = read_checkpoint_header(args.checkpoint);
  cfg.train.model = header.config;
  cfg.train.ablation = header.ablation;
  cfg.precision = header.dtype == dtype_tag_of<double>::value ? "f64" : "f32";
  write_effective_config(args, cfg);
  return cfg.precision == "f64" ? eval_with<double>(args, cfg, header)
                                : eval_with<float>(args, cfg, header);
}

template <typename Scalar>
int translate_with(const CliArgs& args, const CheckpointHeader& header) {
  Model<Scalar> model(header.config, header.ablation, header.init_seed);
  load_checkpoint<Scalar>(args.checkpoint, model, nullptr);

  const std::string ext = std::filesystem::path(args.input).extension().string();
  Tensor<Scalar> input = ext == ".pgm" ? load_pgm<Scalar>(args.input)
                                       : load_tensor<Scalar>(args.input);
  check(input.rank() == 4 && input.shape()[0] == 1 &&
            input.shape()[1] == header.config.in_channels,
        "translate: expected a [1x", header.config.in_channels,
        "xHxW] image, got ", shape_str(input.shape()));
  check(input.shape()[2] % 8 == 0 && input.shape()[3] % 8 == 0,
        "translate: image extents must be divisible by 8, got ", shape_str(input.shape()));

  Tensor<Scalar> output = model.translate(input);
  output.array() = output.array().min(Scalar(1)).max(Scalar(0));
  save_tensor(output, out_path(args, "translated.mpt"));
  save_pgm(output, out_path(args, "translated.pgm"));
  std::cout << "translated " << shape_str(input.shape()) << " image; outputs written to "
            << args.out_dir << "\n";
  return 0;
}

int cmd_translate(const CliArgs& args, RunConfig cfg) {
  const CheckpointHeader header = read_checkpoint_header(args.checkpoint);
  cfg.train.model = header.config;
  cfg.train.ablation = header.ablation;
  cfg.precision = header.dtype == dtype_tag_of<double>::value ? "f64" : "f32";
  write_effective_config(args, cfg);
  return cfg.precision == "f64" ? translate_with<double>(args, header)
                                : translate_with<float>(args, header);
}

/// Finite-difference check of the composite graph: the minimal model plus the
/// training objective, probing sampled elements of every parameter in f64.
int cmd_gradcheck(const CliArgs& args) {
  ModelConfig mc;
  mc.base_channels = 4;
  mc.num_blocks = {1, 1, 1, 1};
  mc.num_heads = {1, 1, 2, 2};
  mc.num_prompts = 2;
  mc.prompt_base_size = 4;
  Model<double> model(mc, AblationFlags{}, 7);

  Rng rng(99);
  Tensor<double> x = Tensor<double>::zeros({1, 1, 16, 16});
  Tensor<double> target = Tensor<double>::zeros({1, 1, 16, 16});
  for (Index i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(0.0, 1.0);
  for (Index i = 0; i < target.numel(); ++i) target.data()[i] = rng.uniform(0.0, 1.0);

  const GradCheckReport report = finite_diff_gradcheck<double>(
      model.parameters(),
      [&](Tape<double>* t) {
        Value<double> pred = model.forward(t, x);
        return total_loss(t, pred, Value<double>{target, -1}, 0.4);
      },
      3e-3, args.gradcheck_elems, 23);

  std::cout << "checked " << report.checked << " sampled parameter elements\n"
            << "max relative error: " << format_exact(report.max_rel_err) << "\n";
  if (!report.passed(1e-4)) {
    std::cerr << "gradcheck FAILED (tolerance 1e-4); worst: " << report.worst << "\n";
    return 2;
  }
  std::cout << "gradcheck passed (tolerance 1e-4)\n";
  return 0;
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::string rest = text;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string tok = comma == std::string::npos ? rest : rest.substr(0, comma);
    rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
    check(!tok.empty() && tok.find_first_not_of("0123456789") == std::string::npos,
          "seeds: expected a comma-separated integer list, got '", text, "'");
    seeds.push_back(std::stoull(tok));
  }
  check(!seeds.empty(), "seeds: empty list");
  return seeds;
}

template <typename Scalar>
int ablate_with(const CliArgs& args, const RunConfig& cfg) {
  const std::vector<uint64_t> seeds = parse_seed_list(args.seeds);
  std::cerr << "training " << ablation_variants().size() << " variants x " << seeds.size()
            << " seeds\n";
  const std::vector<AblationRow> rows = run_ablation<Scalar>(cfg.train, seeds);
  std::string csv = "variant,direction,psnr,ssim,mae\n";
  for (const AblationRow& r : rows) {
    csv += str_cat(r.variant, ",a2b,", format_exact(r.a2b.psnr), ",",
                   format_exact(r.a2b.ssim), ",", format_exact(r.a2b.mae), "\n");
    csv += str_cat(r.variant, ",b2a,", format_exact(r.b2a.psnr), ",",
                   format_exact(r.b2a.ssim), ",", format_exact(r.b2a.mae), "\n");
  }
  const std::string table = ablation_table(rows);
  write_text_file(out_path(args, "ablation.txt"), table);
  write_text_file(out_path(args, "ablation.csv"), csv);
  std::cout << table;
  return 0;
}

int cmd_ablate(const CliArgs& args, const RunConfig& cfg) {
  validate(cfg.train);
  write_effective_config(args, cfg);
  return cfg.precision == "f64" ? ablate_with<double>(args, cfg) : ablate_with<float>(args, cfg);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  tune_allocator();
  CLI::App app{"prompt-conditioned multi-task image-to-image translation"};
  app.require_subcommand(1);
  CliArgs args;

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", args.config_path, "config file (key=value lines)");
    cmd->add_option("--set", args.sets, "override, e.g. --set epochs=5 (repeatable)");
  };
  auto add_out_opt = [&](CLI::App* cmd) {
    cmd->add_option("--out", args.out_dir, "output directory")->required();
  };

  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_config_opts(train);
  add_out_opt(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a generated test split");
  add_config_opts(eval);
  add_out_opt(eval);
  eval->add_option("--checkpoint", args.checkpoint, "checkpoint to evaluate")->required();

  CLI::App* translate = app.add_subcommand("translate", "run one image through a checkpoint");
  add_out_opt(translate);
  translate->add_option("--checkpoint", args.checkpoint, "checkpoint to load")->required();
  translate->add_option("--input", args.input, "input image (.mpt or .pgm)")->required();

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of the minimal model");
  gradcheck->add_option("--elems", args.gradcheck_elems,
                        "sampled elements per parameter (default 2)");

  CLI::App* ablate = app.add_subcommand("ablate", "train all ablation variants and report medians");
  add_config_opts(ablate);
  add_out_opt(ablate);
  ablate->add_option("--seeds", args.seeds, "comma-separated seed list (default 1,2,3)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints help or the usage error
    return rc == 0 ? 0 : 1;
  }

  RunConfig cfg;
  try {
    cfg = resolve_config(args);
  } catch (const TensorError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (train->parsed()) return cmd_train(args, cfg);
    if (eval->parsed()) return cmd_eval(args, cfg);
    if (translate->parsed()) return cmd_translate(args, cfg);
    if (gradcheck->parsed()) return cmd_gradcheck(args);
    if (ablate->parsed()) return cmd_ablate(args, cfg);
    std::cerr << "no subcommand selected\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace medprompt
