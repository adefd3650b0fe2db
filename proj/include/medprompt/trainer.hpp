#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "medprompt/adam.hpp"
#include "medprompt/checkpoint.hpp"
#include "medprompt/losses.hpp"
#include "medprompt/model.hpp"
#include "medprompt/phantom.hpp"

// Training loop, evaluation, and the ablation runner. All randomness is
// counter-based: every epoch permutation and every step's augmentation/mixup
// draws are derived from (master_seed, stream, counter), so resuming from a
// saved step counter reproduces the uninterrupted run exactly.

namespace medprompt {

struct TrainConfig {
  Index epochs = 30;
  double lr = 1e-4;
  Index batch_size = 1;
  double lambda = 0.4;          // SSIM term weight in the training objective
  Index eval_interval = 1;      // run the held-out evaluation every k epochs
  uint64_t master_seed = 1;
  AblationFlags ablation;
  ModelConfig model;
  PhantomSpec phantom;
  Index n_train = 200;
  Index n_test = 40;
  double mixup_prob = 0.5;      // chance a step blends in a second sample
  double mixup_alpha = 0.2;
};

inline void validate(const TrainConfig& cfg) {
  check(cfg.epochs >= 1, "train config: epochs must be >= 1, got ", cfg.epochs);
  check(cfg.lr > 0.0, "train config: learning rate must be positive, got ", cfg.lr);
  check(cfg.batch_size == 1, "train config: only batch size 1 is supported, got ",
        cfg.batch_size);
  check(cfg.lambda >= 0.0, "train config: lambda must be >= 0, got ", cfg.lambda);
  check(cfg.eval_interval >= 1, "train config: eval interval must be >= 1");
  check(cfg.mixup_prob >= 0.0 && cfg.mixup_prob <= 1.0,
        "train config: mixup probability outside [0, 1]");
  check(cfg.mixup_alpha > 0.0, "train config: mixup alpha must be positive");
  validate(cfg.model);
  cfg.phantom.validate();
}

struct StepRecord {
  double loss = 0;
  double grad_norm = 0;
};

/// One optimization step on a prepared sample: forward, loss, backward, Adam
/// update, gradient clear. Aborts on a non-finite loss or gradient.
template <typename Scalar>
StepRecord train_step(Model<Scalar>& model, const PairedSample<Scalar>& sample,
                      Adam<Scalar>& opt, Scalar lambda) {
  check(sample.input.shape() == sample.target.shape(),
        "train_step: input/target shape mismatch for ", sample.id);
  Tape<Scalar> tape;
  Value<Scalar> pred = model.forward(&tape, sample.input);
  Value<Scalar> loss = total_loss(&tape, pred, Value<Scalar>{sample.target, -1}, lambda);
  const double loss_value = static_cast<double>(loss.data.item());
  check(std::isfinite(loss_value), "non-finite loss on sample ", sample.id);
  tape.backward(loss);

  double sq_norm = 0;
  for (const Parameter<Scalar>* p : model.parameters())
    sq_norm += p->grad.array().template cast<double>().square().sum();
  check(std::isfinite(sq_norm), "non-finite gradient on sample ", sample.id);

  opt.step();
  model.zero_grad();
  return {loss_value, std::sqrt(sq_norm)};
}

/// Evaluates an arbitrary translate function on a held-out split, averaging
/// PSNR/SSIM/MAE per direction. Pure: no parameters move, nothing is taped.
template <typename Scalar, typename TranslateFn>
EvalReport evaluate_with(TranslateFn&& translate, const std::vector<PairedSample<Scalar>>& split) {
  check(!split.empty(), "evaluate: empty split");
  Metrics sum_a2b, sum_b2a;
  Index n_a2b = 0, n_b2a = 0;
  for (const PairedSample<Scalar>& s : split) {
    Tensor<Scalar> pred = translate(s.input);
    const Metrics m = compute_metrics(pred, s.target);
    Metrics& sum = s.direction == Direction::AtoB ? sum_a2b : sum_b2a;
    Index& n = s.direction == Direction::AtoB ? n_a2b : n_b2a;
    sum.psnr += m.psnr;
    sum.ssim += m.ssim;
    sum.mae += m.mae;
    ++n;
  }
  check(n_a2b > 0 && n_b2a > 0, "evaluate: split must cover both directions, got ", n_a2b,
        " a2b and ", n_b2a, " b2a samples");
  EvalReport report;
  report.a2b = {sum_a2b.psnr / n_a2b, sum_a2b.ssim / n_a2b, sum_a2b.mae / n_a2b};
  report.b2a = {sum_b2a.psnr / n_b2a, sum_b2a.ssim / n_b2a, sum_b2a.mae / n_b2a};
  report.n_samples = n_a2b;
  return report;
}

template <typename Scalar>
EvalReport evaluate(Model<Scalar>& model, const std::vector<PairedSample<Scalar>>& split) {
  return evaluate_with([&](const Tensor<Scalar>& x) { return model.translate(x); }, split);
}

/// The quality floor every trained model must beat: echo the input unchanged.
template <typename Scalar>
EvalReport input_copy_baseline(const std::vector<PairedSample<Scalar>>& split) {
  return evaluate_with([](const Tensor<Scalar>& x) { return x; }, split);
}

/// Drives single-sample steps over a fixed training split. The schedule is a
/// pure function of the global step counter: epoch = step / split size,
/// position = step % split size indexes that epoch's seeded permutation, and
/// all augmentation/mixup draws come from the step's derived seed.
template <typename Scalar>
class Trainer {
 public:
  Trainer(Model<Scalar>& model, Adam<Scalar>& opt,
          const std::vector<PairedSample<Scalar>>* train_split, const TrainConfig& cfg)
      : model_(model), opt_(opt), train_(train_split), cfg_(cfg) {
    check(train_ != nullptr && !train_->empty(), "trainer: empty training split");
    for (size_t i = 0; i < train_->size(); ++i) {
      auto& pool =
          (*train_)[i].direction == Direction::AtoB ? same_dir_a2b_ : same_dir_b2a_;
      pool.push_back(static_cast<Index>(i));
    }
  }

  Index steps_per_epoch() const { return static_cast<Index>(train_->size()); }
  uint64_t global_step() const { return global_step_; }
  void set_global_step(uint64_t s) { global_step_ = s; }

  /// Epoch index the next step belongs to.
  Index current_epoch() const {
    return static_cast<Index>(global_step_ / static_cast<uint64_t>(steps_per_epoch()));
  }

  StepRecord step_once() {
    const Index epoch = current_epoch();
    const Index pos = static_cast<Index>(
        global_step_ % static_cast<uint64_t>(steps_per_epoch()));
    PairedSample<Scalar> sample = prepare_sample(epoch, pos);
    StepRecord rec;
    try {
      rec = train_step(model_, sample, opt_, Scalar(cfg_.lambda));
    } catch (const TensorError& e) {
      fail("step ", global_step_, ": ", e.what());
    }
    ++global_step_;
    return rec;
  }

  /// The epoch's visit order, derived from (master seed, epoch).
  std::vector<Index> epoch_permutation(Index epoch) const {
    std::vector<Index> perm(train_->size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Index>(i);
    Rng rng(derive_seed(cfg_.master_seed, kStreamEpochPerm, static_cast<uint64_t>(epoch)));
    for (Index i = static_cast<Index>(perm.size()) - 1; i > 0; --i)
      std::swap(perm[static_cast<size_t>(i)],
                perm[static_cast<size_t>(rng.uniform_int(0, i))]);
    return perm;
  }

  /// Augmented (and possibly mixup-blended) sample for one step. Draw order
  /// from the step seed is fixed: mixup decision, partner index, blend
  /// weight; augmentation seeds are derived sub-streams.
  PairedSample<Scalar> prepare_sample(Index epoch, Index pos) const {
    const std::vector<Index> perm = epoch_permutation(epoch);
    const PairedSample<Scalar>& primary = (*train_)[static_cast<size_t>(
        perm[static_cast<size_t>(pos)])];
    const uint64_t step_seed =
        derive_seed(cfg_.master_seed, kStreamStep,
                    static_cast<uint64_t>(epoch) * static_cast<uint64_t>(steps_per_epoch()) +
                        static_cast<uint64_t>(pos));
    Rng draws(derive_seed(step_seed, 0));
    const bool do_mixup = draws.bernoulli(cfg_.mixup_prob);
    PairedSample<Scalar> out = augment(primary, derive_seed(step_seed, 1));
    if (do_mixup) {
      const auto& pool =
          primary.direction == Direction::AtoB ? same_dir_a2b_ : same_dir_b2a_;
      const Index j = pool[static_cast<size_t>(
          draws.uniform_int(0, static_cast<Index>(pool.size()) - 1))];
      const double m = draws.beta(cfg_.mixup_alpha, cfg_.mixup_alpha);
      PairedSample<Scalar> partner =
          augment((*train_)[static_cast<size_t>(j)], derive_seed(step_seed, 2));
      out = mixup_with(out, partner, m);
    }
    return out;
  }

 private:
  Model<Scalar>& model_;
  Adam<Scalar>& opt_;
  const std::vector<PairedSample<Scalar>>* train_;
  const TrainConfig& cfg_;
  std::vector<Index> same_dir_a2b_, same_dir_b2a_;
  uint64_t global_step_ = 0;
};

struct EpochRecord {
  Index epoch = 0;
  double train_loss = 0;  // mean step loss over the epoch
  bool evaluated = false;
  EvalReport eval;
};

struct TrainResult {
  std::vector<EpochRecord> history;  // one row per epoch trained
  EvalReport initial_eval;           // held-out quality before any update
  EvalReport final_eval;             // held-out quality after the last epoch
  std::string log;                   // "epoch,step,loss,grad_norm" + eval rows
  uint64_t steps = 0;
};

namespace detail {

inline void append_eval_rows(std::string& log, Index epoch, const EvalReport& r) {
  log += str_cat("eval,", epoch, ",a2b,", format_exact(r.a2b.psnr), ",",
                 format_exact(r.a2b.ssim), ",", format_exact(r.a2b.mae), "\n");
  log += str_cat("eval,", epoch, ",b2a,", format_exact(r.b2a.psnr), ",",
                 format_exact(r.b2a.ssim), ",", format_exact(r.b2a.mae), "\n");
}

}  // namespace detail

/// Runs cfg.epochs epochs (starting from the trainer's current step) with an
/// initial held-out evaluation and one every cfg.eval_interval epochs.
/// on_epoch, when set, observes each completed epoch's record.
template <typename Scalar>
TrainResult train_loop(Trainer<Scalar>& trainer, Model<Scalar>& model,
                       const std::vector<PairedSample<Scalar>>& test, const TrainConfig& cfg,
                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(cfg);
  TrainResult result;
  result.initial_eval = evaluate(model, test);
  detail::append_eval_rows(result.log, trainer.current_epoch(), result.initial_eval);
  result.final_eval = result.initial_eval;

  const Index steps_per_epoch = trainer.steps_per_epoch();
  while (trainer.current_epoch() < cfg.epochs) {
    const Index epoch = trainer.current_epoch();
    double loss_sum = 0;
    for (Index pos = 0; pos < steps_per_epoch; ++pos) {
      const uint64_t step = trainer.global_step();
      const StepRecord rec = trainer.step_once();
      loss_sum += rec.loss;
      result.log += str_cat(epoch, ",", step, ",", format_exact(rec.loss), ",",
                            format_exact(rec.grad_norm), "\n");
      ++result.steps;
    }
    EpochRecord row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    const bool last_epoch = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_interval == 0 || last_epoch) {
      row.evaluated = true;
      row.eval = evaluate(model, test);
      detail::append_eval_rows(result.log, epoch + 1, row.eval);
      result.final_eval = row.eval;
    }
    if (on_epoch) on_epoch(row);
    result.history.push_back(row);
  }
  return result;
}

/// Everything a full training run owns. Model and optimizer live behind
/// unique_ptr so the Adam's parameter pointers stay valid.
template <typename Scalar>
struct TrainingRun {
  TrainConfig cfg;
  Dataset<Scalar> data;
  std::unique_ptr<Model<Scalar>> model;
  std::unique_ptr<Adam<Scalar>> opt;
  TrainResult result;
};

template <typename Scalar>
TrainingRun<Scalar> run_training(const TrainConfig& cfg,
                                 const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(cfg);
  tune_allocator();
  TrainingRun<Scalar> run;
  run.cfg = cfg;
  run.data = make_dataset<Scalar>(cfg.n_train, cfg.n_test, cfg.phantom, cfg.master_seed);
  run.model = std::make_unique<Model<Scalar>>(cfg.model, cfg.ablation,
                                              derive_seed(cfg.master_seed, kStreamInit));
  AdamConfig<Scalar> adam_cfg;
  adam_cfg.lr = Scalar(cfg.lr);
  run.opt = std::make_unique<Adam<Scalar>>(run.model->parameters(), adam_cfg);
  Trainer<Scalar> trainer(*run.model, *run.opt, &run.data.train, cfg);
  run.result = train_loop(trainer, *run.model, run.data.test, cfg, on_epoch);
  return run;
}

// ---------------------------------------------------------------------------
// Ablation runner: trains every variant on the same seed set and reports the
// per-direction median of each metric.

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v{"full", "no_peb", "no_pfb", "no_transformer"};
  return v;
}

struct AblationRow {
  std::string variant;
  Metrics a2b, b2a;  // medians across seeds
};

inline double median(std::vector<double> v) {
  check(!v.empty(), "median: empty input");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline Metrics median_metrics(const std::vector<Metrics>& ms) {
  std::vector<double> psnr, ssim, mae;
  for (const Metrics& m : ms) {
    psnr.push_back(m.psnr);
    ssim.push_back(m.ssim);
    mae.push_back(m.mae);
  }
  return {median(psnr), median(ssim), median(mae)};
}

}  // namespace detail

template <typename Scalar>
std::vector<AblationRow> run_ablation(const TrainConfig& base,
                                      const std::vector<uint64_t>& seeds = {1, 2, 3}) {
  check(!seeds.empty(), "ablation: need at least one seed");
  std::vector<AblationRow> rows;
  for (const std::string& variant : ablation_variants()) {
    std::vector<Metrics> a2b, b2a;
    for (uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.ablation = ablation_from_name(variant);
      cfg.master_seed = seed;
      TrainingRun<Scalar> run = run_training<Scalar>(cfg);
      a2b.push_back(run.result.final_eval.a2b);
      b2a.push_back(run.result.final_eval.b2a);
    }
    rows.push_back({variant, detail::median_metrics(a2b), detail::median_metrics(b2a)});
  }
  return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "variant         dir  psnr_db   ssim     mae\n";
  for (const AblationRow& r : rows) {
    char name[32];
    std::snprintf(name, sizeof(name), "%-15s", r.variant.c_str());
    out += str_cat(name, " a2b  ", format_fixed(r.a2b.psnr, 4), "  ",
                   format_fixed(r.a2b.ssim, 4), "  ", format_fixed(r.a2b.mae, 4), "\n");
    out += str_cat(name, " b2a  ", format_fixed(r.b2a.psnr, 4), "  ",
                   format_fixed(r.b2a.ssim, 4), "  ", format_fixed(r.b2a.mae, 4), "\n");
  }
  return out;
}

/// Plain-text dataset listing: one "<id> <direction>" line per sample.
template <typename Scalar>
std::string manifest_text(const Dataset<Scalar>& ds) {
  std::string out;
  for (const auto& s : ds.train) out += str_cat(s.id, " ", direction_name(s.direction), "\n");
  for (const auto& s : ds.test) out += str_cat(s.id, " ", direction_name(s.direction), "\n");
  return out;
}

}  // namespace medprompt
