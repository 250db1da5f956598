#pragma once

// Optimizer, learning-rate schedule, training loop, evaluation and the
// top-k sweep harness.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "care/checkpoint.hpp"
#include "care/config.hpp"
#include "care/corpus.hpp"
#include "care/errors.hpp"
#include "care/graph.hpp"
#include "care/metrics.hpp"
#include "care/model.hpp"
#include "care/rng.hpp"
#include "care/text.hpp"

namespace care {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void ensure(const ParamList& params) {
    if (m.size() == params.size()) return;
    if (!m.empty()) throw ContractError("Adam state does not match the parameter list");
    for (const auto& p : params) {
      m.emplace_back(p.tensor.size(), 0.0);
      v.emplace_back(p.tensor.size(), 0.0);
    }
  }
};

/// One bias-corrected Adam update from the gradients held by `params`.
/// Parameters without a gradient this step are updated with a zero gradient.
inline void adam_step(ParamList& params, AdamState& st, double lr) {
  st.ensure(params);
  for (const auto& p : params) {
    if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
      throw TrainingError("non-finite gradient in parameter '" + p.name + "' at step " + std::to_string(st.step + 1));
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto x = p.mutable_data();
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const double>();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + st.eps);
    }
  }
}

inline void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

/// d^-0.5 · min(step^-0.5, step · warmup^-1.5).
inline double noam_lr(std::size_t step, std::size_t d, std::size_t warmup) {
  if (step < 1) throw ContractError("noam_lr: step must be >= 1");
  if (warmup < 1) throw ContractError("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

// ---------------------------------------------------------------------------

/// Everything a run needs besides the model parameters.
struct TrainingData {
  Vocab vocab;
  CauseEffectGraph ceg;
  Stopwords stopwords;
  std::vector<DialogueExample> train_examples;
  std::vector<DialogueExample> valid_examples;
  std::vector<PreparedExample> train;
  std::vector<PreparedExample> valid;
};

inline std::vector<PreparedExample> prepare_all(const std::vector<DialogueExample>& examples, const Vocab& vocab,
                                                const CauseEffectGraph& ceg, const Stopwords& stopwords,
                                                const ModelConfig& cfg) {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(prepare_example(ex, vocab, ceg, stopwords, cfg));
  return out;
}

/// Most frequent label, ties broken by label id.
inline std::string majority_emotion(const std::vector<DialogueExample>& examples) {
  std::vector<std::size_t> counts(kEmotionLabels.size(), 0);
  for (const auto& ex : examples) ++counts[require_emotion_id(ex.emotion)];
  const auto best = std::max_element(counts.begin(), counts.end()) - counts.begin();
  return std::string(kEmotionLabels[static_cast<std::size_t>(best)]);
}

/// Loads corpus, splits, CEG and stopwords named by `cfg`; builds the vocabulary
/// from the training examples unless `vocab` is given.
inline TrainingData load_training_data(const RunConfig& cfg, const ModelConfig& model_cfg,
                                       std::optional<Vocab> vocab = std::nullopt) {
  if (!cfg.has("corpus")) throw ConfigError("corpus", "a training corpus path is required");
  if (!cfg.has("ceg")) throw ConfigError("ceg", "a cause-effect graph path is required");
  if (!std::filesystem::exists(cfg.text("corpus"))) throw ConfigError("corpus", "no such file " + cfg.text("corpus"));
  if (!std::filesystem::exists(cfg.text("ceg"))) throw ConfigError("ceg", "no such file " + cfg.text("ceg"));
  TrainingData data;
  const auto corpus = load_corpus(cfg.text("corpus"));
  data.train_examples = cfg.has("train_split") ? select(corpus, load_split(cfg.text("train_split"))) : corpus;
  if (data.train_examples.empty()) throw ConfigError("corpus", "training split is empty");
  const auto valid_corpus = cfg.has("valid_corpus") ? load_corpus(cfg.text("valid_corpus")) : corpus;
  if (cfg.has("valid_split")) {
    data.valid_examples = select(valid_corpus, load_split(cfg.text("valid_split")));
  } else if (cfg.has("valid_corpus")) {
    data.valid_examples = valid_corpus;
  }
  data.ceg = load_ceg(cfg.text("ceg"));
  data.stopwords = cfg.has("stopwords") ? Stopwords::load(cfg.text("stopwords")) : Stopwords();
  data.vocab = vocab ? std::move(*vocab) : build_vocab(data.train_examples, cfg.size("min_freq"));
  data.train = prepare_all(data.train_examples, data.vocab, data.ceg, data.stopwords, model_cfg);
  data.valid = prepare_all(data.valid_examples, data.vocab, data.ceg, data.stopwords, model_cfg);
  return data;
}

// ---------------------------------------------------------------------------

namespace streams {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t order = 2;
inline constexpr std::uint64_t step = 3;
inline constexpr std::uint64_t eval = 4;
inline constexpr std::uint64_t embeddings = 5;
}  // namespace streams

/// Teacher-forced perplexity through the inference path.
inline double perplexity(const CareModel& model, const std::vector<PreparedExample>& examples, std::uint64_t seed) {
  NoGradGuard no_grad;
  double nll = 0.0;
  std::size_t tokens = 0;
  const Rng base = Rng(seed).fork(streams::eval);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    Rng rng = base.fork(i);
    const auto out = forward_eval(model, examples[i], &rng);
    for (double v : out.diagnostics.token_nll) nll += v;
    tokens += out.diagnostics.token_nll.size();
  }
  return perplexity_from_nll(nll, tokens);
}

struct EvalReport {
  std::size_t examples = 0;
  double ppl = 0.0;
  double bleu3 = 0.0;
  double bleu4 = 0.0;
  std::vector<std::vector<std::string>> hypotheses;
};

/// PPL plus greedy-decoded BLEU-3/4 against the gold responses.
inline EvalReport evaluate(const CareModel& model, const Vocab& vocab, const std::vector<PreparedExample>& examples,
                           std::uint64_t seed) {
  if (examples.empty()) throw ContractError("evaluate: empty example set");
  EvalReport r;
  r.examples = examples.size();
  r.ppl = perplexity(model, examples, seed);
  std::vector<TokenSeq> refs;
  const Rng base = Rng(seed).fork(streams::eval);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    Rng rng = base.fork(i);
    GenerateOptions opts;
    opts.max_len = model.config.max_response;
    const auto g = generate(model, examples[i], rng, opts);
    r.hypotheses.push_back(vocab.decode(g.tokens));
    refs.push_back(vocab.decode(examples[i].response_ids));
  }
  r.bleu3 = bleu_n(r.hypotheses, refs, 3);
  r.bleu4 = bleu_n(r.hypotheses, refs, 4);
  return r;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::uint64_t seed = 0;
  std::size_t max_steps = 20000;
  std::size_t warmup = 4000;
  double lr_scale = 1.0;
  std::size_t batch_size = 16;
  bool bucket = false;
  TrainWeights weights;
  std::size_t kl_warmup = 0;
  std::size_t validate_every = 500;
  std::size_t patience = 3;
  std::size_t checkpoint_every = 1000;
  Precision precision = Precision::f32;
  std::filesystem::path out_dir;      // empty: no checkpoints
  std::filesystem::path metrics_log;  // empty: no log
  std::map<std::string, std::string> config_echo;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();  // copied into model checkpoints
  bool resume = false;  // continue from out_dir/state.json when present
};

inline TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions o;
  o.seed = cfg.size("seed");
  o.max_steps = cfg.size("max_steps");
  o.warmup = cfg.size("warmup");
  o.lr_scale = cfg.real("lr_scale");
  o.batch_size = cfg.size("batch_size");
  o.bucket = cfg.flag("bucket");
  o.weights.generation = cfg.real("weight_generation");
  o.weights.reasoning = cfg.real("weight_reasoning");
  o.kl_warmup = cfg.size("kl_warmup");
  o.validate_every = cfg.size("validate_every");
  o.patience = cfg.size("patience");
  o.checkpoint_every = cfg.size("checkpoint_every");
  o.precision = parse_precision(cfg.text("precision"));
  o.out_dir = cfg.text("out_dir");
  o.metrics_log = cfg.has("metrics_log") ? std::filesystem::path(cfg.text("metrics_log")) : o.out_dir / "metrics.jsonl";
  o.config_echo = cfg.values();
  return o;
}

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double loss_g = 0.0;
  double loss_r = 0.0;
  double kl_g = 0.0;
  double kl_c = 0.0;
  double recon = 0.0;
};

inline nlohmann::ordered_json to_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss_g"] = r.loss_g;
  j["loss_r"] = r.loss_r;
  j["kl_g"] = r.kl_g;
  j["kl_c"] = r.kl_c;
  j["recon"] = r.recon;
  return j;
}

struct TrainProgress {
  std::size_t step = 0;
  double best_valid_ppl = std::numeric_limits<double>::infinity();
  std::size_t bad_validations = 0;
  bool early_stopped = false;
};

struct TrainResult {
  std::vector<StepRecord> records;
  std::vector<std::pair<std::size_t, double>> validations;
  TrainProgress progress;
};

/// Example indices of the batch used at 1-based `step`. Each epoch reshuffles
/// from its own stream, so the schedule is a pure function of (seed, step).
inline std::vector<std::size_t> batch_for_step(const std::vector<PreparedExample>& data, std::size_t batch_size,
                                               bool bucket, std::uint64_t seed, std::size_t step) {
  const std::size_t per_epoch = (data.size() + batch_size - 1) / batch_size;
  const std::size_t epoch = (step - 1) / per_epoch;
  std::vector<std::vector<std::size_t>> contexts;
  contexts.reserve(data.size());
  for (const auto& ex : data) contexts.push_back(ex.context_ids);
  const auto batches = make_batches(contexts, batch_size, Rng(seed).fork(streams::order).fork(epoch), bucket);
  return batches[(step - 1) % per_epoch].indices;
}

inline void save_state(const std::filesystem::path& dir, const CareModel& model, const Vocab& vocab,
                       const AdamState& adam, const TrainProgress& progress, const TrainOptions& opts) {
  CheckpointMeta meta;
  meta.precision = Precision::f64;
  meta.seed = opts.seed;
  meta.step = progress.step;
  meta.vocab_hash = vocab.hash();
  meta.config_echo = opts.config_echo;
  meta.extra["adam_step"] = adam.step;
  meta.extra["best_valid_ppl"] = std::isfinite(progress.best_valid_ppl) ? nlohmann::ordered_json(progress.best_valid_ppl)
                                                                         : nlohmann::ordered_json(nullptr);
  meta.extra["bad_validations"] = progress.bad_validations;
  meta.extra["early_stopped"] = progress.early_stopped;
  const ParamList params = model.parameters();
  std::vector<TensorGroup> groups{parameter_group(params)};
  if (adam.m.size() == params.size()) {
    TensorGroup gm, gv;
    gm.prefix = "adam.m.";
    gv.prefix = "adam.v.";
    for (std::size_t i = 0; i < params.size(); ++i) {
      gm.tensors.emplace_back(params[i].name, adam.m[i]);
      gv.tensors.emplace_back(params[i].name, adam.v[i]);
      gm.shapes.push_back(params[i].tensor.shape());
      gv.shapes.push_back(params[i].tensor.shape());
    }
    groups.push_back(std::move(gm));
    groups.push_back(std::move(gv));
  }
  write_checkpoint(dir, "state", meta, model.config, groups);
}

/// Restores parameters, Adam moments and progress written by `save_state`.
inline TrainProgress load_state(const std::filesystem::path& dir, CareModel& model, const Vocab& vocab, AdamState& adam) {
  const LoadedCheckpoint ck = read_checkpoint(dir, "state");
  if (ck.meta.vocab_hash != vocab.hash()) throw ValidationError("resume state was written for a different vocabulary");
  ParamList params = model.parameters();
  assign_parameters(params, ck);
  adam = AdamState{};
  adam.step = ck.meta.extra.at("adam_step").get<std::size_t>();
  if (ck.tensors.count("adam.m." + params.front().name)) {
    for (const auto& p : params) {
      adam.m.push_back(ck.tensors.at("adam.m." + p.name));
      adam.v.push_back(ck.tensors.at("adam.v." + p.name));
    }
  }
  TrainProgress progress;
  progress.step = ck.meta.step;
  const auto& best = ck.meta.extra.at("best_valid_ppl");
  if (!best.is_null()) progress.best_valid_ppl = best.get<double>();
  progress.bad_validations = ck.meta.extra.at("bad_validations").get<std::size_t>();
  progress.early_stopped = ck.meta.extra.at("early_stopped").get<bool>();
  return progress;
}

using StepObserver = std::function<void(const StepRecord&)>;

/// Runs forward_train / backward / adam_step until `max_steps` or early stop.
/// Gradients are averaged over the examples of each batch.
inline TrainResult train(CareModel& model, const TrainingData& data, const TrainOptions& opts,
                         const StepObserver& observer = {}) {
  if (data.train.empty()) throw ContractError("train: no training examples");
  if (opts.batch_size == 0) throw ContractError("train: batch_size must be >= 1");
  ParamList params = model.parameters();
  AdamState adam;
  TrainResult result;
  if (opts.resume && !opts.out_dir.empty() && std::filesystem::exists(opts.out_dir / "state.json")) {
    result.progress = load_state(opts.out_dir, model, data.vocab, adam);
  }
  std::ofstream log;
  if (!opts.metrics_log.empty()) {
    if (opts.metrics_log.has_parent_path()) std::filesystem::create_directories(opts.metrics_log.parent_path());
    log.open(opts.metrics_log, (opts.resume && result.progress.step > 0) ? std::ios::app : std::ios::trunc);
    if (!log) throw Error("cannot write metrics log " + opts.metrics_log.string());
    log << std::setprecision(17);
  }
  auto checkpoint = [&] {
    if (opts.out_dir.empty()) return;
    CheckpointMeta meta;
    meta.precision = opts.precision;
    meta.seed = opts.seed;
    meta.step = result.progress.step;
    meta.config_echo = opts.config_echo;
    meta.extra = opts.extra;
    save_model(opts.out_dir, model, data.vocab, meta);
    save_state(opts.out_dir, model, data.vocab, adam, result.progress, opts);
  };

  const Rng step_base = Rng(opts.seed).fork(streams::step);
  while (result.progress.step < opts.max_steps && !result.progress.early_stopped) {
    const std::size_t step = result.progress.step + 1;
    const auto batch = batch_for_step(data.train, opts.batch_size, opts.bucket, opts.seed, step);
    TrainWeights w = opts.weights;
    if (opts.kl_warmup > 0) w.kl *= std::min(1.0, static_cast<double>(step) / static_cast<double>(opts.kl_warmup));
    zero_grads(params);
    StepRecord rec;
    rec.step = step;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (std::size_t idx : batch) {
      Rng rng = step_base.fork(step).fork(idx);
      const ForwardOutputs out = forward_train(model, data.train[idx], rng, w);
      if (!std::isfinite(out.total.item())) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " on training example " + std::to_string(idx));
      }
      backward(out.total, inv);
      rec.loss += out.total.item() * inv;
      rec.loss_g += out.loss_generation.item() * inv;
      rec.loss_r += out.loss_reasoning.item() * inv;
      rec.kl_g += out.diagnostics.kl_graph * inv;
      rec.kl_c += out.diagnostics.kl_context * inv;
      rec.recon += out.diagnostics.recon * inv;
    }
    rec.lr = noam_lr(step, model.config.d_model, opts.warmup) * opts.lr_scale;
    adam_step(params, adam, rec.lr);
    result.progress.step = step;
    result.records.push_back(rec);
    if (log.is_open()) log << to_json(rec).dump() << '\n' << std::flush;
    if (observer) observer(rec);

    if (opts.validate_every > 0 && step % opts.validate_every == 0 && !data.valid.empty()) {
      const double ppl = perplexity(model, data.valid, opts.seed);
      result.validations.emplace_back(step, ppl);
      if (log.is_open()) log << nlohmann::ordered_json{{"step", step}, {"valid_ppl", ppl}}.dump() << '\n' << std::flush;
      if (ppl < result.progress.best_valid_ppl) {
        result.progress.best_valid_ppl = ppl;
        result.progress.bad_validations = 0;
      } else if (++result.progress.bad_validations >= opts.patience && opts.patience > 0) {
        result.progress.early_stopped = true;
      }
    }
    if (opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0) checkpoint();
  }
  checkpoint();
  return result;
}

// ---------------------------------------------------------------------------

struct SweepPoint {
  std::size_t k = 0;
  double ppl = 0.0;
  double bleu3 = 0.0;
  double bleu4 = 0.0;
};

/// Trains a fresh model per k with identical seeds and reports validation metrics.
inline std::vector<SweepPoint> k_sweep(const std::vector<std::size_t>& ks, const ModelConfig& base,
                                       const TrainingData& data, TrainOptions opts) {
  opts.out_dir.clear();
  opts.metrics_log.clear();
  opts.resume = false;
  const auto& eval_set = data.valid.empty() ? data.train : data.valid;
  std::vector<SweepPoint> out;
  for (std::size_t k : ks) {
    ModelConfig cfg = base;
    cfg.top_k = k;
    Rng init_rng = Rng(opts.seed).fork(streams::init);
    CareModel model = CareModel::init(cfg, init_rng);
    train(model, data, opts);
    const EvalReport r = evaluate(model, data.vocab, eval_set, opts.seed);
    out.push_back({k, r.ppl, r.bleu3, r.bleu4});
  }
  return out;
}

/// "rises then drops", "increasing", "decreasing" or "flat" for a BLEU-4 series in k order.
inline std::string sweep_shape(const std::vector<SweepPoint>& pts) {
  if (pts.size() < 3) return "too few points";
  std::size_t best = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (pts[i].bleu4 > pts[best].bleu4) best = i;
  const bool flat = std::all_of(pts.begin(), pts.end(), [&](const SweepPoint& p) { return p.bleu4 == pts[0].bleu4; });
  if (flat) return "flat";
  if (best > 0 && best + 1 < pts.size()) return "rises then drops";
  return best == 0 ? "decreasing" : "increasing";
}

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "k,ppl,bleu3,bleu4\n";
  for (const auto& p : pts) os << p.k << ',' << p.ppl << ',' << p.bleu3 << ',' << p.bleu4 << '\n';
  return os.str();
}

}  // namespace care
