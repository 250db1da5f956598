// care: train, generate, reason, eval, convert.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "care/checkpoint.hpp"
#include "care/config.hpp"
#include "care/convert.hpp"
#include "care/corpus.hpp"
#include "care/graph.hpp"
#include "care/metrics.hpp"
#include "care/model.hpp"
#include "care/train.hpp"

namespace fs = std::filesystem;

namespace {

/// Usage errors detected after argument parsing.
struct UsageError : care::Error {
  using care::Error::Error;
};

void print_header(const std::string& command, std::uint64_t seed, const std::string& body = {}) {
  std::cerr << "# care " << command << "\n# seed = " << seed << '\n';
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) std::cerr << "# " << line << '\n';
}

struct Inference {
  care::LoadedModel loaded;
  care::CauseEffectGraph ceg;
  care::Stopwords stopwords;
};

std::string echo_value(const care::CheckpointMeta& meta, const std::string& key) {
  auto it = meta.config_echo.find(key);
  return it == meta.config_echo.end() ? std::string() : it->second;
}

Inference load_inference(const std::string& checkpoint, const std::string& ceg_override, const std::string& stop_override) {
  Inference inf{care::load_model(checkpoint), {}, {}};
  const std::string ceg = ceg_override.empty() ? echo_value(inf.loaded.meta, "ceg") : ceg_override;
  if (ceg.empty()) throw UsageError("no cause-effect graph: pass --ceg");
  inf.ceg = care::load_ceg(ceg);
  const std::string sw = stop_override.empty() ? echo_value(inf.loaded.meta, "stopwords") : stop_override;
  inf.stopwords = sw.empty() ? care::Stopwords() : care::Stopwords::load(sw);
  return inf;
}

care::DialogueExample parse_context(const std::string& context_json, std::string emotion, const care::CheckpointMeta& meta,
                                    bool majority) {
  nlohmann::json ctx;
  try {
    ctx = nlohmann::json::parse(context_json);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("--context is not valid JSON: ") + e.what());
  }
  if (emotion.empty()) {
    if (!majority) throw UsageError("--emotion is required (or pass --majority-emotion)");
    emotion = meta.extra.value("majority_emotion", std::string());
    if (emotion.empty()) throw UsageError("checkpoint records no majority emotion");
  }
  care::require_emotion_id(emotion);
  nlohmann::json j{{"context", ctx}, {"emotion", emotion}, {"response", ""}};
  try {
    return care::parse_example(j);
  } catch (const care::ParseError& e) {
    throw UsageError(std::string("--context: ") + e.what());
  }
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed,
              bool resume) {
  care::RunConfig cfg = config_path.empty() ? care::RunConfig() : care::RunConfig::load(config_path);
  for (const auto& o : overrides) cfg.apply_override(o);
  if (seed) cfg.set("seed", std::to_string(*seed));
  cfg.validate();
  print_header("train", cfg.size("seed"), cfg.render());

  care::ModelConfig mcfg = cfg.model_config();
  care::TrainingData data = care::load_training_data(cfg, mcfg);
  mcfg.vocab_size = data.vocab.size();
  care::TrainOptions opts = care::train_options(cfg);
  opts.resume = resume;
  opts.extra["majority_emotion"] = care::majority_emotion(data.train_examples);

  care::Rng init_rng = care::Rng(opts.seed).fork(care::streams::init);
  std::optional<care::Tensor> pretrained;
  if (cfg.has("embeddings")) {
    care::Rng emb_rng = care::Rng(opts.seed).fork(care::streams::embeddings);
    auto imp = care::load_embeddings(cfg.text("embeddings"), data.vocab, mcfg.d_model, emb_rng);
    std::cerr << "# embedding coverage = " << imp.coverage << '\n';
    pretrained = imp.table;
  }
  care::CareModel model = care::CareModel::init(mcfg, init_rng, pretrained);
  std::cerr << "# vocab = " << data.vocab.size() << ", parameters = " << model.parameter_count()
            << ", train examples = " << data.train.size() << ", valid examples = " << data.valid.size() << '\n';

  const auto result = care::train(model, data, opts, [](const care::StepRecord& r) {
    if (r.step % 100 == 0 || r.step == 1) {
      std::cerr << "step " << r.step << " lr " << r.lr << " loss_g " << r.loss_g << " loss_r " << r.loss_r << '\n';
    }
  });
  std::cout << "finished at step " << result.progress.step << (result.progress.early_stopped ? " (early stop)" : "")
            << "; checkpoint in " << opts.out_dir.string() << '\n';
  return 0;
}

int cmd_generate(const std::string& checkpoint, const std::string& context, const std::string& emotion, bool majority,
                 std::optional<double> top_p, std::size_t max_len, bool show_relations, std::uint64_t seed,
                 const std::string& ceg, const std::string& stopwords) {
  print_header("generate", seed);
  Inference inf = load_inference(checkpoint, ceg, stopwords);
  const auto ex = parse_context(context, emotion, inf.loaded.meta, majority);
  const auto prepared = care::prepare_example(ex, inf.loaded.vocab, inf.ceg, inf.stopwords, inf.loaded.model.config);
  care::GenerateOptions opts;
  if (top_p) {
    if (!(*top_p > 0.0 && *top_p <= 1.0)) throw UsageError("--top-p must lie in (0, 1]");
    opts.strategy = care::DecodeStrategy::top_p;
    opts.top_p = *top_p;
  }
  opts.max_len = max_len;
  care::Rng rng(seed);
  const auto g = care::generate(inf.loaded.model, prepared, rng, opts);
  std::cout << care::join(inf.loaded.vocab.decode(g.tokens)) << '\n';
  if (show_relations) std::cout << care::relations_tsv(g.relations, prepared.graph.nodes);
  return 0;
}

int cmd_reason(const std::string& checkpoint, const std::string& context, const std::string& emotion, bool majority,
               std::uint64_t seed, const std::string& ceg, const std::string& stopwords) {
  print_header("reason", seed);
  Inference inf = load_inference(checkpoint, ceg, stopwords);
  const auto ex = parse_context(context, emotion, inf.loaded.meta, majority);
  const auto prepared = care::prepare_example(ex, inf.loaded.vocab, inf.ceg, inf.stopwords, inf.loaded.model.config);
  care::NoGradGuard no_grad;
  care::Rng rng = care::Rng(seed).fork(2);
  const auto encoded = care::encode_context(inf.loaded.model, prepared.context_ids, care::ForwardContext::inference());
  const auto relations = care::reason_prior(inf.loaded.model, prepared, encoded, &rng);
  std::cout << care::relations_tsv(relations, prepared.graph.nodes);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus, const std::string& split,
             const std::string& vocab_path, const std::string& csv_path, std::uint64_t seed, const std::string& ceg,
             const std::string& stopwords) {
  print_header("eval", seed);
  Inference inf = load_inference(checkpoint, ceg, stopwords);
  if (!vocab_path.empty()) {
    const auto expected = care::Vocab::load(vocab_path);
    if (expected.hash() != inf.loaded.meta.vocab_hash) {
      throw UsageError("vocabulary hash mismatch: " + vocab_path + " does not match the checkpoint");
    }
  }
  const std::string corpus_path = corpus.empty() ? echo_value(inf.loaded.meta, "corpus") : corpus;
  if (corpus_path.empty()) throw UsageError("no corpus: pass --corpus");
  auto examples = care::load_corpus(corpus_path);
  if (!split.empty()) examples = care::select(examples, care::load_split(split));
  const auto prepared = care::prepare_all(examples, inf.loaded.vocab, inf.ceg, inf.stopwords, inf.loaded.model.config);
  const auto r = care::evaluate(inf.loaded.model, inf.loaded.vocab, prepared, seed);

  const std::string name = split.empty() ? fs::path(corpus_path).stem().string() : fs::path(split).stem().string();
  std::ostringstream table;
  table << std::left << std::setw(16) << "split" << std::setw(10) << "examples" << std::setw(12) << "PPL"
        << std::setw(10) << "BLEU-3" << "BLEU-4\n";
  table << std::left << std::setw(16) << name << std::setw(10) << r.examples << std::setw(12) << std::fixed
        << std::setprecision(4) << r.ppl << std::setw(10) << r.bleu3 * 100 << r.bleu4 * 100 << '\n';
  table << "# BLEU scores in percent. " << care::kBleuSmoothingNote << ".\n";
  table << "# BERTScore is not computed by this toolkit.\n";
  std::cout << table.str();

  const fs::path csv = csv_path.empty() ? fs::path(checkpoint) / "eval.csv" : fs::path(csv_path);
  std::ofstream out(csv);
  if (!out) throw care::Error("cannot write " + csv.string());
  out << std::setprecision(17) << "split,examples,ppl,bleu3,bleu4\n"
      << name << ',' << r.examples << ',' << r.ppl << ',' << r.bleu3 << ',' << r.bleu4 << '\n';
  return 0;
}

int cmd_convert(const std::string& input_dir, const std::string& out_dir) {
  print_header("convert", 0);
  std::vector<std::pair<std::string, std::string>> shards;
  for (const char* name : {"train", "valid", "test"}) {
    const fs::path p = fs::path(input_dir) / (std::string(name) + ".csv");
    if (!fs::exists(p)) throw UsageError("missing upstream shard " + p.string());
    shards.emplace_back(name, p.string());
  }
  const auto r = care::convert_shards(shards);
  fs::create_directories(out_dir);
  care::write_corpus((fs::path(out_dir) / "corpus.jsonl").string(), r.corpus);
  for (const auto& [name, idx] : r.splits) care::write_split((fs::path(out_dir) / (name + ".idx")).string(), idx);
  for (const auto& rep : r.reports) {
    std::cout << rep.name << ": " << rep.rows << " rows, " << rep.conversations << " conversations, " << rep.examples
              << " examples, skipped " << rep.skipped_rows << " malformed rows and " << rep.skipped_conversations
              << " malformed conversations\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CARE empathetic response generation toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, context, emotion, corpus, split, vocab_path, csv_path, ceg, stopwords, input_dir,
      out_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<double> top_p;
  bool greedy = false, show_relations = false, majority = false, resume = false;
  std::size_t max_len = 64;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "key=value config file");
  train->add_option("--set", overrides, "override key=value (repeatable)");
  train->add_option("--seed", seed, "global seed");
  train->add_flag("--resume", resume, "continue from out_dir/state.json");

  auto add_inference = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    sub->add_option("--context", context, "JSON array of utterances, user first")->required();
    sub->add_option("--emotion", emotion, "emotion label");
    sub->add_flag("--majority-emotion", majority, "use the training corpus's most frequent label");
    sub->add_option("--seed", seed, "seed");
    sub->add_option("--ceg", ceg, "cause-effect graph (default: training config)");
    sub->add_option("--stopwords", stopwords, "stopword list (default: training config)");
  };
  auto* gen = app.add_subcommand("generate", "generate a response");
  add_inference(gen);
  auto* greedy_flag = gen->add_flag("--greedy", greedy, "greedy decoding (default)");
  gen->add_option("--top-p", top_p, "nucleus sampling mass")->excludes(greedy_flag);
  gen->add_option("--max-len", max_len, "maximum response tokens");
  gen->add_flag("--show-relations", show_relations, "print the reasoned relations");

  auto* reason = app.add_subcommand("reason", "print reasoned causal relations");
  add_inference(reason);

  auto* eval = app.add_subcommand("eval", "perplexity and BLEU on a corpus split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--corpus", corpus, "corpus JSONL (default: training corpus)");
  eval->add_option("--split", split, "split manifest of line indices");
  eval->add_option("--vocab", vocab_path, "vocabulary the split is expected to use");
  eval->add_option("--csv", csv_path, "CSV output (default: <checkpoint>/eval.csv)");
  eval->add_option("--seed", seed, "seed");
  eval->add_option("--ceg", ceg, "cause-effect graph (default: training config)");
  eval->add_option("--stopwords", stopwords, "stopword list (default: training config)");

  auto* convert = app.add_subcommand("convert", "convert upstream CSV shards to corpus JSONL");
  convert->add_option("--input", input_dir, "directory with train.csv, valid.csv, test.csv")->required();
  convert->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::uint64_t s = seed.value_or(0);
  try {
    if (*train) return cmd_train(config_path, overrides, seed, resume);
    if (*gen) return cmd_generate(checkpoint, context, emotion, majority, top_p, max_len, show_relations, s, ceg, stopwords);
    if (*reason) return cmd_reason(checkpoint, context, emotion, majority, s, ceg, stopwords);
    if (*eval) return cmd_eval(checkpoint, corpus, split, vocab_path, csv_path, s, ceg, stopwords);
    if (*convert) return cmd_convert(input_dir, out_dir);
  } catch (const care::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const care::LabelError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const care::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
