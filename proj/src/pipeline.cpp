#include "elusive/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "elusive/errors.hpp"
#include "elusive/plot.hpp"
#include "elusive/rng.hpp"

namespace elusive {

namespace fs = std::filesystem;

namespace {

void reject_unknown(const Json& j, std::initializer_list<std::string_view> allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& item : j.items())
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError(where + ": unknown key \"" + item.key() + "\"");
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": bad value for \"" + key + "\"");
  }
}

// Preset sizes first, then whatever the section overrides.
ModelConfig model_from_json(const Json& j, std::string_view default_preset, const std::string& where) {
  reject_unknown(j, {"preset", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len", "rope_theta"},
                 where);
  const auto preset = get_or<std::string>(j, "preset", std::string(default_preset), where);
  ModelConfig base;
  try {
    base = ModelConfig::preset_config(preset, 0);
  } catch (const ConfigError&) {
    base.preset = preset;
  }
  Json merged = base.to_json();
  for (const auto& item : j.items()) merged[item.key()] = item.value();
  try {
    return ModelConfig::from_json(merged);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

Json model_to_json(const ModelConfig& c) {
  Json j = c.to_json();
  j.erase("vocab_size");
  return j;
}

std::string qa_block(const std::string& q, const std::string& a) {
  return "Question: " + q + "\nAnswer: " + a + "\n";
}

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage, std::uint64_t local = 0) {
  return derive_seed(seed, hash_string(stage), local);
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

Json json_number(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

std::map<std::string, std::string> hash_tree(const fs::path& root,
                                             const std::vector<std::string>& skip) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root).generic_string();
    if (std::find(skip.begin(), skip.end(), rel) != skip.end()) continue;
    out[rel] = sha256_file(entry.path());
  }
  return out;
}

const std::vector<std::string> kUnhashed = {"manifest.json", "verification.json", "timing.json"};

}  // namespace

std::string_view protocol_name(Protocol p) { return p == Protocol::continual ? "continual" : "joint"; }

RunConfig::RunConfig() {
  small = ModelConfig::preset_config("toy-small", 0);
  large = ModelConfig::preset_config("toy-large", 0);
  pretrain_small.epochs = 20;
  pretrain_large = pretrain_small;
  finetune.epochs = 10;
}

void RunConfig::validate() const {
  if (corpus.targets < 1) throw ConfigError("corpus: targets must be at least 1");
  if (corpus.background < 0) throw ConfigError("corpus: background must be non-negative");
  if (corpus.exemplar_people < 1) throw ConfigError("corpus: exemplar_people must be at least 1");
  if (corpus.qa_per_document < 1) throw ConfigError("corpus: qa_per_document must be at least 1");
  if (corpus.validation_people < 0 || corpus.validation_people > corpus.targets)
    throw ConfigError("corpus: validation_people must lie in [0, targets]");
  if (static_cast<std::size_t>(corpus.exemplar_people) * kFactFields.size() <
      static_cast<std::size_t>(eval.shots))
    throw ConfigError("corpus: exemplar_people cannot supply " + std::to_string(eval.shots) +
                      " shots");
  if (analysis.top_k < 1) throw ConfigError("analysis: top_k must be positive");
  for (const auto* m : {&small, &large}) {
    ModelConfig probe = *m;
    probe.vocab_size = 5;
    probe.validate();
  }
  pretrain_small.validate();
  pretrain_large.validate();
  finetune.validate();
  augmentation.validate();
  eval.validate();
  if (pretrain_small.mode != TrainMode::full || pretrain_large.mode != TrainMode::full)
    throw ConfigError("pretrain: only full mode is supported");
  if (protocol == Protocol::joint && analysis.source == AttentionSource::pretrained)
    throw ConfigError("analysis: the joint protocol has no pretrained checkpoints to read");
  if (protocol == Protocol::joint && corpus.replay_background)
    throw ConfigError("corpus: replay_background applies to the continual protocol only");
}

Json RunConfig::to_json() const {
  Json j;
  j["seed"] = seed;
  j["protocol"] = protocol_name(protocol);
  j["corpus"] = {{"targets", corpus.targets},
                 {"background", corpus.background},
                 {"exemplar_people", corpus.exemplar_people},
                 {"layout", layout_name(corpus.layout)},
                 {"qa_per_document", corpus.qa_per_document},
                 {"validation_people", corpus.validation_people},
                 {"replay_background", corpus.replay_background}};
  j["model"] = {{"small", model_to_json(small)}, {"large", model_to_json(large)}};
  j["pretrain"] = {{"small", pretrain_small.to_json()}, {"large", pretrain_large.to_json()}};
  j["finetune"] = finetune.to_json();
  Json aug = augmentation.to_json();
  aug.erase("strategy");
  j["augmentation"] = std::move(aug);
  j["eval"] = eval.to_json();
  j["analysis"] = {{"top_k", analysis.top_k},
                   {"query", query_kind_name(analysis.query)},
                   {"source", analysis.source == AttentionSource::plain ? "plain" : "pretrained"}};
  return j;
}

RunConfig RunConfig::from_json(const Json& j) {
  reject_unknown(j, {"seed", "protocol", "corpus", "model", "pretrain", "finetune", "augmentation", "eval",
                     "analysis"},
                 "config");
  RunConfig c;
  c.seed = get_or(j, "seed", c.seed, "config");
  const auto protocol = get_or<std::string>(j, "protocol", "continual", "config");
  if (protocol == "continual") c.protocol = Protocol::continual;
  else if (protocol == "joint") c.protocol = Protocol::joint;
  else throw ConfigError("config: unknown protocol \"" + protocol + "\"");
  if (j.contains("corpus")) {
    const auto& s = j["corpus"];
    reject_unknown(s, {"targets", "background", "exemplar_people", "layout", "qa_per_document",
                       "validation_people", "replay_background"},
                   "corpus");
    c.corpus.targets = get_or(s, "targets", c.corpus.targets, "corpus");
    c.corpus.background = get_or(s, "background", c.corpus.background, "corpus");
    c.corpus.exemplar_people = get_or(s, "exemplar_people", c.corpus.exemplar_people, "corpus");
    c.corpus.layout = parse_layout(get_or<std::string>(s, "layout", "fixed", "corpus"));
    c.corpus.qa_per_document = get_or(s, "qa_per_document", c.corpus.qa_per_document, "corpus");
    c.corpus.validation_people = get_or(s, "validation_people", c.corpus.validation_people, "corpus");
    c.corpus.replay_background = get_or(s, "replay_background", c.corpus.replay_background, "corpus");
  }
  if (j.contains("model")) {
    const auto& s = j["model"];
    reject_unknown(s, {"small", "large"}, "model");
    if (s.contains("small")) c.small = model_from_json(s["small"], "toy-small", "model.small");
    if (s.contains("large")) c.large = model_from_json(s["large"], "toy-large", "model.large");
  }
  if (j.contains("pretrain")) {
    const auto& s = j["pretrain"];
    reject_unknown(s, {"small", "large"}, "pretrain");
    if (s.contains("small")) c.pretrain_small = TrainConfig::from_json(s["small"]);
    if (s.contains("large")) c.pretrain_large = TrainConfig::from_json(s["large"]);
  }
  if (j.contains("finetune")) c.finetune = TrainConfig::from_json(j["finetune"]);
  if (j.contains("augmentation")) {
    if (j["augmentation"].is_object() && j["augmentation"].contains("strategy"))
      throw ConfigError("augmentation: \"strategy\" is fixed per summary row and cannot be set");
    c.augmentation = AugmentationPolicy::from_json(j["augmentation"]);
  }
  if (j.contains("eval")) c.eval = EvalConfig::from_json(j["eval"]);
  if (j.contains("analysis")) {
    const auto& s = j["analysis"];
    reject_unknown(s, {"top_k", "query", "source"}, "analysis");
    const auto source = get_or<std::string>(s, "source", "plain", "analysis");
    if (source == "plain") c.analysis.source = AttentionSource::plain;
    else if (source == "pretrained") c.analysis.source = AttentionSource::pretrained;
    else throw ConfigError("analysis: unknown source \"" + source + "\"");
    c.analysis.top_k = get_or(s, "top_k", c.analysis.top_k, "analysis");
    const auto q = get_or<std::string>(s, "query", "preposition", "analysis");
    if (q == "preposition") c.analysis.query = QueryKind::preposition;
    else if (q == "all_tokens") c.analysis.query = QueryKind::all_tokens;
    else throw ConfigError("analysis: unknown query kind \"" + q + "\"");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (const char* env = std::getenv("ELUSIVE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string_view(env).size()) throw std::invalid_argument("trailing characters");
      j["seed"] = v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("ELUSIVE_SEED is not an unsigned integer: ") + env);
    }
  }
  return from_json(j);
}

std::string PipelineSummary::to_csv() const {
  std::ostringstream os;
  os << "strategy";
  for (Field f : kFactFields) os << ',' << field_name(f) << "_em," << field_name(f) << "_f1";
  os << '\n';
  for (auto row : kSummaryRows) {
    const auto it = table.find(std::string(row));
    if (it == table.end()) continue;
    os << row;
    for (Field f : kFactFields) {
      const auto cell = it->second.find(std::string(field_name(f)));
      const SummaryCell c = cell == it->second.end() ? SummaryCell{} : cell->second;
      os << ',' << fixed(c.em) << ',' << fixed(c.f1);
    }
    os << '\n';
  }
  return os.str();
}

Json PipelineSummary::to_json() const {
  Json rows = Json::array();
  for (auto row : kSummaryRows) {
    const auto it = table.find(std::string(row));
    if (it == table.end()) continue;
    Json r;
    r["strategy"] = row;
    for (Field f : kFactFields) {
      const auto cell = it->second.find(std::string(field_name(f)));
      const SummaryCell c = cell == it->second.end() ? SummaryCell{} : cell->second;
      r[std::string(field_name(f))] = {{"em", c.em}, {"f1", c.f1}};
    }
    rows.push_back(std::move(r));
  }
  Json j;
  j["rows"] = std::move(rows);
  j["plain_distance_spearman"] = json_number(plain_distance_spearman);
  j["contrast"] = {{"name_top_k_diff", name_top_k_diff},
                   {"name_top_k_large", name_top_k_large},
                   {"name_top_k_small", name_top_k_small}};
  j["contrast_models"] = {{"target_loss_small", target_loss_small},
                      {"target_loss_large", target_loss_large},
                      {"background_em_small", background_em_small},
                      {"background_em_large", background_em_large}};
  return j;
}

std::vector<std::string> qa_documents(const std::vector<QAPair>& qa, int per_document,
                                      std::uint64_t seed) {
  if (per_document < 1) throw ConfigError("qa_documents: per_document must be positive");
  std::vector<std::size_t> order(qa.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::string> docs;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(per_document)) {
    std::string text;
    for (std::size_t k = i; k < std::min(order.size(), i + static_cast<std::size_t>(per_document)); ++k)
      text += qa_block(qa[order[k]].question, qa[order[k]].answer);
    docs.push_back(std::move(text));
  }
  return docs;
}

PipelineSummary run_pipeline(const RunConfig& config, const fs::path& run_dir, const Logger& log_fn) {
  config.validate();
  auto log = [&](const std::string& msg) {
    if (log_fn) log_fn(msg);
  };
  Json timing = Json::object();
  Stopwatch total;
  auto stage = [&](const std::string& name, auto&& body) {
    log("[" + name + "] start");
    Stopwatch sw;
    body();
    timing[name] = sw.seconds();
    log("[" + name + "] done in " + fixed(sw.seconds(), 1) + " s");
  };

  fs::create_directories(run_dir);
  std::map<std::string, std::string> previous;
  if (fs::exists(run_dir / "manifest.json")) {
    try {
      const auto old = Json::parse(read_text(run_dir / "manifest.json"));
      for (const auto& [k, v] : old.at("files").items()) previous[k] = v.get<std::string>();
    } catch (const std::exception& e) {
      log(std::string("previous manifest unreadable: ") + e.what());
    }
  }
  for (const auto* dir : {"corpus", "checkpoints", "analysis", "augmented", "eval"})
    fs::create_directories(run_dir / dir);
  write_text(run_dir / "config.resolved.json", config.to_json().dump(2) + "\n");

  const std::uint64_t seed = config.seed;
  const auto& cc = config.corpus;

  // --- corpus ---------------------------------------------------------------
  std::vector<BiographyRecord> targets, exemplar_people, background;
  std::vector<QAPair> target_qa, exemplar_qa, background_qa;
  Vocabulary vocab;
  std::vector<TokenizedDocument> target_docs;
  std::vector<std::vector<int>> pretrain_corpus;
  stage("corpus", [&] {
    const auto pools = EntityPools::bundled();
    auto all = generate_biographies(pools, cc.targets + cc.exemplar_people + cc.background, cc.layout,
                                    stage_seed(seed, "corpus"));
    const auto t_end = all.begin() + cc.targets;
    const auto e_end = t_end + cc.exemplar_people;
    targets.assign(all.begin(), t_end);
    exemplar_people.assign(t_end, e_end);
    background.assign(e_end, all.end());
    target_qa = generate_qa(targets);
    exemplar_qa = generate_qa(exemplar_people);
    background_qa = generate_qa(background);

    std::vector<BiographyRecord> seen = background;
    seen.insert(seen.end(), exemplar_people.begin(), exemplar_people.end());
    auto seen_qa = background_qa;
    seen_qa.insert(seen_qa.end(), exemplar_qa.begin(), exemplar_qa.end());
    const auto qa_docs = qa_documents(seen_qa, cc.qa_per_document, stage_seed(seed, "qa-documents"));

    std::vector<std::string> texts;
    for (const auto* group : {&targets, &exemplar_people, &background})
      for (const auto& r : *group) texts.push_back(r.text);
    for (const auto* group : {&target_qa, &exemplar_qa, &background_qa})
      for (const auto& q : *group) texts.push_back(qa_block(q.question, q.answer));
    vocab = Vocabulary::build(texts);

    for (const auto& r : targets) target_docs.push_back(tokenize_biography(r, vocab));
    for (const auto& r : seen) pretrain_corpus.push_back(encode(r.text, vocab).ids);
    for (const auto& d : qa_docs) pretrain_corpus.push_back(encode(d, vocab).ids);

    write_biographies(run_dir / "corpus/targets.jsonl", targets);
    write_qa(run_dir / "corpus/targets.qa.jsonl", target_qa);
    write_biographies(run_dir / "corpus/background.jsonl", seen);
    write_qa(run_dir / "corpus/background.qa.jsonl", seen_qa);
    write_qa(run_dir / "corpus/exemplars.qa.jsonl", exemplar_qa);
    std::vector<Json> rows;
    for (std::size_t i = 0; i < qa_docs.size(); ++i)
      rows.push_back({{"id", "qa-doc-" + std::to_string(i)}, {"text", qa_docs[i]}});
    write_jsonl(run_dir / "corpus/background.qa_documents.jsonl", rows);
    vocab.save(run_dir / "corpus/vocab.txt");
    log("vocabulary " + std::to_string(vocab.size()) + " tokens, " +
        std::to_string(pretrain_corpus.size()) + " pretraining sequences");
  });

  std::vector<Exemplar> exemplars;
  for (const auto& q : exemplar_qa) exemplars.push_back({q.question, q.answer});
  EvalConfig eval_cfg = config.eval;
  eval_cfg.seed = stage_seed(seed, "eval", config.eval.seed);

  auto corpus_hashes = [&](std::initializer_list<const char*> files) {
    Json j;
    for (const char* f : files) j[f] = sha256_file(run_dir / f);
    return j;
  };
  auto write_ckpt = [&](const std::string& name, const TrainResult& result, const TrainConfig& tc,
                        const Json& corpus_files, const Json& metrics) {
    const auto path = run_dir / "checkpoints" / (name + ".ckpt");
    save_checkpoint(path, result.checkpoint);
    Json m;
    m["checkpoint"] = name + ".ckpt";
    m["sha256"] = sha256_file(path);
    m["model"] = result.checkpoint.config.to_json();
    if (result.checkpoint.lora) m["lora"] = result.checkpoint.lora->to_json();
    m["train"] = tc.to_json();
    m["seed"] = seed;
    m["corpus"] = corpus_files;
    m["report"] = result.report.to_json();
    m["metrics"] = metrics;
    write_text(run_dir / "checkpoints" / (name + ".json"), m.dump(2) + "\n");
  };

  PipelineSummary summary;

  std::vector<std::vector<int>> target_seqs;
  for (const auto& d : target_docs) target_seqs.push_back(d.ids);
  std::vector<QAPair> background_probe;
  for (const auto& q : background_qa)
    if (background_probe.size() < 250) background_probe.push_back(q);

  std::vector<QAPair> validation_qa;
  for (const auto& q : target_qa)
    if (std::find_if(targets.begin(), targets.begin() + cc.validation_people,
                     [&](const BiographyRecord& r) { return r.person_id == q.doc_id; }) !=
        targets.begin() + cc.validation_people)
      validation_qa.push_back(q);
  Validator validator;
  if (!validation_qa.empty())
    validator = [&](const ModelCheckpoint& c) {
      return evaluate(c, validation_qa, exemplars, vocab, {}, eval_cfg).per_field.at("overall").em;
    };

  // target-biography loss and background QA accuracy
  auto probe = [&](const std::string& name, const ModelCheckpoint& c, double& loss, double& em) {
    loss = mean_loss(c, target_seqs);
    em = background_probe.empty()
             ? 0.0
             : evaluate(c, background_probe, exemplars, vocab, {}, eval_cfg).per_field.at("overall").em;
    log(name + ": target bio loss " + fixed(loss) + ", background QA EM " + fixed(em));
    return Json{{"target_loss", loss}, {"background_em", em}};
  };

  const bool joint = config.protocol == Protocol::joint;
  const Json background_files =
      corpus_hashes({"corpus/background.jsonl", "corpus/background.qa_documents.jsonl"});

  // --- pretraining on the background (continual only) ----------------------------
  ModelCheckpoint small_base, large_base;
  if (!joint) {
    auto pretrain_one = [&](const std::string& name, ModelConfig mc, TrainConfig tc) {
      ModelCheckpoint ckpt;
      stage("pretrain." + name, [&] {
        mc.vocab_size = vocab.size();
        tc.seed = stage_seed(seed, "pretrain." + name, tc.seed);
        auto result = pretrain(tc, mc, pretrain_corpus);
        double loss = 0, em = 0;
        const auto metrics = probe(name, result.checkpoint, loss, em);
        write_ckpt(name + ".pretrained", result, tc, background_files, metrics);
        ckpt = std::move(result.checkpoint);
      });
      return ckpt;
    };
    small_base = pretrain_one("small", config.small, config.pretrain_small);
    large_base = pretrain_one("large", config.large, config.pretrain_large);
  }

  // Trains one model on the target data of a row. Continual runs start from the
  // pretrained checkpoint; joint runs train from scratch on background + targets.
  auto train = [&](bool large, const std::vector<std::vector<int>>& data) {
    if (joint) {
      TrainConfig tc = large ? config.pretrain_large : config.pretrain_small;
      ModelConfig mc = large ? config.large : config.small;
      mc.vocab_size = vocab.size();
      tc.seed = stage_seed(seed, large ? "train.large" : "train.small", tc.seed);
      auto corpus = pretrain_corpus;
      corpus.insert(corpus.end(), data.begin(), data.end());
      return std::make_pair(pretrain(tc, mc, corpus, large ? Validator{} : validator), tc);
    }
    TrainConfig tc = config.finetune;
    tc.seed = stage_seed(seed, "finetune", config.finetune.seed);
    if (!cc.replay_background)
      return std::make_pair(continual_pretrain(large ? large_base : small_base, tc, data, vocab,
                                               large ? Validator{} : validator),
                            tc);
    auto corpus = pretrain_corpus;
    corpus.insert(corpus.end(), data.begin(), data.end());
    return std::make_pair(
        continual_pretrain(large ? large_base : small_base, tc, corpus, vocab, large ? Validator{} : validator),
        tc);
  };

  auto data_files = [&](const std::string& row) {
    Json j = joint || cc.replay_background ? background_files : Json::object();
    j["corpus/targets.jsonl"] = sha256_file(run_dir / "corpus/targets.jsonl");
    if (row != "plain") {
      const std::string aug = "augmented/" + row + ".jsonl";
      j[aug] = sha256_file(run_dir / aug);
    }
    return j;
  };

  auto run_row = [&](const std::string& row, const std::vector<std::vector<int>>& data) {
    ModelCheckpoint out;
    stage("train." + row, [&] {
      auto [result, tc] = train(false, data);
      const auto ev = evaluate(result.checkpoint, target_qa, exemplars, vocab, target_docs, eval_cfg);
      write_text(run_dir / "eval" / (row + ".json"), ev.to_json().dump(2) + "\n");
      write_text(run_dir / "eval" / (row + ".distance.csv"), ev.distance_csv());
      write_text(run_dir / "eval" / (row + ".distance.svg"), distance_svg(ev.distance, row));
      auto& cells = summary.table[row];
      for (Field f : kFactFields) {
        const auto it = ev.per_field.find(std::string(field_name(f)));
        if (it != ev.per_field.end()) cells[std::string(field_name(f))] = {it->second.em, it->second.f1};
      }
      if (row == "plain") {
        std::vector<double> x, y;
        for (const auto& d : ev.distance) {
          x.push_back(d.mean_distance);
          y.push_back(d.em);
        }
        summary.plain_distance_spearman = spearman(x, y);
      }
      Json metrics = Json::object();
      for (const auto& [k, v] : ev.per_field) metrics[k] = {{"em", v.em}, {"f1", v.f1}};
      write_ckpt("small." + row, result, tc, data_files(row), metrics);
      std::string line = row + ": final loss " + fixed(result.report.epoch_loss.back()) + ", EM";
      for (Field f : kFactFields)
        line += " " + std::string(field_name(f)) + "=" + fixed(cells[std::string(field_name(f))].em, 2);
      log(line);
      out = std::move(result.checkpoint);
    });
    return out;
  };

  const auto small_plain = run_row("plain", target_seqs);

  // --- attention capture and contrast ------------------------------------------
  const bool from_plain = config.analysis.source == AttentionSource::plain;
  ModelCheckpoint large_plain;
  if (from_plain)
    stage("train.large.plain", [&] {
      auto [result, tc] = train(true, target_seqs);
      double loss = 0, em = 0;
      const auto metrics = probe("large", result.checkpoint, loss, em);
      write_ckpt("large.plain", result, tc, data_files("plain"), metrics);
      large_plain = std::move(result.checkpoint);
    });
  const ModelCheckpoint& small_ckpt = from_plain ? small_plain : small_base;
  const ModelCheckpoint& large_ckpt = from_plain ? large_plain : large_base;
  probe("contrast small", small_ckpt, summary.target_loss_small, summary.background_em_small);
  probe("contrast large", large_ckpt, summary.target_loss_large, summary.background_em_large);

  std::map<std::string, std::vector<double>> small_scores, diff_scores;
  stage("analysis", [&] {
    std::vector<AttentionProfile> small_rows, large_rows;
    std::vector<AttentionDiff> diff_rows;
    std::vector<TokenRanking> rank_small, rank_large, rank_diff;
    for (const auto& doc : target_docs) {
      std::vector<int> ids{Vocabulary::kBos};
      ids.insert(ids.end(), doc.ids.begin(), doc.ids.end());
      const auto cap_s = forward(small_ckpt, ids, CaptureMode::average).captures.at(0);
      const auto cap_l = forward(large_ckpt, ids, CaptureMode::average).captures.at(0);
      const auto ps = profiles_from_capture(cap_s, doc, QueryKind::preposition, small_ckpt.config.preset);
      const auto pl = profiles_from_capture(cap_l, doc, QueryKind::preposition, large_ckpt.config.preset);
      for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps[i].field != Field::company) continue;
        const auto d = diff_profiles(pl[i], ps[i]);
        rank_small.push_back(rank_tokens(filter_tokens(ps[i], doc), doc));
        rank_large.push_back(rank_tokens(filter_tokens(pl[i], doc), doc));
        rank_diff.push_back(rank_tokens(filter_tokens(d, doc), doc));
      }
      const auto qs = config.analysis.query == QueryKind::preposition
                           ? ps
                           : profiles_from_capture(cap_s, doc, QueryKind::all_tokens, small_ckpt.config.preset);
      const auto ql = config.analysis.query == QueryKind::preposition
                           ? pl
                           : profiles_from_capture(cap_l, doc, QueryKind::all_tokens, large_ckpt.config.preset);
      std::vector<const QueryScores*> s_ptr, d_ptr;
      const std::size_t d0 = diff_rows.size();
      for (std::size_t i = 0; i < qs.size(); ++i) diff_rows.push_back(diff_profiles(ql[i], qs[i]));
      const std::size_t s0 = small_rows.size();
      small_rows.insert(small_rows.end(), qs.begin(), qs.end());
      large_rows.insert(large_rows.end(), ql.begin(), ql.end());
      for (std::size_t i = s0; i < small_rows.size(); ++i) s_ptr.push_back(&small_rows[i]);
      for (std::size_t i = d0; i < diff_rows.size(); ++i) d_ptr.push_back(&diff_rows[i]);
      small_scores[doc.doc_id] = document_scores(s_ptr, doc.size());
      diff_scores[doc.doc_id] = document_scores(d_ptr, doc.size());
    }
    auto ptrs = [](const auto& rows) {
      std::vector<const QueryScores*> out;
      for (const auto& r : rows) out.push_back(&r);
      return out;
    };
    write_scores_jsonl(run_dir / "analysis/profiles.small.jsonl", ptrs(small_rows));
    write_scores_jsonl(run_dir / "analysis/profiles.large.jsonl", ptrs(large_rows));
    write_scores_jsonl(run_dir / "analysis/diffs.jsonl", ptrs(diff_rows));
    std::vector<Json> doc_rows;
    for (const auto& doc : target_docs)
      doc_rows.push_back({{"doc_id", doc.doc_id},
                          {"small", small_scores[doc.doc_id]},
                          {"diff", diff_scores[doc.doc_id]}});
    write_jsonl(run_dir / "analysis/document_scores.jsonl", doc_rows);

    const int k = config.analysis.top_k;
    const std::array<std::tuple<const char*, const std::vector<TokenRanking>*, int*>, 3> tables = {{
        {"small", &rank_small, &summary.name_top_k_small},
        {"large", &rank_large, &summary.name_top_k_large},
        {"diff", &rank_diff, &summary.name_top_k_diff},
    }};
    for (const auto& [name, rankings, count] : tables) {
      const auto table = constitution(*rankings, k);
      *count = table.total(Category::name);
      const std::string base = std::string("analysis/constitution.company.") + name;
      write_text(run_dir / (base + ".csv"), table.to_csv());
      write_text(run_dir / (base + ".svg"),
                 constitution_svg(table, std::string("top-") + std::to_string(k) + " tokens at the company preposition: " + name));
    }
    log("name tokens in top-" + std::to_string(k) + ": diff " + std::to_string(summary.name_top_k_diff) +
        ", large " + std::to_string(summary.name_top_k_large) + ", small " +
        std::to_string(summary.name_top_k_small));
  });

  // --- augmentation ------------------------------------------------------------
  std::map<std::string, std::vector<std::vector<int>>> train_sets;
  stage("augment", [&] {
    for (Strategy s : {Strategy::random, Strategy::by_attention, Strategy::by_attention_diff,
                       Strategy::by_distance}) {
      AugmentationPolicy policy = config.augmentation;
      policy.strategy = s;
      policy.seed = stage_seed(seed, "augmentation", config.augmentation.seed);
      ScoreProvider provider;
      if (s == Strategy::by_attention) provider = [&](const TokenizedDocument& d) { return small_scores.at(d.doc_id); };
      if (s == Strategy::by_attention_diff) provider = [&](const TokenizedDocument& d) { return diff_scores.at(d.doc_id); };
      const auto examples = augment_corpus(target_docs, policy, provider);
      const std::string name(strategy_name(s));
      write_augmented(run_dir / "augmented" / (name + ".jsonl"), examples);
      auto& seqs = train_sets[name];
      for (const auto& ex : examples) seqs.push_back(ex.token_ids);
    }
  });

  for (auto row : kSummaryRows)
    if (row != "plain") run_row(std::string(row), train_sets.at(std::string(row)));

  // --- report ---------------------------------------------------------------------
  write_text(run_dir / "summary.csv", summary.to_csv());
  write_text(run_dir / "summary.json", summary.to_json().dump(2) + "\n");

  const auto files = hash_tree(run_dir, kUnhashed);
  Json manifest;
  manifest["seed"] = seed;
  manifest["config_sha256"] = sha256_hex(config.to_json().dump());
  manifest["files"] = files;
  write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");

  if (!previous.empty()) {
    Json changed = Json::array(), missing = Json::array();
    int matched = 0;
    for (const auto& [k, v] : previous) {
      const auto it = files.find(k);
      if (it == files.end()) missing.push_back(k);
      else if (it->second != v) changed.push_back(k);
      else ++matched;
    }
    write_text(run_dir / "verification.json",
               Json{{"matched", matched}, {"changed", changed}, {"missing", missing}}.dump(2) + "\n");
    log("manifest check against previous run: " + std::to_string(matched) + " identical, " +
        std::to_string(changed.size()) + " changed, " + std::to_string(missing.size()) + " missing");
  }
  timing["total"] = total.seconds();
  write_text(run_dir / "timing.json", timing.dump(2) + "\n");
  return summary;
}

}  // namespace elusive
