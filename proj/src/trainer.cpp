#include "elusive/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "elusive/errors.hpp"
#include "elusive/rng.hpp"

namespace elusive {

namespace {

struct Example {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<bool> ignore;
};

Example make_example(const std::vector<int>& doc) {
  Example ex;
  ex.inputs.reserve(doc.size() + 2);
  ex.inputs.push_back(Vocabulary::kBos);
  ex.inputs.insert(ex.inputs.end(), doc.begin(), doc.end());
  ex.inputs.push_back(Vocabulary::kEos);
  const std::size_t n = ex.inputs.size();
  ex.targets.assign(n, Vocabulary::kPad);
  ex.ignore.assign(n, true);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    ex.targets[i] = ex.inputs[i + 1];
    ex.ignore[i] = ex.targets[i] == Vocabulary::kPad || ex.inputs[i] == Vocabulary::kPad;
  }
  return ex;
}

struct Batch {
  PackedBatch packed;
  std::vector<int> targets;
  std::vector<bool> ignore;
  std::size_t support = 0;
};

Batch assemble(const std::vector<Example>& examples, std::span<const std::size_t> picks) {
  std::vector<std::vector<int>> seqs;
  Batch b;
  for (auto i : picks) {
    const auto& ex = examples[i];
    seqs.push_back(ex.inputs);
    b.targets.insert(b.targets.end(), ex.targets.begin(), ex.targets.end());
    b.ignore.insert(b.ignore.end(), ex.ignore.begin(), ex.ignore.end());
  }
  for (bool ig : b.ignore) b.support += ig ? 0 : 1;
  b.packed = PackedBatch::pack(seqs);
  return b;
}

class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(std::vector<ad::Tensor<float>*>& params, double lr) {
    ++t_;
    if (m_.empty()) {
      for (auto* p : params) {
        m_.push_back(ad::Matrix<float>::Zero(p->rows(), p->cols()));
        v_.push_back(ad::Matrix<float>::Zero(p->rows(), p->cols()));
      }
    }
    // Global-norm clipping, accumulated in double.
    double norm2 = 0.0;
    for (auto* p : params)
      if (p->has_grad()) norm2 += p->grad().template cast<double>().squaredNorm();
    const double norm = std::sqrt(norm2);
    const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

    const double b1 = TrainConfig::kBeta1, b2 = TrainConfig::kBeta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const float step = static_cast<float>(lr * std::sqrt(c2) / c1);
    const float eps = static_cast<float>(TrainConfig::kEps * std::sqrt(c2));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      if (!p->has_grad()) continue;
      const ad::Matrix<float> g = p->grad() * static_cast<float>(clip);
      m_[i] = static_cast<float>(b1) * m_[i] + static_cast<float>(1 - b1) * g;
      v_[i] = static_cast<float>(b2) * v_[i] + static_cast<float>(1 - b2) * g.cwiseProduct(g);
      p->mutable_value().array() -= step * m_[i].array() / (v_[i].array().sqrt() + eps);
    }
  }

 private:
  const TrainConfig& cfg_;
  std::int64_t t_ = 0;
  std::vector<ad::Matrix<float>> m_, v_;
};

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.schedule == LrSchedule::linear_warmup_constant && step < cfg.warmup_steps)
    return cfg.learning_rate * static_cast<double>(step + 1) / cfg.warmup_steps;
  return cfg.learning_rate;
}

std::string schedule_name(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "linear_warmup_constant";
}

TrainResult run(ModelCheckpoint ckpt, const TrainConfig& cfg,
                const std::vector<std::vector<int>>& corpus, const Validator& validator) {
  cfg.validate();
  if (corpus.empty()) throw DataError("training corpus is empty");
  const auto start = std::chrono::steady_clock::now();

  std::vector<Example> examples;
  examples.reserve(corpus.size());
  for (const auto& doc : corpus) {
    for (int id : doc) {
      if (id < 0 || id >= ckpt.config.vocab_size)
        throw DataError("token id " + std::to_string(id) + " outside model vocabulary of " +
                        std::to_string(ckpt.config.vocab_size));
    }
    if (static_cast<int>(doc.size()) + 2 > ckpt.config.max_seq_len)
      throw DataError("document of " + std::to_string(doc.size()) +
                      " tokens does not fit max_seq_len " + std::to_string(ckpt.config.max_seq_len));
    examples.push_back(make_example(doc));
  }

  const bool lora = cfg.mode == TrainMode::lora;
  auto weights = make_weights<float>(ckpt, [lora](const std::string& name) {
    return lora ? is_adapter_param(name) : !is_adapter_param(name);
  });
  std::vector<ad::Tensor<float>*> trainable;
  for (auto& [name, t] : weights.tensors)
    if (t.requires_grad()) trainable.push_back(&t);

  Adam adam(cfg);
  TrainResult result;
  TrainReport& report = result.report;
  std::optional<ModelCheckpoint> best;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(examples.size(), cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t token_count = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      auto batch = assemble(examples, std::span(order).subspan(begin, end - begin));
      if (batch.support == 0) continue;  // nothing to learn from a padding-only batch
      auto out = forward(weights, batch.packed);
      auto loss = ad::cross_entropy_lm(out.logits, batch.targets, batch.ignore);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ", step " << report.steps
            << " (loss " << value << "); completed epoch losses:";
        for (double l : report.epoch_loss) msg << ' ' << l;
        throw DivergenceError(msg.str());
      }
      ad::backward(loss);
      adam.step(trainable, learning_rate(cfg, report.steps));
      for (auto* p : trainable) p->zero_grad();
      ++report.steps;
      loss_sum += value * static_cast<double>(batch.support);
      token_count += batch.support;
    }
    report.epoch_loss.push_back(token_count ? loss_sum / static_cast<double>(token_count) : 0.0);

    const bool due = validator && cfg.eval_every > 0 &&
                     (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
    if (due) {
      ModelCheckpoint snapshot = ckpt;
      store_weights(weights, snapshot);
      snapshot.step = ckpt.step + report.steps;
      const double score = validator(snapshot);
      report.validation.emplace_back(epoch, score);
      if (!report.best_score || score > *report.best_score) {
        report.best_score = score;
        report.best_epoch = epoch;
        best = std::move(snapshot);
      }
    }
  }

  if (best) {
    result.checkpoint = std::move(*best);
  } else {
    store_weights(weights, ckpt);
    ckpt.step += report.steps;
    result.checkpoint = std::move(ckpt);
    report.best_epoch = cfg.epochs;
  }
  Rng state(derive_seed(cfg.seed, static_cast<std::uint64_t>(cfg.epochs)));
  result.checkpoint.rng_state = state.state();
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("train config: learning_rate must be positive");
  if (epochs < 1) throw ConfigError("train config: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be at least 1");
  if (warmup_steps < 0) throw ConfigError("train config: warmup_steps must be non-negative");
  if (schedule == LrSchedule::linear_warmup_constant && warmup_steps == 0)
    throw ConfigError("train config: linear_warmup_constant needs warmup_steps > 0");
  if (eval_every < 0) throw ConfigError("train config: eval_every must be non-negative");
  if (grad_clip < 0) throw ConfigError("train config: grad_clip must be non-negative");
}

Json TrainConfig::to_json() const {
  Json j;
  j["learning_rate"] = learning_rate;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["schedule"] = schedule_name(schedule);
  j["warmup_steps"] = warmup_steps;
  j["seed"] = seed;
  j["mode"] = mode == TrainMode::full ? "full" : "lora";
  j["eval_every"] = eval_every;
  j["grad_clip"] = grad_clip;
  j["lora"] = lora.to_json();
  return j;
}

TrainConfig TrainConfig::from_json(const Json& j) {
  static const std::vector<std::string> allowed = {
      "learning_rate", "epochs", "batch_size", "schedule", "warmup_steps",
      "seed",          "mode",   "eval_every", "grad_clip", "lora"};
  if (!j.is_object()) throw ConfigError("train config: expected an object");
  TrainConfig c;
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError("train config: unknown key \"" + item.key() + "\"");
  }
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    const auto schedule = j.value("schedule", schedule_name(c.schedule));
    if (schedule == "constant") c.schedule = LrSchedule::constant;
    else if (schedule == "linear_warmup_constant") c.schedule = LrSchedule::linear_warmup_constant;
    else throw ConfigError("train config: unknown schedule \"" + schedule + "\"");
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.seed = j.value("seed", c.seed);
    const auto mode = j.value("mode", std::string("full"));
    if (mode == "full") c.mode = TrainMode::full;
    else if (mode == "lora") c.mode = TrainMode::lora;
    else throw ConfigError("train config: unknown mode \"" + mode + "\"");
    c.eval_every = j.value("eval_every", c.eval_every);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (j.contains("lora")) c.lora = LoraSpec::from_json(j.at("lora"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

Json TrainReport::to_json(bool with_timing) const {
  Json j;
  j["epoch_loss"] = epoch_loss;
  j["steps"] = steps;
  j["best_epoch"] = best_epoch;
  j["best_score"] = best_score ? Json(*best_score) : Json(nullptr);
  Json val = Json::array();
  for (const auto& [e, s] : validation) val.push_back({{"epoch", e}, {"score", s}});
  j["validation"] = val;
  if (with_timing) j["seconds"] = seconds;
  return j;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, hash_string("epoch"), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

TrainResult pretrain(const TrainConfig& config, const ModelConfig& model_config,
                     const std::vector<std::vector<int>>& corpus, const Validator& validator) {
  if (config.mode == TrainMode::lora)
    throw ConfigError("pretraining is full-parameter; lora mode applies to continual pretraining");
  return run(init_model(model_config, derive_seed(config.seed, hash_string("init"))), config,
             corpus, validator);
}

TrainResult continual_pretrain(const ModelCheckpoint& base, const TrainConfig& config,
                               const std::vector<std::vector<int>>& corpus,
                               const Vocabulary& vocab, const Validator& validator) {
  if (vocab.size() != base.config.vocab_size)
    throw DataError("vocabulary of " + std::to_string(vocab.size()) +
                    " tokens does not match checkpoint vocabulary of " +
                    std::to_string(base.config.vocab_size));
  if (config.mode == TrainMode::lora && !base.lora)
    return run(attach_lora(base, config.lora, derive_seed(config.seed, hash_string("lora"))),
               config, corpus, validator);
  return run(base, config, corpus, validator);
}

double mean_loss(const ModelCheckpoint& ckpt, const std::vector<std::vector<int>>& corpus,
                 int batch_size) {
  auto weights = make_weights<float>(ckpt);
  std::vector<Example> examples;
  for (const auto& doc : corpus) examples.push_back(make_example(doc));
  std::vector<std::size_t> all(examples.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t begin = 0; begin < all.size(); begin += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(all.size(), begin + static_cast<std::size_t>(batch_size));
    auto batch = assemble(examples, std::span(all).subspan(begin, end - begin));
    if (batch.support == 0) continue;
    auto out = forward(weights, batch.packed);
    total += ad::cross_entropy_lm(out.logits, batch.targets, batch.ignore).item() *
             static_cast<double>(batch.support);
    count += batch.support;
  }
  if (count == 0) throw ContractError("mean_loss: no scorable tokens");
  return total / static_cast<double>(count);
}

}  // namespace elusive
