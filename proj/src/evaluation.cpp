#include "elusive/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "elusive/errors.hpp"
#include "elusive/rng.hpp"

namespace elusive {

void EvalConfig::validate() const {
  if (shots < 0) throw ConfigError("eval: shots must be non-negative");
  if (max_new_tokens < 1) throw ConfigError("eval: max_new_tokens must be positive");
  if (batch_size < 1) throw ConfigError("eval: batch_size must be positive");
}

Json EvalConfig::to_json() const {
  Json j;
  j["shots"] = shots;
  j["max_new_tokens"] = max_new_tokens;
  j["seed"] = seed;
  j["batch_size"] = batch_size;
  return j;
}

EvalConfig EvalConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("eval: expected an object");
  static const std::vector<std::string> allowed = {"shots", "max_new_tokens", "seed", "batch_size"};
  for (const auto& item : j.items())
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      throw ConfigError("eval: unknown key \"" + item.key() + "\"");
  EvalConfig c;
  try {
    c.shots = j.value("shots", c.shots);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.seed = j.value("seed", c.seed);
    c.batch_size = j.value("batch_size", c.batch_size);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval: ") + e.what());
  }
  c.validate();
  return c;
}

std::string build_prompt(const std::string& question, const std::vector<Exemplar>& exemplars,
                         int shots, std::uint64_t seed) {
  if (shots < 0) throw ConfigError("build_prompt: negative shot count");
  if (static_cast<std::size_t>(shots) > exemplars.size())
    throw DataError("build_prompt: " + std::to_string(shots) + " shots requested but only " +
                    std::to_string(exemplars.size()) + " exemplars available");
  std::vector<std::size_t> pick(exemplars.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  Rng rng(derive_seed(seed, hash_string(question)));
  // Partial Fisher-Yates: the first `shots` entries are a uniform sample.
  for (std::size_t i = 0; i < static_cast<std::size_t>(shots); ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pick.size() - i));
    std::swap(pick[i], pick[j]);
  }
  std::string prompt;
  for (int s = 0; s < shots; ++s) {
    const auto& ex = exemplars[pick[static_cast<std::size_t>(s)]];
    prompt += "Question: " + ex.question + "\nAnswer: " + ex.answer + "\n";
  }
  prompt += "Question: " + question + "\nAnswer:";
  return prompt;
}

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::istringstream words(cleaned);
  std::string word, out;
  while (words >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

namespace {

std::vector<std::string> split_normalized(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

Score score_answer(std::string_view prediction, std::string_view gold) {
  const auto p = normalize_answer(prediction), g = normalize_answer(gold);
  Score s;
  s.em = p == g ? 1 : 0;
  const auto pt = split_normalized(p), gt = split_normalized(g);
  if (pt.empty() || gt.empty()) {
    s.f1 = pt.empty() && gt.empty() ? 1.0 : 0.0;
    return s;
  }
  std::unordered_map<std::string, int> counts;
  for (const auto& w : gt) ++counts[w];
  int common = 0;
  for (const auto& w : pt) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return s;
  const double precision = static_cast<double>(common) / static_cast<double>(pt.size());
  const double recall = static_cast<double>(common) / static_cast<double>(gt.size());
  s.f1 = 2 * precision * recall / (precision + recall);
  return s;
}

Generator greedy_generator(const ModelCheckpoint& ckpt, const Vocabulary& vocab,
                           const EvalConfig& config) {
  if (vocab.size() != ckpt.config.vocab_size)
    throw DataError("vocabulary of " + std::to_string(vocab.size()) +
                    " tokens does not match checkpoint vocabulary of " +
                    std::to_string(ckpt.config.vocab_size));
  const int newline = vocab.id(Vocabulary::kNewline);
  auto weights = std::make_shared<Weights<float>>(make_weights<float>(ckpt));
  return [weights, newline, config](const std::vector<std::vector<int>>& prompts) {
    std::vector<std::vector<int>> generated(prompts.size());
    const std::size_t chunk = static_cast<std::size_t>(config.batch_size);
    for (std::size_t begin = 0; begin < prompts.size(); begin += chunk) {
      const std::size_t end = std::min(prompts.size(), begin + chunk);
      std::vector<std::size_t> active;
      for (std::size_t i = begin; i < end; ++i) active.push_back(i);
      for (int step = 0; step < config.max_new_tokens && !active.empty(); ++step) {
        std::vector<std::vector<int>> seqs;
        seqs.reserve(active.size());
        for (auto i : active) {
          auto s = prompts[i];
          s.insert(s.end(), generated[i].begin(), generated[i].end());
          seqs.push_back(std::move(s));
        }
        auto out = forward(*weights, PackedBatch::pack(seqs), ForwardOptions{CaptureMode::none, true});
        std::vector<std::size_t> still;
        for (std::size_t r = 0; r < active.size(); ++r) {
          ad::Index best = 0;
          out.logits.value().row(static_cast<ad::Index>(r)).maxCoeff(&best);
          const int token = static_cast<int>(best);
          if (token == newline || token == Vocabulary::kEos) continue;
          generated[active[r]].push_back(token);
          if (static_cast<int>(generated[active[r]].size()) < config.max_new_tokens)
            still.push_back(active[r]);
        }
        active = std::move(still);
      }
    }
    return generated;
  };
}

double field_distance(const TokenizedDocument& doc, Field field) {
  const auto* name = doc.find_field(Field::name);
  const auto* tail = doc.find_field(field);
  if (!name || !tail) throw DataError("document " + doc.doc_id + " lacks spans for distance");
  auto mid = [](const FieldSpan& s) { return (s.token_start + s.token_end - 1) / 2.0; };
  return mid(*tail) - mid(*name);
}

EvalResult evaluate_with(const Generator& generate, const std::vector<QAPair>& qa,
                         const std::vector<Exemplar>& exemplars, const Vocabulary& vocab,
                         const std::vector<TokenizedDocument>& docs, const EvalConfig& config) {
  config.validate();
  std::vector<std::vector<int>> prompts;
  prompts.reserve(qa.size());
  for (const auto& pair : qa) {
    auto ids = encode(build_prompt(pair.question, exemplars, config.shots, config.seed), vocab).ids;
    ids.insert(ids.begin(), Vocabulary::kBos);
    prompts.push_back(std::move(ids));
  }
  const auto outputs = generate(prompts);
  if (outputs.size() != qa.size()) throw ContractError("generator returned the wrong count");

  EvalResult result;
  std::map<std::string, FieldSummary> sums;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    QuestionResult q;
    q.id = qa[i].id;
    q.doc_id = qa[i].doc_id;
    q.field = qa[i].field;
    q.question = qa[i].question;
    q.gold = qa[i].answer;
    q.prediction = detokenize(outputs[i], vocab);
    const auto s = score_answer(q.prediction, q.gold);
    q.em = s.em;
    q.f1 = s.f1;
    for (const std::string key : {q.field ? std::string(field_name(*q.field)) : std::string("all"),
                                  std::string("overall")}) {
      auto& f = sums[key];
      ++f.count;
      f.em += q.em;
      f.f1 += q.f1;
    }
    result.questions.push_back(std::move(q));
  }
  for (auto& [key, f] : sums) {
    f.em /= f.count;
    f.f1 /= f.count;
  }
  result.per_field = std::move(sums);

  if (!docs.empty()) {
    std::map<std::string, const TokenizedDocument*> by_id;
    for (const auto& d : docs) by_id[d.doc_id] = &d;
    for (Field field : kFactFields) {
      DistanceRow row;
      row.field = field;
      int n = 0;
      for (const auto& q : result.questions) {
        if (q.field != field) continue;
        auto it = by_id.find(q.doc_id);
        if (it == by_id.end() || !it->second->has_spans()) continue;
        row.mean_distance += field_distance(*it->second, field);
        row.em += q.em;
        row.f1 += q.f1;
        ++n;
      }
      if (n == 0) continue;
      row.mean_distance /= n;
      row.em /= n;
      row.f1 /= n;
      result.distance.push_back(row);
    }
  }
  return result;
}

EvalResult evaluate(const ModelCheckpoint& ckpt, const std::vector<QAPair>& qa,
                    const std::vector<Exemplar>& exemplars, const Vocabulary& vocab,
                    const std::vector<TokenizedDocument>& docs, const EvalConfig& config) {
  return evaluate_with(greedy_generator(ckpt, vocab, config), qa, exemplars, vocab, docs, config);
}

Json EvalResult::to_json() const {
  Json j;
  Json qs = Json::array();
  for (const auto& q : questions) {
    Json r;
    r["id"] = q.id;
    r["doc_id"] = q.doc_id;
    r["field"] = q.field ? Json(field_name(*q.field)) : Json(nullptr);
    r["question"] = q.question;
    r["gold"] = q.gold;
    r["prediction"] = q.prediction;
    r["em"] = q.em;
    r["f1"] = q.f1;
    qs.push_back(std::move(r));
  }
  Json summary = Json::object();
  for (const auto& [key, f] : per_field)
    summary[key] = {{"count", f.count}, {"em", f.em}, {"f1", f.f1}};
  Json dist = Json::array();
  for (const auto& d : distance)
    dist.push_back({{"field", field_name(d.field)},
                    {"mean_distance", d.mean_distance},
                    {"em", d.em},
                    {"f1", d.f1}});
  j["summary"] = summary;
  j["distance"] = dist;
  j["questions"] = qs;
  return j;
}

std::string EvalResult::distance_csv() const {
  std::ostringstream os;
  os << "field,mean_distance,em,f1\n";
  os.precision(10);
  for (const auto& d : distance)
    os << field_name(d.field) << ',' << d.mean_distance << ',' << d.em << ',' << d.f1 << '\n';
  return os.str();
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("spearman: need two equal-length samples");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace elusive
