#include "doctest.h"

#include <algorithm>
#include <filesystem>

#include "elusive/errors.hpp"
#include "elusive/model.hpp"
#include "elusive/rng.hpp"
#include "gradcheck.hpp"

using namespace elusive;

namespace {

ModelConfig tiny(int layers = 2, int heads = 2, int d = 32, int vocab = 50) {
  ModelConfig c;
  c.preset = "toy-small";
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_ff = 4 * d;
  c.vocab_size = vocab;
  c.max_seq_len = 64;
  return c;
}

std::vector<int> random_ids(Rng& rng, int n, int vocab) {
  std::vector<int> ids(n);
  for (auto& id : ids) id = static_cast<int>(rng.below(vocab));
  return ids;
}

// Randomizes every tensor (including norm gains and adapter B factors) so
// that identities are not satisfied by accident.
void scramble(ModelCheckpoint& ckpt, std::uint64_t seed, double stddev = 0.2) {
  Rng rng(seed);
  for (auto& [name, p] : ckpt.params)
    for (ad::Index i = 0; i < p.value.size(); ++i)
      p.value.data()[i] += static_cast<float>(rng.normal(0.0, stddev));
}

double max_abs_diff(const ad::Matrix<float>& a, const ad::Matrix<float>& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("presets") {
  auto small = ModelConfig::preset_config("toy-small", 100);
  auto large = ModelConfig::preset_config("toy-large", 100);
  CHECK(small.n_layers == 4);
  CHECK(small.d_model == 128);
  CHECK(small.d_ff == 512);
  CHECK(large.n_layers == 8);
  CHECK(large.n_heads == 8);
  CHECK(large.d_model == 256);
  CHECK(large.d_ff == 1024);
  CHECK(init_model(large, 0).parameter_count() > init_model(small, 0).parameter_count());
  CHECK_THROWS_AS(ModelConfig::preset_config("toy-huge", 100), ConfigError);
}

TEST_CASE("config validation") {
  auto c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(1, 2, 6);  // head dimension 3
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  auto j = c.to_json();
  j["dropout"] = 0.1;
  CHECK_THROWS_AS(ModelConfig::from_json(j), ConfigError);
}

TEST_CASE("parameter count follows the architecture") {
  auto c = tiny(2, 2, 32, 50);
  const std::int64_t d = 32, f = 128, v = 50;
  const std::int64_t per_layer = 4 * d * d + 2 * d * f + 2 * d;
  CHECK(init_model(c, 1).parameter_count() == 2 * v * d + d + 2 * per_layer);
}

TEST_CASE("forward is causal") {
  auto ckpt = init_model(tiny(), 3);
  scramble(ckpt, 4);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto ids = random_ids(rng, 16, 50);
    const int t = static_cast<int>(rng.below(16));
    auto base = forward(ckpt, ids).logits.value();
    ids[t] = (ids[t] + 1) % 50;
    auto changed = forward(ckpt, ids).logits.value();
    if (t > 0) CHECK(max_abs_diff(base.topRows(t), changed.topRows(t)) == 0.0);
    CHECK(max_abs_diff(base.row(t), changed.row(t)) > 0.0);
  }
}

TEST_CASE("sequence length and ids are checked") {
  auto ckpt = init_model(tiny(), 3);
  std::vector<int> long_ids(65, 4);
  CHECK_THROWS_AS(forward(ckpt, long_ids), DataError);
  std::vector<int> bad{4, 50};
  CHECK_THROWS_AS(forward(ckpt, bad), IndexError);
}

TEST_CASE("packed segments match separate forwards") {
  auto ckpt = init_model(tiny(), 7);
  scramble(ckpt, 8);
  Rng rng(9);
  std::vector<std::vector<int>> seqs{random_ids(rng, 5, 50), random_ids(rng, 11, 50),
                                     random_ids(rng, 1, 50)};
  auto w = make_weights<float>(ckpt);
  auto packed = forward(w, PackedBatch::pack(seqs)).logits.value();
  auto last = forward(w, PackedBatch::pack(seqs), {CaptureMode::none, true}).logits.value();
  REQUIRE(last.rows() == 3);
  ad::Index row = 0;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    auto alone = forward(ckpt, seqs[s]).logits.value();
    CHECK(max_abs_diff(packed.middleRows(row, alone.rows()), alone) < 1e-5);
    CHECK(max_abs_diff(last.row(static_cast<ad::Index>(s)), alone.bottomRows(1)) < 1e-5);
    row += alone.rows();
  }
}

TEST_CASE("attention capture is row-stochastic on the causal support") {
  auto ckpt = init_model(tiny(3, 4, 32), 11);
  scramble(ckpt, 12, 0.5);
  Rng rng(13);
  auto ids = random_ids(rng, 20, 50);
  auto cap = forward(ckpt, ids, CaptureMode::full).captures.at(0);
  REQUIRE(cap.heads.size() == 3);
  auto check_rows = [](const Eigen::MatrixXd& m) {
    for (ad::Index i = 0; i < m.rows(); ++i) {
      CHECK(std::abs(m.row(i).head(i + 1).sum() - 1.0) < 1e-5);
      CHECK(m.row(i).minCoeff() >= 0.0);
      if (i + 1 < m.cols()) CHECK(m.row(i).tail(m.cols() - i - 1).cwiseAbs().maxCoeff() == 0.0);
    }
  };
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(20, 20);
  std::vector<const Eigen::MatrixXd*> all;
  for (const auto& layer : cap.heads) {
    REQUIRE(layer.size() == 4);
    for (const auto& h : layer) {
      check_rows(h);
      all.push_back(&h);
    }
  }
  check_rows(cap.average);
  // Averaging is order-free: a shuffled accumulation gives the same matrix.
  rng.shuffle(all);
  for (auto* h : all) mean += *h;
  mean /= static_cast<double>(all.size());
  CHECK((mean - cap.average).cwiseAbs().maxCoeff() < 1e-12);

  auto avg_only = forward(ckpt, ids, CaptureMode::average).captures.at(0);
  CHECK(avg_only.heads.empty());
  CHECK((avg_only.average - cap.average).cwiseAbs().maxCoeff() == 0.0);
  CHECK(forward(ckpt, ids).captures.empty());
}

TEST_CASE("one layer and one head: the average is that head") {
  auto ckpt = init_model(tiny(1, 1, 16), 2);
  scramble(ckpt, 3);
  std::vector<int> ids{0, 5, 9, 12, 7};
  auto cap = forward(ckpt, ids, CaptureMode::full).captures.at(0);
  CHECK((cap.average - cap.heads[0][0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("LoRA: fresh adapters are an identity, merge reproduces adapted logits") {
  auto base = init_model(tiny(), 21);
  scramble(base, 22);
  LoraSpec spec;
  spec.rank = 4;
  auto adapted = attach_lora(base, spec, 23);
  Rng rng(24);
  auto ids = random_ids(rng, 16, 50);
  CHECK(max_abs_diff(forward(base, ids).logits.value(), forward(adapted, ids).logits.value()) <
        1e-6);

  for (auto& [name, p] : adapted.params)
    if (name.ends_with(".lora_b")) p.value = ad::Matrix<float>::Random(p.value.rows(), p.value.cols()) * 0.1f;
  adapted.lora->alpha_scale = 0.5;
  auto merged = merge_lora(adapted);
  CHECK_FALSE(merged.lora.has_value());
  CHECK(merged.parameter_count() == base.parameter_count());
  const auto a = forward(adapted, ids).logits.value();
  CHECK(max_abs_diff(a, forward(base, ids).logits.value()) > 1e-3);
  CHECK(max_abs_diff(a, forward(merged, ids).logits.value()) < 1e-5);
}

TEST_CASE("LoRA trainable count and shapes") {
  auto c = tiny(2, 2, 32, 50);
  auto adapted = attach_lora(init_model(c, 1), LoraSpec{}, 2);
  const std::int64_t r = 4, d = 32, f = 128;
  // wq, wk, wv, wo: d x d; w_up: f x d; w_down: d x f.
  CHECK(lora_trainable_count(adapted) == 2 * (4 * r * (d + d) + 2 * r * (f + d)));
  CHECK(adapted.at("layers.0.w_up.lora_a").shape == ad::Shape{4, 32});
  CHECK(adapted.at("layers.0.w_up.lora_b").shape == ad::Shape{128, 4});
  CHECK(adapted.at("layers.1.wq.lora_b").value.isZero());
  CHECK(adapted.base_parameter_count() == init_model(c, 1).parameter_count());

  LoraSpec q_only;
  q_only.targets = {"wq"};
  CHECK(lora_trainable_count(attach_lora(init_model(c, 1), q_only, 2)) == 2 * r * (d + d));

  LoraSpec too_big;
  too_big.rank = 33;
  CHECK_THROWS_AS(attach_lora(init_model(c, 1), too_big, 2), ConfigError);
  LoraSpec zero;
  zero.rank = 0;
  CHECK_THROWS_AS(attach_lora(init_model(c, 1), zero, 2), ConfigError);
}

TEST_CASE("end-to-end gradients match finite differences") {
  // 2 layers, 2 heads, d_model 32, vocab 50, T 16.
  auto ckpt = init_model(tiny(2, 2, 32, 50), 31);
  scramble(ckpt, 32, 0.1);
  Rng rng(33);
  const auto ids = random_ids(rng, 17, 50);
  const std::vector<int> inputs(ids.begin(), ids.end() - 1), targets(ids.begin() + 1, ids.end());
  const std::vector<bool> ignore(16, false);
  const auto batch = PackedBatch::single(inputs);

  auto w = make_weights<float>(ckpt, [](const std::string&) { return true; });
  auto loss = ad::cross_entropy_lm(forward(w, batch).logits, targets, ignore);
  ad::backward(loss);

  auto loss_at = [&](const std::string& name, ad::Index coord, double delta) {
    auto wd = make_weights<double>(ckpt);
    wd.tensors.at(name).mutable_value().data()[coord] += delta;
    return ad::cross_entropy_lm(forward(wd, batch).logits, targets, ignore).item();
  };

  std::vector<std::string> names;
  for (const auto& [name, p] : ckpt.params) names.push_back(name);
  double worst = 0.0;
  for (int s = 0; s < 20; ++s) {
    const auto& name = names[rng.below(names.size())];
    const auto& t = w[name];
    // Sample among coordinates that actually receive gradient.
    ad::Index coord = 0;
    for (int tries = 0; tries < 100; ++tries) {
      coord = static_cast<ad::Index>(rng.below(static_cast<std::uint64_t>(t.numel())));
      if (std::abs(t.grad().data()[coord]) > 1e-6) break;
    }
    const double h = 1e-3;
    const double numeric = (loss_at(name, coord, h) - loss_at(name, coord, -h)) / (2 * h);
    const double err = testing::relative_error(t.grad().data()[coord], numeric);
    INFO(name << "[" << coord << "] analytic " << t.grad().data()[coord] << " numeric " << numeric);
    CHECK(err < 1e-3);
    worst = std::max(worst, err);
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("checkpoint round trip is byte-stable") {
  auto ckpt = attach_lora(init_model(tiny(), 41), LoraSpec{}, 42);
  ckpt.step = 123;
  ckpt.rng_state = "state text";
  const auto bytes = serialize_checkpoint(ckpt);
  CHECK(bytes.starts_with("ELUSCKPT"));
  auto back = deserialize_checkpoint(bytes);
  CHECK(back.config == ckpt.config);
  CHECK(back.lora == ckpt.lora);
  CHECK(back.step == 123);
  CHECK(back.rng_state == "state text");
  CHECK(back.params == ckpt.params);
  CHECK(serialize_checkpoint(back) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "elusive_ckpt_test.bin";
  save_checkpoint(path, ckpt);
  CHECK(read_text(path) == bytes);
  CHECK(load_checkpoint(path).params == ckpt.params);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto bytes = serialize_checkpoint(init_model(tiny(), 1));
  CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT" + bytes.substr(8)), DataError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), DataError);

  auto wrong = init_model(tiny(), 1);
  wrong.params["embed"].shape = {25, 64};
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(serialize_checkpoint(wrong)),
                       doctest::Contains("embed"), DataError);
}
