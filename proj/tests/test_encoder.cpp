#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mole/checkpoint.hpp"
#include "mole/encoder.hpp"
#include "mole/errors.hpp"
#include "mole/training.hpp"
#include "support/fd_suite.hpp"

using namespace mole;
using namespace mole::testing;

namespace {

ModelConfig small_config(std::size_t layers = 2, std::size_t d = 16, std::size_t heads = 2,
                         std::size_t bottleneck = 4) {
  ModelConfig config;
  config.host.num_layers = layers;
  config.host.d_model = d;
  config.host.num_heads = heads;
  config.host.vocab_size = synthetic_vocab_size(16);
  config.host.max_len = 48;
  config.bottleneck = bottleneck;
  config.num_classes = 4;
  return config;
}

std::vector<SentenceRecord> sample_records(std::size_t count, std::uint64_t seed = 99) {
  SyntheticTaskConfig task;
  task.num_sentences = count;
  task.vocab = 16;
  RngStream rng(seed, RngPurpose::kDataShuffle);
  return make_synthetic_task(task, rng);
}

/// Copies every non-host tensor of `source` into same-named tensors of `dest`.
void copy_trainable(const MoleModel& source, MoleModel& dest) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, tensor] : source.named_parameters(false)) by_name.emplace(name, tensor);
  for (auto& [name, tensor] : dest.named_parameters(false)) {
    auto it = by_name.find(name);
    if (it == by_name.end()) continue;
    Tensor dst = tensor;
    dst.values() = it->second.values();
  }
}

}  // namespace

TEST_CASE("zero-initialized adapters leave the host function untouched") {
  const ModelConfig config = small_config();
  RngStream host_rng(1, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(1, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);

  for (const SentenceRecord& record : sample_records(5)) {
    Tape tape;
    Tensor with_adapters = model.forward_deterministic(tape, record, 1.0);
    Tensor host_only = model.forward_host_only(tape, record);
    REQUIRE(with_adapters.size() == host_only.size());
    for (std::size_t i = 0; i < with_adapters.size(); ++i) {
      CHECK(with_adapters.values()[i] == host_only.values()[i]);
    }
  }
}

TEST_CASE("pruned layer equals full mixture with a deterministic one-hot gate") {
  RngStream trial_rng(7, RngPurpose::kDataShuffle, 5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = 1 + trial_rng.next_below(2);  // 1 or 2
    const std::size_t d = heads * (4 + 2 * trial_rng.next_below(5));
    const std::size_t layers = 1 + trial_rng.next_below(3);
    const std::size_t bottleneck = 2 + trial_rng.next_below(5);
    const ModelConfig config = small_config(layers, d, heads, bottleneck);

    RngStream host_rng(100 + trial, RngPurpose::kWeightInit, 0);
    auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
    RngStream rng(100 + trial, RngPurpose::kWeightInit, 1);
    MoleModel mixture(config, host, rng);
    // Random nonzero adapters: perturb every trainable scalar.
    RngStream noise(200 + trial, RngPurpose::kWeightInit, 2);
    for (Tensor& p : mixture.trainable_parameters()) {
      for (double& v : p.values()) v += noise.next_uniform_range(-0.3, 0.3);
    }

    const std::size_t chosen = trial_rng.next_below(config.expert_kinds.size());
    std::vector<ExpertKind> survivors(layers, config.expert_kinds[chosen]);
    RngStream fresh(300 + trial, RngPurpose::kWeightInit, 3);
    MoleModel pruned(config, host, survivors, fresh);
    copy_trainable(mixture, pruned);

    const auto records = sample_records(2, 40 + trial);
    for (const SentenceRecord& record : records) {
      Tape tape;
      std::vector<Tensor> gates;
      for (std::size_t l = 0; l < layers; ++l) {
        Tensor g = Tensor::zeros({config.expert_kinds.size()});
        g.values()[chosen] = 1.0;
        gates.push_back(g);
      }
      Tensor full = mixture.forward_mixture(tape, record, gates);
      Tensor cut = pruned.forward_pruned(tape, record);
      REQUIRE(full.size() == cut.size());
      for (std::size_t i = 0; i < full.size(); ++i) {
        CHECK(full.values()[i] == cut.values()[i]);
      }
    }
  }
}

TEST_CASE("adapter scale multiplies the adapter contribution linearly") {
  const ModelConfig config = small_config(1);
  RngStream host_rng(3, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(3, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);
  RngStream noise(3, RngPurpose::kWeightInit, 2);
  for (Tensor& p : model.trainable_parameters()) {
    for (double& v : p.values()) v += noise.next_uniform_range(-0.3, 0.3);
  }

  const MoleLayer& layer = model.layers()[0];
  std::vector<Expert> bank_copy = layer.bank();  // aliases the same weights
  MoleLayer at_scale_1(bank_copy, GateState::create(bank_copy.size(), 0), 1.0);
  MoleLayer at_scale_4(std::move(bank_copy), GateState::create(layer.bank().size(), 0), 4.0);

  const auto records = sample_records(3, 77);
  for (const SentenceRecord& record : records) {
    Tape tape;
    Tensor h = host->embed(tape, record.subword_ids);
    Tensor h_attn = host->attention(tape, 0, h);
    Tensor gates = Tensor::from_data({4}, {0.25, 0.25, 0.25, 0.25});
    Tensor a1 = at_scale_1.adapter_output(tape, h_attn, record, gates);
    Tensor a4 = at_scale_4.adapter_output(tape, h_attn, record, gates);
    for (std::size_t i = 0; i < a1.size(); ++i) {
      // a4 - a1 == 3 * a1 up to one rounding of the scale multiply.
      CHECK(a4.values()[i] - a1.values()[i] ==
            doctest::Approx(3.0 * a1.values()[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("identical records give bit-identical logits in deterministic mode") {
  const ModelConfig config = small_config();
  RngStream host_rng(5, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(5, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);
  const auto records = sample_records(1, 11);

  Tape t1, t2;
  Tensor a = model.forward_deterministic(t1, records[0], 0.5);
  Tensor b = model.forward_deterministic(t2, records[0], 0.5);
  CHECK(a.values() == b.values());
}

TEST_CASE("host weights receive no gradient and stay byte-identical") {
  const ModelConfig config = small_config();
  RngStream host_rng(9, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  const std::uint64_t hash_before = host->weight_hash();

  RngStream rng(9, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);
  const auto records = sample_records(4, 13);

  for (const SentenceRecord& record : records) {
    Tape tape;
    Tensor logits = model.forward_deterministic(tape, record, 1.0);
    Tensor loss = cross_entropy(tape, logits, static_cast<std::size_t>(record.label));
    tape.backward(loss);
  }
  for (const auto& [name, tensor] : host->named_parameters()) {
    CHECK(!tensor.has_grad());
    CHECK(tensor.frozen());
  }
  sgd_step(model.trainable_parameters(), 0.1);
  CHECK(host->weight_hash() == hash_before);
}

TEST_CASE("loss gradient reaches gate logits when experts disagree") {
  const ModelConfig config = small_config(2);
  RngStream host_rng(21, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(21, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);
  RngStream noise(21, RngPurpose::kWeightInit, 2);
  for (Tensor& p : model.trainable_parameters()) {
    for (double& v : p.values()) v += noise.next_uniform_range(-0.4, 0.4);
  }

  const auto records = sample_records(1, 17);
  Tape tape;
  Tensor logits = model.forward_deterministic(tape, records[0], 1.0);
  Tensor loss = cross_entropy(tape, logits, static_cast<std::size_t>(records[0].label));
  tape.backward(loss);

  // The last layer's adapter cannot reach the first-token classifier (special
  // tokens receive no scattered output), so only earlier layers are checked.
  const Tensor z0 = model.layers()[0].gate().logits;
  REQUIRE(z0.has_grad());
  double norm = 0.0;
  for (double g : z0.grad()) norm += std::abs(g);
  CHECK(norm > 0.0);
}

TEST_CASE("full-model gradient check on sampled trainable scalars") {
  const ModelConfig config = small_config();
  RngStream host_rng(33, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(33, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);
  RngStream perturb(33, RngPurpose::kWeightInit, 2);
  for (Tensor& p : model.trainable_parameters()) {
    for (double& v : p.values()) v += perturb.next_uniform_range(-0.2, 0.2);
  }

  const auto records = sample_records(1, 29);
  const SentenceRecord& record = records[0];
  RngStream noise_rng(33, RngPurpose::kGumbelNoise);
  std::vector<std::vector<double>> noises;
  for (std::size_t l = 0; l < config.host.num_layers; ++l) {
    noises.push_back(draw_gumbel_noise(config.expert_kinds.size(), noise_rng));
  }

  auto builder = [&](Tape& t) -> Tensor {
    std::vector<Tensor> gates;
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
      gates.push_back(gumbel_apply(t, model.layers()[l].gate().logits, noises[l], 0.8));
    }
    Tensor logits = model.forward_mixture(t, record, gates);
    return cross_entropy(t, logits, static_cast<std::size_t>(record.label));
  };

  std::vector<Tensor> params = model.trainable_parameters();
  std::size_t total = 0;
  for (const Tensor& p : params) total += p.size();

  for (Tensor& p : params) p.zero_grad();
  Tape tape;
  Tensor loss = builder(tape);
  tape.backward(loss);

  // Sample 1% of the trainable scalars.
  RngStream pick(33, RngPurpose::kDataShuffle, 9);
  const std::size_t samples = std::max<std::size_t>(1, total / 100);
  std::size_t checked = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = pick.next_below(total);
    for (Tensor& p : params) {
      if (flat >= p.size()) {
        flat -= p.size();
        continue;
      }
      const double analytic = p.has_grad() ? p.grad()[flat] : 0.0;
      const double numeric = central_difference(p, flat, builder, 1e-5);
      INFO("scalar ", s, " analytic ", analytic, " numeric ", numeric);
      CHECK(grad_close(analytic, numeric, 1e-3));
      ++checked;
      break;
    }
  }
  CHECK(checked == samples);
}

TEST_CASE("trainable parameter report matches hand arithmetic at desk scale") {
  ModelConfig config;
  config.host.num_layers = 4;
  config.host.d_model = 32;
  config.host.num_heads = 2;
  config.host.vocab_size = 64;
  config.host.max_len = 64;
  config.bottleneck = 8;
  config.num_classes = 2;

  RngStream host_rng(2, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(2, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);

  const ParameterReport report = trainable_parameter_report(model);
  CHECK(report.adapters == 4 * (3 * 1296 + 624));
  CHECK(report.gates == 4 * 4);
  CHECK(report.classifier == 66);
  CHECK(report.trainable() == 4 * (3 * 1296 + 624) + 4 * 4 + 66);

  // Closed-form accounting agrees with the instantiated model.
  const ParameterReport closed = parameter_report_for_config(config);
  CHECK(closed.adapters == report.adapters);
  CHECK(closed.gates == report.gates);
  CHECK(closed.classifier == report.classifier);
  CHECK(closed.host == report.host);

  // Pruned desk model with MLP-only survivors.
  std::vector<ExpertKind> survivors(4, ExpertKind::kMlp);
  RngStream rng2(2, RngPurpose::kWeightInit, 2);
  MoleModel pruned(config, host, survivors, rng2);
  const ParameterReport pruned_report = trainable_parameter_report(pruned);
  CHECK(pruned_report.trainable() == 4 * 624 + 66);
  CHECK(parameter_report_for_config(config, 0).trainable() == 4 * 624 + 66);

  CHECK(report.ratio() ==
        doctest::Approx(static_cast<double>(report.trainable()) /
                        static_cast<double>(report.host + report.trainable())));
}

TEST_CASE("unknown vocabulary ids and overlong inputs are rejected") {
  const ModelConfig config = small_config();
  RngStream host_rng(4, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(4, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);

  auto records = sample_records(1, 63);
  SentenceRecord bad_id = records[0];
  bad_id.subword_ids[1] = static_cast<int>(config.host.vocab_size) + 5;
  Tape tape;
  CHECK_THROWS_AS(model.forward_deterministic(tape, bad_id, 1.0), InputError);

  SentenceRecord too_long = records[0];
  const std::size_t n = too_long.words.size();
  too_long.subword_ids.assign(config.host.max_len + 2, 2);
  too_long.alignment.word_of_subword.assign(config.host.max_len + 2, 0);
  for (std::size_t i = 0; i + 1 < n; ++i) too_long.alignment.word_of_subword[i] = static_cast<int>(i);
  // keep alignment word count consistent with the record's word list
  for (std::size_t i = n - 1; i < too_long.alignment.word_of_subword.size(); ++i) {
    too_long.alignment.word_of_subword[i] = static_cast<int>(n - 1);
  }
  too_long.alignment.num_subwords = too_long.subword_ids.size();
  CHECK_THROWS_AS(model.forward_deterministic(tape, too_long, 1.0), InputError);
}

TEST_CASE("checkpoint round trip is bit-exact and name-stable") {
  const ModelConfig config = small_config();
  RngStream host_rng(8, RngPurpose::kWeightInit, 0);
  auto host = std::make_shared<const HostEncoder>(config.host, host_rng);
  RngStream rng(8, RngPurpose::kWeightInit, 1);
  MoleModel model(config, host, rng);
  RngStream noise(8, RngPurpose::kWeightInit, 2);
  for (Tensor& p : model.trainable_parameters()) {
    for (double& v : p.values()) v += noise.next_uniform_range(-0.5, 0.5);
  }

  const auto path = std::filesystem::temp_directory_path() / "mole_test_ckpt.bin";
  Checkpoint out{R"({"purpose":"test"})", model.named_parameters(true)};
  save_checkpoint(path.string(), out);
  const Checkpoint in = load_checkpoint(path.string());
  CHECK(in.metadata_json == out.metadata_json);
  REQUIRE(in.tensors.size() == out.tensors.size());
  for (std::size_t i = 0; i < in.tensors.size(); ++i) {
    CHECK(in.tensors[i].first == out.tensors[i].first);
    CHECK(in.tensors[i].second.shape() == out.tensors[i].second.shape());
    CHECK(in.tensors[i].second.values() == out.tensors[i].second.values());
  }
  CHECK(hash_named_tensors(in.tensors) == hash_named_tensors(out.tensors));
  std::filesystem::remove(path);
}
