#include <cstdio>
#include "mole/analysis.hpp"
#include "mole/training.hpp"
using namespace mole;
int main() {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    SyntheticTaskConfig task; task.num_sentences = 5000; task.vocab = 32;
    RngStream data_rng(7, RngPurpose::kDataShuffle);
    Dataset data = Dataset::from_records(make_synthetic_task(task, data_rng), 0.1);
    ModelConfig mc; mc.host.num_layers=4; mc.host.d_model=32; mc.host.num_heads=2;
    mc.host.vocab_size=synthetic_vocab_size(32); mc.host.max_len=64; mc.bottleneck=8; mc.num_classes=4;
    TrainConfig tc; tc.seed=seed; tc.lr=0.1; tc.phase1_steps=2000; tc.phase2_epochs=0;
    RngStream host_rng(seed, RngPurpose::kWeightInit, 0);
    auto host = std::make_shared<const HostEncoder>(mc.host, host_rng);
    RngStream rng(seed, RngPurpose::kWeightInit, 1);
    MoleModel model(mc, host, rng);
    Phase1Result r = phase1_train(model, data, tc);
    std::printf("seed %llu:\n", (unsigned long long)seed);
    for (double th : {1e-3, 0.01, 0.05}) {
      ConvergenceReport rep = convergence_report(r.trace, th);
      std::printf("  th=%.3g:", th);
      for (auto& l : rep.layers)
        std::printf(" L%zu=%s", l.layer, l.convergence_step ? std::to_string(*l.convergence_step).c_str() : "none");
      std::printf("\n");
    }
    auto series = convergence_series(r.trace, 2);
    std::printf("  layer2 tail:");
    for (std::size_t i = series.size() - 12; i < series.size(); ++i)
      std::printf(" %zu:%.2g", series[i].first, series[i].second);
    std::printf("\n");
  }
}
