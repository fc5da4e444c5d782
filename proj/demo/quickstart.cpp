// Smallest end-to-end use of the library: generate a long-tailed dataset, estimate influence
// over random subsets, prune a reference model, and test whether the examples the pruned model
// changed its mind on receive more influence than the rest.

#include <cstdio>

#include "memgauge/memgauge.hpp"

using namespace memgauge;

int main() {
    const std::uint64_t master = 7;

    LongTailConfig data_cfg;
    data_cfg.train_size = 400;
    data_cfg.test_size = 200;
    data_cfg.n_features = 8;
    data_cfg.cluster_spread = 0.25;
    data_cfg.label_noise = 0.02;
    const auto data = generate_longtail(data_cfg, derive_seed(master, SeedStream::data, 0));

    const ModelSpec spec{Architecture::mlp, {32}, Activation::relu, data.train.n_features(), data.train.n_classes};
    TrainConfig trainer;
    trainer.epochs = 10;

    const auto masks = sample_masks(24, data.train.size(), 0.7, derive_seed(master, SeedStream::masks, 0));
    const auto records = run_trials(data.train, data.test, masks, NetworkLearner{spec, trainer}, {master, 1, {}, {}});
    const auto influence = estimate_influence(records, masks, Role::test);
    std::printf("influence matrix: %zu test x %zu train\n", influence.rows(), influence.cols());

    trainer.seed = derive_seed(master, SeedStream::reference, 0);
    const auto reference = train(spec, data.train, data.test, trainer);
    CompressionSpec cs;
    cs.sparsity = 0.9;
    const auto pruned = compress(reference, "reference", cs, data.train, derive_seed(master, SeedStream::distill, 0));
    std::printf("reference accuracy %.3f, pruned to sparsity %.3f\n", accuracy(reference, data.test),
                pruned.achieved_sparsity);

    const auto cies = find_cies(predict(reference, data.test.features), pruned.predict(data.test.features),
                                data.test.labels);
    std::printf("%zu compression-identified examples out of %zu\n", cies.cie.size(), cies.n_examples());
    try {
        const auto t = cie_influence_test(influence, cies, CieSubset::all_cie);
        std::printf("mean received influence: CIEs %.3g, others %.3g, t = %.3f, p = %.4f\n", t.mean_a, t.mean_b,
                    t.t_statistic, t.p_value);
    } catch (const DegenerateTestError& e) {
        std::printf("t-test not defined: %s\n", e.what());
    }
}
