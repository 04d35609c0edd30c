#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "mbgmn/eval.hpp"
#include "test_helpers.hpp"

using namespace mbgmn;

namespace {

// One synthetic user per test entry: the positive is item `pos_rank - 1` when
// scored by descending item id... simpler to drive evaluate() with a scorer
// that pins the positive at a chosen rank.
data::SplitDataset ranked_split(std::size_t users, std::size_t items = 200) {
    auto t = data::generate_synthetic({.num_users = users, .num_items = items,
                                       .num_behaviors = 2, .density = 0.03,
                                       .correlation = 0.5, .seed = 77,
                                       .behavior_names = {"view", "buy"}});
    return data::leave_one_out_split(t, 5);
}

}  // namespace

TEST_CASE("rank metric closed forms") {
    CHECK(eval::rank_metrics(1, 1) == std::pair<double, double>{1.0, 1.0});
    CHECK(eval::rank_metrics(2, 1) == std::pair<double, double>{0.0, 0.0});
    CHECK(eval::rank_metrics(1, 10).second == 1.0);
    // rank 3 inside the cutoff: ndcg = 1/log2(4) = 0.5
    CHECK(eval::rank_metrics(3, 10).second == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(eval::rank_metrics(3, 10).first == 1.0);
    CHECK(eval::rank_metrics(11, 10) == std::pair<double, double>{0.0, 0.0});
    CHECK_THROWS_AS(eval::rank_metrics(0, 10), std::out_of_range);
}

TEST_CASE("hit rate and ndcg coincide at cutoff one and grow with the cutoff") {
    auto split = ranked_split(60);
    REQUIRE(split.test.size() >= 20);
    auto report = eval::evaluate(split, eval::random_scorer(3));
    REQUIRE(report.cutoffs == eval::kDefaultCutoffs);
    CHECK(report.hr[0] == report.ndcg[0]);
    for (std::size_t i = 1; i < report.cutoffs.size(); ++i) {
        CHECK(report.hr[i] >= report.hr[i - 1]);
        CHECK(report.ndcg[i] >= report.ndcg[i - 1]);
    }
    CHECK(report.evaluated_users == split.test.size());
    CHECK(report.excluded_users == split.excluded.size());
}

TEST_CASE("random scores land near one-in-a-hundred") {
    auto split = ranked_split(600, 400);
    REQUIRE(split.test.size() >= 500);
    auto report = eval::evaluate(split, eval::random_scorer(123));
    // HR@10 concentrates around 0.10 over hundreds of users
    CHECK(report.hr[4] > 0.07);
    CHECK(report.hr[4] < 0.13);
}

TEST_CASE("a scorer that pins the positive controls the metrics exactly") {
    auto split = ranked_split(60);
    // positive always wins
    std::vector<bool> is_positive_item;
    auto oracle = [&](std::size_t user, const std::vector<std::size_t>& items) {
        std::vector<double> s(items.size(), 0.0);
        for (const auto& h : split.test)
            if (h.user == user)
                for (std::size_t i = 0; i < items.size(); ++i)
                    if (items[i] == h.item) s[i] = 1.0;
        return s;
    };
    auto report = eval::evaluate(split, oracle);
    for (std::size_t i = 0; i < report.cutoffs.size(); ++i) {
        CHECK(report.hr[i] == 1.0);
        CHECK(report.ndcg[i] == 1.0);
    }
    // positive always loses: with 99 negatives it lands at rank 100
    auto inverse = [&](std::size_t user, const std::vector<std::size_t>& items) {
        auto s = oracle(user, items);
        for (double& x : s) x = -x;
        return s;
    };
    auto worst = eval::evaluate(split, inverse);
    for (std::size_t i = 0; i < worst.cutoffs.size(); ++i) CHECK(worst.hr[i] == 0.0);
}

TEST_CASE("ties break by ascending item id") {
    auto split = ranked_split(60);
    auto zero = [](std::size_t, const std::vector<std::size_t>& items) {
        return std::vector<double>(items.size(), 0.0);
    };
    auto report = eval::evaluate(split, zero, {100});
    // with all-equal scores the positive ranks by id among its candidate set
    double expected_ndcg = 0.0;
    for (const auto& h : split.test) {
        std::size_t rank = 1;
        for (auto n : h.negatives)
            if (n < h.item) ++rank;
        expected_ndcg += 1.0 / std::log2(double(rank) + 1.0);
    }
    expected_ndcg /= double(split.test.size());
    CHECK(report.hr[0] == 1.0);  // everything is inside a cutoff of 100
    CHECK(report.ndcg[0] == doctest::Approx(expected_ndcg).epsilon(1e-12));
}

TEST_CASE("popularity scorer follows train counts") {
    data::InteractionTensor t(4, 200, {"buy"}, 0);
    for (std::size_t u = 0; u < 4; ++u) t.add_event(u, 7, 0);  // item 7: count 4
    t.add_event(0, 3, 0);                                      // item 3: count 1
    data::SplitDataset split{t, {}, {}};
    auto scorer = eval::popularity_scorer(split);
    auto s = scorer(0, {7, 3, 11});
    CHECK(s[0] > s[1]);
    CHECK(s[1] > s[2]);
    // deterministic across calls
    CHECK(scorer(2, {7, 3, 11}) == s);
}

TEST_CASE("sparsity buckets partition the evaluated users") {
    auto split = ranked_split(120);
    auto report = eval::evaluate(split, eval::random_scorer(9));
    std::size_t bucketed = 0;
    for (const auto& b : report.buckets) bucketed += b.users;
    CHECK(bucketed == report.evaluated_users);
    REQUIRE(report.buckets.size() == eval::kDefaultBuckets.size());
    for (std::size_t i = 0; i < report.buckets.size(); ++i) {
        CHECK(report.buckets[i].lo == eval::kDefaultBuckets[i].first);
        CHECK(report.buckets[i].hi == eval::kDefaultBuckets[i].second);
    }
    // bucket membership recomputed from train counts
    const std::size_t tgt = split.train.target_behavior();
    std::vector<std::size_t> expected(report.buckets.size(), 0);
    for (const auto& h : split.test) {
        std::size_t c = split.train.items_of(h.user, tgt).size();
        for (std::size_t i = 0; i < eval::kDefaultBuckets.size(); ++i)
            if (c >= eval::kDefaultBuckets[i].first && c <= eval::kDefaultBuckets[i].second)
                ++expected[i];
    }
    for (std::size_t i = 0; i < report.buckets.size(); ++i)
        CHECK(report.buckets[i].users == expected[i]);
}

TEST_CASE("report JSON round trip is lossless") {
    auto split = ranked_split(60);
    auto report = eval::evaluate(split, eval::random_scorer(21));
    std::string j = report.to_json();
    auto back = eval::EvalReport::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.hr == report.hr);
    CHECK(back.ndcg == report.ndcg);
    CHECK(back.evaluated_users == report.evaluated_users);
    REQUIRE(back.buckets.size() == report.buckets.size());
    for (std::size_t i = 0; i < back.buckets.size(); ++i) {
        CHECK(back.buckets[i].users == report.buckets[i].users);
        CHECK(back.buckets[i].hr == report.buckets[i].hr);
    }
    CHECK(!report.to_text().empty());
}

TEST_CASE("evaluation is invariant to the thread cap") {
    auto split = ranked_split(120);
    auto run_with = [&](const char* threads) {
        setenv("MBGMN_THREADS", threads, 1);
        auto r = eval::evaluate(split, eval::random_scorer(31));
        unsetenv("MBGMN_THREADS");
        return r.to_json();
    };
    std::string one = run_with("1");
    CHECK(run_with("2") == one);
    CHECK(run_with("8") == one);
}

TEST_CASE("model scorer matches explicit tape scoring") {
    auto split = ranked_split(40);
    train::TrainConfig cfg;
    cfg.model = {.dim = 4, .low_rank_dim = 2, .heads = 2, .layers = 1};
    cfg.batch_size = 8;
    cfg.samples_per_user = 1;
    cfg.epochs = 1;
    train::Trainer trainer(cfg, split);
    auto state = trainer.init_state();
    trainer.train_epoch(state);

    const std::size_t tgt = split.train.target_behavior();
    auto scorer = eval::model_scorer(trainer.model(), state.params, trainer.graphs(), tgt);

    ad::Tape t;
    auto pv = state.params.register_on(t);
    auto emb = trainer.model().propagate(t, pv, trainer.graphs());
    const std::size_t K = trainer.model().num_behaviors();
    std::vector<std::size_t> users{1, 1, 1}, items{0, 5, 9};
    const Tensor& expected = t.value(trainer.model().score_pairs(t, pv, emb, users,
                                                                 items, K, tgt));
    auto got = scorer(1, items);
    REQUIRE(got.size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(std::abs(got[i] - expected.at(i, 0)) < 1e-10);
}

TEST_CASE("dependency report reflects the final epoch attribution") {
    auto split = ranked_split(40);
    train::TrainConfig cfg;
    cfg.model = {.dim = 4, .low_rank_dim = 2, .heads = 2, .layers = 1};
    cfg.batch_size = 8;
    cfg.samples_per_user = 1;
    cfg.epochs = 2;
    train::Trainer trainer(cfg, split);
    auto state = trainer.init_state();
    trainer.train(state);

    auto report = eval::dependency_report(state.logs);
    CHECK(report.from_epoch == state.logs.back().epoch);
    CHECK(report.matrix == state.logs.back().attribution);
    for (const auto& row : report.matrix)
        for (double x : row) CHECK(x >= 0.0);
    CHECK(!report.to_json().empty());
    CHECK_THROWS_AS(eval::dependency_report({}), std::invalid_argument);

    // the single-task ablation leaves every off-target cell at zero
    cfg.model.no_multi_task = true;
    train::Trainer single(cfg, split);
    auto ss = single.init_state();
    single.train(ss);
    auto sr = eval::dependency_report(ss.logs);
    const std::size_t K = single.model().num_behaviors();
    const std::size_t tgt = split.train.target_behavior();
    for (std::size_t k = 0; k <= K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp)
            if (k != K || kp != tgt) CHECK(sr.matrix[k][kp] == 0.0);
}
