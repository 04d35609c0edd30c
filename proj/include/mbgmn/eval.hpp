#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mbgmn/dataset.hpp"
#include "mbgmn/model.hpp"
#include "mbgmn/params.hpp"
#include "mbgmn/trainer.hpp"

namespace mbgmn::eval {

// hr = [rank <= N]; ndcg = 1/log2(rank+1) if rank <= N else 0.
std::pair<double, double> rank_metrics(std::size_t rank, std::size_t N);

struct EvalReport {
    std::vector<std::size_t> cutoffs;
    std::vector<double> hr;    // per cutoff, mean over evaluated users
    std::vector<double> ndcg;
    struct Bucket {
        std::size_t lo = 0, hi = 0;  // train target-interaction count range, hi inclusive
        std::size_t users = 0;
        std::vector<double> hr, ndcg;
    };
    std::vector<Bucket> buckets;
    std::size_t evaluated_users = 0;
    std::size_t excluded_users = 0;
    std::vector<std::string> exclusion_reasons;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
    std::string to_text() const;
};

// Scores one user's candidate items; must be thread-safe for parallel use.
using Scorer = std::function<std::vector<double>(std::size_t user,
                                                 const std::vector<std::size_t>& items)>;

inline const std::vector<std::size_t> kDefaultCutoffs{1, 3, 5, 7, 10};
inline const std::vector<std::pair<std::size_t, std::size_t>> kDefaultBuckets{
    {1, 4}, {5, 12}, {13, 32}, {33, std::size_t(-1)}};

// Ranks each held-out item against its 99 negatives (score desc, id asc) and
// aggregates HR/NDCG overall and per sparsity bucket. Parallelism is capped
// by the MBGMN_THREADS environment variable.
EvalReport evaluate(const data::SplitDataset& split, const Scorer& scorer,
                    const std::vector<std::size_t>& cutoffs = kDefaultCutoffs,
                    const std::vector<std::pair<std::size_t, std::size_t>>& buckets =
                        kDefaultBuckets);

// Scorer backed by a trained model: one full-graph forward, then per-pair
// scoring through the global channel K+1 for the target behavior.
Scorer model_scorer(const model::Model& model, const ParamStore& params,
                    const data::BehaviorGraphs& graphs, std::size_t target_behavior);

// Item scored by its target-behavior train interaction count; ties by id.
Scorer popularity_scorer(const data::SplitDataset& split);

// Seeded random scores, for metric sanity checks.
Scorer random_scorer(std::uint64_t seed);

// Converged per-(source, target) mean hinge losses from the final epoch log.
struct DependencyReport {
    std::vector<std::vector<double>> matrix;  // (K+1) x K
    std::size_t from_epoch = 0;
    std::string to_json() const;
};

DependencyReport dependency_report(const std::vector<train::EpochLog>& logs);

}  // namespace mbgmn::eval
