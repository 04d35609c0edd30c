#pragma once

#include <map>
#include <string>
#include <vector>

#include "mbgmn/dataset.hpp"
#include "mbgmn/params.hpp"
#include "mbgmn/tape.hpp"

namespace mbgmn::model {

struct ModelConfig {
    std::size_t dim = 16;           // d
    std::size_t low_rank_dim = 4;   // d'
    std::size_t heads = 2;          // H
    std::size_t layers = 2;         // L
    double activation_slope = 0.1;  // leaky-relu slope

    // Ablation toggles (Table-4 variants)
    bool no_low_rank = false;       // w/o LowR: full-rank generated transform
    bool no_behavior_attention = false;  // w/o MFeat: mean fusion
    bool no_multi_task = false;     // w/o MTask: global-source, target-only loss
    bool no_meta_context = false;   // w/o MetaC: fixed per-behavior transforms
    bool no_meta_prediction = false;  // w/o MetaP: fixed per-(k,k') heads

    bool share_attention_params = true;   // item side reuses the user-side Q
    bool share_context_meta = false;      // item side reuses user-side meta weights

    void validate() const;
};

using ParamVars = std::map<std::string, ad::Var>;

// Per-layer, per-channel embedding matrices plus the order-summed readouts.
// Channels 0..K-1 are behaviors, channel K is the attention-fused global one.
struct EmbeddingState {
    // layers[l][k] for l = 0..L, k = 0..K
    std::vector<std::vector<ad::Var>> user_layers;
    std::vector<std::vector<ad::Var>> item_layers;
    std::vector<ad::Var> user_readout;  // K+1 entries
    std::vector<ad::Var> item_readout;
};

struct AttentionResult {
    ad::Var fused;                 // sum over k of the refined channels
    std::vector<ad::Var> refined;  // H-head refined per-channel embeddings
};

class Model {
public:
    Model(ModelConfig cfg, std::size_t num_users, std::size_t num_items,
          std::size_t num_behaviors);

    const ModelConfig& config() const { return cfg_; }
    std::size_t num_behaviors() const { return K_; }

    // Registers every trainable parameter with seeded N(0, 0.1) init.
    void init_params(ParamStore& store, std::uint64_t seed) const;

    // --- meta-context -----------------------------------------------------
    // Context matrix H for one side and behavior: [E_b[k] || E_self || alpha-sum
    // of counterpart neighbors], one row per entity. side: 'u' or 'v'.
    ad::Var context_matrix(ad::Tape& t, const ParamVars& pv,
                           const data::BehaviorGraphs& graphs, char side,
                           std::size_t behavior) const;
    // Contextualized embeddings per behavior; .first user side, .second item side.
    std::vector<std::pair<ad::Var, ad::Var>> contextualize_all(
        ad::Tape& t, const ParamVars& pv, const data::BehaviorGraphs& graphs) const;

    // --- meta-gnn ----------------------------------------------------------
    std::pair<ad::Var, ad::Var> graph_conv(ad::Tape& t, ad::Var user, ad::Var item,
                                           const data::BehaviorGraph& g) const;
    AttentionResult behavior_attention(ad::Tape& t, const ParamVars& pv,
                                       const std::vector<ad::Var>& channels,
                                       char side) const;
    EmbeddingState propagate(ad::Tape& t, const ParamVars& pv,
                             const data::BehaviorGraphs& graphs) const;

    // --- meta-transfer -----------------------------------------------------
    // phi(v1, v2) = v1*v2 || v1 || v2, rowwise over B x d operands.
    ad::Var phi(ad::Tape& t, ad::Var a, ad::Var b) const;
    // Relation code Gamma for B pairs routed through source channel k and
    // target channel kp (indices into 0..K; kp < K).
    ad::Var meta_gamma(ad::Tape& t, const ParamVars& pv, ad::Var ei_k, ad::Var ej_k,
                       ad::Var ei_kp, ad::Var ej_kp) const;
    struct Head {
        ad::Var p1_flat;  // B x (d*3d), row-major d x 3d per row
        ad::Var b2;       // B x d
        ad::Var p3;       // B x d
    };
    Head generate_head(ad::Tape& t, const ParamVars& pv, ad::Var gamma) const;
    Head fixed_head(ad::Tape& t, const ParamVars& pv, std::size_t src, std::size_t tgt,
                    std::size_t batch) const;  // w/o MetaP path
    ad::Var score(ad::Tape& t, ad::Var ei_k, ad::Var ej_k, const Head& head) const;

    // Scores B (user, item) pairs using source channel src (0..K) for target
    // behavior tgt (0..K-1). Returns B x 1.
    ad::Var score_pairs(ad::Tape& t, const ParamVars& pv, const EmbeddingState& state,
                        const std::vector<std::size_t>& users,
                        const std::vector<std::size_t>& items,
                        std::size_t src, std::size_t tgt) const;

private:
    ad::Var contextualize_side(ad::Tape& t, const ParamVars& pv, ad::Var self_emb,
                               ad::Var ctx, const std::string& side_key,
                               std::size_t behavior) const;
    std::string ctx_key(char side, const std::string& leaf) const;

    ModelConfig cfg_;
    std::size_t I_, J_, K_;
};

// Eq. 9 loss over a batch plus weight decay; also accumulates the per-(k,k')
// hinge attribution used by the dependency report.
struct LossBreakdown {
    ad::Var total;                        // scalar
    // sums[k][kp] and counts[k][kp]: hinge sum and term count per channel pair
    std::vector<std::vector<double>> hinge_sums;
    std::vector<std::vector<std::size_t>> hinge_counts;
};

LossBreakdown build_loss(ad::Tape& t, const Model& model, const ParamVars& pv,
                         const EmbeddingState& state, const data::TrainBatch& batch,
                         double lambda, std::size_t data_target_behavior);

}  // namespace mbgmn::model
