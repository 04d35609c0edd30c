#include "mbgmn/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mbgmn::model {

namespace {

std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    // splitmix finalizer over (seed, name hash)
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

void ModelConfig::validate() const {
    if (dim == 0 || heads == 0 || layers == 0)
        throw std::invalid_argument("dim, heads and layers must be positive");
    if (dim % heads != 0)
        throw std::invalid_argument("head count " + std::to_string(heads) +
                                    " must divide embedding dim " + std::to_string(dim));
    if (!no_low_rank && (low_rank_dim == 0 || low_rank_dim >= dim))
        throw std::invalid_argument("low-rank dim must lie in [1, dim)");
}

Model::Model(ModelConfig cfg, std::size_t num_users, std::size_t num_items,
             std::size_t num_behaviors)
    : cfg_(cfg), I_(num_users), J_(num_items), K_(num_behaviors) {
    cfg_.validate();
    if (K_ == 0) throw std::invalid_argument("need at least one behavior");
}

std::string Model::ctx_key(char side, const std::string& leaf) const {
    const char s = cfg_.share_context_meta ? 'u' : side;
    return std::string("ctx.") + s + "." + leaf;
}

void Model::init_params(ParamStore& store, std::uint64_t seed) const {
    const std::size_t d = cfg_.dim, dl = cfg_.low_rank_dim;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape) {
        if (!store.has(name)) store.add(name, std::move(shape), name_seed(seed, name));
    };
    add("emb.user", {I_, d});
    add("emb.item", {J_, d});
    add("emb.beh", {K_, d});

    if (cfg_.no_meta_context) {
        for (std::size_t k = 0; k < K_; ++k)
            add("ctx.fixed." + std::to_string(k), {d, d});
    } else {
        std::vector<char> sides = cfg_.share_context_meta ? std::vector<char>{'u'}
                                                          : std::vector<char>{'u', 'v'};
        for (char s : sides) {
            const std::string p = std::string("ctx.") + s + ".";
            if (cfg_.no_low_rank) {
                add(p + "W", {d * d, 3 * d});
                add(p + "Vbar", {d, d});
            } else {
                add(p + "W1", {dl * d, 3 * d});
                add(p + "V1bar", {dl, d});
                add(p + "W2", {d * dl, 3 * d});
                add(p + "V2bar", {d, dl});
            }
        }
    }

    if (!cfg_.no_behavior_attention) {
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            add("attn.u.Q" + std::to_string(h), {d / cfg_.heads, d});
            if (!cfg_.share_attention_params)
                add("attn.v.Q" + std::to_string(h), {d / cfg_.heads, d});
        }
    }

    if (cfg_.no_meta_prediction) {
        for (std::size_t k = 0; k <= K_; ++k)
            for (std::size_t kp = 0; kp < K_; ++kp) {
                const std::string p = "tr.fixed." + std::to_string(k) + "." +
                                      std::to_string(kp) + ".";
                add(p + "P1", {d, 3 * d});
                add(p + "b2", {d});
                add(p + "p3", {d});
            }
    } else {
        add("tr.WZ", {d, 3 * d});
        add("tr.WG", {d, 3 * d});
        add("tr.WP", {3 * d * d, d});
        add("tr.Wb", {d, d});
        add("tr.Wp", {d, d});
        add("tr.P1bar", {d, 3 * d});
        add("tr.b2bar", {d});
        add("tr.p3bar", {d});
    }
}

ad::Var Model::context_matrix(ad::Tape& t, const ParamVars& pv,
                              const data::BehaviorGraphs& graphs, char side,
                              std::size_t behavior) const {
    const data::BehaviorGraph& g = graphs.per_behavior.at(behavior);
    ad::Var self = pv.at(side == 'u' ? "emb.user" : "emb.item");
    ad::Var other = pv.at(side == 'u' ? "emb.item" : "emb.user");
    const SparseMatrix* adj = side == 'u' ? &g.normalized : &g.normalized_t;
    const std::size_t n = side == 'u' ? I_ : J_;
    ad::Var neigh = t.spmm(adj, other);
    ad::Var beh = t.tile_rows(t.gather_rows(pv.at("emb.beh"), {behavior}), n);
    return t.concat_last(beh, self, neigh);
}

ad::Var Model::contextualize_side(ad::Tape& t, const ParamVars& pv, ad::Var self_emb,
                                  ad::Var ctx, const std::string& side_key,
                                  std::size_t behavior) const {
    const std::size_t d = cfg_.dim, dl = cfg_.low_rank_dim;
    const std::size_t n = t.value(self_emb).rows();
    if (cfg_.no_meta_context)
        return t.matmul_nt(self_emb, pv.at("ctx.fixed." + std::to_string(behavior)));
    if (cfg_.no_low_rank) {
        ad::Var flat = t.add(t.matmul_nt(ctx, pv.at(side_key + "W")),
                             t.tile_rows(t.reshape(pv.at(side_key + "Vbar"), {1, d * d}), n));
        return t.rowwise_matvec(flat, self_emb, d, d);
    }
    ad::Var v1 = t.add(t.matmul_nt(ctx, pv.at(side_key + "W1")),
                       t.tile_rows(t.reshape(pv.at(side_key + "V1bar"), {1, dl * d}), n));
    ad::Var low = t.rowwise_matvec(v1, self_emb, dl, d);
    ad::Var v2 = t.add(t.matmul_nt(ctx, pv.at(side_key + "W2")),
                       t.tile_rows(t.reshape(pv.at(side_key + "V2bar"), {1, d * dl}), n));
    return t.rowwise_matvec(v2, low, d, dl);
}

std::vector<std::pair<ad::Var, ad::Var>> Model::contextualize_all(
    ad::Tape& t, const ParamVars& pv, const data::BehaviorGraphs& graphs) const {
    std::vector<std::pair<ad::Var, ad::Var>> out;
    for (std::size_t k = 0; k < K_; ++k) {
        ad::Var hu = cfg_.no_meta_context ? ad::Var{} : context_matrix(t, pv, graphs, 'u', k);
        ad::Var hv = cfg_.no_meta_context ? ad::Var{} : context_matrix(t, pv, graphs, 'v', k);
        out.emplace_back(
            contextualize_side(t, pv, pv.at("emb.user"), hu, ctx_key('u', ""), k),
            contextualize_side(t, pv, pv.at("emb.item"), hv, ctx_key('v', ""), k));
    }
    return out;
}

std::pair<ad::Var, ad::Var> Model::graph_conv(ad::Tape& t, ad::Var user, ad::Var item,
                                              const data::BehaviorGraph& g) const {
    ad::Var u = t.add(user, t.leaky_relu(t.spmm(&g.normalized, item), cfg_.activation_slope));
    ad::Var v = t.add(item, t.leaky_relu(t.spmm(&g.normalized_t, user), cfg_.activation_slope));
    return {u, v};
}

AttentionResult Model::behavior_attention(ad::Tape& t, const ParamVars& pv,
                                          const std::vector<ad::Var>& channels,
                                          char side) const {
    const std::size_t K = channels.size();
    if (K == 0) throw std::invalid_argument("attention over zero channels");
    if (cfg_.no_behavior_attention) {
        ad::Var sum = channels[0];
        for (std::size_t k = 1; k < K; ++k) sum = t.add(sum, channels[k]);
        return {t.scale_shift(sum, 1.0 / static_cast<double>(K)), channels};
    }
    const std::size_t H = cfg_.heads, d = cfg_.dim, dh = d / H;
    const char qs = (side == 'v' && !cfg_.share_attention_params) ? 'v' : 'u';
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // refined[k] accumulates head slices in head order
    std::vector<std::vector<ad::Var>> head_parts(K);
    for (std::size_t h = 0; h < H; ++h) {
        ad::Var q = pv.at(std::string("attn.") + qs + ".Q" + std::to_string(h));
        std::vector<ad::Var> proj(K);
        for (std::size_t k = 0; k < K; ++k) proj[k] = t.matmul_nt(channels[k], q);
        for (std::size_t k = 0; k < K; ++k) {
            std::vector<ad::Var> logit_cols;
            for (std::size_t kp = 0; kp < K; ++kp)
                logit_cols.push_back(t.scale_shift(t.rowwise_dot(proj[k], proj[kp]), inv_sqrt));
            ad::Var beta = t.softmax_last(t.concat_last(logit_cols));
            ad::Var head;
            for (std::size_t kp = 0; kp < K; ++kp) {
                ad::Var slice = t.slice_last(channels[kp], h * dh, (h + 1) * dh);
                ad::Var weighted = t.mul(slice, t.slice_last(beta, kp, kp + 1));
                head = head.valid() ? t.add(head, weighted) : weighted;
            }
            head_parts[k].push_back(head);
        }
    }
    std::vector<ad::Var> refined(K);
    for (std::size_t k = 0; k < K; ++k) refined[k] = t.concat_last(head_parts[k]);
    ad::Var fused = refined[0];
    for (std::size_t k = 1; k < K; ++k) fused = t.add(fused, refined[k]);
    return {fused, std::move(refined)};
}

EmbeddingState Model::propagate(ad::Tape& t, const ParamVars& pv,
                                const data::BehaviorGraphs& graphs) const {
    EmbeddingState st;
    const std::size_t L = cfg_.layers;
    auto ctx = contextualize_all(t, pv, graphs);

    std::vector<ad::Var> u0(K_ + 1), v0(K_ + 1);
    std::vector<ad::Var> uch(K_), vch(K_);
    for (std::size_t k = 0; k < K_; ++k) {
        uch[k] = ctx[k].first;
        vch[k] = ctx[k].second;
        u0[k] = uch[k];
        v0[k] = vch[k];
    }
    u0[K_] = behavior_attention(t, pv, uch, 'u').fused;
    v0[K_] = behavior_attention(t, pv, vch, 'v').fused;
    st.user_layers.push_back(u0);
    st.item_layers.push_back(v0);

    for (std::size_t l = 1; l <= L; ++l) {
        std::vector<ad::Var> ul(K_ + 1), vl(K_ + 1);
        for (std::size_t k = 0; k < K_; ++k) {
            auto [u, v] = graph_conv(t, st.user_layers[l - 1][k], st.item_layers[l - 1][k],
                                     graphs.per_behavior[k]);
            ul[k] = u;
            vl[k] = v;
        }
        // the fused channel is recomputed from the post-conv channels each layer
        std::vector<ad::Var> ukk(ul.begin(), ul.begin() + static_cast<std::ptrdiff_t>(K_));
        std::vector<ad::Var> vkk(vl.begin(), vl.begin() + static_cast<std::ptrdiff_t>(K_));
        ul[K_] = behavior_attention(t, pv, ukk, 'u').fused;
        vl[K_] = behavior_attention(t, pv, vkk, 'v').fused;
        st.user_layers.push_back(ul);
        st.item_layers.push_back(vl);
    }

    st.user_readout.resize(K_ + 1);
    st.item_readout.resize(K_ + 1);
    for (std::size_t k = 0; k <= K_; ++k) {
        ad::Var us = st.user_layers[0][k], vs = st.item_layers[0][k];
        for (std::size_t l = 1; l <= L; ++l) {
            us = t.add(us, st.user_layers[l][k]);
            vs = t.add(vs, st.item_layers[l][k]);
        }
        st.user_readout[k] = us;
        st.item_readout[k] = vs;
    }
    return st;
}

ad::Var Model::phi(ad::Tape& t, ad::Var a, ad::Var b) const {
    return t.concat_last(t.mul(a, b), a, b);
}

ad::Var Model::meta_gamma(ad::Tape& t, const ParamVars& pv, ad::Var ei_k, ad::Var ej_k,
                          ad::Var ei_kp, ad::Var ej_kp) const {
    const double s = cfg_.activation_slope;
    ad::Var zk = t.leaky_relu(t.matmul_nt(phi(t, ei_k, ej_k), pv.at("tr.WZ")), s);
    ad::Var zkp = t.leaky_relu(t.matmul_nt(phi(t, ei_kp, ej_kp), pv.at("tr.WZ")), s);
    return t.leaky_relu(t.matmul_nt(phi(t, zk, zkp), pv.at("tr.WG")), s);
}

Model::Head Model::generate_head(ad::Tape& t, const ParamVars& pv, ad::Var gamma) const {
    const std::size_t d = cfg_.dim;
    const std::size_t n = t.value(gamma).rows();
    Head h;
    h.p1_flat = t.add(t.matmul_nt(gamma, pv.at("tr.WP")),
                      t.tile_rows(t.reshape(pv.at("tr.P1bar"), {1, 3 * d * d}), n));
    h.b2 = t.add(t.matmul_nt(gamma, pv.at("tr.Wb")), t.tile_rows(pv.at("tr.b2bar"), n));
    h.p3 = t.add(t.matmul_nt(gamma, pv.at("tr.Wp")), t.tile_rows(pv.at("tr.p3bar"), n));
    return h;
}

Model::Head Model::fixed_head(ad::Tape& t, const ParamVars& pv, std::size_t src,
                              std::size_t tgt, std::size_t batch) const {
    const std::size_t d = cfg_.dim;
    const std::string p = "tr.fixed." + std::to_string(src) + "." + std::to_string(tgt) + ".";
    Head h;
    h.p1_flat = t.tile_rows(t.reshape(pv.at(p + "P1"), {1, 3 * d * d}), batch);
    h.b2 = t.tile_rows(pv.at(p + "b2"), batch);
    h.p3 = t.tile_rows(pv.at(p + "p3"), batch);
    return h;
}

ad::Var Model::score(ad::Tape& t, ad::Var ei_k, ad::Var ej_k, const Head& head) const {
    const std::size_t d = cfg_.dim;
    ad::Var eta = t.leaky_relu(
        t.add(t.rowwise_matvec(head.p1_flat, phi(t, ei_k, ej_k), d, 3 * d), head.b2),
        cfg_.activation_slope);
    return t.rowwise_dot(eta, head.p3);
}

ad::Var Model::score_pairs(ad::Tape& t, const ParamVars& pv, const EmbeddingState& state,
                           const std::vector<std::size_t>& users,
                           const std::vector<std::size_t>& items,
                           std::size_t src, std::size_t tgt) const {
    if (src > K_ || tgt >= K_)
        throw std::out_of_range("channel index out of range");
    if (users.size() != items.size())
        throw std::invalid_argument("user/item lists must have equal length");
    ad::Var ei_k = t.gather_rows(state.user_readout[src], users);
    ad::Var ej_k = t.gather_rows(state.item_readout[src], items);
    Head head;
    if (cfg_.no_meta_prediction) {
        head = fixed_head(t, pv, src, tgt, users.size());
    } else {
        ad::Var ei_kp = t.gather_rows(state.user_readout[tgt], users);
        ad::Var ej_kp = t.gather_rows(state.item_readout[tgt], items);
        head = generate_head(t, pv, meta_gamma(t, pv, ei_k, ej_k, ei_kp, ej_kp));
    }
    return score(t, ei_k, ej_k, head);
}

LossBreakdown build_loss(ad::Tape& t, const Model& model, const ParamVars& pv,
                         const EmbeddingState& state, const data::TrainBatch& batch,
                         double lambda, std::size_t data_target_behavior) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    const std::size_t K = model.num_behaviors();
    const bool mtask = model.config().no_multi_task;

    LossBreakdown out;
    out.hinge_sums.assign(K + 1, std::vector<double>(K, 0.0));
    out.hinge_counts.assign(K + 1, std::vector<std::size_t>(K, 0));

    // group tuples by supervised behavior k'
    std::vector<std::vector<std::size_t>> by_target(K);
    for (std::size_t i = 0; i < batch.size(); ++i)
        by_target[batch[i].target_behavior].push_back(i);

    ad::Var total;
    for (std::size_t kp = 0; kp < K; ++kp) {
        if (by_target[kp].empty()) continue;
        if (mtask && kp != data_target_behavior) continue;
        std::vector<std::size_t> users, pos, neg;
        for (std::size_t i : by_target[kp]) {
            users.push_back(batch[i].user);
            pos.push_back(batch[i].positive_item);
            neg.push_back(batch[i].negative_item);
        }
        for (std::size_t k = 0; k <= K; ++k) {
            if (mtask && k != K) continue;
            ad::Var ps = model.score_pairs(t, pv, state, users, pos, k, kp);
            ad::Var ns = model.score_pairs(t, pv, state, users, neg, k, kp);
            ad::Var hinge = t.relu(t.scale_shift(t.sub(ns, ps), 1.0, 1.0));
            ad::Var cell = t.sum_all(hinge);
            out.hinge_sums[k][kp] = t.value(cell)[0];
            out.hinge_counts[k][kp] = users.size();
            total = total.valid() ? t.add(total, cell) : cell;
        }
    }
    if (lambda != 0.0) {
        ad::Var reg;
        for (const auto& [name, var] : pv) {
            ad::Var sq = t.sum_all(t.mul(var, var));
            reg = reg.valid() ? t.add(reg, sq) : sq;
        }
        total = t.add(total, t.scale_shift(reg, lambda));
    }
    out.total = total;
    return out;
}

}  // namespace mbgmn::model
