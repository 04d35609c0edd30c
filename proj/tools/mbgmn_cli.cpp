#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mbgmn/eval.hpp"
#include "mbgmn/trainer.hpp"

namespace fs = std::filesystem;
using namespace mbgmn;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct Options {
    std::string data;
    std::vector<std::string> behaviors{"view", "cart", "buy"};
    std::string target;  // defaults to the last behavior
    std::string out = ".";
    std::string checkpoint;
    std::string resume;

    std::size_t epochs = 30;
    std::uint64_t seed = 7;
    std::size_t layers = 2;
    std::size_t dim = 16;
    std::size_t low_rank_dim = 4;
    std::size_t heads = 2;
    double lambda = 0.001;
    double learning_rate = 1e-3;
    double lr_decay = 0.96;
    std::size_t batch_size = 32;
    std::size_t samples_per_user = 2;
    std::vector<std::string> ablate;
    std::vector<std::string> drop;

    // synthetic-data parameters
    std::size_t users = 500;
    std::size_t items = 200;
    double density = 0.02;
    double correlation = 0.8;
};

void add_common_options(CLI::App* cmd, Options& o, std::string& config_path) {
    cmd->add_option("--config", config_path,
                    "Flat key = value config file; command-line flags take precedence");
    cmd->add_option("--data", o.data, "Interaction TSV: user<TAB>item<TAB>behavior[<TAB>unix-seconds]");
    cmd->add_option("--behaviors", o.behaviors, "Ordered behavior names")
        ->delimiter(',');
    cmd->add_option("--target-behavior,--target", o.target,
                    "Behavior to predict (default: last of --behaviors)");
    cmd->add_option("--epochs", o.epochs, "Training epochs");
    cmd->add_option("--seed", o.seed, "Global random seed");
    cmd->add_option("--layers", o.layers, "Propagation layers L");
    cmd->add_option("--dim", o.dim, "Embedding dimension d");
    cmd->add_option("--low-rank-dim", o.low_rank_dim, "Generated-transform rank d'");
    cmd->add_option("--heads", o.heads, "Attention heads H");
    cmd->add_option("--lambda", o.lambda, "Weight-decay coefficient");
    cmd->add_option("--learning-rate", o.learning_rate, "Adam learning rate");
    cmd->add_option("--lr-decay", o.lr_decay, "Per-epoch learning-rate decay");
    cmd->add_option("--batch-size", o.batch_size, "Users per batch");
    cmd->add_option("--samples-per-user", o.samples_per_user, "Positive samples per user");
    cmd->add_option("--ablate", o.ablate,
                    "Ablation flags: no_low_rank, no_behavior_attention, no_multi_task, "
                    "no_meta_context, no_meta_prediction")
        ->delimiter(',');
    cmd->add_option("--drop-behaviors", o.drop, "Context behaviors to remove from the data")
        ->delimiter(',');
    cmd->add_option("--out", o.out, "Output directory");
}

model::ModelConfig model_config(const Options& o) {
    model::ModelConfig cfg;
    cfg.dim = o.dim;
    cfg.low_rank_dim = o.low_rank_dim;
    cfg.heads = o.heads;
    cfg.layers = o.layers;
    for (const auto& flag : o.ablate) {
        if (flag == "no_low_rank") cfg.no_low_rank = true;
        else if (flag == "no_behavior_attention") cfg.no_behavior_attention = true;
        else if (flag == "no_multi_task") cfg.no_multi_task = true;
        else if (flag == "no_meta_context") cfg.no_meta_context = true;
        else if (flag == "no_meta_prediction") cfg.no_meta_prediction = true;
        else throw CLI::ValidationError("--ablate", "unknown ablation flag '" + flag + "'");
    }
    return cfg;
}

train::TrainConfig train_config(const Options& o) {
    train::TrainConfig cfg;
    cfg.model = model_config(o);
    cfg.learning_rate = o.learning_rate;
    cfg.lr_decay = o.lr_decay;
    cfg.lambda = o.lambda;
    cfg.batch_size = o.batch_size;
    cfg.samples_per_user = o.samples_per_user;
    cfg.epochs = o.epochs;
    cfg.seed = o.seed;
    cfg.drop_behaviors = o.drop;
    return cfg;
}

std::string target_of(const Options& o) {
    if (!o.target.empty()) return o.target;
    if (o.behaviors.empty()) throw CLI::ValidationError("--behaviors", "behavior list is empty");
    return o.behaviors.back();
}

data::InteractionTensor load_data(const Options& o) {
    if (o.data.empty())
        throw CLI::RequiredError("--data");
    return data::load_interactions(o.data, o.behaviors, target_of(o));
}

void ensure_out_dir(const Options& o) {
    if (!o.out.empty()) fs::create_directories(o.out);
}

std::string out_path(const Options& o, const std::string& name) {
    return (fs::path(o.out) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open output file: " + path);
    f << text;
}

eval::EvalReport run_eval(const train::Trainer& trainer, const ParamStore& params) {
    auto scorer = eval::model_scorer(trainer.model(), params, trainer.graphs(),
                                     trainer.split().train.target_behavior());
    return eval::evaluate(trainer.split(), scorer);
}

struct TrainOutputs {
    train::TrainState state;
    eval::EvalReport report;
};

TrainOutputs run_training(const train::Trainer& trainer, const Options& o,
                          bool verbose = true) {
    TrainOutputs out;
    out.state = trainer.init_state();
    if (!o.resume.empty()) {
        CheckpointState ck = load_checkpoint(o.resume);
        out.state.params = std::move(ck.params);
        out.state.step = ck.step;
        out.state.epoch = ck.epoch;
        out.state.learning_rate = ck.learning_rate;
        if (verbose)
            std::cout << "resumed from " << o.resume << " at epoch " << ck.epoch << "\n";
    }
    trainer.train(out.state, [&](const train::EpochLog& log) {
        if (verbose)
            std::cout << "epoch " << log.epoch << "  lr " << log.learning_rate
                      << "  mean loss " << log.mean_loss << "  batches " << log.batches
                      << std::endl;
    });
    out.report = run_eval(trainer, out.state.params);
    return out;
}

void write_train_outputs(const train::Trainer& trainer, const TrainOutputs& t,
                         const Options& o) {
    ensure_out_dir(o);
    save_checkpoint({t.state.params, t.state.step, t.state.epoch, t.state.learning_rate},
                    out_path(o, "checkpoint.bin"));
    train::save_epoch_logs(t.state.logs, out_path(o, "epochs.jsonl"));
    write_text(out_path(o, "eval.json"), t.report.to_json() + "\n");
    write_text(out_path(o, "eval.txt"), t.report.to_text());
    if (!t.state.logs.empty())
        write_text(out_path(o, "dependency.json"),
                   eval::dependency_report(t.state.logs).to_json() + "\n");
    data::save_id_maps(trainer.split().train, out_path(o, "user_ids.tsv"),
                       out_path(o, "item_ids.tsv"));
}

int cmd_synth(const Options& o) {
    data::SyntheticSpec spec;
    spec.num_users = o.users;
    spec.num_items = o.items;
    spec.num_behaviors = o.behaviors.size();
    spec.density = o.density;
    spec.correlation = o.correlation;
    spec.seed = o.seed;
    spec.behavior_names = o.behaviors;
    auto t = data::generate_synthetic(spec);
    ensure_out_dir(o);
    data::save_interactions(t, out_path(o, "data.tsv"));
    data::save_id_maps(t, out_path(o, "user_ids.tsv"), out_path(o, "item_ids.tsv"));
    std::cout << "wrote " << out_path(o, "data.tsv") << ": " << t.num_users() << " users, "
              << t.num_items() << " items, " << t.event_count() << " events across "
              << t.num_behaviors() << " behaviors\n";
    return 0;
}

int cmd_train(const Options& o) {
    auto tensor = load_data(o);
    auto split = data::leave_one_out_split(tensor, o.seed);
    train::Trainer trainer(train_config(o), split);
    TrainOutputs out = run_training(trainer, o);
    write_train_outputs(trainer, out, o);
    std::cout << out.report.to_text();
    return 0;
}

int cmd_evaluate(const Options& o) {
    if (o.checkpoint.empty()) throw CLI::RequiredError("--checkpoint");
    auto tensor = load_data(o);
    auto split = data::leave_one_out_split(tensor, o.seed);
    train::Trainer trainer(train_config(o), split);

    CheckpointState ck = load_checkpoint(o.checkpoint);
    ParamStore expected;
    trainer.model().init_params(expected, o.seed);
    for (const auto& e : expected.entries()) {
        if (!ck.params.has(e.name))
            throw std::runtime_error("checkpoint is missing parameter '" + e.name +
                                     "'; model flags must match the training run");
        if (ck.params.value(e.name).shape() != e.value.shape())
            throw std::runtime_error("checkpoint parameter '" + e.name +
                                     "' has mismatched shape");
    }

    auto report = run_eval(trainer, ck.params);
    ensure_out_dir(o);
    write_text(out_path(o, "eval.json"), report.to_json() + "\n");
    write_text(out_path(o, "eval.txt"), report.to_text());
    std::cout << report.to_text();
    return 0;
}

int cmd_ablate(const Options& o) {
    auto tensor = load_data(o);
    auto split = data::leave_one_out_split(tensor, o.seed);
    const std::string target = target_of(o);

    struct Variant {
        std::string name;
        std::vector<std::string> ablate;
        std::vector<std::string> drop;
    };
    std::vector<Variant> variants{{"full", {}, {}},
                                  {"no_low_rank", {"no_low_rank"}, {}},
                                  {"no_behavior_attention", {"no_behavior_attention"}, {}},
                                  {"no_multi_task", {"no_multi_task"}, {}},
                                  {"no_meta_context", {"no_meta_context"}, {}},
                                  {"no_meta_prediction", {"no_meta_prediction"}, {}}};
    // behavior-drop masks: each context behavior alone, then all of them
    std::vector<std::string> context;
    for (const auto& b : o.behaviors)
        if (b != target) context.push_back(b);
    for (const auto& b : context) variants.push_back({"drop_" + b, {}, {b}});
    if (context.size() > 1)
        variants.push_back({"target_only", {}, context});

    ensure_out_dir(o);
    nlohmann::json rows = nlohmann::json::array();
    std::string table = "variant                  HR@10    NDCG@10\n";
    for (const auto& v : variants) {
        Options vo = o;
        vo.ablate = v.ablate;
        vo.drop = v.drop;
        std::cout << "=== " << v.name << " ===" << std::endl;
        train::Trainer trainer(train_config(vo), split);
        TrainOutputs out = run_training(trainer, vo);
        const double hr10 = out.report.hr.back(), ndcg10 = out.report.ndcg.back();
        rows.push_back({{"variant", v.name},
                        {"ablate", v.ablate},
                        {"drop_behaviors", v.drop},
                        {"hr", out.report.hr},
                        {"ndcg", out.report.ndcg},
                        {"cutoffs", out.report.cutoffs}});
        char line[96];
        std::snprintf(line, sizeof line, "%-24s %.4f   %.4f\n", v.name.c_str(), hr10, ndcg10);
        table += line;
    }
    std::string jsonl;
    for (const auto& r : rows) jsonl += r.dump() + "\n";
    write_text(out_path(o, "ablation.jsonl"), jsonl);
    write_text(out_path(o, "ablation.txt"), table);
    std::cout << table;
    return 0;
}

int cmd_gradcheck(const Options& o) {
    // tiny seeded instance: every parameter coordinate against central
    // finite differences of the full pipeline loss
    const std::size_t I = 6, J = 6, K = 3;
    data::SyntheticSpec spec{.num_users = I, .num_items = J, .num_behaviors = K,
                             .density = 0.25, .correlation = 0.5, .seed = o.seed};
    auto tensor = data::generate_synthetic(spec);
    data::SplitDataset split{tensor, {}, {}};
    auto graphs = data::build_graphs(tensor);

    model::ModelConfig mc = model_config(o);
    mc.dim = 4;
    mc.low_rank_dim = 2;
    mc.heads = 2;
    mc.layers = 2;
    model::Model m(mc, I, J, K);
    ParamStore params;
    m.init_params(params, o.seed);

    std::vector<std::size_t> users(I);
    for (std::size_t i = 0; i < I; ++i) users[i] = i;
    auto batch = data::sample_batch(split, users, 1, o.seed);
    if (batch.empty()) throw std::runtime_error("gradcheck instance produced no batch");

    auto loss_of = [&](ParamStore& p, Tensor* grad_flat) {
        ad::Tape t;
        auto pv = p.register_on(t);
        auto emb = m.propagate(t, pv, graphs);
        auto loss = model::build_loss(t, m, pv, emb, batch, 0.001,
                                      tensor.target_behavior());
        double v = t.value(loss.total)[0];
        if (grad_flat) {
            t.backward(loss.total);
            ParamStore g = p;
            for (auto& e : g.entries()) e.value = t.grad(pv.at(e.name));
            *grad_flat = g.flatten();
        }
        return v;
    };

    Tensor analytic;
    loss_of(params, &analytic);
    Tensor at = params.flatten();
    auto f = [&](const Tensor& flat) {
        ParamStore p = params;
        p.unflatten(flat);
        return loss_of(p, nullptr);
    };
    const auto started = std::chrono::steady_clock::now();
    auto report = ad::finite_diff_check(f, at, analytic, 1e-5, 1e-4);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::cout << "checked " << report.checked << " coordinates in " << secs
              << " s, max relative error " << report.max_rel_error << " (worst index "
              << report.worst_index << ")\n";
    if (!report.pass) {
        std::cerr << "gradcheck failed: relative error above 1e-4\n";
        return kExitNumerical;
    }
    std::cout << "gradcheck passed\n";
    return 0;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Appends "--key value" pairs from a flat config file for every key not
// already present on the command line, so explicit flags always win.
void inject_config(std::vector<std::string>& args, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);

    auto given = [&](const std::string& flag) {
        for (const auto& a : args)
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        return false;
    };
    // flags that name the same option
    auto aliased = [&](const std::string& flag) {
        if (flag == "--target-behavior" || flag == "--target")
            return given("--target-behavior") || given("--target");
        return given(flag);
    };

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                        ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                        ": expected 'key = value'");
        const std::string flag = "--" + key;
        if (aliased(flag)) continue;
        args.push_back(flag);
        args.push_back(value);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-behavior graph meta network trainer/evaluator"};
    app.require_subcommand(1);

    Options o;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic interaction TSV");
    CLI::App* train_cmd = app.add_subcommand("train", "Train and evaluate a model");
    CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate a saved checkpoint");
    CLI::App* ablate = app.add_subcommand("ablate", "Run the ablation matrix");
    CLI::App* gradcheck = app.add_subcommand(
        "gradcheck", "Finite-difference check of the full pipeline gradients");
    std::string config_path;
    for (CLI::App* cmd : {synth, train_cmd, evaluate, ablate, gradcheck})
        add_common_options(cmd, o, config_path);
    synth->add_option("--users", o.users, "Synthetic user count");
    synth->add_option("--items", o.items, "Synthetic item count");
    synth->add_option("--density", o.density, "Per-behavior interaction density");
    synth->add_option("--correlation", o.correlation,
                      "Context/target behavior correlation in [0,1]");
    train_cmd->add_option("--resume", o.resume, "Checkpoint to resume training from");
    evaluate->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        for (std::size_t i = 0; i < args.size(); ++i) {
            if (args[i] == "--config" && i + 1 < args.size()) {
                inject_config(args, args[i + 1]);
                break;
            }
            if (args[i].rfind("--config=", 0) == 0) {
                inject_config(args, args[i].substr(9));
                break;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        std::vector<std::string> storage(args.rbegin(), args.rend());
        app.parse(std::move(storage));
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(o);
        if (train_cmd->parsed()) return cmd_train(o);
        if (evaluate->parsed()) return cmd_evaluate(o);
        if (ablate->parsed()) return cmd_ablate(o);
        if (gradcheck->parsed()) return cmd_gradcheck(o);
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const train::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
