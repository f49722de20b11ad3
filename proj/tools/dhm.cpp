// dhm: command-line front end for training, evaluation and the experiment
// harness. Exit status: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dhm/harness/commands.hpp"

namespace h = dhm::harness;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "Config file of key = value lines")->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Run seed (overrides the config)");
    cmd->add_option("--out", c.out, "Output directory (overrides the config)");
}

h::RunConfig resolve(const Common& c) {
    h::RunConfig cfg = c.config.empty() ? h::parse_config_text("") : h::parse_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    return cfg;
}

void print_report(const char* name, const dhm::EvalReport& r) {
    std::printf("%s %.4f +- %.4f (%d)\n", name, r.mean, r.ci95, r.n_episodes);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic-head meta-learning experiments"};
    app.require_subcommand(1);

    Common train_o, eval_o, stab_o, sweep_o, abl_o, exp_o;
    auto* train = app.add_subcommand("train", "Train a model and write checkpoint and metrics");
    add_common(train, train_o);

    auto* eval = app.add_subcommand("eval", "Few-shot and zero-shot evaluation of a checkpoint");
    add_common(eval, eval_o);
    std::string eval_ckpt;
    std::optional<int> way, shot, episodes, adapt_steps;
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint to evaluate")->required();
    eval->add_option("--way", way, "Classes per episode");
    eval->add_option("--shot", shot, "Support samples per class");
    eval->add_option("--episodes", episodes, "Number of test episodes");
    eval->add_option("--adapt-steps", adapt_steps, "Head adaptation steps per episode");

    auto* stab = app.add_subcommand("stability", "Train and record layer-wise representation stability");
    add_common(stab, stab_o);

    auto* sweep = app.add_subcommand("sweep", "Train and evaluate every cell of a parameter grid");
    add_common(sweep, sweep_o);
    std::vector<std::string> grid_specs;
    sweep->add_option("--grid", grid_specs, "key=v1,v2,... (repeatable)")->required()->allow_extra_args(false);

    auto* abl = app.add_subcommand("ablate", "Compare task-construction variants");
    add_common(abl, abl_o);

    auto* exp = app.add_subcommand("export-embeddings", "Write per-sample embeddings of the configured dataset");
    add_common(exp, exp_o);
    std::string exp_ckpt;
    exp->add_option("--ckpt", exp_ckpt, "Checkpoint whose body embeds the data")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    // Usage problems found while resolving the configuration exit with 1.
    h::RunConfig cfg;
    std::vector<h::GridAxis> grid;
    try {
        if (train->parsed()) cfg = resolve(train_o);
        if (eval->parsed()) {
            cfg = resolve(eval_o);
            if (way) h::set_key(cfg, "eval_way", std::to_string(*way));
            if (shot) h::set_key(cfg, "eval_shot", std::to_string(*shot));
            if (episodes) h::set_key(cfg, "eval_episodes", std::to_string(*episodes));
            if (adapt_steps) h::set_key(cfg, "eval_adapt_steps", std::to_string(*adapt_steps));
        }
        if (stab->parsed()) cfg = resolve(stab_o);
        if (sweep->parsed()) {
            cfg = resolve(sweep_o);
            for (const auto& g : grid_specs) grid.push_back(h::parse_grid(g));
        }
        if (abl->parsed()) cfg = resolve(abl_o);
        if (exp->parsed()) cfg = resolve(exp_o);
        h::validate(cfg);
    } catch (const dhm::ParseError& e) {
        std::fprintf(stderr, "dhm: config error: %s\n", e.what());
        return 1;
    } catch (const dhm::ArgumentError& e) {
        std::fprintf(stderr, "dhm: config error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dhm: %s\n", e.what());
        return 2;
    }

    try {
        if (train->parsed()) {
            const auto out = h::cmd_train(cfg);
            std::printf("trained %s for %zu epochs, mean step %.4fs -> %s\n", h::run_id(cfg).c_str(), out.log.size(),
                        h::mean_step_seconds(out.log), cfg.out.c_str());
        } else if (eval->parsed()) {
            const auto e = h::cmd_eval(cfg, eval_ckpt);
            print_report("fewshot_acc", e.fewshot);
            if (e.zeroshot) print_report("zeroshot_acc", *e.zeroshot);
        } else if (stab->parsed()) {
            const auto s = h::cmd_stability(cfg);
            std::printf("%zu stability rows -> %s\n", s.records.size(), cfg.out.c_str());
        } else if (sweep->parsed()) {
            const auto cells = h::cmd_sweep(cfg, grid);
            std::size_t ok = 0;
            for (const auto& c : cells) ok += c.ok;
            std::printf("%zu/%zu cells completed -> %s\n", ok, cells.size(), cfg.out.c_str());
        } else if (abl->parsed()) {
            for (const auto& r : h::cmd_ablate(cfg)) {
                std::printf("%-4s ", r.variant.c_str());
                print_report("fewshot_acc", r.eval.fewshot);
            }
        } else if (exp->parsed()) {
            h::cmd_export_embeddings(cfg, exp_ckpt);
            std::printf("embeddings -> %s\n", cfg.out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dhm: %s\n", e.what());
        return 2;
    }
    return 0;
}
