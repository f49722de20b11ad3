#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <regex>
#include <set>
#include <sstream>

#include "dhm/harness/commands.hpp"

using namespace dhm;
using namespace dhm::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dhm_harness_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// A small, quick configuration on the default blob data.
RunConfig quick(const fs::path& out, int epochs = 3) {
    auto c = parse_config_text(
        "sub_sample = 60\n"
        "meta_batch = 2\n"
        "inner_steps = 2\n"
        "hidden = 32\n"
        "embed_dim = 16\n"
        "eval_episodes = 8\n"
        "eval_adapt_steps = 10\n"
        "zeroshot_seeds = 2\n"
        "probe_size = 64\n");
    c.hyper.epochs = epochs;
    c.out = out.string();
    return c;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(DHM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::size_t count(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
    return n;
}

std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

// ---- config ------------------------------------------------------------------------

TEST(Config, EmptyFileGivesDefaults) {
    const auto c = parse_config_text("");
    EXPECT_EQ(c.hyper.alpha, 0.05);
    EXPECT_EQ(c.hyper.eta, 0.001);
    EXPECT_EQ(c.hyper.meta_batch, 8);
    EXPECT_EQ(c.hyper.dbscan.eps, 1.0);
    EXPECT_EQ(c.hyper.dbscan.min_samples, 15);
    EXPECT_EQ(c.hyper.sub_sample, 100u);
    EXPECT_EQ(c.eval.adapt_steps, 50);
    EXPECT_EQ(c.milestones, (std::vector<double>{0.5, 0.6, 0.7, 0.8, 0.9}));
}

TEST(Config, CommentsBlankLinesAndWhitespace) {
    const auto c = parse_config_text("# header\n\n  alpha=0.1   # inline\nmode = wct\n\teps = 2.5\n");
    EXPECT_EQ(c.hyper.alpha, 0.1);
    EXPECT_EQ(c.mode, TrainMode::wct);
    EXPECT_EQ(c.hyper.dbscan.eps, 2.5);
}

TEST(Config, ConstraintErrorNamesKeyAndLine) {
    try {
        parse_config_text("eta = 0.01\nalpha = -1\n");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2);
        EXPECT_NE(std::string(e.what()).find("alpha"), std::string::npos);
    }
}

TEST(Config, RejectsBadInput) {
    auto line_of = [](const std::string& text) {
        try {
            parse_config_text(text);
        } catch (const ParseError& e) {
            return e.line();
        }
        return -1;
    };
    EXPECT_EQ(line_of("alpha = 0.1\nlearning_rate = 3\n"), 2);  // unknown key
    EXPECT_EQ(line_of("epochs = ten\n"), 1);                     // type mismatch
    EXPECT_EQ(line_of("epochs = 1.5\n"), 1);
    EXPECT_EQ(line_of("mode = maml2\n"), 1);
    EXPECT_EQ(line_of("\n\njust words\n"), 3);
    EXPECT_EQ(line_of("eps = 1\neps = 2\n"), 2);  // duplicate
    EXPECT_EQ(line_of("unit_norm = maybe\n"), 1);
    EXPECT_EQ(line_of("eps = 0\n"), 1);
    EXPECT_EQ(line_of("train_frac = 0.7\nval_frac = 0.3\n"), 0);  // cross-key check
    EXPECT_EQ(line_of("way_min = 6\nway_max = 4\n"), 0);
    EXPECT_EQ(line_of("dataset = images\n"), 0);
    EXPECT_EQ(line_of("head_mode = static\nway_min = 3\nway_max = 8\n"), 0);
    EXPECT_EQ(line_of("alpha = 0\neta = 0\n"), -1);
}

TEST(Config, ResolvedEchoIsAFixedPoint) {
    const auto c = parse_config_text(
        "mode = anil\nalpha = 0.1\neta = 3e-4\nhidden = 8,16\nmilestones = 0.25,0.75\nscope = head_only\n"
        "unit_norm = true\nblob_intra = 0.1\nseed = 99\n");
    const auto once = to_text(c);
    const auto twice = to_text(parse_config_text(once));
    EXPECT_EQ(once, twice);
    EXPECT_EQ(to_text(parse_config_text("")), to_text(parse_config_text(to_text(parse_config_text("")))));
    for (const auto& k : config_keys()) EXPECT_NE(("\n" + once).find("\n" + k + " = "), std::string::npos) << k;
}

TEST(Config, HashIgnoresOutputDirectory) {
    auto a = parse_config_text("");
    auto b = a;
    b.out = "elsewhere";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seed = 4;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, GridParsing) {
    const auto g = parse_grid("eps=0.5, 1.0,2");
    EXPECT_EQ(g.key, "eps");
    EXPECT_EQ(g.values, (std::vector<std::string>{"0.5", "1.0", "2"}));
    EXPECT_THROW(parse_grid("nonsense=1,2"), ParseError);
    EXPECT_THROW(parse_grid("eps"), ParseError);
    EXPECT_THROW(parse_grid("eps=1,,2"), ParseError);
}

TEST(Config, SampleConfigsAreValid) {
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(DHM_CONFIG_DIR)) {
        if (e.path().extension() != ".cfg") continue;
        ++n;
        EXPECT_NO_THROW(validate(parse_config(e.path()))) << e.path();
    }
    EXPECT_GE(n, 1u);
}

// ---- logs --------------------------------------------------------------------------

TEST(Metrics, RowsMustBeOrdered) {
    MetricsLog log("uht", 1);
    log.add(1, Phase::train, "loss", 0.5);
    log.add(1, Phase::eval_fewshot, "val_acc", 0.3);
    log.add(1, Phase::eval_fewshot, "val_ci95", 0.1);  // several metrics may share (epoch, phase)
    log.add(2, Phase::stability, "rs_fc1", 0.4);
    EXPECT_THROW(log.add(2, Phase::train, "loss", 0.4), ContractError);
    EXPECT_THROW(log.add(1, Phase::eval_zeroshot, "x", 0), ContractError);
    std::ostringstream os;
    log.write_csv(os);
    EXPECT_EQ(os.str(), "run_id,seed,epoch,phase,metric,value\nuht,1,1,train,loss,0.5\nuht,1,1,eval_fewshot,val_acc,0.3\n"
                        "uht,1,1,eval_fewshot,val_ci95,0.1\nuht,1,2,stability,rs_fc1,0.4\n");
}

TEST(Metrics, Milestones) {
    std::vector<EpochStats> log(6);
    for (int i = 0; i < 6; ++i) {
        log[static_cast<std::size_t>(i)].epoch = i + 1;
        log[static_cast<std::size_t>(i)].seconds = 0.5;
    }
    const auto ms = compute_milestones({0.5, 0.6, 0.9}, {{2, 0.4}, {4, 0.65}, {6, 0.62}}, log);
    ASSERT_EQ(ms.size(), 3u);
    EXPECT_EQ(*ms[0].epoch, 4);
    EXPECT_DOUBLE_EQ(*ms[0].seconds, 2.0);
    EXPECT_EQ(*ms[1].epoch, 4);
    EXPECT_FALSE(ms[2].epoch.has_value());
    std::ostringstream os;
    write_milestones_csv(os, ms);
    EXPECT_EQ(os.str(), "threshold,epoch,seconds\n0.5,4,2\n0.6,4,2\n0.9,,\n");
}

TEST(Metrics, SvgHasOnePathPerLayerAndBalancedTags) {
    std::vector<StabilityRecord> recs;
    for (int e = 1; e <= 4; ++e)
        for (const char* l : {"body.0", "body.1", "head"}) recs.push_back({e, l, 0.2 * e});
    std::ostringstream os;
    write_stability_svg(os, recs, "a <title> & more");
    const auto svg = os.str();
    EXPECT_EQ(count(svg, "<path "), 3u);
    EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
    // Every opening tag is closed, in order.
    std::vector<std::string> stack;
    const std::regex tag(R"(<(/?)([a-zA-Z]+)[^>]*?(/?)>)");
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), tag); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        if (m[3] == "/") continue;
        if (m[1] == "/") {
            ASSERT_FALSE(stack.empty());
            EXPECT_EQ(stack.back(), m[2].str());
            stack.pop_back();
        } else {
            stack.push_back(m[2]);
        }
    }
    EXPECT_TRUE(stack.empty());
    EXPECT_EQ(svg.find("<title> &"), std::string::npos);
}

// ---- commands ----------------------------------------------------------------------

TEST(Commands, TrainWritesCheckpointAndOneTrainRowPerEpoch) {
    const auto dir = scratch("train");
    auto cfg = quick(dir, 10);
    const auto out = cmd_train(cfg);
    EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
    const auto csv = lines(slurp(dir / "metrics.csv"));
    ASSERT_EQ(csv.size(), 11u);
    EXPECT_EQ(csv[0], "run_id,seed,epoch,phase,metric,value");
    for (std::size_t i = 1; i < csv.size(); ++i) EXPECT_EQ(csv[i].rfind("uht,0," + std::to_string(i) + ",train,loss,", 0), 0u);
    EXPECT_EQ(lines(slurp(dir / "milestones.csv")).size(), 6u);
    EXPECT_EQ(lines(slurp(dir / "steps.csv")).size(), 11u);
    EXPECT_EQ(parse_config(dir / "config.resolved").hyper.epochs, 10);
    const auto back = load_checkpoint<Real>(dir / "model.ckpt");
    EXPECT_TRUE(back.body.same_values(out.model.body));
    EXPECT_EQ(back.provenance.config_hash, config_hash(cfg));
}

TEST(Commands, PeriodicValidationFeedsMilestones) {
    const auto dir = scratch("milestones");
    auto cfg = quick(dir, 4);
    cfg.blob_classes = 32;
    cfg.val_frac = 0.25;
    cfg.eval_every = 2;
    cfg.checkpoint_every = 2;
    const auto out = cmd_train(cfg);
    ASSERT_EQ(out.val_points.size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "model_epoch2.ckpt"));
    std::size_t val_rows = 0;
    for (const auto& r : out.metrics.rows()) val_rows += r.phase == Phase::eval_fewshot;
    EXPECT_EQ(val_rows, 2u);
    // Blob validation episodes are easy, so the lowest threshold is reached at the first check.
    ASSERT_TRUE(out.milestones[0].epoch.has_value());
    EXPECT_EQ(*out.milestones[0].epoch, 2);
}

TEST(Commands, AllModesTrainAndEvaluate) {
    for (const char* mode : {"uht", "maml", "anil", "wct", "mtl"}) {
        const auto dir = scratch(std::string("mode_") + mode);
        auto cfg = quick(dir, 2);
        set_key(cfg, "mode", mode);
        cfg.episodes.query = 2;
        const auto tr = train_model(cfg, load_data(cfg));
        EXPECT_EQ(tr.log.size(), 2u) << mode;
        const auto ev = evaluate(cfg, tr.model, load_data(cfg));
        EXPECT_GE(ev.fewshot.mean, 0.0);
        EXPECT_TRUE(ev.zeroshot.has_value());
    }
}

TEST(Commands, StabilityOfFrozenModelIsOne) {
    const auto dir = scratch("stability");
    auto cfg = quick(dir, 4);
    cfg.mode = TrainMode::wct;  // persistent head, so every tracked layer is frozen
    cfg.hyper.eta = 0;
    const auto s = cmd_stability(cfg);
    const auto layers = build_arch(cfg, load_data(cfg).full).layer_names().size() + 1;  // plus head
    ASSERT_EQ(s.records.size(), 3u * layers);
    for (const auto& r : s.records) EXPECT_NEAR(r.rs, 1.0, 1e-6) << r.layer << " @" << r.epoch;
    EXPECT_EQ(lines(slurp(dir / "stability.csv")).size(), 1 + 3u * layers);
    EXPECT_EQ(count(slurp(dir / "stability.svg"), "<path "), layers);
    const auto csv = slurp(dir / "metrics.csv");
    EXPECT_EQ(count(csv, ",stability,rs_"), 3u * layers);
    EXPECT_EQ(count(csv, ",train,loss,"), 4u);
}

TEST(Commands, FrozenDynamicHeadModelKeepsBodyPinned) {
    // Dynamic heads are drawn afresh every epoch, as in training, so only the
    // body layers are pinned when the meta-parameters do not move.
    auto cfg = quick(scratch("stability_uht"), 4);
    cfg.hyper.eta = 0;
    cfg.hyper.alpha = 0;
    const auto s = run_stability(cfg, load_data(cfg));
    std::size_t head_rows = 0;
    for (const auto& r : s.records) {
        if (r.layer == "head") {
            ++head_rows;
            continue;
        }
        EXPECT_NEAR(r.rs, 1.0, 1e-6) << r.layer << " @" << r.epoch;
    }
    EXPECT_EQ(head_rows, 3u);
}

TEST(Commands, StabilityHeadFollowsTheTrainer) {
    const auto dir = scratch("stability_wct");
    auto cfg = quick(dir, 3);
    cfg.mode = TrainMode::wct;
    cfg.hyper.eta = 0.05;
    const auto s = run_stability(cfg, load_data(cfg));
    ASSERT_FALSE(s.records.empty());
    EXPECT_EQ(s.records.back().layer, "head");
}

TEST(Commands, SweepCountsCellsAndRecordsErrors) {
    const auto dir = scratch("sweep");
    auto cfg = quick(dir, 2);
    const std::vector<GridAxis> grid{parse_grid("eps=0.5,1.0,2.0"), parse_grid("min_samples=5,15")};
    const auto cells = cmd_sweep(cfg, grid);
    ASSERT_EQ(cells.size(), 6u);
    const auto csv = lines(slurp(dir / "sweep.csv"));
    ASSERT_EQ(csv.size(), 7u);
    EXPECT_EQ(csv[0], "cell,eps,min_samples,status,fewshot_acc,fewshot_ci95,zeroshot_acc,skip_rate,error");
    EXPECT_EQ(csv[1].rfind("0,0.5,5,ok,", 0), 0u);
    EXPECT_EQ(csv[6].rfind("5,2.0,15,ok,", 0), 0u);

    const auto bad = run_sweep(cfg, {GridAxis{"inner_steps", {"2", "zero"}}});
    EXPECT_TRUE(bad[0].ok);
    EXPECT_FALSE(bad[1].ok);
    EXPECT_NE(bad[1].error.find("inner_steps"), std::string::npos);
}

TEST(Commands, SweepCellsAreIndependentOfOrder) {
    auto cfg = quick(scratch("sweep_order"), 2);
    const auto ab = run_sweep(cfg, {parse_grid("eps=1,2"), parse_grid("alpha=0.05,0.1")});
    const auto ba = run_sweep(cfg, {parse_grid("alpha=0.05,0.1"), parse_grid("eps=1,2")});
    std::set<std::tuple<std::string, std::string, double, double>> x, y;
    for (const auto& c : ab) x.emplace(c.values[0], c.values[1], c.fewshot_acc, c.zeroshot_acc);
    for (const auto& c : ba) y.emplace(c.values[1], c.values[0], c.fewshot_acc, c.zeroshot_acc);
    EXPECT_EQ(x, y);
}

TEST(Commands, SingletonSweepMatchesTrainThenEval) {
    const auto dir = scratch("sweep_single");
    auto cfg = quick(dir / "sweep", 3);
    const auto cells = run_sweep(cfg, {parse_grid("eps=1.0")});
    ASSERT_TRUE(cells[0].ok);
    auto tcfg = cfg;
    tcfg.out = (dir / "train").string();
    cmd_train(tcfg);
    const auto ev = cmd_eval(tcfg, dir / "train" / "model.ckpt");
    EXPECT_EQ(cells[0].fewshot_acc, ev.fewshot.mean);
    EXPECT_EQ(cells[0].zeroshot_acc, ev.zeroshot->mean);
}

TEST(Commands, AblationHasFourVariantsOnIdenticalData) {
    const auto dir = scratch("ablate");
    auto cfg = quick(dir, 2);
    cfg.ablate_way = 3;
    const auto rows = cmd_ablate(cfg);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0].variant, "G1");
    EXPECT_EQ(rows[3].variant, "full");
    EXPECT_EQ(rows[0].persistent_heads, 1u);
    EXPECT_EQ(rows[1].persistent_heads, 0u);
    EXPECT_EQ(rows[2].persistent_heads, 1u);
    EXPECT_EQ(rows[3].persistent_heads, 0u);
    for (const auto& r : rows) EXPECT_EQ(r.data_hash, rows[0].data_hash);
    const auto csv = slurp(dir / "ablation.csv");
    EXPECT_EQ(count(csv, ",fewshot_acc,"), 4u);
    EXPECT_EQ(count(csv, ",zeroshot_acc,"), 4u);
}

TEST(Commands, EmbeddingExportShapeAndErrors) {
    const auto dir = scratch("export");
    auto cfg = quick(dir, 1);
    cmd_train(cfg);
    cmd_export_embeddings(cfg, dir / "model.ckpt");
    const auto first = slurp(dir / "embeddings.csv");
    const auto rows = lines(first);
    ASSERT_EQ(rows.size(), 1u + 16u * 60u);
    for (const auto& r : {rows[0], rows[1], rows.back()}) EXPECT_EQ(std::count(r.begin(), r.end(), ','), 16 + 1);
    cmd_export_embeddings(cfg, dir / "model.ckpt");
    EXPECT_EQ(slurp(dir / "embeddings.csv"), first);

    auto wrong = cfg;
    wrong.blob_dim = 8;
    EXPECT_THROW(cmd_export_embeddings(wrong, dir / "model.ckpt"), CheckpointError);
    try {
        cmd_export_embeddings(cfg, dir / "missing.ckpt");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("missing.ckpt"), std::string::npos);
    }
}

// ---- command-line tool -------------------------------------------------------------

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir = scratch(::testing::UnitTest::GetInstance()->current_test_info()->name());
        io::write_file(dir / "run.cfg", to_text(quick(dir / "unused", 3)));
    }
    std::string cfg() const { return "--config " + (dir / "run.cfg").string(); }
    fs::path dir;
};

TEST_F(Cli, RerunsAreByteIdentical) {
    ASSERT_EQ(run_cli("train " + cfg() + " --seed 5 --out " + (dir / "a").string(), dir / "log"), 0) << slurp(dir / "log");
    ASSERT_EQ(run_cli("train " + cfg() + " --seed 5 --out " + (dir / "b").string(), dir / "log"), 0);
    EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
    EXPECT_EQ(slurp(dir / "a" / "model.ckpt"), slurp(dir / "b" / "model.ckpt"));
    EXPECT_EQ(slurp(dir / "a" / "metrics.csv").find(",5,1,train,loss,") != std::string::npos, true);
    ASSERT_EQ(run_cli("eval " + cfg() + " --ckpt " + (dir / "a" / "model.ckpt").string() + " --episodes 6 --way 3 --shot 2 "
                      "--adapt-steps 5 --out " + (dir / "a").string(), dir / "log"), 0);
    ASSERT_EQ(run_cli("eval " + cfg() + " --ckpt " + (dir / "a" / "model.ckpt").string() + " --episodes 6 --way 3 --shot 2 "
                      "--adapt-steps 5 --out " + (dir / "b").string(), dir / "log"), 0);
    EXPECT_EQ(slurp(dir / "a" / "eval_metrics.csv"), slurp(dir / "b" / "eval_metrics.csv"));
}

TEST_F(Cli, CheckpointRoundTripAndTruncation) {
    ASSERT_EQ(run_cli("train " + cfg() + " --out " + dir.string(), dir / "log"), 0);
    const auto bytes = slurp(dir / "model.ckpt");
    save_checkpoint(load_checkpoint<Real>(dir / "model.ckpt"), dir / "again.ckpt");
    EXPECT_EQ(slurp(dir / "again.ckpt"), bytes);

    io::write_file(dir / "cut.ckpt", bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint<Real>(dir / "cut.ckpt"), CheckpointError);
    EXPECT_EQ(run_cli("eval " + cfg() + " --ckpt " + (dir / "cut.ckpt").string() + " --out " + dir.string(), dir / "log"), 2);
    EXPECT_NE(slurp(dir / "log").find("cut.ckpt"), std::string::npos);
}

TEST_F(Cli, CheckpointCarriesArchitecture) {
    ASSERT_EQ(run_cli("train " + cfg() + " --out " + dir.string(), dir / "log"), 0);
    // Default config: different hidden widths, but the checkpoint supplies the architecture.
    EXPECT_EQ(run_cli("eval --ckpt " + (dir / "model.ckpt").string() + " --episodes 4 --adapt-steps 2 --out " + dir.string(),
                      dir / "log"),
              0)
        << slurp(dir / "log");
}

TEST_F(Cli, ExitCodes) {
    EXPECT_EQ(run_cli("", dir / "log"), 1);
    EXPECT_EQ(run_cli("frobnicate", dir / "log"), 1);
    EXPECT_EQ(run_cli("train --seed notanumber", dir / "log"), 1);
    EXPECT_EQ(run_cli("eval " + cfg(), dir / "log"), 1);  // --ckpt missing
    EXPECT_EQ(run_cli("sweep " + cfg() + " --out " + dir.string(), dir / "log"), 1);  // --grid missing
    EXPECT_EQ(run_cli("sweep " + cfg() + " --grid bogus=1 --out " + dir.string(), dir / "log"), 1);
    EXPECT_EQ(run_cli("train --help", dir / "log"), 0);
    io::write_file(dir / "bad.cfg", "mode = sideways\n");
    EXPECT_EQ(run_cli("train --config " + (dir / "bad.cfg").string(), dir / "log"), 1);
    EXPECT_NE(slurp(dir / "log").find("line 1"), std::string::npos);
    EXPECT_EQ(run_cli("eval " + cfg() + " --ckpt " + (dir / "nowhere.ckpt").string() + " --out " + dir.string(), dir / "log"), 2);
    EXPECT_NE(slurp(dir / "log").find("nowhere.ckpt"), std::string::npos);
    EXPECT_EQ(run_cli("export-embeddings " + cfg() + " --ckpt " + (dir / "nowhere.ckpt").string() + " --out " + dir.string(),
                      dir / "log"),
              2);
}

TEST_F(Cli, ExportEmbeddingsIsStable) {
    ASSERT_EQ(run_cli("train " + cfg() + " --out " + dir.string(), dir / "log"), 0);
    ASSERT_EQ(run_cli("export-embeddings " + cfg() + " --ckpt " + (dir / "model.ckpt").string() + " --out " + dir.string(),
                      dir / "log"),
              0);
    const auto a = slurp(dir / "embeddings.csv");
    ASSERT_EQ(run_cli("export-embeddings " + cfg() + " --ckpt " + (dir / "model.ckpt").string() + " --out " + dir.string(),
                      dir / "log"),
              0);
    EXPECT_EQ(slurp(dir / "embeddings.csv"), a);
    EXPECT_EQ(lines(a).size(), 961u);
}
