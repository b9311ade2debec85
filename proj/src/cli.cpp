#include "escape/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "escape/config.hpp"
#include "escape/harness.hpp"
#include "escape/training.hpp"

namespace escape {

namespace {

PerceptionConfig perception_config_from(const Config& cfg) {
    PerceptionConfig pc;
    pc.grid_h = cfg.get_int("grid_h", pc.grid_h);
    pc.grid_w = cfg.get_int("grid_w", pc.grid_w);
    pc.channels = cfg.get_int("channels", pc.channels);
    pc.categories = cfg.get_int("categories", pc.categories);
    pc.image_size = cfg.get_int("image_size", pc.image_size);
    pc.feat_channels = cfg.get_int("feat_channels", pc.feat_channels);
    pc.n_blocks = cfg.get_int("blocks", pc.n_blocks);
    pc.n_heads = cfg.get_int("heads", pc.n_heads);
    pc.n_points = cfg.get_int("points", pc.n_points);
    pc.pillars.n_ref = cfg.get_int("pillar_n_ref", pc.pillars.n_ref);
    pc.pillars.z_min = cfg.get_double("pillar_z_min", pc.pillars.z_min);
    pc.pillars.z_max = cfg.get_double("pillar_z_max", pc.pillars.z_max);
    pc.grid_res = cfg.get_double("grid_res", pc.grid_res);
    pc.fov_deg = cfg.get_double("fov_deg", pc.fov_deg);
    pc.camera_height = cfg.get_double("camera_height", pc.camera_height);
    pc.tau = cfg.get_double("tau", pc.tau);
    pc.tau_mask = cfg.get_double("tau_mask", pc.tau_mask);
    pc.no_ome = cfg.get_bool("no_ome", pc.no_ome);
    pc.no_mru = cfg.get_bool("no_mru", pc.no_mru);
    pc.static_query = cfg.get_bool("static_query", pc.static_query);
    pc.activation = cfg.get_string("activation", pc.activation);
    return pc;
}

void perception_config_into(const PerceptionConfig& pc, Config& cfg) {
    cfg.set("grid_h", std::to_string(pc.grid_h));
    cfg.set("grid_w", std::to_string(pc.grid_w));
    cfg.set("channels", std::to_string(pc.channels));
    cfg.set("categories", std::to_string(pc.categories));
    cfg.set("image_size", std::to_string(pc.image_size));
    cfg.set("feat_channels", std::to_string(pc.feat_channels));
    cfg.set("blocks", std::to_string(pc.n_blocks));
    cfg.set("heads", std::to_string(pc.n_heads));
    cfg.set("points", std::to_string(pc.n_points));
    cfg.set("tau", std::to_string(pc.tau));
    cfg.set("tau_mask", std::to_string(pc.tau_mask));
    cfg.set("no_ome", pc.no_ome ? "true" : "false");
    cfg.set("no_mru", pc.no_mru ? "true" : "false");
    cfg.set("static_query", pc.static_query ? "true" : "false");
    cfg.set("activation", pc.activation);
}

TrainConfig train_config_from(const Config& cfg) {
    TrainConfig tc;
    tc.lr = cfg.get_double("lr", tc.lr);
    tc.batch = cfg.get_int("batch", tc.batch);
    tc.epochs = cfg.get_int("epochs", tc.epochs);
    tc.lambda = cfg.get_double("lambda", tc.lambda);
    tc.seed = cfg.get_u64("seed", tc.seed);
    tc.precision = cfg.get_string("precision", tc.precision);
    tc.bptt_window = cfg.get_int("bptt_window", tc.bptt_window);
    tc.monitor_lr = cfg.get_double("monitor_lr", tc.monitor_lr);
    tc.monitor_epochs = cfg.get_int("monitor_epochs", tc.monitor_epochs);
    return tc;
}

HarnessConfig harness_config_from(const Config& cfg) {
    HarnessConfig hc;
    hc.step_budget = cfg.get_int("step_budget", hc.step_budget);
    hc.tau_mask = cfg.get_double("tau_mask", hc.tau_mask);
    hc.policy.tau = cfg.get_double("tau", hc.policy.tau);
    hc.policy.goal_radius_cells = cfg.get_int("goal_radius_cells", hc.policy.goal_radius_cells);
    hc.world.manip_range_cells = cfg.get_int("manip_range_cells", hc.world.manip_range_cells);
    return hc;
}

std::vector<EpisodeRecord> load_dataset(const std::filesystem::path& dir) {
    std::vector<EpisodeRecord> episodes;
    for (const auto& ep_dir : list_episode_dirs(dir)) episodes.push_back(load_episode(ep_dir));
    if (episodes.empty()) throw std::runtime_error("no episodes found under " + dir.string());
    return episodes;
}

void split_dataset(std::vector<EpisodeRecord> all, double train_frac,
                   std::vector<EpisodeRecord>& train, std::vector<EpisodeRecord>& held) {
    size_t n_train = static_cast<size_t>(static_cast<double>(all.size()) * train_frac);
    n_train = std::min(std::max<size_t>(n_train, 1), all.size() - 1);
    for (size_t i = 0; i < all.size(); ++i)
        (i < n_train ? train : held).push_back(std::move(all[i]));
}

std::unique_ptr<PerceptionModel> load_perception(const std::filesystem::path& ckpt) {
    Config cfg;
    std::filesystem::path sidecar = ckpt.string() + ".config";
    if (std::filesystem::exists(sidecar)) cfg = Config::load(sidecar);
    auto model = std::make_unique<PerceptionModel>(perception_config_from(cfg), 0);
    load_checkpoint(model->params(), ckpt);
    return model;
}

std::unique_ptr<MonitorModel> load_monitor(const std::filesystem::path& ckpt) {
    MonitorConfig mc;
    auto model = std::make_unique<MonitorModel>(mc, 0);
    load_checkpoint(model->params(), ckpt);
    return model;
}

void save_with_sidecar(const ParamStore& params, const std::filesystem::path& ckpt,
                       const Config& provenance) {
    if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
    save_checkpoint(params, ckpt);
    provenance.save(ckpt.string() + ".config");
}

struct EpisodeSuite {
    std::vector<EpisodeSetup> setups;
    std::vector<int> expert_lengths;
};

EpisodeSuite make_suite(uint64_t seed, int episodes, const WorldConfig& world) {
    EpisodeSuite suite;
    for (int i = 0; i < episodes; ++i) {
        ExpertTrajectory traj;
        suite.setups.push_back(
            gen_solvable_episode(seed + static_cast<uint64_t>(i) * 7919ULL, world, &traj));
        suite.expert_lengths.push_back(traj.length());
    }
    return suite;
}

int cmd_gen_data(uint64_t seed, int episodes, const std::string& out, const Config& cfg) {
    WorldConfig world;
    world.image_size = cfg.get_int("image_size", world.image_size);
    gen_dataset(seed, episodes, out, world);
    std::cout << "wrote " << episodes << " episodes to " << out << "\n";
    return 0;
}

int cmd_train_perception(const std::string& data, const std::string& out, Config cfg,
                         const std::string& ablation, uint64_t seed) {
    if (ablation == "no_ome") cfg.set("no_ome", "true");
    if (ablation == "no_mru") cfg.set("no_mru", "true");
    if (ablation == "static_query") cfg.set("static_query", "true");
    PerceptionConfig pc = perception_config_from(cfg);
    TrainConfig tc = train_config_from(cfg);
    tc.seed = cfg.get_u64("seed", seed);

    std::vector<EpisodeRecord> train, held;
    split_dataset(load_dataset(data), cfg.get_double("train_frac", 0.85), train, held);

    PerceptionModel model(pc, tc.seed);
    std::filesystem::path log_csv = std::filesystem::path(out).string() + ".train.csv";
    TrainResult result = train_perception(model, train, tc, log_csv);
    PerceptionEval eval = evaluate_perception(model, held);

    Config provenance = cfg;
    perception_config_into(pc, provenance);
    for (const auto& [k, v] : tc.as_entries()) provenance.set(k, v);
    save_with_sidecar(model.params(), out, provenance);

    std::cout << "loss " << result.initial_loss << " -> " << result.final_loss
              << "; held-out map mIOU " << eval.map_miou << ", image mIOU " << eval.image_miou
              << "\n";
    return 0;
}

int cmd_train_monitor(const std::string& data, const std::string& out, const Config& cfg,
                      uint64_t seed) {
    TrainConfig tc = train_config_from(cfg);
    tc.seed = cfg.get_u64("seed", seed);
    std::vector<EpisodeRecord> train, held;
    split_dataset(load_dataset(data), cfg.get_double("train_frac", 0.85), train, held);

    MonitorModel model(MonitorConfig{}, tc.seed);
    std::filesystem::path log_csv = std::filesystem::path(out).string() + ".train.csv";
    TrainResult result = train_monitor(model, train, tc, log_csv);
    MonitorEval eval = evaluate_monitor(model, held);

    Config provenance = cfg;
    for (const auto& [k, v] : tc.as_entries()) provenance.set(k, v);
    save_with_sidecar(model.params(), out, provenance);
    std::cout << "loss " << result.initial_loss << " -> " << result.final_loss << "; held-out F1 min "
              << eval.min_f1 << " mean " << eval.mean_f1 << "\n";
    return 0;
}

int cmd_verify_grad(uint64_t seed, int seeds, double tol, const std::string& out) {
    GradVerifyReport report = verify_gradients(seed, seeds, tol);
    nlohmann::json j{{"seeds", report.seeds}, {"tol", report.tol}, {"pass", report.pass}};
    for (const auto& c : report.components) {
        j["components"][c.name] = {
            {"max_rel_err", c.max_rel_err}, {"coords", c.coords}, {"pass", c.pass}};
        std::cout << c.name << ": max_rel_err " << c.max_rel_err << (c.pass ? " PASS" : " FAIL")
                  << "\n";
    }
    if (!out.empty()) {
        std::ofstream f(out);
        f << j.dump(2) << "\n";
    }
    std::cout << (report.pass ? "gradient verification PASS" : "gradient verification FAIL") << "\n";
    return report.pass ? 0 : 1;
}

HarnessConfig rollout_config(const Config& cfg, bool oracle_monitor, bool gt_masks, bool no_aep,
                             int budget) {
    HarnessConfig hc = harness_config_from(cfg);
    hc.oracle_monitor = oracle_monitor;
    hc.gt_masks = gt_masks;
    hc.policy.use_aep = !no_aep;
    if (budget > 0) hc.step_budget = budget;
    return hc;
}

int cmd_run(uint64_t seed, const std::string& perception_ckpt, const std::string& monitor_ckpt,
            bool oracle_monitor, bool gt_masks, bool no_aep, int budget, const std::string& out,
            const Config& cfg) {
    auto perception = load_perception(perception_ckpt);
    std::unique_ptr<MonitorModel> monitor;
    if (!monitor_ckpt.empty()) monitor = load_monitor(monitor_ckpt);
    if (!monitor && !oracle_monitor)
        throw std::runtime_error("run: need --monitor or --oracle-monitor");
    HarnessConfig hc = rollout_config(cfg, oracle_monitor, gt_masks, no_aep, budget);

    ExpertTrajectory traj;
    EpisodeSetup setup = gen_solvable_episode(seed, hc.world, &traj);
    EpisodeLog log = run_episode(setup, traj.length(), *perception, monitor.get(), hc, seed);
    if (!out.empty()) write_episode_log(out, log);
    std::cout << "success=" << log.success << " steps=" << log.agent_length
              << " expert=" << log.expert_length << " gc=" << log.gc_met << "/" << log.gc_total
              << (log.failure.empty() ? "" : " failure=" + log.failure) << "\n";
    return 0;
}

int cmd_eval(const std::string& logs_dir, uint64_t seed, int episodes,
             const std::string& perception_ckpt, const std::string& monitor_ckpt,
             bool oracle_monitor, bool gt_masks, bool no_aep, int budget, const std::string& out,
             const Config& cfg) {
    std::vector<EpisodeLog> logs;
    if (!logs_dir.empty()) {
        for (const auto& entry : std::filesystem::directory_iterator(logs_dir))
            if (entry.path().extension() == ".jsonl") logs.push_back(read_episode_log(entry.path()));
        std::sort(logs.begin(), logs.end(),
                  [](const EpisodeLog& a, const EpisodeLog& b) { return a.seed < b.seed; });
        if (logs.empty()) throw std::runtime_error("eval: no .jsonl logs in " + logs_dir);
    } else {
        auto perception = load_perception(perception_ckpt);
        std::unique_ptr<MonitorModel> monitor;
        if (!monitor_ckpt.empty()) monitor = load_monitor(monitor_ckpt);
        if (!monitor && !oracle_monitor)
            throw std::runtime_error("eval: need --monitor or --oracle-monitor");
        HarnessConfig hc = rollout_config(cfg, oracle_monitor, gt_masks, no_aep, budget);
        EpisodeSuite suite = make_suite(seed, episodes, hc.world);
        logs = run_episode_batch(suite.setups, suite.expert_lengths, *perception, monitor.get(), hc,
                                 seed);
        if (!out.empty()) {
            std::filesystem::create_directories(out);
            for (size_t i = 0; i < logs.size(); ++i) {
                char name[32];
                std::snprintf(name, sizeof(name), "episode_%04zu.jsonl", i);
                write_episode_log(std::filesystem::path(out) / name, logs[i]);
            }
        }
    }
    MetricsReport report = compute_metrics(logs);
    std::string json = metrics_json(report);
    std::cout << json << "\n";
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        std::ofstream f(std::filesystem::path(out) / "metrics.json");
        f << json << "\n";
    }
    return 0;
}

int cmd_ablate(const std::string& ckpt_dir, const std::string& data, uint64_t seed, int episodes,
               const std::vector<std::string>& variants, const std::string& out, const Config& cfg) {
    namespace fs = std::filesystem;
    nlohmann::json table;
    std::vector<EpisodeRecord> held;
    if (!data.empty()) {
        std::vector<EpisodeRecord> train;
        split_dataset(load_dataset(data), cfg.get_double("train_frac", 0.85), train, held);
    }

    auto ckpt_path = [&](const std::string& name) {
        fs::path p = fs::path(ckpt_dir) / (name + ".ckpt");
        if (!fs::exists(p)) throw std::runtime_error("ablate: missing checkpoint " + p.string());
        return p;
    };

    for (const std::string& variant : variants) {
        if (variant == "no_ome" || variant == "no_mru" || variant == "static_query") {
            if (held.empty()) throw std::runtime_error("ablate: --data required for " + variant);
            auto model = load_perception(ckpt_path(variant));
            PerceptionEval ev = evaluate_perception(*model, held);
            table[variant] = {{"map_miou", ev.map_miou}, {"image_miou", ev.image_miou}};
        } else if (variant == "full" || variant == "no_aep" || variant == "gt_masks") {
            auto model = load_perception(ckpt_path("full"));
            HarnessConfig hc = rollout_config(cfg, /*oracle_monitor=*/true,
                                              /*gt_masks=*/variant == "gt_masks",
                                              /*no_aep=*/variant == "no_aep", 0);
            EpisodeSuite suite = make_suite(seed, episodes, hc.world);
            auto logs = run_episode_batch(suite.setups, suite.expert_lengths, *model, nullptr, hc, seed);
            MetricsReport report = compute_metrics(logs);
            table[variant] = nlohmann::json::parse(metrics_json(report));
            if (!held.empty()) {
                PerceptionEval ev = evaluate_perception(*model, held);
                table[variant]["map_miou"] = ev.map_miou;
                table[variant]["image_miou"] = ev.image_miou;
            }
        } else {
            throw std::runtime_error("ablate: unknown variant " + variant);
        }
        std::cout << variant << ": " << table[variant].dump() << "\n";
    }
    if (!out.empty()) {
        fs::create_directories(fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path());
        std::ofstream f(out);
        f << table.dump(2) << "\n";
    }
    return 0;
}

int cmd_export_map(const std::string& perception_ckpt, uint64_t seed, int steps,
                   const std::string& out, const Config& cfg) {
    auto perception = load_perception(perception_ckpt);
    HarnessConfig hc = rollout_config(cfg, /*oracle_monitor=*/true, /*gt_masks=*/true, false, steps);

    ExpertTrajectory traj;
    EpisodeSetup setup = gen_solvable_episode(seed, hc.world, &traj);
    Room room = setup.room;
    AgentState agent = setup.agent;
    const auto& pc = perception->config();

    EpisodicMemory mem;
    bool has_mem = false;
    StepResult sr;
    int n = std::min<int>(steps, traj.length());
    for (int i = 0; i < n; ++i) {
        ObservationFrame obs = render(room, agent, hc.world, i);
        sr = perception->memory_step(has_mem ? &mem : nullptr, obs);
        mem = sr.memory;
        has_mem = true;
        step_env(room, agent, traj.actions[static_cast<size_t>(i)], hc.world);
    }

    std::filesystem::create_directories(out);
    export_scene_map(out, sr.map.probs_copy(), pc.grid_h, pc.grid_w, pc.categories, pc.grid_res,
                     /*pgm=*/true);

    // interaction-mask export for the final frame
    NoGradGuard guard;
    auto mh = sr.map.multi_hot(pc.tau);
    Tensor embeddings = perception->pixel_embeddings(sr.features);
    nlohmann::json index;
    for (int k = 0; k < pc.categories; ++k) {
        auto pooled = perception->mask_pool(mem.m, mh, k);
        if (!pooled.has_value()) continue;
        Tensor scores = perception->similarity_scores(perception->object_query(*pooled), embeddings);
        std::string name = std::string("mask_") + category_name(k) + ".pgm";
        export_mask_pgm(std::filesystem::path(out) / name,
                        std::vector<double>(scores.data().begin(), scores.data().end()),
                        pc.image_size);
        index["masks"][category_name(k)] = name;
    }
    index["frame"] = n - 1;
    index["scene_map"] = "scene_map.json";
    std::ofstream(std::filesystem::path(out) / "index.json") << index.dump(2) << "\n";
    std::cout << "exported scene map and masks to " << out << "\n";
    return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"ESCAPE desk-scale pipeline: episodic spatial memory, grounding, adaptive execution"};
    app.require_subcommand(1);

    uint64_t seed = 1;
    std::string config_path, out;
    app.add_option("--seed", seed, "global seed");
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--out", out, "output file or directory");

    auto* gen = app.add_subcommand("gen-data", "generate an expert-labeled dataset");
    int gen_episodes = 48;
    gen->add_option("--episodes", gen_episodes, "number of episodes");

    auto* trainp = app.add_subcommand("train-perception", "train the mapping + grounding stack");
    std::string data_dir, ablation;
    trainp->add_option("--data", data_dir, "dataset directory")->required();
    trainp->add_option("--ablation", ablation, "no_ome | no_mru | static_query");

    auto* trainm = app.add_subcommand("train-monitor", "train the reactive local monitor");
    trainm->add_option("--data", data_dir, "dataset directory")->required();

    auto* verify = app.add_subcommand("verify-grad", "finite-difference gradient verification");
    int vg_seeds = 100;
    double vg_tol = 1e-5;
    verify->add_option("--seeds", vg_seeds, "random seeds to test");
    verify->add_option("--tol", vg_tol, "max relative error tolerance");

    auto* run = app.add_subcommand("run", "run a single episode");
    std::string perception_ckpt, monitor_ckpt;
    bool oracle_monitor = false, gt_masks = false, no_aep = false;
    int budget = 0;
    run->add_option("--perception", perception_ckpt, "perception checkpoint")->required();
    run->add_option("--monitor", monitor_ckpt, "monitor checkpoint");
    run->add_flag("--oracle-monitor", oracle_monitor, "use ground-truth manipulability");
    run->add_flag("--gt-masks", gt_masks, "use simulator masks");
    run->add_flag("--no-aep", no_aep, "disable reactive preemption");
    run->add_option("--budget", budget, "step budget override");

    auto* eval = app.add_subcommand("eval", "run an episode suite (or score saved logs)");
    std::string logs_dir;
    int eval_episodes = 20;
    eval->add_option("--logs", logs_dir, "directory of .jsonl logs to score");
    eval->add_option("--episodes", eval_episodes, "episodes to run");
    eval->add_option("--perception", perception_ckpt, "perception checkpoint");
    eval->add_option("--monitor", monitor_ckpt, "monitor checkpoint");
    eval->add_flag("--oracle-monitor", oracle_monitor, "use ground-truth manipulability");
    eval->add_flag("--gt-masks", gt_masks, "use simulator masks");
    eval->add_flag("--no-aep", no_aep, "disable reactive preemption");
    eval->add_option("--budget", budget, "step budget override");

    auto* ablate = app.add_subcommand("ablate", "compare ablation variants");
    std::string ckpt_dir;
    std::vector<std::string> variants{"full", "no_aep", "gt_masks"};
    int ablate_episodes = 20;
    ablate->add_option("--ckpt-dir", ckpt_dir, "directory with <variant>.ckpt files")->required();
    ablate->add_option("--data", data_dir, "dataset directory (for mIOU variants)");
    ablate->add_option("--variants", variants, "subset of full,no_aep,gt_masks,no_ome,no_mru,static_query");
    ablate->add_option("--episodes", ablate_episodes, "episodes per rollout variant");

    auto* exportm = app.add_subcommand("export-map", "export scene-map JSON/PGM and mask PGMs");
    int export_steps = 60;
    exportm->add_option("--perception", perception_ckpt, "perception checkpoint")->required();
    exportm->add_option("--steps", export_steps, "expert steps to replay before exporting");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        Config cfg;
        if (!config_path.empty()) cfg = Config::load(config_path);
        if (gen->parsed()) return cmd_gen_data(seed, gen_episodes, out.empty() ? "dataset" : out, cfg);
        if (trainp->parsed())
            return cmd_train_perception(data_dir, out.empty() ? "perception.ckpt" : out, cfg,
                                        ablation, seed);
        if (trainm->parsed())
            return cmd_train_monitor(data_dir, out.empty() ? "monitor.ckpt" : out, cfg, seed);
        if (verify->parsed()) return cmd_verify_grad(seed, vg_seeds, vg_tol, out);
        if (run->parsed())
            return cmd_run(seed, perception_ckpt, monitor_ckpt, oracle_monitor, gt_masks, no_aep,
                           budget, out, cfg);
        if (eval->parsed())
            return cmd_eval(logs_dir, seed, eval_episodes, perception_ckpt, monitor_ckpt,
                            oracle_monitor, gt_masks, no_aep, budget, out, cfg);
        if (ablate->parsed())
            return cmd_ablate(ckpt_dir, data_dir, seed, ablate_episodes, variants, out, cfg);
        if (exportm->parsed()) return cmd_export_map(perception_ckpt, seed, export_steps,
                                                     out.empty() ? "map_export" : out, cfg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace escape
