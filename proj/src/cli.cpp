#include "ssf/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "ssf/checkpoint.hpp"
#include "ssf/parallel.hpp"
#include "ssf/selftest.hpp"
#include "ssf/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ssf {

namespace {

struct CliOptions {
    // data
    std::string data_dir;
    uint64_t data_seed = 99;
    SyntheticSpec spec;
    // model
    std::string grids = "2x2+3x3";
    double expansion = 2.0;
    int image_side = 32;
    int encoder_side = 16;
    std::vector<int> channels = {16, 32, 64};
    int proj_dim = 0;
    double tau = 0.0;
    double dropout = 0.1;
    std::string mask_mode = "pre_softmax";
    std::string variant = "full";
    // episodes
    int n_way = 5;
    int m_shot = 1;
    int b_query = 15;
    int episodes = 600;
    int pool_per_class = 3;
    bool distractors = false;
    // training
    std::string optimizer = "adam";
    double lr = 1e-3;
    double decay_factor = 0.5;
    int decay_every = 10;
    int pretrain_epochs = 8;
    int epochs = 6;
    int episodes_per_epoch = 80;
    int train_b_query = 5;
    bool no_augment = false;
    // io
    std::string out_dir = "runs";
    std::string out_path;
    std::string ckpt;
    std::string variants_csv = "full,no_sstl,no_pmm,global";
    uint64_t seed = 1;
    int threads = 0;
    bool verbose = false;
};

ModelConfig model_config(const CliOptions& o) {
    ModelConfig cfg;
    cfg.grids = GridSpec::parse(o.grids);
    cfg.grids.expansion = o.expansion;
    cfg.image_side = o.image_side;
    cfg.encoder_side = o.encoder_side;
    cfg.channels = o.channels;
    cfg.proj_dim = o.proj_dim;
    cfg.tau = o.tau;
    cfg.dropout_rate = o.dropout;
    if (o.mask_mode == "pre_softmax")
        cfg.mask_mode = MaskMode::PreSoftmax;
    else if (o.mask_mode == "hard_zero")
        cfg.mask_mode = MaskMode::HardZero;
    else
        throw ConfigError("unknown mask mode '" + o.mask_mode + "' (pre_softmax, hard_zero)");
    cfg.variant = variant_from_name(o.variant);
    cfg.validate();
    return cfg;
}

TrainConfig train_config(const CliOptions& o) {
    TrainConfig t;
    t.optim.kind = optimizer_from_name(o.optimizer);
    t.optim.lr = o.lr;
    t.optim.decay_factor = o.decay_factor;
    t.optim.decay_every = o.decay_every;
    t.pretrain_epochs = o.pretrain_epochs;
    t.epochs = o.epochs;
    t.episodes_per_epoch = o.episodes_per_epoch;
    t.n_way = o.n_way;
    t.m_shot = o.m_shot;
    t.b_query = o.train_b_query;
    t.augment = !o.no_augment;
    t.verbose = o.verbose;
    return t;
}

EpisodeConfig episode_config(const CliOptions& o, bool semi) {
    EpisodeConfig e;
    e.n_way = o.n_way;
    e.m_shot = o.m_shot;
    e.b_query = o.b_query;
    e.episode_count = o.episodes;
    e.semi = semi;
    e.distractors = o.distractors;
    e.pool_per_class = o.pool_per_class;
    return e;
}

Dataset obtain_dataset(const CliOptions& o) {
    if (!o.data_dir.empty()) return load_dataset(o.data_dir, o.image_side);
    return generate_synthetic_dataset(o.spec, o.data_seed);
}

json options_json(const CliOptions& o, const std::string& command) {
    json j;
    j["command"] = command;
    j["seed"] = o.seed;
    j["data"] = {{"dir", o.data_dir},
                 {"data_seed", o.data_seed},
                 {"side", o.spec.side},
                 {"train_classes", o.spec.train_classes},
                 {"val_classes", o.spec.val_classes},
                 {"test_classes", o.spec.test_classes},
                 {"images_per_class", o.spec.images_per_class},
                 {"glyph_side", o.spec.glyph_side},
                 {"glyph_intensity", o.spec.glyph_intensity},
                 {"noise_amplitude", o.spec.noise_amplitude},
                 {"distractor_pool", o.spec.distractor_pool},
                 {"distractor_intensity", o.spec.distractor_intensity}};
    j["model"] = {{"grids", o.grids},         {"expansion", o.expansion},
                  {"image_side", o.image_side}, {"encoder_side", o.encoder_side},
                  {"channels", o.channels},   {"proj_dim", o.proj_dim},
                  {"tau", o.tau},             {"dropout", o.dropout},
                  {"mask_mode", o.mask_mode}, {"variant", o.variant}};
    j["episodes"] = {{"n_way", o.n_way},       {"m_shot", o.m_shot},
                     {"b_query", o.b_query},   {"episodes", o.episodes},
                     {"pool_per_class", o.pool_per_class}, {"distractors", o.distractors}};
    j["train"] = {{"optimizer", o.optimizer},
                  {"lr", o.lr},
                  {"decay_factor", o.decay_factor},
                  {"decay_every", o.decay_every},
                  {"pretrain_epochs", o.pretrain_epochs},
                  {"epochs", o.epochs},
                  {"episodes_per_epoch", o.episodes_per_epoch},
                  {"train_b_query", o.train_b_query},
                  {"augment", !o.no_augment}};
    j["io"] = {{"out_dir", o.out_dir}, {"out", o.out_path}, {"ckpt", o.ckpt}};
    return j;
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Stable id derived from command, seed and the resolved options.
std::string make_run_id(const json& resolved) {
    std::string dump = resolved.dump();
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%08llx",
                  static_cast<unsigned long long>(fnv1a(dump) & 0xFFFFFFFFULL));
    return resolved["command"].get<std::string>() + "-s" +
           std::to_string(resolved["seed"].get<uint64_t>()) + "-" + buf;
}

std::string write_run_config(const CliOptions& o, const json& resolved, const std::string& run_id) {
    fs::create_directories(o.out_dir);
    fs::path p = fs::path(o.out_dir) / (run_id + "-config.json");
    std::ofstream f(p);
    f << resolved.dump(2) << "\n";
    return p.string();
}

void append_csv(const CliOptions& o, const std::string& run_id, const std::string& command,
                int episodes, const std::string& variant, double mean_acc, double ci95,
                double wall_seconds) {
    fs::create_directories(o.out_dir);
    fs::path p = fs::path(o.out_dir) / "results.csv";
    bool fresh = !fs::exists(p);
    std::ofstream f(p, std::ios::app);
    if (fresh)
        f << "run_id,command,n_way,m_shot,b_query,episodes,variant,mean_acc,ci95,wall_seconds\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%s,%d,%d,%d,%d,%s,%.6f,%.6f,%.3f\n", run_id.c_str(),
                  command.c_str(), o.n_way, o.m_shot, o.b_query, episodes, variant.c_str(),
                  mean_acc, ci95, wall_seconds);
    f << line;
}

void print_accuracy_line(const CliOptions& o, const char* prefix, double mean, double ci) {
    std::printf("%s%d-way %d-shot: %.2f±%.2f\n", prefix, o.n_way, o.m_shot, 100.0 * mean,
                100.0 * ci);
}

Model load_model_for_eval(const CliOptions& o, const CLI::App* sub) {
    Checkpoint ck = load_checkpoint(o.ckpt);
    Model model = ck.model;
    // Grid pyramid can be swapped at evaluation time: the encoder and heads
    // are patch-count independent.
    if (sub->count("--grids") > 0) {
        model.cfg.grids = GridSpec::parse(o.grids);
        model.cfg.grids.expansion = o.expansion;
        model.cfg.validate();
    }
    if (sub->count("--mask-mode") > 0)
        model.cfg.mask_mode = o.mask_mode == "hard_zero" ? MaskMode::HardZero : MaskMode::PreSoftmax;
    if (sub->count("--variant") > 0) model.cfg.variant = variant_from_name(o.variant);
    if (sub->count("--tau") > 0) model.cfg.tau = o.tau;
    return model;
}

int cmd_gen_data(const CliOptions& o) {
    if (o.out_path.empty()) throw ConfigError("gen-data: --out directory is required");
    Dataset ds = generate_synthetic_dataset(o.spec, o.seed);
    save_dataset(o.out_path, ds);
    std::printf("wrote %d images (%zu/%zu/%zu classes) to %s\n", ds.total_images(),
                ds.train.size(), ds.val.size(), ds.test.size(), o.out_path.c_str());
    return 0;
}

int cmd_pretrain(const CliOptions& o) {
    Dataset ds = obtain_dataset(o);
    Rng rng(Rng::mix(o.seed, 0x5EED));
    Model model = Model::init(model_config(o), rng);
    TrainConfig tc = train_config(o);
    tc.epochs = 0;  // pretraining stage only
    double acc = pretrain_backbone(ds, model, tc, o.seed);
    std::printf("pretrain done, final train accuracy %.3f\n", acc);

    Checkpoint ck;
    ck.model = model;
    ck.epoch = tc.pretrain_epochs;
    ck.rng_state = rng.serialize();
    save_checkpoint(o.out_path.empty() ? "pretrained.ckpt" : o.out_path, ck);
    return 0;
}

int cmd_train(const CliOptions& o, const CLI::App* sub) {
    Dataset ds = obtain_dataset(o);
    Model model = [&] {
        if (!o.ckpt.empty()) return load_checkpoint(o.ckpt).model;
        Rng rng(Rng::mix(o.seed, 0x5EED));
        return Model::init(model_config(o), rng);
    }();
    if (!o.ckpt.empty() && sub->count("--variant") > 0)
        model.cfg.variant = variant_from_name(o.variant);

    TrainConfig tc = train_config(o);
    if (!o.ckpt.empty()) tc.pretrain_epochs = 0;  // resume from warmed encoder
    train_full(ds, model, tc, o.seed);

    Checkpoint ck;
    ck.model = model;
    ck.epoch = tc.epochs;
    Rng state(o.seed);
    ck.rng_state = state.serialize();
    std::string path = o.out_path.empty() ? "model.ckpt" : o.out_path;
    save_checkpoint(path, ck);
    std::printf("saved checkpoint to %s\n", path.c_str());
    return 0;
}

int cmd_eval(const CliOptions& o, const CLI::App* sub, const json& resolved) {
    Dataset ds = obtain_dataset(o);
    Model model = load_model_for_eval(o, sub);
    auto t0 = std::chrono::steady_clock::now();
    EvalResult ev = evaluate(ds, Split::Test, model, episode_config(o, false), o.seed);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    print_accuracy_line(o, "", ev.mean_acc, ev.ci95);
    std::string run_id = make_run_id(resolved);
    write_run_config(o, resolved, run_id);
    append_csv(o, run_id, "eval", o.episodes, variant_name(model.cfg.variant), ev.mean_acc,
               ev.ci95, secs);
    return 0;
}

int cmd_semi(const CliOptions& o, const CLI::App* sub, const json& resolved) {
    Dataset ds = obtain_dataset(o);
    Model model = load_model_for_eval(o, sub);
    auto t0 = std::chrono::steady_clock::now();
    EvalResult ev = evaluate(ds, Split::Test, model, episode_config(o, true), o.seed);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    print_accuracy_line(o, "semi ", ev.mean_acc, ev.ci95);
    std::printf("pool admission: in-class %.3f (%lld/%lld), distractor %.3f (%lld/%lld)\n",
                ev.semi.in_class_rate(), ev.semi.in_class_admitted, ev.semi.in_class_considered,
                ev.semi.distractor_rate(), ev.semi.distractor_admitted,
                ev.semi.distractor_considered);
    std::string run_id = make_run_id(resolved);
    write_run_config(o, resolved, run_id);
    append_csv(o, run_id, "semi", o.episodes, variant_name(model.cfg.variant), ev.mean_acc,
               ev.ci95, secs);
    return 0;
}

int cmd_ablate(const CliOptions& o, const json& resolved) {
    Dataset ds = obtain_dataset(o);
    std::vector<Variant> variants;
    std::stringstream ss(o.variants_csv);
    std::string part;
    while (std::getline(ss, part, ',')) variants.push_back(variant_from_name(part));
    // comparison tables lead with the full pipeline
    std::stable_sort(variants.begin(), variants.end(), [](Variant a, Variant b) {
        return (a == Variant::Full) > (b == Variant::Full);
    });

    AblationReport report =
        run_ablation(ds, variants, model_config(o), train_config(o), episode_config(o, false),
                     o.seed);
    std::fputs(report.table().c_str(), stdout);

    std::string run_id = make_run_id(resolved);
    write_run_config(o, resolved, run_id);
    for (const auto& row : report.rows)
        append_csv(o, run_id, "ablate", o.episodes, variant_name(row.variant), row.mean_acc,
                   row.ci95, row.train_seconds);
    return 0;
}

int cmd_selftest() {
    auto results = run_selftest(true);
    int failures = 0;
    for (const auto& r : results) failures += r.passed ? 0 : 1;
    if (failures > 0) {
        std::printf("%d self test(s) failed\n", failures);
        return 2;
    }
    std::printf("all self tests passed\n");
    return 0;
}

void add_common_flags(CLI::App* sub, CliOptions& o) {
    sub->add_option("--seed", o.seed, "run seed");
    sub->add_option("--out-dir", o.out_dir, "directory for configs and CSV results");
    sub->add_option("--threads", o.threads, "worker thread cap (0 = hardware)");
    sub->add_flag("--verbose", o.verbose, "per-epoch progress output");
}

void add_data_flags(CLI::App* sub, CliOptions& o) {
    sub->add_option("--data", o.data_dir, "dataset root (train/val/test PPM tree)");
    sub->add_option("--data-seed", o.data_seed, "seed for the in-memory synthetic dataset");
    sub->add_option("--side", o.spec.side, "synthetic image side");
    sub->add_option("--train-classes", o.spec.train_classes);
    sub->add_option("--val-classes", o.spec.val_classes);
    sub->add_option("--test-classes", o.spec.test_classes);
    sub->add_option("--images-per-class", o.spec.images_per_class);
    sub->add_option("--glyph-side", o.spec.glyph_side);
    sub->add_option("--glyph-intensity", o.spec.glyph_intensity);
    sub->add_option("--noise", o.spec.noise_amplitude);
    sub->add_option("--distractor-pool", o.spec.distractor_pool);
    sub->add_option("--distractor-intensity", o.spec.distractor_intensity);
}

void add_model_flags(CLI::App* sub, CliOptions& o) {
    sub->add_option("--grids", o.grids, "patch pyramid, e.g. 2x2+3x3 or 4x4+2x2");
    sub->add_option("--expansion", o.expansion, "patch area expansion factor");
    sub->add_option("--image-side", o.image_side);
    sub->add_option("--encoder-side", o.encoder_side);
    sub->add_option("--channels", o.channels, "conv block widths")->delimiter(',');
    sub->add_option("--proj-dim", o.proj_dim, "projection width C' (0 = C)");
    sub->add_option("--tau", o.tau, "score temperature (0 = K/10)");
    sub->add_option("--dropout", o.dropout, "attention dropout rate");
    sub->add_option("--mask-mode", o.mask_mode, "pre_softmax or hard_zero");
    sub->add_option("--variant", o.variant, "full, no_sstl, no_pmm or global");
}

void add_episode_flags(CLI::App* sub, CliOptions& o) {
    sub->add_option("--n-way", o.n_way);
    sub->add_option("--m-shot", o.m_shot);
    sub->add_option("--b-query", o.b_query, "queries per class at evaluation");
    sub->add_option("--episodes", o.episodes, "evaluation episode count");
}

void add_train_flags(CLI::App* sub, CliOptions& o) {
    sub->add_option("--optimizer", o.optimizer, "sgd or adam");
    sub->add_option("--lr", o.lr);
    sub->add_option("--decay-factor", o.decay_factor);
    sub->add_option("--decay-every", o.decay_every, "epochs between lr decays");
    sub->add_option("--pretrain-epochs", o.pretrain_epochs);
    sub->add_option("--epochs", o.epochs, "meta-training epochs");
    sub->add_option("--episodes-per-epoch", o.episodes_per_epoch);
    sub->add_option("--train-b-query", o.train_b_query, "queries per class per training episode");
    sub->add_flag("--no-augment", o.no_augment, "disable pretraining augmentation");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Few-shot image classification with patch pyramids, sparse mutual-NN cross "
                 "attention and patch matching"};
    app.require_subcommand(1);

    CliOptions o;
    if (const char* env = std::getenv("SSF_THREADS")) {
        int t = std::atoi(env);
        if (t > 0) set_thread_count(t);
    }

    auto* gen = app.add_subcommand("gen-data", "write a synthetic PPM dataset tree");
    gen->add_option("--out", o.out_path, "output directory")->required();
    add_common_flags(gen, o);
    add_data_flags(gen, o);

    auto* pre = app.add_subcommand("pretrain", "classification warm-up of the encoder");
    pre->add_option("--out", o.out_path, "checkpoint path");
    add_common_flags(pre, o);
    add_data_flags(pre, o);
    add_model_flags(pre, o);
    add_train_flags(pre, o);

    auto* tr = app.add_subcommand("train", "pretrain + episodic meta-training");
    tr->add_option("--out", o.out_path, "checkpoint path");
    tr->add_option("--init", o.ckpt, "start from an existing checkpoint");
    add_common_flags(tr, o);
    add_data_flags(tr, o);
    add_model_flags(tr, o);
    add_episode_flags(tr, o);
    add_train_flags(tr, o);

    auto* ev = app.add_subcommand("eval", "episodic evaluation of a checkpoint");
    ev->add_option("--ckpt", o.ckpt, "checkpoint to evaluate")->required();
    add_common_flags(ev, o);
    add_data_flags(ev, o);
    add_model_flags(ev, o);
    add_episode_flags(ev, o);

    auto* ab = app.add_subcommand("ablate", "train and compare pipeline variants");
    ab->add_option("--variants", o.variants_csv, "comma list: full,no_sstl,no_pmm,global");
    add_common_flags(ab, o);
    add_data_flags(ab, o);
    add_model_flags(ab, o);
    add_episode_flags(ab, o);
    add_train_flags(ab, o);

    auto* se = app.add_subcommand("semi", "evaluation with unlabeled support extension");
    se->add_option("--ckpt", o.ckpt, "checkpoint to evaluate")->required();
    se->add_option("--pool-per-class", o.pool_per_class, "unlabeled images per episode class");
    se->add_flag("--distractors", o.distractors, "add out-of-episode images to the pool");
    add_common_flags(se, o);
    add_data_flags(se, o);
    add_model_flags(se, o);
    add_episode_flags(se, o);

    auto* st = app.add_subcommand("selftest", "gradient-check and oracle suites");
    add_common_flags(st, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (o.threads > 0) set_thread_count(o.threads);

    try {
        if (gen->parsed()) return cmd_gen_data(o);
        if (pre->parsed()) return cmd_pretrain(o);
        if (tr->parsed()) return cmd_train(o, tr);
        if (ev->parsed()) return cmd_eval(o, ev, options_json(o, "eval"));
        if (ab->parsed()) return cmd_ablate(o, options_json(o, "ablate"));
        if (se->parsed()) return cmd_semi(o, se, options_json(o, "semi"));
        if (st->parsed()) return cmd_selftest();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}

}  // namespace ssf
