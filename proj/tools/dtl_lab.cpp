// dtl_lab: workbench CLI for the side-network fine-tuning experiments.
// Subcommands: train, eval, memreport, sweep-m, reuse, gradcheck.
// Exit codes: 0 success, 2 config/usage error, 3 numeric abort.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dtl/gradcheck.hpp"
#include "dtl/memory.hpp"
#include "dtl/reuse.hpp"
#include "dtl/toml.hpp"
#include "dtl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "dtl-lab 1.0.0";

long env_threads() {
    const char* v = std::getenv("DTL_LAB_THREADS");
    if (!v) return 1;
    long n = std::strtol(v, nullptr, 10);
    return n >= 1 ? n : 1;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << text;
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const std::map<std::string, std::string>& config_snapshot, std::uint64_t seed,
                    const std::vector<std::string>& outputs, double wall_seconds) {
    json j;
    j["command"] = command;
    j["config"] = config_snapshot;
    j["seed"] = seed;
    j["version"] = kVersion;
    j["threads"] = env_threads();
    j["outputs"] = outputs;
    j["wall_clock_seconds"] = wall_seconds;
    write_file(out_dir / "manifest.json", j.dump(2) + "\n");
}

struct RunSetup {
    dtl::ViTConfig vit;
    dtl::AdapterSpec adapter;
    dtl::DatasetSpec data;
    dtl::TrainConfig train;
    std::uint64_t seed = 0;
};

// Parses the TOML run config. Throws std::invalid_argument with an itemized
// list when required keys are missing.
RunSetup read_run_config(const std::string& path) {
    dtl::TomlDoc doc = dtl::TomlDoc::parse_file(path);
    auto absent = doc.missing({"adapter.spec", "data.kind", "train.epochs"});
    if (!absent.empty()) {
        std::string msg = "config " + path + " is missing required keys:";
        for (const auto& k : absent) msg += "\n  " + k;
        throw std::invalid_argument(msg);
    }

    RunSetup s;
    std::string preset = doc.get_string("model.preset", "toy");
    if (preset == "toy")
        s.vit = dtl::ViTConfig::toy();
    else if (preset == "micro")
        s.vit = dtl::ViTConfig::micro();
    else
        throw std::invalid_argument("model.preset must be toy or micro, got " + preset);
    if (doc.has("model.n_blocks")) s.vit.n_blocks = doc.get_int("model.n_blocks");
    if (doc.has("model.embed_dim")) s.vit.embed_dim = doc.get_int("model.embed_dim");
    if (doc.has("model.heads")) s.vit.heads = doc.get_int("model.heads");
    if (doc.has("model.img")) s.vit.img = doc.get_int("model.img");
    if (doc.has("model.patch")) s.vit.patch = doc.get_int("model.patch");
    if (doc.has("model.mlp_ratio")) s.vit.mlp_ratio = doc.get_int("model.mlp_ratio");
    s.vit.n_classes = doc.get_int("data.n_classes", 4);
    s.vit.validate();

    s.adapter = dtl::AdapterSpec::parse(doc.get_string("adapter.spec"));
    if (doc.has("adapter.m")) s.adapter.csn.inject_from = doc.get_int("adapter.m");
    if (doc.has("adapter.d_prime")) s.adapter.csn.d_prime = doc.get_int("adapter.d_prime");
    if (doc.has("adapter.kernel")) s.adapter.csn.kernel = doc.get_int("adapter.kernel");
    if (doc.has("adapter.rank")) s.adapter.rank = doc.get_int("adapter.rank");
    if (doc.has("adapter.prompt_len")) s.adapter.prompt_len = doc.get_int("adapter.prompt_len");
    if (doc.has("adapter.bottleneck")) s.adapter.bottleneck = doc.get_int("adapter.bottleneck");

    std::string kind = doc.get_string("data.kind");
    if (kind == "synthetic-linear")
        s.data.kind = dtl::DatasetSpec::Kind::SyntheticLinear;
    else if (kind == "synthetic-planted")
        s.data.kind = dtl::DatasetSpec::Kind::SyntheticPlanted;
    else if (kind == "image-folder")
        s.data.kind = dtl::DatasetSpec::Kind::ImageFolder;
    else
        throw std::invalid_argument(
            "data.kind must be synthetic-linear, synthetic-planted or image-folder, got " + kind);
    s.data.n_classes = s.vit.n_classes;
    s.data.n_train = doc.get_int("data.n_train", 128);
    s.data.n_test = doc.get_int("data.n_test", 128);
    s.data.shift_strength = doc.get_double("data.shift_strength", 0.1);
    s.data.odd_mix = doc.get_double("data.odd_mix", 0.3);
    s.data.planted_block = doc.get_int("data.planted_block", 7);
    s.data.path = doc.get_string("data.path", "");
    s.data.labels_csv = doc.get_string("data.labels_csv", "");

    s.train.lr_max = doc.get_double("train.lr_max", 1e-2);
    s.train.lr_min = doc.get_double("train.lr_min", 0.0);
    s.train.weight_decay = doc.get_double("train.weight_decay", 1e-4);
    s.train.epochs = doc.get_int("train.epochs");
    s.train.batch_size = doc.get_int("train.batch_size", 32);
    s.train.warmup_steps = doc.get_int("train.warmup_steps", 0);
    s.train.inject_nan = doc.get_bool("train.inject_nan", false);
    s.seed = static_cast<std::uint64_t>(doc.get_int("train.seed", 0));
    s.train.seed = s.seed;
    s.train.validate();
    s.adapter.validate(s.vit);
    return s;
}

int cmd_train(const std::string& config_path, const std::string& out, std::int64_t seed_flag) {
    auto t0 = std::chrono::steady_clock::now();
    RunSetup s = read_run_config(config_path);
    if (seed_flag >= 0) {
        s.seed = static_cast<std::uint64_t>(seed_flag);
        s.train.seed = s.seed;
    }
    fs::create_directories(out);
    s.train.checkpoint_path = (fs::path(out) / "checkpoint").string();

    dtl::ViTModel backbone(s.vit, s.seed);
    dtl::AdaptedModel model(backbone, s.adapter, s.seed + 1);
    for (const auto& w : model.warnings()) std::cerr << "warning: " << w << "\n";
    dtl::Dataset data = dtl::make_dataset(backbone, s.data, s.seed + 2);

    dtl::History hist = dtl::train(model, data, s.train);
    write_file(fs::path(out) / "history.csv", dtl::history_csv(hist));
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "train", dtl::TomlDoc::parse_file(config_path).raw(), s.seed,
                   {"history.csv", "checkpoint.json", "checkpoint.bin"}, wall);
    std::cout << "best_accuracy=" << hist.best_accuracy << " best_epoch=" << hist.best_epoch
              << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& out, std::int64_t seed_flag) {
    auto t0 = std::chrono::steady_clock::now();
    RunSetup s = read_run_config(config_path);
    if (seed_flag >= 0) s.seed = static_cast<std::uint64_t>(seed_flag);
    fs::create_directories(out);

    dtl::ViTModel backbone(s.vit, s.seed);
    dtl::AdaptedModel model(backbone, s.adapter, s.seed + 1);
    dtl::Dataset data = dtl::make_dataset(backbone, s.data, s.seed + 2);

    // the checkpoint holds only the trainable set; each store picks up its own
    dtl::ManifestOptions lax{false};
    dtl::load_weights(backbone.params(), checkpoint, lax);
    dtl::load_weights(model.adapter_params(), checkpoint, lax);

    double acc = dtl::evaluate(model, data.test_images, data.test_labels);
    json j{{"accuracy", acc}, {"n_test", data.test_images.size()}};
    write_file(fs::path(out) / "eval.json", j.dump(2) + "\n");
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "eval", dtl::TomlDoc::parse_file(config_path).raw(), s.seed,
                   {"eval.json"}, wall);
    std::cout << "accuracy=" << acc << "\n";
    return 0;
}

int cmd_memreport(const std::string& specs_arg, const std::string& out, long batch,
                  std::uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    std::vector<dtl::AdapterSpec> specs;
    std::stringstream ss(specs_arg);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            specs.push_back(dtl::AdapterSpec::parse(item));
        } catch (const std::exception&) {
            std::string valid;
            for (const auto& n : dtl::AdapterSpec::known_names()) valid += " " + n;
            throw std::invalid_argument("unknown spec '" + item + "'; valid names:" + valid);
        }
    }
    if (specs.empty()) throw std::invalid_argument("--specs is empty");

    fs::create_directories(out);
    dtl::ViTConfig cfg = dtl::ViTConfig::toy();
    auto rows = dtl::compare(specs, cfg, batch, seed);
    write_file(fs::path(out) / "memory_compare.csv", dtl::compare_csv(rows));
    write_file(fs::path(out) / "memory_compare.json", dtl::compare_json(rows));

    std::vector<std::string> outputs{"memory_compare.csv", "memory_compare.json"};
    for (const auto& row : rows) {
        std::ostringstream b;
        b << "scope,cached_bytes,retained_tensors\n";
        for (const auto& [scope, bytes] : row.report.cached_by_scope) {
            long count = 0;
            auto it = row.report.retained_count_by_scope.find(scope);
            if (it != row.report.retained_count_by_scope.end()) count = it->second;
            b << scope << "," << bytes << "," << count << "\n";
        }
        std::string fname = "breakdown_" + row.report.spec_name + ".csv";
        write_file(fs::path(out) / fname, b.str());
        outputs.push_back(fname);
    }
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "memreport", {{"specs", specs_arg}, {"batch", std::to_string(batch)}},
                   seed, outputs, wall);
    std::cout << dtl::compare_csv(rows);
    return 0;
}

int cmd_sweep_m(const std::string& out, long batch, std::uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out);
    dtl::ViTConfig cfg = dtl::ViTConfig::toy();
    std::vector<long> Ms;
    for (long M = 1; M <= cfg.n_blocks + 1; ++M) Ms.push_back(M);
    auto reports = dtl::sweep_M(cfg, Ms, batch, seed);
    write_file(fs::path(out) / "sweep_m.csv", dtl::sweep_csv(reports, Ms));
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "sweep-m", {{"batch", std::to_string(batch)}}, seed, {"sweep_m.csv"},
                   wall);
    std::cout << dtl::sweep_csv(reports, Ms);
    return 0;
}

int cmd_reuse(const std::string& out, long tasks, long M, bool verify, long wallclock_repeats,
              std::uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out);
    dtl::ViTConfig cfg = dtl::ViTConfig::toy();
    dtl::CSNConfig csn;
    csn.inject_from = M;
    dtl::FlopReport r = dtl::flop_report(tasks, csn, cfg);

    json j = json::parse(dtl::flop_report_json(r));
    if (verify || wallclock_repeats > 0) {
        dtl::ViTModel backbone(cfg, seed);
        backbone.freeze_all();
        std::vector<dtl::TaskBundle> bundle;
        for (long t = 0; t < tasks; ++t)
            bundle.push_back(dtl::make_task(backbone, csn, t, seed + 101 + t));
        dtl::Tensor image = dtl::random_images(cfg, 1, seed + 7).front();
        if (verify) {
            auto shared = dtl::shared_prefix_infer(backbone, bundle, image);
            bool all_equal = true;
            for (long t = 0; t < tasks; ++t)
                all_equal = all_equal &&
                            shared[t].bitwise_equal(
                                dtl::standalone_infer(backbone, bundle[t], image));
            j["bitwise_equal_standalone"] = all_equal;
        }
        if (wallclock_repeats > 0)
            j["measured_saving_fraction"] =
                dtl::measured_saving(backbone, bundle, image, wallclock_repeats);
    }
    write_file(fs::path(out) / "reuse.json", j.dump(2) + "\n");
    write_file(fs::path(out) / "reuse.csv", dtl::flop_report_csv(r));
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "reuse",
                   {{"tasks", std::to_string(tasks)}, {"M", std::to_string(M)}}, seed,
                   {"reuse.json", "reuse.csv"}, wall);
    std::cout << "saving_fraction=" << r.saving_fraction << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& out, double threshold, double eps, std::uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out);
    dtl::ViTConfig cfg = dtl::ViTConfig::micro();

    // defaults resized to the 2-block model
    std::vector<dtl::AdapterSpec> specs = {
        dtl::AdapterSpec::full(),          dtl::AdapterSpec::linear(),
        dtl::AdapterSpec::bitfit(),        dtl::AdapterSpec::vpt(2, false),
        dtl::AdapterSpec::vpt(2, true),    dtl::AdapterSpec::adapter_serial(4),
        dtl::AdapterSpec::adaptformer(4),  dtl::AdapterSpec::ssf(),
        dtl::AdapterSpec::lora(2),         dtl::AdapterSpec::dtl(2, 2),
        dtl::AdapterSpec::dtl_plus(2, 2, 3),
    };

    std::ostringstream csv;
    csv << "spec,max_rel_err,worst_param,checked_scalars\n";
    bool ok = true;
    for (const auto& spec : specs) {
        dtl::ViTModel backbone(cfg, seed);
        dtl::AdaptedModel model(backbone, spec, seed + 1);
        dtl::Tensor image = dtl::random_images(cfg, 1, seed + 2).front();
        // The loss is scaled down so central-difference cancellation noise
        // (~ulp(loss)/eps) stays below the checker's 1e-8 denominator floor;
        // relative agreement above the floor is unaffected.
        auto build = [&](dtl::Graph& g) {
            return g.scale(dtl::record_batch_loss(model, g, {image}, {1}), 1e-3);
        };
        auto r1 = dtl::grad_check(build, backbone.params(), eps);
        auto r2 = dtl::grad_check(build, model.adapter_params(), eps);
        auto& worst = r1.max_rel_err >= r2.max_rel_err ? r1 : r2;
        long checked = r1.checked_scalars + r2.checked_scalars;
        csv << spec.name() << "," << worst.max_rel_err << "," << worst.worst_param << ","
            << checked << "\n";
        std::cout << spec.name() << ": max_rel_err=" << worst.max_rel_err << " (" << checked
                  << " scalars)\n";
        if (worst.max_rel_err > threshold) ok = false;
    }
    write_file(fs::path(out) / "gradcheck.csv", csv.str());
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(out, "gradcheck",
                   {{"threshold", std::to_string(threshold)}, {"eps", std::to_string(eps)}},
                   seed, {"gradcheck.csv"}, wall);
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Workbench for side-network fine-tuning on a toy ViT"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint, specs_arg = "full,linear,lora,dtl";
    std::int64_t seed_flag = -1;
    std::uint64_t seed = 0;
    long batch = 32, tasks = 19, M = 7, wallclock_repeats = 0;
    double threshold = 1e-4, eps = 1e-5;
    bool verify = false;

    auto* train = app.add_subcommand("train", "Train one strategy per a TOML config");
    train->add_option("--config", config_path)->required();
    train->add_option("--out", out_dir)->required();
    train->add_option("--seed", seed_flag);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the config's test set");
    ev->add_option("--config", config_path)->required();
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--out", out_dir)->required();
    ev->add_option("--seed", seed_flag);

    auto* mem = app.add_subcommand("memreport", "Activation-memory comparison across strategies");
    mem->add_option("--specs", specs_arg);
    mem->add_option("--out", out_dir)->required();
    mem->add_option("--batch", batch);
    mem->add_option("--seed", seed);

    auto* sweep = app.add_subcommand("sweep-m", "Cached bytes vs injection index M");
    sweep->add_option("--out", out_dir)->required();
    sweep->add_option("--batch", batch);
    sweep->add_option("--seed", seed);

    auto* reuse = app.add_subcommand("reuse", "Shared-prefix multi-task inference savings");
    reuse->add_option("--out", out_dir)->required();
    reuse->add_option("--tasks", tasks);
    reuse->add_option("--m", M);
    reuse->add_flag("--verify", verify, "also run real inference and check bitwise equality");
    reuse->add_option("--wallclock", wallclock_repeats, "repeats for wall-clock timing mode");
    reuse->add_option("--seed", seed);

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every strategy");
    gc->add_option("--out", out_dir)->required();
    gc->add_option("--threshold", threshold);
    gc->add_option("--eps", eps);
    gc->add_option("--seed", seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir, seed_flag);
        if (ev->parsed()) return cmd_eval(config_path, checkpoint, out_dir, seed_flag);
        if (mem->parsed()) return cmd_memreport(specs_arg, out_dir, batch, seed);
        if (sweep->parsed()) return cmd_sweep_m(out_dir, batch, seed);
        if (reuse->parsed()) return cmd_reuse(out_dir, tasks, M, verify, wallclock_repeats, seed);
        if (gc->parsed()) return cmd_gradcheck(out_dir, threshold, eps, seed);
    } catch (const dtl::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
