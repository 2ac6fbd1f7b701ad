// duet: desk-scale dual-caption image-text pretraining with self-distillation
// and masked patch modeling, plus the companion data, curation and evaluation
// pipelines.
//
//   duet generate-data --count 10000 --classes 16 --side 64 --seed 1 --out data/
//   duet train --config train.cfg --seed 7
//   duet distill --teacher runs/tips/ckpt_final --config distill.cfg
//   duet eval --ckpt runs/tips/ckpt_final --task retrieval --data data/
//   duet attn-stats --ckpt runs/tips/ckpt_final --data data/ --out stats.json
//   duet curate --pool pool.emb --targets a.emb b.emb --clusters 4,8 --quota 100 \
//       --threshold 0.99 --seed 3 --out plan.json
//   duet grad-check --losses all

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "duet/curate.hpp"
#include "duet/datagen.hpp"
#include "duet/eval.hpp"
#include "duet/gradcheck.hpp"
#include "duet/losses.hpp"
#include "duet/train.hpp"

using namespace duet;

namespace {

uint64_t fresh_seed() {
    const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
    const uint64_t seed = uint64_t(now) ^ 0x9e3779b97f4a7c15ull;
    std::fprintf(stderr, "note: no --seed given, using %llu\n", (unsigned long long)seed);
    return seed;
}

int run_generate(const std::string& out, int64_t count, int classes, int side,
                 uint64_t seed, int64_t eval_count) {
    GenConfig cfg;
    cfg.count = count;
    cfg.classes = classes;
    cfg.side = side;
    cfg.seed = seed;
    cfg.eval_count = eval_count;
    cfg.out_dir = out;
    generate_corpus(cfg);
    std::printf("wrote %lld records to %s\n", (long long)count, out.c_str());
    return 0;
}

KVConfig build_train_kv(const std::string& config_path,
                        const std::vector<std::string>& overrides, bool seed_given,
                        uint64_t seed, const std::string& out, const std::string& data,
                        const std::string& resume) {
    KVConfig kv = config_path.empty() ? KVConfig() : KVConfig::parse_file(config_path);
    for (const auto& kvpair : overrides) {
        const auto eq = kvpair.find('=');
        DUET_CHECK(eq != std::string::npos, "cli: --set expects key=value, got ", kvpair);
        kv.set(kvpair.substr(0, eq), kvpair.substr(eq + 1));
    }
    if (seed_given)
        kv.set("seed", std::to_string(seed));
    else if (!kv.has("seed"))
        kv.set("seed", std::to_string(fresh_seed()));
    if (!out.empty()) kv.set("out", out);
    if (!data.empty()) kv.set("data", data);
    if (!resume.empty()) kv.set("resume", resume);
    return kv;
}

template <typename T>
int run_train_typed(const KVConfig& kv) {
    TrainConfig cfg = TrainConfig::from_kv(kv);
    Trainer<T> trainer(cfg);
    std::printf("training: %lld steps (%s, %s)\n", (long long)trainer.total_steps(),
                caption_mode_name(cfg.caption_mode), cfg.precision.c_str());
    trainer.run();
    std::printf("done: checkpoint at %s/ckpt_final\n", cfg.out_dir.c_str());
    return 0;
}

int run_train(const KVConfig& kv) {
    const std::string precision = kv.get_str("precision", "f32");
    return precision == "f64" ? run_train_typed<double>(kv) : run_train_typed<float>(kv);
}

std::vector<std::string> class_names_for(const DatasetMeta& meta) {
    const auto& all = shape_class_names();
    return {all.begin(), all.begin() + meta.classes};
}

template <typename T>
int run_eval_typed(const std::string& ckpt, const std::string& task, const std::string& data,
                   const std::string& report_path, const std::string& branch,
                   int64_t probe_images, int64_t knn_k) {
    auto model = load_eval_model<T>(ckpt, branch);
    const DatasetMeta meta = load_meta(data);
    auto train_records = load_dataset(data, "train");
    auto eval_records = load_dataset(data, "eval");
    DUET_CHECK(!eval_records.empty(), "eval: dataset has no eval split");
    if (probe_images > 0 && int64_t(train_records.size()) > probe_images)
        train_records.resize(size_t(probe_images));

    nlohmann::json report;
    report["task"] = task;
    report["checkpoint"] = ckpt;
    report["branch"] = branch;

    auto labels_of = [](const std::vector<DatasetRecord>& recs) {
        std::vector<int> out;
        for (const auto& r : recs) out.push_back(r.class_id);
        return out;
    };

    if (task == "knn") {
        auto train_emb = embed_images(model, data, train_records);
        auto eval_emb = embed_images(model, data, eval_records);
        const double acc = knn_classify(train_emb.e_g, labels_of(train_records), eval_emb.e_g,
                                        labels_of(eval_records), int(knn_k));
        report["knn_top1"] = acc;
        report["k"] = knn_k;
    } else if (task == "probe-cls") {
        auto train_emb = embed_images(model, data, train_records);
        auto eval_emb = embed_images(model, data, eval_records);
        ProbeSpec spec;
        auto result = train_softmax_probe(train_emb.e_g, labels_of(train_records),
                                          eval_emb.e_g, labels_of(eval_records), meta.classes,
                                          spec);
        report["probe_top1"] = result.metric;
        report["best_lr"] = result.best_lr;
    } else if (task == "probe-seg" || task == "probe-depth") {
        const auto probe_task = task == "probe-seg" ? ProbeSpec::Task::segmentation
                                                    : ProbeSpec::Task::depth_bins;
        const int64_t channels = task == "probe-seg" ? meta.classes + 1 : 256;
        auto train_data =
            build_dense_probe_data(model, data, train_records, probe_task, channels);
        auto eval_data = build_dense_probe_data(model, data, eval_records, probe_task, channels);
        ProbeSpec spec;
        auto result = train_dense_probe(train_data, eval_data, probe_task, spec);
        report[task == "probe-seg" ? "miou" : "depth_rmse"] = result.metric;
        report["best_lr"] = result.best_lr;
        if (task == "probe-depth") report["bins"] = 256;
    } else if (task == "retrieval") {
        auto eval_emb = embed_images(model, data, eval_records);
        std::vector<std::string> captions;
        for (const auto& r : eval_records) captions.push_back(r.synthetic);
        auto txt = embed_texts(model, captions);
        std::vector<std::pair<int64_t, int64_t>> pairs;
        for (int64_t i = 0; i < int64_t(eval_records.size()); ++i) pairs.push_back({i, i});
        // retrieval uses the class token trained against the synthetic caption
        const Tensor<T>& img = model.has_second_token() ? eval_emb.e_hat_g : eval_emb.e_g;
        auto r = retrieval_eval(img, txt, pairs);
        report["r1_image_to_text"] = r.r1_image_to_text;
        report["r1_text_to_image"] = r.r1_text_to_image;
        report["pairs"] = pairs.size();
        report["chance_r1"] = 1.0 / double(pairs.size());
    } else if (task == "zeroshot") {
        auto eval_emb = embed_images(model, data, eval_records);
        const double acc =
            zero_shot_classify(model, class_names_for(meta), default_prompt_templates(),
                               eval_emb.e_g, labels_of(eval_records));
        report["zeroshot_top1"] = acc;
        report["templates"] = default_prompt_templates().size();
        report["chance"] = 1.0 / double(meta.classes);
    } else {
        fail("eval: unknown task '", task,
             "' (expected knn|probe-cls|probe-seg|probe-depth|retrieval|zeroshot)");
    }

    const std::string text = report.dump(2);
    if (report_path.empty()) {
        std::printf("%s\n", text.c_str());
    } else {
        std::ofstream out(report_path, std::ios::binary);
        DUET_CHECK(out.good(), "eval: cannot write report to ", report_path);
        out << text << "\n";
        std::printf("report written to %s\n", report_path.c_str());
    }
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& task, const std::string& data,
             const std::string& report, const std::string& branch, int64_t probe_images,
             int64_t knn_k) {
    return checkpoint_dtype(ckpt) == "f64"
               ? run_eval_typed<double>(ckpt, task, data, report, branch, probe_images, knn_k)
               : run_eval_typed<float>(ckpt, task, data, report, branch, probe_images, knn_k);
}

template <typename T>
int run_attn_stats_typed(const std::string& ckpt, const std::string& data,
                         const std::string& out_path, bool median, int64_t limit) {
    auto model = load_eval_model<T>(ckpt);
    auto records = load_dataset(data, "eval");
    if (records.empty()) records = load_dataset(data);
    if (limit > 0 && int64_t(records.size()) > limit) records.resize(size_t(limit));
    auto stats = attention_stats(model, data, records, median);
    nlohmann::json j;
    j["median_filter"] = median;
    j["images"] = records.size();
    j["noisy_token"] = {{"max", stats.max_noisy},
                        {"std", stats.std_noisy},
                        {"entropy", stats.entropy_noisy},
                        {"mean_max", AttentionStats::mean(stats.max_noisy)},
                        {"mean_std", AttentionStats::mean(stats.std_noisy)},
                        {"mean_entropy", AttentionStats::mean(stats.entropy_noisy)}};
    j["synthetic_token"] = {{"max", stats.max_synthetic},
                            {"std", stats.std_synthetic},
                            {"entropy", stats.entropy_synthetic},
                            {"mean_max", AttentionStats::mean(stats.max_synthetic)},
                            {"mean_std", AttentionStats::mean(stats.std_synthetic)},
                            {"mean_entropy", AttentionStats::mean(stats.entropy_synthetic)}};
    std::ofstream out(out_path, std::ios::binary);
    DUET_CHECK(out.good(), "attn-stats: cannot write ", out_path);
    out << j.dump(2) << "\n";
    std::printf("attention statistics for %zu images written to %s\n", records.size(),
                out_path.c_str());
    return 0;
}

int run_curate(const std::string& pool_path, const std::vector<std::string>& target_paths,
               const std::string& clusters_arg, int64_t quota, double threshold, uint64_t seed,
               const std::string& out_path, const std::string& protect_path) {
    std::vector<int64_t> ks;
    std::stringstream ss(clusters_arg);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) ks.push_back(std::stoll(item));
    DUET_CHECK(ks.size() == target_paths.size(), "curate: ", target_paths.size(),
               " targets need as many cluster counts, got ", ks.size());

    Tensor<double> pool = read_embeddings(pool_path);
    l2_normalize_embeddings(pool);

    // per-target curation, then union and dedup across all samples
    std::vector<int64_t> union_ids;
    nlohmann::json per_target = nlohmann::json::array();
    for (size_t t = 0; t < target_paths.size(); ++t) {
        Tensor<double> target = read_embeddings(target_paths[t]);
        l2_normalize_embeddings(target);
        ClusterModel model = kmeans(target, ks[t], seed + t);
        CurationPlan plan = curate_sample(pool, model, quota, seed + 1000 + t);
        per_target.push_back({{"target", target_paths[t]},
                              {"clusters", ks[t]},
                              {"draw_counts", plan.draw_counts},
                              {"selected", plan.selected.size()}});
        union_ids.insert(union_ids.end(), plan.selected.begin(), plan.selected.end());
    }
    std::sort(union_ids.begin(), union_ids.end());
    union_ids.erase(std::unique(union_ids.begin(), union_ids.end()), union_ids.end());

    Tensor<double> selected_emb({std::max<int64_t>(1, int64_t(union_ids.size())), pool.cols()});
    for (size_t i = 0; i < union_ids.size(); ++i)
        std::copy_n(pool.row(union_ids[i]), pool.cols(), selected_emb.row(int64_t(i)));
    Tensor<double> protect;
    std::vector<int64_t> removed_local;
    if (!union_ids.empty()) {
        if (!protect_path.empty()) {
            protect = read_embeddings(protect_path);
            l2_normalize_embeddings(protect);
            removed_local = dedup(selected_emb, threshold, &protect);
        } else {
            removed_local = dedup(selected_emb, threshold);
        }
    }
    std::vector<char> removed_mask(union_ids.size(), 0);
    for (int64_t r : removed_local)
        if (size_t(r) < removed_mask.size()) removed_mask[size_t(r)] = 1;

    std::vector<int64_t> kept, removed_ids;
    for (size_t i = 0; i < union_ids.size(); ++i)
        (removed_mask[i] ? removed_ids : kept).push_back(union_ids[i]);

    std::ofstream out(out_path, std::ios::binary);
    DUET_CHECK(out.good(), "curate: cannot write ", out_path);
    for (int64_t id : kept) out << id << "\n";
    nlohmann::json summary{{"pool", pool_path},
                           {"pool_size", pool.rows()},
                           {"quota_per_target", quota},
                           {"threshold", threshold},
                           {"seed", seed},
                           {"selected", kept.size()},
                           {"dedup_removed", removed_ids},
                           {"per_target", per_target}};
    out << summary.dump() << "\n";
    std::printf("curated %zu ids (%zu removed by dedup) -> %s\n", kept.size(),
                removed_ids.size(), out_path.c_str());
    return 0;
}

int run_grad_check(const std::string& which, double tolerance) {
    Rng rng(20240 + 7);
    using testfn = std::function<GradReport()>;
    std::vector<std::pair<std::string, testfn>> checks;

    auto add = [&](const std::string& name, testfn fn) {
        if (which == "all" || which == name) checks.push_back({name, std::move(fn)});
    };

    add("clip", [&rng, tolerance] {
        auto img = Value<double>::param(Tensor<double>::randn({3, 6}, rng));
        auto txt = Value<double>::param(Tensor<double>::randn({3, 6}, rng));
        auto temp = Value<double>::param(Tensor<double>::scalar(10.0));
        return grad_check(
            [&] { return clip_loss(l2_normalize_rows(img), l2_normalize_rows(txt), temp); },
            {{"img", img}, {"txt", txt}, {"temp", temp}}, 1e-5, tolerance);
    });
    add("distill", [&rng, tolerance] {
        auto student = Value<double>::param(Tensor<double>::randn({6, 8}, rng, 0.3));
        auto teacher = Value<double>::param(Tensor<double>::randn({2, 8}, rng, 0.3));
        Tensor<double> center = Tensor<double>::randn({1, 8}, rng, 0.05);
        return grad_check(
            [&] { return distill_loss(student, teacher, center, 0.07, 0.1, 3); },
            {{"student", student}}, 1e-5, tolerance);
    });
    add("mask", [&rng, tolerance] {
        auto student = Value<double>::param(Tensor<double>::randn({7, 8}, rng, 0.3));
        auto teacher = Value<double>::param(Tensor<double>::randn({7, 8}, rng, 0.3));
        Tensor<double> center = Tensor<double>::randn({1, 8}, rng, 0.05);
        return grad_check(
            [&] { return mask_loss(student, teacher, {3, 4}, center, 0.05, 0.1); },
            {{"student", student}}, 1e-5, tolerance);
    });
    add("total", [&rng, tolerance] {
        auto img = Value<double>::param(Tensor<double>::randn({4, 6}, rng));
        auto txt = Value<double>::param(Tensor<double>::randn({4, 6}, rng));
        auto temp = Value<double>::param(Tensor<double>::scalar(5.0));
        auto sg = Value<double>::param(Tensor<double>::randn({8, 8}, rng, 0.3));
        auto tg = Value<double>::param(Tensor<double>::randn({4, 8}, rng, 0.3));
        auto sm = Value<double>::param(Tensor<double>::randn({6, 8}, rng, 0.3));
        auto tm = Value<double>::param(Tensor<double>::randn({6, 8}, rng, 0.3));
        Tensor<double> c = Tensor<double>::randn({1, 8}, rng, 0.05);
        Tensor<double> cp = Tensor<double>::randn({1, 8}, rng, 0.05);
        return grad_check(
            [&] {
                LossTerms<double> terms;
                terms.clip = clip_loss(l2_normalize_rows(img), l2_normalize_rows(txt), temp);
                terms.clip_hat =
                    clip_loss(l2_normalize_rows(txt), l2_normalize_rows(img), temp);
                terms.distill = distill_loss(sg, tg, c, 0.07, 0.1, 2);
                terms.mask = mask_loss(sm, tm, {2, 2, 2}, cp, 0.05, 0.1);
                return total_loss(terms, LossWeights{1.0, 2.0}).first;
            },
            {{"img", img}, {"txt", txt}, {"temp", temp}, {"sg", sg}, {"sm", sm}}, 1e-5,
            tolerance);
    });

    DUET_CHECK(!checks.empty(), "grad-check: unknown loss '", which,
               "' (expected all|clip|distill|mask|total)");
    bool all_pass = true;
    for (auto& [name, fn] : checks) {
        const GradReport report = fn();
        std::printf("%-8s max_rel_err %.3e (tol %.1e, h %.1e)  %s\n", name.c_str(),
                    report.max_rel_err, report.tolerance, report.step,
                    report.pass ? "PASS" : "FAIL");
        all_pass = all_pass && report.pass;
    }
    return all_pass ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale dual-caption image-text pretraining lab"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "write a procedural shape corpus");
    std::string gen_out;
    int64_t gen_count = 10000, gen_eval = 256;
    int gen_classes = 16, gen_side = 64;
    uint64_t gen_seed = 0;
    bool gen_seed_given = false;
    gen->add_option("--count", gen_count, "number of records");
    gen->add_option("--classes", gen_classes, "shape classes (max 16)");
    gen->add_option("--side", gen_side, "canvas side in pixels");
    gen->add_option("--seed", gen_seed, "rng seed")->each([&](const std::string&) {
        gen_seed_given = true;
    });
    gen->add_option("--eval-count", gen_eval, "records held out as the eval split");
    gen->add_option("--out", gen_out, "output directory")->required();

    // curate
    auto* cur = app.add_subcommand("curate", "cluster, sample and dedup an embedding pool");
    std::string cur_pool, cur_clusters, cur_out, cur_protect;
    std::vector<std::string> cur_targets;
    int64_t cur_quota = 0;
    double cur_threshold = 0.99;
    uint64_t cur_seed = 0;
    bool cur_seed_given = false;
    cur->add_option("--pool", cur_pool, "pool embeddings file")->required();
    cur->add_option("--targets", cur_targets, "target embeddings files")->required();
    cur->add_option("--clusters", cur_clusters, "comma-separated k per target")->required();
    cur->add_option("--quota", cur_quota, "items sampled per target")->required();
    cur->add_option("--threshold", cur_threshold, "dedup cosine threshold");
    cur->add_option("--seed", cur_seed, "rng seed")->each([&](const std::string&) {
        cur_seed_given = true;
    });
    cur->add_option("--out", cur_out, "plan output file")->required();
    cur->add_option("--protect", cur_protect, "embeddings that selected items must not match");

    // train / distill
    auto add_train_opts = [](CLI::App* cmd, std::string& config, std::vector<std::string>& sets,
                             uint64_t& seed, bool& seed_given, std::string& out,
                             std::string& data, std::string& resume) {
        cmd->add_option("--config", config, "flat key = value config file");
        cmd->add_option("--set", sets, "override: key=value (repeatable)");
        cmd->add_option("--seed", seed, "rng seed")->each([&seed_given](const std::string&) {
            seed_given = true;
        });
        cmd->add_option("--out", out, "output directory");
        cmd->add_option("--data", data, "dataset directory");
        cmd->add_option("--resume", resume, "checkpoint directory to resume from");
    };

    auto* train_cmd = app.add_subcommand("train", "pretrain or fine-tune");
    std::string tr_config, tr_out, tr_data, tr_resume;
    std::vector<std::string> tr_sets;
    uint64_t tr_seed = 0;
    bool tr_seed_given = false;
    add_train_opts(train_cmd, tr_config, tr_sets, tr_seed, tr_seed_given, tr_out, tr_data,
                   tr_resume);

    auto* distill_cmd = app.add_subcommand("distill", "train a student against a frozen teacher");
    std::string di_config, di_out, di_data, di_resume, di_teacher;
    std::vector<std::string> di_sets;
    uint64_t di_seed = 0;
    bool di_seed_given = false;
    distill_cmd->add_option("--teacher", di_teacher, "teacher checkpoint directory")->required();
    add_train_opts(distill_cmd, di_config, di_sets, di_seed, di_seed_given, di_out, di_data,
                   di_resume);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "frozen-feature evaluations");
    std::string ev_ckpt, ev_task, ev_data, ev_report, ev_branch = "student";
    int64_t ev_probe_images = 2048, ev_knn_k = 20;
    eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
    eval_cmd->add_option("--task", ev_task,
                         "knn|probe-cls|probe-seg|probe-depth|retrieval|zeroshot")
        ->required();
    eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
    eval_cmd->add_option("--report", ev_report, "write the JSON report here");
    eval_cmd->add_option("--branch", ev_branch, "student|teacher weights");
    eval_cmd->add_option("--probe-images", ev_probe_images,
                         "cap on probe training images (0 = all)");
    eval_cmd->add_option("--knn-k", ev_knn_k, "neighbours for the knn task");

    // attn-stats
    auto* attn_cmd = app.add_subcommand("attn-stats", "class-token attention statistics");
    std::string at_ckpt, at_data, at_out;
    bool at_median = false;
    int64_t at_limit = 512;
    attn_cmd->add_option("--ckpt", at_ckpt, "checkpoint directory")->required();
    attn_cmd->add_option("--data", at_data, "dataset directory")->required();
    attn_cmd->add_option("--out", at_out, "output JSON file")->required();
    attn_cmd->add_flag("--median-filter", at_median, "3x3 median filter on the maps");
    attn_cmd->add_option("--limit", at_limit, "max images (0 = all)");

    // grad-check
    auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference gradient oracle");
    std::string gc_losses = "all";
    double gc_tol = 1e-4;
    gc_cmd->add_option("--losses", gc_losses, "all|clip|distill|mask|total");
    gc_cmd->add_option("--tolerance", gc_tol, "max relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            if (!gen_seed_given) gen_seed = fresh_seed();
            return run_generate(gen_out, gen_count, gen_classes, gen_side, gen_seed, gen_eval);
        }
        if (cur->parsed()) {
            if (!cur_seed_given) cur_seed = fresh_seed();
            return run_curate(cur_pool, cur_targets, cur_clusters, cur_quota, cur_threshold,
                              cur_seed, cur_out, cur_protect);
        }
        if (train_cmd->parsed()) {
            return run_train(build_train_kv(tr_config, tr_sets, tr_seed_given, tr_seed, tr_out,
                                            tr_data, tr_resume));
        }
        if (distill_cmd->parsed()) {
            KVConfig kv = build_train_kv(di_config, di_sets, di_seed_given, di_seed, di_out,
                                         di_data, di_resume);
            kv.set("mode", "distill-student");
            kv.set("teacher_ckpt", di_teacher);
            return run_train(kv);
        }
        if (eval_cmd->parsed()) {
            return run_eval(ev_ckpt, ev_task, ev_data, ev_report, ev_branch, ev_probe_images,
                            ev_knn_k);
        }
        if (attn_cmd->parsed()) {
            return checkpoint_dtype(at_ckpt) == "f64"
                       ? run_attn_stats_typed<double>(at_ckpt, at_data, at_out, at_median,
                                                      at_limit)
                       : run_attn_stats_typed<float>(at_ckpt, at_data, at_out, at_median,
                                                     at_limit);
        }
        if (gc_cmd->parsed()) {
            return run_grad_check(gc_losses, gc_tol);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
