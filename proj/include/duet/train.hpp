#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "duet/augment.hpp"
#include "duet/checkpoint.hpp"
#include "duet/config.hpp"
#include "duet/curate.hpp"
#include "duet/datagen.hpp"
#include "duet/heads.hpp"
#include "duet/losses.hpp"
#include "duet/optim.hpp"
#include "duet/teacher.hpp"
#include "duet/text_encoder.hpp"
#include "duet/tokenizer.hpp"
#include "duet/vision_encoder.hpp"

namespace duet {

enum class TrainMode { pretrain, distill_student, hires_finetune };

inline TrainMode train_mode_from(const std::string& name) {
    if (name == "pretrain") return TrainMode::pretrain;
    if (name == "distill-student" || name == "distill") return TrainMode::distill_student;
    if (name == "hires-finetune" || name == "hires") return TrainMode::hires_finetune;
    fail("train: unknown mode '", name, "'");
}

enum class DistillToken { noisy, synthetic, both };

inline DistillToken distill_token_from(const std::string& name) {
    if (name == "eg" || name == "noisy") return DistillToken::noisy;
    if (name == "ehat" || name == "synthetic") return DistillToken::synthetic;
    if (name == "both") return DistillToken::both;
    fail("train: unknown distill token '", name, "'");
}

struct TrainConfig {
    TrainMode mode = TrainMode::pretrain;
    std::string data_dir;
    std::string out_dir;
    std::string precision = "f32"; // f32 for training, f64 for bit-exact checks
    std::string teacher_ckpt;      // distill-student mode
    std::string resume;            // checkpoint directory to resume from

    int64_t batch = 64;
    double epochs = 20.0;
    int64_t max_steps = 0; // 0 = epochs decide; otherwise a hard cap

    // architecture
    int64_t patch = 8, side = 64, depth = 4, width = 48, heads = 4;
    int64_t text_depth = 4, text_width = 48, text_heads = 4;
    int64_t prototypes = 1024;

    // augmentation
    int64_t global_res = 64, local_res = 32, num_local = 6;
    double mask_ratio = 0.75;
    MaskStrategy mask_strategy = MaskStrategy::random;
    bool byol_local = false, byol_global = false;
    double global_area_min = 0.4, global_area_max = 1.0;
    double local_area_min = 0.05, local_area_max = 0.4;

    // losses
    CaptionMode caption_mode = CaptionMode::dual;
    double alpha = 1.0, beta = 2.0;
    DistillToken distill_token = DistillToken::noisy;
    bool clip_from_unmasked = true; // false: single masked pass feeds CLIP too

    // optimization
    std::string optimizer = "adamw";
    double peak_lr = 1e-3;
    double warmup_frac = 0.05;
    double ema_momentum_start = 0.994;
    double weight_decay = 0.05;
    double clip_grad = 1.0;
    double center_momentum = 0.9;

    uint64_t seed = 0;
    int64_t checkpoint_every = 0; // steps; 0 = only final
    int64_t log_every = 1;

    static TrainConfig from_kv(const KVConfig& kv) {
        TrainConfig c;
        c.mode = train_mode_from(kv.get_str("mode", "pretrain"));
        c.data_dir = kv.require_str("data");
        c.out_dir = kv.require_str("out");
        c.precision = kv.get_str("precision", "f32");
        DUET_CHECK(c.precision == "f32" || c.precision == "f64",
                   "train: precision must be f32 or f64, got ", c.precision);
        c.teacher_ckpt = kv.get_str("teacher_ckpt", "");
        c.resume = kv.get_str("resume", "");
        c.batch = kv.get_int("batch", c.batch);
        c.epochs = kv.get_double("epochs", c.epochs);
        c.max_steps = kv.get_int("max_steps", c.max_steps);
        c.patch = kv.get_int("patch", c.patch);
        c.side = kv.get_int("side", c.side);
        c.depth = kv.get_int("depth", c.depth);
        c.width = kv.get_int("width", c.width);
        c.heads = kv.get_int("heads", c.heads);
        c.text_depth = kv.get_int("text_depth", c.depth);
        c.text_width = kv.get_int("text_width", c.width);
        c.text_heads = kv.get_int("text_heads", c.heads);
        c.prototypes = kv.get_int("prototypes", c.prototypes);
        c.global_res = kv.get_int("global_res", c.side);
        c.local_res = kv.get_int("local_res", c.local_res);
        c.num_local = kv.get_int("num_local", c.num_local);
        c.mask_ratio = kv.get_double("mask_ratio", c.mask_ratio);
        c.mask_strategy = mask_strategy_from(kv.get_str("mask_strategy", "random"));
        c.byol_local = kv.get_bool("byol_local", false);
        c.byol_global = kv.get_bool("byol_global", false);
        c.global_area_min = kv.get_double("global_area_min", c.global_area_min);
        c.global_area_max = kv.get_double("global_area_max", c.global_area_max);
        c.local_area_min = kv.get_double("local_area_min", c.local_area_min);
        c.local_area_max = kv.get_double("local_area_max", c.local_area_max);
        c.caption_mode = caption_mode_from(kv.get_str("caption_mode", "dual"));
        c.alpha = kv.get_double("alpha", c.alpha);
        c.beta = kv.get_double("beta", c.beta);
        c.distill_token = distill_token_from(kv.get_str("distill_token", "eg"));
        c.clip_from_unmasked = kv.get_bool("clip_from_unmasked", true);
        c.optimizer = kv.get_str("optimizer", c.optimizer);
        c.peak_lr = kv.get_double("peak_lr", c.peak_lr);
        c.warmup_frac = kv.get_double("warmup_frac", c.warmup_frac);
        c.ema_momentum_start = kv.get_double("ema_m0", c.ema_momentum_start);
        c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
        c.clip_grad = kv.get_double("clip_grad", c.clip_grad);
        c.center_momentum = kv.get_double("center_momentum", c.center_momentum);
        c.seed = kv.get_u64("seed", 0);
        c.checkpoint_every = kv.get_int("checkpoint_every", 0);
        c.log_every = kv.get_int("log_every", 1);
        DUET_CHECK(c.batch >= 2, "train: contrastive losses need batch >= 2, got ", c.batch);
        DUET_CHECK(c.global_res % c.patch == 0 && c.local_res % c.patch == 0,
                   "train: crop resolutions must be multiples of the patch size");
        return c;
    }

    KVConfig to_kv() const {
        KVConfig kv;
        kv.set("mode", mode == TrainMode::pretrain          ? "pretrain"
                       : mode == TrainMode::distill_student ? "distill-student"
                                                            : "hires-finetune");
        kv.set("data", data_dir);
        kv.set("out", out_dir);
        kv.set("precision", precision);
        if (!teacher_ckpt.empty()) kv.set("teacher_ckpt", teacher_ckpt);
        kv.set("batch", std::to_string(batch));
        kv.set("epochs", std::to_string(epochs));
        kv.set("max_steps", std::to_string(max_steps));
        kv.set("patch", std::to_string(patch));
        kv.set("side", std::to_string(side));
        kv.set("depth", std::to_string(depth));
        kv.set("width", std::to_string(width));
        kv.set("heads", std::to_string(heads));
        kv.set("text_depth", std::to_string(text_depth));
        kv.set("text_width", std::to_string(text_width));
        kv.set("text_heads", std::to_string(text_heads));
        kv.set("prototypes", std::to_string(prototypes));
        kv.set("global_res", std::to_string(global_res));
        kv.set("local_res", std::to_string(local_res));
        kv.set("num_local", std::to_string(num_local));
        kv.set("mask_ratio", std::to_string(mask_ratio));
        kv.set("mask_strategy", mask_strategy_name(mask_strategy));
        kv.set("byol_local", byol_local ? "true" : "false");
        kv.set("byol_global", byol_global ? "true" : "false");
        kv.set("caption_mode", caption_mode_name(caption_mode));
        kv.set("alpha", std::to_string(alpha));
        kv.set("beta", std::to_string(beta));
        kv.set("distill_token", distill_token == DistillToken::noisy      ? "eg"
                                : distill_token == DistillToken::synthetic ? "ehat"
                                                                           : "both");
        kv.set("clip_from_unmasked", clip_from_unmasked ? "true" : "false");
        kv.set("optimizer", optimizer);
        kv.set("peak_lr", std::to_string(peak_lr));
        kv.set("warmup_frac", std::to_string(warmup_frac));
        kv.set("ema_m0", std::to_string(ema_momentum_start));
        kv.set("weight_decay", std::to_string(weight_decay));
        kv.set("clip_grad", std::to_string(clip_grad));
        kv.set("center_momentum", std::to_string(center_momentum));
        kv.set("seed", std::to_string(seed));
        return kv;
    }
};

struct StepMetrics {
    int64_t step = 0;
    double lr = 0, ema_momentum = 0, tau_teacher_patch = 0, grad_norm = 0;
    LossBreakdown losses;
};

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

template <typename T>
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg) : cfg_(cfg), init_rng_(cfg.seed ^ 0x5u) {
        DUET_CHECK((std::is_same_v<T, float> && cfg.precision == "f32") ||
                       (std::is_same_v<T, double> && cfg.precision == "f64"),
                   "train: precision tag ", cfg.precision, " does not match instantiation");
        load_data_();
        build_models_();
        if (!cfg_.resume.empty()) {
            restore_(cfg_.resume);
        } else if (cfg_.mode == TrainMode::hires_finetune) {
            DUET_CHECK(!cfg_.teacher_ckpt.empty(),
                       "train: hires-finetune needs teacher_ckpt to resume weights from");
            restore_(cfg_.teacher_ckpt);
            step_ = 0; // fresh schedule for the fine-tuning stage
            data_rng_ = Rng(cfg_.seed * 0x9e3779b9ull + 17);
        }
    }

    const TrainConfig& config() const { return cfg_; }
    int64_t total_steps() const { return total_steps_; }
    int64_t current_step() const { return step_; }
    VisionEncoder<T>& student_encoder() { return *student_enc_; }
    TeacherState<T>& teacher() { return teacher_; }
    const Vocabulary& vocab() const { return vocab_; }
    Optimizer<T>& optimizer() { return *opt_; }

    // Runs to completion (or to max_steps) writing metrics and checkpoints.
    void run() {
        namespace fs = std::filesystem;
        fs::create_directories(cfg_.out_dir);
        const std::string metrics_path = (fs::path(cfg_.out_dir) / "metrics.jsonl").string();
        std::ofstream metrics(metrics_path, step_ > 0 ? std::ios::app : std::ios::trunc);
        DUET_CHECK(metrics.good(), "train: cannot write metrics log at ", metrics_path);

        while (step_ < total_steps_) {
            const StepMetrics m = train_step();
            if (cfg_.log_every > 0 && (m.step % cfg_.log_every == 0 || m.step == total_steps_))
                metrics << format_metrics_(m) << "\n";
            if (cfg_.checkpoint_every > 0 && step_ < total_steps_ &&
                step_ % cfg_.checkpoint_every == 0)
                save_checkpoint((fs::path(cfg_.out_dir) / ("ckpt_step" + std::to_string(step_)))
                                    .string());
        }
        metrics.flush();
        save_checkpoint((fs::path(cfg_.out_dir) / "ckpt_final").string());
    }

    // One optimization step over the next batch; advances all state.
    StepMetrics train_step() {
        DUET_CHECK(step_ < total_steps_, "train: step ", step_, " beyond schedule of ",
                   total_steps_);
        const std::vector<int64_t> batch = next_batch_();
        const ScheduleState sched = schedule_at(step_, sched_cfg_);

        const bool need_teacher = cfg_.alpha > 0.0 || cfg_.beta > 0.0;
        const bool need_mask = cfg_.beta > 0.0 && cfg_.mask_ratio > 0.0;
        const bool need_locals = cfg_.alpha > 0.0 && cfg_.num_local > 0;
        const int64_t b = int64_t(batch.size());
        const int64_t grid = cfg_.global_res / cfg_.patch;
        const int64_t n_patches = grid * grid;

        // -- augmentation draws, in a fixed order per example
        CropConfig crop_cfg;
        crop_cfg.global_res = int(cfg_.global_res);
        crop_cfg.local_res = int(cfg_.local_res);
        crop_cfg.num_local = need_locals ? int(cfg_.num_local) : 0;
        crop_cfg.global_area_min = cfg_.global_area_min;
        crop_cfg.global_area_max = cfg_.global_area_max;
        crop_cfg.local_area_min = cfg_.local_area_min;
        crop_cfg.local_area_max = cfg_.local_area_max;
        crop_cfg.byol_local = cfg_.byol_local;
        crop_cfg.byol_global = cfg_.byol_global;

        Tensor<T> global_pixels({b, 3, cfg_.global_res, cfg_.global_res});
        Tensor<T> local_pixels;
        if (need_locals)
            local_pixels = Tensor<T>({b * cfg_.num_local, 3, cfg_.local_res, cfg_.local_res});
        std::vector<MaskSpec> masks;
        std::vector<CaptionPairing> pairings;
        const int64_t gstride = 3 * cfg_.global_res * cfg_.global_res;
        const int64_t lstride = 3 * cfg_.local_res * cfg_.local_res;
        for (int64_t i = 0; i < b; ++i) {
            const auto& image = images_[size_t(batch[size_t(i)])];
            CropSet<T> crops = make_crops<T>(image, crop_cfg, data_rng_);
            std::copy(crops.global_pixels.data.begin(), crops.global_pixels.data.end(),
                      global_pixels.data.begin() + i * gstride);
            for (int64_t m = 0; m < int64_t(crops.local_pixels.size()); ++m)
                std::copy(crops.local_pixels[size_t(m)].data.begin(),
                          crops.local_pixels[size_t(m)].data.end(),
                          local_pixels.data.begin() + (i * cfg_.num_local + m) * lstride);
            if (need_mask)
                masks.push_back(make_mask(int(n_patches), cfg_.mask_ratio, cfg_.mask_strategy,
                                          data_rng_));
            pairings.push_back(
                pair_captions(records_[size_t(batch[size_t(i)])], cfg_.caption_mode, data_rng_));
        }

        // -- teacher forward on the unmasked global crop
        Tensor<T> teacher_global_scores, teacher_patch_scores_all;
        Value<T> teacher_global_scores_v, teacher_cls2_scores_v;
        std::vector<int64_t> masked_flat;
        std::vector<int64_t> masked_counts;
        Value<T> teacher_masked_scores;
        if (need_teacher) {
            auto tout = teacher_.encoder->forward(global_pixels);
            const Value<T> t_cls = cfg_.distill_token == DistillToken::synthetic
                                       ? tout.cls_synthetic
                                       : tout.cls_noisy;
            teacher_global_scores_v = teacher_.head_global->project(t_cls);
            teacher_global_scores = teacher_global_scores_v.val();
            if (cfg_.distill_token == DistillToken::both)
                teacher_cls2_scores_v = teacher_.head_global->project(tout.cls_synthetic);
            if (need_mask) {
                // patch scores over every position feed the center update;
                // the masked subset feeds the loss
                Value<T> all_scores = teacher_.head_patch->project(tout.patches);
                teacher_patch_scores_all = all_scores.val();
                for (int64_t i = 0; i < b; ++i) {
                    const auto& spec = masks[size_t(i)];
                    masked_counts.push_back(spec.count());
                    for (int pos : spec.positions) masked_flat.push_back(i * n_patches + pos);
                }
                teacher_masked_scores = gather_rows(all_scores, masked_flat);
            }
        }

        // -- student forward passes
        LossTerms<T> terms;
        auto clip_sources = [&](const VisionOutput<T>& out) {
            return std::pair<Value<T>, Value<T>>(l2_normalize_rows(out.cls_noisy),
                                                 l2_normalize_rows(out.cls_synthetic));
        };

        VisionOutput<T> masked_out;
        if (need_mask) masked_out = student_enc_->forward(global_pixels, &masks);

        Value<T> img_emb_noisy, img_emb_synth;
        if (cfg_.clip_from_unmasked || !need_mask) {
            auto clean_out = student_enc_->forward(global_pixels);
            std::tie(img_emb_noisy, img_emb_synth) = clip_sources(clean_out);
        } else {
            std::tie(img_emb_noisy, img_emb_synth) = clip_sources(masked_out);
        }

        if (need_mask) {
            Value<T> student_masked = gather_rows(masked_out.patches, masked_flat);
            Value<T> student_scores = head_patch_->project(student_masked);
            terms.mask = mask_loss(student_scores, teacher_masked_scores, masked_counts,
                                   teacher_.center_patch, sched.tau_teacher_patch,
                                   sched.tau_student_patch);
        }

        if (need_locals) {
            auto local_out = student_enc_->forward(local_pixels);
            auto local_scores_for = [&](const Value<T>& cls) {
                return head_global_->project(cls);
            };
            if (cfg_.distill_token == DistillToken::both) {
                Value<T> s0 = local_scores_for(local_out.cls_noisy);
                Value<T> s1 = local_scores_for(local_out.cls_synthetic);
                Value<T> d0 = distill_loss(s0, teacher_global_scores_v, teacher_.center_global,
                                           sched.tau_teacher, sched.tau_student,
                                           cfg_.num_local);
                Value<T> d1 = distill_loss(s1, teacher_cls2_scores_v, teacher_.center_global,
                                           sched.tau_teacher, sched.tau_student,
                                           cfg_.num_local);
                terms.distill = scale(add(d0, d1), 0.5);
            } else {
                const Value<T>& cls = cfg_.distill_token == DistillToken::synthetic
                                          ? local_out.cls_synthetic
                                          : local_out.cls_noisy;
                terms.distill = distill_loss(local_scores_for(cls), teacher_global_scores_v,
                                             teacher_.center_global, sched.tau_teacher,
                                             sched.tau_student, cfg_.num_local);
            }
        }

        // -- text forward per caption mode
        auto tokens_for = [&](int64_t record_idx, int caption) {
            return caption == 0 ? noisy_tokens_[size_t(record_idx)]
                                : synthetic_tokens_[size_t(record_idx)];
        };
        switch (cfg_.caption_mode) {
            case CaptionMode::dual: {
                std::vector<TokenSequence> noisy, synth;
                for (int64_t i = 0; i < b; ++i) {
                    noisy.push_back(tokens_for(batch[size_t(i)], 0));
                    synth.push_back(tokens_for(batch[size_t(i)], 1));
                }
                terms.clip = clip_loss(img_emb_noisy, text_enc_->forward(noisy), inv_temp_);
                terms.clip_hat =
                    clip_loss(img_emb_synth, text_enc_->forward(synth), inv_temp_);
                break;
            }
            case CaptionMode::sampled: {
                std::vector<TokenSequence> chosen;
                for (int64_t i = 0; i < b; ++i)
                    chosen.push_back(
                        tokens_for(batch[size_t(i)], pairings[size_t(i)].assignments[0].caption));
                terms.clip = clip_loss(img_emb_noisy, text_enc_->forward(chosen), inv_temp_);
                break;
            }
            case CaptionMode::multi_text: {
                // both captions against the same image embedding: two positive
                // pairs per image, averaged into one contrastive term
                std::vector<TokenSequence> noisy, synth;
                for (int64_t i = 0; i < b; ++i) {
                    noisy.push_back(tokens_for(batch[size_t(i)], 0));
                    synth.push_back(tokens_for(batch[size_t(i)], 1));
                }
                Value<T> c0 = clip_loss(img_emb_noisy, text_enc_->forward(noisy), inv_temp_);
                Value<T> c1 = clip_loss(img_emb_noisy, text_enc_->forward(synth), inv_temp_);
                terms.clip = scale(add(c0, c1), 0.5);
                break;
            }
        }

        // -- combine, backprop, update
        auto [total, breakdown] = total_loss(terms, LossWeights{cfg_.alpha, cfg_.beta});
        opt_->zero_grads();
        backward(total);
        StepMetrics metrics;
        metrics.grad_norm = opt_->clip_grad_norm(cfg_.clip_grad);
        opt_->step(sched.lr);
        head_global_->renormalize_prototypes();
        head_patch_->renormalize_prototypes();
        clamp_inv_temp_();

        teacher_.ema_from(*student_enc_, *head_global_, *head_patch_, sched.ema_momentum);
        if (need_teacher) {
            center_update(teacher_.center_global, teacher_global_scores, cfg_.center_momentum);
            if (need_mask)
                center_update(teacher_.center_patch, teacher_patch_scores_all,
                              cfg_.center_momentum);
        }

        ++step_;
        metrics.step = step_;
        metrics.lr = sched.lr;
        metrics.ema_momentum = sched.ema_momentum;
        metrics.tau_teacher_patch = sched.tau_teacher_patch;
        metrics.losses = breakdown;
        return metrics;
    }

    void save_checkpoint(const std::string& dir) const {
        CheckpointWriter<T> writer(dir);
        auto dump_set = [&](const ParamSet<T>& ps) {
            for (const auto& item : ps.items()) writer.add_tensor(item.name, item.value.val());
        };
        dump_set(student_enc_->params());
        dump_set(text_enc_->params());
        dump_set(head_global_->params());
        dump_set(head_patch_->params());
        writer.add_tensor("clip.inv_temp", inv_temp_.val());
        dump_set(teacher_.encoder->params());
        dump_set(teacher_.head_global->params());
        dump_set(teacher_.head_patch->params());
        writer.add_tensor("center.global", teacher_.center_global);
        writer.add_tensor("center.patch", teacher_.center_patch);
        for (auto& st : const_cast<Trainer*>(this)->opt_->state_tensors())
            writer.add_tensor(st.name, *st.tensor);

        auto& manifest = writer.manifest();
        manifest["step"] = step_;
        manifest["total_steps"] = total_steps_;
        manifest["opt_step_count"] = opt_->step_count;
        manifest["rng_state"] = data_rng_.serialize();
        manifest["config_digest"] = cfg_.to_kv().digest();
        manifest["teacher_frozen"] = teacher_.frozen;
        writer.finalize();

        std::ofstream cfg_out(std::filesystem::path(dir) / "config.cfg", std::ios::binary);
        cfg_out << cfg_.to_kv().canonical_text();
        vocab_.save((std::filesystem::path(dir) / "vocab.txt").string());
    }

private:
    void load_data_() {
        records_ = load_dataset(cfg_.data_dir, "train");
        DUET_CHECK(int64_t(records_.size()) >= cfg_.batch, "train: ", records_.size(),
                   " training records cannot fill a batch of ", cfg_.batch);
        std::vector<std::string> captions;
        for (const auto& r : records_) {
            captions.push_back(r.noisy);
            captions.push_back(r.synthetic);
        }
        vocab_ = Vocabulary::build(captions);
        images_.reserve(records_.size());
        noisy_tokens_.reserve(records_.size());
        synthetic_tokens_.reserve(records_.size());
        for (const auto& r : records_) {
            images_.push_back(load_example(cfg_.data_dir, r, /*with_labels=*/false).image);
            noisy_tokens_.push_back(tokenize(r.noisy, vocab_));
            synthetic_tokens_.push_back(tokenize(r.synthetic, vocab_));
        }

        const int64_t steps_per_epoch = int64_t(records_.size()) / cfg_.batch;
        total_steps_ = int64_t(cfg_.epochs * double(steps_per_epoch));
        if (cfg_.max_steps > 0) total_steps_ = std::min(total_steps_, cfg_.max_steps);
        sched_cfg_.total_steps = total_steps_;
        sched_cfg_.warmup_frac = cfg_.warmup_frac;
        sched_cfg_.peak_lr = cfg_.peak_lr;
        sched_cfg_.ema_momentum_start = cfg_.ema_momentum_start;
        sched_cfg_.center_momentum = cfg_.center_momentum;
        data_rng_ = Rng(cfg_.seed * 0x9e3779b9ull + 17);
    }

    void build_models_() {
        VisionEncoderConfig vcfg;
        vcfg.patch = cfg_.patch;
        vcfg.side = cfg_.side;
        vcfg.depth = cfg_.depth;
        vcfg.width = cfg_.width;
        vcfg.heads = cfg_.heads;
        student_enc_ = std::make_unique<VisionEncoder<T>>(vcfg, init_rng_, true);

        TextEncoderConfig tcfg;
        tcfg.vocab_size = vocab_.size();
        tcfg.width = cfg_.text_width;
        tcfg.depth = cfg_.text_depth;
        tcfg.heads = cfg_.text_heads;
        text_enc_ = std::make_unique<TextEncoder<T>>(tcfg, init_rng_, true);

        PrototypeHeadConfig hcfg;
        hcfg.in_dim = cfg_.width;
        hcfg.prototypes = cfg_.prototypes;
        head_global_ = std::make_unique<PrototypeHead<T>>(hcfg, init_rng_, true, "head_g");
        head_patch_ = std::make_unique<PrototypeHead<T>>(hcfg, init_rng_, true, "head_p");

        clip_params_ = std::make_unique<ParamSet<T>>();
        inv_temp_ = clip_params_->add("clip.inv_temp",
                                      Tensor<T>::scalar(T(1.0 / 0.07)), true);

        if (cfg_.mode == TrainMode::distill_student) {
            DUET_CHECK(!cfg_.teacher_ckpt.empty(), "train: distill-student needs teacher_ckpt");
            load_frozen_teacher_(cfg_.teacher_ckpt);
        } else {
            teacher_ = TeacherState<T>::init_from(*student_enc_, *head_global_, *head_patch_,
                                                  init_rng_);
        }

        opt_ = make_optimizer<T>(cfg_.optimizer, cfg_.weight_decay);
        opt_->register_params(student_enc_->params());
        opt_->register_params(text_enc_->params());
        opt_->register_params(head_global_->params());
        opt_->register_params(head_patch_->params());
        opt_->register_params(*clip_params_);
    }

    // Frozen teacher for the distillation-to-smaller-student mode: the
    // checkpoint's EMA branch provides encoder and heads; they never update.
    void load_frozen_teacher_(const std::string& ckpt_dir) {
        auto data = load_checkpoint<T>(ckpt_dir);
        const KVConfig tkv =
            KVConfig::parse_file((std::filesystem::path(ckpt_dir) / "config.cfg").string());
        VisionEncoderConfig vcfg;
        vcfg.patch = tkv.get_int("patch", 8);
        vcfg.side = tkv.get_int("side", 64);
        vcfg.depth = tkv.get_int("depth", 4);
        vcfg.width = tkv.get_int("width", 48);
        vcfg.heads = tkv.get_int("heads", 4);
        PrototypeHeadConfig hcfg;
        hcfg.in_dim = vcfg.width;
        hcfg.prototypes = tkv.get_int("prototypes", 1024);
        DUET_CHECK(hcfg.prototypes == cfg_.prototypes,
                   "train: student prototype count ", cfg_.prototypes,
                   " must match the teacher's ", hcfg.prototypes);

        teacher_.encoder = std::make_unique<VisionEncoder<T>>(vcfg, init_rng_, false, "t_img");
        teacher_.head_global =
            std::make_unique<PrototypeHead<T>>(hcfg, init_rng_, false, "t_head_g");
        teacher_.head_patch =
            std::make_unique<PrototypeHead<T>>(hcfg, init_rng_, false, "t_head_p");
        auto fill = [&](ParamSet<T>& ps) {
            for (auto& item : ps.items()) {
                const Tensor<T>& src = data.tensor(item.name);
                check_same_shape(item.value.val(), src, "teacher restore");
                item.value.val().data = src.data;
            }
        };
        fill(teacher_.encoder->params());
        fill(teacher_.head_global->params());
        fill(teacher_.head_patch->params());
        teacher_.center_global = data.tensor("center.global");
        teacher_.center_patch = data.tensor("center.patch");
        teacher_.frozen = true;
    }

    void restore_(const std::string& ckpt_dir) {
        auto data = load_checkpoint<T>(ckpt_dir);
        auto fill = [&](ParamSet<T>& ps) {
            for (auto& item : ps.items()) {
                const Tensor<T>& src = data.tensor(item.name);
                check_same_shape(item.value.val(), src, "restore");
                item.value.val().data = src.data;
            }
        };
        fill(student_enc_->params());
        fill(text_enc_->params());
        fill(head_global_->params());
        fill(head_patch_->params());
        inv_temp_.val().data = data.tensor("clip.inv_temp").data;
        if (!teacher_.frozen) {
            fill(teacher_.encoder->params());
            fill(teacher_.head_global->params());
            fill(teacher_.head_patch->params());
        }
        teacher_.center_global = data.tensor("center.global");
        teacher_.center_patch = data.tensor("center.patch");
        for (auto& st : opt_->state_tensors())
            if (data.has(st.name)) *st.tensor = data.tensor(st.name);
        opt_->step_count = data.manifest.at("opt_step_count").template get<int64_t>();
        step_ = data.manifest.at("step").template get<int64_t>();
        data_rng_.deserialize(data.manifest.at("rng_state").template get<std::string>());
    }

    std::vector<int64_t> next_batch_() {
        const int64_t steps_per_epoch = int64_t(records_.size()) / cfg_.batch;
        const int64_t epoch = step_ / steps_per_epoch;
        const int64_t pos = step_ % steps_per_epoch;
        if (epoch != shuffled_epoch_ || epoch_order_.empty()) {
            epoch_order_.resize(records_.size());
            for (size_t i = 0; i < records_.size(); ++i) epoch_order_[i] = int64_t(i);
            Rng shuffle_rng(cfg_.seed * 0x2545f4914f6cdd1dull + uint64_t(epoch) + 1);
            shuffle_rng.shuffle(epoch_order_);
            shuffled_epoch_ = epoch;
        }
        return {epoch_order_.begin() + pos * cfg_.batch,
                epoch_order_.begin() + (pos + 1) * cfg_.batch};
    }

    void clamp_inv_temp_() {
        T& v = inv_temp_.val().data[0];
        v = std::min(T(100), std::max(T(1), v));
    }

    std::string format_metrics_(const StepMetrics& m) const {
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "{\"step\":%lld,\"lr\":%.17g,\"ema_m\":%.17g,\"tau_tp\":%.17g,"
                      "\"grad_norm\":%.17g,\"l_clip\":%.17g,\"l_clip_hat\":%.17g,"
                      "\"l_distill\":%.17g,\"l_mask\":%.17g,\"l_total\":%.17g}",
                      (long long)m.step, m.lr, m.ema_momentum, m.tau_teacher_patch, m.grad_norm,
                      m.losses.l_clip, m.losses.l_clip_hat, m.losses.l_distill,
                      m.losses.l_mask, m.losses.l_total);
        return std::string(buf);
    }

    TrainConfig cfg_;
    Rng init_rng_;
    Rng data_rng_;
    std::vector<DatasetRecord> records_;
    std::vector<Image> images_;
    std::vector<TokenSequence> noisy_tokens_, synthetic_tokens_;
    Vocabulary vocab_;

    std::unique_ptr<VisionEncoder<T>> student_enc_;
    std::unique_ptr<TextEncoder<T>> text_enc_;
    std::unique_ptr<PrototypeHead<T>> head_global_, head_patch_;
    std::unique_ptr<ParamSet<T>> clip_params_;
    Value<T> inv_temp_;
    TeacherState<T> teacher_;
    std::unique_ptr<Optimizer<T>> opt_;

    ScheduleConfig sched_cfg_;
    int64_t step_ = 0;
    int64_t total_steps_ = 0;
    int64_t shuffled_epoch_ = -1;
    std::vector<int64_t> epoch_order_;
};

} // namespace duet
