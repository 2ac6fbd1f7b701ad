#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/checkpoint.hpp"
#include "duet/config.hpp"
#include "duet/datagen.hpp"
#include "duet/text_encoder.hpp"
#include "duet/train.hpp"
#include "duet/vision_encoder.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// frozen model loading
// ---------------------------------------------------------------------------

// Frozen encoders rebuilt from a checkpoint; parameters are non-trainable so
// forward passes never build a tape.
template <typename T>
struct EvalModel {
    std::unique_ptr<VisionEncoder<T>> img;
    std::unique_ptr<TextEncoder<T>> txt;
    Vocabulary vocab;
    KVConfig config;
    CaptionMode trained_mode = CaptionMode::dual;
    int64_t width = 0;

    bool has_second_token() const { return trained_mode == CaptionMode::dual; }
};

template <typename T>
EvalModel<T> load_eval_model(const std::string& ckpt_dir, const std::string& branch = "student") {
    DUET_CHECK(branch == "student" || branch == "teacher",
               "eval: branch must be student or teacher, got ", branch);
    auto data = load_checkpoint<T>(ckpt_dir);
    EvalModel<T> model;
    model.config =
        KVConfig::parse_file((std::filesystem::path(ckpt_dir) / "config.cfg").string());
    model.vocab =
        Vocabulary::load((std::filesystem::path(ckpt_dir) / "vocab.txt").string());
    model.trained_mode = caption_mode_from(model.config.get_str("caption_mode", "dual"));

    Rng dummy(0);
    VisionEncoderConfig vcfg;
    vcfg.patch = model.config.get_int("patch", 8);
    vcfg.side = model.config.get_int("side", 64);
    vcfg.depth = model.config.get_int("depth", 4);
    vcfg.width = model.config.get_int("width", 48);
    vcfg.heads = model.config.get_int("heads", 4);
    model.width = vcfg.width;
    const std::string img_prefix = branch == "teacher" ? "t_img" : "img";
    model.img = std::make_unique<VisionEncoder<T>>(vcfg, dummy, /*trainable=*/false, img_prefix);

    TextEncoderConfig tcfg;
    tcfg.vocab_size = model.vocab.size();
    tcfg.width = model.config.get_int("text_width", vcfg.width);
    tcfg.depth = model.config.get_int("text_depth", vcfg.depth);
    tcfg.heads = model.config.get_int("text_heads", vcfg.heads);
    model.txt = std::make_unique<TextEncoder<T>>(tcfg, dummy, /*trainable=*/false);

    auto fill = [&](ParamSet<T>& ps) {
        for (auto& item : ps.items()) {
            const Tensor<T>& src = data.tensor(item.name);
            check_same_shape(item.value.val(), src, "eval restore");
            item.value.val().data = src.data;
        }
    };
    fill(model.img->params());
    fill(model.txt->params()); // the text encoder always lives on the student branch
    return model;
}

template <typename T>
uint64_t params_hash(const EvalModel<T>& model) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const ParamSet<T>& ps) {
        for (const auto& item : ps.items()) {
            const auto& t = item.value.val();
            const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data.data());
            for (size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
                h ^= p[i];
                h *= 1099511628211ull;
            }
        }
    };
    mix(model.img->params());
    mix(model.txt->params());
    return h;
}

// ---------------------------------------------------------------------------
// embedding extraction
// ---------------------------------------------------------------------------

template <typename T>
struct ImageEmbeddings {
    Tensor<T> e_g;      // n x width, unit rows
    Tensor<T> e_hat_g;  // n x width, unit rows
    Tensor<T> patches;  // (n * N) x width when requested
    Tensor<T> attn_g, attn_hat; // n x N when requested
    int64_t n_patches = 0;
};

namespace evaldetail {

template <typename T>
void l2_normalize_tensor_rows(Tensor<T>& t) {
    for (int64_t i = 0; i < t.rows(); ++i) {
        T* row = t.row(i);
        T sq = 0;
        for (int64_t j = 0; j < t.cols(); ++j) sq += row[j] * row[j];
        const T norm = std::sqrt(sq);
        if (norm > 0)
            for (int64_t j = 0; j < t.cols(); ++j) row[j] /= norm;
    }
}

} // namespace evaldetail

template <typename T>
ImageEmbeddings<T> embed_images(const EvalModel<T>& model, const std::string& data_dir,
                                const std::vector<DatasetRecord>& records,
                                bool with_patches = false, bool with_attention = false,
                                int64_t batch = 64) {
    const int64_t n = int64_t(records.size());
    DUET_CHECK(n >= 1, "eval: no records to embed");
    const int64_t res = model.img->config().side;
    const int64_t n_patches = (res / model.img->config().patch) * (res / model.img->config().patch);
    ImageEmbeddings<T> out;
    out.n_patches = n_patches;
    out.e_g = Tensor<T>({n, model.width});
    out.e_hat_g = Tensor<T>({n, model.width});
    if (with_patches) out.patches = Tensor<T>({n * n_patches, model.width});
    if (with_attention) {
        out.attn_g = Tensor<T>({n, n_patches});
        out.attn_hat = Tensor<T>({n, n_patches});
    }
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t b = std::min(batch, n - start);
        Tensor<T> pixels({b, 3, res, res});
        for (int64_t i = 0; i < b; ++i) {
            const Image img =
                load_example(data_dir, records[size_t(start + i)], false).image;
            render_crop(img, 0.0, 0.0, double(img.width), false, int(res),
                        pixels.data.data() + i * 3 * res * res);
        }
        auto fwd = model.img->forward(pixels, nullptr, with_attention);
        for (int64_t i = 0; i < b; ++i) {
            std::copy_n(fwd.cls_noisy.val().row(i), model.width, out.e_g.row(start + i));
            std::copy_n(fwd.cls_synthetic.val().row(i), model.width,
                        out.e_hat_g.row(start + i));
            if (with_patches)
                std::copy_n(fwd.patches.val().row(i * n_patches), n_patches * model.width,
                            out.patches.row((start + i) * n_patches));
            if (with_attention) {
                std::copy_n(fwd.attn_noisy.row(i), n_patches, out.attn_g.row(start + i));
                std::copy_n(fwd.attn_synthetic.row(i), n_patches, out.attn_hat.row(start + i));
            }
        }
    }
    evaldetail::l2_normalize_tensor_rows(out.e_g);
    evaldetail::l2_normalize_tensor_rows(out.e_hat_g);
    return out;
}

template <typename T>
Tensor<T> embed_texts(const EvalModel<T>& model, const std::vector<std::string>& texts,
                      int64_t batch = 64) {
    const int64_t n = int64_t(texts.size());
    Tensor<T> out({n, model.txt->config().width});
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t b = std::min(batch, n - start);
        std::vector<TokenSequence> seqs;
        for (int64_t i = 0; i < b; ++i)
            seqs.push_back(tokenize(texts[size_t(start + i)], model.vocab));
        auto emb = model.txt->forward(seqs);
        for (int64_t i = 0; i < b; ++i)
            std::copy_n(emb.val().row(i), out.cols(), out.row(start + i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// soft k-nearest-neighbour classification
// ---------------------------------------------------------------------------

// Soft vote: each of the k nearest neighbours (cosine similarity on unit
// vectors) contributes exp(sim / tau) to its class.
template <typename T>
double knn_classify(const Tensor<T>& train_emb, const std::vector<int>& train_labels,
                    const Tensor<T>& test_emb, const std::vector<int>& test_labels, int k = 20,
                    double tau = 0.07) {
    const int64_t n_train = train_emb.rows(), n_test = test_emb.rows();
    DUET_CHECK(n_train >= 1, "knn: empty train set");
    DUET_CHECK(int64_t(train_labels.size()) == n_train &&
                   int64_t(test_labels.size()) == n_test,
               "knn: label counts disagree with embeddings");
    DUET_CHECK(k >= 1, "knn: k must be positive");
    int n_classes = 0;
    for (int l : train_labels) n_classes = std::max(n_classes, l + 1);

    int64_t correct = 0;
    const int64_t kk = std::min<int64_t>(k, n_train);
    std::vector<std::pair<double, int64_t>> sims(static_cast<size_t>(n_train));
    for (int64_t i = 0; i < n_test; ++i) {
        for (int64_t j = 0; j < n_train; ++j) {
            double dot = 0;
            for (int64_t d = 0; d < train_emb.cols(); ++d)
                dot += double(test_emb.at(i, d)) * double(train_emb.at(j, d));
            sims[size_t(j)] = {dot, j};
        }
        std::partial_sort(sims.begin(), sims.begin() + kk, sims.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return a.second < b.second;
                          });
        std::vector<double> votes(static_cast<size_t>(n_classes), 0.0);
        for (int64_t j = 0; j < kk; ++j)
            votes[size_t(train_labels[size_t(sims[size_t(j)].second)])] +=
                std::exp(sims[size_t(j)].first / tau);
        int best = 0;
        for (int c = 1; c < n_classes; ++c)
            if (votes[size_t(c)] > votes[size_t(best)]) best = c;
        if (best == test_labels[size_t(i)]) ++correct;
    }
    return double(correct) / double(n_test);
}

// ---------------------------------------------------------------------------
// retrieval
// ---------------------------------------------------------------------------

struct RetrievalResult {
    double r1_image_to_text = 0.0;
    double r1_text_to_image = 0.0;
};

// pairs lists ground-truth (image, text) partners; either side may have
// several partners. Ranking is by cosine on unit-norm rows.
template <typename T>
RetrievalResult retrieval_eval(const Tensor<T>& image_emb, const Tensor<T>& text_emb,
                               const std::vector<std::pair<int64_t, int64_t>>& pairs) {
    DUET_CHECK(!pairs.empty(), "retrieval: empty pairing");
    const int64_t ni = image_emb.rows(), nt = text_emb.rows();
    std::vector<std::vector<int64_t>> img_partners(static_cast<size_t>(ni));
    std::vector<std::vector<int64_t>> txt_partners(static_cast<size_t>(nt));
    for (auto [i, t] : pairs) {
        DUET_CHECK(i >= 0 && i < ni && t >= 0 && t < nt, "retrieval: pair (", i, ", ", t,
                   ") out of range");
        img_partners[size_t(i)].push_back(t);
        txt_partners[size_t(t)].push_back(i);
    }
    auto top1 = [](const Tensor<T>& queries, const Tensor<T>& keys, int64_t q) {
        int64_t best = 0;
        double best_sim = -2.0;
        for (int64_t j = 0; j < keys.rows(); ++j) {
            double dot = 0;
            for (int64_t d = 0; d < keys.cols(); ++d)
                dot += double(queries.at(q, d)) * double(keys.at(j, d));
            if (dot > best_sim) {
                best_sim = dot;
                best = j;
            }
        }
        return best;
    };
    int64_t hit_i2t = 0, total_i2t = 0, hit_t2i = 0, total_t2i = 0;
    for (int64_t i = 0; i < ni; ++i) {
        if (img_partners[size_t(i)].empty()) continue;
        ++total_i2t;
        const int64_t top = top1(image_emb, text_emb, i);
        if (std::find(img_partners[size_t(i)].begin(), img_partners[size_t(i)].end(), top) !=
            img_partners[size_t(i)].end())
            ++hit_i2t;
    }
    for (int64_t t = 0; t < nt; ++t) {
        if (txt_partners[size_t(t)].empty()) continue;
        ++total_t2i;
        const int64_t top = top1(text_emb, image_emb, t);
        if (std::find(txt_partners[size_t(t)].begin(), txt_partners[size_t(t)].end(), top) !=
            txt_partners[size_t(t)].end())
            ++hit_t2i;
    }
    RetrievalResult r;
    r.r1_image_to_text = total_i2t ? double(hit_i2t) / double(total_i2t) : 0.0;
    r.r1_text_to_image = total_t2i ? double(hit_t2i) / double(total_t2i) : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// zero-shot classification
// ---------------------------------------------------------------------------

inline std::string instantiate_template(const std::string& tmpl, const std::string& name) {
    const auto pos = tmpl.find("{}");
    DUET_CHECK(pos != std::string::npos, "zeroshot: template '", tmpl, "' lacks {}");
    return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

inline const std::vector<std::string>& default_prompt_templates() {
    static const std::vector<std::string> templates = {
        "{}",          "a {}",           "a picture of a {}", "a photo of a {}",
        "an image of a {}", "a red {}",  "a blue {}",         "a green {}"};
    return templates;
}

// Class embedding = normalized mean of per-template text embeddings; the
// image side uses the noisy-stream class token.
template <typename T>
double zero_shot_classify(const EvalModel<T>& model, const std::vector<std::string>& class_names,
                          const std::vector<std::string>& templates, const Tensor<T>& image_emb,
                          const std::vector<int>& labels) {
    DUET_CHECK(!templates.empty(), "zeroshot: need at least one template");
    const int64_t n_classes = int64_t(class_names.size());
    Tensor<T> class_emb({n_classes, model.txt->config().width});
    for (int64_t c = 0; c < n_classes; ++c) {
        std::vector<std::string> prompts;
        for (const auto& tmpl : templates)
            prompts.push_back(instantiate_template(tmpl, class_names[size_t(c)]));
        Tensor<T> emb = embed_texts(model, prompts);
        for (int64_t t = 0; t < emb.rows(); ++t)
            for (int64_t d = 0; d < emb.cols(); ++d) class_emb.at(c, d) += emb.at(t, d);
    }
    evaldetail::l2_normalize_tensor_rows(class_emb);

    int64_t correct = 0;
    for (int64_t i = 0; i < image_emb.rows(); ++i) {
        int64_t best = 0;
        double best_sim = -2.0;
        for (int64_t c = 0; c < n_classes; ++c) {
            double dot = 0;
            for (int64_t d = 0; d < image_emb.cols(); ++d)
                dot += double(image_emb.at(i, d)) * double(class_emb.at(c, d));
            if (dot > best_sim) {
                best_sim = dot;
                best = c;
            }
        }
        if (int(best) == labels[size_t(i)]) ++correct;
    }
    return double(correct) / double(image_emb.rows());
}

// ---------------------------------------------------------------------------
// linear probes (classification / segmentation / depth bins)
// ---------------------------------------------------------------------------

struct ProbeSpec {
    enum class Task { classification, segmentation, depth_bins } task = Task::classification;
    int64_t iterations = 2000;
    int64_t batch_images = 16;
    int64_t depth_bins = 256;
    std::vector<double> lr_sweep = {1.0, 0.3, 0.1};
    uint64_t seed = 7;
};

struct ProbeResult {
    double metric = 0.0; // top-1 / mIoU / RMSE
    double best_lr = 0.0;
};

namespace evaldetail {

// Multinomial logistic regression on fixed features: X (n x d) already
// cached, targets as per-row class distributions (sparse one-hot or soft).
template <typename T>
struct SoftmaxProbe {
    Tensor<double> w; // d x c
    Tensor<double> b; // 1 x c

    SoftmaxProbe(int64_t d, int64_t c) : w({d, c}), b({1, c}) {}

    void logits_of(const Tensor<T>& x, const std::vector<int64_t>& rows,
                   Tensor<double>& out) const {
        const int64_t d = w.rows(), c = w.cols();
        for (size_t r = 0; r < rows.size(); ++r) {
            const T* xr = x.row(rows[r]);
            double* o = out.row(int64_t(r));
            for (int64_t j = 0; j < c; ++j) o[j] = b.data[size_t(j)];
            for (int64_t i = 0; i < d; ++i) {
                const double xv = double(xr[i]);
                if (xv == 0.0) continue;
                const double* wrow = w.row(i);
                for (int64_t j = 0; j < c; ++j) o[j] += xv * wrow[j];
            }
        }
    }
};

} // namespace evaldetail

// Trains a softmax probe with minibatch gradient descent over a small lr
// sweep and returns the best metric ("report the maximum accuracy").
template <typename T>
ProbeResult train_softmax_probe(const Tensor<T>& features, const std::vector<int>& hard_labels,
                                const Tensor<T>& eval_features,
                                const std::vector<int>& eval_labels, int64_t n_classes,
                                const ProbeSpec& spec) {
    const int64_t n = features.rows(), d = features.cols();
    DUET_CHECK(int64_t(hard_labels.size()) == n, "probe: label count mismatch");
    ProbeResult best;
    best.metric = -1.0;
    for (double lr : spec.lr_sweep) {
        evaldetail::SoftmaxProbe<T> probe(d, n_classes);
        Rng rng(spec.seed);
        const int64_t rows_per_batch = std::min<int64_t>(n, spec.batch_images * 64);
        Tensor<double> logits({rows_per_batch, n_classes});
        for (int64_t it = 0; it < spec.iterations; ++it) {
            std::vector<int64_t> batch(static_cast<size_t>(rows_per_batch));
            for (auto& r : batch) r = int64_t(rng.uniform_index(uint64_t(n)));
            probe.logits_of(features, batch, logits);
            // gradient of mean CE
            Tensor<double> gw({d, n_classes});
            Tensor<double> gb({1, n_classes});
            for (int64_t r = 0; r < rows_per_batch; ++r) {
                double* row = logits.row(r);
                double mx = row[0];
                for (int64_t j = 1; j < n_classes; ++j) mx = std::max(mx, row[j]);
                double sum = 0;
                for (int64_t j = 0; j < n_classes; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    sum += row[j];
                }
                for (int64_t j = 0; j < n_classes; ++j) row[j] /= sum;
                row[hard_labels[size_t(batch[size_t(r)])]] -= 1.0;
                const T* xr = features.row(batch[size_t(r)]);
                for (int64_t i = 0; i < d; ++i) {
                    const double xv = double(xr[i]);
                    if (xv == 0.0) continue;
                    double* gwr = gw.row(i);
                    for (int64_t j = 0; j < n_classes; ++j) gwr[j] += xv * row[j];
                }
                for (int64_t j = 0; j < n_classes; ++j) gb.data[size_t(j)] += row[j];
            }
            const double scale = lr / double(rows_per_batch);
            for (int64_t i = 0; i < d * n_classes; ++i)
                probe.w.data[size_t(i)] -= scale * gw.data[size_t(i)];
            for (int64_t j = 0; j < n_classes; ++j)
                probe.b.data[size_t(j)] -= scale * gb.data[size_t(j)];
        }
        // evaluate top-1
        std::vector<int64_t> all(static_cast<size_t>(eval_features.rows()));
        std::iota(all.begin(), all.end(), 0);
        Tensor<double> eval_logits({eval_features.rows(), n_classes});
        probe.logits_of(eval_features, all, eval_logits);
        int64_t correct = 0;
        for (int64_t r = 0; r < eval_features.rows(); ++r) {
            const double* row = eval_logits.row(r);
            int64_t arg = 0;
            for (int64_t j = 1; j < n_classes; ++j)
                if (row[j] > row[arg]) arg = j;
            if (int(arg) == eval_labels[size_t(r)]) ++correct;
        }
        const double acc = double(correct) / double(eval_features.rows());
        if (acc > best.metric) {
            best.metric = acc;
            best.best_lr = lr;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// dense probes: per-position features are [patch token || class token]
// ---------------------------------------------------------------------------

template <typename T>
struct DenseProbeData {
    Tensor<T> features;    // (n * N) x (2 * width)
    Tensor<float> targets; // (n * N) x C, per-patch pixel-label distribution
    std::vector<Image> seg_maps;
    std::vector<std::vector<float>> depth_maps;
    int64_t n_images = 0, n_patches = 0, grid = 0, patch_px = 0, side = 0;
    int64_t n_channels = 0;
};

// The class token concatenated into dense features is the synthetic-stream
// one when the model trained with dual captions, otherwise the noisy one.
template <typename T>
DenseProbeData<T> build_dense_probe_data(const EvalModel<T>& model, const std::string& data_dir,
                                         const std::vector<DatasetRecord>& records,
                                         ProbeSpec::Task task, int64_t n_classes,
                                         int64_t depth_bins = 256) {
    DUET_CHECK(task != ProbeSpec::Task::classification,
               "dense probe: task must be segmentation or depth");
    auto emb = embed_images(model, data_dir, records, /*with_patches=*/true);
    const Tensor<T>& cls = model.has_second_token() ? emb.e_hat_g : emb.e_g;
    const int64_t n = int64_t(records.size());
    const int64_t npat = emb.n_patches;
    const int64_t w = model.width;
    const int64_t grid = int64_t(std::llround(std::sqrt(double(npat))));
    DenseProbeData<T> data;
    data.n_images = n;
    data.n_patches = npat;
    data.grid = grid;
    data.n_channels = task == ProbeSpec::Task::segmentation ? n_classes : depth_bins;
    data.features = Tensor<T>({n * npat, 2 * w});
    data.targets = Tensor<float>({n * npat, data.n_channels});

    for (int64_t i = 0; i < n; ++i) {
        const auto ex = load_example(data_dir, records[size_t(i)], true);
        if (data.side == 0) {
            data.side = ex.image.width;
            data.patch_px = data.side / grid;
        }
        if (task == ProbeSpec::Task::segmentation)
            data.seg_maps.push_back(ex.seg);
        else
            data.depth_maps.push_back(ex.depth);
        for (int64_t pidx = 0; pidx < npat; ++pidx) {
            T* frow = data.features.row(i * npat + pidx);
            std::copy_n(emb.patches.row(i * npat + pidx), w, frow);
            std::copy_n(cls.row(i), w, frow + w);
            float* trow = data.targets.row(i * npat + pidx);
            const int64_t gy = pidx / grid, gx = pidx % grid;
            int64_t count = 0;
            for (int64_t py = gy * data.patch_px; py < (gy + 1) * data.patch_px; ++py)
                for (int64_t px = gx * data.patch_px; px < (gx + 1) * data.patch_px; ++px) {
                    int channel;
                    if (task == ProbeSpec::Task::segmentation) {
                        channel = *ex.seg.at(int(px), int(py));
                        DUET_CHECK(channel < n_classes, "dense probe: label ", channel,
                                   " outside ", n_classes, " classes");
                    } else {
                        const float dv = ex.depth[size_t(py) * data.side + size_t(px)];
                        channel = int(std::min<int64_t>(depth_bins - 1,
                                                        int64_t(dv * float(depth_bins))));
                    }
                    trow[channel] += 1.0f;
                    ++count;
                }
            for (int64_t c = 0; c < data.n_channels; ++c) trow[c] /= float(count);
        }
    }
    return data;
}

// Minibatch softmax regression against the per-patch distributions; metric is
// pixel-level (mIoU over classes present, or RMSE of bin midpoints).
template <typename T>
ProbeResult train_dense_probe(const DenseProbeData<T>& train, const DenseProbeData<T>& eval,
                              ProbeSpec::Task task, const ProbeSpec& spec) {
    const int64_t d = train.features.cols(), c = train.n_channels;
    const int64_t n_rows = train.features.rows();
    ProbeResult best;
    best.metric = task == ProbeSpec::Task::depth_bins ? std::numeric_limits<double>::max()
                                                      : -1.0;
    for (double lr : spec.lr_sweep) {
        Tensor<double> w({d, c}), bias({1, c});
        Rng rng(spec.seed);
        const int64_t rows_per_batch =
            std::min<int64_t>(n_rows, spec.batch_images * train.n_patches);
        for (int64_t it = 0; it < spec.iterations; ++it) {
            Tensor<double> gw({d, c});
            Tensor<double> gb({1, c});
            for (int64_t r = 0; r < rows_per_batch; ++r) {
                const int64_t row = int64_t(rng.uniform_index(uint64_t(n_rows)));
                const T* xr = train.features.row(row);
                std::vector<double> logit(static_cast<size_t>(c));
                for (int64_t j = 0; j < c; ++j) logit[size_t(j)] = bias.data[size_t(j)];
                for (int64_t i = 0; i < d; ++i) {
                    const double xv = double(xr[i]);
                    const double* wrow = w.row(i);
                    for (int64_t j = 0; j < c; ++j) logit[size_t(j)] += xv * wrow[j];
                }
                double mx = logit[0];
                for (int64_t j = 1; j < c; ++j) mx = std::max(mx, logit[size_t(j)]);
                double sum = 0;
                for (int64_t j = 0; j < c; ++j) {
                    logit[size_t(j)] = std::exp(logit[size_t(j)] - mx);
                    sum += logit[size_t(j)];
                }
                const float* target = train.targets.row(row);
                for (int64_t j = 0; j < c; ++j)
                    logit[size_t(j)] = logit[size_t(j)] / sum - double(target[j]);
                for (int64_t i = 0; i < d; ++i) {
                    const double xv = double(xr[i]);
                    if (xv == 0.0) continue;
                    double* gwr = gw.row(i);
                    for (int64_t j = 0; j < c; ++j) gwr[j] += xv * logit[size_t(j)];
                }
                for (int64_t j = 0; j < c; ++j) gb.data[size_t(j)] += logit[size_t(j)];
            }
            const double scale = lr / double(rows_per_batch);
            for (int64_t i = 0; i < d * c; ++i) w.data[size_t(i)] -= scale * gw.data[size_t(i)];
            for (int64_t j = 0; j < c; ++j) bias.data[size_t(j)] -= scale * gb.data[size_t(j)];
        }

        // pixel-level evaluation with nearest upsampling of patch predictions
        std::vector<int> pred(static_cast<size_t>(eval.features.rows()));
        for (int64_t r = 0; r < eval.features.rows(); ++r) {
            const T* xr = eval.features.row(r);
            std::vector<double> logit(static_cast<size_t>(c));
            for (int64_t j = 0; j < c; ++j) logit[size_t(j)] = bias.data[size_t(j)];
            for (int64_t i = 0; i < d; ++i) {
                const double xv = double(xr[i]);
                const double* wrow = w.row(i);
                for (int64_t j = 0; j < c; ++j) logit[size_t(j)] += xv * wrow[j];
            }
            int arg = 0;
            for (int64_t j = 1; j < c; ++j)
                if (logit[size_t(j)] > logit[size_t(arg)]) arg = int(j);
            pred[size_t(r)] = arg;
        }

        double metric;
        if (task == ProbeSpec::Task::segmentation) {
            std::vector<int64_t> inter(static_cast<size_t>(c), 0),
                uni(static_cast<size_t>(c), 0);
            for (int64_t i = 0; i < eval.n_images; ++i)
                for (int64_t py = 0; py < eval.side; ++py)
                    for (int64_t px = 0; px < eval.side; ++px) {
                        const int gt = *eval.seg_maps[size_t(i)].at(int(px), int(py));
                        const int64_t pidx =
                            (py / eval.patch_px) * eval.grid + (px / eval.patch_px);
                        const int pr = pred[size_t(i * eval.n_patches + pidx)];
                        if (gt == pr) {
                            inter[size_t(gt)]++;
                            uni[size_t(gt)]++;
                        } else {
                            uni[size_t(gt)]++;
                            uni[size_t(pr)]++;
                        }
                    }
            double iou_sum = 0;
            int64_t present = 0;
            for (int64_t cc = 0; cc < c; ++cc)
                if (uni[size_t(cc)] > 0) {
                    iou_sum += double(inter[size_t(cc)]) / double(uni[size_t(cc)]);
                    ++present;
                }
            metric = present ? iou_sum / double(present) : 0.0;
            if (metric > best.metric) {
                best.metric = metric;
                best.best_lr = lr;
            }
        } else {
            double sq = 0;
            int64_t count = 0;
            for (int64_t i = 0; i < eval.n_images; ++i)
                for (int64_t py = 0; py < eval.side; ++py)
                    for (int64_t px = 0; px < eval.side; ++px) {
                        const int64_t pidx =
                            (py / eval.patch_px) * eval.grid + (px / eval.patch_px);
                        const int bin = pred[size_t(i * eval.n_patches + pidx)];
                        const double mid = (double(bin) + 0.5) / double(c);
                        const double truth =
                            double(eval.depth_maps[size_t(i)][size_t(py * eval.side + px)]);
                        sq += (mid - truth) * (mid - truth);
                        ++count;
                    }
            metric = std::sqrt(sq / double(count));
            if (metric < best.metric) {
                best.metric = metric;
                best.best_lr = lr;
            }
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// attention statistics
// ---------------------------------------------------------------------------

struct AttentionStats {
    // per image, per class token
    std::vector<double> max_noisy, std_noisy, entropy_noisy;
    std::vector<double> max_synthetic, std_synthetic, entropy_synthetic;

    static double mean(const std::vector<double>& v) {
        double acc = 0;
        for (double x : v) acc += x;
        return v.empty() ? 0.0 : acc / double(v.size());
    }
};

inline double attention_entropy(const double* p, int64_t n) {
    double h = 0;
    for (int64_t i = 0; i < n; ++i)
        if (p[i] > 0) h -= p[i] * std::log(p[i]);
    return h;
}

// Optional 3x3 median filter on the patch grid (clamped borders), applied to
// each attention map and renormalized, matching the filtered-map variant.
inline std::vector<double> median_filter_grid(const std::vector<double>& map, int64_t grid) {
    std::vector<double> out(map.size());
    for (int64_t y = 0; y < grid; ++y)
        for (int64_t x = 0; x < grid; ++x) {
            double window[9];
            int count = 0;
            for (int64_t dy = -1; dy <= 1; ++dy)
                for (int64_t dx = -1; dx <= 1; ++dx) {
                    const int64_t yy = std::clamp<int64_t>(y + dy, 0, grid - 1);
                    const int64_t xx = std::clamp<int64_t>(x + dx, 0, grid - 1);
                    window[count++] = map[size_t(yy * grid + xx)];
                }
            std::sort(window, window + count);
            out[size_t(y * grid + x)] = window[count / 2];
        }
    double sum = 0;
    for (double v : out) sum += v;
    if (sum > 0)
        for (double& v : out) v /= sum;
    return out;
}

template <typename T>
AttentionStats attention_stats(const EvalModel<T>& model, const std::string& data_dir,
                               const std::vector<DatasetRecord>& records,
                               bool median_filter = false) {
    auto emb = embed_images(model, data_dir, records, false, /*with_attention=*/true);
    const int64_t n = int64_t(records.size());
    const int64_t npat = emb.n_patches;
    const int64_t grid = int64_t(std::llround(std::sqrt(double(npat))));
    AttentionStats stats;
    auto push = [&](const Tensor<T>& attn, int64_t i, std::vector<double>& maxv,
                    std::vector<double>& stdv, std::vector<double>& entv) {
        std::vector<double> p(static_cast<size_t>(npat));
        for (int64_t j = 0; j < npat; ++j) p[size_t(j)] = double(attn.at(i, j));
        if (median_filter) p = median_filter_grid(p, grid);
        double mx = 0, mean = 0;
        for (double v : p) {
            mx = std::max(mx, v);
            mean += v;
        }
        mean /= double(npat);
        double var = 0;
        for (double v : p) var += (v - mean) * (v - mean);
        var /= double(npat);
        maxv.push_back(mx);
        stdv.push_back(std::sqrt(var));
        entv.push_back(attention_entropy(p.data(), npat));
    };
    for (int64_t i = 0; i < n; ++i) {
        push(emb.attn_g, i, stats.max_noisy, stats.std_noisy, stats.entropy_noisy);
        push(emb.attn_hat, i, stats.max_synthetic, stats.std_synthetic,
             stats.entropy_synthetic);
    }
    return stats;
}

} // namespace duet
