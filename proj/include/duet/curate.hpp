#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

// ---------------------------------------------------------------------------
// embedding matrix files: u32 n, u32 d, then float32 row-major
// ---------------------------------------------------------------------------

inline void write_embeddings(const std::string& path, const Tensor<double>& emb) {
    std::ofstream out(path, std::ios::binary);
    DUET_CHECK(out.good(), "embeddings: cannot write ", path);
    const uint32_t n = uint32_t(emb.rows()), d = uint32_t(emb.cols());
    out.write(reinterpret_cast<const char*>(&n), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    for (double v : emb.data) {
        const float f = float(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
    DUET_CHECK(out.good(), "embeddings: short write to ", path);
}

inline Tensor<double> read_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    DUET_CHECK(in.good(), "embeddings: cannot read ", path);
    uint32_t n = 0, d = 0;
    in.read(reinterpret_cast<char*>(&n), 4);
    in.read(reinterpret_cast<char*>(&d), 4);
    DUET_CHECK(in.good() && n > 0 && d > 0, "embeddings: bad header in ", path);
    Tensor<double> emb({int64_t(n), int64_t(d)});
    for (auto& v : emb.data) {
        float f = 0;
        in.read(reinterpret_cast<char*>(&f), 4);
        v = double(f);
    }
    DUET_CHECK(in.good(), "embeddings: truncated data in ", path);
    return emb;
}

inline void l2_normalize_embeddings(Tensor<double>& emb) {
    for (int64_t i = 0; i < emb.rows(); ++i) {
        double* row = emb.row(i);
        double sq = 0;
        for (int64_t j = 0; j < emb.cols(); ++j) sq += row[j] * row[j];
        const double norm = std::sqrt(sq);
        if (norm > 0)
            for (int64_t j = 0; j < emb.cols(); ++j) row[j] /= norm;
    }
}

// ---------------------------------------------------------------------------
// k-means (Lloyd) with farthest-point initialization
// ---------------------------------------------------------------------------

struct ClusterModel {
    Tensor<double> centroids;          // k x d
    std::vector<int64_t> member_counts; // target-dataset members per cluster
    std::vector<double> thresholds;     // per-cluster 90th-percentile distance
    std::vector<double> inertia_history;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int64_t d) {
    double acc = 0;
    for (int64_t j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        acc += diff * diff;
    }
    return acc;
}

// Nearest-rank percentile on a copy of the values.
inline double percentile_nearest_rank(std::vector<double> values, double pct) {
    DUET_CHECK(!values.empty(), "curate: percentile of empty set");
    std::sort(values.begin(), values.end());
    const size_t rank = size_t(std::ceil(pct / 100.0 * double(values.size())));
    return values[std::max<size_t>(1, rank) - 1];
}

} // namespace detail

inline ClusterModel kmeans(const Tensor<double>& emb, int64_t k, uint64_t seed,
                           int max_iterations = 50) {
    const int64_t n = emb.rows(), d = emb.cols();
    DUET_CHECK(n >= 1, "kmeans: empty input");
    DUET_CHECK(k >= 1 && k <= n, "kmeans: k = ", k, " outside [1, ", n, "]");

    // farthest-point initialization from a seeded start
    Rng rng(seed);
    std::vector<int64_t> centers{int64_t(rng.uniform_index(uint64_t(n)))};
    std::vector<double> nearest(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        nearest[size_t(i)] = detail::sq_dist(emb.row(i), emb.row(centers[0]), d);
    while (int64_t(centers.size()) < k) {
        int64_t far = 0;
        for (int64_t i = 1; i < n; ++i)
            if (nearest[size_t(i)] > nearest[size_t(far)]) far = i;
        centers.push_back(far);
        for (int64_t i = 0; i < n; ++i)
            nearest[size_t(i)] =
                std::min(nearest[size_t(i)], detail::sq_dist(emb.row(i), emb.row(far), d));
    }

    ClusterModel model;
    model.centroids = Tensor<double>({k, d});
    for (int64_t c = 0; c < k; ++c)
        std::copy_n(emb.row(centers[size_t(c)]), d, model.centroids.row(c));

    std::vector<int64_t> assign(static_cast<size_t>(n), -1);
    for (int iter = 0; iter < max_iterations; ++iter) {
        bool changed = false;
        double inertia = 0;
        for (int64_t i = 0; i < n; ++i) {
            int64_t best = 0;
            double best_d = detail::sq_dist(emb.row(i), model.centroids.row(0), d);
            for (int64_t c = 1; c < k; ++c) {
                const double dist = detail::sq_dist(emb.row(i), model.centroids.row(c), d);
                if (dist < best_d) {
                    best_d = dist;
                    best = c;
                }
            }
            inertia += best_d;
            if (assign[size_t(i)] != best) {
                assign[size_t(i)] = best;
                changed = true;
            }
        }
        model.inertia_history.push_back(inertia);
        if (!changed) break;
        // recompute means; empty clusters keep their previous centroid
        Tensor<double> sums({k, d});
        std::vector<int64_t> counts(static_cast<size_t>(k), 0);
        for (int64_t i = 0; i < n; ++i) {
            const int64_t c = assign[size_t(i)];
            counts[size_t(c)]++;
            double* srow = sums.row(c);
            const double* erow = emb.row(i);
            for (int64_t j = 0; j < d; ++j) srow[j] += erow[j];
        }
        for (int64_t c = 0; c < k; ++c)
            if (counts[size_t(c)] > 0)
                for (int64_t j = 0; j < d; ++j)
                    model.centroids.at(c, j) = sums.at(c, j) / double(counts[size_t(c)]);
    }

    // final member statistics and per-cluster 90th-percentile distances
    model.member_counts.assign(static_cast<size_t>(k), 0);
    std::vector<std::vector<double>> dists(static_cast<size_t>(k));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t c = assign[size_t(i)];
        model.member_counts[size_t(c)]++;
        dists[size_t(c)].push_back(
            std::sqrt(detail::sq_dist(emb.row(i), model.centroids.row(c), d)));
    }
    model.thresholds.assign(static_cast<size_t>(k), 0.0);
    for (int64_t c = 0; c < k; ++c)
        if (!dists[size_t(c)].empty())
            model.thresholds[size_t(c)] =
                detail::percentile_nearest_rank(std::move(dists[size_t(c)]), 90.0);
    return model;
}

// ---------------------------------------------------------------------------
// proportional sampling with percentile cutoffs
// ---------------------------------------------------------------------------

struct CurationPlan {
    std::vector<int64_t> selected;      // pool ids, ascending
    std::vector<int64_t> draw_counts;   // per cluster
    std::vector<int64_t> dedup_removed; // filled by the dedup stage
    uint64_t seed = 0;
};

// Largest-remainder apportionment of quota proportional to weights, capped by
// avail with redistribution of the excess.
inline std::vector<int64_t> apportion(const std::vector<int64_t>& weights,
                                      const std::vector<int64_t>& avail, int64_t quota) {
    const size_t k = weights.size();
    int64_t total_avail = 0;
    for (int64_t a : avail) total_avail += a;
    DUET_CHECK(quota <= total_avail, "curate: quota ", quota, " exceeds eligible pool of ",
               total_avail);
    std::vector<int64_t> draws(k, 0);
    std::vector<char> capped(k, 0);
    int64_t remaining = quota;
    for (;;) {
        int64_t weight_sum = 0;
        for (size_t c = 0; c < k; ++c)
            if (!capped[c]) weight_sum += weights[c];
        std::vector<int64_t> round(k, 0);
        if (weight_sum == 0) {
            // degenerate weights: spread uniformly over clusters with room
            for (size_t c = 0; c < k && remaining > 0; ++c)
                if (!capped[c] && draws[c] < avail[c]) {
                    const int64_t take = std::min(remaining, avail[c] - draws[c]);
                    round[c] = take;
                    remaining -= take;
                }
        } else {
            std::vector<std::pair<double, size_t>> fractions;
            int64_t assigned = 0;
            for (size_t c = 0; c < k; ++c) {
                if (capped[c]) continue;
                const double ideal = double(remaining) * double(weights[c]) / double(weight_sum);
                round[c] = int64_t(std::floor(ideal));
                assigned += round[c];
                fractions.push_back({ideal - double(round[c]), c});
            }
            std::sort(fractions.begin(), fractions.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (int64_t extra = remaining - assigned; extra > 0; --extra)
                round[fractions[size_t(remaining - assigned - extra)].second]++;
            remaining = 0;
        }
        // cap by availability and requeue the excess
        for (size_t c = 0; c < k; ++c) {
            draws[c] += round[c];
            if (draws[c] > avail[c]) {
                remaining += draws[c] - avail[c];
                draws[c] = avail[c];
                capped[c] = 1;
            }
        }
        if (remaining == 0) break;
    }
    return draws;
}

// Assign pool items to nearest centroids, drop those at or beyond their
// cluster's 90th-percentile threshold, then sample cluster draws proportional
// to the target-dataset member counts.
inline CurationPlan curate_sample(const Tensor<double>& pool, const ClusterModel& model,
                                  int64_t quota, uint64_t seed) {
    DUET_CHECK(quota >= 0, "curate: negative quota");
    const int64_t n = pool.rows(), k = model.centroids.rows();
    DUET_CHECK(pool.cols() == model.centroids.cols(), "curate: pool dimension ", pool.cols(),
               " vs centroids ", model.centroids.cols());

    std::vector<std::vector<int64_t>> eligible(static_cast<size_t>(k));
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        double best_d = detail::sq_dist(pool.row(i), model.centroids.row(0), pool.cols());
        for (int64_t c = 1; c < k; ++c) {
            const double d = detail::sq_dist(pool.row(i), model.centroids.row(c), pool.cols());
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (std::sqrt(best_d) < model.thresholds[size_t(best)])
            eligible[size_t(best)].push_back(i);
    }

    std::vector<int64_t> avail(static_cast<size_t>(k));
    for (int64_t c = 0; c < k; ++c) avail[size_t(c)] = int64_t(eligible[size_t(c)].size());
    CurationPlan plan;
    plan.seed = seed;
    plan.draw_counts = apportion(model.member_counts, avail, quota);

    Rng rng(seed);
    for (int64_t c = 0; c < k; ++c) {
        auto& ids = eligible[size_t(c)];
        const int64_t take = plan.draw_counts[size_t(c)];
        // partial Fisher-Yates over the eligible ids of this cluster
        for (int64_t i = 0; i < take; ++i) {
            const int64_t j = i + int64_t(rng.uniform_index(uint64_t(ids.size() - size_t(i))));
            std::swap(ids[size_t(i)], ids[size_t(j)]);
            plan.selected.push_back(ids[size_t(i)]);
        }
    }
    std::sort(plan.selected.begin(), plan.selected.end());
    return plan;
}

// Greedy scan in id order: an item is removed when its cosine similarity to
// any earlier kept item or any protected item reaches the threshold.
inline std::vector<int64_t> dedup(const Tensor<double>& embeddings, double threshold,
                                  const Tensor<double>* protected_set = nullptr) {
    DUET_CHECK(threshold > 0.0 && threshold <= 1.0, "dedup: threshold ", threshold,
               " outside (0, 1]");
    const int64_t n = embeddings.rows(), d = embeddings.cols();
    if (protected_set)
        DUET_CHECK(protected_set->cols() == d, "dedup: protected dimension ",
                   protected_set->cols(), " vs ", d);

    auto norm_of = [d](const double* row) {
        double sq = 0;
        for (int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
        return std::sqrt(sq);
    };
    auto cosine = [d, &norm_of](const double* a, const double* b) {
        double dot = 0;
        for (int64_t j = 0; j < d; ++j) dot += a[j] * b[j];
        const double na = norm_of(a), nb = norm_of(b);
        if (na == 0.0 || nb == 0.0) return 0.0;
        return dot / (na * nb);
    };

    std::vector<int64_t> kept;
    std::vector<int64_t> removed;
    for (int64_t i = 0; i < n; ++i) {
        bool duplicate = false;
        if (protected_set) {
            for (int64_t p = 0; p < protected_set->rows() && !duplicate; ++p)
                if (cosine(embeddings.row(i), protected_set->row(p)) >= threshold)
                    duplicate = true;
        }
        for (size_t kidx = 0; kidx < kept.size() && !duplicate; ++kidx)
            if (cosine(embeddings.row(i), embeddings.row(kept[kidx])) >= threshold)
                duplicate = true;
        if (duplicate)
            removed.push_back(i);
        else
            kept.push_back(i);
    }
    return removed;
}

} // namespace duet
