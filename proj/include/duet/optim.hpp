#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "duet/nn.hpp"

namespace duet {

// Shared optimizer surface. Parameters are registered once; teacher tensors
// must never appear here (they are EMA-tracked, not trained).
template <typename T>
class Optimizer {
public:
    virtual ~Optimizer() = default;

    void register_params(ParamSet<T>& ps) {
        for (auto& item : ps.items()) {
            DUET_CHECK(item.value->requires_grad, "optimizer: ", item.name,
                       " is not trainable; teacher tensors stay out of the update set");
            params_.push_back({item.name, item.value});
        }
        on_params_changed();
    }

    void register_param(const std::string& name, const Value<T>& v) {
        DUET_CHECK(v->requires_grad, "optimizer: ", name, " is not trainable");
        params_.push_back({name, v});
        on_params_changed();
    }

    const std::vector<typename ParamSet<T>::Item>& params() const { return params_; }

    void zero_grads() {
        for (auto& p : params_) p.value->zero_grad();
    }

    // Global-norm gradient clipping; returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        double sq = 0.0;
        for (auto& p : params_)
            for (T g : p.value.grad().data) sq += double(g) * double(g);
        const double norm = std::sqrt(sq);
        if (max_norm > 0.0 && norm > max_norm) {
            const T s = T(max_norm / norm);
            for (auto& p : params_)
                for (T& g : p.value->grad.data) g *= s;
        }
        return norm;
    }

    virtual void step(double lr) = 0;
    virtual const char* name() const = 0;

    // State exposed for checkpointing, aligned with registration order.
    struct StateTensor {
        std::string name;
        Tensor<T>* tensor;
    };
    virtual std::vector<StateTensor> state_tensors() = 0;
    int64_t step_count = 0;

protected:
    virtual void on_params_changed() {}
    std::vector<typename ParamSet<T>::Item> params_;
};

// Adaptive moment estimation with decoupled weight decay. Decay skips
// single-row tensors (biases, norms, tokens, scalars).
template <typename T>
class AdamW final : public Optimizer<T> {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.05;

    void step(double lr) override {
        ++this->step_count;
        const double bc1 = 1.0 - std::pow(beta1, double(this->step_count));
        const double bc2 = 1.0 - std::pow(beta2, double(this->step_count));
        for (size_t i = 0; i < this->params_.size(); ++i) {
            auto& p = this->params_[i].value;
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            const bool decay = p.val().rows() > 1;
            T* w = p.val().data.data();
            const T* g = p.grad().data.data();
            for (int64_t j = 0; j < p.val().numel(); ++j) {
                const double gj = double(g[j]);
                const double mj = beta1 * double(m.data[size_t(j)]) + (1.0 - beta1) * gj;
                const double vj = beta2 * double(v.data[size_t(j)]) + (1.0 - beta2) * gj * gj;
                m.data[size_t(j)] = T(mj);
                v.data[size_t(j)] = T(vj);
                double upd = (mj / bc1) / (std::sqrt(vj / bc2) + eps);
                if (decay) upd += weight_decay * double(w[j]);
                w[j] = T(double(w[j]) - lr * upd);
            }
        }
    }

    const char* name() const override { return "adamw"; }

    std::vector<typename Optimizer<T>::StateTensor> state_tensors() override {
        std::vector<typename Optimizer<T>::StateTensor> out;
        for (size_t i = 0; i < this->params_.size(); ++i) {
            out.push_back({"opt.m." + this->params_[i].name, &m_[i]});
            out.push_back({"opt.v." + this->params_[i].name, &v_[i]});
        }
        return out;
    }

protected:
    void on_params_changed() override {
        while (m_.size() < this->params_.size()) {
            const auto& shape = this->params_[m_.size()].value.val().shape;
            m_.emplace_back(shape);
            v_.emplace_back(shape);
        }
    }

private:
    std::vector<Tensor<T>> m_, v_;
};

// Factored second-moment optimizer (no first moment). Matrices keep row and
// column statistics; vectors keep the full second moment.
template <typename T>
class Adafactor final : public Optimizer<T> {
public:
    double eps1 = 1e-30, eps2 = 1e-3, clip_threshold = 1.0, decay_exponent = 0.8;
    double weight_decay = 0.05;

    void step(double lr) override {
        ++this->step_count;
        const double beta2t =
            1.0 - std::pow(double(this->step_count), -decay_exponent);
        for (size_t i = 0; i < this->params_.size(); ++i) {
            auto& p = this->params_[i].value;
            const int64_t rows = p.val().rows(), cols = p.val().cols();
            const T* g = p.grad().data.data();
            T* w = p.val().data.data();
            const bool factored = rows > 1;
            std::vector<double> update(size_t(rows * cols));
            if (factored) {
                Tensor<T>& vr = row_[i];
                Tensor<T>& vc = col_[i];
                std::vector<double> row_mean(size_t(rows), 0.0), col_mean(size_t(cols), 0.0);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c) {
                        const double g2 = double(g[r * cols + c]) * double(g[r * cols + c]) + eps1;
                        row_mean[size_t(r)] += g2 / double(cols);
                        col_mean[size_t(c)] += g2 / double(rows);
                    }
                for (int64_t r = 0; r < rows; ++r)
                    vr.data[size_t(r)] =
                        T(beta2t * double(vr.data[size_t(r)]) + (1.0 - beta2t) * row_mean[size_t(r)]);
                for (int64_t c = 0; c < cols; ++c)
                    vc.data[size_t(c)] =
                        T(beta2t * double(vc.data[size_t(c)]) + (1.0 - beta2t) * col_mean[size_t(c)]);
                double vr_sum = 0.0;
                for (int64_t r = 0; r < rows; ++r) vr_sum += double(vr.data[size_t(r)]);
                vr_sum = std::max(vr_sum, eps1);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c) {
                        const double v =
                            double(vr.data[size_t(r)]) * double(vc.data[size_t(c)]) / vr_sum;
                        update[size_t(r * cols + c)] =
                            double(g[r * cols + c]) / std::max(std::sqrt(v), eps1);
                    }
            } else {
                Tensor<T>& v = row_[i];
                for (int64_t j = 0; j < cols; ++j) {
                    const double g2 = double(g[j]) * double(g[j]) + eps1;
                    v.data[size_t(j)] = T(beta2t * double(v.data[size_t(j)]) + (1.0 - beta2t) * g2);
                    update[size_t(j)] = double(g[j]) / std::max(std::sqrt(double(v.data[size_t(j)])), eps1);
                }
            }
            double rms = 0.0;
            for (double u : update) rms += u * u;
            rms = std::sqrt(rms / double(update.size()));
            const double scale = 1.0 / std::max(1.0, rms / clip_threshold);
            const bool decay = rows > 1;
            for (int64_t j = 0; j < p.val().numel(); ++j) {
                double upd = update[size_t(j)] * scale;
                if (decay) upd += weight_decay * double(w[j]);
                w[j] = T(double(w[j]) - lr * upd);
            }
        }
    }

    const char* name() const override { return "adafactor"; }

    std::vector<typename Optimizer<T>::StateTensor> state_tensors() override {
        std::vector<typename Optimizer<T>::StateTensor> out;
        for (size_t i = 0; i < this->params_.size(); ++i) {
            out.push_back({"opt.vr." + this->params_[i].name, &row_[i]});
            if (this->params_[i].value.val().rows() > 1)
                out.push_back({"opt.vc." + this->params_[i].name, &col_[i]});
        }
        return out;
    }

protected:
    void on_params_changed() override {
        while (row_.size() < this->params_.size()) {
            const auto& v = this->params_[row_.size()].value.val();
            if (v.rows() > 1) {
                row_.emplace_back(Shape{v.rows(), 1});
                col_.emplace_back(Shape{1, v.cols()});
            } else {
                row_.emplace_back(Shape{1, v.cols()});
                col_.emplace_back(Shape{1, 1});
            }
        }
    }

private:
    std::vector<Tensor<T>> row_, col_;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const std::string& kind, double weight_decay) {
    if (kind == "adamw") {
        auto opt = std::make_unique<AdamW<T>>();
        opt->weight_decay = weight_decay;
        return opt;
    }
    if (kind == "adafactor") {
        auto opt = std::make_unique<Adafactor<T>>();
        opt->weight_decay = weight_decay;
        return opt;
    }
    fail("optimizer: unknown kind '", kind, "' (expected adamw or adafactor)");
}

} // namespace duet
