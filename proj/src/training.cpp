#include "mmunet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mmunet/errors.hpp"
#include "mmunet/ops.hpp"
#include "mmunet/rng.hpp"
#include "mmunet/text.hpp"

namespace mmunet::training {

void validate(const TrainConfig& cfg) {
    if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.lr_drop_start < 1 ||
        cfg.lr_drop_every < 1 || cfg.input_size < 1) {
        throw ConfigError("train config counts must be positive");
    }
    if (!(cfg.base_lr > 0.0) || !(cfg.momentum >= 0.0) || !(cfg.weight_decay >= 0.0)) {
        throw ConfigError("train config rates must be non-negative (base_lr positive)");
    }
    if (!(cfg.lr_drop_factor > 1.0)) {
        throw ConfigError("lr_drop_factor must exceed 1");
    }
}

double lr_at(index_t epoch, const TrainConfig& cfg) {
    validate(cfg);
    if (epoch < 1 || epoch > cfg.epochs) {
        throw UsageError("epoch " + std::to_string(epoch) + " outside [1, " +
                         std::to_string(cfg.epochs) + "]");
    }
    if (epoch <= cfg.lr_drop_start) {
        return cfg.base_lr;
    }
    const index_t drops =
        (epoch - cfg.lr_drop_start + cfg.lr_drop_every - 1) / cfg.lr_drop_every;
    return cfg.base_lr / std::pow(cfg.lr_drop_factor, static_cast<double>(drops));
}

template <class T>
void sgd_update(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& v, T lr,
                T momentum, T weight_decay) {
    if (p.size() != g.size() || p.size() != v.size()) {
        throw ShapeError("sgd_update buffer sizes differ: " + std::to_string(p.size()) + "/" +
                         std::to_string(g.size()) + "/" + std::to_string(v.size()));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T adjusted = g[i] + weight_decay * p[i];
        v[i] = momentum * v[i] + adjusted;
        p[i] -= lr * v[i];
    }
}

ConfusionMatrix::ConfusionMatrix(index_t num_classes) : k_(num_classes) {
    if (k_ < 1) {
        throw UsageError("confusion matrix needs at least one class");
    }
    counts_.assign(static_cast<std::size_t>(k_ * k_), 0);
}

void ConfusionMatrix::add(index_t predicted, index_t actual) {
    if (predicted < 0 || predicted >= k_ || actual < 0 || actual >= k_) {
        throw DataError("class id (" + std::to_string(predicted) + ", " +
                        std::to_string(actual) + ") outside [0, " + std::to_string(k_) + ")");
    }
    ++counts_[static_cast<std::size_t>(actual * k_ + predicted)];
}

std::int64_t ConfusionMatrix::at(index_t predicted, index_t actual) const {
    return counts_[static_cast<std::size_t>(actual * k_ + predicted)];
}

Metrics metrics_from(const ConfusionMatrix& cm) {
    const index_t k = cm.num_classes();
    std::int64_t total = 0, correct = 0;
    for (index_t a = 0; a < k; ++a) {
        for (index_t p = 0; p < k; ++p) {
            total += cm.at(p, a);
        }
        correct += cm.at(a, a);
    }
    Metrics m;
    m.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    double iou_sum = 0.0;
    for (index_t c = 0; c < k; ++c) {
        std::int64_t pred_c = 0, actual_c = 0;
        for (index_t j = 0; j < k; ++j) {
            pred_c += cm.at(c, j);
            actual_c += cm.at(j, c);
        }
        const std::int64_t inter = cm.at(c, c);
        const std::int64_t uni = pred_c + actual_c - inter;
        if (uni == 0) {
            continue;  // class absent from prediction and truth alike
        }
        const double iou = static_cast<double>(inter) / static_cast<double>(uni);
        m.per_class_iou.push_back(iou);
        iou_sum += iou;
    }
    m.miou = m.per_class_iou.empty()
                 ? 0.0
                 : iou_sum / static_cast<double>(m.per_class_iou.size());
    return m;
}

namespace {

template <class T>
std::pair<TensorPtr<T>, TensorPtr<T>> stack_batch(const std::vector<data::Sample<T>>& ds,
                                                  const std::vector<std::int64_t>& order,
                                                  index_t from, index_t count) {
    const auto& first = ds[static_cast<std::size_t>(order[static_cast<std::size_t>(from)])];
    const index_t s = first.image->dim(2);
    auto images = Tensor<T>::create({count, 3, s, s});
    auto masks = Tensor<T>::create({count, s, s});
    for (index_t i = 0; i < count; ++i) {
        const auto& smp = ds[static_cast<std::size_t>(order[static_cast<std::size_t>(from + i)])];
        if (smp.image->shape != first.image->shape || smp.mask->shape != first.mask->shape) {
            throw ShapeError("dataset samples disagree in shape: " +
                             shape_str(smp.image->shape) + " vs " +
                             shape_str(first.image->shape));
        }
        std::copy(smp.image->data.begin(), smp.image->data.end(),
                  images->data.begin() + i * 3 * s * s);
        std::copy(smp.mask->data.begin(), smp.mask->data.end(),
                  masks->data.begin() + i * s * s);
    }
    return {images, masks};
}

template <class T>
void confusion_of_batch(const TensorPtr<T>& logits, const TensorPtr<T>& masks,
                        ConfusionMatrix& cm) {
    const index_t b = logits->dim(0), k = logits->dim(1);
    const index_t h = logits->dim(2), w = logits->dim(3);
    const index_t hw = h * w;
    const T* pl = logits->data.data();
    const T* pm = masks->data.data();
    for (index_t bi = 0; bi < b; ++bi) {
        for (index_t px = 0; px < hw; ++px) {
            const T* base = pl + bi * k * hw + px;
            index_t best = 0;
            T bv = base[0];
            for (index_t c = 1; c < k; ++c) {
                if (base[c * hw] > bv) {
                    bv = base[c * hw];
                    best = c;
                }
            }
            const auto actual = static_cast<index_t>(
                std::llround(static_cast<double>(pm[bi * hw + px])));
            cm.add(best, actual);
        }
    }
}

}  // namespace

template <class T>
Metrics evaluate(const models::Model<T>& model, const std::vector<data::Sample<T>>& ds,
                 index_t batch_size) {
    if (ds.empty()) {
        throw UsageError("evaluate needs a non-empty dataset");
    }
    if (batch_size < 1) {
        throw UsageError("evaluate needs a positive batch size");
    }
    NoGradGuard guard;
    ConfusionMatrix cm(model.spec.num_classes);
    const auto n = static_cast<index_t>(ds.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::int64_t{0});
    for (index_t from = 0; from < n; from += batch_size) {
        const index_t count = std::min(batch_size, n - from);
        auto [images, masks] = stack_batch(ds, order, from, count);
        auto logits = models::forward(model, images);
        confusion_of_batch(logits, masks, cm);
    }
    return metrics_from(cm);
}

template <class T>
TrainResult train(models::Model<T>& model, const std::vector<data::Sample<T>>& train_set,
                  const std::vector<data::Sample<T>>& val_set, const TrainConfig& cfg,
                  const std::function<void(const std::string&)>& on_epoch) {
    validate(cfg);
    if (train_set.empty() || val_set.empty()) {
        throw UsageError("train needs non-empty train and validation sets");
    }
    const auto n = static_cast<index_t>(train_set.size());
    if (cfg.batch_size > n) {
        throw UsageError("batch size " + std::to_string(cfg.batch_size) +
                         " exceeds training set size " + std::to_string(n));
    }

    std::vector<std::vector<T>> velocity(model.manifest.size());
    for (std::size_t i = 0; i < model.manifest.size(); ++i) {
        velocity[i].assign(model.manifest[i].second->data.size(), T(0));
    }

    TrainResult result;
    std::vector<std::vector<T>> best_params;
    double best = -1.0;
    const index_t batches = n / cfg.batch_size;

    for (index_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        auto eng = rng::engine(rng::substream(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        const auto order = rng::shuffled_indices(n, eng);

        double loss_sum = 0.0;
        for (index_t bi = 0; bi < batches; ++bi) {
            auto [images, masks] = stack_batch(train_set, order, bi * cfg.batch_size,
                                               cfg.batch_size);
            auto logits = models::forward(model, images);
            auto loss = ops::softmax_ce(logits, masks);
            for (auto& [name, p] : model.manifest) {
                p->zero_grad();
            }
            backward(loss);
            for (std::size_t i = 0; i < model.manifest.size(); ++i) {
                auto& p = model.manifest[i].second;
                sgd_update(p->data, p->grad, velocity[i], static_cast<T>(lr),
                           static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
            }
            loss_sum += static_cast<double>(loss->item());
        }
        const double train_loss = loss_sum / static_cast<double>(batches);

        const Metrics val = evaluate(model, val_set, cfg.batch_size);
        char line[160];
        std::snprintf(line, sizeof(line), "epoch=%lld lr=%s loss=%.6f acc=%.6f miou=%.6f",
                      static_cast<long long>(epoch), text::format_double(lr).c_str(),
                      train_loss, val.accuracy, val.miou);
        result.log.emplace_back(line);
        if (on_epoch) {
            on_epoch(result.log.back());
        }

        if (val.miou > best) {
            best = val.miou;
            result.best_epoch = epoch;
            result.best_miou = val.miou;
            best_params.clear();
            for (auto& [name, p] : model.manifest) {
                best_params.push_back(p->data);
            }
        }
        result.final_miou = val.miou;
    }

    for (std::size_t i = 0; i < model.manifest.size(); ++i) {
        model.manifest[i].second->data = best_params[i];
    }
    return result;
}

template void sgd_update<float>(std::vector<float>&, const std::vector<float>&,
                                std::vector<float>&, float, float, float);
template void sgd_update<double>(std::vector<double>&, const std::vector<double>&,
                                 std::vector<double>&, double, double, double);
template Metrics evaluate<float>(const models::Model<float>&,
                                 const std::vector<data::Sample<float>>&, index_t);
template Metrics evaluate<double>(const models::Model<double>&,
                                  const std::vector<data::Sample<double>>&, index_t);
template TrainResult train<float>(models::Model<float>&, const std::vector<data::Sample<float>>&,
                                  const std::vector<data::Sample<float>>&, const TrainConfig&,
                                  const std::function<void(const std::string&)>&);
template TrainResult train<double>(models::Model<double>&,
                                   const std::vector<data::Sample<double>>&,
                                   const std::vector<data::Sample<double>>&, const TrainConfig&,
                                   const std::function<void(const std::string&)>&);

}  // namespace mmunet::training
