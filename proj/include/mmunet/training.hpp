#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmunet/data_io.hpp"
#include "mmunet/models.hpp"

namespace mmunet::training {

struct TrainConfig {
    index_t epochs = 150;
    index_t batch_size = 16;
    double base_lr = 0.015;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    index_t lr_drop_start = 100;
    index_t lr_drop_every = 10;
    double lr_drop_factor = 10.0;
    std::uint64_t seed = 1;
    index_t input_size = 256;
};

void validate(const TrainConfig& cfg);

// Stair schedule: base_lr through lr_drop_start, then divided by
// lr_drop_factor^ceil((epoch - lr_drop_start) / lr_drop_every).
double lr_at(index_t epoch, const TrainConfig& cfg);

// v <- momentum*v + (g + weight_decay*p); p <- p - lr*v
template <class T>
void sgd_update(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& v, T lr,
                T momentum, T weight_decay);

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(index_t num_classes);
    void add(index_t predicted, index_t actual);
    std::int64_t at(index_t predicted, index_t actual) const;
    index_t num_classes() const { return k_; }

private:
    index_t k_;
    std::vector<std::int64_t> counts_;  // row = actual, column = predicted
};

struct Metrics {
    double accuracy = 0.0;
    // one entry per class whose union is non-empty, ascending class id
    std::vector<double> per_class_iou;
    double miou = 0.0;
};

Metrics metrics_from(const ConfusionMatrix& cm);

// Dataset-global confusion over argmax predictions.
template <class T>
Metrics evaluate(const models::Model<T>& model, const std::vector<data::Sample<T>>& ds,
                 index_t batch_size);

struct TrainResult {
    std::vector<std::string> log;  // one line per epoch
    index_t best_epoch = 0;
    double best_miou = 0.0;
    double final_miou = 0.0;
};

// Seeded shuffling, partial final batch dropped, cross-entropy loss, SGD.
// The model ends up holding the weights of the best validation-mIoU epoch.
// on_epoch, when set, receives each finished log line.
template <class T>
TrainResult train(models::Model<T>& model, const std::vector<data::Sample<T>>& train_set,
                  const std::vector<data::Sample<T>>& val_set, const TrainConfig& cfg,
                  const std::function<void(const std::string&)>& on_epoch = {});

}  // namespace mmunet::training
