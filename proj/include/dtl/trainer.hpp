#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtl/adapters.hpp"
#include "dtl/memory.hpp"

namespace dtl {

// Raised when optimization hits a non-finite value; the CLI maps this to its
// own exit code so scripts can tell a diverged run from a bad config.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lr_max = 1e-3;
    double lr_min = 0.0;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long epochs = 100;
    long batch_size = 32;
    long warmup_steps = 0;
    std::uint64_t seed = 0;
    std::string checkpoint_path;  // empty: no checkpointing
    bool inject_nan = false;      // debug: poison the first loss to test aborts

    void validate() const;
};

// Linear warmup then cosine decay from lr_max to lr_min; clamps to lr_min
// past total_steps.
double cosine_lr(long step, long total_steps, const TrainConfig& cfg);

struct AdamWState {
    // first/second moment per Param name
    std::map<std::string, std::pair<Tensor, Tensor>> moments;
    long t = 0;
};

// One decoupled-weight-decay Adam step over the trainable set. Params absent
// from `grads` are treated as zero-gradient (decay still applies). NaN
// gradients abort with the Param name.
void adamw_step(const std::vector<Param*>& params, const GradStore& grads, AdamWState& state,
                double lr, const TrainConfig& cfg);

struct Dataset {
    std::vector<Tensor> train_images;
    std::vector<long> train_labels;
    std::vector<Tensor> test_images;
    std::vector<long> test_labels;
    long n_classes = 0;
};

struct DatasetSpec {
    enum class Kind { SyntheticLinear, SyntheticPlanted, ImageFolder } kind = Kind::SyntheticLinear;
    long n_classes = 4;
    long n_train = 128;
    long n_test = 128;
    double shift_strength = 0.1;  // planted: minimum relative score margin
    double odd_mix = 0.3;         // planted: odd (linearly readable) score component
    long planted_block = 7;       // planted: tap index whose features carry the label
    std::string path;             // ImageFolder: DTLIMG1 sample file
    std::string labels_csv;       // ImageFolder: "filename,label" lines in sample order
};

// Labels linearly decodable from the frozen cls feature of `backbone`.
Dataset make_synthetic_linear(const ViTModel& backbone, const DatasetSpec& spec, std::uint64_t seed);
// Labels are an even (sign-invariant) function of a random rotation of the
// block-`planted_block` cls feature: invisible to a linear probe on the final
// frozen feature, reachable through the CSN's gated side path.
Dataset make_synthetic_planted(const ViTModel& backbone, const DatasetSpec& spec, std::uint64_t seed);
Dataset load_image_folder(const DatasetSpec& spec, const ViTConfig& cfg);
Dataset make_dataset(const ViTModel& backbone, const DatasetSpec& spec, std::uint64_t seed);

// DTLIMG1 container: magic, u32 count, u32 side, then count samples of raw
// 8-bit RGB [3*side*side]. Pixels map to [-1,1] on load.
void save_image_folder(const std::string& path, const std::string& labels_csv,
                       const std::vector<Tensor>& images, const std::vector<long>& labels);

struct EpochRecord {
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    double lr = 0.0;
};

struct History {
    std::vector<EpochRecord> epochs;
    double best_accuracy = 0.0;
    long best_epoch = -1;
};

History train(AdaptedModel& model, const Dataset& data, const TrainConfig& cfg);
// Top-1 accuracy, recorded in inference mode (zero retention).
double evaluate(AdaptedModel& model, const std::vector<Tensor>& images,
                const std::vector<long>& labels);

std::string history_csv(const History& h);

}  // namespace dtl
