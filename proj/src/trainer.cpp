#include "dtl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dtl {

void TrainConfig::validate() const {
    if (lr_min > lr_max) throw std::invalid_argument("TrainConfig: lr_min > lr_max");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
        throw std::invalid_argument("TrainConfig: betas must be in [0,1)");
}

double cosine_lr(long step, long total_steps, const TrainConfig& cfg) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    long T = total_steps - cfg.warmup_steps;
    long t = step - cfg.warmup_steps;
    if (t >= T || T <= 0) return cfg.lr_min;
    double frac = static_cast<double>(t) / static_cast<double>(T);
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * frac));
}

void adamw_step(const std::vector<Param*>& params, const GradStore& grads, AdamWState& state,
                double lr, const TrainConfig& cfg) {
    state.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (Param* p : params) {
        if (!p->trainable) continue;
        auto it = state.moments.find(p->name);
        if (it == state.moments.end()) {
            it = state.moments
                     .emplace(p->name, std::make_pair(Tensor::zeros(p->tensor.shape(), p->tensor.dtype()),
                                                      Tensor::zeros(p->tensor.shape(), p->tensor.dtype())))
                     .first;
        }
        Tensor& m = it->second.first;
        Tensor& v = it->second.second;
        auto git = grads.find(p->name);
        const Tensor* g = git == grads.end() ? nullptr : &git->second;
        for (long i = 0; i < p->tensor.numel(); ++i) {
            double gi = g ? (*g)[i] : 0.0;
            if (!std::isfinite(gi))
                throw NumericError("adamw_step: non-finite gradient in Param " + p->name);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p->tensor[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p->tensor[i]);
        }
        p->tensor.quantize();
    }
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

namespace {

// cls feature as the head sees it: final-LN output, row 0
Tensor frozen_cls_feature(const ViTModel& backbone, const Tensor& image) {
    Graph g(backbone.config().dtype);
    g.set_inference(true);
    auto r = backbone.forward_with_taps(g, image);
    NodeId normed = g.layer_norm(r.final_tokens, g.use(backbone.params().get("final_ln.gamma")),
                                 g.use(backbone.params().get("final_ln.beta")));
    return g.value(g.split_tokens(normed, 0, 1)).viewed_as({backbone.config().embed_dim}).clone();
}

// cls row of the stream entering block `block` (1-based), frozen backbone
Tensor frozen_tap_feature(const ViTModel& backbone, const Tensor& image, long block) {
    Graph g(backbone.config().dtype);
    g.set_inference(true);
    auto r = backbone.forward_with_taps(g, image);
    NodeId z = block <= 1 ? -1 : r.taps[static_cast<std::size_t>(block - 2)];
    if (z < 0) throw std::invalid_argument("frozen_tap_feature: block must be >= 2");
    return g.value(g.split_tokens(z, 0, 1)).viewed_as({backbone.config().embed_dim}).clone();
}

Tensor random_image(const ViTConfig& cfg, Rng& rng) {
    Tensor img({3, cfg.img, cfg.img}, cfg.dtype);
    for (long j = 0; j < img.numel(); ++j) img[j] = rng.normal();
    img.quantize();
    return img;
}

std::vector<Tensor> class_directions(long k, long d, Rng& rng) {
    std::vector<Tensor> q;
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    for (long c = 0; c < k; ++c) {
        Tensor row({d}, DType::F64);
        for (long j = 0; j < d; ++j) row[j] = rng.normal() * s;
        q.push_back(std::move(row));
    }
    return q;
}

}  // namespace

Dataset make_synthetic_linear(const ViTModel& backbone, const DatasetSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    long d = backbone.config().embed_dim;
    auto q = class_directions(spec.n_classes, d, rng);
    Dataset ds;
    ds.n_classes = spec.n_classes;
    auto emit = [&](std::vector<Tensor>& imgs, std::vector<long>& labels, long count) {
        while (static_cast<long>(imgs.size()) < count) {
            Tensor img = random_image(backbone.config(), rng);
            Tensor f = frozen_cls_feature(backbone, img);
            long best = 0;
            double s1 = -1e300, s2 = -1e300;
            for (long c = 0; c < spec.n_classes; ++c) {
                double s = 0.0;
                for (long j = 0; j < d; ++j) s += q[static_cast<std::size_t>(c)][j] * f[j];
                if (s > s1) {
                    s2 = s1;
                    s1 = s;
                    best = c;
                } else if (s > s2) {
                    s2 = s;
                }
            }
            // keep a margin so the decision boundary is learnable quickly
            if (s1 - s2 < spec.shift_strength) continue;
            imgs.push_back(std::move(img));
            labels.push_back(best);
        }
    };
    emit(ds.train_images, ds.train_labels, spec.n_train);
    emit(ds.test_images, ds.test_labels, spec.n_test);
    return ds;
}

Dataset make_synthetic_planted(const ViTModel& backbone, const DatasetSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    long d = backbone.config().embed_dim;
    auto q = class_directions(spec.n_classes, d, rng);

    // Center the tap feature over a calibration batch. Without this the
    // nonzero feature mean makes |q.(mu+v)| locally linear in v and a plain
    // linear probe can read the labels off the frozen features.
    Tensor mu = Tensor::zeros({d}, DType::F64);
    constexpr long kCalib = 32;
    for (long s = 0; s < kCalib; ++s) {
        Tensor img = random_image(backbone.config(), rng);
        Tensor f = frozen_tap_feature(backbone, img, spec.planted_block);
        for (long j = 0; j < d; ++j) mu[j] += f[j] / kCalib;
    }

    // Planted directions orthogonal to the mean, so q.u is zero-mean and the
    // rectified score sits at the natural operating point of a bias-free
    // side path.
    double mu_sq = 1e-12;
    for (long j = 0; j < d; ++j) mu_sq += mu[j] * mu[j];
    for (auto& qc : q) {
        double proj = 0.0;
        for (long j = 0; j < d; ++j) proj += qc[j] * mu[j];
        for (long j = 0; j < d; ++j) qc[j] -= proj / mu_sq * mu[j];
    }

    Dataset ds;
    ds.n_classes = spec.n_classes;
    auto emit = [&](std::vector<Tensor>& imgs, std::vector<long>& labels, long count) {
        while (static_cast<long>(imgs.size()) < count) {
            Tensor img = random_image(backbone.config(), rng);
            Tensor u = frozen_tap_feature(backbone, img, spec.planted_block);
            for (long j = 0; j < d; ++j) u[j] -= mu[j];
            long best = 0;
            double s1 = -1e300, s2 = -1e300;
            for (long c = 0; c < spec.n_classes; ++c) {
                double s = 0.0;
                for (long j = 0; j < d; ++j) s += q[static_cast<std::size_t>(c)][j] * u[j];
                // mostly even in u: the |.| part is invisible to a linear
                // readout and caps its accuracy; the small odd part gives
                // optimization a foothold
                s = std::abs(s) + spec.odd_mix * s;
                if (s > s1) {
                    s2 = s1;
                    s1 = s;
                    best = c;
                } else if (s > s2) {
                    s2 = s;
                }
            }
            if ((s1 - s2) / std::max(s1, 1e-12) < spec.shift_strength) continue;
            imgs.push_back(std::move(img));
            labels.push_back(best);
        }
    };
    emit(ds.train_images, ds.train_labels, spec.n_train);
    emit(ds.test_images, ds.test_labels, spec.n_test);
    return ds;
}

void save_image_folder(const std::string& path, const std::string& labels_csv,
                       const std::vector<Tensor>& images, const std::vector<long>& labels) {
    if (images.empty() || images.size() != labels.size())
        throw std::invalid_argument("save_image_folder: empty or mismatched sample set");
    long side = images[0].dim(1);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_image_folder: cannot open " + path);
    f.write("DTLIMG1", 7);
    std::uint32_t count = static_cast<std::uint32_t>(images.size());
    std::uint32_t s = static_cast<std::uint32_t>(side);
    f.write(reinterpret_cast<const char*>(&count), 4);
    f.write(reinterpret_cast<const char*>(&s), 4);
    for (const Tensor& img : images) {
        for (long i = 0; i < img.numel(); ++i) {
            double v = std::clamp((img[i] + 1.0) * 127.5, 0.0, 255.0);
            unsigned char b = static_cast<unsigned char>(std::lround(v));
            f.write(reinterpret_cast<const char*>(&b), 1);
        }
    }
    std::ofstream csv(labels_csv);
    if (!csv) throw std::runtime_error("save_image_folder: cannot open " + labels_csv);
    for (std::size_t i = 0; i < labels.size(); ++i)
        csv << "sample_" << i << ".rgb," << labels[i] << "\n";
}

Dataset load_image_folder(const DatasetSpec& spec, const ViTConfig& cfg) {
    std::ifstream f(spec.path, std::ios::binary);
    if (!f) throw std::runtime_error("load_image_folder: cannot open " + spec.path);
    char magic[7];
    f.read(magic, 7);
    if (std::string(magic, 7) != "DTLIMG1")
        throw std::runtime_error("load_image_folder: bad magic in " + spec.path);
    std::uint32_t count = 0, side = 0;
    f.read(reinterpret_cast<char*>(&count), 4);
    f.read(reinterpret_cast<char*>(&side), 4);
    if (static_cast<long>(side) != cfg.img)
        throw std::runtime_error("load_image_folder: side " + std::to_string(side) +
                                 " does not match model img " + std::to_string(cfg.img));
    std::vector<Tensor> images;
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor img({3, cfg.img, cfg.img}, cfg.dtype);
        for (long j = 0; j < img.numel(); ++j) {
            unsigned char b;
            if (!f.read(reinterpret_cast<char*>(&b), 1))
                throw std::runtime_error("load_image_folder: truncated sample file");
            img[j] = static_cast<double>(b) / 127.5 - 1.0;
        }
        img.quantize();
        images.push_back(std::move(img));
    }
    std::ifstream csv(spec.labels_csv);
    if (!csv) throw std::runtime_error("load_image_folder: cannot open " + spec.labels_csv);
    std::vector<long> labels;
    std::string line;
    long max_label = 0;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        auto comma = line.find_last_of(',');
        if (comma == std::string::npos)
            throw std::runtime_error("load_image_folder: bad labels line: " + line);
        long l = std::stol(line.substr(comma + 1));
        labels.push_back(l);
        max_label = std::max(max_label, l);
    }
    if (labels.size() != images.size())
        throw std::runtime_error("load_image_folder: " + std::to_string(labels.size()) +
                                 " labels for " + std::to_string(images.size()) + " samples");
    Dataset ds;
    long n_test = std::min<long>(spec.n_test, static_cast<long>(images.size()) / 4);
    long n_train = static_cast<long>(images.size()) - n_test;
    for (long i = 0; i < n_train; ++i) {
        ds.train_images.push_back(images[static_cast<std::size_t>(i)]);
        ds.train_labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    for (long i = n_train; i < static_cast<long>(images.size()); ++i) {
        ds.test_images.push_back(images[static_cast<std::size_t>(i)]);
        ds.test_labels.push_back(labels[static_cast<std::size_t>(i)]);
    }
    ds.n_classes = std::max<long>(spec.n_classes, max_label + 1);
    return ds;
}

Dataset make_dataset(const ViTModel& backbone, const DatasetSpec& spec, std::uint64_t seed) {
    switch (spec.kind) {
        case DatasetSpec::Kind::SyntheticLinear: return make_synthetic_linear(backbone, spec, seed);
        case DatasetSpec::Kind::SyntheticPlanted: return make_synthetic_planted(backbone, spec, seed);
        case DatasetSpec::Kind::ImageFolder: return load_image_folder(spec, backbone.config());
    }
    throw std::invalid_argument("make_dataset: unknown kind");
}

// ---------------------------------------------------------------------------
// loop
// ---------------------------------------------------------------------------

double evaluate(AdaptedModel& model, const std::vector<Tensor>& images,
                const std::vector<long>& labels) {
    long correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Graph g(model.backbone().config().dtype);
        g.set_inference(true);
        NodeId logits = model.forward(g, images[i]);
        const Tensor& v = g.value(logits);
        long best = 0;
        for (long c = 1; c < v.numel(); ++c)
            if (v[c] > v[best]) best = c;
        if (best == labels[i]) ++correct;
    }
    return images.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
}

History train(AdaptedModel& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train_images.empty()) throw std::invalid_argument("train: empty dataset");

    std::vector<Param*> params = model.trainable_params();
    AdamWState opt;
    Rng shuffle_rng(cfg.seed ^ 0x5eed);
    long steps_per_epoch = (static_cast<long>(data.train_images.size()) + cfg.batch_size - 1) / cfg.batch_size;
    long total_steps = steps_per_epoch * cfg.epochs;
    long step = 0;

    History hist;
    std::vector<std::size_t> order(data.train_images.size());
    std::iota(order.begin(), order.end(), 0);

    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the run RNG: deterministic given the seed
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(static_cast<long>(i)))]);

        double loss_sum = 0.0;
        long batches = 0;
        for (long b0 = 0; b0 < static_cast<long>(order.size()); b0 += cfg.batch_size) {
            long b1 = std::min<long>(b0 + cfg.batch_size, static_cast<long>(order.size()));
            std::vector<Tensor> images;
            std::vector<long> labels;
            for (long i = b0; i < b1; ++i) {
                images.push_back(data.train_images[order[static_cast<std::size_t>(i)]]);
                labels.push_back(data.train_labels[order[static_cast<std::size_t>(i)]]);
            }
            Graph g(model.backbone().config().dtype);
            NodeId loss = record_batch_loss(model, g, images, labels);
            if (cfg.inject_nan) loss = g.scale(loss, std::nan(""));
            GradStore grads = g.backward(loss);
            double lr = cosine_lr(step, total_steps, cfg);
            adamw_step(params, grads, opt, lr, cfg);
            loss_sum += g.value(loss)[0];
            ++batches;
            ++step;
        }

        EpochRecord rec;
        rec.train_loss = loss_sum / static_cast<double>(batches);
        rec.test_accuracy = evaluate(model, data.test_images, data.test_labels);
        rec.lr = cosine_lr(step - 1, total_steps, cfg);
        hist.epochs.push_back(rec);
        if (rec.test_accuracy > hist.best_accuracy || hist.best_epoch < 0) {
            hist.best_accuracy = rec.test_accuracy;
            hist.best_epoch = epoch;
            if (!cfg.checkpoint_path.empty()) {
                ParamStore snapshot;
                for (Param* p : params) snapshot.add(p->name, p->tensor.clone(), true);
                save_weights(snapshot, cfg.checkpoint_path);
            }
        }
    }
    return hist;
}

std::string history_csv(const History& h) {
    std::ostringstream os;
    os << "epoch,train_loss,test_accuracy,lr\n";
    for (std::size_t i = 0; i < h.epochs.size(); ++i)
        os << i << "," << h.epochs[i].train_loss << "," << h.epochs[i].test_accuracy << ","
           << h.epochs[i].lr << "\n";
    return os.str();
}

}  // namespace dtl
