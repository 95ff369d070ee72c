#pragma once

// Fold plans, rotation augmentation, the Adam training loop with plateau
// learning-rate drops and early stopping, and k-fold cross-validation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/adam.hpp"
#include "ctseg/cascade.hpp"
#include "ctseg/metrics.hpp"
#include "ctseg/models.hpp"
#include "ctseg/parallel.hpp"

namespace ctseg {

struct Fold {
    std::vector<std::size_t> train, val, test;
};

struct FoldPlan {
    std::size_t n = 0;
    std::size_t k = 0;
    std::vector<Fold> folds;
};

inline void to_json(nlohmann::json& j, const Fold& f) {
    j = nlohmann::json{{"train", f.train}, {"val", f.val}, {"test", f.test}};
}

namespace detail {

inline std::size_t rounded_count(double frac, std::size_t pool) {
    return static_cast<std::size_t>(std::llround(frac * static_cast<double>(pool)));
}

}  // namespace detail

inline FoldPlan make_folds(std::size_t n, std::size_t k, double val_frac, std::uint64_t seed) {
    require(k >= 2 && n >= k, ErrorCode::TooFewItems, "k-fold needs n >= k >= 2");
    require(val_frac > 0.0 && val_frac < 1.0, ErrorCode::InvalidArgument, "val_frac must lie in (0,1)");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    FoldPlan plan{n, k, {}};
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t len = n / k + (f < n % k ? 1 : 0);
        Fold fold;
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < n; ++i)
            (i >= start && i < start + len ? fold.test : pool).push_back(perm[i]);
        const std::size_t nval = detail::rounded_count(val_frac, pool.size());
        fold.val.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nval));
        fold.train.assign(pool.begin() + static_cast<std::ptrdiff_t>(nval), pool.end());
        for (auto* v : {&fold.train, &fold.val, &fold.test}) std::sort(v->begin(), v->end());
        plan.folds.push_back(std::move(fold));
        start += len;
    }
    return plan;
}

/// Folds over groups (e.g. one group per volume) so that no group is split
/// across train, val and test. Test chunks balance group counts.
inline FoldPlan make_group_folds(const std::vector<std::int64_t>& groups, std::size_t k, double val_frac,
                                 std::uint64_t seed) {
    std::vector<std::int64_t> ids(groups);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    require(k >= 2 && ids.size() >= k, ErrorCode::TooFewItems, "group k-fold needs at least k distinct groups");
    const FoldPlan by_group = make_folds(ids.size(), k, val_frac, seed);
    std::map<std::int64_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);

    FoldPlan plan{groups.size(), k, {}};
    for (const auto& gf : by_group.folds) {
        Fold fold;
        auto expand = [&](const std::vector<std::size_t>& gidx, std::vector<std::size_t>& out) {
            for (std::size_t g : gidx)
                for (std::size_t i : members[ids[g]]) out.push_back(i);
            std::sort(out.begin(), out.end());
        };
        expand(gf.train, fold.train);
        expand(gf.val, fold.val);
        expand(gf.test, fold.test);
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

/// Single train/val/test split used when only one fold is requested.
inline FoldPlan make_holdout(std::size_t n, double test_frac, double val_frac, std::uint64_t seed) {
    require(n >= 3, ErrorCode::TooFewItems, "holdout split needs at least 3 items");
    require(test_frac > 0.0 && test_frac < 1.0 && val_frac > 0.0 && val_frac < 1.0, ErrorCode::InvalidArgument,
            "split fractions must lie in (0,1)");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t ntest = std::clamp<std::size_t>(detail::rounded_count(test_frac, n), 1, n - 2);
    const std::size_t pool = n - ntest;
    const std::size_t nval = std::clamp<std::size_t>(detail::rounded_count(val_frac, pool), 1, pool - 1);
    Fold fold;
    fold.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(ntest));
    fold.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(ntest),
                    perm.begin() + static_cast<std::ptrdiff_t>(ntest + nval));
    fold.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(ntest + nval), perm.end());
    for (auto* v : {&fold.train, &fold.val, &fold.test}) std::sort(v->begin(), v->end());
    return {n, 1, {std::move(fold)}};
}

struct SlicePair {
    NormalizedSlice image;
    BinaryMask mask;
};

/// Counter-clockwise quarter turns (negative turns rotate clockwise).
template <typename Tag>
Image2D<Tag> rotate90(const Image2D<Tag>& in, int quarter_turns) {
    require(in.width == in.height, ErrorCode::NonSquareInput, "rotation needs a square image");
    const int turns = ((quarter_turns % 4) + 4) % 4;
    const int n = in.width;
    Image2D<Tag> out = in;
    for (int t = 0; t < turns; ++t) {
        const Image2D<Tag> src = out;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) out.at(x, y) = src.at(n - 1 - y, x);
    }
    return out;
}

/// Original, +90, -90 and 180 degree copies of every pair, in that order.
inline std::vector<SlicePair> augment(std::span<const SlicePair> samples) {
    std::vector<SlicePair> out;
    out.reserve(samples.size() * 4);
    for (const auto& s : samples) {
        require(s.image.width == s.image.height && s.mask.width == s.mask.height, ErrorCode::NonSquareInput,
                "augmentation needs square slices");
        require(s.image.same_dims(s.mask), ErrorCode::ShapeMismatch, "image and mask dims differ");
        for (int turns : {0, 1, -1, 2}) out.push_back({rotate90(s.image, turns), rotate90(s.mask, turns)});
    }
    return out;
}

enum class Task { lung, lesion };

inline std::string to_string(Task t) { return t == Task::lung ? "lung" : "lesion"; }

inline Task parse_task(const std::string& s) {
    if (s == "lung") return Task::lung;
    if (s == "lesion") return Task::lesion;
    fail(ErrorCode::InvalidConfig, "task must be 'lung' or 'lesion', got '" + s + "'");
}

/// Training pairs for every axial slice. Lesion pairs use the lung-masked
/// slice as input, matching what the cascade feeds the lesion model.
inline std::vector<SlicePair> make_slice_pairs(const Volume& volume, const MaskVolume& lung, const MaskVolume& lesion,
                                               Task task, const WindowSpec& window, int size) {
    require(volume.dims == lung.dims && volume.dims == lesion.dims, ErrorCode::ShapeMismatch,
            "volume and mask dims differ");
    std::vector<SlicePair> out;
    out.reserve(volume.dims.nz);
    for (std::size_t z = 0; z < volume.dims.nz; ++z) {
        auto image = resize_slice(window_normalize(volume, window, z), size, ResizeMode::bilinear);
        auto lung_mask = resize_slice(mask_slice(lung, z), size, ResizeMode::nearest);
        if (task == Task::lung) {
            out.push_back({std::move(image), std::move(lung_mask)});
        } else {
            auto lesion_mask = intersect(resize_slice(mask_slice(lesion, z), size, ResizeMode::nearest), lung_mask);
            out.push_back({apply_lung_mask(image, lung_mask), std::move(lesion_mask)});
        }
    }
    return out;
}

struct TrainConfig {
    std::size_t batch_size = 4;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::size_t max_epochs = 50;
    double lr_drop_factor = 0.2;
    std::size_t lr_patience = 5;
    std::size_t stop_patience = 10;
    double min_improvement = 1e-6;
    std::uint64_t seed = 0;

    void validate() const {
        require(batch_size >= 1 && max_epochs >= 1 && lr_patience >= 1 && stop_patience >= 1,
                ErrorCode::InvalidConfig, "batch_size, max_epochs and patience values must be positive");
        require(lr > 0.0 && std::isfinite(lr), ErrorCode::InvalidConfig, "lr must be positive");
        require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorCode::InvalidConfig,
                "Adam betas must lie in (0,1)");
        require(lr_drop_factor > 0.0 && lr_drop_factor < 1.0, ErrorCode::InvalidConfig,
                "lr_drop_factor must lie in (0,1)");
        require(min_improvement >= 0.0, ErrorCode::InvalidConfig, "min_improvement must be non-negative");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},         {"lr", c.lr},
                       {"beta1", c.beta1},                   {"beta2", c.beta2},
                       {"max_epochs", c.max_epochs},         {"lr_drop_factor", c.lr_drop_factor},
                       {"lr_patience", c.lr_patience},       {"stop_patience", c.stop_patience},
                       {"min_improvement", c.min_improvement}, {"seed", c.seed}};
}

enum class StopReason { max_epochs, early_stop };

inline std::string to_string(StopReason r) { return r == StopReason::max_epochs ? "max_epochs" : "early_stop"; }

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EpochRecord, epoch, train_loss, val_loss, lr)

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    StopReason stop_reason = StopReason::max_epochs;
};

inline void to_json(nlohmann::json& j, const TrainHistory& h) {
    j = nlohmann::json{{"epochs", h.epochs},
                       {"best_epoch", h.best_epoch},
                       {"best_val_loss", h.best_val_loss},
                       {"stop_reason", to_string(h.stop_reason)}};
}

/// Validation-loss plateau tracking with one shared non-improvement counter:
/// the lr drops every lr_patience stale epochs and training stops at
/// stop_patience.
class PlateauMonitor {
public:
    enum class Action { improved, wait, drop_lr, stop };

    explicit PlateauMonitor(const TrainConfig& cfg)
        : lr_patience_(cfg.lr_patience), stop_patience_(cfg.stop_patience), min_improvement_(cfg.min_improvement) {}

    Action update(double val_loss) {
        if (val_loss < best_ - min_improvement_) {
            best_ = val_loss;
            stale_ = 0;
            return Action::improved;
        }
        ++stale_;
        if (stale_ >= stop_patience_) return Action::stop;
        if (stale_ % lr_patience_ == 0) return Action::drop_lr;
        return Action::wait;
    }

    [[nodiscard]] double best() const { return best_; }
    [[nodiscard]] std::size_t stale_epochs() const { return stale_; }

private:
    std::size_t lr_patience_, stop_patience_;
    double min_improvement_;
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t stale_ = 0;
};

namespace detail {

template <typename T>
std::pair<Tensor<T>, std::vector<std::uint8_t>> make_batch(std::span<const SlicePair> data,
                                                           std::span<const std::size_t> idx) {
    std::vector<NormalizedSlice> images;
    std::vector<std::uint8_t> labels;
    images.reserve(idx.size());
    for (std::size_t i : idx) {
        images.push_back(data[i].image);
        require(data[i].mask.same_dims(data[i].image), ErrorCode::ShapeMismatch, "image and mask dims differ");
        labels.insert(labels.end(), data[i].mask.pixels.begin(), data[i].mask.pixels.end());
    }
    return {slices_to_tensor<T>(images), std::move(labels)};
}

}  // namespace detail

/// Mean per-pixel cross-entropy of the eval-mode model over a set.
template <typename T>
double evaluate_loss(const Model<T>& model, std::span<const SlicePair> data, std::size_t batch_size = 16) {
    require(!data.empty(), ErrorCode::EmptyDataset, "loss evaluation needs data");
    ad::NoGradGuard guard;
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    double total = 0;
    std::size_t pixels = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch_size) {
        const auto chunk = std::span<const std::size_t>(idx).subspan(start, std::min(batch_size, idx.size() - start));
        auto [x, labels] = detail::make_batch<T>(data, chunk);
        const auto logits = model.eval_logits(x);
        total += static_cast<double>(ad::cross_entropy_with_logits(logits, labels).item()) * labels.size();
        pixels += labels.size();
    }
    return total / static_cast<double>(pixels);
}

/// Pixel confusion of eval-mode predictions against the pair masks.
template <typename T>
ConfusionMatrix evaluate_confusion(const Model<T>& model, std::span<const SlicePair> data) {
    std::vector<NormalizedSlice> images;
    images.reserve(data.size());
    for (const auto& p : data) images.push_back(p.image);
    const auto preds = predict_masks(model, std::span<const NormalizedSlice>(images));
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < data.size(); ++i) cm += pixel_confusion(preds[i], data[i].mask);
    return cm;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place and leaves the model holding its best-validation-loss
/// weights, in eval mode.
template <typename T>
TrainHistory train(Model<T>& model, std::span<const SlicePair> train_set, std::span<const SlicePair> val_set,
                   const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    require(!train_set.empty(), ErrorCode::EmptyDataset, "training set is empty");
    require(!val_set.empty(), ErrorCode::EmptyDataset, "validation set is empty");

    ad::Adam<T> adam(model.parameters(), {cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
    PlateauMonitor monitor(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    TrainHistory history;
    std::vector<ad::NamedArray> best_state = model.state();
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        model.set_training(true);
        double loss_sum = 0;
        std::size_t pixel_count = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const auto chunk =
                std::span<const std::size_t>(order).subspan(start, std::min(cfg.batch_size, order.size() - start));
            auto [x, labels] = detail::make_batch<T>(train_set, chunk);
            adam.zero_grad();
            const auto loss = ad::cross_entropy_with_logits(model.forward_logits(x), labels);
            ad::backward(loss);
            adam.step();
            loss_sum += static_cast<double>(loss.item()) * labels.size();
            pixel_count += labels.size();
        }
        model.set_training(false);
        EpochRecord rec{epoch, loss_sum / static_cast<double>(pixel_count), evaluate_loss(model, val_set),
                        adam.lr()};
        history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);

        const auto action = monitor.update(rec.val_loss);
        if (action == PlateauMonitor::Action::improved) {
            history.best_epoch = epoch;
            history.best_val_loss = rec.val_loss;
            best_state = model.state();
        } else if (action == PlateauMonitor::Action::drop_lr) {
            adam.set_lr(adam.lr() * cfg.lr_drop_factor);
        } else if (action == PlateauMonitor::Action::stop) {
            history.stop_reason = StopReason::early_stop;
            break;
        }
    }
    model.load_state(best_state);
    model.set_training(false);
    return history;
}

template <typename T>
struct FoldResult {
    Model<T> model;
    TrainHistory history;
    ConfusionMatrix test_confusion;
};

template <typename T>
struct CrossValidationResult {
    std::vector<FoldResult<T>> folds;
    ConfusionMatrix pooled;
};

struct CrossValidationOptions {
    bool augment_train = true;
    int jobs = 1;
};

inline void validate_plan(const FoldPlan& plan, std::size_t n) {
    require(plan.n == n, ErrorCode::PlanMismatch,
            "fold plan covers " + std::to_string(plan.n) + " items, dataset has " + std::to_string(n));
    require(!plan.folds.empty(), ErrorCode::PlanMismatch, "fold plan has no folds");
    for (const auto& f : plan.folds)
        for (const auto* v : {&f.train, &f.val, &f.test})
            for (std::size_t i : *v) require(i < n, ErrorCode::PlanMismatch, "fold index out of range");
}

/// One fresh model per fold (seeded cfg.seed + fold), trained on the
/// augmented train split and scored on the untouched test split. Folds are
/// independent, so `jobs` does not change results.
template <typename T = float>
CrossValidationResult<T> cross_validate(std::span<const SlicePair> data, const ModelConfig& model_cfg,
                                        const TrainConfig& train_cfg, const FoldPlan& plan,
                                        const CrossValidationOptions& opts = {}) {
    validate_plan(plan, data.size());
    model_cfg.validate();
    train_cfg.validate();
    std::vector<std::optional<FoldResult<T>>> slots(plan.folds.size());
    parallel_for(plan.folds.size(), opts.jobs, [&](std::size_t f) {
        const Fold& fold = plan.folds[f];
        auto gather = [&](const std::vector<std::size_t>& idx) {
            std::vector<SlicePair> out;
            out.reserve(idx.size());
            for (std::size_t i : idx) out.push_back(data[i]);
            return out;
        };
        auto train_set = gather(fold.train);
        if (opts.augment_train) train_set = augment(train_set);
        const auto val_set = gather(fold.val);
        const auto test_set = gather(fold.test);
        TrainConfig cfg = train_cfg;
        cfg.seed = train_cfg.seed + f;
        Model<T> model(model_cfg, cfg.seed);
        auto history = train(model, std::span<const SlicePair>(train_set), val_set, cfg);
        const auto cm = evaluate_confusion(model, std::span<const SlicePair>(test_set));
        slots[f].emplace(FoldResult<T>{std::move(model), std::move(history), cm});
    });
    CrossValidationResult<T> result;
    for (auto& s : slots) {
        result.pooled += s->test_confusion;
        result.folds.push_back(std::move(*s));
    }
    return result;
}

}  // namespace ctseg
