// ctseg: phantom generation, training, evaluation, inference, severity
// grading and mesh export from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctseg/ctseg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctseg;

namespace {

constexpr int kSchemaVersion = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

// Flat JSON object of option values for the chosen subcommand; keys may use
// '_' or '-'.
class JsonConfig : public CLI::Config {
public:
    explicit JsonConfig(std::string subcommand) : subcommand_(std::move(subcommand)) {}

    std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
        json j = json::object();
        for (const CLI::Option* opt : app->get_options()) {
            if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
            const auto results = opt->results();
            if (!results.empty())
                j[opt->get_lnames().front()] = results.size() == 1 ? json(results.front()) : json(results);
            else if (default_also && !opt->get_default_str().empty())
                j[opt->get_lnames().front()] = opt->get_default_str();
        }
        return j.dump(2);
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            j = json::parse(input);
        } catch (const json::exception& e) {
            throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            CLI::ConfigItem item;
            item.name = key;
            if (!subcommand_.empty()) item.parents = {subcommand_};
            std::replace(item.name.begin(), item.name.end(), '_', '-');
            auto scalar = [&](const json& v) -> std::string {
                if (v.is_string()) return v.get<std::string>();
                if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
                if (v.is_number()) return v.dump();
                throw CLI::ConversionError("config key '" + key + "' has an unsupported value");
            };
            if (value.is_array())
                for (const auto& v : value) item.inputs.push_back(scalar(v));
            else
                item.inputs.push_back(scalar(value));
            items.push_back(std::move(item));
        }
        return items;
    }

private:
    std::string subcommand_;
};

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidConfig:
        case ErrorCode::InvalidSpec:
        case ErrorCode::InvalidArgument:
        case ErrorCode::TooFewItems: return kExitConfig;
        case ErrorCode::BadMagic:
        case ErrorCode::TruncatedPayload:
        case ErrorCode::InvalidSpacing:
        case ErrorCode::InvalidDims:
        case ErrorCode::IoFailure:
        case ErrorCode::MalformedHeader:
        case ErrorCode::UnsupportedMaxval:
        case ErrorCode::NonSquareInput:
        case ErrorCode::EmptyDataset:
        case ErrorCode::PlanMismatch:
        case ErrorCode::SubsetViolation:
        case ErrorCode::ShapeMismatch: return kExitData;
        default: return kExitRuntime;
    }
}

void report_error(const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

void log_line(const std::string& line) {
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::cerr << line << "\n";
}

void emit(const json& report, const std::string& out_path) {
    const std::string text = report.dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path);
    if (!out || !(out << text)) fail(ErrorCode::IoFailure, "cannot write report " + out_path);
}

json window_json(const WindowSpec& w) { return {{"lo", w.lo}, {"hi", w.hi}}; }

// A checkpoint travels with a sidecar <path>.json describing how to rebuild
// and feed the model.
struct StoredModel {
    Model<float> model;
    Task task;
    WindowSpec window;
};

fs::path sidecar_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".json"); }

void save_model(const Model<float>& model, Task task, const WindowSpec& window, const fs::path& path) {
    ad::save_checkpoint(model.state(), path);
    const json meta{{"schema_version", kSchemaVersion},
                    {"task", to_string(task)},
                    {"model", model.config()},
                    {"window", window_json(window)},
                    {"seed", model.seed()}};
    std::ofstream out(sidecar_path(path));
    if (!out || !(out << meta.dump(2) << "\n")) fail(ErrorCode::IoFailure, "cannot write " + sidecar_path(path).string());
}

StoredModel load_model(const fs::path& path) {
    std::ifstream in(sidecar_path(path));
    if (!in) fail(ErrorCode::IoFailure, "missing model sidecar " + sidecar_path(path).string());
    json meta;
    try {
        meta = json::parse(in);
        ModelConfig cfg = meta.at("model").get<ModelConfig>();
        StoredModel m{Model<float>(cfg, meta.at("seed").get<std::uint64_t>()), parse_task(meta.at("task")),
                      WindowSpec{meta.at("window").at("lo"), meta.at("window").at("hi")}};
        m.model.load_state(ad::load_checkpoint(path));
        m.model.set_training(false);
        return m;
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedHeader, sidecar_path(path).string() + ": " + e.what());
    }
}

struct LoadedVolume {
    std::string volume_path;
    Volume volume;
    MaskVolume lung;
    MaskVolume lesion;
    std::optional<std::int64_t> group_id;
};

std::vector<LoadedVolume> load_manifest_volumes(const fs::path& manifest_path) {
    const Manifest manifest = read_manifest(manifest_path);
    require(!manifest.empty(), ErrorCode::EmptyDataset, "manifest lists no volumes");
    std::vector<LoadedVolume> out;
    for (const auto& e : manifest)
        out.push_back({e.volume_path, load_volume(resolve(manifest_path, e.volume_path)),
                       load_mask_volume(resolve(manifest_path, e.lung_mask_path)),
                       load_mask_volume(resolve(manifest_path, e.lesion_mask_path)), e.group_id});
    return out;
}

std::vector<double> parse_pi_list(const std::vector<std::string>& raw) {
    std::vector<double> out;
    for (const auto& s : raw) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(s, &used));
            if (used != s.size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidConfig, "PI value '" + s + "' is not a number");
        }
    }
    return out;
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
    std::string out;
    std::size_t count = 5;
    std::vector<std::string> pi{"0", "10", "30", "60", "90"};
    std::uint64_t seed = 0;
    std::vector<std::uint32_t> dims{64, 64, 16};
    std::vector<double> spacing{1.0, 1.0, 2.0};
    std::vector<int> lesions{2, 6};
    double noise = 20.0;
    int jobs = 1;
};

void add_phantom(CLI::App& app, PhantomArgs& a) {
    app.add_option("--out", a.out, "Output directory")->required();
    app.add_option("--count", a.count, "Number of volumes")->capture_default_str();
    app.add_option("--pi", a.pi, "Target infection percentages, cycled over samples")
        ->delimiter(',')
        ->capture_default_str();
    app.add_option("--seed", a.seed, "Base seed; sample i uses seed+i")->capture_default_str();
    app.add_option("--dims", a.dims, "Volume dims nx,ny,nz")->delimiter(',')->expected(3)->capture_default_str();
    app.add_option("--spacing", a.spacing, "Voxel spacing sx,sy,sz in mm")
        ->delimiter(',')
        ->expected(3)
        ->capture_default_str();
    app.add_option("--lesions", a.lesions, "Lesion blob count range min,max")
        ->delimiter(',')
        ->expected(2)
        ->capture_default_str();
    app.add_option("--noise", a.noise, "Gaussian HU noise sigma")->capture_default_str();
    app.add_option("--jobs", a.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

void run_phantom(const PhantomArgs& a) {
    PhantomSpec templ;
    templ.dims = {a.dims[0], a.dims[1], a.dims[2]};
    templ.spacing = {a.spacing[0], a.spacing[1], a.spacing[2]};
    templ.min_lesions = a.lesions[0];
    templ.max_lesions = a.lesions[1];
    templ.noise_sigma = a.noise;
    const auto pis = parse_pi_list(a.pi);
    const Manifest manifest = generate_dataset(a.count, pis, templ, a.seed, a.out, a.jobs);
    log_line("[phantom] wrote " + std::to_string(manifest.size()) + " volumes to " + a.out);
    json summary{{"schema_version", kSchemaVersion},
                 {"command", "phantom"},
                 {"manifest", (fs::path(a.out) / "manifest.json").string()},
                 {"count", manifest.size()},
                 {"realized_pi", json::array()}};
    for (const auto& e : manifest) summary["realized_pi"].push_back(e.realized_pi);
    emit(summary, "");
}

// ---------------------------------------------------------------- train

struct WindowArgs {
    double lo = WindowSpec{}.lo;
    double hi = WindowSpec{}.hi;
    [[nodiscard]] WindowSpec spec() const { return {lo, hi}; }
};

void add_window(CLI::App& app, WindowArgs& w) {
    app.add_option("--window-lo", w.lo, "HU window lower bound")->capture_default_str();
    app.add_option("--window-hi", w.hi, "HU window upper bound")->capture_default_str();
}

struct TrainArgs {
    std::string manifest, out, report, task, split = "slice";
    std::string arch = "unet", encoder = "plain";
    ModelConfig model;
    TrainConfig train;
    std::size_t folds = 0;
    double val_frac = 0.2, test_frac = 0.2;
    bool no_augment = false, verbose = false;
    WindowArgs window;
    int jobs = 1;
};

void add_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--manifest", a.manifest, "Dataset manifest.json")->required();
    app.add_option("--task", a.task, "Segmentation task")->required()->check(CLI::IsMember({"lung", "lesion"}));
    app.add_option("--out", a.out, "Directory for checkpoints and the report")->required();
    app.add_option("--report", a.report, "Report path (default <out>/train_report.json)");
    app.add_option("--arch", a.arch, "Decoder: unet or fpn")->capture_default_str();
    app.add_option("--encoder", a.encoder, "Encoder: plain, residual or dense")->capture_default_str();
    app.add_option("--depth", a.model.depth, "Encoder depth")->capture_default_str();
    app.add_option("--base-channels", a.model.base_channels, "Channels of the first stage")->capture_default_str();
    app.add_option("--growth-rate", a.model.growth_rate, "Dense block growth rate")->capture_default_str();
    app.add_option("--dense-layers", a.model.dense_layers, "Layers per dense block")->capture_default_str();
    app.add_option("--pyramid-channels", a.model.pyramid_channels, "FPN lateral width")->capture_default_str();
    app.add_option("--input-size", a.model.input_size, "Square model input size")->capture_default_str();
    app.add_option("--folds", a.folds, "Fold count; 1 = holdout, 0 = 5 for lung / 10 for lesion")
        ->capture_default_str();
    app.add_option("--val-frac", a.val_frac, "Validation share of each training pool")->capture_default_str();
    app.add_option("--test-frac", a.test_frac, "Test share for the holdout split")->capture_default_str();
    app.add_option("--split", a.split, "Fold unit: slice, or volume (honours group_id)")
        ->capture_default_str()
        ->check(CLI::IsMember({"slice", "volume"}));
    app.add_option("--batch-size", a.train.batch_size, "Minibatch size")->capture_default_str();
    app.add_option("--lr", a.train.lr, "Initial learning rate")->capture_default_str();
    app.add_option("--beta1", a.train.beta1, "Adam beta1")->capture_default_str();
    app.add_option("--beta2", a.train.beta2, "Adam beta2")->capture_default_str();
    app.add_option("--max-epochs", a.train.max_epochs, "Epoch limit")->capture_default_str();
    app.add_option("--lr-drop-factor", a.train.lr_drop_factor, "Plateau lr multiplier")->capture_default_str();
    app.add_option("--lr-patience", a.train.lr_patience, "Stale epochs before an lr drop")->capture_default_str();
    app.add_option("--stop-patience", a.train.stop_patience, "Stale epochs before stopping")->capture_default_str();
    app.add_option("--min-improvement", a.train.min_improvement, "Required val-loss decrease")
        ->capture_default_str();
    app.add_option("--seed", a.train.seed, "Seed for folds, init and shuffling")->capture_default_str();
    app.add_flag("--no-augment", a.no_augment, "Skip rotation augmentation");
    app.add_flag("--verbose", a.verbose, "Log every epoch to stderr");
    add_window(app, a.window);
    app.add_option("--jobs", a.jobs, "Folds trained in parallel")->capture_default_str()->check(CLI::PositiveNumber);
}

FoldPlan holdout_over_groups(const std::vector<std::int64_t>& groups, double test_frac, double val_frac,
                             std::uint64_t seed) {
    std::vector<std::int64_t> ids(groups);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    const FoldPlan g = make_holdout(ids.size(), test_frac, val_frac, seed);
    Fold fold;
    auto expand = [&](const std::vector<std::size_t>& gidx, std::vector<std::size_t>& out) {
        for (std::size_t gi : gidx)
            for (std::size_t i = 0; i < groups.size(); ++i)
                if (groups[i] == ids[gi]) out.push_back(i);
        std::sort(out.begin(), out.end());
    };
    expand(g.folds[0].train, fold.train);
    expand(g.folds[0].val, fold.val);
    expand(g.folds[0].test, fold.test);
    return {groups.size(), 1, {std::move(fold)}};
}

void run_train(TrainArgs a) {
    const Task task = parse_task(a.task);
    a.model.arch = parse_arch(a.arch);
    a.model.encoder = parse_encoder(a.encoder);
    a.model.validate();
    a.train.validate();
    const WindowSpec window = a.window.spec();
    window.validate();
    const std::size_t folds = a.folds ? a.folds : (task == Task::lung ? 5 : 10);

    const auto volumes = load_manifest_volumes(a.manifest);
    std::vector<SlicePair> pairs;
    std::vector<std::int64_t> groups;
    for (std::size_t v = 0; v < volumes.size(); ++v) {
        auto p = make_slice_pairs(volumes[v].volume, volumes[v].lung, volumes[v].lesion, task, window,
                                  a.model.input_size);
        const std::int64_t g = volumes[v].group_id.value_or(static_cast<std::int64_t>(v));
        groups.insert(groups.end(), p.size(), g);
        std::move(p.begin(), p.end(), std::back_inserter(pairs));
    }

    FoldPlan plan;
    if (a.split == "volume")
        plan = folds == 1 ? holdout_over_groups(groups, a.test_frac, a.val_frac, a.train.seed)
                          : make_group_folds(groups, folds, a.val_frac, a.train.seed);
    else
        plan = folds == 1 ? make_holdout(pairs.size(), a.test_frac, a.val_frac, a.train.seed)
                          : make_folds(pairs.size(), folds, a.val_frac, a.train.seed);

    log_line("[train] task=" + to_string(task) + " slices=" + std::to_string(pairs.size()) +
             " folds=" + std::to_string(plan.folds.size()) + " arch=" + to_string(a.model.arch) +
             " encoder=" + to_string(a.model.encoder));
    const auto cv = cross_validate<float>(pairs, a.model, a.train, plan, {!a.no_augment, a.jobs});

    fs::create_directories(a.out);
    json fold_reports = json::array();
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "fold_%02zu.ckpt", f);
        const fs::path ckpt = fs::path(a.out) / name;
        save_model(cv.folds[f].model, task, window, ckpt);
        const auto& h = cv.folds[f].history;
        if (a.verbose)
            for (const auto& e : h.epochs)
                log_line("[train] fold " + std::to_string(f) + " epoch " + std::to_string(e.epoch) +
                         " train_loss=" + std::to_string(e.train_loss) + " val_loss=" + std::to_string(e.val_loss));
        fold_reports.push_back({{"fold", f},
                                {"checkpoint", ckpt.string()},
                                {"train_items", plan.folds[f].train.size()},
                                {"val_items", plan.folds[f].val.size()},
                                {"test_items", plan.folds[f].test.size()},
                                {"history", h},
                                {"test_confusion", cv.folds[f].test_confusion},
                                {"test_metrics", segmentation_metrics_json(cv.folds[f].test_confusion)}});
    }
    json report{{"schema_version", kSchemaVersion},
                {"command", "train"},
                {"config",
                 {{"task", to_string(task)},
                  {"model", a.model},
                  {"train", a.train},
                  {"folds", folds},
                  {"split", a.split},
                  {"val_frac", a.val_frac},
                  {"test_frac", a.test_frac},
                  {"augment", !a.no_augment},
                  {"window", window_json(window)},
                  {"manifest", a.manifest}}},
                {"folds", fold_reports},
                {"pooled_confusion", cv.pooled},
                {"pooled_metrics", segmentation_metrics_json(cv.pooled)}};
    emit(report, a.report.empty() ? (fs::path(a.out) / "train_report.json").string() : a.report);
    log_line("[train] pooled DSC " + std::to_string(dsc(cv.pooled)));
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string manifest, model, lung_model, task, out;
    bool oracle = false;
    int jobs = 1;
    int input_size = 64;
    WindowArgs window;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a) {
    app.add_option("--manifest", a.manifest, "Dataset manifest.json")->required();
    app.add_option("--model", a.model, "Checkpoint to evaluate");
    app.add_option("--lung-model", a.lung_model, "Lung checkpoint masking lesion inputs (default: true lung)");
    app.add_flag("--oracle", a.oracle, "Use ground truth as predictions");
    app.add_option("--task", a.task, "Task for --oracle runs")->check(CLI::IsMember({"lung", "lesion"}));
    app.add_option("--input-size", a.input_size, "Slice size for --oracle runs")->capture_default_str();
    add_window(app, a.window);
    app.add_option("--out", a.out, "Report path (default stdout)");
    app.add_option("--jobs", a.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

void run_evaluate(const EvaluateArgs& a) {
    require(a.oracle != !a.model.empty(), ErrorCode::InvalidConfig, "give exactly one of --model or --oracle");
    std::optional<StoredModel> model, lung_model;
    Task task;
    WindowSpec window = a.window.spec();
    int size = a.input_size;
    if (a.oracle) {
        require(!a.task.empty(), ErrorCode::InvalidConfig, "--oracle needs --task");
        task = parse_task(a.task);
    } else {
        model.emplace(load_model(a.model));
        task = model->task;
        window = model->window;
        size = model->model.config().input_size;
    }
    if (!a.lung_model.empty()) {
        lung_model.emplace(load_model(a.lung_model));
        require(task == Task::lesion, ErrorCode::InvalidConfig, "--lung-model only applies to lesion models");
        require(lung_model->model.config().input_size == size, ErrorCode::InvalidConfig,
                "lung and lesion models use different input sizes");
    }
    window.validate();

    const auto volumes = load_manifest_volumes(a.manifest);
    ConfusionMatrix pixel, slice;
    std::size_t slices = 0;
    for (const auto& v : volumes) {
        const auto truth_pairs = make_slice_pairs(v.volume, v.lung, v.lesion, task, window, size);
        std::vector<BinaryMask> preds(truth_pairs.size());
        parallel_for(truth_pairs.size(), a.jobs, [&](std::size_t z) {
            if (a.oracle) {
                preds[z] = truth_pairs[z].mask;
                return;
            }
            NormalizedSlice input = truth_pairs[z].image;
            std::optional<BinaryMask> lung;
            if (lung_model) {
                input = resize_slice(window_normalize(v.volume, window, z), size, ResizeMode::bilinear);
                lung = predict_mask(lung_model->model, input);
                input = apply_lung_mask(input, *lung);
            }
            preds[z] = predict_mask(model->model, input);
            if (lung) preds[z] = intersect(preds[z], *lung);
        });
        for (std::size_t z = 0; z < preds.size(); ++z) {
            pixel += pixel_confusion(preds[z], truth_pairs[z].mask);
            slice.add(count_foreground(preds[z]) > 0, count_foreground(truth_pairs[z].mask) > 0);
        }
        slices += preds.size();
    }
    json report{{"schema_version", kSchemaVersion},
                {"command", "evaluate"},
                {"task", to_string(task)},
                {"model", a.oracle ? json("oracle") : json(a.model)},
                {"volumes", volumes.size()},
                {"slices", slices},
                {"pixel", {{"confusion", pixel}, {"metrics", segmentation_metrics_json(pixel)}}},
                {"slice", {{"confusion", slice}, {"metrics", detection_metrics_json(slice)}}}};
    emit(report, a.out);
}

// ---------------------------------------------------------------- cascade helpers

struct CascadeArgs {
    std::string lung_model, lesion_model, policy = "lung_slices_only";
    bool oracle = false;
    int jobs = 1;
    int input_size = 64;
    WindowArgs window;
};

void add_cascade(CLI::App& app, CascadeArgs& a, bool allow_oracle) {
    app.add_option("--lung-model", a.lung_model, "Lung checkpoint");
    app.add_option("--lesion-model", a.lesion_model, "Lesion checkpoint");
    app.add_option("--policy", a.policy, "PI averaging: lung_slices_only or all_slices")
        ->capture_default_str()
        ->check(CLI::IsMember({"lung_slices_only", "all_slices"}));
    if (allow_oracle) {
        app.add_flag("--oracle", a.oracle, "Use manifest ground truth instead of models");
        app.add_option("--input-size", a.input_size, "Slice size for --oracle runs")->capture_default_str();
        add_window(app, a.window);
    }
    app.add_option("--jobs", a.jobs, "Slice-parallel workers")->capture_default_str()->check(CLI::PositiveNumber);
}

struct CascadeModels {
    std::optional<StoredModel> lung, lesion;
    WindowSpec window;
    int size = 64;
};

CascadeModels load_cascade(const CascadeArgs& a, bool need_lesion) {
    CascadeModels m;
    if (a.oracle) {
        require(a.lung_model.empty() && a.lesion_model.empty(), ErrorCode::InvalidConfig,
                "--oracle excludes model checkpoints");
        m.window = a.window.spec();
        m.size = a.input_size;
        m.window.validate();
        return m;
    }
    require(!a.lung_model.empty(), ErrorCode::InvalidConfig, "--lung-model is required");
    m.lung.emplace(load_model(a.lung_model));
    require(m.lung->task == Task::lung, ErrorCode::InvalidConfig, a.lung_model + " is not a lung model");
    m.window = m.lung->window;
    m.size = m.lung->model.config().input_size;
    if (!a.lesion_model.empty()) {
        m.lesion.emplace(load_model(a.lesion_model));
        require(m.lesion->task == Task::lesion, ErrorCode::InvalidConfig, a.lesion_model + " is not a lesion model");
        require(m.lesion->model.config().input_size == m.size, ErrorCode::InvalidConfig,
                "lung and lesion models use different input sizes");
        require(m.lesion->window.lo == m.window.lo && m.lesion->window.hi == m.window.hi, ErrorCode::InvalidConfig,
                "lung and lesion models use different windows");
    } else {
        require(!need_lesion, ErrorCode::InvalidConfig, "--lesion-model is required");
    }
    return m;
}

std::vector<SliceResult> cascade_volume(const CascadeModels& m, const Volume& volume, const MaskVolume* lung_truth,
                                        const MaskVolume* lesion_truth, int jobs) {
    if (!m.lung) {
        require(lung_truth && lesion_truth, ErrorCode::InvalidConfig, "--oracle needs ground-truth masks");
        return run_cascade(volume, OracleSegmenter{lung_truth}, OracleSegmenter{lesion_truth}, m.window, m.size,
                           jobs);
    }
    const ModelSegmenter<float> lung{&m.lung->model};
    if (!m.lesion) {
        const auto none = [](const NormalizedSlice& s, std::size_t) { return BinaryMask(s.width, s.height); };
        return run_cascade(volume, lung, none, m.window, m.size, jobs);
    }
    return run_cascade(volume, lung, ModelSegmenter<float>{&m.lesion->model}, m.window, m.size, jobs);
}

// Stacks per-slice predictions into mask volumes on the model grid.
std::pair<MaskVolume, MaskVolume> stack_masks(const std::vector<SliceResult>& slices, const Volume& source, int size) {
    const Dims3 d{static_cast<std::uint32_t>(size), static_cast<std::uint32_t>(size), source.dims.nz};
    const Spacing3 sp{source.spacing.sx * source.dims.nx / size, source.spacing.sy * source.dims.ny / size,
                      source.spacing.sz};
    MaskVolume lung(d, sp, 0), lesion(d, sp, 0);
    for (std::size_t z = 0; z < slices.size(); ++z) {
        std::copy(slices[z].lung_mask.pixels.begin(), slices[z].lung_mask.pixels.end(),
                  lung.voxels.begin() + static_cast<std::ptrdiff_t>(z * d.slice_count()));
        std::copy(slices[z].infection_mask.pixels.begin(), slices[z].infection_mask.pixels.end(),
                  lesion.voxels.begin() + static_cast<std::ptrdiff_t>(z * d.slice_count()));
    }
    return {std::move(lung), std::move(lesion)};
}

// A volume where no lung was predicted has no PI. The report says so instead
// of failing; for confusion counts it grades CT0, as nothing can be infected.
json graded_report(const std::string& path, std::vector<SliceResult> slices, PiPolicy policy,
                   SeverityClass& graded) {
    try {
        const SeverityResult r = grade_volume(slices, policy);
        graded = r.severity;
        return severity_report_json(path, r);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NoLungDetected) throw;
        SeverityResult r;
        r.policy = policy;
        r.per_slice = std::move(slices);
        json j = severity_report_json(path, r);
        j["volume_pi"] = nullptr;
        j["severity"] = nullptr;
        j["note"] = "no lung pixels predicted";
        graded = SeverityClass::CT0;
        return j;
    }
}

// ---------------------------------------------------------------- infer

struct InferArgs {
    CascadeArgs cascade;
    std::string volume, pgm, out;
};

void add_infer(CLI::App& app, InferArgs& a) {
    add_cascade(app, a.cascade, false);
    app.add_option("--volume", a.volume, "CTV1 volume to segment");
    app.add_option("--pgm", a.pgm, "Single 8-bit P5 slice to segment (already windowed)");
    app.add_option("--out", a.out, "Output directory for predicted masks")->required();
}

void run_infer(const InferArgs& a) {
    require(a.volume.empty() != a.pgm.empty(), ErrorCode::InvalidConfig, "give exactly one of --volume or --pgm");
    const CascadeModels m = load_cascade(a.cascade, false);
    fs::create_directories(a.out);
    if (!a.pgm.empty()) {
        const auto slice = resize_slice(read_pgm(a.pgm), m.size, ResizeMode::bilinear);
        const BinaryMask lung = predict_mask(m.lung->model, slice);
        const BinaryMask lesion =
            m.lesion ? predict_mask(m.lesion->model, apply_lung_mask(slice, lung)) : BinaryMask(m.size, m.size);
        const SliceResult r = make_slice_result(lung, lesion);
        write_pgm(r.lung_mask, fs::path(a.out) / "lung.pgm");
        write_pgm(r.infection_mask, fs::path(a.out) / "lesion.pgm");
        emit({{"schema_version", kSchemaVersion},
              {"command", "infer"},
              {"input", a.pgm},
              {"lung_pixels", r.lung_pixels},
              {"infected_pixels", r.infected_pixels},
              {"pi", r.pi ? json(*r.pi) : json(nullptr)},
              {"detected", r.detected}},
             "");
        return;
    }
    const Volume volume = load_volume(a.volume);
    const auto slices = cascade_volume(m, volume, nullptr, nullptr, a.cascade.jobs);
    const auto [lung, lesion] = stack_masks(slices, volume, m.size);
    save_mask_volume(lung, fs::path(a.out) / "lung_pred.ctm");
    save_mask_volume(lesion, fs::path(a.out) / "lesion_pred.ctm");
    SeverityClass graded{};
    json report = graded_report(a.volume, slices, parse_pi_policy(a.cascade.policy), graded);
    report["schema_version"] = kSchemaVersion;
    report["command"] = "infer";
    emit(report, "");
}

// ---------------------------------------------------------------- severity

struct SeverityArgs {
    CascadeArgs cascade;
    std::string manifest, out, mesh;
    std::vector<std::string> volumes;
};

void add_severity(CLI::App& app, SeverityArgs& a) {
    add_cascade(app, a.cascade, true);
    app.add_option("--manifest", a.manifest, "Manifest with ground truth (enables the confusion matrix)");
    app.add_option("--volume", a.volumes, "CTV1 volumes to grade (repeatable)");
    app.add_option("--mesh", a.mesh, "Also write a PLY surface mesh (suffixed _NNN for several volumes)");
    app.add_option("--out", a.out, "Report path (default stdout)");
}

std::string mesh_path_for(const std::string& base, std::size_t i, std::size_t n) {
    if (n == 1) return base;
    fs::path p(base);
    char tag[16];
    std::snprintf(tag, sizeof tag, "_%03zu", i);
    return (p.parent_path() / (p.stem().string() + tag + p.extension().string())).string();
}

void run_severity(const SeverityArgs& a) {
    require(a.manifest.empty() != a.volumes.empty(), ErrorCode::InvalidConfig,
            "give either --manifest or --volume paths");
    const CascadeModels m = load_cascade(a.cascade, true);
    const PiPolicy policy = parse_pi_policy(a.cascade.policy);

    std::vector<LoadedVolume> volumes;
    if (!a.manifest.empty()) {
        volumes = load_manifest_volumes(a.manifest);
    } else {
        for (const auto& p : a.volumes) volumes.push_back({p, load_volume(p), {}, {}, std::nullopt});
        require(m.lung.has_value(), ErrorCode::InvalidConfig, "--oracle needs --manifest");
    }

    const bool have_truth = !a.manifest.empty();
    MultiClassConfusion confusion;
    json reports = json::array();
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        const auto& v = volumes[i];
        const auto slices = cascade_volume(m, v.volume, have_truth ? &v.lung : nullptr,
                                           have_truth ? &v.lesion : nullptr, a.cascade.jobs);
        if (!a.mesh.empty()) {
            const auto [lung, lesion] = stack_masks(slices, v.volume, m.size);
            write_ply(voxel_surface_mesh(lung, lesion), mesh_path_for(a.mesh, i, volumes.size()));
        }
        SeverityClass predicted{};
        json r = graded_report(v.volume_path, slices, policy, predicted);
        if (have_truth) {
            const SeverityResult truth = grade_volume(
                run_cascade(v.volume, OracleSegmenter{&v.lung}, OracleSegmenter{&v.lesion}, m.window, m.size, 1),
                policy);
            r["truth_volume_pi"] = truth.volume_pi;
            r["truth_severity"] = to_string(truth.severity);
            confusion.add(static_cast<std::size_t>(truth.severity), static_cast<std::size_t>(predicted));
        }
        reports.push_back(std::move(r));
    }

    json report{{"schema_version", kSchemaVersion},
                {"command", "severity"},
                {"policy", to_string(policy)},
                {"models", m.lung ? json{{"lung", a.cascade.lung_model}, {"lesion", a.cascade.lesion_model}}
                                  : json("oracle")},
                {"volumes", reports}};
    if (have_truth) {
        json matrix = json::array();
        for (std::size_t t = 0; t < confusion.classes; ++t) {
            json row = json::array();
            for (std::size_t p = 0; p < confusion.classes; ++p) row.push_back(confusion.at(t, p));
            matrix.push_back(row);
        }
        const auto scores = multiclass_scores(confusion);
        json per_class = json::object();
        for (std::size_t c = 0; c < scores.per_class.size(); ++c)
            per_class[to_string(static_cast<SeverityClass>(c))] = scores.per_class[c];
        report["confusion"] = {{"classes", {"CT0", "CT1", "CT2", "CT3", "CT4"}}, {"rows_truth", matrix}};
        report["scores"] = {{"per_class", per_class}, {"macro", scores.macro}};
    }
    emit(report, a.out);
}

// ---------------------------------------------------------------- mesh

struct MeshArgs {
    std::string lung, lesion, out;
};

void add_mesh(CLI::App& app, MeshArgs& a) {
    app.add_option("--lung", a.lung, "Lung CTM1 mask volume")->required();
    app.add_option("--lesion", a.lesion, "Lesion CTM1 mask volume (default: none)");
    app.add_option("--out", a.out, "Output PLY path")->required();
}

void run_mesh(const MeshArgs& a) {
    const MaskVolume lung = load_mask_volume(a.lung);
    const MaskVolume lesion = a.lesion.empty() ? MaskVolume(lung.dims, lung.spacing, 0) : load_mask_volume(a.lesion);
    const Mesh mesh = voxel_surface_mesh(lung, lesion);
    write_ply(mesh, a.out);
    emit({{"schema_version", kSchemaVersion},
          {"command", "mesh"},
          {"out", a.out},
          {"vertices", mesh.vertices.size()},
          {"triangles", mesh.triangles.size()}},
         "");
}


}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctseg: cascaded lung and lesion segmentation on CT volumes"};
    app.name("ctseg");
    app.require_subcommand(1);

    PhantomArgs phantom;
    TrainArgs train_args;
    EvaluateArgs evaluate;
    InferArgs infer;
    SeverityArgs severity;
    MeshArgs mesh;

    auto* c_phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
    add_phantom(*c_phantom, phantom);
    auto* c_train = app.add_subcommand("train", "Train lung or lesion models with k-fold cross-validation");
    add_train(*c_train, train_args);
    auto* c_eval = app.add_subcommand("evaluate", "Pixel and slice metrics of a checkpoint on a manifest");
    add_evaluate(*c_eval, evaluate);
    auto* c_infer = app.add_subcommand("infer", "Run the lung/lesion cascade on one volume or slice");
    add_infer(*c_infer, infer);
    auto* c_severity = app.add_subcommand("severity", "Grade CT0-CT4 severity per volume");
    add_severity(*c_severity, severity);
    auto* c_mesh = app.add_subcommand("mesh", "Export a coloured surface mesh of lung and lesion masks");
    add_mesh(*c_mesh, mesh);
    std::string active;
    for (int i = 1; i < argc && active.empty(); ++i)
        for (auto* sub : {c_phantom, c_train, c_eval, c_infer, c_severity, c_mesh})
            if (sub->get_name() == argv[i]) active = argv[i];
    app.config_formatter(std::make_shared<JsonConfig>(active));
    app.set_config("--config", "", "JSON file of option values for the subcommand (keys are flag names)");
    app.allow_config_extras(CLI::config_extras_mode::error);

    // --config belongs to the root app; hoist it so it may follow the subcommand.
    std::vector<std::string> args, hoisted;
    for (int i = 1; i < argc; ++i) {
        const std::string tok = argv[i];
        if (tok == "--config" && i + 1 < argc) {
            hoisted.insert(hoisted.end(), {tok, argv[++i]});
        } else if (tok.rfind("--config=", 0) == 0) {
            hoisted.push_back(tok);
        } else {
            args.push_back(tok);
        }
    }
    args.insert(args.begin(), hoisted.begin(), hoisted.end());
    std::reverse(args.begin(), args.end());

    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        if (const auto pos = msg.find("INI was not able to parse "); pos != std::string::npos)
            msg = "unknown config key '" + msg.substr(pos + 26) + "'";
        report_error("InvalidConfig", msg);
        return kExitConfig;
    }

    try {
        if (*c_phantom) run_phantom(phantom);
        else if (*c_train) run_train(train_args);
        else if (*c_eval) run_evaluate(evaluate);
        else if (*c_infer) run_infer(infer);
        else if (*c_severity) run_severity(severity);
        else if (*c_mesh) run_mesh(mesh);
    } catch (const Error& e) {
        report_error(std::string(to_string(e.code())), e.what());
        return exit_code_for(e.code());
    } catch (const fs::filesystem_error& e) {
        report_error("IoFailure", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        report_error("RuntimeError", e.what());
        return kExitRuntime;
    }
    return 0;
}
