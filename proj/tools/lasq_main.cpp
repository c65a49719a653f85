#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lasq/distance.hpp"
#include "lasq/losses.hpp"
#include "lasq/metrics.hpp"
#include "lasq/model.hpp"
#include "lasq/phantom.hpp"
#include "lasq/surface.hpp"
#include "lasq/util.hpp"
#include "lasq/volume.hpp"

namespace {

using namespace lasq;

int exit_code_for(const std::string& category) {
    static const std::map<std::string, int> table = {
        {errc::io, 10},           {errc::malformed_header, 11}, {errc::payload_length, 12},
        {errc::non_finite, 13},   {errc::unknown_kind, 14},     {errc::checksum_mismatch, 15},
        {errc::alphabet, 16},     {errc::grid_mismatch, 20},    {errc::empty_class, 21},
        {errc::degenerate_field, 22}, {errc::out_of_range, 23}, {errc::degenerate_window, 24},
        {errc::constant_input, 25}, {errc::empty_surface, 26},  {errc::empty_la, 27},
        {errc::infeasible_spec, 28}, {errc::divergence, 30},    {errc::bad_argument, 40},
    };
    auto it = table.find(category);
    return it == table.end() ? 40 : it->second;
}

std::string out_dir_override(const std::string& path) {
    // LASQ_OUT_DIR reroots relative output paths; the only environment knob.
    const char* base = std::getenv("LASQ_OUT_DIR");
    if (!base || path.empty() || std::filesystem::path(path).is_absolute()) return path;
    return std::string(base) + "/" + path;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot open " + path + " for writing");
    out << text;
    if (!out) fail(errc::io, "short write to " + path);
}

Weights parse_weights(const std::string& csv) {
    Weights w;
    std::string item;
    std::stringstream ss(csv);
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) fail(errc::bad_argument, "weights must look like la=0.01,scar=10,m1=0.01,m2=0.001");
        const std::string key = item.substr(0, eq);
        const double val = std::stod(item.substr(eq + 1));
        if (key == "la") w.lambda_la = val;
        else if (key == "scar") w.lambda_scar = val;
        else if (key == "m1") w.lambda_m1 = val;
        else if (key == "m2") w.lambda_m2 = val;
        else fail(errc::bad_argument, "unknown weight \"" + key + "\"");
    }
    return w;
}

struct CommonTrainOpts {
    std::string suite;
    std::string arm = "sesa";
    std::string kind = "conv";
    std::uint64_t seed = 7;
    int iters = 2000;
    double lr = 1e-3;
    int lr_step = 1000;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::string weights = "la=0.01,scar=10,m1=0.01,m2=0.001";
    std::string variant = "exp";
    std::string metric = "l2";
    std::string m2_mode = "differentiable";
    double beta = 1.0;
    double clip = 50.0;
    bool sum_reduction = false;
    unsigned jobs = 1;

    TrainConfig to_config() const {
        TrainConfig cfg;
        cfg.kind = model_kind_from_string(kind);
        cfg.arm = train_arm_from_string(arm);
        cfg.iterations = iters;
        cfg.lr0 = lr;
        cfg.lr_step = lr_step;
        cfg.momentum = momentum;
        cfg.weight_decay = weight_decay;
        cfg.weights = parse_weights(weights);
        cfg.m2_mode = m2_mode_from_string(m2_mode);
        cfg.metric = scar_metric_from_string(metric);
        cfg.variant = dpm_variant_from_string(variant);
        cfg.beta = beta;
        cfg.clip = clip;
        cfg.mean_reduction = !sum_reduction;
        cfg.seed = seed;
        cfg.jobs = jobs;
        return cfg;
    }
};

nlohmann::json config_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["kind"] = to_string(cfg.kind);
    j["arm"] = to_string(cfg.arm);
    j["iterations"] = cfg.iterations;
    j["lr0"] = cfg.lr0;
    j["lr_step"] = cfg.lr_step;
    j["momentum"] = cfg.momentum;
    j["weight_decay"] = cfg.weight_decay;
    j["weights"] = {{"la", cfg.weights.lambda_la},
                    {"scar", cfg.weights.lambda_scar},
                    {"m1", cfg.weights.lambda_m1},
                    {"m2", cfg.weights.lambda_m2},
                    {"growth_factor", cfg.weights.growth_factor},
                    {"growth_period", cfg.weights.growth_period}};
    j["m2_mode"] = to_string(cfg.m2_mode);
    j["metric"] = to_string(cfg.metric);
    j["variant"] = to_string(cfg.variant);
    j["beta"] = cfg.beta;
    j["clip"] = cfg.clip;
    j["t_la"] = cfg.t_la;
    j["mean_reduction"] = cfg.mean_reduction;
    j["seed"] = cfg.seed;
    return j;
}

// train + persist artifacts; returns divergence flag
bool run_training(const std::string& suite, const TrainConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const SuiteManifest manifest = read_manifest(manifest_path(suite));
    const TrainResult res = train(suite, manifest, cfg);

    std::string log = train_log_csv_header() + "\n";
    for (const auto& r : res.log) log += train_log_csv_row(r) + "\n";
    write_text(out_dir + "/trainlog.csv", log);
    write_text(out_dir + "/config.json", config_json(cfg).dump(2) + "\n");
    save_checkpoint(out_dir + "/checkpoint", *res.model, Spacing{1, 1, 1});
    return res.diverged;
}

struct EvalOpts {
    std::string suite;
    std::string model_dir;
    std::string split = "test";
    std::string surface_from = "gt";
    double radius = 3.0;
    double hd_percentile = 100.0;
    bool otsu_baseline = false;
    double otsu_radius = 2.0;
    unsigned jobs = 1;
};

std::string run_evaluation(const EvalOpts& opt, std::vector<MetricsReport>* reports_out) {
    const SuiteManifest manifest = read_manifest(manifest_path(opt.suite));
    std::vector<const SuiteManifest::Case*> entries;
    for (const auto& e : manifest.cases)
        if (opt.split == "all" || e.role == opt.split) entries.push_back(&e);
    if (entries.empty()) fail(errc::bad_argument, "no cases in split \"" + opt.split + "\"");
    if (!opt.otsu_baseline && opt.model_dir.empty())
        fail(errc::bad_argument, "evaluate needs --model or --otsu-baseline");

    const SurfaceFrom sf = opt.surface_from == "pred" ? SurfaceFrom::pred : SurfaceFrom::gt;
    std::vector<MetricsReport> reports(entries.size());
    std::unique_ptr<Model> model;
    if (!opt.otsu_baseline) model = load_checkpoint(opt.model_dir, 1);

    parallel_for(entries.size(), opt.jobs, [&](std::size_t lo, std::size_t hi) {
        std::unique_ptr<Model> local;
        for (std::size_t i = lo; i < hi; ++i) {
            const PhantomCase c = load_case(opt.suite, *entries[i]);
            if (opt.otsu_baseline) {
                const SurfaceMask ref = hard_boundary_mask(c.la_label);
                const LabeledSurface pred = otsu_surface_baseline(c.intensity, ref, opt.otsu_radius);
                const LabeledSurface gt = project_volume_labels(c.wall_scar_label, ref, opt.radius);
                const SurfaceScarMetrics sm = surface_scar_metrics(pred, gt);
                MetricsReport& r = reports[i];
                r.case_id = entries[i]->id;
                r.dice_la = 1.0; // the baseline quantifies on the manual LA surface
                r.asd_mm = 0.0;
                r.hd_mm = 0.0;
                r.accuracy = sm.accuracy;
                r.dice_s = sm.dice_s;
                r.dice_g = sm.dice_g;
                r.sensitivity = sm.sensitivity;
                r.specificity = sm.specificity;
            } else {
                if (!local) local = load_checkpoint(opt.model_dir, 1);
                const ModelOutputs out = local->forward(c.intensity);
                reports[i] = evaluate_outputs(out, c, entries[i]->id, sf, opt.radius, opt.hd_percentile);
            }
        }
    });
    (void)model;

    std::string csv = metrics_csv_header() + "\n";
    for (const auto& r : reports) csv += metrics_csv_row(r) + "\n";
    if (reports_out) *reports_out = reports;
    return csv;
}

double median(std::vector<double> v) {
    if (v.empty()) fail(errc::bad_argument, "median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"lasq: joint left-atrium segmentation and scar quantification on synthetic phantoms"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "lasq 0.1.0");

    // gen-phantom ------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-phantom", "Generate a synthetic phantom suite with ground truth");
    struct {
        int dims = 32;
        int cases = 0;
        int train = 10;
        int test = 5;
        std::uint64_t seed = 7;
        std::string out;
        double spacing = 1.0;
        int wall = 2;
        int arcs = 1;
        double arc_width = 110.0;
        int distractors = 1;
        unsigned jobs = 1;
    } g;
    gen->add_option("--dims", g.dims, "Cubic grid size in voxels")->capture_default_str();
    gen->add_option("--cases", g.cases, "Total cases; splits 2:1 into train:test (overrides --train/--test)");
    gen->add_option("--train", g.train, "Training cases")->capture_default_str();
    gen->add_option("--test", g.test, "Test cases")->capture_default_str();
    gen->add_option("--seed", g.seed, "Base seed for the suite")->capture_default_str();
    gen->add_option("--out", g.out, "Output suite directory")->required();
    gen->add_option("--spacing", g.spacing, "Isotropic voxel spacing in mm")->capture_default_str();
    gen->add_option("--wall-thickness", g.wall, "Wall ring thickness in voxels")->capture_default_str();
    gen->add_option("--arcs", g.arcs, "Number of scar arcs")->capture_default_str();
    gen->add_option("--arc-width", g.arc_width, "Angular width of each arc in degrees")->capture_default_str();
    gen->add_option("--distractors", g.distractors, "Blood-pool-intensity distractor blobs")->capture_default_str();
    gen->add_option("--jobs", g.jobs, "Parallel workers across cases")->capture_default_str();

    // dtm ---------------------------------------------------------------------
    auto* dtm = app.add_subcommand("dtm", "Signed distance transform of a binary label");
    struct {
        std::string in, out;
        double beta = 1.0, clip = 50.0;
        bool spacing_aware = false;
    } dt;
    dtm->add_option("--in", dt.in, "Input {0,1} label MVOL")->required();
    dtm->add_option("--beta", dt.beta, "Distance exponent")->capture_default_str();
    dtm->add_option("--clip", dt.clip, "Distance clip before the exponent")->capture_default_str();
    dtm->add_flag("--spacing-aware", dt.spacing_aware, "Measure distances in mm instead of voxels");
    dtm->add_option("--out", dt.out, "Output distance MVOL")->required();

    // dpm ---------------------------------------------------------------------
    auto* dpm = app.add_subcommand("dpm", "Distance probability maps from a {0,1,2} wall/scar label");
    struct {
        std::string in, out_normal, out_scar;
        std::string variant = "exp";
        double beta = 1.0, clip = 50.0;
        bool spacing_aware = false;
    } dp;
    dpm->add_option("--in", dp.in, "Input {0,1,2} label MVOL")->required();
    dpm->add_option("--variant", dp.variant, "exp|expit|exp-norm|expit-norm")->capture_default_str();
    dpm->add_option("--beta", dp.beta, "Distance exponent")->capture_default_str();
    dpm->add_option("--clip", dp.clip, "Distance clip before the exponent")->capture_default_str();
    dpm->add_flag("--spacing-aware", dp.spacing_aware, "Measure distances in mm instead of voxels");
    dpm->add_option("--out-normal", dp.out_normal, "Output normal-wall probability MVOL")->required();
    dpm->add_option("--out-scar", dp.out_scar, "Output scar probability MVOL")->required();

    // loss-eval ----------------------------------------------------------------
    auto* le = app.add_subcommand("loss-eval", "Evaluate every objective term on given predictions");
    struct {
        std::string pred_la, pred_normal, pred_scar, gt_la, gt_scar, out;
        std::string weights = "la=0.01,scar=10,m1=0.01,m2=0.001";
        std::string variant = "exp";
        std::string metric = "l2";
        std::string m2_mode = "differentiable";
        double beta = 1.0, clip = 50.0;
        bool mean = false;
    } lo;
    le->add_option("--pred-la", lo.pred_la, "Predicted LA probability MVOL")->required();
    le->add_option("--pred-normal", lo.pred_normal, "Predicted normal-wall probability MVOL")->required();
    le->add_option("--pred-scar", lo.pred_scar, "Predicted scar probability MVOL")->required();
    le->add_option("--gt-la", lo.gt_la, "Ground-truth {0,1} LA label MVOL")->required();
    le->add_option("--gt-scar", lo.gt_scar, "Ground-truth {0,1,2} wall/scar label MVOL")->required();
    le->add_option("--weights", lo.weights, "la=..,scar=..,m1=..,m2=..")->capture_default_str();
    le->add_option("--variant", lo.variant, "Target DPM variant")->capture_default_str();
    le->add_option("--metric", lo.metric, "Scar discrepancy: l2|hellinger")->capture_default_str();
    le->add_option("--m2-mode", lo.m2_mode, "differentiable|stop-gradient")->capture_default_str();
    le->add_option("--beta", lo.beta, "Distance exponent")->capture_default_str();
    le->add_option("--clip", lo.clip, "Distance clip")->capture_default_str();
    le->add_flag("--mean", lo.mean, "Report per-voxel means instead of raw sums");
    le->add_option("--out", lo.out, "Output JSON report")->required();

    // train ---------------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "Train the two-headed model on a phantom suite");
    CommonTrainOpts t;
    std::string train_out;
    tr->add_option("--suite", t.suite, "Suite directory with manifest.json")->required();
    tr->add_option("--arm", t.arm, "Loss arm: bce|se|sesa")->capture_default_str();
    tr->add_option("--kind", t.kind, "Model kind: field|conv")->capture_default_str();
    tr->add_option("--seed", t.seed, "Initialization seed")->capture_default_str();
    tr->add_option("--iters", t.iters, "Training iterations")->capture_default_str();
    tr->add_option("--lr", t.lr, "Initial learning rate")->capture_default_str();
    tr->add_option("--lr-step", t.lr_step, "Divide lr by 10 every this many iterations (paper scale: 4000)")->capture_default_str();
    tr->add_option("--momentum", t.momentum, "SGD momentum")->capture_default_str();
    tr->add_option("--weight-decay", t.weight_decay, "SGD weight decay")->capture_default_str();
    tr->add_option("--weights", t.weights, "Loss weights la=..,scar=..,m1=..,m2=..")->capture_default_str();
    tr->add_option("--variant", t.variant, "Target DPM variant")->capture_default_str();
    tr->add_option("--metric", t.metric, "Scar discrepancy: l2|hellinger")->capture_default_str();
    tr->add_option("--m2-mode", t.m2_mode, "differentiable|stop-gradient")->capture_default_str();
    tr->add_option("--beta", t.beta, "Distance exponent")->capture_default_str();
    tr->add_option("--clip", t.clip, "Distance clip")->capture_default_str();
    tr->add_flag("--sum", t.sum_reduction, "Optimize raw voxel sums instead of per-voxel means");
    tr->add_option("--jobs", t.jobs, "Parallel workers inside an iteration")->capture_default_str();
    tr->add_option("--out", train_out, "Run output directory")->required();

    // project --------------------------------------------------------------------
    auto* pj = app.add_subcommand("project", "Project volumetric scar labels onto an LA surface");
    struct {
        std::string scar, surface_from, out;
        double radius = 3.0;
    } p;
    pj->add_option("--scar", p.scar, "{0,1,2} wall/scar label MVOL")->required();
    pj->add_option("--surface-from", p.surface_from, "{0,1} LA label MVOL defining the surface")->required();
    pj->add_option("--radius", p.radius, "Projection search radius in voxels")->capture_default_str();
    pj->add_option("--out", p.out, "Output PLY point cloud")->required();

    // evaluate ---------------------------------------------------------------------
    auto* ev = app.add_subcommand("evaluate", "Evaluate a trained model (or the Otsu baseline) on a suite");
    EvalOpts e;
    std::string eval_out;
    ev->add_option("--suite", e.suite, "Suite directory")->required();
    ev->add_option("--model", e.model_dir, "Checkpoint directory from `train`");
    ev->add_option("--split", e.split, "Case split: train|test|all")->capture_default_str();
    ev->add_option("--surface-from", e.surface_from, "Reference surface: gt|pred")->capture_default_str();
    ev->add_option("--radius", e.radius, "Projection search radius in voxels")->capture_default_str();
    ev->add_option("--hd-percentile", e.hd_percentile, "Directed HD percentile (100 = plain HD)")->capture_default_str();
    ev->add_flag("--otsu-baseline", e.otsu_baseline, "Classify scar by Otsu on max wall-adjacent intensities");
    ev->add_option("--otsu-radius", e.otsu_radius, "Sampling ball radius for the Otsu baseline")->capture_default_str();
    ev->add_option("--jobs", e.jobs, "Parallel workers across cases")->capture_default_str();
    ev->add_option("--out", eval_out, "Output metrics CSV")->required();

    // export-slice --------------------------------------------------------------------
    auto* es = app.add_subcommand("export-slice", "Window one slice of a volume to an 8-bit PGM");
    struct {
        std::string in, out;
        std::string axis = "z";
        int index = 0;
        double lo = 0.0, hi = 1.0;
    } s;
    es->add_option("--in", s.in, "Input MVOL")->required();
    es->add_option("--axis", s.axis, "Slice axis: x|y|z")->capture_default_str();
    es->add_option("--index", s.index, "Slice index along the axis")->capture_default_str();
    es->add_option("--lo", s.lo, "Window low value (maps to 0)")->capture_default_str();
    es->add_option("--hi", s.hi, "Window high value (maps to 255)")->capture_default_str();
    es->add_option("--out", s.out, "Output PGM")->required();

    // export-mesh --------------------------------------------------------------------
    auto* em = app.add_subcommand("export-mesh", "Classify DPM predictions on an LA surface and export PLY");
    struct {
        std::string pnormal, pscar, surface_from, out;
    } m;
    em->add_option("--pnormal", m.pnormal, "Normal-wall probability MVOL")->required();
    em->add_option("--pscar", m.pscar, "Scar probability MVOL")->required();
    em->add_option("--surface-from", m.surface_from, "{0,1} LA label MVOL defining the surface")->required();
    em->add_option("--out", m.out, "Output PLY point cloud")->required();

    // sweep --------------------------------------------------------------------
    auto* sw = app.add_subcommand("sweep", "Run an experiment preset over a suite");
    struct {
        std::string preset;
        std::string suite;
        std::string out;
        std::string kind = "conv";
        std::uint64_t seed = 7;
        int iters = 2000;
        unsigned jobs = 1;
    } w;
    sw->add_option("--preset", w.preset, "ablation_table2_shape|beta_sweep|dpm_variant_sweep")->required();
    sw->add_option("--suite", w.suite, "Suite directory")->required();
    sw->add_option("--out", w.out, "Sweep output directory")->required();
    sw->add_option("--kind", w.kind, "Model kind: field|conv")->capture_default_str();
    sw->add_option("--seed", w.seed, "Training seed")->capture_default_str();
    sw->add_option("--iters", w.iters, "Training iterations per point")->capture_default_str();
    sw->add_option("--jobs", w.jobs, "Parallel workers inside each run")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& ex) {
        const int rc = app.exit(ex);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            PhantomSpec spec;
            spec.dims = {g.dims, g.dims, g.dims};
            spec.spacing = {g.spacing, g.spacing, g.spacing};
            // keep the cavity proportional to the grid, clamped so the suite
            // jitter (up to x1.1) still fits inside the margin
            const double base = g.dims * g.spacing;
            const double budget = (g.dims / 2.0 - 2.0 - g.wall) * g.spacing / 1.12;
            spec.semi_axis_x_mm = std::min(base * 9.0 / 32.0, budget);
            spec.semi_axis_y_mm = std::min(base * 7.5 / 32.0, budget * 0.92);
            spec.semi_axis_z_mm = std::min(base * 8.0 / 32.0, budget * 0.96);
            spec.scar_band_half_mm = base * 3.0 / 32.0;
            spec.protrusion_length_mm = base * 5.0 / 32.0;
            spec.wall_thickness_vox = g.wall;
            spec.scar_arc_count = g.arcs;
            spec.scar_arc_widths_deg.assign(static_cast<std::size_t>(std::max(g.arcs, 1)), g.arc_width);
            spec.distractor_count = g.distractors;
            int n_train = g.train, n_test = g.test;
            if (g.cases > 0) {
                n_test = g.cases / 3;
                n_train = g.cases - n_test;
            }
            generate_suite(n_train, n_test, spec, g.seed, out_dir_override(g.out), g.jobs);
            return 0;
        }

        if (dtm->parsed()) {
            const LabelVolume label = read_mvol_label(dt.in, {0, 1});
            const SignedDistanceMap sdm = signed_edt(label, dt.beta, dt.clip, dt.spacing_aware);
            VolumeHeader h;
            h.dims = sdm.values.dims();
            h.spacing = sdm.values.spacing();
            h.kind = ValueKind::distance;
            h.checksum = payload_checksum(sdm.values);
            write_mvol(out_dir_override(dt.out), h, sdm.values);
            return 0;
        }

        if (dpm->parsed()) {
            const LabelVolume label = read_mvol_label(dp.in, {0, 1, 2});
            const DistanceProbabilityMap d = build_dpm_from_label(label, dpm_variant_from_string(dp.variant),
                                                                  dp.beta, dp.clip, dp.spacing_aware);
            VolumeHeader h;
            h.dims = d.p_normal.dims();
            h.spacing = d.p_normal.spacing();
            h.kind = ValueKind::probability;
            h.checksum = payload_checksum(d.p_normal);
            write_mvol(out_dir_override(dp.out_normal), h, d.p_normal);
            h.checksum = payload_checksum(d.p_scar);
            write_mvol(out_dir_override(dp.out_scar), h, d.p_scar);
            return 0;
        }

        if (le->parsed()) {
            const Volume3 pred_la = read_mvol_volume(lo.pred_la);
            DistanceProbabilityMap pred;
            pred.p_normal = read_mvol_volume(lo.pred_normal);
            pred.p_scar = read_mvol_volume(lo.pred_scar);
            const LabelVolume gt_la = read_mvol_label(lo.gt_la, {0, 1});
            const LabelVolume gt_scar = read_mvol_label(lo.gt_scar, {0, 1, 2});

            const SignedDistanceMap la_dtm = signed_edt(gt_la, lo.beta, lo.clip);
            const DistanceProbabilityMap target =
                build_dpm_from_label(gt_scar, dpm_variant_from_string(lo.variant), lo.beta, lo.clip);
            const SurfaceMask m1 = hard_boundary_mask(gt_la);
            const LossTargets targets{&gt_la, &la_dtm, &target, &m1};
            const LossReport rep = total_loss(pred_la, pred, targets, parse_weights(lo.weights),
                                              m2_mode_from_string(lo.m2_mode), scar_metric_from_string(lo.metric));
            const double scale = lo.mean ? 1.0 / static_cast<double>(pred_la.size()) : 1.0;
            nlohmann::json j;
            j["bce_la"] = scale * rep.bce_la;
            j["se_la"] = scale * rep.se_la;
            j["se_scar"] = scale * rep.se_scar;
            j["sa_m1"] = scale * rep.sa_m1;
            j["sa_m2"] = scale * rep.sa_m2;
            j["total"] = scale * rep.total;
            j["weights"] = {{"la", rep.weights.lambda_la},
                            {"scar", rep.weights.lambda_scar},
                            {"m1", rep.weights.lambda_m1},
                            {"m2", rep.weights.lambda_m2}};
            j["mean"] = lo.mean;
            write_text(out_dir_override(lo.out), j.dump(2) + "\n");
            return 0;
        }

        if (tr->parsed()) {
            const bool diverged = run_training(t.suite, t.to_config(), out_dir_override(train_out));
            if (diverged) {
                std::cerr << "error: " << errc::divergence << ": training loss became non-finite; kept last good checkpoint\n";
                return exit_code_for(errc::divergence);
            }
            return 0;
        }

        if (pj->parsed()) {
            const LabelVolume scar = read_mvol_label(p.scar, {0, 1, 2});
            const LabelVolume la = read_mvol_label(p.surface_from, {0, 1});
            const SurfaceMask ref = hard_boundary_mask(la);
            const LabeledSurface surf = project_volume_labels(scar, ref, p.radius);
            export_labeled_surface_ply(surf, out_dir_override(p.out));
            return 0;
        }

        if (ev->parsed()) {
            const std::string csv = run_evaluation(e, nullptr);
            write_text(out_dir_override(eval_out), csv);
            return 0;
        }

        if (es->parsed()) {
            const Volume3 vol = read_mvol_volume(s.in);
            if (s.axis.size() != 1 || (s.axis[0] != 'x' && s.axis[0] != 'y' && s.axis[0] != 'z'))
                fail(errc::bad_argument, "axis must be one of x|y|z");
            const auto bytes = export_slice_pgm(vol, s.axis[0], s.index, s.lo, s.hi);
            std::ofstream out(out_dir_override(s.out), std::ios::binary | std::ios::trunc);
            if (!out) fail(errc::io, "cannot open " + s.out + " for writing");
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            return 0;
        }

        if (em->parsed()) {
            DistanceProbabilityMap d;
            d.p_normal = read_mvol_volume(m.pnormal);
            d.p_scar = read_mvol_volume(m.pscar);
            const LabelVolume la = read_mvol_label(m.surface_from, {0, 1});
            const SurfaceMask ref = hard_boundary_mask(la);
            const LabeledSurface surf = classify_surface(d, ref);
            export_labeled_surface_ply(surf, out_dir_override(m.out));
            return 0;
        }

        if (sw->parsed()) {
            const std::string out_dir = out_dir_override(w.out);
            std::filesystem::create_directories(out_dir);
            nlohmann::json log;
            log["preset"] = w.preset;
            log["suite"] = w.suite;
            log["seed"] = w.seed;
            log["iters"] = w.iters;
            log["points"] = nlohmann::json::array();

            auto run_point = [&](const std::string& tag, CommonTrainOpts opts,
                                 std::vector<std::pair<std::string, std::string>> extra_cols) {
                const std::string run_dir = out_dir + "/" + tag;
                TrainConfig cfg = opts.to_config();
                const bool diverged = run_training(w.suite, cfg, run_dir);
                EvalOpts ev_opts;
                ev_opts.suite = w.suite;
                ev_opts.model_dir = run_dir + "/checkpoint";
                ev_opts.jobs = w.jobs;
                std::vector<MetricsReport> reports;
                std::string csv = run_evaluation(ev_opts, &reports);
                // append the sweep coordinates to every row
                std::string augmented;
                std::istringstream lines(csv);
                std::string line;
                bool header = true;
                while (std::getline(lines, line)) {
                    for (const auto& [k, v] : extra_cols) line += "," + (header ? k : v);
                    augmented += line + "\n";
                    header = false;
                }
                write_text(run_dir + "/metrics.csv", augmented);
                nlohmann::json point;
                point["tag"] = tag;
                point["diverged"] = diverged;
                point["command"] = {{"arm", opts.arm}, {"kind", opts.kind},   {"seed", opts.seed},
                                    {"iters", opts.iters}, {"beta", opts.beta}, {"variant", opts.variant},
                                    {"metric", opts.metric}};
                log["points"].push_back(point);
                return reports;
            };

            CommonTrainOpts base;
            base.suite = w.suite;
            base.kind = w.kind;
            base.seed = w.seed;
            base.iters = w.iters;
            base.jobs = w.jobs;

            if (w.preset == "beta_sweep") {
                for (double beta : {0.5, 1.0, 2.0}) {
                    CommonTrainOpts o = base;
                    o.arm = "se";
                    o.beta = beta;
                    char tag[32];
                    std::snprintf(tag, sizeof tag, "beta_%g", beta);
                    char bv[32];
                    std::snprintf(bv, sizeof bv, "%g", beta);
                    run_point(tag, o, {{"beta", bv}});
                }
            } else if (w.preset == "dpm_variant_sweep") {
                for (const char* variant : {"exp", "expit", "exp-norm", "expit-norm"})
                    for (const char* metric : {"l2", "hellinger"}) {
                        CommonTrainOpts o = base;
                        o.arm = "se";
                        o.variant = variant;
                        o.metric = metric;
                        const std::string tag = std::string("dpm_") + variant + "_" + metric;
                        run_point(tag, o, {{"variant", variant}, {"metric", metric}});
                    }
            } else if (w.preset == "ablation_table2_shape") {
                nlohmann::json summary;
                for (const char* arm : {"bce", "se", "sesa"}) {
                    CommonTrainOpts o = base;
                    o.arm = arm;
                    const auto reports = run_point(std::string("arm_") + arm, o, {{"arm", arm}});
                    std::vector<double> hd, dice_s, sens;
                    for (const auto& r : reports) {
                        hd.push_back(r.hd_mm);
                        dice_s.push_back(r.dice_s);
                        sens.push_back(r.sensitivity);
                    }
                    summary[arm] = {{"median_hd_mm", median(hd)},
                                    {"median_dice_s", median(dice_s)},
                                    {"median_sensitivity", median(sens)}};
                }
                write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
            } else {
                fail(errc::bad_argument, "unknown preset \"" + w.preset + "\"");
            }
            write_text(out_dir + "/sweep_log.json", log.dump(2) + "\n");
            return 0;
        }
    } catch (const Error& ex) {
        std::cerr << ex.what() << "\n";
        return exit_code_for(ex.category());
    } catch (const std::exception& ex) {
        std::cerr << "error: " << errc::bad_argument << ": " << ex.what() << "\n";
        return exit_code_for(errc::bad_argument);
    }
    return 0;
}
