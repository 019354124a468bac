// mmsn command-line entry point.
//
// Exit codes: 0 ok, 2 config error, 3 I/O or data error, 4 numeric
// divergence, 5 check failure. All randomness flows from --seed via named
// substreams, so reruns are byte-identical.
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mmsn/config.hpp"
#include "mmsn/data.hpp"
#include "mmsn/gradcheck.hpp"
#include "mmsn/jsonio.hpp"
#include "mmsn/model.hpp"
#include "mmsn/train.hpp"

namespace {

using namespace mmsn;
namespace fs = std::filesystem;

int worker_count(std::size_t n_items) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("MMSN_THREADS")) {
        long cap = std::strtol(env, nullptr, 10);
        if (cap < 1) throw ConfigError("MMSN_THREADS must be a positive integer");
        hw = std::min<unsigned>(hw, static_cast<unsigned>(cap));
    }
    return static_cast<int>(std::min<std::size_t>(hw, std::max<std::size_t>(n_items, 1)));
}

// Per-patient probabilities with a per-patient mode, round-robin across
// workers; results are independent of the worker count.
Tensor parallel_probabilities(MmsnModel& model, const std::vector<PatientPre>& pres,
                              const std::vector<PatientMode>& modes) {
    int n = static_cast<int>(pres.size());
    Tensor probs(n, kNumLabels);
    int workers = worker_count(pres.size());
    std::atomic<bool> failed{false};
    std::string error;
    std::mutex error_mu;
    auto run = [&](int start) {
        try {
            for (int i = start; i < n; i += workers) {
                Tensor p = model.patient_probabilities(pres[i], modes[i]);
                for (int c = 0; c < kNumLabels; ++c) probs.at(i, c) = p.at(0, c);
            }
        } catch (const std::exception& e) {
            std::scoped_lock lock(error_mu);
            failed = true;
            if (error.empty()) error = e.what();
        }
    };
    if (workers <= 1) {
        run(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
        for (auto& th : pool) th.join();
    }
    if (failed) throw NumericError("evaluation failed: " + error);
    return probs;
}

RunConfig load_run_config(const std::string& config_path) {
    if (config_path.empty()) return RunConfig{};
    return RunConfig::from_file(config_path);
}

struct CommonOpts {
    std::string config_path;
    std::string data_path;
    std::string params_path;
    std::string out_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_synth(const CommonOpts& o) {
    RunConfig rc = load_run_config(o.config_path);
    std::uint64_t seed = o.seed_set ? o.seed : rc.train.seed;
    generate_synthetic_cohort(rc.generator, seed, o.out_path);
    std::printf("wrote %d patients + manifest to %s\n", rc.generator.n_patients,
                o.out_path.c_str());
    return 0;
}

int cmd_train(const CommonOpts& o) {
    RunConfig rc = load_run_config(o.config_path);
    if (o.seed_set) rc.train.seed = o.seed;
    CohortManifest man = load_manifest(o.data_path);
    std::vector<PatientSample> patients = load_cohort(man);
    rc.train.model.d_mri = man.d_mri;
    rc.train.model.d_hist = man.d_hist;
    rc.train.validate();

    std::vector<PatientPre> pres = precompute_cohort(patients);
    CvResult cv = cross_validate(pres, rc.train);

    fs::create_directories(o.out_path);
    atomic_write((fs::path(o.out_path) / "config_snapshot.json").string(), rc.to_json());
    for (const FoldResult& f : cv.folds) {
        std::string tag = "fold" + std::to_string(f.fold + 1);
        f.best_params.save((fs::path(o.out_path) / ("params_" + tag + ".bin")).string());
        atomic_write((fs::path(o.out_path) / ("history_" + tag + ".csv")).string(),
                     history_csv(f.history));
        std::printf("%s: best epoch %d (val loss %s), val micro-F1 %.2f\n", tag.c_str(),
                    f.best_epoch, fmt_double(f.best_val_loss).c_str(), f.val_metrics.micro_f1);
    }
    atomic_write((fs::path(o.out_path) / "metrics.json").string(), metrics_json(cv));
    std::printf("mean val micro-F1 %.2f -> %s/metrics.json\n", cv.mean.micro_f1,
                o.out_path.c_str());
    return 0;
}

std::string single_metrics_json(const MetricValues& m) {
    JsonWriter w;
    w.begin_object();
    w.key("accuracy").value(m.accuracy);
    w.key("sensitivity").value(m.sensitivity);
    w.key("specificity").value(m.specificity);
    w.key("macro_f1").value(m.macro_f1);
    w.key("micro_f1").value(m.micro_f1);
    w.end_object();
    return w.str() + "\n";
}

int cmd_eval(const CommonOpts& o) {
    MmsnModel model = MmsnModel::from_store(ParamStore::load(o.params_path));
    CohortManifest man = load_manifest(o.data_path);
    std::vector<PatientPre> pres = precompute_cohort(load_cohort(man));
    std::vector<PatientMode> modes(pres.size(), PatientMode::unmasked);
    Tensor probs = parallel_probabilities(model, pres, modes);
    Tensor targets(static_cast<int>(pres.size()), kNumLabels);
    for (std::size_t i = 0; i < pres.size(); ++i)
        for (int c = 0; c < kNumLabels; ++c)
            targets.at(static_cast<int>(i), c) = pres[i].labels.at(0, c);
    std::string out = single_metrics_json(compute_metrics(probs, targets));
    if (o.out_path.empty())
        std::fputs(out.c_str(), stdout);
    else
        atomic_write(o.out_path, out);
    return 0;
}

std::vector<double> parse_p_grid(const std::string& grid) {
    std::vector<double> ps;
    std::size_t pos = 0;
    while (pos <= grid.size()) {
        std::size_t comma = grid.find(',', pos);
        std::string tok = grid.substr(pos, comma == std::string::npos ? std::string::npos
                                                                      : comma - pos);
        if (tok.empty()) throw ConfigError("p-grid: empty entry");
        char* end = nullptr;
        double p = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0' || p < 0.0 || p > 1.0)
            throw ConfigError("p-grid: entries must be numbers in [0,1], got '" + tok + "'");
        ps.push_back(p);
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (ps.empty()) throw ConfigError("p-grid: empty grid");
    return ps;
}

int cmd_reconstruct_eval(const CommonOpts& o, const std::string& grid, const std::string& imp) {
    PatientMode masked_mode;
    if (imp == "recon")
        masked_mode = PatientMode::masked_recon;
    else if (imp == "zero")
        masked_mode = PatientMode::masked_zero;
    else
        throw ConfigError("--imputation must be 'recon' or 'zero'");
    std::vector<double> ps = parse_p_grid(grid);

    MmsnModel model = MmsnModel::from_store(ParamStore::load(o.params_path));
    CohortManifest man = load_manifest(o.data_path);
    std::vector<PatientPre> pres = precompute_cohort(load_cohort(man));
    Tensor targets(static_cast<int>(pres.size()), kNumLabels);
    for (std::size_t i = 0; i < pres.size(); ++i)
        for (int c = 0; c < kNumLabels; ++c)
            targets.at(static_cast<int>(i), c) = pres[i].labels.at(0, c);

    std::uint64_t seed = o.seed_set ? o.seed : 0;
    std::string csv;
    for (double p : ps) {
        // mask stream keyed by the p value itself so a given (seed, p) pair
        // masks identically regardless of the rest of the grid
        std::uint64_t p_key;
        static_assert(sizeof(p_key) == sizeof(p));
        std::memcpy(&p_key, &p, sizeof(p));
        Rng mask_rng = Rng(seed).sub("eval-mask").sub("p", p_key);
        std::vector<PatientMode> modes(pres.size());
        int n_masked = 0;
        for (std::size_t i = 0; i < pres.size(); ++i) {
            bool m = mask_modality(p, mask_rng);
            modes[i] = m ? masked_mode : PatientMode::unmasked;
            n_masked += m;
        }
        Tensor probs = parallel_probabilities(model, pres, modes);
        MetricValues mv = compute_metrics(probs, targets);
        csv += fmt_double(p) + "," + fmt_double(mv.accuracy) + "," + fmt_double(mv.sensitivity) +
               "," + fmt_double(mv.specificity) + "," + fmt_double(mv.macro_f1) + "," +
               fmt_double(mv.micro_f1) + "\n";
        std::fprintf(stderr, "p=%s: masked %d/%zu, micro-F1 %.2f\n", fmt_double(p).c_str(),
                     n_masked, pres.size(), mv.micro_f1);
    }
    if (o.out_path.empty())
        std::fputs(csv.c_str(), stdout);
    else
        atomic_write(o.out_path, csv);
    return 0;
}

int cmd_gradcheck(const CommonOpts& o, int max_entries) {
    // self-contained toy batch: 2 patients, one masked, small model
    GeneratorConfig g;
    g.n_patients = 2;
    g.k_regions = 3;
    g.nodes_per_region = 4;
    g.d_mri = 6;
    g.d_hist = 9;
    g.sigma = 0.1;
    g.knn = 2;
    std::uint64_t seed = o.seed_set ? o.seed : 7;
    std::vector<PatientPre> pres = precompute_cohort(generate_patients(g, seed));

    ModelConfig mc;
    mc.d = 8;
    mc.n_latent = 6;
    mc.tau = 0.0;
    mc.n_layers = 2;
    mc.d_mri = g.d_mri;
    mc.d_hist = g.d_hist;
    MmsnModel model = MmsnModel::init(mc, Rng(seed).sub("init"));

    std::vector<int> idx = {0, 1};
    std::vector<bool> masked = {false, true};
    LossWeights w;
    auto loss_fn = [&](Tape& t) {
        TapeCtx ctx = model.bind(t, true);
        return batch_loss(model, t, ctx, pres, idx, &masked, w, true).total;
    };
    GradCheckReport rep = finite_diff_check(model.params, loss_fn, 1e-5, 1e-4, max_entries);
    for (const GradCheckEntry& e : rep.entries)
        std::printf("%-18s max_rel_err %.3e  checked %d skipped %d  %s\n", e.name.c_str(),
                    e.max_rel_err, e.n_checked, e.n_skipped, e.passed ? "ok" : "FAIL");
    std::printf("overall max_rel_err %.3e (%s[%d]) -> %s\n", rep.max_rel_err,
                rep.worst_param.c_str(), rep.worst_index, rep.passed ? "PASS" : "FAIL");
    return rep.passed ? 0 : 5;
}

int cmd_spectrum(const CommonOpts& o) {
    MmsnModel model = MmsnModel::from_store(ParamStore::load(o.params_path));
    CellularSheaf sheaf = sheaf_from_stack(model.topology, model.params.value("latent.rho"));
    BlockMatrix delta = normalize_laplacian(assemble_sheaf_laplacian(sheaf), model.cfg.eps);
    std::string csv;
    for (double ev : spectrum(delta)) csv += fmt_double(ev) + "\n";
    if (o.out_path.empty())
        std::fputs(csv.c_str(), stdout);
    else
        atomic_write(o.out_path, csv);
    return 0;
}

int cmd_export_embeddings(const CommonOpts& o) {
    MmsnModel model = MmsnModel::from_store(ParamStore::load(o.params_path));
    CohortManifest man = load_manifest(o.data_path);
    std::vector<PatientPre> pres = precompute_cohort(load_cohort(man));
    std::string csv;
    for (const PatientPre& pre : pres) {
        Tensor h = model.patient_embedding(pre, PatientMode::unmasked);
        csv += pre.id;
        for (int c = 0; c < h.cols(); ++c) csv += "," + fmt_double(h.at(0, c));
        csv += "\n";
    }
    if (o.out_path.empty())
        std::fputs(csv.c_str(), stdout);
    else
        atomic_write(o.out_path, csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mmsn: sheaf-based multimodal graph network over a shared latent graph"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string p_grid = "0,0.25,0.5,0.75,1.0";
    std::string imputation = "recon";
    int gradcheck_entries = 40;

    auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "master seed")->each([&](const std::string&) {
            o.seed_set = true;
        });
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic cohort");
    synth->add_option("--config", o.config_path, "run config JSON");
    synth->add_option("--out", o.out_path, "output directory")->required();
    add_seed(synth);

    CLI::App* train = app.add_subcommand("train", "cross-validated training run");
    train->add_option("--data", o.data_path, "cohort manifest.json")->required();
    train->add_option("--config", o.config_path, "run config JSON");
    train->add_option("--out", o.out_path, "output directory")->required();
    add_seed(train);

    CLI::App* eval = app.add_subcommand("eval", "metrics on full data, no masking");
    eval->add_option("--data", o.data_path, "cohort manifest.json")->required();
    eval->add_option("--params", o.params_path, "trained params.bin")->required();
    eval->add_option("--out", o.out_path, "metrics JSON path (default stdout)");

    CLI::App* recon = app.add_subcommand("reconstruct-eval", "metrics across dropout rates");
    recon->add_option("--data", o.data_path, "cohort manifest.json")->required();
    recon->add_option("--params", o.params_path, "trained params.bin")->required();
    recon->add_option("--p-grid", p_grid, "comma-separated dropout rates");
    recon->add_option("--imputation", imputation, "'recon' or 'zero' for masked patients");
    recon->add_option("--out", o.out_path, "CSV path (default stdout)");
    add_seed(recon);

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check on a toy batch");
    gradcheck->add_option("--max-entries", gradcheck_entries,
                          "entries checked per parameter (0 = all)");
    add_seed(gradcheck);

    CLI::App* spect = app.add_subcommand("spectrum", "eigenvalues of the latent sheaf Delta");
    spect->add_option("--params", o.params_path, "trained params.bin")->required();
    spect->add_option("--out", o.out_path, "CSV path (default stdout)");

    CLI::App* exp = app.add_subcommand("export-embeddings", "per-patient h_patient rows");
    exp->add_option("--data", o.data_path, "cohort manifest.json")->required();
    exp->add_option("--params", o.params_path, "trained params.bin")->required();
    exp->add_option("--out", o.out_path, "CSV path (default stdout)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(synth)) return cmd_synth(o);
        if (app.got_subcommand(train)) return cmd_train(o);
        if (app.got_subcommand(eval)) return cmd_eval(o);
        if (app.got_subcommand(recon)) return cmd_reconstruct_eval(o, p_grid, imputation);
        if (app.got_subcommand(gradcheck)) return cmd_gradcheck(o, gradcheck_entries);
        if (app.got_subcommand(spect)) return cmd_spectrum(o);
        if (app.got_subcommand(exp)) return cmd_export_embeddings(o);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 3;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 2;
}
