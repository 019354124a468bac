// mmsn/data.hpp — patient-graph file format, cohort manifest, validation, and
// the synthetic paired-graph generator.
//
// The generator encodes the shared-topology hypothesis: both modalities of a
// patient are linear views (plus noise) of the same per-region latent
// prototypes, whose means are determined by the label bits.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mmsn/errors.hpp"
#include "mmsn/jsonio.hpp"
#include "mmsn/metrics.hpp"
#include "mmsn/modality.hpp"
#include "mmsn/rng.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

// Width of the hidden per-region prototypes both modalities are views of.
constexpr int kPrototypeDim = 16;

struct PatientSample {
    std::string id;
    ModalityGraph mri;
    ModalityGraph histo;
    std::array<int, kNumLabels> labels{};

    void validate() const {
        if (id.empty()) throw ValidationError("patient_id: empty");
        bool any = false;
        for (int b : labels) {
            if (b != 0 && b != 1) throw ValidationError("labels: entries must be 0 or 1");
            any = any || b == 1;
        }
        if (!any) throw ValidationError("labels: at least one subtype must be set");
        if (mri.n_nodes() == 0 || histo.n_nodes() == 0) throw ValidationError("graph.empty");
        mri.validate();
        histo.validate();
    }
};

inline Tensor labels_tensor(const std::vector<PatientSample>& patients) {
    Tensor t(static_cast<int>(patients.size()), kNumLabels);
    for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < kNumLabels; ++j) t.at(i, j) = patients[i].labels[j];
    return t;
}

// ---- patient JSON (one document per patient) ----

namespace detail {
inline void write_modality(JsonWriter& w, const ModalityGraph& g) {
    w.begin_object().newline();
    w.key("nodes").begin_array().newline();
    for (int v = 0; v < g.n_nodes(); ++v) {
        w.begin_object();
        w.key("id").value(v);
        w.key("region").value(g.regions[v]);
        w.key("features").begin_array();
        for (int c = 0; c < g.feature_dim(); ++c) w.value(g.features.at(v, c));
        w.end_array();
        w.end_object().newline();
    }
    w.end_array().newline();
    w.key("edges").begin_array();
    for (const auto& [u, v] : g.edges) {
        w.begin_array();
        w.value(u);
        w.value(v);
        w.end_array();
    }
    w.end_array().newline();
    w.end_object();
}
}  // namespace detail

inline std::string patient_to_json(const PatientSample& p) {
    JsonWriter w;
    w.begin_object().newline();
    w.key("patient_id").value(p.id);
    w.newline();
    w.key("labels").begin_array();
    for (int b : p.labels) w.value(b);
    w.end_array().newline();
    w.key("mri");
    detail::write_modality(w, p.mri);
    w.newline();
    w.key("histo");
    detail::write_modality(w, p.histo);
    w.newline();
    w.end_object();
    return w.str() + "\n";
}

namespace detail {
inline ModalityGraph modality_from_json(const Json& j, const std::string& tag,
                                        const std::string& ctx) {
    ModalityGraph g;
    g.modality = tag;
    const Json& nodes = require_field(j, "nodes", ctx);
    if (!nodes.is_array() || nodes.empty()) throw ValidationError("graph.empty");
    int n = static_cast<int>(nodes.size());
    int dim = -1;
    for (int v = 0; v < n; ++v) {
        const Json& node = nodes.at(v);
        if (as_int(require_field(node, "id", ctx), ctx + ".id") != v)
            throw ValidationError(ctx + ".node.id: nodes must be listed in id order");
        g.regions.push_back(as_string(require_field(node, "region", ctx), ctx + ".region"));
        const Json& feats = require_field(node, "features", ctx);
        if (!feats.is_array() || feats.empty())
            throw ValidationError(ctx + ".features: expected nonempty array");
        if (dim == -1) {
            dim = static_cast<int>(feats.size());
            g.features = Tensor(n, dim);
        } else if (static_cast<int>(feats.size()) != dim) {
            throw ValidationError("features.length: inconsistent feature lengths");
        }
        for (int c = 0; c < dim; ++c) g.features.at(v, c) = as_double(feats.at(c), ctx + ".features");
    }
    const Json& edges = require_field(j, "edges", ctx);
    if (!edges.is_array()) throw ValidationError(ctx + ".edges: expected array");
    for (const Json& e : edges) {
        if (!e.is_array() || e.size() != 2) throw ValidationError(ctx + ".edges: expected pairs");
        int u = as_int(e.at(0), ctx + ".edges");
        int v = as_int(e.at(1), ctx + ".edges");
        if (u < 0 || v < 0 || u >= n || v >= n)
            throw ValidationError("edge.endpoint: out of range");
        g.edges.push_back({u, v});
    }
    return g;
}
}  // namespace detail

inline PatientSample patient_from_json(const Json& j, const std::string& origin) {
    PatientSample p;
    p.id = as_string(require_field(j, "patient_id", origin), origin + ".patient_id");
    const Json& labels = require_field(j, "labels", origin);
    if (!labels.is_array() || labels.size() != kNumLabels)
        throw ValidationError("labels: expected 4 entries");
    for (int c = 0; c < kNumLabels; ++c) p.labels[c] = as_int(labels.at(c), origin + ".labels");
    p.mri = detail::modality_from_json(require_field(j, "mri", origin), "mri", origin + ".mri");
    p.histo =
        detail::modality_from_json(require_field(j, "histo", origin), "histo", origin + ".histo");
    p.validate();
    return p;
}

inline PatientSample load_patient(const std::string& path) {
    return patient_from_json(parse_json_file(path), path);
}

inline void save_patient(const std::string& path, const PatientSample& p) {
    atomic_write(path, patient_to_json(p));
}

// ---- generator ----

struct GeneratorConfig {
    int n_patients = 30;
    int k_regions = 4;
    int nodes_per_region = 6;
    int d_mri = 24;
    int d_hist = 40;
    double sigma = 0.8;    // per-entry feature noise (the separability dial)
    int knn = 3;           // inter-region neighbors per node
    double label_prior = 0.18;

    void validate() const {
        if (n_patients < 1) throw ConfigError("generator.n_patients must be >= 1");
        if (k_regions < 1) throw ConfigError("generator.k_regions must be >= 1");
        if (nodes_per_region < 1) throw ConfigError("generator.nodes_per_region must be >= 1");
        if (d_mri < 1 || d_hist < 1) throw ConfigError("generator feature dims must be >= 1");
        if (sigma < 0.0) throw ConfigError("generator.sigma must be >= 0");
        if (knn < 0) throw ConfigError("generator.knn must be >= 0");
        if (label_prior <= 0.0 || label_prior > 1.0)
            throw ConfigError("generator.label_prior must be in (0,1]");
    }
};

inline void generator_config_to_json(JsonWriter& w, const GeneratorConfig& c) {
    w.begin_object();
    w.key("n_patients").value(c.n_patients);
    w.key("k_regions").value(c.k_regions);
    w.key("nodes_per_region").value(c.nodes_per_region);
    w.key("d_mri").value(c.d_mri);
    w.key("d_hist").value(c.d_hist);
    w.key("sigma").value(c.sigma);
    w.key("knn").value(c.knn);
    w.key("label_prior").value(c.label_prior);
    w.end_object();
}

inline GeneratorConfig generator_config_from_json(const Json& j, const std::string& ctx) {
    GeneratorConfig c;
    static const std::set<std::string> known = {"n_patients", "k_regions", "nodes_per_region",
                                                "d_mri",      "d_hist",    "sigma",
                                                "knn",        "label_prior"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError(ctx + ": unknown key '" + key + "'");
    if (j.contains("n_patients")) c.n_patients = as_int(j.at("n_patients"), ctx);
    if (j.contains("k_regions")) c.k_regions = as_int(j.at("k_regions"), ctx);
    if (j.contains("nodes_per_region")) c.nodes_per_region = as_int(j.at("nodes_per_region"), ctx);
    if (j.contains("d_mri")) c.d_mri = as_int(j.at("d_mri"), ctx);
    if (j.contains("d_hist")) c.d_hist = as_int(j.at("d_hist"), ctx);
    if (j.contains("sigma")) c.sigma = as_double(j.at("sigma"), ctx);
    if (j.contains("knn")) c.knn = as_int(j.at("knn"), ctx);
    if (j.contains("label_prior")) c.label_prior = as_double(j.at("label_prior"), ctx);
    c.validate();
    return c;
}

struct CohortManifest {
    std::vector<std::string> files;  // relative to dir
    GeneratorConfig config;
    std::uint64_t seed = 0;
    int d_mri = 0;
    int d_hist = 0;
    std::string dir;  // directory holding manifest + patient files
};

namespace detail {

// Sample one patient's label bits, region prototypes, and paired graphs.
inline PatientSample generate_patient(const GeneratorConfig& cfg,
                                      const std::vector<std::vector<Tensor>>& bank,
                                      const Tensor& a_mri, const Tensor& a_hist, int index,
                                      Rng rng) {
    PatientSample p;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "P%03d", index);
    p.id = buf;

    // label bits: independent Bernoulli(prior), resampled until one is set
    bool any = false;
    while (!any) {
        for (int c = 0; c < kNumLabels; ++c) {
            p.labels[c] = rng.bernoulli(cfg.label_prior) ? 1 : 0;
            any = any || p.labels[c] == 1;
        }
    }

    // per-region prototype z_r = sum_c y_c B[c][r] + jitter. The jitter is a
    // small fixed spread around the label-conditioned mean; it is shared by
    // both modality views, so it stays decoupled from the per-modality
    // feature-noise dial sigma.
    constexpr double kPrototypeJitter = 0.1;
    std::vector<Tensor> protos;
    for (int r = 0; r < cfg.k_regions; ++r) {
        Tensor z(1, kPrototypeDim);
        for (int c = 0; c < kNumLabels; ++c)
            if (p.labels[c]) z = add(z, bank[c][r]);
        for (int j = 0; j < kPrototypeDim; ++j) z.at(0, j) += kPrototypeJitter * rng.normal();
        protos.push_back(std::move(z));
    }

    auto make_graph = [&](const Tensor& a, int d_m, const char* tag) {
        ModalityGraph g;
        g.modality = tag;
        int n = cfg.k_regions * cfg.nodes_per_region;
        g.features = Tensor(n, d_m);
        for (int r = 0; r < cfg.k_regions; ++r) {
            Tensor mean = matmul_nt(protos[r], a);  // 1 x d_m
            for (int j = 0; j < cfg.nodes_per_region; ++j) {
                int v = r * cfg.nodes_per_region + j;
                g.regions.push_back("R" + std::to_string(r));
                for (int c = 0; c < d_m; ++c)
                    g.features.at(v, c) = mean.at(0, c) + cfg.sigma * rng.normal();
            }
        }
        std::set<std::pair<int, int>> edges;
        // intra-region: complete within each label group
        for (int r = 0; r < cfg.k_regions; ++r)
            for (int i = 0; i < cfg.nodes_per_region; ++i)
                for (int j = i + 1; j < cfg.nodes_per_region; ++j)
                    edges.insert({r * cfg.nodes_per_region + i, r * cfg.nodes_per_region + j});
        // inter-region: k nearest feature-space neighbors in other regions
        for (int u = 0; u < n; ++u) {
            std::vector<std::pair<double, int>> cand;
            for (int v = 0; v < n; ++v) {
                if (g.regions[u] == g.regions[v]) continue;
                double dist = 0.0;
                for (int c = 0; c < d_m; ++c) {
                    double diff = g.features.at(u, c) - g.features.at(v, c);
                    dist += diff * diff;
                }
                cand.push_back({dist, v});
            }
            std::stable_sort(cand.begin(), cand.end());
            int take = std::min<int>(cfg.knn, static_cast<int>(cand.size()));
            for (int i = 0; i < take; ++i) {
                int v = cand[i].second;
                edges.insert({std::min(u, v), std::max(u, v)});
            }
        }
        g.edges.assign(edges.begin(), edges.end());
        return g;
    };
    p.mri = make_graph(a_mri, cfg.d_mri, "mri");
    p.histo = make_graph(a_hist, cfg.d_hist, "histo");
    return p;
}

}  // namespace detail

// In-memory generation; deterministic in (cfg, seed), independent of the
// order patients are consumed.
inline std::vector<PatientSample> generate_patients(const GeneratorConfig& cfg,
                                                    std::uint64_t seed) {
    cfg.validate();
    Rng gen = Rng(seed).sub("generator");

    // cohort-level structure: label-conditioned prototype bank and the two
    // modality view maps
    // The last kMicroDims prototype dimensions play the role of microscopic
    // factors: they carry an outsized share of the label signal (bank std 2)
    // and are nearly invisible to the MRI view map below. Histopathology sees
    // the full latent space, MRI mostly the macroscopic remainder — losing
    // histo then costs real information, as in the clinical setting.
    constexpr int kMicroDims = 4;
    constexpr double kMicroBankStd = 2.0;
    constexpr double kMriMicroFactor = 0.05;
    Rng bank_rng = gen.sub("prototypes");
    std::vector<std::vector<Tensor>> bank(kNumLabels);
    for (int c = 0; c < kNumLabels; ++c)
        for (int r = 0; r < cfg.k_regions; ++r) {
            Tensor b = Tensor::normal(1, kPrototypeDim, 1.0, bank_rng);
            for (int j = kPrototypeDim - kMicroDims; j < kPrototypeDim; ++j)
                b.at(0, j) *= kMicroBankStd;
            bank[c].push_back(std::move(b));
        }
    Rng maps_rng = gen.sub("maps");
    // Signal sits well below the unit feature noise per entry; recovering the
    // labels then requires averaging across nodes, feature dims, and (for the
    // microscopic part) the histopathology view, which keeps every pathway
    // useful. a_mri keeps full column rank, so the sigma=0 cross-modal
    // pseudoinverse relation still holds exactly.
    constexpr double kSignalScale = 0.2;
    double map_scale = kSignalScale / std::sqrt(static_cast<double>(kPrototypeDim));
    Tensor a_mri = Tensor::normal(cfg.d_mri, kPrototypeDim, map_scale, maps_rng);
    Tensor a_hist = Tensor::normal(cfg.d_hist, kPrototypeDim, map_scale, maps_rng);
    for (int i = 0; i < cfg.d_mri; ++i)
        for (int j = kPrototypeDim - kMicroDims; j < kPrototypeDim; ++j)
            a_mri.at(i, j) *= kMriMicroFactor;

    std::vector<PatientSample> out;
    out.reserve(cfg.n_patients);
    for (int i = 0; i < cfg.n_patients; ++i)
        out.push_back(detail::generate_patient(cfg, bank, a_mri, a_hist, i, gen.sub("patient", i)));
    return out;
}

// Writes one JSON file per patient plus manifest.json; byte-identical for
// identical (cfg, seed).
inline CohortManifest generate_synthetic_cohort(const GeneratorConfig& cfg, std::uint64_t seed,
                                                const std::string& out_dir) {
    std::vector<PatientSample> patients = generate_patients(cfg, seed);

    CohortManifest manifest;
    manifest.config = cfg;
    manifest.seed = seed;
    manifest.d_mri = cfg.d_mri;
    manifest.d_hist = cfg.d_hist;
    manifest.dir = out_dir;

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    for (const PatientSample& p : patients) {
        std::string fname = "patient_" + p.id + ".json";
        save_patient((fs::path(out_dir) / fname).string(), p);
        manifest.files.push_back(fname);
    }

    JsonWriter w;
    w.begin_object().newline();
    w.key("seed").value(static_cast<unsigned long long>(seed));
    w.newline();
    w.key("d_mri").value(manifest.d_mri);
    w.newline();
    w.key("d_hist").value(manifest.d_hist);
    w.newline();
    w.key("config");
    generator_config_to_json(w, cfg);
    w.newline();
    w.key("files").begin_array();
    for (const std::string& f : manifest.files) w.value(f);
    w.end_array().newline();
    w.end_object();
    atomic_write((fs::path(out_dir) / "manifest.json").string(), w.str() + "\n");
    return manifest;
}

inline CohortManifest load_manifest(const std::string& path) {
    Json j = parse_json_file(path);
    CohortManifest m;
    m.seed = require_field(j, "seed", path).get<std::uint64_t>();
    m.d_mri = as_int(require_field(j, "d_mri", path), path + ".d_mri");
    m.d_hist = as_int(require_field(j, "d_hist", path), path + ".d_hist");
    m.config = generator_config_from_json(require_field(j, "config", path), path + ".config");
    const Json& files = require_field(j, "files", path);
    if (!files.is_array() || files.empty())
        throw ValidationError(path + ".files: expected nonempty array");
    for (const Json& f : files) m.files.push_back(as_string(f, path + ".files"));
    m.dir = std::filesystem::path(path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";
    return m;
}

inline std::vector<PatientSample> load_cohort(const CohortManifest& m) {
    std::vector<PatientSample> patients;
    patients.reserve(m.files.size());
    for (const std::string& f : m.files) {
        PatientSample p = load_patient((std::filesystem::path(m.dir) / f).string());
        if (p.mri.feature_dim() != m.d_mri)
            throw ValidationError(f + ": mri feature dim differs from manifest");
        if (p.histo.feature_dim() != m.d_hist)
            throw ValidationError(f + ": histo feature dim differs from manifest");
        patients.push_back(std::move(p));
    }
    return patients;
}

struct FileCheck {
    std::string file;
    bool ok = false;
    std::string message;
};

struct CohortReport {
    std::vector<FileCheck> checks;
    std::array<long, kNumLabels> label_counts{};
    int n_ok = 0;
    bool all_ok = true;
};

inline CohortReport validate_cohort(const CohortManifest& m) {
    CohortReport report;
    for (const std::string& f : m.files) {
        FileCheck check;
        check.file = f;
        try {
            PatientSample p = load_patient((std::filesystem::path(m.dir) / f).string());
            if (p.mri.feature_dim() != m.d_mri || p.histo.feature_dim() != m.d_hist)
                throw ValidationError("feature dims differ from manifest");
            check.ok = true;
            ++report.n_ok;
            for (int c = 0; c < kNumLabels; ++c) report.label_counts[c] += p.labels[c];
        } catch (const std::exception& e) {
            check.message = e.what();
            report.all_ok = false;
        }
        report.checks.push_back(std::move(check));
    }
    return report;
}

}  // namespace mmsn
