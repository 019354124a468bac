// mmsn/model.hpp — the full network: per-modality encoders, soft assignment
// onto the shared latent graph, sheaf diffusion, reconstruction, and the
// classification head, glued to a named ParamStore.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/data.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/latent.hpp"
#include "mmsn/metrics.hpp"
#include "mmsn/modality.hpp"
#include "mmsn/param_store.hpp"
#include "mmsn/reconstruction.hpp"
#include "mmsn/rng.hpp"
#include "mmsn/sheaf.hpp"

namespace mmsn {

struct ModelConfig {
    int d = 32;         // shared latent width and stalk dimension
    int n_latent = 16;  // latent nodes
    double tau = 0.2;   // cosine threshold for latent edges
    int n_layers = 2;   // sheaf diffusion layers
    double eps = 1e-8;  // eigenvalue clamp in D^{-1/2}
    int d_mri = 24;
    int d_hist = 40;

    void validate() const {
        if (d < 1) throw ConfigError("model.d must be >= 1");
        if (n_latent < 2) throw ConfigError("model.n_latent must be >= 2");
        if (n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
        if (eps <= 0.0) throw ConfigError("model.eps must be positive");
        if (d_mri < 1 || d_hist < 1) throw ConfigError("model feature dims must be >= 1");
    }
};

// Parameter-independent per-patient work, done once and reused every epoch.
struct PatientPre {
    std::string id;
    EncodedModality mri;
    EncodedModality histo;
    Tensor labels{1, kNumLabels};
};

inline PatientPre precompute_patient(const PatientSample& p) {
    PatientPre pre;
    pre.id = p.id;
    pre.mri = encode_modality(p.mri);
    pre.histo = encode_modality(p.histo);
    for (int c = 0; c < kNumLabels; ++c) pre.labels.at(0, c) = p.labels[c];
    return pre;
}

inline std::vector<PatientPre> precompute_cohort(const std::vector<PatientSample>& ps) {
    std::vector<PatientPre> out;
    out.reserve(ps.size());
    for (const PatientSample& p : ps) out.push_back(precompute_patient(p));
    return out;
}

enum class PatientMode { unmasked, masked_recon, masked_zero };

// All parameters bound onto one tape, plus the Delta operator pieces shared
// by every patient on that tape.
struct TapeCtx {
    Tape* tape = nullptr;
    Var enc_mri_w, enc_histo_w;
    AssignParams assign_mri, assign_histo;
    Var h0, rho;
    std::vector<Var> diff_w;
    ReconParams recon;
    Var head_w, head_b;
    LatentSheafOps ops;
};

struct PatientForward {
    Var logits;       // 1 x 4
    Var h_patient;    // 1 x 2d
    Var consistency;  // scalar, dirichlet / |E_l|
    Var recon;        // scalar; defined only in masked_recon training mode
};

class MmsnModel {
public:
    ModelConfig cfg;
    StalkGraph topology;  // latent graph, stalk dimension d
    ParamStore params;

    static MmsnModel init(const ModelConfig& cfg, const Rng& init_rng) {
        cfg.validate();
        MmsnModel m;
        m.cfg = cfg;

        Rng latent_rng = init_rng.sub("latent");
        LatentGraph lg = init_latent_graph(cfg.n_latent, cfg.d, cfg.tau, latent_rng);
        m.topology = lg.topology;
        int n_edges = m.topology.n_edges();

        ParamStore& s = m.params;
        auto glorot = [&](const std::string& name, int fan_in, int fan_out) {
            Rng r = init_rng.sub(name);
            s.add(name, glorot_uniform(fan_in, fan_out, r));
        };
        glorot("enc.mri.w", cfg.d_mri, cfg.d);
        glorot("enc.histo.w", cfg.d_hist, cfg.d);
        for (const char* mod : {"mri", "histo"}) {
            std::string base = std::string("assign.") + mod;
            glorot(base + ".w1", cfg.d, cfg.d);
            s.add(base + ".b1", Tensor::zeros(1, cfg.d));
            glorot(base + ".w2", cfg.d, cfg.n_latent);
            s.add(base + ".b2", Tensor::zeros(1, cfg.n_latent));
        }
        s.add("latent.h0", lg.features);
        {
            // per-block glorot over the stacked d x d restriction maps
            Rng r = init_rng.sub("latent.rho");
            double a = std::sqrt(6.0 / (cfg.d + cfg.d));
            s.add("latent.rho", Tensor::uniform(2 * n_edges * cfg.d, cfg.d, -a, a, r));
        }
        for (int l = 0; l < cfg.n_layers; ++l)
            glorot("diff.w" + std::to_string(l), cfg.d, cfg.d);
        // identity at init (residual-style): the reconstruction starts as a
        // passthrough of the aggregated edge stalks, so early training pulls
        // the target toward a live signal instead of collapsing both to zero
        s.add("recon.w1", Tensor::eye(cfg.d));
        s.add("recon.b1", Tensor::zeros(1, cfg.d));
        s.add("recon.w2", Tensor::eye(cfg.d));
        s.add("recon.b2", Tensor::zeros(1, cfg.d));
        glorot("head.w", 2 * cfg.d, kNumLabels);
        s.add("head.b", Tensor::zeros(1, kNumLabels));

        // buffers so a params.bin alone reconstructs the model
        Tensor topo(std::max(n_edges, 1), 2);
        for (int e = 0; e < n_edges; ++e) {
            topo.at(e, 0) = m.topology.edges[e].first;
            topo.at(e, 1) = m.topology.edges[e].second;
        }
        s.add_buffer("latent.topology", topo);
        Tensor dims(1, 7);
        dims.at(0, 0) = cfg.d;
        dims.at(0, 1) = cfg.n_latent;
        dims.at(0, 2) = cfg.n_layers;
        dims.at(0, 3) = cfg.d_mri;
        dims.at(0, 4) = cfg.d_hist;
        dims.at(0, 5) = cfg.eps;
        dims.at(0, 6) = cfg.tau;
        s.add_buffer("meta.dims", dims);
        return m;
    }

    static MmsnModel from_store(ParamStore store) {
        MmsnModel m;
        const Tensor& dims = store.value("meta.dims");
        if (dims.rows() != 1 || dims.cols() != 7)
            throw ValidationError("meta.dims: expected 1x7 buffer");
        m.cfg.d = static_cast<int>(std::lround(dims.at(0, 0)));
        m.cfg.n_latent = static_cast<int>(std::lround(dims.at(0, 1)));
        m.cfg.n_layers = static_cast<int>(std::lround(dims.at(0, 2)));
        m.cfg.d_mri = static_cast<int>(std::lround(dims.at(0, 3)));
        m.cfg.d_hist = static_cast<int>(std::lround(dims.at(0, 4)));
        m.cfg.eps = dims.at(0, 5);
        m.cfg.tau = dims.at(0, 6);
        m.cfg.validate();
        const Tensor& topo = store.value("latent.topology");
        std::vector<std::pair<int, int>> edges;
        for (int e = 0; e < topo.rows(); ++e) {
            int u = static_cast<int>(std::lround(topo.at(e, 0)));
            int v = static_cast<int>(std::lround(topo.at(e, 1)));
            if (u == 0 && v == 0 && topo.rows() == 1) break;  // edgeless placeholder
            edges.push_back({u, v});
        }
        m.topology = StalkGraph(m.cfg.n_latent, m.cfg.d, std::move(edges));
        m.params = std::move(store);
        return m;
    }

    std::uint64_t topo_hash() const { return topology_hash(topology); }

    PatientPre precompute(const PatientSample& p) const {
        if (p.mri.feature_dim() != cfg.d_mri)
            throw ValidationError(p.id + ": mri feature dim " +
                                  std::to_string(p.mri.feature_dim()) + " != model d_mri");
        if (p.histo.feature_dim() != cfg.d_hist)
            throw ValidationError(p.id + ": histo feature dim " +
                                  std::to_string(p.histo.feature_dim()) + " != model d_hist");
        return precompute_patient(p);
    }

    // Binds every parameter onto the tape (as trainable leaves or constants)
    // and assembles the shared Delta operator once.
    TapeCtx bind(Tape& t, bool trainable) {
        TapeCtx c;
        c.tape = &t;
        auto take = [&](const std::string& name) {
            return trainable && params.slot(name).trainable ? t.param(params, name)
                                                            : t.constant(params.value(name));
        };
        c.enc_mri_w = take("enc.mri.w");
        c.enc_histo_w = take("enc.histo.w");
        c.assign_mri = {take("assign.mri.w1"), take("assign.mri.b1"), take("assign.mri.w2"),
                        take("assign.mri.b2")};
        c.assign_histo = {take("assign.histo.w1"), take("assign.histo.b1"),
                          take("assign.histo.w2"), take("assign.histo.b2")};
        c.h0 = take("latent.h0");
        c.rho = take("latent.rho");
        for (int l = 0; l < cfg.n_layers; ++l) c.diff_w.push_back(take("diff.w" + std::to_string(l)));
        c.recon = {take("recon.w1"), take("recon.b1"), take("recon.w2"), take("recon.b2")};
        c.head_w = take("head.w");
        c.head_b = take("head.b");
        c.ops = make_latent_sheaf_ops(t, c.rho, topology, cfg.eps);
        return c;
    }

    // Encoder + assignment + projection for one modality: X_hat = P^T x.
    Var project_modality(Tape& t, const TapeCtx& c, const EncodedModality& enc,
                         bool is_histo) const {
        Var x = encoder_layer(t, enc, is_histo ? c.enc_histo_w : c.enc_mri_w);
        Var p = soft_assign(x, is_histo ? c.assign_histo : c.assign_mri);
        return project_to_latent(p, x);
    }

    // Ground-truth latent projection of the histo modality under the current
    // parameters, computed on a constant-bound tape (diagnostics and the
    // substitution-identity check; training uses the live tape instead).
    Tensor histo_projection(const PatientPre& pre) {
        Tape t;
        TapeCtx c = bind(t, /*trainable=*/false);
        Var xhat = project_modality(t, c, pre.histo, /*is_histo=*/true);
        return t.val(xhat);
    }

    // Full forward for one patient. In masked modes the histo graph is never
    // touched except for the reconstruction target, and only when
    // with_recon_target is set (training); evaluation paths pass false.
    PatientForward forward_patient(Tape& t, const TapeCtx& c, const PatientPre& pre,
                                   PatientMode mode, bool with_recon_target) {
        PatientForward out;
        Var xhat_mri = project_modality(t, c, pre.mri, /*is_histo=*/false);

        Var fused;
        if (mode == PatientMode::unmasked) {
            Var xhat_histo = project_modality(t, c, pre.histo, /*is_histo=*/true);
            fused = fuse_modalities(c.h0, xhat_mri, xhat_histo);
        } else {
            // diffuse the available modality, aggregate own-edge stalks, and
            // reconstruct the missing projection
            Var avail = add(c.h0, xhat_mri);
            Var h = avail;
            for (int l = 0; l < cfg.n_layers; ++l)
                h = sheaf_gcn(c.ops, h, c.diff_w[l],
                              l + 1 < cfg.n_layers ? Activation::relu : Activation::identity);
            if (mode == PatientMode::masked_recon) {
                Var ev = aggregate_edge_stalks(c.ops, h);
                Var xt = reconstruct_missing(ev, c.recon);
                if (with_recon_target) {
                    // Eq. (2) target: the true projection, differentiable so
                    // the whole objective agrees with finite differences
                    Var target = project_modality(t, c, pre.histo, /*is_histo=*/true);
                    out.recon = recon_loss(xt, target);
                }
                fused = inject_reconstruction(true, c.h0, xhat_mri, xt);
            } else {
                fused = avail;  // zero imputation: the missing term is absent
            }
        }

        Var h = fused;
        for (int l = 0; l < cfg.n_layers; ++l)
            h = sheaf_gcn(c.ops, h, c.diff_w[l],
                          l + 1 < cfg.n_layers ? Activation::relu : Activation::identity);
        Var e = edge_features(c.ops, h);
        out.consistency = scale(dirichlet(c.ops, h), 1.0 / topology.n_edges());
        out.h_patient = readout(h, e);
        out.logits = add(matmul(out.h_patient, c.head_w), c.head_b);
        return out;
    }

    // ---- evaluation helpers (constant-bound tapes, no gradients) ----

    Tensor patient_probabilities(const PatientPre& pre, PatientMode mode) {
        Tape t;
        TapeCtx c = bind(t, /*trainable=*/false);
        PatientForward f = forward_patient(t, c, pre, mode, /*with_recon_target=*/false);
        Tensor probs = t.val(f.logits);
        for (int i = 0; i < probs.size(); ++i)
            probs[i] = probs[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-probs[i]))
                                       : std::exp(probs[i]) / (1.0 + std::exp(probs[i]));
        return probs;
    }

    Tensor patient_embedding(const PatientPre& pre, PatientMode mode) {
        Tape t;
        TapeCtx c = bind(t, /*trainable=*/false);
        PatientForward f = forward_patient(t, c, pre, mode, /*with_recon_target=*/false);
        return t.val(f.h_patient);
    }
};

// Metrics over a patient subset; mode chosen per patient (masked[i] applies
// masked_mode instead of unmasked).
inline MetricValues evaluate_patients(MmsnModel& model, const std::vector<PatientPre>& pres,
                                      const std::vector<int>& indices,
                                      const std::vector<bool>* masked = nullptr,
                                      PatientMode masked_mode = PatientMode::masked_recon,
                                      double threshold = 0.5) {
    if (indices.empty()) throw ContractError("evaluate_patients: empty index set");
    Tensor probs(static_cast<int>(indices.size()), kNumLabels);
    Tensor targets(static_cast<int>(indices.size()), kNumLabels);
    for (std::size_t row = 0; row < indices.size(); ++row) {
        int i = indices[row];
        PatientMode mode =
            (masked != nullptr && (*masked)[i]) ? masked_mode : PatientMode::unmasked;
        Tensor p = model.patient_probabilities(pres[i], mode);
        for (int c = 0; c < kNumLabels; ++c) {
            probs.at(static_cast<int>(row), c) = p.at(0, c);
            targets.at(static_cast<int>(row), c) = pres[i].labels.at(0, c);
        }
    }
    return compute_metrics(probs, targets, threshold);
}

}  // namespace mmsn
