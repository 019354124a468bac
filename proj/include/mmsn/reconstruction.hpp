// mmsn/reconstruction.hpp — missing-modality masking and reconstruction
// through the learned restriction maps.
#pragma once

#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/rng.hpp"
#include "mmsn/sheaf.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

// Per-patient masking decision; only histopathology is maskable (MRI always
// present, matching the evaluation scenario this models).
struct MaskState {
    std::vector<bool> histo_masked;
    double p = 0.0;

    bool any_masked() const {
        for (bool m : histo_masked)
            if (m) return true;
        return false;
    }
    int n_masked() const {
        int n = 0;
        for (bool m : histo_masked) n += m;
        return n;
    }
};

inline bool mask_modality(double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw ConfigError("mask_modality: p must be in [0,1]");
    return rng.bernoulli(p);
}

inline MaskState mask_cohort(int n_patients, double p, Rng& rng) {
    MaskState state;
    state.p = p;
    state.histo_masked.reserve(n_patients);
    for (int i = 0; i < n_patients; ++i) state.histo_masked.push_back(mask_modality(p, rng));
    return state;
}

// e_v = sum over incident edges of rho_{e,v} h_v; the restriction maps act as
// structural anchors feeding the reconstruction MLP.
inline Var aggregate_edge_stalks(const LatentSheafOps& ops, const Var& node_features) {
    return own_edge_aggregate(ops, node_features);
}

// Two linear layers d -> d with relu between.
struct ReconParams {
    Var w1, b1, w2, b2;
};

inline Var reconstruct_missing(const Var& edge_aggregates, const ReconParams& p) {
    Var hidden = relu(add_rowvec(matmul(edge_aggregates, p.w1), p.b1));
    return add_rowvec(matmul(hidden, p.w2), p.b2);
}

// sum_v ||x_v - x~_v||^2 over latent nodes, summed (not averaged).
inline Var recon_loss(const Var& reconstructed, const Var& target) {
    return sum_sq_diff(reconstructed, target);
}

// Substitutes the reconstruction for the missing modality's projection; the
// downstream fusion/readout path is unchanged.
inline Var inject_reconstruction(bool modality_masked, const Var& base, const Var& xhat_available,
                                 const Var& reconstructed) {
    if (!modality_masked) throw ContractError("inject_reconstruction: nothing is masked");
    return add(add(base, xhat_available), reconstructed);
}

}  // namespace mmsn
