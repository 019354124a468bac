// mmsn/train.hpp — Eq.-style total loss assembly, the full-batch Adam
// training loop with step decay and early stopping, and k-fold
// cross-validation with metrics reporting.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mmsn/autodiff.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/jsonio.hpp"
#include "mmsn/metrics.hpp"
#include "mmsn/model.hpp"
#include "mmsn/reconstruction.hpp"

namespace mmsn {

struct LossWeights {
    double lambda1 = 1.0;  // classification
    double lambda2 = 0.5;  // reconstruction
    double lambda3 = 0.1;  // consistency

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0)
            throw ConfigError("loss weights must be nonnegative");
        if (lambda1 == 0.0 && lambda2 == 0.0 && lambda3 == 0.0)
            throw ConfigError("loss weights must not all be zero");
    }
};

struct TrainConfig {
    int epochs = 100;
    double lr = 0.02;
    int patience = 20;
    double min_delta = 1e-4;
    double dropout_p = 0.0;  // histo masking probability during training
    bool zero_impute = false;  // masked patients use x_tilde = 0 instead of MLP_recon
    int folds = 3;
    std::uint64_t seed = 42;
    LossWeights weights;
    ModelConfig model;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (lr <= 0.0) throw ConfigError("train.lr must be positive");
        if (patience < 1) throw ConfigError("train.patience must be >= 1");
        if (min_delta < 0.0) throw ConfigError("train.min_delta must be >= 0");
        if (dropout_p < 0.0 || dropout_p > 1.0) throw ConfigError("train.dropout_p must be in [0,1]");
        if (folds < 2) throw ConfigError("train.folds must be >= 2");
        weights.validate();
        model.validate();
    }
};

struct BatchLoss {
    Var total, cls, recon, cons;
};

// Total loss over a patient subset on one tape. Classification is mean BCE
// over all logits; reconstruction averages over masked patients (zero when
// none are masked); consistency averages the per-patient normalized Dirichlet
// energy.
inline BatchLoss batch_loss(MmsnModel& model, Tape& t, TapeCtx& ctx,
                            const std::vector<PatientPre>& pres, const std::vector<int>& indices,
                            const std::vector<bool>* masked, const LossWeights& w,
                            bool with_recon_target,
                            PatientMode masked_mode = PatientMode::masked_recon) {
    if (indices.empty()) throw ContractError("batch_loss: empty index set");
    std::vector<Var> logit_rows, cons_parts, recon_parts;
    Tensor targets(static_cast<int>(indices.size()), kNumLabels);
    for (std::size_t row = 0; row < indices.size(); ++row) {
        int i = indices[row];
        bool is_masked = masked != nullptr && (*masked)[i];
        PatientMode mode = is_masked ? masked_mode : PatientMode::unmasked;
        PatientForward f = model.forward_patient(t, ctx, pres[i], mode, with_recon_target);
        logit_rows.push_back(f.logits);
        cons_parts.push_back(f.consistency);
        if (f.recon.defined()) recon_parts.push_back(f.recon);
        for (int c = 0; c < kNumLabels; ++c)
            targets.at(static_cast<int>(row), c) = pres[i].labels.at(0, c);
    }
    BatchLoss out;
    out.cls = bce_with_logits(concat_rows(logit_rows), targets);
    out.cons = mean_of(cons_parts);
    out.recon = recon_parts.empty() ? t.constant(Tensor::zeros(1, 1)) : mean_of(recon_parts);
    out.total = add(add(scale(out.cls, w.lambda1), scale(out.recon, w.lambda2)),
                    scale(out.cons, w.lambda3));
    return out;
}

struct EpochRow {
    int epoch;
    double train_loss;
    double val_loss;
    double lr;
};

struct FoldResult {
    int fold = 0;
    ParamStore best_params;
    std::vector<EpochRow> history;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int stopped_epoch = 0;
    MetricValues train_metrics, val_metrics;
    std::uint64_t topo_hash = 0;
};

inline double scheduled_lr(double base_lr, int epoch) {
    // step decay: halve every 40 epochs (epochs are 1-based)
    return base_lr * std::pow(0.5, (epoch - 1) / 40);
}

// Full-batch Adam over the training subset; per-epoch masking draws from the
// fold's masking stream; early stop when validation total loss fails to
// improve by min_delta for `patience` epochs. Returns the best-validation
// snapshot.
inline FoldResult train_fold(const std::vector<PatientPre>& pres,
                             const std::vector<int>& train_idx, const std::vector<int>& val_idx,
                             const TrainConfig& cfg, int fold_index) {
    cfg.validate();
    if (train_idx.empty() || val_idx.empty())
        throw ContractError("train_fold: empty train or validation set");

    Rng master(cfg.seed);
    MmsnModel model = MmsnModel::init(cfg.model, master.sub("init", fold_index));
    Rng mask_stream = master.sub("masking", fold_index);
    std::uint64_t topo0 = model.topo_hash();

    FoldResult res;
    res.fold = fold_index;
    res.topo_hash = topo0;
    res.best_params = model.params.snapshot();
    int since_improve = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double lr = scheduled_lr(cfg.lr, epoch);
        try {
            // fresh mask each epoch
            std::vector<bool> masked(pres.size(), false);
            Rng epoch_rng = mask_stream.sub("epoch", epoch);
            for (int i : train_idx) masked[i] = mask_modality(cfg.dropout_p, epoch_rng);

            PatientMode masked_mode =
                cfg.zero_impute ? PatientMode::masked_zero : PatientMode::masked_recon;
            Tape t;
            TapeCtx ctx = model.bind(t, /*trainable=*/true);
            BatchLoss batch = batch_loss(model, t, ctx, pres, train_idx, &masked, cfg.weights,
                                         /*with_recon_target=*/true, masked_mode);
            double train_loss = batch.total.scalar();
            model.params.zero_grad();
            t.backward(batch.total);
            model.params.adam_step(lr);

            // validation: unmasked, no gradients
            Tape tv;
            TapeCtx vctx = model.bind(tv, /*trainable=*/false);
            BatchLoss vbatch = batch_loss(model, tv, vctx, pres, val_idx, nullptr, cfg.weights,
                                          /*with_recon_target=*/false);
            double val_loss = vbatch.total.scalar();

            res.history.push_back({epoch, train_loss, val_loss, lr});
            res.stopped_epoch = epoch;

            if (model.topo_hash() != topo0)
                throw ContractError("train_fold: latent topology changed during training");

            if (val_loss < res.best_val_loss - cfg.min_delta) {
                res.best_val_loss = val_loss;
                res.best_epoch = epoch;
                res.best_params = model.params.snapshot();
                since_improve = 0;
            } else {
                if (val_loss < res.best_val_loss) {
                    // still track the strictly best snapshot even when the
                    // improvement is below min_delta
                    res.best_val_loss = val_loss;
                    res.best_epoch = epoch;
                    res.best_params = model.params.snapshot();
                }
                ++since_improve;
                if (since_improve >= cfg.patience) break;
            }
        } catch (const NumericError& e) {
            throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
        }
    }

    MmsnModel best = model;
    best.params = res.best_params.snapshot();
    res.train_metrics = evaluate_patients(best, pres, train_idx);
    res.val_metrics = evaluate_patients(best, pres, val_idx);
    return res;
}

struct CvResult {
    std::vector<FoldResult> folds;
    std::vector<std::vector<int>> val_indices;  // per fold
    MetricValues mean;                          // of validation metrics
};

inline std::vector<int> complement_of(const std::vector<int>& val, int n) {
    std::vector<bool> in_val(n, false);
    for (int i : val) in_val[i] = true;
    std::vector<int> train;
    for (int i = 0; i < n; ++i)
        if (!in_val[i]) train.push_back(i);
    return train;
}

inline CvResult cross_validate(const std::vector<PatientPre>& pres, const TrainConfig& cfg) {
    cfg.validate();
    int n = static_cast<int>(pres.size());
    Rng fold_rng = Rng(cfg.seed).sub("folds");
    CvResult cv;
    cv.val_indices = kfold_split(n, cfg.folds, fold_rng);
    for (int f = 0; f < cfg.folds; ++f) {
        std::vector<int> train_idx = complement_of(cv.val_indices[f], n);
        cv.folds.push_back(train_fold(pres, train_idx, cv.val_indices[f], cfg, f));
    }
    auto acc = [&](auto pick) {
        double s = 0.0;
        for (const FoldResult& fr : cv.folds) s += pick(fr.val_metrics);
        return s / cv.folds.size();
    };
    cv.mean.accuracy = acc([](const MetricValues& m) { return m.accuracy; });
    cv.mean.sensitivity = acc([](const MetricValues& m) { return m.sensitivity; });
    cv.mean.specificity = acc([](const MetricValues& m) { return m.specificity; });
    cv.mean.macro_f1 = acc([](const MetricValues& m) { return m.macro_f1; });
    cv.mean.micro_f1 = acc([](const MetricValues& m) { return m.micro_f1; });
    return cv;
}

// ---- run artifacts ----

inline std::string history_csv(const std::vector<EpochRow>& rows) {
    std::string out = "epoch,train_loss,val_loss,lr\n";
    for (const EpochRow& r : rows) {
        out += std::to_string(r.epoch);
        out += ',';
        out += fmt_double(r.train_loss);
        out += ',';
        out += fmt_double(r.val_loss);
        out += ',';
        out += fmt_double(r.lr);
        out += '\n';
    }
    return out;
}

namespace detail {
inline void metrics_fields(JsonWriter& w, const MetricValues& m) {
    w.key("accuracy").value(m.accuracy);
    w.key("sensitivity").value(m.sensitivity);
    w.key("specificity").value(m.specificity);
    w.key("macro_f1").value(m.macro_f1);
    w.key("micro_f1").value(m.micro_f1);
}
}  // namespace detail

inline std::string metrics_json(const CvResult& cv) {
    JsonWriter w;
    w.begin_object().newline();
    w.key("folds").begin_array().newline();
    for (const FoldResult& f : cv.folds) {
        w.begin_object();
        w.key("fold").value(f.fold + 1);
        detail::metrics_fields(w, f.val_metrics);
        w.end_object().newline();
    }
    w.end_array().newline();
    w.key("mean").begin_object();
    detail::metrics_fields(w, cv.mean);
    w.end_object().newline();
    w.end_object();
    return w.str() + "\n";
}

}  // namespace mmsn
