// mmsn/metrics.hpp — multi-label confusion counts, the five reported metrics,
// and k-fold splitting.
#pragma once

#include <array>
#include <vector>

#include "mmsn/errors.hpp"
#include "mmsn/rng.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

constexpr int kNumLabels = 4;

struct ConfusionCounts {
    // indexed by label
    std::array<long, kNumLabels> tp{}, fp{}, tn{}, fn{};

    long total() const {
        long t = 0;
        for (int c = 0; c < kNumLabels; ++c) t += tp[c] + fp[c] + tn[c] + fn[c];
        return t;
    }
};

// probs and targets are n x 4; predicted positive iff prob strictly > threshold.
inline ConfusionCounts confusion_counts(const Tensor& probs, const Tensor& targets,
                                        double threshold = 0.5) {
    check_same_shape(probs, targets, "confusion_counts");
    if (probs.cols() != kNumLabels) throw ContractError("confusion_counts: expected 4 labels");
    ConfusionCounts c;
    for (int i = 0; i < probs.rows(); ++i)
        for (int j = 0; j < kNumLabels; ++j) {
            bool pred = probs.at(i, j) > threshold;
            bool truth = targets.at(i, j) > 0.5;
            if (pred && truth) ++c.tp[j];
            else if (pred && !truth) ++c.fp[j];
            else if (!pred && truth) ++c.fn[j];
            else ++c.tn[j];
        }
    return c;
}

// All five values are percentages in [0, 100]. Per-label ratios with an empty
// denominator contribute 0 to the macro means; pooled micro-F1 with no
// positives anywhere (and none predicted) is 100, consistent with
// "predictions equal targets".
struct MetricValues {
    double accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double macro_f1 = 0.0;
    double micro_f1 = 0.0;
};

inline MetricValues compute_metrics(const ConfusionCounts& c) {
    auto ratio = [](long num, long den) { return den == 0 ? 0.0 : static_cast<double>(num) / den; };
    MetricValues m;
    long correct = 0;
    long pooled_tp = 0, pooled_fp = 0, pooled_fn = 0;
    for (int j = 0; j < kNumLabels; ++j) {
        correct += c.tp[j] + c.tn[j];
        pooled_tp += c.tp[j];
        pooled_fp += c.fp[j];
        pooled_fn += c.fn[j];
        m.sensitivity += ratio(c.tp[j], c.tp[j] + c.fn[j]);
        m.specificity += ratio(c.tn[j], c.tn[j] + c.fp[j]);
        long f1_den = 2 * c.tp[j] + c.fp[j] + c.fn[j];
        m.macro_f1 += ratio(2 * c.tp[j], f1_den);
    }
    m.accuracy = 100.0 * ratio(correct, c.total());
    m.sensitivity *= 100.0 / kNumLabels;
    m.specificity *= 100.0 / kNumLabels;
    m.macro_f1 *= 100.0 / kNumLabels;
    long micro_den = 2 * pooled_tp + pooled_fp + pooled_fn;
    m.micro_f1 = micro_den == 0 ? 100.0 : 100.0 * 2.0 * pooled_tp / micro_den;
    return m;
}

inline MetricValues compute_metrics(const Tensor& probs, const Tensor& targets,
                                    double threshold = 0.5) {
    return compute_metrics(confusion_counts(probs, targets, threshold));
}

// Shuffled near-equal partition; fold f gets one extra patient while n % k
// patients remain. Returns validation index sets; union is 0..n-1, disjoint.
inline std::vector<std::vector<int>> kfold_split(int n, int k, Rng& rng) {
    if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
    if (n < k) throw ConfigError("kfold_split: need at least k patients");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::vector<int>> folds(k);
    int base = n / k, extra = n % k;
    int pos = 0;
    for (int f = 0; f < k; ++f) {
        int size = base + (f < extra ? 1 : 0);
        for (int i = 0; i < size; ++i) folds[f].push_back(order[pos++]);
    }
    return folds;
}

}  // namespace mmsn
