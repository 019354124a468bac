// mmsn/config.hpp — run configuration: JSON in (unknown keys rejected),
// fully materialized snapshot out.
#pragma once

#include <set>
#include <string>

#include "mmsn/data.hpp"
#include "mmsn/errors.hpp"
#include "mmsn/jsonio.hpp"
#include "mmsn/train.hpp"

namespace mmsn {

struct RunConfig {
    GeneratorConfig generator;
    TrainConfig train;  // carries ModelConfig in train.model

    static RunConfig from_json(const Json& j, const std::string& ctx) {
        RunConfig rc;
        static const std::set<std::string> sections = {"generator", "model", "train"};
        for (const auto& [key, _] : j.items())
            if (!sections.count(key)) throw ConfigError(ctx + ": unknown key '" + key + "'");

        if (j.contains("generator"))
            rc.generator = generator_config_from_json(j.at("generator"), ctx + ".generator");

        if (j.contains("model")) {
            const Json& m = j.at("model");
            static const std::set<std::string> known = {"d", "n_latent", "tau", "n_layers", "eps"};
            for (const auto& [key, _] : m.items())
                if (!known.count(key)) throw ConfigError(ctx + ".model: unknown key '" + key + "'");
            if (m.contains("d")) rc.train.model.d = as_int(m.at("d"), ctx + ".model.d");
            if (m.contains("n_latent"))
                rc.train.model.n_latent = as_int(m.at("n_latent"), ctx + ".model.n_latent");
            if (m.contains("tau")) rc.train.model.tau = as_double(m.at("tau"), ctx + ".model.tau");
            if (m.contains("n_layers"))
                rc.train.model.n_layers = as_int(m.at("n_layers"), ctx + ".model.n_layers");
            if (m.contains("eps")) rc.train.model.eps = as_double(m.at("eps"), ctx + ".model.eps");
        }

        if (j.contains("train")) {
            const Json& t = j.at("train");
            static const std::set<std::string> known = {"epochs",   "lr",      "patience",
                                                        "min_delta", "dropout_p", "zero_impute",
                                                        "folds",    "seed",    "lambda1",
                                                        "lambda2",  "lambda3"};
            for (const auto& [key, _] : t.items())
                if (!known.count(key)) throw ConfigError(ctx + ".train: unknown key '" + key + "'");
            if (t.contains("epochs")) rc.train.epochs = as_int(t.at("epochs"), ctx + ".train.epochs");
            if (t.contains("lr")) rc.train.lr = as_double(t.at("lr"), ctx + ".train.lr");
            if (t.contains("patience"))
                rc.train.patience = as_int(t.at("patience"), ctx + ".train.patience");
            if (t.contains("min_delta"))
                rc.train.min_delta = as_double(t.at("min_delta"), ctx + ".train.min_delta");
            if (t.contains("dropout_p"))
                rc.train.dropout_p = as_double(t.at("dropout_p"), ctx + ".train.dropout_p");
            if (t.contains("zero_impute")) {
                if (!t.at("zero_impute").is_boolean())
                    throw ConfigError(ctx + ".train.zero_impute: expected boolean");
                rc.train.zero_impute = t.at("zero_impute").get<bool>();
            }
            if (t.contains("folds")) rc.train.folds = as_int(t.at("folds"), ctx + ".train.folds");
            if (t.contains("seed")) {
                if (!t.at("seed").is_number_integer())
                    throw ConfigError(ctx + ".train.seed: expected integer");
                rc.train.seed = t.at("seed").get<std::uint64_t>();
            }
            if (t.contains("lambda1"))
                rc.train.weights.lambda1 = as_double(t.at("lambda1"), ctx + ".train.lambda1");
            if (t.contains("lambda2"))
                rc.train.weights.lambda2 = as_double(t.at("lambda2"), ctx + ".train.lambda2");
            if (t.contains("lambda3"))
                rc.train.weights.lambda3 = as_double(t.at("lambda3"), ctx + ".train.lambda3");
        }

        rc.generator.validate();
        // model dims come from the data at run time; validate the rest here
        ModelConfig probe = rc.train.model;
        probe.d_mri = 1;
        probe.d_hist = 1;
        probe.validate();
        return rc;
    }

    static RunConfig from_file(const std::string& path) {
        return from_json(parse_json_file(path), path);
    }

    // Every default materialized, so the snapshot alone reproduces the run.
    std::string to_json() const {
        JsonWriter w;
        w.begin_object().newline();
        w.key("generator");
        generator_config_to_json(w, generator);
        w.newline();
        w.key("model").begin_object();
        w.key("d").value(train.model.d);
        w.key("n_latent").value(train.model.n_latent);
        w.key("tau").value(train.model.tau);
        w.key("n_layers").value(train.model.n_layers);
        w.key("eps").value(train.model.eps);
        w.end_object().newline();
        w.key("train").begin_object();
        w.key("epochs").value(train.epochs);
        w.key("lr").value(train.lr);
        w.key("patience").value(train.patience);
        w.key("min_delta").value(train.min_delta);
        w.key("dropout_p").value(train.dropout_p);
        w.key("zero_impute").value(train.zero_impute);
        w.key("folds").value(train.folds);
        w.key("seed").value(static_cast<unsigned long long>(train.seed));
        w.key("lambda1").value(train.weights.lambda1);
        w.key("lambda2").value(train.weights.lambda2);
        w.key("lambda3").value(train.weights.lambda3);
        w.end_object().newline();
        w.end_object();
        return w.str() + "\n";
    }
};

}  // namespace mmsn
