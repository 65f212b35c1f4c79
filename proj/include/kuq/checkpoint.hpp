#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kuq/adam.hpp"
#include "kuq/base64.hpp"
#include "kuq/errors.hpp"
#include "kuq/model.hpp"
#include "kuq/normalize.hpp"

namespace kuq {

/// Serializable training snapshot: architecture, per-member parameter blobs,
/// normalization statistics and the training-config echo. Optimizer moments
/// ride along so an interrupted run resumes bit-identically.
///
/// The regime echo is canonical: variance training with lambda = 0 is
/// recorded as "independent", because the two are the same objective.
struct Checkpoint {
    int version = 1;
    int state_dim = 0;
    ModelConfig model;
    std::size_t member_count = 0;
    Regime regime = Regime::independent;
    double alpha = 0.0;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
    Normalization normalization;
    std::vector<std::vector<double>> member_params;  // flattened, visit_params order

    bool has_optimizer = false;
    AdamConfig optim;
    std::int64_t optim_step = 0;
    std::vector<double> optim_m;  // concatenated over members then arrays
    std::vector<double> optim_v;

    static Regime canonical_regime(Regime r, double lambda) {
        if (r == Regime::variance && lambda == 0.0) return Regime::independent;
        if (r == Regime::independent) return Regime::independent;
        return r;
    }
};

inline Checkpoint snapshot_ensemble(const Ensemble& ensemble, int state_dim,
                                    const ModelConfig& model_cfg, double alpha,
                                    std::uint64_t seed, std::int64_t step) {
    Checkpoint ck;
    ck.state_dim = state_dim;
    ck.model = model_cfg;
    ck.member_count = ensemble.members.size();
    ck.regime = Checkpoint::canonical_regime(ensemble.regime, ensemble.lambda);
    ck.alpha = alpha;
    ck.lambda = ck.regime == Regime::independent ? 0.0 : ensemble.lambda;
    ck.seed = seed;
    ck.step = step;
    ck.normalization = ensemble.normalization;
    for (const auto& m : ensemble.members) ck.member_params.push_back(flatten_params(m));
    return ck;
}

/// Rebuilds the ensemble described by a checkpoint.
inline Ensemble restore_ensemble(const Checkpoint& ck) {
    Ensemble ens;
    ens.regime = ck.regime;
    ens.lambda = ck.lambda;
    ens.normalization = ck.normalization;
    for (std::size_t j = 0; j < ck.member_count; ++j) {
        KoopmanAutoencoder m = make_autoencoder(ck.state_dim, ck.model, 0);
        unflatten_params(m, ck.member_params[j]);
        ens.members.push_back(std::move(m));
    }
    ens.validate();
    return ens;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
    nlohmann::json j;
    j["format"] = "koopman-uq-checkpoint";
    j["version"] = ck.version;
    j["state_dim"] = ck.state_dim;
    j["latent_dim"] = ck.model.latent_dim;
    j["hidden"] = ck.model.hidden;
    j["activation"] = to_string(ck.model.activation);
    j["members"] = ck.member_count;
    j["regime"] = to_string(ck.regime);
    j["alpha"] = ck.alpha;
    j["lambda"] = ck.lambda;
    j["seed"] = ck.seed;
    j["step"] = ck.step;
    j["normalization"] = {{"mean", ck.normalization.mean}, {"std", ck.normalization.stdev}};
    nlohmann::json params = nlohmann::json::array();
    for (const auto& blob : ck.member_params) params.push_back(base64_of_doubles(blob));
    j["member_params"] = params;
    if (ck.has_optimizer) {
        j["optimizer"] = {{"type", "adam"},        {"lr", ck.optim.lr},
                          {"beta1", ck.optim.beta1}, {"beta2", ck.optim.beta2},
                          {"eps", ck.optim.eps},     {"step", ck.optim_step},
                          {"m", base64_of_doubles(ck.optim_m)},
                          {"v", base64_of_doubles(ck.optim_v)}};
    }
    return j.dump(2) + "\n";
}

inline Checkpoint decode_checkpoint(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what(),
                         static_cast<std::size_t>(e.byte));
    }
    const auto field = [&](const char* name) -> const nlohmann::json& {
        auto it = j.find(name);
        if (it == j.end()) throw ParseError(std::string("checkpoint missing field '") + name + "'", 0);
        return *it;
    };
    if (field("format").get<std::string>() != "koopman-uq-checkpoint") {
        throw ParseError("not a koopman-uq checkpoint (field 'format')", 0);
    }
    Checkpoint ck;
    ck.version = field("version").get<int>();
    if (ck.version != 1) {
        throw ParseError("unsupported checkpoint version " + std::to_string(ck.version) +
                             " (field 'version'; expected 1)",
                         0);
    }
    ck.state_dim = field("state_dim").get<int>();
    ck.model.latent_dim = field("latent_dim").get<int>();
    ck.model.hidden = field("hidden").get<std::vector<int>>();
    ck.model.activation = activation_from_string(field("activation").get<std::string>());
    ck.member_count = field("members").get<std::size_t>();
    ck.regime = regime_from_string(field("regime").get<std::string>());
    ck.alpha = field("alpha").get<double>();
    ck.lambda = field("lambda").get<double>();
    ck.seed = field("seed").get<std::uint64_t>();
    ck.step = field("step").get<std::int64_t>();
    const auto& norm = field("normalization");
    ck.normalization.mean = norm.at("mean").get<std::vector<double>>();
    ck.normalization.stdev = norm.at("std").get<std::vector<double>>();

    if (ck.state_dim < 1) throw ParseError("invalid field 'state_dim'", 0);
    if (ck.model.latent_dim < 1) throw ParseError("invalid field 'latent_dim'", 0);
    if (ck.member_count < 1) throw ParseError("invalid field 'members'", 0);
    if (ck.normalization.mean.size() != static_cast<std::size_t>(ck.state_dim)) {
        throw ParseError("field 'normalization.mean' length does not match state_dim", 0);
    }

    // Expected flat parameter count per member, from the declared architecture.
    const KoopmanAutoencoder probe = make_autoencoder(ck.state_dim, ck.model, 0);
    const std::size_t expected = flatten_params(probe).size();

    const auto& params = field("member_params");
    if (!params.is_array() || params.size() != ck.member_count) {
        throw ParseError("field 'member_params' does not hold one blob per member", 0);
    }
    for (std::size_t jdx = 0; jdx < ck.member_count; ++jdx) {
        std::vector<double> blob = doubles_of_base64(params[jdx].get<std::string>());
        if (blob.size() != expected) {
            throw ParseError("member " + std::to_string(jdx) + " parameter blob holds " +
                                 std::to_string(blob.size()) + " values but fields "
                                 "'state_dim'/'latent_dim'/'hidden' imply " +
                                 std::to_string(expected),
                             0);
        }
        ck.member_params.push_back(std::move(blob));
    }

    if (j.contains("optimizer")) {
        const auto& opt = j["optimizer"];
        ck.has_optimizer = true;
        ck.optim.lr = opt.at("lr").get<double>();
        ck.optim.beta1 = opt.at("beta1").get<double>();
        ck.optim.beta2 = opt.at("beta2").get<double>();
        ck.optim.eps = opt.at("eps").get<double>();
        ck.optim_step = opt.at("step").get<std::int64_t>();
        ck.optim_m = doubles_of_base64(opt.at("m").get<std::string>());
        ck.optim_v = doubles_of_base64(opt.at("v").get<std::string>());
        const std::size_t total = expected * ck.member_count;
        if (ck.optim_m.size() != total || ck.optim_v.size() != total) {
            throw ParseError("optimizer moment blobs do not match the parameter count", 0);
        }
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    const std::string text = encode_checkpoint(ck);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(text);
}

}  // namespace kuq
