#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "drpoint/backbone.hpp"
#include "drpoint/data.hpp"
#include "drpoint/error.hpp"
#include "drpoint/losses.hpp"
#include "drpoint/renderer.hpp"

namespace drpoint {

/// Invalid or unknown configuration field; field() is the dotted JSON path.
class ConfigError : public DomainError {
public:
    ConfigError(std::string field, const std::string& detail)
        : DomainError("config field '" + field + "': " + detail), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

struct MocoConfig {
    double m = 0.999;
    int K = 1024;
    double tau = 0.07;
};

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 0.05;
    int epochs = 50;
    int batch_size = 4;
    int warmup_steps = -1;     // -1: 10% of the total step count
    long max_steps = 0;        // 0: epochs * ceil(N / batch_size)
    double mask_ratio = 0.6;
    double grad_clip = 0.0;    // global L2 norm; 0 disables
    double tau_init = 0.07;    // initial contrastive temperature (learned afterwards)
    std::uint64_t seed = 0;
    ChamferVariant chamfer = ChamferVariant::L2;
    LossWeights loss_weights;
    RenderConfig render;
    double camera_radius = 2.0;
    BackboneConfig model;      // "encoder" lives at model.encoder
    MocoConfig moco;
    RgbAugment rgb_augment;
    CloudAugment cloud_augment;
    int kmeans_iters = 20;

    /// Defaults at the published scale (12 x 384 encoder, 224 px images).
    static TrainConfig paper() {
        TrainConfig c;
        c.model.encoder = EncoderConfig{};
        c.model.image_size = 224;
        c.render.grid_depth = 32;
        c.render.image_width = c.render.image_height = 32;
        return c;
    }

    /// Single-CPU profile: 4 x 192 x 3 encoder, 32^3 render grid, 32 px images.
    static TrainConfig desk() {
        TrainConfig c = paper();
        c.model.encoder.layers = 4;
        c.model.encoder.dim = 192;
        c.model.encoder.heads = 3;
        c.model.image_size = 32;
        c.model.image_width = 16;
        c.render.grid_depth = 32;
        c.render.image_width = c.render.image_height = 32;
        c.moco.m = 0.99;
        c.moco.K = 16;
        c.tau_init = 0.2;
        return c;
    }

    void validate() const {
        auto require = [](bool ok, const char* field, const char* detail) {
            if (!ok) throw ConfigError(field, detail);
        };
        require(lr >= 0.0, "lr", "must be >= 0");
        require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
        require(epochs >= 1, "epochs", "must be >= 1");
        require(batch_size >= 1, "batch_size", "must be >= 1");
        require(warmup_steps >= -1, "warmup_steps", "must be >= 0 (or -1 for automatic)");
        require(max_steps >= 0, "max_steps", "must be >= 0");
        require(mask_ratio > 0.0 && mask_ratio < 1.0, "mask_ratio", "must lie in (0, 1)");
        require(grad_clip >= 0.0, "grad_clip", "must be >= 0");
        require(tau_init >= 0.01 && tau_init <= 1.0, "tau_init", "must lie in [0.01, 1]");
        require(loss_weights.alpha >= 0.0, "loss_weights.alpha", "must be >= 0");
        require(loss_weights.beta >= 0.0, "loss_weights.beta", "must be >= 0");
        require(loss_weights.theta >= 0.0, "loss_weights.theta", "must be >= 0");
        require(camera_radius > 0.0, "render.camera_radius", "must be positive");
        require(moco.m >= 0.0 && moco.m <= 1.0, "moco.m", "must lie in [0, 1]");
        require(moco.K >= 1, "moco.K", "must be >= 1");
        require(moco.tau > 0.0, "moco.tau", "must be positive");
        require(kmeans_iters >= 1, "kmeans_iters", "must be >= 1");
        require(rgb_augment.min_area > 0.0 && rgb_augment.min_area <= rgb_augment.max_area && rgb_augment.max_area <= 1.0,
                "augment.crop_min_area", "need 0 < crop_min_area <= crop_max_area <= 1");
        require(rgb_augment.strength >= 0.0 && rgb_augment.strength < 1.0, "augment.rgb_jitter", "must lie in [0, 1)");
        require(cloud_augment.scale_min > 0.0 && cloud_augment.scale_min <= cloud_augment.scale_max, "augment.scale_min",
                "need 0 < scale_min <= scale_max");
        require(cloud_augment.translate >= 0.0, "augment.translate", "must be >= 0");
        try {
            render.validate();
        } catch (const DomainError& e) {
            throw ConfigError("render", e.what());
        }
        try {
            model.validate();
        } catch (const DomainError& e) {
            throw ConfigError("model", e.what());
        }
        require(model.num_groups <= kEncoderPoints, "model.num_groups", "exceeds the 1024 encoder points");
        require(model.group_size <= kEncoderPoints, "model.group_size", "exceeds the 1024 encoder points");
        const int masked = int(std::floor(mask_ratio * model.num_groups + 1e-9));
        require(masked >= 1 && masked < model.num_groups, "mask_ratio", "must mask at least one and keep at least one group");
    }
};

namespace detail {

// Binds JSON keys to struct fields; anything unbound is an error.
class JsonBinder {
public:
    JsonBinder(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    template <class T>
    JsonBinder& field(const char* key, T& out) {
        seen_.emplace(key, true);
        if (!j_.contains(key)) return *this;
        const nlohmann::json& v = j_.at(key);
        const std::string name = full(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(name, "expected a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(name, "expected an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_unsigned() || v.get<long long>() >= 0) {
                    out = v.get<T>();
                } else {
                    throw ConfigError(name, "expected a non-negative integer");
                }
            } else {
                out = v.get<T>();
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(name, "expected a number");
            out = v.get<T>();
        } else {
            static_assert(sizeof(T) == 0, "unsupported field type");
        }
        return *this;
    }

    JsonBinder& object(const char* key, const std::function<void(JsonBinder&)>& fn) {
        seen_.emplace(key, true);
        if (!j_.contains(key)) return *this;
        JsonBinder sub(j_.at(key), full(key));
        fn(sub);
        sub.finish();
        return *this;
    }

    JsonBinder& custom(const char* key, const std::function<void(const nlohmann::json&, const std::string&)>& fn) {
        seen_.emplace(key, true);
        if (j_.contains(key)) fn(j_.at(key), full(key));
        return *this;
    }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError(full(key), "unknown field");
    }

private:
    std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const nlohmann::json& j_;
    std::string path_;
    std::map<std::string, bool> seen_;
};

}  // namespace detail

/// Strict JSON config: an optional "profile" ("paper" or "desk") selects the
/// base values, every other key overrides one field. Unknown keys are errors.
inline TrainConfig parse_config(const nlohmann::json& j) {
    TrainConfig c = TrainConfig::paper();
    if (!j.is_object()) throw ConfigError("<root>", "expected an object");
    if (j.contains("profile")) {
        const auto& p = j.at("profile");
        if (!p.is_string()) throw ConfigError("profile", "expected a string");
        if (p == "desk") {
            c = TrainConfig::desk();
        } else if (p != "paper") {
            throw ConfigError("profile", "expected \"paper\" or \"desk\"");
        }
    }
    detail::JsonBinder root(j, "");
    root.custom("profile", [](const nlohmann::json&, const std::string&) {})
        .field("lr", c.lr)
        .field("weight_decay", c.weight_decay)
        .field("epochs", c.epochs)
        .field("batch_size", c.batch_size)
        .field("warmup_steps", c.warmup_steps)
        .field("max_steps", c.max_steps)
        .field("mask_ratio", c.mask_ratio)
        .field("grad_clip", c.grad_clip)
        .field("tau_init", c.tau_init)
        .field("seed", c.seed)
        .field("kmeans_iters", c.kmeans_iters)
        .custom("chamfer", [&c](const nlohmann::json& v, const std::string& name) {
            if (v == "l1") {
                c.chamfer = ChamferVariant::L1;
            } else if (v == "l2") {
                c.chamfer = ChamferVariant::L2;
            } else {
                throw ConfigError(name, "expected \"l1\" or \"l2\"");
            }
        })
        .object("loss_weights", [&c](detail::JsonBinder& b) {
            b.field("alpha", c.loss_weights.alpha).field("beta", c.loss_weights.beta).field("theta", c.loss_weights.theta);
        })
        .object("render", [&c](detail::JsonBinder& b) {
            b.field("grid_depth", c.render.grid_depth)
                .field("image_width", c.render.image_width)
                .field("image_height", c.render.image_height)
                .field("sigma", c.render.sigma)
                .field("splat_scale", c.render.splat_scale)
                .field("truncation_radius", c.render.truncation_radius)
                .field("background_depth", c.render.background_depth)
                .field("camera_radius", c.camera_radius);
        })
        .object("encoder", [&c](detail::JsonBinder& b) {
            b.field("layers", c.model.encoder.layers)
                .field("dim", c.model.encoder.dim)
                .field("heads", c.model.encoder.heads)
                .field("ffn_ratio", c.model.encoder.ffn_ratio)
                .field("droppath_rate", c.model.encoder.droppath_rate);
        })
        .object("model", [&c](detail::JsonBinder& b) {
            b.field("num_groups", c.model.num_groups)
                .field("group_size", c.model.group_size)
                .field("embed_hidden", c.model.embed_hidden)
                .field("token_decoder_blocks", c.model.token_decoder_blocks)
                .field("point_decoder_blocks", c.model.point_decoder_blocks)
                .field("codebook_size", c.model.codebook_size)
                .field("image_size", c.model.image_size)
                .field("image_width", c.model.image_width)
                .field("external_feature_dim", c.model.external_feature_dim);
        })
        .object("moco", [&c](detail::JsonBinder& b) { b.field("m", c.moco.m).field("K", c.moco.K).field("tau", c.moco.tau); })
        .object("augment", [&c](detail::JsonBinder& b) {
            b.field("rgb_jitter", c.rgb_augment.strength)
                .field("crop_min_area", c.rgb_augment.min_area)
                .field("crop_max_area", c.rgb_augment.max_area)
                .field("flip_prob", c.rgb_augment.flip_prob)
                .field("scale_min", c.cloud_augment.scale_min)
                .field("scale_max", c.cloud_augment.scale_max)
                .field("translate", c.cloud_augment.translate);
        })
        .finish();
    c.validate();
    return c;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("load_config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("load_config: ") + e.what());
    }
    return parse_config(j);
}

/// Full config as JSON (every field explicit); parse_config(to_json(c)) == c.
inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["lr"] = c.lr;
    j["weight_decay"] = c.weight_decay;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["warmup_steps"] = c.warmup_steps;
    j["max_steps"] = c.max_steps;
    j["mask_ratio"] = c.mask_ratio;
    j["grad_clip"] = c.grad_clip;
    j["tau_init"] = c.tau_init;
    j["seed"] = c.seed;
    j["kmeans_iters"] = c.kmeans_iters;
    j["chamfer"] = c.chamfer == ChamferVariant::L1 ? "l1" : "l2";
    j["loss_weights"] = {{"alpha", c.loss_weights.alpha}, {"beta", c.loss_weights.beta}, {"theta", c.loss_weights.theta}};
    j["render"] = {{"grid_depth", c.render.grid_depth},
                   {"image_width", c.render.image_width},
                   {"image_height", c.render.image_height},
                   {"sigma", c.render.sigma},
                   {"splat_scale", c.render.splat_scale},
                   {"truncation_radius", c.render.truncation_radius},
                   {"background_depth", c.render.background_depth},
                   {"camera_radius", c.camera_radius}};
    j["encoder"] = {{"layers", c.model.encoder.layers},
                    {"dim", c.model.encoder.dim},
                    {"heads", c.model.encoder.heads},
                    {"ffn_ratio", c.model.encoder.ffn_ratio},
                    {"droppath_rate", c.model.encoder.droppath_rate}};
    j["model"] = {{"num_groups", c.model.num_groups},
                  {"group_size", c.model.group_size},
                  {"embed_hidden", c.model.embed_hidden},
                  {"token_decoder_blocks", c.model.token_decoder_blocks},
                  {"point_decoder_blocks", c.model.point_decoder_blocks},
                  {"codebook_size", c.model.codebook_size},
                  {"image_size", c.model.image_size},
                  {"image_width", c.model.image_width},
                  {"external_feature_dim", c.model.external_feature_dim}};
    j["moco"] = {{"m", c.moco.m}, {"K", c.moco.K}, {"tau", c.moco.tau}};
    j["augment"] = {{"rgb_jitter", c.rgb_augment.strength},
                    {"crop_min_area", c.rgb_augment.min_area},
                    {"crop_max_area", c.rgb_augment.max_area},
                    {"flip_prob", c.rgb_augment.flip_prob},
                    {"scale_min", c.cloud_augment.scale_min},
                    {"scale_max", c.cloud_augment.scale_max},
                    {"translate", c.cloud_augment.translate}};
    return j;
}

}  // namespace drpoint
