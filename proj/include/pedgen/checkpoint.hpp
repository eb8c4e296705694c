#pragma once
// Generator checkpoints: one tensor-file container holding every parameter plus
// the Adam moments, with a JSON header echoing the model config, the noise
// schedule, the vocabulary hash, and training progress.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "pedgen/nn.hpp"
#include "pedgen/serialize.hpp"
#include "pedgen/unet.hpp"

namespace pedgen::ckpt {

using json = nlohmann::json;

inline constexpr const char* kParamPrefix = "param.";
inline constexpr const char* kAdamMPrefix = "adam.m.";
inline constexpr const char* kAdamVPrefix = "adam.v.";

// `header` should carry model/schedule/step/vocab_hash/config_hash entries; the
// optimizer scalars are appended here so a resume restores the exact state.
inline void save_checkpoint(const std::string& path, const nn::ParamStore& ps, nn::Adam& opt,
                            json header) {
    std::map<std::string, Tensor> tensors;
    for (const auto& [name, p] : ps.all()) tensors[kParamPrefix + name] = p->val;
    for (const auto& [name, t] : opt.moment1()) tensors[kAdamMPrefix + name] = t;
    for (const auto& [name, t] : opt.moment2()) tensors[kAdamVPrefix + name] = t;
    header["kind"] = "denoiser";
    header["adam_step_count"] = opt.step_count();
    header["lr"] = opt.lr();
    ser::write_tensor_file(path, std::move(header), tensors);
}

// Restores parameters into `ps` (creating any that do not exist yet) and, when
// `opt` is given, the Adam moments and step count. Returns the header.
inline json load_checkpoint(const std::string& path, nn::ParamStore& ps,
                            nn::Adam* opt = nullptr) {
    if (!std::filesystem::exists(path))
        throw StagedDependency("missing checkpoint: " + path + " (run train first)");
    ser::TensorFile tf = ser::read_tensor_file(path);
    if (tf.meta.value("kind", std::string()) != "denoiser")
        throw SchemaError(path + ": not a generator checkpoint");
    for (auto& [name, t] : tf.tensors) {
        if (name.rfind(kParamPrefix, 0) == 0) {
            ps.assign(name.substr(std::string(kParamPrefix).size()), std::move(t));
        } else if (name.rfind(kAdamMPrefix, 0) == 0) {
            if (opt) opt->moment1()[name.substr(std::string(kAdamMPrefix).size())] = std::move(t);
        } else if (name.rfind(kAdamVPrefix, 0) == 0) {
            if (opt) opt->moment2()[name.substr(std::string(kAdamVPrefix).size())] = std::move(t);
        } else {
            throw SchemaError(path + ": unexpected tensor " + name);
        }
    }
    if (opt) {
        opt->set_step_count(tf.meta.value("adam_step_count", int64_t(0)));
        opt->set_lr(tf.meta.value("lr", opt->lr()));
    }
    return tf.meta;
}

}  // namespace pedgen::ckpt
