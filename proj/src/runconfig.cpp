#include "ctnet/runconfig.hpp"

#include <fstream>
#include <set>

#include "ctnet/error.hpp"

using nlohmann::json;

namespace ctnet {

namespace {

// Applies every known key through `pick` and rejects the rest.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <typename T>
  void field(const char* key, T& into) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      into = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + " has the wrong type");
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key))
        throw ConfigError("unknown key '" + where_ + "." + key + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"image_channels", cfg.image_channels},
              {"width", cfg.width},
              {"window", cfg.window},
              {"heads", cfg.heads},
              {"cfe_hidden_ratio", cfg.cfe_hidden_ratio},
              {"attn_scale", cfg.attn_scale},
              {"sb_residual_second_conv", cfg.sb_residual_second_conv},
              {"disable_tm_in_sb", cfg.disable_tm_in_sb},
              {"disable_fms", cfg.disable_fms},
              {"disable_itm", cfg.disable_itm},
              {"serial_only", cfg.serial_only}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  StrictObject obj(j, "model");
  obj.field("image_channels", cfg.image_channels);
  obj.field("width", cfg.width);
  obj.field("window", cfg.window);
  obj.field("heads", cfg.heads);
  obj.field("cfe_hidden_ratio", cfg.cfe_hidden_ratio);
  obj.field("attn_scale", cfg.attn_scale);
  obj.field("sb_residual_second_conv", cfg.sb_residual_second_conv);
  obj.field("disable_tm_in_sb", cfg.disable_tm_in_sb);
  obj.field("disable_fms", cfg.disable_fms);
  obj.field("disable_itm", cfg.disable_itm);
  obj.field("serial_only", cfg.serial_only);
  obj.finish();
  cfg.validate();
  return cfg;
}

json noise_spec_to_json(const NoiseSpec& spec) {
  return json{{"mode", spec.mode == NoiseSpec::Mode::Fixed ? "fixed" : "blind"},
              {"sigma", spec.sigma},
              {"sigma_min", spec.sigma_min},
              {"sigma_max", spec.sigma_max}};
}

NoiseSpec noise_spec_from_json(const json& j) {
  NoiseSpec spec;
  std::string mode = "fixed";
  StrictObject obj(j, "noise");
  obj.field("mode", mode);
  obj.field("sigma", spec.sigma);
  obj.field("sigma_min", spec.sigma_min);
  obj.field("sigma_max", spec.sigma_max);
  obj.finish();
  if (mode == "fixed")
    spec.mode = NoiseSpec::Mode::Fixed;
  else if (mode == "blind")
    spec.mode = NoiseSpec::Mode::Blind;
  else
    throw ConfigError("noise.mode must be 'fixed' or 'blind'");
  spec.validate();
  return spec;
}

RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (key != "model" && key != "train" && key != "noise")
      throw ConfigError("unknown key '" + key + "' in run config");

  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) {
    StrictObject obj(j.at("train"), "train");
    obj.field("batch_size", rc.train.batch_size);
    obj.field("epochs", rc.train.epochs);
    obj.field("lr0", rc.train.lr0);
    obj.field("halving_epochs", rc.train.halving_epochs);
    obj.field("beta1", rc.train.beta1);
    obj.field("beta2", rc.train.beta2);
    obj.field("eps", rc.train.eps);
    obj.field("seed", rc.train.seed);
    obj.field("patch_size", rc.train.patch_size);
    obj.field("patches_per_image", rc.train.patches_per_image);
    obj.field("augment", rc.train.augment);
    obj.field("pixel_mean_loss", rc.train.pixel_mean_loss);
    obj.field("clip_noisy", rc.train.clip_noisy);
    obj.field("grad_clip", rc.train.grad_clip);
    obj.field("steps_limit", rc.train.steps_limit);
    obj.finish();
  }
  if (j.contains("noise")) rc.train.noise = noise_spec_from_json(j.at("noise"));
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("bad JSON in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

RunConfig tiny_run_config(int image_channels) {
  RunConfig rc;
  rc.model = ModelConfig::tiny(image_channels);
  rc.train.patch_size = 16;
  rc.train.patches_per_image = 8;
  rc.train.epochs = 25;
  rc.train.halving_epochs = {15, 22, 24};
  return rc;
}

}  // namespace ctnet
