#include "multiad/config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace multiad {

using nlohmann::json;

const char* teacher_mode_name(TeacherMode mode) {
  return mode == TeacherMode::kRandom ? "random" : "rotation_pretext";
}

void PipelineConfig::validate() const {
  backbone.validate();
  discriminator.validate();
  if (!(lambda >= 0.0)) throw ConfigError("distill.lambda must be non-negative");
  if (!(inference.smoothing_sigma > 0.0)) throw ConfigError("inference.smoothing_sigma must be positive");
  if (train.epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(train.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (train.pretext_epochs < 0) throw ConfigError("train.pretext_epochs must be non-negative");
  if (train.bn_calibration_images < 2) throw ConfigError("train.bn_calibration_images must be at least 2");
  if (input_extent < 16 || input_extent % 4 != 0) {
    throw ConfigError("data.input_extent must be a multiple of 4 and at least 16");
  }
}

json to_json(const PipelineConfig& c) {
  json j;
  j["backbone"] = {{"in_channels", c.backbone.in_channels},
                   {"stem_filters", c.backbone.stem_filters},
                   {"widths", c.backbone.widths},
                   {"blocks_per_stage", c.backbone.blocks_per_stage},
                   {"dilations", c.backbone.dilations},
                   {"se_enabled", c.backbone.se_enabled},
                   {"fusion_enabled", c.backbone.fusion_enabled},
                   {"se_reduction", c.backbone.se_reduction}};
  j["discriminator"] = {{"enabled", c.discriminator_enabled},
                        {"width_factor", c.discriminator.width_factor},
                        {"dropout", c.discriminator.dropout},
                        {"leaky_slope", c.discriminator.leaky_slope}};
  j["distill"] = {{"lambda", c.lambda}};
  j["inference"] = {{"mff_enabled", c.inference.mff_enabled}, {"smoothing_sigma", c.inference.smoothing_sigma}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},
                {"seed", c.train.seed},
                {"teacher_mode", teacher_mode_name(c.train.teacher_mode)},
                {"pretext_epochs", c.train.pretext_epochs},
                {"bn_calibration_images", c.train.bn_calibration_images},
                {"student_batch_stats", c.train.student_batch_stats}};
  j["data"] = {{"input_extent", c.input_extent}};
  return j;
}

namespace {

using Setter = std::function<void(const json&)>;

template <class T>
Setter assign(T& target) {
  return [&target](const json& v) { target = v.get<T>(); };
}

void apply_section(const json& j, const std::string& path, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(path + "." + key + ": unknown key");
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw ConfigError(path + "." + key + ": " + e.what());
    }
  }
}

}  // namespace

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  std::string teacher_mode = teacher_mode_name(c.train.teacher_mode);
  const std::map<std::string, Setter> sections{
      {"backbone",
       [&](const json& s) {
         apply_section(s, "backbone",
                       {{"in_channels", assign(c.backbone.in_channels)},
                        {"stem_filters", assign(c.backbone.stem_filters)},
                        {"widths", assign(c.backbone.widths)},
                        {"blocks_per_stage", assign(c.backbone.blocks_per_stage)},
                        {"dilations", assign(c.backbone.dilations)},
                        {"se_enabled", assign(c.backbone.se_enabled)},
                        {"fusion_enabled", assign(c.backbone.fusion_enabled)},
                        {"se_reduction", assign(c.backbone.se_reduction)}});
       }},
      {"discriminator",
       [&](const json& s) {
         apply_section(s, "discriminator",
                       {{"enabled", assign(c.discriminator_enabled)},
                        {"width_factor", assign(c.discriminator.width_factor)},
                        {"dropout", assign(c.discriminator.dropout)},
                        {"leaky_slope", assign(c.discriminator.leaky_slope)}});
       }},
      {"distill", [&](const json& s) { apply_section(s, "distill", {{"lambda", assign(c.lambda)}}); }},
      {"inference",
       [&](const json& s) {
         apply_section(s, "inference",
                       {{"mff_enabled", assign(c.inference.mff_enabled)},
                        {"smoothing_sigma", assign(c.inference.smoothing_sigma)}});
       }},
      {"train",
       [&](const json& s) {
         apply_section(s, "train",
                       {{"epochs", assign(c.train.epochs)},
                        {"batch_size", assign(c.train.batch_size)},
                        {"lr", assign(c.train.lr)},
                        {"seed", assign(c.train.seed)},
                        {"teacher_mode", assign(teacher_mode)},
                        {"pretext_epochs", assign(c.train.pretext_epochs)},
                        {"bn_calibration_images", assign(c.train.bn_calibration_images)},
                        {"student_batch_stats", assign(c.train.student_batch_stats)}});
       }},
      {"data", [&](const json& s) { apply_section(s, "data", {{"input_extent", assign(c.input_extent)}}); }},
  };
  apply_section(j, "config", sections);
  if (teacher_mode == "random") {
    c.train.teacher_mode = TeacherMode::kRandom;
  } else if (teacher_mode == "rotation_pretext") {
    c.train.teacher_mode = TeacherMode::kRotationPretext;
  } else {
    throw ConfigError("config.train.teacher_mode: expected \"random\" or \"rotation_pretext\"");
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace multiad
