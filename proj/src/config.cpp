#include "mos/config.hpp"

#include "mos/errors.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mos {

namespace {

using Setter = std::function<void(const Json&, const std::string&)>;

void dispatch(const Json& j, const std::string& path, const std::map<std::string, Setter>& fields) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const std::string field = path.empty() ? key : path + "." + key;
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown field '" + field + "'");
    it->second(value, field);
  }
}

double as_double(const Json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field + ": expected a number");
  return v.get<double>();
}

long long as_integer(const Json& v, const std::string& field) {
  if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
  return v.get<long long>();
}

int as_int(const Json& v, const std::string& field) { return static_cast<int>(as_integer(v, field)); }

bool as_bool(const Json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field + ": expected true or false");
  return v.get<bool>();
}

std::string as_string(const Json& v, const std::string& field) {
  if (!v.is_string()) throw ConfigError(field + ": expected a string");
  return v.get<std::string>();
}

template <typename T>
Setter num(T& target) {
  if constexpr (std::is_floating_point_v<T>) {
    return [&target](const Json& v, const std::string& f) { target = as_double(v, f); };
  } else {
    return [&target](const Json& v, const std::string& f) { target = static_cast<T>(as_integer(v, f)); };
  }
}

Setter flag(bool& target) {
  return [&target](const Json& v, const std::string& f) { target = as_bool(v, f); };
}

Setter text(std::string& target) {
  return [&target](const Json& v, const std::string& f) { target = as_string(v, f); };
}

// Re-throws ConfigError from a parser with the field name prepended.
template <typename F>
auto with_field(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(field + ": " + e.what());
  }
}

const char* fill_name(FillMode m) { return m == FillMode::kPerChannel ? "per_channel" : "scalar"; }
const char* branch_name(Branch b) { return b == Branch::kObject ? "object" : "origin"; }

}  // namespace

void apply_json(SyntheticConfig& c, const Json& j, const std::string& path) {
  dispatch(j, path,
           {{"n_object_classes", num(c.n_object_classes)},
            {"n_scene_classes", num(c.n_scene_classes)},
            {"image_height", num(c.image_height)},
            {"image_width", num(c.image_width)},
            {"samples_per_class", num(c.samples_per_class)},
            {"correlation", num(c.correlation)},
            {"seed", num(c.seed)},
            {"base_class_fraction", num(c.base_class_fraction)},
            {"labeled_fraction", num(c.labeled_fraction)},
            {"glyph_size", num(c.glyph_size)},
            {"twin_tint", num(c.twin_tint)},
            {"scene_contrast", num(c.scene_contrast)},
            {"scene_noise", num(c.scene_noise)},
            {"clutter_count", num(c.clutter_count)},
            {"clutter_radius", num(c.clutter_radius)},
            {"novel_scene_min_count", num(c.novel_scene_min_count)}});
}

Json to_json(const SyntheticConfig& c) {
  Json j;
  j["n_object_classes"] = c.n_object_classes;
  j["n_scene_classes"] = c.n_scene_classes;
  j["image_height"] = c.image_height;
  j["image_width"] = c.image_width;
  j["samples_per_class"] = c.samples_per_class;
  j["correlation"] = c.correlation;
  j["seed"] = c.seed;
  j["base_class_fraction"] = c.base_class_fraction;
  j["labeled_fraction"] = c.labeled_fraction;
  j["glyph_size"] = c.glyph_size;
  j["twin_tint"] = c.twin_tint;
  j["scene_contrast"] = c.scene_contrast;
  j["scene_noise"] = c.scene_noise;
  j["clutter_count"] = c.clutter_count;
  j["clutter_radius"] = c.clutter_radius;
  j["novel_scene_min_count"] = c.novel_scene_min_count;
  return j;
}

void apply_json(TrainConfig& c, const Json& j) {
  if (!j.is_object()) throw ConfigError("configuration root must be an object");
  if (j.contains("variant")) apply_variant(c, as_string(j["variant"], "variant"));

  auto loss = [&c](const Json& v, const std::string& p) {
    Hyperparams& h = c.hp;
    dispatch(v, p,
             {{"lambda", num(h.lambda)},
              {"lambda_origin", num(h.lambda_origin)},
              {"lambda_object", num(h.lambda_object)},
              {"tau_u", num(h.tau_u)},
              {"tau_c", num(h.tau_c)},
              {"tau_s", num(h.tau_s)},
              {"tau_t", num(h.tau_t)},
              {"me_weight", num(h.me_weight)},
              {"warmup_start", num(h.warmup.start)},
              {"warmup_end", num(h.warmup.end)},
              {"warmup_epochs", num(h.warmup.epochs)}});
  };
  auto model = [&c](const Json& v, const std::string& p) {
    ModelConfig& m = c.model;
    dispatch(v, p,
             {{"encoder",
               [&m](const Json& x, const std::string& f) {
                 m.backbone.kind = with_field(f, [&] { return encoder_kind_from_string(as_string(x, f)); });
               }},
              {"feature_dim", num(m.backbone.feature_dim)},
              {"input_height", num(m.backbone.input_height)},
              {"input_width", num(m.backbone.input_width)},
              {"patch_size", num(m.backbone.patch_size)},
              {"depth", num(m.backbone.depth)},
              {"heads", num(m.backbone.heads)},
              {"channels",
               [&m](const Json& x, const std::string& f) {
                 if (!x.is_array()) throw ConfigError(f + ": expected an array of integers");
                 m.backbone.channels.clear();
                 for (std::size_t i = 0; i < x.size(); ++i) {
                   m.backbone.channels.push_back(as_int(x[i], f + "[" + std::to_string(i) + "]"));
                 }
               }},
              {"norm_groups", num(m.backbone.norm_groups)},
              {"num_classes", num(m.num_classes)},
              {"scene_module", flag(m.scene_module)},
              {"scene_hidden", num(m.scene_hidden)},
              {"projector_depth", num(m.projector_depth)},
              {"projector_hidden", num(m.projector_hidden)},
              {"projection_dim", num(m.projection_dim)},
              {"logit_temperature", num(m.logit_temperature)},
              {"shared_backbone", flag(m.shared_backbone)},
              {"interaction_eps", num(m.interaction_eps)}});
  };
  auto data = [&c](const Json& v, const std::string& p) {
    dispatch(v, p,
             {{"manifest", text(c.data.manifest)},
              {"scene_annotations", text(c.data.scene_annotations)},
              {"synthetic", [&c](const Json& x, const std::string& f) { apply_json(c.data.synthetic, x, f); }}});
  };
  auto aug = [&c](const Json& v, const std::string& p) {
    AugmentConfig& a = c.augment;
    dispatch(v, p,
             {{"scale_min", num(a.scale_min)},
              {"scale_max", num(a.scale_max)},
              {"ratio_min", num(a.ratio_min)},
              {"ratio_max", num(a.ratio_max)},
              {"flip_prob", num(a.flip_prob)},
              {"brightness", num(a.brightness)},
              {"contrast", num(a.contrast)},
              {"saturation", num(a.saturation)}});
  };
  auto heuristic = [&c](const Json& v, const std::string& p) {
    dispatch(v, p, {{"quantile", num(c.heuristic.quantile)}, {"ellipse_area", num(c.heuristic.ellipse_area)}});
  };

  dispatch(j, "",
           {{"variant", [](const Json&, const std::string&) {}},
            {"loss", loss},
            {"model", model},
            {"data", data},
            {"augment", aug},
            {"heuristic_mask", heuristic},
            {"epochs", num(c.epochs)},
            {"batch_size", num(c.batch_size)},
            {"lr", num(c.lr)},
            {"momentum", num(c.momentum)},
            {"weight_decay", num(c.weight_decay)},
            {"seed", num(c.seed)},
            {"eval_every", num(c.eval_every)},
            {"output_dir", text(c.output_dir)},
            {"mask_source",
             [&c](const Json& v, const std::string& f) {
               c.mask_source = with_field(f, [&] { return mask_source_from_string(as_string(v, f)); });
             }},
            {"fill",
             [&c](const Json& v, const std::string& f) {
               const std::string s = as_string(v, f);
               if (s == "per_channel") {
                 c.fill = FillMode::kPerChannel;
               } else if (s == "scalar") {
                 c.fill = FillMode::kScalar;
               } else {
                 throw ConfigError(f + ": expected per_channel or scalar");
               }
             }},
            {"eval_branch", [&c](const Json& v, const std::string& f) {
               const std::string s = as_string(v, f);
               if (s == "object") {
                 c.eval_branch = Branch::kObject;
               } else if (s == "origin") {
                 c.eval_branch = Branch::kOrigin;
               } else {
                 throw ConfigError(f + ": expected object or origin");
               }
             }}});
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["variant"] = c.variant;
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["eval_every"] = c.eval_every;
  j["mask_source"] = to_string(c.mask_source);
  j["fill"] = fill_name(c.fill);
  j["eval_branch"] = branch_name(c.eval_branch);
  j["output_dir"] = c.output_dir;

  const Hyperparams& h = c.hp;
  j["loss"] = {{"lambda", h.lambda},           {"lambda_origin", h.lambda_origin},
               {"lambda_object", h.lambda_object}, {"tau_u", h.tau_u},
               {"tau_c", h.tau_c},             {"tau_s", h.tau_s},
               {"tau_t", h.tau_t},             {"me_weight", h.me_weight},
               {"warmup_start", h.warmup.start}, {"warmup_end", h.warmup.end},
               {"warmup_epochs", h.warmup.epochs}};

  const ModelConfig& m = c.model;
  Json model;
  model["encoder"] = to_string(m.backbone.kind);
  model["feature_dim"] = m.backbone.feature_dim;
  model["input_height"] = m.backbone.input_height;
  model["input_width"] = m.backbone.input_width;
  model["patch_size"] = m.backbone.patch_size;
  model["depth"] = m.backbone.depth;
  model["heads"] = m.backbone.heads;
  model["channels"] = m.backbone.channels;
  model["norm_groups"] = m.backbone.norm_groups;
  model["num_classes"] = m.num_classes;
  model["scene_module"] = m.scene_module;
  model["scene_hidden"] = m.scene_hidden;
  model["projector_depth"] = m.projector_depth;
  model["projector_hidden"] = m.projector_hidden;
  model["projection_dim"] = m.projection_dim;
  model["logit_temperature"] = m.logit_temperature;
  model["shared_backbone"] = m.shared_backbone;
  model["interaction_eps"] = m.interaction_eps;
  j["model"] = model;

  j["data"] = {{"manifest", c.data.manifest},
               {"scene_annotations", c.data.scene_annotations},
               {"synthetic", to_json(c.data.synthetic)}};
  const AugmentConfig& a = c.augment;
  j["augment"] = {{"scale_min", a.scale_min},   {"scale_max", a.scale_max},   {"ratio_min", a.ratio_min},
                  {"ratio_max", a.ratio_max},   {"flip_prob", a.flip_prob},   {"brightness", a.brightness},
                  {"contrast", a.contrast},     {"saturation", a.saturation}};
  j["heuristic_mask"] = {{"quantile", c.heuristic.quantile}, {"ellipse_area", c.heuristic.ellipse_area}};
  return j;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

TrainConfig train_config_from_file(const std::filesystem::path& path) {
  TrainConfig c;
  apply_json(c, read_json_file(path));
  return c;
}

SyntheticConfig synthetic_config_from_file(const std::filesystem::path& path) {
  SyntheticConfig c;
  Json j = read_json_file(path);
  // Accept either the bare object or a training config's data.synthetic.
  if (j.contains("data") && j["data"].is_object() && j["data"].contains("synthetic")) {
    apply_json(c, j["data"]["synthetic"], "data.synthetic");
  } else {
    apply_json(c, j, "");
  }
  return c;
}

std::string config_echo(const TrainConfig& config) { return to_json(config).dump(2) + "\n"; }

TrainConfig config_from_echo(const std::string& echo) {
  TrainConfig c;
  try {
    apply_json(c, Json::parse(echo));
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("stored configuration is not valid JSON: ") + e.what());
  }
  return c;
}

std::string run_id(const std::string& text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mos
