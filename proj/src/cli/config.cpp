// SPDX-License-Identifier: Apache-2.0
#include "dprob/cli/config.hpp"

#include "dprob/cli/schema_text.hpp"

#include <cstdlib>
#include <fstream>

namespace dprob {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string describe(const std::vector<SchemaIssue>& issues) {
  std::string s = "invalid configuration:";
  for (const auto& i : issues) s += "\n  " + (i.pointer.empty() ? std::string("/") : i.pointer) + ": " + i.message;
  return s;
}

json session_json(const TrainSession& s) {
  return {{"epochs", s.epochs}, {"lr_drop_epoch", s.lr_drop_epoch}, {"lr", s.lr},
          {"lr_drop_factor", s.lr_drop_factor}, {"batch_size", s.batch_size}, {"grad_clip", s.grad_clip}};
}

TrainSession session_from(const json& j, Phase phase) {
  TrainSession s;
  s.phase = phase;
  s.epochs = j.at("epochs").get<int>();
  s.lr_drop_epoch = j.at("lr_drop_epoch").get<int>();
  s.lr = j.at("lr").get<double>();
  s.lr_drop_factor = j.at("lr_drop_factor").get<double>();
  s.batch_size = j.at("batch_size").get<int>();
  s.grad_clip = j.at("grad_clip").get<double>();
  return s;
}

}  // namespace

ConfigError::ConfigError(std::vector<SchemaIssue> issues) : std::runtime_error(describe(issues)), issues_(std::move(issues)) {}

ConfigError::ConfigError(std::string pointer, std::string message)
    : ConfigError(std::vector<SchemaIssue>{{std::move(pointer), std::move(message)}}) {}

ExperimentConfig::ExperimentConfig() {
  finetune.phase = Phase::finetune;
  finetune.epochs = 10;
  finetune.lr_drop_epoch = 7;
}

json ExperimentConfig::to_json() const {
  json shapes = json::array();
  for (const auto& c : protocol.scene.classes) shapes.push_back(to_string(c.shape));
  const auto& sc = protocol.scene;
  json j = {
      {"seed", seed},
      {"run_dir", run_dir},
      {"data",
       {{"root", data_root},
        {"class_groups", protocol.class_groups},
        {"train_scenes", protocol.train_scenes},
        {"val_scenes", protocol.val_scenes},
        {"test_scenes", protocol.test_scenes},
        {"scene",
         {{"image_size", sc.image_size}, {"shapes", shapes}, {"min_size", sc.min_size}, {"max_size", sc.max_size},
          {"min_count", sc.min_count}, {"max_count", sc.max_count}, {"noise", sc.noise},
          {"min_intensity", sc.min_intensity}, {"max_iou", sc.max_iou}, {"max_attempts", sc.max_attempts}}}}},
      {"model",
       {{"image_size", model.image_size}, {"embed_dim", model.embed_dim}, {"heads", model.heads},
        {"points", model.points}, {"ffn_dim", model.ffn_dim}, {"encoder_layers", model.encoder_layers},
        {"decoder_layers", model.decoder_layers}, {"backbone_channels", model.backbone_channels},
        {"encoder_levels", model.encoder_levels},
        {"proposal_anchor_size", model.proposal_anchor_size}, {"learnable_ref_size", model.learnable_ref_size},
        {"encoder_ref_cells", model.encoder_ref_cells}, {"init_seed", model.init_seed}}},
      {"tdqi", {{"enabled", tdqi_enabled}, {"n_qs", tdqi.n_qs}, {"n_lq", tdqi.n_lq}, {"mixed_selection", tdqi.mixed_selection}}},
      {"etop",
       {{"etop_stop_layer", etop.stop_layer}, {"schedule", to_string(etop.schedule)},
        {"unknown_ranking", etop.unknown_ranking == UnknownRanking::factorized ? "factorized" : "objectness"},
        {"stats_layer", etop.stats_layer}, {"detach_early_objectness", etop.detach_early_objectness}}},
      {"objectness", {{"momentum", stats_momentum}, {"regularizer", stats_regularizer}, {"diagonal", stats_diagonal},
        {"temperature", objectness_temperature ? json(*objectness_temperature) : json(nullptr)}}},
      {"loss",
       {{"class_weight", loss.class_weight}, {"l1_weight", loss.l1_weight}, {"giou_weight", loss.giou_weight},
        {"focal_alpha", loss.focal_alpha}, {"focal_gamma", loss.focal_gamma},
        {"objectness_weight", loss.objectness_weight}, {"background_column_target", loss.background_column_target}}},
      {"train", session_json(train)},
      {"finetune", session_json(finetune)},
      {"exemplars_per_class", exemplars_per_class},
      {"optimizer",
       {{"beta1", optimizer.beta1}, {"beta2", optimizer.beta2}, {"eps", optimizer.eps},
        {"weight_decay", optimizer.weight_decay}}},
      {"eval",
       {{"iou_threshold", eval.iou_threshold},
        {"u_recall_top_k", eval.u_recall_top_k ? json(*eval.u_recall_top_k) : json(nullptr)},
        {"attribution_threshold", eval.attribution_threshold},
        {"split", eval_split}}}};
  return j;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("run_dir");
  j["data"].erase("root");
  return hex32(crc32_bytes(j.dump()));
}

namespace {

fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv(kRunRootEnv); root && *root) return fs::path(root) / path;
  return path;
}

}  // namespace

fs::path ExperimentConfig::run_path() const { return resolve(run_dir); }
fs::path ExperimentConfig::data_path() const { return resolve(data_root); }

TrainSession ExperimentConfig::session(Phase phase, int task_id) const {
  TrainSession s = phase == Phase::train ? train : finetune;
  s.phase = phase;
  s.task_id = task_id;
  s.seed = seed;
  return s;
}

OwodModel ExperimentConfig::make_model() const {
  OwodModel m(model, tdqi, etop, loss, optimizer, tdqi_enabled);
  m.stats().momentum = static_cast<float>(stats_momentum);
  m.stats().regularizer = static_cast<float>(stats_regularizer);
  m.stats().diagonal = stats_diagonal;
  m.stats().temperature = static_cast<float>(effective_temperature());
  return m;
}

const json& experiment_schema() {
  static const json schema = json::parse(kExperimentSchemaText);
  return schema;
}

ExperimentConfig config_from_json(const json& j) {
  std::vector<SchemaIssue> issues = validate_schema(j, experiment_schema());
  if (!issues.empty()) throw ConfigError(issues);
  ExperimentConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.run_dir = j.at("run_dir").get<std::string>();
    const json& d = j.at("data");
    c.data_root = d.at("root").get<std::string>();
    c.protocol.class_groups = d.at("class_groups").get<std::vector<std::vector<int>>>();
    c.protocol.train_scenes = d.at("train_scenes").get<int>();
    c.protocol.val_scenes = d.at("val_scenes").get<int>();
    c.protocol.test_scenes = d.at("test_scenes").get<int>();
    c.protocol.seed = c.seed;
    const json& s = d.at("scene");
    auto& sc = c.protocol.scene;
    sc.image_size = s.at("image_size").get<int>();
    sc.classes.clear();
    const auto shapes = s.at("shapes").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < shapes.size(); ++i) sc.classes.push_back({static_cast<int>(i), shape_from_string(shapes[i])});
    sc.min_size = s.at("min_size").get<int>();
    sc.max_size = s.at("max_size").get<int>();
    sc.min_count = s.at("min_count").get<int>();
    sc.max_count = s.at("max_count").get<int>();
    sc.noise = s.at("noise").get<double>();
    sc.min_intensity = s.at("min_intensity").get<double>();
    sc.max_iou = s.at("max_iou").get<double>();
    sc.max_attempts = s.at("max_attempts").get<int>();

    const json& m = j.at("model");
    c.model.image_size = m.at("image_size").get<int>();
    c.model.embed_dim = m.at("embed_dim").get<int>();
    c.model.heads = m.at("heads").get<int>();
    c.model.points = m.at("points").get<int>();
    c.model.ffn_dim = m.at("ffn_dim").get<int>();
    c.model.encoder_layers = m.at("encoder_layers").get<int>();
    c.model.decoder_layers = m.at("decoder_layers").get<int>();
    c.model.backbone_channels = m.at("backbone_channels").get<std::vector<int>>();
    c.model.encoder_levels = m.at("encoder_levels").get<int>();
    c.model.proposal_anchor_size = m.at("proposal_anchor_size").get<double>();
    c.model.learnable_ref_size = m.at("learnable_ref_size").get<double>();
    c.model.encoder_ref_cells = m.at("encoder_ref_cells").get<double>();
    c.model.init_seed = m.at("init_seed").is_null() ? c.seed : m.at("init_seed").get<std::uint64_t>();
    c.model.total_classes = c.protocol.total_classes();

    const json& t = j.at("tdqi");
    c.tdqi_enabled = t.at("enabled").get<bool>();
    c.tdqi.n_qs = t.at("n_qs").get<int>();
    c.tdqi.n_lq = t.at("n_lq").get<int>();
    c.tdqi.mixed_selection = t.at("mixed_selection").get<bool>();

    const json& e = j.at("etop");
    c.etop.stop_layer = e.at("etop_stop_layer").get<int>();
    c.etop.total_layers = c.model.decoder_layers;
    c.etop.schedule = schedule_from_string(e.at("schedule").get<std::string>());
    c.etop.unknown_ranking = e.at("unknown_ranking").get<std::string>() == "objectness" ? UnknownRanking::objectness
                                                                                       : UnknownRanking::factorized;
    c.etop.stats_layer = e.at("stats_layer").get<int>();
    c.etop.detach_early_objectness = e.at("detach_early_objectness").get<bool>();

    const json& o = j.at("objectness");
    c.stats_momentum = o.at("momentum").get<double>();
    c.stats_regularizer = o.at("regularizer").get<double>();
    c.stats_diagonal = o.at("diagonal").get<bool>();
    if (!o.at("temperature").is_null()) c.objectness_temperature = o.at("temperature").get<double>();

    const json& l = j.at("loss");
    c.loss.class_weight = l.at("class_weight").get<double>();
    c.loss.l1_weight = l.at("l1_weight").get<double>();
    c.loss.giou_weight = l.at("giou_weight").get<double>();
    c.loss.focal_alpha = l.at("focal_alpha").get<double>();
    c.loss.focal_gamma = l.at("focal_gamma").get<double>();
    c.loss.objectness_weight = l.at("objectness_weight").get<double>();
    c.loss.background_column_target = l.at("background_column_target").get<bool>();

    c.train = session_from(j.at("train"), Phase::train);
    c.finetune = session_from(j.at("finetune"), Phase::finetune);
    c.exemplars_per_class = j.at("exemplars_per_class").get<int>();

    const json& op = j.at("optimizer");
    c.optimizer.beta1 = op.at("beta1").get<double>();
    c.optimizer.beta2 = op.at("beta2").get<double>();
    c.optimizer.eps = op.at("eps").get<double>();
    c.optimizer.weight_decay = op.at("weight_decay").get<double>();

    const json& ev = j.at("eval");
    c.eval.iou_threshold = ev.at("iou_threshold").get<double>();
    if (!ev.at("u_recall_top_k").is_null()) c.eval.u_recall_top_k = ev.at("u_recall_top_k").get<Index>();
    c.eval.attribution_threshold = ev.at("attribution_threshold").get<double>();
    c.eval_split = ev.at("split").get<std::string>();
  } catch (const json::exception& ex) {
    throw ConfigError("", ex.what());
  }

  // Cross-field rules, reported with the pointer of the field to fix.
  auto check = [&](bool ok, const char* ptr, const std::string& msg) {
    if (!ok) issues.push_back({ptr, msg});
  };
  check(c.protocol.scene.classes.size() == static_cast<std::size_t>(c.protocol.total_classes()), "/data/scene/shapes",
        "needs one shape per class id 0.." + std::to_string(c.protocol.total_classes() - 1));
  check(c.model.image_size == c.protocol.scene.image_size, "/model/image_size", "must equal /data/scene/image_size");
  check(c.model.image_size % 8 == 0, "/model/image_size", "must be a multiple of 8");
  check(c.model.embed_dim % c.model.heads == 0 && c.model.embed_dim % 4 == 0, "/model/embed_dim",
        "must be divisible by /model/heads and by 4");
  check(c.tdqi.n_qs + c.tdqi.n_lq > 0, "/tdqi/n_lq", "n_qs + n_lq must be positive");
  check(c.tdqi_enabled || c.tdqi.n_qs == 0, "/tdqi/n_qs", "must be 0 when /tdqi/enabled is false");
  check(c.tdqi.n_qs <= c.model.token_count(), "/tdqi/n_qs",
        "exceeds the encoder token count (" + std::to_string(c.model.token_count()) + ")");
  check(c.etop.stop_layer <= c.model.decoder_layers, "/etop/etop_stop_layer", "must not exceed /model/decoder_layers");
  check(c.etop.stats_layer <= c.etop.effective_stop_layer(), "/etop/stats_layer", "must not exceed the stop layer");
  check(c.protocol.scene.min_size <= c.protocol.scene.max_size, "/data/scene/max_size", "must be >= min_size");
  check(c.protocol.scene.max_size <= c.protocol.scene.image_size, "/data/scene/max_size", "cannot fit in the image");
  check(c.protocol.scene.min_count <= c.protocol.scene.max_count, "/data/scene/max_count", "must be >= min_count");
  check(c.protocol.scene.noise < c.protocol.scene.min_intensity, "/data/scene/noise", "must be below min_intensity");
  if (issues.empty()) {
    try {
      c.protocol.validate();
    } catch (const std::invalid_argument& ex) {
      issues.push_back({"/data/class_groups", ex.what()});
    }
  }
  if (!issues.empty()) throw ConfigError(issues);
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("", "override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  std::string pointer;
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto dot = path.find('.', start);
    const std::string token = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (token.empty()) throw ConfigError("", "override '" + assignment + "' has an empty key");
    pointer += "/" + token;
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  const json::json_pointer ptr(pointer);
  if (!doc.contains(ptr.parent_pointer()) || !doc.at(ptr.parent_pointer()).is_object())
    throw ConfigError(pointer, "override target has no parent object");
  doc[ptr] = value;
}

namespace {

// Like merge_patch, but a null in the file sets a nullable field to null
// instead of deleting it.
void overlay(json& base, const json& user) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      overlay(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

}  // namespace

ExperimentConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  json doc = ExperimentConfig().to_json();
  doc["model"]["init_seed"] = nullptr;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("", "cannot open config file " + file->string());
    json user;
    try {
      user = json::parse(in);
    } catch (const json::exception& ex) {
      throw ConfigError("", std::string("config file is not valid JSON: ") + ex.what());
    }
    if (!user.is_object()) throw ConfigError("", "config must be a JSON object");
    std::vector<SchemaIssue> issues = validate_schema(user, experiment_schema());
    if (!issues.empty()) throw ConfigError(issues);
    overlay(doc, user);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace dprob
