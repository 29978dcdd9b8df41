// SPDX-License-Identifier: Apache-2.0
#include "dprob/protocol/owod.hpp"

#include "dprob/numerics/blob.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <unordered_map>

namespace dprob {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Phase p) { return p == Phase::train ? "train" : "finetune"; }

Phase phase_from_string(const std::string& s) {
  if (s == "train") return Phase::train;
  if (s == "finetune") return Phase::finetune;
  throw std::invalid_argument("unknown phase '" + s + "'");
}

void TrainSession::validate() const {
  if (task_id < 1) throw std::invalid_argument("session.task_id must be >= 1");
  if (phase == Phase::finetune && task_id < 2) throw std::invalid_argument("a finetune session needs task_id >= 2");
  if (epochs < 0 || batch_size < 1) throw std::invalid_argument("session.epochs >= 0 and session.batch_size >= 1 required");
  if (!(lr > 0) || lr_drop_factor < 0) throw std::invalid_argument("session.lr must be positive");
}

// ---------------------------------------------------------------------------
// Exemplars

bool ExemplarStore::empty() const {
  for (const auto& [_, v] : per_class)
    if (!v.empty()) return false;
  return true;
}

std::vector<std::string> ExemplarStore::scene_ids() const {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& [_, v] : per_class)
    for (const auto& e : v)
      if (seen.insert(e.scene_id).second) ids.push_back(e.scene_id);
  return ids;
}

ExemplarStore build_exemplar_store(const std::vector<Scene>& scenes, const std::vector<int>& classes, int k,
                                   std::uint64_t seed) {
  if (k < 0) throw std::invalid_argument("exemplar capacity must be >= 0");
  ExemplarStore store;
  store.capacity = k;
  for (int c : classes) {
    std::vector<Exemplar> candidates;
    for (const auto& s : scenes)
      for (const auto& a : s.annotations)
        if (a.class_id == c) {
          candidates.push_back({s.scene_id, a});
          break;  // one exemplar per scene and class
        }
    std::mt19937_64 rng(derive_seed(seed, 0x5eed, static_cast<std::uint64_t>(c), 0));
    // Partial Fisher-Yates with explicit index arithmetic for portability.
    const std::size_t take = std::min(candidates.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (candidates.size() - i));
      std::swap(candidates[i], candidates[j]);
    }
    candidates.resize(take);
    store.per_class[c] = std::move(candidates);
  }
  return store;
}

// ---------------------------------------------------------------------------
// Model

OwodModel::OwodModel(ModelConfig model, TdqiConfig tdqi, EtopConfig etop, CostWeights weights, AdamWConfig optimizer,
                     bool with_tdqi)
    : detector_(std::move(model), tdqi, etop, with_tdqi), optimizer_(optimizer), weights_(weights) {
  weights_.validate();
  const Index d = detector_.model_config().embed_dim;
  stats_.mean = RowVector<float>::Zero(d);
  stats_.covariance = Matrix<float>::Identity(d, d);
}

GroundTruth ground_truth_for(const Scene& scene, const TaskView& view) {
  GroundTruth gt;
  std::vector<Box> boxes;
  for (const auto& a : scene.annotations) {
    const int col = view.column_of(a.class_id);
    if (col < 0) continue;  // never a positive target outside K^t
    gt.columns.push_back(col);
    boxes.push_back(a.box);
  }
  gt.boxes.resize(static_cast<Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) gt.boxes.row(static_cast<Index>(i)) = boxes[i];
  return gt;
}

std::vector<Detection> OwodModel::detect(const Matrix<float>& image, const TaskView& view) {
  Tape<float> tape;
  ForwardResult<float> out = detector_.forward(tape, image, view, stats_, false);
  return assemble_inference(out.values(), detector_.etop_config(), view, out.origins);
}

OwodModel::StepResult OwodModel::train_step(const std::vector<const Scene*>& batch, const TaskView& view, double lr,
                                            double grad_clip) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  auto& store = detector_.parameters();
  store.zero_grad();
  StepResult r;
  Matrix<float> matched(0, stats_.dim());
  std::vector<LossBreakdown> parts;
  for (const Scene* scene : batch) {
    Tape<float> tape;
    ForwardResult<float> out = detector_.forward(tape, scene->image, view, stats_, true);
    LossResult<float> loss = detection_loss(out, ground_truth_for(*scene, view), weights_, detector_.etop_config(), stats_);
    tape.backward(loss.total);
    r.mean_loss += loss.breakdown.total;
    parts.push_back(std::move(loss.breakdown));
    if (loss.stats_embeddings.rows() > 0) {
      Matrix<float> grown(matched.rows() + loss.stats_embeddings.rows(), matched.cols());
      grown << matched, loss.stats_embeddings;
      matched = std::move(grown);
    }
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (auto& [_, p] : store.all()) p.grad *= inv;
  r.grad_norm = clip_grad_norm(store, grad_clip);
  optimizer_.step(store, lr);
  ema_update(stats_, matched);

  r.mean_loss /= static_cast<double>(batch.size());
  r.mean_breakdown = parts.front();
  const double n = static_cast<double>(parts.size());
  for (std::size_t l = 0; l < r.mean_breakdown.layers.size(); ++l) {
    LayerLoss& acc = r.mean_breakdown.layers[l];
    acc = parts.front().layers[l];
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const LayerLoss& o = parts[i].layers[l];
      acc.l_class += o.l_class;
      acc.l_l1 += o.l_l1;
      acc.l_giou += o.l_giou;
      if (acc.l_obj) *acc.l_obj += *o.l_obj;
    }
    acc.l_class /= n;
    acc.l_l1 /= n;
    acc.l_giou /= n;
    if (acc.l_obj) *acc.l_obj /= n;
    acc.matches.clear();
  }
  if (r.mean_breakdown.encoder) {
    LayerLoss& acc = *r.mean_breakdown.encoder;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      acc.l_class += parts[i].encoder->l_class;
      acc.l_l1 += parts[i].encoder->l_l1;
      acc.l_giou += parts[i].encoder->l_giou;
    }
    acc.l_class /= n;
    acc.l_l1 /= n;
    acc.l_giou /= n;
    acc.matches.clear();
  }
  r.mean_breakdown.total = r.mean_loss;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint manifest " + path.string());
  return json::parse(in);
}

}  // namespace

void save_checkpoint(const fs::path& dir, const OwodModel& model, const CheckpointMeta& meta) {
  fs::create_directories(dir);
  BlobWriter blob;
  for (const auto& [name, p] : model.detector().parameters().all()) blob.add("param/" + name, p.value);
  const auto& st = model.stats();
  blob.add("stats/mean", Matrix<float>(st.mean));
  blob.add("stats/covariance", st.covariance);
  for (const auto& [name, m] : model.optimizer().first_moments()) blob.add("adam_m/" + name, m);
  for (const auto& [name, v] : model.optimizer().second_moments()) blob.add("adam_v/" + name, v);
  const std::vector<BlobEntry> entries = blob.write(dir / "params.bin");
  json manifest = {{"format", "dprob-checkpoint-1"},
                   {"config_hash", meta.config_hash},
                   {"seed", meta.seed},
                   {"task_id", meta.task_id},
                   {"phase", to_string(meta.phase)},
                   {"epoch", meta.epoch},
                   {"blob", "params.bin"},
                   {"tensors", entries},
                   {"stats",
                    {{"mean", "stats/mean"},
                     {"covariance", "stats/covariance"},
                     {"step_count", st.step_count},
                     {"momentum", st.momentum},
                     {"regularizer", st.regularizer},
                     {"diagonal", st.diagonal},
                     {"temperature", st.temperature}}},
                   {"optimizer", {{"step", model.optimizer().steps()}}}};
  write_json(dir / "manifest.json", manifest);
}

CheckpointMeta read_checkpoint_meta(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  CheckpointMeta meta;
  meta.config_hash = m.at("config_hash").get<std::string>();
  meta.seed = m.at("seed").get<std::uint64_t>();
  meta.task_id = m.at("task_id").get<int>();
  meta.phase = phase_from_string(m.at("phase").get<std::string>());
  meta.epoch = m.at("epoch").get<int>();
  return meta;
}

CheckpointMeta load_checkpoint(const fs::path& dir, OwodModel& model, const std::optional<std::string>& expected_hash) {
  const json m = read_json(dir / "manifest.json");
  CheckpointMeta meta = read_checkpoint_meta(dir);
  if (expected_hash && meta.config_hash != *expected_hash)
    throw std::runtime_error("resume mismatch: checkpoint config_hash " + meta.config_hash + " differs from config " +
                             *expected_hash);
  BlobReader blob(dir / m.at("blob").get<std::string>(), m.at("tensors").get<std::vector<BlobEntry>>());
  for (auto& [name, p] : model.detector().parameters().all()) {
    Matrix<float> v = blob.read("param/" + name);
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
      throw std::runtime_error("resume mismatch: parameter " + name + " has a different shape");
    p.value = std::move(v);
  }
  auto& st = model.stats();
  const json& sj = m.at("stats");
  st.mean = blob.read(sj.at("mean").get<std::string>());
  st.covariance = blob.read(sj.at("covariance").get<std::string>());
  st.step_count = sj.at("step_count").get<std::int64_t>();
  st.momentum = sj.at("momentum").get<float>();
  st.regularizer = sj.at("regularizer").get<float>();
  st.diagonal = sj.at("diagonal").get<bool>();
  st.temperature = sj.at("temperature").get<float>();
  auto& opt = model.optimizer();
  opt.first_moments().clear();
  opt.second_moments().clear();
  for (const auto& [name, _] : model.detector().parameters().all()) {
    if (blob.contains("adam_m/" + name)) opt.first_moments()[name] = blob.read("adam_m/" + name);
    if (blob.contains("adam_v/" + name)) opt.second_moments()[name] = blob.read("adam_v/" + name);
  }
  opt.set_steps(m.at("optimizer").at("step").get<std::int64_t>());
  return meta;
}

// ---------------------------------------------------------------------------
// Sessions

std::vector<EpochLog> run_session(OwodModel& model, const std::vector<const Scene*>& scenes, const TaskView& view,
                                  const TrainSession& session, const RunOptions& options, int start_epoch) {
  session.validate();
  std::vector<EpochLog> logs;
  if (scenes.empty()) return logs;
  const fs::path ckpt = options.out_dir / "checkpoints" / ("task" + std::to_string(session.task_id) + "_" + to_string(session.phase));
  for (int epoch = start_epoch + 1; epoch <= session.epochs; ++epoch) {
    std::vector<std::size_t> order(scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(derive_seed(session.seed, static_cast<std::uint64_t>(session.task_id),
                                    static_cast<std::uint64_t>(session.phase == Phase::train ? 0 : 1),
                                    static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

    EpochLog log;
    log.task_id = session.task_id;
    log.phase = session.phase;
    log.epoch = epoch;
    log.lr = session.lr_at(epoch);
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(session.batch_size)) {
      std::vector<const Scene*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(session.batch_size)); ++i)
        batch.push_back(scenes[order[i]]);
      const auto step = model.train_step(batch, view, log.lr, session.grad_clip);
      if (options.loss_csv) write_loss_csv_rows(*options.loss_csv, model.optimizer().steps(), step.mean_breakdown);
      loss_sum += step.mean_loss * static_cast<double>(batch.size());
      ++log.steps;
    }
    log.mean_loss = loss_sum / static_cast<double>(scenes.size());
    if (options.write_checkpoints)
      save_checkpoint(ckpt, model, {options.config_hash, options.master_seed, session.task_id, session.phase, epoch});
    if (options.on_epoch) options.on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

std::vector<EpochLog> run_task(OwodModel& model, const TaskSpec& task, const TrainSession& session,
                               const RunOptions& options, int start_epoch) {
  if (session.task_id != task.task_id || session.phase != Phase::train)
    throw std::invalid_argument("run_task: session does not describe task training for task " + std::to_string(task.task_id));
  std::vector<const Scene*> scenes;
  for (const auto& s : task.train) scenes.push_back(&s);
  return run_session(model, scenes, task.view(model.detector().model_config().total_classes), session, options, start_epoch);
}

std::vector<Scene> finetune_scenes(const Dataset& dataset, const ExemplarStore& store, const TaskSpec& task) {
  if (store.empty()) return task.train;
  std::unordered_map<std::string, const Scene*> by_id;
  for (const auto& t : dataset.tasks)
    for (const auto& s : t.train) by_id.emplace(s.scene_id, &s);
  std::vector<Scene> out;
  for (const auto& id : store.scene_ids()) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("exemplar scene " + id + " is not in the dataset");
    const Scene full = generate_scene(dataset.protocol.scene, it->second->seed);
    if (full.image != it->second->image) throw DataError("exemplar scene " + id + " does not regenerate from its seed");
    Scene s = *it->second;
    s.annotations.clear();
    for (const auto& a : full.annotations)
      if (std::binary_search(task.known_classes.begin(), task.known_classes.end(), a.class_id)) s.annotations.push_back(a);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<EpochLog> finetune(OwodModel& model, const Dataset& dataset, const ExemplarStore& store,
                               const TaskSpec& task, const TrainSession& session, const RunOptions& options,
                               int start_epoch) {
  if (session.task_id != task.task_id || session.phase != Phase::finetune)
    throw std::invalid_argument("finetune: session does not describe fine-tuning for task " + std::to_string(task.task_id));
  const std::vector<Scene> data = finetune_scenes(dataset, store, task);
  std::vector<const Scene*> scenes;
  for (const auto& s : data) scenes.push_back(&s);
  return run_session(model, scenes, task.view(model.detector().model_config().total_classes), session, options, start_epoch);
}

EvalReport evaluate(OwodModel& model, const TaskSpec& task, const std::vector<Scene>& scenes,
                    const EvalOptions& options, std::vector<std::vector<Detection>>* detections) {
  const TaskView view = task.view(model.detector().model_config().total_classes);
  std::vector<std::vector<Detection>> dets;
  dets.reserve(scenes.size());
  for (const auto& s : scenes) dets.push_back(model.detect(s.image, view));
  EvalReport r = report_task(task, scenes, dets, options);
  if (detections) *detections = std::move(dets);
  return r;
}

}  // namespace dprob
