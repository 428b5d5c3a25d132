#pragma once

// Alternating two-optimizer training. Each iteration first fits the
// estimator parameters (theta) on detached embeddings, then updates every
// other parameter (phi') on L_rec + lambda_clip * L_afclip + lambda_mi * L_mi
// with theta frozen.

#include "muteswap/checkpoint.hpp"
#include "muteswap/corpus.hpp"
#include "muteswap/losses.hpp"
#include "muteswap/model.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace muteswap {

struct TrainConfig {
  double lambda_clip = 0.1;
  double lambda_mi = 0.01;
  double lr_theta = 1e-3;
  double lr_peak = 1e-4;
  double lr_final = 5e-6;
  double warmup_frac = 0.05;
  double hold_frac = 0.10;
  double decay_frac = 0.85;
  int total_steps = 3000;
  int batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global L2 norm for the phi' update; <= 0 disables
  int e_steps = 1;
  int max_images = 16;
  double temperature = 1.0;
  bool freeze_content = false;
  bool freeze_face = false;
  bool freeze_speech = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (lambda_clip < 0 || lambda_mi < 0) fail("lambda values must be >= 0");
    if (warmup_frac < 0 || hold_frac < 0 || decay_frac < 0 ||
        std::abs(warmup_frac + hold_frac + decay_frac - 1.0) > 1e-9) {
      fail("schedule fractions must be non-negative and sum to 1");
    }
    if (total_steps < 1) fail("total_steps must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if ((lambda_clip > 0 || lambda_mi > 0) && batch_size < 2) {
      fail("batch_size must be >= 2 when a contrastive or MI loss is active");
    }
    if (lr_theta < 0 || lr_peak < 0 || lr_final < 0) fail("learning rates must be >= 0");
    if (e_steps < 1) fail("e_steps must be >= 1");
    if (max_images < 1) fail("max_images must be >= 1");
    if (!(temperature > 0)) fail("temperature must be > 0");
  }

  bool operator==(const TrainConfig&) const = default;
};

#define MUTESWAP_TRAIN_FIELDS(X)                                                              \
  X(lambda_clip) X(lambda_mi) X(lr_theta) X(lr_peak) X(lr_final) X(warmup_frac) X(hold_frac) \
  X(decay_frac) X(total_steps) X(batch_size) X(seed) X(beta1) X(beta2) X(adam_eps)           \
  X(weight_decay) X(grad_clip) X(e_steps) X(max_images) X(temperature)                       \
  X(freeze_content) X(freeze_face) X(freeze_speech)

inline void to_json(json& j, const TrainConfig& c) {
  j = json::object();
#define X(f) j[#f] = c.f;
  MUTESWAP_TRAIN_FIELDS(X)
#undef X
}

inline void from_json(const json& j, TrainConfig& c) {
#define X(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
  MUTESWAP_TRAIN_FIELDS(X)
#undef X
}

/// `key = value` lines, one per field, readable back as a run configuration.
inline std::string to_config_text(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << std::boolalpha;
#define X(f) out << #f << " = " << c.f << "\n";
  MUTESWAP_TRAIN_FIELDS(X)
#undef X
  return out.str();
}

// ---------------------------------------------------------------- schedule

/// Linear warmup from 0 to peak, constant hold, then linear decay to final.
struct TriStageSchedule {
  double peak = 1e-4;
  double final_lr = 5e-6;
  double warmup_frac = 0.05;
  double hold_frac = 0.10;
  double decay_frac = 0.85;
  int total = 1;

  static TriStageSchedule from(const TrainConfig& c) {
    return {c.lr_peak, c.lr_final, c.warmup_frac, c.hold_frac, c.decay_frac, c.total_steps};
  }

  double lr_at(int step) const {
    if (step < 0 || step >= total) {
      throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                              std::to_string(total) + ")");
    }
    const double warm_end = warmup_frac * total;
    const double hold_end = warm_end + hold_frac * total;
    const double s = step;
    if (s < warm_end) return peak * s / warm_end;
    if (s < hold_end) return peak;
    const double span = total - hold_end;
    if (span <= 0) return peak;
    return peak + (final_lr - peak) * (s - hold_end) / span;
  }
};

// ---------------------------------------------------------------- optimiser

template <typename T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::int64_t t = 0;
};

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.98, eps = 1e-8, weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam over the parameters listed in `indices`.
template <typename T>
void adamw_step(ParameterSet<T>& params, const std::vector<int>& indices,
                const std::vector<Matrix<T>>& grads, AdamState<T>& st, double lr,
                const AdamHyper& h) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      st.v.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }
  ++st.t;
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(st.t)));
  const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(st.t)));
  const T lr_t = static_cast<T>(lr);
  const T decay = static_cast<T>(1.0 - lr * h.weight_decay);
  const T eps = static_cast<T>(h.eps);
  for (int i : indices) {
    auto& p = params[i].value;
    const auto& g = grads[static_cast<std::size_t>(i)];
    auto& m = st.m[static_cast<std::size_t>(i)];
    auto& v = st.v[static_cast<std::size_t>(i)];
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    p *= decay;
    p.array() -= lr_t * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

template <typename T>
double global_norm(const std::vector<Matrix<T>>& grads, const std::vector<int>& indices) {
  double s = 0.0;
  for (int i : indices) s += static_cast<double>(grads[static_cast<std::size_t>(i)].squaredNorm());
  return std::sqrt(s);
}

// ---------------------------------------------------------------- trainer

struct StepMetrics {
  int step = 0;
  double l_theta = 0.0;
  double l_rec = 0.0;
  double l_clip = 0.0;
  double l_mi = 0.0;
  double total = 0.0;
  double lr_phi = 0.0;
  double lr_theta = 0.0;
  double grad_norm = 0.0;
};

inline json to_json_line(const StepMetrics& m) {
  return json{{"step", m.step},       {"l_theta", m.l_theta}, {"l_rec", m.l_rec},
              {"l_clip", m.l_clip},   {"l_mi", m.l_mi},       {"total", m.total},
              {"lr_phi", m.lr_phi},   {"lr_theta", m.lr_theta}, {"grad_norm", m.grad_norm}};
}

class CheckpointMismatch : public DataError {
 public:
  using DataError::DataError;
};

template <typename T>
class Trainer {
 public:
  Trainer(const ModelConfig& mc, const TrainConfig& tc) : model_(mc), cfg_(tc) {
    tc.validate();
    rng_.seed(tc.seed);
    for (int i = 0; i < model_.params().size(); ++i) {
      const std::string& name = model_.params()[i].name;
      if (is_estimator_param(name)) {
        theta_.push_back(i);
      } else {
        phi_.push_back(i);
        if (!frozen(name)) phi_update_.push_back(i);
      }
    }
  }

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int step() const { return step_; }
  const std::vector<int>& theta_indices() const { return theta_; }
  const std::vector<int>& phi_indices() const { return phi_; }
  std::mt19937_64& rng() { return rng_; }

  /// Instrumentation switches: skip either half of the alternation.
  bool run_e_step = true;
  bool run_m_step = true;

  double lr_phi_at(int step) const { return TriStageSchedule::from(cfg_).lr_at(step); }

  /// One alternation on a batch. Throws NumericError naming the first
  /// non-finite loss component.
  StepMetrics train_step(const std::vector<const Utterance*>& batch) {
    const auto N = static_cast<int>(batch.size());
    if (N < 1) throw std::invalid_argument("train_step: empty batch");
    if ((cfg_.lambda_clip > 0 || cfg_.lambda_mi > 0) && N < 2) {
      throw std::invalid_argument("train_step: batch of at least 2 required for contrastive/MI terms");
    }
    StepMetrics out;
    out.step = step_;
    out.lr_phi = lr_phi_at(step_);
    out.lr_theta = cfg_.lr_theta;

    std::vector<Matrix<T>> faces;
    faces.reserve(batch.size());
    for (const Utterance* u : batch) {
      const auto idx = sample_face_indices(static_cast<int>(u->faces.rows()), cfg_.max_images, rng_);
      faces.push_back(gather_faces(u->faces, idx).template cast<T>());
    }
    const bool use_mi = cfg_.lambda_mi > 0;
    const bool use_clip = cfg_.lambda_clip > 0;
    const std::vector<int> negatives = use_mi ? sample_negatives(N, rng_) : std::vector<int>{};

    const auto& params = model_.params();
    Graph<T> g(params, [this](const std::string& name) { return is_phi_trainable(name); });
    std::vector<ad::Var<T>> contents, identities, recon_terms;
    T frames_total = 0;
    for (int i = 0; i < N; ++i) {
      const Utterance& u = *batch[static_cast<std::size_t>(i)];
      auto ec = model_.encode_content(g, g.constant(u.video.template cast<T>()));
      auto ei = model_.encode_faces(g, g.constant(faces[static_cast<std::size_t>(i)]));
      auto pred = model_.blend(g, Model<T>::fuse(ec, ei));
      auto target = g.constant(u.mel.template cast<T>());
      const T n = static_cast<T>(target.value().size());
      recon_terms.push_back(ad::scale(reconstruction_loss(pred, target), n));
      frames_total += n;
      contents.push_back(ec);
      identities.push_back(ei);
    }
    ad::Var<T> face_batch = ad::concat_rows(identities);

    if (use_mi && run_e_step) {
      for (int e = 0; e < cfg_.e_steps; ++e) {
        const double l = estimator_update(contents, face_batch.value());
        if (e == 0) out.l_theta = l;
      }
    }

    ad::Var<T> rec = recon_terms[0];
    for (std::size_t i = 1; i < recon_terms.size(); ++i) rec = ad::add(rec, recon_terms[i]);
    rec = ad::scale(rec, T(1) / frames_total);
    ad::Var<T> total = rec;
    out.l_rec = static_cast<double>(rec.value()(0, 0));
    require_finite("l_rec", out.l_rec);

    if (use_clip) {
      std::vector<ad::Var<T>> audio;
      for (const Utterance* u : batch) {
        audio.push_back(model_.encode_speech(g, g.constant(u->mel.template cast<T>())));
      }
      auto clip = afclip_loss(ad::concat_rows(audio), face_batch, static_cast<T>(cfg_.temperature));
      out.l_clip = static_cast<double>(clip.total.value()(0, 0));
      require_finite("l_clip", out.l_clip);
      total = ad::add(total, ad::scale(clip.total, static_cast<T>(cfg_.lambda_clip)));
    }
    if (use_mi) {
      auto q = model_.estimator().predict(g, contents);
      auto mi = mi_upper_bound(face_batch, q, negatives);
      out.l_mi = static_cast<double>(mi.value()(0, 0));
      require_finite("l_mi", out.l_mi);
      total = ad::add(total, ad::scale(mi, static_cast<T>(cfg_.lambda_mi)));
    }
    out.total = static_cast<double>(total.value()(0, 0));
    require_finite("total", out.total);

    if (run_m_step) {
      g.tape.backward(total);
      std::vector<Matrix<T>> grads = g.gradients();
      const std::vector<int> active = reached(g, phi_update_);
      out.grad_norm = global_norm(grads, active);
      if (!std::isfinite(out.grad_norm)) throw NumericError("non-finite gradient in phi' update");
      if (cfg_.grad_clip > 0 && out.grad_norm > cfg_.grad_clip) {
        const T s = static_cast<T>(cfg_.grad_clip / out.grad_norm);
        for (int i : active) grads[static_cast<std::size_t>(i)] *= s;
      }
      adamw_step(model_.params(), active, grads, adam_phi_, out.lr_phi, hyper());
    }
    ++step_;
    return out;
  }

  /// Runs `steps` iterations over the corpus' training split.
  void train(const Corpus& corpus, int steps, const std::function<void(const StepMetrics&)>& on_step = {}) {
    if (!iterator_) {
      auto items = corpus.manifest.split_indices("train");
      if (items.empty()) items = corpus.manifest.split_indices("");
      iterator_.emplace(items, cfg_.batch_size, cfg_.seed, /*drop_last=*/true);
      if (pending_seek_) {
        iterator_->seek(pending_seek_->first, pending_seek_->second);
        pending_seek_.reset();
      }
    }
    for (int s = 0; s < steps; ++s) {
      const auto idx = iterator_->next();
      std::vector<const Utterance*> batch;
      for (int i : idx) batch.push_back(&corpus.utterances[static_cast<std::size_t>(i)]);
      const StepMetrics m = train_step(batch);
      if (on_step) on_step(m);
    }
  }

  // ------------------------------------------------------------ checkpoints

  CheckpointFile to_checkpoint() const {
    CheckpointFile ck;
    std::ostringstream rng_text;
    rng_text << rng_;
    ck.header = {{"kind", "train"},
                 {"model_config", model_.config()},
                 {"train_config", cfg_},
                 {"step", step_},
                 {"rng", rng_text.str()},
                 {"adam_phi_t", adam_phi_.t},
                 {"adam_theta_t", adam_theta_.t}};
    if (iterator_) {
      const auto [epoch, pos] = iterator_->position();
      ck.header["iterator"] = {{"epoch", epoch}, {"pos", pos}};
    } else if (pending_seek_) {
      ck.header["iterator"] = {{"epoch", pending_seek_->first}, {"pos", pending_seek_->second}};
    }
    for (const auto& p : model_.params()) {
      ck.blocks.emplace_back("param/" + p.name, p.value.template cast<float>());
    }
    append_moments(ck, "adam_phi", adam_phi_);
    append_moments(ck, "adam_theta", adam_theta_);
    return ck;
  }

  void save(const fs::path& path) const { save_checkpoint_file(path, to_checkpoint()); }

  /// Restores parameters, optimiser moments, step, RNG and data position.
  /// The checkpoint's model configuration must equal this trainer's.
  void load(const fs::path& path) {
    const CheckpointFile ck = load_checkpoint_file(path);
    if (ck.header.value("kind", "") != "train") {
      throw CheckpointMismatch(path.string() + " is not a training checkpoint");
    }
    ModelConfig mc;
    try {
      mc = ck.header.at("model_config").get<ModelConfig>();
      cfg_ = ck.header.at("train_config").get<TrainConfig>();
      step_ = ck.header.at("step").get<int>();
      std::istringstream rng_text(ck.header.at("rng").get<std::string>());
      rng_text >> rng_;
      adam_phi_.t = ck.header.at("adam_phi_t").get<std::int64_t>();
      adam_theta_.t = ck.header.at("adam_theta_t").get<std::int64_t>();
      iterator_.reset();
      pending_seek_.reset();
      if (ck.header.contains("iterator")) {
        pending_seek_ = std::make_pair(ck.header["iterator"].at("epoch").get<std::uint64_t>(),
                                       ck.header["iterator"].at("pos").get<std::size_t>());
      }
    } catch (const json::exception& e) {
      throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    if (!(mc == model_.config())) {
      throw CheckpointMismatch("checkpoint " + path.string() + " was written for a different model configuration");
    }
    load_params(ck, model_.params(), path);
    adam_phi_ = read_moments(ck, "adam_phi", adam_phi_.t);
    adam_theta_ = read_moments(ck, "adam_theta", adam_theta_.t);
  }

  static Trainer from_checkpoint(const fs::path& path) {
    const CheckpointFile ck = load_checkpoint_file(path);
    try {
      Trainer t(ck.header.at("model_config").get<ModelConfig>(),
                ck.header.at("train_config").get<TrainConfig>());
      t.load(path);
      return t;
    } catch (const json::exception& e) {
      throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
  }

  /// Parameters needed for synthesis only: drops the estimator and the speech path.
  CheckpointFile to_inference_export() const {
    CheckpointFile ck;
    ck.header = {{"kind", "inference"}, {"model_config", model_.config()}, {"step", step_}};
    for (const auto& p : model_.params()) {
      const Block b = block_of(p.name);
      if (b == Block::kEstimator || b == Block::kSpeechEncoder || b == Block::kAdapterA) continue;
      ck.blocks.emplace_back("param/" + p.name, p.value.template cast<float>());
    }
    return ck;
  }

  void export_inference(const fs::path& path) const {
    save_checkpoint_file(path, to_inference_export());
  }

  static void load_params(const CheckpointFile& ck, ParameterSet<T>& params, const fs::path& origin,
                          bool allow_missing = false) {
    for (auto& p : params) {
      const Matrix<float>* m = ck.find("param/" + p.name);
      if (m == nullptr) {
        if (allow_missing) continue;
        throw DataError("checkpoint " + origin.string() + " lacks parameter " + p.name);
      }
      if (m->rows() != p.value.rows() || m->cols() != p.value.cols()) {
        throw CheckpointMismatch("parameter " + p.name + " in " + origin.string() + " has shape " +
                                 shape_str(m->rows(), m->cols()));
      }
      p.value = m->template cast<T>();
    }
  }

 private:
  AdamHyper hyper() const {
    return {cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay};
  }

  bool frozen(const std::string& name) const {
    const Block b = block_of(name);
    return (cfg_.freeze_content && b == Block::kContentEncoder) ||
           (cfg_.freeze_face && b == Block::kFaceEncoder) ||
           (cfg_.freeze_speech && b == Block::kSpeechEncoder);
  }

  bool is_phi_trainable(const std::string& name) const {
    return !is_estimator_param(name) && !frozen(name);
  }

  // E-step on detached embeddings; returns the loss before the update.
  double estimator_update(const std::vector<ad::Var<T>>& contents, const Matrix<T>& faces) {
    Graph<T> ge(model_.params(), [](const std::string& n) { return is_estimator_param(n); });
    std::vector<ad::Var<T>> detached;
    for (const auto& c : contents) detached.push_back(ge.constant(c.value()));
    auto q = model_.estimator().predict(ge, detached);
    auto loss = e_step_loss(ge.constant(faces), q);
    const double l = static_cast<double>(loss.value()(0, 0));
    require_finite("l_theta", l);
    ge.tape.backward(loss);
    adamw_step(model_.params(), reached(ge, theta_), ge.gradients(), adam_theta_, cfg_.lr_theta, hyper());
    return l;
  }

  // Parameters outside the loss graph get no update at all, not even decay.
  static std::vector<int> reached(const Graph<T>& g, const std::vector<int>& candidates) {
    std::vector<int> out;
    for (int i : candidates) {
      if (g.reached(i)) out.push_back(i);
    }
    return out;
  }

  static void require_finite(const char* what, double v) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss component: ") + what);
  }

  void append_moments(CheckpointFile& ck, const std::string& tag, const AdamState<T>& st) const {
    if (st.m.empty()) return;
    for (int i = 0; i < model_.params().size(); ++i) {
      const auto& name = model_.params()[i].name;
      ck.blocks.emplace_back(tag + ".m/" + name, st.m[static_cast<std::size_t>(i)].template cast<float>());
      ck.blocks.emplace_back(tag + ".v/" + name, st.v[static_cast<std::size_t>(i)].template cast<float>());
    }
  }

  AdamState<T> read_moments(const CheckpointFile& ck, const std::string& tag, std::int64_t t) const {
    AdamState<T> st;
    st.t = t;
    const auto& ps = model_.params();
    if (ck.find(tag + ".m/" + ps[0].name) == nullptr) return st;
    for (const auto& p : ps) {
      const Matrix<float>* m = ck.find(tag + ".m/" + p.name);
      const Matrix<float>* v = ck.find(tag + ".v/" + p.name);
      if (m == nullptr || v == nullptr) throw DataError("checkpoint lacks optimiser state for " + p.name);
      st.m.push_back(m->template cast<T>());
      st.v.push_back(v->template cast<T>());
    }
    return st;
  }

  Model<T> model_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  int step_ = 0;
  std::vector<int> theta_, phi_, phi_update_;
  AdamState<T> adam_phi_, adam_theta_;
  std::optional<BatchIterator> iterator_;
  std::optional<std::pair<std::uint64_t, std::size_t>> pending_seek_;
};

/// Loads a training checkpoint or an inference export for synthesis.
template <typename T>
Model<T> load_model(const fs::path& path) {
  const CheckpointFile ck = load_checkpoint_file(path);
  ModelConfig mc;
  try {
    mc = ck.header.at("model_config").get<ModelConfig>();
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  Model<T> m(mc);
  Trainer<T>::load_params(ck, m.params(), path, /*allow_missing=*/ck.header.value("kind", "") == "inference");
  return m;
}

}  // namespace muteswap
