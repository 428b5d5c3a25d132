#pragma once

// The trainable graph: content path (temporal convolutions, local
// self-attention, adapter-V), facial path (per-image MLP, adapter-F, mean
// pooling), speech path (circular convolution, time mean, adapter-A), additive
// broadcast fusion, and a Conformer-style blender that emits r mel frames per
// video frame.

#include "muteswap/io.hpp"
#include "muteswap/miest.hpp"
#include "muteswap/nn.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace muteswap {

struct ModelConfig {
  int d = 128;
  int heads = 4;
  int blender_layers = 2;
  int blender_conv_kernel = 5;
  int ffn_mult = 2;
  int content_layers = 2;
  int content_kernel = 3;
  int content_window = 4;  // local attention half-width in the content mixer
  int face_hidden = 128;
  int speech_hidden = 64;
  int speech_kernel = 3;
  int mi_hidden = 64;
  int video_dim = 32;
  int face_dim = 16;
  int mel_bins = 80;
  int mel_per_video_frame = 4;
  std::uint64_t init_seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (d < 1 || heads < 1 || d % heads != 0) fail("d must be divisible by heads");
    if (mel_per_video_frame < 1) fail("mel_per_video_frame must be >= 1");
    if (content_kernel % 2 == 0 || speech_kernel % 2 == 0 || blender_conv_kernel % 2 == 0) {
      fail("convolution kernels must be odd");
    }
    if (video_dim < 1 || face_dim < 1 || mel_bins < 1) fail("input dims must be positive");
    if (blender_layers < 0 || content_layers < 1 || content_window < 0) fail("layer counts");
  }

  /// Frames on either side of t that can influence content row t.
  int content_receptive_radius() const {
    return content_layers * (content_kernel - 1) / 2 + content_window;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"d", c.d},
           {"heads", c.heads},
           {"blender_layers", c.blender_layers},
           {"blender_conv_kernel", c.blender_conv_kernel},
           {"ffn_mult", c.ffn_mult},
           {"content_layers", c.content_layers},
           {"content_kernel", c.content_kernel},
           {"content_window", c.content_window},
           {"face_hidden", c.face_hidden},
           {"speech_hidden", c.speech_hidden},
           {"speech_kernel", c.speech_kernel},
           {"mi_hidden", c.mi_hidden},
           {"video_dim", c.video_dim},
           {"face_dim", c.face_dim},
           {"mel_bins", c.mel_bins},
           {"mel_per_video_frame", c.mel_per_video_frame},
           {"init_seed", c.init_seed}};
}

inline void from_json(const json& j, ModelConfig& c) {
  j.at("d").get_to(c.d);
  j.at("heads").get_to(c.heads);
  j.at("blender_layers").get_to(c.blender_layers);
  j.at("blender_conv_kernel").get_to(c.blender_conv_kernel);
  j.at("ffn_mult").get_to(c.ffn_mult);
  j.at("content_layers").get_to(c.content_layers);
  j.at("content_kernel").get_to(c.content_kernel);
  j.at("content_window").get_to(c.content_window);
  j.at("face_hidden").get_to(c.face_hidden);
  j.at("speech_hidden").get_to(c.speech_hidden);
  j.at("speech_kernel").get_to(c.speech_kernel);
  j.at("mi_hidden").get_to(c.mi_hidden);
  j.at("video_dim").get_to(c.video_dim);
  j.at("face_dim").get_to(c.face_dim);
  j.at("mel_bins").get_to(c.mel_bins);
  j.at("mel_per_video_frame").get_to(c.mel_per_video_frame);
  j.at("init_seed").get_to(c.init_seed);
}

enum class Modality { kFacial, kAudio };

/// A single d-dimensional identity vector tagged with where it came from.
template <typename T>
struct IdentityEmbedding {
  RowVector<T> values;
  Modality modality = Modality::kFacial;
};

/// Parameter-block families, used for freezing and inference export.
enum class Block { kContentEncoder, kAdapterV, kFaceEncoder, kAdapterF, kSpeechEncoder, kAdapterA,
                   kBlender, kEstimator };

inline Block block_of(const std::string& name) {
  if (has_prefix(name, "content.")) return Block::kContentEncoder;
  if (has_prefix(name, "adapter_v.")) return Block::kAdapterV;
  if (has_prefix(name, "face.")) return Block::kFaceEncoder;
  if (has_prefix(name, "adapter_f.")) return Block::kAdapterF;
  if (has_prefix(name, "speech.")) return Block::kSpeechEncoder;
  if (has_prefix(name, "adapter_a.")) return Block::kAdapterA;
  if (has_prefix(name, "blender.")) return Block::kBlender;
  if (has_prefix(name, "miest.")) return Block::kEstimator;
  throw std::logic_error("parameter outside every block: " + name);
}

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.init_seed);
    const Eigen::Index d = cfg.d;

    for (int l = 0; l < cfg.content_layers; ++l) {
      content_convs_.push_back(Conv1d::make(params_, "content.conv" + std::to_string(l),
                                            l == 0 ? cfg.video_dim : d, d, cfg.content_kernel,
                                            ad::Padding::kZero, rng));
    }
    content_ln_ = LayerNorm::make(params_, "content.mixer.ln", d);
    content_attn_ = MultiHeadAttention::make(params_, "content.mixer.attn", d, cfg.heads, rng);
    adapter_v_ = Linear::make(params_, "adapter_v", d, d, rng);

    face0_ = Linear::make(params_, "face.fc0", cfg.face_dim, cfg.face_hidden, rng);
    face1_ = Linear::make(params_, "face.fc1", cfg.face_hidden, d, rng);
    adapter_f_ = Linear::make(params_, "adapter_f", d, d, rng);

    speech_conv_ = Conv1d::make(params_, "speech.conv", cfg.mel_bins, cfg.speech_hidden,
                                cfg.speech_kernel, ad::Padding::kCircular, rng);
    speech_fc_ = Linear::make(params_, "speech.fc", cfg.speech_hidden, d, rng);
    adapter_a_ = Linear::make(params_, "adapter_a", d, d, rng);

    for (int l = 0; l < cfg.blender_layers; ++l) {
      const std::string p = "blender.l" + std::to_string(l);
      BlenderLayer b;
      b.ln_attn = LayerNorm::make(params_, p + ".ln_attn", d);
      b.attn = MultiHeadAttention::make(params_, p + ".attn", d, cfg.heads, rng);
      b.ln_conv = LayerNorm::make(params_, p + ".ln_conv", d);
      Matrix<T> dw(cfg.blender_conv_kernel, d);
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(double(cfg.blender_conv_kernel)),
                                               1.0 / std::sqrt(double(cfg.blender_conv_kernel)));
      for (Eigen::Index i = 0; i < dw.size(); ++i) dw.data()[i] = static_cast<T>(u(rng));
      b.dwconv = params_.add(p + ".dwconv.w", std::move(dw));
      b.conv_out = Linear::make(params_, p + ".conv_out", d, d, rng);
      b.ln_ffn = LayerNorm::make(params_, p + ".ln_ffn", d);
      b.ffn0 = Linear::make(params_, p + ".ffn0", d, d * cfg.ffn_mult, rng);
      b.ffn1 = Linear::make(params_, p + ".ffn1", d * cfg.ffn_mult, d, rng);
      blender_.push_back(b);
    }
    out_ln_ = LayerNorm::make(params_, "blender.ln_out", d);
    out_proj_ = Linear::make(params_, "blender.out", d,
                             static_cast<Eigen::Index>(cfg.mel_bins) * cfg.mel_per_video_frame, rng);

    MiEstimatorConfig mc;
    mc.input_dim = cfg.d;
    mc.target_dim = cfg.d;
    mc.hidden = cfg.mi_hidden;
    estimator_ = MiEstimator(params_, mc, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const MiEstimator& estimator() const { return estimator_; }
  MiEstimator& estimator() { return estimator_; }

  // ------------------------------------------------------------ graph API

  /// T_v x D_v video features -> T_v x d content sequence.
  ad::Var<T> encode_content(Graph<T>& g, ad::Var<T> video) const {
    if (video.cols() != cfg_.video_dim) {
      throw ShapeError("encode_content: expected " + std::to_string(cfg_.video_dim) +
                       " video features per frame, got " + std::to_string(video.cols()));
    }
    if (video.rows() < 1) throw ShapeError("encode_content: empty sequence");
    ad::Var<T> x = video;
    for (const auto& conv : content_convs_) x = ad::silu(conv(g, x));
    const Matrix<T> mask = band_mask<T>(x.rows(), cfg_.content_window);
    x = ad::add(x, content_attn_(g, content_ln_(g, x), &mask));
    return adapter_v_(g, x);
  }

  /// K x D_f face samples -> K x d per-image embeddings (after adapter-F).
  ad::Var<T> face_embeddings(Graph<T>& g, ad::Var<T> faces) const {
    if (faces.cols() != cfg_.face_dim) {
      throw ShapeError("encode_faces: expected " + std::to_string(cfg_.face_dim) +
                       " face features, got " + std::to_string(faces.cols()));
    }
    if (faces.rows() < 1) throw ShapeError("encode_faces: at least one face sample required");
    return adapter_f_(g, face1_(g, ad::silu(face0_(g, faces))));
  }

  /// Mean of the per-image embeddings: 1 x d.
  ad::Var<T> encode_faces(Graph<T>& g, ad::Var<T> faces) const {
    return ad::mean_rows(face_embeddings(g, faces));
  }

  /// T_m x mel_bins log-Mel -> 1 x d audio identity (mean over time).
  ad::Var<T> encode_speech(Graph<T>& g, ad::Var<T> mel) const {
    if (mel.cols() != cfg_.mel_bins) {
      throw ShapeError("encode_speech: expected " + std::to_string(cfg_.mel_bins) + " mel bins");
    }
    if (mel.rows() < 1) throw ShapeError("encode_speech: empty spectrogram");
    auto h = ad::silu(speech_fc_(g, ad::silu(speech_conv_(g, mel))));
    return adapter_a_(g, ad::mean_rows(h));
  }

  /// Adds the identity row to every content frame.
  static ad::Var<T> fuse(ad::Var<T> content, ad::Var<T> identity) {
    if (identity.rows() != 1 || identity.cols() != content.cols()) {
      throw ShapeError("fuse: identity " + shape_str(identity.rows(), identity.cols()) +
                       " does not match content width " + std::to_string(content.cols()));
    }
    return ad::add_row(content, identity);
  }

  /// T_v x d fused sequence -> (r * T_v) x mel_bins log-Mel.
  ad::Var<T> blend(Graph<T>& g, ad::Var<T> fused) const {
    if (fused.cols() != cfg_.d) throw ShapeError("blend: width mismatch");
    if (fused.rows() < 1) throw ShapeError("blend: empty sequence");
    ad::Var<T> x = fused;
    for (const auto& b : blender_) {
      x = ad::add(x, b.attn(g, b.ln_attn(g, x)));
      auto c = ad::depthwise_conv(b.ln_conv(g, x), g.param(b.dwconv), ad::Padding::kZero);
      x = ad::add(x, b.conv_out(g, ad::silu(c)));
      x = ad::add(x, b.ffn1(g, ad::silu(b.ffn0(g, b.ln_ffn(g, x)))));
    }
    auto frames = out_proj_(g, out_ln_(g, x));
    return ad::reshape(frames, fused.rows() * cfg_.mel_per_video_frame, cfg_.mel_bins);
  }

  // ------------------------------------------------------------ value API (no gradients)

  Matrix<T> encode_content(const Matrix<T>& video) const {
    Graph<T> g(params_);
    return encode_content(g, g.constant(video)).value();
  }

  IdentityEmbedding<T> encode_faces(const Matrix<T>& faces) const {
    Graph<T> g(params_);
    return {encode_faces(g, g.constant(faces)).value().row(0), Modality::kFacial};
  }

  Matrix<T> face_embeddings(const Matrix<T>& faces) const {
    Graph<T> g(params_);
    return face_embeddings(g, g.constant(faces)).value();
  }

  IdentityEmbedding<T> encode_speech(const Matrix<T>& mel) const {
    Graph<T> g(params_);
    return {encode_speech(g, g.constant(mel)).value().row(0), Modality::kAudio};
  }

  static Matrix<T> fuse(const Matrix<T>& content, const IdentityEmbedding<T>& identity) {
    ad::Tape<T> t;
    Matrix<T> id = identity.values;
    return fuse(t.constant(content), t.constant(id)).value();
  }

  Matrix<T> blend(const Matrix<T>& fused) const {
    Graph<T> g(params_);
    return blend(g, g.constant(fused)).value();
  }

  /// End-to-end forward pass: blend(fuse(content(video), faces(faces))).
  Matrix<T> forward(const Matrix<T>& video, const Matrix<T>& faces) const {
    Graph<T> g(params_);
    auto ec = encode_content(g, g.constant(video));
    auto ei = encode_faces(g, g.constant(faces));
    return blend(g, fuse(ec, ei)).value();
  }

  /// Copy with every parameter converted to another scalar type.
  template <typename U>
  Model<U> cast() const {
    Model<U> out(cfg_);
    for (int i = 0; i < params_.size(); ++i) {
      out.params()[i].value = params_[i].value.template cast<U>();
    }
    return out;
  }

 private:
  struct BlenderLayer {
    LayerNorm ln_attn;
    MultiHeadAttention attn;
    LayerNorm ln_conv;
    int dwconv = -1;
    Linear conv_out;
    LayerNorm ln_ffn;
    Linear ffn0, ffn1;
  };

  ModelConfig cfg_;
  ParameterSet<T> params_;
  std::vector<Conv1d> content_convs_;
  LayerNorm content_ln_;
  MultiHeadAttention content_attn_;
  Linear adapter_v_;
  Linear face0_, face1_, adapter_f_;
  Conv1d speech_conv_;
  Linear speech_fc_, adapter_a_;
  std::vector<BlenderLayer> blender_;
  LayerNorm out_ln_;
  Linear out_proj_;
  MiEstimator estimator_;
};

}  // namespace muteswap
