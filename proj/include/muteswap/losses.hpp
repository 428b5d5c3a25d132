#pragma once

#include "muteswap/autodiff.hpp"

#include <map>
#include <string>

namespace muteswap {

/// A scalar loss together with its named sub-losses.
struct LossValue {
  double scalar = 0.0;
  std::map<std::string, double> components;
};

/// Mean absolute difference between synthesized and reference log-Mel frames.
/// Normalised by the element count so loss weights do not depend on length.
template <typename T>
ad::Var<T> reconstruction_loss(ad::Var<T> predicted, ad::Var<T> target) {
  return ad::l1_mean(predicted, target);
}

template <typename T>
struct AfClipTerms {
  ad::Var<T> total;
  ad::Var<T> audio_to_face;
  ad::Var<T> face_to_audio;
};

/// Symmetric audio-face contrastive loss over a batch of paired identity
/// embeddings (row i of each matrix comes from the same utterance). Logits
/// are raw cosine similarities divided by `temperature` (1 by default).
/// Zero-norm rows throw std::domain_error.
template <typename T>
AfClipTerms<T> afclip_loss(ad::Var<T> audio, ad::Var<T> face, T temperature = T(1)) {
  if (audio.rows() != face.rows() || audio.cols() != face.cols()) {
    throw ShapeError("afclip_loss: embedding batches differ in shape");
  }
  if (audio.rows() < 1) throw ShapeError("afclip_loss: empty batch");
  if (!(temperature > T(0))) throw std::invalid_argument("afclip_loss: temperature must be > 0");
  auto a = ad::l2_normalize_rows(audio);
  auto f = ad::l2_normalize_rows(face);
  auto logits = ad::scale(ad::matmul_nt(a, f), T(1) / temperature);  // [i][j] = cos(a_i, f_j)
  auto a2v = ad::scale(ad::mean(ad::diagonal(ad::log_softmax_rows(logits))), T(-1));
  auto v2a = ad::scale(ad::mean(ad::diagonal(ad::log_softmax_rows(ad::transpose(logits)))), T(-1));
  auto total = ad::scale(ad::add(a2v, v2a), T(0.5));
  return {total, a2v, v2a};
}

// ---------------------------------------------------------------- value-level API

template <typename T>
LossValue reconstruction_loss(const Matrix<T>& predicted, const Matrix<T>& target) {
  ad::Tape<T> tape;
  const double v = reconstruction_loss(tape.constant(predicted), tape.constant(target)).value()(0, 0);
  return {v, {{"rec", v}}};
}

template <typename T>
LossValue afclip_loss(const Matrix<T>& audio, const Matrix<T>& face, T temperature = T(1)) {
  ad::Tape<T> tape;
  auto terms = afclip_loss(tape.constant(audio), tape.constant(face), temperature);
  return {static_cast<double>(terms.total.value()(0, 0)),
          {{"a2v", static_cast<double>(terms.audio_to_face.value()(0, 0))},
           {"v2a", static_cast<double>(terms.face_to_audio.value()(0, 0))}}};
}

}  // namespace muteswap
