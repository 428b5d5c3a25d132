#pragma once

// Synthesis from a trained model. Vanilla synthesis is conversion with the
// content speaker's own faces; interpolation mixes two pooled facial
// embeddings before fusion.

#include "muteswap/model.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

namespace muteswap {

template <typename T>
Matrix<T> synthesize_with(const Model<T>& model, const Matrix<T>& video, const IdentityEmbedding<T>& identity) {
  return model.blend(Model<T>::fuse(model.encode_content(video), identity));
}

/// Mel for `video` spoken with the identity pooled from `faces`.
template <typename T>
Matrix<T> synthesize(const Model<T>& model, const Matrix<T>& video, const Matrix<T>& faces) {
  return synthesize_with(model, video, model.encode_faces(faces));
}

/// Same pipeline as synthesize; the faces come from another speaker.
template <typename T>
Matrix<T> convert(const Model<T>& model, const Matrix<T>& video, const Matrix<T>& target_faces) {
  return synthesize(model, video, target_faces);
}

/// (1 - alpha) * e_a + alpha * e_b on pooled embeddings.
template <typename T>
IdentityEmbedding<T> mix_identities(const IdentityEmbedding<T>& a, const IdentityEmbedding<T>& b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("interpolation alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (a.values.size() != b.values.size()) throw ShapeError("mix_identities: width mismatch");
  const T w = static_cast<T>(alpha);
  return {(T(1) - w) * a.values + w * b.values, Modality::kFacial};
}

template <typename T>
Matrix<T> interpolate(const Model<T>& model, const Matrix<T>& video, const Matrix<T>& own_faces,
                      const Matrix<T>& other_faces, double alpha) {
  return synthesize_with(model, video,
                         mix_identities(model.encode_faces(own_faces), model.encode_faces(other_faces), alpha));
}

/// Content plus one or two identity sources. Without a secondary source
/// alpha must be 0.
template <typename T>
struct ConversionRequest {
  Matrix<T> video;
  Matrix<T> faces;
  std::optional<Matrix<T>> secondary_faces;
  double alpha = 0.0;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (faces.rows() < 1 || (secondary_faces && secondary_faces->rows() < 1)) {
      throw std::invalid_argument("identity source has no face samples");
    }
    if (!secondary_faces && alpha != 0.0) {
      throw std::invalid_argument("alpha > 0 requires a secondary identity source");
    }
  }
};

template <typename T>
Matrix<T> run(const Model<T>& model, const ConversionRequest<T>& req) {
  req.validate();
  if (!req.secondary_faces) return synthesize(model, req.video, req.faces);
  return interpolate(model, req.video, req.faces, *req.secondary_faces, req.alpha);
}

/// 8-bit binary PGM, min-max normalised; highest mel bin on the top row,
/// time running left to right.
inline std::string render_pgm(const Matrix<float>& mel) {
  if (mel.size() == 0) throw std::invalid_argument("render_pgm: empty spectrogram");
  const float lo = mel.minCoeff();
  const float hi = mel.maxCoeff();
  const float span = hi > lo ? hi - lo : 1.0f;
  const Eigen::Index width = mel.rows();
  const Eigen::Index height = mel.cols();
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(width * height));
  for (Eigen::Index y = 0; y < height; ++y) {
    const Eigen::Index bin = height - 1 - y;
    for (Eigen::Index t = 0; t < width; ++t) {
      const float v = (mel(t, bin) - lo) / span;
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
  }
  return out;
}

inline void write_pgm(const fs::path& path, const Matrix<float>& mel) {
  write_file_atomic(path, render_pgm(mel));
}

}  // namespace muteswap
