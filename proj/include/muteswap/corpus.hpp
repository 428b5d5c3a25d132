#pragma once

// Synthetic multi-speaker corpus with known identity latents.
//
// Each speaker owns an additive log-Mel tilt and a face code. Utterances are
// token hold-walks: video frames are noisy token embeddings, mel frames are
// the token's spectral pattern plus the speaker tilt, and face samples are
// noisy copies of the face code. Because the tilt is additive, the identity
// of any mel is recoverable as time-average minus the mean token pattern.

#include "muteswap/io.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace muteswap {

inline constexpr int kCorpusVersion = 1;

struct GenConfig {
  int speakers = 20;
  int utts_per_speaker = 50;
  int eval_utts_per_speaker = 10;  // trailing utterances of each speaker marked "eval"
  int vocab = 24;
  int min_frames = 30;
  int max_frames = 60;
  int min_hold = 2;
  int max_hold = 5;
  int video_dim = 32;
  int face_dim = 16;
  int mel_bins = 80;
  int mel_per_video_frame = 4;
  int faces_min = 4;
  int faces_max = 24;
  double sigma_v = 0.1;
  double sigma_f = 0.1;
  double sigma_m = 0.05;
  double tau = 1.0;
  // Scale of a fixed projection of the face code added to every video frame.
  // Zero keeps video independent of identity.
  double identity_leak = 0.0;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument describing the first invalid field.
  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("GenConfig: " + m); };
    if (speakers < 2) fail("speakers must be >= 2");
    if (vocab < 2) fail("vocab must be >= 2");
    if (utts_per_speaker < 1) fail("utts_per_speaker must be >= 1");
    if (eval_utts_per_speaker < 0 || eval_utts_per_speaker > utts_per_speaker) {
      fail("eval_utts_per_speaker must lie in [0, utts_per_speaker]");
    }
    if (video_dim <= 0 || face_dim <= 0 || mel_bins <= 0 || mel_per_video_frame <= 0) {
      fail("dimensions must be positive");
    }
    if (min_frames < 1 || max_frames < min_frames) fail("need 1 <= min_frames <= max_frames");
    if (min_hold < 1 || max_hold < min_hold) fail("need 1 <= min_hold <= max_hold");
    if (faces_min < 1 || faces_max < faces_min) fail("need 1 <= faces_min <= faces_max");
    if (sigma_v < 0 || sigma_f < 0 || sigma_m < 0 || tau < 0 || identity_leak < 0) {
      fail("noise scales must be non-negative");
    }
  }
};

inline void to_json(json& j, const GenConfig& c) {
  j = json{{"speakers", c.speakers},
           {"utts_per_speaker", c.utts_per_speaker},
           {"eval_utts_per_speaker", c.eval_utts_per_speaker},
           {"vocab", c.vocab},
           {"min_frames", c.min_frames},
           {"max_frames", c.max_frames},
           {"min_hold", c.min_hold},
           {"max_hold", c.max_hold},
           {"video_dim", c.video_dim},
           {"face_dim", c.face_dim},
           {"mel_bins", c.mel_bins},
           {"mel_per_video_frame", c.mel_per_video_frame},
           {"faces_min", c.faces_min},
           {"faces_max", c.faces_max},
           {"sigma_v", c.sigma_v},
           {"sigma_f", c.sigma_f},
           {"sigma_m", c.sigma_m},
           {"tau", c.tau},
           {"identity_leak", c.identity_leak},
           {"seed", c.seed}};
}

struct SpeakerProfile {
  std::string speaker_id;
  std::vector<double> tilt;       // mel_bins
  std::vector<double> face_code;  // face_dim
};

struct Utterance {
  std::string utt_id;
  std::string speaker_id;
  Matrix<float> video;  // T_v x D_v
  Matrix<float> faces;  // K x D_f
  Matrix<float> mel;    // (r * T_v) x mel_bins
  std::vector<int> tokens;

  Eigen::Index frames() const { return video.rows(); }
};

struct UtteranceEntry {
  std::string utt_id;
  std::string speaker_id;
  int frames = 0;  // T_v
  int faces = 0;   // K
  std::string split = "train";
};

struct CorpusManifest {
  int version = kCorpusVersion;
  int mel_bins = 80;
  int mel_per_video_frame = 4;
  int video_dim = 0;
  int face_dim = 0;
  std::optional<std::vector<double>> token_pattern_mean;
  std::vector<UtteranceEntry> utterances;
  json generator;  // GenConfig used, when synthetic

  bool synthetic() const { return token_pattern_mean.has_value(); }

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < utterances.size(); ++i) {
      if (split.empty() || utterances[i].split == split) out.push_back(static_cast<int>(i));
    }
    return out;
  }

  std::vector<std::string> speaker_ids() const {
    std::vector<std::string> ids;
    for (const auto& u : utterances) {
      if (std::find(ids.begin(), ids.end(), u.speaker_id) == ids.end()) ids.push_back(u.speaker_id);
    }
    return ids;
  }

  int find(const std::string& utt_id) const {
    for (std::size_t i = 0; i < utterances.size(); ++i) {
      if (utterances[i].utt_id == utt_id) return static_cast<int>(i);
    }
    return -1;
  }
};

inline json manifest_to_json(const CorpusManifest& m) {
  json utts = json::array();
  for (const auto& u : m.utterances) {
    utts.push_back({{"utt_id", u.utt_id},
                    {"speaker_id", u.speaker_id},
                    {"T_v", u.frames},
                    {"K", u.faces},
                    {"split", u.split}});
  }
  json j{{"version", m.version},
         {"mel_bins", m.mel_bins},
         {"mel_per_video_frame", m.mel_per_video_frame},
         {"video_dim", m.video_dim},
         {"face_dim", m.face_dim},
         {"utterances", utts}};
  if (m.token_pattern_mean) j["token_pattern_mean"] = *m.token_pattern_mean;
  if (!m.generator.is_null()) j["generator"] = m.generator;
  return j;
}

inline CorpusManifest manifest_from_json(const json& j, const std::string& origin) {
  CorpusManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != kCorpusVersion) {
      throw DataError(origin + ": unsupported corpus version " + std::to_string(m.version));
    }
    m.mel_bins = j.at("mel_bins").get<int>();
    m.mel_per_video_frame = j.at("mel_per_video_frame").get<int>();
    m.video_dim = j.at("video_dim").get<int>();
    m.face_dim = j.at("face_dim").get<int>();
    if (j.contains("token_pattern_mean")) {
      m.token_pattern_mean = j["token_pattern_mean"].get<std::vector<double>>();
      if (static_cast<int>(m.token_pattern_mean->size()) != m.mel_bins) {
        throw DataError(origin + ": token_pattern_mean length differs from mel_bins");
      }
    }
    if (j.contains("generator")) m.generator = j["generator"];
    for (const auto& u : j.at("utterances")) {
      UtteranceEntry e;
      e.utt_id = u.at("utt_id").get<std::string>();
      e.speaker_id = u.at("speaker_id").get<std::string>();
      e.frames = u.at("T_v").get<int>();
      e.faces = u.at("K").get<int>();
      e.split = u.value("split", "train");
      m.utterances.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError(origin + ": " + e.what());
  }
  return m;
}

struct GeneratedCorpus {
  GenConfig config;
  CorpusManifest manifest;
  std::vector<SpeakerProfile> speakers;
  std::vector<Utterance> utterances;
  Matrix<double> token_patterns;    // V x mel_bins
  Matrix<double> token_embeddings;  // V x D_v
};

namespace detail {

inline double normal(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  std::uniform_int_distribution<int> u(lo, hi);
  return u(rng);
}

inline std::string speaker_name(int s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03d", s);
  return buf;
}

inline std::string utt_name(int s, int u) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "spk%03d_u%03d", s, u);
  return buf;
}

}  // namespace detail

/// Deterministic for a fixed cfg.seed.
inline GeneratedCorpus generate_corpus(const GenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  GeneratedCorpus out;
  out.config = cfg;
  const int B = cfg.mel_bins, r = cfg.mel_per_video_frame;
  constexpr int kWindow = 5;

  for (int s = 0; s < cfg.speakers; ++s) {
    SpeakerProfile p;
    p.speaker_id = detail::speaker_name(s);
    std::vector<double> raw(static_cast<std::size_t>(B + kWindow - 1));
    for (auto& v : raw) v = detail::normal(rng);
    p.tilt.resize(static_cast<std::size_t>(B));
    for (int f = 0; f < B; ++f) {
      double acc = 0.0;
      for (int w = 0; w < kWindow; ++w) acc += raw[static_cast<std::size_t>(f + w)];
      p.tilt[static_cast<std::size_t>(f)] = cfg.tau * acc / kWindow;
    }
    p.face_code.resize(static_cast<std::size_t>(cfg.face_dim));
    for (auto& v : p.face_code) v = detail::normal(rng);
    out.speakers.push_back(std::move(p));
  }

  out.token_patterns.resize(cfg.vocab, B);
  out.token_embeddings.resize(cfg.vocab, cfg.video_dim);
  for (int z = 0; z < cfg.vocab; ++z) {
    for (int f = 0; f < B; ++f) out.token_patterns(z, f) = detail::normal(rng);
    for (int k = 0; k < cfg.video_dim; ++k) out.token_embeddings(z, k) = detail::normal(rng);
  }
  Matrix<double> leak(cfg.face_dim, cfg.video_dim);
  for (int i = 0; i < cfg.face_dim; ++i) {
    for (int k = 0; k < cfg.video_dim; ++k) {
      leak(i, k) = detail::normal(rng) / std::sqrt(static_cast<double>(cfg.face_dim));
    }
  }

  std::vector<double> pattern_sum(static_cast<std::size_t>(B), 0.0);
  long long total_frames = 0;
  for (int s = 0; s < cfg.speakers; ++s) {
    const SpeakerProfile& spk = out.speakers[static_cast<std::size_t>(s)];
    RowVector<double> face_code(cfg.face_dim);
    for (int i = 0; i < cfg.face_dim; ++i) face_code(i) = spk.face_code[static_cast<std::size_t>(i)];
    const RowVector<double> video_leak = cfg.identity_leak * (face_code * leak);

    for (int u = 0; u < cfg.utts_per_speaker; ++u) {
      Utterance utt;
      utt.utt_id = detail::utt_name(s, u);
      utt.speaker_id = spk.speaker_id;
      const int T = detail::uniform_int(rng, cfg.min_frames, cfg.max_frames);

      utt.tokens.reserve(static_cast<std::size_t>(T));
      int token = detail::uniform_int(rng, 0, cfg.vocab - 1);
      while (static_cast<int>(utt.tokens.size()) < T) {
        const int hold = detail::uniform_int(rng, cfg.min_hold, cfg.max_hold);
        for (int h = 0; h < hold && static_cast<int>(utt.tokens.size()) < T; ++h) {
          utt.tokens.push_back(token);
        }
        const int step = detail::uniform_int(rng, 1, cfg.vocab - 1);
        token = (token + step) % cfg.vocab;
      }

      utt.video.resize(T, cfg.video_dim);
      utt.mel.resize(static_cast<Eigen::Index>(T) * r, B);
      for (int t = 0; t < T; ++t) {
        const int z = utt.tokens[static_cast<std::size_t>(t)];
        for (int k = 0; k < cfg.video_dim; ++k) {
          utt.video(t, k) = static_cast<float>(out.token_embeddings(z, k) + video_leak(k) +
                                               cfg.sigma_v * detail::normal(rng));
        }
        for (int j = 0; j < r; ++j) {
          for (int f = 0; f < B; ++f) {
            const double noise = cfg.sigma_m > 0 ? cfg.sigma_m * detail::normal(rng) : 0.0;
            utt.mel(t * r + j, f) = static_cast<float>(
                out.token_patterns(z, f) + spk.tilt[static_cast<std::size_t>(f)] + noise);
          }
        }
        for (int f = 0; f < B; ++f) pattern_sum[static_cast<std::size_t>(f)] += out.token_patterns(z, f);
        ++total_frames;
      }

      const int K = detail::uniform_int(rng, cfg.faces_min, cfg.faces_max);
      utt.faces.resize(K, cfg.face_dim);
      for (int k = 0; k < K; ++k) {
        for (int i = 0; i < cfg.face_dim; ++i) {
          utt.faces(k, i) = static_cast<float>(spk.face_code[static_cast<std::size_t>(i)] +
                                               cfg.sigma_f * detail::normal(rng));
        }
      }

      UtteranceEntry e;
      e.utt_id = utt.utt_id;
      e.speaker_id = utt.speaker_id;
      e.frames = T;
      e.faces = K;
      e.split = u >= cfg.utts_per_speaker - cfg.eval_utts_per_speaker ? "eval" : "train";
      out.manifest.utterances.push_back(e);
      out.utterances.push_back(std::move(utt));
    }
  }

  out.manifest.mel_bins = B;
  out.manifest.mel_per_video_frame = r;
  out.manifest.video_dim = cfg.video_dim;
  out.manifest.face_dim = cfg.face_dim;
  std::vector<double> tpm(static_cast<std::size_t>(B));
  for (int f = 0; f < B; ++f) {
    tpm[static_cast<std::size_t>(f)] =
        pattern_sum[static_cast<std::size_t>(f)] / static_cast<double>(total_frames);
  }
  out.manifest.token_pattern_mean = std::move(tpm);
  out.manifest.generator = cfg;
  return out;
}

// ---------------------------------------------------------------- disk layout

inline fs::path utterance_dir(const fs::path& root, const std::string& utt_id) {
  return root / "utt" / utt_id;
}

inline void write_utterance(const fs::path& root, const Utterance& u) {
  const fs::path dir = utterance_dir(root, u.utt_id);
  fs::create_directories(dir);
  write_f32(dir / "video.f32", u.video);
  write_f32(dir / "mel.f32", u.mel);
  for (Eigen::Index k = 0; k < u.faces.rows(); ++k) {
    Matrix<float> row = u.faces.row(k);
    write_f32(dir / ("face_" + std::to_string(k) + ".f32"), row, /*as_vector=*/true);
  }
  if (!u.tokens.empty()) write_json(dir / "tokens.json", json{{"tokens", u.tokens}});
}

inline void write_corpus(const fs::path& root, const GeneratedCorpus& c) {
  fs::create_directories(root);
  json spk = json::object();
  for (const auto& s : c.speakers) {
    spk[s.speaker_id] = {{"tilt", s.tilt}, {"face_code", s.face_code}};
  }
  write_json(root / "speakers.json", spk);
  for (const auto& u : c.utterances) write_utterance(root, u);
  write_json(root / "manifest.json", manifest_to_json(c.manifest));
}

inline CorpusManifest load_manifest(const fs::path& root) {
  const fs::path p = root / "manifest.json";
  if (!fs::exists(p)) throw DataError("corpus manifest not found: " + p.string());
  return manifest_from_json(read_json(p), p.string());
}

inline std::map<std::string, SpeakerProfile> load_speakers(const fs::path& root) {
  const fs::path p = root / "speakers.json";
  const json j = read_json(p);
  std::map<std::string, SpeakerProfile> out;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      SpeakerProfile s;
      s.speaker_id = it.key();
      s.tilt = it.value().at("tilt").get<std::vector<double>>();
      s.face_code = it.value().at("face_code").get<std::vector<double>>();
      out.emplace(s.speaker_id, std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
  return out;
}

namespace detail {

inline void expect_shape(const fs::path& file, const Matrix<float>& m, Eigen::Index rows,
                         Eigen::Index cols) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DataError("shape mismatch in " + file.string() + ": got " + shape_str(m.rows(), m.cols()) +
                    ", manifest declares " + shape_str(rows, cols));
  }
}

}  // namespace detail

/// Loads one utterance directory and checks every array against the manifest.
inline Utterance load_utterance(const fs::path& root, const CorpusManifest& m,
                                const UtteranceEntry& e) {
  const fs::path dir = utterance_dir(root, e.utt_id);
  Utterance u;
  u.utt_id = e.utt_id;
  u.speaker_id = e.speaker_id;
  u.video = read_f32<float>(dir / "video.f32");
  detail::expect_shape(dir / "video.f32", u.video, e.frames, m.video_dim);
  u.mel = read_f32<float>(dir / "mel.f32");
  detail::expect_shape(dir / "mel.f32", u.mel, static_cast<Eigen::Index>(e.frames) * m.mel_per_video_frame,
                       m.mel_bins);
  if (e.faces < 1) throw DataError("utterance " + e.utt_id + " declares no face samples");
  u.faces.resize(e.faces, m.face_dim);
  for (int k = 0; k < e.faces; ++k) {
    const fs::path fp = dir / ("face_" + std::to_string(k) + ".f32");
    Matrix<float> f = read_f32<float>(fp);
    detail::expect_shape(fp, f, 1, m.face_dim);
    u.faces.row(k) = f.row(0);
  }
  if (fs::exists(dir / "tokens.json")) {
    u.tokens = read_json(dir / "tokens.json").at("tokens").get<std::vector<int>>();
  }
  if (!u.video.allFinite() || !u.mel.allFinite() || !u.faces.allFinite()) {
    throw DataError("non-finite values in " + dir.string());
  }
  return u;
}

/// Loaded corpus held in memory; utterances are immutable after load.
struct Corpus {
  fs::path root;
  CorpusManifest manifest;
  std::vector<Utterance> utterances;

  static Corpus load(const fs::path& root) {
    Corpus c;
    c.root = root;
    c.manifest = load_manifest(root);
    c.utterances.reserve(c.manifest.utterances.size());
    for (const auto& e : c.manifest.utterances) {
      c.utterances.push_back(load_utterance(root, c.manifest, e));
    }
    return c;
  }

  static Corpus from_generated(const GeneratedCorpus& g) {
    Corpus c;
    c.manifest = g.manifest;
    c.utterances = g.utterances;
    return c;
  }

  const Utterance& at(const std::string& utt_id) const {
    const int i = manifest.find(utt_id);
    if (i < 0) throw DataError("unknown utterance id: " + utt_id);
    return utterances[static_cast<std::size_t>(i)];
  }
};

// ---------------------------------------------------------------- batching

/// Batches of item positions for one epoch. Every item appears exactly once;
/// the order depends only on (seed, epoch). With drop_last the trailing
/// partial batch is omitted.
inline std::vector<std::vector<int>> epoch_batches(const std::vector<int>& items, int batch_size,
                                                   std::uint64_t seed, std::uint64_t epoch,
                                                   bool drop_last = false) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<int> order = items;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    if (drop_last && end - i < static_cast<std::size_t>(batch_size)) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// Endless deterministic stream of batches over a fixed item set.
class BatchIterator {
 public:
  BatchIterator(std::vector<int> items, int batch_size, std::uint64_t seed, bool drop_last = true)
      : items_(std::move(items)), batch_size_(batch_size), seed_(seed), drop_last_(drop_last) {
    if (items_.empty()) throw std::invalid_argument("BatchIterator: no items");
    if (drop_last_ && static_cast<int>(items_.size()) < batch_size_) {
      throw std::invalid_argument("BatchIterator: fewer items than one batch");
    }
  }

  std::vector<int> next() {
    while (pos_ >= current_.size()) {
      current_ = epoch_batches(items_, batch_size_, seed_, epoch_, drop_last_);
      pos_ = 0;
      if (current_.empty()) throw std::logic_error("BatchIterator: empty epoch");
      ++epoch_;
    }
    return current_[pos_++];
  }

  /// (epochs started, position within current epoch); enough to resume.
  std::pair<std::uint64_t, std::size_t> position() const { return {epoch_, pos_}; }
  void seek(std::uint64_t epoch, std::size_t pos) {
    epoch_ = epoch;
    pos_ = pos;
    current_.clear();
    if (epoch_ > 0) {
      current_ = epoch_batches(items_, batch_size_, seed_, epoch_ - 1, drop_last_);
    }
    if (pos_ > current_.size()) throw std::invalid_argument("BatchIterator: bad seek position");
  }

 private:
  std::vector<int> items_;
  int batch_size_;
  std::uint64_t seed_;
  bool drop_last_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::vector<int>> current_;
};

/// Picks max_images face rows out of K. When K >= max_images the rows are
/// distinct; otherwise every row is used floor(max_images / K) times and the
/// remainder is drawn from distinct rows at random.
inline std::vector<int> sample_face_indices(int K, int max_images, std::mt19937_64& rng) {
  if (K < 1) throw std::invalid_argument("sample_face_indices: K must be >= 1");
  if (max_images < 1) throw std::invalid_argument("sample_face_indices: max_images must be >= 1");
  std::vector<int> all(static_cast<std::size_t>(K));
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(max_images));
  const int passes = max_images / K;
  for (int p = 0; p < passes; ++p) out.insert(out.end(), all.begin(), all.end());
  const int rest = max_images - passes * K;
  if (rest > 0) {
    std::shuffle(all.begin(), all.end(), rng);
    out.insert(out.end(), all.begin(), all.begin() + rest);
  }
  return out;
}

inline Matrix<float> gather_faces(const Matrix<float>& faces, const std::vector<int>& idx) {
  Matrix<float> out(static_cast<Eigen::Index>(idx.size()), faces.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = faces.row(idx[i]);
  return out;
}

/// Seeded face subset for evaluation-time use: depends on (seed, utt_id) only.
inline Matrix<float> sample_faces_for(const Utterance& u, int max_images, std::uint64_t seed) {
  std::mt19937_64 rng(fnv1a64(u.utt_id, seed ^ 0x9E3779B97F4A7C15ULL));
  return gather_faces(u.faces, sample_face_indices(static_cast<int>(u.faces.rows()), max_images, rng));
}

}  // namespace muteswap
