#pragma once

// Conversion evaluation: pair plans, paired speaker homogeneity/diversity,
// equal error rate with its DET curve, and the analytic identity read-out
// available on synthetic corpora.

#include "muteswap/corpus.hpp"
#include "muteswap/inference.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace muteswap {

// ---------------------------------------------------------------- identity vectors

/// Time-average of the mel minus the corpus' token pattern mean.
inline RowVector<double> oracle_identity(const Matrix<float>& mel, const CorpusManifest& manifest) {
  if (!manifest.token_pattern_mean) {
    throw DataError("oracle identity needs token_pattern_mean; the corpus is not synthetic");
  }
  const auto& mu = *manifest.token_pattern_mean;
  if (mel.cols() != static_cast<Eigen::Index>(mu.size())) {
    throw ShapeError("oracle_identity: mel has " + std::to_string(mel.cols()) + " bins, manifest has " +
                     std::to_string(mu.size()));
  }
  if (mel.rows() < 1) throw ShapeError("oracle_identity: empty spectrogram");
  RowVector<double> out = mel.cast<double>().colwise().mean();
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) -= mu[static_cast<std::size_t>(i)];
  return out;
}

inline double cosine(const RowVector<double>& a, const RowVector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine of a zero vector");
  return a.dot(b) / (na * nb);
}

// ---------------------------------------------------------------- pair plans

enum class PairLabel { kPositive, kNegative };

inline std::string to_string(PairLabel l) { return l == PairLabel::kPositive ? "positive" : "negative"; }

inline PairLabel parse_label(const std::string& s) {
  if (s == "positive") return PairLabel::kPositive;
  if (s == "negative") return PairLabel::kNegative;
  throw DataError("unknown pair label: " + s);
}

/// Two conversions of one source utterance: source -> target_a, source -> target_b.
struct PlannedPair {
  PairLabel label = PairLabel::kPositive;
  std::string source;
  std::string target_a;
  std::string target_b;
};

struct PairPlan {
  std::vector<std::string> source_speakers;
  std::vector<std::string> target_speakers;
  std::vector<PlannedPair> pairs;

  /// Distinct (source utterance, target utterance) conversions, in first-use order.
  std::vector<std::pair<std::string, std::string>> conversions() const {
    std::vector<std::pair<std::string, std::string>> out;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : pairs) {
      for (const auto* t : {&p.target_a, &p.target_b}) {
        if (seen.emplace(p.source, *t).second) out.emplace_back(p.source, *t);
      }
    }
    return out;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& p : pairs) {
      out += json{{"label", to_string(p.label)}, {"source", p.source}, {"target_a", p.target_a},
                  {"target_b", p.target_b}}
                 .dump();
      out += "\n";
    }
    return out;
  }

  std::string hash() const { return hex64(fnv1a64(to_jsonl())); }
};

inline PairPlan plan_from_jsonl(const std::string& text, const std::string& origin) {
  PairPlan plan;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      plan.pairs.push_back({parse_label(j.at("label").get<std::string>()), j.at("source").get<std::string>(),
                            j.at("target_a").get<std::string>(), j.at("target_b").get<std::string>()});
    } catch (const json::exception& e) {
      throw DataError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return plan;
}

/// n_pairs positive and n_pairs negative pairs over disjoint source and
/// target speaker sets drawn from `split`. Positives pair two different
/// utterances of one target speaker; negatives pair two target speakers.
inline PairPlan sample_pairs(const CorpusManifest& manifest, int n_sources, int n_targets, int n_pairs,
                             std::uint64_t seed, const std::string& split = "eval") {
  if (n_sources < 1 || n_targets < 2 || n_pairs < 1) {
    throw std::invalid_argument("sample_pairs: need >= 1 source, >= 2 targets and >= 1 pair");
  }
  std::map<std::string, std::vector<std::string>> by_speaker;
  for (const auto& u : manifest.utterances) {
    if (split.empty() || u.split == split) by_speaker[u.speaker_id].push_back(u.utt_id);
  }
  std::vector<std::string> eligible;
  for (const auto& [spk, utts] : by_speaker) {
    if (utts.size() >= 2) eligible.push_back(spk);
  }
  if (static_cast<int>(eligible.size()) < n_sources + n_targets) {
    throw DataError("sample_pairs: " + std::to_string(eligible.size()) + " speakers with >= 2 '" + split +
                    "' utterances, need " + std::to_string(n_sources + n_targets));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  PairPlan plan;
  plan.source_speakers.assign(eligible.begin(), eligible.begin() + n_sources);
  plan.target_speakers.assign(eligible.begin() + n_sources, eligible.begin() + n_sources + n_targets);

  auto pick = [&rng](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto pick_two = [&rng](std::size_t n) {
    std::uniform_int_distribution<std::size_t> u(0, n - 1);
    const std::size_t a = u(rng);
    std::size_t b = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
    if (b >= a) ++b;
    return std::make_pair(a, b);
  };
  for (int k = 0; k < n_pairs; ++k) {
    const std::string src = pick(by_speaker[pick(plan.source_speakers)]);
    const auto& tutts = by_speaker[pick(plan.target_speakers)];
    const auto [a, b] = pick_two(tutts.size());
    plan.pairs.push_back({PairLabel::kPositive, src, tutts[a], tutts[b]});
  }
  for (int k = 0; k < n_pairs; ++k) {
    const std::string src = pick(by_speaker[pick(plan.source_speakers)]);
    const auto [j, l] = pick_two(plan.target_speakers.size());
    plan.pairs.push_back({PairLabel::kNegative, src, pick(by_speaker[plan.target_speakers[j]]),
                          pick(by_speaker[plan.target_speakers[l]])});
  }
  return plan;
}

// ---------------------------------------------------------------- scores

struct ScoredPair {
  double similarity = 0.0;
  PairLabel label = PairLabel::kPositive;
  PlannedPair provenance;
};

inline double mean_similarity(const std::vector<double>& scores, const char* what) {
  if (scores.empty()) throw std::invalid_argument(std::string(what) + ": empty score list");
  double s = 0.0;
  for (double v : scores) s += v;
  return s / static_cast<double>(scores.size());
}

/// Paired speaker homogeneity: mean cosine over positive pairs (higher is better).
inline double psh(const std::vector<double>& positive_scores) { return mean_similarity(positive_scores, "psh"); }

/// Paired speaker diversity: mean cosine over negative pairs (lower is better).
inline double psd(const std::vector<double>& negative_scores) { return mean_similarity(negative_scores, "psd"); }

struct DetPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double fnr = 0.0;
};

struct DetCurve {
  std::vector<DetPoint> points;  // threshold ascending

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "threshold,fpr,fnr\n";
    for (const auto& p : points) {
      if (std::isinf(p.threshold)) {
        out << "inf";
      } else {
        out << p.threshold;
      }
      out << "," << p.fpr << "," << p.fnr << "\n";
    }
    return out.str();
  }
};

struct EerResult {
  double eer = 0.0;
  DetCurve det;
};

/// Accept when score >= threshold. Thresholds are every distinct score plus
/// +inf; where FPR - FNR changes sign between two adjacent thresholds the
/// rate is interpolated linearly along the segment joining them.
inline EerResult eer(const std::vector<double>& positives, const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty()) {
    throw std::invalid_argument("eer: needs at least one positive and one negative score");
  }
  std::vector<std::pair<double, int>> all;  // (score, 1 = positive)
  for (double s : positives) all.emplace_back(s, 1);
  for (double s : negatives) all.emplace_back(s, 0);
  for (const auto& [s, l] : all) {
    if (std::isnan(s)) throw std::invalid_argument("eer: NaN score");
  }
  std::sort(all.begin(), all.end());
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());

  EerResult r;
  std::size_t pos_below = 0, neg_below = 0;
  for (std::size_t i = 0; i <= all.size();) {
    const double t = i < all.size() ? all[i].first : std::numeric_limits<double>::infinity();
    r.det.points.push_back({t, (nn - static_cast<double>(neg_below)) / nn, static_cast<double>(pos_below) / np});
    if (i == all.size()) break;
    while (i < all.size() && all[i].first == t) {
      (all[i].second ? pos_below : neg_below) += 1;
      ++i;
    }
  }
  const auto& pts = r.det.points;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const double d = pts[k].fpr - pts[k].fnr;
    if (d == 0.0) {
      r.eer = pts[k].fpr;
      return r;
    }
    if (d < 0.0) {
      const double da = pts[k - 1].fpr - pts[k - 1].fnr;  // > 0; the first point has FPR = 1, FNR = 0
      const double w = da / (da - d);
      r.eer = pts[k - 1].fpr + w * (pts[k].fpr - pts[k - 1].fpr);
      return r;
    }
  }
  throw std::logic_error("eer: DET curve never crosses");
}

inline EerResult eer(const std::vector<ScoredPair>& scored) {
  std::vector<double> p, n;
  for (const auto& s : scored) (s.label == PairLabel::kPositive ? p : n).push_back(s.similarity);
  return eer(p, n);
}

// ---------------------------------------------------------------- evaluation

/// Maps a converted mel (keyed "<source>__<target>") to an identity vector.
using Embedder = std::function<RowVector<double>(const std::string& key, const Matrix<float>& mel)>;

inline Embedder oracle_embedder(const CorpusManifest& manifest) {
  return [&manifest](const std::string&, const Matrix<float>& mel) { return oracle_identity(mel, manifest); };
}

/// Reads precomputed identity vectors `<dir>/<key>.f32` (any length).
inline Embedder external_embedder(const fs::path& dir) {
  return [dir](const std::string& key, const Matrix<float>&) {
    const Matrix<double> m = read_f32<double>(dir / (key + ".f32"));
    return RowVector<double>(Eigen::Map<const RowVector<double>>(m.data(), m.size()));
  };
}

inline std::string conversion_key(const std::string& source, const std::string& target) {
  return source + "__" + target;
}

struct ConversionRecord {
  std::string source;
  std::string target;
  double cos_to_target = 0.0;  // oracle identity vs speaker tilts, when profiles are known
  double cos_to_source = 0.0;
};

struct EvaluationOptions {
  int max_images = 16;
  std::uint64_t face_seed = 0;
  std::optional<fs::path> cache_dir;  // converted mels reused across runs when set
  const std::map<std::string, SpeakerProfile>* speakers = nullptr;
};

struct EvaluationResult {
  std::vector<ScoredPair> scored;
  std::vector<ConversionRecord> conversions;
  double psh = 0.0;
  double psd = 0.0;
  EerResult eer;

  std::optional<double> target_closer_fraction() const {
    if (conversions.empty()) return std::nullopt;
    int n = 0;
    for (const auto& c : conversions) n += c.cos_to_target > c.cos_to_source;
    return static_cast<double>(n) / static_cast<double>(conversions.size());
  }

  json report() const {
    int np = 0, nn = 0;
    for (const auto& s : scored) (s.label == PairLabel::kPositive ? np : nn) += 1;
    json j{{"psh", psh}, {"psd", psd}, {"eer", eer.eer}, {"n_positive", np}, {"n_negative", nn}};
    if (auto f = target_closer_fraction()) {
      j["n_conversions"] = conversions.size();
      j["target_closer_fraction"] = *f;
    }
    return j;
  }

  std::string scored_jsonl() const {
    std::string out;
    for (const auto& s : scored) {
      out += json{{"label", to_string(s.label)}, {"similarity", s.similarity}, {"source", s.provenance.source},
                  {"target_a", s.provenance.target_a}, {"target_b", s.provenance.target_b}}
                 .dump();
      out += "\n";
    }
    return out;
  }
};

inline RowVector<double> tilt_vector(const SpeakerProfile& p) {
  return Eigen::Map<const RowVector<double>>(p.tilt.data(), static_cast<Eigen::Index>(p.tilt.size()));
}

/// Converts every planned (source, target) once, embeds the outputs and
/// scores the pairs by cosine.
template <typename T>
EvaluationResult evaluate(const Model<T>& model, const Corpus& corpus, const PairPlan& plan,
                          const Embedder& embed, const EvaluationOptions& opt = {}) {
  std::map<std::string, RowVector<double>> identity;
  EvaluationResult res;
  for (const auto& [src, tgt] : plan.conversions()) {
    const std::string key = conversion_key(src, tgt);
    Matrix<float> mel;
    const fs::path cached = opt.cache_dir ? *opt.cache_dir / (key + ".f32") : fs::path();
    if (opt.cache_dir && fs::exists(cached)) {
      mel = read_f32<float>(cached);
    } else {
      const Utterance& s = corpus.at(src);
      const Utterance& t = corpus.at(tgt);
      mel = convert(model, s.video.template cast<T>(),
                    sample_faces_for(t, opt.max_images, opt.face_seed).template cast<T>())
                .template cast<float>();
      if (opt.cache_dir) write_f32(cached, mel);
    }
    const RowVector<double> e = embed(key, mel);
    identity.emplace(key, e);
    if (opt.speakers != nullptr) {
      const auto& spk = *opt.speakers;
      const std::string& ss = corpus.at(src).speaker_id;
      const std::string& ts = corpus.at(tgt).speaker_id;
      res.conversions.push_back({src, tgt, cosine(e, tilt_vector(spk.at(ts))), cosine(e, tilt_vector(spk.at(ss)))});
    }
  }
  std::vector<double> pos, neg;
  for (const auto& p : plan.pairs) {
    const double s = cosine(identity.at(conversion_key(p.source, p.target_a)),
                            identity.at(conversion_key(p.source, p.target_b)));
    res.scored.push_back({s, p.label, p});
    (p.label == PairLabel::kPositive ? pos : neg).push_back(s);
  }
  res.psh = psh(pos);
  res.psd = psd(neg);
  res.eer = eer(pos, neg);
  return res;
}

}  // namespace muteswap
