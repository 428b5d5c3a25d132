#include "muteswap/metrics.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

#include <random>

using namespace muteswap;

namespace {

CorpusManifest manifest_with_mean(int bins) {
  CorpusManifest m;
  m.mel_bins = bins;
  std::vector<double> mu(static_cast<std::size_t>(bins));
  for (int i = 0; i < bins; ++i) mu[static_cast<std::size_t>(i)] = 0.1 * i - 0.3;
  m.token_pattern_mean = mu;
  return m;
}

const GeneratedCorpus& generated() {
  static const GeneratedCorpus g = [] {
    GenConfig c;
    c.speakers = 12;
    c.utts_per_speaker = 5;
    c.eval_utts_per_speaker = 3;
    c.min_frames = 6;
    c.max_frames = 9;
    c.seed = 4;
    return generate_corpus(c);
  }();
  return g;
}

void check_det(const DetCurve& d) {
  for (std::size_t i = 0; i < d.points.size(); ++i) {
    EXPECT_GE(d.points[i].fpr, 0.0);
    EXPECT_LE(d.points[i].fpr, 1.0);
    EXPECT_GE(d.points[i].fnr, 0.0);
    EXPECT_LE(d.points[i].fnr, 1.0);
    if (i > 0) {
      EXPECT_GT(d.points[i].threshold, d.points[i - 1].threshold);
      EXPECT_LE(d.points[i].fpr, d.points[i - 1].fpr);
      EXPECT_GE(d.points[i].fnr, d.points[i - 1].fnr);
    }
  }
}

}  // namespace

TEST(OracleIdentity, Definition) {
  const auto m = manifest_with_mean(4);
  const auto id = oracle_identity(Matrix<float>::Zero(7, 4), m);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(id(i), -(*m.token_pattern_mean)[i], 1e-15);
  std::mt19937_64 rng(1);
  const Matrix<float> mel = oracle::random_matrix(rng, 9, 4).cast<float>();
  const auto base = oracle_identity(mel, m);
  const Matrix<float> shifted = mel.array() + 2.5f;
  const auto moved = oracle_identity(shifted, m);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(moved(i) - base(i), 2.5, 1e-6);
  CorpusManifest real;
  EXPECT_THROW(oracle_identity(mel, real), DataError);
  EXPECT_THROW(oracle_identity(Matrix<float>::Zero(3, 5), m), ShapeError);
}

TEST(PairedScores, Examples) {
  EXPECT_NEAR(psh({0.2, 0.4, 0.9}), 0.5, 1e-15);
  EXPECT_NEAR(psd({0.2, 0.4, 0.9}), 0.5, 1e-15);
  EXPECT_THROW(psh({}), std::invalid_argument);
  EXPECT_THROW(psd({}), std::invalid_argument);
  RowVector<double> a(3), b(3);
  a << 1, 2, 3;
  b << 0, 3, -2;
  EXPECT_EQ(psd({cosine(a, b)}), 0.0);
  EXPECT_NEAR(psh({cosine(a, a), cosine(b, b)}), 1.0, 1e-15);
  EXPECT_THROW(cosine(a, RowVector<double>::Zero(3)), std::domain_error);
}

TEST(PairedScores, PermutationInvariantAndBounded) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(10);
    for (auto& v : s) v = u(rng);
    const double base = psh(s);
    std::shuffle(s.begin(), s.end(), rng);
    EXPECT_NEAR(psh(s), base, 1e-15);
    EXPECT_GE(base, -1.0);
    EXPECT_LE(base, 1.0);
  }
}

TEST(Eer, Examples) {
  EXPECT_EQ(eer({0.9, 0.8}, {0.2, 0.1}).eer, 0.0);
  EXPECT_EQ(eer({0.9, 0.3}, {0.8, 0.2}).eer, 0.5);
  EXPECT_EQ(eer({0.3, 0.7, 0.5}, {0.5, 0.3, 0.7}).eer, 0.5);
  EXPECT_EQ(eer({0.1, 0.2}, {0.8, 0.9}).eer, 1.0);
  EXPECT_THROW(eer({}, {0.1}), std::invalid_argument);
  EXPECT_THROW(eer({0.1}, {}), std::invalid_argument);
}

TEST(Eer, InterpolatesBetweenSweepPoints) {
  // Thresholds 0.1..0.4: (FPR, FNR) = (1,0), (1/2,0), (1/2,1/2)... crossing at a point.
  const auto r = eer({0.4, 0.2, 0.25}, {0.3, 0.1});
  EXPECT_EQ(r.eer, oracle::eer({0.4, 0.2, 0.25}, {0.3, 0.1}));
  check_det(r.det);
  EXPECT_EQ(r.det.points.front().fpr, 1.0);
  EXPECT_EQ(r.det.points.back().fnr, 1.0);
  EXPECT_TRUE(std::isinf(r.det.points.back().threshold));
}

TEST(Eer, MatchesBruteForceOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> count(1, 32);
  std::uniform_int_distribution<int> grid(0, 20);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> p(static_cast<std::size_t>(count(rng))), n(static_cast<std::size_t>(count(rng)));
    // Coarse grid for ties on half the trials.
    const bool ties = trial % 2 == 0;
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : p) v = ties ? grid(rng) / 10.0 : g(rng) + 0.5;
    for (auto& v : n) v = ties ? grid(rng) / 12.0 : g(rng);
    const auto r = eer(p, n);
    EXPECT_EQ(r.eer, oracle::eer(p, n));
    check_det(r.det);
  }
}

TEST(Eer, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(12), n(15);
    for (auto& v : p) v = g(rng) + 0.7;
    for (auto& v : n) v = g(rng);
    auto tp = p, tn = n;
    for (auto& v : tp) v = std::exp(3 * v) + 1;
    for (auto& v : tn) v = std::exp(3 * v) + 1;
    EXPECT_EQ(eer(p, n).eer, eer(tp, tn).eer);
  }
}

TEST(Eer, CsvExport) {
  const auto r = eer({0.9, 0.3}, {0.8, 0.2});
  const std::string csv = r.det.to_csv();
  EXPECT_EQ(csv.substr(0, 18), "threshold,fpr,fnr\n");
  EXPECT_NE(csv.find("inf,0,1"), std::string::npos);
}

TEST(PairPlan, FourSourcesEightTargetsSizes) {
  GenConfig c;
  c.speakers = 12;
  c.utts_per_speaker = 4;
  c.eval_utts_per_speaker = 4;
  c.min_frames = c.max_frames = 2;
  c.seed = 1;
  const auto g = generate_corpus(c);
  const auto plan = sample_pairs(g.manifest, 4, 8, 1600, 9);
  EXPECT_EQ(plan.source_speakers.size(), 4u);
  EXPECT_EQ(plan.target_speakers.size(), 8u);
  int pos = 0, neg = 0;
  for (const auto& p : plan.pairs) (p.label == PairLabel::kPositive ? pos : neg) += 1;
  EXPECT_EQ(pos, 1600);
  EXPECT_EQ(neg, 1600);
}

TEST(PairPlan, PairStructure) {
  const auto& g = generated();
  const auto plan = sample_pairs(g.manifest, 4, 8, 200, 5);
  auto speaker = [&](const std::string& u) { return g.manifest.utterances[g.manifest.find(u)].speaker_id; };
  auto split = [&](const std::string& u) { return g.manifest.utterances[g.manifest.find(u)].split; };
  std::set<std::string> sources(plan.source_speakers.begin(), plan.source_speakers.end());
  std::set<std::string> targets(plan.target_speakers.begin(), plan.target_speakers.end());
  for (const auto& s : sources) EXPECT_EQ(targets.count(s), 0u);
  for (const auto& p : plan.pairs) {
    EXPECT_EQ(sources.count(speaker(p.source)), 1u);
    EXPECT_EQ(targets.count(speaker(p.target_a)), 1u);
    EXPECT_EQ(targets.count(speaker(p.target_b)), 1u);
    EXPECT_EQ(split(p.source), "eval");
    if (p.label == PairLabel::kPositive) {
      EXPECT_EQ(speaker(p.target_a), speaker(p.target_b));
      EXPECT_NE(p.target_a, p.target_b);
    } else {
      EXPECT_NE(speaker(p.target_a), speaker(p.target_b));
    }
  }
  EXPECT_EQ(plan.to_jsonl(), sample_pairs(g.manifest, 4, 8, 200, 5).to_jsonl());
  EXPECT_NE(plan.to_jsonl(), sample_pairs(g.manifest, 4, 8, 200, 6).to_jsonl());
  EXPECT_EQ(plan_from_jsonl(plan.to_jsonl(), "mem").to_jsonl(), plan.to_jsonl());
  EXPECT_THROW(sample_pairs(g.manifest, 5, 8, 10, 1), DataError);
  EXPECT_THROW(plan_from_jsonl("{\"label\":\"maybe\"}\n", "mem"), DataError);
}

TEST(Evaluate, ScoresPlanAndReusesCache) {
  const auto& g = generated();
  const Corpus corpus = Corpus::from_generated(g);
  ModelConfig mc;
  mc.d = 16;
  mc.heads = 2;
  mc.face_hidden = 16;
  mc.speech_hidden = 8;
  mc.mi_hidden = 8;
  const Model<float> model(mc);
  const auto plan = sample_pairs(g.manifest, 2, 4, 20, 3);
  std::map<std::string, SpeakerProfile> spk;
  for (const auto& s : g.speakers) spk[s.speaker_id] = s;
  EvaluationOptions opt;
  opt.speakers = &spk;
  opt.cache_dir = fs::temp_directory_path() / ("muteswap_eval_cache_" + std::to_string(::getpid()));
  fs::remove_all(*opt.cache_dir);
  const auto a = evaluate(model, corpus, plan, oracle_embedder(g.manifest), opt);
  EXPECT_EQ(a.scored.size(), 40u);
  EXPECT_EQ(a.conversions.size(), plan.conversions().size());
  const auto b = evaluate(model, corpus, plan, oracle_embedder(g.manifest), opt);
  EXPECT_EQ(a.psh, b.psh);
  EXPECT_EQ(a.eer.eer, b.eer.eer);
  const auto report = a.report();
  EXPECT_TRUE(report.contains("psh"));
  EXPECT_TRUE(report.contains("psd"));
  EXPECT_TRUE(report.contains("eer"));
  EXPECT_TRUE(report.contains("target_closer_fraction"));

  // External embeddings: constant vectors make every pair cosine 1.
  const fs::path ext = *opt.cache_dir / "ext";
  for (const auto& [s, t] : plan.conversions()) write_f32(ext / (conversion_key(s, t) + ".f32"), Matrix<float>(Matrix<float>::Ones(1, 3)), true);
  const auto e = evaluate(model, corpus, plan, external_embedder(ext), EvaluationOptions{});
  EXPECT_NEAR(e.psh, 1.0, 1e-12);
  EXPECT_NEAR(e.psd, 1.0, 1e-12);
  fs::remove_all(*opt.cache_dir);
}
