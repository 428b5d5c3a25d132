#include "muteswap/losses.hpp"
#include "muteswap/model.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace muteswap;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.face_hidden = 16;
  c.speech_hidden = 8;
  c.mi_hidden = 8;
  c.init_seed = 5;
  return c;
}

Matrix<double> rnd(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  return oracle::random_matrix(rng, static_cast<int>(r), static_cast<int>(c));
}

Matrix<double> silu(const Matrix<double>& x) { return x.array() / (1.0 + (-x.array()).exp()); }

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.mel_per_video_frame = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(Model, ShapeContracts) {
  Model<double> m(tiny());
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> len(1, 40), faces(1, 20);
  for (int trial = 0; trial < 10; ++trial) {
    const int T = trial == 0 ? 1 : len(rng), K = faces(rng);
    const auto video = rnd(rng, T, 32);
    EXPECT_EQ(m.encode_content(video).rows(), T);
    EXPECT_EQ(m.encode_content(video).cols(), 16);
    EXPECT_EQ(m.encode_faces(rnd(rng, K, 16)).values.size(), 16);
    const auto mel = m.forward(video, rnd(rng, K, 16));
    EXPECT_EQ(mel.rows(), 4 * T);
    EXPECT_EQ(mel.cols(), 80);
  }
  EXPECT_EQ(m.blend(rnd(rng, 10, 16)).rows(), 40);
  EXPECT_THROW(m.encode_content(rnd(rng, 5, 31)), ShapeError);
  EXPECT_THROW(m.encode_faces(rnd(rng, 3, 15)), ShapeError);
  EXPECT_THROW(m.encode_speech(rnd(rng, 3, 79)), ShapeError);
}

TEST(Model, ContentReceptiveField) {
  Model<double> m(tiny());
  const int radius = tiny().content_receptive_radius();
  std::mt19937_64 rng(2);
  const auto video = rnd(rng, 40, 32);
  const auto base = m.encode_content(video);
  for (int t : {0, 13, 39}) {
    Matrix<double> p = video;
    p.row(t).array() += 3.0;
    const auto out = m.encode_content(p);
    for (Eigen::Index s = 0; s < 40; ++s) {
      if (std::abs(s - t) > radius) {
        EXPECT_EQ(out.row(s), base.row(s)) << "t=" << t << " s=" << s;
      }
    }
    EXPECT_NE(out.row(t), base.row(t));
  }
}

TEST(Model, IdenticalWindowsGiveIdenticalRows) {
  Model<double> m(tiny());
  const int radius = tiny().content_receptive_radius();
  std::mt19937_64 rng(3);
  const auto block = rnd(rng, 2 * radius + 1, 32);
  Matrix<double> video = rnd(rng, 8 * radius, 32);
  video.middleRows(radius, 2 * radius + 1) = block;
  video.middleRows(4 * radius, 2 * radius + 1) = block;
  const auto out = m.encode_content(video);
  EXPECT_EQ(out.row(2 * radius), out.row(5 * radius));
}

TEST(Model, FacePoolingIsMeanOfPerImageEmbeddings) {
  Model<double> m(tiny());
  std::mt19937_64 rng(4);
  const auto faces = rnd(rng, 7, 16);
  const auto e = m.encode_faces(faces).values;
  EXPECT_EQ(m.encode_faces(faces).modality, Modality::kFacial);

  std::vector<int> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix<double> shuffled(7, 16);
  for (int i = 0; i < 7; ++i) shuffled.row(i) = faces.row(perm[i]);
  EXPECT_LT((m.encode_faces(shuffled).values - e).cwiseAbs().maxCoeff(), 1e-14);

  const Matrix<double> one = faces.topRows(1);
  const Matrix<double> dup = one.replicate(5, 1);
  EXPECT_LT((m.encode_faces(dup).values - m.encode_faces(one).values).cwiseAbs().maxCoeff(), 1e-14);

  const auto e1 = m.encode_faces(faces.middleRows(0, 1)).values;
  const auto e2 = m.encode_faces(faces.middleRows(1, 1)).values;
  EXPECT_LT((m.encode_faces(faces.topRows(2)).values - (e1 + e2) / 2).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Model, SpeechEncoderTimePooling) {
  Model<double> m(tiny());
  std::mt19937_64 rng(5);
  const auto mel = rnd(rng, 30, 80);
  Matrix<double> twice(60, 80);
  twice << mel, mel;
  EXPECT_LT((m.encode_speech(twice).values - m.encode_speech(mel).values).cwiseAbs().maxCoeff(), 1e-13);
  const Matrix<double> frame = rnd(rng, 1, 80);
  const Matrix<double> constant = frame.replicate(25, 1);
  EXPECT_LT((m.encode_speech(constant).values - m.encode_speech(frame).values).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_EQ(m.encode_speech(mel).modality, Modality::kAudio);
}

// Replays the speech path with plain Eigen arithmetic from the named parameters.
TEST(Model, SpeechEncoderMatchesManualReplay) {
  Model<double> m(tiny());
  const auto& ps = m.params();
  auto P = [&](const std::string& n) { return ps[ps.index(n)].value; };
  std::mt19937_64 rng(6);
  const auto mel = rnd(rng, 9, 80);
  const int T = 9, k = 3;
  Matrix<double> cols(T, 80 * k);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < k; ++j) cols.block(t, j * 80, 1, 80) = mel.row(((t + j - 1) % T + T) % T);
  Matrix<double> h = silu((cols * P("speech.conv.w")).rowwise() + RowVector<double>(P("speech.conv.b")));
  h = silu((h * P("speech.fc.w")).rowwise() + RowVector<double>(P("speech.fc.b")));
  const RowVector<double> pooled = h.colwise().mean();
  const RowVector<double> expected = pooled * P("adapter_a.w") + RowVector<double>(P("adapter_a.b"));
  EXPECT_LT((m.encode_speech(mel).values - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Model, FuseExamples) {
  Matrix<double> c(1, 2);
  c << 1, 2;
  IdentityEmbedding<double> v{RowVector<double>(2), Modality::kFacial};
  v.values << 10, 10;
  const auto f = Model<double>::fuse(c, v);
  EXPECT_EQ(f(0, 0), 11);
  EXPECT_EQ(f(0, 1), 12);
  std::mt19937_64 rng(7);
  const auto ec = rnd(rng, 5, 4);
  IdentityEmbedding<double> zero{RowVector<double>::Zero(4), Modality::kFacial};
  EXPECT_EQ(Model<double>::fuse(ec, zero), ec);
  IdentityEmbedding<double> w{rnd(rng, 1, 4), Modality::kFacial};
  IdentityEmbedding<double> neg{-w.values, Modality::kFacial};
  EXPECT_LT((Model<double>::fuse(Model<double>::fuse(ec, w), neg) - ec).cwiseAbs().maxCoeff(), 1e-15);
  IdentityEmbedding<double> bad{RowVector<double>::Zero(3), Modality::kFacial};
  EXPECT_THROW(Model<double>::fuse(ec, bad), ShapeError);
}

TEST(Model, Deterministic) {
  Model<double> a(tiny()), b(tiny());
  std::mt19937_64 rng(8);
  const auto v = rnd(rng, 12, 32);
  const auto f = rnd(rng, 4, 16);
  EXPECT_EQ(a.forward(v, f), a.forward(v, f));
  EXPECT_EQ(a.forward(v, f), b.forward(v, f));
  auto other = tiny();
  other.init_seed = 6;
  EXPECT_NE(Model<double>(other).forward(v, f), a.forward(v, f));
}

TEST(Model, BlendJacobianVectorProduct) {
  Model<double> m(tiny());
  std::mt19937_64 rng(9);
  const auto x = rnd(rng, 2, 16);
  const auto dir = rnd(rng, 2, 16);
  const auto w = rnd(rng, 8, 80);
  Graph<double> g(m.params());
  auto vx = g.variable(x);
  g.tape.backward(ad::sum(ad::hadamard(m.blend(g, vx), g.constant(w))));
  const double analytic = g.tape.grad(vx).cwiseProduct(dir).sum();
  const double h = 1e-6;
  const Matrix<double> up = x + h * dir;
  const Matrix<double> down = x - h * dir;
  const double numeric = (m.blend(up).cwiseProduct(w).sum() - m.blend(down).cwiseProduct(w).sum()) / (2 * h);
  EXPECT_LT(oracle::rel_diff(analytic, numeric), 1e-6);
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  Model<double> m(tiny());
  std::mt19937_64 rng(10);
  const auto v = rnd(rng, 6, 32);
  const auto f = rnd(rng, 3, 16);
  const auto target = rnd(rng, 24, 80);
  auto loss_of = [&](Model<double>& model, Graph<double>& g) {
    auto pred = model.blend(g, Model<double>::fuse(model.encode_content(g, g.constant(v)),
                                                   model.encode_faces(g, g.constant(f))));
    return ad::mean(ad::square(ad::sub(pred, g.constant(target))));
  };
  Graph<double> g(m.params(), [](const std::string&) { return true; });
  g.tape.backward(loss_of(m, g));
  const auto grads = g.gradients();
  for (const std::string name : {"content.conv0.w", "content.mixer.attn.qkv.w", "face.fc0.w", "adapter_f.w",
                                 "blender.l0.dwconv.w", "blender.l1.ln_ffn.g", "blender.out.b"}) {
    const int i = m.params().index(name);
    // Spot-check a handful of coordinates per block.
    for (int probe = 0; probe < 4; ++probe) {
      const Eigen::Index k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m.params()[i].value.size()));
      double& p = m.params()[i].value.data()[k];
      const double keep = p, h = 1e-6;
      p = keep + h;
      Graph<double> g1(m.params());
      const double up = loss_of(m, g1).value()(0, 0);
      p = keep - h;
      Graph<double> g2(m.params());
      const double down = loss_of(m, g2).value()(0, 0);
      p = keep;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[static_cast<std::size_t>(i)].data()[k];
      EXPECT_NEAR(analytic, numeric, 1e-6 + 1e-4 * std::fabs(numeric)) << name << "[" << k << "]";
    }
  }
}

// One combined backward pass touches every block outside the estimator.
TEST(Model, EveryParameterReachable) {
  Model<double> m(tiny());
  std::mt19937_64 rng(11);
  Graph<double> g(m.params(), [](const std::string& n) { return !is_estimator_param(n); });
  std::vector<ad::Var<double>> contents, faces, audio, recs;
  for (int i = 0; i < 3; ++i) {
    const int T = 5 + i;
    auto c = m.encode_content(g, g.constant(rnd(rng, T, 32)));
    auto f = m.encode_faces(g, g.constant(rnd(rng, 4, 16)));
    auto mel = g.constant(rnd(rng, 4 * T, 80));
    recs.push_back(reconstruction_loss(m.blend(g, Model<double>::fuse(c, f)), mel));
    audio.push_back(m.encode_speech(g, mel));
    contents.push_back(c);
    faces.push_back(f);
  }
  auto x = ad::concat_rows(faces);
  auto loss = ad::add(ad::add(recs[0], ad::add(recs[1], recs[2])), afclip_loss(ad::concat_rows(audio), x).total);
  loss = ad::add(loss, mi_upper_bound(x, m.estimator().predict(g, contents), {1, 2, 0}));
  g.tape.backward(loss);
  const auto grads = g.gradients();
  for (int i = 0; i < m.params().size(); ++i) {
    const auto& name = m.params()[i].name;
    if (is_estimator_param(name)) {
      EXPECT_EQ(grads[i].norm(), 0.0) << name;
    } else {
      EXPECT_GT(grads[i].norm(), 0.0) << name;
    }
  }
}

TEST(Model, CastPreservesValues) {
  Model<double> m(tiny());
  const Model<float> f = m.cast<float>();
  for (int i = 0; i < m.params().size(); ++i) {
    EXPECT_EQ(f.params()[i].value, m.params()[i].value.cast<float>());
  }
}

TEST(Model, BlockClassification) {
  EXPECT_EQ(block_of("content.conv0.w"), Block::kContentEncoder);
  EXPECT_EQ(block_of("adapter_a.w"), Block::kAdapterA);
  EXPECT_EQ(block_of("miest.lstm.wx"), Block::kEstimator);
  EXPECT_THROW(block_of("other.w"), std::logic_error);
  Model<double> m(tiny());
  for (const auto& p : m.params()) EXPECT_NO_THROW(block_of(p.name));
}
