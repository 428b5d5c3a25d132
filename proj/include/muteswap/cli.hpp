#pragma once

// Command-line front end. Every flag can also be given as `key = value` in
// the file passed to --config (dashes or underscores); flags win over the file.
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.

#include "muteswap/metrics.hpp"
#include "muteswap/trainer.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <set>
#include <string>

namespace muteswap::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

namespace detail {

inline std::string flag_names(const std::string& key) {
  std::string dashed = key;
  std::replace(dashed.begin(), dashed.end(), '_', '-');
  return dashed == key ? "--" + key : "--" + dashed + ",--" + key;
}

template <typename V>
CLI::Option* opt(CLI::App* app, const std::string& key, V& value, const std::string& help) {
  return app->add_option(flag_names(key), value, help)->capture_default_str();
}

inline CLI::Option* flag(CLI::App* app, const std::string& key, bool& value, const std::string& help) {
  return app->add_flag(flag_names(key), value, help);
}

inline void echo(std::ostream& out, const CLI::App* sub, const fs::path& out_dir) {
  const std::string text = sub->config_to_str(true, false);
  out << "# " << sub->get_name() << " resolved configuration\n" << text;
  if (!out_dir.empty()) write_file_atomic(out_dir / (sub->get_name() + ".config"), text);
}

inline Model<float> load_for_inference(const fs::path& checkpoint, const Corpus& corpus) {
  Model<float> m = load_model<float>(checkpoint);
  const auto& c = m.config();
  const auto& man = corpus.manifest;
  if (c.video_dim != man.video_dim || c.face_dim != man.face_dim || c.mel_bins != man.mel_bins ||
      c.mel_per_video_frame != man.mel_per_video_frame) {
    throw CheckpointMismatch("checkpoint " + checkpoint.string() + " does not match the corpus dimensions");
  }
  return m;
}

inline Matrix<float> identity_faces(const Corpus& corpus, const std::string& utt, const fs::path& faces_file,
                                    int max_images, std::uint64_t seed) {
  if (!faces_file.empty()) {
    Matrix<float> f = read_f32<float>(faces_file);
    if (f.cols() != corpus.manifest.face_dim) {
      throw DataError(faces_file.string() + " has " + std::to_string(f.cols()) + " features per face, expected " +
                      std::to_string(corpus.manifest.face_dim));
    }
    return f;
  }
  if (utt.empty()) throw std::invalid_argument("an identity source (--identity-utt or --faces) is required");
  return sample_faces_for(corpus.at(utt), max_images, seed);
}

inline void write_mel(const fs::path& path, const Matrix<float>& mel, bool pgm) {
  write_f32(path, mel);
  if (pgm) write_pgm(fs::path(path).replace_extension(".pgm"), mel);
}

inline std::string normalise_key(std::string k) {
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

// CLI11 reads config files only on the top-level app, so the subcommand's
// --config file is expanded into `--key=value` arguments here. Keys already
// on the command line are skipped, which lets flags win.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  auto it = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a == "--config" || a.rfind("--config=", 0) == 0; });
  if (it == args.end()) return args;
  std::string file;
  if (*it == "--config") {
    if (it + 1 == args.end()) throw CLI::ArgumentMismatch("--config needs a file");
    file = *(it + 1);
    it = args.erase(it, it + 2);
  } else {
    file = it->substr(9);
    it = args.erase(it);
  }
  if (!fs::is_regular_file(file)) throw DataError("config file " + file + " not found");
  const auto sub = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a.empty() || a[0] != '-'; });
  const std::string sub_name = sub == args.end() ? "" : *sub;
  std::set<std::string> given;
  for (const auto& a : args) {
    if (a.rfind("--", 0) == 0) given.insert(normalise_key(a.substr(2, a.find('=') - 2)));
  }
  std::vector<std::string> extra;
  for (const auto& item : CLI::ConfigINI().from_file(file)) {
    if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub_name)) continue;
    if (item.name == "++" || item.name == "--") continue;
    const std::string key = normalise_key(item.name);
    if (given.count(key) || key == "config") continue;
    std::string value;
    for (const auto& v : item.inputs) value += (value.empty() ? "" : ",") + v;
    extra.push_back("--" + item.name + "=" + value);
  }
  args.insert(it, extra.begin(), extra.end());
  return args;
}

inline std::string alpha_tag(double a) {
  std::ostringstream s;
  s << a;
  return s.str();
}

}  // namespace detail

/// Parses and runs one subcommand; all output goes under --out.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using detail::flag;
  using detail::opt;
  CLI::App app{"Silent-face voice conversion toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  fs::path out_dir, corpus_dir, checkpoint;
  auto common = [&](CLI::App* s, bool needs_out = true) {
    s->add_option("--config", "key = value file mirroring the flags (dashes or underscores)")->configurable(false);
    opt(s, "seed", seed, "random seed");
    auto* o = opt(s, "out", out_dir, "output directory; nothing is written elsewhere");
    if (needs_out) o->required();
  };

  // gen-data
  GenConfig gen;
  auto* s_gen = app.add_subcommand("gen-data", "write a synthetic corpus");
  common(s_gen);
  opt(s_gen, "speakers", gen.speakers, "number of speakers");
  s_gen->add_option("--utts,--utts-per-speaker,--utts_per_speaker", gen.utts_per_speaker, "utterances per speaker")
      ->capture_default_str();
  opt(s_gen, "eval_utts_per_speaker", gen.eval_utts_per_speaker, "trailing utterances per speaker held out");
  opt(s_gen, "vocab", gen.vocab, "token vocabulary size");
  opt(s_gen, "min_frames", gen.min_frames, "shortest utterance (video frames)");
  opt(s_gen, "max_frames", gen.max_frames, "longest utterance (video frames)");
  opt(s_gen, "min_hold", gen.min_hold, "shortest token hold");
  opt(s_gen, "max_hold", gen.max_hold, "longest token hold");
  opt(s_gen, "video_dim", gen.video_dim, "video feature width");
  opt(s_gen, "face_dim", gen.face_dim, "face feature width");
  opt(s_gen, "mel_bins", gen.mel_bins, "mel bins");
  opt(s_gen, "mel_per_video_frame", gen.mel_per_video_frame, "mel frames per video frame");
  opt(s_gen, "faces_min", gen.faces_min, "fewest face images per utterance");
  opt(s_gen, "faces_max", gen.faces_max, "most face images per utterance");
  opt(s_gen, "sigma_v", gen.sigma_v, "video noise");
  opt(s_gen, "sigma_f", gen.sigma_f, "face noise");
  opt(s_gen, "sigma_m", gen.sigma_m, "mel noise");
  opt(s_gen, "tau", gen.tau, "speaker tilt scale");
  opt(s_gen, "identity_leak", gen.identity_leak, "face-code projection added to video");

  // train
  TrainConfig tc;
  ModelConfig mc;
  int steps = -1, checkpoint_every = 0;
  fs::path resume;
  auto* s_train = app.add_subcommand("train", "train a model on a corpus");
  common(s_train);
  opt(s_train, "corpus", corpus_dir, "corpus directory")->required();
  opt(s_train, "resume", resume, "training checkpoint to continue from");
  opt(s_train, "steps", steps, "updates to run now (default: up to total_steps)");
  opt(s_train, "checkpoint_every", checkpoint_every, "save a checkpoint every N updates (0: only at the end)");
#define X(f) opt(s_train, #f, tc.f, "TrainConfig " #f);
  X(lambda_clip) X(lambda_mi) X(lr_theta) X(lr_peak) X(lr_final) X(warmup_frac) X(hold_frac) X(decay_frac)
  X(total_steps) X(batch_size) X(beta1) X(beta2) X(adam_eps) X(weight_decay) X(grad_clip) X(e_steps)
  X(max_images) X(temperature)
#undef X
  flag(s_train, "freeze_content", tc.freeze_content, "do not update the content encoder");
  flag(s_train, "freeze_face", tc.freeze_face, "do not update the face encoder");
  flag(s_train, "freeze_speech", tc.freeze_speech, "do not update the speech encoder");
#define X(f) opt(s_train, #f, mc.f, "model " #f);
  X(d) X(heads) X(blender_layers) X(blender_conv_kernel) X(ffn_mult) X(content_layers) X(content_kernel)
  X(content_window) X(face_hidden) X(speech_hidden) X(speech_kernel) X(mi_hidden)
#undef X

  // inference
  std::string utt, content_utt, identity_utt, target_utt;
  fs::path faces_file, target_faces_file;
  int max_images = 16;
  double alpha = 0.0;
  bool pgm = false;
  auto inference_flags = [&](CLI::App* s) {
    common(s);
    opt(s, "checkpoint", checkpoint, "training checkpoint or inference export")->required();
    opt(s, "corpus", corpus_dir, "corpus directory")->required();
    opt(s, "max_images", max_images, "face images pooled per identity");
    flag(s, "pgm", pgm, "also render each output as a PGM image");
  };
  auto* s_syn = app.add_subcommand("synthesize", "mel from an utterance's video and its own faces");
  inference_flags(s_syn);
  opt(s_syn, "utt", utt, "utterance id")->required();

  auto* s_conv = app.add_subcommand("convert", "mel from one utterance's video with another identity");
  inference_flags(s_conv);
  opt(s_conv, "content_utt", content_utt, "utterance providing the video")->required();
  opt(s_conv, "identity_utt", identity_utt, "utterance providing the faces");
  opt(s_conv, "faces", faces_file, ".f32 face features (K x D_f) instead of --identity-utt");

  auto* s_int = app.add_subcommand("interpolate", "mix the content speaker's identity with a target identity");
  inference_flags(s_int);
  opt(s_int, "content_utt", content_utt, "utterance providing the video and the first identity")->required();
  opt(s_int, "target_utt", target_utt, "utterance providing the second identity");
  opt(s_int, "target_faces", target_faces_file, ".f32 face features instead of --target-utt");
  opt(s_int, "alpha", alpha, "weight of the target identity, in [0, 1]")->required();

  // evaluate
  int n_sources = 4, n_targets = 8, n_pairs = 200;
  std::string split = "eval";
  fs::path plan_file, embeddings_dir;
  auto* s_eval = app.add_subcommand("evaluate", "pair plan, conversions, PSH/PSD/EER report");
  inference_flags(s_eval);
  opt(s_eval, "sources", n_sources, "source speakers");
  opt(s_eval, "targets", n_targets, "target speakers");
  opt(s_eval, "pairs", n_pairs, "positive pairs (and as many negative pairs)");
  opt(s_eval, "split", split, "corpus split the pairs are drawn from");
  opt(s_eval, "plan", plan_file, "existing pair plan (JSON lines) instead of sampling one");
  opt(s_eval, "embeddings", embeddings_dir, "directory of external identity vectors <source>__<target>.f32");

  // det-curve, plot-mel
  fs::path scored_file, input_file;
  auto* s_det = app.add_subcommand("det-curve", "DET curve and EER from scored pairs");
  common(s_det);
  opt(s_det, "scored", scored_file, "scored pairs (JSON lines)")->required();
  auto* s_plot = app.add_subcommand("plot-mel", "render a .f32 mel as a PGM image");
  common(s_plot);
  opt(s_plot, "input", input_file, ".f32 mel spectrogram")->required();

  try {
    std::vector<std::string> args;
    try {
      args = detail::expand_config({argv + 1, argv + argc});
    } catch (const DataError& e) {
      err << "data error: " << e.what() << "\n";
      return kData;
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*s_gen) {
      gen.seed = seed;
      gen.validate();
      detail::echo(out, s_gen, out_dir);
      const GeneratedCorpus c = generate_corpus(gen);
      write_corpus(out_dir, c);
      out << "wrote " << c.utterances.size() << " utterances to " << out_dir.string() << "\n";
    } else if (*s_train) {
      tc.seed = seed;
      Corpus corpus = Corpus::load(corpus_dir);
      mc.video_dim = corpus.manifest.video_dim;
      mc.face_dim = corpus.manifest.face_dim;
      mc.mel_bins = corpus.manifest.mel_bins;
      mc.mel_per_video_frame = corpus.manifest.mel_per_video_frame;
      mc.init_seed = seed;
      tc.validate();
      mc.validate();
      detail::echo(out, s_train, out_dir);
      Trainer<float> trainer(mc, tc);
      if (!resume.empty()) trainer.load(resume);
      const int remaining = trainer.config().total_steps - trainer.step();
      const int todo = steps < 0 ? remaining : std::min(steps, remaining);
      const fs::path metrics = out_dir / "metrics.jsonl";
      fs::create_directories(out_dir);
      std::ofstream log(metrics, std::ios::app);
      if (!log) throw DataError("cannot open " + metrics.string());
      int done = 0;
      while (done < todo) {
        const int chunk = checkpoint_every > 0 ? std::min(checkpoint_every, todo - done) : todo - done;
        trainer.train(corpus, chunk, [&](const StepMetrics& m) { log << to_json_line(m).dump() << "\n"; });
        log.flush();
        done += chunk;
        trainer.save(out_dir / "checkpoint.bin");
      }
      if (todo == 0) trainer.save(out_dir / "checkpoint.bin");
      trainer.export_inference(out_dir / "inference.bin");
      out << "trained to step " << trainer.step() << "; checkpoint " << (out_dir / "checkpoint.bin").string() << "\n";
    } else if (*s_syn || *s_conv || *s_int) {
      Corpus corpus = Corpus::load(corpus_dir);
      const Model<float> model = detail::load_for_inference(checkpoint, corpus);
      if (*s_syn) {
        detail::echo(out, s_syn, out_dir);
        const Utterance& u = corpus.at(utt);
        const auto mel = synthesize(model, u.video, sample_faces_for(u, max_images, seed));
        detail::write_mel(out_dir / (utt + ".f32"), mel, pgm);
      } else if (*s_conv) {
        detail::echo(out, s_conv, out_dir);
        const Utterance& u = corpus.at(content_utt);
        const auto faces = detail::identity_faces(corpus, identity_utt, faces_file, max_images, seed);
        const std::string tag = identity_utt.empty() ? faces_file.stem().string() : identity_utt;
        detail::write_mel(out_dir / (content_utt + "__" + tag + ".f32"), convert(model, u.video, faces), pgm);
      } else {
        detail::echo(out, s_int, out_dir);
        const Utterance& u = corpus.at(content_utt);
        const auto other = detail::identity_faces(corpus, target_utt, target_faces_file, max_images, seed);
        const auto mel = interpolate(model, u.video, sample_faces_for(u, max_images, seed), other, alpha);
        detail::write_mel(out_dir / (content_utt + "_alpha" + detail::alpha_tag(alpha) + ".f32"), mel, pgm);
      }
    } else if (*s_eval) {
      detail::echo(out, s_eval, out_dir);
      Corpus corpus = Corpus::load(corpus_dir);
      const Model<float> model = detail::load_for_inference(checkpoint, corpus);
      const PairPlan plan = plan_file.empty() ? sample_pairs(corpus.manifest, n_sources, n_targets, n_pairs, seed, split)
                                              : plan_from_jsonl(read_file(plan_file), plan_file.string());
      write_file_atomic(out_dir / "plan.jsonl", plan.to_jsonl());
      std::map<std::string, SpeakerProfile> speakers;
      if (fs::exists(corpus_dir / "speakers.json")) speakers = load_speakers(corpus_dir);
      EvaluationOptions eo;
      eo.max_images = max_images;
      eo.face_seed = seed;
      eo.cache_dir = out_dir / "cache" /
                     (hex64(fnv1a64(read_file(checkpoint))) + "_" + plan.hash() + "_" + std::to_string(max_images) +
                      "_" + std::to_string(seed));
      if (!speakers.empty() && corpus.manifest.synthetic()) eo.speakers = &speakers;
      const Embedder embed =
          embeddings_dir.empty() ? oracle_embedder(corpus.manifest) : external_embedder(embeddings_dir);
      const EvaluationResult r = evaluate(model, corpus, plan, embed, eo);
      write_file_atomic(out_dir / "scored.jsonl", r.scored_jsonl());
      write_file_atomic(out_dir / "det.csv", r.eer.det.to_csv());
      write_json(out_dir / "report.json", r.report());
      out << r.report().dump(2) << "\n";
    } else if (*s_det) {
      detail::echo(out, s_det, out_dir);
      std::vector<double> pos, neg;
      std::istringstream in(read_file(scored_file));
      std::string line;
      int n = 0;
      while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
          const json j = json::parse(line);
          (parse_label(j.at("label").get<std::string>()) == PairLabel::kPositive ? pos : neg)
              .push_back(j.at("similarity").get<double>());
        } catch (const json::exception& e) {
          throw DataError(scored_file.string() + ":" + std::to_string(n) + ": " + e.what());
        }
      }
      if (pos.empty() || neg.empty()) throw DataError(scored_file.string() + " needs both positive and negative pairs");
      const EerResult r = eer(pos, neg);
      write_file_atomic(out_dir / "det.csv", r.det.to_csv());
      write_json(out_dir / "eer.json", json{{"eer", r.eer}});
      out << "eer " << r.eer << "\n";
    } else if (*s_plot) {
      detail::echo(out, s_plot, out_dir);
      const Matrix<float> mel = read_f32<float>(input_file);
      write_pgm(out_dir / (input_file.stem().string() + ".pgm"), mel);
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kOk;
}

}  // namespace muteswap::cli
