// cadence: corpus generation, prosody extraction, training, controllable
// synthesis and DSP utilities. Exit codes: 0 ok, 2 config, 3 data, 4 internal.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cadence/cli.hpp"

using namespace cadence;
using namespace cadence::cli;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct Invocation {
  std::vector<std::string> argv;
  Common common;
  std::string attention = "regular";
  std::vector<double> pace{0.0}, pitch{0.0};
  std::string format = "bin";
  std::vector<std::string> positional;
  std::string dsp_op;
};

RunConfig resolve_config(const Common& c, bool optional_config = false) {
  RunConfig cfg = c.config.empty() && optional_config ? default_config() : load_config(c.config);
  if (c.seed) {
    cfg.set_seed(*c.seed);
    cfg.validate();
  }
  return cfg;
}

RunManifest start_manifest(const Invocation& inv, const std::string& command, const RunConfig& cfg) {
  RunManifest m;
  m.command = command;
  m.argv = inv.argv;
  m.config_path = inv.common.config;
  m.seed = cfg.seed;
  m.output_dir = inv.common.out;
  if (!inv.common.config.empty()) m.inputs[inv.common.config] = hash_file(inv.common.config);
  return m;
}

void add_inputs(RunManifest& m, const fs::path& p) {
  for (const auto& [rel, h] : hash_tree(p, {kManifestName})) {
    m.inputs[fs::is_regular_file(p) ? p.generic_string() : (p / rel).generic_string()] = h;
  }
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Creates the directory and drops temporaries left by an interrupted write.
void prepare_out(const fs::path& out) {
  fs::create_directories(out);
  std::vector<fs::path> stale;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (e.is_regular_file() && e.path().extension() == ".tmp") stale.push_back(e.path());
  }
  for (const auto& p : stale) fs::remove(p);
}

fs::path require_dir(const std::string& p, const char* what) {
  if (!fs::is_directory(p)) throw DataError(std::string(what) + " '" + p + "' is not a directory");
  return p;
}

// ---------------------------------------------------------------------------

int cmd_gen(const Invocation& inv) {
  const RunConfig cfg = resolve_config(inv.common);
  const fs::path out = inv.common.out;
  prepare_out(out);
  const auto corpus = synth::generate_corpus(cfg.corpus);
  write_corpus(out, corpus, cfg.corpus);
  write_manifest(start_manifest(inv, "gen", cfg), out);
  std::size_t frames = 0;
  for (const auto& u : corpus) frames += u.frames();
  std::cout << "gen: " << corpus.size() << " utterances, " << frames << " frames -> " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

std::vector<prosody::ProsodyRow> prosody_from_corpus(const Corpus& c) {
  std::vector<prosody::ProsodyRow> rows;
  for (const auto& u : c.utterances) {
    prosody::ProsodyRow r{u.id, std::nullopt, ""};
    try {
      r.raw = synth::measure_prosody(u, c.frame_period);
      if (!r.raw) r.flag = "no-voiced-frames";
    } catch (const DomainError&) {
      r.flag = "no-phones";
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Each <stem>.wav needs <stem>.json: {"symbols": "...", "durations": [frames per symbol]}.
std::vector<prosody::ProsodyRow> prosody_from_wavs(const fs::path& dir, const RunConfig& cfg) {
  std::vector<fs::path> wavs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") wavs.push_back(e.path());
  }
  std::sort(wavs.begin(), wavs.end());
  if (wavs.empty()) throw DataError(dir.string() + ": neither corpus.json nor any .wav file found");
  std::vector<prosody::ProsodyRow> rows;
  for (const auto& w : wavs) {
    prosody::ProsodyRow r{w.stem().string(), std::nullopt, ""};
    std::istringstream is(io::read_file(w), std::ios::binary);
    const auto audio = dsp::read_wav(is);
    fs::path side = w;
    side.replace_extension(".json");
    const Json j = parse_json_text(io::read_file(side), side.string(), false);
    SymbolSequence sym;
    std::vector<std::size_t> durations;
    try {
      sym = SymbolSequence::parse(j.at("symbols").get<std::string>(), cfg.corpus.alphabet);
      durations = j.at("durations").get<std::vector<std::size_t>>();
    } catch (const std::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
    if (durations.size() != sym.size()) throw DataError(side.string() + ": one duration per symbol expected");
    const auto track = dsp::estimate_pitch(audio, cfg.dsp.pitch);
    try {
      const double pace = prosody::compute_pace(durations, sym.pause_flags(), cfg.dsp.pitch.hop / audio.sample_rate);
      const auto span = prosody::compute_pitch_span(track.log_pitch, track.voiced);
      if (span) r.raw = prosody::ProsodyInfo{pace, *span};
      else r.flag = "no-voiced-frames";
    } catch (const DomainError&) {
      r.flag = "no-phones";
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

int cmd_prosody(const Invocation& inv) {
  const RunConfig cfg = resolve_config(inv.common);
  const fs::path in = require_dir(inv.positional.at(0), "input");
  const fs::path out = inv.common.out;
  RunManifest man = start_manifest(inv, "prosody", cfg);
  add_inputs(man, in);
  const auto rows = fs::exists(in / kCorpusIndex) ? prosody_from_corpus(read_corpus(in)) : prosody_from_wavs(in, cfg);
  std::vector<prosody::ProsodyInfo> values;
  std::size_t flagged = 0;
  for (const auto& r : rows) {
    if (r.raw) values.push_back(*r.raw);
    else ++flagged;
  }
  prosody::SpeakerStats stats;
  try {
    stats = prosody::fit_speaker_stats(values);
  } catch (const DomainError& e) {
    throw DataError(std::string("speaker statistics: ") + e.what());
  }
  prepare_out(out);
  io::write_with(out / kProsodyTable, [&](std::ostream& os) { prosody::write_prosody_csv(os, rows, stats); });
  io::write_file_atomic(out / kSpeakerStats, prosody::stats_to_json(stats).dump(2) + "\n");
  write_manifest(man, out);
  std::cout << "prosody: " << rows.size() << " rows (" << flagged << " flagged) -> " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

constexpr const char* kCheckpoint = "checkpoint.bin";
constexpr const char* kPredictor = "predictor.bin";
constexpr const char* kRunInfo = "run.json";
constexpr const char* kLossLog = "loss.csv";
constexpr const char* kEntropyLog = "entropy.csv";
constexpr const char* kLossHeader = "epoch,train_loss,train_spectral,train_stop,validation_loss,prosody_zeroed";
constexpr const char* kEntropyHeader = "epoch,validation_entropy";

std::vector<std::string> kept_rows(const fs::path& p, const std::string& header, std::size_t keep) {
  std::vector<std::string> rows;
  if (!fs::exists(p)) throw DataError(p.string() + ": missing log next to a checkpoint");
  std::istringstream in(io::read_file(p));
  std::string line;
  if (!std::getline(in, line) || line != header) throw DataError(p.string() + ": unexpected log header");
  while (rows.size() < keep && std::getline(in, line)) rows.push_back(line);
  if (rows.size() != keep) throw DataError(p.string() + ": log is shorter than the checkpoint");
  return rows;
}

std::string join_log(const std::string& header, const std::vector<std::string>& rows) {
  std::string s = header + "\n";
  for (const auto& r : rows) s += r + "\n";
  return s;
}

io::TensorTable store_table(const ad::ParameterStore& s) {
  io::TensorTable t;
  for (ad::ParamId p = 0; p < s.size(); ++p) t["param/" + s.name(p)] = s.value(p);
  return t;
}

io::TensorTable read_table(const fs::path& p) {
  std::istringstream is(io::read_file(p), std::ios::binary);
  return io::read_checkpoint(is);
}

std::string checkpoint_bytes(const io::TensorTable& t) {
  std::ostringstream os(std::ios::binary);
  io::write_checkpoint(os, t);
  return os.str();
}

int cmd_train(const Invocation& inv) {
  const RunConfig cfg = resolve_config(inv.common);
  const auto mode = [&] {
    try {
      return seq2seq::parse_attention(inv.attention);
    } catch (const DomainError& e) {
      throw ConfigError(std::string("--attention: ") + e.what());
    }
  }();
  const fs::path corpus_dir = require_dir(inv.positional.at(0), "corpus");
  const fs::path prosody_dir = require_dir(inv.positional.at(1), "prosody");
  const fs::path out = inv.common.out;

  RunManifest man = start_manifest(inv, "train", cfg);
  add_inputs(man, corpus_dir);
  add_inputs(man, prosody_dir / kProsodyTable);

  const Corpus corpus = read_corpus(corpus_dir);
  if (corpus.alphabet != cfg.model.alphabet) throw DataError("corpus alphabet differs from model.alphabet");
  std::map<std::string, prosody::NormalizedProsody> table;
  for (const auto& r : read_prosody_table(prosody_dir / kProsodyTable)) {
    if (r.normalized) table[r.id] = *r.normalized;
  }
  std::vector<seq2seq::Example> train, validation;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    auto it = table.find(u.id);
    if (it == table.end()) continue;  // flagged or absent
    (i < corpus.train_count() ? train : validation).push_back({u.symbols, u.features, it->second});
  }
  if (train.empty() || validation.empty()) throw DataError("prosody table leaves an empty training or validation split");

  Json info;
  info["attention"] = seq2seq::to_string(mode);
  info["corpus"] = corpus_dir.generic_string();
  info["config_hash"] = git_blob_sha1(config_to_json(cfg).dump());
  info["corpus_hash"] = hash_file(corpus_dir / kCorpusIndex);
  info["prosody_hash"] = hash_file(prosody_dir / kProsodyTable);
  const std::string info_text = info.dump(2) + "\n";

  seq2seq::Model model(cfg.model);
  seq2seq::Trainer trainer(model, cfg.training, mode, train, validation);
  std::vector<std::string> loss_rows, entropy_rows;
  if (fs::exists(out / kCheckpoint)) {
    if (!fs::exists(out / kRunInfo) || io::read_file(out / kRunInfo) != info_text) {
      throw DataError("existing checkpoint in " + out.string() + " belongs to a different run; use a fresh --out");
    }
    trainer.restore(read_table(out / kCheckpoint));
    loss_rows = kept_rows(out / kLossLog, kLossHeader, trainer.epoch());
    entropy_rows = kept_rows(out / kEntropyLog, kEntropyHeader, trainer.epoch());
    std::cout << "train: resuming after epoch " << trainer.epoch() << "\n";
  }
  prepare_out(out);
  io::write_file_atomic(out / kRunInfo, info_text);

  while (!trainer.done()) {
    const auto log = trainer.run_epoch();
    if (!std::isfinite(log.train_loss)) throw NonFiniteError("training loss is not finite");
    loss_rows.push_back(std::to_string(log.epoch) + "," + num(log.train_loss) + "," + num(log.train_spectral) + "," +
                        num(log.train_stop) + "," + num(log.validation_loss) + "," + (log.prosody_zeroed ? "1" : "0"));
    entropy_rows.push_back(std::to_string(log.epoch) + "," + num(log.validation_entropy));
    // Logs first: a crash before the checkpoint leaves rows that resume trims.
    io::write_file_atomic(out / kLossLog, join_log(kLossHeader, loss_rows));
    io::write_file_atomic(out / kEntropyLog, join_log(kEntropyHeader, entropy_rows));
    io::write_file_atomic(out / kCheckpoint, checkpoint_bytes(trainer.checkpoint()));
    std::printf("epoch %zu loss %.6f val %.6f entropy %.4f%s\n", log.epoch, log.train_loss, log.validation_loss,
                log.validation_entropy, log.prosody_zeroed ? " (prosody zeroed)" : "");
    std::fflush(stdout);
  }

  // Prosody predictor on the frozen encoder, before prosody concatenation.
  std::vector<prosody::PredictorExample> pex;
  for (const auto& ex : train) {
    ad::Graph g(false);
    pex.push_back({model.encode_base(g, ex.symbols).value(), ex.prosody});
  }
  const auto fit = prosody::train_predictor(pex, cfg.predictor);
  io::write_file_atomic(out / kPredictor, checkpoint_bytes(store_table(fit.predictor.store())));
  std::string pred_log = "epoch,train_mse\n";
  for (std::size_t e = 0; e < fit.train_mse.size(); ++e) pred_log += std::to_string(e + 1) + "," + num(fit.train_mse[e]) + "\n";
  io::write_file_atomic(out / "predictor_log.csv", pred_log);

  write_manifest(man, out);
  std::cout << "train: " << trainer.epoch() << " epochs (" << seq2seq::to_string(mode) << ") -> " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

std::string offset_tag(double pace, double pitch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "pace%+.2f_pitch%+.2f", pace, pitch);
  return buf;
}

int cmd_synth(const Invocation& inv) {
  // Offsets are checked before anything is loaded.
  for (double p : inv.pace)
    for (double q : inv.pitch) {
      try {
        prosody::check_offset(p, q);
      } catch (const DomainError& e) {
        throw ConfigError(std::string("--pace/--pitch: ") + e.what());
      }
    }
  if (inv.format != "bin" && inv.format != "csv" && inv.format != "pgm") throw ConfigError("--format must be csv, bin or pgm");
  const RunConfig cfg = resolve_config(inv.common);
  const fs::path run = require_dir(inv.positional.at(0), "run");
  const std::string sentence = inv.positional.at(1);
  const fs::path out = inv.common.out;

  RunManifest man = start_manifest(inv, "synth", cfg);
  for (const char* f : {kCheckpoint, kPredictor, kRunInfo}) add_inputs(man, run / f);
  const Json info = parse_json_text(io::read_file(run / kRunInfo), (run / kRunInfo).string(), false);
  const auto mode = seq2seq::parse_attention(info.at("attention").get<std::string>());

  SymbolSequence sym;
  if (sentence.find(' ') == std::string::npos) {
    const fs::path corpus_dir = info.at("corpus").get<std::string>();
    add_inputs(man, corpus_dir / kCorpusIndex);
    const Corpus corpus = read_corpus(corpus_dir);
    const bool index = !sentence.empty() && std::all_of(sentence.begin(), sentence.end(), ::isdigit);
    if (index) {
      const std::size_t i = std::stoul(sentence);
      if (i >= corpus.utterances.size()) throw DataError("sentence index " + sentence + " is out of range");
      sym = corpus.utterances[i].symbols;
    } else {
      sym = corpus.find(sentence).symbols;
    }
  } else {
    try {
      sym = SymbolSequence::parse(sentence, cfg.model.alphabet);
    } catch (const DomainError& e) {
      throw DataError(std::string("symbol string: ") + e.what());
    }
  }

  seq2seq::Model model(cfg.model);
  seq2seq::Trainer::load_parameters(model.store(), read_table(run / kCheckpoint));
  ad::Graph g(false);
  const Tensor enc = model.encode_base(g, sym).value();
  prosody::ProsodyPredictor predictor(enc.cols(), cfg.predictor);
  seq2seq::Trainer::load_parameters(predictor.store(), read_table(run / kPredictor));
  const auto predicted = predictor.predict(enc);

  prepare_out(out);
  std::string summary = "pace_offset,pitch_offset,pace,pitch_span,frames,truncated,pitch_channel_span\n";
  for (double p : inv.pace) {
    for (double q : inv.pitch) {
      const auto pr = prosody::apply_offset(predicted, p, q);
      const auto trace = seq2seq::synthesize(model, sym, pr, mode, cfg.synthesis);
      const fs::path dir = out / offset_tag(p, q);
      fs::create_directories(dir);
      if (inv.format == "bin") io::write_file_atomic(dir / "features.cdmx", matrix_bytes(trace.z));
      else if (inv.format == "csv") io::write_file_atomic(dir / "features.csv", csv_bytes(trace.z));
      else io::write_file_atomic(dir / "features.pgm", to_pgm(trace.z, true, true));
      const Tensor a = alignment_tensor(trace.alignment);
      io::write_file_atomic(dir / "alignment.csv", csv_bytes(a));
      io::write_file_atomic(dir / "alignment.pgm", to_pgm(a, true, false));
      const double span = seq2seq::channel_span(trace.z, synth::kPitchChannel);
      summary += num(p) + "," + num(q) + "," + num(pr.pace) + "," + num(pr.pitch_span) + "," +
                 std::to_string(trace.frames()) + "," + (trace.truncated ? "1" : "0") + "," + num(span) + "\n";
      std::printf("synth %s: %zu frames%s, pitch-channel span %.4f\n", offset_tag(p, q).c_str(), trace.frames(),
                  trace.truncated ? " (truncated)" : "", span);
    }
  }
  io::write_file_atomic(out / "summary.csv", summary);
  write_manifest(man, out);
  return kOk;
}

// ---------------------------------------------------------------------------

dsp::AudioBuffer load_wav(const fs::path& p) {
  std::istringstream is(io::read_file(p), std::ios::binary);
  return dsp::read_wav(is);
}

std::string wav_bytes(const dsp::AudioBuffer& a) {
  std::ostringstream os(std::ios::binary);
  dsp::write_wav(os, a);
  return os.str();
}

int cmd_dsp(const Invocation& inv) {
  const RunConfig cfg = resolve_config(inv.common, true);
  if (inv.format != "bin" && inv.format != "csv") throw ConfigError("--format must be csv or bin for dsp output");
  const fs::path in = inv.positional.at(0);
  const fs::path out = inv.common.out;
  RunManifest man = start_manifest(inv, "dsp " + inv.dsp_op, cfg);
  add_inputs(man, in);
  const auto audio = load_wav(in);
  prepare_out(out);
  auto write_matrix = [&](const std::string& stem, const Tensor& t) {
    if (inv.format == "csv") io::write_file_atomic(out / (stem + ".csv"), csv_bytes(t));
    else io::write_file_atomic(out / (stem + ".cdmx"), matrix_bytes(t));
  };

  std::ostringstream report;
  report << std::setprecision(6);
  if (inv.dsp_op == "mulaw") {
    std::string codes;
    std::vector<double> decoded;
    double worst = 0.0;
    std::size_t clipped = 0;
    for (double x : audio.samples) {
      bool c = false;
      const auto code = dsp::mulaw_encode(x, &c);
      clipped += c;
      codes.push_back(static_cast<char>(code));
      decoded.push_back(dsp::mulaw_decode(code));
      worst = std::max(worst, std::abs(decoded.back() - x));
    }
    io::write_file_atomic(out / "codes.u8", codes);
    io::write_file_atomic(out / "decoded.wav", wav_bytes({decoded, audio.sample_rate}));
    report << "mulaw: " << audio.size() << " samples, max error " << worst << " (bound " << dsp::mulaw_error_bound()
           << "), clipped " << clipped;
  } else if (inv.dsp_op == "emph") {
    const auto pre = dsp::preemphasis(audio, cfg.dsp.emphasis);
    const auto back = dsp::deemphasis(pre, cfg.dsp.emphasis);
    double worst = 0.0;
    for (std::size_t i = 0; i < audio.size(); ++i) worst = std::max(worst, std::abs(back.samples[i] - audio.samples[i]));
    io::write_file_atomic(out / "emphasized.wav", wav_bytes(pre));
    io::write_file_atomic(out / "restored.wav", wav_bytes(back));
    report << std::setprecision(3) << "emph: coefficient " << cfg.dsp.emphasis << ", max round-trip error " << worst;
  } else if (inv.dsp_op == "agc") {
    const auto r = dsp::agc_limit(audio, cfg.dsp.agc);
    double peak_in = 0.0, peak_out = 0.0, min_gain = 1.0;
    for (double x : audio.samples) peak_in = std::max(peak_in, std::abs(x));
    for (double x : r.audio.samples) peak_out = std::max(peak_out, std::abs(x));
    for (double gval : r.gain) min_gain = std::min(min_gain, gval);
    io::write_file_atomic(out / "agc.wav", wav_bytes(r.audio));
    report << "agc: peak in " << peak_in << ", peak out " << peak_out << ", min gain " << min_gain;
  } else if (inv.dsp_op == "mel") {
    dsp::MelConfig mc = cfg.dsp.mel;
    mc.sample_rate = audio.sample_rate;
    const Tensor mel = dsp::melspectrogram(audio, mc);
    write_matrix("mel", mel);
    report << "mel: " << mel.rows() << " frames x " << mel.cols() << " channels";
  } else if (inv.dsp_op == "segments") {
    const auto offs = dsp::select_training_segments(audio, cfg.dsp.segment_length, cfg.dsp.silence, cfg.dsp.segment_stride);
    std::string csv = "offset\n";
    for (auto o : offs) csv += std::to_string(o) + "\n";
    io::write_file_atomic(out / "segments.csv", csv);
    report << "segments: " << offs.size() << " silence-anchored offsets of " << cfg.dsp.segment_length << " samples";
  } else {
    throw ConfigError("unknown dsp operation '" + inv.dsp_op + "'");
  }
  io::write_file_atomic(out / "report.txt", report.str() + "\n");
  write_manifest(man, out);
  std::cout << report.str() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

int dispatch(const std::vector<std::string>& args);

int cmd_replay(const std::string& manifest_path, const std::string& out_override) {
  const RunManifest m = read_manifest(manifest_path);
  std::vector<std::string> argv = m.argv;
  if (!out_override.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--out" && i + 1 < argv.size()) {
        argv[i + 1] = out_override;
        replaced = true;
      } else if (argv[i].rfind("--out=", 0) == 0) {
        argv[i] = "--out=" + out_override;
        replaced = true;
      }
    }
    if (!replaced) throw DataError("manifest argv has no --out to replace");
  }
  if (!argv.empty() && argv.front() == "replay") throw DataError("a manifest cannot replay a replay");
  return dispatch(argv);
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"cadence: controllable toy sequence-to-sequence synthesis"};
  app.require_subcommand(1);
  Invocation inv;
  inv.argv = args;

  auto common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", inv.common.config, "JSON run configuration");
    if (config_required) c->required();
    sub->add_option("--out", inv.common.out, "output directory")->required();
    sub->add_option("--seed", inv.common.seed, "overrides the config seed");
  };

  auto* gen = app.add_subcommand("gen", "generate the synthetic corpus");
  common(gen, true);

  auto* pros = app.add_subcommand("prosody", "extract prosody info and speaker statistics");
  common(pros, true);
  pros->add_option("input", inv.positional, "corpus directory or directory of wav files")->required()->expected(1);

  auto* train = app.add_subcommand("train", "train the model and the prosody predictor");
  common(train, true);
  train->add_option("--attention", inv.attention, "regular or augmented");
  train->add_option("inputs", inv.positional, "corpus directory and prosody directory")->required()->expected(2);

  auto* synth = app.add_subcommand("synth", "synthesize with prosody offsets");
  common(synth, true);
  synth->add_option("--pace", inv.pace, "pace offset(s) in [-1, 1]")->delimiter(',');
  synth->add_option("--pitch", inv.pitch, "pitch-span offset(s) in [-1, 1]")->delimiter(',');
  synth->add_option("--format", inv.format, "feature output: bin, csv or pgm");
  synth->add_option("inputs", inv.positional, "run directory and sentence (index, id or symbol string)")
      ->required()
      ->expected(2);

  auto* dsp_cmd = app.add_subcommand("dsp", "signal-processing utilities on a wav file");
  common(dsp_cmd, false);
  dsp_cmd->add_option("--format", inv.format, "matrix output: bin or csv");
  dsp_cmd->add_option("op", inv.dsp_op, "mulaw, emph, agc, mel or segments")
      ->required()
      ->check(CLI::IsMember({"mulaw", "emph", "agc", "mel", "segments"}));
  dsp_cmd->add_option("input", inv.positional, "wav file")->required()->expected(1);

  std::string manifest, replay_out;
  auto* replay = app.add_subcommand("replay", "re-run the command recorded in a manifest");
  replay->add_option("manifest", manifest, "manifest.json")->required();
  replay->add_option("--out", replay_out, "write into this directory instead");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }
  if (*gen) return cmd_gen(inv);
  if (*pros) return cmd_prosody(inv);
  if (*train) return cmd_train(inv);
  if (*synth) return cmd_synth(inv);
  if (*dsp_cmd) return cmd_dsp(inv);
  return cmd_replay(manifest, replay_out);
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return dispatch(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const DomainError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NonFiniteError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternalError;
  }
}
