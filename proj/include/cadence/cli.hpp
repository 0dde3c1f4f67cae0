#pragma once

// Shared plumbing for the command-line tool: strict JSON run configs, the
// on-disk corpus and prosody formats, content hashes and run manifests.

#include <openssl/evp.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadence/dsp.hpp"
#include "cadence/error.hpp"
#include "cadence/io.hpp"
#include "cadence/prosody.hpp"
#include "cadence/seq2seq.hpp"
#include "cadence/synthdata.hpp"

namespace cadence::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kInternalError = 4 };

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct DspConfig {
  double emphasis = dsp::kDefaultEmphasis;
  dsp::MelConfig mel;
  dsp::AgcConfig agc;
  dsp::SilenceConfig silence;
  std::size_t segment_length = 8192;
  std::size_t segment_stride = 256;
  dsp::PitchConfig pitch;
};

struct RunConfig {
  std::uint64_t seed = 7;
  synth::CorpusConfig corpus;
  seq2seq::ModelConfig model;
  seq2seq::TrainingConfig training;
  prosody::PredictorConfig predictor;
  seq2seq::SynthesisConfig synthesis;
  DspConfig dsp;

  /// The one seed feeds every random stream.
  void set_seed(std::uint64_t s) {
    seed = s;
    corpus.seed = model.seed = training.seed = predictor.seed = s;
  }

  void validate() const {
    corpus.validate();
    model.validate();
    training.validate();
    if (model.alphabet != corpus.alphabet) throw ConfigError("model.alphabet must equal corpus.alphabet");
    if (model.frame_width != synth::kFeatureWidth) {
      throw ConfigError("model.frame_width must be " + std::to_string(synth::kFeatureWidth));
    }
    if (predictor.layers == 0 || predictor.hidden == 0) throw ConfigError("predictor.layers and predictor.hidden must be positive");
    if (predictor.epochs == 0) throw ConfigError("predictor.epochs must be positive");
    if (!(predictor.learning_rate > 0.0)) throw ConfigError("predictor.learning_rate must be positive");
    if (!(synthesis.stop_threshold > 0.0 && synthesis.stop_threshold < 1.0)) {
      throw ConfigError("synthesis.stop_threshold must lie in (0, 1)");
    }
    if (synthesis.max_length_factor == 0) throw ConfigError("synthesis.max_length_factor must be positive");
    if (!(dsp.emphasis > -1.0 && dsp.emphasis < 1.0)) throw ConfigError("dsp.emphasis must lie in (-1, 1)");
    try {
      dsp.mel.validate();
    } catch (const DomainError& e) {
      throw ConfigError(std::string("dsp.mel: ") + e.what());
    }
    if (dsp.agc.block == 0) throw ConfigError("dsp.agc.block must be positive");
    if (dsp.silence.frame == 0) throw ConfigError("dsp.silence.frame must be positive");
    if (dsp.segment_length == 0 || dsp.segment_stride == 0) throw ConfigError("dsp segment length and stride must be positive");
    if (dsp.pitch.window == 0 || dsp.pitch.hop == 0) throw ConfigError("dsp.pitch.window and dsp.pitch.hop must be positive");
    if (!(dsp.pitch.min_hz > 0.0 && dsp.pitch.max_hz > dsp.pitch.min_hz)) {
      throw ConfigError("dsp.pitch needs 0 < min_hz < max_hz");
    }
  }
};

namespace detail {

/// Walks one JSON object; every key must be read exactly once.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  Section child(const std::string& key) {
    return Section(take(key), name(key));
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    const Json& v = take(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name(key) + " must be true or false");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigError(name(key) + " must be a non-negative integer");
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(name(key) + " must be a string");
      out = v.get<std::string>();
    }
  }

  template <typename T, std::size_t N>
  void get(const std::string& key, std::array<T, N>& out) {
    const Json& v = take(key);
    if (!v.is_array() || v.size() != N) throw ConfigError(name(key) + " must be an array of " + std::to_string(N) + " numbers");
    for (std::size_t i = 0; i < N; ++i) {
      if (!v[i].is_number()) throw ConfigError(name(key) + " must be an array of " + std::to_string(N) + " numbers");
      out[i] = v[i].get<T>();
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config field " + name(k));
    }
  }

 private:
  const Json& take(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) throw ConfigError("missing config field " + name(key));
    seen_.insert(key);
    return *it;
  }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline RunConfig parse_config(const Json& j) {
  RunConfig c;
  detail::Section root(j, "");
  std::uint64_t seed = 0;
  root.get("seed", seed);

  auto co = root.child("corpus");
  auto& k = c.corpus;
  co.get("alphabet", k.alphabet);
  co.get("utterances", k.utterances);
  co.get("validation", k.validation);
  co.get("min_phones", k.min_phones);
  co.get("max_phones", k.max_phones);
  co.get("max_word_phones", k.max_word_phones);
  co.get("base_min", k.base_min);
  co.get("base_max", k.base_max);
  co.get("mean_base", k.mean_base);
  co.get("silence_frames", k.silence_frames);
  co.get("word_break_frames", k.word_break_frames);
  co.get("pace_sigma", k.pace_sigma);
  co.get("phrase_pace_bias", k.phrase_pace_bias);
  co.get("pitch_base", k.pitch_base);
  co.get("pitch_sigma", k.pitch_sigma);
  co.get("frame_period", k.frame_period);
  co.finish();

  auto mo = root.child("model");
  auto& m = c.model;
  mo.get("alphabet", m.alphabet);
  mo.get("embedding", m.embedding);
  mo.get("encoder_kernel", m.encoder_kernel);
  mo.get("encoder_hidden", m.encoder_hidden);
  mo.get("decoder_hidden", m.decoder_hidden);
  mo.get("prenet_hidden", m.prenet_hidden);
  mo.get("prenet_out", m.prenet_out);
  mo.get("attention_dim", m.attention_dim);
  mo.get("location_filters", m.location_filters);
  mo.get("location_kernel", m.location_kernel);
  mo.get("frame_width", m.frame_width);
  mo.get("frames_per_step", m.frames_per_step);
  mo.get("postnet_channels", m.postnet_channels);
  mo.get("postnet_kernel", m.postnet_kernel);
  mo.get("double_feed", m.double_feed);
  mo.get("prenet_dropout", m.prenet_dropout);
  mo.finish();

  auto tr = root.child("training");
  auto& t = c.training;
  std::string optimizer;
  tr.get("epochs", t.epochs);
  tr.get("batch_size", t.batch_size);
  tr.get("optimizer", optimizer);
  tr.get("learning_rate", t.optimizer.learning_rate);
  tr.get("momentum", t.optimizer.momentum);
  tr.get("beta2", t.optimizer.beta2);
  tr.get("epsilon", t.optimizer.epsilon);
  tr.get("clip_norm", t.clip_norm);
  tr.get("prosody_zero_epochs", t.prosody_zero_epochs);
  tr.get("stop_pad", t.stop_pad);
  tr.get("guide_weight", t.guide_weight);
  tr.get("guide_width", t.guide_width);
  tr.finish();
  try {
    t.optimizer.kind = nn::parse_optimizer(optimizer);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("training.optimizer: ") + e.what());
  }

  auto pr = root.child("predictor");
  pr.get("hidden", c.predictor.hidden);
  pr.get("layers", c.predictor.layers);
  pr.get("epochs", c.predictor.epochs);
  pr.get("batch_size", c.predictor.batch_size);
  pr.get("learning_rate", c.predictor.learning_rate);
  pr.finish();

  auto sy = root.child("synthesis");
  sy.get("stop_threshold", c.synthesis.stop_threshold);
  sy.get("max_length_factor", c.synthesis.max_length_factor);
  sy.finish();

  auto ds = root.child("dsp");
  ds.get("emphasis", c.dsp.emphasis);
  auto mel = ds.child("mel");
  mel.get("sample_rate", c.dsp.mel.sample_rate);
  mel.get("hop", c.dsp.mel.hop);
  mel.get("window", c.dsp.mel.window);
  mel.get("channels", c.dsp.mel.channels);
  mel.get("log_floor", c.dsp.mel.log_floor);
  mel.finish();
  auto agc = ds.child("agc");
  agc.get("lookahead", c.dsp.agc.lookahead);
  agc.get("block", c.dsp.agc.block);
  agc.finish();
  auto sil = ds.child("silence");
  sil.get("frame", c.dsp.silence.frame);
  sil.get("rel_db", c.dsp.silence.rel_db);
  sil.get("min_run_seconds", c.dsp.silence.min_run_seconds);
  sil.finish();
  ds.get("segment_length", c.dsp.segment_length);
  ds.get("segment_stride", c.dsp.segment_stride);
  auto pitch = ds.child("pitch");
  pitch.get("window", c.dsp.pitch.window);
  pitch.get("hop", c.dsp.pitch.hop);
  pitch.get("min_hz", c.dsp.pitch.min_hz);
  pitch.get("max_hz", c.dsp.pitch.max_hz);
  pitch.get("voicing", c.dsp.pitch.voicing);
  pitch.finish();
  ds.finish();
  root.finish();

  c.set_seed(seed);
  c.validate();
  return c;
}

inline Json config_to_json(const RunConfig& c) {
  const auto& k = c.corpus;
  const auto& m = c.model;
  const auto& t = c.training;
  Json j;
  j["seed"] = c.seed;
  j["corpus"] = {{"alphabet", k.alphabet},
                 {"utterances", k.utterances},
                 {"validation", k.validation},
                 {"min_phones", k.min_phones},
                 {"max_phones", k.max_phones},
                 {"max_word_phones", k.max_word_phones},
                 {"base_min", k.base_min},
                 {"base_max", k.base_max},
                 {"mean_base", k.mean_base},
                 {"silence_frames", k.silence_frames},
                 {"word_break_frames", k.word_break_frames},
                 {"pace_sigma", k.pace_sigma},
                 {"phrase_pace_bias", k.phrase_pace_bias},
                 {"pitch_base", k.pitch_base},
                 {"pitch_sigma", k.pitch_sigma},
                 {"frame_period", k.frame_period}};
  j["model"] = {{"alphabet", m.alphabet},
                {"embedding", m.embedding},
                {"encoder_kernel", m.encoder_kernel},
                {"encoder_hidden", m.encoder_hidden},
                {"decoder_hidden", m.decoder_hidden},
                {"prenet_hidden", m.prenet_hidden},
                {"prenet_out", m.prenet_out},
                {"attention_dim", m.attention_dim},
                {"location_filters", m.location_filters},
                {"location_kernel", m.location_kernel},
                {"frame_width", m.frame_width},
                {"frames_per_step", m.frames_per_step},
                {"postnet_channels", m.postnet_channels},
                {"postnet_kernel", m.postnet_kernel},
                {"double_feed", m.double_feed},
                {"prenet_dropout", m.prenet_dropout}};
  j["training"] = {{"epochs", t.epochs},
                   {"batch_size", t.batch_size},
                   {"optimizer", t.optimizer.kind == nn::OptimizerKind::adam ? "adam" : "momentum"},
                   {"learning_rate", t.optimizer.learning_rate},
                   {"momentum", t.optimizer.momentum},
                   {"beta2", t.optimizer.beta2},
                   {"epsilon", t.optimizer.epsilon},
                   {"clip_norm", t.clip_norm},
                   {"prosody_zero_epochs", t.prosody_zero_epochs},
                   {"stop_pad", t.stop_pad},
                   {"guide_weight", t.guide_weight},
                   {"guide_width", t.guide_width}};
  j["predictor"] = {{"hidden", c.predictor.hidden},
                    {"layers", c.predictor.layers},
                    {"epochs", c.predictor.epochs},
                    {"batch_size", c.predictor.batch_size},
                    {"learning_rate", c.predictor.learning_rate}};
  j["synthesis"] = {{"stop_threshold", c.synthesis.stop_threshold},
                    {"max_length_factor", c.synthesis.max_length_factor}};
  const auto& d = c.dsp;
  j["dsp"] = {{"emphasis", d.emphasis},
              {"mel",
               {{"sample_rate", d.mel.sample_rate},
                {"hop", d.mel.hop},
                {"window", d.mel.window},
                {"channels", d.mel.channels},
                {"log_floor", d.mel.log_floor}}},
              {"agc", {{"lookahead", d.agc.lookahead}, {"block", d.agc.block}}},
              {"silence",
               {{"frame", d.silence.frame}, {"rel_db", d.silence.rel_db}, {"min_run_seconds", d.silence.min_run_seconds}}},
              {"segment_length", d.segment_length},
              {"segment_stride", d.segment_stride},
              {"pitch",
               {{"window", d.pitch.window},
                {"hop", d.pitch.hop},
                {"min_hz", d.pitch.min_hz},
                {"max_hz", d.pitch.max_hz},
                {"voicing", d.pitch.voicing}}}};
  return j;
}

inline RunConfig default_config() {
  RunConfig c;
  c.set_seed(c.seed);
  return c;
}

inline Json parse_json_text(const std::string& text, const std::string& what, bool config) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::string msg = what + ": " + e.what();
    if (config) throw ConfigError(msg);
    throw DataError(msg);
  }
}

inline RunConfig load_config(const fs::path& p) {
  std::string text;
  try {
    text = io::read_file(p);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(parse_json_text(text, p.string(), true));
}

// ---------------------------------------------------------------------------
// Hashes and manifests
// ---------------------------------------------------------------------------

/// SHA-1 of "blob <size>\0<bytes>", as git names file contents.
inline std::string git_blob_sha1(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("sha1: cannot allocate digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string hash_file(const fs::path& p) { return git_blob_sha1(io::read_file(p)); }

/// Hashes every regular file under `dir` (or the file itself), keyed by path
/// relative to `dir`, in sorted order.
inline std::map<std::string, std::string> hash_tree(const fs::path& dir, const std::set<std::string>& skip = {}) {
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(dir)) {
    out[dir.filename().string()] = hash_file(dir);
    return out;
  }
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (skip.count(rel)) continue;
    out[rel] = hash_file(e.path());
  }
  return out;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  // after the program name
  std::string config_path;        // empty when built-in defaults were used
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;  // path -> content hash
  std::string output_dir;
  std::map<std::string, std::string> outputs;  // relative path -> content hash
};

inline constexpr const char* kManifestName = "manifest.json";

inline Json manifest_to_json(const RunManifest& m) {
  Json j;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["config"] = m.config_path;
  j["seed"] = m.seed;
  j["inputs"] = Json::object();
  for (const auto& [k, v] : m.inputs) j["inputs"][k] = v;
  j["output_dir"] = m.output_dir;
  j["outputs"] = Json::object();
  for (const auto& [k, v] : m.outputs) j["outputs"][k] = v;
  return j;
}

inline RunManifest manifest_from_json(const Json& j) {
  try {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.config_path = j.at("config").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("inputs").items()) m.inputs[k] = v.get<std::string>();
    m.output_dir = j.at("output_dir").get<std::string>();
    for (const auto& [k, v] : j.at("outputs").items()) m.outputs[k] = v.get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
}

/// Hashes the outputs (everything in `out` but the manifest) and writes it.
inline void write_manifest(RunManifest m, const fs::path& out) {
  m.outputs = hash_tree(out, {kManifestName});
  io::write_file_atomic(out / kManifestName, manifest_to_json(m).dump(2) + "\n");
}

inline RunManifest read_manifest(const fs::path& p) {
  return manifest_from_json(parse_json_text(io::read_file(p), p.string(), false));
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

inline constexpr const char* kCorpusIndex = "corpus.json";

inline std::string matrix_bytes(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  io::write_matrix(os, t);
  return os.str();
}

inline Tensor matrix_from_file(const fs::path& p) {
  std::istringstream is(io::read_file(p), std::ios::binary);
  return io::read_matrix(is);
}

/// corpus.json (one record per utterance) plus features/<id>.cdmx.
inline void write_corpus(const fs::path& dir, const std::vector<synth::SyntheticUtterance>& corpus,
                         const synth::CorpusConfig& cfg) {
  fs::create_directories(dir / "features");
  Json j;
  j["alphabet"] = cfg.alphabet;
  j["frame_period"] = cfg.frame_period;
  j["validation"] = cfg.validation;
  j["utterances"] = Json::array();
  for (const auto& u : corpus) {
    const std::string rel = "features/" + u.id + ".cdmx";
    io::write_file_atomic(dir / rel, matrix_bytes(u.features));
    j["utterances"].push_back({{"id", u.id},
                               {"symbols", u.symbols.to_string()},
                               {"durations", u.durations},
                               {"pace_factor", u.pace_factor},
                               {"pitch_factor", u.pitch_factor},
                               {"features", rel}});
  }
  io::write_file_atomic(dir / kCorpusIndex, j.dump(2) + "\n");
}

struct Corpus {
  std::size_t alphabet = 0;
  double frame_period = 0.0;
  std::size_t validation = 0;
  std::vector<synth::SyntheticUtterance> utterances;

  std::size_t train_count() const { return utterances.size() - validation; }

  const synth::SyntheticUtterance& find(const std::string& id) const {
    for (const auto& u : utterances) {
      if (u.id == id) return u;
    }
    throw DataError("corpus has no utterance '" + id + "'");
  }
};

inline Corpus read_corpus(const fs::path& dir) {
  const Json j = parse_json_text(io::read_file(dir / kCorpusIndex), (dir / kCorpusIndex).string(), false);
  Corpus c;
  try {
    c.alphabet = j.at("alphabet").get<std::size_t>();
    c.frame_period = j.at("frame_period").get<double>();
    c.validation = j.at("validation").get<std::size_t>();
    for (const auto& r : j.at("utterances")) {
      synth::SyntheticUtterance u;
      u.id = r.at("id").get<std::string>();
      u.symbols = SymbolSequence::parse(r.at("symbols").get<std::string>(), c.alphabet);
      u.durations = r.at("durations").get<std::vector<std::size_t>>();
      u.pace_factor = r.at("pace_factor").get<double>();
      u.pitch_factor = r.at("pitch_factor").get<double>();
      u.features = matrix_from_file(dir / r.at("features").get<std::string>());
      if (u.durations.size() != u.symbols.size()) throw DataError("utterance " + u.id + ": one duration per symbol expected");
      if (u.features.rank() != 2 || u.features.rows() != u.frames() || u.features.cols() != synth::kFeatureWidth) {
        throw DataError("utterance " + u.id + ": feature matrix does not match its durations");
      }
      c.utterances.push_back(std::move(u));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corpus index: ") + e.what());
  } catch (const DomainError& e) {
    throw DataError(std::string("corpus index: ") + e.what());
  }
  if (c.utterances.empty() || c.validation >= c.utterances.size()) {
    throw DataError("corpus index: need more utterances than the validation count");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Prosody table
// ---------------------------------------------------------------------------

inline constexpr const char* kProsodyTable = "prosody.csv";
inline constexpr const char* kSpeakerStats = "speaker_stats.json";

struct ProsodyTableRow {
  std::string id;
  std::optional<prosody::NormalizedProsody> normalized;
};

inline std::vector<ProsodyTableRow> read_prosody_table(const fs::path& p) {
  std::istringstream in(io::read_file(p));
  std::string line;
  if (!std::getline(in, line) || line != "id,pace,pitch_span,norm_pace,norm_pitch_span,flag") {
    throw DataError(p.string() + ": unexpected header");
  }
  std::vector<ProsodyTableRow> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw DataError(p.string() + ": expected 6 columns in '" + line + "'");
    ProsodyTableRow r{f[0], std::nullopt};
    if (f[5].empty()) {
      try {
        r.normalized = prosody::NormalizedProsody{std::stod(f[3]), std::stod(f[4])};
      } catch (const std::exception&) {
        throw DataError(p.string() + ": bad number in '" + line + "'");
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// Binary PGM, one row per entry of the first axis when `transpose` is false.
inline std::string to_pgm(const Tensor& m, bool transpose, bool scale_to_range) {
  const std::size_t rows = transpose ? m.cols() : m.rows(), cols = transpose ? m.rows() : m.cols();
  double lo = 0.0, hi = 1.0;
  if (scale_to_range && m.size() > 0) {
    lo = *std::min_element(m.values().begin(), m.values().end());
    hi = *std::max_element(m.values().begin(), m.values().end());
    if (hi == lo) hi = lo + 1.0;
  }
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = transpose ? m(c, r) : m(r, c);
      const double u = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u))));
    }
  }
  return out;
}

inline std::string csv_bytes(const Tensor& t) {
  std::ostringstream os;
  io::write_csv(os, t);
  return os.str();
}

/// T x N matrix of an alignment trace.
inline Tensor alignment_tensor(const align::AlignmentMatrix& a) {
  Tensor t({a.steps(), a.positions()}, 0.0);
  for (std::size_t s = 0; s < a.steps(); ++s)
    for (std::size_t n = 0; n < a.positions(); ++n) t(s, n) = a[s][n];
  return t;
}

}  // namespace cadence::cli
