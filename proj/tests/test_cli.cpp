#include <catch_amalgamated.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <random>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "cadence/cli.hpp"

using namespace cadence;
using namespace cadence::cli;

namespace {

const fs::path kBin = CADENCE_BIN;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cadence_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::vector<std::string>& args) {
  std::string cmd = kBin.string();
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

// Small but complete config: 40 utterances, 4 epochs.
fs::path small_config(const fs::path& dir) {
  Json j = config_to_json(default_config());
  j["corpus"]["utterances"] = 40;
  j["corpus"]["validation"] = 5;
  j["training"]["epochs"] = 4;
  j["predictor"]["epochs"] = 3;
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

void write_tone(const fs::path& p, std::size_t n, double amp) {
  std::vector<double> s(n);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (std::size_t i = 0; i < n; ++i) {
    const double env = (i > n / 3 && i < n / 2) ? 0.0 : 1.0;
    s[i] = std::clamp(env * amp * std::sin(2.0 * M_PI * 180.0 * i / 22050.0) + noise(rng), -1.0, 0.99);
  }
  std::ofstream os(p, std::ios::binary);
  dsp::write_wav(os, dsp::AudioBuffer(s, 22050.0));
}

// Tree hashes minus the manifest, which records the output directory.
std::map<std::string, std::string> outputs(const fs::path& dir) { return hash_tree(dir, {kManifestName}); }

ConfigError config_error_of(const Json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("config was accepted");
  return ConfigError("");
}

}  // namespace

TEST_CASE("shipped default config equals the built-in defaults") {
  const RunConfig c = load_config(CADENCE_DEFAULT_CONFIG);
  CHECK(config_to_json(c) == config_to_json(default_config()));
}

TEST_CASE("config round trip through JSON") {
  RunConfig c = default_config();
  c.set_seed(123);
  c.training.epochs = 3;
  const RunConfig d = parse_config(config_to_json(c));
  CHECK(config_to_json(d) == config_to_json(c));
  CHECK(d.corpus.seed == 123);
}

TEST_CASE("config errors name the offending field") {
  const Json base = config_to_json(default_config());

  Json missing = base;
  missing["training"].erase("epochs");
  CHECK_THAT(config_error_of(missing).what(), Catch::Matchers::ContainsSubstring("training.epochs"));

  Json unknown = base;
  unknown["model"]["hidden_size"] = 3;
  CHECK_THAT(config_error_of(unknown).what(), Catch::Matchers::ContainsSubstring("model.hidden_size"));

  Json wrong = base;
  wrong["corpus"]["alphabet"] = "twelve";
  CHECK_THAT(config_error_of(wrong).what(), Catch::Matchers::ContainsSubstring("corpus.alphabet"));

  Json mismatch = base;
  mismatch["model"]["alphabet"] = 10;
  CHECK_THROWS_AS(parse_config(mismatch), ConfigError);

  CHECK_THROWS_AS(parse_json_text("{\"seed\": ", "x", true), ConfigError);
}

TEST_CASE("git blob hashes") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("manifest JSON round trip") {
  RunManifest m{"gen", {"gen", "--out", "x"}, "c.json", 9, {{"c.json", "abc"}}, "x", {{"corpus.json", "def"}}};
  const RunManifest r = manifest_from_json(manifest_to_json(m));
  CHECK(manifest_to_json(r) == manifest_to_json(m));
}

TEST_CASE("corpus directory round trip") {
  const fs::path dir = scratch("corpus_rt");
  synth::CorpusConfig cc;
  cc.utterances = 12;
  cc.validation = 2;
  const auto corpus = synth::generate_corpus(cc);
  write_corpus(dir, corpus, cc);
  const Corpus back = read_corpus(dir);
  REQUIRE(back.utterances.size() == corpus.size());
  CHECK(back.validation == 2);
  CHECK(back.train_count() == 10);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(back.utterances[i].id == corpus[i].id);
    CHECK(back.utterances[i].symbols.to_string() == corpus[i].symbols.to_string());
    CHECK(back.utterances[i].durations == corpus[i].durations);
    CHECK(back.utterances[i].pace_factor == corpus[i].pace_factor);
    CHECK(back.utterances[i].features.storage() == corpus[i].features.storage());
  }
  CHECK_THROWS_AS(back.find("nope"), DataError);
}

TEST_CASE("PGM header dimensions") {
  const Tensor m = Tensor::matrix(2, 3, {0, 1, 2, 3, 4, 5});
  CHECK(to_pgm(m, false, true).rfind("P5\n3 2\n255\n", 0) == 0);
  CHECK(to_pgm(m, true, true).rfind("P5\n2 3\n255\n", 0) == 0);
  const std::string p = to_pgm(m, false, true);
  CHECK(static_cast<unsigned char>(p.back()) == 255);
  CHECK(static_cast<unsigned char>(p[p.size() - 6]) == 0);
}

TEST_CASE("CLI exit codes") {
  const fs::path dir = scratch("codes");
  CHECK(run({"frobnicate"}) == kConfigError);
  CHECK(run({"gen", "--out", (dir / "a").string()}) == kConfigError);
  CHECK(run({"gen", "--config", (dir / "missing.json").string(), "--out", (dir / "a").string()}) == kConfigError);
  CHECK(run({"prosody", "--config", CADENCE_DEFAULT_CONFIG, "--out", (dir / "p").string(), (dir / "nothing").string()}) ==
        kDataError);
  std::ofstream(dir / "bad.json") << "{\"seed\": 1}";
  CHECK(run({"gen", "--config", (dir / "bad.json").string(), "--out", (dir / "a").string()}) == kConfigError);
  std::ofstream(dir / "bad.wav") << "not a wav";
  CHECK(run({"dsp", "mel", (dir / "bad.wav").string(), "--out", (dir / "m").string()}) == kDataError);
}

TEST_CASE("pipeline: gen, prosody, train with resume, synth, replay") {
  const fs::path dir = scratch("pipeline");
  const fs::path cfg = small_config(dir);
  const std::string c = cfg.string();

  REQUIRE(run({"gen", "--config", c, "--out", (dir / "corpus").string()}) == kOk);
  REQUIRE(run({"gen", "--config", c, "--out", (dir / "corpus2").string()}) == kOk);
  CHECK(outputs(dir / "corpus") == outputs(dir / "corpus2"));
  CHECK(read_corpus(dir / "corpus").utterances.size() == 40);

  REQUIRE(run({"prosody", "--config", c, "--out", (dir / "pros").string(), (dir / "corpus").string()}) == kOk);
  const auto table = read_prosody_table(dir / "pros" / kProsodyTable);
  CHECK(table.size() == 40);
  CHECK(fs::exists(dir / "pros" / kSpeakerStats));

  const std::vector<std::string> train_args = {"train", "--config", c, "--attention", "augmented", "--out",
                                               (dir / "run").string(), (dir / "corpus").string(),
                                               (dir / "pros").string()};
  REQUIRE(run(train_args) == kOk);
  CHECK(fs::exists(dir / "run" / "checkpoint.bin"));
  CHECK(fs::exists(dir / "run" / "predictor.bin"));

  SECTION("killed training resumes to the same result") {
    const fs::path killed = dir / "killed";
    int fds[2];
    REQUIRE(::pipe(fds) == 0);
    const pid_t pid = ::fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
      ::dup2(fds[1], STDOUT_FILENO);
      ::close(fds[0]);
      ::close(fds[1]);
      std::vector<std::string> a = train_args;
      a[6] = killed.string();
      std::vector<char*> argv{const_cast<char*>(kBin.c_str())};
      for (auto& s : a) argv.push_back(s.data());
      argv.push_back(nullptr);
      ::execv(kBin.c_str(), argv.data());
      ::_exit(127);
    }
    ::close(fds[1]);
    std::string seen;
    char buf[256];
    while (seen.find("epoch 1 ") == std::string::npos) {
      const ssize_t k = ::read(fds[0], buf, sizeof buf);
      if (k <= 0) break;
      seen.append(buf, static_cast<std::size_t>(k));
    }
    ::kill(pid, SIGKILL);
    int status = 0;
    ::waitpid(pid, &status, 0);
    ::close(fds[0]);
    REQUIRE(seen.find("epoch 1 ") != std::string::npos);
    CHECK(WIFSIGNALED(status));
    CHECK_FALSE(fs::exists(killed / kManifestName));

    std::vector<std::string> a = train_args;
    a[6] = killed.string();
    REQUIRE(run(a) == kOk);
    CHECK(outputs(killed) == outputs(dir / "run"));
  }

  SECTION("a different run refuses an existing checkpoint") {
    std::vector<std::string> a = train_args;
    a[4] = "regular";
    CHECK(run(a) == kDataError);
  }

  SECTION("synth grid and replay") {
    const fs::path syn = dir / "syn";
    REQUIRE(run({"synth", "--config", c, "--out", syn.string(), "--pace", "-0.5,-0.25,0,0.25,0.5", "--pitch",
                 "-0.5,-0.25,0,0.25,0.5", "--format", "pgm", (dir / "run").string(), "36"}) == kOk);
    const std::size_t symbols = read_corpus(dir / "corpus").utterances[36].symbols.size();
    std::size_t grids = 0;
    for (const auto& e : fs::directory_iterator(syn)) {
      if (!e.is_directory()) continue;
      ++grids;
      const std::string csv = slurp(e.path() / "alignment.csv");
      const auto steps = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
      std::istringstream h(slurp(e.path() / "alignment.pgm"));
      std::string magic;
      std::size_t w = 0, rows = 0;
      h >> magic >> w >> rows;
      CHECK(magic == "P5");
      CHECK(rows == symbols);
      CHECK(w == steps);
      CHECK(fs::exists(e.path() / "features.pgm"));
    }
    CHECK(grids == 25);
    CHECK(fs::exists(syn / "summary.csv"));

    REQUIRE(run({"replay", (syn / kManifestName).string(), "--out", (dir / "syn_replay").string()}) == kOk);
    CHECK(outputs(dir / "syn_replay") == outputs(syn));

    CHECK(run({"synth", "--config", c, "--out", (dir / "bad").string(), "--pace", "1.5", (dir / "run").string(),
               "0"}) == kConfigError);
  }

  SECTION("replayed train is byte-identical") {
    REQUIRE(run({"replay", (dir / "run" / kManifestName).string(), "--out", (dir / "run_replay").string()}) == kOk);
    CHECK(outputs(dir / "run_replay") == outputs(dir / "run"));
  }
}

TEST_CASE("dsp subcommands") {
  const fs::path dir = scratch("dsp");
  const fs::path wav = dir / "tone.wav";
  write_tone(wav, 21248, 0.5);
  std::ifstream is(wav, std::ios::binary);
  const dsp::AudioBuffer audio = dsp::read_wav(is);

  REQUIRE(run({"dsp", "mel", wav.string(), "--out", (dir / "mel").string()}) == kOk);
  const Tensor mel = matrix_from_file(dir / "mel" / "mel.cdmx");
  CHECK(mel.rows() == dsp::melspectrogram(audio).rows());
  CHECK(mel.cols() == 80);

  REQUIRE(run({"dsp", "agc", wav.string(), "--out", (dir / "agc").string()}) == kOk);
  CHECK(slurp(dir / "agc" / "agc.wav") == slurp(wav));

  REQUIRE(run({"dsp", "emph", wav.string(), "--out", (dir / "emph").string()}) == kOk);
  const std::string report = slurp(dir / "emph" / "report.txt");
  const auto at = report.find("error ");
  REQUIRE(at != std::string::npos);
  CHECK(std::stod(report.substr(at + 6)) < 1e-10);

  REQUIRE(run({"dsp", "mulaw", wav.string(), "--out", (dir / "mulaw").string()}) == kOk);
  CHECK(fs::file_size(dir / "mulaw" / "codes.u8") == audio.size());

  REQUIRE(run({"dsp", "segments", wav.string(), "--out", (dir / "seg").string()}) == kOk);
  REQUIRE(run({"replay", (dir / "seg" / kManifestName).string(), "--out", (dir / "seg2").string()}) == kOk);
  CHECK(outputs(dir / "seg2") == outputs(dir / "seg"));
}
