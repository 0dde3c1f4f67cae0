#pragma once

// Symbolic model input: phone ids with lexical stress, word-break and silence
// symbols, and an utterance-level phrase type.
//
// Text form: whitespace-separated tokens, e.g. "sil p3:1 p7:0 | p2:2 sil ?".
//   pK:S  phone K with stress S (1 primary, 2 secondary, 0 unstressed)
//   sil   silence          |  word break
// A final ".", "?", "!" or "~" gives the phrase type (affirmative,
// interrogative, exclamatory, other) and is required.

#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "cadence/error.hpp"

namespace cadence {

enum class Stress { primary = 0, secondary = 1, unstressed = 2 };
enum class PhraseType { affirmative = 0, interrogative = 1, exclamatory = 2, other = 3 };

inline constexpr std::size_t kStressCount = 3;
inline constexpr std::size_t kPhraseTypeCount = 4;

struct Symbol {
  std::size_t id = 0;
  Stress stress = Stress::unstressed;
  bool silence = false;
  bool word_break = false;

  friend bool operator==(const Symbol&, const Symbol&) = default;
};

/// Phones use ids [0, alphabet); silence is `alphabet`, word break `alphabet + 1`.
class SymbolSequence {
 public:
  SymbolSequence() = default;
  SymbolSequence(std::vector<Symbol> symbols, PhraseType phrase, std::size_t alphabet)
      : symbols_(std::move(symbols)), phrase_(phrase), alphabet_(alphabet) {
    validate();
  }

  static std::size_t vocabulary(std::size_t alphabet) { return alphabet + 2; }
  static Symbol phone(std::size_t id, Stress s) { return {id, s, false, false}; }
  static Symbol silence(std::size_t alphabet) { return {alphabet, Stress::unstressed, true, false}; }
  static Symbol word_break(std::size_t alphabet) { return {alphabet + 1, Stress::unstressed, false, true}; }

  std::size_t size() const { return symbols_.size(); }
  const Symbol& operator[](std::size_t i) const { return symbols_[i]; }
  const std::vector<Symbol>& symbols() const { return symbols_; }
  PhraseType phrase() const { return phrase_; }
  std::size_t alphabet() const { return alphabet_; }

  /// Silence and word-break positions, excluded from pace.
  std::vector<bool> pause_flags() const {
    std::vector<bool> f(symbols_.size());
    for (std::size_t i = 0; i < symbols_.size(); ++i) f[i] = symbols_[i].silence || symbols_[i].word_break;
    return f;
  }

  std::string to_string() const {
    std::string out;
    for (const auto& s : symbols_) {
      if (s.silence) out += "sil ";
      else if (s.word_break) out += "| ";
      else {
        const char digit = s.stress == Stress::primary ? '1' : s.stress == Stress::secondary ? '2' : '0';
        out += "p" + std::to_string(s.id) + ":" + digit + " ";
      }
    }
    static const char* marks[] = {".", "?", "!", "~"};
    return out + marks[static_cast<int>(phrase_)];
  }

  static SymbolSequence parse(const std::string& text, std::size_t alphabet) {
    std::istringstream in(text);
    std::vector<std::string> tokens;
    for (std::string t; in >> t;) tokens.push_back(t);
    if (tokens.size() < 2) throw DomainError("symbol string needs at least one symbol and a phrase mark");
    PhraseType phrase;
    const std::string& mark = tokens.back();
    if (mark == ".") phrase = PhraseType::affirmative;
    else if (mark == "?") phrase = PhraseType::interrogative;
    else if (mark == "!") phrase = PhraseType::exclamatory;
    else if (mark == "~") phrase = PhraseType::other;
    else throw DomainError("symbol string must end with a phrase mark (. ? ! ~), got '" + mark + "'");
    tokens.pop_back();

    std::vector<Symbol> out;
    for (const auto& t : tokens) {
      if (t == "sil") {
        out.push_back(silence(alphabet));
      } else if (t == "|") {
        out.push_back(word_break(alphabet));
      } else {
        const auto colon = t.find(':');
        if (t.size() < 4 || t[0] != 'p' || colon == std::string::npos || colon + 2 != t.size()) {
          throw DomainError("bad symbol token '" + t + "'");
        }
        std::size_t id = 0;
        try {
          std::size_t used = 0;
          id = std::stoul(t.substr(1, colon - 1), &used);
          if (used != colon - 1) throw DomainError("");
        } catch (const std::exception&) {
          throw DomainError("bad phone id in '" + t + "'");
        }
        Stress s;
        switch (t[colon + 1]) {
          case '1': s = Stress::primary; break;
          case '2': s = Stress::secondary; break;
          case '0': s = Stress::unstressed; break;
          default: throw DomainError("bad stress digit in '" + t + "'");
        }
        out.push_back(phone(id, s));
      }
    }
    return SymbolSequence(std::move(out), phrase, alphabet);
  }

 private:
  void validate() const {
    if (symbols_.empty()) throw DomainError("symbol sequence must not be empty");
    if (alphabet_ == 0) throw DomainError("alphabet must not be empty");
    for (const auto& s : symbols_) {
      if (s.silence && s.word_break) throw DomainError("a symbol cannot be both silence and word break");
      const std::size_t expect = s.silence ? alphabet_ : s.word_break ? alphabet_ + 1 : s.id;
      if (s.id != expect || s.id >= vocabulary(alphabet_) || (!s.silence && !s.word_break && s.id >= alphabet_)) {
        throw DomainError("symbol id " + std::to_string(s.id) + " outside the vocabulary");
      }
    }
  }

  std::vector<Symbol> symbols_;
  PhraseType phrase_ = PhraseType::affirmative;
  std::size_t alphabet_ = 0;
};

}  // namespace cadence
