#include "recap/gating.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "recap/errors.hpp"

namespace recap {

namespace {

bool is_strip_punct(char c) {
  static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return punct.find(c) != std::string::npos;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

const std::set<std::string>& CharacterLexicon::default_pronouns() {
  static const std::set<std::string> p = {"he",  "she", "they", "him", "her",
                                          "his", "hers", "their", "them"};
  return p;
}

CharacterLexicon CharacterLexicon::from_names(const std::vector<std::string>& names) {
  CharacterLexicon lex;
  for (const std::string& n : names) lex.names.insert(lower(n));
  lex.pronouns = default_pronouns();
  lex.validate();
  return lex;
}

CharacterLexicon CharacterLexicon::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open lexicon file: " + path);
  CharacterLexicon lex;
  std::string line;
  bool in_pronouns = false;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line == "[pronouns]") {
      in_pronouns = true;
      continue;
    }
    (in_pronouns ? lex.pronouns : lex.names).insert(lower(line));
  }
  if (lex.pronouns.empty()) lex.pronouns = default_pronouns();
  lex.validate();
  return lex;
}

void CharacterLexicon::validate() const {
  for (const std::string& n : names) {
    if (pronouns.count(n))
      throw ValidationError("lexicon: name collides with pronoun: " + n);
    std::vector<std::string> toks = tokenize(n);
    if (toks.size() != 1 || toks[0] != n)
      throw ValidationError("lexicon: name is not a single clean token: " + n);
  }
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      size_t a = i, b = j;
      while (a < b && is_strip_punct(text[a])) ++a;
      while (b > a && is_strip_punct(text[b - 1])) --b;
      if (b > a) out.push_back(lower(text.substr(a, b - a)));
    }
    i = j;
  }
  return out;
}

GuidanceMask compute_mask(const std::string& text, const CharacterLexicon& lexicon,
                          int frame_index) {
  if (lexicon.names.empty()) throw ValidationError("compute_mask: empty lexicon");
  GuidanceMask m;
  m.frame_index = frame_index;
  m.value = 1;
  for (const std::string& tok : tokenize(text)) {
    if (lexicon.names.count(tok)) {
      m.value = 0;
      break;
    }
  }
  return m;
}

GuidanceMask override_mask(GuidanceMask mask, int value) {
  if (value != 0 && value != 1) throw ValidationError("override_mask: value must be 0 or 1");
  mask.value = value;
  mask.manual = true;
  return mask;
}

}  // namespace recap
