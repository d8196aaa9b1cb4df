#pragma once

#include <set>
#include <string>
#include <vector>

namespace recap {

// Names and pronouns used for text-conditioned gating. Matching is
// case-insensitive whole-token; names must be single tokens.
struct CharacterLexicon {
  std::set<std::string> names;     // lowercased
  std::set<std::string> pronouns;  // lowercased

  static const std::set<std::string>& default_pronouns();
  static CharacterLexicon from_names(const std::vector<std::string>& names);
  static CharacterLexicon from_file(const std::string& path);
  void validate() const;
};

struct GuidanceMask {
  int value = 0;        // 1 iff no character name occurs in the frame text
  int frame_index = 0;
  bool manual = false;  // set when the value was forced by override_mask
};

// Lowercased whitespace tokens with leading/trailing ASCII punctuation
// stripped. Deterministic; empty text gives an empty list.
std::vector<std::string> tokenize(const std::string& text);

GuidanceMask compute_mask(const std::string& text, const CharacterLexicon& lexicon,
                          int frame_index = 0);

GuidanceMask override_mask(GuidanceMask mask, int value);

}  // namespace recap
