#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "recap/gating.hpp"
#include "recap/png_io.hpp"
#include "recap/tensor.hpp"

namespace recap {

enum class Gender { male, female, neuter };
enum class Glyph { circle, square, triangle, cross, ring };

std::string to_string(Gender g);
std::string to_string(Glyph g);
Gender gender_from_string(const std::string& s);
Glyph glyph_from_string(const std::string& s);

struct CharacterSpec {
  std::string name;             // display form, e.g. "Ada"; single token
  Gender gender = Gender::neuter;
  Glyph glyph = Glyph::circle;
  std::array<uint8_t, 3> color{};  // float view is value/255
};

struct StoryFrame {
  int index = 0;
  ImageU8 image;
  std::string raw_text;
  std::string ref_text;
  std::vector<std::string> mentioned;  // display names, text order
  int mask = 0;                        // stored guidance mask (Eq. value)
  std::string background;             // palette label
};

struct Story {
  std::string id;
  std::vector<StoryFrame> frames;
  std::vector<CharacterSpec> roster;  // characters active in this story
};

struct TrainingTriplet {
  Tensor current_image;                  // (3,H,W) in [0,1]
  std::optional<Tensor> previous_image;  // absent iff t == 0
  std::string text;                      // ref_text of frame t
  int mask = 0;
  std::string story_id;
  int t = 0;
};

struct CorpusConfig {
  int image_size = 32;
  int patch_size = 2;  // token patch; image_size must divide evenly
  int roster_size = 4;
  int stories = 50;
  int frames_per_story = 4;  // must lie in [2, 8]
  int background_palette = 6;
  bool group_pronouns = true;  // joint "they" for co-mentioned pairs
  double pair_story_prob = 0.3;
  double switch_story_prob = 0.25;
  std::vector<std::string> intro_templates;   // filled with defaults if empty
  std::vector<std::string> action_templates;
  std::vector<std::string> pair_intro_templates;
  std::vector<std::string> pair_action_templates;

  void fill_default_templates();
  void validate() const;
};

struct CorpusHandle {
  std::string path;
};

// The full character pool and background palette the generator draws from.
const std::vector<CharacterSpec>& character_pool();
const std::vector<std::pair<std::string, std::array<uint8_t, 3>>>& background_pool();

// Writes manifest.json, stories/<id>.json and frames/<id>_<t>.png under
// out_dir. Identical (config, seed) produce bit-identical bytes.
CorpusHandle generate_corpus(const CorpusConfig& config, uint64_t seed,
                             const std::string& out_dir);

// Fills ref_text for every frame: mentions repeated from the previous frame
// become pronouns chosen by gender and number. Frame 0 is never modified.
Story apply_referential_protocol(const Story& story, const CharacterLexicon& lexicon,
                                 bool group_pronouns);

// Inverse of the protocol given the stored antecedents; used by the
// round-trip invariant.
std::string invert_referential(const std::string& ref_text,
                               const std::vector<std::string>& mentioned,
                               const std::vector<std::string>& prev_mentioned,
                               const std::vector<CharacterSpec>& roster);

// Deterministic rendering of one frame (background fill + mentioned glyphs
// at the supplied top-left positions).
ImageU8 render_frame(int image_size, const std::array<uint8_t, 3>& bg_color,
                     const std::vector<CharacterSpec>& chars,
                     const std::vector<std::pair<int, int>>& positions);

// 7x7 boolean stencil for a glyph shape.
std::vector<std::pair<int, int>> glyph_stencil(Glyph g);

struct CorpusData {
  CorpusConfig config;
  uint64_t seed = 0;
  std::vector<Story> stories;

  CharacterLexicon lexicon() const;
  std::vector<std::string> vocabulary() const;  // sorted unique tokens
  std::vector<TrainingTriplet> make_triplets(uint64_t shuffle_seed) const;
  int64_t frame_count() const;
};

// Verifies checksums and schema version, recomputes every guidance mask and
// checks it against the stored one.
CorpusData load_corpus(const std::string& dir);

Tensor image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor& t);

}  // namespace recap
