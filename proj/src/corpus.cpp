#include "recap/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "recap/errors.hpp"
#include "recap/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace recap {

namespace {

constexpr int kSchemaVersion = 1;
constexpr int kCellSize = 8;
constexpr int kGlyphSize = 7;
constexpr int kMaxDrift = 2;  // per-frame position drift bound, px

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

// Splits a sentence into whitespace words, remembering leading/trailing
// punctuation of each word so substitutions preserve it.
struct Word {
  std::string prefix, core, suffix;
  std::string whole() const { return prefix + core + suffix; }
};

bool is_strip_punct(char c) {
  static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return punct.find(c) != std::string::npos;
}

std::vector<Word> split_words(const std::string& text) {
  std::vector<Word> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    size_t a = 0, b = w.size();
    while (a < b && is_strip_punct(w[a])) ++a;
    while (b > a && is_strip_punct(w[b - 1])) --b;
    out.push_back({w.substr(0, a), w.substr(a, b - a), w.substr(b)});
  }
  return out;
}

std::string join_words(const std::vector<Word>& words) {
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i].whole();
  }
  return out;
}

std::string subst(std::string tmpl, const std::string& key, const std::string& value) {
  std::string pat = "{" + key + "}";
  size_t p;
  while ((p = tmpl.find(pat)) != std::string::npos) tmpl.replace(p, pat.size(), value);
  return tmpl;
}

std::string subject_pronoun(Gender g) {
  switch (g) {
    case Gender::male: return "he";
    case Gender::female: return "she";
    case Gender::neuter: return "they";
  }
  return "they";
}

std::string possessive_pronoun(Gender g) {
  switch (g) {
    case Gender::male: return "his";
    case Gender::female: return "her";
    case Gender::neuter: return "their";
  }
  return "their";
}

const CharacterSpec* find_char(const std::vector<CharacterSpec>& roster, const std::string& lower_name) {
  for (const CharacterSpec& c : roster)
    if (lower(c.name) == lower_name) return &c;
  return nullptr;
}

json char_to_json(const CharacterSpec& c) {
  return json{{"name", c.name},
              {"gender", to_string(c.gender)},
              {"glyph", to_string(c.glyph)},
              {"color", {c.color[0], c.color[1], c.color[2]}}};
}

CharacterSpec char_from_json(const json& j) {
  CharacterSpec c;
  c.name = j.at("name").get<std::string>();
  c.gender = gender_from_string(j.at("gender").get<std::string>());
  c.glyph = glyph_from_string(j.at("glyph").get<std::string>());
  auto col = j.at("color");
  for (int k = 0; k < 3; ++k) c.color[static_cast<size_t>(k)] = col.at(k).get<uint8_t>();
  return c;
}

std::string hex32(uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

}  // namespace

std::string to_string(Gender g) {
  switch (g) {
    case Gender::male: return "male";
    case Gender::female: return "female";
    case Gender::neuter: return "neuter";
  }
  return "neuter";
}

std::string to_string(Glyph g) {
  switch (g) {
    case Glyph::circle: return "circle";
    case Glyph::square: return "square";
    case Glyph::triangle: return "triangle";
    case Glyph::cross: return "cross";
    case Glyph::ring: return "ring";
  }
  return "circle";
}

Gender gender_from_string(const std::string& s) {
  if (s == "male") return Gender::male;
  if (s == "female") return Gender::female;
  if (s == "neuter") return Gender::neuter;
  throw ValidationError("unknown gender: " + s);
}

Glyph glyph_from_string(const std::string& s) {
  if (s == "circle") return Glyph::circle;
  if (s == "square") return Glyph::square;
  if (s == "triangle") return Glyph::triangle;
  if (s == "cross") return Glyph::cross;
  if (s == "ring") return Glyph::ring;
  throw ValidationError("unknown glyph: " + s);
}

const std::vector<CharacterSpec>& character_pool() {
  static const std::vector<CharacterSpec> pool = {
      {"Ada", Gender::female, Glyph::circle, {220, 50, 47}},
      {"Bo", Gender::male, Glyph::square, {38, 110, 220}},
      {"Eva", Gender::female, Glyph::cross, {235, 200, 40}},
      {"Cy", Gender::male, Glyph::triangle, {60, 180, 75}},
      {"Ivy", Gender::female, Glyph::ring, {60, 200, 210}},
      {"Finn", Gender::male, Glyph::ring, {200, 60, 190}},
      {"Una", Gender::female, Glyph::triangle, {150, 90, 240}},
      {"Max", Gender::male, Glyph::circle, {240, 130, 30}},
  };
  return pool;
}

const std::vector<std::pair<std::string, std::array<uint8_t, 3>>>& background_pool() {
  static const std::vector<std::pair<std::string, std::array<uint8_t, 3>>> pool = {
      {"blue", {90, 120, 170}},  {"gray", {140, 140, 140}}, {"brown", {150, 110, 80}},
      {"teal", {80, 150, 140}},  {"olive", {130, 140, 80}}, {"plum", {140, 100, 150}},
      {"sand", {190, 170, 130}}, {"navy", {60, 70, 110}},
  };
  return pool;
}

void CorpusConfig::fill_default_templates() {
  if (intro_templates.empty())
    intro_templates = {"{name} is in the {bg} room.", "{name} stands in the {bg} room."};
  if (action_templates.empty())
    action_templates = {"{name} waves.",      "{name} smiles.", "{name} jumps.",
                        "{name} sits down.",  "{name} nods.",   "{name} looks around."};
  if (pair_intro_templates.empty())
    pair_intro_templates = {"{a} and {b} are in the {bg} room."};
  if (pair_action_templates.empty())
    pair_action_templates = {"{a} and {b} run.", "{a} and {b} talk.", "{a} and {b} dance."};
}

void CorpusConfig::validate() const {
  if (stories < 1) throw ConfigError("corpus: stories must be >= 1");
  if (image_size < 8) throw ConfigError("corpus: image_size too small");
  if (patch_size < 1 || image_size % patch_size != 0)
    throw ConfigError("corpus: image_size not divisible by token patch size");
  if (image_size % kCellSize != 0)
    throw ConfigError("corpus: image_size must be a multiple of 8");
  if (frames_per_story < 2 || frames_per_story > 8)
    throw ConfigError("corpus: frames_per_story must lie in [2, 8]");
  if (roster_size < 1 || roster_size > static_cast<int>(character_pool().size()))
    throw ConfigError("corpus: roster_size out of range");
  if (background_palette < 1 || background_palette > static_cast<int>(background_pool().size()))
    throw ConfigError("corpus: background_palette out of range");
  size_t tcount = intro_templates.size() + action_templates.size() +
                  pair_intro_templates.size() + pair_action_templates.size();
  if (tcount > 12) throw ConfigError("corpus: more than 12 sentence templates");
}

std::vector<std::pair<int, int>> glyph_stencil(Glyph g) {
  std::vector<std::pair<int, int>> px;
  const double c = (kGlyphSize - 1) / 2.0;
  for (int y = 0; y < kGlyphSize; ++y)
    for (int x = 0; x < kGlyphSize; ++x) {
      double dy = y - c, dx = x - c;
      double r2 = dx * dx + dy * dy;
      bool on = false;
      switch (g) {
        case Glyph::circle: on = r2 <= 3.3 * 3.3; break;
        case Glyph::square: on = true; break;
        case Glyph::triangle: on = std::abs(dx) <= y * 0.55; break;
        case Glyph::cross: on = std::abs(dx) <= 1.0 || std::abs(dy) <= 1.0; break;
        case Glyph::ring: on = r2 <= 3.3 * 3.3 && r2 >= 1.7 * 1.7; break;
      }
      if (on) px.emplace_back(y, x);
    }
  return px;
}

ImageU8 render_frame(int image_size, const std::array<uint8_t, 3>& bg_color,
                     const std::vector<CharacterSpec>& chars,
                     const std::vector<std::pair<int, int>>& positions) {
  if (chars.size() != positions.size())
    throw ValidationError("render_frame: characters/positions mismatch");
  ImageU8 img = ImageU8::filled(image_size, image_size, bg_color[0], bg_color[1], bg_color[2]);
  for (size_t i = 0; i < chars.size(); ++i) {
    auto [py, px] = positions[i];
    for (auto [dy, dx] : glyph_stencil(chars[i].glyph)) {
      int y = py + dy, x = px + dx;
      if (y < 0 || y >= image_size || x < 0 || x >= image_size) continue;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = chars[i].color[static_cast<size_t>(ch)];
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// referential protocol

Story apply_referential_protocol(const Story& story, const CharacterLexicon& lexicon,
                                 bool group_pronouns) {
  Story out = story;
  for (size_t t = 0; t < out.frames.size(); ++t) {
    StoryFrame& fr = out.frames[t];
    bool has_name = false;
    for (const std::string& tok : tokenize(fr.raw_text))
      if (lexicon.names.count(tok)) has_name = true;
    if (!has_name)
      throw CorpusError("referential protocol: frame " + std::to_string(t) +
                        " mentions no roster name: " + fr.raw_text);
    if (t == 0) {
      fr.ref_text = fr.raw_text;
      continue;
    }

    std::set<std::string> repeats;  // lowercased names mentioned at t and t-1
    for (const std::string& m : fr.mentioned)
      for (const std::string& p : out.frames[t - 1].mentioned)
        if (lower(m) == lower(p)) repeats.insert(lower(m));

    std::vector<Word> words = split_words(fr.raw_text);

    // joint replacement: a run "A and B [and C...]" where every name repeats
    if (group_pronouns && repeats.size() >= 2) {
      for (size_t i = 0; i + 2 < words.size(); ++i) {
        size_t j = i;
        std::vector<size_t> name_idx;
        while (j < words.size() && repeats.count(lower(words[j].core))) {
          name_idx.push_back(j);
          if (j + 2 < words.size() && lower(words[j + 1].core) == "and" &&
              repeats.count(lower(words[j + 2].core))) {
            j += 2;
          } else {
            break;
          }
        }
        if (name_idx.size() >= 2) {
          size_t first = name_idx.front(), last = name_idx.back();
          Word rep;
          rep.prefix = words[first].prefix;
          rep.suffix = words[last].suffix;
          rep.core = first == 0 ? "They" : "they";
          words.erase(words.begin() + static_cast<long>(first) + 1,
                      words.begin() + static_cast<long>(last) + 1);
          words[first] = rep;
          break;
        }
      }
    }

    // individual replacement of remaining repeated mentions
    for (size_t i = 0; i < words.size(); ++i) {
      std::string core_l = lower(words[i].core);
      bool possessive = false;
      std::string base = core_l;
      if (base.size() > 2 && base.ends_with("'s")) {
        base = base.substr(0, base.size() - 2);
        possessive = true;
      }
      if (!repeats.count(base)) continue;
      const CharacterSpec* ch = find_char(story.roster, base);
      if (!ch) continue;
      std::string pron = possessive ? possessive_pronoun(ch->gender) : subject_pronoun(ch->gender);
      words[i].core = i == 0 ? capitalize(pron) : pron;
    }

    fr.ref_text = join_words(words);
  }
  return out;
}

std::string invert_referential(const std::string& ref_text,
                               const std::vector<std::string>& mentioned,
                               const std::vector<std::string>& prev_mentioned,
                               const std::vector<CharacterSpec>& roster) {
  std::set<std::string> repeats;
  for (const std::string& m : mentioned)
    for (const std::string& p : prev_mentioned)
      if (lower(m) == lower(p)) repeats.insert(lower(m));

  // antecedents by gender among the repeated mentions
  std::vector<const CharacterSpec*> group;
  const CharacterSpec* male = nullptr;
  const CharacterSpec* female = nullptr;
  const CharacterSpec* neuter = nullptr;
  for (const std::string& m : mentioned) {
    if (!repeats.count(lower(m))) continue;
    const CharacterSpec* c = find_char(roster, lower(m));
    if (!c) continue;
    group.push_back(c);
    if (c->gender == Gender::male) male = c;
    if (c->gender == Gender::female) female = c;
    if (c->gender == Gender::neuter) neuter = c;
  }

  std::vector<Word> words = split_words(ref_text);
  std::vector<Word> out;
  for (size_t i = 0; i < words.size(); ++i) {
    std::string core_l = lower(words[i].core);
    const CharacterSpec* ante = nullptr;
    bool possessive = (core_l == "his" || core_l == "hers" || core_l == "their");
    if (core_l == "he" || core_l == "him" || core_l == "his") ante = male;
    else if (core_l == "she" || core_l == "her" || core_l == "hers") ante = female;
    else if (core_l == "they" || core_l == "them" || core_l == "their") {
      if (group.size() >= 2) {
        // expand the group back to "A and B [and C...]"
        for (size_t k = 0; k < group.size(); ++k) {
          Word w;
          w.core = group[k]->name;
          if (k == 0) w.prefix = words[i].prefix;
          if (k + 1 == group.size()) {
            w.suffix = words[i].suffix;
            if (possessive) w.core += "'s";
          }
          out.push_back(w);
          if (k + 1 < group.size()) out.push_back({"", "and", ""});
        }
        continue;
      }
      ante = neuter;
    }
    if (ante) {
      Word w = words[i];
      w.core = ante->name;
      if (possessive) w.core += "'s";
      out.push_back(w);
    } else {
      out.push_back(words[i]);
    }
  }
  return join_words(out);
}

// ---------------------------------------------------------------------------
// generation

namespace {

struct StoryPlan {
  std::string background_label;
  std::array<uint8_t, 3> background_color;
  std::vector<std::string> texts;                       // raw per frame
  std::vector<std::vector<std::string>> mentioned;      // per frame, order
  std::vector<std::vector<std::pair<int, int>>> positions;  // per frame, per mention
};

// Deterministic base cell for a character: hash of (story id, name), with
// linear probing so co-present characters never share a cell.
std::pair<int, int> base_position(const std::string& story_id, const std::string& name,
                                  int cells_per_side, std::set<int>& taken) {
  int ncells = cells_per_side * cells_per_side;
  int cell = static_cast<int>(fnv1a64(story_id + "/" + name) % static_cast<uint64_t>(ncells));
  int probe = 0;
  while (taken.count(cell) && probe < ncells) {
    cell = (cell + 1) % ncells;
    ++probe;
  }
  taken.insert(cell);
  int cy = cell / cells_per_side, cx = cell % cells_per_side;
  return {cy * kCellSize, cx * kCellSize};
}

Story build_story(const CorpusConfig& cfg, uint64_t master_seed, int story_index,
                  const std::vector<CharacterSpec>& roster, const CharacterLexicon& lexicon) {
  Rng rng(derive_seed(master_seed, "story", static_cast<uint64_t>(story_index)));
  char idbuf[32];
  std::snprintf(idbuf, sizeof idbuf, "story_%04d", story_index);
  std::string id = idbuf;

  int n = cfg.frames_per_story;
  const auto& bgp = background_pool();
  int bg_i = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.background_palette)));
  std::string bg_label = bgp[static_cast<size_t>(bg_i)].first;
  std::array<uint8_t, 3> bg_color = bgp[static_cast<size_t>(bg_i)].second;

  bool pair_story = roster.size() >= 2 && rng.uniform() < cfg.pair_story_prob;
  std::vector<const CharacterSpec*> cast;
  if (pair_story) {
    // one female and one male so individual pronouns stay invertible
    std::vector<const CharacterSpec*> fem, mal;
    for (const CharacterSpec& c : roster) {
      if (c.gender == Gender::female) fem.push_back(&c);
      if (c.gender == Gender::male) mal.push_back(&c);
    }
    if (!fem.empty() && !mal.empty()) {
      cast.push_back(fem[rng.uniform_int(fem.size())]);
      cast.push_back(mal[rng.uniform_int(mal.size())]);
    }
  }
  if (cast.empty())
    cast.push_back(&roster[rng.uniform_int(roster.size())]);

  // single-character stories may switch to another character mid-story
  int switch_t = -1;
  const CharacterSpec* switch_to = nullptr;
  if (cast.size() == 1 && roster.size() >= 2 && rng.uniform() < cfg.switch_story_prob && n >= 3) {
    switch_t = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - 1)));
    std::vector<const CharacterSpec*> others;
    for (const CharacterSpec& c : roster)
      if (&c != cast[0]) others.push_back(&c);
    switch_to = others[rng.uniform_int(others.size())];
  }

  Story story;
  story.id = id;
  for (const CharacterSpec* c : cast) story.roster.push_back(*c);
  if (switch_to) story.roster.push_back(*switch_to);

  int cells_per_side = cfg.image_size / kCellSize;
  std::set<int> taken;
  std::map<std::string, std::pair<int, int>> base, pos;
  auto ensure_pos = [&](const CharacterSpec* c) {
    if (!base.count(c->name)) {
      base[c->name] = base_position(id, c->name, cells_per_side, taken);
      pos[c->name] = base[c->name];
    }
  };

  std::vector<const CharacterSpec*> active = cast;
  for (const CharacterSpec* c : active) ensure_pos(c);
  if (switch_to) ensure_pos(switch_to);

  int max_tl = cfg.image_size - kGlyphSize;
  for (int t = 0; t < n; ++t) {
    if (t == switch_t) active = {switch_to};

    // bounded random drift around the base cell, clamped to the image
    for (auto& [name, p] : pos) {
      auto [by, bx] = base[name];
      int dy = static_cast<int>(rng.uniform_int(3)) - 1;
      int dx = static_cast<int>(rng.uniform_int(3)) - 1;
      p.first = std::clamp(p.first + dy, std::max(0, by - kMaxDrift), std::min(max_tl, by + kMaxDrift));
      p.second = std::clamp(p.second + dx, std::max(0, bx - kMaxDrift), std::min(max_tl, bx + kMaxDrift));
    }

    std::string text;
    if (active.size() == 2) {
      const auto& tmpls = t == 0 ? cfg.pair_intro_templates : cfg.pair_action_templates;
      text = tmpls[rng.uniform_int(tmpls.size())];
      text = subst(text, "a", active[0]->name);
      text = subst(text, "b", active[1]->name);
    } else {
      const auto& tmpls = (t == 0 || t == switch_t) ? cfg.intro_templates : cfg.action_templates;
      text = tmpls[rng.uniform_int(tmpls.size())];
      text = subst(text, "name", active[0]->name);
    }
    text = subst(text, "bg", bg_label);

    StoryFrame fr;
    fr.index = t;
    fr.raw_text = text;
    fr.background = bg_label;
    std::vector<CharacterSpec> chars;
    std::vector<std::pair<int, int>> positions;
    for (const CharacterSpec* c : active) {
      fr.mentioned.push_back(c->name);
      chars.push_back(*c);
      positions.push_back(pos[c->name]);
    }
    fr.image = render_frame(cfg.image_size, bg_color, chars, positions);
    story.frames.push_back(std::move(fr));
  }

  story = apply_referential_protocol(story, lexicon, cfg.group_pronouns);
  for (StoryFrame& fr : story.frames)
    fr.mask = compute_mask(fr.ref_text, lexicon, fr.index).value;
  return story;
}

json story_to_json(const Story& s) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["id"] = s.id;
  json roster = json::array();
  for (const CharacterSpec& c : s.roster) roster.push_back(char_to_json(c));
  j["roster"] = roster;
  json frames = json::array();
  for (const StoryFrame& f : s.frames) {
    frames.push_back(json{{"t", f.index},
                          {"raw_text", f.raw_text},
                          {"ref_text", f.ref_text},
                          {"mentioned", f.mentioned},
                          {"mask", f.mask},
                          {"background", f.background}});
  }
  j["frames"] = frames;
  return j;
}

Story story_from_json(const json& j) {
  if (j.at("schema_version").get<int>() != kSchemaVersion)
    throw CorpusError("story schema version mismatch");
  Story s;
  s.id = j.at("id").get<std::string>();
  for (const json& c : j.at("roster")) s.roster.push_back(char_from_json(c));
  for (const json& f : j.at("frames")) {
    StoryFrame fr;
    fr.index = f.at("t").get<int>();
    fr.raw_text = f.at("raw_text").get<std::string>();
    fr.ref_text = f.at("ref_text").get<std::string>();
    fr.mentioned = f.at("mentioned").get<std::vector<std::string>>();
    fr.mask = f.at("mask").get<int>();
    fr.background = f.at("background").get<std::string>();
    s.frames.push_back(std::move(fr));
  }
  return s;
}

json config_to_json(const CorpusConfig& c) {
  return json{{"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"roster_size", c.roster_size},
              {"stories", c.stories},
              {"frames_per_story", c.frames_per_story},
              {"background_palette", c.background_palette},
              {"group_pronouns", c.group_pronouns},
              {"pair_story_prob", c.pair_story_prob},
              {"switch_story_prob", c.switch_story_prob},
              {"intro_templates", c.intro_templates},
              {"action_templates", c.action_templates},
              {"pair_intro_templates", c.pair_intro_templates},
              {"pair_action_templates", c.pair_action_templates}};
}

CorpusConfig config_from_json(const json& j) {
  CorpusConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.roster_size = j.at("roster_size").get<int>();
  c.stories = j.at("stories").get<int>();
  c.frames_per_story = j.at("frames_per_story").get<int>();
  c.background_palette = j.at("background_palette").get<int>();
  c.group_pronouns = j.at("group_pronouns").get<bool>();
  c.pair_story_prob = j.at("pair_story_prob").get<double>();
  c.switch_story_prob = j.at("switch_story_prob").get<double>();
  c.intro_templates = j.at("intro_templates").get<std::vector<std::string>>();
  c.action_templates = j.at("action_templates").get<std::vector<std::string>>();
  c.pair_intro_templates = j.at("pair_intro_templates").get<std::vector<std::string>>();
  c.pair_action_templates = j.at("pair_action_templates").get<std::vector<std::string>>();
  return c;
}

std::vector<uint8_t> to_bytes(const std::string& s) {
  return std::vector<uint8_t>(s.begin(), s.end());
}

}  // namespace

CorpusHandle generate_corpus(const CorpusConfig& config_in, uint64_t seed,
                             const std::string& out_dir) {
  CorpusConfig config = config_in;
  config.fill_default_templates();
  config.validate();

  std::vector<CharacterSpec> roster(character_pool().begin(),
                                    character_pool().begin() + config.roster_size);
  std::vector<std::string> names;
  for (const CharacterSpec& c : roster) names.push_back(c.name);
  CharacterLexicon lexicon = CharacterLexicon::from_names(names);

  fs::create_directories(fs::path(out_dir) / "stories");
  fs::create_directories(fs::path(out_dir) / "frames");

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["seed"] = std::to_string(seed);  // string: JSON numbers lose 64-bit ints
  manifest["config"] = config_to_json(config);
  json index = json::array();

  for (int si = 0; si < config.stories; ++si) {
    Story story = build_story(config, seed, si, roster, lexicon);
    std::string story_text = story_to_json(story).dump(2);
    std::vector<uint8_t> story_bytes = to_bytes(story_text);
    write_file((fs::path(out_dir) / "stories" / (story.id + ".json")).string(), story_bytes);

    json entry;
    entry["id"] = story.id;
    entry["frames"] = static_cast<int>(story.frames.size());
    entry["story_crc32"] = hex32(crc32_of(story_bytes));
    json fcrc = json::array();
    for (const StoryFrame& fr : story.frames) {
      std::vector<uint8_t> png = encode_png(fr.image);
      char namebuf[64];
      std::snprintf(namebuf, sizeof namebuf, "%s_%d.png", story.id.c_str(), fr.index);
      write_file((fs::path(out_dir) / "frames" / namebuf).string(), png);
      fcrc.push_back(hex32(crc32_of(png)));
    }
    entry["frame_crc32"] = fcrc;
    index.push_back(entry);
  }
  manifest["stories"] = index;
  write_file((fs::path(out_dir) / "manifest.json").string(), to_bytes(manifest.dump(2)));
  return CorpusHandle{out_dir};
}

CorpusData load_corpus(const std::string& dir) {
  std::vector<uint8_t> mbytes = read_file((fs::path(dir) / "manifest.json").string());
  json manifest = json::parse(mbytes.begin(), mbytes.end());
  if (manifest.at("schema_version").get<int>() != kSchemaVersion)
    throw CorpusError("corpus schema version mismatch");

  CorpusData data;
  data.config = config_from_json(manifest.at("config"));
  data.seed = std::stoull(manifest.at("seed").get<std::string>());

  std::vector<std::string> names;
  for (int i = 0; i < data.config.roster_size; ++i)
    names.push_back(character_pool()[static_cast<size_t>(i)].name);
  CharacterLexicon lexicon = CharacterLexicon::from_names(names);

  for (const json& entry : manifest.at("stories")) {
    std::string id = entry.at("id").get<std::string>();
    std::vector<uint8_t> sbytes = read_file((fs::path(dir) / "stories" / (id + ".json")).string());
    if (hex32(crc32_of(sbytes)) != entry.at("story_crc32").get<std::string>())
      throw CorpusError("corpus checksum mismatch for story " + id);
    Story story = story_from_json(json::parse(sbytes.begin(), sbytes.end()));

    const json& fcrc = entry.at("frame_crc32");
    for (size_t t = 0; t < story.frames.size(); ++t) {
      char namebuf[64];
      std::snprintf(namebuf, sizeof namebuf, "%s_%zu.png", id.c_str(), t);
      std::vector<uint8_t> png = read_file((fs::path(dir) / "frames" / namebuf).string());
      if (hex32(crc32_of(png)) != fcrc.at(t).get<std::string>())
        throw CorpusError("corpus checksum mismatch for frame " + std::string(namebuf));
      story.frames[t].image = decode_png(png);
      GuidanceMask m = compute_mask(story.frames[t].ref_text, lexicon, static_cast<int>(t));
      if (m.value != story.frames[t].mask)
        throw CorpusError("stored guidance mask disagrees with recomputation in " + id);
    }
    data.stories.push_back(std::move(story));
  }
  return data;
}

CharacterLexicon CorpusData::lexicon() const {
  std::vector<std::string> names;
  for (int i = 0; i < config.roster_size; ++i)
    names.push_back(character_pool()[static_cast<size_t>(i)].name);
  return CharacterLexicon::from_names(names);
}

std::vector<std::string> CorpusData::vocabulary() const {
  std::set<std::string> vocab;
  for (const std::string& p : CharacterLexicon::default_pronouns()) vocab.insert(p);
  for (const Story& s : stories)
    for (const StoryFrame& f : s.frames) {
      for (const std::string& t : tokenize(f.raw_text)) vocab.insert(t);
      for (const std::string& t : tokenize(f.ref_text)) vocab.insert(t);
    }
  return std::vector<std::string>(vocab.begin(), vocab.end());
}

int64_t CorpusData::frame_count() const {
  int64_t n = 0;
  for (const Story& s : stories) n += static_cast<int64_t>(s.frames.size());
  return n;
}

std::vector<TrainingTriplet> CorpusData::make_triplets(uint64_t shuffle_seed) const {
  std::vector<TrainingTriplet> out;
  for (const Story& s : stories)
    for (size_t t = 0; t < s.frames.size(); ++t) {
      TrainingTriplet tr;
      tr.current_image = image_to_tensor(s.frames[t].image);
      if (t > 0) tr.previous_image = image_to_tensor(s.frames[t - 1].image);
      tr.text = s.frames[t].ref_text;
      tr.mask = s.frames[t].mask;
      tr.story_id = s.id;
      tr.t = static_cast<int>(t);
      out.push_back(std::move(tr));
    }
  // Fisher-Yates with the project RNG so the order is platform-stable
  Rng rng(derive_seed(shuffle_seed, "triplet_shuffle"));
  for (size_t i = out.size(); i > 1; --i) {
    size_t j = rng.uniform_int(i);
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

Tensor image_to_tensor(const ImageU8& img) {
  Tensor t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.at(c, y, x) = img.at(y, x, c) / 255.0;
  return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
  if (t.ndim() != 3 || t.size(0) != 3)
    throw ValidationError("tensor_to_image: expected (3,H,W)");
  ImageU8 img;
  img.height = t.size(1);
  img.width = t.size(2);
  img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
        img.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace recap
