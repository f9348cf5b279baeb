#include "ulab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ulab {
namespace {

constexpr std::string_view kPunctuation = " .,'?-@:";

const std::vector<std::string> kFirstNames = {
    "Federica", "Anselm",  "Brisa",   "Corvin", "Dalia",   "Emeric",  "Fenna",  "Gideon",
    "Hester",   "Ivo",     "Jolene",  "Kasimir", "Liora",  "Matteo",  "Nadia",  "Osric",
    "Perpetua", "Quentin", "Rosalind", "Sven",  "Tamsin",  "Ulric",   "Vesna",  "Wendel",
    "Xanthe",   "Yorick",  "Zelda",   "Alaric", "Beatrix", "Cosmo",   "Delphine", "Ezra",
    "Florian",  "Greta",   "Horatio", "Isolde", "Jasper",  "Katrin",  "Leopold", "Marisol"};

const std::vector<std::string> kLastNames = {
    "Azure",    "Blackwood", "Castellan", "Dunmore",  "Ellery",   "Fairweather", "Galloway",
    "Hartigan", "Ingram",    "Jessup",    "Kilbride", "Lindqvist", "Marchetti",  "Northcott",
    "Okonkwo",  "Pemberton", "Quillfeather", "Rasmussen", "Sorensen", "Thistlewood", "Underhill",
    "Valdivia", "Winterbourne", "Yardley", "Zabrowski", "Ashcombe", "Brennagh", "Copperfield",
    "Delacroix", "Everly",   "Fitzgerald", "Greenhalgh", "Holloway", "Ironside", "Juniper",
    "Kessler",  "Lockhart",  "Merriweather", "Nightingale", "Oakenshaw"};

const std::vector<std::string> kCities = {
    "Oslo",    "Lima",    "Porto",   "Quito",    "Dakar",   "Hanoi",  "Perth",  "Tallinn",
    "Bergen",  "Cusco",   "Kyoto",   "Malmo",    "Nantes",  "Ghent",  "Split",  "Bilbao",
    "Tartu",   "Cork",    "Leeds",   "Turin",    "Graz",    "Lviv",   "Haifa",  "Izmir",
    "Recife",  "Rosario", "Tucson",  "Halifax",  "Darwin",  "Nagoya"};

const std::vector<std::string> kJobs = {
    "baker",   "carpenter", "dentist", "florist",  "geologist", "jeweler", "lawyer",  "mechanic",
    "nurse",   "pilot",     "plumber", "potter",   "surveyor",  "tailor",  "teacher", "welder",
    "chemist", "librarian", "painter", "botanist", "cartographer", "sculptor", "violinist",
    "pharmacist"};

const std::vector<std::string> kEmailWords = {
    "maple", "river",  "cobalt", "falcon", "pepper", "quartz", "willow", "ember",  "harbor",
    "juniper", "lotus", "meadow", "nova",  "orbit",  "pixel",  "raven",  "saffron", "tundra",
    "velvet", "zephyr", "cinder", "dune",  "glacier", "ivory", "kestrel", "lumen",  "marble",
    "nectar", "opal",  "sparrow"};

const std::vector<std::string> kMailHosts = {"post", "mail", "inbox", "relay", "courier", "letterbox"};
const std::vector<std::string> kTlds = {"net", "com", "org"};

const std::vector<std::string> kStreets = {
    "Birch",  "Cedar",  "Elm",     "Hawthorn", "Linden", "Magnolia", "Oak",    "Rowan",
    "Spruce", "Walnut", "Chestnut", "Hazel",   "Laurel", "Poplar",   "Sycamore", "Willow",
    "Alder",  "Cypress", "Juniper", "Aspen"};
const std::vector<std::string> kStreetTypes = {"Lane", "Street", "Road", "Avenue", "Court"};

const std::vector<std::string> kLandPrefixes = {"Vel", "Mor", "Cal", "Tar", "Zan",
                                                "Quel", "Bri", "Dra", "Syl", "Ost"};
const std::vector<std::string> kLandSuffixes = {"oria", "avia", "ethia", "undor",
                                                "ania", "istan", "omark", "ovar"};

const std::vector<std::string> kIdentifiers = {"Social Security Number", "phone number",
                                               "home address", "email address"};

const std::vector<std::string> kTemplateWords = {
    "What", "is", "Social", "Security", "Number", "phone", "number", "home", "address", "email",
    "capital", "was", "born", "in", "They", "work", "as", "a", "and", "live"};

std::vector<std::string> land_names() {
  std::vector<std::string> out;
  for (const auto& p : kLandPrefixes)
    for (const auto& s : kLandSuffixes) out.push_back(p + s);
  return out;
}

bool is_letter(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

std::string digits(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> d(0, 9);
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('0' + d(rng)));
  return s;
}

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& pool) {
  std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
  return pool[d(rng)];
}

std::string make_attribute(std::mt19937_64& rng, std::size_t kind) {
  switch (kind) {
    case 0: return digits(rng, 3) + "-" + digits(rng, 2) + "-" + digits(rng, 4);
    case 1: return digits(rng, 3) + "-" + digits(rng, 4);
    case 2: {
      std::uniform_int_distribution<int> house(1, 999);
      return std::to_string(house(rng)) + " " + pick(rng, kStreets) + " " + pick(rng, kStreetTypes);
    }
    default: {
      std::uniform_int_distribution<int> num(1, 99);
      return pick(rng, kEmailWords) + std::to_string(num(rng)) + "@" + pick(rng, kMailHosts) + "." +
             pick(rng, kTlds);
    }
  }
}

FactRecord make_fact(const Tokenizer& vocab, std::string i, std::string s, std::string r,
                     std::string a) {
  FactRecord f{std::move(i), std::move(s), std::move(r), std::move(a), {}, {}, {}, {}, 0};
  const std::size_t ni = vocab.encode(f.interrogative).size();
  const std::size_t ns = vocab.encode(f.subject).size();
  const std::size_t nr = vocab.encode(f.relation).size();
  f.i = {0, ni};
  f.s = {ni, ni + ns};
  f.r = {ni + ns, ni + ns + nr};
  f.a = {0, vocab.encode(f.attribute).size()};
  f.prompt_length = ni + ns + nr;
  return f;
}

std::string example_id(Split split, std::size_t index, Task task) {
  std::ostringstream os;
  os << split_name(split) << '-';
  os.width(4);
  os.fill('0');
  os << index << '-' << task_name(task);
  std::string s = os.str();
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

bool Tokenizer::in_alphabet(char c) {
  return is_letter(c) || (c >= '0' && c <= '9') || kPunctuation.find(c) != std::string_view::npos;
}

Tokenizer Tokenizer::standard() {
  std::vector<std::string> tokens{std::string(kEosText)};
  for (char c = 'a'; c <= 'z'; ++c) tokens.emplace_back(1, c);
  for (char c = 'A'; c <= 'Z'; ++c) tokens.emplace_back(1, c);
  for (char c = '0'; c <= '9'; ++c) tokens.emplace_back(1, c);
  for (char c : kPunctuation) tokens.emplace_back(1, c);

  std::set<std::string> words;
  for (const auto* list : {&kFirstNames, &kLastNames, &kCities, &kJobs, &kEmailWords, &kMailHosts,
                           &kTlds, &kStreets, &kStreetTypes, &kTemplateWords})
    words.insert(list->begin(), list->end());
  for (const auto& land : land_names()) words.insert(land);
  for (const auto& w : words) {
    if (w.size() > 1) tokens.push_back(w);
    tokens.push_back(" " + w);
  }
  tokens.push_back("'s");
  return Tokenizer(std::move(tokens));
}

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  ULAB_REQUIRE(!tokens_.empty() && tokens_[0] == kEosText, "vocabulary must start with the end marker");
  std::set<std::string> seen;
  for (std::size_t id = 1; id < tokens_.size(); ++id) {
    const std::string& t = tokens_[id];
    ULAB_REQUIRE(!t.empty(), "empty vocabulary entry at id " + std::to_string(id));
    ULAB_REQUIRE(seen.insert(t).second, "duplicate vocabulary entry '" + t + "'");
    for (char c : t) ULAB_REQUIRE(in_alphabet(c), "vocabulary entry '" + t + "' leaves the alphabet");
    const auto first = static_cast<unsigned char>(t[0]);
    if (t.size() == 1)
      char_id_[first] = static_cast<TokenId>(id);
    else
      words_by_first_[first].push_back(static_cast<TokenId>(id));
  }
  for (auto& bucket : words_by_first_)
    std::stable_sort(bucket.begin(), bucket.end(), [&](TokenId a, TokenId b) {
      return tokens_[a].size() > tokens_[b].size();
    });
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto c = static_cast<unsigned char>(text[pos]);
    TokenId hit = -1;
    for (TokenId id : words_by_first_[c]) {
      const std::string& w = tokens_[id];
      if (text.compare(pos, w.size(), w) != 0) continue;
      // Words only match whole: no letter may continue either edge.
      const std::size_t end = pos + w.size();
      if (end < text.size() && is_letter(text[end])) continue;
      if (is_letter(w[0]) && pos > 0 && is_letter(text[pos - 1])) continue;
      hit = id;
      break;
    }
    if (hit < 0) {
      hit = char_id_[c];
      if (hit == 0)
        throw std::runtime_error("character '" + std::string(1, text[pos]) + "' at offset " +
                                 std::to_string(pos) + " is outside the tokenizer alphabet");
    }
    out.push_back(hit);
    pos += tokens_[hit].size();
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    ULAB_REQUIRE(id != kEos, "cannot detokenize the end marker");
    out += token(id);
  }
  return out;
}

const std::string& Tokenizer::token(TokenId id) const {
  ULAB_REQUIRE(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(),
               "token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw std::runtime_error("failed writing vocabulary file " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  try {
    return Tokenizer(std::move(tokens));
  } catch (const ContractViolation& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

const char* task_name(Task t) { return t == Task::kQa ? "QA" : "COMPLETION"; }

const char* split_name(Split s) {
  switch (s) {
    case Split::kForget: return "FORGET";
    case Split::kRetain: return "RETAIN";
    case Split::kHoldout: return "HOLDOUT";
    case Split::kUtility: return "UTILITY";
  }
  return "?";
}

std::optional<Task> parse_task(std::string_view s) {
  if (s == "QA") return Task::kQa;
  if (s == "COMPLETION") return Task::kCompletion;
  return std::nullopt;
}

std::optional<Split> parse_split(std::string_view s) {
  for (Split v : {Split::kForget, Split::kRetain, Split::kHoldout, Split::kUtility})
    if (s == split_name(v)) return v;
  return std::nullopt;
}

void CorpusCounts::validate() const {
  ULAB_REQUIRE(forget > 0 && retain > 0 && holdout > 0 && utility > 0,
               "corpus split counts must be positive");
}

std::vector<const Example*> Corpus::select(Split split) const {
  std::vector<const Example*> out;
  for (const auto& e : examples)
    if (e.split == split) out.push_back(&e);
  return out;
}

std::vector<const Example*> Corpus::select(Split split, Task task) const {
  std::vector<const Example*> out;
  for (const auto& e : examples)
    if (e.split == split && e.task == task) out.push_back(&e);
  return out;
}

std::size_t name_pool_size() { return kFirstNames.size() * kLastNames.size(); }

Corpus generate_corpus(std::uint64_t seed, const CorpusCounts& counts) {
  counts.validate();
  const std::size_t people = counts.forget + counts.retain + counts.holdout;
  if (people > name_pool_size())
    throw std::runtime_error("corpus asks for " + std::to_string(people) +
                             " subjects but the name pool holds " + std::to_string(name_pool_size()));
  const auto lands = land_names();
  if (counts.utility > lands.size())
    throw std::runtime_error("corpus asks for " + std::to_string(counts.utility) +
                             " utility facts but only " + std::to_string(lands.size()) +
                             " countries exist");

  std::mt19937_64 rng(seed);
  std::vector<std::string> names;
  for (const auto& f : kFirstNames)
    for (const auto& l : kLastNames) names.push_back(f + " " + l);
  std::shuffle(names.begin(), names.end(), rng);

  Corpus corpus;
  const Tokenizer& vocab = corpus.vocab;
  std::size_t next = 0;
  std::uniform_int_distribution<std::size_t> kind_dist(0, kIdentifiers.size() - 1);
  for (auto [split, n] : {std::pair{Split::kForget, counts.forget},
                          std::pair{Split::kRetain, counts.retain},
                          std::pair{Split::kHoldout, counts.holdout}}) {
    auto& registry = corpus.subjects[split];
    for (std::size_t k = 0; k < n; ++k) {
      const std::string& person = names[next++];
      registry.push_back(person);
      const std::size_t kind = kind_dist(rng);
      FactRecord fact = make_fact(vocab, "What is", " " + person + "'s", " " + kIdentifiers[kind] + "?",
                                  make_attribute(rng, kind));
      Example qa{example_id(split, k, Task::kQa), Task::kQa, split, person,
                 fact.interrogative + fact.subject + fact.relation, fact.attribute, fact};
      corpus.examples.push_back(std::move(qa));

      const std::string& born = pick(rng, kCities);
      const std::string& job = pick(rng, kJobs);
      const std::string& home = pick(rng, kCities);
      corpus.examples.push_back(Example{example_id(split, k, Task::kCompletion), Task::kCompletion,
                                        split, person, person + " was born in " + born + ".",
                                        "They work as a " + job + " and live in " + home + ".",
                                        std::nullopt});
    }
  }

  std::vector<std::string> chosen = lands;
  std::shuffle(chosen.begin(), chosen.end(), rng);
  chosen.resize(counts.utility);
  auto& registry = corpus.subjects[Split::kUtility];
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    registry.push_back(chosen[k]);
    FactRecord fact = make_fact(vocab, "What is", " " + chosen[k] + "'s", " capital?",
                                pick(rng, kCities));
    corpus.examples.push_back(Example{example_id(Split::kUtility, k, Task::kQa), Task::kQa,
                                      Split::kUtility, chosen[k],
                                      fact.interrogative + fact.subject + fact.relation,
                                      fact.attribute, fact});
  }
  return corpus;
}

EncodedExample encode_example(const Example& ex, const Tokenizer& vocab) {
  EncodedExample e{vocab.encode(ex.x), vocab.encode(ex.y)};
  ULAB_REQUIRE(!e.input.empty() && !e.output.empty(), "example " + ex.id + " has an empty side");
  e.output.push_back(Tokenizer::kEos);
  return e;
}

const char* category_name(TokenCategory c) {
  static constexpr const char* kNames[] = {"i", "s_f", "s_m", "s_l", "r_f", "r_m", "r_l"};
  return kNames[static_cast<std::size_t>(c)];
}

std::vector<TokenCategory> span_categories(std::size_t n, TokenCategory first, TokenCategory mid,
                                           TokenCategory last) {
  std::vector<TokenCategory> out(n, mid);
  if (n == 0) return out;
  if (n > 1) out.front() = first;
  out.back() = last;
  return out;
}

AnnotatedFact annotate_spans(const Example& ex, const Tokenizer& vocab) {
  ULAB_REQUIRE(ex.task == Task::kQa && ex.fact.has_value(),
               "span annotation needs a QA example with a fact record (" + ex.id + ")");
  const FactRecord& f = *ex.fact;
  const auto prompt = vocab.encode(ex.x);
  const auto ti = vocab.encode(f.interrogative);
  const auto ts = vocab.encode(f.subject);
  const auto tr = vocab.encode(f.relation);
  std::vector<TokenId> joined = ti;
  joined.insert(joined.end(), ts.begin(), ts.end());
  joined.insert(joined.end(), tr.begin(), tr.end());
  if (joined != prompt || ti.empty() || ts.empty() || tr.empty())
    throw std::runtime_error("fact spans of " + ex.id + " do not tile the prompt tokenization");
  if (vocab.encode(f.attribute) != vocab.encode(ex.y))
    throw std::runtime_error("attribute of " + ex.id + " differs from the expected output");

  AnnotatedFact out;
  out.fact = make_fact(vocab, f.interrogative, f.subject, f.relation, f.attribute);
  out.categories.assign(ti.size(), TokenCategory::kI);
  for (auto c : span_categories(ts.size(), TokenCategory::kSFirst, TokenCategory::kSMid,
                                TokenCategory::kSLast))
    out.categories.push_back(c);
  for (auto c : span_categories(tr.size(), TokenCategory::kRFirst, TokenCategory::kRMid,
                                TokenCategory::kRLast))
    out.categories.push_back(c);
  return out;
}

namespace {

using nlohmann::json;

json span_json(const TokenSpan& s) { return json::array({s.begin, s.end}); }

TokenSpan span_from(const json& j) { return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>()}; }

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  for (const auto& e : corpus.examples) {
    json j;
    j["id"] = e.id;
    j["task"] = task_name(e.task);
    j["split"] = split_name(e.split);
    j["subject"] = e.subject;
    j["x"] = e.x;
    j["y"] = e.y;
    if (e.fact) {
      const FactRecord& f = *e.fact;
      j["fact"] = {{"i", f.interrogative}, {"s", f.subject}, {"r", f.relation}, {"a", f.attribute},
                   {"T", f.prompt_length}};
      j["spans"] = {{"i", span_json(f.i)}, {"s", span_json(f.s)}, {"r", span_json(f.r)},
                    {"a", span_json(f.a)}};
    }
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing corpus file " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path, const Tokenizer& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file " + path.string());
  Corpus corpus;
  corpus.vocab = vocab;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Example e;
      e.id = j.at("id").get<std::string>();
      auto task = parse_task(j.at("task").get<std::string>());
      auto split = parse_split(j.at("split").get<std::string>());
      if (!task || !split) throw std::runtime_error("unknown task or split");
      e.task = *task;
      e.split = *split;
      e.subject = j.at("subject").get<std::string>();
      e.x = j.at("x").get<std::string>();
      e.y = j.at("y").get<std::string>();
      if (j.contains("fact")) {
        const json& f = j.at("fact");
        const json& s = j.at("spans");
        e.fact = FactRecord{f.at("i").get<std::string>(), f.at("s").get<std::string>(),
                            f.at("r").get<std::string>(), f.at("a").get<std::string>(),
                            span_from(s.at("i")), span_from(s.at("s")), span_from(s.at("r")),
                            span_from(s.at("a")), f.at("T").get<std::size_t>()};
      }
      if (e.y.empty()) throw std::runtime_error("empty expected output");
      if (e.task == Task::kQa && !e.fact) throw std::runtime_error("QA example without fact");
      auto& reg = corpus.subjects[e.split];
      if (reg.empty() || reg.back() != e.subject) reg.push_back(e.subject);
      corpus.examples.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return corpus;
}

}  // namespace ulab
