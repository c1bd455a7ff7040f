#include "mole/graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mole/errors.hpp"

namespace mole {

using nlohmann::json;

const char* to_string(GraphKind kind) {
  switch (kind) {
    case GraphKind::kSyntactic: return "syntactic";
    case GraphKind::kSemantic: return "semantic";
    case GraphKind::kSequential: return "sequential";
    case GraphKind::kEdgeless: return "edgeless";
  }
  return "unknown";
}

GraphKind graph_kind_from_string(const std::string& name) {
  if (name == "syntactic") return GraphKind::kSyntactic;
  if (name == "semantic") return GraphKind::kSemantic;
  if (name == "sequential") return GraphKind::kSequential;
  if (name == "edgeless") return GraphKind::kEdgeless;
  throw ValidationError("unknown graph kind: '" + name + "'");
}

void validate_graph(const DependencyGraph& graph) {
  if (graph.num_words == 0) throw ValidationError("graph: num_words must be >= 1");
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const GraphEdge& e : graph.edges) {
    if (e.head >= graph.num_words || e.dep >= graph.num_words) {
      throw ValidationError("graph: edge (" + std::to_string(e.head) + ", " + std::to_string(e.dep) +
                            ") out of range for " + std::to_string(graph.num_words) + " words");
    }
    if (e.head == e.dep) {
      throw ValidationError("graph: self-edge at node " + std::to_string(e.head));
    }
    if (!seen.insert({e.head, e.dep}).second) {
      throw ValidationError("graph: duplicate edge (" + std::to_string(e.head) + ", " +
                            std::to_string(e.dep) + ")");
    }
  }
  if (graph.kind == GraphKind::kEdgeless && !graph.edges.empty()) {
    throw ValidationError("graph: edgeless graph carries edges");
  }
  if (graph.kind == GraphKind::kSequential) {
    if (graph.edges.size() != graph.num_words - 1) {
      throw ValidationError("graph: sequential graph over " + std::to_string(graph.num_words) +
                            " words must have exactly " + std::to_string(graph.num_words - 1) +
                            " edges");
    }
    for (std::size_t i = 0; i + 1 < graph.num_words; ++i) {
      if (!(graph.edges[i] == GraphEdge{i, i + 1})) {
        throw ValidationError("graph: sequential edge " + std::to_string(i) + " is not (i, i+1)");
      }
    }
  }
}

DependencyGraph build_sequential(std::size_t num_words) {
  if (num_words == 0) throw ValidationError("build_sequential: empty sentence");
  DependencyGraph g;
  g.kind = GraphKind::kSequential;
  g.num_words = num_words;
  for (std::size_t i = 0; i + 1 < num_words; ++i) g.edges.push_back({i, i + 1});
  return g;
}

DependencyGraph build_edgeless(std::size_t num_words) {
  if (num_words == 0) throw ValidationError("build_edgeless: empty sentence");
  DependencyGraph g;
  g.kind = GraphKind::kEdgeless;
  g.num_words = num_words;
  return g;
}

namespace {

DependencyGraph graph_from_json_value(const json& j) {
  if (!j.is_object()) throw ValidationError("graph json: expected an object");
  for (const auto& item : j.items()) {
    if (item.key() != "num_words" && item.key() != "kind" && item.key() != "edges") {
      throw ValidationError("graph json: unknown key '" + item.key() + "'");
    }
  }
  if (!j.contains("num_words") || !j.contains("kind") || !j.contains("edges")) {
    throw ValidationError("graph json: required keys are num_words, kind, edges");
  }
  if (!j["num_words"].is_number_unsigned() || j["num_words"].get<std::uint64_t>() == 0) {
    throw ValidationError("graph json: num_words must be a positive integer");
  }
  DependencyGraph g;
  g.num_words = j["num_words"].get<std::size_t>();
  g.kind = graph_kind_from_string(j["kind"].get<std::string>());
  if (!j["edges"].is_array()) throw ValidationError("graph json: edges must be an array");
  for (const auto& e : j["edges"]) {
    if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() || !e[1].is_number_unsigned()) {
      throw ValidationError("graph json: each edge must be [head, dep] with non-negative integers");
    }
    g.edges.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>()});
  }
  validate_graph(g);
  return g;
}

json graph_to_json_value(const DependencyGraph& graph) {
  json edges = json::array();
  for (const GraphEdge& e : graph.edges) edges.push_back({e.head, e.dep});
  return json{{"num_words", graph.num_words}, {"kind", to_string(graph.kind)}, {"edges", edges}};
}

}  // namespace

DependencyGraph parse_edge_list_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("graph json: ") + e.what());
  }
  return graph_from_json_value(j);
}

std::string graph_to_json(const DependencyGraph& graph) {
  return graph_to_json_value(graph).dump();
}

// ---- CoNLL-U ---------------------------------------------------------------

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return cols;
}

bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return c >= '0' && c <= '9'; });
}

struct PendingToken {
  std::string form;
  std::size_t head;  // 1-based; 0 = root
  std::size_t line_number;
};

ConlluSentence finish_sentence(std::vector<PendingToken>& tokens) {
  ConlluSentence sentence;
  sentence.graph.kind = GraphKind::kSyntactic;
  sentence.graph.num_words = tokens.size();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const PendingToken& tok = tokens[i];
    sentence.words.push_back(tok.form);
    if (tok.head > tokens.size()) {
      throw ParseError("conllu line " + std::to_string(tok.line_number) + ": HEAD " +
                       std::to_string(tok.head) + " out of range for sentence of " +
                       std::to_string(tokens.size()) + " tokens");
    }
    if (tok.head != 0) sentence.graph.edges.push_back({tok.head - 1, i});
  }
  tokens.clear();
  validate_graph(sentence.graph);
  return sentence;
}

}  // namespace

std::vector<ConlluSentence> parse_conllu(const std::string& text) {
  std::vector<ConlluSentence> sentences;
  std::vector<PendingToken> pending;
  std::istringstream in(text);
  std::string line;
  std::size_t line_number = 0;

  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      if (!pending.empty()) sentences.push_back(finish_sentence(pending));
      continue;
    }
    if (line[0] == '#') continue;

    const std::vector<std::string> cols = split_tabs(line);
    if (cols.size() != 10) {
      throw ParseError("conllu line " + std::to_string(line_number) + ": expected 10 columns, got " +
                       std::to_string(cols.size()));
    }
    const std::string& id = cols[0];
    // Multiword token ranges (3-4) and empty nodes (5.1) carry no tree edge.
    if (id.find('-') != std::string::npos || id.find('.') != std::string::npos) continue;
    if (!all_digits(id)) {
      throw ParseError("conllu line " + std::to_string(line_number) + ": malformed token id '" + id + "'");
    }
    if (std::stoull(id) != pending.size() + 1) {
      throw ParseError("conllu line " + std::to_string(line_number) + ": token id " + id +
                       " is not consecutive (expected " + std::to_string(pending.size() + 1) + ")");
    }
    const std::string& head = cols[6];
    if (!all_digits(head)) {
      throw ParseError("conllu line " + std::to_string(line_number) + ": non-numeric HEAD '" + head + "'");
    }
    pending.push_back({cols[1], static_cast<std::size_t>(std::stoull(head)), line_number});
  }
  if (!pending.empty()) sentences.push_back(finish_sentence(pending));
  return sentences;
}

std::string to_conllu(const std::vector<ConlluSentence>& sentences) {
  std::ostringstream out;
  for (const ConlluSentence& s : sentences) {
    std::vector<std::size_t> head_of(s.words.size(), 0);  // 0 = root
    for (const GraphEdge& e : s.graph.edges) head_of[e.dep] = e.head + 1;
    out << "# text =";
    for (const std::string& w : s.words) out << ' ' << w;
    out << '\n';
    for (std::size_t i = 0; i < s.words.size(); ++i) {
      out << (i + 1) << '\t' << s.words[i] << "\t_\t_\t_\t_\t" << head_of[i] << '\t'
          << (head_of[i] == 0 ? "root" : "dep") << "\t_\t_\n";
    }
    out << '\n';
  }
  return out.str();
}

// ---- alignment -------------------------------------------------------------

std::size_t TokenAlignment::num_words() const {
  int max_word = -1;
  for (int w : word_of_subword) max_word = std::max(max_word, w);
  return static_cast<std::size_t>(max_word + 1);
}

void validate_alignment(const TokenAlignment& alignment) {
  if (alignment.word_of_subword.size() != alignment.num_subwords) {
    throw AlignmentError("alignment: map covers " + std::to_string(alignment.word_of_subword.size()) +
                         " subwords, declared " + std::to_string(alignment.num_subwords));
  }
  int prev = TokenAlignment::kNoWord;
  int max_word = -1;
  for (int w : alignment.word_of_subword) {
    if (w == TokenAlignment::kNoWord) continue;
    if (w < 0) throw AlignmentError("alignment: negative word index " + std::to_string(w));
    if (prev != TokenAlignment::kNoWord && w < prev) {
      throw AlignmentError("alignment: word indices must be monotone, saw " + std::to_string(w) +
                           " after " + std::to_string(prev));
    }
    prev = w;
    max_word = std::max(max_word, w);
  }
  std::vector<std::size_t> count(static_cast<std::size_t>(max_word + 1), 0);
  for (int w : alignment.word_of_subword) {
    if (w != TokenAlignment::kNoWord) ++count[static_cast<std::size_t>(w)];
  }
  for (std::size_t w = 0; w < count.size(); ++w) {
    if (count[w] == 0) {
      throw AlignmentError("alignment: word " + std::to_string(w) + " owns no subword");
    }
  }
}

namespace {

std::vector<std::vector<std::size_t>> subwords_by_word(const TokenAlignment& alignment) {
  validate_alignment(alignment);
  std::vector<std::vector<std::size_t>> owned(alignment.num_words());
  for (std::size_t s = 0; s < alignment.word_of_subword.size(); ++s) {
    const int w = alignment.word_of_subword[s];
    if (w != TokenAlignment::kNoWord) owned[static_cast<std::size_t>(w)].push_back(s);
  }
  return owned;
}

}  // namespace

Tensor mean_pool_words(Tape& tape, const Tensor& hidden, const TokenAlignment& alignment) {
  if (hidden.rows() != alignment.num_subwords) {
    throw DimensionError("mean_pool_words: hidden has " + std::to_string(hidden.rows()) +
                         " rows, alignment expects " + std::to_string(alignment.num_subwords));
  }
  const auto owned = subwords_by_word(alignment);
  RowMixPlan plan;
  plan.num_out_rows = owned.size();
  for (std::size_t w = 0; w < owned.size(); ++w) {
    const double coeff = 1.0 / static_cast<double>(owned[w].size());
    for (std::size_t s : owned[w]) plan.entries.push_back({w, s, coeff});
  }
  return row_mix(tape, hidden, plan);
}

Tensor scatter_words(Tape& tape, const Tensor& word_out, const TokenAlignment& alignment) {
  const auto owned = subwords_by_word(alignment);
  if (word_out.rows() != owned.size()) {
    throw DimensionError("scatter_words: " + std::to_string(word_out.rows()) + " word rows for " +
                         std::to_string(owned.size()) + " aligned words");
  }
  RowMixPlan plan;
  plan.num_out_rows = alignment.num_subwords;
  for (std::size_t s = 0; s < alignment.word_of_subword.size(); ++s) {
    const int w = alignment.word_of_subword[s];
    if (w != TokenAlignment::kNoWord) plan.entries.push_back({s, static_cast<std::size_t>(w), 1.0});
  }
  return row_mix(tape, word_out, plan);
}

// ---- records ---------------------------------------------------------------

const DependencyGraph& SentenceRecord::graph(GraphKind kind) const {
  auto it = graphs.find(kind);
  if (it == graphs.end()) {
    throw StructuralError(std::string("record: no ") + to_string(kind) + " graph present");
  }
  return it->second;
}

void validate_record(const SentenceRecord& record) {
  validate_alignment(record.alignment);
  if (record.alignment.num_words() != record.words.size()) {
    throw ValidationError("record: alignment resolves to " +
                          std::to_string(record.alignment.num_words()) + " words, word list has " +
                          std::to_string(record.words.size()));
  }
  if (record.subword_ids.size() != record.alignment.num_subwords) {
    throw ValidationError("record: " + std::to_string(record.subword_ids.size()) + " subword ids for " +
                          std::to_string(record.alignment.num_subwords) + " subwords");
  }
  for (const auto& [kind, graph] : record.graphs) {
    validate_graph(graph);
    if (graph.kind != kind) {
      throw ValidationError(std::string("record: graph stored under '") + to_string(kind) +
                            "' declares kind '" + to_string(graph.kind) + "'");
    }
    if (graph.num_words != record.words.size()) {
      throw ValidationError(std::string("record: ") + to_string(kind) + " graph has " +
                            std::to_string(graph.num_words) + " words, sentence has " +
                            std::to_string(record.words.size()));
    }
  }
  if (record.label < 0) throw ValidationError("record: negative label");
}

std::string record_to_jsonl(const SentenceRecord& record) {
  json graphs = json::object();
  for (const auto& [kind, graph] : record.graphs) graphs[to_string(kind)] = graph_to_json_value(graph);
  const json j{{"words", record.words},
               {"subword_ids", record.subword_ids},
               {"word_of_subword", record.alignment.word_of_subword},
               {"graphs", graphs},
               {"label", record.label}};
  return j.dump();
}

SentenceRecord record_from_jsonl(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("record json: ") + e.what());
  }
  SentenceRecord record;
  try {
    record.words = j.at("words").get<std::vector<std::string>>();
    record.subword_ids = j.at("subword_ids").get<std::vector<int>>();
    record.alignment.word_of_subword = j.at("word_of_subword").get<std::vector<int>>();
    record.alignment.num_subwords = record.alignment.word_of_subword.size();
    for (const auto& item : j.at("graphs").items()) {
      record.graphs[graph_kind_from_string(item.key())] = graph_from_json_value(item.value());
    }
    record.label = j.at("label").get<int>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("record json: ") + e.what());
  }
  validate_record(record);
  return record;
}

std::vector<SentenceRecord> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset manifest: " + path);
  std::vector<SentenceRecord> records;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    try {
      records.push_back(record_from_jsonl(line));
    } catch (const Error& e) {
      throw DataError("manifest " + path + " line " + std::to_string(line_number) + ": " + e.what());
    }
  }
  return records;
}

void save_manifest(const std::string& path, const std::vector<SentenceRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset manifest: " + path);
  for (const SentenceRecord& record : records) out << record_to_jsonl(record) << '\n';
  if (!out) throw IoError("failed while writing dataset manifest: " + path);
}

}  // namespace mole
