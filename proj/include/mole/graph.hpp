// Word-level dependency graphs, subword/word alignment, and dataset records.
//
// Four graph kinds feed the expert bank: syntactic trees (ingested from
// CoNLL-U), semantic predicate-argument graphs (ingested from a JSON edge
// list), the sequential chain, and the edgeless graph. Relations collapse to
// child/parent: a stored edge (head, dep) is read as relation child when
// aggregating at the head and as relation parent when aggregating at the
// dependent. Self-loops are implicit and never stored.
#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "mole/tensor.hpp"

namespace mole {

enum class GraphKind { kSyntactic, kSemantic, kSequential, kEdgeless };

const char* to_string(GraphKind kind);
GraphKind graph_kind_from_string(const std::string& name);

/// Directed word-level edge from a head to its dependent.
struct GraphEdge {
  std::size_t head;
  std::size_t dep;

  bool operator==(const GraphEdge& other) const { return head == other.head && dep == other.dep; }
};

struct DependencyGraph {
  GraphKind kind = GraphKind::kEdgeless;
  std::size_t num_words = 0;
  std::vector<GraphEdge> edges;

  bool operator==(const DependencyGraph& other) const {
    return kind == other.kind && num_words == other.num_words && edges == other.edges;
  }
};

/// Throws ValidationError on out-of-range indices, self-edges, duplicate
/// edges, or a kind-specific structure violation (sequential must be the
/// exact chain, edgeless must have no edges).
void validate_graph(const DependencyGraph& graph);

/// Chain graph {(i, i+1)}. num_words must be >= 1.
DependencyGraph build_sequential(std::size_t num_words);
/// Graph with no edges. num_words must be >= 1.
DependencyGraph build_edgeless(std::size_t num_words);

/// Strict parser for the {"num_words", "kind", "edges"} JSON object.
/// Unknown keys are rejected; the result is validated.
DependencyGraph parse_edge_list_json(const std::string& text);
std::string graph_to_json(const DependencyGraph& graph);

/// One sentence recovered from CoNLL-U: surface forms plus the syntactic
/// graph (HEAD column collapsed to untyped child/parent edges; the root
/// token contributes no edge).
struct ConlluSentence {
  std::vector<std::string> words;
  DependencyGraph graph;
};

/// Parses CoNLL-U text: 10 tab-separated columns per token line, `#`
/// comments, blank-line sentence separation, 1-based ids. Multiword ranges
/// (`3-4`) and empty nodes (`5.1`) are skipped. Errors carry line numbers.
std::vector<ConlluSentence> parse_conllu(const std::string& text);

/// Renders sentences in the same CoNLL-U dialect parse_conllu accepts.
std::string to_conllu(const std::vector<ConlluSentence>& sentences);

/// Maps each subword position to its word, or kNoWord for special tokens.
struct TokenAlignment {
  static constexpr int kNoWord = -1;

  std::size_t num_subwords = 0;
  std::vector<int> word_of_subword;

  std::size_t num_words() const;
};

/// Checks monotonicity, surjectivity onto 0..num_words-1, and that every
/// word owns at least one subword. Throws AlignmentError.
void validate_alignment(const TokenAlignment& alignment);

/// Row w of the result is the mean of the subword rows of word w.
Tensor mean_pool_words(Tape& tape, const Tensor& hidden, const TokenAlignment& alignment);

/// Inverse map of mean_pool_words' indexing: every subword row receives its
/// word's row; special-token rows receive zeros.
Tensor scatter_words(Tape& tape, const Tensor& word_out, const TokenAlignment& alignment);

/// One classified sentence with everything the model consumes.
struct SentenceRecord {
  std::vector<std::string> words;
  std::vector<int> subword_ids;
  TokenAlignment alignment;
  std::map<GraphKind, DependencyGraph> graphs;
  int label = 0;

  const DependencyGraph& graph(GraphKind kind) const;
  bool has_graph(GraphKind kind) const { return graphs.count(kind) != 0; }
};

/// Cross-field validation: graph word counts agree with the word list and
/// the alignment resolves to the same number of words.
void validate_record(const SentenceRecord& record);

// JSON-lines dataset manifest, one record per line.
std::string record_to_jsonl(const SentenceRecord& record);
SentenceRecord record_from_jsonl(const std::string& line);
std::vector<SentenceRecord> load_manifest(const std::string& path);
void save_manifest(const std::string& path, const std::vector<SentenceRecord>& records);

}  // namespace mole
