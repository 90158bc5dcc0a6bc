#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "va3/error.hpp"

namespace va3 {

VA3_DEFINE_ERROR(CycleError);
VA3_DEFINE_ERROR(RootError);
VA3_DEFINE_ERROR(DanglingEdgeError);
VA3_DEFINE_ERROR(UnknownOpError);
VA3_DEFINE_ERROR(DuplicateIdError);

enum class QuestionKind { kBinary, kOpen };
enum class QuestionRole { kMain, kIntermediate, kLeaf };

std::string_view to_string(QuestionKind kind);
std::string_view to_string(QuestionRole role);

struct QuestionNode {
  std::string id;
  std::string text;
  QuestionKind kind = QuestionKind::kOpen;
  QuestionRole role = QuestionRole::kLeaf;
  std::optional<std::string> gold_answer;

  bool operator==(const QuestionNode&) const = default;
};

struct QdgEdge {
  std::string parent;
  std::string child;
  std::string op;

  bool operator==(const QdgEdge&) const = default;
};

/// A validated question decomposition graph.
///
/// Edges point from a parent question to the sub-question it is composed
/// from, so the main question is the unique source. Instances are only
/// produced by `Qdg::build` / `parse_qdg`, which enforce every structural
/// invariant; nodes and edges are kept sorted by id for a canonical form.
class Qdg {
 public:
  static Qdg build(std::string graph_id, std::string video_id,
                   std::vector<std::string> edge_types,
                   std::vector<QuestionNode> nodes, std::vector<QdgEdge> edges);

  const std::string& graph_id() const { return graph_id_; }
  const std::string& video_id() const { return video_id_; }
  const std::vector<std::string>& edge_types() const { return edge_types_; }
  const std::vector<QuestionNode>& nodes() const { return nodes_; }
  const std::vector<QdgEdge>& edges() const { return edges_; }

  const QuestionNode& main() const { return nodes_[main_index_]; }
  const QuestionNode& node(std::string_view id) const;
  std::size_t index_of(std::string_view id) const;
  bool contains(std::string_view id) const;

  // Direct out-neighbours (children) of a node, sorted by id.
  const std::vector<std::size_t>& children(std::size_t index) const {
    return children_[index];
  }
  const std::vector<std::size_t>& parents(std::size_t index) const {
    return parents_[index];
  }

  // Returns a copy with gold answers replaced from `answers`; ids absent
  // from the map keep their current answer.
  Qdg with_gold(const std::map<std::string, std::string>& answers) const;

  bool operator==(const Qdg& other) const {
    return graph_id_ == other.graph_id_ && video_id_ == other.video_id_ &&
           edge_types_ == other.edge_types_ && nodes_ == other.nodes_ &&
           edges_ == other.edges_;
  }

 private:
  Qdg() = default;

  std::string graph_id_;
  std::string video_id_;
  std::vector<std::string> edge_types_;
  std::vector<QuestionNode> nodes_;
  std::vector<QdgEdge> edges_;
  std::size_t main_index_ = 0;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::vector<std::size_t>> parents_;
};

/// A node together with its direct children: the unit of consistency
/// tallying.
struct FirstOrderPair {
  std::string parent;
  std::vector<std::string> children;

  bool operator==(const FirstOrderPair&) const = default;
};

/// Main question plus every sub-question in children-before-parents order.
struct QuestionCluster {
  QuestionNode main;
  std::vector<QuestionNode> subs;
  const Qdg* graph = nullptr;
};

Qdg parse_qdg(std::string_view document);
Qdg qdg_from_json(const nlohmann::json& document);
nlohmann::ordered_json qdg_to_json(const Qdg& graph);
// Canonical single-line serialization (sorted nodes/edges, fixed key order).
std::string serialize_qdg(const Qdg& graph);

// One graph per non-empty line. Errors carry the 1-based line number.
std::vector<Qdg> parse_qdg_jsonl(std::string_view text);
std::vector<Qdg> read_qdg_jsonl(const std::string& path);

std::vector<FirstOrderPair> first_order_pairs(const Qdg& graph);

// Children precede their ancestors; ties broken by lexicographic id.
std::vector<std::string> topological_order(const Qdg& graph);

QuestionCluster make_cluster(const Qdg& graph);

}  // namespace va3
