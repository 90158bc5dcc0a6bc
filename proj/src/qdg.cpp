#include "va3/qdg.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "va3/text.hpp"

namespace va3 {

std::string_view to_string(QuestionKind kind) {
  return kind == QuestionKind::kBinary ? "binary" : "open";
}

std::string_view to_string(QuestionRole role) {
  switch (role) {
    case QuestionRole::kMain:
      return "main";
    case QuestionRole::kIntermediate:
      return "intermediate";
    case QuestionRole::kLeaf:
      return "leaf";
  }
  return "leaf";
}

namespace {

std::string in_graph(const std::string& graph_id) {
  return " (graph '" + graph_id + "')";
}

// Kahn's algorithm over reversed edges: repeatedly emit the smallest-id node
// whose children have all been emitted. Returns fewer than n indices when the
// edge set has a cycle.
std::vector<std::size_t> children_first_order(
    const std::vector<std::string>& ids,
    const std::vector<std::vector<std::size_t>>& children,
    const std::vector<std::vector<std::size_t>>& parents) {
  const std::size_t n = ids.size();
  std::vector<std::size_t> pending(n);
  auto by_id = [&](std::size_t a, std::size_t b) { return ids[a] > ids[b]; };
  std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(by_id)>
      ready(by_id);
  for (std::size_t i = 0; i < n; ++i) {
    pending[i] = children[i].size();
    if (pending[i] == 0) ready.push(i);
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    order.push_back(i);
    for (std::size_t p : parents[i]) {
      if (--pending[p] == 0) ready.push(p);
    }
  }
  return order;
}

QuestionKind parse_kind(const nlohmann::json& value, const std::string& where) {
  if (!value.is_string()) throw SchemaError("node kind must be a string" + where);
  const auto& s = value.get_ref<const std::string&>();
  if (s == "binary") return QuestionKind::kBinary;
  if (s == "open") return QuestionKind::kOpen;
  throw SchemaError("unknown node kind '" + s + "'" + where);
}

QuestionRole parse_role(const nlohmann::json& value, const std::string& where) {
  if (!value.is_string()) throw SchemaError("node role must be a string" + where);
  const auto& s = value.get_ref<const std::string&>();
  if (s == "main") return QuestionRole::kMain;
  if (s == "intermediate") return QuestionRole::kIntermediate;
  if (s == "leaf") return QuestionRole::kLeaf;
  throw SchemaError("unknown node role '" + s + "'" + where);
}

const std::string& require_string(const nlohmann::json& object,
                                  const char* key, const std::string& where) {
  auto it = object.find(key);
  if (it == object.end() || !it->is_string()) {
    throw SchemaError(std::string("missing string field '") + key + "'" + where);
  }
  return it->get_ref<const std::string&>();
}

}  // namespace

Qdg Qdg::build(std::string graph_id, std::string video_id,
               std::vector<std::string> edge_types,
               std::vector<QuestionNode> nodes, std::vector<QdgEdge> edges) {
  const std::string where = in_graph(graph_id);
  std::sort(edge_types.begin(), edge_types.end());
  edge_types.erase(std::unique(edge_types.begin(), edge_types.end()),
                   edge_types.end());

  std::sort(nodes.begin(), nodes.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id.empty()) throw SchemaError("empty node id" + where);
    if (i > 0 && nodes[i].id == nodes[i - 1].id) {
      throw DuplicateIdError("duplicate node id '" + nodes[i].id + "'" + where);
    }
    const auto& gold = nodes[i].gold_answer;
    if (nodes[i].kind == QuestionKind::kBinary && gold) {
      const std::string g = normalize_answer(*gold);
      if (g != "yes" && g != "no") {
        throw SchemaError("binary node '" + nodes[i].id +
                          "' has non Yes/No answer '" + *gold + "'" + where);
      }
    }
  }
  if (nodes.empty()) throw RootError("graph has no nodes" + where);

  auto find = [&](const std::string& id) -> std::optional<std::size_t> {
    auto it = std::lower_bound(
        nodes.begin(), nodes.end(), id,
        [](const QuestionNode& n, const std::string& key) { return n.id < key; });
    if (it == nodes.end() || it->id != id) return std::nullopt;
    return static_cast<std::size_t>(it - nodes.begin());
  };

  std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) {
    return std::tie(a.parent, a.child, a.op) < std::tie(b.parent, b.child, b.op);
  });
  const std::size_t n = nodes.size();
  std::vector<std::vector<std::size_t>> children(n), parents(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& edge = edges[e];
    const auto p = find(edge.parent);
    const auto c = find(edge.child);
    if (!p || !c) {
      throw DanglingEdgeError("edge " + edge.parent + "->" + edge.child +
                              " references unknown node '" +
                              (!p ? edge.parent : edge.child) + "'" + where);
    }
    if (*p == *c) {
      throw CycleError("self-loop on node '" + edge.parent + "'" + where);
    }
    if (e > 0 && edges[e - 1].parent == edge.parent &&
        edges[e - 1].child == edge.child) {
      throw SchemaError("duplicate edge " + edge.parent + "->" + edge.child +
                        where);
    }
    if (!std::binary_search(edge_types.begin(), edge_types.end(), edge.op)) {
      throw UnknownOpError("edge " + edge.parent + "->" + edge.child +
                           " uses undeclared op '" + edge.op + "'" + where);
    }
    children[*p].push_back(*c);
    parents[*c].push_back(*p);
  }
  for (auto& list : children) std::sort(list.begin(), list.end());
  for (auto& list : parents) std::sort(list.begin(), list.end());

  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& node : nodes) ids.push_back(node.id);
  if (children_first_order(ids, children, parents).size() != n) {
    throw CycleError("edge set contains a directed cycle" + where);
  }

  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < n; ++i) {
    if (parents[i].empty()) roots.push_back(i);
  }
  if (roots.size() != 1) {
    throw RootError("expected exactly one node without incoming edges, found " +
                    std::to_string(roots.size()) + where);
  }
  // Acyclic with a single source: every node is reachable from it.
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_root = i == roots.front();
    const QuestionRole expected =
        is_root ? QuestionRole::kMain
        : children[i].empty() ? QuestionRole::kLeaf
                              : QuestionRole::kIntermediate;
    if (nodes[i].role != expected) {
      if (is_root || nodes[i].role == QuestionRole::kMain) {
        throw RootError("node '" + nodes[i].id + "' has role '" +
                        std::string(to_string(nodes[i].role)) +
                        "' but the root must be the only main node" + where);
      }
      throw SchemaError("node '" + nodes[i].id + "' has role '" +
                        std::string(to_string(nodes[i].role)) +
                        "', expected '" + std::string(to_string(expected)) +
                        "'" + where);
    }
  }

  Qdg g;
  g.graph_id_ = std::move(graph_id);
  g.video_id_ = std::move(video_id);
  g.edge_types_ = std::move(edge_types);
  g.nodes_ = std::move(nodes);
  g.edges_ = std::move(edges);
  g.main_index_ = roots.front();
  g.children_ = std::move(children);
  g.parents_ = std::move(parents);
  return g;
}

std::size_t Qdg::index_of(std::string_view id) const {
  auto it = std::lower_bound(
      nodes_.begin(), nodes_.end(), id,
      [](const QuestionNode& n, std::string_view key) { return n.id < key; });
  if (it == nodes_.end() || it->id != id) {
    throw IndexError("no node '" + std::string(id) + "'" + in_graph(graph_id_));
  }
  return static_cast<std::size_t>(it - nodes_.begin());
}

bool Qdg::contains(std::string_view id) const {
  auto it = std::lower_bound(
      nodes_.begin(), nodes_.end(), id,
      [](const QuestionNode& n, std::string_view key) { return n.id < key; });
  return it != nodes_.end() && it->id == id;
}

const QuestionNode& Qdg::node(std::string_view id) const {
  return nodes_[index_of(id)];
}

Qdg Qdg::with_gold(const std::map<std::string, std::string>& answers) const {
  std::vector<QuestionNode> nodes = nodes_;
  for (auto& node : nodes) {
    auto it = answers.find(node.id);
    if (it != answers.end()) node.gold_answer = it->second;
  }
  return build(graph_id_, video_id_, edge_types_, std::move(nodes), edges_);
}

Qdg qdg_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw SchemaError("graph document must be an object");
  const std::string graph_id = require_string(doc, "graph_id", "");
  const std::string where = in_graph(graph_id);
  const std::string video_id = require_string(doc, "video_id", where);

  auto array_field = [&](const char* key) -> const nlohmann::json& {
    auto it = doc.find(key);
    if (it == doc.end() || !it->is_array()) {
      throw SchemaError(std::string("missing array field '") + key + "'" + where);
    }
    return *it;
  };

  std::vector<std::string> edge_types;
  for (const auto& t : array_field("edge_types")) {
    if (!t.is_string()) throw SchemaError("edge_types entries must be strings" + where);
    edge_types.push_back(t.get<std::string>());
  }

  std::vector<QuestionNode> nodes;
  for (const auto& n : array_field("nodes")) {
    if (!n.is_object()) throw SchemaError("node entries must be objects" + where);
    QuestionNode node;
    node.id = require_string(n, "id", where);
    node.text = require_string(n, "text", where);
    const std::string at = " for node '" + node.id + "'" + where;
    if (!n.contains("kind")) throw SchemaError("missing field 'kind'" + at);
    if (!n.contains("role")) throw SchemaError("missing field 'role'" + at);
    node.kind = parse_kind(n.at("kind"), at);
    node.role = parse_role(n.at("role"), at);
    if (auto it = n.find("answer"); it != n.end() && !it->is_null()) {
      if (!it->is_string()) throw SchemaError("answer must be a string or null" + at);
      node.gold_answer = it->get<std::string>();
    }
    nodes.push_back(std::move(node));
  }

  std::vector<QdgEdge> edges;
  for (const auto& e : array_field("edges")) {
    if (!e.is_object()) throw SchemaError("edge entries must be objects" + where);
    edges.push_back({require_string(e, "parent", where),
                     require_string(e, "child", where),
                     require_string(e, "op", where)});
  }
  return Qdg::build(graph_id, video_id, std::move(edge_types), std::move(nodes),
                    std::move(edges));
}

Qdg parse_qdg(std::string_view document) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("malformed JSON: ") + e.what());
  }
  return qdg_from_json(doc);
}

nlohmann::ordered_json qdg_to_json(const Qdg& graph) {
  nlohmann::ordered_json doc;
  doc["graph_id"] = graph.graph_id();
  doc["video_id"] = graph.video_id();
  doc["edge_types"] = graph.edge_types();
  auto nodes = nlohmann::ordered_json::array();
  for (const auto& node : graph.nodes()) {
    nlohmann::ordered_json n;
    n["id"] = node.id;
    n["text"] = node.text;
    n["kind"] = to_string(node.kind);
    n["role"] = to_string(node.role);
    if (node.gold_answer) {
      n["answer"] = *node.gold_answer;
    } else {
      n["answer"] = nullptr;
    }
    nodes.push_back(std::move(n));
  }
  doc["nodes"] = std::move(nodes);
  auto edges = nlohmann::ordered_json::array();
  for (const auto& edge : graph.edges()) {
    nlohmann::ordered_json e;
    e["parent"] = edge.parent;
    e["child"] = edge.child;
    e["op"] = edge.op;
    edges.push_back(std::move(e));
  }
  doc["edges"] = std::move(edges);
  return doc;
}

std::string serialize_qdg(const Qdg& graph) { return qdg_to_json(graph).dump(); }

std::vector<Qdg> parse_qdg_jsonl(std::string_view text) {
  std::vector<Qdg> graphs;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      graphs.push_back(parse_qdg(line));
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return graphs;
}

std::vector<Qdg> read_qdg_jsonl(const std::string& path) {
  return parse_qdg_jsonl(read_file(path));
}

std::vector<FirstOrderPair> first_order_pairs(const Qdg& graph) {
  std::vector<FirstOrderPair> pairs;
  const auto& nodes = graph.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& kids = graph.children(i);
    if (kids.empty()) continue;
    FirstOrderPair pair{nodes[i].id, {}};
    for (std::size_t c : kids) pair.children.push_back(nodes[c].id);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

std::vector<std::string> topological_order(const Qdg& graph) {
  const auto& nodes = graph.nodes();
  std::vector<std::string> ids;
  std::vector<std::vector<std::size_t>> children, parents;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    ids.push_back(nodes[i].id);
    children.push_back(graph.children(i));
    parents.push_back(graph.parents(i));
  }
  std::vector<std::string> order;
  for (std::size_t i : children_first_order(ids, children, parents)) {
    order.push_back(ids[i]);
  }
  return order;
}

QuestionCluster make_cluster(const Qdg& graph) {
  QuestionCluster cluster;
  cluster.main = graph.main();
  cluster.graph = &graph;
  for (const auto& id : topological_order(graph)) {
    if (id != graph.main().id) cluster.subs.push_back(graph.node(id));
  }
  return cluster;
}

}  // namespace va3
