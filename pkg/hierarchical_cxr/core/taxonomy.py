"""
层次化胸片多标签系统 - 概念分类树模块

三棵概念树（影像学表现、鉴别诊断、解剖定位）加上一组扁平的特殊标签，
以 networkx 有向图（父 -> 子）保存，并提供稠密的规范索引。
"""

import hashlib
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple, Union

import networkx as nx

from hierarchical_cxr.core.errors import TaxonomyError

logger = logging.getLogger(__name__)

TREES = ("findings", "diagnoses", "localizations")
SPECIAL = "special"


@dataclass(frozen=True)
class TaxonomyNode:
    """分类树中的一个概念节点；节点身份只由 id 决定，display_name 仅作注释"""

    id: str
    display_name: str
    parent: Optional[str]
    tree: str
    special: bool = False


@dataclass(frozen=True)
class ValidationIssue:
    """校验报告中的一条问题"""

    kind: str
    node_id: Optional[str]
    message: str
    line: Optional[int] = None

    def __str__(self):
        where = f" line {self.line}" if self.line is not None else ""
        return f"[{self.kind}] {self.node_id!r}{where}: {self.message}"


class Taxonomy:
    """概念森林，构造后不可变，可在多线程间共享读取"""

    def __init__(self, nodes: Iterable[TaxonomyNode], lines: Optional[Dict[Tuple[str, int], int]] = None):
        """
        初始化分类树（不做校验，校验见 validate）

        Args:
            nodes: 按规范顺序排列的节点
            lines: (id, 第几次出现) -> 源文件行号，用于报错定位
        """
        self._raw_nodes: Tuple[TaxonomyNode, ...] = tuple(nodes)
        self._lines = dict(lines or {})

        # 同名节点只保留第一次出现，重复由 validate 报告
        self._nodes: Dict[str, TaxonomyNode] = {}
        for node in self._raw_nodes:
            self._nodes.setdefault(node.id, node)
        self._order: Tuple[str, ...] = tuple(self._nodes)
        self._index: Dict[str, int] = {node_id: i for i, node_id in enumerate(self._order)}

        # 有向图：父 -> 子
        self.graph = nx.DiGraph()
        for node_id, node in self._nodes.items():
            self.graph.add_node(node_id, name=node.display_name, tree=node.tree, special=node.special)
        for node_id, node in self._nodes.items():
            if node.parent is not None and node.parent in self._nodes:
                self.graph.add_edge(node.parent, node_id)

    # ------------------------------------------------------------------
    # 基本访问
    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._order)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._nodes

    def __iter__(self):
        return iter(self._order)

    @property
    def nodes(self) -> Tuple[TaxonomyNode, ...]:
        """全部声明过的节点（含重复声明），校验使用"""
        return self._raw_nodes

    @property
    def node_ids(self) -> List[str]:
        """规范顺序下的节点 id"""
        return list(self._order)

    def node(self, node_id: str) -> TaxonomyNode:
        self._require(node_id)
        return self._nodes[node_id]

    def index_of(self, node_id: str) -> int:
        self._require(node_id)
        return self._index[node_id]

    def id_of(self, index: int) -> str:
        if not 0 <= index < len(self._order):
            raise TaxonomyError(f"索引越界: {index}，节点数 {len(self._order)}")
        return self._order[index]

    def line_of(self, node_id: str, occurrence: int = 0) -> Optional[int]:
        return self._lines.get((node_id, occurrence))

    def _require(self, node_id: str):
        if node_id not in self._nodes:
            raise TaxonomyError("未知节点", node_id=node_id)

    # ------------------------------------------------------------------
    # 遍历
    # ------------------------------------------------------------------

    def parent(self, node_id: str) -> Optional[str]:
        return self.node(node_id).parent

    def children(self, node_id: str) -> List[str]:
        """子节点，按规范顺序"""
        self._require(node_id)
        return sorted(self.graph.successors(node_id), key=self._index.__getitem__)

    def ancestors(self, node_id: str) -> List[str]:
        """
        祖先链：父、祖父……直到树根，不含自身

        Args:
            node_id: 节点 id

        Returns:
            由近到远的祖先列表；树根和特殊标签返回空列表
        """
        self._require(node_id)
        chain = []
        seen = {node_id}
        current = self._nodes[node_id].parent
        while current is not None and current in self._nodes:
            if current in seen:
                raise TaxonomyError("检测到环 (cycle detected)", node_id=current)
            chain.append(current)
            seen.add(current)
            current = self._nodes[current].parent
        return chain

    def descendants(self, node_id: str) -> Set[str]:
        """子节点的传递闭包，不含自身"""
        self._require(node_id)
        return set(nx.descendants(self.graph, node_id))

    def roots(self) -> List[str]:
        return [i for i in self._order if self._nodes[i].parent is None and not self._nodes[i].special]

    def special_ids(self) -> List[str]:
        return [i for i in self._order if self._nodes[i].special]

    def leaves(self) -> List[str]:
        """非根、非特殊、没有子节点的节点（规范顺序）"""
        return [
            i for i in self._order
            if not self._nodes[i].special
            and self._nodes[i].parent is not None
            and self.graph.out_degree(i) == 0
        ]

    def edges(self) -> List[Tuple[str, str]]:
        """(父, 子) 边，按子节点规范顺序"""
        return [
            (self._nodes[i].parent, i) for i in self._order
            if self._nodes[i].parent is not None and self._nodes[i].parent in self._nodes
        ]

    # ------------------------------------------------------------------
    # 序列化
    # ------------------------------------------------------------------

    def serialize(self) -> Dict[str, Any]:
        """
        导出分类树文档

        嵌套先序能复现规范顺序时输出 trees 嵌套格式，否则输出逐条的扁平 nodes 列表。

        Returns:
            可直接 json.dump 的字典；再次解析得到相同的 id、父节点与顺序
        """
        def entry(node_id: str) -> Dict[str, Any]:
            node = self._nodes[node_id]
            item: Dict[str, Any] = {"id": node.id, "name": node.display_name}
            kids = self.children(node_id)
            if kids:
                item["children"] = [entry(k) for k in kids]
            return item

        roots = self.roots()
        specials = self.special_ids()
        nested_order = [n for r in roots for n in [r, *self._preorder(r)]] + specials
        if nested_order == list(self._order) and len({self._nodes[r].tree for r in roots}) == len(roots):
            document: Dict[str, Any] = {"trees": {self._nodes[r].tree: entry(r) for r in roots}}
            if specials:
                document[SPECIAL] = [{"id": s, "name": self._nodes[s].display_name} for s in specials]
            return document

        flat = []
        for node_id in self._order:
            node = self._nodes[node_id]
            item = {"id": node.id, "name": node.display_name}
            if node.special:
                item["special"] = True
            elif node.parent is None:
                item["tree"] = node.tree
            else:
                item["parent"] = node.parent
            flat.append(item)
        return {"nodes": flat}

    def _preorder(self, node_id: str) -> List[str]:
        """node_id 之下的先序遍历（不含自身）"""
        out = []
        for child in self.children(node_id):
            out.append(child)
            out.extend(self._preorder(child))
        return out

    def checksum(self) -> str:
        """规范顺序下 (id, parent, tree, special) 的 sha256 摘要"""
        payload = [
            [n.id, n.parent, n.tree, n.special]
            for n in (self._nodes[i] for i in self._order)
        ]
        text = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def render_tree(self) -> str:
        """渲染为缩进文本树（├── / └── 样式）"""
        titles = {
            "findings": "Radiological Findings",
            "diagnoses": "Differential diagnosis",
            "localizations": "Localization",
        }
        lines: List[str] = []

        def walk(node_id: str, prefix: str):
            kids = self.children(node_id)
            for k, child in enumerate(kids):
                last = k == len(kids) - 1
                lines.append(f"{prefix}{'└── ' if last else '├── '}{self._nodes[child].display_name}")
                walk(child, prefix + ("    " if last else "│   "))

        for root in self.roots():
            node = self._nodes[root]
            lines.append(f"{titles.get(node.tree, node.tree)} [{node.display_name}]")
            walk(root, "")
        specials = self.special_ids()
        if specials:
            lines.append("Special labels")
            for k, s in enumerate(specials):
                lines.append(f"{'└── ' if k == len(specials) - 1 else '├── '}{self._nodes[s].display_name}")
        return "\n".join(lines)

    def visualize(self, output_file: str = "taxonomy.html") -> str:
        """用 pyvis 输出交互式 HTML 图"""
        from hierarchical_cxr.utils.visualization import visualize_taxonomy

        return visualize_taxonomy(self, output_file)

    def __repr__(self):
        return f"Taxonomy(N={len(self)}, roots={self.roots()})"


# ----------------------------------------------------------------------
# 解析
# ----------------------------------------------------------------------

_ID_PATTERN = re.compile(r'"id"\s*:\s*"((?:[^"\\]|\\.)*)"')


def _locate_ids(text: str) -> Dict[Tuple[str, int], int]:
    """扫描原始文本，记录每个 id 第 k 次出现所在的行号"""
    lines: Dict[Tuple[str, int], int] = {}
    counts: Dict[str, int] = defaultdict(int)
    for match in _ID_PATTERN.finditer(text):
        node_id = json.loads(f'"{match.group(1)}"')
        line = text.count("\n", 0, match.start()) + 1
        lines[(node_id, counts[node_id])] = line
        counts[node_id] += 1
    return lines


def _read_source(source: Union[str, Path, Dict[str, Any]]) -> Tuple[Optional[Dict[str, Any]], str]:
    if isinstance(source, dict):
        return source, json.dumps(source, ensure_ascii=False, indent=2)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        if not path.exists():
            raise TaxonomyError(f"分类树文件不存在: {path}")
        text = path.read_text(encoding="utf-8")
    else:
        text = source
    if not text.strip():
        return None, text
    try:
        return json.loads(text), text
    except json.JSONDecodeError as e:
        raise TaxonomyError(f"分类树文件不是合法的 JSON: {e.msg}", line=e.lineno) from e


def _collect_nodes(document: Dict[str, Any]) -> List[TaxonomyNode]:
    """按文档顺序展开所有节点声明（trees / nodes / special 三段按出现先后处理）"""
    collected: List[TaxonomyNode] = []

    def walk(entry: Dict[str, Any], parent: Optional[str], tree: str):
        if not isinstance(entry, dict) or "id" not in entry:
            raise TaxonomyError(f"节点条目缺少 id 字段: {entry!r}")
        node_id = str(entry["id"])
        declared_parent = entry.get("parent", parent)
        collected.append(TaxonomyNode(
            id=node_id,
            display_name=str(entry.get("name", node_id)),
            parent=declared_parent,
            tree=tree,
        ))
        for child in entry.get("children", []) or []:
            walk(child, node_id, tree)

    def flat(entry: Dict[str, Any]):
        # 扁平条目：显式给出 parent；树根带 tree，特殊标签带 special
        node_id = str(entry.get("id", ""))
        tree = entry.get("tree", "") or ""
        if tree and tree not in TREES:
            raise TaxonomyError(f"未知的树名: {tree}，应为 {', '.join(TREES)}", node_id=node_id)
        special = bool(entry.get("special", False))
        collected.append(TaxonomyNode(
            id=node_id,
            display_name=str(entry.get("name", node_id)),
            parent=entry.get("parent"),
            tree=SPECIAL if special else tree,
            special=special,
        ))

    def specials(entry: Dict[str, Any]):
        node_id = str(entry.get("id", ""))
        collected.append(TaxonomyNode(
            id=node_id,
            display_name=str(entry.get("name", node_id)),
            parent=entry.get("parent"),
            tree=SPECIAL,
            special=True,
        ))
        # 特殊标签不允许有子节点，留给 validate 报告
        for child in entry.get("children", []) or []:
            collected.append(TaxonomyNode(
                id=str(child.get("id", "")),
                display_name=str(child.get("name", child.get("id", ""))),
                parent=node_id,
                tree=SPECIAL,
                special=True,
            ))

    for key, value in document.items():
        if key == "trees":
            for tree, root in (value or {}).items():
                if tree not in TREES:
                    raise TaxonomyError(f"未知的树名: {tree}，应为 {', '.join(TREES)}")
                walk(root, None, tree)
        elif key == "nodes":
            for entry in value or []:
                flat(entry)
        elif key == SPECIAL:
            for entry in value or []:
                specials(entry)

    # 扁平条目所属的树由父链决定
    resolved = {n.id: n for n in collected}
    for k, node in enumerate(collected):
        if node.tree:
            continue
        tree, seen, current = "", set(), node.parent
        while current is not None and current in resolved and current not in seen:
            seen.add(current)
            if resolved[current].tree:
                tree = resolved[current].tree
                break
            current = resolved[current].parent
        collected[k] = TaxonomyNode(node.id, node.display_name, node.parent, tree)
    return collected


def validate(t: Taxonomy) -> List[ValidationIssue]:
    """
    检查分类树不变量

    Args:
        t: 分类树（可以是未经校验构造的）

    Returns:
        问题列表；合法的森林返回空列表
    """
    issues: List[ValidationIssue] = []
    nodes = t.nodes
    if not nodes:
        return [ValidationIssue("empty", None, "分类树文档为空")]

    occurrences: Dict[str, int] = defaultdict(int)
    first: Dict[str, TaxonomyNode] = {}
    for node in nodes:
        k = occurrences[node.id]
        occurrences[node.id] += 1
        if not node.id:
            issues.append(ValidationIssue("empty-id", node.id, "节点 id 为空", t.line_of(node.id, k)))
            continue
        if k > 0:
            issues.append(ValidationIssue("duplicate-id", node.id, "重复的节点 id", t.line_of(node.id, k)))
            continue
        first[node.id] = node

    present_trees = {n.tree for n in first.values() if n.parent is None and not n.special}
    for tree in TREES:
        if tree not in present_trees:
            issues.append(ValidationIssue("missing-tree", None, f"缺少树根: {tree}"))

    for node in first.values():
        line = t.line_of(node.id)
        if node.special:
            if node.parent is not None:
                issues.append(ValidationIssue("special-structure", node.id, "特殊标签不能位于树内或带有子节点", line))
            continue
        if node.parent is None:
            if node.tree not in TREES:
                issues.append(ValidationIssue("orphan", node.id, "节点既不是树根也没有父节点", line))
            continue
        if node.parent == node.id:
            issues.append(ValidationIssue("cycle", node.id, "检测到环 (cycle detected)", line))
            continue
        if node.parent not in first:
            issues.append(ValidationIssue("orphan", node.id, f"父节点 {node.parent!r} 不存在", line))
            continue
        if first[node.parent].special:
            issues.append(ValidationIssue("special-structure", node.id, "特殊标签不能有子节点", line))

    # 沿父链查找环
    reported: Set[str] = set()
    for node in first.values():
        seen: List[str] = []
        current = node.id
        while current is not None and current in first and current not in seen:
            seen.append(current)
            current = first[current].parent
        if current is not None and current in seen:
            cycle = seen[seen.index(current):]
            key = min(cycle)
            if key not in reported and len(cycle) > 1:
                reported.add(key)
                issues.append(ValidationIssue("cycle", key, f"检测到环 (cycle detected): {' -> '.join(cycle)}", t.line_of(key)))
    return issues


def parse_taxonomy(source: Union[str, Path, Dict[str, Any]], include_special: bool = True) -> Taxonomy:
    """
    解析并校验分类树文档

    Args:
        source: 文件路径、JSON 文本或已解析的字典
        include_special: 是否把特殊标签纳入规范索引

    Returns:
        校验通过、索引已确定的 Taxonomy
    """
    document, text = _read_source(source)
    if not document:
        raise TaxonomyError("分类树文档为空 (empty document)")

    lines = _locate_ids(text)
    raw = Taxonomy(_collect_nodes(document), lines)
    issues = validate(raw)
    if issues:
        for issue in issues:
            logger.error(f"分类树校验失败: {issue}")
        head = issues[0]
        raise TaxonomyError(head.message, node_id=head.node_id, line=head.line)

    # 规范索引即文档顺序
    ordered = list(raw.nodes)
    if not include_special:
        ordered = [n for n in ordered if not n.special]
    taxonomy = Taxonomy(ordered, lines)
    logger.info(f"已加载分类树: {len(taxonomy)} 个节点，{len(taxonomy.leaves())} 个叶节点")
    return taxonomy


def save_taxonomy(t: Taxonomy, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(t.serialize(), ensure_ascii=False, indent=2), encoding="utf-8")
    return path
