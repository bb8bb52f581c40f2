"""
Finite scenario tree: stages, ancestry, conditional nominal probabilities,
per-node stage data and per-stage robustness radii.

Trees are immutable after construction. Node ids are stable integers
assigned breadth-first by the builders; file round trips are byte-stable.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import (
    IngestionError,
    InputError,
    ShapeError,
    TreeSizeError,
    TreeValidationError,
)
from app.schemas.tree import (
    TREE_FORMAT_VERSION,
    StageDataDocument,
    TreeDocument,
    TreeNodeDocument,
)

logger = logging.getLogger(__name__)

PROBABILITY_TOL = 1e-9
DEFAULT_MAX_NODES = 1_000_000


# ============== Stage data ==============

@dataclass
class StageData:
    """
    Stage-t LP blocks for one node: A·x = B·x_prev + b and
    A_ub·x ≤ B_ub·x_prev + b_ub, with 0 ≤ x ≤ ub.

    Arrays may be shared between nodes (the water model shares A, B, c per
    stage and varies only the right-hand sides).
    """

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    c: np.ndarray
    A_ub: Optional[np.ndarray] = None
    B_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    columns: Optional[list[str]] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m = self.b.size
        self.A = _as_matrix(self.A, m, n, "A")
        self.B = _as_coupling(self.B, m, "B")

        if self.A_ub is not None or self.b_ub is not None:
            if self.A_ub is None or self.b_ub is None:
                raise ShapeError("A_ub and b_ub must be given together")
            self.b_ub = np.asarray(self.b_ub, dtype=float).reshape(-1)
            self.A_ub = _as_matrix(self.A_ub, self.b_ub.size, n, "A_ub")
            if self.B_ub is None:
                self.B_ub = np.zeros((self.b_ub.size, self.B.shape[1]))
            self.B_ub = _as_coupling(self.B_ub, self.b_ub.size, "B_ub")
        elif self.B_ub is not None:
            raise ShapeError("B_ub given without A_ub and b_ub")

        if self.ub is not None:
            self.ub = np.asarray(
                [math.inf if u is None else u for u in self.ub], dtype=float
            )
            if self.ub.size != n:
                raise ShapeError(f"ub has {self.ub.size} entries, expected {n}")
            if np.any(self.ub < 0):
                raise ShapeError("variable upper bounds must be nonnegative")
        if not np.all(np.isfinite(self.c)):
            raise ShapeError("objective coefficients must be finite")
        if self.columns is not None and len(self.columns) != n:
            raise ShapeError(f"{len(self.columns)} column names for {n} variables")

        if self.B_ub is not None and self.B.shape[1] != self.B_ub.shape[1] and self.B.size and self.B_ub.size:
            raise ShapeError("B and B_ub disagree on the ancestor dimension")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.b.size

    @property
    def n_ub_rows(self) -> int:
        return 0 if self.b_ub is None else self.b_ub.size

    @property
    def n_prev(self) -> int:
        """Ancestor decision dimension this node couples to (0 when uncoupled)."""
        widths = [self.B.shape[1]]
        if self.B_ub is not None:
            widths.append(self.B_ub.shape[1])
        return max(widths)

    @property
    def upper_bounds(self) -> np.ndarray:
        return np.full(self.n_vars, math.inf) if self.ub is None else self.ub

    def rhs(self, x_prev: np.ndarray) -> np.ndarray:
        """b + B·x_prev."""
        return self.b + _couple(self.B, x_prev)

    def rhs_ub(self, x_prev: np.ndarray) -> Optional[np.ndarray]:
        """b_ub + B_ub·x_prev, or None without inequality rows."""
        if self.b_ub is None:
            return None
        return self.b_ub + _couple(self.B_ub, x_prev)

    def coupling_gradient(self, dual_eq: np.ndarray, dual_ub: Optional[np.ndarray]) -> np.ndarray:
        """π̂B = π_eq·B + π_ub·B_ub, the gradient of the node value in x_prev."""
        grad = np.zeros(self.n_prev)
        if self.B.size:
            grad[: self.B.shape[1]] += dual_eq @ self.B
        if self.B_ub is not None and self.B_ub.size and dual_ub is not None:
            grad[: self.B_ub.shape[1]] += dual_ub @ self.B_ub
        return grad


def _as_matrix(value: Any, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(rows, cols) if rows * cols == 0 else arr
    if arr.ndim != 2 or arr.shape != (rows, cols):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {(rows, cols)}")
    return arr


def _as_coupling(value: Any, rows: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.size == 0:
        return np.zeros((rows, 0))
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {rows} rows")
    return arr


def _couple(matrix: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
    if matrix.shape[1] == 0:
        return np.zeros(matrix.shape[0])
    x_prev = np.asarray(x_prev, dtype=float)
    if x_prev.size != matrix.shape[1]:
        raise ShapeError(
            f"ancestor decision has {x_prev.size} entries, coupling expects {matrix.shape[1]}"
        )
    return matrix @ x_prev


# ============== Tree ==============

@dataclass(frozen=True)
class TreeNode:
    """A scenario-tree node; `conditional_prob` is q given the ancestor."""

    id: int
    stage: int
    ancestor_id: Optional[int]
    conditional_prob: float
    data_ref: Optional[str] = None
    rho: Optional[float] = None

    @property
    def is_root(self) -> bool:
        return self.ancestor_id is None


@dataclass(frozen=True)
class TreeViolation:
    node_id: Optional[int]
    message: str

    def __str__(self) -> str:
        if self.node_id is None:
            return self.message
        return f"node {self.node_id}: {self.message}"


@dataclass(frozen=True)
class Scenario:
    leaf_id: int
    path: tuple[int, ...]
    probability: float


class ScenarioTree:
    """Staged node set with ancestor/descendant links and per-stage radii."""

    def __init__(
        self,
        nodes: Sequence[TreeNode],
        rho: Sequence[float],
        stage_data: Optional[Mapping[str, StageData]] = None,
        *,
        stage_count: Optional[int] = None,
        initial_cut_bound: float = 0.0,
        allow_zero_probability: bool = False,
        name: Optional[str] = None,
    ):
        self.name = name
        self.rho = tuple(float(r) for r in rho)
        self.stage_data: dict[str, StageData] = dict(stage_data or {})
        self.initial_cut_bound = float(initial_cut_bound)
        self.allow_zero_probability = allow_zero_probability

        self._order = [node.id for node in nodes]
        self._nodes: dict[int, TreeNode] = {}
        self._duplicates: list[int] = []
        for node in nodes:
            if node.id in self._nodes:
                self._duplicates.append(node.id)
            self._nodes[node.id] = node

        self.stage_count = stage_count or max((n.stage for n in nodes), default=0)

        self._stages: dict[int, list[int]] = {}
        self._children: dict[int, list[int]] = {}
        for node_id in sorted(self._nodes):
            node = self._nodes[node_id]
            self._stages.setdefault(node.stage, []).append(node_id)
            if node.ancestor_id is not None:
                self._children.setdefault(node.ancestor_id, []).append(node_id)

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self) -> Iterator[TreeNode]:
        for node_id in sorted(self._nodes):
            yield self._nodes[node_id]

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._nodes

    # ----- structure -----

    @property
    def root(self) -> TreeNode:
        roots = self._stages.get(1, [])
        if len(roots) != 1:
            raise TreeValidationError(f"expected one stage-1 node, found {len(roots)}")
        return self._nodes[roots[0]]

    @property
    def stages(self) -> dict[int, list[int]]:
        return {t: list(ids) for t, ids in self._stages.items()}

    def node(self, node_id: int) -> TreeNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise InputError(f"unknown node id {node_id}")

    def nodes_at(self, stage: int) -> list[int]:
        return list(self._stages.get(stage, []))

    def children(self, node_id: int) -> list[int]:
        return list(self._children.get(node_id, []))

    def is_leaf(self, node_id: int) -> bool:
        return node_id not in self._children

    def leaves(self) -> list[int]:
        return self.nodes_at(self.stage_count)

    def interior_nodes(self) -> list[int]:
        return [nid for t in range(1, self.stage_count) for nid in self.nodes_at(t)]

    def descendant_probabilities(self, node_id: int) -> np.ndarray:
        return np.array(
            [self._nodes[c].conditional_prob for c in self.children(node_id)], dtype=float
        )

    def path(self, node_id: int) -> tuple[int, ...]:
        """Node ids from the root down to `node_id`."""
        path = []
        current: Optional[int] = node_id
        while current is not None:
            path.append(current)
            current = self._nodes[current].ancestor_id
        return tuple(reversed(path))

    # ----- data -----

    def rho_for(self, node_id: int) -> float:
        """ρ^{ω_t}_t: the node override, else the stage value."""
        node = self._nodes[node_id]
        if node.rho is not None:
            return node.rho
        return self.rho[node.stage - 1]

    def data(self, node_id: int) -> StageData:
        ref = self._nodes[node_id].data_ref
        if ref is None or ref not in self.stage_data:
            raise InputError(f"node {node_id} has no stage data")
        return self.stage_data[ref]

    def with_rho(self, rho: Sequence[float]) -> "ScenarioTree":
        """Copy of the tree with new per-stage radii (node overrides dropped)."""
        nodes = [
            TreeNode(n.id, n.stage, n.ancestor_id, n.conditional_prob, n.data_ref)
            for n in self
        ]
        return ScenarioTree(
            nodes,
            rho,
            self.stage_data,
            stage_count=self.stage_count,
            initial_cut_bound=self.initial_cut_bound,
            allow_zero_probability=self.allow_zero_probability,
            name=self.name,
        )

    def with_node_rho(self, overrides: Mapping[int, float]) -> "ScenarioTree":
        """Copy with per-node radii replacing the stage values at the listed nodes."""
        nodes = [
            TreeNode(n.id, n.stage, n.ancestor_id, n.conditional_prob, n.data_ref, overrides.get(n.id, n.rho))
            for n in self
        ]
        return ScenarioTree(
            nodes,
            self.rho,
            self.stage_data,
            stage_count=self.stage_count,
            initial_cut_bound=self.initial_cut_bound,
            allow_zero_probability=self.allow_zero_probability,
            name=self.name,
        )

    def scaled_rho(self, factor: float) -> "ScenarioTree":
        return self.with_rho([r * factor for r in self.rho])


# ============== Validation ==============

def validate(tree: ScenarioTree) -> list[TreeViolation]:
    """Return every invariant violation; an empty list means the tree is valid."""
    violations: list[TreeViolation] = []
    T = tree.stage_count

    for dup in tree._duplicates:
        violations.append(TreeViolation(dup, "duplicate node id"))
    if T < 2:
        violations.append(TreeViolation(None, f"tree needs at least 2 stages, has {T}"))

    roots = tree.nodes_at(1)
    if len(roots) != 1:
        violations.append(TreeViolation(None, f"stage 1 must hold exactly one node, found {len(roots)}"))

    if len(tree.rho) != max(T - 1, 0):
        violations.append(
            TreeViolation(None, f"expected {T - 1} rho values, found {len(tree.rho)}")
        )
    for t, r in enumerate(tree.rho, start=1):
        if not r > 0:
            violations.append(TreeViolation(None, f"rho must be positive (stage {t}: {r:g})"))

    for node in tree:
        if not 1 <= node.stage <= T:
            violations.append(TreeViolation(node.id, f"stage {node.stage} outside 1..{T}"))
        if not 0.0 <= node.conditional_prob <= 1.0:
            violations.append(
                TreeViolation(node.id, f"conditional probability {node.conditional_prob:g} outside [0, 1]")
            )
        if node.rho is not None and not node.rho > 0:
            violations.append(TreeViolation(node.id, f"rho must be positive ({node.rho:g})"))

        if node.stage == 1:
            if node.ancestor_id is not None:
                violations.append(TreeViolation(node.id, "root must not have an ancestor"))
            if abs(node.conditional_prob - 1.0) > PROBABILITY_TOL:
                violations.append(TreeViolation(node.id, "root must have conditional probability 1"))
        elif node.ancestor_id is None or node.ancestor_id not in tree:
            violations.append(TreeViolation(node.id, f"missing ancestor {node.ancestor_id}"))
            continue
        else:
            ancestor = tree.node(node.ancestor_id)
            if ancestor.stage != node.stage - 1:
                violations.append(
                    TreeViolation(node.id, f"ancestor {ancestor.id} is in stage {ancestor.stage}, expected {node.stage - 1}")
                )
            if node.conditional_prob == 0.0 and not tree.allow_zero_probability:
                violations.append(TreeViolation(node.id, "zero-probability branch"))

        if node.stage < T:
            children = tree.children(node.id)
            if not children:
                violations.append(TreeViolation(node.id, "non-leaf node has no descendants"))
            else:
                total = float(tree.descendant_probabilities(node.id).sum())
                if abs(total - 1.0) > PROBABILITY_TOL:
                    violations.append(
                        TreeViolation(node.id, f"conditional probabilities sum {total:.10g} ≠ 1")
                    )

        violations.extend(_data_violations(tree, node))

    return violations


def _data_violations(tree: ScenarioTree, node: TreeNode) -> list[TreeViolation]:
    if node.data_ref is None:
        return []
    if node.data_ref not in tree.stage_data:
        return [TreeViolation(node.id, f"unknown stage data '{node.data_ref}'")]
    data = tree.stage_data[node.data_ref]
    if node.ancestor_id is None:
        if data.n_prev:
            return [TreeViolation(node.id, "root stage data must not couple to an ancestor")]
        return []
    ancestor = tree.node(node.ancestor_id)
    if ancestor.data_ref is None or ancestor.data_ref not in tree.stage_data:
        return []
    expected = tree.stage_data[ancestor.data_ref].n_vars
    if data.n_prev and data.n_prev != expected:
        return [
            TreeViolation(node.id, f"B has {data.n_prev} columns but ancestor has {expected} variables")
        ]
    return []


def ensure_valid(tree: ScenarioTree) -> None:
    violations = validate(tree)
    if violations:
        head = "; ".join(str(v) for v in violations[:5])
        more = f" (+{len(violations) - 5} more)" if len(violations) > 5 else ""
        raise TreeValidationError(f"invalid scenario tree: {head}{more}", violations)


# ============== Construction ==============

PathRule = Callable[[tuple[int, ...]], Any]


def balanced_node_count(branching: Sequence[int]) -> int:
    total, width = 1, 1
    for count in branching:
        width *= count
        total += width
    return total


def build_balanced(
    T: int,
    branching: Sequence[int],
    prob_rule: Optional[Callable[[tuple[int, ...]], float]] = None,
    data_rule: Optional[Callable[[tuple[int, ...]], Optional[StageData]]] = None,
    rho_rule: Union[Callable[[int], float], float] = 0.1,
    max_nodes: int = DEFAULT_MAX_NODES,
    initial_cut_bound: float = 0.0,
    name: Optional[str] = None,
) -> ScenarioTree:
    """
    Build a balanced tree breadth-first.

    Args:
        T: Stage count.
        branching: Children per node for stages 1..T-1.
        prob_rule: q for the node at a child-index path; uniform by default.
        data_rule: Stage data for the node at a path; None leaves the node without data.
        rho_rule: ρ_t per stage, or one value for all stages.
    """
    if len(branching) != T - 1:
        raise InputError(f"branching needs {T - 1} entries for {T} stages, got {len(branching)}")
    if any(count < 1 for count in branching):
        raise InputError("branching counts must be >= 1")
    total = balanced_node_count(branching)
    if total > max_nodes:
        raise TreeSizeError(f"balanced tree would have {total} nodes, cap is {max_nodes}")

    nodes: list[TreeNode] = []
    stage_data: dict[str, StageData] = {}
    frontier: list[tuple[int, tuple[int, ...]]] = [(0, ())]
    next_id = 0

    def add(node_id: int, stage: int, ancestor: Optional[int], path: tuple[int, ...], q: float):
        data_ref = None
        if data_rule is not None:
            data = data_rule(path)
            if data is not None:
                data_ref = str(node_id)
                stage_data[data_ref] = data
        nodes.append(TreeNode(node_id, stage, ancestor, q, data_ref))

    add(0, 1, None, (), 1.0)
    next_id = 1
    for t in range(2, T + 1):
        width = branching[t - 2]
        new_frontier = []
        for parent_id, parent_path in frontier:
            for k in range(width):
                path = parent_path + (k,)
                q = prob_rule(path) if prob_rule is not None else 1.0 / width
                add(next_id, t, parent_id, path, q)
                new_frontier.append((next_id, path))
                next_id += 1
        frontier = new_frontier

    rho = [rho_rule(t) if callable(rho_rule) else float(rho_rule) for t in range(1, T)]
    logger.debug(f"Built balanced tree with {len(nodes)} nodes and {len(frontier)} leaves")
    return ScenarioTree(
        nodes, rho, stage_data, stage_count=T, initial_cut_bound=initial_cut_bound, name=name
    )


def enumerate_scenarios(tree: ScenarioTree) -> list[Scenario]:
    """One entry per leaf with its root-to-leaf path and nominal path probability."""
    path_prob: dict[int, float] = {tree.root.id: 1.0}
    for t in range(2, tree.stage_count + 1):
        for node_id in tree.nodes_at(t):
            node = tree.node(node_id)
            path_prob[node_id] = path_prob[node.ancestor_id] * node.conditional_prob
    return [Scenario(leaf, tree.path(leaf), path_prob[leaf]) for leaf in tree.leaves()]


# ============== Serialization ==============

def _matrix_to_list(matrix: Optional[np.ndarray]) -> Optional[list[list[float]]]:
    if matrix is None:
        return None
    return [list(map(float, row)) for row in matrix]


def stage_data_to_document(data: StageData) -> StageDataDocument:
    ub = None
    if data.ub is not None:
        ub = [None if math.isinf(u) else float(u) for u in data.ub]
    return StageDataDocument(
        A=_matrix_to_list(data.A),
        B=_matrix_to_list(data.B),
        b=data.b.tolist(),
        c=data.c.tolist(),
        A_ub=_matrix_to_list(data.A_ub),
        B_ub=_matrix_to_list(data.B_ub),
        b_ub=None if data.b_ub is None else data.b_ub.tolist(),
        ub=ub,
        columns=data.columns,
    )


def stage_data_from_document(doc: StageDataDocument) -> StageData:
    return StageData(
        A=doc.A, B=doc.B, b=doc.b, c=doc.c,
        A_ub=doc.A_ub, B_ub=doc.B_ub, b_ub=doc.b_ub,
        ub=doc.ub, columns=doc.columns,
    )


def to_document(tree: ScenarioTree) -> TreeDocument:
    return TreeDocument(
        version=TREE_FORMAT_VERSION,
        name=tree.name,
        stages=tree.stage_count,
        rho=list(tree.rho),
        initial_cut_bound=tree.initial_cut_bound,
        allow_zero_probability=tree.allow_zero_probability,
        nodes=[
            TreeNodeDocument(
                id=n.id, stage=n.stage, ancestor=n.ancestor_id,
                q=n.conditional_prob, data=n.data_ref, rho=n.rho,
            )
            for n in tree
        ],
        stage_data={ref: stage_data_to_document(d) for ref, d in sorted(tree.stage_data.items())},
    )


def from_document(doc: TreeDocument) -> ScenarioTree:
    if doc.version != TREE_FORMAT_VERSION:
        raise InputError(f"unsupported tree format version {doc.version}")
    stage_data = {}
    for ref, data_doc in doc.stage_data.items():
        try:
            stage_data[ref] = stage_data_from_document(data_doc)
        except ShapeError as e:
            raise ShapeError(f"stage data '{ref}': {e.detail}")
    nodes = [TreeNode(n.id, n.stage, n.ancestor, n.q, n.data, n.rho) for n in doc.nodes]
    return ScenarioTree(
        nodes,
        doc.rho,
        stage_data,
        stage_count=doc.stages,
        initial_cut_bound=doc.initial_cut_bound,
        allow_zero_probability=doc.allow_zero_probability,
        name=doc.name,
    )


def dumps_tree(tree: ScenarioTree) -> str:
    return to_document(tree).model_dump_json(indent=2) + "\n"


_LINE_RE = re.compile(r"line (\d+)")


def loads_tree(text: str, source: Optional[str] = None) -> ScenarioTree:
    """Parse a tree document; malformed input raises InputError anchored to its line."""
    try:
        doc = TreeDocument.model_validate_json(text)
    except ValidationError as e:
        raise validation_to_input_error(e, source)
    return from_document(doc)


def validation_to_input_error(exc: ValidationError, source: Optional[str] = None) -> InputError:
    """Condense a pydantic ValidationError into one line-anchored InputError."""
    first = exc.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ()))
    message = first.get("msg", str(exc))
    line = None
    match = _LINE_RE.search(message)
    if match:
        line = int(match.group(1))
    detail = f"{location}: {message}" if location else message
    return InputError(detail, line=line, source=source)


def load_tree(path: Union[str, Path]) -> ScenarioTree:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IngestionError(f"cannot read tree file {path}: {e}")
    return loads_tree(text, source=str(path))


def save_tree(tree: ScenarioTree, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_tree(tree), encoding="utf-8")
