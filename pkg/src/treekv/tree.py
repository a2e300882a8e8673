"""Query-dependent context trees over a chunk's token range.

A tree is grown depth-first from the root: each selected node is split in
two, one child is chosen by a branch policy and expanded further, the other
is preserved. At the last level both children are preserved. Preserved nodes
are then encoded and downsampled with a per-level keep ratio.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import ConfigError, UsageError

DEFAULT_MIN_LEN = 16


class SplitTooShort(ValueError):
    pass


class NodeStatus(enum.Enum):
    EXPANDED = "expanded"
    PRESERVED = "preserved"


class Branch(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Policy(enum.Enum):
    ALWAYS_RIGHT = "always_right"
    ALWAYS_LEFT = "always_left"
    RANDOM = "random"
    QUERY_AWARE = "query_aware"


@dataclass(frozen=True)
class TreeNode:
    start: int
    end: int
    level: int
    status: NodeStatus = NodeStatus.PRESERVED

    @property
    def length(self) -> int:
        return self.end - self.start

    def as_(self, status: NodeStatus) -> "TreeNode":
        return TreeNode(self.start, self.end, self.level, status)


@dataclass(frozen=True)
class SplitParams:
    """Split noise settings.

    The noise std is `sigma` tokens when given, otherwise l / gamma for a node
    of length l.
    """
    sigma: float | None = None
    gamma: float = 5.0
    min_len: int = DEFAULT_MIN_LEN
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.min_len < 1:
            raise ConfigError("min_len must be >= 1")

    def sigma_for(self, length: int) -> float:
        return self.sigma if self.sigma is not None else length / self.gamma


@dataclass(frozen=True)
class SplitDecision:
    level: int
    left: TreeNode
    right: TreeNode
    choice: Branch | None
    left_score: float | None = None
    right_score: float | None = None


@dataclass
class ContextTree:
    chunk_index: int
    chunk_len: int
    depth: int
    preserved: list[TreeNode]
    decisions: list[SplitDecision] = field(default_factory=list)
    early_stop: bool = False

    @property
    def expanded(self) -> list[TreeNode]:
        nodes = [TreeNode(0, self.chunk_len, 0, NodeStatus.EXPANDED)]
        for dec in self.decisions:
            if dec.choice is not None:
                nodes.append((dec.left if dec.choice is Branch.LEFT else dec.right)
                             .as_(NodeStatus.EXPANDED))
        return nodes


@dataclass(frozen=True)
class CompressionSchedule:
    """Per-level keep ratios alpha_w = l / l' (level 1 first)."""
    alphas: tuple[float, ...]

    def __post_init__(self):
        if not self.alphas or any(a < 1 for a in self.alphas):
            raise ConfigError(f"keep ratios must be >= 1, got {self.alphas}")

    @property
    def depth(self) -> int:
        return len(self.alphas)

    def alpha(self, level: int) -> float:
        return self.alphas[min(max(level, 1), self.depth) - 1]

    def beta(self, chunk_len: int) -> float:
        """Chunk length over total compressed length of the deterministic always-right tree."""
        tree = build_tree(chunk_len, self.depth, SplitParams(min_len=1), deterministic=True)
        return chunk_len / tree_compressed_length(tree, self)


def schedule_for(depth: int, alpha_leaf: int) -> CompressionSchedule:
    """Keep ratios doubling towards the root: alpha_w = 2 * alpha_{w+1}."""
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    if alpha_leaf < 1 or int(alpha_leaf) != alpha_leaf or int(alpha_leaf) & (int(alpha_leaf) - 1):
        raise ConfigError(f"alpha_leaf must be a power of two >= 1, got {alpha_leaf}")
    return CompressionSchedule(tuple(int(alpha_leaf) * 2 ** (depth - w) for w in range(1, depth + 1)))


def compressed_len(length: int, alpha: float) -> int:
    return max(1, math.floor(length / alpha))


def downsample_indices(l: int, alpha: float) -> list[int]:
    """Equidistant, centred row picks keeping floor(l / alpha) of l rows (at least one)."""
    if l < 1 or alpha < 1:
        raise UsageError(f"downsample needs l >= 1 and alpha >= 1, got l={l}, alpha={alpha}")
    n = compressed_len(l, alpha)
    return [((2 * j + 1) * l) // (2 * n) for j in range(n)]


def split_node(node: TreeNode, params: SplitParams, deterministic: bool = False,
               rng: np.random.Generator | None = None,
               eps: float | None = None) -> tuple[TreeNode, TreeNode]:
    """Split at b = floor(l/2 - eps), clamped to [min_len, l - min_len]."""
    l = node.length
    if l < 2 * params.min_len:
        raise SplitTooShort(f"node of length {l} cannot be split with min_len={params.min_len}")
    if eps is None:
        if deterministic:
            eps = 0.0
        else:
            if rng is None:
                rng = np.random.default_rng(params.rng_seed)
            eps = float(rng.normal(0.0, params.sigma_for(l)))
    b = math.floor(l / 2 - eps)
    b = min(max(b, params.min_len), l - params.min_len)
    level = node.level + 1
    return (TreeNode(node.start, node.start + b, level, NodeStatus.EXPANDED),
            TreeNode(node.start + b, node.end, level, NodeStatus.EXPANDED))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def select_branch(policy: Policy, left_repr=None, right_repr=None, query_repr=None,
                  rng: np.random.Generator | None = None) -> Branch:
    if policy is Policy.ALWAYS_RIGHT:
        return Branch.RIGHT
    if policy is Policy.ALWAYS_LEFT:
        return Branch.LEFT
    if policy is Policy.RANDOM:
        if rng is None:
            raise UsageError("random policy needs an rng")
        return Branch.LEFT if rng.random() < 0.5 else Branch.RIGHT
    if left_repr is None or right_repr is None or query_repr is None:
        raise UsageError("query-aware policy needs left, right and query representations")
    if not (len(left_repr) == len(right_repr) == len(query_repr)):
        raise UsageError("representation dimensions differ")
    return (Branch.LEFT if cosine(left_repr, query_repr) >= cosine(right_repr, query_repr)
            else Branch.RIGHT)


@dataclass
class ReprCallbacks:
    """node(start, end) -> vector for a chunk-local range; query() -> vector."""
    node: Callable[[int, int], object]
    query: Callable[[], object]


def build_tree(chunk_len: int, depth: int, params: SplitParams = SplitParams(),
               policy: Policy = Policy.ALWAYS_RIGHT, repr_fns: ReprCallbacks | None = None,
               deterministic: bool = False, rng: np.random.Generator | None = None,
               chunk_index: int = 0) -> ContextTree:
    """Grow one expansion path from the root and collect the preserved nodes.

    Nodes too short to split stop the growth early and are preserved at
    their own level.
    """
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    if policy is Policy.QUERY_AWARE and repr_fns is None:
        raise UsageError("query-aware policy needs representation callbacks")
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    if chunk_len < 2 * params.min_len:
        return ContextTree(chunk_index, chunk_len, 0, [TreeNode(0, chunk_len, 1)])

    preserved: list[TreeNode] = []
    decisions: list[SplitDecision] = []
    early_stop = False
    query_vec = None
    node = TreeNode(0, chunk_len, 0, NodeStatus.EXPANDED)
    for level in range(1, depth + 1):
        if node.length < 2 * params.min_len:
            preserved.append(node.as_(NodeStatus.PRESERVED))
            early_stop = True
            break
        left, right = split_node(node, params, deterministic, rng)
        if level == depth:
            preserved += [left.as_(NodeStatus.PRESERVED), right.as_(NodeStatus.PRESERVED)]
            decisions.append(SplitDecision(level, left, right, None))
            break
        ls = rs = None
        if policy is Policy.QUERY_AWARE:
            if query_vec is None:
                query_vec = repr_fns.query()
            lv, rv = repr_fns.node(left.start, left.end), repr_fns.node(right.start, right.end)
            ls, rs = cosine(lv, query_vec), cosine(rv, query_vec)
            choice = select_branch(policy, lv, rv, query_vec)
        else:
            choice = select_branch(policy, rng=rng)
        decisions.append(SplitDecision(level, left, right, choice, ls, rs))
        kept, node = (right, left) if choice is Branch.LEFT else (left, right)
        preserved.append(kept.as_(NodeStatus.PRESERVED))
    preserved.sort(key=lambda n: n.start)
    return ContextTree(chunk_index, chunk_len, depth, preserved, decisions, early_stop)


def tree_compressed_length(tree: ContextTree, schedule: CompressionSchedule) -> int:
    check_schedule(tree, schedule)
    return sum(compressed_len(n.length, schedule.alpha(n.level)) for n in tree.preserved)


def check_schedule(tree: ContextTree, schedule: CompressionSchedule) -> None:
    if tree.depth not in (0, schedule.depth):
        raise ConfigError(f"tree depth {tree.depth} does not match schedule depth {schedule.depth}")


def tree_to_json(tree: ContextTree, schedule: CompressionSchedule) -> dict:
    check_schedule(tree, schedule)
    out = {
        "chunk_index": tree.chunk_index,
        "depth": tree.depth,
        "preserved": [
            {"start": n.start, "end": n.end, "level": n.level,
             "alpha": schedule.alpha(n.level),
             "compressed_len": compressed_len(n.length, schedule.alpha(n.level))}
            for n in tree.preserved
        ],
    }
    splits = []
    for d in tree.decisions:
        row = {"level": d.level, "left": [d.left.start, d.left.end],
               "right": [d.right.start, d.right.end],
               "selected": d.choice.value if d.choice else None}
        if d.left_score is not None:
            row["left_score"] = d.left_score
            row["right_score"] = d.right_score
        splits.append(row)
    out["splits"] = splits
    return out
