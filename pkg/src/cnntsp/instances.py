"""Planar TSP instances, tours, TSPLIB ingestion and evaluation metrics."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInstance,
    InvalidArgument,
    InvalidTour,
    TsplibParseError,
    UnsupportedFormat,
)


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix for ``(..., n, 2)`` coordinates."""
    diff = coords[..., :, None, :] - coords[..., None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def knn_from_distances(dist: np.ndarray, k: int) -> np.ndarray:
    # works on (n, n) or batched (b, n, n) matrices
    n = dist.shape[-1]
    if k < 0 or k > n - 1:
        raise InvalidArgument(f"k={k} must lie in [0, n-1={n - 1}]")
    masked = dist.astype(np.float64, copy=True)
    idx = np.arange(n)
    masked[..., idx, idx] = np.inf
    # stable sort keeps ascending index order among equal distances
    order = np.argsort(masked, axis=-1, kind="stable")
    return order[..., :k].astype(np.int64)


def knn_table(coords, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest neighbours of every node.

    Rows are sorted by ascending distance with ties broken by ascending
    index, and never contain the node itself.
    """
    coords = np.asarray(coords, dtype=np.float64)
    return knn_from_distances(pairwise_distances(coords), k)


@dataclass(frozen=True, eq=False)
class TspInstance:
    """``n`` points in the unit square."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidArgument(f"coords must be (n, 2), got {coords.shape}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def dist(self) -> np.ndarray:
        d = pairwise_distances(self.coords)
        d.setflags(write=False)
        return d

    def knn(self, k: int) -> np.ndarray:
        return knn_from_distances(self.dist, k)

    def to_json(self) -> str:
        return json.dumps({"coords": self.coords.tolist()})


@dataclass(frozen=True)
class Tour:
    order: tuple
    length: float

    @property
    def n(self) -> int:
        return len(self.order)


@dataclass
class TsplibProblem:
    name: str
    raw_coords: np.ndarray
    edge_weight_type: str = "EUC_2D"
    comment: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.raw_coords.shape[0]


def uniform_coords(n: int, count: int, seed: int) -> np.ndarray:
    """``(count, n, 2)`` i.i.d. uniform coordinates, reproducible from ``seed``."""
    if n < 2:
        raise InvalidArgument(f"n must be >= 2, got {n}")
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    return rng.random((count, n, 2))


def generate_uniform(n: int, count: int, seed: int) -> list[TspInstance]:
    return [TspInstance(c) for c in uniform_coords(n, count, seed)]


def validate_tour(order: Sequence[int], n: int) -> Optional[str]:
    """Return ``None`` if ``order`` is a permutation of ``range(n)``, else a reason."""
    order = list(order)
    if len(order) != n:
        return f"wrong length: expected {n} nodes, got {len(order)}"
    seen = set()
    for pos, node in enumerate(order):
        try:
            node = int(node)
        except (TypeError, ValueError):
            return f"non-integer index {node!r} at position {pos}"
        if not 0 <= node < n:
            return f"out-of-range index {node} at position {pos}"
        if node in seen:
            return f"duplicate index {node} at position {pos}"
        seen.add(node)
    return None


def _closed_length(coords: np.ndarray, order: np.ndarray) -> float:
    pts = coords[order]
    return float(np.sqrt(((pts - np.roll(pts, -1, axis=0)) ** 2).sum(-1)).sum())


def tour_length(inst, order: Sequence[int]) -> float:
    """Closed-tour length including the return edge.

    ``inst`` may be a :class:`TspInstance` or a raw ``(n, 2)`` coordinate array.
    """
    coords = inst.coords if isinstance(inst, TspInstance) else np.asarray(inst, dtype=np.float64)
    problem = validate_tour(order, coords.shape[0])
    if problem is not None:
        raise InvalidTour(problem)
    return _closed_length(coords, np.asarray(order, dtype=np.int64))


def batch_tour_lengths(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Closed lengths for ``(b, n, 2)`` coords and ``(b, n)`` tours, unchecked."""
    pts = np.take_along_axis(coords, tours[..., None], axis=1)
    return np.sqrt(((pts - np.roll(pts, -1, axis=1)) ** 2).sum(-1)).sum(-1)


def make_tour(inst, order: Sequence[int]) -> Tour:
    order = tuple(int(i) for i in order)
    return Tour(order, tour_length(inst, order))


# --- TSPLIB -----------------------------------------------------------------

_HEADER_RE = re.compile(r"^\s*([A-Z_]+)\s*:\s*(.*?)\s*$")


def parse_tsplib(text: str) -> TsplibProblem:
    """Parse a TSPLIB ``EUC_2D`` document. File indices are mapped to 0-based."""
    headers = {}
    coords: dict[int, tuple[float, float]] = {}
    in_coords = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        if in_coords:
            parts = line.split()
            if len(parts) == 3 and not parts[0].isalpha():
                try:
                    idx = int(parts[0])
                    x, y = float(parts[1]), float(parts[2])
                except ValueError:
                    raise TsplibParseError(f"malformed coordinate line {line!r}", lineno) from None
                if idx < 1:
                    raise TsplibParseError(f"node index {idx} must be >= 1", lineno)
                if idx in coords:
                    raise TsplibParseError(f"duplicate node index {idx}", lineno)
                coords[idx] = (x, y)
                continue
            if _HEADER_RE.match(line) is None and not line.endswith("SECTION"):
                raise TsplibParseError(f"malformed coordinate line {line!r}", lineno)
            in_coords = False
        if line.endswith("SECTION"):
            section = line.rstrip(":").strip()
            if section == "NODE_COORD_SECTION":
                in_coords = True
                continue
            raise UnsupportedFormat(f"unsupported section {section}")
        m = _HEADER_RE.match(line)
        if m is None:
            raise TsplibParseError(f"unrecognised line {line!r}", lineno)
        headers[m.group(1)] = m.group(2)

    ewt = headers.get("EDGE_WEIGHT_TYPE", "").upper()
    if ewt != "EUC_2D":
        raise UnsupportedFormat(f"EDGE_WEIGHT_TYPE {ewt or '<missing>'} is not supported (EUC_2D only)")
    if not coords:
        raise TsplibParseError("missing NODE_COORD_SECTION")
    n = len(coords)
    if sorted(coords) != list(range(1, n + 1)):
        raise TsplibParseError("node indices are not 1..N")
    if "DIMENSION" in headers and int(headers["DIMENSION"]) != n:
        raise TsplibParseError(f"DIMENSION {headers['DIMENSION']} but {n} coordinates given")
    if n < 3:
        raise TsplibParseError(f"need at least 3 nodes, got {n}")
    raw = np.array([coords[i] for i in range(1, n + 1)], dtype=np.float64)
    return TsplibProblem(
        name=headers.get("NAME", ""),
        raw_coords=raw,
        edge_weight_type=ewt,
        comment=headers.get("COMMENT", ""),
        extra={k: v for k, v in headers.items() if k not in ("NAME", "COMMENT", "EDGE_WEIGHT_TYPE")},
    )


def load_tsplib(path) -> TsplibProblem:
    return parse_tsplib(Path(path).read_text())


def parse_tour_file(text: str) -> list[int]:
    """Read a TSPLIB ``TOUR_SECTION`` into a 0-based order."""
    order = []
    in_tour = False
    for line in text.splitlines():
        line = line.strip()
        if line == "TOUR_SECTION":
            in_tour = True
            continue
        if not in_tour or not line:
            continue
        for tok in line.split():
            v = int(tok)
            if v == -1:
                return order
            order.append(v - 1)
        if line == "EOF":
            break
    return order


def normalization_scale(problem: TsplibProblem) -> tuple[np.ndarray, float]:
    raw = problem.raw_coords
    lo = raw.min(axis=0)
    scale = float((raw.max(axis=0) - lo).max())
    if scale <= 0.0:
        raise DegenerateInstance(f"{problem.name or 'instance'}: all points coincide")
    return lo, scale


def normalize_instance(problem: TsplibProblem) -> TspInstance:
    """Shift to the origin and divide by the largest axis range."""
    if problem.N < 3:
        raise InvalidArgument(f"need N >= 3, got {problem.N}")
    lo, scale = normalization_scale(problem)
    coords = (problem.raw_coords - lo) / scale
    return TspInstance(np.clip(coords, 0.0, 1.0))


def critical_parameter(problem: TsplibProblem, optimal_length: float) -> float:
    """``l / sqrt(N * A)`` with ``A`` the raw bounding-box area."""
    if optimal_length <= 0:
        raise InvalidArgument("optimal_length must be positive")
    span = problem.raw_coords.max(axis=0) - problem.raw_coords.min(axis=0)
    area = float(span[0] * span[1])
    if area <= 0.0:
        raise DegenerateInstance("bounding box has zero area")
    return optimal_length / math.sqrt(problem.N * area)


def optimality_gap(pred_lengths: Iterable[float], opt_lengths: Iterable[float]) -> float:
    """Mean of ``pred/opt - 1`` over instances, in percent."""
    pred = np.asarray(list(pred_lengths), dtype=np.float64)
    opt = np.asarray(list(opt_lengths), dtype=np.float64)
    if pred.shape != opt.shape or pred.size == 0:
        raise InvalidArgument(f"length mismatch: {pred.size} predictions vs {opt.size} optima")
    if np.any(opt <= 0):
        raise InvalidArgument("optimal lengths must be positive")
    return float(np.mean(pred / opt - 1.0) * 100.0)


def per_instance_gaps(pred_lengths, opt_lengths) -> list[float]:
    pred = np.asarray(list(pred_lengths), dtype=np.float64)
    opt = np.asarray(list(opt_lengths), dtype=np.float64)
    if pred.shape != opt.shape:
        raise InvalidArgument(f"length mismatch: {pred.size} predictions vs {opt.size} optima")
    if np.any(opt <= 0):
        raise InvalidArgument("optimal lengths must be positive")
    return ((pred / opt - 1.0) * 100.0).tolist()


# --- dataset files ------------------------------------------------------------

def write_dataset(path, instances: Sequence[TspInstance], meta: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        for i, inst in enumerate(instances):
            rec = {"coords": inst.coords.tolist()}
            if meta is not None:
                rec["meta"] = dict(meta, index=i)
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[TspInstance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if isinstance(rec, list):
                coords = rec
            elif "coords" in rec:
                coords = rec["coords"]
            else:
                continue
            try:
                out.append(TspInstance(np.asarray(coords, dtype=np.float64)))
            except InvalidArgument as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
    return out
