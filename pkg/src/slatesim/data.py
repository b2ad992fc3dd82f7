"""Item catalogs, click trajectories, history buffers, and dataset splits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NON_CLICK_ID = 0


class DataFormatError(ValueError):
    """Malformed trajectory file."""


def _fmt(x: float) -> str:
    # 9 significant digits; round-trips exactly through a second save/load.
    return format(float(x), ".9g")


class ItemCatalog:
    """Items with fixed-dimension feature vectors.

    Item id 0 is reserved for the non-click pseudo-item and always carries an
    all-zero feature vector; it is injected automatically when absent.
    """

    def __init__(self, items: Iterable[tuple[int, Sequence[float]]], d: int | None = None):
        feats: dict[int, np.ndarray] = {}
        for item_id, vec in items:
            item_id = int(item_id)
            if item_id in feats:
                raise ValueError(f"duplicate item id {item_id}")
            arr = np.array(vec, dtype=float)
            if arr.ndim != 1:
                raise ValueError("feature vectors must be one-dimensional")
            if d is None:
                d = arr.shape[0]
            if arr.shape[0] != d:
                raise ValueError(
                    f"inconsistent feature dimension for item {item_id}: "
                    f"got {arr.shape[0]}, expected {d}"
                )
            feats[item_id] = arr
        if d is None:
            raise ValueError("cannot build a catalog without items unless d is given")
        if d < 1:
            raise ValueError("feature dimension must be >= 1")
        if NON_CLICK_ID in feats:
            if np.any(feats[NON_CLICK_ID] != 0.0):
                raise ValueError("item id 0 is reserved for the zero-feature non-click pseudo-item")
        else:
            feats[NON_CLICK_ID] = np.zeros(d)
        for arr in feats.values():
            arr.setflags(write=False)
        self.d = int(d)
        self._feats = feats

    @property
    def item_ids(self) -> tuple[int, ...]:
        """Real item ids (non-click pseudo-item excluded), ascending."""
        return tuple(sorted(i for i in self._feats if i != NON_CLICK_ID))

    def features(self, item_id: int) -> np.ndarray:
        try:
            return self._feats[item_id]
        except KeyError:
            raise KeyError(f"unknown item id {item_id}") from None

    def feature_matrix(self, ids: Sequence[int]) -> np.ndarray:
        """Stack features for `ids` into a (len(ids), d) array."""
        if len(ids) == 0:
            return np.zeros((0, self.d))
        return np.stack([self.features(i) for i in ids])

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._feats

    def __len__(self) -> int:
        return len(self._feats)


@dataclass(frozen=True)
class ClickRecord:
    """One page view: the displayed slate and the user's choice (0 = no click)."""

    step: int
    displayed: tuple[int, ...]
    chosen: int
    reward: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "displayed", tuple(int(i) for i in self.displayed))
        if self.step < 1:
            raise ValueError(f"step must be >= 1, got {self.step}")
        if len(self.displayed) == 0:
            raise ValueError("displayed set is empty")
        if len(set(self.displayed)) != len(self.displayed):
            raise ValueError(f"duplicate item in displayed set {self.displayed}")
        if self.chosen != NON_CLICK_ID and self.chosen not in self.displayed:
            raise ValueError(f"chosen not displayed: {self.chosen} not in {self.displayed}")

    @property
    def clicked(self) -> bool:
        return self.chosen != NON_CLICK_ID


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered click records for one user; steps run 1, 2, ... strictly increasing."""

    user_id: int
    records: tuple[ClickRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        steps = [r.step for r in self.records]
        if steps:
            if steps[0] != 1:
                raise ValueError(f"trajectory for user {self.user_id} must start at step 1")
            if any(b <= a for a, b in zip(steps, steps[1:])):
                raise ValueError(f"steps not strictly increasing for user {self.user_id}")

    def __len__(self) -> int:
        return len(self.records)


class HistoryBuffer:
    """Sliding window over the last m clicked feature vectors.

    Stored as a d x m matrix whose columns run oldest to newest; positions with
    no history yet hold zeros. Mutable and single-owner; copy before sharing.
    """

    def __init__(self, m: int, d: int, matrix: np.ndarray | None = None):
        if m < 1 or d < 1:
            raise ValueError("m and d must be >= 1")
        self.m = int(m)
        self.d = int(d)
        if matrix is None:
            self._mat = np.zeros((d, m))
        else:
            matrix = np.array(matrix, dtype=float)
            if matrix.shape != (d, m):
                raise ValueError(f"matrix shape {matrix.shape} != ({d}, {m})")
            self._mat = matrix

    @property
    def matrix(self) -> np.ndarray:
        """The live d x m column matrix (oldest first). Do not mutate directly."""
        return self._mat

    def column(self, i: int) -> np.ndarray:
        return self._mat[:, i].copy()

    def push(self, features: Sequence[float]) -> "HistoryBuffer":
        """Append the newest clicked features, evicting the oldest column."""
        arr = np.asarray(features, dtype=float)
        if arr.shape != (self.d,):
            raise ValueError(f"feature length {arr.shape} does not match d={self.d}")
        self._mat[:, :-1] = self._mat[:, 1:]
        self._mat[:, -1] = arr
        return self

    def copy(self) -> "HistoryBuffer":
        return HistoryBuffer(self.m, self.d, self._mat.copy())


def push_click(buffer: HistoryBuffer, features: Sequence[float]) -> HistoryBuffer:
    """Push one clicked feature vector into the buffer (in place) and return it."""
    return buffer.push(features)


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset[int]
    valid: frozenset[int]
    test: frozenset[int]

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if (self.train & self.valid) or (self.train & self.test) or (self.valid & self.test):
            raise ValueError("splits must be disjoint")


def split_users(
    user_ids: Iterable[int],
    proportions: Sequence[float] = (0.5, 0.125, 0.375),
    seed: int = 0,
) -> DatasetSplit:
    """Partition users into train/valid/test with largest-remainder rounding."""
    users = sorted(set(int(u) for u in user_ids))
    if not users:
        raise ValueError("empty user set")
    props = np.asarray(proportions, dtype=float)
    if props.shape != (3,) or np.any(props < 0):
        raise ValueError("proportions must be three non-negative numbers")
    if abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"proportions sum to {props.sum()}, expected 1")
    n = len(users)
    exact = props * n
    sizes = np.floor(exact).astype(int)
    remainders = exact - sizes
    # hand out leftover slots by largest remainder, ties to the earlier split
    for _ in range(n - int(sizes.sum())):
        i = int(np.argmax(remainders))
        sizes[i] += 1
        remainders[i] = -1.0
    rng = np.random.default_rng(seed)
    order = [users[i] for i in rng.permutation(n)]
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(frozenset(order[:a]), frozenset(order[a:b]), frozenset(order[b:]))


def synth_catalog(K: int, d: int, seed: int = 0) -> ItemCatalog:
    """Random catalog: K unit-norm feature vectors with ids 1..K plus the pseudo-item."""
    if K < 1 or d < 1:
        raise ValueError("K and d must be >= 1")
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((K, d))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = vecs / norms
    return ItemCatalog([(i + 1, vecs[i]) for i in range(K)], d=d)


def save_trajectories(
    catalog: ItemCatalog,
    trajectories: Sequence[Trajectory],
    path,
    m: int = 0,
) -> None:
    """Write the line-delimited trajectory format; byte-deterministic for equal input.

    `m` is recorded in the header for consumers that need the history window;
    the slate size k is derived from the records (0 when there are none).
    """
    k = max((len(r.displayed) for t in trajectories for r in t.records), default=0)
    lines = [f"meta d={catalog.d} m={int(m)} k={k}"]
    for item_id in sorted(catalog._feats):
        vals = " ".join(_fmt(x) for x in catalog.features(item_id))
        lines.append(f"item {item_id} {vals}")
    for traj in trajectories:
        for rec in traj.records:
            ids = " ".join(str(i) for i in rec.displayed)
            line = f"rec {traj.user_id} {rec.step} {rec.chosen} | {ids}"
            if rec.reward is not None:
                line += f" ; r={_fmt(rec.reward)}"
            lines.append(line)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_meta(line: str, lineno: int) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != "meta":
        raise DataFormatError(f"line {lineno}: expected 'meta d=<int> m=<int> k=<int>'")
    out = {}
    for tok in parts[1:]:
        key, _, val = tok.partition("=")
        if key not in ("d", "m", "k") or not val:
            raise DataFormatError(f"line {lineno}: bad meta token {tok!r}")
        try:
            out[key] = int(val)
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad meta value {tok!r}") from None
    if set(out) != {"d", "m", "k"}:
        raise DataFormatError(f"line {lineno}: meta must define d, m and k")
    return out["d"], out["m"], out["k"]


def read_meta(path) -> tuple[int, int, int]:
    """Return (d, m, k) from a trajectory file header."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    return _parse_meta(first, 1)


def load_trajectories(path) -> tuple[ItemCatalog, list[Trajectory]]:
    """Read a trajectory file; validates every record and injects the pseudo-item."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return ItemCatalog([], d=1), []
    d, _m, _k = _parse_meta(lines[0], 1)
    items: list[tuple[int, np.ndarray]] = []
    by_user: dict[int, list[ClickRecord]] = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("item "):
            parts = line.split()
            try:
                item_id = int(parts[1])
                vals = np.array([float(x) for x in parts[2:]])
            except (ValueError, IndexError):
                raise DataFormatError(f"line {lineno}: malformed item line") from None
            if vals.shape[0] != d:
                raise DataFormatError(
                    f"line {lineno}: inconsistent feature dimension "
                    f"(got {vals.shape[0]}, header says {d})"
                )
            items.append((item_id, vals))
        elif line.startswith("rec "):
            head, _, tail = line[4:].partition("|")
            parts = head.split()
            if len(parts) != 3 or not tail:
                raise DataFormatError(f"line {lineno}: malformed record line")
            try:
                user_id, step, chosen = (int(x) for x in parts)
            except ValueError:
                raise DataFormatError(f"line {lineno}: malformed record line") from None
            ids_part, _, extra = tail.partition(";")
            reward = None
            if extra:
                key, _, val = extra.strip().partition("=")
                if key != "r" or not val:
                    raise DataFormatError(f"line {lineno}: bad record extension {extra.strip()!r}")
                try:
                    reward = float(val)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: bad reward value {val!r}") from None
            try:
                displayed = tuple(int(x) for x in ids_part.split())
            except ValueError:
                raise DataFormatError(f"line {lineno}: malformed display ids") from None
            try:
                rec = ClickRecord(step=step, displayed=displayed, chosen=chosen, reward=reward)
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from None
            by_user.setdefault(user_id, []).append(rec)
        else:
            raise DataFormatError(f"line {lineno}: unknown directive {line.split()[0]!r}")
    catalog = ItemCatalog(items, d=d)
    trajectories = []
    for user_id, recs in by_user.items():
        for rec in recs:
            for item_id in rec.displayed:
                if item_id not in catalog:
                    raise DataFormatError(
                        f"record for user {user_id} step {rec.step} displays "
                        f"unknown item {item_id}"
                    )
        trajectories.append(Trajectory(user_id=user_id, records=tuple(recs)))
    return catalog, trajectories
