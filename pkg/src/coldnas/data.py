"""Rating datasets, per-user few-shot tasks, and user-disjoint train/val/test splits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from .modulation import ModulationExpr

logger = logging.getLogger(__name__)

UNKNOWN = 0  # reserved index per categorical field


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    user_features: tuple[int, ...]
    item_features: tuple[int, ...]


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    user_fields: tuple[str, ...]
    user_cardinalities: tuple[int, ...]
    item_fields: tuple[str, ...]
    item_cardinalities: tuple[int, ...]
    rating_range: tuple[float, float]

    def __post_init__(self):
        if len(self.user_fields) != len(self.user_cardinalities) or len(self.item_fields) != len(self.item_cardinalities):
            raise ValueError("one cardinality per field")
        if any(c < 1 for c in self.user_cardinalities + self.item_cardinalities):
            raise ValueError("cardinalities must be positive")
        if len(self.user_fields) + len(self.item_fields) < 2:
            raise ValueError("need at least two feature fields in total")
        lo, hi = self.rating_range
        if not hi > lo:
            raise ValueError(f"empty rating range {self.rating_range}")

    @property
    def n_user_fields(self) -> int:
        return len(self.user_fields)

    @property
    def n_item_fields(self) -> int:
        return len(self.item_fields)

    def normalize(self, rating):
        lo, hi = self.rating_range
        return (np.asarray(rating, dtype=np.float64) - lo) / (hi - lo)

    def denormalize(self, value):
        lo, hi = self.rating_range
        return np.asarray(value, dtype=np.float64) * (hi - lo) + lo

    def check(self, it: Interaction) -> None:
        lo, hi = self.rating_range
        if not lo <= it.rating <= hi:
            raise DataError(f"rating {it.rating} outside {self.rating_range}")
        for idx, card in zip(it.user_features, self.user_cardinalities):
            if not 0 <= idx <= card:
                raise DataError(f"user feature index {idx} outside [0, {card}]")
        for idx, card in zip(it.item_features, self.item_cardinalities):
            if not 0 <= idx <= card:
                raise DataError(f"item feature index {idx} outside [0, {card}]")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "user_fields": list(self.user_fields),
            "user_cardinalities": list(self.user_cardinalities),
            "item_fields": list(self.item_fields),
            "item_cardinalities": list(self.item_cardinalities),
            "rating_range": list(self.rating_range),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSchema":
        return cls(d["name"], tuple(d["user_fields"]), tuple(d["user_cardinalities"]),
                   tuple(d["item_fields"]), tuple(d["item_cardinalities"]), tuple(d["rating_range"]))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TaskArrays:
    user: np.ndarray  # (n, B_user) int
    item: np.ndarray  # (n, B_item) int
    rating: np.ndarray  # (n,) raw scale
    item_id: np.ndarray


def _arrays(rows: Sequence[Interaction]) -> TaskArrays:
    nu, ni = len(rows[0].user_features), len(rows[0].item_features)
    return TaskArrays(
        np.array([r.user_features for r in rows], dtype=np.intp).reshape(len(rows), nu),
        np.array([r.item_features for r in rows], dtype=np.intp).reshape(len(rows), ni),
        np.array([r.rating for r in rows], dtype=np.float64),
        np.array([r.item_id for r in rows], dtype=np.int64),
    )


@dataclass(frozen=True)
class Task:
    user_id: int
    support: tuple[Interaction, ...]
    query: tuple[Interaction, ...]

    def __post_init__(self):
        if not self.support or not self.query:
            raise ValueError("a task needs a non-empty support and query set")
        if any(r.user_id != self.user_id for r in self.support + self.query):
            raise ValueError("all interactions of a task must belong to its user")
        if {r.item_id for r in self.support} & {r.item_id for r in self.query}:
            raise ValueError("support and query share an item")

    @cached_property
    def support_arrays(self) -> TaskArrays:
        return _arrays(self.support)

    @cached_property
    def query_arrays(self) -> TaskArrays:
        return _arrays(self.query)

    def with_support(self, support: Sequence[Interaction]) -> "Task":
        return Task(self.user_id, tuple(support), self.query)


@dataclass(frozen=True)
class TaskSplit:
    train: tuple[Task, ...]
    val: tuple[Task, ...]
    test: tuple[Task, ...]
    rng_seed: int

    def __post_init__(self):
        users = [{t.user_id for t in part} for part in (self.train, self.val, self.test)]
        if users[0] & users[1] or users[0] & users[2] or users[1] & users[2]:
            raise ValueError("train/val/test must not share users")

    def counts(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


# --- categorical encoding ---------------------------------------------------


@dataclass
class CategoryEncoder:
    """Dense 1-based codes per field; 0 stays reserved for unseen values."""

    tables: dict[str, dict[str, int]] = field(default_factory=dict)

    def encode(self, field_name: str, raw, grow: bool = True) -> int:
        table = self.tables.setdefault(field_name, {})
        key = str(raw)
        idx = table.get(key)
        if idx is None:
            if not grow:
                return UNKNOWN
            idx = len(table) + 1
            table[key] = idx
        return idx

    def cardinality(self, field_name: str) -> int:
        return max(1, len(self.tables.get(field_name, {})))

    def decode(self, field_name: str, idx: int) -> Optional[str]:
        for raw, i in self.tables.get(field_name, {}).items():
            if i == idx:
                return raw
        return None

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, table in self.tables.items():
            with open(directory / f"{_safe(name)}.tsv", "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, delimiter="\t", lineterminator="\n")
                w.writerow(["raw_value", "index"])
                for raw, idx in sorted(table.items(), key=lambda kv: kv[1]):
                    w.writerow([raw, idx])
        (directory / "fields.json").write_text(json.dumps({n: _safe(n) for n in self.tables}, indent=1))

    @classmethod
    def load(cls, directory: Path) -> "CategoryEncoder":
        directory = Path(directory)
        names = json.loads((directory / "fields.json").read_text())
        tables = {}
        for name, stem in names.items():
            with open(directory / f"{stem}.tsv", encoding="utf-8", newline="") as fh:
                r = csv.reader(fh, delimiter="\t")
                next(r)
                tables[name] = {raw: int(idx) for raw, idx in r}
        return cls(tables)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


@dataclass
class Dataset:
    schema: DatasetSchema
    interactions: list[Interaction]
    encoder: CategoryEncoder = field(default_factory=CategoryEncoder)
    stats: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``schema, interactions = parse_...(...)``
        yield self.schema
        yield self.interactions


# --- MovieLens-1M -----------------------------------------------------------

ML_USER_FIELDS = ("gender", "age", "occupation", "zip")
ML_ITEM_FIELDS = ("year", "genre1", "genre2", "genre3", "genre4")
MALFORMED_LIMIT = 0.01


def _read_lines(path: Path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, encoding="latin-1") as fh:
        return [ln.rstrip("\r\n") for ln in fh if ln.strip()]


def parse_movielens(ratings_path, users_path, movies_path) -> Dataset:
    """Join ``ratings.dat`` with user and movie metadata from the ``::``-delimited ML-1M dump."""
    enc = CategoryEncoder()
    users: dict[int, tuple[int, ...]] = {}
    movies: dict[int, tuple[int, ...]] = {}
    malformed = defaultdict(int)

    for ln in _read_lines(users_path):
        parts = ln.split("::")
        if len(parts) != 5:
            malformed["users"] += 1
            continue
        try:
            uid = int(parts[0])
        except ValueError:
            malformed["users"] += 1
            continue
        users[uid] = tuple(enc.encode(f, v) for f, v in zip(ML_USER_FIELDS, parts[1:]))

    year_re = re.compile(r"\((\d{4})\)\s*$")
    for ln in _read_lines(movies_path):
        parts = ln.split("::")
        if len(parts) != 3:
            malformed["movies"] += 1
            continue
        try:
            mid = int(parts[0])
        except ValueError:
            malformed["movies"] += 1
            continue
        m = year_re.search(parts[1])
        genres = (parts[2].split("|") + ["-"] * 4)[:4]
        raw = [m.group(1) if m else "?"] + genres
        movies[mid] = tuple(enc.encode(f, v) for f, v in zip(ML_ITEM_FIELDS, raw))

    lines = _read_lines(ratings_path)
    if not lines:
        raise DataError(f"empty ratings file: {ratings_path}")
    out: list[Interaction] = []
    missing = 0
    for ln in lines:
        parts = ln.split("::")
        try:
            uid, mid, rating = int(parts[0]), int(parts[1]), float(parts[2])
            if len(parts) != 4:
                raise ValueError
        except (ValueError, IndexError):
            malformed["ratings"] += 1
            continue
        if uid not in users or mid not in movies:
            missing += 1
            continue
        out.append(Interaction(uid, mid, rating, users[uid], movies[mid]))
    bad = malformed["ratings"]
    if bad > MALFORMED_LIMIT * len(lines):
        raise DataError(f"{bad} of {len(lines)} rating rows are malformed; is this really ratings.dat?")
    if not out:
        raise DataError("no usable ratings")
    schema = DatasetSchema(
        "movielens",
        ML_USER_FIELDS, tuple(enc.cardinality(f) for f in ML_USER_FIELDS),
        ML_ITEM_FIELDS, tuple(enc.cardinality(f) for f in ML_ITEM_FIELDS),
        (1.0, 5.0),
    )
    stats = {"rows": len(lines), "kept": len(out), "malformed": dict(malformed), "missing_metadata": missing}
    if bad or missing:
        logger.warning("movielens: skipped %d malformed and %d unmatched rating rows", bad, missing)
    return Dataset(schema, out, enc, stats)


# --- generic CSV ------------------------------------------------------------

ROLES = ("user_id", "item_id", "rating", "user_feat", "item_feat")


def parse_generic_csv(path, schema_spec: Mapping[str, str], name: Optional[str] = None,
                      rating_range: Optional[tuple[float, float]] = None, delimiter: str = ",") -> Dataset:
    """Read a headed CSV whose columns are mapped to roles by ``schema_spec`` (column -> role)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    roles = dict(schema_spec)
    for col, role in roles.items():
        if role not in ROLES:
            raise DataError(f"column {col!r}: unknown role {role!r}")
    for needed in ("user_id", "item_id", "rating"):
        if list(roles.values()).count(needed) != 1:
            raise DataError(f"schema needs exactly one {needed} column")
    user_cols = [c for c, r in roles.items() if r == "user_feat"]
    item_cols = [c for c, r in roles.items() if r == "item_feat"]
    col_of = {r: c for c, r in roles.items() if r in ("user_id", "item_id", "rating")}

    enc = CategoryEncoder()
    latest: dict[tuple[int, int], Interaction] = {}
    duplicates = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for col in roles:
            if col not in header:
                raise DataError(f"unknown column {col!r}; header has {header}")
        for line_no, row in enumerate(reader, start=2):
            try:
                rating = float(row[col_of["rating"]])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line_no}: non-numeric rating {row[col_of['rating']]!r}") from None
            uid = enc.encode("__user_id__", row[col_of["user_id"]])
            iid = enc.encode("__item_id__", row[col_of["item_id"]])
            it = Interaction(
                uid, iid, rating,
                tuple(enc.encode(c, row[c]) for c in user_cols),
                tuple(enc.encode(c, row[c]) for c in item_cols),
            )
            if (uid, iid) in latest:
                duplicates += 1
                del latest[(uid, iid)]  # keep-last, re-inserted at the end
            latest[(uid, iid)] = it
    out = list(latest.values())
    if not out:
        raise DataError(f"no rows in {path}")
    if rating_range is None:
        ratings = [it.rating for it in out]
        rating_range = (min(ratings), max(ratings))
        if rating_range[0] == rating_range[1]:
            rating_range = (rating_range[0], rating_range[0] + 1.0)
    if duplicates:
        logger.warning("%s: %d duplicate (user, item) rows, kept the last", path.name, duplicates)
    schema = DatasetSchema(
        name or path.stem,
        tuple(user_cols), tuple(enc.cardinality(c) for c in user_cols),
        tuple(item_cols), tuple(enc.cardinality(c) for c in item_cols),
        tuple(rating_range),
    )
    return Dataset(schema, out, enc, {"rows": len(out) + duplicates, "kept": len(out), "duplicates": duplicates})


# --- tasks and splits -------------------------------------------------------


class TaskList(list):
    """A list of tasks that also remembers how many users were filtered out or skipped."""

    def __init__(self, tasks=(), excluded: int = 0, skipped: int = 0):
        super().__init__(tasks)
        self.excluded = excluded
        self.skipped = skipped


def group_by_user(interactions: Iterable[Interaction]) -> dict[int, list[Interaction]]:
    by_user: dict[int, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    return dict(sorted(by_user.items()))


def build_tasks(interactions: Iterable[Interaction], mode: str = "fixed_support", N: int = 20,
                min_len: int = 40, max_len: int = 200, rng_seed: int = 0) -> TaskList:
    """One task per user.

    ``fixed_support``: users whose history length lies in [min_len, max_len];
    N random interactions form the support set, the rest the query set.
    ``half_split``: floor(n/2) random interactions as support, the rest as
    query; length bounds still apply.
    """
    if mode not in ("fixed_support", "half_split"):
        raise ValueError(f"unknown task mode {mode!r}")
    if min_len > max_len:
        raise ValueError("min_len must not exceed max_len")
    rng = np.random.default_rng(rng_seed)
    tasks, excluded, skipped = [], 0, 0
    for uid, rows in group_by_user(interactions).items():
        n = len(rows)
        if not min_len <= n <= max_len:
            excluded += 1
            continue
        n_support = N if mode == "fixed_support" else n // 2
        if n_support >= n or n_support < 1:
            skipped += 1
            continue
        rows = sorted(rows, key=lambda r: r.item_id)
        perm = rng.permutation(n)
        support = tuple(rows[i] for i in sorted(perm[:n_support]))
        query = tuple(rows[i] for i in sorted(perm[n_support:]))
        tasks.append(Task(uid, support, query))
    if skipped:
        logger.info("build_tasks: skipped %d users with too short a history for N=%d", skipped, N)
    return TaskList(tasks, excluded, skipped)


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_tasks(tasks: Sequence[Task], ratios: Sequence[float] = (0.7, 0.1, 0.2), rng_seed: int = 0) -> TaskSplit:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    if len(tasks) < 10:
        raise ValueError(f"refusing to split only {len(tasks)} tasks")
    ordered = sorted(tasks, key=lambda t: t.user_id)
    perm = np.random.default_rng(rng_seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n_train, n_val, _ = largest_remainder(len(shuffled), ratios)
    return TaskSplit(tuple(shuffled[:n_train]), tuple(shuffled[n_train:n_train + n_val]),
                     tuple(shuffled[n_train + n_val:]), rng_seed)


def split_long_tail(tasks: Sequence[Task], warm_range: tuple[int, int] = (50, 1000),
                    cold_range: tuple[int, int] = (2, 50), ratios=(0.7, 0.1, 0.2), rng_seed: int = 0) -> TaskSplit:
    """BookCrossing protocol: long histories all go to train, short ones are split 70/10/20."""
    def length(t: Task) -> int:
        return len(t.support) + len(t.query)

    warm = [t for t in tasks if warm_range[0] <= length(t) < warm_range[1]]
    cold = [t for t in tasks if cold_range[0] <= length(t) < cold_range[1]]
    inner = split_tasks(cold, ratios, rng_seed)
    warm = sorted(warm, key=lambda t: t.user_id)
    return TaskSplit(tuple(warm) + inner.train, inner.val, inner.test, rng_seed)


PRESETS = {
    "movielens": {"mode": "fixed_support", "N": 20, "min_len": 40, "max_len": 200},
    "lastfm": {"mode": "fixed_support", "N": 20, "min_len": 40, "max_len": 200},
    "synthetic": {"mode": "fixed_support", "N": 20, "min_len": 40, "max_len": 200},
    "bookcrossing": {"mode": "half_split", "N": 0, "min_len": 2, "max_len": 999},
}


def prepare_split(interactions: Sequence[Interaction], preset: str, rng_seed: int = 0, **overrides) -> TaskSplit:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    params = {**PRESETS[preset], **overrides}
    tasks = build_tasks(interactions, params["mode"], params["N"], params["min_len"], params["max_len"], rng_seed)
    if preset == "bookcrossing":
        return split_long_tail(tasks, rng_seed=rng_seed)
    return split_tasks(tasks, (0.7, 0.1, 0.2), rng_seed)


# --- persistence of prepared splits -------------------------------------------


def save_split(split: TaskSplit, schema: DatasetSchema, path: Path) -> str:
    """Write all tasks to one ``.npz``; returns the sha256 of the file."""
    cols = defaultdict(list)
    for part_id, part in enumerate((split.train, split.val, split.test)):
        for task_id, t in enumerate(part):
            for role, rows in ((0, t.support), (1, t.query)):
                for r in rows:
                    cols["part"].append(part_id)
                    cols["task"].append(task_id)
                    cols["role"].append(role)
                    cols["user_id"].append(r.user_id)
                    cols["item_id"].append(r.item_id)
                    cols["rating"].append(r.rating)
                    cols["user_feat"].append(r.user_features)
                    cols["item_feat"].append(r.item_features)
    n = len(cols["part"])
    arrays = {
        "part": np.array(cols["part"], dtype=np.int8),
        "task": np.array(cols["task"], dtype=np.int64),
        "role": np.array(cols["role"], dtype=np.int8),
        "user_id": np.array(cols["user_id"], dtype=np.int64),
        "item_id": np.array(cols["item_id"], dtype=np.int64),
        "rating": np.array(cols["rating"], dtype=np.float64),
        "user_feat": np.array(cols["user_feat"], dtype=np.int64).reshape(n, schema.n_user_fields),
        "item_feat": np.array(cols["item_feat"], dtype=np.int64).reshape(n, schema.n_item_fields),
        "meta": np.frombuffer(json.dumps({"schema": schema.to_dict(), "rng_seed": split.rng_seed}).encode(), dtype=np.uint8),
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_split(path: Path) -> tuple[TaskSplit, DatasetSchema]:
    with np.load(Path(path)) as z:
        a = {k: z[k] for k in z.files}
    meta = json.loads(a["meta"].tobytes().decode())
    schema = DatasetSchema.from_dict(meta["schema"])
    parts: list[list[Task]] = [[], [], []]
    order = np.lexsort((a["role"], a["task"], a["part"]))
    keys = np.stack([a["part"][order], a["task"][order]], axis=1)
    bounds = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
    for chunk in np.split(order, bounds):
        rows = [Interaction(int(a["user_id"][i]), int(a["item_id"][i]), float(a["rating"][i]),
                            tuple(int(x) for x in a["user_feat"][i]), tuple(int(x) for x in a["item_feat"][i]))
                for i in chunk]
        roles = a["role"][chunk]
        support = tuple(r for r, role in zip(rows, roles) if role == 0)
        query = tuple(r for r, role in zip(rows, roles) if role == 1)
        parts[int(a["part"][chunk[0]])].append(Task(rows[0].user_id, support, query))
    return TaskSplit(tuple(parts[0]), tuple(parts[1]), tuple(parts[2]), int(meta["rng_seed"])), schema


# --- synthetic planted-structure data ---------------------------------------


@dataclass
class SyntheticTruth:
    """Everything needed to recompute a synthetic rating without noise."""

    planted: "ModulationExpr"
    layer: int
    user_latent: dict[int, np.ndarray]
    field_embeddings: list[np.ndarray]
    phi_maps: list[tuple[np.ndarray, np.ndarray]]
    weights: list[tuple[np.ndarray, np.ndarray]]
    shift: float = 0.0
    spread: float = 1.0

    def phis(self, user_id: int) -> dict[int, np.ndarray]:
        z = self.user_latent[user_id]
        out = {}
        for (op, slot), (A, c) in zip(self.planted.terms, self.phi_maps):
            v = A @ z + c
            out[slot] = np.exp(v) if op.name in ("MUL", "DIV") else v
        return out

    def hidden0(self, user_features: Sequence[int], item_features: Sequence[int]) -> np.ndarray:
        idx = list(user_features) + list(item_features)
        return np.concatenate([E[i] for E, i in zip(self.field_embeddings, idx)])

    def raw_score(self, user_id: int, user_features, item_features) -> float:
        from .modulation import eval_expr
        from .numerics import Tensor

        h = self.hidden0(user_features, item_features)
        phis = self.phis(user_id)
        for l, (W, b) in enumerate(self.weights):
            if l == self.layer:
                h = eval_expr(self.planted, Tensor(h), {k: Tensor(v) for k, v in phis.items()}).values
            h = W @ h + b
            if l < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return float(h[0])

    def rating(self, user_id: int, user_features, item_features) -> float:
        """Noiseless rating on the [0, 1] scale."""
        r = 0.5 + 0.15 * (self.raw_score(user_id, user_features, item_features) - self.shift) / self.spread
        return float(np.clip(r, 0.0, 1.0))


SYNTH_USER_FIELDS = (("u_age", 4), ("u_region", 3))
SYNTH_GENRES = 8


def make_synthetic(planted, n_users: int = 300, n_items: int = 200, noise_sd: float = 0.05,
                   rng_seed: int = 0, history: tuple[int, int] = (40, 60), emb_dim: int = 4,
                   widths: tuple[int, ...] = (16, 8, 1), latent_dim: int = 8, layer: int = 0,
                   strength: float = 1.0, user_fields: bool = False) -> tuple[Dataset, SyntheticTruth]:
    """Ratings from a fixed random MLP whose layer-``layer`` input is modulated by ``planted``.

    Each user draws a latent vector z; every planted slot maps z affinely to
    its phi (through exp for multiplicative slots, so they stay positive).
    Users carry no categorical features unless ``user_fields`` is set, and
    even then they are independent of z, so the only way to personalize is
    through the support set.
    """
    from .modulation import ModulationExpr, parse_expr

    if isinstance(planted, str):
        planted = parse_expr(planted)
    if not isinstance(planted, ModulationExpr):
        raise TypeError("planted must be a ModulationExpr or expression string")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if n_users < 1 or n_items < history[1]:
        raise ValueError("need at least one user and more items than the longest history")
    if not 0 <= layer < len(widths):
        raise ValueError(f"layer must lie in [0, {len(widths)})")
    rng = np.random.default_rng(rng_seed)

    ufields = SYNTH_USER_FIELDS if user_fields else ()
    cards = [c for _, c in ufields] + [n_items, SYNTH_GENRES]
    field_emb = [rng.normal(0.0, 1.0, size=(c + 1, emb_dim)) for c in cards]
    d_in = emb_dim * len(cards)
    in_widths = [d_in] + list(widths[:-1])
    weights = [(rng.normal(0.0, 1.0, size=(o, i)) / np.sqrt(i), rng.normal(0.0, 0.1, size=o))
               for i, o in zip(in_widths, widths)]
    item_genre = rng.integers(1, SYNTH_GENRES + 1, size=n_items)

    # per-slot affine maps from the latent; max/min thresholds sit near the typical h
    w = in_widths[layer]
    phi_maps = []
    for op, _ in planted.terms:
        A = rng.normal(0.0, 1.0, size=(w, latent_dim)) / np.sqrt(latent_dim)
        if op.name in ("MUL", "DIV"):
            phi_maps.append((0.5 * strength * A, np.zeros(w)))
        elif op.name == "MAX":
            phi_maps.append((0.7 * strength * A, np.full(w, -0.3)))
        elif op.name == "MIN":
            phi_maps.append((0.7 * strength * A, np.full(w, 0.3)))
        else:
            phi_maps.append((strength * A, np.zeros(w)))

    user_feats = {}
    latents = {}
    for u in range(1, n_users + 1):
        user_feats[u] = tuple(int(rng.integers(1, c + 1)) for _, c in ufields)
        latents[u] = rng.normal(0.0, 1.0, size=latent_dim)
    truth = SyntheticTruth(planted, layer, latents, field_emb, phi_maps, weights)

    rows = []
    for u in range(1, n_users + 1):
        n = int(rng.integers(history[0], history[1] + 1))
        items = np.sort(rng.choice(n_items, size=n, replace=False)) + 1
        for i in items:
            rows.append((u, int(i), (int(i), int(item_genre[i - 1]))))
    raw = np.array([truth.raw_score(u, user_feats[u], f) for u, _, f in rows])
    truth.shift, truth.spread = float(raw.mean()), float(raw.std() or 1.0)
    noise = rng.normal(0.0, noise_sd, size=len(rows)) if noise_sd > 0 else np.zeros(len(rows))
    clean = np.clip(0.5 + 0.15 * (raw - truth.shift) / truth.spread, 0.0, 1.0)
    ratings = np.clip(clean + noise, 0.0, 1.0)

    out = [Interaction(u, i, float(r), user_feats[u], f) for (u, i, f), r in zip(rows, ratings)]
    schema = DatasetSchema(
        "synthetic",
        tuple(n for n, _ in ufields), tuple(c for _, c in ufields),
        ("item", "genre"), (n_items, SYNTH_GENRES),
        (0.0, 1.0),
    )
    stats = {"planted": str(planted), "layer": layer, "noise_sd": noise_sd, "rows": len(out)}
    return Dataset(schema, out, CategoryEncoder(), stats), truth
