"""Embedding layer, adaptation hypernetwork and modulated predictor.

All tasks of a mini-batch share a single forward pass: support rows are
pooled per task with :func:`segment_mean`, and each query row picks up its
task's adaptive parameters with :func:`gather_rows`.
"""

from __future__ import annotations

import hashlib
import io
import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .data import DatasetSchema, Interaction, Task
from .modulation import (CANONICAL_ORDER, MULTIPLICATIVE, CanonicalForm, ModulationAssignment,
                         ModulationExpr, SupernetAlphas)
from .numerics import (DIV_EPSILON, BinaryOpKind, DimensionError, Tensor, columns, concat, elementwise,
                       gather_rows, linear, mean, mix, relu, segment_mean, square)

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    emb_dim: int = 32
    hidden: tuple[int, ...] = (128, 64, 32, 1)
    r_dim: int = 1024
    input_bias: bool = True  # constant 1 appended to h^0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.emb_dim < 1 or self.r_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("model widths must be positive")
        if self.hidden[-1] != 1:
            raise ValueError("the last predictor layer must output a scalar")

    @property
    def n_layers(self) -> int:
        return len(self.hidden)


@dataclass(frozen=True)
class Structure:
    """Per-layer modulation chains; ``supernet`` mixes all four canonical ops with weights."""

    chains: tuple[tuple[BinaryOpKind, ...], ...]
    supernet: bool = False

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(tuple(c) for c in self.chains))
        if self.supernet and any(c != CANONICAL_ORDER for c in self.chains):
            raise ValueError("a supernet carries the four canonical ops at every layer")

    @classmethod
    def from_assignment(cls, a: ModulationAssignment) -> "Structure":
        return cls(tuple(cf.ops for cf in a.layers))

    @classmethod
    def make_supernet(cls, n_layers: int) -> "Structure":
        return cls(tuple(CANONICAL_ORDER for _ in range(n_layers)), supernet=True)

    @classmethod
    def from_exprs(cls, exprs: Sequence[ModulationExpr]) -> "Structure":
        return cls(tuple(e.ops for e in exprs))

    @classmethod
    def coerce(cls, s, n_layers: int) -> "Structure":
        if isinstance(s, Structure):
            out = s
        elif isinstance(s, ModulationAssignment):
            out = cls.from_assignment(s)
        elif s is None:
            out = cls(tuple(() for _ in range(n_layers)))
        else:
            raise TypeError(f"cannot build a structure from {type(s).__name__}")
        if len(out.chains) != n_layers:
            raise DimensionError(f"structure has {len(out.chains)} layers, model has {n_layers}")
        return out

    @property
    def n_layers(self) -> int:
        return len(self.chains)

    @property
    def is_canonical(self) -> bool:
        return not self.supernet and all(
            list(c) == [op for op in CANONICAL_ORDER if op in c] for c in self.chains)

    def assignment(self) -> ModulationAssignment:
        if not self.is_canonical:
            raise ValueError("structure is not in canonical form")
        return ModulationAssignment(tuple(CanonicalForm.from_ops(c) for c in self.chains))

    def notation(self) -> list[str]:
        if self.is_canonical:
            return self.assignment().notation()
        return [ModulationExpr.of(*c).to_string(var=f"h^{l}") for l, c in enumerate(self.chains)]

    def to_dict(self) -> dict:
        return {"chains": [[op.value for op in c] for c in self.chains], "supernet": self.supernet}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Structure":
        return cls(tuple(tuple(BinaryOpKind(v) for v in c) for c in d["chains"]), bool(d.get("supernet", False)))


@dataclass(frozen=True)
class Slot:
    layer: int
    position: int  # index in the layer's chain
    op: BinaryOpKind
    offset: int
    width: int


@dataclass
class Batch:
    """Flattened support and query rows of several tasks; ratings on the normalized scale."""

    n_tasks: int
    s_user: np.ndarray
    s_item: np.ndarray
    s_rating: np.ndarray
    s_seg: np.ndarray
    q_user: np.ndarray
    q_item: np.ndarray
    q_rating: np.ndarray
    q_seg: np.ndarray
    q_raw: np.ndarray = field(default=None)

    @classmethod
    def from_tasks(cls, tasks: Sequence[Task], schema: DatasetSchema) -> "Batch":
        if not tasks:
            raise ValueError("empty batch")
        sa = [t.support_arrays for t in tasks]
        qa = [t.query_arrays for t in tasks]
        return cls(
            len(tasks),
            np.concatenate([a.user for a in sa]), np.concatenate([a.item for a in sa]),
            schema.normalize(np.concatenate([a.rating for a in sa])),
            np.repeat(np.arange(len(tasks)), [len(a.rating) for a in sa]),
            np.concatenate([a.user for a in qa]), np.concatenate([a.item for a in qa]),
            schema.normalize(np.concatenate([a.rating for a in qa])),
            np.repeat(np.arange(len(tasks)), [len(a.rating) for a in qa]),
            np.concatenate([a.rating for a in qa]),
        )


@dataclass
class AdaptiveParams:
    """phi vectors of one user keyed by (layer, chain position), after the non-negativity map."""

    structure: Structure
    phis: dict[tuple[int, int], Tensor]

    def vector(self, layer: int, position: int) -> np.ndarray:
        return self.phis[(layer, position)].values.reshape(-1)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ColdStartModel:
    def __init__(self, schema: DatasetSchema, config: ModelConfig = ModelConfig(),
                 structure: Union[Structure, ModulationAssignment, None] = None, rng_seed: int = 0,
                 alpha_init: float = 0.5):
        self.schema = schema
        self.config = config
        self.structure = Structure.coerce(structure, config.n_layers)
        self.rng_seed = rng_seed
        self.slots = self._layout()
        self.params: dict[str, Tensor] = {}
        self.alphas: Optional[list[list[Tensor]]] = None
        self._init_params(np.random.default_rng(rng_seed))
        if self.structure.supernet:
            self.alphas = [[Tensor([alpha_init], requires_grad=True) for _ in range(4)]
                           for _ in range(config.n_layers)]

    # --- shapes ---

    @property
    def emb_width(self) -> int:
        return (self.schema.n_user_fields + self.schema.n_item_fields) * self.config.emb_dim

    @property
    def in_widths(self) -> tuple[int, ...]:
        first = self.emb_width + (1 if self.config.input_bias else 0)
        return (first,) + self.config.hidden[:-1]

    @property
    def phi_dim(self) -> int:
        return sum(s.width for s in self.slots)

    def _layout(self) -> list[Slot]:
        slots, offset = [], 0
        for l, chain in enumerate(self.structure.chains):
            w = self.in_widths[l]
            for k, op in enumerate(chain):
                slots.append(Slot(l, k, op, offset, w))
                offset += w
        return slots

    def _init_params(self, rng: np.random.Generator) -> None:
        s, c, p = self.schema, self.config, {}
        for b, card in enumerate(s.user_cardinalities):
            p[f"E.user.{b}"] = rng.uniform(-1.0, 1.0, size=(card + 1, c.emb_dim))  # one-hot fan-in is 1
        for b, card in enumerate(s.item_cardinalities):
            p[f"E.item.{b}"] = rng.uniform(-1.0, 1.0, size=(card + 1, c.emb_dim))
        a_in = self.emb_width + 1
        p["A.W1"] = _uniform(rng, (c.r_dim, a_in), a_in)
        p["A.b1"] = np.zeros(c.r_dim)
        P = self.phi_dim
        p["A.W2"] = _uniform(rng, (P, c.r_dim), c.r_dim)
        b2 = np.zeros(P)
        for slot in self.slots:
            if slot.op in MULTIPLICATIVE:
                b2[slot.offset:slot.offset + slot.width] = 1.0  # start multiplicative slots at identity
        p["A.b2"] = b2
        for l, (w_in, w_out) in enumerate(zip(self.in_widths, c.hidden)):
            p[f"P.W{l}"] = _uniform(rng, (w_out, w_in), w_in)
            p[f"P.b{l}"] = np.zeros(w_out)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def n_params(self, include_alphas: bool = False) -> int:
        n = sum(t.values.size for t in self.params.values())
        if include_alphas and self.alphas is not None:
            n += 4 * len(self.alphas)
        return n

    def trainable(self) -> list[Tensor]:
        return list(self.params.values())

    def alpha_tensors(self) -> list[Tensor]:
        return [] if self.alphas is None else [a for row in self.alphas for a in row]

    def supernet_alphas(self) -> SupernetAlphas:
        if self.alphas is None:
            raise ValueError("not a supernet")
        return SupernetAlphas(np.array([[a.item() for a in row] for row in self.alphas]))

    def set_alphas(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        for l, row in enumerate(self.alphas):
            for k, a in enumerate(row):
                a.values[...] = values[l, k]

    # --- forward pieces ---

    def embed_rows(self, user_idx: np.ndarray, item_idx: np.ndarray) -> Tensor:
        user_idx = np.asarray(user_idx, dtype=np.intp)
        item_idx = np.asarray(item_idx, dtype=np.intp)
        n = user_idx.shape[0] if user_idx.ndim else item_idx.shape[0]
        user_idx = user_idx.reshape(n, self.schema.n_user_fields)
        item_idx = item_idx.reshape(n, self.schema.n_item_fields)
        parts = [gather_rows(self.params[f"E.user.{b}"], user_idx[:, b]) for b in range(user_idx.shape[1])]
        parts += [gather_rows(self.params[f"E.item.{b}"], item_idx[:, b]) for b in range(item_idx.shape[1])]
        return concat(parts)

    def adapt_batch(self, s_user, s_item, s_rating, s_seg, n_tasks: int) -> Tensor:
        """Raw Phi, one row per task (before the non-negativity map)."""
        x = concat([self.embed_rows(s_user, s_item), Tensor(np.asarray(s_rating, dtype=np.float64).reshape(-1, 1))])
        r = relu(linear(x, self.params["A.W1"], self.params["A.b1"]))
        c = segment_mean(r, s_seg, n_tasks)
        return linear(c, self.params["A.W2"], self.params["A.b2"])

    def slot_values(self, phi: Tensor) -> dict[tuple[int, int], Tensor]:
        out = {}
        for s in self.slots:
            v = columns(phi, s.offset, s.offset + s.width)
            if s.op is BinaryOpKind.DIV:
                v = relu(v) + DIV_EPSILON
            elif s.op is BinaryOpKind.MUL:
                v = relu(v)
            out[(s.layer, s.position)] = v
        return out

    def predict_rows(self, q_user, q_item, slot_vals: Mapping[tuple[int, int], Tensor],
                     q_seg: Optional[np.ndarray] = None) -> Tensor:
        """Predictions (n, 1); slot tensors have one row per task, mapped to rows by ``q_seg``."""
        h = self.embed_rows(q_user, q_item)
        n = h.shape[0]
        if self.config.input_bias:
            h = concat([h, Tensor(np.ones((n, 1)))])
        q_seg = np.zeros(n, dtype=np.intp) if q_seg is None else np.asarray(q_seg, dtype=np.intp)
        L = self.config.n_layers
        for l, chain in enumerate(self.structure.chains):
            for k, op in enumerate(chain):
                phi = gather_rows(slot_vals[(l, k)], q_seg)
                if self.structure.supernet:
                    h = mix(self.alphas[l][k], elementwise(op, h, phi), h)
                else:
                    h = elementwise(op, h, phi)
            h = linear(h, self.params[f"P.W{l}"], self.params[f"P.b{l}"])
            if l < L - 1:
                h = relu(h)
        return h

    def forward_batch(self, batch: Batch) -> tuple[Tensor, Tensor]:
        """Returns (predictions (Q, 1), per-task query MSE (B, 1))."""
        phi = self.adapt_batch(batch.s_user, batch.s_item, batch.s_rating, batch.s_seg, batch.n_tasks)
        pred = self.predict_rows(batch.q_user, batch.q_item, self.slot_values(phi), batch.q_seg)
        err = pred - Tensor(batch.q_rating.reshape(-1, 1))
        return pred, segment_mean(square(err), batch.q_seg, batch.n_tasks)

    def batch_loss(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        _, per_task = self.forward_batch(batch)
        return mean(per_task), per_task.values.reshape(-1).copy()

    # --- single-task API ---

    def embed(self, user_features: Sequence[int], item_features: Sequence[int]) -> Tensor:
        self._check_features(user_features, item_features)
        return self.embed_rows(np.array([user_features], dtype=np.intp).reshape(1, -1),
                               np.array([item_features], dtype=np.intp).reshape(1, -1))

    def _check_features(self, user_features, item_features) -> None:
        if len(user_features) != self.schema.n_user_fields or len(item_features) != self.schema.n_item_fields:
            raise DimensionError("feature count does not match the schema")
        for idx, card in zip(list(user_features) + list(item_features),
                             self.schema.user_cardinalities + self.schema.item_cardinalities):
            if not 0 <= idx <= card:
                raise IndexError(f"feature index {idx} outside [0, {card}]")

    def adapt(self, support: Sequence[Interaction]) -> AdaptiveParams:
        if not support:
            raise ValueError("adapt needs a non-empty support set")
        for it in support:
            self._check_features(it.user_features, it.item_features)
        su = np.array([it.user_features for it in support], dtype=np.intp).reshape(len(support), self.schema.n_user_fields)
        si = np.array([it.item_features for it in support], dtype=np.intp).reshape(len(support), self.schema.n_item_fields)
        y = self.schema.normalize([it.rating for it in support])
        phi = self.adapt_batch(su, si, y, np.zeros(len(support), dtype=np.intp), 1)
        return AdaptiveParams(self.structure, self.slot_values(phi))

    def predict(self, user_features, item_features, params: AdaptiveParams) -> Tensor:
        self._check_features(user_features, item_features)
        return self.predict_rows(np.array([user_features], dtype=np.intp).reshape(1, -1),
                                 np.array([item_features], dtype=np.intp).reshape(1, -1), params.phis)

    def task_loss(self, task: Task) -> Tensor:
        return self.batch_loss(Batch.from_tasks([task], self.schema))[0]

    def predict_tasks(self, tasks: Sequence[Task], chunk: int = 64) -> list[np.ndarray]:
        """Normalized-scale query predictions for each task, in order."""
        out = []
        for i in range(0, len(tasks), chunk):
            part = tasks[i:i + chunk]
            b = Batch.from_tasks(part, self.schema)
            pred, _ = self.forward_batch(b)
            p = pred.values.reshape(-1)
            bounds = np.cumsum([len(t.query) for t in part])[:-1]
            out.extend(np.split(p, bounds))
        return out

    # --- persistence ---

    def shape_table(self) -> dict[str, list[int]]:
        return {k: list(t.shape) for k, t in self.params.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.values.copy() for k, t in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.values = np.array(state[k], dtype=np.float64, copy=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].values.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "schema": self.schema.to_dict(),
            "schema_hash": self.schema.fingerprint(),
            "config": asdict(self.config),
            "structure": self.structure.to_dict(),
            "shapes": self.shape_table(),
            "rng_seed": self.rng_seed,
        }
        if self.structure.is_canonical:
            meta["assignment"] = self.structure.assignment().to_dict()
        if self.alphas is not None:
            meta["alphas"] = self.supernet_alphas().to_list()
        arrays = {f"param/{k}": v for k, v in self.state().items()}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, schema: Optional[DatasetSchema] = None) -> "ColdStartModel":
        try:
            with np.load(Path(path)) as z:
                arrays = {k: z[k] for k in z.files}
            meta = json.loads(arrays.pop("meta").tobytes().decode())
        except (OSError, ValueError, KeyError) as e:
            raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        saved_schema = DatasetSchema.from_dict(meta["schema"])
        if schema is not None and schema.fingerprint() != meta["schema_hash"]:
            raise CheckpointError("checkpoint schema hash does not match the dataset schema")
        cfg = ModelConfig(**meta["config"])
        model = cls(saved_schema, cfg, Structure.from_dict(meta["structure"]), meta.get("rng_seed", 0))
        state = {k.split("/", 1)[1]: v for k, v in arrays.items()}
        expected = model.shape_table()
        got = {k: list(v.shape) for k, v in state.items()}
        if expected != got or expected != meta["shapes"]:
            raise CheckpointError("checkpoint shape table does not match the model it describes")
        model.load_state(state)
        if "alphas" in meta:
            model.set_alphas(meta["alphas"])
        return model


def table5_param_count(user_cards: Sequence[int], item_cards: Sequence[int], emb_dim: int = 32,
                       hidden: Sequence[int] = (128, 64, 32, 1), r_dim: int = 1024,
                       slots_per_layer: int = 4) -> int:
    """Closed-form |theta_E| + |theta_A| + |theta_P| for the supernet layout."""
    d = (len(user_cards) + len(item_cards)) * emb_dim
    emb = sum(emb_dim * (c + 1) for c in list(user_cards) + list(item_cards))
    widths = [d + 1] + list(hidden[:-1])
    phi = slots_per_layer * sum(widths)
    adapt = r_dim * (d + 1) + r_dim + phi * r_dim + phi
    pred = sum(o * i + o for i, o in zip(widths, hidden))
    return emb + adapt + pred
