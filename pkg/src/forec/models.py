"""GMF, MLP, fused NMF and the forked market-specific NMF.

Every model is a thin structure description plus an immutable ``ParamSet``.
``logits(params, users, items)`` builds the graph on whatever tape is active,
so the same code serves training (tape active) and scoring (no tape).

Parameter names::

    gmf.user gmf.item gmf.h                     GMF embeddings and output weights
    mlp.user mlp.item mlp.W{k} mlp.b{k}         MLP embeddings and hidden layers 1..m
    mlp.out.W mlp.out.b                         MLP output layer (standalone MLP only)
    fused.W fused.b                             NMF output over gmf_vec ++ mlp_vec
    head.W{j} head.b{j} head.out.W head.out.b   MarketHead tower of a fork
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numgrad import (ParamSet, Tensor, add, concat, elementwise_mul, gather_rows, matmul,
                      relu, reshape, sigmoid)

DEFAULT_TOWER = (16, 64, 32, 16, 8)
DEFAULT_HEAD = (16, 32, 16)


@dataclass(frozen=True)
class ModelConfig:
    n_users: int
    n_items: int
    gmf_dim: int = 8
    # first entry is the concat width (2 x MLP embedding dim), the rest are layer widths
    mlp_tower: tuple[int, ...] = DEFAULT_TOWER
    fusion_alpha: float = 0.5
    k_freeze: int = 2
    head_widths: tuple[int, ...] = DEFAULT_HEAD
    init: str = "xavier"
    init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.mlp_tower[0] % 2:
            raise ValueError("first tower entry must be 2 x the MLP embedding size")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise ValueError("fusion_alpha must lie in [0, 1]")
        if self.init not in ("normal", "xavier"):
            raise ValueError(f"unknown init scheme {self.init!r}")
        object.__setattr__(self, "mlp_tower", tuple(self.mlp_tower))
        object.__setattr__(self, "head_widths", tuple(self.head_widths))

    @property
    def mlp_dim(self) -> int:
        return self.mlp_tower[0] // 2

    @property
    def mlp_depth(self) -> int:
        return len(self.mlp_tower) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_tower"] = list(self.mlp_tower)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "mlp_tower": tuple(d["mlp_tower"]), "head_widths": tuple(d["head_widths"])})


def _rng(cfg: ModelConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream])


def _weight(rng, shape, cfg: ModelConfig, dense: bool = True) -> Tensor:
    if dense and cfg.init == "xavier":
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return Tensor(rng.uniform(-limit, limit, size=shape))
    return Tensor(rng.normal(0.0, cfg.init_std, size=shape))


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _dense(z: Tensor, params: ParamSet, w: str, b: str) -> Tensor:
    return add(matmul(z, params[w]), params[b])


def _gmf_vector(params: ParamSet, users, items) -> Tensor:
    return elementwise_mul(gather_rows(params["gmf.user"], users), gather_rows(params["gmf.item"], items))


def _mlp_vector(params: ParamSet, users, items, depth: int) -> Tensor:
    z = concat(gather_rows(params["mlp.user"], users), gather_rows(params["mlp.item"], items), axis=1)
    for k in range(1, depth + 1):
        z = relu(_dense(z, params, f"mlp.W{k}", f"mlp.b{k}"))
    return z


def _to_scalar_per_row(z: Tensor) -> Tensor:
    return reshape(z, (z.shape[0],))


def _check_indices(model: "Recommender", users, items) -> tuple[np.ndarray, np.ndarray]:
    u = np.atleast_1d(np.asarray(users, dtype=np.int64))
    i = np.atleast_1d(np.asarray(items, dtype=np.int64))
    if u.shape != i.shape:
        raise ValueError("users and items must have equal length")
    n_u, n_i = model.config.n_users, model.config.n_items
    if u.size and (u.min() < 0 or u.max() >= n_u):
        raise IndexError(f"user index out of range [0, {n_u})")
    if i.size and (i.min() < 0 or i.max() >= n_i):
        raise IndexError(f"item index out of range [0, {n_i})")
    return u, i


class Recommender:
    kind = "base"

    def __init__(self, config: ModelConfig, params: ParamSet):
        self.config = config
        self.params = params

    def logits(self, params: ParamSet, users, items) -> Tensor:
        raise NotImplementedError

    def forward(self, users, items) -> np.ndarray:
        """Interaction probabilities for aligned ``users`` / ``items`` arrays."""
        u, i = _check_indices(self, users, items)
        return sigmoid(self.logits(self.params, u, i)).data.copy()

    def with_params(self, params: ParamSet) -> "Recommender":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = params
        return clone

    def describe(self) -> dict:
        return {"kind": self.kind, "config": self.config.to_dict()}


class GMFModel(Recommender):
    kind = "gmf"

    @classmethod
    def init(cls, cfg: ModelConfig) -> "GMFModel":
        rng = _rng(cfg, 1)
        d = cfg.gmf_dim
        return cls(cfg, ParamSet({
            "gmf.user": _weight(rng, (cfg.n_users, d), cfg, dense=False),
            "gmf.item": _weight(rng, (cfg.n_items, d), cfg, dense=False),
            "gmf.h": _weight(rng, (d, 1), cfg),
        }))

    def logits(self, params, users, items):
        return _to_scalar_per_row(matmul(_gmf_vector(params, users, items), params["gmf.h"]))


def _mlp_layers(rng, cfg: ModelConfig) -> dict[str, Tensor]:
    out = {}
    tower = cfg.mlp_tower
    for k in range(1, len(tower)):
        out[f"mlp.W{k}"] = _weight(rng, (tower[k - 1], tower[k]), cfg)
        out[f"mlp.b{k}"] = _zeros(tower[k])
    return out


class MLPModel(Recommender):
    kind = "mlp"

    @classmethod
    def init(cls, cfg: ModelConfig) -> "MLPModel":
        rng = _rng(cfg, 2)
        d = cfg.mlp_dim
        values = {
            "mlp.user": _weight(rng, (cfg.n_users, d), cfg, dense=False),
            "mlp.item": _weight(rng, (cfg.n_items, d), cfg, dense=False),
        }
        values.update(_mlp_layers(rng, cfg))
        values["mlp.out.W"] = _weight(rng, (cfg.mlp_tower[-1], 1), cfg)
        values["mlp.out.b"] = _zeros(1)
        return cls(cfg, ParamSet(values))

    def logits(self, params, users, items):
        z = _mlp_vector(params, users, items, self.config.mlp_depth)
        return _to_scalar_per_row(_dense(z, params, "mlp.out.W", "mlp.out.b"))


class NMFModel(Recommender):
    """GMF and MLP paths with separate embeddings, fused by one output layer.

    ``gmf.h`` is carried along from the pre-trained GMF (the fused layer holds
    the weights actually used) so that forks can freeze it.
    """

    kind = "nmf"

    @classmethod
    def init(cls, cfg: ModelConfig) -> "NMFModel":
        """Fresh NMF built from freshly initialised GMF and MLP parts."""
        return init_nmf_from_pretrained(GMFModel.init(cfg), MLPModel.init(cfg), cfg.fusion_alpha)

    def logits(self, params, users, items):
        v = concat(_gmf_vector(params, users, items),
                   _mlp_vector(params, users, items, self.config.mlp_depth), axis=1)
        return _to_scalar_per_row(_dense(v, params, "fused.W", "fused.b"))


def init_nmf_from_pretrained(gmf: GMFModel, mlp: MLPModel, fusion_alpha: float | None = None) -> NMFModel:
    """Fused model whose initial logit is alpha*logit_gmf + (1-alpha)*logit_mlp."""
    cfg = mlp.config
    alpha = cfg.fusion_alpha if fusion_alpha is None else fusion_alpha
    g, m = gmf.params, mlp.params
    if g["gmf.h"].shape[0] != gmf.config.gmf_dim or m["mlp.out.W"].shape[0] != cfg.mlp_tower[-1]:
        raise ValueError("output layer widths do not match the configured sub-networks")
    if (gmf.config.n_users, gmf.config.n_items) != (cfg.n_users, cfg.n_items):
        raise ValueError("GMF and MLP were built for different vocabularies")
    values = {name: g[name] for name in g}
    values.update({name: m[name] for name in m if not name.startswith("mlp.out.")})
    values["fused.W"] = Tensor(np.concatenate([alpha * g["gmf.h"].data, (1.0 - alpha) * m["mlp.out.W"].data]))
    values["fused.b"] = Tensor((1.0 - alpha) * m["mlp.out.b"].data)
    nmf_cfg = replace(cfg, gmf_dim=gmf.config.gmf_dim, fusion_alpha=alpha)
    return NMFModel(nmf_cfg, ParamSet(values))


class ForkedModel(Recommender):
    """Market-specific copy of a pre-trained NMF with a MarketHead.

    With an empty head the pre-trained fused layer stays as the output layer.
    Otherwise the head consumes the 16-wide gmf_vec ++ mlp_vec, replacing the
    fused layer, and ends in a fresh scalar output layer.
    """

    kind = "forked"

    def logits(self, params, users, items):
        cfg = self.config
        v = concat(_gmf_vector(params, users, items), _mlp_vector(params, users, items, cfg.mlp_depth), axis=1)
        if not cfg.head_widths:
            return _to_scalar_per_row(_dense(v, params, "fused.W", "fused.b"))
        for j in range(1, len(cfg.head_widths) + 1):
            v = relu(_dense(v, params, f"head.W{j}", f"head.b{j}"))
        return _to_scalar_per_row(_dense(v, params, "head.out.W", "head.out.b"))


def frozen_names(cfg: ModelConfig, k_freeze: int) -> list[str]:
    names = ["gmf.user", "gmf.item", "gmf.h", "mlp.user", "mlp.item"]
    for k in range(1, k_freeze + 1):
        names += [f"mlp.W{k}", f"mlp.b{k}"]
    return names


def fork(pretrained: NMFModel, k_freeze: int | None = None, head_widths: Sequence[int] | None = None,
         seed: int | None = None) -> ForkedModel:
    cfg = pretrained.config
    k = cfg.k_freeze if k_freeze is None else k_freeze
    head = tuple(cfg.head_widths if head_widths is None else head_widths)
    if not 1 <= k <= cfg.mlp_depth:
        raise ValueError(f"k_freeze must lie in [1, {cfg.mlp_depth}], got {k}")
    fcfg = replace(cfg, k_freeze=k, head_widths=head, seed=cfg.seed if seed is None else seed)
    src = pretrained.params
    values = {name: src[name] for name in src if not (head and name.startswith("fused."))}
    if head:
        rng = _rng(fcfg, 3)
        width = cfg.gmf_dim + cfg.mlp_tower[-1]
        for j, w in enumerate(head, start=1):
            values[f"head.W{j}"] = _weight(rng, (width, w), fcfg)
            values[f"head.b{j}"] = _zeros(w)
            width = w
        values["head.out.W"] = _weight(rng, (width, 1), fcfg)
        values["head.out.b"] = _zeros(1)
    return ForkedModel(fcfg, ParamSet(values, frozen=frozen_names(cfg, k)))


MODEL_KINDS = {cls.kind: cls for cls in (GMFModel, MLPModel, NMFModel, ForkedModel)}


def gmf_forward(model: GMFModel, user_idx, item_idx) -> np.ndarray:
    return model.forward(user_idx, item_idx)


def mlp_forward(model: MLPModel, user_idx, item_idx) -> np.ndarray:
    return model.forward(user_idx, item_idx)


def nmf_forward(model: NMFModel, user_idx, item_idx) -> np.ndarray:
    return model.forward(user_idx, item_idx)


def forked_forward(model: ForkedModel, user_idx, item_idx) -> np.ndarray:
    return model.forward(user_idx, item_idx)


def score_items(model: Recommender, user_idx: int, item_idxs: Sequence[int]) -> list[float]:
    items = np.asarray(item_idxs, dtype=np.int64)
    return model.forward(np.full(items.shape, user_idx, dtype=np.int64), items).tolist()


# ---------------------------------------------------------------------------
# checkpoints: <prefix>.manifest (name shape frozen dtype offset) + <prefix>.bin


def _payload(params: ParamSet) -> tuple[list[str], bytes]:
    lines, chunks, offset = [], [], 0
    for name in params:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {int(params.is_frozen(name))} float64 {offset}")
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    return lines, b"".join(chunks)


def params_hash(params: ParamSet) -> str:
    lines, payload = _payload(params)
    h = hashlib.sha256("\n".join(lines).encode())
    h.update(payload)
    return h.hexdigest()


def save_checkpoint(params: ParamSet, prefix, model: Recommender | None = None) -> str:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    lines, payload = _payload(params)
    Path(f"{prefix}.manifest").write_text("# name shape frozen dtype offset\n" + "\n".join(lines) + "\n",
                                          encoding="utf-8")
    Path(f"{prefix}.bin").write_bytes(payload)
    if model is not None:
        Path(f"{prefix}.json").write_text(json.dumps(model.describe(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return params_hash(params)


def load_checkpoint(prefix) -> ParamSet:
    payload = Path(f"{prefix}.bin").read_bytes()
    values, frozen = {}, []
    for line in Path(f"{prefix}.manifest").read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, shape, is_frozen, dtype, offset = line.split()
        if dtype != "float64":
            raise ValueError(f"unsupported dtype {dtype} for {name}")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=int(offset)).reshape(dims)
        values[name] = Tensor(arr.astype(np.float64))
        if is_frozen == "1":
            frozen.append(name)
    return ParamSet(values, frozen)


def load_model(prefix) -> Recommender:
    meta = json.loads(Path(f"{prefix}.json").read_text(encoding="utf-8"))
    cls = MODEL_KINDS[meta["kind"]]
    return cls(ModelConfig.from_dict(meta["config"]), load_checkpoint(prefix))
