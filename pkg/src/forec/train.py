"""Training regimes: single market, equal-sampling cross-market (++), MAML
pre-training, MAML fast adaptation, and the fork + fine-tune pipelines.

Every stage draws its randomness from ``(seed, stage)`` alone, so any stage
can be re-run from the previous stage's checkpoint with identical results.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import NegativeSampler, SplitDataset
from .models import (ForkedModel, GMFModel, MLPModel, ModelConfig, NMFModel, Recommender, fork,
                     init_nmf_from_pretrained, params_hash)
from .numgrad import (Adam, GradTape, NumericError, ParamSet, SGD, Tensor, bce_loss, backward,
                      sgd_step, sigmoid)

log = logging.getLogger(__name__)

METHODS = ("gmf", "mlp", "nmf", "gmf++", "mlp++", "nmf++", "maml", "forec", "nmf-forec")
CROSS_MARKET = {"gmf++", "mlp++", "nmf++", "maml", "forec", "nmf-forec"}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    gmf_learning_rate: float = 0.005
    l2: float = 1e-7
    epochs: int = 20
    batch_size: int = 256
    train_negatives: int = 4
    optimizer: str = "adam"
    negatives_scope: str | None = "global"  # "market" restricts to the market catalog
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.gmf_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_for(self, model: Recommender) -> float:
        return self.gmf_learning_rate if model.kind == "gmf" else self.learning_rate


@dataclass
class MamlConfig:
    inner_lr: float = 0.01
    meta_lr: float = 0.1
    shots: int = 20
    meta_iterations: int | None = None  # None: one pass over the largest market per meta-epoch
    meta_epochs: int = 1
    second_order: bool = False
    hvp_eps: float = 1e-4
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")


@dataclass
class ForecConfig:
    maml: MamlConfig = field(default_factory=MamlConfig)
    k_freeze: int = 2
    head_widths: tuple[int, ...] = (16, 32, 16)
    finetune_l2: float = 0.001
    finetune_epochs: int = 20
    finetune_source: bool = False

    def __post_init__(self):
        if isinstance(self.maml, dict):
            self.maml = MamlConfig(**self.maml)
        self.head_widths = tuple(self.head_widths)


@dataclass
class TrainResult:
    model: Recommender
    history: list[dict] = field(default_factory=list)


@dataclass
class PipelineResult:
    """Final model plus every intermediate stage, in execution order."""

    model: Recommender
    stages: dict[str, Recommender] = field(default_factory=dict)
    histories: dict[str, list] = field(default_factory=dict)
    extra_models: dict[str, Recommender] = field(default_factory=dict)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stage.encode())])


def stage_stream(stage: str, market: str = "") -> int:
    return zlib.crc32(f"{stage}/{market}".encode())


# ---------------------------------------------------------------------------
# losses and gradients


def batch_loss(model: Recommender, params: ParamSet, users, items, labels) -> Tensor:
    """Mean BCE of ``model`` on one batch; records on the active tape."""
    return bce_loss(sigmoid(model.logits(params, users, items)), labels)


def loss_and_grads(model: Recommender, params: ParamSet, users, items, labels) -> tuple[float, dict[str, Tensor]]:
    with GradTape():
        loss = batch_loss(model, params, users, items, labels)
    return loss.item(), backward(loss, params)


def make_optimizer(kind: str, lr: float, l2: float):
    return Adam(lr, l2) if kind == "adam" else SGD(lr, l2)


def with_negatives(users: np.ndarray, items: np.ndarray, sampler: NegativeSampler,
                   n_neg: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positives followed by ``n_neg`` sampled negatives per positive."""
    neg = sampler.sample_train(users, n_neg).reshape(-1)
    u = np.concatenate([users, np.repeat(users, n_neg)])
    i = np.concatenate([items, neg])
    y = np.concatenate([np.ones(len(users)), np.zeros(len(neg))])
    return u, i, y


def _run_epoch(model, params, opt, u, i, y, batch_size, rng, epoch):
    order = rng.permutation(len(u))
    total, seen = 0.0, 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        try:
            loss, grads = loss_and_grads(model, params, u[idx], i[idx], y[idx])
            params = opt.step(params, grads)
        except NumericError as exc:
            raise TrainingError(f"{model.kind}: non-finite value at epoch {epoch}, batch {start // batch_size}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingError(f"{model.kind}: NaN loss at epoch {epoch}, batch {start // batch_size}")
        total += loss * len(idx)
        seen += len(idx)
    return params, total / max(seen, 1)


def _fit(model: Recommender, epoch_data: Callable, cfg: TrainConfig, rng, lr: float, l2: float) -> TrainResult:
    opt = make_optimizer(cfg.optimizer, lr, l2)
    params = model.params
    history = []
    for epoch in range(cfg.epochs):
        u, i, y, info = epoch_data(epoch)
        params, loss = _run_epoch(model, params, opt, u, i, y, cfg.batch_size, rng, epoch)
        history.append({"epoch": epoch, "loss": loss, "n": int(len(u)), **info})
        log.debug("%s epoch %d loss %.5f", model.kind, epoch, loss)
    return TrainResult(model.with_params(params), history)


def train_single(model: Recommender, split: SplitDataset, cfg: TrainConfig, sampler: NegativeSampler | None = None,
                 l2: float | None = None, lr: float | None = None, stage: str = "single") -> TrainResult:
    """Train on one market; negatives are re-drawn every epoch."""
    rng = stage_rng(cfg.seed, stage)
    if sampler is None:
        sampler = NegativeSampler.for_split(split, cfg.negatives_scope or "market", cfg.seed)
    sampler = sampler.reseeded(stage_stream(stage, split.market_code))
    users, items = split.train_arrays()

    def epoch_data(epoch):
        u, i, y = with_negatives(users, items, sampler, cfg.train_negatives)
        return u, i, y, {split.market_code: int(len(users))}

    return _fit(model, epoch_data, cfg, rng, cfg.lr_for(model) if lr is None else lr,
                cfg.l2 if l2 is None else l2)


def train_concat_equal(model: Recommender, src_split: SplitDataset, tgt_split: SplitDataset, cfg: TrainConfig,
                       src_sampler: NegativeSampler | None = None, tgt_sampler: NegativeSampler | None = None,
                       stage: str = "concat_equal") -> TrainResult:
    """Each epoch: all N_tgt target positives plus N_tgt source positives.

    Source positives are drawn without replacement, or with replacement (and
    flagged in the history) when the source is smaller than the target.
    """
    rng = stage_rng(cfg.seed, stage)
    scope = cfg.negatives_scope or "global"
    src_sampler = (src_sampler or NegativeSampler.for_split(src_split, scope, cfg.seed)).reseeded(
        stage_stream(stage, "source"))
    tgt_sampler = (tgt_sampler or NegativeSampler.for_split(tgt_split, scope, cfg.seed)).reseeded(
        stage_stream(stage, "target"))
    su, si = src_split.train_arrays()
    tu, ti = tgt_split.train_arrays()
    n_tgt = len(tu)
    with_repl = len(su) < n_tgt
    if with_repl:
        log.warning("source market smaller than target (%d < %d); sampling with replacement", len(su), n_tgt)

    def epoch_data(epoch):
        pick = rng.choice(len(su), size=n_tgt, replace=with_repl)
        a = with_negatives(su[pick], si[pick], src_sampler, cfg.train_negatives)
        b = with_negatives(tu, ti, tgt_sampler, cfg.train_negatives)
        u, i, y = (np.concatenate(pair) for pair in zip(a, b))
        info = {"source": int(n_tgt), "target": int(n_tgt), "with_replacement": with_repl}
        return u, i, y, info

    return _fit(model, epoch_data, cfg, rng, cfg.lr_for(model), cfg.l2)


def train_concat(model: Recommender, splits: Sequence[SplitDataset], cfg: TrainConfig,
                 samplers: Sequence[NegativeSampler] | None = None, stage: str = "concat") -> TrainResult:
    """Plain concatenation of every market's training data."""
    rng = stage_rng(cfg.seed, stage)
    scope = cfg.negatives_scope or "global"
    if samplers is None:
        samplers = [NegativeSampler.for_split(s, scope, cfg.seed) for s in splits]
    samplers = [s.reseeded(stage_stream(stage, str(k))) for k, s in enumerate(samplers)]
    arrays = [s.train_arrays() for s in splits]

    def epoch_data(epoch):
        parts = [with_negatives(u, i, smp, cfg.train_negatives) for (u, i), smp in zip(arrays, samplers)]
        u, i, y = (np.concatenate(col) for col in zip(*parts))
        return u, i, y, {s.market_code: int(len(a[0])) for s, a in zip(splits, arrays)}

    return _fit(model, epoch_data, cfg, rng, cfg.lr_for(model), cfg.l2)


def train_nmf_stack(model_cfg: ModelConfig, trainer: Callable[[Recommender, str], TrainResult],
                    prefix: str) -> PipelineResult:
    """GMF and MLP trained separately, fused into NMF, then NMF trained."""
    gmf = trainer(GMFModel.init(model_cfg), f"{prefix}gmf")
    mlp = trainer(MLPModel.init(model_cfg), f"{prefix}mlp")
    nmf_init = init_nmf_from_pretrained(gmf.model, mlp.model, model_cfg.fusion_alpha)
    nmf = trainer(nmf_init, f"{prefix}nmf")
    return PipelineResult(
        nmf.model,
        stages={f"{prefix}gmf": gmf.model, f"{prefix}mlp": mlp.model, f"{prefix}nmf": nmf.model},
        histories={f"{prefix}gmf": gmf.history, f"{prefix}mlp": mlp.history, f"{prefix}nmf": nmf.history},
    )


# ---------------------------------------------------------------------------
# MAML


def sample_shots(split: SplitDataset, k: int, sampler: NegativeSampler, rng: np.random.Generator,
                 n_neg: int, source: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``k`` interactions (with replacement only if fewer than ``k`` exist) plus negatives."""
    if source == "train":
        users, items = split.train_arrays()
    else:
        part = split.valid if source == "valid" else split.test
        users = np.array(split.users, dtype=np.int64)
        items = np.array([part[u] for u in split.users], dtype=np.int64)
    replace_ = len(users) < k
    if replace_:
        log.warning("%s: only %d %s interactions for a %d-shot batch; sampling with replacement",
                    split.market_code, len(users), source, k)
    pick = rng.choice(len(users), size=k, replace=replace_)
    return with_negatives(users[pick], items[pick], sampler, n_neg)


def maml_inner_step(model: Recommender, params: ParamSet, batch, alpha: float) -> ParamSet:
    """theta' = theta - alpha * grad L(theta) on ``batch`` (plain SGD, no L2)."""
    _, grads = loss_and_grads(model, params, *batch)
    return sgd_step(params, grads, alpha, 0.0)


def hessian_vector_product(model: Recommender, params: ParamSet, batch, vec: dict[str, Tensor],
                           eps: float = 1e-4) -> dict[str, Tensor]:
    """H(theta) v by central differences of gradients; the perturbation has norm ``eps``."""
    norm = math.sqrt(sum(float(np.sum(v.data ** 2)) for v in vec.values()))
    if norm == 0.0:
        return {n: Tensor(np.zeros_like(v.data)) for n, v in vec.items()}
    h = eps / norm
    plus = params.replace({n: Tensor(params[n].data + h * v.data) for n, v in vec.items()})
    minus = params.replace({n: Tensor(params[n].data - h * v.data) for n, v in vec.items()})
    _, gp = loss_and_grads(model, plus, *batch)
    _, gm = loss_and_grads(model, minus, *batch)
    return {n: Tensor((gp[n].data - gm[n].data) / (2 * h)) for n in vec}


def maml_task_gradient(model: Recommender, params: ParamSet, adapt_batch, eval_batch, alpha: float,
                       second_order: bool = False, eps: float = 1e-4) -> tuple[float, dict[str, Tensor]]:
    """Gradient of L_eval(theta') w.r.t. theta, theta' = inner step on ``adapt_batch``.

    First order uses grad L_eval at theta'; second order applies
    (I - alpha * H_adapt(theta)) to it.
    """
    adapted = maml_inner_step(model, params, adapt_batch, alpha)
    loss, g = loss_and_grads(model, adapted, *eval_batch)
    if second_order and alpha != 0.0:
        hv = hessian_vector_product(model, params, adapt_batch, g, eps)
        g = {n: Tensor(g[n].data - alpha * hv[n].data) for n in g}
    return loss, g


def default_meta_iterations(markets: Sequence[SplitDataset], cfg: MamlConfig) -> int:
    largest = max(m.n_train for m in markets)
    return max(1, math.ceil(largest / (2 * cfg.shots))) * cfg.meta_epochs


def maml_pretrain(markets: Sequence[SplitDataset], model: Recommender, maml_cfg: MamlConfig, base_cfg: TrainConfig,
                  samplers: Sequence[NegativeSampler] | None = None, stage: str = "maml") -> TrainResult:
    """Meta-train over the markets, visiting each market once per iteration.

    Per market: one K-shot adapt batch gives theta'_i, a second K-shot batch
    gives L_i(theta'_i); theta then takes one SGD step of size meta_lr on the
    summed task gradients.
    """
    if len(markets) < 2:
        raise ValueError("maml_pretrain needs at least two markets")
    rng = stage_rng(base_cfg.seed, stage)
    scope = base_cfg.negatives_scope or "global"
    if samplers is None:
        samplers = [NegativeSampler.for_split(m, scope, base_cfg.seed) for m in markets]
    samplers = [s.reseeded(stage_stream(stage, str(k))) for k, s in enumerate(samplers)]
    n_iter = maml_cfg.meta_iterations or default_meta_iterations(markets, maml_cfg)
    params = model.params
    history = []
    for it in range(n_iter):
        total: dict[str, np.ndarray] = {}
        losses = []
        for split, smp in zip(markets, samplers):
            adapt = sample_shots(split, maml_cfg.shots, smp, rng, base_cfg.train_negatives)
            evalb = sample_shots(split, maml_cfg.shots, smp, rng, base_cfg.train_negatives)
            loss, g = maml_task_gradient(model, params, adapt, evalb, maml_cfg.inner_lr,
                                         maml_cfg.second_order, maml_cfg.hvp_eps)
            losses.append(loss)
            for n, t in g.items():
                total[n] = t.data if n not in total else total[n] + t.data
        if not all(math.isfinite(x) for x in losses):
            raise TrainingError(f"maml: non-finite meta loss at iteration {it}")
        params = sgd_step(params, {n: Tensor(v) for n, v in total.items()}, maml_cfg.meta_lr, 0.0)
        history.append({"iteration": it, "meta_loss": float(np.mean(losses))})
    return TrainResult(model.with_params(params), history)


def maml_fast_adapt(model: Recommender, target: SplitDataset, shots: int = 20, alpha: float = 0.01,
                    sampler: NegativeSampler | None = None, seed: int = 0, n_neg: int = 4) -> Recommender:
    """One SGD step on one K-shot batch from the target's validation interactions."""
    rng = stage_rng(seed, "fast_adapt")
    sampler = (sampler or NegativeSampler.for_split(target, "global", seed)).reseeded(
        stage_stream("fast_adapt", target.market_code))
    batch = sample_shots(target, shots, sampler, rng, n_neg, source="valid")
    return model.with_params(maml_inner_step(model, model.params, batch, alpha))


# ---------------------------------------------------------------------------
# pipelines


def _market_sampler(split: SplitDataset, cfg: TrainConfig, default_scope: str) -> NegativeSampler:
    return NegativeSampler.for_split(split, cfg.negatives_scope or default_scope, cfg.seed)


def single_market_stack(tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                        upto: str = "nmf") -> PipelineResult:
    sampler = _market_sampler(tgt, cfg, "market")

    def trainer(model, stage):
        return train_single(model, tgt, cfg, sampler, stage=stage)

    if upto == "gmf":
        r = trainer(GMFModel.init(model_cfg), "gmf")
        return PipelineResult(r.model, {"gmf": r.model}, {"gmf": r.history})
    if upto == "mlp":
        r = trainer(MLPModel.init(model_cfg), "mlp")
        return PipelineResult(r.model, {"mlp": r.model}, {"mlp": r.history})
    return train_nmf_stack(model_cfg, trainer, "")


def equal_sampling_stack(src: SplitDataset, tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                         upto: str = "nmf") -> PipelineResult:
    """GMF++ / MLP++ / NMF++."""
    ss, ts = _market_sampler(src, cfg, "global"), _market_sampler(tgt, cfg, "global")

    def trainer(model, stage):
        return train_concat_equal(model, src, tgt, cfg, ss, ts, stage=stage)

    if upto in ("gmf", "mlp"):
        cls = GMFModel if upto == "gmf" else MLPModel
        r = trainer(cls.init(model_cfg), f"{upto}++")
        return PipelineResult(r.model, {f"{upto}++": r.model}, {f"{upto}++": r.history})
    return train_nmf_stack(model_cfg, trainer, "++")


def joint_init(src: SplitDataset, tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
               warmup_epochs: int) -> PipelineResult:
    """theta initialisation: the NMF recipe on the plain concatenation of both markets."""
    warm = replace(cfg, epochs=warmup_epochs)
    samplers = [_market_sampler(s, cfg, "global") for s in (src, tgt)]

    def trainer(model, stage):
        return train_concat(model, [src, tgt], warm, samplers, stage=stage)

    return train_nmf_stack(model_cfg, trainer, "init_")


def maml_stage(src: SplitDataset, tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
               maml_cfg: MamlConfig) -> PipelineResult:
    init = joint_init(src, tgt, model_cfg, cfg, maml_cfg.warmup_epochs)
    samplers = [_market_sampler(s, cfg, "global") for s in (src, tgt)]
    meta = maml_pretrain([src, tgt], init.model, maml_cfg, cfg, samplers)
    return PipelineResult(meta.model, {**init.stages, "pretrain": meta.model},
                          {**init.histories, "pretrain": meta.history})


def finetune(model: ForkedModel, split: SplitDataset, cfg: TrainConfig, forec_cfg: ForecConfig,
             stage: str = "finetune") -> TrainResult:
    """Fine-tune a fork on one market's training data with the fine-tuning L2."""
    ft_cfg = replace(cfg, epochs=forec_cfg.finetune_epochs)
    sampler = _market_sampler(split, cfg, "global")
    return train_single(model, split, ft_cfg, sampler, l2=forec_cfg.finetune_l2, stage=stage)


def fork_and_finetune(pretrained: NMFModel, src: SplitDataset, tgt: SplitDataset, cfg: TrainConfig,
                      forec_cfg: ForecConfig, base: PipelineResult) -> PipelineResult:
    """Shared tail of FOREC and NMF-FOREC."""
    forked = fork(pretrained, forec_cfg.k_freeze, forec_cfg.head_widths)
    tuned = finetune(forked, tgt, cfg, forec_cfg)
    stages = {**base.stages, "fork": forked, "finetune": tuned.model}
    histories = {**base.histories, "finetune": tuned.history}
    extra = {}
    if forec_cfg.finetune_source:
        extra["source"] = finetune(forked, src, cfg, forec_cfg, stage="finetune_source").model
    return PipelineResult(tuned.model, stages, histories, extra)


def forec_train(src: SplitDataset, tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                forec_cfg: ForecConfig) -> PipelineResult:
    """Joint init -> MAML pre-training -> fork -> fine-tune on the target."""
    base = maml_stage(src, tgt, model_cfg, cfg, forec_cfg.maml)
    return fork_and_finetune(base.model, src, tgt, cfg, forec_cfg, base)


def nmf_forec_train(src: SplitDataset, tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                    forec_cfg: ForecConfig) -> PipelineResult:
    """As :func:`forec_train` with NMF++ in place of the MAML pre-training."""
    base = equal_sampling_stack(src, tgt, model_cfg, cfg)
    base.stages["pretrain"] = base.model
    return fork_and_finetune(base.model, src, tgt, cfg, forec_cfg, base)


def maml_baseline(src: SplitDataset, tgt: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                  maml_cfg: MamlConfig) -> PipelineResult:
    base = maml_stage(src, tgt, model_cfg, cfg, maml_cfg)
    adapted = maml_fast_adapt(base.model, tgt, maml_cfg.shots, maml_cfg.inner_lr,
                              _market_sampler(tgt, cfg, "global"), cfg.seed, cfg.train_negatives)
    return PipelineResult(adapted, {**base.stages, "fast_adapt": adapted}, base.histories)


def run_method(method: str, src: SplitDataset | None, tgt: SplitDataset, model_cfg: ModelConfig,
               cfg: TrainConfig, forec_cfg: ForecConfig | None = None) -> PipelineResult:
    forec_cfg = forec_cfg or ForecConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in CROSS_MARKET and src is None:
        raise ValueError(f"method {method!r} needs a source market")
    if method in ("gmf", "mlp", "nmf"):
        return single_market_stack(tgt, model_cfg, cfg, upto=method)
    if method in ("gmf++", "mlp++", "nmf++"):
        return equal_sampling_stack(src, tgt, model_cfg, cfg, upto=method[:-2])
    if method == "maml":
        return maml_baseline(src, tgt, model_cfg, cfg, forec_cfg.maml)
    if method == "forec":
        return forec_train(src, tgt, model_cfg, cfg, forec_cfg)
    return nmf_forec_train(src, tgt, model_cfg, cfg, forec_cfg)


def stage_hashes(result: PipelineResult) -> dict[str, str]:
    return {name: params_hash(m.params) for name, m in result.stages.items()}


def config_dict(obj) -> dict:
    d = asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
