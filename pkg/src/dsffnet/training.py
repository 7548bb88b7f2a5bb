"""AdamW training with step-decayed learning rate, validation and evaluation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .losses import DEFAULT_LAMBDA, MetricsRecord, chamfer, emd, loss_edge, loss_total, pmd
from .mesh import extract_edges, normalize_mesh
from .model import ConfigError, ModelConfig, as_tensors, init_params, predict, check_params
from .synthetic import Triple

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lr", "train_loss", "val_pmd", "val_cd")


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.8
    decay_every: int = 8
    epochs: int = 50
    batch_size: int = 8
    lam: float = DEFAULT_LAMBDA
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    # stop after this many optimizer steps (None: run all epochs)
    max_steps: Optional[int] = None
    enc_widths: Tuple[int, int] = (64, 128)
    code_dim: int = 1024
    dec_widths: Tuple[int, int, int] = (64, 128, 64)
    variant: str = "full"

    # paper-scale schedule, kept for reference
    PAPER_EPOCHS = 200

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.dec_widths = tuple(int(w) for w in self.dec_widths)

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lam < 0 or self.weight_decay < 0:
            raise ConfigError("lam and weight_decay must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        self.model_config().validate()

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.enc_widths, self.code_dim, self.dec_widths, variant=self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas", "enc_widths", "dec_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            # JSON overlays may use the loss-weight's conventional name
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    # decay applied one multiplication at a time, as a step scheduler would;
    # this keeps 1e-3 -> 8e-4 -> 6.4e-4 free of pow() rounding
    lr = config.lr0
    for _ in range(epoch // config.decay_every):
        lr *= config.decay_factor
    return lr


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def decays(name: str) -> bool:
    """Weight decay applies to conv weights only (not biases, alpha, beta)."""
    return name.endswith(".W")


def adamw_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float, config: TrainConfig,
               decay_filter: Callable[[str], bool] = decays) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if not lr > 0:
        raise ad.ContractError("lr must be > 0")
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != np.shape(p):
            raise ad.ContractError(f"{name}: grad shape {np.shape(g)} != param shape {np.shape(p)}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if config.weight_decay and decay_filter(name):
            p = p - lr * config.weight_decay * p
        params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class Prepared:
    src: np.ndarray   # 3 x N_src
    tgt: np.ndarray   # 3 x N_tgt
    gt: np.ndarray    # N_tgt x 3
    edges: np.ndarray
    triple: Triple


def prepare(triple: Triple) -> Prepared:
    src = normalize_mesh(triple.source)
    tgt = normalize_mesh(triple.target)
    gt = normalize_mesh(triple.gt)
    return Prepared(src.vertices.T.copy(), tgt.vertices.T.copy(), gt.vertices.copy(),
                    extract_edges(gt), triple)


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    state: OptimizerState
    epoch: int
    config: TrainConfig


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: List[Tuple]
    step_losses: List[float]

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def format_log(rows: Sequence[Tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
    return buf.getvalue()


def sample_loss(p, model_cfg: ModelConfig, item: Prepared, lam: float):
    pred = predict(p, model_cfg, item.src, item.tgt)
    return loss_total(pred, item.gt, item.edges, lam)


def batch_gradient(params: Mapping[str, np.ndarray], model_cfg: ModelConfig,
                   batch: Sequence[Prepared], lam: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Mean loss over ``batch`` and its gradient for every parameter."""
    p = as_tensors(params, requires_grad=True)
    total = 0.0
    for item in batch:
        loss, br = sample_loss(p, model_cfg, item, lam)
        ad.backward(ad.scale(loss, 1.0 / len(batch)))
        total += br.total
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    return grads, total / len(batch)


def _predict_np(params, model_cfg: ModelConfig, item: Prepared) -> np.ndarray:
    return predict(as_tensors(params), model_cfg, item.src, item.tgt).data.T


def validate(params, model_cfg: ModelConfig, items: Sequence[Prepared]) -> Tuple[float, float]:
    if not items:
        return float("nan"), float("nan")
    pm, cd = [], []
    for it in items:
        pred = _predict_np(params, model_cfg, it)
        pm.append(pmd(pred, it.gt))
        cd.append(chamfer(pred, it.gt))
    return float(np.mean(pm)), float(np.mean(cd))


def train(config: TrainConfig, dataset: Sequence[Triple], resume: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[Tuple], None]] = None) -> TrainResult:
    """Seeded mini-batch AdamW on the ``train`` split; validates on the rest each epoch.

    Batch order for epoch ``e`` is drawn from ``default_rng([seed, e])`` so a
    run resumed from a checkpoint replays exactly the same batches.
    """
    config.validate()
    model_cfg = config.model_config()
    train_items = [prepare(t) for t in dataset if t.split == "train"]
    val_items = [prepare(t) for t in dataset if t.split != "train"]
    if not train_items:
        raise ConfigError("dataset has no training triples")
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        state = OptimizerState({k: v.copy() for k, v in resume.state.m.items()},
                               {k: v.copy() for k, v in resume.state.v.items()}, resume.state.step)
        start = resume.epoch
        check_params(params, model_cfg)
    else:
        params = init_params(model_cfg, config.seed)
        state = OptimizerState.zeros_like(params)
        start = 0
    rows: List[Tuple] = []
    step_losses: List[float] = []
    epoch = start
    for epoch in range(start, config.epochs):
        if config.max_steps is not None and state.step >= config.max_steps:
            break
        lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_items))
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch = [train_items[j] for j in order[i:i + config.batch_size]]
            grads, loss = batch_gradient(params, model_cfg, batch, config.lam)
            adamw_step(params, grads, state, lr, config)
            losses.append(loss)
            if config.max_steps is not None and state.step >= config.max_steps:
                break
        step_losses.extend(losses)
        vp, vc = validate(params, model_cfg, val_items)
        row = (epoch, lr, float(np.mean(losses)), vp, vc)
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.6g val_pmd %.6g val_cd %.6g", *row)
        if on_epoch is not None:
            on_epoch(row)
    done = rows[-1][0] + 1 if rows else start
    return TrainResult(Checkpoint(params, state, done, config), rows, step_losses)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def evaluate(params, model_cfg: ModelConfig, triples: Sequence[Triple],
             predictor: Optional[Callable[[Prepared], np.ndarray]] = None) -> Dict[str, MetricsRecord]:
    """Mean PMD / CD / EMD per split label present in ``triples``."""
    if predictor is None:
        def predictor(item):
            return _predict_np(params, model_cfg, item)
    acc: Dict[str, List[Tuple[float, float, float]]] = {}
    for t in triples:
        item = prepare(t)
        pred = predictor(item)
        acc.setdefault(t.split, []).append((pmd(pred, item.gt), chamfer(pred, item.gt),
                                            emd(pred, item.gt)))
    return {split: MetricsRecord(*map(float, np.mean(np.array(v), axis=0)))
            for split, v in acc.items()}


def mean_edge_loss(params, model_cfg: ModelConfig, triples: Sequence[Triple]) -> float:
    vals = []
    for t in triples:
        item = prepare(t)
        pred = predict(as_tensors(params), model_cfg, item.src, item.tgt)
        vals.append(float(loss_edge(pred, item.gt, item.edges).data))
    return float(np.mean(vals)) if vals else math.nan
