"""Stage-wise training of functional and referral networks, and prediction.

Stages, each counted in epochs over the training split:

1. warm-up: referral nets learn to predict whether the functional argmax is
   right (smoothed targets); only referral parameters move.
2. functional: (a) per-view evidential loss, then (b) the same loss on the
   trust-discounted BCF fusion; only functional parameters move, with one
   optimiser step per substage.
3. referral: the fused loss of 2b, stepping referral parameters instead.
4. functional again: a repeat of stage 2.

The annealing factor of the KL term follows one epoch counter that runs
across all stages.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import losses
from .data import MultiViewDataset, make_pseudo_view, normalize, split, stream_rng
from .metrics import PredictionRecord
from .neural import AdamState, EvidentialNets, adam_step
from .sl_core import (
    MultinomialOpinion,
    discount_batch,
    discount_batch_vjp,
    fuse_pair_batch,
    fuse_pair_batch_vjp,
    opinion_batch,
    opinion_batch_vjp,
    trust_from_referral_batch,
    trust_from_referral_vjp,
)

log = logging.getLogger(__name__)

# Per-dataset learning rates (functional, referral)
DATASET_LR = {
    "handwritten": (3e-3, 3e-4),
    "caltech101": (1e-4, 3e-5),
    "pie": (3e-3, 1e-3),
    "scene15": (1e-2, 3e-3),
    "hmdb": (3e-4, 1e-4),
    "cub": (1e-3, 3e-4),
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    rlr: float = 3e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    stage_epochs: tuple[int, int, int] = (100, 50, 100)
    smoothing_eta: float = 0.9
    batch_size: int = 200
    seed: int = 0
    use_pseudo_view: bool = False
    use_td: bool = True
    train_fraction: float = 0.8
    normalize: bool | None = None  # None: on unless the dataset is synthetic
    hidden: int | None = None
    d_h: int = 32
    d_2: int = 16
    k: int = 0
    v: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.rlr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_epochs < 0 or any(e < 0 for e in self.stage_epochs):
            raise ValueError("epoch counts must be non-negative")
        if len(self.stage_epochs) != 3:
            raise ValueError("stage_epochs needs three entries (stages 2, 3, 4)")
        if not 0.0 < self.smoothing_eta <= 1.0:
            raise ValueError("smoothing_eta must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict[str, str]:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(map(str, value))
            elif isinstance(value, bool):
                value = int(value)
            out[key] = str(value)
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "TrainConfig":
        """Parse string values (config file / checkpoint meta)."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in raw.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            value = value.strip()
            kind = str(kinds[key])
            if key == "stage_epochs":
                kw[key] = tuple(int(x) for x in value.split(","))
            elif value in ("None", ""):
                kw[key] = None
            elif "bool" in kind:
                kw[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind.startswith("int"):
                kw[key] = int(value)
            elif kind.startswith("float"):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{n}: expected key = value")
            raw[key.strip()] = value.strip()
    return raw


@dataclass
class EpochReport:
    stage: str
    epoch: int
    mean_loss: float
    train_accuracy: float
    view_accuracies: list[float]
    annealing: float
    skipped: int = 0


# -- differentiable fused opinion -------------------------------------------


@dataclass
class FusionPass:
    evidence: list[np.ndarray]
    referral: list[np.ndarray] | None
    trust: list[np.ndarray] | None
    discounted: list[np.ndarray]
    partial: list[np.ndarray]  # left-fold prefixes; partial[-1] is the fused evidence

    @property
    def fused(self) -> np.ndarray:
        return self.partial[-1]


def fusion_forward(nets: EvidentialNets, xs, use_td: bool) -> FusionPass:
    evidence = [net.forward(x) for net, x in zip(nets.functional, xs)]
    referral = trust = None
    discounted = evidence
    if use_td:
        referral, trust, discounted = [], [], []
        for net, x, e in zip(nets.referral, xs, evidence):
            b, u = opinion_batch(e)
            r = net.forward(x, np.column_stack([b, u]))
            p = trust_from_referral_batch(r)
            referral.append(r)
            trust.append(p)
            discounted.append(discount_batch(e, p))
    partial = [discounted[0]]
    for d in discounted[1:]:
        partial.append(fuse_pair_batch(partial[-1], d))
    return FusionPass(evidence, referral, trust, discounted, partial)


def fusion_backward(nets: EvidentialNets, fp: FusionPass, grad_fused, functional=True) -> None:
    """Back-propagate into referral nets (when TD is on) and optionally functional nets.

    The referral input opinion is a function of the functional evidence, so
    its gradient is routed back to the functional nets as well.
    """
    g = grad_fused
    grad_disc = [None] * len(fp.discounted)
    for i in range(len(fp.discounted) - 1, 0, -1):
        g, grad_disc[i] = fuse_pair_batch_vjp(fp.partial[i - 1], fp.discounted[i], g)
    grad_disc[0] = g
    for v, gd in enumerate(grad_disc):
        e = fp.evidence[v]
        if fp.trust is None:
            grad_e = gd
        else:
            grad_e, grad_p = discount_batch_vjp(e, fp.trust[v], gd)
            grad_r = trust_from_referral_vjp(fp.referral[v], grad_p)
            _, grad_o = nets.referral[v].backward(grad_r)
            if functional:
                grad_e = grad_e + opinion_batch_vjp(e, grad_o[:, :-1], grad_o[:, -1])
        if functional:
            nets.functional[v].backward(grad_e)


def _finite_rows(a: np.ndarray) -> np.ndarray:
    return np.all(np.isfinite(a), axis=-1)


# -- trainer ----------------------------------------------------------------


class Trainer:
    """Holds networks, optimiser states and the global epoch counter."""

    def __init__(self, nets: EvidentialNets, cfg: TrainConfig, k: int):
        cfg.validate()
        self.nets = nets
        self.cfg = cfg
        self.k = k
        self.func_opt = AdamState(cfg.lr, weight_decay=cfg.weight_decay)
        self.ref_opt = AdamState(cfg.rlr, weight_decay=cfg.weight_decay)
        self.batch_rng = stream_rng(cfg.seed, "batching")
        self.epoch = 0
        self.reports: list[EpochReport] = []
        self.skipped = 0

    def _batches(self, n: int):
        order = self.batch_rng.permutation(n)
        for start in range(0, n, self.cfg.batch_size):
            yield order[start : start + self.cfg.batch_size]

    def _finish_epoch(self, stage, xs, y, total_loss, n_items, skipped):
        records = predict_batch(self.nets, xs, y, self.cfg.use_td)
        report = EpochReport(
            stage=stage,
            epoch=self.epoch,
            mean_loss=total_loss / max(n_items, 1),
            train_accuracy=float(np.mean(records.fused_label == y)),
            view_accuracies=[float(np.mean(records.view_labels[:, v] == y)) for v in range(len(xs))],
            annealing=losses.annealing(self.epoch),
            skipped=skipped,
        )
        if not np.isfinite(report.mean_loss):
            raise FloatingPointError(f"non-finite loss in stage {stage}, epoch {self.epoch}")
        self.reports.append(report)
        log.info(
            "stage=%s epoch=%d loss=%.5f acc=%.4f", stage, self.epoch, report.mean_loss, report.train_accuracy
        )
        self.epoch += 1
        return report

    # stage 1
    def stage1_warmup(self, xs, y) -> None:
        for _ in range(self.cfg.warmup_epochs):
            total = 0.0
            for idx in self._batches(len(y)):
                bx, by = [x[idx] for x in xs], y[idx]
                total += self._warmup_step(bx, by) * len(idx)
            self._finish_epoch("warmup", xs, y, total, len(y), 0)

    def warmup_loss_and_grads(self, xs, y) -> float:
        """Batch warm-up loss; leaves referral gradients on the nets."""
        value = 0.0
        for fnet, rnet, x in zip(self.nets.functional, self.nets.referral, xs):
            e = fnet.forward(x)
            b, u = opinion_batch(e)
            z = losses.correctness_target(np.argmax(b, axis=1), y)
            target = losses.smooth_label(z, self.cfg.smoothing_eta)
            r = rnet.forward(x, np.column_stack([b, u]))
            lv = losses.warmup_loss(r + 1.0, target)
            value += float(np.mean(lv.value))
            rnet.backward(lv.grad_alpha / len(y))
        return value

    def _warmup_step(self, xs, y) -> float:
        value = self.warmup_loss_and_grads(xs, y)
        adam_step(self.ref_opt, self.nets.referral_params(), self.nets.referral_grads())
        return value

    # stages 2 and 4
    def view_loss_and_grads(self, xs, y) -> float:
        """Substage 2a loss summed over views; leaves functional gradients."""
        onehot = losses.one_hot(y, self.k)
        value = 0.0
        for net, x in zip(self.nets.functional, xs):
            lv = losses.overall_loss(net.forward(x) + 1.0, onehot, self.epoch)
            value += float(np.mean(lv.value))
            net.backward(lv.grad_alpha / len(y))
        return value

    def fused_loss_and_grads(self, xs, y, functional: bool, use_td=None) -> tuple[float, int]:
        """Substage 2b / stage 3 loss on the fused opinion; leaves gradients.

        Rows whose fused evidence is not finite are skipped.
        """
        use_td = self.cfg.use_td if use_td is None else use_td
        fp = fusion_forward(self.nets, xs, use_td)
        ok = _finite_rows(fp.fused)
        alpha = np.where(ok[:, None], fp.fused, 0.0) + 1.0
        lv = losses.overall_loss(alpha, losses.one_hot(y, self.k), self.epoch)
        n_ok = max(int(ok.sum()), 1)
        grad = np.where(ok[:, None], lv.grad_alpha, 0.0) / n_ok
        fusion_backward(self.nets, fp, grad, functional=functional)
        value = float(np.sum(np.where(ok, lv.value, 0.0)) / n_ok)
        return value, int((~ok).sum())

    def stage2_functional(self, xs, y, epochs=None, stage="functional") -> None:
        epochs = self.cfg.stage_epochs[0] if epochs is None else epochs
        for _ in range(epochs):
            total, skipped = 0.0, 0
            for idx in self._batches(len(y)):
                bx, by = [x[idx] for x in xs], y[idx]
                la = self.view_loss_and_grads(bx, by)
                adam_step(self.func_opt, self.nets.functional_params(), self.nets.functional_grads())
                lb, sk = self.fused_loss_and_grads(bx, by, functional=True)
                adam_step(self.func_opt, self.nets.functional_params(), self.nets.functional_grads())
                total += (la + lb) * len(idx)
                skipped += sk
            self.skipped += skipped
            self._finish_epoch(stage, xs, y, total, len(y), skipped)

    def stage3_referral(self, xs, y) -> None:
        for _ in range(self.cfg.stage_epochs[1]):
            total, skipped = 0.0, 0
            for idx in self._batches(len(y)):
                bx, by = [x[idx] for x in xs], y[idx]
                lv, sk = self.fused_loss_and_grads(bx, by, functional=False)
                adam_step(self.ref_opt, self.nets.referral_params(), self.nets.referral_grads())
                total += lv * len(idx)
                skipped += sk
            self.skipped += skipped
            self._finish_epoch("referral", xs, y, total, len(y), skipped)

    def stage4_functional(self, xs, y) -> None:
        self.stage2_functional(xs, y, self.cfg.stage_epochs[2], stage="refine")

    def run(self, xs, y) -> list[EpochReport]:
        if self.cfg.use_td:
            self.stage1_warmup(xs, y)
        self.stage2_functional(xs, y)
        if self.cfg.use_td:
            self.stage3_referral(xs, y)
        self.stage4_functional(xs, y)
        return self.reports


# -- prediction -------------------------------------------------------------


@dataclass
class Prediction:
    """Full per-instance output for one batch."""

    labels: np.ndarray
    fused_belief: np.ndarray
    fused_uncertainty: np.ndarray
    view_belief: np.ndarray  # (M, V, K)
    view_uncertainty: np.ndarray  # (M, V)
    trust: np.ndarray  # (M, V); ones when TD is off
    conflict: np.ndarray  # (M,) rows whose fusion was not finite


def predict_full(nets: EvidentialNets, xs, use_td: bool) -> Prediction:
    fp = fusion_forward(nets, xs, use_td)
    fused_b, fused_u = opinion_batch(fp.fused)
    conflict = ~(_finite_rows(fp.fused) & np.isfinite(fused_u))
    beliefs, uncs = zip(*(opinion_batch(e) for e in fp.evidence))
    trust = np.column_stack(fp.trust) if fp.trust is not None else np.ones((len(fused_u), len(xs)))
    return Prediction(
        labels=np.argmax(np.nan_to_num(fused_b, nan=-1.0), axis=1),
        fused_belief=fused_b,
        fused_uncertainty=fused_u,
        view_belief=np.stack(beliefs, axis=1),
        view_uncertainty=np.column_stack(uncs),
        trust=trust,
        conflict=conflict,
    )


def predict_batch(nets: EvidentialNets, xs, y, use_td: bool) -> PredictionRecord:
    """Prediction records; conflict rows are dropped."""
    pred = predict_full(nets, xs, use_td)
    keep = ~pred.conflict
    return PredictionRecord(
        fused_label=pred.labels[keep],
        fused_uncertainty=pred.fused_uncertainty[keep],
        true_label=np.asarray(y)[keep],
        view_labels=np.argmax(pred.view_belief, axis=2)[keep],
        view_dot=pred.trust[keep],
    )


def predict(nets: EvidentialNets, views, use_td: bool = True):
    """Single instance: (label, fused opinion, per-view opinions, per-view trust)."""
    xs = [np.asarray(x, dtype=np.float64)[None, :] for x in views]
    pred = predict_full(nets, xs, use_td)
    if pred.conflict[0]:
        raise ArithmeticError("fused evidence is not finite")
    fused = MultinomialOpinion(pred.fused_belief[0], pred.fused_uncertainty[0])
    per_view = [
        MultinomialOpinion(pred.view_belief[0, v], pred.view_uncertainty[0, v]) for v in range(len(xs))
    ]
    return int(pred.labels[0]), fused, per_view, [float(t) for t in pred.trust[0]]


# -- full pipeline ----------------------------------------------------------


def prepare(ds: MultiViewDataset, cfg: TrainConfig) -> MultiViewDataset:
    """Split (unless already split), normalise, add the pseudo view."""
    if ds.train_idx is None:
        ds = split(ds, cfg.train_fraction, cfg.seed)
    use_norm = (not ds.synthetic) if cfg.normalize is None else cfg.normalize
    if use_norm:
        ds = normalize(ds)
    if cfg.use_pseudo_view:
        ds = make_pseudo_view(ds)
    return ds


def build_nets(ds: MultiViewDataset, cfg: TrainConfig) -> EvidentialNets:
    return EvidentialNets.build(
        ds.dims, ds.k, stream_rng(cfg.seed, "init"), hidden=cfg.hidden, d_h=cfg.d_h, d_2=cfg.d_2
    )


@dataclass
class TrainResult:
    nets: EvidentialNets
    reports: list[EpochReport]
    config: TrainConfig
    dataset: MultiViewDataset
    skipped: int = 0
    extra: dict = field(default_factory=dict)


def train(ds: MultiViewDataset, cfg: TrainConfig) -> TrainResult:
    """Prepare the data, build networks and run all stages on the train split."""
    cfg.validate()
    ds = prepare(ds, cfg)
    cfg = replace(cfg, k=ds.k, v=ds.v)
    nets = build_nets(ds, cfg)
    xs, y = ds.subset(ds.train_idx)
    trainer = Trainer(nets, cfg, ds.k)
    trainer.run(xs, y)
    return TrainResult(nets, trainer.reports, cfg, ds, trainer.skipped)


def evaluate(result_or_nets, ds: MultiViewDataset, use_td: bool) -> PredictionRecord:
    nets = result_or_nets.nets if isinstance(result_or_nets, TrainResult) else result_or_nets
    xs, y = ds.subset(ds.test_idx)
    return predict_batch(nets, xs, y, use_td)
