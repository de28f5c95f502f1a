"""Reliability-guided test-time adaptation of a lightweight logit head.

The adapted model is a per-pixel affine head on the class channel,

    z'_c = sum_k mix[c, k] * (gamma_k * z_k + beta_k),

at most 15 scalars.  The objective combines prediction entropy, total
variation of the class probabilities, and the negative log of the
measurement confidence C_AoP, each with its own weight.  Entropy and TV
are differentiated analytically through the head and softmax; the
confidence term goes through a non-differentiable geometric pipeline
and is differentiated by central finite differences per scalar.

Per-batch means are taken over the concatenated pixel population, so a
batch of B equally sized images normalizes by B*H*W.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import AopKitError, InvalidInput
from .geometry import compute_aop
from .raster import ConfMap, LabelMask, LogitMap, ProbMap, argmax_labels, softmax

_GROUPS = ("gamma", "beta", "mix")


# ---------------------------------------------------------------------------
# parameters and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainableMask:
    """Which head parameter groups adaptation may update."""

    gamma: bool = True
    beta: bool = True
    mix: bool = True

    def enabled(self) -> tuple[str, ...]:
        return tuple(g for g in _GROUPS if getattr(self, g))


@dataclass(frozen=True)
class AdaptParams:
    """Head parameters: per-class scale, shift, and a 3x3 class mixer."""

    gamma: np.ndarray
    beta: np.ndarray
    mix: np.ndarray
    trainable: TrainableMask = TrainableMask()

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        m = np.asarray(self.mix, dtype=np.float64)
        if g.shape != (3,) or b.shape != (3,) or m.shape != (3, 3):
            raise InvalidInput("head parameters must have shapes (3,), (3,), (3, 3)")
        if not (np.isfinite(g).all() and np.isfinite(b).all() and np.isfinite(m).all()):
            raise InvalidInput("head parameters must be finite")
        for name, a in (("gamma", g), ("beta", b), ("mix", m)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def identity(cls, trainable: TrainableMask = TrainableMask()) -> "AdaptParams":
        return cls(gamma=np.ones(3), beta=np.zeros(3), mix=np.eye(3), trainable=trainable)

    @property
    def n_trainable(self) -> int:
        mask = self.trainable
        return 3 * mask.gamma + 3 * mask.beta + 9 * mask.mix

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def with_group(self, name: str, values: np.ndarray) -> "AdaptParams":
        return replace(self, **{name: np.array(values, dtype=np.float64)})

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "mix": self.mix.tolist(),
            "trainable": {g: getattr(self.trainable, g) for g in _GROUPS},
        }


@dataclass(frozen=True)
class TtaConfig:
    """Adaptation hyperparameters.

    Defaults: every loss weight 1.0, learning rate 1e-4, a single
    gradient step per test batch.
    """

    lambda_ent: float = 1.0
    lambda_tv: float = 1.0
    lambda_aop: float = 1.0
    lr: float = 1e-4
    steps: int = 1
    epsilon: float = 1e-6
    fd_step: float = 1e-4

    def __post_init__(self):
        for name in ("lambda_ent", "lambda_tv", "lambda_aop"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise InvalidInput(f"{name} must be finite and >= 0, got {v}")
        if not (math.isfinite(self.lr) and self.lr >= 0.0):
            raise InvalidInput(f"lr must be finite and >= 0, got {self.lr}")
        if not (isinstance(self.steps, int) and self.steps >= 1):
            raise InvalidInput(f"steps must be an integer >= 1, got {self.steps}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise InvalidInput(f"epsilon must be positive, got {self.epsilon}")
        if not (math.isfinite(self.fd_step) and self.fd_step > 0.0):
            raise InvalidInput(f"fd_step must be positive, got {self.fd_step}")


# ---------------------------------------------------------------------------
# head and losses
# ---------------------------------------------------------------------------


def apply_head(logits: LogitMap, params: AdaptParams) -> LogitMap:
    """Apply the affine head and class mixer to a logit map."""
    z = logits.values
    u = params.gamma[:, None, None] * z + params.beta[:, None, None]
    return LogitMap(np.tensordot(params.mix, u, axes=1))


def _as_batch(item, kind) -> list:
    if isinstance(item, kind):
        return [item]
    batch = list(item)
    if not batch or not all(isinstance(x, kind) for x in batch):
        raise InvalidInput(f"expected a {kind.__name__} or a nonempty sequence of them")
    return batch


def _batch_extent(batch: Sequence) -> tuple[int, int]:
    extents = {(x.height, x.width) for x in batch}
    if len(extents) != 1:
        raise InvalidInput(f"batch images disagree on extent: {sorted(extents)}")
    return next(iter(extents))


def entropy_loss(probs: ProbMap | Sequence[ProbMap]) -> float:
    """Mean per-pixel Shannon entropy (natural log, 0 log 0 = 0)."""
    batch = _as_batch(probs, ProbMap)
    h, w = _batch_extent(batch)
    total = 0.0
    for pm in batch:
        p = pm.values
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0.0, p * np.log(p), 0.0)
        total -= float(plogp.sum())
    return total / (len(batch) * h * w)


def tv_loss(probs: ProbMap | Sequence[ProbMap]) -> float:
    """Anisotropic total variation of the probability channels.

    Differences are anchored on the (H-1) x (W-1) grid: rows and
    columns whose forward neighbor would leave that grid contribute
    nothing, matching the index ranges i in [1, H-1], j in [1, W-1].
    """
    batch = _as_batch(probs, ProbMap)
    h, w = _batch_extent(batch)
    if h < 2 or w < 2:
        raise InvalidInput(f"total variation needs at least a 2x2 extent, got {h}x{w}")
    total = 0.0
    for pm in batch:
        p = pm.values
        dv = p[:, 1:, : w - 1] - p[:, : h - 1, : w - 1]
        dh = p[:, : h - 1, 1:] - p[:, : h - 1, : w - 1]
        total += float(np.abs(dv).sum() + np.abs(dh).sum())
    return total / (len(batch) * h * w)


def aop_conf_loss(c_aop: float, epsilon: float) -> float:
    """Reliability loss -log(c_aop + epsilon)."""
    if not (math.isfinite(c_aop) and 0.0 < c_aop < 1.0):
        raise InvalidInput(f"c_aop must lie strictly inside (0, 1), got {c_aop}")
    if not (math.isfinite(epsilon) and epsilon > 0.0):
        raise InvalidInput(f"epsilon must be positive, got {epsilon}")
    return -math.log(c_aop + epsilon)


@dataclass(frozen=True)
class LossBreakdown:
    """All loss components of one evaluation, plus per-image measurements."""

    l_ent: float
    l_tv: float
    l_aop: float
    l_tta: float
    c_aop: tuple
    aop_deg: tuple
    failures: tuple


def _measure_batch(
    logits: Sequence[LogitMap], conf: Sequence[ConfMap], params: AdaptParams
) -> tuple[list, list, list]:
    """Per-image (c_aop, aop_deg, failure) under the adapted head."""
    cs, aops, fails = [], [], []
    for lm, cm in zip(logits, conf):
        labels = argmax_labels(apply_head(lm, params))
        try:
            result = compute_aop(labels, cm)
        except AopKitError as err:
            cs.append(None)
            aops.append(None)
            fails.append(f"{type(err).__name__}@{err.stage}")
        else:
            cs.append(result.c_aop)
            aops.append(result.aop_deg)
            fails.append(None)
    return cs, aops, fails


def total_loss(
    logits: LogitMap | Sequence[LogitMap],
    conf: ConfMap | Sequence[ConfMap],
    params: AdaptParams,
    config: TtaConfig = TtaConfig(),
) -> LossBreakdown:
    """Weighted objective over a test batch.

    Images where the geometric pipeline fails contribute the ceiling
    penalty -log(epsilon) to the reliability term instead of a
    confidence; the failure is reported per image in the breakdown.
    """
    lb = _as_batch(logits, LogitMap)
    cb = _as_batch(conf, ConfMap)
    if len(lb) != len(cb):
        raise InvalidInput(f"batch sizes disagree: {len(lb)} logit maps, {len(cb)} conf maps")
    _batch_extent(lb + cb)
    probs = [softmax(apply_head(lm, params)) for lm in lb]
    l_ent = entropy_loss(probs)
    l_tv = tv_loss(probs)
    cs, aops, fails = _measure_batch(lb, cb, params)
    penalty = -math.log(config.epsilon)
    per_image = [
        aop_conf_loss(c, config.epsilon) if c is not None else penalty for c in cs
    ]
    l_aop = float(np.mean(per_image))
    l_tta = (
        config.lambda_ent * l_ent + config.lambda_tv * l_tv + config.lambda_aop * l_aop
    )
    return LossBreakdown(
        l_ent=l_ent,
        l_tv=l_tv,
        l_aop=l_aop,
        l_tta=l_tta,
        c_aop=tuple(cs),
        aop_deg=tuple(aops),
        failures=tuple(fails),
    )


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def grad_ent_tv(
    logits: LogitMap | Sequence[LogitMap],
    params: AdaptParams,
    config: TtaConfig = TtaConfig(),
) -> dict[str, np.ndarray]:
    """Analytic gradient of lambda_ent*L_ent + lambda_tv*L_tv.

    Chain rule through the affine head and softmax; the TV subgradient
    at exact zero differences is 0.  Returns one array per trainable
    group, keyed by group name.
    """
    lb = _as_batch(logits, LogitMap)
    h, w = _batch_extent(lb)
    n = len(lb) * h * w
    g_gamma = np.zeros(3)
    g_beta = np.zeros(3)
    g_mix = np.zeros((3, 3))
    for lm in lb:
        z = lm.values
        u = params.gamma[:, None, None] * z + params.beta[:, None, None]
        zp = np.tensordot(params.mix, u, axes=1)
        shifted = zp - zp.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0.0, np.log(p), 0.0)
        ent = -(p * logp).sum(axis=0, keepdims=True)

        # entropy: d e_pix / d z'_k = -p_k (log p_k + e_pix)
        dz = config.lambda_ent * (-(p * (logp + ent))) / n

        if config.lambda_tv != 0.0 and h >= 2 and w >= 2:
            dv = p[:, 1:, : w - 1] - p[:, : h - 1, : w - 1]
            dh = p[:, : h - 1, 1:] - p[:, : h - 1, : w - 1]
            gp = np.zeros_like(p)
            sv = np.sign(dv)
            sh = np.sign(dh)
            gp[:, 1:, : w - 1] += sv
            gp[:, : h - 1, : w - 1] -= sv
            gp[:, : h - 1, 1:] += sh
            gp[:, : h - 1, : w - 1] -= sh
            gp *= config.lambda_tv / n
            # softmax vjp: dL/dz'_k = p_k (g_k - sum_c g_c p_c)
            dz += p * (gp - (gp * p).sum(axis=0, keepdims=True))

        du = np.tensordot(params.mix.T, dz, axes=1)
        g_mix += np.einsum("chw,khw->ck", dz, u)
        g_gamma += np.einsum("khw,khw->k", du, z)
        g_beta += du.sum(axis=(1, 2))
    out = {"gamma": g_gamma, "beta": g_beta, "mix": g_mix}
    return {name: out[name] for name in params.trainable.enabled()}


def _iter_coords(params: AdaptParams) -> Iterator[tuple[str, tuple]]:
    for name in params.trainable.enabled():
        a = params.group(name)
        for idx in np.ndindex(a.shape):
            yield name, idx


def _batch_aop_loss(
    logits: Sequence[LogitMap],
    conf: Sequence[ConfMap],
    params: AdaptParams,
    config: TtaConfig,
) -> float | None:
    """lambda_aop * mean reliability loss, or None if any image fails."""
    total = 0.0
    for lm, cm in zip(logits, conf):
        labels = argmax_labels(apply_head(lm, params))
        try:
            result = compute_aop(labels, cm)
        except AopKitError:
            return None
        total += aop_conf_loss(result.c_aop, config.epsilon)
    return config.lambda_aop * total / len(logits)


def grad_aop_fd(
    logits: LogitMap | Sequence[LogitMap],
    conf: ConfMap | Sequence[ConfMap],
    params: AdaptParams,
    config: TtaConfig = TtaConfig(),
) -> dict[str, np.ndarray]:
    """Central-difference gradient of the weighted reliability term.

    Each trainable scalar is probed at +/- fd_step.  A coordinate whose
    perturbation flips the geometric pipeline into an error state gets
    gradient 0 there; the term is piecewise constant at fine scales, so
    the step is deliberately coarse enough to probe label flips.
    """
    lb = _as_batch(logits, LogitMap)
    cb = _as_batch(conf, ConfMap)
    if len(lb) != len(cb):
        raise InvalidInput(f"batch sizes disagree: {len(lb)} logit maps, {len(cb)} conf maps")
    grads = {
        name: np.zeros_like(params.group(name)) for name in params.trainable.enabled()
    }
    if config.lambda_aop == 0.0:
        return grads
    h = config.fd_step
    for name, idx in _iter_coords(params):
        values = []
        for sign in (1.0, -1.0):
            shifted = np.array(params.group(name))
            shifted[idx] += sign * h
            values.append(_batch_aop_loss(lb, cb, params.with_group(name, shifted), config))
        if values[0] is None or values[1] is None:
            continue
        grads[name][idx] = (values[0] - values[1]) / (2.0 * h)
    return grads


# ---------------------------------------------------------------------------
# the adaptation loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TtaStepRecord:
    """Loss components and measurements at the start of one step."""

    step: int
    l_ent: float
    l_tv: float
    l_aop: float
    l_tta: float
    c_aop: tuple
    aop_deg: tuple
    failures: tuple

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "l_ent": self.l_ent,
            "l_tv": self.l_tv,
            "l_aop": self.l_aop,
            "l_tta": self.l_tta,
            "c_aop": list(self.c_aop),
            "aop_deg": list(self.aop_deg),
            "failures": list(self.failures),
        }


@dataclass
class TtaTrace:
    """Adaptation history: one record per step plus parameter snapshots."""

    records: list = field(default_factory=list)
    params_before: dict = field(default_factory=dict)
    params_after: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


def adapt(
    logits: LogitMap | Sequence[LogitMap],
    conf: ConfMap | Sequence[ConfMap],
    params: AdaptParams | None = None,
    config: TtaConfig = TtaConfig(),
) -> tuple[AdaptParams, TtaTrace]:
    """Plain gradient descent on the combined objective.

    Runs ``config.steps`` updates on the trainable groups only; frozen
    groups are returned bit-identical.  The trace records the loss
    breakdown evaluated at the parameters entering each step.
    """
    lb = _as_batch(logits, LogitMap)
    cb = _as_batch(conf, ConfMap)
    if params is None:
        params = AdaptParams.identity()
    trace = TtaTrace(params_before=params.to_dict())
    current = params
    for step in range(config.steps):
        breakdown = total_loss(lb, cb, current, config)
        trace.records.append(
            TtaStepRecord(
                step=step,
                l_ent=breakdown.l_ent,
                l_tv=breakdown.l_tv,
                l_aop=breakdown.l_aop,
                l_tta=breakdown.l_tta,
                c_aop=breakdown.c_aop,
                aop_deg=breakdown.aop_deg,
                failures=breakdown.failures,
            )
        )
        if config.lr == 0.0:
            continue
        smooth = grad_ent_tv(lb, current, config)
        geo = grad_aop_fd(lb, cb, current, config)
        for name in current.trainable.enabled():
            g = smooth.get(name, 0.0) + geo.get(name, 0.0)
            current = current.with_group(name, current.group(name) - config.lr * g)
    trace.params_after = current.to_dict()
    return current, trace
