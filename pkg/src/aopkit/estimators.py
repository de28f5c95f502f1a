"""Estimator-style wrappers around the functional core.

Thin scikit-learn adapters: measurement is predict-shaped and the
test-time adaptation is fit/transform-shaped (fit consumes an unlabeled
batch, transform applies the adapted head).  Hyperparameters live in
``__init__`` so ``get_params`` / ``set_params`` / ``clone`` work as
usual.  X is a sequence of domain objects rather than a 2-d array:
(LabelMask, ConfMap) pairs for measurement, (LogitMap, ConfMap) pairs
for adaptation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import AopKitError, InvalidInput
from .geometry import AopResult, compute_aop
from .raster import ConfMap, LabelMask, LogitMap, PixelSpacing, argmax_labels
from .tta import AdaptParams, TrainableMask, TtaConfig, apply_head, adapt


def _check_pairs(X, first_type, second_type):
    pairs = list(X)
    if not pairs:
        raise InvalidInput("X must be a nonempty sequence of pairs")
    for item in pairs:
        if (
            not isinstance(item, (tuple, list))
            or len(item) != 2
            or not isinstance(item[0], first_type)
            or not isinstance(item[1], second_type)
        ):
            raise InvalidInput(
                f"X items must be ({first_type.__name__}, {second_type.__name__}) pairs"
            )
    return pairs


class AopMeasurer(BaseEstimator):
    """Measure the angle and its confidence from segmentation outputs.

    Stateless: fit is a no-op kept for pipeline compatibility.
    """

    def __init__(self, spacing_mm: float = 1.0):
        self.spacing_mm = spacing_mm

    def fit(self, X=None, y=None):
        self.n_features_in_ = 0
        return self

    def measure(self, mask: LabelMask, conf: ConfMap) -> AopResult:
        """Single-case measurement; raises the typed pipeline errors."""
        spacing = PixelSpacing(self.spacing_mm, self.spacing_mm)
        return compute_aop(mask, conf, spacing)

    def predict(self, X) -> np.ndarray:
        """Angles in degrees for (LabelMask, ConfMap) pairs; NaN on failure."""
        pairs = _check_pairs(X, LabelMask, ConfMap)
        out = np.full(len(pairs), np.nan)
        for i, (mask, conf) in enumerate(pairs):
            try:
                out[i] = self.measure(mask, conf).aop_deg
            except AopKitError:
                pass
        return out


class ReliabilityGuidedAdapter(BaseEstimator, TransformerMixin):
    """Adapt the logit head on an unlabeled test batch, then apply it.

    fit(X) runs gradient descent on the combined entropy, total
    variation and measurement-reliability objective; transform(X)
    applies the adapted head to logit maps.
    """

    def __init__(
        self,
        lambda_ent: float = 1.0,
        lambda_tv: float = 1.0,
        lambda_aop: float = 1.0,
        lr: float = 1e-4,
        steps: int = 1,
        epsilon: float = 1e-6,
        fd_step: float = 1e-4,
        train_gamma: bool = True,
        train_beta: bool = True,
        train_mix: bool = True,
    ):
        self.lambda_ent = lambda_ent
        self.lambda_tv = lambda_tv
        self.lambda_aop = lambda_aop
        self.lr = lr
        self.steps = steps
        self.epsilon = epsilon
        self.fd_step = fd_step
        self.train_gamma = train_gamma
        self.train_beta = train_beta
        self.train_mix = train_mix

    def _config(self) -> TtaConfig:
        return TtaConfig(
            lambda_ent=self.lambda_ent,
            lambda_tv=self.lambda_tv,
            lambda_aop=self.lambda_aop,
            lr=self.lr,
            steps=self.steps,
            epsilon=self.epsilon,
            fd_step=self.fd_step,
        )

    def fit(self, X, y=None):
        """Adapt on a batch of (LogitMap, ConfMap) pairs."""
        pairs = _check_pairs(X, LogitMap, ConfMap)
        logits = [p[0] for p in pairs]
        conf = [p[1] for p in pairs]
        start = AdaptParams.identity(
            TrainableMask(gamma=self.train_gamma, beta=self.train_beta, mix=self.train_mix)
        )
        self.params_, self.trace_ = adapt(logits, conf, start, self._config())
        self.n_features_in_ = 0
        return self

    def transform(self, X) -> list[LogitMap]:
        """Apply the adapted head to LogitMaps (or (LogitMap, ConfMap) pairs)."""
        check_is_fitted(self, "params_")
        items = list(X)
        out = []
        for item in items:
            lm = item[0] if isinstance(item, (tuple, list)) else item
            if not isinstance(lm, LogitMap):
                raise InvalidInput("transform expects LogitMaps")
            out.append(apply_head(lm, self.params_))
        return out

    def predict(self, X) -> np.ndarray:
        """Post-adaptation angles for (LogitMap, ConfMap) pairs; NaN on failure."""
        check_is_fitted(self, "params_")
        pairs = _check_pairs(X, LogitMap, ConfMap)
        out = np.full(len(pairs), np.nan)
        for i, (lm, cm) in enumerate(pairs):
            labels = argmax_labels(apply_head(lm, self.params_))
            try:
                out[i] = compute_aop(labels, cm).aop_deg
            except AopKitError:
                pass
        return out
