"""Recognition network: feature extractor plus softmax identity classifier.

The extractor maps raw modality vectors to d-dimensional features; retrieval
evaluation uses these features directly. The classifier provides the
supervised loss on real features and, during alternating training, on
features generated by the variational model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init
from .numerics import Rng

__all__ = [
    "RecogArch",
    "RecogParams",
    "ClsGrads",
    "init_recog",
    "extract",
    "log_softmax",
    "softmax_cross_entropy",
    "softmax_xent",
    "cls_loss_with_generated",
]


@dataclass(frozen=True)
class RecogArch:
    extractor: MlpSpec
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim


@dataclass
class RecogParams:
    extractor: MlpParams
    classifier_w: np.ndarray  # (num_classes, feature_dim)
    classifier_b: np.ndarray  # (num_classes,)

    def named(self) -> dict[str, np.ndarray]:
        out = self.extractor.named("extractor")
        out["classifier.w"] = self.classifier_w
        out["classifier.b"] = self.classifier_b
        return out

    def copy(self) -> "RecogParams":
        return RecogParams(
            extractor=self.extractor.copy(),
            classifier_w=self.classifier_w.copy(),
            classifier_b=self.classifier_b.copy(),
        )


def init_recog(arch: RecogArch, rng: Rng, scale: float = 1.0) -> RecogParams:
    extractor = mlp_init(arch.extractor, rng, scale)
    d = arch.feature_dim
    w = rng.normal(arch.num_classes, d) * (scale / np.sqrt(d))
    b = np.zeros(arch.num_classes)
    return RecogParams(extractor=extractor, classifier_w=w, classifier_b=b)


def extract(
    params: RecogParams,
    arch: RecogArch,
    raw: np.ndarray,
    training: bool = False,
    rng: Rng | None = None,
) -> np.ndarray:
    """Features f(raw); deterministic whenever dropout is off."""
    out, _ = mlp_forward(params.extractor, arch.extractor, raw, training, rng)
    return out


def _check_labels(labels: np.ndarray, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ValueError(f"labels shape {labels.shape} != ({n_rows},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"labels out of range [0, {n_classes}): {labels.min()}..{labels.max()}"
        )
    return labels.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def softmax_xent(
    classifier_w: np.ndarray,
    classifier_b: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Classification loss on a feature batch.

    Returns (loss, grads) with gradients for the classifier weights, bias
    and the input features.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != classifier_w.shape[1]:
        raise ValueError(
            f"features shape {features.shape} incompatible with classifier "
            f"{classifier_w.shape}"
        )
    logits = features @ classifier_w.T + classifier_b
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = {
        "w": dlogits.T @ features,
        "b": dlogits.sum(axis=0),
        "features": dlogits @ classifier_w,
    }
    return loss, grads


@dataclass
class ClsGrads:
    extractor: MlpParams
    classifier_w: np.ndarray
    classifier_b: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        out = self.extractor.named("extractor")
        out["classifier.w"] = self.classifier_w
        out["classifier.b"] = self.classifier_b
        return out


def cls_loss_with_generated(
    params: RecogParams,
    arch: RecogArch,
    raw: np.ndarray,
    gen_features: np.ndarray | None,
    labels: np.ndarray,
    training: bool = False,
    rng: Rng | None = None,
) -> tuple[float, ClsGrads]:
    """Cross-entropy on real features plus cross-entropy on generated ones.

    Real features are recomputed from `raw` through the extractor, so the
    extractor receives gradient through them. Generated features are inputs
    produced elsewhere and are treated as constants: only the classifier sees
    gradient from that term. With `gen_features` None or empty the loss is
    exactly the single real-feature term.
    """
    raw = np.asarray(raw, dtype=np.float64)
    features, tape = mlp_forward(params.extractor, arch.extractor, raw, training, rng)
    loss, grads = softmax_xent(params.classifier_w, params.classifier_b, features, labels)
    dw, db = grads["w"], grads["b"]
    ext_grads, _ = mlp_backward(params.extractor, arch.extractor, tape, grads["features"])
    if gen_features is not None and len(gen_features) > 0:
        gen_features = np.asarray(gen_features, dtype=np.float64)
        if gen_features.shape != features.shape:
            raise ValueError(
                f"generated batch shape {gen_features.shape} != real {features.shape}"
            )
        gen_loss, gen_grads = softmax_xent(
            params.classifier_w, params.classifier_b, gen_features, labels
        )
        loss += gen_loss
        dw = dw + gen_grads["w"]
        db = db + gen_grads["b"]
    return loss, ClsGrads(extractor=ext_grads, classifier_w=dw, classifier_b=db)
