"""Finite-difference verification of every analytic gradient.

Builds small random instances (feature dim <= 8, latent dim <= 4, batch
<= 4), isolates each additive objective term plus the classification loss,
and compares the analytic gradients of every parameter (both encoders, the
decoder, every entry of the alignment matrix, extractor and classifier)
against central finite differences with frozen noise draws.

The per-coordinate score is |analytic - numeric| / max(|analytic|,
|numeric|, 1e-3); the floor turns the ratio into an absolute tolerance for
near-zero gradients, where finite differences only carry ~1e-10 of signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import TERMS, DvrArch, DvrParams, dvr_loss
from .mlp import mlp_init, mlp_spec
from .numerics import Rng, finite_diff_grad
from .recognition import RecogArch, cls_loss_with_generated, init_recog

__all__ = ["GradCheckEntry", "GradCheckReport", "run_gradcheck", "CHECKS"]

REL_FLOOR = 1e-3

#: report rows: the objective terms, their combination, and the cls loss
CHECKS = TERMS + ("combined", "cls")


@dataclass
class GradCheckEntry:
    check: str
    worst_rel_err: float
    worst_param: str
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            status = "PASS" if e.passed else "FAIL"
            out.append(
                f"{e.check:<12} worst_rel_err {e.worst_rel_err:.3e} "
                f"at {e.worst_param:<18} {status}"
            )
        return out


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, tuple]:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    err = np.abs(analytic - numeric) / scale
    if not err.size:
        return 0.0, ()
    idx = tuple(int(i) for i in np.unravel_index(np.argmax(err), err.shape))
    return float(err.max()), idx


def _compare(
    analytic: dict[str, np.ndarray],
    numeric: dict[str, np.ndarray],
    perturb: str | None,
) -> tuple[float, str]:
    worst, worst_param = -1.0, "-"
    for name in sorted(analytic):
        a = analytic[name]
        if perturb is not None and name.startswith(perturb):
            a = a.copy()
            a.flat[0] += 1e-3  # fault-injection hook: breaks this block only
        err, idx = _rel_err(a, numeric[name])
        if err > worst:
            worst, worst_param = err, f"{name}{list(idx)}"
    return worst, worst_param


def _instance(rng: Rng, variant: int):
    d = 4 + variant % 5          # feature dim <= 8
    h = 2 + variant % 3          # latent dim <= 4
    batch = 2 + (variant + 1) % 3
    classes = 3
    raw_dim = 5
    act = "tanh" if variant % 2 else "lrelu"

    enc_spec = mlp_spec(d, (h,) * (1 + variant % 4), 2 * h, hidden_activation=act)
    dec_spec = mlp_spec(h, (h,) * (1 + (variant + 1) % 3), d, hidden_activation=act)
    arch = DvrArch(encoder=enc_spec, decoder=dec_spec)
    dvr = DvrParams(
        encoder_n=mlp_init(enc_spec, rng),
        encoder_v=mlp_init(enc_spec, rng),
        decoder=mlp_init(dec_spec, rng),
        p=np.eye(h) + 0.2 * rng.normal(h, h),
    )
    recog_arch = RecogArch(
        extractor=mlp_spec(raw_dim, (6,), d), num_classes=classes
    )
    recog = init_recog(recog_arch, rng)
    x_n = rng.normal(batch, d)
    x_v = rng.normal(batch, d)
    raw = rng.normal(batch, raw_dim)
    gen = rng.normal(batch, d)
    labels = np.floor(rng.uniform(batch) * classes).astype(np.int64)
    eps_n = rng.normal(batch, h)
    eps_v = rng.normal(batch, h)
    lambdas = (0.7, 0.4, 0.3)
    return arch, dvr, recog_arch, recog, x_n, x_v, raw, gen, labels, eps_n, eps_v, lambdas


def run_gradcheck(
    n_instances: int = 10,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    seed: int = 2024,
    perturb: str | None = None,
) -> GradCheckReport:
    """Check all gradients on `n_instances` random tiny instances.

    `perturb`, when set to a parameter-name prefix (e.g. "encoder_n", "p",
    "extractor"), corrupts the analytic gradients of that block so the
    check must fail there: a self-test of the harness.
    """
    worst = {check: (-1.0, "-") for check in CHECKS}
    base = Rng(seed)
    for i in range(n_instances):
        (arch, dvr, recog_arch, recog, x_n, x_v, raw, gen, labels,
         eps_n, eps_v, lambdas) = _instance(base.child(i), i)

        dvr_named = dvr.named()  # shared views: finite differences perturb in place

        def dvr_total(include):
            def loss(_params):
                breakdown, _ = dvr_loss(
                    dvr, arch, x_n, x_v, labels,
                    recog.classifier_w, recog.classifier_b,
                    lambdas, eps_n, eps_v, include=include,
                )
                return breakdown.total

            return loss

        for term in TERMS + ("combined",):
            include = None if term == "combined" else {term}
            _, grads = dvr_loss(
                dvr, arch, x_n, x_v, labels,
                recog.classifier_w, recog.classifier_b,
                lambdas, eps_n, eps_v, include=include,
            )
            numeric = finite_diff_grad(dvr_total(include), dvr_named, step)
            err, where = _compare(grads.named(), numeric, perturb)
            if err > worst[term][0]:
                worst[term] = (err, where)

        recog_named = recog.named()

        def cls_total(_params):
            loss, _ = cls_loss_with_generated(recog, recog_arch, raw, gen, labels)
            return loss

        _, cgrads = cls_loss_with_generated(recog, recog_arch, raw, gen, labels)
        numeric = finite_diff_grad(cls_total, recog_named, step)
        err, where = _compare(cgrads.named(), numeric, perturb)
        if err > worst["cls"][0]:
            worst["cls"] = (err, where)

    entries = [
        GradCheckEntry(
            check=check,
            worst_rel_err=worst[check][0],
            worst_param=worst[check][1],
            passed=worst[check][0] < tolerance,
        )
        for check in CHECKS
    ]
    return GradCheckReport(entries=entries, tolerance=tolerance)
