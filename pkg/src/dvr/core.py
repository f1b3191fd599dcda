"""Disentangled variational representation over feature vectors.

Two modality-specific Gaussian posterior estimators share a latent space; a
linear alignment matrix ties their scale vectors together, and the training
objective combines the two variational terms, reconstruction (L2 plus
cross-entropy through a frozen classifier), a paired mean-discrepancy
penalty, and the scale-alignment and soft-orthogonality penalties.

All scalar terms are averaged over the batch, so the trade-off weights are
batch-size independent. `dvr_loss` computes every term together with exact
reverse-mode gradients for both encoders, the decoder and the alignment
matrix; gradients are validated against central finite differences in the
test suite and the `gradcheck` command.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .mlp import MlpParams, MlpSpec, MlpTape, mlp_backward, mlp_forward
from .numerics import Rng
from .recognition import softmax_cross_entropy

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "TERMS",
    "GaussianPosterior",
    "DvrArch",
    "DvrParams",
    "DvrGrads",
    "DvrLossBreakdown",
    "encode",
    "reparameterize",
    "kl_to_std_normal",
    "decode",
    "recon_l2",
    "mean_discrepancy",
    "corr_align",
    "ortho_penalty",
    "alignment_grad",
    "dvr_loss",
    "generate_pair",
    "wasserstein2_diag",
]

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 30.0

#: every additive term of the training objective, in reporting order
TERMS = ("kl_n", "kl_v", "recon_l2", "recon_ce", "mean_disc", "corr_align", "ortho")


def _as2d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected a vector or a batch of rows, got shape {x.shape}")


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z|x): one (mu, log sigma^2) row per sample."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError(
                f"mu shape {self.mu.shape} != log_var shape {self.log_var.shape}"
            )

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass(frozen=True)
class DvrArch:
    """Shapes of the variational model: encoders d -> 2h, decoder h -> d."""

    encoder: MlpSpec
    decoder: MlpSpec

    def __post_init__(self):
        if self.encoder.out_dim % 2 != 0:
            raise ValueError("encoder output width must be even (mu and log-var heads)")
        h = self.encoder.out_dim // 2
        if self.decoder.in_dim != h:
            raise ValueError(
                f"decoder input {self.decoder.in_dim} != latent dim {h}"
            )
        if self.decoder.out_dim != self.encoder.in_dim:
            raise ValueError("decoder output width must equal encoder input width")

    @property
    def feature_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim // 2


@dataclass
class DvrParams:
    encoder_n: MlpParams
    encoder_v: MlpParams
    decoder: MlpParams
    p: np.ndarray  # (h, h) alignment matrix, softly orthogonal

    def named(self) -> dict[str, np.ndarray]:
        out = self.encoder_n.named("encoder_n")
        out.update(self.encoder_v.named("encoder_v"))
        out.update(self.decoder.named("decoder"))
        out["p"] = self.p
        return out

    def copy(self) -> "DvrParams":
        return DvrParams(
            encoder_n=self.encoder_n.copy(),
            encoder_v=self.encoder_v.copy(),
            decoder=self.decoder.copy(),
            p=self.p.copy(),
        )


@dataclass
class DvrGrads:
    encoder_n: MlpParams
    encoder_v: MlpParams
    decoder: MlpParams
    p: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        out = self.encoder_n.named("encoder_n")
        out.update(self.encoder_v.named("encoder_v"))
        out.update(self.decoder.named("decoder"))
        out["p"] = self.p
        return out


@dataclass
class DvrLossBreakdown:
    kl_n: float
    kl_v: float
    recon_l2: float
    recon_ce: float
    mean_disc: float
    corr_align: float
    ortho: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def encode(
    params: MlpParams, spec: MlpSpec, x: np.ndarray
) -> GaussianPosterior:
    """Posterior parameters for a feature batch; log-variance clamped."""
    post, _, _ = _encode_with_tape(params, spec, x)
    return post


def _encode_with_tape(
    params: MlpParams, spec: MlpSpec, x: np.ndarray
) -> tuple[GaussianPosterior, MlpTape, np.ndarray]:
    x2, was1d = _as2d(x)
    out, tape = mlp_forward(params, spec, x2)
    h = spec.out_dim // 2
    mu = out[:, :h]
    raw_lv = out[:, h:]
    # clamp keeps exp() bounded; the mask zeroes gradient where clamping bit
    clamp_mask = (raw_lv > LOG_VAR_MIN) & (raw_lv < LOG_VAR_MAX)
    log_var = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    if was1d:
        mu, log_var = mu[0], log_var[0]
    return GaussianPosterior(mu=mu, log_var=log_var), tape, clamp_mask


def reparameterize(post: GaussianPosterior, eps: np.ndarray) -> np.ndarray:
    """z = mu + eps * sigma."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise ValueError(f"eps shape {eps.shape} != mu shape {post.mu.shape}")
    return post.mu + eps * post.sigma


def kl_to_std_normal(post: GaussianPosterior) -> float:
    """KL(q || N(0, I)): 0.5 * sum_j (mu^2 + sigma^2 - 1 - log sigma^2).

    For a batched posterior the per-row KLs are averaged.
    """
    mu, _ = _as2d(post.mu)
    lv, _ = _as2d(post.log_var)
    per_row = 0.5 * (mu**2 + np.exp(lv) - 1.0 - lv).sum(axis=1)
    return float(per_row.mean())


def decode(params: MlpParams, spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    """Mean of the feature likelihood p(x|z)."""
    z2, was1d = _as2d(z)
    out, _ = mlp_forward(params, spec, z2)
    return out[0] if was1d else out


def recon_l2(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Squared Euclidean reconstruction error, averaged over the batch."""
    x2, _ = _as2d(x)
    xh2, _ = _as2d(x_hat)
    if x2.shape != xh2.shape:
        raise ValueError(f"shape mismatch: {x2.shape} vs {xh2.shape}")
    return float(((x2 - xh2) ** 2).sum(axis=1).mean())


def mean_discrepancy(mu_n: np.ndarray, mu_v: np.ndarray) -> float:
    """Mean over identity-paired rows of ||mu_n - mu_v||^2."""
    a, _ = _as2d(mu_n)
    b, _ = _as2d(mu_v)
    if a.shape != b.shape:
        raise ValueError(f"paired batches must match: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum(axis=1).mean())


def corr_align(sigma_n: np.ndarray, sigma_v: np.ndarray, p: np.ndarray) -> float:
    """Mean over paired rows of ||sigma_v - P sigma_n||^2."""
    sn, _ = _as2d(sigma_n)
    sv, _ = _as2d(sigma_v)
    if sn.shape != sv.shape:
        raise ValueError(f"paired batches must match: {sn.shape} vs {sv.shape}")
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape != (sn.shape[1], sn.shape[1]):
        raise ValueError(f"alignment matrix shape {p.shape} incompatible with h={sn.shape[1]}")
    r = sv - sn @ p.T
    return float((r**2).sum(axis=1).mean())


def ortho_penalty(p: np.ndarray) -> float:
    """||P^T P - I||_F^2."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"alignment matrix must be square, got {p.shape}")
    gram = p.T @ p - np.eye(p.shape[0])
    return float((gram**2).sum())


def alignment_grad(
    post_n: GaussianPosterior,
    post_v: GaussianPosterior,
    p: np.ndarray,
    lambda2: float,
    lambda3: float,
) -> tuple[float, float, np.ndarray]:
    """(corr_align, ortho, d(l2*corr + l3*ortho)/dP) at fixed posteriors.

    This is the whole objective seen by the alignment-matrix update phase.
    """
    sn, _ = _as2d(post_n.sigma)
    sv, _ = _as2d(post_v.sigma)
    corr = corr_align(sn, sv, p)
    orth = ortho_penalty(p)
    r = sv - sn @ p.T
    d_corr = (-2.0 / sn.shape[0]) * (r.T @ sn)
    d_orth = 4.0 * p @ (p.T @ p - np.eye(p.shape[0]))
    return corr, orth, lambda2 * d_corr + lambda3 * d_orth


def wasserstein2_diag(
    m1: np.ndarray, s1: np.ndarray, m2: np.ndarray, s2: np.ndarray
) -> float:
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    ||m1 - m2||^2 + sum_j (s1_j - s2_j)^2, the Bures formula specialized to
    commuting (diagonal) covariances given as standard-deviation vectors.
    """
    m1, s1, m2, s2 = (np.asarray(a, dtype=np.float64) for a in (m1, s1, m2, s2))
    if not (m1.shape == m2.shape == s1.shape == s2.shape) or m1.ndim != 1:
        raise ValueError("all four arguments must be vectors of equal length")
    if (s1 <= 0).any() or (s2 <= 0).any():
        raise ValueError("standard deviations must be strictly positive")
    return float(((m1 - m2) ** 2).sum() + ((s1 - s2) ** 2).sum())


def generate_pair(
    dvr: DvrParams,
    arch: DvrArch,
    x_n: np.ndarray,
    x_v: np.ndarray,
    rng: Rng,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample reconstructions for both modalities with fresh noise.

    Draw order is fixed (first modality N, then V) so a seed pins the output.
    """
    x_n2, _ = _as2d(x_n)
    x_v2, _ = _as2d(x_v)
    h = arch.latent_dim
    out = []
    for x, enc in ((x_n2, dvr.encoder_n), (x_v2, dvr.encoder_v)):
        post = encode(enc, arch.encoder, x)
        eps = rng.normal(x.shape[0], h)
        z = reparameterize(post, eps)
        out.append(decode(dvr.decoder, arch.decoder, z))
    return out[0], out[1]


def dvr_loss(
    dvr: DvrParams,
    arch: DvrArch,
    x_n: np.ndarray,
    x_v: np.ndarray,
    labels: np.ndarray,
    classifier_w: np.ndarray,
    classifier_b: np.ndarray,
    lambdas: tuple[float, float, float],
    eps_n: np.ndarray,
    eps_v: np.ndarray,
    include: frozenset[str] | set[str] | None = None,
) -> tuple[DvrLossBreakdown, DvrGrads]:
    """The full training objective and its gradients w.r.t. all DVR params.

    `x_n`/`x_v` are identity-paired feature batches (constants here), the
    classifier is a frozen reference (no gradient flows to it), and the
    noise draws are passed in explicitly so callers control the stream and
    finite-difference checks can freeze them. `include` restricts which
    additive terms enter the total and the gradients (used by gradient
    verification to isolate one term at a time); by default all terms are
    active. Term values are always reported.
    """
    lam1, lam2, lam3 = lambdas
    if lam1 < 0 or lam2 < 0 or lam3 < 0:
        raise ValueError(f"trade-off weights must be >= 0, got {lambdas}")
    active = frozenset(TERMS) if include is None else frozenset(include)
    unknown = active - frozenset(TERMS)
    if unknown:
        raise ValueError(f"unknown objective terms: {sorted(unknown)}")

    x_n, _ = _as2d(x_n)
    x_v, _ = _as2d(x_v)
    if x_n.shape != x_v.shape:
        raise ValueError(f"modality batches misaligned: {x_n.shape} vs {x_v.shape}")
    n_rows = x_n.shape[0]
    h = arch.latent_dim
    eps_n = np.asarray(eps_n, dtype=np.float64)
    eps_v = np.asarray(eps_v, dtype=np.float64)
    if eps_n.shape != (n_rows, h) or eps_v.shape != (n_rows, h):
        raise ValueError("noise draws must be (batch, latent_dim) per modality")

    # ---- forward -----------------------------------------------------
    post_n, tape_en, mask_n = _encode_with_tape(dvr.encoder_n, arch.encoder, x_n)
    post_v, tape_ev, mask_v = _encode_with_tape(dvr.encoder_v, arch.encoder, x_v)
    sig_n, sig_v = post_n.sigma, post_v.sigma
    z_n = post_n.mu + eps_n * sig_n
    z_v = post_v.mu + eps_v * sig_v
    xh_n, tape_dn = mlp_forward(dvr.decoder, arch.decoder, z_n)
    xh_v, tape_dv = mlp_forward(dvr.decoder, arch.decoder, z_v)

    logits_n = xh_n @ classifier_w.T + classifier_b
    logits_v = xh_v @ classifier_w.T + classifier_b
    ce_n, dlogits_n = softmax_cross_entropy(logits_n, labels)
    ce_v, dlogits_v = softmax_cross_entropy(logits_v, labels)

    vals = {
        "kl_n": kl_to_std_normal(post_n),
        "kl_v": kl_to_std_normal(post_v),
        "recon_l2": recon_l2(x_n, xh_n) + recon_l2(x_v, xh_v),
        "recon_ce": ce_n + ce_v,
        "mean_disc": mean_discrepancy(post_n.mu, post_v.mu),
        "corr_align": corr_align(sig_n, sig_v, dvr.p),
        "ortho": ortho_penalty(dvr.p),
    }
    weight = {
        "kl_n": 1.0,
        "kl_v": 1.0,
        "recon_l2": 1.0,
        "recon_ce": 1.0,
        "mean_disc": lam1,
        "corr_align": lam2,
        "ortho": lam3,
    }
    total = float(sum(weight[t] * vals[t] for t in TERMS if t in active))
    if not np.isfinite(total):
        bad = [t for t in TERMS if not np.isfinite(vals[t])]
        raise ArithmeticError(f"non-finite objective; offending terms: {bad}")

    # ---- backward ----------------------------------------------------
    on = {t: (t in active) for t in TERMS}

    # reconstruction gradients seed the decoder backward pass
    d_xh_n = np.zeros_like(xh_n)
    d_xh_v = np.zeros_like(xh_v)
    if on["recon_l2"]:
        d_xh_n += (2.0 / n_rows) * (xh_n - x_n)
        d_xh_v += (2.0 / n_rows) * (xh_v - x_v)
    if on["recon_ce"]:
        d_xh_n += dlogits_n @ classifier_w
        d_xh_v += dlogits_v @ classifier_w
    dec_gn, d_zn = mlp_backward(dvr.decoder, arch.decoder, tape_dn, d_xh_n)
    dec_gv, d_zv = mlp_backward(dvr.decoder, arch.decoder, tape_dv, d_xh_v)
    dec_grads = MlpParams(
        weights=[a + b for a, b in zip(dec_gn.weights, dec_gv.weights)],
        biases=[a + b for a, b in zip(dec_gn.biases, dec_gv.biases)],
    )

    r = sig_v - sig_n @ dvr.p.T  # alignment residual, used by two terms

    d_mu_n = d_zn.copy()
    d_mu_v = d_zv.copy()
    d_sig_n = d_zn * eps_n
    d_sig_v = d_zv * eps_v
    d_lv_n = np.zeros_like(post_n.log_var)
    d_lv_v = np.zeros_like(post_v.log_var)
    if on["kl_n"]:
        d_mu_n += post_n.mu / n_rows
        d_sig_n += sig_n / n_rows
        d_lv_n += -0.5 / n_rows
    if on["kl_v"]:
        d_mu_v += post_v.mu / n_rows
        d_sig_v += sig_v / n_rows
        d_lv_v += -0.5 / n_rows
    if on["mean_disc"]:
        g = (2.0 * lam1 / n_rows) * (post_n.mu - post_v.mu)
        d_mu_n += g
        d_mu_v -= g
    if on["corr_align"]:
        d_sig_v += (2.0 * lam2 / n_rows) * r
        d_sig_n += (-2.0 * lam2 / n_rows) * (r @ dvr.p)

    d_p = np.zeros_like(dvr.p)
    if on["corr_align"]:
        d_p += lam2 * (-2.0 / n_rows) * (r.T @ sig_n)
    if on["ortho"]:
        d_p += lam3 * 4.0 * dvr.p @ (dvr.p.T @ dvr.p - np.eye(h))

    # sigma = exp(log_var / 2)  =>  d/d log_var = sigma/2; clamp zeroes it
    d_lv_n = (d_lv_n + 0.5 * d_sig_n * sig_n) * mask_n
    d_lv_v = (d_lv_v + 0.5 * d_sig_v * sig_v) * mask_v

    enc_gn, _ = mlp_backward(
        dvr.encoder_n, arch.encoder, tape_en, np.concatenate([d_mu_n, d_lv_n], axis=1)
    )
    enc_gv, _ = mlp_backward(
        dvr.encoder_v, arch.encoder, tape_ev, np.concatenate([d_mu_v, d_lv_v], axis=1)
    )

    breakdown = DvrLossBreakdown(total=total, **vals)
    grads = DvrGrads(encoder_n=enc_gn, encoder_v=enc_gv, decoder=dec_grads, p=d_p)
    return breakdown, grads
