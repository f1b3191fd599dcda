"""Alternating training of the recognition network and the variational part.

Each training batch of identity-paired (NIR, VIS) samples goes through three
phases in order: (theta) update extractor/classifier on real plus generated
features with SGD, (phi) update both encoders and the decoder on the full
variational objective with Adam while the alignment matrix stays frozen,
(p) update the alignment matrix by plain gradient descent on its two penalty
terms. A warm-up stage first trains the variational part alone with the
pairing/alignment weights forced to zero, and an optional pre-training stage
fits the recognition network with plain softmax beforehand (standing in for
an externally pre-trained backbone).

Determinism: a single `Rng` stream drives initialization, batch shuffling,
noise and dropout, and is checkpointed together with parameters, optimizer
moments and stage counters, so an interrupted run resumes bit-identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DvrArch,
    DvrGrads,
    DvrLossBreakdown,
    DvrParams,
    alignment_grad,
    dvr_loss,
    encode,
    generate_pair,
)
from .mlp import MlpParams, mlp_init, mlp_spec
from .numerics import Adam, Rng, SgdMomentum
from .persistence import MissingTensorError, save_state
from .recognition import (
    RecogArch,
    RecogParams,
    cls_loss_with_generated,
    extract,
    init_recog,
    softmax_xent,
)
from .synthdata import NIR, VIS, ProtocolSplit, SynthDataset

__all__ = [
    "ENCODER_HIDDEN_LAYERS",
    "TrainConfig",
    "Ablation",
    "ModelState",
    "EpochRecord",
    "TrainLog",
    "NumericFailure",
    "CompatibilityError",
    "TrainView",
    "make_train_view",
    "init_state",
    "warmup_dvr",
    "train_epoch",
    "train",
    "evaluate_objective",
]

#: encoder/decoder trunk depth: hidden layers of width h
ENCODER_HIDDEN_LAYERS = 4


class NumericFailure(ArithmeticError):
    """A training phase produced a non-finite loss."""

    def __init__(self, phase: str, detail: str):
        super().__init__(f"non-finite loss in phase {phase!r}: {detail}")
        self.phase = phase
        self.detail = detail


class CompatibilityError(ValueError):
    """Checkpoint, dataset and config shapes disagree."""


@dataclass(frozen=True)
class TrainConfig:
    """Benchmark-scale defaults; every field can be set in a config file."""

    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.001
    raw_dim: int = 32
    feature_dim: int = 64
    latent_dim: int = 16
    num_classes: int = 0  # 0 = infer from the training split
    batch_size: int = 64
    pretrain_epochs: int = 5
    warmup_epochs: int = 10
    epochs: int = 20
    sgd_lr: float = 0.05
    sgd_lr_final: float = 0.005
    sgd_momentum: float = 0.9
    sgd_weight_decay: float = 5e-4
    adam_lr: float = 1e-3
    adam_lr_final: float = 1e-5
    p_lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0  # main-stage cadence; 0 = no periodic checkpoints
    train_fraction: float = 0.5
    dropout: float = 0.0
    extractor_hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("trade-off weights must be >= 0")
        if min(self.raw_dim, self.feature_dim, self.latent_dim) < 1:
            raise ValueError("dims must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.pretrain_epochs, self.warmup_epochs, self.epochs) < 0:
            raise ValueError("epoch counts must be >= 0")
        rates = (self.sgd_lr, self.sgd_lr_final, self.adam_lr, self.adam_lr_final, self.p_lr)
        if min(rates) < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class Ablation:
    """Which training ingredients are disabled (mirrors the study matrix)."""

    no_dvr: bool = False
    no_meandisc: bool = False
    no_corralign: bool = False

    FLAGS = ("no-dvr", "no-meandisc", "no-corralign")

    @classmethod
    def from_flags(cls, text: str | None) -> "Ablation":
        if not text:
            return cls()
        chosen = set()
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if part not in cls.FLAGS:
                raise ValueError(
                    f"unknown ablation flag {part!r}; valid: {', '.join(cls.FLAGS)}"
                )
            chosen.add(part)
        return cls(
            no_dvr="no-dvr" in chosen,
            no_meandisc="no-meandisc" in chosen,
            no_corralign="no-corralign" in chosen,
        )

    def lambdas(self, config: TrainConfig) -> tuple[float, float, float]:
        return (
            0.0 if self.no_meandisc else config.lambda1,
            0.0 if self.no_corralign else config.lambda2,
            0.0 if self.no_corralign else config.lambda3,
        )


@dataclass
class TrainView:
    """Training split with labels remapped to contiguous class indices."""

    raws: np.ndarray
    labels: np.ndarray
    modalities: np.ndarray
    num_classes: int


def make_train_view(dataset: SynthDataset, protocol: ProtocolSplit) -> TrainView:
    idx = protocol.train_idx
    if len(idx) == 0:
        raise ValueError("empty training split")
    labels = dataset.labels[idx]
    classes = np.unique(labels)
    remap = np.full(int(classes.max()) + 1, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    return TrainView(
        raws=dataset.raws[idx],
        labels=remap[labels],
        modalities=dataset.modalities[idx],
        num_classes=len(classes),
    )


@dataclass
class ModelState:
    recog: RecogParams
    dvr: DvrParams
    recog_arch: RecogArch
    dvr_arch: DvrArch
    sgd: SgdMomentum
    adam: Adam
    rng: Rng
    pretrain_done: int = 0
    warmup_done: int = 0
    main_done: int = 0

    # -- parameter groups ------------------------------------------------
    def theta_params(self) -> dict[str, np.ndarray]:
        return self.recog.named()

    def phi_params(self) -> dict[str, np.ndarray]:
        out = self.dvr.encoder_n.named("encoder_n")
        out.update(self.dvr.encoder_v.named("encoder_v"))
        out.update(self.dvr.decoder.named("decoder"))
        return out

    @staticmethod
    def phi_grads(grads: DvrGrads) -> dict[str, np.ndarray]:
        out = grads.encoder_n.named("encoder_n")
        out.update(grads.encoder_v.named("encoder_v"))
        out.update(grads.decoder.named("decoder"))
        return out

    # -- serialization ---------------------------------------------------
    def to_tensors(self) -> dict[str, np.ndarray]:
        t: dict[str, np.ndarray] = {}
        for name, arr in self.recog.named().items():
            t[f"recog.{name}"] = arr
        for name, arr in self.dvr.named().items():
            t[f"dvr.{name}"] = arr
        for name, arr in self.sgd.velocity.items():
            t[f"opt.sgd.vel.{name}"] = arr
        t["opt.sgd.hyper"] = np.array(
            [self.sgd.lr, self.sgd.momentum, self.sgd.weight_decay, self.sgd.step_count]
        )
        for name, arr in self.adam.m.items():
            t[f"opt.adam.m.{name}"] = arr
        for name, arr in self.adam.v.items():
            t[f"opt.adam.v.{name}"] = arr
        t["opt.adam.hyper"] = np.array(
            [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.step_count]
        )
        t["meta.counters"] = np.array(
            [self.pretrain_done, self.warmup_done, self.main_done], dtype=np.float64
        )
        seed, offset = self.rng.state()
        t["meta.rng"] = np.array(
            [seed >> 32, seed & 0xFFFFFFFF, offset >> 32, offset & 0xFFFFFFFF],
            dtype=np.float64,
        )
        t["meta.dropout"] = np.array([self.recog_arch.extractor.dropout])
        return t

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "ModelState":
        def need(name: str) -> np.ndarray:
            if name not in t:
                raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
            return t[name]

        def read_mlp(prefix: str) -> MlpParams:
            params = MlpParams()
            i = 0
            while f"{prefix}.w{i}" in t:
                params.weights.append(need(f"{prefix}.w{i}"))
                params.biases.append(need(f"{prefix}.b{i}"))
                i += 1
            if not params.weights:
                raise MissingTensorError(f"checkpoint has no layers under {prefix!r}")
            return params

        dropout = float(need("meta.dropout")[0])
        extractor = read_mlp("recog.extractor")
        ext_spec = mlp_spec(
            extractor.weights[0].shape[0],
            tuple(w.shape[1] for w in extractor.weights[:-1]),
            extractor.weights[-1].shape[1],
            dropout=dropout,
        )
        classifier_w = need("recog.classifier.w")
        recog = RecogParams(
            extractor=extractor,
            classifier_w=classifier_w,
            classifier_b=need("recog.classifier.b"),
        )
        recog_arch = RecogArch(extractor=ext_spec, num_classes=classifier_w.shape[0])

        enc_n = read_mlp("dvr.encoder_n")
        enc_v = read_mlp("dvr.encoder_v")
        decoder = read_mlp("dvr.decoder")
        enc_spec = mlp_spec(
            enc_n.weights[0].shape[0],
            tuple(w.shape[1] for w in enc_n.weights[:-1]),
            enc_n.weights[-1].shape[1],
        )
        dec_spec = mlp_spec(
            decoder.weights[0].shape[0],
            tuple(w.shape[1] for w in decoder.weights[:-1]),
            decoder.weights[-1].shape[1],
        )
        dvr = DvrParams(encoder_n=enc_n, encoder_v=enc_v, decoder=decoder, p=need("dvr.p"))
        dvr_arch = DvrArch(encoder=enc_spec, decoder=dec_spec)

        sgd_h = need("opt.sgd.hyper")
        sgd = SgdMomentum(
            lr=float(sgd_h[0]),
            momentum=float(sgd_h[1]),
            weight_decay=float(sgd_h[2]),
            velocity={
                name[len("opt.sgd.vel."):]: arr
                for name, arr in t.items()
                if name.startswith("opt.sgd.vel.")
            },
            step_count=int(sgd_h[3]),
        )
        adam_h = need("opt.adam.hyper")
        adam = Adam(
            lr=float(adam_h[0]),
            beta1=float(adam_h[1]),
            beta2=float(adam_h[2]),
            eps=float(adam_h[3]),
            m={
                name[len("opt.adam.m."):]: arr
                for name, arr in t.items()
                if name.startswith("opt.adam.m.")
            },
            v={
                name[len("opt.adam.v."):]: arr
                for name, arr in t.items()
                if name.startswith("opt.adam.v.")
            },
            step_count=int(adam_h[4]),
        )
        counters = need("meta.counters")
        rng_words = need("meta.rng")
        rng = Rng.from_state(
            (
                (int(rng_words[0]) << 32) | int(rng_words[1]),
                (int(rng_words[2]) << 32) | int(rng_words[3]),
            )
        )
        return cls(
            recog=recog,
            dvr=dvr,
            recog_arch=recog_arch,
            dvr_arch=dvr_arch,
            sgd=sgd,
            adam=adam,
            rng=rng,
            pretrain_done=int(counters[0]),
            warmup_done=int(counters[1]),
            main_done=int(counters[2]),
        )


@dataclass
class EpochRecord:
    phase: str  # "warmup" | "main"
    epoch: int  # index within its phase
    breakdown: DvrLossBreakdown
    cls_loss: float
    wall_time: float  # seconds; kept in memory, not serialized


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = (
        "phase", "epoch", "kl_n", "kl_v", "recon_l2", "recon_ce",
        "mean_disc", "corr_align", "ortho", "total", "cls_loss",
    )

    def to_csv(self, path) -> None:
        # wall_time is deliberately excluded: log files must be
        # byte-identical across reruns of the same (config, seed)
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for rec in self.records:
                b = rec.breakdown
                writer.writerow(
                    [rec.phase, rec.epoch]
                    + [
                        repr(float(v))
                        for v in (
                            b.kl_n, b.kl_v, b.recon_l2, b.recon_ce,
                            b.mean_disc, b.corr_align, b.ortho, b.total,
                            rec.cls_loss,
                        )
                    ]
                )


def init_state(config: TrainConfig, num_classes: int) -> ModelState:
    """Fresh model: draws are ordered extractor, classifier, encoders, decoder."""
    rng = Rng(config.seed)
    ext_spec = mlp_spec(
        config.raw_dim,
        config.extractor_hidden,
        config.feature_dim,
        dropout=config.dropout,
    )
    recog_arch = RecogArch(extractor=ext_spec, num_classes=num_classes)
    recog = init_recog(recog_arch, rng)
    h = config.latent_dim
    enc_spec = mlp_spec(config.feature_dim, (h,) * ENCODER_HIDDEN_LAYERS, 2 * h)
    dec_spec = mlp_spec(h, (h,) * ENCODER_HIDDEN_LAYERS, config.feature_dim)
    dvr = DvrParams(
        encoder_n=mlp_init(enc_spec, rng),
        encoder_v=mlp_init(enc_spec, rng),
        decoder=mlp_init(dec_spec, rng),
        p=np.eye(h),
    )
    return ModelState(
        recog=recog,
        dvr=dvr,
        recog_arch=recog_arch,
        dvr_arch=DvrArch(encoder=enc_spec, decoder=dec_spec),
        sgd=SgdMomentum(
            lr=config.sgd_lr,
            momentum=config.sgd_momentum,
            weight_decay=config.sgd_weight_decay,
        ),
        adam=Adam(lr=config.adam_lr),
        rng=rng,
    )


def _lerp(initial: float, final: float, step: int, total: int) -> float:
    if total <= 1:
        return initial
    return initial + (final - initial) * (step / (total - 1))


def _paired_rows(view: TrainView, rng: Rng | None):
    """Identity-paired (NIR row, VIS row) index arrays.

    With an rng, pairings and order are shuffled (training); without, rows
    pair positionally in dataset order (deterministic evaluation).
    """
    take_n, take_v = [], []
    for c in range(view.num_classes):
        nir = np.nonzero((view.labels == c) & (view.modalities == NIR))[0]
        vis = np.nonzero((view.labels == c) & (view.modalities == VIS))[0]
        k = min(len(nir), len(vis))
        if k == 0:
            continue
        if rng is not None:
            nir = nir[rng.permutation(len(nir))]
            vis = vis[rng.permutation(len(vis))]
        take_n.append(nir[:k])
        take_v.append(vis[:k])
    if not take_n:
        raise ValueError("no identity has samples in both modalities")
    rows_n = np.concatenate(take_n)
    rows_v = np.concatenate(take_v)
    if rng is not None:
        order = rng.permutation(len(rows_n))
        rows_n, rows_v = rows_n[order], rows_v[order]
    return rows_n, rows_v


def _batched(rows_n, rows_v, batch_size):
    for start in range(0, len(rows_n), batch_size):
        yield rows_n[start : start + batch_size], rows_v[start : start + batch_size]


def _check_finite(value: float, phase: str, detail: str) -> None:
    if not np.isfinite(value):
        raise NumericFailure(phase, detail)


def _snapshot(named: dict[str, np.ndarray]) -> dict[str, bytes]:
    return {k: v.tobytes() for k, v in named.items()}


def _assert_unchanged(before: dict[str, bytes], named: dict[str, np.ndarray], phase: str):
    for k, v in named.items():
        if v.tobytes() != before[k]:
            raise AssertionError(f"phase {phase!r} mutated frozen parameter {k!r}")


def _pretrain_epoch(state: ModelState, view: TrainView, config: TrainConfig) -> None:
    order = state.rng.permutation(len(view.raws))
    use_dropout = config.dropout > 0.0
    for start in range(0, len(order), config.batch_size):
        rows = order[start : start + config.batch_size]
        loss, grads = cls_loss_with_generated(
            state.recog,
            state.recog_arch,
            view.raws[rows],
            None,
            view.labels[rows],
            training=use_dropout,
            rng=state.rng if use_dropout else None,
        )
        _check_finite(loss, "pretrain", "cls")
        state.sgd.step(state.theta_params(), grads.named())


def _warmup_epoch(
    state: ModelState, view: TrainView, config: TrainConfig, check: bool
) -> None:
    rows_n, rows_v = _paired_rows(view, state.rng)
    h = state.dvr_arch.latent_dim
    frozen = None
    for bn, bv in _batched(rows_n, rows_v, config.batch_size):
        if check:
            frozen = _snapshot(state.theta_params())
            frozen["__p"] = state.dvr.p.tobytes()
        x_n = extract(state.recog, state.recog_arch, view.raws[bn])
        x_v = extract(state.recog, state.recog_arch, view.raws[bv])
        eps_n = state.rng.normal(len(bn), h)
        eps_v = state.rng.normal(len(bv), h)
        try:
            _, grads = dvr_loss(
                state.dvr,
                state.dvr_arch,
                x_n,
                x_v,
                view.labels[bn],
                state.recog.classifier_w,
                state.recog.classifier_b,
                (0.0, 0.0, 0.0),
                eps_n,
                eps_v,
            )
        except ArithmeticError as exc:
            raise NumericFailure("warmup", str(exc)) from exc
        state.adam.step(state.phi_params(), ModelState.phi_grads(grads))
        if check:
            named = state.theta_params()
            _assert_unchanged(frozen, named, "warmup")
            if state.dvr.p.tobytes() != frozen["__p"]:
                raise AssertionError("warmup mutated the alignment matrix")


def _main_epoch(
    state: ModelState,
    view: TrainView,
    config: TrainConfig,
    ablation: Ablation,
    check: bool,
) -> None:
    lam = ablation.lambdas(config)
    h = state.dvr_arch.latent_dim
    rows_n, rows_v = _paired_rows(view, state.rng)
    use_dropout = config.dropout > 0.0
    for bn, bv in _batched(rows_n, rows_v, config.batch_size):
        raws_n, raws_v = view.raws[bn], view.raws[bv]
        labels = view.labels[bn]
        # (a) sample feature reconstructions from the frozen variational part
        gen = None
        if not ablation.no_dvr:
            x_n = extract(state.recog, state.recog_arch, raws_n)
            x_v = extract(state.recog, state.recog_arch, raws_v)
            xh_n, xh_v = generate_pair(state.dvr, state.dvr_arch, x_n, x_v, state.rng)
            gen = np.concatenate([xh_n, xh_v], axis=0)

        # (b) theta phase: recognition network on real + generated features
        if check:
            frozen_dvr = _snapshot(state.dvr.named())
        raw_both = np.concatenate([raws_n, raws_v], axis=0)
        lbl_both = np.concatenate([labels, labels])
        loss_cls, cgrads = cls_loss_with_generated(
            state.recog,
            state.recog_arch,
            raw_both,
            gen,
            lbl_both,
            training=use_dropout,
            rng=state.rng if use_dropout else None,
        )
        _check_finite(loss_cls, "theta", "cls")
        state.sgd.step(state.theta_params(), cgrads.named())
        if check:
            _assert_unchanged(frozen_dvr, state.dvr.named(), "theta")
        if ablation.no_dvr:
            continue

        # (c) refresh features under the updated extractor
        x_n = extract(state.recog, state.recog_arch, raws_n)
        x_v = extract(state.recog, state.recog_arch, raws_v)

        # (d) phi phase: encoders + decoder, alignment matrix frozen
        if check:
            frozen_theta = _snapshot(state.theta_params())
            frozen_p = state.dvr.p.tobytes()
        eps_n = state.rng.normal(len(bn), h)
        eps_v = state.rng.normal(len(bv), h)
        try:
            _, grads = dvr_loss(
                state.dvr,
                state.dvr_arch,
                x_n,
                x_v,
                labels,
                state.recog.classifier_w,
                state.recog.classifier_b,
                lam,
                eps_n,
                eps_v,
            )
        except ArithmeticError as exc:
            raise NumericFailure("phi", str(exc)) from exc
        state.adam.step(state.phi_params(), ModelState.phi_grads(grads))
        if check:
            _assert_unchanged(frozen_theta, state.theta_params(), "phi")
            if state.dvr.p.tobytes() != frozen_p:
                raise AssertionError("phi phase mutated the alignment matrix")

        # (e) alignment phase: plain gradient descent on its two penalties
        if not ablation.no_corralign:
            if check:
                frozen_theta = _snapshot(state.theta_params())
                frozen_phi = _snapshot(state.phi_params())
            post_n = encode(state.dvr.encoder_n, state.dvr_arch.encoder, x_n)
            post_v = encode(state.dvr.encoder_v, state.dvr_arch.encoder, x_v)
            corr, orth, dp = alignment_grad(post_n, post_v, state.dvr.p, lam[1], lam[2])
            _check_finite(corr + orth, "p", "corr_align+ortho")
            state.dvr.p -= config.p_lr * dp
            if check:
                _assert_unchanged(frozen_theta, state.theta_params(), "p")
                _assert_unchanged(frozen_phi, state.phi_params(), "p")


def evaluate_objective(
    state: ModelState,
    view: TrainView,
    config: TrainConfig,
    ablation: Ablation,
    noise_rng: Rng,
) -> tuple[DvrLossBreakdown, float]:
    """Full-objective snapshot over the whole training view (eval mode).

    Pairing is positional (no shuffling) and noise comes from the given
    stream, so a (seed, epoch)-keyed stream makes the snapshot reproducible
    without touching the training stream.
    """
    rows_n, rows_v = _paired_rows(view, None)
    x_n = extract(state.recog, state.recog_arch, view.raws[rows_n])
    x_v = extract(state.recog, state.recog_arch, view.raws[rows_v])
    h = state.dvr_arch.latent_dim
    eps_n = noise_rng.normal(len(rows_n), h)
    eps_v = noise_rng.normal(len(rows_v), h)
    breakdown, _ = dvr_loss(
        state.dvr,
        state.dvr_arch,
        x_n,
        x_v,
        view.labels[rows_n],
        state.recog.classifier_w,
        state.recog.classifier_b,
        ablation.lambdas(config),
        eps_n,
        eps_v,
    )
    feats = np.concatenate([x_n, x_v], axis=0)
    lbls = np.concatenate([view.labels[rows_n], view.labels[rows_v]])
    cls_loss, _ = softmax_xent(
        state.recog.classifier_w, state.recog.classifier_b, feats, lbls
    )
    return breakdown, cls_loss


# child-stream key bases for per-epoch objective snapshots
_LOG_KEY_WARMUP = 0xA0000
_LOG_KEY_MAIN = 0xB0000


def _record(state, view, config, ablation, phase, epoch, t0) -> EpochRecord:
    base = _LOG_KEY_WARMUP if phase == "warmup" else _LOG_KEY_MAIN
    breakdown, cls_loss = evaluate_objective(
        state, view, config, ablation, Rng(config.seed).child(base + epoch)
    )
    return EpochRecord(
        phase=phase,
        epoch=epoch,
        breakdown=breakdown,
        cls_loss=cls_loss,
        wall_time=time.perf_counter() - t0,
    )


def warmup_dvr(
    state: ModelState,
    view: TrainView,
    config: TrainConfig,
    check_phase_isolation: bool = False,
) -> TrainLog:
    """Warm-up stage: variational part only, pairing/alignment weights zero."""
    log = TrainLog()
    for e in range(state.warmup_done, config.warmup_epochs):
        t0 = time.perf_counter()
        _warmup_epoch(state, view, config, check_phase_isolation)
        state.warmup_done = e + 1
        log.records.append(_record(state, view, config, Ablation(), "warmup", e, t0))
    return log


def train_epoch(
    state: ModelState,
    view: TrainView,
    config: TrainConfig,
    ablation: Ablation = Ablation(),
    check_phase_isolation: bool = False,
) -> EpochRecord:
    """One main-stage epoch (schedules applied by the caller or `train`)."""
    t0 = time.perf_counter()
    e = state.main_done
    _main_epoch(state, view, config, ablation, check_phase_isolation)
    state.main_done = e + 1
    return _record(state, view, config, ablation, "main", e, t0)


def train(
    state: ModelState,
    dataset: SynthDataset,
    protocol: ProtocolSplit,
    config: TrainConfig,
    ablation: Ablation = Ablation(),
    out_dir=None,
    check_phase_isolation: bool = False,
) -> TrainLog:
    """Run the remaining stages (pretrain, warm-up, main) on `state`.

    Stage counters in the state say what is already done, so calling this on
    a freshly loaded checkpoint continues the run bit-identically. Periodic
    checkpoints are written under `out_dir` each `checkpoint_every` main
    epochs when both are set.
    """
    if dataset.spec.raw_dim != config.raw_dim:
        raise CompatibilityError(
            f"dataset raw_dim {dataset.spec.raw_dim} != config raw_dim {config.raw_dim}"
        )
    view = make_train_view(dataset, protocol)
    if config.num_classes and config.num_classes != view.num_classes:
        raise CompatibilityError(
            f"config num_classes {config.num_classes} != training split {view.num_classes}"
        )
    if state.recog_arch.num_classes != view.num_classes:
        raise CompatibilityError(
            f"model expects {state.recog_arch.num_classes} classes, split has {view.num_classes}"
        )
    if state.recog_arch.extractor.in_dim != dataset.spec.raw_dim:
        raise CompatibilityError(
            f"model raw_dim {state.recog_arch.extractor.in_dim} != dataset {dataset.spec.raw_dim}"
        )

    log = TrainLog()
    for e in range(state.pretrain_done, config.pretrain_epochs):
        _pretrain_epoch(state, view, config)
        state.pretrain_done = e + 1

    if not ablation.no_dvr:
        log.records.extend(
            warmup_dvr(state, view, config, check_phase_isolation).records
        )

    for e in range(state.main_done, config.epochs):
        state.sgd.lr = _lerp(config.sgd_lr, config.sgd_lr_final, e, config.epochs)
        state.adam.lr = _lerp(config.adam_lr, config.adam_lr_final, e, config.epochs)
        log.records.append(
            train_epoch(state, view, config, ablation, check_phase_isolation)
        )
        if out_dir is not None and config.checkpoint_every > 0:
            if (e + 1) % config.checkpoint_every == 0 and (e + 1) < config.epochs:
                save_state(state, f"{out_dir}/ckpt_main{e + 1:04d}.bin")
    return log
