"""Seeded two-modality synthetic dataset with known factor structure.

Each identity has a latent code; each modality observes it through its own
linear map plus offset, with identity-level and observation-level noise.
That reproduces, at desk scale, the situation the matcher faces: the task is
solvable within a modality, while the two modalities live in different raw
subspaces so naive cross-modality matching is poor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng

__all__ = ["SynthSpec", "SynthDataset", "ProtocolSplit", "generate", "split"]

#: modality tags used throughout
NIR, VIS = 0, 1

#: scale of the per-modality offset vectors drawn when a spec leaves them out
OFFSET_SCALE = 0.5


@dataclass
class SynthSpec:
    """Generator parameters. Maps/offsets left as None are drawn from the
    seed (orthonormal-column maps, Gaussian offsets)."""

    num_identities: int = 40
    samples_per_identity: int = 10  # per modality
    identity_dim: int = 8
    raw_dim: int = 32
    identity_noise: float = 0.1
    observation_noise: float = 0.05
    seed: int = 0
    map_n: np.ndarray | None = None  # (raw_dim, identity_dim)
    map_v: np.ndarray | None = None
    offset_n: np.ndarray | None = None  # (raw_dim,)
    offset_v: np.ndarray | None = None

    def __post_init__(self):
        if self.num_identities < 1 or self.samples_per_identity < 1:
            raise ValueError("need at least one identity and one sample")
        if self.identity_dim < 1 or self.raw_dim < 1:
            raise ValueError("dims must be >= 1")
        if self.identity_noise < 0 or self.observation_noise < 0:
            raise ValueError("noise scales must be >= 0")


@dataclass
class SynthDataset:
    raws: np.ndarray            # (n, raw_dim)
    labels: np.ndarray          # (n,) identity ids
    modalities: np.ndarray      # (n,) NIR=0 / VIS=1
    identity_codes: np.ndarray  # (num_identities, identity_dim)
    spec: SynthSpec

    def __len__(self) -> int:
        return len(self.raws)


@dataclass
class ProtocolSplit:
    """Identity-disjoint retrieval protocol over a dataset.

    Gallery holds exactly one VIS row per test identity; probes are every
    NIR row of the test identities.
    """

    train_idx: np.ndarray
    gallery_idx: np.ndarray
    probe_idx: np.ndarray
    test_identities: np.ndarray


def _orthonormal_columns(rng: Rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(rows, cols))
    # fix the QR sign ambiguity so the map is unique given the draws
    return q * np.sign(np.diag(r))


def generate(spec: SynthSpec) -> SynthDataset:
    """Materialize the dataset; fully determined by the spec (incl. seed).

    Per sample: raw = A_m (c_y + eta_id) + b_m + eta_obs. Draw order is
    fixed (codes, maps, offsets, then per-identity sub-streams), so
    regeneration is byte-identical.
    """
    rng = Rng(spec.seed)
    codes = rng.normal(spec.num_identities, spec.identity_dim)
    map_n = spec.map_n if spec.map_n is not None else _orthonormal_columns(
        rng, spec.raw_dim, spec.identity_dim
    )
    map_v = spec.map_v if spec.map_v is not None else _orthonormal_columns(
        rng, spec.raw_dim, spec.identity_dim
    )
    offset_n = spec.offset_n if spec.offset_n is not None else (
        rng.normal(spec.raw_dim) * OFFSET_SCALE
    )
    offset_v = spec.offset_v if spec.offset_v is not None else (
        rng.normal(spec.raw_dim) * OFFSET_SCALE
    )

    maps = {NIR: (np.asarray(map_n, dtype=np.float64), np.asarray(offset_n, dtype=np.float64)),
            VIS: (np.asarray(map_v, dtype=np.float64), np.asarray(offset_v, dtype=np.float64))}
    for m, (a, b) in maps.items():
        if a.shape != (spec.raw_dim, spec.identity_dim) or b.shape != (spec.raw_dim,):
            raise ValueError(f"modality map/offset shapes wrong for modality {m}")

    s = spec.samples_per_identity
    raws, labels, modal = [], [], []
    for y in range(spec.num_identities):
        sub = rng.child(y)  # per-identity sub-stream: trivially parallel
        for m in (NIR, VIS):
            a, b = maps[m]
            eta_id = sub.normal(s, spec.identity_dim) * spec.identity_noise
            eta_obs = sub.normal(s, spec.raw_dim) * spec.observation_noise
            raws.append((codes[y] + eta_id) @ a.T + b + eta_obs)
            labels.append(np.full(s, y, dtype=np.int64))
            modal.append(np.full(s, m, dtype=np.int64))

    resolved = SynthSpec(
        num_identities=spec.num_identities,
        samples_per_identity=spec.samples_per_identity,
        identity_dim=spec.identity_dim,
        raw_dim=spec.raw_dim,
        identity_noise=spec.identity_noise,
        observation_noise=spec.observation_noise,
        seed=spec.seed,
        map_n=maps[NIR][0],
        map_v=maps[VIS][0],
        offset_n=maps[NIR][1],
        offset_v=maps[VIS][1],
    )
    return SynthDataset(
        raws=np.concatenate(raws, axis=0),
        labels=np.concatenate(labels),
        modalities=np.concatenate(modal),
        identity_codes=codes,
        spec=resolved,
    )


def split(dataset: SynthDataset, train_fraction: float, rng: Rng) -> ProtocolSplit:
    """Identity-disjoint train/test split with a one-VIS-per-identity gallery."""
    ids = np.unique(dataset.labels)
    if len(ids) < 2:
        raise ValueError("need at least 2 identities to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(train_fraction * len(ids)))
    n_train = max(1, min(len(ids) - 1, n_train))
    perm = ids[rng.permutation(len(ids))]
    train_ids = np.sort(perm[:n_train])
    test_ids = np.sort(perm[n_train:])

    train_mask = np.isin(dataset.labels, train_ids)
    gallery_idx = []
    for y in test_ids:
        rows = np.nonzero((dataset.labels == y) & (dataset.modalities == VIS))[0]
        if len(rows) == 0:
            raise ValueError(f"identity {y} has no VIS sample for the gallery")
        gallery_idx.append(rows[0])
    probe_mask = np.isin(dataset.labels, test_ids) & (dataset.modalities == NIR)
    return ProtocolSplit(
        train_idx=np.nonzero(train_mask)[0],
        gallery_idx=np.asarray(gallery_idx, dtype=np.int64),
        probe_idx=np.nonzero(probe_mask)[0],
        test_identities=test_ids.astype(np.int64),
    )
