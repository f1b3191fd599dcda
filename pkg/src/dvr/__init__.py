"""Disentangled variational representations for cross-modality matching."""

from .core import (
    DvrArch,
    DvrLossBreakdown,
    DvrParams,
    GaussianPosterior,
    corr_align,
    decode,
    dvr_loss,
    encode,
    generate_pair,
    kl_to_std_normal,
    mean_discrepancy,
    ortho_penalty,
    recon_l2,
    reparameterize,
    wasserstein2_diag,
)
from .evalkit import (
    EvalReport,
    RocCurve,
    SimilarityMatrix,
    build_similarity,
    cosine_similarity,
    evaluate,
    rank1,
    roc_and_vr,
)
from .mlp import MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init, mlp_spec
from .numerics import Adam, Rng, SgdMomentum, finite_diff_grad, gaussian_sample
from .recognition import (
    RecogArch,
    RecogParams,
    cls_loss_with_generated,
    extract,
    softmax_xent,
)
from .synthdata import ProtocolSplit, SynthDataset, SynthSpec, generate, split
from .trainer import (
    Ablation,
    ModelState,
    TrainConfig,
    TrainLog,
    init_state,
    train,
    train_epoch,
    warmup_dvr,
)

__version__ = "0.1.0"
