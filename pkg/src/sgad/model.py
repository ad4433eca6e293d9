"""
Score-guided autoencoder (SG-AE) and its loss family.

The model is three MLPs: an encoder E, a decoder D and a scoring network S
that reads the latent code,

    z = E(x),   x~ = D(z),   s = S(z)

and is trained on

    L = mean_i ||x_i - x~_i||_2  +  lambda_se * mean_i L_se(i)

    L_se(i) = |s_i - mu0|                    if ||x_i - x~_i|| <  eps
            = lambda_a * max(0, a - s_i)     if ||x_i - x~_i|| >= eps

where eps is a percentile of the reconstruction errors. Variants swap the
score head (Gaussian/log-normal score distributions matched by KL), drop the
scorer and guide the reconstruction error itself (``recon``), or drop the
regularizer entirely (``plain_ae``).
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, runtime_checkable

import numpy as np

from . import metrics
from .errors import RejectedInputError, TrainingDivergedError
from .numerics import AdamState, DenseLayer, MlpNetwork, adam_update, as_matrix, init_mlp, mlp_backward, mlp_forward

logger = logging.getLogger(__name__)

VARIANTS = ("original", "recon", "normal", "lognormal", "plain_ae")
SCORER_TABULAR = (20, 10)
SCORER_SIMULATION = (20,)
CHECKPOINT_VERSION = 1

# ceil() guard so that e.g. 0.7 * 10 = 7.000000000000001 still gives rank 7
_RANK_TOL = 1e-9


@dataclass
class SgLossConfig:
    lambda_se: float = 0.01
    lambda_a: float = 18.0
    a: float = 6.0
    mu0: float = 0.01
    eps_p: float = 0.8
    variant: str = "original"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise RejectedInputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lambda_se < 0 or self.lambda_a < 0:
            raise RejectedInputError("lambda_se and lambda_a must be non-negative")
        if not self.a > 0 or not self.mu0 > 0:
            raise RejectedInputError("a and mu0 must be positive")
        if not self.mu0 < self.a:
            raise RejectedInputError(f"mu0 ({self.mu0}) must be below a ({self.a})")
        if not 0 < self.eps_p < 1:
            raise RejectedInputError(f"eps_p must lie strictly inside (0, 1), got {self.eps_p}")

    @property
    def has_scorer(self):
        return self.variant in ("original", "normal", "lognormal")

    @property
    def scorer_outputs(self):
        return 2 if self.variant in ("normal", "lognormal") else 1


def encoder_preset(input_dim):
    """Encoder hidden widths chosen by input dimension; the last width is the latent size."""
    if input_dim <= 30:
        return (20,)
    if input_dim <= 60:
        return (40, 20)
    return (80, 40, 20)


@dataclass
class SgaeModel:
    encoder: MlpNetwork
    decoder: MlpNetwork
    scorer: Optional[MlpNetwork]
    config: SgLossConfig

    def __post_init__(self):
        if self.decoder.in_dim != self.encoder.out_dim:
            raise RejectedInputError("decoder input dim must equal latent dim")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise RejectedInputError("decoder output dim must equal input dim")
        if self.config.has_scorer:
            if self.scorer is None:
                raise RejectedInputError(f"variant {self.config.variant} needs a scoring network")
            if self.scorer.in_dim != self.encoder.out_dim:
                raise RejectedInputError("scorer input dim must equal latent dim")
            if self.scorer.out_dim != self.config.scorer_outputs:
                raise RejectedInputError(
                    f"scorer must emit {self.config.scorer_outputs} value(s) for variant {self.config.variant}"
                )

    @property
    def input_dim(self):
        return self.encoder.in_dim

    @property
    def latent_dim(self):
        return self.encoder.out_dim

    def networks(self):
        nets = [self.encoder, self.decoder]
        if self.config.has_scorer:
            nets.append(self.scorer)
        return nets

    def parameters(self):
        return [p for net in self.networks() for p in net.parameters()]

    def copy(self):
        return SgaeModel(
            self.encoder.copy(),
            self.decoder.copy(),
            self.scorer.copy() if self.scorer is not None else None,
            copy.copy(self.config),
        )


def build_model(input_dim, config=None, encoder_sizes=None, scorer_sizes=SCORER_TABULAR, seed=0):
    """Randomly initialise an SG-AE.

    Initialisation order is fixed: encoder, then decoder, then scorer, all from
    one generator. Variants without a scorer therefore share encoder/decoder
    weights with the ``original`` variant under the same seed.
    """
    config = config or SgLossConfig()
    encoder_sizes = tuple(encoder_sizes or encoder_preset(input_dim))
    rng = np.random.default_rng(seed)
    encoder = init_mlp([input_dim, *encoder_sizes], rng, output_activation="relu")
    decoder = init_mlp([encoder_sizes[-1], *reversed(encoder_sizes[:-1]), input_dim], rng)
    scorer = None
    if config.has_scorer:
        scorer = init_mlp([encoder_sizes[-1], *scorer_sizes, config.scorer_outputs], rng)
    return SgaeModel(encoder, decoder, scorer, config)


# --------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardPass:
    """Batched per-sample forward quantities (one row per sample)."""

    z: np.ndarray
    x_tilde: np.ndarray
    recon_error: np.ndarray
    scores: Optional[np.ndarray] = None  # s, or the learned mean for normal/lognormal
    score_sigma: Optional[np.ndarray] = None
    caches: dict = field(default_factory=dict, repr=False)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward_batch(model, batch):
    x = as_matrix(batch)
    if x.shape[1] != model.input_dim:
        raise RejectedInputError(f"batch has {x.shape[1]} columns, model expects {model.input_dim}")
    z, enc_cache = mlp_forward(model.encoder, x)
    x_tilde, dec_cache = mlp_forward(model.decoder, z)
    diff = x - x_tilde
    err = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    out = ForwardPass(z, x_tilde, err, caches={"x": x, "encoder": enc_cache, "decoder": dec_cache})
    if model.config.has_scorer:
        raw, sc_cache = mlp_forward(model.scorer, z)
        out.caches["scorer"] = sc_cache
        out.caches["scorer_raw"] = raw
        out.scores = raw[:, 0].copy()
        if model.config.scorer_outputs == 2:
            out.score_sigma = _softplus(raw[:, 1])
    return out


# --------------------------------------------------------------------------
# losses


def reconstruction_loss(batch, reconstructions):
    """Mean Euclidean (not squared) distance between rows."""
    x = np.asarray(batch, dtype=np.float64)
    xt = np.asarray(reconstructions, dtype=np.float64)
    if x.shape != xt.shape:
        raise RejectedInputError(f"shape mismatch {x.shape} vs {xt.shape}")
    return float(np.mean(np.linalg.norm(x - xt, axis=-1)))


def epsilon_from_percentile(recon_errors, eps_p):
    """Branch threshold: the ceil(eps_p * N)-th smallest error.

    Samples with error < eps take the normal branch, error >= eps the
    suspected-abnormal branch.
    """
    errors = np.asarray(recon_errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise RejectedInputError("cannot take a percentile of an empty error list")
    if not 0 < eps_p < 1:
        raise RejectedInputError(f"eps_p must lie strictly inside (0, 1), got {eps_p}")
    n = errors.size
    k = min(max(math.ceil(eps_p * n - _RANK_TOL), 1), n)
    return float(np.partition(errors, k - 1)[k - 1])


def _branch_terms(scores, normal, mu0, a):
    return np.where(normal, np.abs(scores - mu0), 0.0), np.where(normal, 0.0, np.maximum(0.0, a - scores))


def score_guided_loss(scores, recon_errors, eps, cfg):
    """Mean over samples of the score-guided regularizer."""
    s = np.asarray(scores, dtype=np.float64)
    normal = np.asarray(recon_errors, dtype=np.float64) < eps
    per_sample = np.where(normal, np.abs(s - cfg.mu0), cfg.lambda_a * np.maximum(0.0, cfg.a - s))
    return float(np.mean(per_sample))


def decomposed_loss(scores, recon_errors, eps, lambda_normal, lambda_abnormal, mu0=0.01, a=6.0):
    """``lambda_normal * L_normal + lambda_abnormal * L_abnormal``.

    Both parts are averaged over all N samples, so with
    ``lambda_normal = lambda_se`` and ``lambda_abnormal = lambda_se * lambda_a``
    this equals ``lambda_se * score_guided_loss``.
    """
    s = np.asarray(scores, dtype=np.float64)
    normal = np.asarray(recon_errors, dtype=np.float64) < eps
    n_part, a_part = _branch_terms(s, normal, mu0, a)
    return float(lambda_normal * np.mean(n_part) + lambda_abnormal * np.mean(a_part))


def gaussian_kl_to_standard(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, 1))."""
    return -np.log(sigma) + 0.5 * (sigma * sigma + mu * mu) - 0.5


def kl_score_loss(score_mu, score_sigma, recon_errors, eps, cfg):
    if cfg.variant not in ("normal", "lognormal"):
        raise RejectedInputError(f"KL score loss needs variant normal/lognormal, got {cfg.variant}")
    mu = np.asarray(score_mu, dtype=np.float64)
    sigma = np.asarray(score_sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise AssertionError("score sigma must be positive")
    normal = np.asarray(recon_errors, dtype=np.float64) < eps
    per_sample = np.where(normal, gaussian_kl_to_standard(mu, sigma), cfg.lambda_a * np.maximum(0.0, cfg.a - mu))
    return float(np.mean(per_sample))


@dataclass
class LossParts:
    total: float
    recon: float
    guidance: float
    eps: Optional[float]


def _guidance_and_grad(values, recon_errors, eps, cfg):
    """Score-guided term on ``values`` and its gradient (already divided by N).

    Subgradient 0 at both kinks.
    """
    n = values.shape[0]
    normal = recon_errors < eps
    loss = score_guided_loss(values, recon_errors, eps, cfg)
    grad = np.where(normal, np.sign(values - cfg.mu0), -cfg.lambda_a * (values < cfg.a)) / n
    return loss, grad


def loss_and_grads(model, batch, eps=None):
    """Total loss on ``batch`` and gradients aligned with ``model.parameters()``.

    When ``eps`` is None it is the ``eps_p`` percentile of this batch's
    reconstruction errors. The branch assignment is treated as a constant.
    """
    cfg = model.config
    fp = forward_batch(model, batch)
    x = fp.caches["x"]
    n = x.shape[0]
    err = fp.recon_error
    safe = np.where(err > 0, err, 1.0)
    unit = (fp.x_tilde - x) / safe[:, None] * (err > 0)[:, None]  # d||x - x~|| / dx~

    recon = float(np.mean(err))
    d_err = np.full(n, 1.0 / n)
    d_scorer = None
    guidance = 0.0
    if cfg.variant != "plain_ae":
        if eps is None:
            eps = epsilon_from_percentile(err, cfg.eps_p)
        if cfg.variant == "original":
            guidance, g = _guidance_and_grad(fp.scores, err, eps, cfg)
            d_scorer = (cfg.lambda_se * g)[:, None]
        elif cfg.variant == "recon":
            guidance, g = _guidance_and_grad(err, err, eps, cfg)
            d_err = d_err + cfg.lambda_se * g
        else:
            mu, sigma = fp.scores, fp.score_sigma
            guidance = kl_score_loss(mu, sigma, err, eps, cfg)
            normal = err < eps
            d_mu = np.where(normal, mu, -cfg.lambda_a * (mu < cfg.a)) / n
            raw_sigma = fp.caches["scorer_raw"][:, 1]
            d_sigma = np.where(normal, sigma - 1.0 / sigma, 0.0) / n
            d_scorer = cfg.lambda_se * np.stack([d_mu, d_sigma * _sigmoid(raw_sigma)], axis=1)

    total = recon + cfg.lambda_se * guidance if cfg.variant != "plain_ae" else recon

    d_xt = unit * d_err[:, None]
    dec_grads, dz = mlp_backward(model.decoder, fp.caches["decoder"], d_xt)
    sc_grads = []
    if cfg.has_scorer:
        sc_grads, dz_s = mlp_backward(model.scorer, fp.caches["scorer"], d_scorer)
        dz = dz + dz_s
    enc_grads, _ = mlp_backward(model.encoder, fp.caches["encoder"], dz)
    parts = LossParts(total, recon, guidance, eps)
    return parts, enc_grads + dec_grads + sc_grads


def total_loss(batch, model, eps=None):
    """Scalar training objective for ``model`` on ``batch``."""
    return loss_and_grads(model, batch, eps)[0].total


def predict_scores(model, batch):
    """Anomaly scores; higher means more anomalous."""
    fp = forward_batch(model, batch)
    if model.config.has_scorer:
        return fp.scores
    return fp.recon_error


# --------------------------------------------------------------------------
# training


@dataclass
class Schedule:
    epochs: int = 100
    batch_size: int = 1024
    seed: int = 0
    learning_rate: float = 1e-4
    eps_scope: str = "batch"  # or "epoch": one eps per epoch from the full training set

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise RejectedInputError("epochs and batch_size must be >= 1")
        if self.eps_scope not in ("batch", "epoch"):
            raise RejectedInputError(f"eps_scope must be 'batch' or 'epoch', got {self.eps_scope!r}")


@dataclass
class TraceTarget:
    """Labelled data whose per-field score differences are tracked each epoch.

    Only read for reporting; never enters a loss.
    """

    features: np.ndarray
    labels: np.ndarray
    field_id: np.ndarray


@dataclass
class TrainTrace:
    train_loss: list = field(default_factory=list)
    train_recon: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    score_diffs: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self):
        return len(self.train_loss)


def train(model, train_set, val_set, schedule=None, trace_target=None):
    """Mini-batch Adam training; returns ``(best_model, trace)``.

    ``best_model`` is a copy of the parameters at the epoch with the lowest
    validation total loss. ``model`` itself ends at the final epoch.
    """
    schedule = schedule or Schedule()
    x = as_matrix(train_set, "train_set")
    xv = as_matrix(val_set, "val_set")
    n = x.shape[0]
    batch_size = schedule.batch_size
    if batch_size > n:
        logger.warning("batch_size %d exceeds %d training rows; using one full batch", batch_size, n)
        batch_size = n

    params = model.parameters()
    adam = AdamState.for_params(params, learning_rate=schedule.learning_rate)
    rng = np.random.default_rng(schedule.seed)
    trace = TrainTrace()
    best, best_val = None, np.inf

    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(n)
        eps = None
        if schedule.eps_scope == "epoch" and model.config.variant != "plain_ae":
            try:
                eps = epsilon_from_percentile(forward_batch(model, x).recon_error, model.config.eps_p)
            except RejectedInputError:
                raise TrainingDivergedError(epoch, 0, float("nan")) from None
        loss_sum = recon_sum = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            try:
                parts, grads = loss_and_grads(model, x[idx], eps)
            except RejectedInputError:
                # inputs were checked up front, so this is an overflowed activation
                raise TrainingDivergedError(epoch, b, float("nan")) from None
            if not np.isfinite(parts.total):
                raise TrainingDivergedError(epoch, b, parts.total)
            adam_update(adam, params, grads)
            loss_sum += parts.total * idx.size
            recon_sum += parts.recon * idx.size
        trace.train_loss.append(loss_sum / n)
        trace.train_recon.append(recon_sum / n)

        try:
            val_loss = total_loss(xv, model)
        except RejectedInputError:
            val_loss = float("nan")
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "validation", val_loss)
        trace.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val, best = val_loss, model.copy()
            trace.best_epoch = epoch

        if trace_target is not None:
            scores = predict_scores(model, trace_target.features)
            trace.score_diffs.append(
                metrics.score_difference(scores, trace_target.labels, trace_target.field_id)
            )
    return best, trace


# --------------------------------------------------------------------------
# checkpoints


def _net_to_dict(net):
    return [
        {
            "activation": layer.activation,
            "shape": list(layer.weights.shape),
            "weights": layer.weights.reshape(-1).tolist(),
            "bias": layer.bias.tolist(),
        }
        for layer in net.layers
    ]


def _net_from_dict(layers):
    return MlpNetwork(
        [
            DenseLayer(
                np.array(l["weights"], dtype=np.float64).reshape(l["shape"]),
                np.array(l["bias"], dtype=np.float64),
                l["activation"],
            )
            for l in layers
        ]
    )


def save_checkpoint(model, path):
    """Write ``model`` as JSON; float64 values round-trip exactly through repr."""
    doc = {
        "format": "sgad-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "encoder": _net_to_dict(model.encoder),
        "decoder": _net_to_dict(model.decoder),
        "scorer": _net_to_dict(model.scorer) if model.scorer is not None else None,
    }
    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "sgad-checkpoint":
        raise RejectedInputError(f"{path} is not an sgad checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise RejectedInputError(f"unsupported checkpoint version {doc.get('version')}")
    scorer = _net_from_dict(doc["scorer"]) if doc["scorer"] is not None else None
    return SgaeModel(
        _net_from_dict(doc["encoder"]),
        _net_from_dict(doc["decoder"]),
        scorer,
        SgLossConfig(**doc["config"]),
    )


def atomic_write_text(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# general score-guided composition


@runtime_checkable
class RepresentationLearner(Protocol):
    """Any unsupervised model exposing a latent map and a per-sample signal f."""

    latent_dim: int

    def represent(self, batch) -> np.ndarray: ...

    def self_supervision(self, batch) -> np.ndarray: ...


class AutoencoderLearner:
    """Wraps the encoder/decoder of an ``SgaeModel``; f is the L2 reconstruction error."""

    def __init__(self, model):
        self.model = model
        self.latent_dim = model.latent_dim

    def represent(self, batch):
        return mlp_forward(self.model.encoder, batch)[0]

    def self_supervision(self, batch):
        return forward_batch(self.model, batch).recon_error


class ScoreGuidedComposite:
    """Attach a scoring network to an arbitrary representation learner.

    ``scores`` is S(R(x)); ``regularizer`` evaluates the score-guided term with
    the branch chosen by the learner's own signal f. Training the host model
    is left to the host.
    """

    def __init__(self, learner, scorer, config=None):
        if scorer.in_dim != learner.latent_dim:
            raise RejectedInputError("scorer input dim must equal the learner's latent dim")
        self.learner = learner
        self.scorer = scorer
        self.config = config or SgLossConfig()

    def scores(self, batch):
        return mlp_forward(self.scorer, self.learner.represent(batch))[0][:, 0]

    def regularizer(self, batch, eps=None):
        f = np.asarray(self.learner.self_supervision(batch), dtype=np.float64)
        if eps is None:
            eps = epsilon_from_percentile(f, self.config.eps_p)
        return score_guided_loss(self.scores(batch), f, eps, self.config)

    def total_loss(self, batch, host_loss):
        return host_loss + self.config.lambda_se * self.regularizer(batch)
