"""
Black-box epistemic uncertainty for any forecaster.

Pipeline: LSTM sequence autoencoder -> 2-D neighbour embedding -> density
peaks (rho, delta, gamma) and the gamma-ratio gap to pick K -> deep embedded
clustering (K-means init, KL(P||Q) + lambda * reconstruction, cross-entropy
fine-tune) -> EpU, the mean assignment entropy of the forecasts.

MC-dropout and deep-ensemble spreads are here too as comparison baselines.
"""
import copy
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import save_file
from sklearn.cluster import KMeans
from sklearn.manifold import TSNE
from sklearn.metrics import pairwise_distances
from sklearn.metrics.cluster import contingency_matrix
from torch import nn

from _console import info, progress, warn
from errors import (
    ArchitectureMismatchError,
    CheckpointCorruptError,
    DegenerateBaselineWarning,
    DegenerateGeometryError,
    EmptyClusterError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from forecasters import Checkpoint, build_forecaster, read_archive

_ARCHIVE_VERSION  = 1
_FEATURE_SCALE    = 1e-3       # mm -> m
_ENCODE_BATCH     = 512
_KMEANS_ATTEMPTS  = 5
_KMEANS_N_INIT    = 10
_CENTER_SPACING   = 6.0        # kernel widths between neighbouring centers
_FLAT_ASSIGNMENT  = 0.5        # training EpU above this fraction of ln K is flagged


@dataclass(frozen=True)
class EpistemicConfig:
    latent_dim: int = 32
    hidden_dim: int = 64
    ae_epochs: int = 60
    ae_batch_size: int = 64
    ae_learning_rate: float = 1e-3
    dc_quantile: float = 0.02
    d_c: float | None = None
    k_min: int = 2
    k_max: int = 32
    gamma_eps: float = 1e-12
    perplexity: float = 30.0
    cluster_lambda: float = 1.0
    dec_max_steps: int = 2000
    dec_batch_size: int = 64
    dec_learning_rate: float = 1e-3
    target_update_interval: int = 50
    stop_tol: float = 0.001
    max_label_drift: float = 0.0
    finetune_epochs: int = 10
    seed: int = 0


# ---------------------------------------------------------------------------
# Sequence autoencoder
# ---------------------------------------------------------------------------

class SequenceAutoencoder(nn.Module):
    """LSTM encoder -> latent vector -> repeated over time -> LSTM decoder."""

    def __init__(self, seq_len: int, num_joints: int, hidden_dim: int, latent_dim: int):
        super().__init__()
        self.seq_len, self.num_joints = seq_len, num_joints
        feature_dim = num_joints * 3
        self.encoder     = nn.LSTM(feature_dim, hidden_dim, batch_first=True)
        self.to_latent   = nn.Linear(hidden_dim, latent_dim)
        self.from_latent = nn.Linear(latent_dim, hidden_dim)
        self.decoder     = nn.LSTM(hidden_dim, hidden_dim, batch_first=True)
        self.readout     = nn.Linear(hidden_dim, feature_dim)

    def encoder_parameters(self):
        return list(self.encoder.parameters()) + list(self.to_latent.parameters())

    def decoder_parameters(self):
        return (list(self.from_latent.parameters()) + list(self.decoder.parameters())
                + list(self.readout.parameters()))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.encoder(x)
        return self.to_latent(h[-1])

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        rep = self.from_latent(z).unsqueeze(1).repeat(1, self.seq_len, 1)
        out, _ = self.decoder(rep)
        return self.readout(out)

    def forward(self, x: torch.Tensor):
        z = self.encode(x)
        return z, self.decode(z)


@dataclass
class AutoencoderState:
    model: SequenceAutoencoder
    latent_dim: int
    hidden_dim: int
    seq_len: int
    num_joints: int
    baseline_loss: float = float("nan")
    final_loss: float = float("nan")


def motion_features(sequences) -> torch.Tensor:
    """
    (N, L, J, 3) mm -> (N, L, J*3) float32, relative to the first-frame root
    joint and scaled to metres.
    """
    arr = np.asarray(sequences, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (N, L, J, 3) motions, got {arr.shape}")
    rel = (arr - arr[:, :1, :1, :]) * _FEATURE_SCALE
    return torch.from_numpy(rel.reshape(arr.shape[0], arr.shape[1], -1).astype(np.float32))


def _reconstruction_mse(model: SequenceAutoencoder, x: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        total = 0.0
        for i in range(0, x.shape[0], _ENCODE_BATCH):
            chunk = x[i:i + _ENCODE_BATCH]
            total += float(F.mse_loss(model(chunk)[1], chunk, reduction="sum"))
    return total / x.numel()


def pretrain_autoencoder(sequences, cfg: EpistemicConfig, seed: int = 0) -> AutoencoderState:
    """Minimises mean squared reconstruction error. Deterministic given seed."""
    x = motion_features(sequences)
    N, L, D = x.shape
    if N < 2:
        raise ValueError(f"pretrain_autoencoder needs at least 2 sequences, got {N}")

    torch.manual_seed(seed)
    model = SequenceAutoencoder(L, D // 3, cfg.hidden_dim, cfg.latent_dim)
    baseline = _reconstruction_mse(model, x)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.ae_learning_rate)
    info(f"Autoencoder: {N} motions of {L} frames, untrained MSE {baseline:.6f}")

    for epoch in progress(range(1, cfg.ae_epochs + 1), desc="Autoencoder"):
        model.train()
        gen = torch.Generator().manual_seed(seed * 100_003 + epoch)
        order = torch.randperm(N, generator=gen)
        for start in range(0, N, cfg.ae_batch_size):
            batch = x[order[start:start + cfg.ae_batch_size]]
            loss = F.mse_loss(model(batch)[1], batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("autoencoder pretraining", epoch, float(loss))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    final = _reconstruction_mse(model, x)
    info(f"Autoencoder final MSE {final:.6f}")
    return AutoencoderState(model, cfg.latent_dim, cfg.hidden_dim, L, D // 3, baseline, final)


def encode_motions(state: AutoencoderState, sequences) -> np.ndarray:
    """One encoder pass per motion; returns (N, latent_dim) float64."""
    x = motion_features(sequences)
    _check_motion_shape(state, x)
    state.model.eval()
    with torch.no_grad():
        z = torch.cat([state.model.encode(x[i:i + _ENCODE_BATCH]) for i in range(0, x.shape[0], _ENCODE_BATCH)])
    return z.double().numpy()


def _check_motion_shape(state: AutoencoderState, x: torch.Tensor) -> None:
    if x.shape[1] != state.seq_len or x.shape[2] != state.num_joints * 3:
        raise ShapeMismatchError(
            f"motions of {x.shape[1]} frames x {x.shape[2] // 3} joints do not match the "
            f"autoencoder input ({state.seq_len} frames x {state.num_joints} joints)"
        )


# ---------------------------------------------------------------------------
# Cluster count: density peaks on a 2-D embedding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityStats:
    embedding_2d: np.ndarray
    rho: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    d_c: float
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))


def tsne_reduce(Z: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """Seeded t-SNE to 2-D. Perplexity is capped below N as sklearn requires."""
    N = Z.shape[0]
    perplexity = min(perplexity, max(1.0, (N - 1) / 3.0))
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(np.asarray(Z, dtype=np.float64)).astype(np.float64)


def _minmax(values: np.ndarray) -> np.ndarray:
    span = values.max() - values.min()
    if span == 0:
        return np.ones_like(values, dtype=np.float64)
    return (values - values.min()) / span


def density_stats(z2d: np.ndarray, d_c: float | None = None, quantile: float = 0.02) -> DensityStats:
    """
    rho_i   = #{j != i : d_ij < d_c}
    delta_i = min distance to a point ranked denser (stable descending-rho
              order breaks ties); the densest point gets its max distance
    gamma_i = minmax(rho)_i * minmax(delta)_i
    d_c defaults to the `quantile` of all pairwise distances.
    """
    z2d = np.asarray(z2d, dtype=np.float64)
    N = z2d.shape[0]
    dist = pairwise_distances(z2d)
    if d_c is None:
        iu = np.triu_indices(N, k=1)
        d_c = float(np.quantile(dist[iu], quantile))
        if d_c <= 0:
            positive = dist[iu][dist[iu] > 0]
            if positive.size == 0:
                raise DegenerateGeometryError("all embedded points coincide")
            d_c = float(positive.min())

    rho = (dist < d_c).sum(axis=1) - 1

    order = np.argsort(-rho, kind="stable")
    delta = np.zeros(N, dtype=np.float64)
    delta[order[0]] = dist[order[0]].max()
    for rank in range(1, N):
        i = order[rank]
        delta[i] = dist[i, order[:rank]].min()

    gamma = _minmax(rho.astype(np.float64)) * _minmax(delta)
    return DensityStats(embedding_2d=z2d, rho=rho, delta=delta, gamma=gamma, d_c=d_c)


def select_k(gamma: np.ndarray, k_max: int, eps: float = 1e-12, k_min: int = 1) -> tuple[int, np.ndarray]:
    """
    Sort gamma descending, r_i = gamma_i / (gamma_{i+1} + eps), K = argmax
    over i in [k_min, k_max] (1-based).
    """
    g = np.sort(np.asarray(gamma, dtype=np.float64))[::-1]
    if g.size < 2:
        return 1, np.zeros(0)
    ratios = g[:-1] / (g[1:] + eps)
    low = max(1, min(k_min, ratios.size))
    high = max(low, min(k_max, ratios.size))
    return low + int(np.argmax(ratios[low - 1:high])), ratios


def estimate_k(
    Z: np.ndarray,
    cfg: EpistemicConfig,
    reducer: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[int, DensityStats]:
    """Reduce to 2-D, compute density peaks, pick K at the largest gamma-ratio gap."""
    Z = np.asarray(Z, dtype=np.float64)
    N = Z.shape[0]
    if N < 3:
        raise ValueError(f"estimate_k needs at least 3 embeddings, got {N}")
    if np.all(Z == Z[0]):
        raise DegenerateGeometryError("all embeddings are identical")

    reducer = reducer or (lambda data: tsne_reduce(data, cfg.perplexity, cfg.seed))
    z2d = reducer(Z)
    stats = density_stats(z2d, d_c=cfg.d_c, quantile=cfg.dc_quantile)
    k_min = max(1, cfg.k_min)
    k_max = max(k_min, min(cfg.k_max, N // 10))
    K, ratios = select_k(stats.gamma, k_max, cfg.gamma_eps, k_min=k_min)
    info(f"Density peaks: d_c={stats.d_c:.4f}, K={K} (searched {k_min}..{k_max})")
    return K, DensityStats(stats.embedding_2d, stats.rho, stats.delta, stats.gamma, stats.d_c, ratios)


# ---------------------------------------------------------------------------
# Deep embedded clustering
# ---------------------------------------------------------------------------

def soft_assign(z: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Student's t kernel, one degree of freedom: q_ik proportional to (1 + ||z_i - mu_k||^2)^-1."""
    d2 = ((z.unsqueeze(1) - centers.unsqueeze(0)) ** 2).sum(dim=2)
    return torch.softmax(-torch.log1p(d2), dim=1)


def target_distribution(q: torch.Tensor) -> torch.Tensor:
    """p_ik = (q_ik^2 / f_k) normalised per row, f_k = sum_i q_ik."""
    weight = q ** 2 / q.sum(dim=0)
    return weight / weight.sum(dim=1, keepdim=True)


def cluster_purity(labels_true, labels_pred) -> float:
    """Fraction of samples whose predicted cluster's majority label matches theirs."""
    cm = contingency_matrix(np.asarray(labels_true), np.asarray(labels_pred))
    return float(cm.max(axis=0).sum() / cm.sum())


@dataclass
class ClusterModel:
    autoencoder: AutoencoderState
    centers: torch.Tensor
    K: int
    lam: float
    head: nn.Linear | None = None
    train_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    init_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    latent_scale: float = 1.0      # centers live in encoder units / latent_scale

    def __post_init__(self):
        if self.K < 1 or self.centers.shape[0] != self.K:
            raise ValueError(f"ClusterModel: {self.centers.shape[0]} centers for K={self.K}")
        if not torch.isfinite(self.centers).all():
            raise ValueError("ClusterModel: non-finite centers")
        if not (math.isfinite(self.latent_scale) and self.latent_scale > 0):
            raise ValueError(f"ClusterModel: latent_scale must be positive, got {self.latent_scale}")

    def assign(self, z: torch.Tensor) -> torch.Tensor:
        """Soft assignments of raw encoder outputs."""
        centers = self.centers.detach().to(z.dtype)
        return soft_assign(z / self.latent_scale, centers)


def latent_scale(centers: np.ndarray) -> float:
    """
    Unit that puts neighbouring centers _CENTER_SPACING kernel widths apart:
    median nearest-other-center distance / _CENTER_SPACING. 1.0 for K < 2.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] < 2:
        return 1.0
    dist = pairwise_distances(centers)
    np.fill_diagonal(dist, np.inf)
    spacing = float(np.median(dist.min(axis=1)))
    if not math.isfinite(spacing) or spacing <= 0:
        return 1.0
    return spacing / _CENTER_SPACING


def _kmeans_init(z: np.ndarray, K: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    for attempt in range(_KMEANS_ATTEMPTS):
        km = KMeans(n_clusters=K, n_init=_KMEANS_N_INIT, random_state=seed + attempt).fit(z)
        if np.bincount(km.labels_, minlength=K).min() > 0:
            return km.cluster_centers_, km.labels_.astype(np.int64)
        warn(f"K-means left an empty cluster (attempt {attempt + 1}); re-seeding")
    raise EmptyClusterError(f"K-means produced an empty cluster in {_KMEANS_ATTEMPTS} attempts (K={K})")


def _encode_all(model: SequenceAutoencoder, x: torch.Tensor) -> torch.Tensor:
    return torch.cat([model.encode(x[i:i + _ENCODE_BATCH]) for i in range(0, x.shape[0], _ENCODE_BATCH)])


def _hard_labels(model: SequenceAutoencoder, x: torch.Tensor, centers: torch.Tensor, scale: float) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return soft_assign(_encode_all(model, x) / scale, centers).argmax(dim=1)


def _drift(labels: torch.Tensor, reference: torch.Tensor) -> float:
    return float((labels != reference).float().mean())


def fit_clusters(
    ae: AutoencoderState,
    sequences,
    K: int,
    lam: float,
    cfg: EpistemicConfig,
) -> ClusterModel:
    """
    1. K-means on encoder outputs initialises the centers mu; latents are
       measured in units of latent_scale(mu).
    2. Minimise KL(P || Q) + lam * L_recons; P refreshed every
       target_update_interval steps; stop when fewer than stop_tol of hard
       labels change between refreshes.
    3. Fine-tune encoder + a linear classification head with cross-entropy on
       the phase-2 hard labels; mu stays frozen.
    Phases 2 and 3 are anchored to the initial partition: a refresh or epoch
    that moves more than max_label_drift of the motions off their initial
    cluster is rolled back and ends the phase.
    The pretrained autoencoder passed in is not modified.
    """
    x = motion_features(sequences)
    _check_motion_shape(ae, x)
    N = x.shape[0]
    if N < K:
        raise ValueError(f"fit_clusters: N={N} < K={K}")

    torch.manual_seed(cfg.seed)
    model = copy.deepcopy(ae.model)
    model.eval()
    with torch.no_grad():
        z0 = _encode_all(model, x).double().numpy()
    centers_np, _ = _kmeans_init(z0, K, cfg.seed)
    scale = latent_scale(centers_np)
    centers = nn.Parameter(torch.tensor(centers_np / scale, dtype=torch.float32))
    init_labels = _hard_labels(model, x, centers.detach(), scale)

    # phase 2: joint clustering + reconstruction
    params = list(model.parameters()) + [centers]
    optimizer = torch.optim.Adam(params, lr=cfg.dec_learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    order = torch.randperm(N, generator=gen)
    cursor = 0
    labels_prev = init_labels
    target = None
    accepted = (copy.deepcopy(model.state_dict()), centers.detach().clone())

    def rollback():
        model.load_state_dict(accepted[0])
        with torch.no_grad():
            centers.copy_(accepted[1])

    for step in progress(range(cfg.dec_max_steps), desc="DEC"):
        if step % cfg.target_update_interval == 0:
            model.eval()
            with torch.no_grad():
                q_all = soft_assign(_encode_all(model, x) / scale, centers)
                target = target_distribution(q_all)
                labels = q_all.argmax(dim=1)
            drift = _drift(labels, init_labels)
            if drift > cfg.max_label_drift:
                rollback()
                info(f"DEC stopped at step {step}: {drift:.4%} of motions left their initial cluster")
                break
            accepted = (copy.deepcopy(model.state_dict()), centers.detach().clone())
            changed = _drift(labels, labels_prev)
            if step > 0 and changed < cfg.stop_tol:
                info(f"DEC converged at step {step} ({changed:.4%} labels changed)")
                break
            labels_prev = labels
            model.train()

        if cursor + cfg.dec_batch_size > N:
            order = torch.randperm(N, generator=gen)
            cursor = 0
        idx = order[cursor:cursor + cfg.dec_batch_size]
        cursor += cfg.dec_batch_size

        z = model.encode(x[idx])
        q = soft_assign(z / scale, centers)
        kl = F.kl_div(torch.log(q), target[idx], reduction="batchmean")
        recon = F.mse_loss(model.decode(z), x[idx])
        loss = kl + lam * recon
        if not torch.isfinite(loss):
            raise TrainingDivergedError("deep embedded clustering", step, float(loss))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    else:
        if _drift(_hard_labels(model, x, centers.detach(), scale), init_labels) > cfg.max_label_drift:
            rollback()

    frozen = centers.detach().clone()
    hard_labels = _hard_labels(model, x, frozen, scale)

    # phase 3: cross-entropy fine-tune with frozen centers
    head = nn.Linear(ae.latent_dim, K)
    ft_params = model.encoder_parameters() + list(head.parameters())
    ft_optimizer = torch.optim.Adam(ft_params, lr=cfg.dec_learning_rate)
    for epoch in progress(range(1, cfg.finetune_epochs + 1), desc="Cluster fine-tune"):
        kept = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
        model.train()
        perm = torch.randperm(N, generator=gen)
        for start in range(0, N, cfg.dec_batch_size):
            idx = perm[start:start + cfg.dec_batch_size]
            z = model.encode(x[idx])
            y = hard_labels[idx]
            loss = F.cross_entropy(head(z), y) + F.nll_loss(torch.log(soft_assign(z / scale, frozen)), y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError("cluster fine-tuning", epoch, float(loss))
            ft_optimizer.zero_grad()
            loss.backward()
            ft_optimizer.step()
        drift = _drift(_hard_labels(model, x, frozen, scale), init_labels)
        if drift > cfg.max_label_drift:
            model.load_state_dict(kept[0])
            head.load_state_dict(kept[1])
            info(f"Fine-tune stopped at epoch {epoch}: {drift:.4%} of motions left their initial cluster")
            break

    train_labels = _hard_labels(model, x, frozen, scale).numpy()
    with torch.no_grad():
        q_final = soft_assign(_encode_all(model, x).double() / scale, frozen.double())

    state = AutoencoderState(model, ae.latent_dim, ae.hidden_dim, ae.seq_len, ae.num_joints,
                             ae.baseline_loss, _reconstruction_mse(model, x))
    counts = np.bincount(train_labels, minlength=K)
    train_epu = float(assignment_entropy(q_final).mean())
    info(f"Clusters fitted: K={K}, sizes {counts.tolist()}, training EpU {train_epu:.4f}")
    if K > 1 and train_epu > _FLAT_ASSIGNMENT * math.log(K):
        warn(f"training assignments are nearly uniform (EpU {train_epu:.3f} of ln K = {math.log(K):.3f}); "
             f"K={K} does not separate the training motions")
    return ClusterModel(state, frozen, K, lam, head.eval(), train_labels.astype(np.int64),
                        init_labels.numpy().astype(np.int64), scale)


def cluster_labels(model: ClusterModel, sequences) -> np.ndarray:
    """Hard assignment (argmax q) per motion."""
    z = torch.from_numpy(encode_motions(model.autoencoder, sequences))
    return model.assign(z).argmax(dim=1).numpy()


# ---------------------------------------------------------------------------
# EpU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpUReport:
    per_sample_entropy: np.ndarray
    epu: float
    n: int
    assignment_probs: np.ndarray
    encoder_passes: int
    forecaster_passes: int = 0

    def to_json(self) -> dict:
        return {"epu": self.epu, "n": self.n, "entropies": self.per_sample_entropy.tolist()}


def assignment_entropy(p) -> np.ndarray:
    """Natural-log entropy of each row, clipped to [0, ln K]."""
    p = torch.as_tensor(p, dtype=torch.float64)
    if p.dim() == 1:
        p = p.unsqueeze(0)
    h = -torch.special.xlogy(p, p).sum(dim=1)
    return h.clamp(0.0, math.log(p.shape[1])).numpy()


def epu_score(model: ClusterModel, forecasts) -> EpUReport:
    """
    Encode every forecast once, soft-assign to the frozen centers, and average
    the per-sample assignment entropies. The forecaster itself is not called.
    """
    z = torch.from_numpy(encode_motions(model.autoencoder, forecasts))
    q = model.assign(z)
    entropy = assignment_entropy(q)
    return EpUReport(
        per_sample_entropy=entropy,
        epu=float(entropy.mean()),
        n=int(entropy.shape[0]),
        assignment_probs=q.numpy(),
        encoder_passes=int(z.shape[0]),
    )


# ---------------------------------------------------------------------------
# Sampling baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingUncertainty:
    per_sample: np.ndarray
    forward_passes: int

    @property
    def score(self) -> float:
        return float(self.per_sample.mean())


def _prediction_spread(predictions: torch.Tensor) -> np.ndarray:
    """
    predictions (M, B, T, J, 3): per cell (t, j) the population std of the
    3-D position across members, sqrt(sum_xyz var); averaged over (t, j).
    """
    var = predictions.double().var(dim=0, unbiased=False).sum(dim=-1)
    return var.sqrt().mean(dim=(-2, -1)).numpy()


def _as_batch(observed) -> torch.Tensor:
    observed = torch.as_tensor(np.asarray(observed, dtype=np.float32))
    return observed.unsqueeze(0) if observed.dim() == 3 else observed


def mc_dropout_uncertainty(ckpt: Checkpoint, observed, passes: int, seed: int = 0) -> SamplingUncertainty:
    """`passes` stochastic forward passes with dropout active."""
    if passes < 2:
        raise ValueError(f"mc_dropout_uncertainty needs passes >= 2, got {passes}")
    rate = ckpt.model_config.dropout_rate if ckpt.model_config is not None else 0.0
    if rate == 0:
        warn("MC-dropout on a network without dropout: spread is identically zero")
        warnings.warn("dropout_rate is 0; MC-dropout degenerates to a deterministic net",
                      DegenerateBaselineWarning, stacklevel=2)

    model = build_forecaster(ckpt)
    model.train()
    batch = _as_batch(observed)
    with torch.random.fork_rng(), torch.no_grad():
        torch.manual_seed(seed)
        predictions = torch.stack([model(batch) for _ in range(passes)])
    return SamplingUncertainty(_prediction_spread(predictions), forward_passes=passes)


def ensemble_uncertainty(ckpts: list[Checkpoint], observed) -> SamplingUncertainty:
    """Spread of independently trained members' deterministic forecasts."""
    if len(ckpts) < 2:
        raise ValueError(f"ensemble_uncertainty needs at least 2 members, got {len(ckpts)}")
    first = ckpts[0]
    for other in ckpts[1:]:
        if (other.forecaster_kind, other.window, other.model_config) != (first.forecaster_kind, first.window, first.model_config):
            raise ArchitectureMismatchError("ensemble members must share forecaster kind, window and model config")

    batch = _as_batch(observed)
    with torch.no_grad():
        predictions = torch.stack([build_forecaster(c)(batch) for c in ckpts])
    return SamplingUncertainty(_prediction_spread(predictions), forward_passes=len(ckpts))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_cluster_model(model: ClusterModel, path) -> None:
    ae = model.autoencoder
    tensors = {"centers": model.centers.detach().float().contiguous()}
    for name, value in ae.model.state_dict().items():
        tensors[f"ae.{name}"] = value.detach().float().contiguous()
    if model.head is not None:
        for name, value in model.head.state_dict().items():
            tensors[f"head.{name}"] = value.detach().float().contiguous()

    manifest = {
        "format_version": _ARCHIVE_VERSION,
        "kind":           "cluster_model",
        "K":              model.K,
        "lambda":         model.lam,
        "latent_scale":   model.latent_scale,
        "autoencoder": {
            "latent_dim":    ae.latent_dim,
            "hidden_dim":    ae.hidden_dim,
            "seq_len":       ae.seq_len,
            "num_joints":    ae.num_joints,
            "baseline_loss": ae.baseline_loss,
            "final_loss":    ae.final_loss,
        },
        "train_labels": model.train_labels.tolist(),
        "init_labels":  model.init_labels.tolist(),
        "blobs":        sorted(tensors),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={"manifest": json.dumps(manifest, sort_keys=True)})


def load_cluster_model(path) -> ClusterModel:
    manifest, tensors = read_archive(path)
    if manifest.get("kind") != "cluster_model":
        raise CheckpointCorruptError(f"{path}: not a cluster model archive")
    try:
        a = manifest["autoencoder"]
        dims = (int(a["seq_len"]), int(a["num_joints"]), int(a["hidden_dim"]), int(a["latent_dim"]))
        K = int(manifest["K"])
        lam = float(manifest["lambda"])
        scale = float(manifest["latent_scale"])
        centers = tensors["centers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: manifest lacks {exc}") from exc

    seq_len, num_joints, hidden_dim, latent_dim = dims
    net = SequenceAutoencoder(seq_len, num_joints, hidden_dim, latent_dim)
    net.load_state_dict({k[len("ae."):]: v for k, v in tensors.items() if k.startswith("ae.")})
    net.eval()
    head = None
    head_state = {k[len("head."):]: v for k, v in tensors.items() if k.startswith("head.")}
    if head_state:
        head = nn.Linear(latent_dim, K)
        head.load_state_dict(head_state)
        head.eval()
    state = AutoencoderState(net, latent_dim, hidden_dim, seq_len, num_joints,
                             a.get("baseline_loss", float("nan")), a.get("final_loss", float("nan")))
    return ClusterModel(
        autoencoder=state,
        centers=centers,
        K=K,
        lam=lam,
        head=head,
        train_labels=np.asarray(manifest.get("train_labels", []), dtype=np.int64),
        init_labels=np.asarray(manifest.get("init_labels", []), dtype=np.int64),
        latent_scale=scale,
    )
