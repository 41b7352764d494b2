"""
Forecasting models behind one interface, the training loop that couples a
forecaster with an uncertainty prior and the pUAL loss, and the checkpoint
archive (safetensors: JSON manifest + raw little-endian float32 blobs).

Models take observed windows (B, O, J, 3) in mm and return (B, T, J, 3) in mm.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file
from torch import nn

from _console import info, progress, warn
from errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    MissingArtifactError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from metrics import a_mpjpe
from pose_core import ForecastSample, stack_samples
from pual_loss import central_difference, plain_l2_loss, pual_loss, relative_deviation
from uncertainty_priors import PriorParams, UncertaintyPrior, parse_prior_spec, prior_grid

_FORMAT_VERSION = 1
_INPUT_SCALE    = 1e-3          # mm -> m inside the network
_EMBED_STD      = 0.02
_EVAL_BATCH     = 256

FORECASTER_KINDS = ("zero_vel", "st_trans")


# ---------------------------------------------------------------------------
# Configs and outputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastOutput:
    y_hat: torch.Tensor
    u: torch.Tensor | None = None


@dataclass(frozen=True)
class STTransConfig:
    num_blocks: int = 6
    model_width: int = 64
    num_heads: int = 4
    mlp_hidden: int = 128
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.model_width % self.num_heads != 0:
            raise ConfigError(f"model_width {self.model_width} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if min(self.num_blocks, self.model_width, self.num_heads, self.mlp_hidden) < 1:
            raise ConfigError("ST-Trans sizes must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    prior: dict | None = None
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    num_threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.grad_clip <= 0:
            raise ConfigError(f"invalid train config {self}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def zero_vel_forecast(observed, T: int) -> ForecastOutput:
    """Repeats the last observed pose for all T future frames."""
    observed = torch.as_tensor(observed)
    if observed.dim() < 3 or observed.shape[-3] < 1:
        raise ShapeMismatchError(f"observed must be (..., O>=1, J, 3), got {tuple(observed.shape)}")
    last = observed[..., -1:, :, :]
    reps = [1] * (observed.dim() - 3) + [T, 1, 1]
    return ForecastOutput(y_hat=last.repeat(*reps))


class ZeroVelocity(nn.Module):
    """Parameter-free baseline."""

    def __init__(self, O: int, T: int, J: int):
        super().__init__()
        self.O, self.T, self.J = O, T, J

    def forward(self, observed: torch.Tensor) -> torch.Tensor:
        return zero_vel_forecast(observed, self.T).y_hat


class SpatioTemporalBlock(nn.Module):
    """Temporal attention over frames (per joint), then spatial attention over joints (per frame)."""

    def __init__(self, cfg: STTransConfig):
        super().__init__()
        layer_kwargs = dict(
            d_model=cfg.model_width,
            nhead=cfg.num_heads,
            dim_feedforward=cfg.mlp_hidden,
            dropout=cfg.dropout_rate,
            activation="gelu",
            batch_first=True,
        )
        self.temporal = nn.TransformerEncoderLayer(**layer_kwargs)
        self.spatial  = nn.TransformerEncoderLayer(**layer_kwargs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, J, W = x.shape
        h = x.permute(0, 2, 1, 3).reshape(B * J, L, W)
        h = self.temporal(h).reshape(B, J, L, W).permute(0, 2, 1, 3)
        h = self.spatial(h.reshape(B * L, J, W)).reshape(B, L, J, W)
        return h


class STTrans(nn.Module):
    """
    Input MLP -> stacked spatio-temporal blocks with skip connections -> output MLP.
    The observed window is expressed relative to its last pose and padded with
    T zero frames; the output MLP decodes the last T frames as offsets.
    """

    def __init__(self, O: int, T: int, J: int, cfg: STTransConfig | None = None):
        super().__init__()
        cfg = cfg or STTransConfig()
        self.O, self.T, self.J, self.cfg = O, T, J, cfg
        W = cfg.model_width
        self.input_mlp = nn.Sequential(nn.Linear(3, W), nn.GELU(), nn.Linear(W, W))
        self.frame_embedding = nn.Parameter(torch.randn(O + T, W) * _EMBED_STD)
        self.joint_embedding = nn.Parameter(torch.randn(J, W) * _EMBED_STD)
        self.blocks = nn.ModuleList([SpatioTemporalBlock(cfg) for _ in range(cfg.num_blocks)])
        self.output_mlp = nn.Sequential(nn.Linear(W, cfg.mlp_hidden), nn.GELU(), nn.Linear(cfg.mlp_hidden, 3))

    def forward(self, observed: torch.Tensor) -> torch.Tensor:
        if observed.shape[-3:] != (self.O, self.J, 3):
            raise ShapeMismatchError(
                f"observed {tuple(observed.shape)} does not match trained (O={self.O}, J={self.J}, 3)"
            )
        last = observed[:, -1:]
        rel = (observed - last) * _INPUT_SCALE
        pad = torch.zeros(observed.shape[0], self.T, self.J, 3, dtype=observed.dtype, device=observed.device)
        x = torch.cat([rel, pad], dim=1)

        h = self.input_mlp(x) + self.frame_embedding[None, :, None, :] + self.joint_embedding[None, None, :, :]
        skip = torch.zeros_like(h)
        for block in self.blocks:
            out = block(h)
            skip = skip + out
            h = (h + out) / math.sqrt(2.0)
        h = skip / math.sqrt(len(self.blocks))

        offsets = self.output_mlp(h[:, self.O:])
        return last + offsets / _INPUT_SCALE


def build_model(kind: str, O: int, T: int, J: int, model_config: STTransConfig | None = None) -> nn.Module:
    if kind == "zero_vel":
        return ZeroVelocity(O, T, J)
    if kind == "st_trans":
        return STTrans(O, T, J, model_config)
    raise ConfigError(f"unknown forecaster kind {kind!r}; expected one of {FORECASTER_KINDS}")


def st_trans_forecast(model: STTrans, observed) -> ForecastOutput:
    """Deterministic eval-mode forecast; accepts (O, J, 3) or (B, O, J, 3)."""
    observed = torch.as_tensor(observed, dtype=next(model.parameters()).dtype)
    single = observed.dim() == 3
    batch = observed.unsqueeze(0) if single else observed
    model.eval()
    with torch.no_grad():
        y_hat = model(batch)
    return ForecastOutput(y_hat=y_hat[0] if single else y_hat)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    forecaster_kind: str
    window: tuple                          # (O, T, J)
    model_config: STTransConfig | None
    train_config: TrainConfig
    state_dict: dict
    prior: PriorParams | None = None
    epoch_log: list = field(default_factory=list)

    def epoch_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.epoch_log, columns=["epoch", "train_loss", "val_a_mpjpe"])

    @property
    def final_val_a_mpjpe(self) -> float:
        return float(self.epoch_log[-1]["val_a_mpjpe"]) if self.epoch_log else float("nan")


def build_forecaster(ckpt: Checkpoint) -> nn.Module:
    O, T, J = ckpt.window
    model = build_model(ckpt.forecaster_kind, O, T, J, ckpt.model_config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def forecast(ckpt: Checkpoint, observed, model: nn.Module | None = None) -> ForecastOutput:
    """
    Forecast with a loaded checkpoint; u is attached when it was trained with a prior.
    Accepts (O, J, 3) or (B, O, J, 3) in mm.
    """
    model = model or build_forecaster(ckpt)
    observed = torch.as_tensor(np.asarray(observed, dtype=np.float32))
    single = observed.dim() == 3
    batch = observed.unsqueeze(0) if single else observed
    if tuple(batch.shape[-3:]) != (ckpt.window[0], ckpt.window[2], 3):
        raise ShapeMismatchError(f"observed {tuple(observed.shape)} does not match checkpoint window {ckpt.window}")
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, batch.shape[0], _EVAL_BATCH):
            outputs.append(model(batch[start:start + _EVAL_BATCH]))
        y_hat = torch.cat(outputs)
        u = prior_grid(ckpt.prior) if ckpt.prior is not None else None
    return ForecastOutput(y_hat=y_hat[0] if single else y_hat, u=u)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    O, T, J = ckpt.window
    tensors = {"meta.window": torch.tensor([O, T, J], dtype=torch.float32)}
    for name, value in ckpt.state_dict.items():
        tensors[f"model.{name}"] = value.detach().to(torch.float32).contiguous().cpu()
    if ckpt.prior is not None:
        tensors["prior.theta"] = ckpt.prior.theta.detach().to(torch.float32).contiguous().cpu()

    manifest = {
        "format_version":  _FORMAT_VERSION,
        "forecaster_kind": ckpt.forecaster_kind,
        "window":          {"O": O, "T": T, "J": J},
        "configs": {
            "model": asdict(ckpt.model_config) if ckpt.model_config is not None else None,
            "train": asdict(ckpt.train_config),
        },
        "prior":     ckpt.prior.to_manifest() if ckpt.prior is not None else None,
        "blobs":     sorted(tensors),
        "epoch_log": ckpt.epoch_log,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={"manifest": json.dumps(manifest, sort_keys=True)})


def read_archive(path) -> tuple[dict, dict]:
    """Returns (manifest, tensors) of a safetensors archive written by this toolkit."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"archive not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
            tensors = {name: f.get_tensor(name) for name in f.keys()}
    except (SafetensorError, OSError, ValueError, RuntimeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable archive ({exc})") from exc
    try:
        manifest = json.loads(metadata["manifest"])
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: missing or broken manifest") from exc
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {manifest.get('format_version')!r}, this build reads {_FORMAT_VERSION}"
        )
    missing = set(manifest.get("blobs", [])) - set(tensors)
    if missing:
        raise CheckpointCorruptError(f"{path}: blobs listed in manifest but absent: {sorted(missing)}")
    return manifest, tensors


def load_checkpoint(path) -> Checkpoint:
    manifest, tensors = read_archive(path)
    try:
        window = (manifest["window"]["O"], manifest["window"]["T"], manifest["window"]["J"])
        model_block = manifest["configs"]["model"]
        train_block = manifest["configs"]["train"]
        kind = manifest["forecaster_kind"]
    except (KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"{path}: manifest lacks {exc}") from exc

    prior = None
    if manifest.get("prior") is not None:
        prior = PriorParams.from_manifest(manifest["prior"])
        prior = PriorParams(prior.family, prior.scope, tensors["prior.theta"], prior.T, prior.J, prior.degree)

    state_dict = {name[len("model."):]: value for name, value in tensors.items() if name.startswith("model.")}
    return Checkpoint(
        forecaster_kind=kind,
        window=tuple(int(v) for v in window),
        model_config=STTransConfig(**model_block) if model_block is not None else None,
        train_config=TrainConfig(**train_block),
        state_dict=state_dict,
        prior=prior,
        epoch_log=list(manifest.get("epoch_log", [])),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    """What the training loop consumed on one optimiser step (instrumentation)."""
    epoch: int
    loss: torch.Tensor
    u: torch.Tensor | None
    theta: torch.Tensor | None
    future: torch.Tensor
    prediction: torch.Tensor


def validation_split(source_ids: list[str], val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Deterministic split by SHA-1 of source_id. Falls back to validating on the
    training set when the hash leaves the validation side empty.
    """
    indices = np.arange(len(source_ids))
    if val_fraction <= 0:
        return indices, indices
    buckets = np.array([int(hashlib.sha1(s.encode("utf-8")).hexdigest()[:8], 16) % 1000 for s in source_ids])
    is_val = buckets < int(round(val_fraction * 1000))
    train_idx, val_idx = indices[~is_val], indices[is_val]
    if len(val_idx) == 0 or len(train_idx) == 0:
        warn("validation split is empty on one side; validating on the training set")
        return indices, indices
    return train_idx, val_idx


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def _predict(model: nn.Module, observed: torch.Tensor) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return torch.cat([model(observed[i:i + _EVAL_BATCH]) for i in range(0, observed.shape[0], _EVAL_BATCH)])


def train(
    forecaster_kind: str,
    dataset: list[ForecastSample],
    cfg: TrainConfig,
    model_config: STTransConfig | None = None,
    hook: Callable[[StepRecord], None] | None = None,
) -> Checkpoint:
    """
    Jointly optimises model weights and prior theta (one Adam, one learning
    rate, gradient-norm clip) on pual_loss, or on plain_l2_loss without a prior.
    Records validation A-MPJPE after every epoch.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    observed_np, future_np = stack_samples(dataset)
    O, T, J = observed_np.shape[1], future_np.shape[1], observed_np.shape[2]
    if forecaster_kind == "st_trans":
        model_config = model_config or STTransConfig()
    else:
        model_config = None

    previous_threads = torch.get_num_threads()
    torch.set_num_threads(cfg.num_threads)
    try:
        torch.manual_seed(cfg.seed)
        model = build_model(forecaster_kind, O, T, J, model_config)
        initial_prior = parse_prior_spec(cfg.prior, T, J, cfg.seed)
        prior = UncertaintyPrior(initial_prior) if initial_prior is not None else None

        params = list(model.parameters()) + (list(prior.parameters()) if prior is not None else [])
        optimizer = torch.optim.Adam(params, lr=cfg.learning_rate) if params else None

        observed = torch.from_numpy(observed_np)
        future   = torch.from_numpy(future_np)
        train_idx, val_idx = validation_split([s.source_id for s in dataset], cfg.val_fraction)
        train_idx = torch.from_numpy(train_idx)
        val_idx_t = torch.from_numpy(val_idx)

        label = prior.params().label if prior is not None else "no prior"
        info(f"Training {forecaster_kind} ({label}) seed {cfg.seed} on {len(train_idx)} windows, "
             f"validating on {len(val_idx)}")

        epoch_log = []
        for epoch in progress(range(1, cfg.epochs + 1), desc=f"{forecaster_kind} seed {cfg.seed}"):
            model.train()
            gen = torch.Generator().manual_seed(_epoch_seed(cfg.seed, epoch))
            order = train_idx[torch.randperm(len(train_idx), generator=gen)]

            loss_sum, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                obs_b, fut_b = observed[batch], future[batch]
                pred = model(obs_b)
                u = prior() if prior is not None else None
                loss = pual_loss(fut_b, pred, u).total if u is not None else plain_l2_loss(fut_b, pred)

                if not torch.isfinite(loss):
                    raise TrainingDivergedError("forecaster training", epoch, float(loss))
                if hook is not None:
                    hook(StepRecord(
                        epoch=epoch,
                        loss=loss.detach().clone(),
                        u=None if u is None else u.detach().clone(),
                        theta=None if prior is None else prior.theta.detach().clone(),
                        future=fut_b,
                        prediction=pred.detach().clone(),
                    ))
                if optimizer is not None:
                    optimizer.zero_grad()
                    loss.backward()
                    nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                    optimizer.step()

                loss_sum += float(loss.detach()) * len(batch)
                seen += len(batch)

            val_pred = _predict(model, observed[val_idx_t])
            epoch_log.append({
                "epoch":       epoch,
                "train_loss":  loss_sum / max(seen, 1),
                "val_a_mpjpe": a_mpjpe(future_np[val_idx], val_pred.numpy()),
            })
    finally:
        torch.set_num_threads(previous_threads)

    if epoch_log:
        info(f"Final val A-MPJPE: {epoch_log[-1]['val_a_mpjpe']:.2f} mm")
    return Checkpoint(
        forecaster_kind=forecaster_kind,
        window=(O, T, J),
        model_config=model_config,
        train_config=cfg,
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        prior=prior.params() if prior is not None else None,
        epoch_log=epoch_log,
    )


# ---------------------------------------------------------------------------
# Gradient oracle for the network
# ---------------------------------------------------------------------------

def network_gradient_check(seed: int = 0, O: int = 3, T: int = 2, J: int = 3,
                           step: float = 1e-5) -> dict:
    """
    pual_loss gradients through a width-8, one-block ST-Trans (float64, no
    dropout) against central differences, w.r.t. the input window and the
    output layer bias. Returns max relative deviations.
    """
    torch.manual_seed(seed)
    cfg = STTransConfig(num_blocks=1, model_width=8, num_heads=2, mlp_hidden=16, dropout_rate=0.0)
    model = STTrans(O, T, J, cfg).double().eval()
    gen = torch.Generator().manual_seed(seed)
    observed = torch.randn(1, O, J, 3, generator=gen, dtype=torch.float64) * 100.0
    future   = torch.randn(1, T, J, 3, generator=gen, dtype=torch.float64) * 100.0
    u        = torch.rand(T, J, generator=gen, dtype=torch.float64)

    obs_var = observed.clone().requires_grad_(True)
    model.zero_grad()
    pual_loss(future, model(obs_var), u).total.backward()
    bias = model.output_mlp[-1].bias
    analytic_bias = bias.grad.detach().clone()

    numeric_obs = central_difference(lambda v: pual_loss(future, model(v), u).total, observed, step)

    def loss_at_bias(v):
        saved = bias.detach().clone()
        bias.data.copy_(v)
        value = pual_loss(future, model(observed), u).total.detach()
        bias.data.copy_(saved)
        return value

    numeric_bias = central_difference(loss_at_bias, bias.detach(), step)
    return {
        "input":       relative_deviation(obs_var.grad, numeric_obs),
        "output_bias": relative_deviation(analytic_bias, numeric_bias),
    }
