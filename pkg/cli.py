"""
Command-line surface of the toolkit.

    python cli.py [--config PATH] [--out DIR] [--seed INT] [--quiet] COMMAND

    gen                     synthetic motion families -> data/*.poseseq + manifest.csv
    train [--run NAME]      one checkpoint + one epoch log per (run, seed)
    eval                    horizon tables, gain tables, AP-MPJPE, A-MPJPE spread
    epu fit|score|auroc|ood cluster model, EpU reports, selective classification, OOD triple
    report                  learned uncertainty curves as CSV

One experiment lives in one directory (--out / "out_dir"): config.json, data/,
checkpoints/, logs/, reports/, epistemic/. Exit status 0 on success, 2 on a
configuration error, 1 on any other toolkit error.
"""
import functools
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import combinations
from pathlib import Path
from typing import Annotated, Optional

import numpy as np
import pandas as pd
import typer
from rich.console import Console
from rich.table import Table

from _console import info, is_quiet, set_quiet, warn
from _settings_helper import get_setting
from epistemic import (
    EpistemicConfig,
    cluster_labels,
    cluster_purity,
    encode_motions,
    ensemble_uncertainty,
    epu_score,
    estimate_k,
    fit_clusters,
    load_cluster_model,
    mc_dropout_uncertainty,
    pretrain_autoencoder,
    save_cluster_model,
)
from errors import ConfigError, MissingArtifactError, PoseUncertaintyError
from forecasters import (
    FORECASTER_KINDS,
    STTransConfig,
    TrainConfig,
    forecast,
    load_checkpoint,
    save_checkpoint,
    train,
)
from metrics import (
    DEFAULT_HORIZONS_MS,
    HorizonTable,
    a_mpjpe,
    ap_mpjpe,
    auroc,
    gain_table,
    horizon_table_from_arrays,
    mpjpe,
    roc_points,
)
from pose_core import (
    ForecastSample,
    MotionFamilySpec,
    canonical_family_specs,
    generate_family,
    random_family_spec,
    read_sequence,
    shuffle_frames,
    shuffle_joints,
    stack_samples,
    window,
    write_sequence,
)
from uncertainty_priors import prior_grid

EXIT_CONFIG  = 2
EXIT_RUNTIME = 1

_SHORT_FRAMES    = 5
_JOINT_GROUPS    = {
    "hands": ("hand", "wrist"),
    "legs":  ("foot", "ankle", "knee", "leg"),
}

app = typer.Typer(add_completion=False, help="Pose forecasting uncertainty lab.")
epu_app = typer.Typer(add_completion=False, help="Epistemic uncertainty (EpU) commands.")
app.add_typer(epu_app, name="epu")


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    families: tuple = ("walking", "sitting", "waving")
    sequences_per_family: int = 8
    test_sequences_per_family: int = 2
    num_frames: int = 300
    fps: float = 25.0
    O: int = 10
    T: int = 25
    stride: int | None = 5                 # train split; None = T
    test_stride: int | None = None         # test split; None = T, non-overlapping futures
    seed: int = 0

    def stride_for(self, split: str) -> int:
        stride = self.test_stride if split == "test" else self.stride
        return self.T if stride is None else stride


@dataclass(frozen=True)
class RunSpec:
    name: str
    prior: dict | None = None
    families: tuple | None = None          # family ids to train on; None = all


@dataclass(frozen=True)
class EpuConfig:
    run: str = "sig5"
    seed: int | None = None                # checkpoint seed to score; None = first seed
    heldout_families: tuple = ()
    K: int | None = None                   # None = estimate from density peaks
    mc_passes: int = 5
    shuffle_seed: int = 0
    epistemic: EpistemicConfig = field(default_factory=EpistemicConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "experiments/default"
    forecaster: str = "st_trans"
    data: DataConfig = field(default_factory=DataConfig)
    runs: tuple = (RunSpec("baseline"), RunSpec("sig5", {"family": "sig5", "scope": "time_joint"}))
    model: STTransConfig = field(default_factory=STTransConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0,)
    horizons_ms: tuple = DEFAULT_HORIZONS_MS
    epu: EpuConfig = field(default_factory=EpuConfig)
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.forecaster not in FORECASTER_KINDS:
            raise ConfigError(f"forecaster must be one of {FORECASTER_KINDS}, got {self.forecaster!r}")
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError(f"run names must be unique, got {names}")


def _build(cls, block, where: str):
    if block is None:
        return cls()
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object, got {type(block).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _tuple_or_none(value):
    return None if value is None else tuple(value)


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    """Turns a JSON document into an ExperimentConfig. Unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")

    data_block = dict(raw.get("data") or {})
    if "families" in data_block:
        data_block["families"] = tuple(data_block["families"])
    data = _build(DataConfig, data_block, "data")

    runs = []
    for i, block in enumerate(raw.get("runs", [asdict(r) for r in ExperimentConfig.runs])):
        block = dict(block)
        if "families" in block:
            block["families"] = _tuple_or_none(block["families"])
        runs.append(_build(RunSpec, block, f"runs[{i}]"))

    epu_block = dict(raw.get("epu") or {})
    epistemic = _build(EpistemicConfig, epu_block.pop("epistemic", None), "epu.epistemic")
    if "heldout_families" in epu_block:
        epu_block["heldout_families"] = tuple(epu_block["heldout_families"])
    epu = replace(_build(EpuConfig, epu_block, "epu"), epistemic=epistemic)

    try:
        return ExperimentConfig(
            out_dir=str(raw.get("out_dir", ExperimentConfig.out_dir)),
            forecaster=str(raw.get("forecaster", ExperimentConfig.forecaster)),
            data=data,
            runs=tuple(runs),
            model=_build(STTransConfig, raw.get("model"), "model"),
            train=_build(TrainConfig, raw.get("train"), "train"),
            seeds=tuple(int(s) for s in raw.get("seeds", ExperimentConfig.seeds)),
            horizons_ms=tuple(raw.get("horizons_ms", DEFAULT_HORIZONS_MS)),
            epu=epu,
            settings=dict(raw.get("settings", {})),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_experiment_config(path: Path | None = None, out: Path | None = None,
                           seed: int | None = None) -> ExperimentConfig:
    """Reads the JSON config (or defaults) and applies flag overrides; flags win."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = parse_experiment_config(raw)

    out_setting = get_setting("POSEUNC_OUT", "")
    if out is not None:
        cfg = replace(cfg, out_dir=str(out))
    elif out_setting and "out_dir" not in raw:
        cfg = replace(cfg, out_dir=out_setting)
    if seed is not None:
        cfg = replace(cfg, seeds=(seed,) + tuple(cfg.seeds[1:]))
    return cfg


def _config_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=str))


# ---------------------------------------------------------------------------
# Paths and shared loaders
# ---------------------------------------------------------------------------

def _out(cfg: ExperimentConfig, *parts: str) -> Path:
    path = Path(cfg.out_dir).joinpath(*parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def checkpoint_path(cfg: ExperimentConfig, run: str, seed: int) -> Path:
    return Path(cfg.out_dir) / "checkpoints" / f"{run}_seed{seed}.safetensors"


def cluster_model_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "epistemic" / "cluster_model.safetensors"


def _write_json(payload, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run_spec(cfg: ExperimentConfig, name: str) -> RunSpec:
    for run in cfg.runs:
        if run.name == name:
            return run
    raise ConfigError(f"no run named {name!r} (have {[r.name for r in cfg.runs]})")


def family_specs(data: DataConfig) -> list[MotionFamilySpec]:
    """Canonical family names ("walking", ...) or integer ids for seeded random families."""
    canonical = {spec.name: spec for spec in canonical_family_specs()}
    specs = []
    for entry in data.families:
        if isinstance(entry, str):
            if entry not in canonical:
                raise ConfigError(f"unknown family {entry!r}; canonical families are {sorted(canonical)}")
            specs.append(canonical[entry])
        elif isinstance(entry, int):
            specs.append(random_family_spec(entry, data.seed))
        else:
            raise ConfigError(f"family entries must be names or integer ids, got {entry!r}")
    ids = [s.family_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate family ids {ids}")
    return specs


def _read_manifest(cfg: ExperimentConfig) -> pd.DataFrame:
    path = Path(cfg.out_dir) / "data" / "manifest.csv"
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `gen` first")
    return pd.read_csv(path)


def load_windows(cfg: ExperimentConfig, split: str, families=None) -> list[ForecastSample]:
    manifest = _read_manifest(cfg)
    rows = manifest[manifest["split"] == split]
    if families is not None:
        rows = rows[rows["family_id"].isin(list(families))]
    data_dir = Path(cfg.out_dir) / "data"
    samples = []
    for name in rows["file"]:
        seq = read_sequence(data_dir / name)
        samples.extend(window(seq, cfg.data.O, cfg.data.T, cfg.data.stride_for(split)))
    if not samples:
        raise ConfigError(f"no {split} windows for families {families}; sequences may be shorter than O+T")
    return samples


def _joint_names(cfg: ExperimentConfig, J: int) -> list[str]:
    try:
        manifest = _read_manifest(cfg)
        names = list(read_sequence(Path(cfg.out_dir) / "data" / manifest["file"].iloc[0]).skeleton.joint_names)
        if len(names) == J:
            return names
    except (MissingArtifactError, IndexError):
        pass
    return [f"joint{j}" for j in range(J)]


def _print_frame(title: str, frame: pd.DataFrame) -> None:
    if is_quiet():
        return
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    Console().print(table)


# ---------------------------------------------------------------------------
# Commands (plain functions; the typer wrappers below only parse flags)
# ---------------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig) -> Path:
    """Writes one poseseq file per (family, sequence) plus data/manifest.csv."""
    data_dir = _out(cfg, "data")
    d = cfg.data
    rows = []
    for spec in family_specs(d):
        total = d.sequences_per_family + d.test_sequences_per_family
        for s in range(total):
            seed = d.seed * 1_000_000 + spec.family_id * 1000 + s
            seq = generate_family(spec, d.num_frames, seed=seed, fps=d.fps)
            name = f"{spec.name or f'family{spec.family_id}'}_{s:03d}.poseseq"
            try:
                write_sequence(seq, data_dir / name)
            except OSError as exc:
                raise ConfigError(f"cannot write {data_dir / name}: {exc}") from exc
            rows.append({
                "file":      name,
                "family_id": spec.family_id,
                "family":    spec.name,
                "source_id": seq.source_id,
                "split":     "train" if s < d.sequences_per_family else "test",
            })
    manifest = pd.DataFrame(rows, columns=["file", "family_id", "family", "source_id", "split"])
    manifest.to_csv(data_dir / "manifest.csv", index=False)
    _write_json(_config_dict(cfg), _out(cfg) / "config.json")
    counts = manifest.groupby("family_id").size().to_dict()
    info(f"data/: {len(manifest)} sequences written, per family {counts}")
    return data_dir


def cmd_train(cfg: ExperimentConfig, run_names: list[str] | None = None) -> list[Path]:
    """forecasters.train per run and seed; one checkpoint and one epoch-log CSV each."""
    runs = [_run_spec(cfg, n) for n in run_names] if run_names else list(cfg.runs)
    threads = int(get_setting("POSEUNC_NUM_THREADS", str(cfg.train.num_threads)))
    logs_dir = _out(cfg, "logs")
    _out(cfg, "checkpoints")

    written = []
    for run in runs:
        dataset = load_windows(cfg, "train", run.families)
        for seed in cfg.seeds:
            train_cfg = replace(cfg.train, seed=seed, prior=run.prior, num_threads=threads)
            ckpt = train(cfg.forecaster, dataset, train_cfg,
                         cfg.model if cfg.forecaster == "st_trans" else None)
            path = checkpoint_path(cfg, run.name, seed)
            save_checkpoint(ckpt, path)
            ckpt.epoch_frame().to_csv(logs_dir / f"{run.name}_seed{seed}.csv", index=False)
            info(f"{path.name}: final val A-MPJPE {ckpt.final_val_a_mpjpe:.2f} mm")
            written.append(path)
    return written


def _load_run_checkpoints(cfg: ExperimentConfig, run: str) -> list:
    return [load_checkpoint(checkpoint_path(cfg, run, seed)) for seed in cfg.seeds]


def cmd_eval(cfg: ExperimentConfig) -> dict:
    """
    Per run: seed-averaged horizon table, A-MPJPE mean/std over seeds, std of
    the final validation A-MPJPE, AP-MPJPE over all seed pairs. Gain tables
    compare every run against the first run trained without a prior.
    """
    reports = _out(cfg, "reports")
    test = load_windows(cfg, "test")
    observed, future = stack_samples(test)
    fps = cfg.data.fps

    tables: dict[str, HorizonTable] = {}
    summary = {}
    for run in cfg.runs:
        ckpts = _load_run_checkpoints(cfg, run.name)
        predictions = [forecast(c, observed).y_hat.numpy() for c in ckpts]
        per_seed = [horizon_table_from_arrays(future, p, cfg.horizons_ms, fps) for p in predictions]
        table = HorizonTable(
            horizons_ms=tuple(cfg.horizons_ms),
            mpjpe_mm=tuple(float(v) for v in np.mean([t.mpjpe_mm for t in per_seed], axis=0)),
            num_samples=len(test),
        )
        tables[run.name] = table
        frame = table.to_frame()
        frame.to_csv(reports / f"horizon_{run.name}.csv", index=False)
        _write_json(frame.to_dict(orient="records"), reports / f"horizon_{run.name}.json")

        per_frame = np.mean([mpjpe(future, p).mean(axis=0) for p in predictions], axis=0)   # (T,)
        a_values = [a_mpjpe(future, p) for p in predictions]
        final_val = [c.final_val_a_mpjpe for c in ckpts]
        summary[run.name] = {
            "prior":                 None if run.prior is None else run.prior.get("family"),
            "seeds":                 list(cfg.seeds),
            "a_mpjpe_per_seed":      a_values,
            "a_mpjpe_mean":          float(np.mean(a_values)),
            "a_mpjpe_std":           float(np.std(a_values)),
            "final_val_a_mpjpe_std": float(np.std(final_val)),
            "mpjpe_short_mm":        float(per_frame[:_SHORT_FRAMES].mean()),
            "mpjpe_last_mm":         float(per_frame[-1]),
            "ap_mpjpe":              ap_mpjpe(predictions) if len(predictions) > 1 else None,
            "ap_pairs":              len(list(combinations(range(len(predictions)), 2))),
        }
        _print_frame(f"MPJPE (mm) - {run.name}", frame)

    baseline = next((r.name for r in cfg.runs if r.prior is None), None)
    if baseline is None:
        warn("no run without a prior; gain tables skipped")
    else:
        for name, table in tables.items():
            if name == baseline:
                continue
            gains = gain_table(tables[baseline], table)
            gains.to_csv(reports / f"gain_{name}.csv", index=False)
            summary[name]["gain_short_pct"] = float(
                (summary[baseline]["mpjpe_short_mm"] - summary[name]["mpjpe_short_mm"])
                / summary[baseline]["mpjpe_short_mm"] * 100.0
            )
            summary[name]["gain_last_pct"] = float(
                (summary[baseline]["mpjpe_last_mm"] - summary[name]["mpjpe_last_mm"])
                / summary[baseline]["mpjpe_last_mm"] * 100.0
            )
            _print_frame(f"Gain vs {baseline} - {name}", gains)

    _write_json(summary, reports / "eval_summary.json")
    return summary


def _in_families(cfg: ExperimentConfig) -> tuple | None:
    run = _run_spec(cfg, cfg.epu.run)
    if run.families is not None:
        return tuple(run.families)
    if cfg.epu.heldout_families:
        ids = [s.family_id for s in family_specs(cfg.data)]
        return tuple(i for i in ids if i not in cfg.epu.heldout_families)
    return None


def cmd_epu_fit(cfg: ExperimentConfig):
    """Autoencoder on the run's training futures, K by density peaks (unless fixed), DEC."""
    out = _out(cfg, "epistemic")
    ecfg = cfg.epu.epistemic
    samples = load_windows(cfg, "train", _in_families(cfg))
    motions = np.stack([s.future for s in samples])
    family = np.array([-1 if s.family_label is None else s.family_label for s in samples])

    ae = pretrain_autoencoder(motions, ecfg, seed=ecfg.seed)
    if cfg.epu.K is None:
        K, stats = estimate_k(encode_motions(ae, motions), ecfg)
        pd.DataFrame({
            "x":     stats.embedding_2d[:, 0],
            "y":     stats.embedding_2d[:, 1],
            "rho":   stats.rho,
            "delta": stats.delta,
            "gamma": stats.gamma,
        }).to_csv(out / "density_peaks.csv", index=False)
        d_c = stats.d_c
    else:
        K, d_c = int(cfg.epu.K), None
    info(f"Estimated K = {K}")

    model = fit_clusters(ae, motions, K, ecfg.cluster_lambda, ecfg)
    save_cluster_model(model, cluster_model_path(cfg))
    _write_json({
        "K":                     K,
        "d_c":                   d_c,
        "lambda":                ecfg.cluster_lambda,
        "num_motions":           int(len(motions)),
        "autoencoder_mse_start": model.autoencoder.baseline_loss,
        "autoencoder_mse_final": model.autoencoder.final_loss,
        "purity_kmeans_init":    cluster_purity(family, model.init_labels),
        "purity_final":          cluster_purity(family, model.train_labels),
        "latent_scale":          model.latent_scale,
        "train_epu":             epu_score(model, motions).epu,
    }, out / "fit_summary.json")
    return model


def _scoring_checkpoint(cfg: ExperimentConfig):
    seed = cfg.seeds[0] if cfg.epu.seed is None else cfg.epu.seed
    return load_checkpoint(checkpoint_path(cfg, cfg.epu.run, seed))


def cmd_epu_score(cfg: ExperimentConfig):
    """
    EpU of the forecaster's test-set forecasts, pooled and per motion family,
    with each family's A-MPJPE next to its EpU.
    """
    out = _out(cfg, "epistemic")
    model = load_cluster_model(cluster_model_path(cfg))
    ckpt = _scoring_checkpoint(cfg)
    test = load_windows(cfg, "test")
    observed, future = stack_samples(test)
    y_hat = forecast(ckpt, observed).y_hat.numpy()
    report = epu_score(model, y_hat)

    scores = pd.DataFrame({
        "source_id": [s.source_id for s in test],
        "family_id": [s.family_label for s in test],
        "cluster":   cluster_labels(model, y_hat),
        "entropy":   report.per_sample_entropy,
        "a_mpjpe":   mpjpe(future, y_hat).mean(axis=-1),
    })
    scores.to_csv(out / "epu_scores.csv", index=False)
    by_family = (scores.groupby("family_id")
                 .agg(epu=("entropy", "mean"), a_mpjpe=("a_mpjpe", "mean"), n=("entropy", "size"))
                 .reset_index())
    by_family.to_csv(out / "epu_by_family.csv", index=False)
    _write_json(report.to_json(), out / "epu_report.json")
    info(f"EpU = {report.epu:.4f} over {report.n} forecasts (K={model.K})")
    _print_frame("EpU by family", by_family)
    return report


def cmd_epu_auroc(cfg: ExperimentConfig) -> dict:
    """
    Selective classification: in-distribution test windows are negatives,
    held-out families positives. EpU is compared with MC-dropout and the
    seed ensemble when those baselines apply.
    """
    if not cfg.epu.heldout_families:
        raise ConfigError("epu.heldout_families must name at least one family for auroc")
    out = _out(cfg, "epistemic")
    model = load_cluster_model(cluster_model_path(cfg))
    ckpt = _scoring_checkpoint(cfg)
    obs_in, _ = stack_samples(load_windows(cfg, "test", _in_families(cfg)))
    obs_out, _ = stack_samples(load_windows(cfg, "test", cfg.epu.heldout_families))

    ours_in = epu_score(model, forecast(ckpt, obs_in).y_hat.numpy())
    ours_out = epu_score(model, forecast(ckpt, obs_out).y_hat.numpy())
    score = auroc(ours_in.per_sample_entropy, ours_out.per_sample_entropy)
    roc_points(ours_in.per_sample_entropy, ours_out.per_sample_entropy).to_csv(out / "roc_points.csv", index=False)

    rows = [{"method": "epu", "auroc": score, "forward_passes": 1}]
    if ckpt.model_config is not None and ckpt.model_config.dropout_rate > 0:
        k = cfg.epu.mc_passes
        mc_in = mc_dropout_uncertainty(ckpt, obs_in, k, seed=cfg.epu.shuffle_seed)
        mc_out = mc_dropout_uncertainty(ckpt, obs_out, k, seed=cfg.epu.shuffle_seed)
        rows.append({"method": f"mc_dropout_{k}", "auroc": auroc(mc_in.per_sample, mc_out.per_sample),
                     "forward_passes": mc_in.forward_passes})
    if len(cfg.seeds) > 1:
        members = _load_run_checkpoints(cfg, cfg.epu.run)
        ens_in = ensemble_uncertainty(members, obs_in)
        ens_out = ensemble_uncertainty(members, obs_out)
        rows.append({"method": f"ensemble_{len(members)}", "auroc": auroc(ens_in.per_sample, ens_out.per_sample),
                     "forward_passes": ens_in.forward_passes})

    comparison = pd.DataFrame(rows, columns=["method", "auroc", "forward_passes"])
    comparison.to_csv(out / "auroc_comparison.csv", index=False)
    result = {
        "auroc":     score,
        "epu_in":    ours_in.epu,
        "epu_out":   ours_out.epu,
        "n_in":      ours_in.n,
        "n_out":     ours_out.n,
        "heldout":   list(cfg.epu.heldout_families),
        "baselines": comparison.to_dict(orient="records"),
    }
    _write_json(result, out / "auroc.json")
    _print_frame("Selective classification", comparison)
    return result


def cmd_epu_ood(cfg: ExperimentConfig) -> dict:
    """EpU of in-distribution forecasts as produced, frame-shuffled and joint-shuffled."""
    out = _out(cfg, "epistemic")
    model = load_cluster_model(cluster_model_path(cfg))
    ckpt = _scoring_checkpoint(cfg)
    test = load_windows(cfg, "test", _in_families(cfg))
    observed, _ = stack_samples(test)
    y_hat = forecast(ckpt, observed).y_hat.numpy()

    as_samples = [ForecastSample(observed[i], y_hat[i], test[i].source_id) for i in range(len(test))]
    seed = cfg.epu.shuffle_seed
    frames = np.stack([shuffle_frames(s, seed + i).future for i, s in enumerate(as_samples)])
    joints = np.stack([shuffle_joints(s, seed + i).future for i, s in enumerate(as_samples)])

    triple = {
        "normal":          epu_score(model, y_hat).epu,
        "frames_shuffled": epu_score(model, frames).epu,
        "joints_shuffled": epu_score(model, joints).epu,
    }
    _write_json(triple, out / "ood.json")
    frame = pd.DataFrame({"condition": list(triple), "epu": list(triple.values())})
    frame.to_csv(out / "ood.csv", index=False)
    _print_frame("EpU under shuffling", frame)
    return triple


def cmd_report(cfg: ExperimentConfig) -> list[Path]:
    """
    Learned u_t^j curves per run that carries a prior (first seed):
    uncertainty_<run>.csv (t, joint, u), prior_comparison.csv (mean over
    joints per t, one column per run) and joint_groups.csv (hands vs legs).
    """
    reports = _out(cfg, "reports")
    written, comparison, groups = [], {}, []
    for run in cfg.runs:
        if run.prior is None:
            continue
        ckpt = load_checkpoint(checkpoint_path(cfg, run.name, cfg.seeds[0]))
        if ckpt.prior is None:
            raise MissingArtifactError(f"{run.name}: checkpoint carries no prior")
        grid = prior_grid(ckpt.prior).detach().double().numpy()          # (T, J)
        T, J = grid.shape
        names = _joint_names(cfg, J)
        curves = pd.DataFrame({
            "t":     np.repeat(np.arange(1, T + 1), J),
            "joint": names * T,
            "u":     grid.reshape(-1),
        })
        path = reports / f"uncertainty_{run.name}.csv"
        curves.to_csv(path, index=False)
        written.append(path)
        comparison[f"{run.name}:{ckpt.prior.label}"] = grid.mean(axis=1)

        for group, keys in _JOINT_GROUPS.items():
            members = [j for j, n in enumerate(names) if any(k in n for k in keys)]
            if members:
                for t in range(T):
                    groups.append({"run": run.name, "group": group, "t": t + 1,
                                   "u": float(grid[t, members].mean())})

    if not written:
        raise MissingArtifactError("no configured run carries a prior; nothing to report")
    T = len(next(iter(comparison.values())))
    pd.DataFrame({"t": np.arange(1, T + 1), **comparison}).to_csv(reports / "prior_comparison.csv", index=False)
    pd.DataFrame(groups, columns=["run", "group", "t", "u"]).to_csv(reports / "joint_groups.csv", index=False)
    info(f"reports/: {len(written)} uncertainty curve files")
    return written


# ---------------------------------------------------------------------------
# typer wiring
# ---------------------------------------------------------------------------

def _guarded(fn):
    """Maps toolkit errors to exit codes: ConfigError -> 2, anything else -> 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            warn(f"configuration error: {exc}")
            raise typer.Exit(EXIT_CONFIG)
        except PoseUncertaintyError as exc:
            warn(f"{type(exc).__name__}: {exc}")
            raise typer.Exit(EXIT_RUNTIME)
    return wrapper


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[Optional[Path], typer.Option("--config", help="Experiment JSON.")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Experiment directory.")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", help="Overrides the first seed.")] = None,
    quiet: Annotated[bool, typer.Option("--quiet", help="Only warnings.")] = False,
) -> None:
    if quiet:
        set_quiet(True)
    if config is not None:
        os.environ["POSEUNC_CONFIG"] = str(config)
    try:
        ctx.obj = load_experiment_config(config, out=out, seed=seed)
    except ConfigError as exc:
        warn(f"configuration error: {exc}")
        raise typer.Exit(EXIT_CONFIG)


@app.command("gen")
@_guarded
def gen_command(ctx: typer.Context) -> None:
    """Generate the synthetic motion-family dataset."""
    cmd_gen(ctx.obj)


@app.command("train")
@_guarded
def train_command(
    ctx: typer.Context,
    run: Annotated[Optional[list[str]], typer.Option("--run", help="Restrict to these runs.")] = None,
) -> None:
    """Train every configured run for every seed."""
    cmd_train(ctx.obj, run)


@app.command("eval")
@_guarded
def eval_command(ctx: typer.Context) -> None:
    """Horizon tables, gains, AP-MPJPE."""
    cmd_eval(ctx.obj)


@epu_app.command("fit")
@_guarded
def epu_fit_command(ctx: typer.Context) -> None:
    cmd_epu_fit(ctx.obj)


@epu_app.command("score")
@_guarded
def epu_score_command(ctx: typer.Context) -> None:
    cmd_epu_score(ctx.obj)


@epu_app.command("auroc")
@_guarded
def epu_auroc_command(ctx: typer.Context) -> None:
    cmd_epu_auroc(ctx.obj)


@epu_app.command("ood")
@_guarded
def epu_ood_command(ctx: typer.Context) -> None:
    cmd_epu_ood(ctx.obj)


@app.command("report")
@_guarded
def report_command(ctx: typer.Context) -> None:
    """Learned uncertainty curves as CSV."""
    cmd_report(ctx.obj)


if __name__ == "__main__":
    app()
