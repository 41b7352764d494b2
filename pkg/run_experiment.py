"""
Runs the whole experiment, one cli.py stage after another:
gen -> train -> eval -> epu fit -> epu score -> epu auroc -> epu ood -> report.

    python run_experiment.py [configs/desk_scale.json]
"""
import subprocess
import sys
import time
from pathlib import Path

_DEFAULT_CONFIG = "configs/desk_scale.json"

_PIPELINE = [
    (["gen"],            "Motion families    → data/*.poseseq"),
    (["train"],          "Forecaster training → checkpoints/, logs/"),
    (["eval"],           "Horizon evaluation  → reports/horizon_*.csv"),
    (["epu", "fit"],     "Motion clustering   → epistemic/cluster_model"),
    (["epu", "score"],   "EpU scoring         → epistemic/epu_*.csv"),
    (["epu", "auroc"],   "Selective classif.  → epistemic/auroc.json"),
    (["epu", "ood"],     "OOD shuffles        → epistemic/ood.json"),
    (["report"],         "Uncertainty curves  → reports/uncertainty_*.csv"),
]

_TOTAL = len(_PIPELINE)
_CLI   = Path(__file__).resolve().parent / "cli.py"


def _banner(config: str) -> None:
    print()
    print("=" * 65)
    print("       POSE UNCERTAINTY LAB")
    print("       aleatoric priors  ·  epistemic clustering")
    print(f"       config: {config}")
    print("=" * 65)
    print()


def _step_header(index: int, stage: str, label: str) -> None:
    print()
    print(f"  ┌─────────────────────────────────────────────────────┐")
    print(f"  │  [{index}/{_TOTAL}]  {label:<47}│")
    print(f"  │        cli.py {stage:<44}│")
    print(f"  └─────────────────────────────────────────────────────┘")


def _failure_banner(stage: str, returncode: int, index: int) -> None:
    kind = "configuration error" if returncode == 2 else "stage failed"
    print()
    print(f"  ╔══════════════════════════════════════════════════╗")
    print(f"  ║  CRITICAL ERROR: {kind:<32}║")
    print(f"  ║  Stage    : {stage:<37}║")
    print(f"  ║  Exit code: {returncode:<37}║")
    print(f"  ║  Pipeline halted at step [{index}/{_TOTAL}].{'':<21}║")
    print(f"  ╚══════════════════════════════════════════════════╝")
    print()


def _success_banner(elapsed: float) -> None:
    minutes, seconds = divmod(int(elapsed), 60)
    print()
    print("=" * 65)
    print()
    print(f"  ✅  ALL {_TOTAL} PIPELINE STAGES COMPLETED SUCCESSFULLY")
    print()
    print(f"  ⏱   Runtime →  {minutes}m {seconds}s")
    print()
    print("=" * 65)
    print()


def main(argv: list[str] | None = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    config = argv[0] if argv else _DEFAULT_CONFIG
    _banner(config)
    start_time = time.time()

    for idx, (stage, label) in enumerate(_PIPELINE, start=1):
        stage_name = " ".join(stage)
        _step_header(idx, stage_name, label)
        step_start = time.time()
        try:
            subprocess.run(
                [sys.executable, str(_CLI), "--config", config, *stage],
                check=True,
            )
            print(f"\n  ✔  Done in {time.time() - step_start:.1f}s\n")
        except subprocess.CalledProcessError as exc:
            _failure_banner(stage_name, exc.returncode, idx)
            sys.exit(exc.returncode)

    _success_banner(time.time() - start_time)


if __name__ == "__main__":
    main()
