"""The whole command-line protocol in one script, at toy scale.

Equivalent shell session (full scale would drop the --set overrides):

    ctadapt generate   --out work
    ctadapt train-base --out work
    ctadapt experiment Exp1 --out work
    ...
    ctadapt experiment Exp6 --out work
    ctadapt report work/reports/Exp*.json --out work

Everything lands under ./demo-workspace: data/ (PGM slices + manifests),
models/ (three checkpoints + cascade metadata), reports/ (one JSON per
experiment, JSONL event logs for the online runs, summary table + CSV).
"""

import json
import shutil
from pathlib import Path

from ctadapt.cli import main

WORKSPACE = Path(__file__).resolve().parent / "demo-workspace"

# Half-scale counts; stage B needs roughly a hundred slice images to
# train cleanly, so the sick-patient counts stay close to full scale.
TINY_COUNTS = {
    "train": {"Healthy": 12, "Covid": 10, "Cap": 10},
    "val": {"Healthy": 6, "Covid": 5, "Cap": 5},
    "test1": {"Healthy": 4, "Covid": 4, "Cap": 4},
    "test2": {"Healthy": 10, "Covid": 10},
    "test3": {"Healthy": 4, "Covid": 4, "Cap": 4},
}

TINY = [
    "--set", "image_side=24",
    "--set", "slices_per_patient=[8, 10]",
    "--set", "counts=" + json.dumps(TINY_COUNTS),
    "--set", 'shifts={"test2": {"noise_sigma": 0.22}}',
    "--seed", "5",
]


def run(argv):
    print(f"$ ctadapt {' '.join(argv)}")
    code = main([*argv, "--out", str(WORKSPACE), *TINY])
    assert code == 0, f"command failed with exit code {code}"


def main_demo():
    if WORKSPACE.exists():
        shutil.rmtree(WORKSPACE)

    run(["generate"])
    run(["train-base"])
    for exp in ("Exp1", "Exp2", "Exp3", "Exp4", "Exp5", "Exp6"):
        run(["experiment", exp])
    reports = sorted(str(p) for p in (WORKSPACE / "reports").glob("Exp?.json"))
    run(["report", *reports])

    summary = (WORKSPACE / "reports" / "summary.csv").read_text()
    assert summary.count("\n") == 7  # header + six experiment rows
    print(f"\nartifacts under {WORKSPACE}/")


if __name__ == "__main__":
    main_demo()
