"""Distil every variant on the reference task and print the ordering checks."""
import sys
from pathlib import Path

from fakd.cli import cmd_distill
from fakd.harness import NO_DISTILL, mean_miou, read_results_csv

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "out/reference"
    if cmd_distill(ROOT / "configs/reference.json", out) != 0:
        sys.exit(1)
    rows = read_results_csv(out / "results.csv")
    m = {v: mean_miou(rows, v) for v in (NO_DISTILL, "PD", "AUG_PD", "CWD", "AUG_CWD")}
    print()
    for a, b in [("AUG_PD", "PD"), ("AUG_CWD", "CWD")] + [(v, NO_DISTILL) for v in
                                                         ("PD", "AUG_PD", "CWD", "AUG_CWD")]:
        print(f"{a:>8} - {b:<10} {100 * (m[a] - m[b]):+6.2f}  {'ok' if m[a] >= m[b] else 'VIOLATED'}")
