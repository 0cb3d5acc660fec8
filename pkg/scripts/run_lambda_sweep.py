"""AUG_CWD over lambda0 in {0.5, 1.0, 1.5, 2.5} on the reference task."""
import sys
from pathlib import Path

from fakd.cli import cmd_sweep
from fakd.harness import mean_miou, read_results_csv

ROOT = Path(__file__).resolve().parent.parent
VALUES = [0.5, 1.0, 1.5, 2.5]

if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "out/lambda_sweep"
    if cmd_sweep(ROOT / "configs/lambda_sweep.json", "lambda0", VALUES, out) != 0:
        sys.exit(1)
    rows = read_results_csv(out / "sweep_results.csv")
    per = {v: mean_miou(rows, "AUG_CWD", v) for v in VALUES}
    print()
    for v, m in per.items():
        print(f"lambda0={v:<4g} mIoU {100 * m:.2f}")
    print("minimum at", min(per, key=per.get))
