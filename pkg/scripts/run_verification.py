"""Run the default verification campaign and the loosened-bound counterexample.

The first should exit 0, the second 1 (its bound violations are expected).
"""
import sys
from pathlib import Path

from fakd.cli import cmd_verify

ROOT = Path(__file__).resolve().parent.parent
OUT = ROOT / "out"

if __name__ == "__main__":
    ok = cmd_verify(ROOT / "configs/verify_default.json", OUT / "verify") == 0
    print("default campaign:", "exit 0" if ok else "FAILED")
    loose = cmd_verify(ROOT / "configs/verify_loose_denominator.json", OUT / "verify_loose")
    print("loosened denominator:", "violations caught (exit 1)" if loose == 1 else f"exit {loose}")
    sys.exit(0 if ok and loose == 1 else 1)
