"""Paired variant deltas under overrides of the reference config.

Each argument is a JSON object merged into the reference config, e.g.

    python scripts/explore_regimes.py '{"data": {"n_train": 5}}' '{"student": {"extractor": "mlp", "hidden": 32}}'

Variant lambda0 can be overridden for all augmented variants with the
extra key "lambda0". Prints mean mIoU differences (in points) against
no-distill and between each augmented variant and its base.
"""
import json
import sys
import time
from pathlib import Path

import numpy as np

from fakd.config import ExperimentConfig, from_dict, to_plan, validate
from fakd.harness import NO_DISTILL, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def run(override: dict) -> str:
    raw = json.loads((ROOT / "configs/reference.json").read_text())
    lam = override.pop("lambda0", None)
    raw = merge(raw, override)
    if lam is not None:
        for v in raw["variants"]:
            if v.get("variant", "").startswith("AUG_"):
                v["lambda0"] = lam
    cfg: ExperimentConfig = from_dict(ExperimentConfig, raw)
    validate(cfg)
    t0 = time.perf_counter()
    rows = run_experiment(to_plan(cfg))
    m = {}
    for r in rows:
        m.setdefault(r.variant, []).append(r.result.mIoU)
    m = {k: 100 * np.array(v) for k, v in m.items()}
    base = m[NO_DISTILL]
    parts = [f"no-distill {base.mean():.2f}"]
    parts += [f"{k} {(v - base).mean():+.2f}" for k, v in m.items() if k != NO_DISTILL]
    for aug, plain in (("AUG_PD", "PD"), ("AUG_CWD", "CWD")):
        if aug in m and plain in m:
            parts.append(f"{aug}-{plain} {(m[aug] - m[plain]).mean():+.2f}")
    return f"{json.dumps(override)} lambda0={lam} | " + "  ".join(parts) + \
        f"  [{time.perf_counter() - t0:.0f}s]"


if __name__ == "__main__":
    for arg in sys.argv[1:] or ["{}"]:
        print(run(json.loads(arg)), flush=True)
