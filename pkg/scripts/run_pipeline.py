"""Run every pipeline stage for one config and print per-stage wall time.

    python scripts/run_pipeline.py configs/acceptance.json --out runs/acceptance
"""
import argparse
import json
import sys
import time

from velopref.cli import main
from velopref.pipeline import STAGES


def run(config: str, out: str | None, seed: int | None, threads: int) -> float:
    extra = []
    if out is not None:
        extra += ["--set", f"output_dir={json.dumps(out)}"]
    if seed is not None:
        extra += ["--seed", str(seed)]
    total = 0.0
    for stage in STAGES:
        start = time.perf_counter()
        args = [stage, "--config", config, *extra]
        if stage == "explain":
            args += ["--threads", str(threads)]
        code = main(args)
        elapsed = time.perf_counter() - start
        total += elapsed
        print(f"{stage:12s} exit {code}  {elapsed:7.1f} s", file=sys.stderr)
        if code != 0:
            raise SystemExit(code)
    print(f"{'total':12s}         {total:7.1f} s", file=sys.stderr)
    return total


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    a = p.parse_args()
    run(a.config, a.out, a.seed, a.threads)
