"""Run every stage with the default (or overridden) config and print the report.

    python scripts/run_pipeline.py --out runs/default [key=value ...]
"""

import json
import sys
import time
from pathlib import Path

from stepwise_dpo.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    out = args[args.index("--out") + 1] if "--out" in args else "runs/default"
    if "--out" not in args:
        args += ["--out", out]
    t0 = time.perf_counter()
    code = main(["run", *args])
    if code == 0:
        print(json.dumps(json.loads((Path(out) / "report.json").read_text())["results"], indent=1))
        print(f"pipeline finished in {time.perf_counter() - t0:.1f}s")
    sys.exit(code)
