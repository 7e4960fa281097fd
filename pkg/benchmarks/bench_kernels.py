"""
Compare the numba and numpy backends.

Each backend runs in its own interpreter (the backend is fixed at import
time by ``CHX_BACKEND``). Reported: the delay-scan kernel on a 281-bin band
with 4096 candidates, and a full VSS L=10 / DOA L=3 estimation on the
cylinder64 array.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from chx import _kernels
from chx.harness import ExperimentConfig, calibration_pattern
from chx.core import normalize, select_training_band
from chx.sage import SageConfig, sage_run
from chx.synthesis import scenario_preset, synth_channel_doa
from chx.array import geometry_preset

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
c = rng.standard_normal(281) + 1j * rng.standard_normal(281)
taus = np.arange(4096) / (4096 * 125e3)

def best(fn):
    fn()                                   # warm up (JIT compilation, caches)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)

out = {"backend": _kernels.BACKEND}
out["trig_poly_s"] = best(lambda: _kernels.trig_poly(c, 125e3, taus))
fine = taus[100] + np.linspace(-1, 1, 21) * (taus[1] / 10)
out["trig_poly_refine_s"] = best(lambda: _kernels.trig_poly(c, 125e3, fine))

cfg = ExperimentConfig(models=("vss", "doa"))
pat = calibration_pattern(cfg)
sc = scenario_preset("NlosRich", 64, 1)
h_n, _ = normalize(synth_channel_doa(sc.paths, geometry_preset("cylinder64"), cfg.grid))
h_u = select_training_band(h_n, cfg.band)
vss = SageConfig.default("vss", 10, h_u.grid)
doa = SageConfig.default("doa", 3, h_u.grid)
out["sage_vss_L10_s"] = best(lambda: sage_run(h_u, vss))
out["sage_doa_L3_s"] = best(lambda: sage_run(h_u, doa, pat))
print(json.dumps(out))
"""


def run(backend: str, repeat: int) -> dict:
    env = {**os.environ, "CHX_BACKEND": backend}
    r = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                       capture_output=True, text=True, check=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--repeat", type=int, default=5, help="timed repetitions (best is kept)")
    args = ap.parse_args(argv)
    res = {b: run(b, args.repeat) for b in ("numpy", "numba")}
    keys = [k for k in res["numpy"] if k != "backend"]
    print(f"{'case':<22}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for k in keys:
        a, b = res["numpy"][k], res["numba"][k]
        print(f"{k[:-2]:<22}{a * 1e3:>10.2f}ms{b * 1e3:>10.2f}ms{a / b:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
