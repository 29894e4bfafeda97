"""Compare the compiled and pure-numpy decode kernels.

Each backend runs in its own interpreter because the choice is made at
import time from ``RESETOX_DISABLE_NUMBA``.  Both runs translate the same
held-out sentences with plain beam search; the script checks that the
outputs agree and reports sentences per second.

    python benchmarks/bench_decode.py [--sentences 50] [--beam 5]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
from resetox import _accel
from resetox.decoding import beam_search
from resetox.fixture import reference

n, k = int(sys.argv[1]), int(sys.argv[2])
ref = reference()
srcs = [ref.vocab.encode(p.src) for p in ref.corpus.test[:n]]
beam_search(srcs[0], ref.params, k=k)  # warm-up / compile
t0 = time.perf_counter()
outs = [beam_search(s, ref.params, k=k).tokens for s in srcs]
dt = time.perf_counter() - t0
print(json.dumps({"backend": _accel.backend(), "seconds": dt, "outputs": outs}))
"""


def run(disabled: bool, n: int, k: int) -> dict:
    env = dict(os.environ, RESETOX_DISABLE_NUMBA="1" if disabled else "0")
    proc = subprocess.run([sys.executable, "-c", WORKER, str(n), str(k)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sentences", type=int, default=50)
    ap.add_argument("--beam", type=int, default=5)
    args = ap.parse_args()

    fast = run(False, args.sentences, args.beam)
    slow = run(True, args.sentences, args.beam)
    same = fast["outputs"] == slow["outputs"]
    for r in (fast, slow):
        print(f"{r['backend']:>6}: {r['seconds']:.3f} s  ({args.sentences / r['seconds']:.1f} sentences/s)")
    print(f"speedup: {slow['seconds'] / fast['seconds']:.2f}x  identical outputs: {same}")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
