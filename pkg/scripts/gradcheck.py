"""Finite-difference check of every parameter gradient of the full loss on the 4-node toy."""

import sys
import time

from pgits.gradcheck import run_gradcheck

TOL = 1e-3

if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    t0 = time.perf_counter()
    res = run_gradcheck(seed=seed)
    for name, err in sorted(res.per_param.items(), key=lambda kv: -kv[1]):
        print(f"{name:24s} {err:.2e}")
    print(f"max {res.max_rel_error:.2e} ({res.worst}) over {res.n_checked} entries "
          f"in {time.perf_counter() - t0:.2f}s")
    sys.exit(0 if res.max_rel_error < TOL else 1)
