"""Build a family of leaves for a configuration and print a short table.

    python scripts/run_family.py configs/conformal_default.json
"""

import sys

import numpy as np

from pmcspheres import reduction
from pmcspheres.cli import ProblemConfig


def main(path: str) -> int:
    config = ProblemConfig.load(path)
    problem = config.problem()
    decision = reduction.select_mode(problem, config.mode, config.settings, config.rho)
    fam = reduction.build_family(problem, config.r_grid.values(), decision.mode, config.grid(), config.settings,
                                 config.rho)
    print(f"mode {decision.mode}, {len(fam.leaves)} of {config.r_grid.count} leaves")
    print(f"{'r':>10} {'|tau|':>12} {'residual':>10} {'inner':>6} {'outer':>6}")
    for lf in fam.leaves:
        print(f"{lf.r:10.4g} {np.linalg.norm(lf.tau_bar):12.4e} {lf.residual_sup:10.2e} "
              f"{lf.inner_total:6d} {lf.outer_iters:6d}")
    if fam.failure:
        print(f"stopped at r = {fam.failed_r:g}: {fam.failure}")
    return 0 if fam.complete else 2


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "configs/conformal_default.json"))
