"""Small-r remainders of the H, F and dF expansions on the conformal metric.

    python scripts/expansion_slopes.py [epsilon]
"""

import sys

from pmcspheres import exprfield, meancurv
from pmcspheres.geometry import conformal
from pmcspheres.sphereharm import SphereGrid


def main(epsilon: float) -> int:
    radii = [0.1, 0.05, 0.025, 0.0125]
    for dim in (2, 3):
        f = " + ".join(["1"] + [f"x{k + 1}^2" for k in range(dim)])
        problem = meancurv.PrescribedProblem(conformal(dim, epsilon), exprfield.parse(f, dim))
        rep = meancurv.expansion_residuals(problem, radii, SphereGrid(dim - 1, 16))
        print(f"dim {dim}, f = {f}")
        for name, rem in rep.remainders.items():
            cells = " ".join(f"{x:10.3e}" for x in rem)
            print(f"  {name:>2}: {cells}   slope {rep.slopes[name]:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(float(sys.argv[1]) if len(sys.argv) > 1 else 0.5))
