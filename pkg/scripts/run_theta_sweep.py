"""Regularization sweep: optimality loss vs. recovered-price magnitude.

Produces out/theta_sweep/sweep_theta.csv; the optimality_loss column is
nonincreasing in theta.
"""

import sys

from modalpay.cli import main

if __name__ == "__main__":
    sys.exit(
        main(
            [
                "payment",
                "--sweep",
                "theta=0.1,0.5,2,10",
                "--out",
                "out/theta_sweep",
                *sys.argv[1:],
            ]
        )
    )
