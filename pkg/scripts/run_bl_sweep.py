"""Background-level sweep of the payment pipeline on the desk grid scenario.

Produces out/bl_sweep/sweep_bl.csv with one row per BL value; the k_total
column exhibits the interior-minimum (U-shape) pattern.
"""

import sys

from modalpay.cli import main

if __name__ == "__main__":
    sys.exit(
        main(
            [
                "payment",
                "--sweep",
                "bl=0.1:1.1:0.2",
                "--out",
                "out/bl_sweep",
                *sys.argv[1:],
            ]
        )
    )
