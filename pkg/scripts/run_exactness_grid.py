"""PT relaxation exactness over a (line capacity, line cost, BL) grid.

Produces out/exactness_grid.csv with one E/N row per cell, mirroring the
abundant-vs-scarce capacity pattern.
"""

import json
import sys
import tempfile

from modalpay.cli import main

GRID = {
    "cap_grid": [900.0, 300.0, 100.0, 30.0],
    "cost_grid": [160.0, 320.0, 640.0],
    "bl_grid": [0.1, 0.5, 0.9],
}

if __name__ == "__main__":
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(GRID, fh)
        cfg = fh.name
    sys.exit(
        main(
            [
                "exactness-grid",
                "--config",
                cfg,
                "--out",
                "out/exactness_grid.csv",
                *sys.argv[1:],
            ]
        )
    )
