#!/usr/bin/env python3
"""Run the three ablation grids and emit one long-format CSV per sweep.

* temperature grid {1, 5, 10, 15, 20} for the main-region LD scheme,
* VLR range gamma grid {0, 0.25, 0.5, 0.75, 1},
* ambiguity grid {0 .. 1} comparing baseline, LD, and teacher-bounded
  regression.

Outputs land under out/sweeps; extra CLI flags are forwarded.
"""

import sys

from locdistill.cli import main

SWEEPS = (
    ("tau", "[1, 5, 10, 15, 20]", "[ld_main]"),
    ("gamma_vlr", "[0.0, 0.25, 0.5, 0.75, 1.0]", "[ld_main_vlr]"),
    ("ambiguity", "[0.0, 0.25, 0.5, 0.75, 1.0]", "[baseline, ld_main_vlr, tbr]"),
)

if __name__ == "__main__":
    for param, values, schemes in SWEEPS:
        code = main([
            "-o", "out/sweeps",
            "--set", f"sweep.param={param}",
            "--set", f"sweep.values={values}",
            "--set", f"sweep.schemes={schemes}",
            *sys.argv[1:],
            "sweep",
        ])
        if code != 0:
            sys.exit(code)
    sys.exit(0)
