#!/usr/bin/env python3
"""Compare every training scheme on the default high-ambiguity config.

Writes metrics.csv, summary.json, per-run traces, and the generated
datasets under out/experiment. Extra CLI flags are forwarded, e.g.:

    python3 scripts/run_default_experiment.py --seed 7 --set harness.epochs=300
"""

import sys

from locdistill.cli import main

if __name__ == "__main__":
    sys.exit(main(["-o", "out/experiment", *sys.argv[1:], "experiment"]))
