#!/usr/bin/env python3
"""Produce the numerical certificate for the gradient identities.

Exit status 0 means every tolerance held; the JSON certificate lands in
out/verify/certificate.json. Extra CLI flags are forwarded.
"""

import sys

from locdistill.cli import main

if __name__ == "__main__":
    sys.exit(main(["-o", "out/verify", *sys.argv[1:], "verify"]))
