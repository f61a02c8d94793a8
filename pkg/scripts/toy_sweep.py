"""y sweep of RMP against the three posterior-mean oracles.

Usage: python3 scripts/toy_sweep.py [--out DIR] [--threads N] [--seed S]
Defaults to configs/toy_sweep.json; extra arguments go to `rmp sweep`.
"""
import sys
from pathlib import Path

from rmp.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy_sweep.json"

if __name__ == "__main__":
    sys.exit(main(["sweep", "--config", str(CONFIG), *sys.argv[1:]]))
