"""Trajectory panels for the two-mode toy.

Usage: python3 scripts/toy_figures.py [--out DIR] [--threads N] [--seed S]
Defaults to configs/toy_figures.json; extra arguments go to `rmp figures`.
"""
import sys
from pathlib import Path

from rmp.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy_figures.json"

if __name__ == "__main__":
    sys.exit(main(["figures", "--config", str(CONFIG), *sys.argv[1:]]))
