"""NFE-budget comparison of RMP against sample averaging.

Usage: python3 scripts/toy_frontier.py [--out DIR] [--threads N] [--seed S]
Defaults to configs/toy_frontier.json; extra arguments go to `rmp frontier`.
"""
import sys
from pathlib import Path

from rmp.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "toy_frontier.json"

if __name__ == "__main__":
    sys.exit(main(["frontier", "--config", str(CONFIG), *sys.argv[1:]]))
