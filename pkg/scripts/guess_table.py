"""Guessing-game error table: rows are agent counts, columns are learner variants.

    python scripts/guess_table.py --out runs/guess_table.csv
    python scripts/guess_table.py --agents 5 --variants bicnet,ind,sl-mlp --episodes 2000
"""
import sys

from bicnet.cli import main

if __name__ == "__main__":
    sys.exit(main(["guess-table", *sys.argv[1:]]))
