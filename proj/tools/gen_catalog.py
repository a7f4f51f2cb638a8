#!/usr/bin/env python3
"""Regenerate core/data/sgcatalog.txt from PyXtal's Wyckoff tables.

usage: gen_catalog.py <pyxtal/database dir> <out file>

The source tables list, for every space group in its standard ITA setting
(origin choice 2 where two exist, hexagonal axes for R groups, unique axis b
for monoclinic groups), each Wyckoff position as its full orbit in the
conventional cell. The first orbit member is the site form; the general
position doubles as the list of symmetry operations.
"""
import ast
import csv
import json
import sys
from pathlib import Path

LETTERS = "abcdefghijklmnopqrstuvwxyzA"

def family(g):
    if g <= 2:
        return "triclinic"
    if g <= 15:
        return "monoclinic"
    if g <= 74:
        return "orthorhombic"
    if g <= 142:
        return "tetragonal"
    if g <= 194:
        return "trigonal-hexagonal"
    return "cubic"


def compact(t):
    return t.replace(" ", "")


def main():
    db = Path(sys.argv[1])
    out = Path(sys.argv[2])
    symbols = json.loads((db / "symbols.json").read_text())["space_group"]
    rows = list(csv.reader(open(db / "wyckoff_list.csv")))[2:]
    groups = []
    total = 0
    for r in rows:
        g = int(r[0])
        orbits = ast.literal_eval(r[1])
        n = len(orbits)
        wy = []
        for i, orbit in enumerate(orbits):
            letter = LETTERS[n - 1 - i]
            wy.append((letter, len(orbit), orbit))
        wy.reverse()
        total += n
        groups.append((g, symbols[g - 1], family(g), orbits[0], wy))
    with open(out, "w", encoding="utf-8") as f:
        f.write(f"SGCATALOG v1 groups={len(groups)} wyckoff={total}\n")
        for g, sym, fam, ops, wy in groups:
            f.write(f"G {g} {sym} {fam}\n")
            for op in ops:
                f.write(f"OP {compact(op)}\n")
            for letter, mult, orbit in wy:
                gens = ";".join(compact(t) for t in orbit)
                f.write(f"WY {letter} {mult} {compact(orbit[0])} | {gens}\n")


if __name__ == "__main__":
    main()
