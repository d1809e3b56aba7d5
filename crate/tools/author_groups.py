#!/usr/bin/env python3
"""Author crates/core/data/groups_core.json from generator and Wyckoff tables.

Each group is given by generators in x,y,z notation (standard ITA setting) and
one representative coordinate triplet per Wyckoff position. The representative
is expanded into its full list of affine maps by composing it with every group
element and dropping duplicates, so the first map of every position is the
representative itself. The Rust loader re-verifies everything independently.

Usage: python3 tools/author_groups.py > crates/core/data/groups_core.json
"""

import json
import re
import sys
from fractions import Fraction as Fr

AXES = "xyz"


def parse_triplet(text, dim=3):
    """Parse 'x-y,x,z+1/2' into (matrix, translation) with rational entries."""
    parts = [p.strip() for p in text.split(",")]
    if dim == 2 and len(parts) == 2:
        parts.append("z")
    assert len(parts) == 3, text
    mat, tr = [], []
    for p in parts:
        row = [Fr(0)] * 3
        const = Fr(0)
        for sign, coef, var in re.findall(r"([+-]?)(\d*(?:/\d+)?)([xyz]?)", p.replace(" ", "")):
            if not coef and not var:
                continue
            s = -1 if sign == "-" else 1
            if var:
                c = Fr(coef) if coef else Fr(1)
                row[AXES.index(var)] += s * c
            else:
                const += s * Fr(coef)
        mat.append(row)
        tr.append(const)
    return mat, tr


def wyckoff_rep(text, dim):
    mat, tr = parse_triplet(text, 3 if dim == 3 else 2)
    if dim == 2:
        # planar positions are pinned to z = 0
        mat[2] = [Fr(0)] * 3
        tr[2] = Fr(0)
    return mat, tr


def matmul(a, b):
    return [[sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)] for i in range(3)]


def matvec(a, v):
    return [sum(a[i][k] * v[k] for k in range(3)) for i in range(3)]


def mod1(v):
    return [x - (x.numerator // x.denominator) for x in v]


def compose(g, h):
    """(g o h)(x) = g(h(x))."""
    gm, gt = g
    hm, ht = h
    return matmul(gm, hm), mod1([a + b for a, b in zip(matvec(gm, ht), gt)])


def key(op):
    m, t = op
    return (tuple(tuple(r) for r in m), tuple(mod1(t)))


IDENTITY = ([[Fr(int(i == j)) for j in range(3)] for i in range(3)], [Fr(0)] * 3)


def closure(gens):
    ops = [IDENTITY]
    seen = {key(IDENTITY)}
    i = 0
    while i < len(ops):
        for g in gens:
            n = compose(ops[i], g)
            k = key(n)
            if k not in seen:
                seen.add(k)
                ops.append(n)
        i += 1
    return ops


def expand(ops, rep):
    maps = []
    seen = set()
    for g in ops:
        m = compose(g, rep)
        k = key(m)
        if k not in seen:
            seen.add(k)
            maps.append(m)
    return maps


def frac_pair(x):
    return [x.numerator, x.denominator]


def encode_op(op, mkey="rotation", tkey="translation"):
    m, t = op
    return {mkey: [frac_pair(x) for row in m for x in row], tkey: [frac_pair(x) for x in mod1(t)]}


CENTER_C = "x+1/2,y+1/2"
CENTER_F = ["x,y+1/2,z+1/2", "x+1/2,y,z+1/2", "x+1/2,y+1/2,z"]

# (dimension, number, name, setting, generators, [(label, representative)])
GROUPS = [
    # --- wallpaper groups -------------------------------------------------
    (2, 1, "p1", "standard", [], [("1a", "x,y")]),
    (2, 2, "p2", "standard", ["-x,-y"],
     [("1a", "0,0"), ("1b", "0,1/2"), ("1c", "1/2,0"), ("1d", "1/2,1/2"), ("2e", "x,y")]),
    (2, 3, "pm", "standard", ["-x,y"], [("1a", "0,y"), ("1b", "1/2,y"), ("2c", "x,y")]),
    (2, 4, "pg", "standard", ["-x,y+1/2"], [("2a", "x,y")]),
    (2, 5, "cm", "standard", ["-x,y", CENTER_C], [("2a", "0,y"), ("4b", "x,y")]),
    (2, 6, "p2mm", "standard", ["-x,-y", "-x,y"],
     [("1a", "0,0"), ("1b", "0,1/2"), ("1c", "1/2,0"), ("1d", "1/2,1/2"), ("2e", "x,0"),
      ("2f", "x,1/2"), ("2g", "0,y"), ("2h", "1/2,y"), ("4i", "x,y")]),
    (2, 7, "p2mg", "standard", ["-x,-y", "-x+1/2,y"],
     [("2a", "0,0"), ("2b", "0,1/2"), ("2c", "1/4,y"), ("4d", "x,y")]),
    (2, 8, "p2gg", "standard", ["-x,-y", "-x+1/2,y+1/2"],
     [("2a", "0,0"), ("2b", "1/2,0"), ("4c", "x,y")]),
    (2, 9, "c2mm", "standard", ["-x,-y", "-x,y", CENTER_C],
     [("2a", "0,0"), ("2b", "0,1/2"), ("4c", "1/4,1/4"), ("4d", "x,0"), ("4e", "0,y"),
      ("8f", "x,y")]),
    (2, 10, "p4", "standard", ["-y,x"],
     [("1a", "0,0"), ("1b", "1/2,1/2"), ("2c", "1/2,0"), ("4d", "x,y")]),
    (2, 11, "p4mm", "standard", ["-y,x", "-x,y"],
     [("1a", "0,0"), ("1b", "1/2,1/2"), ("2c", "1/2,0"), ("4d", "x,0"), ("4e", "x,1/2"),
      ("4f", "x,x"), ("8g", "x,y")]),
    (2, 12, "p4gm", "standard", ["-y,x", "-x+1/2,y+1/2"],
     [("2a", "0,0"), ("2b", "1/2,0"), ("4c", "x,x+1/2"), ("8d", "x,y")]),
    (2, 13, "p3", "standard", ["-y,x-y"],
     [("1a", "0,0"), ("1b", "1/3,2/3"), ("1c", "2/3,1/3"), ("3d", "x,y")]),
    (2, 14, "p3m1", "standard", ["-y,x-y", "-y,-x"],
     [("1a", "0,0"), ("1b", "1/3,2/3"), ("1c", "2/3,1/3"), ("3d", "x,-x"), ("6e", "x,y")]),
    (2, 15, "p31m", "standard", ["-y,x-y", "y,x"],
     [("1a", "0,0"), ("2b", "1/3,2/3"), ("3c", "x,0"), ("6d", "x,y")]),
    (2, 16, "p6", "standard", ["x-y,x"],
     [("1a", "0,0"), ("2b", "1/3,2/3"), ("3c", "1/2,0"), ("6d", "x,y")]),
    (2, 17, "p6mm", "standard", ["x-y,x", "-y,-x"],
     [("1a", "0,0"), ("2b", "1/3,2/3"), ("3c", "1/2,0"), ("6d", "x,0"), ("6e", "x,-x"),
      ("12f", "x,y")]),
    # --- space groups -----------------------------------------------------
    (3, 1, "P1", "standard", [], [("1a", "x,y,z")]),
    (3, 2, "P-1", "standard", ["-x,-y,-z"],
     [("1a", "0,0,0"), ("1b", "0,0,1/2"), ("1c", "0,1/2,0"), ("1d", "1/2,0,0"),
      ("1e", "1/2,1/2,0"), ("1f", "1/2,0,1/2"), ("1g", "0,1/2,1/2"), ("1h", "1/2,1/2,1/2"),
      ("2i", "x,y,z")]),
    (3, 14, "P2_1/c", "unique axis b, cell choice 1", ["-x,y+1/2,-z+1/2", "-x,-y,-z"],
     [("2a", "0,0,0"), ("2b", "1/2,0,0"), ("2c", "0,0,1/2"), ("2d", "1/2,0,1/2"),
      ("4e", "x,y,z")]),
    (3, 62, "Pnma", "standard", ["-x+1/2,-y,z+1/2", "-x,y+1/2,-z", "-x,-y,-z"],
     [("4a", "0,0,0"), ("4b", "0,0,1/2"), ("4c", "x,1/4,z"), ("8d", "x,y,z")]),
    (3, 123, "P4/mmm", "standard", ["-y,x,z", "x,-y,z", "x,y,-z"],
     [("1a", "0,0,0"), ("1b", "0,0,1/2"), ("1c", "1/2,1/2,0"), ("1d", "1/2,1/2,1/2"),
      ("2e", "0,1/2,1/2"), ("2f", "0,1/2,0"), ("2g", "0,0,z"), ("2h", "1/2,1/2,z"),
      ("4i", "0,1/2,z"), ("4j", "x,x,0"), ("4k", "x,x,1/2"), ("4l", "x,0,0"),
      ("4m", "x,0,1/2"), ("4n", "x,1/2,0"), ("4o", "x,1/2,1/2"), ("8p", "x,y,0"),
      ("8q", "x,y,1/2"), ("8r", "x,x,z"), ("8s", "x,0,z"), ("8t", "x,1/2,z"),
      ("16u", "x,y,z")]),
    (3, 166, "R-3m", "hexagonal axes", ["-y,x-y,z", "y,x,-z", "-x,-y,-z", "x+2/3,y+1/3,z+1/3"],
     [("3a", "0,0,0"), ("3b", "0,0,1/2"), ("6c", "0,0,z"), ("9d", "1/2,0,1/2"),
      ("9e", "1/2,0,0"), ("18f", "x,0,0"), ("18g", "x,0,1/2"), ("18h", "x,-x,z"),
      ("36i", "x,y,z")]),
    (3, 191, "P6/mmm", "standard", ["x-y,x,z", "y,x,-z", "-x,-y,-z"],
     [("1a", "0,0,0"), ("1b", "0,0,1/2"), ("2c", "1/3,2/3,0"), ("2d", "1/3,2/3,1/2"),
      ("2e", "0,0,z"), ("3f", "1/2,0,0"), ("3g", "1/2,0,1/2"), ("4h", "1/3,2/3,z"),
      ("6i", "1/2,0,z"), ("6j", "x,0,0"), ("6k", "x,0,1/2"), ("6l", "x,2x,0"),
      ("6m", "x,2x,1/2"), ("12n", "x,0,z"), ("12o", "x,2x,z"), ("12p", "x,y,0"),
      ("12q", "x,y,1/2"), ("24r", "x,y,z")]),
    (3, 221, "Pm-3m", "standard", ["z,x,y", "-y,x,z", "-x,-y,-z"],
     [("1a", "0,0,0"), ("1b", "1/2,1/2,1/2"), ("3c", "0,1/2,1/2"), ("3d", "1/2,0,0"),
      ("6e", "x,0,0"), ("6f", "x,1/2,1/2"), ("8g", "x,x,x"), ("12h", "x,1/2,0"),
      ("12i", "0,y,y"), ("12j", "1/2,y,y"), ("24k", "0,y,z"), ("24l", "1/2,y,z"),
      ("24m", "x,x,z"), ("48n", "x,y,z")]),
    (3, 225, "Fm-3m", "standard", ["z,x,y", "-y,x,z", "-x,-y,-z"] + CENTER_F,
     [("4a", "0,0,0"), ("4b", "1/2,1/2,1/2"), ("8c", "1/4,1/4,1/4"), ("24d", "0,1/4,1/4"),
      ("24e", "x,0,0"), ("32f", "x,x,x"), ("48g", "x,1/4,1/4"), ("48h", "0,y,y"),
      ("48i", "1/2,y,y"), ("96j", "0,y,z"), ("96k", "x,x,z"), ("192l", "x,y,z")]),
]


def main():
    out = []
    for dim, number, name, setting, gens, wyckoffs in GROUPS:
        gen_ops = [parse_triplet(g, dim) for g in gens]
        ops = closure(gen_ops)
        entry = {
            "dimension": dim,
            "number": number,
            "name": name,
            "setting": setting,
            "generators": [encode_op(g) for g in gen_ops],
            "wyckoffs": [],
        }
        for label, rep in wyckoffs:
            maps = expand(ops, wyckoff_rep(rep, dim))
            mult = int(re.match(r"\d+", label).group(0))
            if len(maps) != mult:
                sys.exit(f"{name} {label}: expanded to {len(maps)} maps, expected {mult}")
            entry["wyckoffs"].append(
                {"label": label, "maps": [encode_op(m, "V", "tau") for m in maps]}
            )
        print(f"{name}: |G| = {len(ops)}, {len(wyckoffs)} positions", file=sys.stderr)
        out.append(entry)
    json.dump({"groups": out}, sys.stdout, separators=(",", ":"))
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
