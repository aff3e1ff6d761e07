"""Regenerate the bundled scenario documents from ASCII layouts.

Layout symbols: ``#`` wall, ``G`` goal, ``S`` start, ``.`` free, digits mark
cells added by the barrier with that id. A representation overlay uses the same
shape; cells sharing a lowercase letter form one superstate, everything else is
a singleton.
"""
from __future__ import annotations

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "concealgame" / "scenarios"


def _rows(text: str) -> list[str]:
    return [r for r in text.strip("\n").split("\n")]


def scenario(name, layout, overlays, prior, horizon, n_barriers=1, discount=0.95,
             terminal_discount=True, description="", solver=None):
    rows = _rows(layout)
    H, W = len(rows), max(len(r) for r in rows)
    rows = [r.ljust(W, "#") for r in rows]
    blocked, goal, free, start = [], [], [], None
    barriers = {i + 1: [] for i in range(n_barriers)}
    for y, r in enumerate(rows):
        for x, ch in enumerate(r):
            if ch == "#":
                blocked.append([x, y])
                continue
            free.append((x, y))
            if ch == "G":
                goal.append([x, y])
            elif ch == "S":
                start = [x, y]
            elif ch.isdigit():
                barriers[int(ch)].append([x, y])
    reps = []
    for ov in overlays:
        orow = [r.ljust(W, "#") for r in _rows(ov)] if ov else rows
        groups: dict[str, list] = {}
        singles = []
        for (x, y) in free:
            ch = orow[y][x]
            if ch.islower():
                groups.setdefault(ch, []).append([x, y])
            else:
                singles.append([[x, y]])
        reps.append({"superstates": [groups[k] for k in sorted(groups)] + singles})
    doc = {"name": name, "description": description,
           "grid": {"width": W, "height": H, "blocked": blocked, "goal": goal, "start": start},
           "barriers": [{"id": i, "blocked": c} for i, c in barriers.items()],
           "representations": reps, "prior": prior, "horizon": horizon,
           "discount": discount, "terminal_discount": terminal_discount}
    if solver:
        doc["solver"] = solver
    return doc


def _single(name, layout, overlay, description, horizon=1):
    return scenario(name, layout, [overlay], [1.0], horizon, description=description)


ORACLE = [
    _single("oracle_corridor", "S.G", "aaa",
            "three-cell corridor under one superstate; Right is optimal"),
    _single("oracle_coarse_obstacle", "G#\n.S", "G#\naa",
            "one superstate spans a wall corner; the optimum mixes Up and Left"),
    _single("oracle_two_goals", "G.SG", "Gaag",
            "goals at both ends; the start decides which pure action wins"),
    _single("oracle_room", "...\n.S.\n..G", "aaa\naaa\naaG",
            "3x3 room seen as a single block"),
    _single("oracle_detour", ".G\n.#\nS.", "aG\na#\nbb",
            "detour around a wall with two coarse blocks"),
    _single("oracle_hook", "G..\n##.\nS..", "Gaa\n##a\nbbb",
            "hook-shaped corridor, two blocks"),
    _single("oracle_column", "G\n.\n.\nS", "G\na\na\na",
            "vertical corridor of four cells"),
    _single("oracle_ring", "...\n.#.\nS.G", "aaa\na#b\nabG",
            "ring around a pillar"),
    _single("oracle_pocket", "S.#\n..G", "aa#\naaG",
            "pocket next to the goal, one block"),
    _single("oracle_stairs", "..G\n.#.\nS..", "aaG\na#a\naaa",
            "staircase around an interior wall, one block"),
]

MU_DEPENDENCE = scenario(
    "mu_dependence", "G..S.G", ["GaaaaG"], [1.0], 1,
    description="one superstate over a corridor between two goals; the best row "
                "depends on the start distribution")

CORRIDOR_GAME = scenario(
    "corridor_game",
    """
G...G
1#.#2
.....
##S##
""",
    [None, """
G...G
.#.#.
aaaaa
##S##
"""],
    [0.5, 0.5], 3, n_barriers=2,
    description="two goals behind alternative barriers; type 2 perceives the "
                "middle row as one superstate")

RECON_LAYOUT = """
#....2#...
#.###G..#.
#...#1###.
#.#...###.
#.###.....
#.###.....
#.#...####
#...######
#S########
"""
# Superstates: type 1 groups the upper-left corridor (a) and a corner of the
# right-hand pocket (b); type 2 groups the middle passage (c) and the
# lower-left pocket (d).
RECON_T1 = """
#aaaaa#...
#a###...#.
#a..#.###.
#.#...###.
#.###...b.
#.###...bb
#.#...####
#...######
#.########
"""
RECON_T2 = """
#.....#...
#.###...#.
#.c.#c###.
#.#cc.###.
#.###.....
#.###.....
#.#dd.####
#.dd######
#.########
"""
RECONSTRUCTION = scenario(
    "reference_reconstruction", RECON_LAYOUT, [RECON_T1, RECON_T2], [0.5, 0.5], 6, n_barriers=2,
    terminal_discount=False,
    description="best-effort 10x9 reconstruction of the two-type, two-barrier example; "
                "leaf payoffs are not discounted by the horizon")


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    docs = ORACLE + [MU_DEPENDENCE, CORRIDOR_GAME, RECONSTRUCTION]
    for d in docs:
        (OUT / f"{d['name']}.json").write_text(json.dumps(d, indent=1) + "\n")
        print("wrote", d["name"])


if __name__ == "__main__":
    main()
