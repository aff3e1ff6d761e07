"""Grid world, barriers, representations and transition kernels.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row, origin at
the top-left corner. ``Up`` decreases ``y``.

States of a kernel are the non-wall cells in row-major order followed by a
single absorbing sink. Goal cells pay ``goal_reward`` once and move to the
sink under every action.
"""
from __future__ import annotations

import enum
import json
from importlib import resources
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

Cell = tuple[int, int]


class ScenarioError(ValueError):
    """Raised when a scenario document or one of its parts is invalid."""


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3

    @property
    def letter(self) -> str:
        return "UDLR"[self.value]

    @property
    def delta(self) -> Cell:
        return _DELTAS[self.value]


_DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0))
ACTIONS = tuple(Action)
N_ACTIONS = len(ACTIONS)


def action_string(actions: Iterable[int]) -> str:
    return "".join("UDLR"[int(a)] for a in actions)


def parse_action_string(text: str) -> list[int]:
    try:
        return ["UDLR".index(ch) for ch in text]
    except ValueError:
        raise ScenarioError(f"bad action string {text!r}") from None


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    blocked: frozenset[Cell]
    goal: frozenset[Cell]
    start: Cell

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ScenarioError("grid dimensions must be positive")
        for c in [*self.blocked, *self.goal, self.start]:
            if not self.in_bounds(c):
                raise ScenarioError(f"cell {c} outside {self.width}x{self.height} grid")
        if not self.goal:
            raise ScenarioError("goal set is empty")
        if self.start in self.blocked:
            raise ScenarioError("start cell is blocked")
        if self.goal & self.blocked:
            raise ScenarioError(f"goal cells blocked: {sorted(self.goal & self.blocked)}")
        if self.start in self.goal:
            raise ScenarioError("start cell lies in the goal set")

    def in_bounds(self, c: Cell) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    @property
    def cells(self) -> list[Cell]:
        """Valid (non-wall) cells in row-major order."""
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if (x, y) not in self.blocked]


@dataclass(frozen=True)
class BarrierConfig:
    id: int
    added_blocked: frozenset[Cell]


@dataclass(frozen=True)
class Representation:
    superstates: tuple[frozenset[Cell], ...]
    cell_to_superstate: Mapping[Cell, int] = field(compare=False, repr=False)

    @classmethod
    def from_cells(cls, superstates: Iterable[Iterable[Cell]]) -> "Representation":
        groups = tuple(frozenset(tuple(c) for c in g) for g in superstates)
        index: dict[Cell, int] = {}
        for i, g in enumerate(groups):
            for c in g:
                index.setdefault(c, i)
        return cls(groups, index)

    @classmethod
    def from_rectangles(cls, rects: Iterable[tuple[int, int, int, int]],
                        grid: GridSpec) -> "Representation":
        """Blocks ``(x0, y0, x1, y1)`` with inclusive corners; walls inside are dropped."""
        groups = []
        for x0, y0, x1, y1 in rects:
            cells = [(x, y) for y in range(min(y0, y1), max(y0, y1) + 1)
                     for x in range(min(x0, x1), max(x0, x1) + 1)
                     if (x, y) not in grid.blocked]
            if cells:
                groups.append(cells)
        return cls.from_cells(groups)

    @classmethod
    def finest(cls, grid: GridSpec) -> "Representation":
        return cls.from_cells([[c] for c in grid.cells])

    def __len__(self) -> int:
        return len(self.superstates)


def validate_representation(rep: Representation, grid: GridSpec) -> list[str]:
    """Return a list of problems; empty means the partition is valid."""
    problems = []
    seen: dict[Cell, int] = {}
    for i, group in enumerate(rep.superstates):
        if not group:
            problems.append(f"superstate {i} is empty")
        for c in sorted(group):
            if c in seen:
                problems.append(f"partition not disjoint: cell {c} in superstates {seen[c]} and {i}")
            else:
                seen[c] = i
            if not grid.in_bounds(c):
                problems.append(f"cell {c} out of bounds")
            elif c in grid.blocked:
                problems.append(f"superstate {i} contains wall cell {c}")
    for c in grid.cells:
        if c not in seen:
            problems.append(f"coverage violation at cell {c}")
    return problems


def superstate_of(rep: Representation, s: Cell) -> int:
    try:
        return rep.cell_to_superstate[tuple(s)]
    except KeyError:
        raise ScenarioError(f"uncovered state {s}") from None


@dataclass(frozen=True)
class Reward:
    step: float = -0.1
    goal: float = 1.0


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec
    barriers: tuple[BarrierConfig, ...]
    representations: tuple[Representation, ...]
    prior: tuple[float, ...]
    horizon: int
    discount: float
    reward: Reward = Reward()
    name: str = "scenario"
    # Leaf payoffs weighted by discount**horizon when true.
    terminal_discount: bool = True
    solver: Mapping[str, object] = field(default_factory=dict, compare=False)

    @property
    def n_types(self) -> int:
        return len(self.representations)

    @property
    def n_barriers(self) -> int:
        return len(self.barriers)

    def validate(self) -> None:
        if not self.barriers:
            raise ScenarioError("at least one barrier configuration is required")
        if not self.representations:
            raise ScenarioError("at least one representation is required")
        if len(self.prior) != len(self.representations):
            raise ScenarioError(
                f"prior has {len(self.prior)} entries for {len(self.representations)} types")
        p = np.asarray(self.prior, dtype=float)
        if not np.all(np.isfinite(p)) or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ScenarioError(f"prior {list(self.prior)} is not a strictly positive distribution")
        if self.horizon < 1:
            raise ScenarioError("horizon must be at least 1")
        if not 0.0 < self.discount < 1.0:
            raise ScenarioError("discount must lie in (0, 1)")
        for theta, rep in enumerate(self.representations):
            problems = validate_representation(rep, self.grid)
            if problems:
                raise ScenarioError(f"representation {theta}: " + "; ".join(problems))
        ids = [b.id for b in self.barriers]
        if len(set(ids)) != len(ids):
            raise ScenarioError("barrier ids must be unique")
        free = _reachers(self.grid, frozenset())
        if self.grid.start not in free:
            raise ScenarioError("goal not reachable from start")
        for b in self.barriers:
            _check_barrier(self.grid, b, free)


def _neighbors(grid: GridSpec, c: Cell, extra: frozenset[Cell]) -> Iterable[Cell]:
    for dx, dy in _DELTAS:
        n = (c[0] + dx, c[1] + dy)
        if grid.in_bounds(n) and n not in grid.blocked and n not in extra:
            yield n


def _reachers(grid: GridSpec, extra: frozenset[Cell]) -> set[Cell]:
    """Cells from which the goal can be reached when ``extra`` cells cannot be entered."""
    # Moves are symmetric, so flood backwards from the goal.
    seen = set(grid.goal)
    queue = deque(grid.goal)
    while queue:
        c = queue.popleft()
        for n in _neighbors(grid, c, frozenset()):
            if n in seen:
                continue
            # n steps into c; c must be enterable.
            if c in extra:
                continue
            seen.add(n)
            queue.append(n)
    return seen


def _check_barrier(grid: GridSpec, barrier: BarrierConfig, free: set[Cell]) -> None:
    bad = sorted(c for c in barrier.added_blocked if not grid.in_bounds(c))
    if bad:
        raise ScenarioError(f"barrier {barrier.id}: cells out of bounds {bad}")
    if barrier.added_blocked & grid.goal:
        raise ScenarioError(f"barrier {barrier.id} blocks goal cells")
    reach = _reachers(grid, barrier.added_blocked)
    cut = sorted(c for c in free - barrier.added_blocked if c not in reach)
    if cut:
        raise ScenarioError(f"barrier {barrier.id} encloses the goal; cut off cells {cut[:5]}")


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Dense kernel over cells plus sink; ``probs[s, a, s']``."""

    cells: tuple[Cell, ...]
    probs: np.ndarray
    successor: np.ndarray
    rewards: np.ndarray
    goal_mask: np.ndarray
    barrier: int | None = None

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def sink(self) -> int:
        return self.n_states - 1

    def index(self, cell: Cell) -> int:
        return self.cells.index(tuple(cell))


def state_index(grid: GridSpec) -> dict[Cell, int]:
    return {c: i for i, c in enumerate(grid.cells)}


def reward(scenario: Scenario, s: Cell | str, a: int | Action = 0) -> float:
    """Running reward; ``s`` is a cell or the string ``"sink"``."""
    if isinstance(s, str):
        if s != "sink":
            raise ScenarioError(f"unknown state {s!r}")
        return 0.0
    if tuple(s) in scenario.grid.goal:
        return scenario.reward.goal
    return scenario.reward.step


def build_transition(scenario: Scenario, barrier: int | None = None) -> TransitionKernel:
    """Kernel for the barrier at position ``barrier`` of ``scenario.barriers``; None is Phase I."""
    grid = scenario.grid
    extra = frozenset() if barrier is None else scenario.barriers[barrier].added_blocked
    cells = grid.cells
    idx = state_index(grid)
    n = len(cells) + 1
    sink = n - 1
    succ = np.empty((n, N_ACTIONS), dtype=np.int64)
    rew = np.zeros((n, N_ACTIONS))
    goal = np.zeros(n, dtype=bool)
    for i, c in enumerate(cells):
        if c in grid.goal:
            succ[i] = sink
            rew[i] = scenario.reward.goal
            goal[i] = True
            continue
        rew[i] = scenario.reward.step
        for a, (dx, dy) in enumerate(_DELTAS):
            nb = (c[0] + dx, c[1] + dy)
            ok = grid.in_bounds(nb) and nb not in grid.blocked and nb not in extra
            succ[i, a] = idx[nb] if ok else i
    succ[sink] = sink
    probs = np.zeros((n, N_ACTIONS, n))
    rows = np.repeat(np.arange(n), N_ACTIONS)
    probs[rows, np.tile(np.arange(N_ACTIONS), n), succ.ravel()] = 1.0
    return TransitionKernel(tuple(cells), probs, succ, rew, goal, barrier)


def reachable_states(kernel: TransitionKernel, start: int, steps: int) -> list[int]:
    """States reachable from ``start`` in at most ``steps`` moves (sink included)."""
    seen = {start}
    frontier = {start}
    for _ in range(steps):
        frontier = {int(s) for f in frontier for s in kernel.successor[f]} - seen
        seen |= frontier
    return sorted(seen)


# --- scenario documents ---------------------------------------------------

def _cells(raw, what: str) -> frozenset[Cell]:
    try:
        return frozenset((int(c[0]), int(c[1])) for c in raw)
    except (TypeError, ValueError, IndexError):
        raise ScenarioError(f"{what}: expected a list of [x, y] pairs") from None


def _require(doc: Mapping, key: str, where: str = "scenario"):
    if key not in doc:
        raise ScenarioError(f"{where}: missing key {key!r}")
    return doc[key]


def scenario_from_dict(doc: Mapping) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be an object")
    g = _require(doc, "grid")
    try:
        start = (int(g["start"][0]), int(g["start"][1]))
        grid = GridSpec(int(_require(g, "width", "grid")), int(_require(g, "height", "grid")),
                        _cells(g.get("blocked", []), "grid.blocked"),
                        _cells(_require(g, "goal", "grid"), "grid.goal"), start)
    except (KeyError, TypeError, IndexError) as exc:
        raise ScenarioError(f"grid: malformed ({exc})") from None

    barriers = []
    for i, b in enumerate(_require(doc, "barriers")):
        barriers.append(BarrierConfig(int(b.get("id", i + 1)),
                                      _cells(_require(b, "blocked", f"barriers[{i}]"),
                                             f"barriers[{i}].blocked")))
    reps = []
    for i, r in enumerate(_require(doc, "representations")):
        if "superstates" in r:
            groups = [_cells(gr, f"representations[{i}].superstates") for gr in r["superstates"]]
            if sum(len(gr) for gr in groups) != sum(len(list(gr_raw)) for gr_raw in r["superstates"]):
                raise ScenarioError(f"representations[{i}]: duplicate cell inside a superstate")
            reps.append(Representation.from_cells(groups))
        elif "rectangles" in r:
            rects = [(int(q["x0"]), int(q["y0"]), int(q["x1"]), int(q["y1"])) for q in r["rectangles"]]
            reps.append(Representation.from_rectangles(rects, grid))
        elif r.get("finest"):
            reps.append(Representation.finest(grid))
        else:
            raise ScenarioError(f"representations[{i}]: need 'superstates' or 'rectangles'")
    rw = doc.get("reward", {})
    scen = Scenario(
        grid=grid,
        barriers=tuple(barriers),
        representations=tuple(reps),
        prior=tuple(float(p) for p in _require(doc, "prior")),
        horizon=int(_require(doc, "horizon")),
        discount=float(_require(doc, "discount")),
        reward=Reward(float(rw.get("step", -0.1)), float(rw.get("goal", 1.0))),
        name=str(doc.get("name", "scenario")),
        terminal_discount=bool(doc.get("terminal_discount", True)),
        solver=dict(doc.get("solver", {})),
    )
    scen.validate()
    return scen


def load_scenario(document: str | bytes | Mapping) -> Scenario:
    """Parse and validate a scenario from JSON text or an already-decoded mapping."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"not valid JSON: {exc}") from None
    return scenario_from_dict(document)


def bundled_scenarios() -> list[str]:
    """Names of the scenario documents shipped with the package."""
    root = resources.files("concealgame") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_bundled(name: str) -> Scenario:
    path = resources.files("concealgame") / "scenarios" / f"{name}.json"
    if not path.is_file():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return load_scenario(path.read_text())


def scenario_to_dict(scen: Scenario) -> dict:
    return {
        "name": scen.name,
        "grid": {
            "width": scen.grid.width,
            "height": scen.grid.height,
            "blocked": sorted(map(list, scen.grid.blocked)),
            "goal": sorted(map(list, scen.grid.goal)),
            "start": list(scen.grid.start),
        },
        "barriers": [{"id": b.id, "blocked": sorted(map(list, b.added_blocked))}
                     for b in scen.barriers],
        "representations": [{"type": t + 1, "superstates": [sorted(map(list, g)) for g in rep.superstates]}
                            for t, rep in enumerate(scen.representations)],
        "prior": list(scen.prior),
        "horizon": scen.horizon,
        "discount": scen.discount,
        "reward": {"step": scen.reward.step, "goal": scen.reward.goal},
        "terminal_discount": scen.terminal_discount,
        "solver": dict(scen.solver),
    }


def render(scen: Scenario, marks: Mapping[Cell, str] | None = None,
           barrier: int | None = None) -> str:
    """ASCII picture: ``#`` wall, ``G`` goal, ``S`` start, ``b`` barrier cell."""
    marks = dict(marks or {})
    extra = frozenset() if barrier is None else scen.barriers[barrier].added_blocked
    rows = []
    for y in range(scen.grid.height):
        row = []
        for x in range(scen.grid.width):
            c = (x, y)
            if c in marks:
                row.append(marks[c])
            elif c in scen.grid.blocked:
                row.append("#")
            elif c in scen.grid.goal:
                row.append("G")
            elif c == scen.grid.start:
                row.append("S")
            elif c in extra:
                row.append("b")
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows)


def superstate_array(rep: Representation, kernel: TransitionKernel) -> np.ndarray:
    """Superstate index per kernel state; the sink maps to ``len(rep)``."""
    out = np.empty(kernel.n_states, dtype=np.int64)
    for i, c in enumerate(kernel.cells):
        out[i] = superstate_of(rep, c)
    out[kernel.sink] = len(rep)
    return out
