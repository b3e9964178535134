"""Goal-seeded path planning on grid worlds by gradient refinement of waypoints.

A path code is ``m`` interior waypoints in continuous (row, col) coordinates;
the start and goal cells pin the ends of the polyline. The code is rendered
onto the grid as a soft raster, scored against the obstacle map, refined by
descent steps, and finally snapped to a 4-connected cell path. A breadth-first
oracle gives the exact optimum for comparison.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var
from .data_io import GridWorld
from .inference import descent_step
from .rng import SeededRng


class NoPathError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    m_waypoints: int = 8
    obstacle_weight: float = 10.0
    length_weight: float = 0.1
    eta: float = 0.05
    max_iter: int = 300
    restarts: int = 4
    width: float = 1.0
    fine_width: float = 0.35
    backtrack: int = 20
    max_step: float = 0.25
    levels: int = 3
    fine_iter: int = 100
    repair_radius: int = 3


@dataclass
class PlanResult:
    path: list[tuple[int, int]]
    collision_free: bool
    length: int  # moves, i.e. len(path) - 1
    expansions: int
    oracle_length: int
    objective: float = float("nan")
    waypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def ratio(self) -> float:
        return self.length / self.oracle_length if self.oracle_length > 0 else 1.0


# -- soft raster -------------------------------------------------------------------


def polyline(code: np.ndarray, grid: GridWorld) -> np.ndarray:
    pts = np.asarray(code, dtype=np.float64).reshape(-1, 2)
    return np.vstack([np.array(grid.start, float), pts, np.array(grid.goal, float)])


def raster_forward(points: np.ndarray, shape, width: float):
    """Soft union of Gaussian tubes around each polyline segment.

    Intensity is ``1 - prod_s (1 - g_s)`` with ``g_s`` a Gaussian in the
    distance from the cell centre to segment ``s``. Each segment only touches
    a window of cells within six widths of it. Returns the [H*W] intensity and
    a function mapping an upstream gradient on it to a gradient on ``points``.
    """
    h, w = shape
    reach = 6.0 * width
    a, b = points[:-1], points[1:]
    ab = b - a
    lo = np.floor(np.minimum(a, b) - reach).astype(int)
    span = int(np.ceil(np.max(np.abs(ab)) + 2 * reach)) + 2
    off = np.arange(span)
    rr = lo[:, 0, None, None] + off[None, :, None]  # [S, K, 1]
    cc = lo[:, 1, None, None] + off[None, None, :]  # [S, 1, K]
    rr, cc = np.broadcast_arrays(rr, cc)
    n = len(a)
    rel = np.stack([rr - a[:, 0, None, None], cc - a[:, 1, None, None]], axis=-1).reshape(n, -1, 2)
    denom = np.sum(ab * ab, axis=1)
    safe = np.where(denom > 0, denom, 1.0)
    t = np.clip(np.einsum("spk,sk->sp", rel, ab) / safe[:, None], 0.0, 1.0) * (denom > 0)[:, None]
    r = rel - t[..., None] * ab[:, None, :]
    inside = ((rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)).reshape(n, -1)
    # scaled below 1 so that (1 - g) never vanishes and can be divided out
    g = (1.0 - 1e-9) * np.exp(-np.sum(r * r, axis=-1) / (2.0 * width**2)) * inside
    idx = np.where(inside, rr.reshape(n, -1) * w + cc.reshape(n, -1), 0)
    log_keep = np.bincount(idx.ravel(), weights=np.log1p(-g).ravel(), minlength=h * w)
    remain = np.exp(log_keep)
    intensity = 1.0 - remain

    def vjp(upstream: np.ndarray) -> np.ndarray:
        others = remain[idx] / (1.0 - g)  # product over the other segments
        # dI/d dist2 times d dist2/dq = -2r; t is stationary inside the segment
        coef = upstream[idx] * others * g / width**2
        wq = coef[..., None] * r
        grad = np.zeros_like(points)
        grad[:-1] += np.einsum("spk,sp->sk", wq, 1.0 - t)
        grad[1:] += np.einsum("spk,sp->sk", wq, t)
        return grad

    return intensity, vjp


def rasterize_path(code, grid: GridWorld, width: float = 0.5):
    """Render the polyline of a path code onto the grid, values in [0, 1].

    Accepts a numpy code (returns an array) or a tape variable (returns a
    variable differentiable w.r.t. the interior waypoints).
    """
    if isinstance(code, Var):
        pts = polyline(code.value, grid)
        value, vjp = raster_forward(pts, grid.shape, width)
        return ad.custom(code.tape, "raster", [code], value,
                         lambda g: (vjp(g)[1:-1].reshape(code.shape),))
    return raster_forward(polyline(code, grid), grid.shape, width)[0]


def plan_objective(code: np.ndarray, grid: GridWorld, config: PlannerConfig, with_grad: bool = True,
                   width: float | None = None):
    """Obstacle overlap plus squared segment lengths, and its gradient."""
    pts = polyline(code, grid)
    occ = grid.raster()
    raster, vjp = raster_forward(pts, grid.shape, width or config.width)
    seg = np.diff(pts, axis=0)
    total = config.obstacle_weight * float(raster @ occ) + config.length_weight * float(np.sum(seg * seg))
    if not with_grad:
        return total, None
    g = config.obstacle_weight * vjp(occ)
    g[1:] += config.length_weight * 2.0 * seg
    g[:-1] -= config.length_weight * 2.0 * seg
    return total, g[1:-1].reshape(-1)


# -- discrete paths ----------------------------------------------------------------


def _walk_segment(a: np.ndarray, b: np.ndarray, free=None, corner: float = 0.2) -> list[tuple[int, int]]:
    """Cells crossed by segment a-b, stepping one axis at a time (4-connected).

    Where the segment passes within ``corner`` cells of a cell corner either
    step order is a valid cover; ``free(cell)`` then picks the unoccupied one.
    """
    cell = [int(np.floor(a[0] + 0.5)), int(np.floor(a[1] + 0.5))]
    end = (int(np.floor(b[0] + 0.5)), int(np.floor(b[1] + 0.5)))
    out = [tuple(cell)]
    delta = b - a
    # near-zero components count as axis-aligned so 1/delta stays finite
    step = [0 if abs(v) < 1e-12 else int(np.sign(v)) for v in delta]
    t_max, t_delta = [], []
    for i in range(2):
        if step[i] == 0:
            t_max.append(np.inf)
            t_delta.append(np.inf)
        else:
            boundary = cell[i] + 0.5 * step[i]
            t_max.append((boundary - a[i]) / delta[i])
            t_delta.append(1.0 / abs(delta[i]))
    seg_len = float(np.hypot(*delta))
    limit = abs(end[0] - cell[0]) + abs(end[1] - cell[1])
    while tuple(cell) != end and len(out) <= limit:
        axis = 0 if t_max[0] <= t_max[1] else 1
        if step[axis] == 0 or t_max[axis] > 1.0 + 1e-12:
            # numerical slack at the final boundary: finish along the other axis
            axis = 1 - axis
            if step[axis] == 0:
                break
        elif (free is not None and step[1 - axis] != 0 and t_max[1 - axis] <= 1.0
              and abs(t_max[0] - t_max[1]) * seg_len < corner):
            trial = list(cell)
            trial[axis] += step[axis]
            if not free(tuple(trial)):
                axis = 1 - axis
        cell[axis] += step[axis]
        t_max[axis] += t_delta[axis]
        out.append(tuple(cell))
    return out


def snap_to_cells(points: np.ndarray, grid: GridWorld) -> list[tuple[int, int]]:
    """4-connected cell sequence along a polyline, with revisits cut out."""
    points = np.asarray(points, dtype=np.float64)
    first = (int(np.floor(points[0, 0] + 0.5)), int(np.floor(points[0, 1] + 0.5)))
    last = (int(np.floor(points[-1, 0] + 0.5)), int(np.floor(points[-1, 1] + 0.5)))
    if first != tuple(grid.start) or last != tuple(grid.goal):
        raise ContractError("polyline must run from the start cell to the goal cell")
    if first == last and np.any(np.abs(points - points[0]) > 0.5):
        raise ContractError("closed loop: endpoints coincide but start differs from goal")
    cells: list[tuple[int, int]] = [first]
    for a, b in zip(points[:-1], points[1:]):
        for c in _walk_segment(a, b, grid.free)[1:]:
            if c != cells[-1]:
                cells.append(c)
    # cut loops: jump from the first visit of a cell to its last visit
    last_seen = {c: i for i, c in enumerate(cells)}
    path, i = [], 0
    while i < len(cells):
        path.append(cells[i])
        i = last_seen[cells[i]] + 1
    return path


def is_valid_path(path, grid: GridWorld) -> bool:
    if not path or tuple(path[0]) != tuple(grid.start) or tuple(path[-1]) != tuple(grid.goal):
        return False
    if not all(grid.free(c) for c in path):
        return False
    return all(abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1 for a, b in zip(path, path[1:]))


def _bfs(grid: GridWorld, start, goal, box=None):
    """Breadth-first search, optionally confined to box = (r0, c0, r1, c1) inclusive."""
    start, goal = tuple(start), tuple(goal)
    parent = {start: None}
    todo = deque([start])
    expanded = 0
    while todo:
        cell = todo.popleft()
        expanded += 1
        if cell == goal:
            path = [cell]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1], expanded
        r, c = cell
        for nxt in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if nxt in parent or not grid.free(nxt):
                continue
            if box is not None and not (box[0] <= nxt[0] <= box[2] and box[1] <= nxt[1] <= box[3]):
                continue
            parent[nxt] = cell
            todo.append(nxt)
    return None, expanded


def bfs_shortest_path(grid: GridWorld):
    """Exact 4-connected shortest path. Returns (length, path, cells_expanded)."""
    path, expanded = _bfs(grid, grid.start, grid.goal)
    if path is None:
        raise NoPathError(f"no path from {tuple(grid.start)} to {tuple(grid.goal)}")
    return len(path) - 1, path, expanded


def local_repair(path, grid: GridWorld, radius: int = 2):
    """Replace each blocked run of a snapped path by a detour inside a small window.

    The detour joins the free cells on either side of the run and may not
    leave their bounding box grown by ``radius``; the margin doubles twice
    before a run is given up and left as it is. Returns (path, cells_expanded).
    """
    out = [path[0]]
    expanded = 0
    i = 1
    while i < len(path):
        if grid.free(path[i]):
            out.append(path[i])
            i += 1
            continue
        j = i
        while j < len(path) and not grid.free(path[j]):
            j += 1
        u, v = out[-1], path[j] if j < len(path) else None
        if v is None:
            out.extend(path[i:])
            break
        detour = None
        for r in (radius, 2 * radius, 4 * radius):
            box = (min(u[0], v[0]) - r, min(u[1], v[1]) - r, max(u[0], v[0]) + r, max(u[1], v[1]) + r)
            detour, work = _bfs(grid, u, v, box)
            expanded += work
            if detour is not None:
                break
        out.extend(detour[1:] if detour is not None else path[i:j + 1])
        i = j + 1
    # a detour may cross the path elsewhere; cut the loop it forms
    last_seen = {c: k for k, c in enumerate(out)}
    cut, k = [], 0
    while k < len(out):
        cut.append(out[k])
        k = last_seen[out[k]] + 1
    return cut, expanded


# -- planning loop -----------------------------------------------------------------


def initial_code(grid: GridWorld, m: int, restart: int = 0, rng: SeededRng | None = None) -> np.ndarray:
    """Evenly spaced points on the start-goal line, bowed sideways for restarts > 0.

    Restarts 1 and 2 bow to either side by half the start-goal distance;
    later restarts draw the bow and a small jitter from ``rng``.
    """
    s, g = np.array(grid.start, float), np.array(grid.goal, float)
    t = np.arange(1, m + 1) / (m + 1)
    pts = s + t[:, None] * (g - s)
    d = g - s
    dist = max(float(np.linalg.norm(d)), 1e-12)
    normal = np.array([-d[1], d[0]]) / dist
    if restart in (1, 2):
        pts = pts + (0.5 if restart == 1 else -0.5) * dist * np.sin(np.pi * t)[:, None] * normal
    elif restart > 2:
        rng = rng if rng is not None else SeededRng(restart)
        amp = 0.5 * dist * (2.0 * rng.uniform() - 1.0)
        pts = pts + amp * np.sin(np.pi * t)[:, None] * normal + 0.5 * rng.standard_normal(pts.shape)
    hi = np.array(grid.shape, float) - 1.0
    return np.clip(pts, 0.0, hi).reshape(-1)


def subdivide(code: np.ndarray, grid: GridWorld) -> np.ndarray:
    """Insert the midpoint of every segment; m interior points become 2m + 1."""
    pts = polyline(code, grid)
    mids = 0.5 * (pts[:-1] + pts[1:])
    out = np.empty((2 * len(pts) - 1, 2))
    out[0::2], out[1::2] = pts, mids
    return out[1:-1].reshape(-1)


def refine_code(code: np.ndarray, grid: GridWorld, config: PlannerConfig, iterations: int,
                width: float | None = None):
    """Descent steps on the planning objective; returns (code, objective, steps taken)."""
    hi = np.tile(np.array(grid.shape, float) - 1.0, len(code) // 2)
    f = lambda c, with_grad=True: plan_objective(c, grid, config, with_grad, width)  # noqa: E731
    steps = 0
    for _ in range(iterations):
        nxt = np.clip(descent_step(f, code, config.eta, config.backtrack, config.max_step), 0.0, hi)
        steps += 1
        moved = np.max(np.abs(nxt - code))
        code = nxt
        if moved < 1e-6:
            break
    return code, f(code, False)[0], steps


def _plan_from(code: np.ndarray, grid: GridWorld, config: PlannerConfig):
    """Coarse-to-fine refinement of one initial code, then snapping and repair.

    After the coarse stage the waypoints are subdivided ``levels`` times while
    the tube narrows from ``width`` to ``fine_width``. Blocked runs left in
    the snapped path go to ``local_repair``.
    """
    code, _, steps = refine_code(code, grid, config, config.max_iter)
    expansions = steps * (len(code) // 2)
    width = config.width
    for level in range(1, config.levels + 1):
        width = config.width * (config.fine_width / config.width) ** (level / config.levels)
        code = subdivide(code, grid)
        code, _, steps = refine_code(code, grid, config, config.fine_iter, width)
        expansions += steps * (len(code) // 2)
    path = snap_to_cells(polyline(code, grid), grid)
    if config.repair_radius > 0 and not is_valid_path(path, grid):
        path, work = local_repair(path, grid, config.repair_radius)
        expansions += work
    base = plan_objective(code, grid, config, False, width)[0]
    return code, path, base, expansions


def plan_half_cycle(grid: GridWorld, config: PlannerConfig = PlannerConfig(), seed: int = 0) -> PlanResult:
    """Refine several seeded path codes and keep the best snapped path.

    Restart 0 starts on the straight start-goal line, later ones on bowed
    lines (see ``initial_code``). Collision-free results beat colliding ones; then the lower
    objective wins, ties going to the earlier restart. Expansions count
    descent steps times waypoints over all restarts.
    """
    oracle_length, _, _ = bfs_shortest_path(grid)
    if tuple(grid.start) == tuple(grid.goal):
        return PlanResult([tuple(grid.start)], True, 0, 0, oracle_length, 0.0)
    rng = SeededRng(seed)
    best = None
    expansions = 0
    for r in range(config.restarts):
        code = initial_code(grid, config.m_waypoints, r, rng.spawn(r))
        code, path, obj, work = _plan_from(code, grid, config)
        expansions += work
        ok = is_valid_path(path, grid)
        key = (not ok, obj)
        if best is None or key < best[0]:
            best = (key, PlanResult(path, ok, len(path) - 1, 0, oracle_length, obj, polyline(code, grid)))
    result = best[1]
    result.expansions = expansions
    return result
