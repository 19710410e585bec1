"""Deterministic move planning: minimum-cost assignment, collision-aware
ordering, surplus ejection and whole-array plane-by-plane plans.

Plans are geometric and deterministic; stochastic execution lives in the
simulator.  All moves stay within their plane (inter-plane transfers are out
of scope).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .geometry import PlaneDecomposition, TrapLayout, Vec3


class PlanInfeasibleError(RuntimeError):
    """No executable move ordering exists (e.g. no free staging site)."""


class ExecutabilityError(RuntimeError):
    """A plan replay lifted from an empty trap or dropped onto a full one."""

    def __init__(self, message: str, move_index: int):
        super().__init__(message)
        self.move_index = move_index


@dataclass(frozen=True)
class PlannerPolicy:
    collision_radius_um: float = 2.0
    # occupied traps further than this from the MT plane never affect paths
    z_clearance_um: float = 17.0
    cost_metric: str = "euclidean"  # or "squared_euclidean"
    eject_margin_um: float = 20.0
    fov_lateral_um: float = 50.0

    def __post_init__(self):
        if self.cost_metric not in ("euclidean", "squared_euclidean"):
            raise ValueError("cost_metric must be 'euclidean' or 'squared_euclidean'")


@dataclass(frozen=True)
class Move:
    kind: str  # "transfer" | "eject"
    from_index: int
    to_index: Optional[int]  # None for ejections
    exit_um: Optional[tuple[float, float]]  # set for ejections
    path: tuple[Vec3, ...]

    def path_length_um(self) -> float:
        pts = self.path
        return sum(pts[i].distance_to(pts[i + 1]) for i in range(len(pts) - 1))


@dataclass(frozen=True)
class MovePlan:
    plane_index: int
    mt_z_um: float
    moves: tuple[Move, ...]


@dataclass(frozen=True)
class AssemblyPlan:
    plans: tuple[MovePlan, ...]

    @property
    def total_moves(self) -> int:
        return sum(len(p.moves) for p in self.plans)

    @property
    def total_path_um(self) -> float:
        return sum(m.path_length_um() for p in self.plans for m in p.moves)


def as_occupancy(values, n_traps: int) -> np.ndarray:
    occ = np.asarray(values, dtype=bool)
    if occ.shape != (n_traps,):
        raise ValueError(f"occupancy must have one flag per trap ({n_traps})")
    return occ


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Exact minimum-cost matching on a rectangular cost matrix.

    Rows are targets, columns are sources (n_cols >= n_rows); returns the
    chosen column for each row.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[1] < cost.shape[0]:
        raise ValueError("cost matrix needs at least as many sources as targets")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(cost.shape[0], dtype=np.intp)
    out[rows] = cols
    return out


def _as_points(points) -> np.ndarray:
    if len(points) and isinstance(points[0], Vec3):
        return np.array([[p.x, p.y, p.z] for p in points])
    return np.asarray(points, dtype=float)


def assignment_min_cost(sources, targets, metric: str = "euclidean") -> np.ndarray:
    """Match each target to a distinct source, minimising total path length.

    Sources sitting exactly on a target are matched to themselves first (zero
    cost); the rest is solved exactly.  Returns source indices, one per target.
    """
    src = _as_points(sources)
    tgt = _as_points(targets)
    if src.shape[0] < tgt.shape[0]:
        raise ValueError(f"need >= {tgt.shape[0]} sources, got {src.shape[0]}")
    diff = tgt[:, None, :] - src[None, :, :]
    cost = np.sqrt(np.einsum("tsk,tsk->ts", diff, diff))

    result = np.full(tgt.shape[0], -1, dtype=np.intp)
    taken = np.zeros(src.shape[0], dtype=bool)
    for t, s in zip(*np.nonzero(cost < 1e-12)):
        if result[t] < 0 and not taken[s]:
            result[t] = s
            taken[s] = True
    free_tgt = np.nonzero(result < 0)[0]
    free_src = np.nonzero(~taken)[0]
    if free_tgt.size:
        sub = cost[np.ix_(free_tgt, free_src)]
        if metric == "squared_euclidean":
            sub = sub**2
        cols = solve_assignment(sub)
        result[free_tgt] = free_src[cols]
    return result


# ---------------------------------------------------------------------------
# static corridor graph (cached per layout/plane/policy)
# ---------------------------------------------------------------------------

_GRAPH_REACH_UM = 8.0  # covers one lattice step or diagonal


@lru_cache(maxsize=128)
def _site_graph(layout: TrapLayout, hard_key: tuple, soft_key: tuple, radius: float):
    """Corridor graph over the in-plane *and* nearby other-plane trap sites.

    Trap sites sit in the middle of lattice corridors, so hopping across
    empty sites follows the corridors exactly; other-plane sites double as
    junction waypoints (passing over an empty trap is harmless).  Edges carry
    the traps that can block them: in-plane traps make an edge unusable when
    occupied, other-plane traps add a graded penalty (heavier the closer the
    crossing).  Occupancy is applied at query time, so the graph is static
    per plane and shared across planning calls.
    """
    xy = layout.positions()[:, :2]
    nodes = list(hard_key) + list(soft_key)
    pts = xy[nodes]
    d2 = np.einsum("ijk,ijk->ij", pts[:, None] - pts[None, :], pts[:, None] - pts[None, :])
    ii, jj = np.nonzero(np.triu(d2 <= _GRAPH_REACH_UM**2, k=1))
    edges = [(nodes[i], nodes[j]) for i, j in zip(ii, jj)]
    hard_set = set(hard_key)
    blocks: list[tuple[tuple[int, ...], tuple[tuple[int, float], ...]]] = []
    if edges:
        seg_a = xy[[i for i, _ in edges]]
        seg_b = xy[[j for _, j in edges]]
        dist = kernels.segment_point_distances(xy[nodes], seg_a, seg_b)
        close = dist < radius
        for e, (i, j) in enumerate(edges):
            hard, soft = [], []
            for k in np.nonzero(close[:, e])[0]:
                c = nodes[k]
                if c == i or c == j:
                    continue
                if c in hard_set:
                    hard.append(c)
                else:
                    soft.append((c, float(dist[k, e])))
            blocks.append((tuple(hard), tuple(soft)))
    return tuple(nodes), tuple(edges), tuple(blocks)


def _soft_penalty(d: float) -> float:
    """Graded cost for crossing within the collision radius of an occupied
    other-plane atom; closer passes cost more."""
    if d < 1.0:
        return 4000.0
    if d < 1.5:
        return 2000.0
    return 1000.0


# ---------------------------------------------------------------------------
# eject exit geometry
# ---------------------------------------------------------------------------

def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise.

    Collinear inputs yield the two extreme points; a single point yields
    itself.
    """
    pts = np.unique(np.round(points, 12), axis=0)
    if pts.shape[0] <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:  # collinear
        return np.array([pts[0], pts[-1]])
    return np.array(hull)


@lru_cache(maxsize=128)
def _eject_exits(layout: TrapLayout, idx_key: tuple, margin: float, fov: float) -> dict:
    """Exit point for every trap of a plane, cached per layout/plane."""
    xy = layout.positions()[:, :2]
    plane_xy = xy[list(idx_key)]
    return {
        i: tuple(_eject_exit_point(plane_xy, xy[i], margin, fov))
        for i in idx_key
    }


def _eject_exit_point(plane_xy: np.ndarray, p: np.ndarray, margin: float, fov: float) -> np.ndarray:
    """Nearest point ``margin`` um outside the convex hull of the plane's
    traps, clamped into the field of view."""
    hull = _convex_hull(plane_xy)
    if hull.shape[0] == 1:
        return np.clip(p + np.array([margin, 0.0]), -fov, fov)
    edges = [(hull[i], hull[(i + 1) % hull.shape[0]]) for i in range(hull.shape[0])]
    if hull.shape[0] == 2:
        edges = edges[:1]
    centroid = hull.mean(axis=0)
    best = None
    for a, b in edges:
        d = b - a
        dd = float(d @ d)
        t = float(np.clip((p - a) @ d / dd, 0.0, 1.0)) if dd > 0 else 0.0
        q = a + t * d
        dist = float(np.hypot(*(q - p)))
        if best is None or dist < best[0]:
            best = (dist, q, d)
    dist, q, d = best
    if dist > 1e-9:
        normal = (q - p) / dist  # p is inside the hull: outward direction
    else:
        normal = np.array([d[1], -d[0]])  # boundary point: edge normal
        norm = float(np.hypot(*normal))
        normal = normal / norm if norm > 0 else np.array([1.0, 0.0])
        if normal @ (q - centroid) < 0:
            normal = -normal
    return np.clip(q + margin * normal, -fov, fov)


# ---------------------------------------------------------------------------
# collision-aware scheduling
# ---------------------------------------------------------------------------

class _Scheduler:
    """Orders moves so replay never lifts from an empty trap, never drops onto
    an occupied one, and keeps the MT clear of occupied bystander traps in
    the plane being sorted.

    In-plane occupied traps are collision constraints: a blocked move is
    deferred when the blocker will be vacated by a pending move, otherwise the
    path is routed around it (single waypoint, then a corridor search through
    empty trap sites).  Occupied traps in *other* planes within the axial
    clearance are avoided on a best-effort basis only: crossing them costs
    crosstalk, not a collision, so they never make a plan infeasible.
    Occupied destinations (swap cycles) are broken by staging through the
    nearest free non-target site.
    """

    def __init__(self, layout: TrapLayout, occupancy: np.ndarray, mt_z: float,
                 policy: PlannerPolicy, stage_candidates: Sequence[int],
                 hard_indices: Sequence[int]):
        pos = layout.positions()
        self.layout = layout
        self.xy = pos[:, :2]
        self.occ = occupancy.copy()
        self.mt_z = mt_z
        self.policy = policy
        self.is_target = np.array([t.is_target for t in layout.traps])
        self.stage_candidates = list(stage_candidates)
        n = len(layout.traps)
        self.hard = np.zeros(n, dtype=bool)
        self.hard[list(hard_indices)] = True
        # other-plane traps near enough in z for the MT column to disturb them
        self.soft = (np.abs(pos[:, 2] - mt_z) < policy.z_clearance_um) & ~self.hard
        self.hard_key = tuple(int(i) for i in np.nonzero(self.hard)[0])
        self.soft_key = tuple(int(i) for i in np.nonzero(self.soft)[0])
        self.occ_hard = {int(i) for i in np.nonzero(self.occ & self.hard)[0]}
        self.occ_soft = {int(i) for i in np.nonzero(self.occ & self.soft)[0]}
        self._graph = None
        self.out: list[Move] = []

    # -- geometry helpers ---------------------------------------------------

    def _geom_candidates(self, segments):
        """Per segment: traps close enough to ever block it, split into
        (hard, soft) candidate lists; occupancy is applied at scheduling
        time.  One batched distance computation."""
        near = list(self.hard_key) + list(self.soft_key)
        if not near or not segments:
            return [([], []) for _ in segments]
        a = np.asarray([s[0] for s in segments])
        b = np.asarray([s[1] for s in segments])
        d = kernels.segment_point_distances(self.xy[near], a, b)
        close = d < self.policy.collision_radius_um
        n_hard = len(self.hard_key)
        out = []
        for j, (_, _, exclude) in enumerate(segments):
            ks = np.nonzero(close[:, j])[0]
            hard = [near[k] for k in ks if k < n_hard and near[k] not in exclude]
            soft = [near[k] for k in ks if k >= n_hard and near[k] not in exclude]
            out.append((hard, soft))
        return out

    def _detour(self, a_xy, b_xy, exclude, prefer_soft_clearance: bool = False):
        """Single-waypoint path clearing every occupied in-plane blocker, or
        None.  All candidates are tested in one batched distance computation.

        By default the first candidate also clearing the other-plane atoms
        wins; with ``prefer_soft_clearance`` the hard-clear candidate whose
        worst approach to an other-plane atom is largest wins instead.
        """
        occ_hard = [i for i in self.occ_hard if i not in exclude]
        occ_soft = [i for i in self.occ_soft if i not in exclude]
        if not occ_hard and not occ_soft:
            return [a_xy, b_xy]
        seg = b_xy - a_xy
        seg_len = float(np.hypot(*seg))
        if seg_len < 1e-12:
            return None
        perp = np.array([-seg[1], seg[0]]) / seg_len
        offs = np.array([1.0, 1.5, 2.2, 3.0, 4.5]) * self.policy.collision_radius_um
        fracs = np.array([0.5, 0.3, 0.7])
        anchors = a_xy[None, :] + fracs[:, None] * seg[None, :]
        cands = (anchors[None, :, None, :]
                 + (offs[:, None, None, None] * np.array([1.0, -1.0])[None, None, :, None])
                 * perp[None, None, None, :]).reshape(-1, 2)
        cands = cands[np.abs(cands).max(axis=1) <= self.policy.fov_lateral_um]
        if not cands.size:
            return None
        n = cands.shape[0]
        seg_a = np.concatenate([np.repeat(a_xy[None, :], n, 0), cands])
        seg_b = np.concatenate([cands, np.repeat(b_xy[None, :], n, 0)])
        radius = self.policy.collision_radius_um
        if occ_hard:
            dh = kernels.segment_point_distances(self.xy[occ_hard], seg_a, seg_b)
            hard_clear = (dh >= radius).all(axis=0)
        else:
            hard_clear = np.ones(2 * n, dtype=bool)
        if occ_soft:
            ds = kernels.segment_point_distances(self.xy[occ_soft], seg_a, seg_b)
            soft_min = ds.min(axis=0)
        else:
            soft_min = np.full(2 * n, np.inf)
        ok = hard_clear[:n] & hard_clear[n:]
        if not ok.any():
            return None
        path_soft_min = np.minimum(soft_min[:n], soft_min[n:])
        if prefer_soft_clearance:
            best = int(np.nonzero(ok)[0][np.argmax(path_soft_min[ok])])
            return [a_xy, cands[best], b_xy]
        fully = ok & (path_soft_min >= radius)
        if fully.any():
            return [a_xy, cands[int(np.nonzero(fully)[0][0])], b_xy]
        return None

    def _leg_cost(self, seg_a, seg_b, exclude):
        """(usable, penalty) for straight legs, batched: a leg is unusable
        when an occupied in-plane trap blocks it; occupied other-plane traps
        add their graded penalty."""
        n = seg_a.shape[0]
        occ_hard = [i for i in self.occ_hard if i not in exclude]
        occ_soft = [i for i in self.occ_soft if i not in exclude]
        radius = self.policy.collision_radius_um
        usable = np.ones(n, dtype=bool)
        penalty = np.zeros(n)
        if occ_hard:
            dh = kernels.segment_point_distances(self.xy[occ_hard], seg_a, seg_b)
            usable = (dh >= radius).all(axis=0)
        if occ_soft:
            ds = kernels.segment_point_distances(self.xy[occ_soft], seg_a, seg_b)
            for lo, hi, cost in ((0.0, 1.0, 4000.0), (1.0, 1.5, 2000.0), (1.5, 2.0, 1000.0)):
                penalty += cost * ((ds >= lo) & (ds < hi)).sum(axis=0)
        return usable, penalty

    def _corridor_route(self, a_xy, b_xy, exclude):
        """Cheapest route a -> (empty trap sites) -> b along corridor edges.

        Edges blocked by in-plane atoms are unusable; edges crossing near an
        occupied other-plane atom carry a graded penalty, so the route makes
        as few and as distant crossings as possible.  The direct a -> b leg
        competes on the same footing.  Returns None only when the in-plane
        constraints alone disconnect a from b.  Deterministic (heap ties
        break on node index).
        """
        if self._graph is None:
            self._graph = _site_graph(
                self.layout, self.hard_key, self.soft_key,
                self.policy.collision_radius_um,
            )
        nodes, edges, blocks = self._graph
        free_nodes = [s for s in nodes if not self.occ[s] and s not in exclude]
        # terminal legs a->s, s->b and the direct a->b
        seg_a = np.concatenate([
            np.repeat(a_xy[None, :], len(free_nodes), 0),
            self.xy[free_nodes] if free_nodes else np.zeros((0, 2)),
            a_xy[None, :],
        ])
        seg_b = np.concatenate([
            self.xy[free_nodes] if free_nodes else np.zeros((0, 2)),
            np.repeat(b_xy[None, :], len(free_nodes), 0),
            b_xy[None, :],
        ])
        usable, penalty = self._leg_cost(seg_a, seg_b, exclude)
        n_free = len(free_nodes)

        adj: dict[int, list[tuple[int, float]]] = {-1: [], -2: []}
        for s in free_nodes:
            adj[s] = []
        for k, s in enumerate(free_nodes):
            if usable[k]:
                adj[-1].append((s, 1.0 + penalty[k]))
            if usable[n_free + k]:
                adj[s].append((-2, 1.0 + penalty[n_free + k]))
        if usable[2 * n_free]:
            adj[-1].append((-2, 1.0 + penalty[2 * n_free]))
        free_set = set(free_nodes)
        for (i, j), (hard_blk, soft_blk) in zip(edges, blocks):
            if i not in free_set or j not in free_set:
                continue
            if any(c in self.occ_hard for c in hard_blk):
                continue
            cost = 1.0
            for c, d in soft_blk:
                if c in self.occ_soft:
                    cost += _soft_penalty(d)
            adj[i].append((j, cost))
            adj[j].append((i, cost))

        dist = {-1: 0.0}
        prev: dict[int, Optional[int]] = {-1: None}
        heap = [(0.0, -1)]
        settled = set()
        while heap:
            d, u = heapq.heappop(heap)
            if u in settled:
                continue
            settled.add(u)
            if u == -2:
                break
            for v, w in adj.get(u, ()):
                nd = d + w
                if nd < dist.get(v, math.inf) - 1e-9:
                    dist[v] = nd
                    prev[v] = u
                    heapq.heappush(heap, (nd, v))
        if -2 not in settled:
            return None
        hops = []
        v = -2
        while v is not None:
            hops.append(v)
            v = prev[v]
        hops = hops[::-1]
        return [a_xy] + [self.xy[s] for s in hops[1:-1]] + [b_xy]

    def _route(self, a_xy, b_xy, exclude, live_hard=None, live_soft=None):
        """Best path honouring the in-plane collision rule and crossing as
        few (and as distant) other-plane atoms as possible.

        Never returns None: when no conforming route exists the straight
        segment is accepted (a close pass costs crosstalk in the simulator,
        not a planning failure).
        """
        if live_hard is None or live_soft is None:
            live_hard = self._blockers_live(a_xy, b_xy, exclude, self.occ_hard)
            live_soft = self._blockers_live(a_xy, b_xy, exclude, self.occ_soft)
        if not live_hard and not live_soft:
            return [a_xy, b_xy]
        path = self._detour(a_xy, b_xy, exclude)
        if path is not None:
            return path
        path = self._corridor_route(a_xy, b_xy, exclude)
        if path is not None:
            return path
        if not live_hard:
            return [a_xy, b_xy]
        path = self._detour(a_xy, b_xy, exclude, prefer_soft_clearance=True)
        if path is not None:
            return path
        return [a_xy, b_xy]  # least-bad: accept the close pass

    def _blockers_live(self, a_xy, b_xy, exclude, occupied_set):
        idx = [i for i in occupied_set if i not in exclude]
        if not idx:
            return []
        d = kernels.segment_point_distances(
            self.xy[idx], np.asarray([a_xy]), np.asarray([b_xy])
        )[:, 0]
        return [c for c, dd in zip(idx, d) if dd < self.policy.collision_radius_um]

    # -- move emission ------------------------------------------------------

    def _set_occ(self, trap: int, value: bool) -> None:
        self.occ[trap] = value
        for mask, members in ((self.hard, self.occ_hard), (self.soft, self.occ_soft)):
            if mask[trap]:
                (members.add if value else members.discard)(trap)

    def _vec_path(self, waypoints) -> tuple[Vec3, ...]:
        return tuple(Vec3(float(w[0]), float(w[1]), self.mt_z) for w in waypoints)

    def _emit_transfer(self, src: int, dst: int, waypoints) -> None:
        self.out.append(
            Move(kind="transfer", from_index=src, to_index=dst, exit_um=None,
                 path=self._vec_path(waypoints))
        )
        self._set_occ(src, False)
        self._set_occ(dst, True)

    def _emit_eject(self, src: int, exit_xy: np.ndarray, waypoints) -> None:
        self.out.append(
            Move(kind="eject", from_index=src, to_index=None,
                 exit_um=(float(exit_xy[0]), float(exit_xy[1])),
                 path=self._vec_path(waypoints))
        )
        self._set_occ(src, False)

    # -- main loops ----------------------------------------------------------

    def schedule_transfers(self, pairs: Sequence[tuple[int, int]]) -> None:
        pending: list[tuple[int, int]] = list(pairs)
        srcs = {s for s, _ in pending}
        for _, dst in pending:
            if self.occ[dst] and dst not in srcs:
                raise PlanInfeasibleError(
                    f"destination trap {dst} is occupied and never vacated"
                )
        geom = self._geom_candidates(
            [(self.xy[s], self.xy[d], {s, d}) for s, d in pending]
        )
        while pending:
            pending_srcs = {s for s, _ in pending}
            progressed = False

            # matching order; defer moves whose blockers will be vacated
            for i, (src, dst) in enumerate(pending):
                if not self.occ[src] or self.occ[dst]:
                    continue
                live_hard = [b for b in geom[i][0] if self.occ[b]]
                if any(b in pending_srcs for b in live_hard):
                    continue  # wait for the blocker to move out of the way
                live_soft = [b for b in geom[i][1] if self.occ[b]]
                path = self._route(self.xy[src], self.xy[dst], {src, dst},
                                   live_hard, live_soft)
                self._emit_transfer(src, dst, path)
                pending.pop(i)
                geom.pop(i)
                progressed = True
                break
            if progressed:
                continue

            # swap/cycle: every executable move drops onto a pending source
            staged = False
            for i, (src, dst) in enumerate(pending):
                if not self.occ[src] or not self.occ[dst]:
                    continue
                stage = self._staging_site(src, pending)
                if stage is None:
                    raise PlanInfeasibleError("no free staging site available")
                path = self._route(self.xy[src], self.xy[stage], {src, stage})
                self._emit_transfer(src, stage, path)
                pending[i] = (stage, dst)
                geom[i] = self._geom_candidates(
                    [(self.xy[stage], self.xy[dst], {stage, dst})]
                )[0]
                staged = True
                break
            if staged:
                continue

            # deferral deadlock: force the first executable move through
            forced = False
            for i, (src, dst) in enumerate(pending):
                if not self.occ[src] or self.occ[dst]:
                    continue
                path = self._route(self.xy[src], self.xy[dst], {src, dst})
                self._emit_transfer(src, dst, path)
                pending.pop(i)
                geom.pop(i)
                forced = True
                break
            if not forced:
                raise PlanInfeasibleError("no executable move ordering exists")

    def schedule_ejections(self, sources: Sequence[int], margin: float,
                           plane_indices: Sequence[int]) -> None:
        exits = _eject_exits(self.layout, tuple(plane_indices), margin,
                             self.policy.fov_lateral_um)
        pending = [(src, np.asarray(exits[src])) for src in sources]
        geom = self._geom_candidates([(self.xy[s], e, {s}) for s, e in pending])
        while pending:
            pending_srcs = {s for s, _ in pending}
            progressed = False
            for i, (src, exit_xy) in enumerate(pending):
                if not self.occ[src]:
                    pending.pop(i)  # atom already gone; nothing to eject
                    geom.pop(i)
                    progressed = True
                    break
                live_hard = [b for b in geom[i][0] if self.occ[b]]
                if any(b in pending_srcs for b in live_hard):
                    continue
                live_soft = [b for b in geom[i][1] if self.occ[b]]
                path = self._route(self.xy[src], exit_xy, {src}, live_hard, live_soft)
                self._emit_eject(src, exit_xy, path)
                pending.pop(i)
                geom.pop(i)
                progressed = True
                break
            if progressed:
                continue
            # mutual blocking: force the first pending ejection through
            src, exit_xy = pending[0]
            path = self._route(self.xy[src], exit_xy, {src})
            self._emit_eject(src, exit_xy, path)
            pending.pop(0)
            geom.pop(0)

    def _staging_site(self, src: int, pending: Sequence[tuple[int, int]]) -> Optional[int]:
        reserved = {d for _, d in pending}
        best = None
        for cand in self.stage_candidates:
            if self.occ[cand] or self.is_target[cand] or cand in reserved or cand == src:
                continue
            dist = float(np.hypot(*(self.xy[cand] - self.xy[src])))
            if best is None or dist < best[0] - 1e-12:
                best = (dist, cand)
        return None if best is None else best[1]


def order_moves(
    matching: Sequence[tuple[int, int]],
    occupancy,
    layout: TrapLayout,
    policy: PlannerPolicy = PlannerPolicy(),
    mt_z: Optional[float] = None,
    stage_candidates: Optional[Sequence[int]] = None,
    hard_indices: Optional[Sequence[int]] = None,
) -> tuple[Move, ...]:
    """Order (source trap, destination trap) transfers into an executable,
    collision-aware sequence.

    ``hard_indices`` names the traps treated as collision obstacles (defaults
    to the traps within 1 um of the MT plane, i.e. the plane being sorted).
    """
    occ = as_occupancy(occupancy, len(layout.traps))
    for src, dst in matching:
        if src == dst:
            raise ValueError("transfers need distinct source and destination")
        if not occ[src]:
            raise ValueError(f"source trap {src} is empty")
    if mt_z is None:
        involved = {i for pair in matching for i in pair}
        mt_z = float(np.mean([layout.traps[i].position.z for i in involved])) if involved else 0.0
    if stage_candidates is None:
        stage_candidates = range(len(layout.traps))
    if hard_indices is None:
        z = layout.positions()[:, 2]
        hard_indices = [int(i) for i in np.nonzero(np.abs(z - mt_z) <= 1.0)[0]]
    sched = _Scheduler(layout, occ, mt_z, policy, stage_candidates, hard_indices)
    sched.schedule_transfers(matching)
    return tuple(sched.out)


# ---------------------------------------------------------------------------
# plane-level planning
# ---------------------------------------------------------------------------

def plan_plane(
    occupancy,
    layout: TrapLayout,
    decomposition: PlaneDecomposition,
    plane_index: int,
    policy: PlannerPolicy = PlannerPolicy(),
) -> MovePlan:
    """Assignment, ordered transfers, then surplus ejections for one plane."""
    occ = as_occupancy(occupancy, len(layout.traps))
    plane = decomposition.planes[plane_index]
    idx = list(plane.indices)
    xy = layout.positions()[:, :2]

    loaded = [i for i in idx if occ[i]]
    targets = [i for i in idx if layout.traps[i].is_target]
    if len(loaded) < len(targets):
        raise PlanInfeasibleError(
            f"plane {plane_index} holds {len(loaded)} atoms for {len(targets)} targets"
        )

    empty_targets = [t for t in targets if not occ[t]]
    free_sources = [s for s in loaded if not layout.traps[s].is_target]
    pairs: list[tuple[int, int]] = []
    used: set[int] = set()
    if empty_targets:
        match = assignment_min_cost(
            xy[free_sources], xy[empty_targets], metric=policy.cost_metric
        )
        for row, tgt in enumerate(empty_targets):
            src = free_sources[match[row]]
            pairs.append((src, tgt))
            used.add(src)
    surplus = [s for s in free_sources if s not in used]

    sched = _Scheduler(layout, occ, plane.z_center, policy,
                       stage_candidates=idx, hard_indices=idx)
    sched.schedule_transfers(pairs)
    sched.schedule_ejections(surplus, policy.eject_margin_um, idx)
    return MovePlan(plane_index=plane_index, mt_z_um=plane.z_center, moves=tuple(sched.out))


def plan_remove_all(
    occupancy,
    layout: TrapLayout,
    decomposition: PlaneDecomposition,
    plane_index: int,
    policy: PlannerPolicy = PlannerPolicy(),
) -> MovePlan:
    """One ejection per loaded trap in the plane."""
    occ = as_occupancy(occupancy, len(layout.traps))
    plane = decomposition.planes[plane_index]
    idx = list(plane.indices)
    xy = layout.positions()[:, :2]
    loaded = [i for i in idx if occ[i]]
    sched = _Scheduler(layout, occ, plane.z_center, policy,
                       stage_candidates=idx, hard_indices=idx)
    sched.schedule_ejections(loaded, policy.eject_margin_um, idx)
    return MovePlan(plane_index=plane_index, mt_z_um=plane.z_center, moves=tuple(sched.out))


def plan_assembly(
    occupancy,
    layout: TrapLayout,
    decomposition: PlaneDecomposition,
    policy: PlannerPolicy = PlannerPolicy(),
) -> AssemblyPlan:
    """Per-plane plans in ascending z order, one per plane with >= 1 target."""
    occ = as_occupancy(occupancy, len(layout.traps))
    plans = []
    for p, plane in enumerate(decomposition.planes):
        if not any(layout.traps[i].is_target for i in plane.indices):
            continue
        plans.append(plan_plane(occ, layout, decomposition, p, policy))
    return AssemblyPlan(plans=tuple(plans))


def apply_plan_lossless(occupancy, plan) -> np.ndarray:
    """Replay a MovePlan or AssemblyPlan with no losses, validating
    executability; returns the resulting occupancy."""
    moves: list[Move] = []
    if isinstance(plan, AssemblyPlan):
        for sub in plan.plans:
            moves.extend(sub.moves)
    else:
        moves = list(plan.moves)
    occ = np.array(occupancy, dtype=bool).copy()
    for k, move in enumerate(moves):
        if not occ[move.from_index]:
            raise ExecutabilityError(f"move {k} lifts from empty trap {move.from_index}", k)
        if move.kind == "transfer":
            if occ[move.to_index]:
                raise ExecutabilityError(f"move {k} drops onto occupied trap {move.to_index}", k)
            occ[move.from_index] = False
            occ[move.to_index] = True
        elif move.kind == "eject":
            occ[move.from_index] = False
        else:
            raise ValueError(f"unknown move kind {move.kind!r}")
    return occ


# ---------------------------------------------------------------------------
# JSON form
# ---------------------------------------------------------------------------

def plan_to_dict(plan: AssemblyPlan) -> dict:
    return {
        "planes": [
            {
                "plane": p.plane_index,
                "mt_z_um": p.mt_z_um,
                "moves": [
                    {
                        "kind": m.kind,
                        "from": m.from_index,
                        "to": m.to_index,
                        "exit_um": list(m.exit_um) if m.exit_um is not None else None,
                        "path_um": [[pt.x, pt.y] for pt in m.path],
                    }
                    for m in p.moves
                ],
            }
            for p in plan.plans
        ]
    }
