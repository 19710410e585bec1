import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tweezer_forge import assembler as asm
from tweezer_forge import geometry as geo
from conftest import random_valid_occupancy


def line_layout(n, pitch=5.0, targets=None):
    pts = np.array([(i * pitch, 0.0, 0.0) for i in range(n)])
    pts -= pts.mean(axis=0)
    if targets is None:
        targets = [False] * n
    return geo.TrapLayout(
        tuple(geo.TrapSite(geo.Vec3(*map(float, p)), is_target=t) for p, t in zip(pts, targets))
    )


def brute_force_min_cost(cost):
    best = np.inf
    for perm in itertools.permutations(range(cost.shape[1]), cost.shape[0]):
        total = sum(cost[i, p] for i, p in enumerate(perm))
        best = min(best, total)
    return best


class TestAssignment:
    def test_worked_matrix(self):
        cost = np.array([[4, 1, 3], [2, 0, 5], [3, 2, 2]], dtype=float)
        cols = asm.solve_assignment(cost)
        assert list(cols) == [1, 0, 2]
        assert sum(cost[i, cols[i]] for i in range(3)) == 5

    def test_identity_when_on_targets(self):
        pts = [geo.Vec3(0, 0, 0), geo.Vec3(5, 0, 0), geo.Vec3(0, 5, 0)]
        match = asm.assignment_min_cost(pts, pts)
        assert list(match) == [0, 1, 2]

    def test_rectangular(self):
        sources = [geo.Vec3(0, 0, 0), geo.Vec3(10, 0, 0), geo.Vec3(20, 0, 0)]
        targets = [geo.Vec3(9, 0, 0)]
        match = asm.assignment_min_cost(sources, targets)
        assert list(match) == [1]

    def test_too_few_sources(self):
        with pytest.raises(ValueError):
            asm.assignment_min_cost([geo.Vec3(0, 0, 0)], [geo.Vec3(1, 0, 0), geo.Vec3(2, 0, 0)])

    @settings(max_examples=120, deadline=None)
    @given(
        seed=st.integers(0, 100_000),
        n_targets=st.integers(1, 7),
        extra=st.integers(0, 3),
    )
    def test_optimal_vs_brute_force(self, seed, n_targets, extra):
        rng = np.random.default_rng(seed)
        n_sources = n_targets + extra
        src = rng.uniform(-20, 20, (n_sources, 2))
        tgt = rng.uniform(-20, 20, (n_targets, 2))
        cost = np.linalg.norm(tgt[:, None, :] - src[None, :, :], axis=-1)
        match = asm.assignment_min_cost(src, tgt)
        got = sum(cost[i, match[i]] for i in range(n_targets))
        assert got == pytest.approx(brute_force_min_cost(cost), rel=1e-12)


class TestOrderMoves:
    def test_chain_dependency(self):
        lay = line_layout(3)
        occ = np.array([True, True, False])
        moves = asm.order_moves([(0, 1), (1, 2)], occ, lay)
        assert [(m.from_index, m.to_index) for m in moves] == [(1, 2), (0, 1)]
        asm.apply_plan_lossless(occ, asm.MovePlan(0, 0.0, moves))

    def test_swap_uses_staging(self):
        pts = [(0.0, 0.0, 0.0), (5.0, 0.0, 0.0), (0.0, 5.0, 0.0)]
        lay = geo.TrapLayout(
            tuple(geo.TrapSite(geo.Vec3(*p), is_target=(i < 2)) for i, p in enumerate(pts))
        )
        occ = np.array([True, True, False])
        moves = asm.order_moves([(0, 1), (1, 0)], occ, lay)
        assert len(moves) == 3
        assert {m.from_index for m in moves} == {0, 1, 2}
        out = asm.apply_plan_lossless(occ, asm.MovePlan(0, 0.0, moves))
        assert out[0] and out[1] and not out[2]

    def test_disjoint_moves_keep_matching_order(self):
        lay = line_layout(8, pitch=6.0)
        occ = np.array([True, False, True, False, True, False, False, False])
        matching = [(0, 1), (2, 3), (4, 5)]
        moves = asm.order_moves(matching, occ, lay)
        assert [(m.from_index, m.to_index) for m in moves] == matching

    def test_no_staging_site_raises(self):
        pts = [(0.0, 0.0, 0.0), (5.0, 0.0, 0.0)]
        lay = geo.TrapLayout(
            tuple(geo.TrapSite(geo.Vec3(*p), is_target=True) for p in pts)
        )
        occ = np.array([True, True])
        with pytest.raises(asm.PlanInfeasibleError, match="staging"):
            asm.order_moves([(0, 1), (1, 0)], occ, lay)

    def test_empty_source_rejected(self):
        lay = line_layout(2)
        with pytest.raises(ValueError):
            asm.order_moves([(0, 1)], np.array([False, False]), lay)

    def test_blocked_path_defers_until_vacated(self):
        # 1 sits on the straight path 0 -> 2; 1 moves away first
        lay = line_layout(4)
        occ = np.array([True, True, False, False])
        moves = asm.order_moves([(0, 2), (1, 3)], occ, lay)
        order = [(m.from_index, m.to_index) for m in moves]
        assert order.index((1, 3)) < order.index((0, 2))
        # after 1 vacates, 0 -> 2 may run straight through
        assert len(moves[order.index((0, 2))].path) == 2

    def test_permanent_blocker_routed_around(self):
        # 1 never moves, so 0 -> 2 must bend around it
        lay = line_layout(3)
        occ = np.array([True, True, False])
        moves = asm.order_moves([(0, 2)], occ, lay)
        assert len(moves) == 1
        path = moves[0].path
        assert len(path) >= 3
        pts = np.array([[p.x, p.y] for p in path])
        blocker = lay.positions()[1, :2]
        from tweezer_forge import kernels

        d = kernels.segment_point_distances(
            blocker[None, :], pts[:-1], pts[1:]
        ).min()
        assert d >= asm.PlannerPolicy().collision_radius_um - 1e-9


class TestPlanPlane:
    def test_already_assembled_empty_plan(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = np.array([t.is_target for t in grid_layout_46.traps])
        plan = asm.plan_plane(occ, grid_layout_46, dec, 0)
        assert plan.moves == ()
        assert plan.mt_z_um == dec.planes[0].z_center

    def test_nine_targets_eighteen_loaded(self):
        pts = np.array([(i * 5.0, j * 5.0, 0.0) for j in range(6) for i in range(6)])
        pts -= pts.mean(axis=0)
        lay = geo.TrapLayout(
            tuple(
                geo.TrapSite(geo.Vec3(*map(float, p)), is_target=(k < 9))
                for k, p in enumerate(pts)
            )
        )
        dec = geo.decompose_planes(lay, 1.0)
        rng = np.random.default_rng(0)
        occ = np.zeros(36, dtype=bool)
        occ[rng.choice(np.arange(9, 36), size=18, replace=False)] = True
        plan = asm.plan_plane(occ, lay, dec, 0)
        kinds = [m.kind for m in plan.moves]
        transfers = kinds.count("transfer")
        ejections = kinds.count("eject")
        assert transfers <= 9 and ejections == 9
        # ejections come after every transfer
        assert kinds == ["transfer"] * transfers + ["eject"] * ejections
        out = asm.apply_plan_lossless(occ, plan)
        assert all(out[:9]) and not any(out[9:])

    def test_insufficient_atoms(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = np.zeros(46, dtype=bool)
        occ[:10] = True
        with pytest.raises(asm.PlanInfeasibleError):
            asm.plan_plane(occ, grid_layout_46, dec, 0)

    def test_replay_fills_targets(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        rng = np.random.default_rng(11)
        for _ in range(20):
            occ = random_valid_occupancy(grid_layout_46, dec, rng)
            plan = asm.plan_plane(occ, grid_layout_46, dec, 0)
            out = asm.apply_plan_lossless(occ, plan)
            for i, trap in enumerate(grid_layout_46.traps):
                assert out[i] == trap.is_target

    def test_deterministic(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = random_valid_occupancy(grid_layout_46, dec, np.random.default_rng(5))
        a = asm.plan_plane(occ, grid_layout_46, dec, 0)
        b = asm.plan_plane(occ.copy(), grid_layout_46, dec, 0)
        assert json.dumps(asm.plan_to_dict(asm.AssemblyPlan((a,)))) == json.dumps(
            asm.plan_to_dict(asm.AssemblyPlan((b,)))
        )

    def test_eject_exits_outside_hull(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = np.ones(46, dtype=bool)  # every trap loaded: 23 surplus
        plan = asm.plan_plane(occ, grid_layout_46, dec, 0)
        ejections = [m for m in plan.moves if m.kind == "eject"]
        assert len(ejections) == 23
        hull_xy = grid_layout_46.positions()[:, :2]
        for m in ejections:
            exit_xy = np.array(m.exit_um)
            d = np.linalg.norm(hull_xy - exit_xy, axis=1).min()
            assert d >= 19.0  # ~20 um outside, interior points are further
            assert np.max(np.abs(exit_xy)) <= 50.0


class TestPlanAssembly:
    def test_single_plane(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = random_valid_occupancy(grid_layout_46, dec, np.random.default_rng(2))
        plan = asm.plan_assembly(occ, grid_layout_46, dec)
        assert len(plan.plans) == 1

    def test_bilayer(self, bilayer_layout):
        dec = geo.decompose_planes(bilayer_layout, 1.0)
        occ = random_valid_occupancy(bilayer_layout, dec, np.random.default_rng(3))
        plan = asm.plan_assembly(occ, bilayer_layout, dec)
        assert len(plan.plans) == 2
        assert [p.mt_z_um for p in plan.plans] == [pl.z_center for pl in dec.planes]
        out = asm.apply_plan_lossless(occ, plan)
        for i, trap in enumerate(bilayer_layout.traps):
            assert out[i] == trap.is_target

    def test_plane_isolation(self, bilayer_layout):
        dec = geo.decompose_planes(bilayer_layout, 1.0)
        occ = random_valid_occupancy(bilayer_layout, dec, np.random.default_rng(7))
        plan = asm.plan_assembly(occ, bilayer_layout, dec)
        for sub in plan.plans:
            members = set(dec.planes[sub.plane_index].indices)
            for m in sub.moves:
                assert m.from_index in members
                if m.to_index is not None:
                    assert m.to_index in members

    def test_atom_conservation(self, bilayer_layout):
        dec = geo.decompose_planes(bilayer_layout, 1.0)
        occ = random_valid_occupancy(bilayer_layout, dec, np.random.default_rng(9))
        plan = asm.plan_assembly(occ, bilayer_layout, dec)
        running = occ.copy()
        for sub in plan.plans:
            for m in sub.moves:
                before = running.sum()
                running = asm.apply_plan_lossless(running, asm.MovePlan(0, 0.0, (m,)))
                if m.kind == "transfer":
                    assert running.sum() == before
                else:
                    assert running.sum() == before - 1

    def test_totals(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = random_valid_occupancy(grid_layout_46, dec, np.random.default_rng(13))
        plan = asm.plan_assembly(occ, grid_layout_46, dec)
        assert plan.total_moves == sum(len(p.moves) for p in plan.plans)
        assert plan.total_path_um > 0


class TestRemoveAll:
    def test_empty_plane(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        plan = asm.plan_remove_all(np.zeros(46, dtype=bool), grid_layout_46, dec, 0)
        assert plan.moves == ()

    def test_23_of_46(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        occ = np.zeros(46, dtype=bool)
        occ[np.random.default_rng(1).choice(46, size=23, replace=False)] = True
        plan = asm.plan_remove_all(occ, grid_layout_46, dec, 0)
        assert len(plan.moves) == 23
        assert all(m.kind == "eject" for m in plan.moves)
        out = asm.apply_plan_lossless(occ, plan)
        assert not out.any()


class TestApplyPlan:
    def test_empty_plan_identity(self):
        occ = np.array([True, False, True])
        out = asm.apply_plan_lossless(occ, asm.MovePlan(0, 0.0, ()))
        np.testing.assert_array_equal(out, occ)

    def test_single_transfer(self):
        lay = line_layout(2)
        occ = np.array([True, False])
        moves = asm.order_moves([(0, 1)], occ, lay)
        out = asm.apply_plan_lossless(occ, asm.MovePlan(0, 0.0, moves))
        assert not out[0] and out[1]

    def test_violation_reports_move_index(self):
        path = (geo.Vec3(0, 0, 0), geo.Vec3(5, 0, 0))
        bad = asm.MovePlan(
            0, 0.0, (asm.Move("transfer", 0, 1, None, path),)
        )
        with pytest.raises(asm.ExecutabilityError) as err:
            asm.apply_plan_lossless(np.array([False, False]), bad)
        assert err.value.move_index == 0
