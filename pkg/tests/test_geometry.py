import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tweezer_forge import geometry as geo


def pairwise_distances(layout):
    p = layout.positions()
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    return d


class TestPresets:
    def test_cubic_5x5x5(self):
        lay = geo.generate_preset("cubic", n=(5, 5, 5), spacing=(10.0, 10.0, 17.0))
        assert len(lay) == 125
        dec = geo.decompose_planes(lay, 1.0)
        assert [pl.z_center for pl in dec.planes] == [-34.0, -17.0, 0.0, 17.0, 34.0]

    def test_bilayer_offset_geometry(self):
        lay = geo.generate_preset("bilayer_square_offset", n=(6, 6), spacing=4.0, dz=5.0)
        assert len(lay) == 72
        pos = lay.positions()
        # second layer displaced by half the lattice spacing in x and y
        np.testing.assert_allclose(pos[36:] - pos[:36], [[2.0, 2.0, 5.0]] * 36)

    def test_trefoil_on_curve(self):
        lay = geo.generate_preset("trefoil_knot", sites=60, scale=20.0)
        assert len(lay) == 60
        pos = lay.positions()
        t = np.linspace(0.0, 2.0 * np.pi, 60, endpoint=False)
        raw = np.stack(
            [np.sin(t) + 2 * np.sin(2 * t), np.cos(t) - 2 * np.cos(2 * t), -np.sin(3 * t)],
            axis=1,
        )
        expected = (raw - raw.mean(axis=0)) * (20.0 / math.sqrt(5.0))
        expected -= expected.mean(axis=0) - pos.mean(axis=0)
        np.testing.assert_allclose(pos, expected, atol=1e-9)
        d = pairwise_distances(lay)
        np.fill_diagonal(d, np.inf)
        assert d.min() >= 3.0

    def test_preset_determinism(self):
        a = geo.generate_preset("pyrochlore", n=(1, 1, 1), cell=16.0)
        b = geo.generate_preset("pyrochlore", n=(1, 1, 1), cell=16.0)
        assert a == b

    def test_all_presets_valid(self):
        for name, params in [
            ("cubic", dict(n=(3, 3, 2), spacing=(10, 10, 17))),
            ("bilayer_square_offset", dict(n=(4, 4), spacing=4.0, dz=5.0)),
            ("bilayer_graphene", dict(n=(2, 2), bond=4.0, dz=17.0)),
            ("pyrochlore", dict(n=(1, 1, 1), cell=16.0)),
            ("ring_cylinder", dict(sites=8, rings=2, radius=12.0, dz=17.0)),
            ("trefoil_knot", dict(sites=20, scale=15.0)),
        ]:
            lay = geo.generate_preset(name, **params)
            assert len(lay) >= 1

    def test_bad_parameters_rejected(self):
        with pytest.raises(geo.LayoutError):
            geo.generate_preset("cubic", n=(0, 3, 3), spacing=(10, 10, 17))
        with pytest.raises(geo.LayoutError):
            geo.generate_preset("cubic", n=(3, 3, 3), spacing=(-1, 10, 17))
        with pytest.raises(geo.LayoutError):
            geo.generate_preset("nonsense")

    def test_too_dense_rejected(self):
        with pytest.raises(geo.LayoutError, match="apart"):
            geo.generate_preset("cubic", n=(3, 3, 1), spacing=(2.0, 10.0, 17.0))

    def test_out_of_fov_rejected(self):
        with pytest.raises(geo.LayoutError, match="field of view"):
            geo.generate_preset("cubic", n=(11, 1, 1), spacing=(11.0, 10.0, 17.0))

    def test_reservoir_doubles_planes(self):
        lay = geo.generate_preset("cubic", n=(3, 3, 2), spacing=(10, 10, 17), reservoir=True)
        dec = geo.decompose_planes(lay, 1.0)
        for pl in dec.planes:
            targets = sum(1 for i in pl.indices if lay.traps[i].is_target)
            assert len(pl.indices) >= 2 * targets


class TestLayoutIO:
    def test_round_trip(self, tmp_path):
        lay = geo.generate_preset("bilayer_graphene", n=(2, 2), bond=4.0, dz=17.0)
        path = tmp_path / "layout.json"
        geo.save_layout(lay, path)
        again = geo.load_layout(path)
        assert again == geo.TrapLayout(
            tuple(geo.TrapSite(t.position, t.is_target) for t in lay.traps), name=lay.name
        )

    def test_two_valid_traps(self, tmp_path):
        path = tmp_path / "two.json"
        path.write_text(json.dumps({
            "name": "pair",
            "traps": [
                {"x_um": 0.0, "y_um": 0.0, "z_um": 0.0, "is_target": True},
                {"x_um": 5.0, "y_um": 0.0, "z_um": 0.0, "is_target": False},
            ],
        }))
        lay = geo.load_layout(path)
        assert len(lay) == 2 and lay.n_targets == 1

    def test_duplicate_position_names_pair(self, tmp_path):
        path = tmp_path / "dup.json"
        path.write_text(json.dumps({
            "name": "dup",
            "traps": [
                {"x_um": 1.0, "y_um": 2.0, "z_um": 0.0, "is_target": True},
                {"x_um": 1.0, "y_um": 2.0, "z_um": 0.0, "is_target": True},
            ],
        }))
        with pytest.raises(geo.LayoutError, match="0 and 1"):
            geo.load_layout(path)

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({
            "name": "bad",
            "traps": [{"x_um": 0, "y_um": 0, "z_um": 0, "is_target": True, "plane_index": 3}],
        }))
        with pytest.raises(geo.LayoutError, match="exactly the keys"):
            geo.load_layout(path)

    def test_parse_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(geo.LayoutError, match="cannot parse"):
            geo.load_layout(path)


class TestDecomposition:
    def test_bilayer_two_planes(self):
        lay = geo.generate_preset("bilayer_square_offset", n=(3, 3), spacing=4.0, dz=5.0)
        dec = geo.decompose_planes(lay, 1.0)
        assert dec.n_planes == 2

    def test_single_plane(self):
        lay = geo.generate_preset("cubic", n=(3, 3, 1), spacing=(10, 10, 17))
        assert geo.decompose_planes(lay, 1.0).n_planes == 1

    def test_five_planes_sorted(self):
        lay = geo.generate_preset("cubic", n=(5, 5, 5), spacing=(10, 10, 17))
        dec = geo.decompose_planes(lay, 1.0)
        zs = [pl.z_center for pl in dec.planes]
        assert zs == sorted(zs) and dec.n_planes == 5

    def test_partition(self):
        lay = geo.generate_preset("pyrochlore", n=(1, 1, 1), cell=16.0)
        dec = geo.decompose_planes(lay, 1.0)
        seen = [i for pl in dec.planes for i in pl.indices]
        assert sorted(seen) == list(range(len(lay)))

    def test_smear_error(self):
        traps = tuple(
            geo.TrapSite(geo.Vec3(4.0 * i, 0.0, 0.8 * i)) for i in range(6)
        )
        with pytest.raises(geo.DecompositionError):
            geo.decompose_planes(geo.TrapLayout(traps), 1.0)


class TestSafety:
    def test_axially_aligned_conflict(self):
        lay = geo.TrapLayout((geo.TrapSite(geo.Vec3(0, 0, 0)), geo.TrapSite(geo.Vec3(0, 0, 10))))
        rep = geo.validate_mt_safety(lay, geo.decompose_planes(lay, 1.0), 17.0, 3.0)
        assert not rep.passed and len(rep.conflicts) == 1
        c = rep.conflicts[0]
        assert c.axial_um == pytest.approx(10.0) and c.lateral_um == pytest.approx(0.0)

    def test_offset_bilayer_passes(self):
        lay = geo.generate_preset("bilayer_square_offset", n=(6, 6), spacing=4.0, dz=5.0)
        rep = geo.validate_mt_safety(lay, geo.decompose_planes(lay, 1.0), 17.0, 2.0)
        assert rep.passed

    def test_single_plane_passes(self, grid_layout_46):
        dec = geo.decompose_planes(grid_layout_46, 1.0)
        assert geo.validate_mt_safety(grid_layout_46, dec, 17.0, 3.0).passed

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(4)
        grid = np.array(
            [(x, y, z) for x in (-20, -10, 0, 10, 20) for y in (-20, 0, 20) for z in (-20, 0, 20)],
            dtype=float,
        )
        pts = grid[rng.choice(len(grid), size=12, replace=False)]
        lay = geo.TrapLayout(tuple(geo.TrapSite(geo.Vec3(*map(float, p))) for p in pts))
        dec = geo.decompose_planes(lay, 1.0)
        counts = []
        for z_safe, r_safe in [(5, 2), (10, 2), (10, 4), (17, 4), (17, 6)]:
            counts.append(len(geo.validate_mt_safety(lay, dec, z_safe, r_safe).conflicts))
        assert counts == sorted(counts)

    def test_offset_bilayers_pass_any_dz(self):
        for dz in (4.0, 6.0, 10.0, 16.0):
            lay = geo.generate_preset("bilayer_square_offset", n=(4, 4), spacing=6.0, dz=dz)
            rep = geo.validate_mt_safety(lay, geo.decompose_planes(lay, 1.0), 17.0, 2.0)
            assert rep.passed, dz


class TestRotation:
    def test_identity(self, bilayer_layout):
        rotated = geo.rotate_layout(bilayer_layout, "x", 0.0)
        np.testing.assert_allclose(rotated.positions(), bilayer_layout.positions())

    def test_convention_two_45s_make_90(self):
        lay = geo.TrapLayout((
            geo.TrapSite(geo.Vec3(0, -2, 0)), geo.TrapSite(geo.Vec3(0, 2, 0)),
        ))
        once = geo.rotate_layout(lay, "x", 45.0)
        twice = geo.rotate_layout(once, "x", 45.0)
        # (0, 1, 0) direction maps onto (0, 0, 1) about the centroid
        rel = twice.positions()[1] - twice.positions().mean(axis=0)
        np.testing.assert_allclose(rel, [0.0, 0.0, 2.0], atol=1e-12)

    def test_angle_limit(self, bilayer_layout):
        with pytest.raises(ValueError):
            geo.rotate_layout(bilayer_layout, "x", 46.0)

    def test_fov_error(self):
        lay = geo.TrapLayout((
            geo.TrapSite(geo.Vec3(0, 0, -99)), geo.TrapSite(geo.Vec3(0, 0, 99)),
        ))
        with pytest.raises(geo.LayoutError):
            geo.rotate_layout(lay, "x", 40.0)

    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        axis=st.sampled_from(["x", "y"]),
        angle=st.floats(-45.0, 45.0),
    )
    def test_rigidity(self, seed, axis, angle):
        rng = np.random.default_rng(seed)
        grid = np.array(
            [(x, y, z) for x in (-16, -8, 0, 8, 16) for y in (-16, 0, 16) for z in (-16, 0, 16)],
            dtype=float,
        )
        pts = grid[rng.choice(len(grid), size=8, replace=False)]
        lay = geo.TrapLayout(tuple(geo.TrapSite(geo.Vec3(*map(float, p))) for p in pts))
        try:
            rotated = geo.rotate_layout(lay, axis, angle)
        except geo.LayoutError:
            return  # rotated out of the field of view: nothing to check
        before = pairwise_distances(lay)
        after = pairwise_distances(rotated)
        assert np.max(np.abs(before - after)) <= 1e-9


class TestSuggestRotation:
    def test_already_safe(self, grid_layout_46):
        fix = geo.suggest_rotation(grid_layout_46, 17.0, 3.0)
        assert fix is not None and fix.angle_deg == 0.0

    def test_aligned_pair_needs_17_5(self):
        lay = geo.TrapLayout((geo.TrapSite(geo.Vec3(0, 0, 0)), geo.TrapSite(geo.Vec3(0, 0, 10))))
        dec = geo.decompose_planes(lay, 1.0)
        fix = geo.suggest_rotation(lay, 17.0, 3.0, decomposition=dec)
        # smallest angle with 10*sin(theta) >= 3 is 17.46 deg, next grid step 17.5
        assert fix is not None and abs(fix.angle_deg) == pytest.approx(17.5)
        rotated = geo.rotate_layout(lay, fix.axis, fix.angle_deg)
        assert geo.validate_mt_safety(rotated, dec, 17.0, 3.0).passed

    def test_hopeless_pair(self):
        lay = geo.TrapLayout((geo.TrapSite(geo.Vec3(0, 0, 0)), geo.TrapSite(geo.Vec3(0, 0, 1))))
        dec = geo.decompose_planes(lay, 0.25)
        assert geo.suggest_rotation(lay, 17.0, 3.0, decomposition=dec) is None
