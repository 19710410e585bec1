import numpy as np
import pytest

from tweezer_forge import geometry as geo


@pytest.fixture
def bilayer_layout():
    return geo.generate_preset(
        "bilayer_square_offset", n=(6, 6), spacing=4.0, dz=5.0, reservoir=True
    )


@pytest.fixture
def grid_layout_46():
    """Single plane, 46 traps on a 5 um grid, alternating targets (23)."""
    pts = np.array([(i * 5.0, j * 5.0, 0.0) for j in range(5) for i in range(10)][:46])
    pts -= pts.mean(axis=0)
    traps = tuple(
        geo.TrapSite(geo.Vec3(*map(float, p)), is_target=(k % 2 == 0))
        for k, p in enumerate(pts)
    )
    return geo.TrapLayout(traps, name="grid46")


def random_valid_occupancy(layout, decomp, rng, p=0.5, max_tries=200):
    """A random draw with enough atoms in every plane, or None."""
    for _ in range(max_tries):
        occ = rng.random(len(layout.traps)) < p
        ok = all(
            sum(occ[i] for i in pl.indices)
            >= sum(layout.traps[i].is_target for i in pl.indices)
            for pl in decomp.planes
        )
        if ok:
            return occ
    return None
