"""Canonical experiment configurations used by the docs, tests and examples."""

from __future__ import annotations

import numpy as np

from . import geometry as geo
from .physics import LossModel, default_loss_model
from .simulator import ExperimentConfig, SafetyParams, make_config


def bilayer72_config(seed: int = 0, loss: LossModel | None = None) -> ExperimentConfig:
    """The 72-atom offset-bilayer benchmark: two 6x6 layers, 4 um pitch,
    5 um layer separation, peripheral reservoirs, lateral safety radius 2 um
    (the offset guarantees a 2.83 um inter-layer lateral clearance)."""
    layout = geo.generate_preset(
        "bilayer_square_offset", n=(6, 6), spacing=4.0, dz=5.0, reservoir=True
    )
    return make_config(
        layout,
        epsilon_z=1.0,
        loss=loss if loss is not None else default_loss_model(),
        safety=SafetyParams(z_safe_um=17.0, r_safe_um=2.0),
        seed=seed,
    )


def four_plane_config(seed: int = 0, loss: LossModel | None = None) -> ExperimentConfig:
    """Four stacked 3x3 planes (36 targets) at the 17 um axial safety
    separation; the default multi-plane benchmark."""
    pts = np.array(
        [(i * 5.0, j * 5.0, k * 17.0) for k in range(4) for j in range(3) for i in range(3)]
    )
    pts -= pts.mean(axis=0)
    layout = geo.add_reservoir(
        geo.TrapLayout(
            tuple(geo.TrapSite(geo.Vec3(*map(float, p))) for p in pts), name="four_plane_3x3"
        )
    )
    return make_config(
        layout,
        epsilon_z=1.0,
        loss=loss if loss is not None else default_loss_model(),
        seed=seed,
    )


def one_plane_config(seed: int = 0, loss: LossModel | None = None) -> ExperimentConfig:
    """A single 6x6 plane (36 targets), the plane-count comparison baseline."""
    pts = np.array([(i * 5.0, j * 5.0, 0.0) for j in range(6) for i in range(6)])
    pts -= pts.mean(axis=0)
    layout = geo.add_reservoir(
        geo.TrapLayout(
            tuple(geo.TrapSite(geo.Vec3(*map(float, p))) for p in pts), name="one_plane_6x6"
        )
    )
    return make_config(
        layout,
        epsilon_z=1.0,
        loss=loss if loss is not None else default_loss_model(),
        seed=seed,
    )


# Desk-scale parameters per preset: small enough to simulate quickly, laid
# out so the default safety thresholds pass.
PRESET_EXPERIMENT_PARAMS: dict[str, dict] = {
    "cubic": dict(n=(3, 3, 2), spacing=(10.0, 10.0, 17.0)),
    "bilayer_square_offset": dict(n=(4, 4), spacing=4.0, dz=5.0),
    "bilayer_graphene": dict(n=(2, 2), bond=4.0, dz=17.0),
    "pyrochlore": dict(n=(1, 1, 1), cell=16.0),
    "ring_cylinder": dict(sites=8, rings=2, radius=12.0, dz=17.0),
    "trefoil_knot": dict(sites=16, scale=15.0),
}

# the trefoil is assembled as a single tilted plane; everything else uses
# the default 1 um plane clustering
PRESET_EPSILON_Z: dict[str, float] = {"trefoil_knot": 8.0}

PRESET_SAFETY: dict[str, SafetyParams] = {
    "bilayer_square_offset": SafetyParams(z_safe_um=17.0, r_safe_um=2.0),
}


def preset_experiment_config(
    preset: str, seed: int = 0, loss: LossModel | None = None
) -> ExperimentConfig:
    """Reservoir-backed, safety-passing experiment config for a preset."""
    params = PRESET_EXPERIMENT_PARAMS[preset]
    eps = PRESET_EPSILON_Z.get(preset, 1.0)
    layout = geo.generate_preset(preset, reservoir=True, epsilon_z=eps, **params)
    return make_config(
        layout,
        epsilon_z=eps,
        loss=loss if loss is not None else default_loss_model(),
        safety=PRESET_SAFETY.get(preset, SafetyParams()),
        seed=seed,
    )
