"""Lift a tracked 2D instrument tip onto the 3D vessel model.

The registered model fixes where every centerline point projects; the lifted
tip is the model point whose projection lands closest to the tracked 2D tip.
Near-ties (projective ambiguity between branches crossing in the image) are
resolved by 3D proximity to the previous tip, which keeps the lifted track
topologically consistent over time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .registration import RegistrationProblem, RegistrationState


class OffVesselError(RuntimeError):
    """The 2D tip projects too far from every model point."""


@dataclass(frozen=True)
class LiftedTip:
    address: tuple[int, int]
    position3: np.ndarray
    pixel_error: float
    bound_mm: float


def lateral_error_bound(radius_mm: float, spacing_mm: float) -> float:
    """Worst-case 3D error of a lifted tip whose 2D tip is exact.

    The true tip may sit anywhere in the lumen cross-section (radius) and the
    model discretizes the centerline (spacing); both add to the bound.
    """
    return radius_mm + spacing_mm


def lift(
    prob: RegistrationProblem,
    state: RegistrationState,
    tip2: np.ndarray,
    radii: np.ndarray,
    previous3: np.ndarray | None = None,
    gate_px: float = 30.0,
    tie_px: float = 2.0,
    spacing_mm: float = 1.0,
) -> LiftedTip:
    """Pick the model address whose projection best explains the 2D tip.

    ``radii`` holds the lumen radius per model point, aligned with
    ``prob.addresses``. Raises OffVesselError when no projection falls within
    ``gate_px`` of the tip.
    """
    if prob.addresses is None:
        raise ValueError("problem carries no addresses; build it with from_tree")
    tip2 = np.asarray(tip2, dtype=float).reshape(2)
    pix, depth = prob._project(state.pose, state.deformation.xyz)
    ok = depth > 0
    if not np.any(ok):
        raise OffVesselError("entire model is behind the camera")
    dist = np.full(len(pix), np.inf)
    dist[ok] = np.linalg.norm(pix[ok] - tip2, axis=1)
    best = float(dist.min())
    if best > gate_px:
        raise OffVesselError(f"nearest projection is {best:.1f}px away (gate {gate_px:.1f}px)")
    candidates = np.flatnonzero(dist <= best + tie_px)
    if previous3 is not None and len(candidates) > 1:
        world = prob.points3[candidates] + prob.center
        d3 = np.linalg.norm(world - np.asarray(previous3, dtype=float), axis=1)
        pick = candidates[int(np.argmin(d3))]
    else:
        pick = candidates[int(np.argmin(dist[candidates]))]
    address = prob.addresses[pick]
    position = prob.points3[pick] + prob.center
    return LiftedTip(
        address=address,
        position3=position,
        pixel_error=float(dist[pick]),
        bound_mm=lateral_error_bound(float(radii[pick]), spacing_mm),
    )
