"""Non-rigid 3D-2D registration of a vessel tree to projected centerlines.

The data term scores each projected 3D centerline point against its nearby 2D
points through Gaussian kernels. A pose prior anchors the rigid estimate to
its initialization and a per-point displacement field with magnitude,
along-branch, and cross-branch smoothness penalties captures deformation. The
composite loss

    -(data term) + pose_prior * anchor + deform * regularizer

is minimized by iteratively reweighted least squares: kernel weights are
frozen at the current state, the resulting weighted least-squares surrogate is
stepped by Levenberg-Marquardt, and the kernel bandwidth is halved on a fixed
schedule down to a floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .geometry import CameraModel, Pose, se3_exp, se3_log, se3_right_jacobian_inv
from .vessel_model import VesselTree


# Model coordinates are millimeters; the pose anchor is calibrated for SI
# units (meters, radians), so the translation half of the relative twist is
# scaled by 1e-3 inside the prior. Without this a 100-weighted anchor would
# overpower the data term for millimeter-scale corrections.
_PRIOR_SCALE = np.array([1e-3, 1e-3, 1e-3, 1.0, 1.0, 1.0])


@dataclass(frozen=True)
class Weights:
    """Energy weights; all must be non-negative."""

    pose_prior: float = 100.0
    deform: float = 1.0
    deform_magnitude: float = 0.1
    deform_chain: float = 10.0
    deform_cross: float = 1.0

    def __post_init__(self) -> None:
        for name in ("pose_prior", "deform", "deform_magnitude", "deform_chain", "deform_cross"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"weight {name} must be non-negative")


@dataclass(frozen=True)
class SolverConfig:
    max_outer_iters: int = 80
    anneal_every: int = 5
    inner_iters: int = 2
    tol: float = 1e-6
    bandwidth_floor_px: float = 2.0
    bandwidth_init_scale: float = 1.0
    lm_damping_init: float = 1e-3
    lm_damping_up: float = 10.0
    lm_damping_down: float = 10.0
    lm_damping_cap: float = 1e8
    optimize_deformation: bool = True
    translation_first: bool = True


@dataclass
class DeformationField:
    """Per-point displacements stored as 4-vectors whose last component is 0."""

    displacements: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.displacements, dtype=float)
        if d.ndim != 2 or d.shape[1] != 4:
            raise ValueError("displacements must have shape (N, 4)")
        if np.any(d[:, 3] != 0.0):
            raise ValueError("last displacement component must stay 0")
        self.displacements = d

    @staticmethod
    def zeros(n: int) -> "DeformationField":
        return DeformationField(np.zeros((n, 4)))

    @property
    def xyz(self) -> np.ndarray:
        return self.displacements[:, :3]


@dataclass
class RegistrationState:
    """Solver state: pose acts on centered model points, see RegistrationProblem."""

    pose: Pose
    deformation: DeformationField
    bandwidth_px: float
    iteration: int = 0
    objective: float = float("nan")
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnergyBreakdown:
    data: float
    pose_prior: float
    deform: float
    behind_camera: tuple[int, ...] = ()

    def composite(self, weights: Weights) -> float:
        return -self.data + weights.pose_prior * self.pose_prior + weights.deform * self.deform


@dataclass(frozen=True)
class CorrespondenceMap:
    """Per-model-point nearest 2D match; -1 marks points behind the camera."""

    matched: np.ndarray
    distances_px: np.ndarray

    @property
    def excluded(self) -> np.ndarray:
        return np.flatnonzero(self.matched < 0)

    def mean_distance_px(self) -> float:
        ok = self.matched >= 0
        if not np.any(ok):
            return float("nan")
        return float(self.distances_px[ok].mean())


class RegistrationProblem:
    """Static data of one registration: model points, image points, weights.

    Model points are centered on their centroid so the rigid pose rotates the
    cloud about its own center; ``center`` restores world coordinates via
    ``world = centered + center`` (after any calibration transform).
    """

    def __init__(
        self,
        points3: np.ndarray,
        points2: np.ndarray,
        cam: CameraModel,
        init_pose: Pose,
        weights: Weights | None = None,
        per_point: np.ndarray | None = None,
        chain_pairs: np.ndarray | None = None,
        cross_pairs: np.ndarray | None = None,
        addresses: list[tuple[int, int]] | None = None,
        center: np.ndarray | None = None,
        k_corr: int = 8,
        k_omega: int = 4,
    ):
        self.points3 = np.asarray(points3, dtype=float).reshape(-1, 3)
        self.points2 = np.asarray(points2, dtype=float).reshape(-1, 2)
        n = len(self.points3)
        if n < 6:
            raise ValueError("need at least 6 model points")
        if len(self.points2) < 1:
            raise ValueError("need at least one 2D point")
        self.cam = cam
        self.init_pose = init_pose
        self.weights = weights or Weights()
        self.per_point = np.ones(n) if per_point is None else np.asarray(per_point, dtype=float).reshape(n)
        if np.any(self.per_point < 0.0):
            raise ValueError("per-point weights must be non-negative")
        self.addresses = addresses
        self.center = np.zeros(3) if center is None else np.asarray(center, dtype=float).reshape(3)
        self.k_requested = int(k_corr)
        self.k_corr = min(self.k_requested, len(self.points2))
        if chain_pairs is None:
            chain_pairs = np.empty((0, 2), dtype=int)
        self.chain_pairs = np.asarray(chain_pairs, dtype=int).reshape(-1, 2)
        if cross_pairs is None and n > 1:
            k = min(k_omega + 1, n)
            _, idx = cKDTree(self.points3).query(self.points3, k=k)
            rows = np.repeat(np.arange(n), k - 1)
            cols = idx[:, 1:].ravel()
            cross_pairs = np.stack([rows, cols], axis=1)
        self.cross_pairs = (
            np.empty((0, 2), dtype=int) if cross_pairs is None else np.asarray(cross_pairs, dtype=int).reshape(-1, 2)
        )
        self.kd2 = cKDTree(self.points2)

    @staticmethod
    def from_tree(
        tree: VesselTree,
        points2: np.ndarray,
        cam: CameraModel,
        init_pose_world: Pose,
        calib: Pose | None = None,
        weights: Weights | None = None,
        per_point: np.ndarray | None = None,
        k_corr: int = 8,
        k_omega: int = 4,
    ) -> "RegistrationProblem":
        """Build a problem over every centerline point of the tree.

        ``init_pose_world`` maps tree coordinates (after ``calib``) to the
        camera frame; it is converted to act on centered points internally.
        """
        world, addresses = tree.flat_points()
        if calib is not None:
            world = calib.apply(world)
        center = world.mean(axis=0)
        centered = world - center
        chain: list[tuple[int, int]] = []
        offset = 0
        for bid in sorted(tree.branches):
            npts = len(tree.branches[bid].points)
            for k in range(npts):
                if k > 0:
                    chain.append((offset + k, offset + k - 1))
                if k + 1 < npts:
                    chain.append((offset + k, offset + k + 1))
            offset += npts
        init_centered = _pose_from_world(init_pose_world, center)
        return RegistrationProblem(
            centered,
            points2,
            cam,
            init_centered,
            weights=weights,
            per_point=per_point,
            chain_pairs=np.array(chain, dtype=int),
            addresses=addresses,
            center=center,
            k_corr=k_corr,
            k_omega=k_omega,
        )

    def with_frame(self, points2: np.ndarray, init_pose_world: Pose) -> "RegistrationProblem":
        """Same model rebound to a new image and initialization (warm start)."""
        return RegistrationProblem(
            self.points3,
            points2,
            self.cam,
            _pose_from_world(init_pose_world, self.center),
            weights=self.weights,
            per_point=self.per_point,
            chain_pairs=self.chain_pairs,
            cross_pairs=self.cross_pairs,
            addresses=self.addresses,
            center=self.center,
            k_corr=self.k_requested,
        )

    def pose_from_world(self, world_pose: Pose) -> Pose:
        return _pose_from_world(world_pose, self.center)

    def pose_to_world(self, centered_pose: Pose) -> Pose:
        return Pose(centered_pose.rotation, centered_pose.translation - centered_pose.rotation @ self.center)

    def initial_state(self, bandwidth_px: float | None = None) -> RegistrationState:
        bw = self._initial_bandwidth() if bandwidth_px is None else bandwidth_px
        return RegistrationState(self.init_pose, DeformationField.zeros(len(self.points3)), bw)

    def _initial_bandwidth(self, floor: float = 2.0) -> float:
        pix, depth = self._project(self.init_pose, np.zeros((len(self.points3), 3)))
        ok = depth > 0
        if not np.any(ok):
            return floor
        d, _ = self.kd2.query(pix[ok], k=self.k_corr)
        return max(float(np.max(d)), floor)

    def _project(self, pose: Pose, disp_xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = (self.points3 + disp_xyz) @ pose.rotation.T + pose.translation
        h = z @ self.cam.intrinsics[:, :3].T + self.cam.intrinsics[:, 3]
        depth = h[:, 2].copy()
        pix = np.full((len(h), 2), np.nan)
        ok = depth > 0
        pix[ok] = h[ok, :2] / depth[ok, None]
        return pix, depth


def _pose_from_world(world_pose: Pose, center: np.ndarray) -> Pose:
    return Pose(world_pose.rotation, world_pose.rotation @ center + world_pose.translation)


# ---------------------------------------------------------------------------
# energies


def _match_neighbors(prob: RegistrationProblem, pix: np.ndarray, depth: np.ndarray):
    """k nearest 2D points for every visible projection."""
    ok = depth > 0
    idx = np.full((len(pix), prob.k_corr), -1, dtype=int)
    dist = np.full((len(pix), prob.k_corr), np.nan)
    if np.any(ok):
        d, j = prob.kd2.query(pix[ok], k=prob.k_corr)
        if prob.k_corr == 1:
            d = d[:, None]
            j = j[:, None]
        idx[ok] = j
        dist[ok] = d
    return idx, dist, ok


def eval_objective(prob: RegistrationProblem, state: RegistrationState) -> EnergyBreakdown:
    """Energy terms at the given state, using its kernel bandwidth."""
    disp = state.deformation.xyz
    pix, depth = prob._project(state.pose, disp)
    idx, dist, ok = _match_neighbors(prob, pix, depth)
    ell2 = 2.0 * state.bandwidth_px ** 2
    data = float(np.sum(prob.per_point[ok, None] * np.exp(-dist[ok] ** 2 / ell2)))
    psi = _PRIOR_SCALE * se3_log(prob.init_pose.inverse().compose(state.pose))
    prior = float(psi @ psi)
    w = prob.weights
    reg = w.deform_magnitude * float(np.sum(disp * disp))
    if len(prob.chain_pairs):
        diff = disp[prob.chain_pairs[:, 0]] - disp[prob.chain_pairs[:, 1]]
        reg += w.deform_chain * float(np.sum(diff * diff))
    if len(prob.cross_pairs):
        diff = disp[prob.cross_pairs[:, 0]] - disp[prob.cross_pairs[:, 1]]
        reg += w.deform_cross * float(np.sum(diff * diff))
    return EnergyBreakdown(data, prior, reg, tuple(np.flatnonzero(~ok)))


def correspondences(prob: RegistrationProblem, state: RegistrationState) -> CorrespondenceMap:
    """Nearest 2D point for every visible model point at the current state."""
    pix, depth = prob._project(state.pose, state.deformation.xyz)
    ok = depth > 0
    matched = np.full(len(pix), -1, dtype=int)
    distances = np.full(len(pix), np.nan)
    if np.any(ok):
        d, j = prob.kd2.query(pix[ok], k=1)
        matched[ok] = j
        distances[ok] = d
    return CorrespondenceMap(matched, distances)


def reprojection_rmse(prob: RegistrationProblem, state: RegistrationState, reference_pix: np.ndarray) -> float:
    """RMSE between current projections and reference pixels over visible points."""
    pix, depth = prob._project(state.pose, state.deformation.xyz)
    ok = depth > 0
    err = pix[ok] - np.asarray(reference_pix, dtype=float)[ok]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


# ---------------------------------------------------------------------------
# IRLS + Levenberg-Marquardt solver

_DIAG_FLOOR = 1e-12


def _log_to_init(prob: RegistrationProblem, pose: Pose) -> np.ndarray:
    return se3_log(prob.init_pose.inverse().compose(pose))


def _surrogate_cost(
    prob: RegistrationProblem,
    pose: Pose,
    disp: np.ndarray,
    idx: np.ndarray,
    gamma: np.ndarray,
    ell: float,
) -> float:
    """Weighted least-squares surrogate with frozen kernel weights."""
    pix, depth = prob._project(pose, disp)
    ok = (depth > 0) & np.all(idx >= 0, axis=1)
    cost = 0.0
    if np.any(ok):
        diffs = pix[ok, None, :] - prob.points2[idx[ok]]
        cost += float(np.sum(gamma[ok] * np.sum(diffs * diffs, axis=2))) / (2.0 * ell * ell)
    psi = _PRIOR_SCALE * _log_to_init(prob, pose)
    w = prob.weights
    cost += w.pose_prior * float(psi @ psi)
    cost += w.deform * w.deform_magnitude * float(np.sum(disp * disp))
    if len(prob.chain_pairs):
        diff = disp[prob.chain_pairs[:, 0]] - disp[prob.chain_pairs[:, 1]]
        cost += w.deform * w.deform_chain * float(np.sum(diff * diff))
    if len(prob.cross_pairs):
        diff = disp[prob.cross_pairs[:, 0]] - disp[prob.cross_pairs[:, 1]]
        cost += w.deform * w.deform_cross * float(np.sum(diff * diff))
    return cost


def _projection_jacobians(prob: RegistrationProblem, pose: Pose, disp: np.ndarray):
    """Per-point pixel positions, depths, and 2x3 pixel-vs-camera-point blocks."""
    y = prob.points3 + disp
    z = y @ pose.rotation.T + pose.translation
    a = prob.cam.intrinsics[:, :3]
    h = z @ a.T + prob.cam.intrinsics[:, 3]
    depth = h[:, 2].copy()
    ok = depth > 0
    pix = np.full((len(h), 2), np.nan)
    pix[ok] = h[ok, :2] / depth[ok, None]
    # d(pix)/dz = (A[:2] * h2 - h[:2] outer A[2]) / h2^2
    p_blocks = np.zeros((len(h), 2, 3))
    if np.any(ok):
        h2 = depth[ok]
        p_blocks[ok] = (a[None, :2, :] * h2[:, None, None] - h[ok][:, :2, None] * a[None, 2, :]) / (
            h2 ** 2
        )[:, None, None]
    return y, pix, depth, p_blocks


def _data_blocks(prob, pose, disp, idx, gamma, ell):
    """Per-point quantities entering the normal equations for the data term.

    Returns (s, gvec, G, H, ok) where for each visible matched point i:
    s_i    = sum_j gamma_ij / (2 ell^2)
    gvec_i = sum_j gamma_ij (u_i - q_j) / (2 ell^2)
    G_i    = 2x6 pose Jacobian of u_i,  H_i = 2x3 displacement Jacobian.
    """
    y, pix, depth, p_blocks = _projection_jacobians(prob, pose, disp)
    n = len(y)
    ok = (depth > 0) & np.all(idx >= 0, axis=1)
    inv2l2 = 1.0 / (2.0 * ell * ell)
    s = np.zeros(n)
    gvec = np.zeros((n, 2))
    if np.any(ok):
        g = gamma[ok] * inv2l2
        s[ok] = g.sum(axis=1)
        diffs = pix[ok, None, :] - prob.points2[idx[ok]]
        gvec[ok] = np.sum(g[:, :, None] * diffs, axis=1)
    rot = pose.rotation
    h_blocks = p_blocks @ rot
    g_blocks = np.zeros((n, 2, 6))
    g_blocks[:, :, :3] = h_blocks
    # column block for rotation: -R skew(y) applied through the pixel Jacobian
    ys = np.zeros((n, 3, 3))
    ys[:, 0, 1] = -y[:, 2]
    ys[:, 0, 2] = y[:, 1]
    ys[:, 1, 0] = y[:, 2]
    ys[:, 1, 2] = -y[:, 0]
    ys[:, 2, 0] = -y[:, 1]
    ys[:, 2, 1] = y[:, 0]
    g_blocks[:, :, 3:] = -np.einsum("nij,njk->nik", h_blocks, ys)
    return s, gvec, g_blocks, h_blocks, ok


def _normal_equations(prob, pose, disp, idx, gamma, ell, active_deform):
    """Gauss-Newton blocks App, Apr, Arr, gp, gr of the surrogate at the state."""
    s, gvec, g_blocks, h_blocks, ok = _data_blocks(prob, pose, disp, idx, gamma, ell)
    n = len(prob.points3)
    w = prob.weights

    app = np.einsum("nai,n,naj->ij", g_blocks, s, g_blocks)
    gp = np.einsum("nai,na->i", g_blocks, gvec)
    psi = _log_to_init(prob, pose)
    jr = _PRIOR_SCALE[:, None] * se3_right_jacobian_inv(psi)
    app += w.pose_prior * jr.T @ jr
    gp += w.pose_prior * (jr.T @ (_PRIOR_SCALE * psi))

    if not active_deform:
        return app, None, None, gp, None

    apr = np.einsum("nai,n,naj->nij", g_blocks, s, h_blocks)  # (n, 6, 3)
    arr_diag = np.einsum("nai,n,naj->nij", h_blocks, s, h_blocks)  # (n, 3, 3)
    gr = np.einsum("nai,na->ni", h_blocks, gvec)

    lm = w.deform * w.deform_magnitude
    arr_diag += lm * np.eye(3)[None, :, :]
    gr += lm * disp

    rows_off = []
    cols_off = []
    vals_off = []
    for pairs, coefw in ((prob.chain_pairs, w.deform_chain), (prob.cross_pairs, w.deform_cross)):
        if len(pairs) == 0 or coefw == 0.0:
            continue
        c = w.deform * coefw
        i, j = pairs[:, 0], pairs[:, 1]
        diff = disp[i] - disp[j]
        np.add.at(gr, i, c * diff)
        np.add.at(gr, j, -c * diff)
        eye_add = np.zeros((n, 3, 3))
        counts = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
        eye_add += counts[:, None, None] * np.eye(3)[None, :, :] * c
        arr_diag += eye_add
        rows_off.append(i)
        cols_off.append(j)
        vals_off.append(np.full(len(i), -c))
        rows_off.append(j)
        cols_off.append(i)
        vals_off.append(np.full(len(i), -c))
    return app, apr, (arr_diag, rows_off, cols_off, vals_off), gp, gr


def _solve_step(app, apr, arr_parts, gp, gr, damping, rotation_locked=False):
    """One damped normal-equation solve; returns (delta_pose, delta_disp)."""
    n6 = 6
    dp_diag = np.maximum(np.diag(app), _DIAG_FLOOR)
    app_d = app + damping * np.diag(dp_diag)
    if apr is None:
        if rotation_locked:
            delta_p = np.zeros(6)
            delta_p[:3] = np.linalg.solve(app_d[:3, :3], -gp[:3])
            return delta_p, None
        delta_p = np.linalg.solve(app_d, -gp)
        return delta_p, None
    arr_diag, rows_off, cols_off, vals_off = arr_parts
    n = arr_diag.shape[0]
    arr_diag = arr_diag.copy()
    diag_entries = np.maximum(np.einsum("nii->ni", arr_diag), _DIAG_FLOOR)
    idx3 = np.arange(3)
    arr_diag[:, idx3, idx3] += damping * diag_entries
    # assemble sparse Arr (3n x 3n): dense 3x3 diagonal blocks + scalar couplings
    bi = np.repeat(np.arange(n) * 3, 9)
    oi = np.tile(np.repeat(idx3, 3), n)
    oj = np.tile(np.tile(idx3, 3), n)
    rows = [bi + oi]
    cols = [bi + oj]
    vals = [arr_diag.ravel()]
    for r, c, v in zip(rows_off, cols_off, vals_off):
        for d in range(3):
            rows.append(r * 3 + d)
            cols.append(c * 3 + d)
            vals.append(v)
    arr = sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * n, 3 * n)
    )
    lu = splu(arr)
    apr_mat = np.transpose(apr, (1, 0, 2)).reshape(n6, 3 * n)
    rhs = np.concatenate([apr_mat.T, gr.reshape(-1, 1)], axis=1)  # (3n, 7)
    sol = lu.solve(rhs)
    x_a = sol[:, :6]
    x_g = sol[:, 6]
    schur = app_d - apr_mat @ x_a
    rhs_p = -gp + apr_mat @ x_g
    delta_p = np.linalg.solve(schur, rhs_p)
    delta_r = -(x_g + x_a @ delta_p)
    return delta_p, delta_r.reshape(n, 3)


def solve(prob: RegistrationProblem, cfg: SolverConfig | None = None) -> RegistrationState:
    """Run IRLS with LM inner steps and bandwidth annealing.

    The deformation field stays frozen until the first bandwidth halving, then
    is optimized jointly with the pose (when cfg.optimize_deformation). The
    surrogate cost never increases across accepted LM steps; each converged
    bandwidth stage advances the annealing schedule immediately.
    """
    cfg = cfg or SolverConfig()
    n = len(prob.points3)
    pose = prob.init_pose
    disp = np.zeros((n, 3))
    pix, depth = prob._project(pose, disp)
    idx0, dist0, ok0 = _match_neighbors(prob, pix, depth)
    ell = cfg.bandwidth_floor_px
    if np.any(ok0):
        ell = max(cfg.bandwidth_init_scale * float(np.nanmax(dist0[ok0])), cfg.bandwidth_floor_px)
    damping = cfg.lm_damping_init
    history: list[dict] = []
    stage = 0
    converged = False
    outer_done = 0
    for outer in range(cfg.max_outer_iters):
        outer_done = outer + 1
        pix, depth = prob._project(pose, disp)
        idx, dist, okm = _match_neighbors(prob, pix, depth)
        gamma = np.where(okm[:, None], prob.per_point[:, None] * np.exp(-dist ** 2 / (2.0 * ell * ell)), 0.0)
        gamma = np.nan_to_num(gamma)
        active = cfg.optimize_deformation and ell <= cfg.bandwidth_floor_px
        rot_locked = cfg.translation_first and stage == 0
        first_step = None
        first_stalled = False
        for inner in range(cfg.inner_iters):
            cost0 = _surrogate_cost(prob, pose, disp, idx, gamma, ell)
            app, apr, arr_parts, gp, gr = _normal_equations(prob, pose, disp, idx, gamma, ell, active)
            accepted = False
            step = 0.0
            while True:
                try:
                    delta_p, delta_r = _solve_step(app, apr, arr_parts, gp, gr, damping, rot_locked)
                except Exception:
                    delta_p, delta_r = None, None
                if delta_p is not None and np.all(np.isfinite(delta_p)):
                    cand_pose = pose.compose(se3_exp(delta_p))
                    cand_disp = disp if delta_r is None else disp + delta_r
                    cost1 = _surrogate_cost(prob, cand_pose, cand_disp, idx, gamma, ell)
                else:
                    cost1 = np.inf
                if np.isfinite(cost1) and cost1 < cost0:
                    step = float(np.sqrt(np.sum(delta_p ** 2) + (0.0 if delta_r is None else np.sum(delta_r ** 2))))
                    history.append(
                        {
                            "outer": outer,
                            "bandwidth": ell,
                            "cost_before": cost0,
                            "cost_after": cost1,
                            "damping": damping,
                            "step_norm": step,
                            "accepted": True,
                        }
                    )
                    pose, disp = cand_pose, cand_disp
                    damping = max(damping / cfg.lm_damping_down, 1e-12)
                    accepted = True
                    break
                damping *= cfg.lm_damping_up
                if damping > cfg.lm_damping_cap:
                    damping = cfg.lm_damping_cap
                    break
            if inner == 0:
                first_step = step if accepted else 0.0
                first_stalled = not accepted
            if not accepted or step < cfg.tol:
                break
        # The stage is exhausted only when a freshly matched and reweighted
        # surrogate yields no meaningful first step; small trailing inner steps
        # just mean this one surrogate is solved.
        if first_stalled or first_step < cfg.tol:
            if ell <= cfg.bandwidth_floor_px:
                converged = not first_stalled
                break
            ell = max(ell / 2.0, cfg.bandwidth_floor_px)
            stage += 1
            damping = cfg.lm_damping_init
            continue
        if (outer + 1) % cfg.anneal_every == 0:
            if ell > cfg.bandwidth_floor_px:
                ell = max(ell / 2.0, cfg.bandwidth_floor_px)
            stage += 1
    state = RegistrationState(
        pose,
        DeformationField(np.concatenate([disp, np.zeros((n, 1))], axis=1)),
        ell,
        iteration=outer_done,
        converged=converged,
    )
    energies = eval_objective(prob, state)
    state.objective = energies.composite(prob.weights)
    state.diagnostics = {
        "history": history,
        "energies": energies,
        "behind_camera": energies.behind_camera,
    }
    if not np.isfinite(state.objective):
        raise FloatingPointError("registration objective is not finite")
    return state


# ---------------------------------------------------------------------------
# dense Jacobian (reference path for verification)


def _dense_residuals(prob, pose, disp, idx, gamma, ell):
    """Stacked surrogate residual vector at the given state."""
    pix, depth = prob._project(pose, disp)
    ok = np.all(idx >= 0, axis=1) & (depth > 0)
    rows = []
    inv = 1.0 / np.sqrt(2.0 * ell * ell)
    for i in np.flatnonzero(ok):
        for col, j in enumerate(idx[i]):
            a = np.sqrt(gamma[i, col]) * inv
            rows.append(a * (pix[i] - prob.points2[j]))
    psi = _log_to_init(prob, pose)
    rows.append(np.sqrt(prob.weights.pose_prior) * _PRIOR_SCALE * psi)
    w = prob.weights
    rows.append((np.sqrt(w.deform * w.deform_magnitude) * disp).ravel())
    for pairs, cw in ((prob.chain_pairs, w.deform_chain), (prob.cross_pairs, w.deform_cross)):
        if len(pairs):
            diff = disp[pairs[:, 0]] - disp[pairs[:, 1]]
            rows.append((np.sqrt(w.deform * cw) * diff).ravel())
    return np.concatenate([np.atleast_1d(r).ravel() for r in rows])


def _dense_jacobian(prob, pose, disp, idx, gamma, ell, active_deform=True):
    """Analytic Jacobian of _dense_residuals w.r.t. [pose twist, displacements]."""
    n = len(prob.points3)
    ncols = 6 + (3 * n if active_deform else 0)
    s, gvec, g_blocks, h_blocks, ok_mask = _data_blocks(prob, pose, disp, idx, gamma, ell)
    blocks = []
    inv = 1.0 / np.sqrt(2.0 * ell * ell)
    for i in np.flatnonzero(ok_mask):
        for col in range(idx.shape[1]):
            a = np.sqrt(gamma[i, col]) * inv
            row = np.zeros((2, ncols))
            row[:, :6] = a * g_blocks[i]
            if active_deform:
                row[:, 6 + 3 * i : 9 + 3 * i] = a * h_blocks[i]
            blocks.append(row)
    psi = _log_to_init(prob, pose)
    jr = _PRIOR_SCALE[:, None] * se3_right_jacobian_inv(psi)
    row = np.zeros((6, ncols))
    row[:, :6] = np.sqrt(prob.weights.pose_prior) * jr
    blocks.append(row)
    w = prob.weights
    if active_deform:
        mag = np.zeros((3 * n, ncols))
        mag[:, 6:] = np.sqrt(w.deform * w.deform_magnitude) * np.eye(3 * n)
        blocks.append(mag)
        for pairs, cw in ((prob.chain_pairs, w.deform_chain), (prob.cross_pairs, w.deform_cross)):
            if len(pairs) == 0:
                continue
            c = np.sqrt(w.deform * cw)
            block = np.zeros((3 * len(pairs), ncols))
            for k, (i, j) in enumerate(pairs):
                block[3 * k : 3 * k + 3, 6 + 3 * i : 9 + 3 * i] = c * np.eye(3)
                block[3 * k : 3 * k + 3, 6 + 3 * j : 9 + 3 * j] = -c * np.eye(3)
            blocks.append(block)
    else:
        mag = np.zeros((3 * n, ncols))
        blocks.append(mag)
        for pairs, cw in ((prob.chain_pairs, w.deform_chain), (prob.cross_pairs, w.deform_cross)):
            if len(pairs):
                blocks.append(np.zeros((3 * len(pairs), ncols)))
    return np.vstack(blocks)
