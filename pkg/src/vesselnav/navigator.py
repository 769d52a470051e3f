"""Sequential navigation strategy and the closed-loop episode harness.

The controller is a trial-and-error scheme over the planned route. It first
backs the wire up until the tip leaves the current route, replans from where
it actually is, then advances in bursts: straight bursts while the tip stays
on the route, rotate-and-retreat bursts when it strays, and a full replan
after too many consecutive misses. One command is issued per control loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, project_points
from .lifting import OffVesselError, lift
from .perception import (
    FrameRenderer,
    NoiseSpec,
    RenderStyle,
    TrackedEndpoint,
    endpoint_candidates,
    frame_view_pose,
    segment_layers,
    skeleton_points,
    thin,
    track,
)
from .planning import Address, RoutePlan, on_path, plan
from .registration import (
    RegistrationProblem,
    RegistrationState,
    SolverConfig,
    reprojection_rmse,
    solve,
)
from .simulator import ActuationNoise, ControlCommand, GuidewireState, initial_wire, step, true_tip
from .vessel_model import VesselTree, resample_centerlines


@dataclass(frozen=True)
class NavigatorParams:
    reach_threshold_mm: float = 3.0
    replan_after_misses: int = 6
    burst_low: int = 8
    burst_high: int = 12
    back_step: int = 10

    def __post_init__(self) -> None:
        if self.burst_low > self.burst_high:
            raise ValueError("burst range is inverted")
        if self.back_step <= 0 or self.reach_threshold_mm <= 0:
            raise ValueError("back_step and reach_threshold_mm must be positive")


class Navigator:
    """One instance per episode; decide() issues one command per control loop."""

    def __init__(
        self,
        tree: VesselTree,
        start: Address,
        dest: Address,
        params: NavigatorParams | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.tree = tree
        self.dest = tuple(dest)
        self.dest_position = tree.position(dest)
        self.params = params or NavigatorParams()
        self.rng = rng or np.random.default_rng(0)
        self.route: RoutePlan = plan(tree, start, dest)
        self.flag_back = True
        self.on_path_last = True
        self.miss_count = 0
        self.replans = 0
        # Estimated tip after the previous backward command; an unchanged
        # address on the next backward decision means the wire is pinned at
        # the insertion stop and cannot leave the route by retracting.
        self._last_back_addr: Address | None = None

    def reached(self, tip_position: np.ndarray) -> bool:
        return float(np.linalg.norm(np.asarray(tip_position) - self.dest_position)) <= (
            self.params.reach_threshold_mm
        )

    def decide(self, tip_address: Address, tip_position: np.ndarray) -> ControlCommand | None:
        """One control decision; None once the tip is within reach of the target."""
        if self.reached(tip_position):
            return None
        p = self.params
        if self.flag_back:
            tip_on = on_path(self.route, tip_address)
            pinned = self._last_back_addr is not None and tuple(tip_address) == self._last_back_addr
            if tip_on and not pinned:
                cmd = ControlCommand(-float(p.back_step), 0)
                self._last_back_addr = tuple(tip_address)
            else:
                cmd = ControlCommand(float(p.back_step), 0)
                self.flag_back = False
                self._replan(tip_address)
                self._last_back_addr = None
        else:
            self._last_back_addr = None
            c = float(self.rng.integers(p.burst_low, p.burst_high + 1))
            if self.miss_count > p.replan_after_misses:
                self._replan(tip_address)
                self.miss_count = 0
                self.flag_back = True
            tip_on = on_path(self.route, tip_address)
            if tip_on:
                self.miss_count = 0
                if self.on_path_last:
                    cmd = ControlCommand(c, 0)
                else:
                    cmd = ControlCommand(c, 1)
            else:
                cmd = ControlCommand(-c, 1)
                self.miss_count += 1
        self.on_path_last = tip_on
        return cmd

    def _replan(self, tip_address: Address) -> None:
        self.route = plan(self.tree, tip_address, self.dest)
        self.replans += 1


@dataclass(frozen=True)
class EpisodeConfig:
    max_loops: int = 500
    registration_spacing_mm: float = 0.5
    use_oracle_perception: bool = False
    actuation_noise: ActuationNoise | None = None
    imaging_noise: NoiseSpec | None = None
    render_style: RenderStyle | None = None
    params: NavigatorParams | None = None
    view_depth_mm: float = 820.0
    camera: CameraModel | None = None
    # First-frame tracker seed in pixels; None bootstraps from the projected
    # true tip (the stand-in for a manually clicked endpoint).
    tip_seed_px: tuple[float, float] | None = None
    # The wire's proximal end is a skeleton endpoint too, parked forever at
    # the insertion point; candidates this close to that known landmark are
    # discarded so the tracker cannot lock onto it.
    introducer_mask_px: float = 6.0


@dataclass(frozen=True)
class LoopRecord:
    loop_index: int
    command: ControlCommand
    true_address: Address
    estimated_address: Address
    tip_error_mm: float
    on_route: bool
    registration_rmse_px: float
    lift_pixel_error: float
    tip_pixel_px: tuple[float, float] | None = None


@dataclass
class EpisodeReport:
    start: Address
    dest: Address
    success: bool
    loops: int
    replans: int = 0
    records: list[LoopRecord] = field(default_factory=list)

    def mean_tip_error_mm(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.tip_error_mm for r in self.records]))


def run_episode(
    tree: VesselTree,
    start: Address,
    dest: Address,
    seed: int,
    config: EpisodeConfig | None = None,
    frame_sink=None,
) -> EpisodeReport:
    """Drive one navigation episode through the full perception loop.

    A single seeded generator drives, in fixed order per loop: the navigator's
    burst draw, then the simulator's two actuation variates, then imaging
    noise. With use_oracle_perception the imaging, segmentation, registration,
    and lifting stages are bypassed and the true tip is fed to the navigator.

    ``frame_sink(loop_index, frame, info)`` is called once per rendered frame
    (full perception only) with the raster and a dict of overlay facts; it
    exists for artifact dumping and must not mutate either argument.
    """
    config = config or EpisodeConfig()
    rng = np.random.default_rng(seed)
    nav = Navigator(tree, start, dest, params=config.params, rng=rng)
    wire = initial_wire(tree, start)
    noise = config.actuation_noise if config.actuation_noise is not None else ActuationNoise()

    oracle = config.use_oracle_perception
    if not oracle:
        cam = config.camera or CameraModel.standard()
        view = frame_view_pose(tree, depth_mm=config.view_depth_mm)
        style = config.render_style or RenderStyle()
        renderer = FrameRenderer(tree, view, cam, style=style)
        reg_model = resample_centerlines(tree, config.registration_spacing_mm)
        reg_points, reg_addresses = reg_model.flat_points()
        reg_radii = np.array(
            [reg_model.branches[b].points[i].radius for b, i in reg_addresses]
        )
        base_problem = RegistrationProblem.from_tree(
            reg_model, np.zeros((1, 2)), cam, view
        )
        solver_cfg = SolverConfig(optimize_deformation=False)
        true_reference = base_problem._project(
            base_problem.pose_from_world(view), np.zeros((len(reg_points), 3))
        )[0]
        pose_world = view
        reg_state: RegistrationState | None = None
        tip_track: TrackedEndpoint | None = None
        prev_tip3: np.ndarray | None = None
        introducer_px = true_pixel_tip(cam, view, tree.position(wire.body[0]))

    report = EpisodeReport(start=tuple(start), dest=tuple(dest), success=False, loops=0)
    for loop_index in range(config.max_loops):
        tip_addr_true = wire.tip
        tip_pos_true = true_tip(tree, wire)

        if oracle:
            est_addr = tip_addr_true
            est_pos = tip_pos_true
            rmse = 0.0
            lift_err = 0.0
            tip_px: tuple[float, float] | None = None
        else:
            wire_polyline = np.array([tree.position(a) for a in wire.body])
            frame = renderer.render(
                wire_polyline,
                noise=config.imaging_noise,
                seed=rng,
                frame_index=loop_index,
            )
            vessel_mask, wire_mask, _, wire_thresh = segment_layers(frame)
            q = skeleton_points(thin(vessel_mask))
            problem = base_problem.with_frame(q, pose_world)
            reg_state = solve(problem, solver_cfg)
            pose_world = problem.pose_to_world(reg_state.pose)
            rmse = reprojection_rmse(problem, reg_state, true_reference)
            if wire_thresh is None:
                candidates = np.empty((0, 2))
            else:
                candidates = endpoint_candidates(thin(wire_mask))
                if len(candidates):
                    away = (
                        np.linalg.norm(candidates - introducer_px, axis=1)
                        > config.introducer_mask_px
                    )
                    candidates = candidates[away]
            if tip_track is None:
                if config.tip_seed_px is not None:
                    boot = np.asarray(config.tip_seed_px, dtype=float)
                else:
                    boot = true_pixel_tip(cam, view, tip_pos_true)
                tip_track = TrackedEndpoint(boot, 1.0, -1)
            tip_track = track(candidates, tip_track, frame_index=loop_index)
            tip_px = (float(tip_track.position2[0]), float(tip_track.position2[1]))
            try:
                lifted = lift(
                    problem,
                    reg_state,
                    tip_track.position2,
                    reg_radii,
                    previous3=prev_tip3,
                    spacing_mm=config.registration_spacing_mm,
                )
                est_addr_model = lifted.address
                est_pos = lifted.position3
                lift_err = lifted.pixel_error
                prev_tip3 = est_pos
            except OffVesselError:
                est_addr_model = None
                est_pos = prev_tip3 if prev_tip3 is not None else tip_pos_true
                lift_err = float("nan")
            est_addr = (
                nearest_tree_address(tree, est_pos)
                if est_addr_model is None
                else model_to_tree_address(tree, reg_model, est_addr_model)
            )
            if frame_sink is not None:
                route_pts = np.array([tree.position(a) for a in nav.route.addresses])
                route_px, route_depth = project_points(route_pts, pose_world, cam)
                frame_sink(
                    loop_index,
                    frame,
                    {
                        "true_tip_px": true_pixel_tip(cam, view, tip_pos_true),
                        "lifted_tip_px": np.asarray(tip_track.position2, dtype=float),
                        "lifted_tip_mm": np.asarray(est_pos, dtype=float),
                        "registration_rmse_px": float(rmse),
                        "route_px": route_px[route_depth > 0],
                    },
                )

        cmd = nav.decide(est_addr, est_pos)
        if cmd is None:
            report.success = True
            break
        report.records.append(
            LoopRecord(
                loop_index=loop_index,
                command=cmd,
                true_address=tip_addr_true,
                estimated_address=tuple(est_addr),
                tip_error_mm=float(np.linalg.norm(np.asarray(est_pos) - tip_pos_true)),
                on_route=on_path(nav.route, est_addr),
                registration_rmse_px=rmse,
                lift_pixel_error=lift_err,
                tip_pixel_px=tip_px,
            )
        )
        report.loops += 1
        wire = step(tree, wire, cmd, rng, noise=noise)
    report.replans = nav.replans
    return report


def true_pixel_tip(cam: CameraModel, view: Pose, tip_position: np.ndarray) -> np.ndarray:
    z = view.rotation @ np.asarray(tip_position, dtype=float) + view.translation
    h = cam.intrinsics[:, :3] @ z + cam.intrinsics[:, 3]
    return h[:2] / h[2]


def nearest_tree_address(tree: VesselTree, position3: np.ndarray) -> Address:
    _, i = tree.point_index().query(np.asarray(position3, dtype=float).reshape(3))
    return tree.flat_points()[1][int(i)]


def model_to_tree_address(tree: VesselTree, model: VesselTree, model_address: Address) -> Address:
    """Map an address on the registration model back onto the control tree."""
    return nearest_tree_address(tree, model.position(model_address))
