"""Multi-stage windowed motion optimization.

Each window runs a sequence of stages; a stage optimizes a subset of the
variables (translation ``T``, root orientation ``R``, joint rotations
``theta``) with Adam for a fixed number of iterations, refreshing
correspondences every iteration. Long sequences are split into overlapping
windows whose overlap frames are softly anchored to the previous window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .body_model import BodyModel, MotionSequence
from .errors import ConfigError, NonFiniteLossError, OptimizationError
from .geometry.raycast import LidarSpec
from .geometry.scene import SceneMap
from .losses import LossWeights, WindowContext, active_terms, compute_terms, refresh_correspondences
from .rotations import slerp_rotvec, unwrap_rotvec_sequence

log = logging.getLogger(__name__)

VARIABLES = ("T", "R", "theta")


@dataclass(frozen=True)
class Stage:
    """Variables optimized in one stage, its iteration count and terms kept off."""

    variables: tuple[str, ...]
    iterations: int
    disabled_terms: tuple[str, ...] = ()


def _default_stages() -> list[Stage]:
    return [Stage(("T",), 50, ("p2m",)), Stage(("T", "R"), 40, ("p2m",)), Stage(("T", "R", "theta"), 110)]


@dataclass
class StagePlan:
    """Ordered stages plus Adam hyper-parameters."""

    stages: list[Stage] = field(default_factory=_default_stages)
    learning_rate: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        self.stages = [s if isinstance(s, Stage) else Stage(tuple(s[0]), int(s[1]), tuple(s[2]) if len(s) > 2 else ())
                       for s in self.stages]
        if not self.stages:
            raise ConfigError("a stage plan needs at least one stage")
        prev: set[str] = set()
        for s in self.stages:
            vs = set(s.variables)
            if not vs or not vs <= set(VARIABLES):
                raise ConfigError(f"stage variables must be a non-empty subset of {VARIABLES}, got {s.variables}")
            if not prev <= vs:
                raise ConfigError("active variable sets must not shrink from one stage to the next")
            if s.iterations < 0:
                raise ConfigError("stage iterations must be >= 0")
            prev = vs
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning rate must be finite and >= 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("moment coefficients must lie in [0, 1)")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    @classmethod
    def single_stage(cls, iterations: int = 200, **kwargs) -> "StagePlan":
        return cls([Stage(VARIABLES, iterations)], **kwargs)


@dataclass
class WindowPlan:
    """Partition of a sequence into windows of ``window_size`` frames sharing ``overlap`` frames."""

    window_size: int = 500
    overlap: int = 50
    boundary_mode: str = "pin_first_frame"
    anchor_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.window_size < 2:
            raise ConfigError("window size must be >= 2")
        if not 0 <= self.overlap < self.window_size:
            raise ConfigError("overlap must satisfy 0 <= overlap < window size")
        if self.boundary_mode not in ("pin_first_frame", "free"):
            raise ConfigError(f"unknown boundary mode {self.boundary_mode!r}")
        if not self.anchor_weight >= 0:
            raise ConfigError("anchor weight must be >= 0")

    def windows(self, n_frames: int) -> list[tuple[int, int]]:
        """Half-open frame ranges covering ``n_frames``."""
        if n_frames < 2:
            raise ValueError("a sequence needs at least two frames")
        out = []
        start = 0
        while True:
            stop = min(start + self.window_size, n_frames)
            out.append((start, stop))
            if stop == n_frames:
                return out
            start = stop - self.overlap


@dataclass(eq=False)
class Anchor:
    """Quadratic pull of some window frames towards fixed values."""

    frames: np.ndarray
    T: np.ndarray
    R: np.ndarray
    theta: np.ndarray
    weight: float

    def loss(self, T: torch.Tensor, R: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
        idx = torch.as_tensor(self.frames)
        d = ((T[idx] - torch.as_tensor(self.T)) ** 2).sum(-1) + ((R[idx] - torch.as_tensor(self.R)) ** 2).sum(-1)
        d = d + ((theta[idx] - torch.as_tensor(self.theta)) ** 2).sum((-1, -2))
        return self.weight * d.mean()


@dataclass(eq=False)
class WindowResult:
    T: np.ndarray
    R: np.ndarray
    theta: np.ndarray
    trace: list[dict]
    aborted: bool = False
    diagnostic: str | None = None


def optimize_window(ctx: WindowContext, plan: StagePlan | None = None, weights: LossWeights | None = None,
                    anchor: Anchor | None = None, window_index: int = 0) -> WindowResult:
    """Run the stage plan on one window.

    Inactive variables are never touched, so they stay bitwise equal to their
    initial values. The iteration counter driving the pose-prior decay runs
    globally across stages, starting at 1. Each trace record holds the loss
    evaluated before that iteration's update.

    A non-finite loss stops the window and returns the last finite state with
    a diagnostic naming the term.
    """
    plan = plan or StagePlan()
    weights = weights or LossWeights()
    params = {
        "T": ctx.T.detach().clone(),
        "R": ctx.R.detach().clone(),
        "theta": ctx.theta.detach().clone(),
    }
    trace: list[dict] = []
    it = 0
    for si, stage in enumerate(plan.stages):
        active = set(stage.variables)
        for name, p in params.items():
            p.requires_grad_(name in active)
        opt = torch.optim.Adam([params[n] for n in VARIABLES if n in active], lr=plan.learning_rate,
                               betas=plan.betas)
        terms = active_terms(ctx, weights, stage.disabled_terms)
        # self-penetration is invariant to the rigid root motion, so it is constant without theta
        fixed: dict[str, float] = {}
        for step in range(stage.iterations):
            it += 1
            ctx.T, ctx.R, ctx.theta = params["T"], params["R"], params["theta"]
            ctx.iteration = it
            live = [t for t in terms if t not in fixed]
            posed = ctx.forward() if live else None
            corr = refresh_correspondences(ctx, live, posed[0].detach().numpy() if posed is not None else None)
            vals = compute_terms(ctx, corr, live, posed)
            total = params["T"].sum() * 0.0
            record = {"window": window_index, "stage": si, "iteration": it}
            for t in terms:
                v = vals[t] if t in vals else fixed[t]
                x = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                if not math.isfinite(x):
                    return _abort(params, trace, NonFiniteLossError(t, x))
                record[t] = x
                total = total + weights[t] * v
            if "pen" in terms and "theta" not in active and "pen" not in fixed:
                fixed["pen"] = float(vals["pen"].detach())
            if anchor is not None:
                a = anchor.loss(params["T"], params["R"], params["theta"])
                record["anchor"] = float(a.detach())
                total = total + a
            record["total"] = float(total.detach())
            if not math.isfinite(record["total"]):
                return _abort(params, trace, NonFiniteLossError("total", record["total"]))
            trace.append(record)
            opt.zero_grad(set_to_none=True)
            if total.requires_grad:
                total.backward()
            opt.step()
        for p in params.values():
            p.requires_grad_(False)
    ctx.T, ctx.R, ctx.theta = params["T"], params["R"], params["theta"]
    return WindowResult(params["T"].numpy().copy(), params["R"].numpy().copy(), params["theta"].numpy().copy(), trace)


def _abort(params, trace, err: NonFiniteLossError) -> WindowResult:
    log.warning("window aborted: %s", err)
    return WindowResult(params["T"].detach().numpy().copy(), params["R"].detach().numpy().copy(),
                        params["theta"].detach().numpy().copy(), trace, True, str(err))


@dataclass(eq=False)
class SequenceInputs:
    """Frame-indexed fixed data of a whole sequence for one person."""

    model: BodyModel
    beta: np.ndarray | None = None
    theta_prior: np.ndarray | None = None
    scene: SceneMap | None = None
    crops: list[np.ndarray] | None = None
    visible: np.ndarray | None = None
    lidar_positions: np.ndarray | None = None
    lidar_rotations: np.ndarray | None = None
    t_hl: np.ndarray | None = None
    sensor: LidarSpec = field(default_factory=LidarSpec)
    use_l2h: bool = False
    use_point_cloud: bool = False
    options: dict = field(default_factory=dict)

    def context(self, start: int, stop: int, T, R, theta) -> WindowContext:
        def cut(x):
            return None if x is None else x[start:stop]

        return WindowContext(
            self.model, T, R, theta, beta=self.beta, theta_prior=cut(self.theta_prior), scene=self.scene,
            crops=cut(self.crops), visible=cut(self.visible), lidar_positions=cut(self.lidar_positions),
            lidar_rotations=cut(self.lidar_rotations), t_hl=self.t_hl, sensor=self.sensor,
            use_l2h=self.use_l2h, use_point_cloud=self.use_point_cloud, **self.options)


def optimize_sequence(init: MotionSequence, inputs: SequenceInputs, plan: StagePlan | None = None,
                      window_plan: WindowPlan | None = None, weights: LossWeights | None = None,
                      ) -> tuple[MotionSequence, list[dict]]:
    """Optimize a whole sequence window by window.

    In ``pin_first_frame`` mode each window's first ``overlap`` frames start
    from the previous window's result and are anchored to it. Overlapped
    frames of the output average the two windows (linear for translation,
    spherical for rotations).

    Raises:
        OptimizationError: wrapping a window failure, with its index.
    """
    window_plan = window_plan or WindowPlan()
    n = init.n_frames
    T = init.T.copy()
    R = unwrap_rotvec_sequence(init.R.copy())
    theta = init.theta.copy()
    if inputs.theta_prior is None:
        inputs.theta_prior = init.theta.copy()
    if inputs.beta is None:
        inputs.beta = init.beta.copy()
    trace: list[dict] = []
    out_T, out_R, out_th = T.copy(), R.copy(), theta.copy()
    prev_stop = 0
    for wi, (start, stop) in enumerate(window_plan.windows(n)):
        wT, wR, wth = T[start:stop].copy(), R[start:stop].copy(), theta[start:stop].copy()
        anchor = None
        shared = max(0, prev_stop - start)
        if wi > 0 and shared and window_plan.boundary_mode == "pin_first_frame":
            wT[:shared], wR[:shared], wth[:shared] = out_T[start:prev_stop], out_R[start:prev_stop], out_th[start:prev_stop]
            wR = unwrap_rotvec_sequence(wR)
            anchor = Anchor(np.arange(shared), wT[:shared].copy(), wR[:shared].copy(), wth[:shared].copy(),
                            window_plan.anchor_weight)
        try:
            ctx = inputs.context(start, stop, wT, wR, wth)
            res = optimize_window(ctx, plan, weights, anchor, wi)
        except Exception as exc:  # re-raised with the window index
            raise OptimizationError(wi, exc) from exc
        if res.aborted:
            raise OptimizationError(wi, RuntimeError(res.diagnostic))
        trace.extend(res.trace)
        if shared:
            w = 0.5
            out_T[start:prev_stop] = (1 - w) * out_T[start:prev_stop] + w * res.T[:shared]
            out_R[start:prev_stop] = slerp_rotvec(out_R[start:prev_stop], res.R[:shared], w)
            out_th[start:prev_stop] = slerp_rotvec(out_th[start:prev_stop], res.theta[:shared], w)
        out_T[start + shared:stop] = res.T[shared:]
        out_R[start + shared:stop] = res.R[shared:]
        out_th[start + shared:stop] = res.theta[shared:]
        prev_stop = stop
    result = MotionSequence(out_T, unwrap_rotvec_sequence(out_R), out_th, init.beta.copy(), init.fps, init.start_time)
    return result, trace
