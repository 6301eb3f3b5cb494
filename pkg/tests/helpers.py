"""Small fixtures shared by the test modules: box-built toy bodies, planar scenes, random motions."""

from __future__ import annotations

import numpy as np

from lidarmocap.body_model import BodyModel, MotionSequence
from lidarmocap.geometry.scene import SceneMap


def box_mesh(lo, hi, n: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Closed axis-aligned box surface with ``n`` segments per edge, faces wound outward."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts: list[np.ndarray] = []
    key: dict[tuple, int] = {}
    faces = []

    def vid(p):
        k = tuple(np.round(p, 12))
        if k not in key:
            key[k] = len(verts)
            verts.append(np.asarray(p, float))
        return key[k]

    s = np.linspace(0.0, 1.0, n + 1)
    center = (lo + hi) / 2
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            grid = np.empty((n + 1, n + 1), int)
            for i, a in enumerate(s):
                for j, b in enumerate(s):
                    p = np.empty(3)
                    p[axis] = hi[axis] if side else lo[axis]
                    p[u] = lo[u] + a * (hi[u] - lo[u])
                    p[v] = lo[v] + b * (hi[v] - lo[v])
                    grid[i, j] = vid(p)
            for i in range(n):
                for j in range(n):
                    for tri in ((grid[i, j], grid[i + 1, j], grid[i + 1, j + 1]),
                                (grid[i, j], grid[i + 1, j + 1], grid[i, j + 1])):
                        faces.append(tri)
    V = np.array(verts)
    F = np.array(faces, np.int64)
    # orient outward
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    nrm = np.cross(b - a, c - a)
    flip = (nrm * ((a + b + c) / 3 - center)).sum(1) < 0
    F[flip] = F[flip][:, ::-1]
    return V, F


def box_body(joints, parents, boxes, head_joint: int, n_shape: int = 2, seed: int = 0, subdiv: int = 2
             ) -> BodyModel:
    """Body made of boxes, each rigidly skinned to one joint.

    Args:
        joints: (J, 3) rest joint positions.
        parents: (J,) parent indices, root first.
        boxes: list of (lo, hi, joint, region name, foot) where foot is
            "left", "right" or None (bottom-face vertices become that foot).
    """
    joints = np.asarray(joints, float)
    J = len(joints)
    V, F, W, L = [], [], [], []
    region_names = ("head", "torso", "left_arm", "right_arm", "left_hand", "right_hand", "left_leg", "right_leg")
    feet = {"left": [], "right": []}
    off = 0
    for lo, hi, j, region, foot in boxes:
        v, f = box_mesh(lo, hi, subdiv)
        V.append(v)
        F.append(f + off)
        w = np.zeros((len(v), J))
        w[:, j] = 1.0
        W.append(w)
        L.append(np.full(len(v), region_names.index(region)))
        if foot is not None:
            feet[foot].extend((off + np.flatnonzero(np.isclose(v[:, 2], lo[2]))).tolist())
        off += len(v)
    V = np.concatenate(V)
    # affine joint regressor: minimum-norm weights reproducing each rest joint
    A = np.vstack([V.T, np.ones(len(V))])
    reg = np.stack([np.linalg.lstsq(A, np.append(joints[j], 1.0), rcond=None)[0] for j in range(J)])
    rng = np.random.default_rng(seed)
    shape_dirs = rng.normal(0, 0.01, (len(V), 3, n_shape))
    names = tuple(f"j{i}" for i in range(J))
    return BodyModel(V, np.concatenate(F), shape_dirs, reg, np.asarray(parents), np.concatenate(W),
                     np.concatenate(L), np.array(feet["left"]), np.array(feet["right"]), names, region_names,
                     head_joint)


def toy_body(subdiv: int = 2) -> BodyModel:
    """Five-joint standing figure: pelvis, two hips (legs), spine, head; feet at z = 0."""
    joints = [[0, 0, 0.9], [0.1, 0, 0.85], [-0.1, 0, 0.85], [0, 0, 1.15], [0, 0, 1.45]]
    boxes = [
        ((-0.15, -0.1, 0.85), (0.15, 0.1, 1.1), 0, "torso", None),
        ((0.05, -0.06, 0.0), (0.16, 0.06, 0.82), 1, "left_leg", "left"),
        ((-0.16, -0.06, 0.0), (-0.05, 0.06, 0.82), 2, "right_leg", "right"),
        ((-0.14, -0.09, 1.12), (0.14, 0.09, 1.4), 3, "torso", None),
        ((-0.09, -0.09, 1.42), (0.09, 0.09, 1.65), 4, "head", None),
    ]
    return box_body(joints, [-1, 0, 0, 0, 3], boxes, head_joint=4, subdiv=subdiv)


def chain_body() -> BodyModel:
    """Four joints in a straight chain along +x, one box per link."""
    joints = [[0, 0, 0], [0.3, 0, 0], [0.6, 0, 0], [0.9, 0, 0]]
    boxes = [((-0.05 + 0.3 * i, -0.04, -0.04), (0.25 + 0.3 * i, 0.04, 0.04), i,
              ("torso", "left_leg", "right_leg", "head")[i], ("left" if i == 1 else "right" if i == 2 else None))
             for i in range(4)]
    return box_body(joints, [-1, 0, 1, 2], boxes, head_joint=3, subdiv=1)


def ground_plane(size: float = 20.0, z: float = 0.0, n: int = 4) -> SceneMap:
    """Square ground mesh centred at the origin, normal +Z, all faces ground."""
    s = np.linspace(-size / 2, size / 2, n + 1)
    xx, yy = np.meshgrid(s, s, indexing="ij")
    V = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], 1)
    F = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = i * (n + 1) + j, (i + 1) * (n + 1) + j, (i + 1) * (n + 1) + j + 1, i * (n + 1) + j + 1
            F += [(a, b, c), (a, c, d)]
    return SceneMap(vertices=V, faces=np.array(F), ground_mask=np.ones(len(F), bool))


def wall_scene(x: float, size: float = 10.0) -> SceneMap:
    """Ground plane plus a wall at ``x`` facing -X (solid side at larger x)."""
    g = ground_plane(size)
    wv = np.array([[x, -size / 2, 0], [x, size / 2, 0], [x, size / 2, 3], [x, -size / 2, 3]], float)
    wf = np.array([[0, 2, 1], [0, 3, 2]]) + len(g.vertices)
    V = np.vstack([g.vertices, wv])
    F = np.vstack([g.faces, wf])
    mask = np.concatenate([g.ground_mask, np.zeros(2, bool)])
    return SceneMap(vertices=V, faces=F, ground_mask=mask)


def random_motion(model: BodyModel, n: int, seed: int = 0, pose_scale: float = 0.2, fps: float = 20.0
                  ) -> MotionSequence:
    rng = np.random.default_rng(seed)
    T = rng.normal(0, 0.5, (n, 3))
    R = rng.normal(0, 0.5, (n, 3))
    theta = rng.normal(0, pose_scale, (n, model.n_joints - 1, 3))
    return MotionSequence(T, R, theta, rng.normal(0, 1, model.n_shape), fps, 0.0)


def static_motion(model: BodyModel, n: int, fps: float = 20.0) -> MotionSequence:
    return MotionSequence(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, model.n_joints - 1, 3)),
                          np.zeros(model.n_shape), fps, 0.0)


def gradient_window(model: BodyModel, seed: int, k: int = 5, kink_margin: float = 3e-5, max_draws: int = 50):
    """Random window in which all twelve terms are active and non-zero.

    Feet move by millimetres so stable feet exist; the legs are swung towards
    each other so they interpenetrate; the body is sunk slightly into the
    ground and touches a wall; crops are jittered surface samples; the sensor
    sits a few metres away for the visible-surface term.

    Draws come from the substreams ``(seed, 0), (seed, 1), ...``; the first
    window whose hinge arguments (collision and penetration depths) all stay
    ``kink_margin`` away from zero and whose sliding and contact terms are
    non-zero is returned. A step of 1e-5 in any coordinate moves a vertex of
    this metre-sized body by about 1e-5 m, so the default margin keeps the
    finite-difference stencil off every kink.
    """
    from lidarmocap.losses import TERM_NAMES, compute_terms

    for draw in range(max_draws):
        ctx = _draw_window(model, np.random.default_rng([seed, draw]), k)
        vals = compute_terms(ctx, None, list(TERM_NAMES))
        if all(float(vals[t]) > 0 for t in TERM_NAMES) and hinge_margin(ctx) > kink_margin:
            return ctx
    raise RuntimeError(f"no admissible window for seed {seed}")


def hinge_margin(ctx) -> float:
    """Smallest |argument| of the collision and self-penetration hinges at the current variables."""
    import torch

    from lidarmocap.geometry.mesh import vertex_normals
    from lidarmocap.losses import refresh_correspondences

    corr = refresh_correspondences(ctx, ["coll", "pen"])
    with torch.no_grad():
        verts = ctx.forward()[0].numpy()
    out = np.inf
    fr, vi, sp, sn = corr.coll
    if fr.size:
        out = min(out, np.abs(((sp - verts[fr, vi]) * sn).sum(-1)).min())
    f, a, b = corr.pen
    if f.size:
        normals = np.stack([vertex_normals(v, ctx.model.faces) for v in verts])
        depth = ((verts[f, a] - verts[f, b]) * -normals[f, b]).sum(-1)
        out = min(out, np.abs(depth).min())
    return float(out)


def _draw_window(model: BodyModel, rng: np.random.Generator, k: int):
    from lidarmocap.body_model import forward_batch
    from lidarmocap.geometry.raycast import LidarSpec
    from lidarmocap.losses import WindowContext

    T = np.array([0.0, 0.0, -0.01]) + rng.normal(0, 0.002, (k, 3))
    R = np.array([0.0, 0.0, rng.uniform(-0.3, 0.3)]) + rng.normal(0, 0.01, (k, 3))
    theta = rng.normal(0, 0.02, (k, model.n_joints - 1, 3))
    theta[:, 0, 1] += 0.16  # left hip swings inward
    theta[:, 1, 1] -= 0.12  # right hip swings inward
    verts, joints = forward_batch(model, T, R, theta)
    crops = []
    for i in range(k):
        idx = rng.choice(model.n_vertices, 40, replace=False)
        crops.append(verts[i, idx] + rng.normal(0, 0.01, (40, 3)))
    crops[-1][:5] += 1.0  # a few far points exercise the point-to-mesh cap
    lidar = np.array([2.5, -1.5, 1.2]) + rng.normal(0, 0.01, (k, 3))
    yaw = np.arctan2(-lidar[0, 1], -lidar[0, 0])
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return WindowContext(
        model, T, R, theta, beta=rng.normal(0, 0.5, model.n_shape),
        theta_prior=theta + rng.normal(0, 0.05, theta.shape), scene=wall_scene(0.14),
        crops=crops, visible=np.ones(k, bool), lidar_positions=lidar, lidar_rotations=np.repeat(rot[None], k, 0),
        t_hl=rng.normal(0, 0.05, 3), sensor=LidarSpec(n_beams=64, n_columns=512), iteration=3,
        use_l2h=True, use_point_cloud=True)


def fd_gradient_error(ctx, term: str, h: float = 1e-5) -> tuple[float, float]:
    """Largest absolute deviation between the autograd gradient of ``term`` and
    its central finite difference over every T, R, theta coordinate, divided
    by the largest finite-difference component. Correspondences are frozen at
    the base point. Returns (relative error, gradient scale)."""
    import torch

    from lidarmocap.losses import compute_terms, refresh_correspondences

    base = [ctx.T.detach().clone(), ctx.R.detach().clone(), ctx.theta.detach().clone()]
    corr = refresh_correspondences(ctx, [term])
    sizes = [b.numel() for b in base]

    def value(flat: torch.Tensor):
        parts = torch.split(flat, sizes)
        ctx.T, ctx.R, ctx.theta = (p.reshape(b.shape) for p, b in zip(parts, base))
        return compute_terms(ctx, corr, [term])[term]

    x0 = torch.cat([b.reshape(-1) for b in base])
    x = x0.clone().requires_grad_(True)
    v = value(x)
    (g,) = torch.autograd.grad(v, x, allow_unused=True)
    g = torch.zeros_like(x0) if g is None else g
    fd = torch.zeros_like(x0)
    with torch.no_grad():
        for i in range(x0.numel()):
            xp, xm = x0.clone(), x0.clone()
            xp[i] += h
            xm[i] -= h
            fd[i] = (value(xp) - value(xm)) / (2 * h)
    ctx.T, ctx.R, ctx.theta = base
    scale = float(fd.abs().max())
    err = float((g - fd).abs().max())
    return (err / scale if scale > 0 else err), scale


def world_view(bundle):
    """World-frame sensor positions, rotations, clouds and boxes of a bundle."""
    from lidarmocap.localization import Box

    rwl = bundle.R_WL
    rot, t = rwl[:3, :3], rwl[:3, 3]
    pos = bundle.lidar_positions @ rot.T + t
    rots = np.einsum("ab,fbc->fac", rot, bundle.lidar_rotations)
    clouds = [c.points @ r.T + p for c, r, p in zip(bundle.clouds, rots, pos)]
    dyaw = float(np.arctan2(rot[1, 0], rot[0, 0]))
    boxes = [[Box(b.center @ rot.T + t, b.size, b.yaw + dyaw, b.score, b.frame_id) for b in fb]
             for fb in bundle.boxes]
    return pos, rots, clouds, boxes


def synced_imu(bundle, role):
    """IMU track of ``role`` resampled at the LiDAR instants with the planted clock offset."""
    from lidarmocap.calib_sync import ClockMap, synchronize_and_resample

    clock = ClockMap(1.0, bundle.spec.clock_offset)
    out, _ = synchronize_and_resample(bundle.imu[role], bundle.lidar_times, clock)
    return out


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
