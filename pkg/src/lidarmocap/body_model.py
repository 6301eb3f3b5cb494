"""Skinned parametric body: shape blend, joint regression, kinematic chain and
linear blend skinning, plus pose/motion containers and the on-disk archive."""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionMismatchError, FormatError, InvalidInputError
from .npzio import read_npz, write_npz
from .rotations import rodrigues, rodrigues_torch

REGION_NAMES: tuple[str, ...] = (
    "head",
    "torso",
    "left_arm",
    "right_arm",
    "left_hand",
    "right_hand",
    "left_leg",
    "right_leg",
)

SMPL_JOINT_NAMES: tuple[str, ...] = (
    "pelvis", "L_hip", "R_hip", "spine1", "L_knee", "R_knee", "spine2",
    "L_ankle", "R_ankle", "spine3", "L_foot", "R_foot", "neck", "L_collar",
    "R_collar", "head", "L_shoulder", "R_shoulder", "L_elbow", "R_elbow",
    "L_wrist", "R_wrist", "L_hand", "R_hand",
)

SMPL_PARENTS: tuple[int, ...] = (
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
)

# joint index -> body region, used when deriving labels from skin weights
SMPL_JOINT_REGION: tuple[str, ...] = (
    "torso", "left_leg", "right_leg", "torso", "left_leg", "right_leg", "torso",
    "left_leg", "right_leg", "torso", "left_leg", "right_leg", "torso", "torso",
    "torso", "head", "left_arm", "right_arm", "left_arm", "right_arm",
    "left_hand", "right_hand", "left_hand", "right_hand",
)

MODEL_FORMAT = "lidarmocap.body_model"
MODEL_VERSION = 1
STABLE_FOOT_THRESHOLD = 0.02


@dataclass(frozen=True, eq=False)
class BodyModel:
    """Immutable skinned body model.

    Attributes:
        template_vertices: (N, 3) rest-pose vertices at zero shape.
        faces: (F, 3) vertex indices, counter-clockwise seen from outside.
        shape_dirs: (N, 3, B) linear shape basis.
        joint_regressor: (J, N) rows summing to one.
        parents: (J,) parent index per joint, -1 for the root, topologically ordered.
        skin_weights: (N, J) rows summing to one.
        region_labels: (N,) index into ``region_names``.
        foot_left, foot_right: sole vertex indices of each foot.
        joint_names: names of the J joints.
        head_joint: index of the joint the head-mounted sensor is attached to.
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_dirs: np.ndarray
    joint_regressor: np.ndarray
    parents: np.ndarray
    skin_weights: np.ndarray
    region_labels: np.ndarray
    foot_left: np.ndarray
    foot_right: np.ndarray
    joint_names: tuple[str, ...] = SMPL_JOINT_NAMES
    region_names: tuple[str, ...] = REGION_NAMES
    head_joint: int = 15

    def __post_init__(self) -> None:
        conv = {
            "template_vertices": np.float64,
            "shape_dirs": np.float64,
            "joint_regressor": np.float64,
            "skin_weights": np.float64,
            "faces": np.int64,
            "parents": np.int64,
            "region_labels": np.int64,
            "foot_left": np.int64,
            "foot_right": np.int64,
        }
        for name, dtype in conv.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "region_names", tuple(self.region_names))
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[2]

    def validate(self, atol: float = 1e-6) -> None:
        """Check array shapes and the structural invariants of the model."""
        n = self.template_vertices.shape[0]
        j = self.parents.shape[0]
        if self.template_vertices.ndim != 2 or self.template_vertices.shape[1] != 3:
            raise DimensionMismatchError("template_vertices must be (N, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DimensionMismatchError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise DimensionMismatchError("face index out of range")
        if self.shape_dirs.ndim != 3 or self.shape_dirs.shape[:2] != (n, 3):
            raise DimensionMismatchError("shape_dirs must be (N, 3, B)")
        if self.joint_regressor.shape != (j, n):
            raise DimensionMismatchError("joint_regressor must be (J, N)")
        if self.skin_weights.shape != (n, j):
            raise DimensionMismatchError("skin_weights must be (N, J)")
        if self.region_labels.shape != (n,):
            raise DimensionMismatchError("region_labels must be (N,)")
        if len(self.joint_names) != j:
            raise DimensionMismatchError("joint_names length must equal the joint count")
        if self.parents[0] != -1 or any(self.parents[i] < 0 or self.parents[i] >= i for i in range(1, j)):
            raise FormatError("parents must list the root first and every parent before its child")
        if not np.allclose(self.skin_weights.sum(1), 1.0, atol=atol):
            raise FormatError("skin weight rows must sum to 1")
        if not np.allclose(self.joint_regressor.sum(1), 1.0, atol=atol):
            raise FormatError("joint regressor rows must sum to 1")
        if self.region_labels.min() < 0 or self.region_labels.max() >= len(self.region_names):
            raise FormatError("region label out of range")
        for feet in (self.foot_left, self.foot_right):
            if feet.size == 0 or feet.min() < 0 or feet.max() >= n:
                raise FormatError("foot vertex indices missing or out of range")
        if not 0 < self.head_joint < j:
            raise FormatError("head joint out of range")

    def head_chain(self) -> list[int]:
        """Joint indices from the root down to the head joint (inclusive)."""
        chain = [self.head_joint]
        while self.parents[chain[-1]] >= 0:
            chain.append(int(self.parents[chain[-1]]))
        return chain[::-1]

    def shaped_vertices(self, beta: np.ndarray | None = None) -> np.ndarray:
        if beta is None:
            return self.template_vertices.copy()
        beta = _check_beta(beta, self.n_shape)
        return self.template_vertices + self.shape_dirs @ beta

    def rest_joints(self, beta: np.ndarray | None = None) -> np.ndarray:
        return self.joint_regressor @ self.shaped_vertices(beta)

    def region_mask(self, name: str) -> np.ndarray:
        return self.region_labels == self.region_names.index(name)


@dataclass(eq=False)
class PoseFrame:
    """Global translation, root orientation and local joint rotations of one frame."""

    T: np.ndarray
    R: np.ndarray
    theta: np.ndarray

    def __post_init__(self) -> None:
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 2 or self.theta.shape[1] != 3:
            raise DimensionMismatchError("theta must be (J-1, 3)")
        _check_finite(T=self.T, R=self.R, theta=self.theta)


@dataclass(eq=False)
class MotionSequence:
    """A pose track sampled at a fixed rate.

    Attributes:
        T: (n, 3) translations.
        R: (n, 3) root orientations (axis-angle).
        theta: (n, J-1, 3) local joint rotations (axis-angle).
        beta: (B,) shape coefficients shared by all frames.
        fps: sample rate in Hz.
        start_time: timestamp of frame 0 in seconds.
    """

    T: np.ndarray
    R: np.ndarray
    theta: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(10))
    fps: float = 20.0
    start_time: float = 0.0

    def __post_init__(self) -> None:
        self.T = np.asarray(self.T, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        n = self.T.shape[0]
        if self.T.shape != (n, 3) or self.R.shape != (n, 3):
            raise DimensionMismatchError("T and R must both be (n, 3)")
        if self.theta.ndim != 3 or self.theta.shape[0] != n or self.theta.shape[2] != 3:
            raise DimensionMismatchError("theta must be (n, J-1, 3)")
        if not self.fps > 0:
            raise DimensionMismatchError("fps must be positive")

    def __len__(self) -> int:
        return self.T.shape[0]

    @property
    def n_frames(self) -> int:
        return self.T.shape[0]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_frames) / self.fps

    def frame(self, i: int) -> PoseFrame:
        return PoseFrame(self.T[i].copy(), self.R[i].copy(), self.theta[i].copy())

    @property
    def frames(self) -> list[PoseFrame]:
        return [self.frame(i) for i in range(self.n_frames)]

    @classmethod
    def from_frames(cls, frames: list[PoseFrame], beta=None, fps: float = 20.0, start_time: float = 0.0) -> "MotionSequence":
        return cls(
            np.stack([f.T for f in frames]),
            np.stack([f.R for f in frames]),
            np.stack([f.theta for f in frames]),
            np.zeros(10) if beta is None else beta,
            fps,
            start_time,
        )

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(
            self.T[start:stop].copy(),
            self.R[start:stop].copy(),
            self.theta[start:stop].copy(),
            self.beta.copy(),
            self.fps,
            self.start_time + start / self.fps,
        )

    def copy(self) -> "MotionSequence":
        return replace(self, T=self.T.copy(), R=self.R.copy(), theta=self.theta.copy(), beta=self.beta.copy())


def _check_finite(**arrays) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"{name} contains non-finite values")


def _check_beta(beta, n_shape: int) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.shape[0] > n_shape:
        raise DimensionMismatchError(f"beta has {beta.shape[0]} coefficients, model has {n_shape}")
    if beta.shape[0] < n_shape:
        beta = np.concatenate([beta, np.zeros(n_shape - beta.shape[0])])
    return beta


class BodyLayer:
    """Batched differentiable forward pass of a :class:`BodyModel` in torch.

    Skinning blends the per-joint affine transforms with the weight matrix in
    one matrix product, then applies the blended transform to each vertex.
    """

    def __init__(self, model: BodyModel, dtype: torch.dtype = torch.float64):
        self.model = model
        self.dtype = dtype
        self.parents = [int(p) for p in model.parents]
        self.template = torch.tensor(model.template_vertices, dtype=dtype)
        self.shape_dirs = torch.tensor(model.shape_dirs, dtype=dtype)
        self.regressor = torch.tensor(model.joint_regressor, dtype=dtype)
        self.faces = torch.tensor(model.faces, dtype=torch.long)
        self.weights = torch.tensor(model.skin_weights, dtype=dtype)

    def rest(self, beta: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Shaped rest vertices (N, 3) and rest joints (J, 3)."""
        v = self.template
        if beta is not None:
            beta = torch.as_tensor(beta, dtype=self.dtype)
            nb = beta.shape[0]
            v = v + torch.einsum("nck,k->nc", self.shape_dirs[:, :, :nb], beta)
        return v, self.regressor @ v

    def __call__(self, T, R, theta, beta=None):
        verts, joints, _ = self.forward_full(T, R, theta, beta)
        return verts, joints

    def forward_full(self, T, R, theta, beta=None):
        """Posed vertices (F, N, 3), joints (F, J, 3) and global joint rotations (F, J, 3, 3)."""
        T = torch.as_tensor(T, dtype=self.dtype)
        R = torch.as_tensor(R, dtype=self.dtype)
        theta = torch.as_tensor(theta, dtype=self.dtype)
        squeeze = T.ndim == 1
        if squeeze:
            T, R, theta = T[None], R[None], theta[None]
        n_frames = T.shape[0]
        n_joints = len(self.parents)
        if theta.shape[1] != n_joints - 1:
            raise DimensionMismatchError(f"theta has {theta.shape[1]} joints, model expects {n_joints - 1}")
        v_rest, j_rest = self.rest(beta)
        local = rodrigues_torch(torch.cat([R[:, None, :], theta], dim=1))
        g_rot = [local[:, 0]]
        g_pos = [j_rest[0].expand(n_frames, 3)]
        for j in range(1, n_joints):
            p = self.parents[j]
            g_rot.append(g_rot[p] @ local[:, j])
            g_pos.append(g_pos[p] + torch.einsum("fab,b->fa", g_rot[p], j_rest[j] - j_rest[p]))
        rot = torch.stack(g_rot, dim=1)
        pos = torch.stack(g_pos, dim=1)
        offset = pos - torch.einsum("fjab,jb->fja", rot, j_rest)
        blend = torch.matmul(self.weights, torch.cat([rot.reshape(n_frames, n_joints, 9), offset], dim=-1))
        lin = blend[..., :9].reshape(n_frames, -1, 3, 3)
        verts = torch.einsum("fnab,nb->fna", lin, v_rest) + blend[..., 9:] + T[:, None, :]
        joints = pos + T[:, None, :]
        if squeeze:
            return verts[0], joints[0], rot[0]
        return verts, joints, rot


def forward_batch(model: BodyModel, T, R, theta, beta=None) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices (F, N, 3) and joints (F, J, 3) for a batch of poses."""
    _check_finite(T=T, R=R, theta=theta)
    if beta is not None:
        _check_finite(beta=beta)
    layer = _layer_cache(model)
    with torch.no_grad():
        v, j = layer(np.asarray(T, float), np.asarray(R, float), np.asarray(theta, float),
                     None if beta is None else _check_beta(beta, model.n_shape))
    return v.numpy(), j.numpy()


def forward(model: BodyModel, pose: PoseFrame, beta=None) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices (N, 3) and joints (J, 3) of a single frame."""
    v, j = forward_batch(model, pose.T[None], pose.R[None], pose.theta[None], beta)
    return v[0], j[0]


def forward_motion(model: BodyModel, motion: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    return forward_batch(model, motion.T, motion.R, motion.theta, motion.beta)


_LAYERS: dict[int, tuple[BodyModel, BodyLayer]] = {}


def _layer_cache(model: BodyModel) -> BodyLayer:
    hit = _LAYERS.get(id(model))
    if hit is None or hit[0] is not model:
        if len(_LAYERS) > 8:
            _LAYERS.clear()
        hit = (model, BodyLayer(model))
        _LAYERS[id(model)] = hit
    return hit[1]


def head_rotation(model: BodyModel, R: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Global head orientation: ordered product of the rotations along the
    root-to-head chain. Accepts single frames or leading batch dimensions."""
    R = np.asarray(R, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    chain = model.head_chain()
    out = rodrigues(R)
    for j in chain[1:]:
        out = out @ rodrigues(theta[..., j - 1, :])
    return out


def pelvis_head_offset(model: BodyModel, R, theta, beta=None) -> np.ndarray:
    """Posed pelvis position minus posed head-joint position, (..., 3)."""
    R = np.asarray(R, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    single = R.ndim == 1
    Rb = R.reshape(-1, 3)
    tb = theta.reshape(-1, theta.shape[-2], 3)
    _, joints = forward_batch(model, np.zeros_like(Rb), Rb, tb, beta)
    out = joints[:, 0] - joints[:, model.head_joint]
    return out[0] if single else out.reshape(R.shape)


def stable_feet(vertices: np.ndarray, foot_left: np.ndarray, foot_right: np.ndarray,
                threshold: float = STABLE_FOOT_THRESHOLD) -> list[str | None]:
    """Which foot is stable between consecutive frames.

    A foot is stable for the pair (j-1, j) when the displacement of its vertex
    centroid is below ``threshold`` and smaller than the other foot's. Exact
    ties between two slow feet resolve to the left foot.

    Args:
        vertices: (F, N, 3) posed vertices.

    Returns:
        F-1 entries, each ``"left"``, ``"right"`` or ``None``.
    """
    vertices = np.asarray(vertices)
    cl = vertices[:, foot_left].mean(1)
    cr = vertices[:, foot_right].mean(1)
    dl = np.linalg.norm(np.diff(cl, axis=0), axis=1)
    dr = np.linalg.norm(np.diff(cr, axis=0), axis=1)
    out: list[str | None] = []
    for a, b in zip(dl, dr):
        if a < threshold and a <= b:
            out.append("left")
        elif b < threshold and b < a:
            out.append("right")
        else:
            out.append(None)
    return out


def stable_feet_per_frame(labels: list[str | None]) -> list[str | None]:
    """Per-frame stable foot: frame j uses the pair (j-1, j), frame 0 the pair (0, 1)."""
    if not labels:
        return [None]
    return [labels[0]] + list(labels)


def save_body_model(model: BodyModel, path: str | os.PathLike) -> None:
    write_npz(
        path,
        {
            "template_vertices": model.template_vertices,
            "faces": model.faces,
            "shape_dirs": model.shape_dirs,
            "joint_regressor": model.joint_regressor,
            "parents": model.parents,
            "skin_weights": model.skin_weights,
            "region_labels": model.region_labels,
            "region_names": np.array(model.region_names),
            "foot_left": model.foot_left,
            "foot_right": model.foot_right,
            "joint_names": np.array(model.joint_names),
            "head_joint": np.array(model.head_joint, dtype=np.int64),
        },
        MODEL_FORMAT,
        MODEL_VERSION,
    )


def load_body_model(path: str | os.PathLike) -> BodyModel:
    arrays, _ = read_npz(path, MODEL_FORMAT, (MODEL_VERSION,))
    required = ("template_vertices", "faces", "shape_dirs", "joint_regressor", "parents",
                "skin_weights", "region_labels", "region_names", "foot_left", "foot_right",
                "joint_names", "head_joint")
    missing = [k for k in required if k not in arrays]
    if missing:
        raise FormatError(f"{path}: missing arrays {missing}")
    return BodyModel(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"],
        shape_dirs=arrays["shape_dirs"],
        joint_regressor=arrays["joint_regressor"],
        parents=arrays["parents"],
        skin_weights=arrays["skin_weights"],
        region_labels=arrays["region_labels"],
        foot_left=arrays["foot_left"],
        foot_right=arrays["foot_right"],
        joint_names=tuple(str(s) for s in arrays["joint_names"]),
        region_names=tuple(str(s) for s in arrays["region_names"]),
        head_joint=int(arrays["head_joint"]),
    )


def body_model_from_smpl(params: dict, sole_tolerance: float = 0.01) -> BodyModel:
    """Build a :class:`BodyModel` from SMPL-layout parameters.

    Expected keys: ``v_template`` (N, 3), ``f`` (F, 3), ``shapedirs`` (N, 3, B),
    ``J_regressor`` (J, N, dense or scipy sparse), ``weights`` (N, J) and
    ``kintree_table`` (2, J). Region labels follow each vertex's dominant joint;
    the sole of each foot is the set of ankle/foot vertices within
    ``sole_tolerance`` of that set's lowest point along the model's up axis (+Y).
    """
    def dense(x):
        if hasattr(x, "toarray"):
            x = x.toarray()
        return np.asarray(x, dtype=np.float64)

    v = dense(params["v_template"])
    faces = np.asarray(params["f"], dtype=np.int64)
    shape_dirs = dense(params.get("shapedirs", np.zeros((v.shape[0], 3, 10))))
    regressor = dense(params["J_regressor"])
    weights = dense(params["weights"])
    kintree = np.asarray(params["kintree_table"], dtype=np.int64)
    parents = kintree[0].copy()
    parents[0] = -1
    n_joints = parents.shape[0]
    if n_joints != len(SMPL_JOINT_NAMES):
        raise DimensionMismatchError(f"expected {len(SMPL_JOINT_NAMES)} joints, found {n_joints}")
    regressor = regressor / regressor.sum(1, keepdims=True)
    weights = weights / weights.sum(1, keepdims=True)
    dominant = np.argmax(weights, axis=1)
    labels = np.array([REGION_NAMES.index(SMPL_JOINT_REGION[j]) for j in dominant], dtype=np.int64)

    def sole(joints: tuple[int, ...]) -> np.ndarray:
        idx = np.flatnonzero(np.isin(dominant, joints))
        if idx.size == 0:
            raise FormatError("no vertices are dominated by the foot joints")
        y = v[idx, 1]
        return idx[y <= y.min() + sole_tolerance]

    return BodyModel(
        template_vertices=v,
        faces=faces,
        shape_dirs=shape_dirs,
        joint_regressor=regressor,
        parents=parents,
        skin_weights=weights,
        region_labels=labels,
        foot_left=sole((7, 10)),
        foot_right=sole((8, 11)),
    )


def convert_smpl_file(src: str | os.PathLike, dst: str | os.PathLike) -> BodyModel:
    """Convert an SMPL-layout ``.pkl`` or ``.npz`` parameter file to a model archive."""
    src = Path(src)
    if src.suffix == ".npz":
        with np.load(src, allow_pickle=True) as data:
            params = {k: data[k] for k in data.files}
    else:
        with open(src, "rb") as fh:
            params = pickle.load(fh, encoding="latin1")
    model = body_model_from_smpl(params)
    save_body_model(model, dst)
    return model
