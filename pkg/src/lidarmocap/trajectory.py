"""Timestamped 6-DoF pose tracks (sensor ego-motion or derived paths)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError


@dataclass(eq=False)
class Trajectory:
    """Poses ``x_world = rotations[i] @ x_local + positions[i]`` at ``times[i]``.

    Attributes:
        times: (n,) strictly increasing seconds.
        positions: (n, 3) metres.
        rotations: (n, 3, 3) orthonormal matrices.
        frame: tag of the frame the poses are expressed in.
    """

    times: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    frame: str = "L"

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        n = self.times.shape[0]
        if self.positions.shape != (n, 3) or self.rotations.shape != (n, 3, 3):
            raise DimensionMismatchError("trajectory needs (n,) times, (n, 3) positions and (n, 3, 3) rotations")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        err = np.abs(np.einsum("nij,nkj->nik", self.rotations, self.rotations) - np.eye(3)).max() if n else 0.0
        if err > 1e-6:
            raise ValueError(f"trajectory rotations are not orthonormal (error {err:.2e})")

    def __len__(self) -> int:
        return self.times.shape[0]

    def transformed(self, transform: np.ndarray, frame: str = "W") -> "Trajectory":
        """Poses after applying a 4x4 rigid transform on the left."""
        rot, trans = np.asarray(transform, float)[:3, :3], np.asarray(transform, float)[:3, 3]
        return Trajectory(self.times.copy(), self.positions @ rot.T + trans,
                          np.einsum("ab,nbc->nac", rot, self.rotations), frame)
