"""The semantic code vector: shape, expression, albedo, illumination, camera."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

BLOCKS = ("alpha", "delta", "gamma", "phi", "cam")
N_PHI = 27
N_CAM = 6
# camera block layout
PITCH, YAW, ROLL, TX, TY, LOG_SCALE = range(6)


@dataclass
class FaceParams:
    """Parameter blocks of one face.

    ``phi`` is channel-major: entries ``9*c .. 9*c+8`` are the nine SH
    coefficients of colour channel ``c`` (R, G, B). ``cam`` is
    ``(pitch, yaw, roll, tx, ty, log_scale)`` with angles in radians and the
    translation in normalized device coordinates.
    """

    alpha: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    cam: np.ndarray

    def __post_init__(self):
        for name in BLOCKS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if self.phi.size != N_PHI:
            raise ValueError(f"phi must have {N_PHI} entries, got {self.phi.size}")
        if self.cam.size != N_CAM:
            raise ValueError(f"cam must have {N_CAM} entries, got {self.cam.size}")

    @classmethod
    def zeros(cls, k_shape=80, k_expr=64, k_albedo=80) -> "FaceParams":
        return cls(np.zeros(k_shape), np.zeros(k_expr), np.zeros(k_albedo),
                   np.zeros(N_PHI), np.zeros(N_CAM))

    @classmethod
    def zeros_like_model(cls, model) -> "FaceParams":
        return cls.zeros(model.k_shape, model.k_expr, model.k_albedo)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(getattr(self, b).size for b in BLOCKS)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, b) for b in BLOCKS])

    @classmethod
    def from_vector(cls, vec, sizes) -> "FaceParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != sum(sizes):
            raise ValueError(f"vector of length {vec.size} does not split into {sizes}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return cls(*[p.copy() for p in parts])

    def block_slices(self) -> dict[str, slice]:
        return block_slices(self.sizes)

    def copy(self) -> "FaceParams":
        return FaceParams(*[getattr(self, b).copy() for b in BLOCKS])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))

    def to_dict(self) -> dict[str, list[float]]:
        return {b: [float(x) for x in getattr(self, b)] for b in BLOCKS}

    @classmethod
    def from_dict(cls, d) -> "FaceParams":
        missing = [b for b in BLOCKS if b not in d]
        if missing:
            raise ValueError(f"missing parameter blocks: {missing}")
        return cls(*[d[b] for b in BLOCKS])


def block_slices(sizes) -> dict[str, slice]:
    ends = np.cumsum(sizes)
    starts = ends - np.asarray(sizes)
    return {b: slice(int(s), int(e)) for b, s, e in zip(BLOCKS, starts, ends)}


def save_params(params: FaceParams, path: str | os.PathLike) -> None:
    with open(path, "w") as f:
        json.dump(params.to_dict(), f)
        f.write("\n")


def load_params(path: str | os.PathLike) -> FaceParams:
    with open(path) as f:
        return FaceParams.from_dict(json.load(f))
