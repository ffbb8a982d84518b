"""Scene model: splats, camera types, frame bundles, and parameter activation rules.

Parameterization keeps optimizer steps unconstrained: per-axis scale is stored
in log-domain, opacity as a pre-sigmoid logit. Color is direct RGB (no
spherical harmonics). One splat additionally carries a K-dim semantic vector
rendered alongside color.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_normalize, quat_to_rot, quat_to_rot_batch

SPLIT_SCALE_FACTOR = 1.6  # scale divisor applied to both children of a split


class ValidationError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian3D:
    """One splat: position (m), per-axis log standard deviation (log m),
    orientation quaternion (w,x,y,z), pre-sigmoid opacity, RGB in [0,1],
    and a K-dim semantic vector."""
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.semantic = np.asarray(self.semantic, dtype=np.float64)

    def validate(self, index=None):
        where = "" if index is None else f" (gaussian {index})"
        for name in ("position", "log_scale", "rotation", "color", "semantic"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite {name}{where}")
        if not np.isfinite(self.opacity_logit):
            raise ValidationError(f"non-finite opacity_logit{where}")
        n = np.linalg.norm(self.rotation)
        if not (1 - 1e-6 <= n <= 1 + 1e-6):
            raise ValidationError(f"quaternion norm {n} out of tolerance{where}")


@dataclass
class ActivatedGaussian:
    scale: np.ndarray       # exp(log_scale), meters
    opacity: float          # sigmoid(opacity_logit), in (0,1)
    covariance: np.ndarray  # 3x3 SPD, R diag(s^2) R^T


def activate(g: Gaussian3D, index=None) -> ActivatedGaussian:
    """Map stored parameters to their physical values. Total on valid inputs."""
    g.validate(index)
    s = np.exp(g.log_scale)
    R = quat_to_rot(g.rotation)
    cov = (R * (s * s)) @ R.T
    cov = 0.5 * (cov + cov.T)
    return ActivatedGaussian(scale=s, opacity=float(sigmoid(g.opacity_logit)), covariance=cov)


def split_gaussian(g: Gaussian3D, rng: np.random.Generator):
    """Split one splat into two children sampled from the parent density.

    Children scales shrink by SPLIT_SCALE_FACTOR; the semantic vector is
    copied bit-exactly into both children.
    """
    s = np.exp(g.log_scale)
    R = quat_to_rot(g.rotation)
    children = []
    for _ in range(2):
        local = rng.standard_normal(3) * s
        child = Gaussian3D(
            position=g.position + R @ local,
            log_scale=g.log_scale - np.log(SPLIT_SCALE_FACTOR),
            rotation=g.rotation.copy(),
            opacity_logit=g.opacity_logit,
            color=g.color.copy(),
            semantic=g.semantic.copy(),
        )
        children.append(child)
    return children[0], children[1]


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError("principal point outside image")

    def scaled(self, factor):
        """Intrinsics for an image downscaled by `factor` (e.g. 2 per pyramid level)."""
        return CameraIntrinsics(
            fx=self.fx / factor, fy=self.fy / factor,
            cx=self.cx / factor, cy=self.cy / factor,
            width=max(1, int(np.ceil(self.width / factor))),
            height=max(1, int(np.ceil(self.height / factor))),
        )


@dataclass
class Pose:
    """Camera-to-world: x_world = R(q) @ x_cam + t."""
    rotation: np.ndarray   # quaternion (w,x,y,z), unit
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @staticmethod
    def identity():
        return Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = quat_to_rot(self.rotation)
        T[:3, 3] = self.translation
        return T

    def world_to_camera(self):
        """(R_wc, t_wc) with x_cam = R_wc @ x_world + t_wc."""
        R = quat_to_rot(self.rotation)
        return R.T, -R.T @ self.translation


@dataclass
class FrameBundle:
    """One observation: RGB in [0,1], metric depth (0 = invalid), an optional
    feature grid (h_f x w_f x C, C = 768 raw or K compressed), timestamp."""
    rgb: np.ndarray
    depth: np.ndarray
    feature: np.ndarray | None = None
    timestamp: float = 0.0

    def validate(self):
        if np.any(self.depth < 0):
            raise ValidationError("negative depth")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise ValidationError("rgb outside [0,1]")
        if self.feature is not None and not np.all(np.isfinite(self.feature)):
            raise ValidationError("non-finite feature grid")


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    ssim_window: int = 11
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def validate(self):
        if not (0.0 <= self.lambda_ssim <= 1.0):
            raise ValidationError("lambda_ssim outside [0,1]")


@dataclass
class PyramidSchedule:
    levels: int = 3
    iterations_per_level: tuple = (30, 30, 40)
    downscale_factor: int = 2

    def validate(self, height=None, width=None):
        if self.levels < 1:
            raise ValidationError("pyramid needs at least one level")
        if len(self.iterations_per_level) != self.levels:
            raise ValidationError("iterations_per_level length != levels")
        if height is not None and width is not None:
            f = self.downscale_factor ** (self.levels - 1)
            if np.ceil(height / f) < 32 or np.ceil(width / f) < 32:
                raise ValidationError("coarsest pyramid level below 32x32")


class GaussianMap:
    """The scene: all splats as parallel arrays, plus per-parameter Adam
    moments and densification statistics. Single-writer mutation."""

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits",
                   "colors", "semantics")

    def __init__(self, feature_dim):
        self.feature_dim = int(feature_dim)
        self.positions = np.zeros((0, 3))
        self.log_scales = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.opacity_logits = np.zeros((0,))
        self.colors = np.zeros((0, 3))
        self.semantics = np.zeros((0, self.feature_dim))
        # Adam moments, keyed by parameter name
        self.adam_m = {n: np.zeros_like(getattr(self, n)) for n in self.PARAM_NAMES}
        self.adam_v = {n: np.zeros_like(getattr(self, n)) for n in self.PARAM_NAMES}
        # densification statistics
        self.grad2d_accum = np.zeros((0,))
        self.obs_count = np.zeros((0,), dtype=np.int64)

    def __len__(self):
        return self.positions.shape[0]

    def check_consistent(self):
        n = len(self)
        for name in self.PARAM_NAMES:
            if getattr(self, name).shape[0] != n:
                raise ValidationError(f"{name} length mismatch")
            if self.adam_m[name].shape != getattr(self, name).shape:
                raise ValidationError(f"adam_m[{name}] shape mismatch")
        if self.semantics.shape[1] != self.feature_dim:
            raise ValidationError("semantic width != feature_dim")
        if self.grad2d_accum.shape[0] != n or self.obs_count.shape[0] != n:
            raise ValidationError("densify stats length mismatch")

    def normalize_rotations(self):
        if len(self):
            self.rotations = quat_normalize(self.rotations)

    def append(self, positions, log_scales, rotations, opacity_logits, colors, semantics):
        """Add splats with zeroed optimizer state and stats."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n_new = positions.shape[0]
        self.positions = np.vstack([self.positions, positions])
        self.log_scales = np.vstack([self.log_scales, np.atleast_2d(log_scales)])
        self.rotations = np.vstack([self.rotations, np.atleast_2d(rotations)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.atleast_1d(opacity_logits)])
        self.colors = np.vstack([self.colors, np.atleast_2d(colors)])
        semantics = np.atleast_2d(np.asarray(semantics, dtype=np.float64))
        if semantics.shape != (n_new, self.feature_dim):
            raise ValidationError("appended semantics have wrong shape")
        self.semantics = np.vstack([self.semantics, semantics])
        for name in self.PARAM_NAMES:
            arr = getattr(self, name)
            pad_shape = (n_new,) + arr.shape[1:]
            self.adam_m[name] = np.concatenate([self.adam_m[name], np.zeros(pad_shape)])
            self.adam_v[name] = np.concatenate([self.adam_v[name], np.zeros(pad_shape)])
        self.grad2d_accum = np.concatenate([self.grad2d_accum, np.zeros(n_new)])
        self.obs_count = np.concatenate([self.obs_count, np.zeros(n_new, dtype=np.int64)])
        self.check_consistent()

    def keep(self, mask):
        """Retain splats where mask is True, dropping optimizer state and stats in lockstep."""
        mask = np.asarray(mask, dtype=bool)
        for name in self.PARAM_NAMES:
            setattr(self, name, getattr(self, name)[mask])
            self.adam_m[name] = self.adam_m[name][mask]
            self.adam_v[name] = self.adam_v[name][mask]
        self.grad2d_accum = self.grad2d_accum[mask]
        self.obs_count = self.obs_count[mask]

    def reset_densify_stats(self):
        self.grad2d_accum = np.zeros(len(self))
        self.obs_count = np.zeros(len(self), dtype=np.int64)

    def get_gaussian(self, i) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
            semantic=self.semantics[i].copy(),
        )

    def activated(self):
        """Vectorized activation: (scales, opacities, covariances, rotmats)."""
        scales = np.exp(self.log_scales)
        opac = sigmoid(self.opacity_logits)
        R = quat_to_rot_batch(self.rotations) if len(self) else np.zeros((0, 3, 3))
        cov = np.einsum('nij,nj,nkj->nik', R, scales * scales, R)
        return scales, opac, cov, R

    def copy(self):
        other = GaussianMap(self.feature_dim)
        for name in self.PARAM_NAMES:
            setattr(other, name, getattr(self, name).copy())
            other.adam_m[name] = self.adam_m[name].copy()
            other.adam_v[name] = self.adam_v[name].copy()
        other.grad2d_accum = self.grad2d_accum.copy()
        other.obs_count = self.obs_count.copy()
        return other

    def scene_extent(self):
        """Radius of the bounding sphere around the splat centroid (meters)."""
        if len(self) == 0:
            return 1.0
        center = self.positions.mean(axis=0)
        return float(max(np.linalg.norm(self.positions - center, axis=1).max(), 1e-6))
