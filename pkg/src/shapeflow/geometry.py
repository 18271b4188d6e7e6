"""Procedural shape oracles: analytic SDFs, surface sampling, degradation.

Shapes are a base primitive (sphere, box, superquadric) plus a radial
detail field of sinusoidal bumps evaluated on the unit direction of each
query point.  For spheres the signed distance is exact; for the other
bases it is the base SDF minus the displacement, which has correct sign
and first-order-accurate magnitude while the total bump amplitude stays
well below the base size (the shapes here keep it <= 0.1).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

MAX_DETAIL_AMP = 0.1


@dataclass(frozen=True)
class BumpTerm:
    """One radial bump: amp * sin(freq . u + phase) on unit directions u."""

    freq: tuple[int, int, int]
    amp: float
    phase: float


@dataclass(frozen=True)
class ShapeSpec:
    """Parametric shape: base primitive plus radial detail terms."""

    base: str                     # "sphere" | "box" | "superquadric"
    base_params: dict
    detail: tuple[BumpTerm, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.base not in ("sphere", "box", "superquadric"):
            raise ValueError(f"unknown base primitive {self.base!r}")
        object.__setattr__(self, "detail", tuple(self.detail))
        for term in self.detail:
            if abs(term.amp) > MAX_DETAIL_AMP:
                raise ValueError(
                    f"detail amplitude {term.amp} exceeds {MAX_DETAIL_AMP}")

    def to_json_dict(self) -> dict:
        return {
            "base": self.base,
            "base_params": self.base_params,
            "detail": [{"freq": list(t.freq), "amp": t.amp, "phase": t.phase}
                       for t in self.detail],
            "seed": self.seed,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ShapeSpec":
        detail = tuple(BumpTerm(tuple(int(v) for v in t["freq"]),
                                float(t["amp"]), float(t["phase"]))
                       for t in d.get("detail", []))
        return ShapeSpec(base=d["base"], base_params=dict(d["base_params"]),
                         detail=detail, seed=int(d.get("seed", 0)))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)

    @staticmethod
    def load(path) -> "ShapeSpec":
        with open(path) as f:
            return ShapeSpec.from_json_dict(json.load(f))


@dataclass
class PointCloud:
    """Ordered 3D points; indices are meaningful (they anchor latent tokens)."""

    points: np.ndarray                      # (n, 3) float64
    normals: Optional[np.ndarray] = None    # (n, 3) or None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class BoxTransform:
    """Affine map p -> p * scale + translation (uniform scale)."""

    scale: float
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.translation

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) / self.scale

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and not self.translation.any()


# ---------------------------------------------------------------------------
# signed distance evaluation


def _base_sdf(spec: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    if spec.base == "sphere":
        r = float(spec.base_params["radius"])
        return np.linalg.norm(pts, axis=1) - r
    if spec.base == "box":
        h = np.asarray(spec.base_params["half_extents"], dtype=np.float64)
        q = np.abs(pts) - h
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    # superquadric: radial first-order distance from the inside-outside
    # function Q, exact on rays through the origin
    e1, e2 = (float(v) for v in spec.base_params["exponents"])
    scales = np.asarray(spec.base_params["scales"], dtype=np.float64)
    x, y, z = np.abs(pts / scales).T
    tiny = 1e-12
    xy = (np.maximum(x, tiny) ** (2.0 / e2)
          + np.maximum(y, tiny) ** (2.0 / e2)) ** (e2 / e1)
    q = xy + np.maximum(z, tiny) ** (2.0 / e1)
    radii = np.linalg.norm(pts, axis=1)
    return radii * (1.0 - np.maximum(q, tiny) ** (-e1 / 2.0))


def _displacement(spec: ShapeSpec, dirs: np.ndarray) -> np.ndarray:
    disp = np.zeros(dirs.shape[0])
    for term in spec.detail:
        k = np.asarray(term.freq, dtype=np.float64)
        disp += term.amp * np.sin(dirs @ k + term.phase)
    return disp


def eval_sdf(spec: ShapeSpec, points) -> np.ndarray:
    """Signed distance of each point, negative inside.

    Sphere base with radial detail is exact:
    f(p) = |p| - (r + sum_i a_i * sin(k_i . p/|p| + phi_i)).
    Other bases subtract the displacement from the base SDF, which is exact
    in sign and accurate to O(amp * |grad disp|) in magnitude.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    base = _base_sdf(spec, pts)
    if not spec.detail:
        return base
    radii = np.linalg.norm(pts, axis=1)
    safe = radii > 1e-12
    out = base.copy()
    if safe.any():
        dirs = pts[safe] / radii[safe, None]
        out[safe] = base[safe] - _displacement(spec, dirs)
    # at the exact origin the direction is undefined: keep the base value
    return out


def make_sdf(spec: ShapeSpec,
             transform: Optional[BoxTransform] = None) -> Callable[[np.ndarray], np.ndarray]:
    """Bind a spec (optionally in normalized coordinates) into a field fn."""
    if transform is None or transform.is_identity:
        return lambda pts: eval_sdf(spec, pts)
    def fn(pts):
        return transform.scale * eval_sdf(spec, transform.invert(pts))
    return fn


def _sdf_gradient(spec: ShapeSpec, pts: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.empty_like(pts)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        grad[:, axis] = (eval_sdf(spec, pts + step) - eval_sdf(spec, pts - step)) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# surface sampling


def _initial_radii(spec: ShapeSpec, dirs: np.ndarray) -> np.ndarray:
    """Radius along each direction at which the base surface sits."""
    if spec.base == "sphere":
        base = np.full(dirs.shape[0], float(spec.base_params["radius"]))
    elif spec.base == "box":
        h = np.asarray(spec.base_params["half_extents"], dtype=np.float64)
        base = 1.0 / (np.abs(dirs) / h).max(axis=1)
    else:
        # at |u| = 1 the radial form gives sdf(u) = 1 - t0 with t0 the
        # surface radius along u
        base = 1.0 - _base_sdf(spec, dirs)
    return base + _displacement(spec, dirs)


def sample_surface(spec: ShapeSpec, n: int, seed: int = 0,
                   tol: float = 1e-5, max_newton: int = 50) -> PointCloud:
    """Draw n points with |eval_sdf| below tol via Newton projection.

    Deterministic per seed.  Points that fail to converge are resampled; the
    call fails once total rejections exceed 10 * n.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 points, got {n}")
    rng = np.random.default_rng(seed)
    collected: list[np.ndarray] = []
    remaining = n
    rejections = 0
    while remaining > 0:
        dirs = rng.normal(size=(remaining, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = dirs * _initial_radii(spec, dirs)[:, None]
        vals = eval_sdf(spec, pts)
        for _ in range(max_newton):
            live = np.abs(vals) >= tol
            if not live.any():
                break
            g = _sdf_gradient(spec, pts[live])
            g_sq = np.maximum((g * g).sum(axis=1), 1e-18)
            pts[live] -= (vals[live] / g_sq)[:, None] * g
            vals[live] = eval_sdf(spec, pts[live])
        converged = np.abs(vals) < tol
        collected.append(pts[converged])
        failed = int((~converged).sum())
        rejections += failed
        if rejections > 10 * n:
            raise RuntimeError(
                f"surface sampling failed: {rejections} rejections for n={n}")
        remaining = failed
    return PointCloud(points=np.concatenate(collected, axis=0)[:n])


# ---------------------------------------------------------------------------
# normalization and degradation


def normalize_to_unit_box(cloud: PointCloud) -> tuple[PointCloud, BoxTransform]:
    """Scale/translate so the longest AABB side is 1, centered at the origin."""
    pts = cloud.points
    if len(cloud) < 2 or (pts == pts[0]).all():
        raise ValueError("normalization needs at least 2 distinct points")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    longest = float((hi - lo).max())
    center = (lo + hi) / 2.0
    if longest == 1.0 and not center.any():
        transform = BoxTransform(1.0, np.zeros(3))
        return PointCloud(pts.copy(), cloud.normals), transform
    scale = 1.0 / longest
    transform = BoxTransform(scale, -center * scale)
    return PointCloud(transform.apply(pts), cloud.normals), transform


def degrade(spec: ShapeSpec, noise_amp: float, seed: int = 0,
            detail_attenuation: float = 0.0,
            num_noise_terms: int = 3) -> ShapeSpec:
    """Coarse version of a spec: detail attenuated, low-frequency noise added.

    Detail amplitudes are multiplied by detail_attenuation (terms reaching
    zero are dropped); noise bumps have frequency components in {0, 1, 2}
    and amplitudes at most noise_amp, mimicking smooth-but-noisy
    reconstructions of the fine shape.
    """
    if noise_amp < 0:
        raise ValueError(f"noise_amp must be >= 0, got {noise_amp}")
    kept = tuple(BumpTerm(t.freq, t.amp * detail_attenuation, t.phase)
                 for t in spec.detail if t.amp * detail_attenuation != 0.0)
    noise: list[BumpTerm] = []
    if noise_amp > 0:
        rng = np.random.default_rng(seed)
        for _ in range(num_noise_terms):
            freq = tuple(int(v) for v in rng.integers(0, 3, size=3))
            if freq == (0, 0, 0):
                freq = (1, 0, 0)
            amp = float(rng.uniform(0.3, 1.0) * noise_amp)
            noise.append(BumpTerm(freq, amp, float(rng.uniform(0.0, 2 * np.pi))))
    return dataclasses.replace(spec, detail=kept + tuple(noise))


def max_detail_amplitude(spec: ShapeSpec) -> float:
    return sum(abs(t.amp) for t in spec.detail)


def condition_vector(spec: ShapeSpec, max_terms: int = 4) -> np.ndarray:
    """Flatten the detail field into a fixed-length parameter vector.

    Per term: (fx, fy, fz, amp, phase), zero-padded to max_terms terms.
    This is the refinement hint the velocity network is conditioned on.
    """
    if len(spec.detail) > max_terms:
        raise ValueError(
            f"spec has {len(spec.detail)} detail terms, max {max_terms}")
    vec = np.zeros(5 * max_terms)
    for i, term in enumerate(spec.detail):
        vec[5 * i: 5 * i + 3] = term.freq
        vec[5 * i + 3] = term.amp
        vec[5 * i + 4] = term.phase
    return vec


def random_spec(rng: np.random.Generator, base: str = "sphere",
                radius_range: tuple[float, float] = (0.3, 0.42),
                num_detail_range: tuple[int, int] = (1, 3),
                freq_range: tuple[int, int] = (1, 6),
                amp_range: tuple[float, float] = (0.02, 0.08),
                seed: int = 0) -> ShapeSpec:
    """Draw a random detailed shape from the configured ranges."""
    if base == "sphere":
        base_params = {"radius": float(rng.uniform(*radius_range))}
    elif base == "box":
        base_params = {"half_extents": list(rng.uniform(
            radius_range[0] * 0.8, radius_range[1], size=3))}
    elif base == "superquadric":
        base_params = {
            "exponents": list(rng.uniform(0.6, 1.6, size=2)),
            "scales": list(rng.uniform(radius_range[0] * 0.8,
                                       radius_range[1], size=3)),
        }
    else:
        raise ValueError(f"unknown base primitive {base!r}")
    num_terms = int(rng.integers(num_detail_range[0], num_detail_range[1] + 1))
    detail = []
    budget = MAX_DETAIL_AMP
    for _ in range(num_terms):
        freq = tuple(int(v) for v in rng.integers(
            freq_range[0], freq_range[1] + 1, size=3))
        amp = float(min(rng.uniform(*amp_range), budget))
        if amp <= 0:
            break
        budget -= amp
        detail.append(BumpTerm(freq, amp, float(rng.uniform(0.0, 2 * np.pi))))
    return ShapeSpec(base=base, base_params=base_params,
                     detail=tuple(detail), seed=seed)
