"""Affine registration of frame pairs via the inverse compositional algorithm.

The estimated map T satisfies src(T(p)) ~= dst(p): it carries coordinates of
the destination frame into the source frame, so warping src by T lands on
dst's pixel grid. Gauss-Newton normal equations are built once per pyramid
level from the destination (template) gradients; each iteration only re-warps
the source and composes the inverse parameter increment.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    ConvergenceError,
    ConvergenceWarning,
    DegenerateMapError,
    OverlapError,
    ShapeError,
)
from .imaging import BayerFrame, PlanarImage, pack_phases

log = logging.getLogger(__name__)

DET_BOUNDS = (0.5, 2.0)


@dataclass(frozen=True)
class AffineMap:
    """2x3 parametric transform (x, y) -> (a11 x + a12 y + tx, a21 x + a22 y + ty).

    Coordinates have their origin at the top-left pixel center, x along
    columns and y along rows.
    """

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @staticmethod
    def identity() -> "AffineMap":
        return AffineMap()

    @staticmethod
    def translation(tx: float, ty: float) -> "AffineMap":
        return AffineMap(tx=tx, ty=ty)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "AffineMap":
        m = np.asarray(m, dtype=np.float64)
        return AffineMap(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix form."""
        return np.array(
            [[self.a11, self.a12, self.tx],
             [self.a21, self.a22, self.ty],
             [0.0, 0.0, 1.0]]
        )

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, x, y):
        """Map x/y coordinate arrays (or scalars) through the transform."""
        return (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )

    def __matmul__(self, other: "AffineMap") -> "AffineMap":
        """Composition: (a @ b) applies b first, then a."""
        return AffineMap.from_matrix(self.matrix @ other.matrix)

    def inverse(self) -> "AffineMap":
        if abs(self.det) < 1e-12:
            raise DegenerateMapError(f"map is not invertible (det={self.det:.3e})")
        return AffineMap.from_matrix(np.linalg.inv(self.matrix))

    def to_json(self) -> dict:
        return {"a": [self.a11, self.a12, self.a21, self.a22], "t": [self.tx, self.ty]}

    @staticmethod
    def from_json(obj: dict) -> "AffineMap":
        a = obj["a"]
        t = obj["t"]
        return AffineMap(a[0], a[1], a[2], a[3], t[0], t[1])


@dataclass(frozen=True)
class RegistrationConfig:
    pyramid_levels: int = 4
    max_iters_per_level: int = 50
    convergence_eps: float = 1e-6
    min_overlap: float = 0.5

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0.0 < self.min_overlap <= 1.0:
            raise ValueError("min_overlap must be in (0, 1]")


def upscale_map(t: AffineMap, factor: float) -> AffineMap:
    """Express a map estimated at one scale in coordinates `factor` times larger.

    Equivalent to S o T o S^-1 with S = scaling about the origin: the linear
    part is unchanged, the translation is multiplied by the factor.
    """
    if factor <= 0:
        raise ValueError(f"factor must be > 0, got {factor}")
    return AffineMap(t.a11, t.a12, t.a21, t.a22, t.tx * factor, t.ty * factor)


def overlap_fraction(t: AffineMap, width: int, height: int) -> float:
    """Fraction of grid pixels whose image under t stays inside the frame."""
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    mx, my = t.apply(xs, ys)
    inside = (mx >= 0) & (mx <= width - 1) & (my >= 0) & (my <= height - 1)
    return float(inside.mean())


def check_map_sane(t: AffineMap) -> None:
    """Reject degenerate fits: |det| of the linear part must stay in DET_BOUNDS."""
    d = abs(t.det)
    if not DET_BOUNDS[0] <= d <= DET_BOUNDS[1]:
        raise DegenerateMapError(
            f"|det| = {d:.4f} outside {DET_BOUNDS}; refusing degenerate fit"
        )


def warp_bilinear_array(img: np.ndarray, t: AffineMap) -> tuple[np.ndarray, np.ndarray]:
    """Warp a (C, H, W) array by t with bilinear sampling.

    Returns (warped, valid) where valid is a (H, W) 0/1 mask of output pixels
    whose source location falls inside the image; invalid pixels are 0.
    """
    c, h, w = img.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx, sy = t.apply(xs, ys)
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    out = np.empty_like(img)
    for ch in range(c):
        plane = img[ch]
        top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
        bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
        out[ch] = top * (1 - fy) + bot * fy
    out *= valid
    return out, valid.astype(np.float64)


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Coarse-to-fine list; each level blurs (sigma 1.0) then decimates by 2."""
    pyr = [img]
    for _ in range(levels - 1):
        cur = pyr[-1]
        if min(cur.shape[1], cur.shape[2]) < 32:
            break
        blurred = np.stack([gaussian_filter(p, 1.0, mode="nearest") for p in cur])
        pyr.append(blurred[:, ::2, ::2])
    return pyr[::-1]


def _ic_refine(
    src: np.ndarray, dst: np.ndarray, t: AffineMap, cfg: RegistrationConfig
) -> tuple[AffineMap, bool]:
    """One pyramid level of inverse-compositional Gauss-Newton."""
    c, h, w = dst.shape
    gx = np.zeros_like(dst)
    gy = np.zeros_like(dst)
    gx[:, :, 1:-1] = (dst[:, :, 2:] - dst[:, :, :-2]) / 2.0
    gy[:, 1:-1, :] = (dst[:, 2:, :] - dst[:, :-2, :]) / 2.0

    # Centered coordinates keep the 6x6 system well conditioned.
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs, ys = np.meshgrid(np.arange(w) - cx, np.arange(h) - cy)
    sd = np.stack([gx * xs, gx * ys, gx, gy * xs, gy * ys, gy])  # (6, C, H, W)
    hess = np.einsum("kchw,lchw->kl", sd, sd)

    converged = False
    for _ in range(cfg.max_iters_per_level):
        warped, valid = warp_bilinear_array(src, t)
        if valid.mean() < cfg.min_overlap:
            raise OverlapError(
                f"overlap {valid.mean():.2f} below min_overlap {cfg.min_overlap}"
            )
        err = (warped - dst) * valid
        b = np.einsum("kchw,chw->k", sd, err)
        try:
            delta = np.linalg.solve(hess, b)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular Hessian in normal equations") from exc
        # Increment warp about the centered origin, expressed in pixel coords.
        lin = np.array([[1 + delta[0], delta[1]], [delta[3], 1 + delta[4]]])
        shift = np.array([delta[2], delta[5]]) + np.array([cx, cy]) - lin @ [cx, cy]
        inc = AffineMap(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], shift[0], shift[1])
        t = t @ inc.inverse()
        if np.linalg.norm(delta) < cfg.convergence_eps:
            converged = True
            break
    return t, converged


def estimate_affine(
    src: PlanarImage, dst: PlanarImage, cfg: RegistrationConfig = RegistrationConfig()
) -> AffineMap:
    """Estimate the affine map T minimizing ||warp(src, T) - dst||^2.

    Runs coarse-to-fine over a Gaussian pyramid; all channels contribute
    additively to the normal equations. Pixels mapping outside the source
    are excluded from the residual.

    Raises OverlapError when the common area drops below cfg.min_overlap,
    ConvergenceError on a singular system and DegenerateMapError when the
    fitted map fails the determinant bound. Exhausting the iteration budget
    only emits a ConvergenceWarning and returns the best map so far.
    """
    if src.data.shape != dst.data.shape:
        raise ShapeError(
            f"src and dst must match, got {src.data.shape} vs {dst.data.shape}"
        )
    if src.height < 32 or src.width < 32:
        raise ShapeError(f"images must be at least 32x32, got {src.height}x{src.width}")

    src_pyr = _pyramid(src.data, cfg.pyramid_levels)
    dst_pyr = _pyramid(dst.data, cfg.pyramid_levels)
    t = AffineMap.identity()
    converged = True
    for level, (s, d) in enumerate(zip(src_pyr, dst_pyr)):
        if level > 0:
            t = upscale_map(t, 2.0)
        t, converged = _ic_refine(s, d, t, cfg)

    if not converged:
        warnings.warn(
            "registration hit the iteration budget; returning best map so far",
            ConvergenceWarning,
        )
    check_map_sane(t)
    if overlap_fraction(t, dst.width, dst.height) < cfg.min_overlap:
        raise OverlapError("estimated map leaves too little overlap")
    return t


def estimate_affine_bayer(
    src: BayerFrame, dst: BayerFrame, cfg: RegistrationConfig = RegistrationConfig()
) -> AffineMap:
    """Register two mosaics by aligning their packed half-resolution phases.

    The four phase planes form one 4-channel image per frame; the estimated
    half-resolution map is carried back to full Bayer coordinates. Phase pixel
    (X, Y) aggregates the full-resolution 2x2 tile centered at (2X+0.5, 2Y+0.5),
    so the upscale conjugates by S(x) = 2x + 0.5 rather than plain scaling;
    the two agree whenever the linear part is the identity.
    """
    if src.pattern is not dst.pattern:
        raise ShapeError(f"CFA patterns differ: {src.pattern} vs {dst.pattern}")
    half = estimate_affine(pack_phases(src), pack_phases(dst), cfg)
    to_full = AffineMap(2.0, 0.0, 0.0, 2.0, 0.5, 0.5)
    return to_full @ half @ to_full.inverse()
