"""Radially symmetric convolution kernels built from concentric Gaussian rings.

A kernel of size k is spanned by ``ceil(k/2)`` ring basis slices; each slice
holds a Gaussian of the radial distance to the ring radius, L1-normalized
over the k x k grid.  Because every slice depends on the grid only through
the Euclidean distance to the (possibly half-integer) grid center, the
slices are invariant under 90-degree rotation and axis flips bit-for-bit,
and any weighted combination of them inherits that symmetry exactly.

A GMR layer learns one weight per (out-channel, in-channel, ring) plus a
bias, synthesizes the dense kernel on the fly, and reuses the ordinary
conv2d path, so gradients reach the ring weights through a single matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorkit as tk
from .errors import ContractError, ShapeError
from .tensorkit import Tensor

DEFAULT_SIGMA_RATIO = 0.5


@dataclass(frozen=True)
class RingSpec:
    """Ring radii/width schedule for one kernel size."""

    k: int
    n_rings: int
    radii: tuple[float, ...]
    sigma: tuple[float, ...]
    sigma_ratio: float

    @property
    def outer_radius(self) -> float:
        return (self.k - 1) / 2.0


def ring_spec(k: int, sigma_ratio: float = DEFAULT_SIGMA_RATIO) -> RingSpec:
    """Uniform radii from 0 to (k-1)/2, one ring per ceil(k/2), sigma = ratio * spacing."""
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    if sigma_ratio <= 0:
        raise ValueError(f"sigma_ratio must be positive, got {sigma_ratio}")
    n = (k + 1) // 2
    outer = (k - 1) / 2.0
    delta = outer / (n - 1) if n > 1 else 1.0
    radii = tuple(i * delta for i in range(n))
    sigma = tuple(sigma_ratio * delta for _ in range(n))
    return RingSpec(k=k, n_rings=n, radii=radii, sigma=sigma, sigma_ratio=sigma_ratio)


@dataclass(frozen=True)
class GmrBasis:
    """Normalized ring slices for one RingSpec.

    ``values`` is the f32 stack used by the model; ``values64`` keeps the
    f64 construction for symmetry audits and the float64 evaluation twin.
    """

    spec: RingSpec
    values: np.ndarray
    values64: np.ndarray


def grid_distances(k: int) -> np.ndarray:
    """Euclidean distance of every cell center to the grid center, f64."""
    c = (k - 1) / 2.0
    uu, vv = np.meshgrid(np.arange(k, dtype=np.float64), np.arange(k, dtype=np.float64), indexing="ij")
    return np.sqrt((uu - c) ** 2 + (vv - c) ** 2)


def build_basis(spec: RingSpec) -> GmrBasis:
    d = grid_distances(spec.k)
    slices = np.empty((spec.n_rings, spec.k, spec.k), dtype=np.float64)
    for i, (r, s) in enumerate(zip(spec.radii, spec.sigma)):
        raw = np.exp(-((d - r) ** 2) / (2.0 * s * s))
        slices[i] = raw / raw.sum()
    basis = GmrBasis(spec=spec, values=slices.astype(np.float32), values64=slices)
    basis.values.flags.writeable = False
    basis.values64.flags.writeable = False
    return basis


@dataclass
class GmrConvLayer:
    """Equivariant convolution layer: learnable ring weights + bias."""

    spec: RingSpec
    c_in: int
    c_out: int
    ring_weights: Tensor  # [c_out, c_in, n_rings]
    bias: Tensor  # [c_out]
    stride: int
    pad: int

    def __post_init__(self):
        expected = (self.c_out, self.c_in, self.spec.n_rings)
        if self.ring_weights.shape != expected:
            raise ShapeError(f"ring_weights shape {self.ring_weights.shape} != {expected}")
        if self.bias.shape != (self.c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.c_out},)")


def synthesize_kernels(layer: GmrConvLayer, basis: GmrBasis) -> Tensor:
    """Dense [c_out, c_in, k, k] kernel as the ring-weighted basis sum.

    Differentiable w.r.t. the ring weights: the kernel is linear in them,
    so each weight's gradient is the correlation of the kernel gradient
    with its basis slice.
    """
    if basis.spec != layer.spec:
        raise ContractError(f"basis spec {basis.spec} does not match layer spec {layer.spec}")
    k, n = layer.spec.k, layer.spec.n_rings
    rw = layer.ring_weights
    basis_flat = Tensor(
        (basis.values64 if rw.dtype == np.float64 else basis.values).reshape(n, k * k),
        dtype=rw.dtype,
    )
    flat = tk.matmul(tk.reshape(rw, (layer.c_out * layer.c_in, n)), basis_flat)
    return tk.reshape(flat, (layer.c_out, layer.c_in, k, k))


def gmr_forward(x: Tensor, layer: GmrConvLayer, basis: GmrBasis) -> Tensor:
    kernel = synthesize_kernels(layer, basis)
    return tk.conv2d(x, kernel, layer.bias, layer.stride, layer.pad)


def rotate_kernel_bilinear(kernel: np.ndarray, angle_deg: float) -> np.ndarray:
    """In-plane rotation of a square grid about its center, bilinear sampling.

    Target cells whose source point falls outside the grid are set to 0.
    """
    k = kernel.shape[-1]
    if kernel.shape[-2] != k:
        raise ValueError(f"kernel must be square, got {kernel.shape}")
    c = (k - 1) / 2.0
    th = np.deg2rad(angle_deg)
    ii, jj = np.meshgrid(np.arange(k, dtype=np.float64), np.arange(k, dtype=np.float64), indexing="ij")
    di, dj = ii - c, jj - c
    sr = di * np.cos(th) + dj * np.sin(th) + c
    sc = -di * np.sin(th) + dj * np.cos(th) + c
    inside = (sr >= 0) & (sr <= k - 1) & (sc >= 0) & (sc <= k - 1)
    r0 = np.clip(np.floor(sr).astype(np.int64), 0, max(k - 2, 0))
    c0 = np.clip(np.floor(sc).astype(np.int64), 0, max(k - 2, 0))
    r1 = np.minimum(r0 + 1, k - 1)
    c1 = np.minimum(c0 + 1, k - 1)
    t = np.clip(sr - r0, 0.0, 1.0)
    u = np.clip(sc - c0, 0.0, 1.0)
    arr = kernel.astype(np.float64)
    val = (
        (1 - t) * (1 - u) * arr[..., r0, c0]
        + (1 - t) * u * arr[..., r0, c1]
        + t * (1 - u) * arr[..., r1, c0]
        + t * u * arr[..., r1, c1]
    )
    return np.where(inside, val, 0.0)


def kernel_invariance_report(kernel) -> dict[str, float]:
    """Max absolute deviation of a kernel stack from its own symmetries.

    rot90_dev / flip_dev are exact-grid checks; continuous_dev is the max
    over 10..80 degree bilinear rotations and records the residual
    discretization error a smooth radial profile suppresses.
    """
    arr = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel)
    if arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"kernels must be square, got shape {arr.shape}")
    rot = np.rot90(arr, 1, axes=(-2, -1))
    flip = arr[..., :, ::-1]
    rot90_dev = float(np.abs(arr - rot).max())
    flip_dev = float(np.abs(arr - flip).max())
    continuous_dev = max(
        float(np.abs(arr.astype(np.float64) - rotate_kernel_bilinear(arr, a)).max())
        for a in range(10, 90, 10)
    )
    return {"rot90_dev": rot90_dev, "flip_dev": flip_dev, "continuous_dev": continuous_dev}


def gmr_param_count(layer: GmrConvLayer) -> dict[str, float]:
    """Learnable count vs. the dense kernel of the same geometry."""
    n = layer.spec.n_rings
    k = layer.spec.k
    params = layer.c_out * layer.c_in * n + layer.c_out
    dense = layer.c_out * layer.c_in * k * k + layer.c_out
    return {"params": params, "dense_equivalent": dense, "ratio": dense / params}


def grid_csv_lines(grid: np.ndarray) -> list[str]:
    """One CSV line per kernel row, values printed with 9 significant digits."""
    return [",".join(f"{v:.9g}" for v in row) for row in np.asarray(grid, dtype=np.float64)]
