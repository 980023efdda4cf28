"""Deterministic numerical kernels shared by the simulator, network and metrics.

Images are plain 2D ``numpy`` arrays (row-major, rows first). Kernels are odd-sized
2D arrays whose center sits at ``((rows - 1) // 2, (cols - 1) // 2)``.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy import ndimage


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed`` and an optional child path ``keys``.

    The same ``(seed, keys)`` gives the same stream on every platform, and
    distinct key paths give statistically independent streams, so workers never
    need to share one generator.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def as_grid(image, name: str = "image") -> np.ndarray:
    grid = np.asarray(image, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2D array, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{name} contains non-finite values")
    return grid


def _check_kernel(kernel) -> np.ndarray:
    kernel = as_grid(kernel, "kernel")
    if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"kernel must have odd dimensions, got {kernel.shape}")
    return kernel


def convolve_direct(image, kernel) -> np.ndarray:
    """'Same'-size convolution with zero padding, evaluated by explicit sums."""
    image = as_grid(image)
    kernel = _check_kernel(kernel)
    kr, kc = kernel.shape[0] // 2, kernel.shape[1] // 2
    padded = np.pad(image, ((kr, kr), (kc, kc)))
    windows = sliding_window_view(padded, kernel.shape)
    # true convolution: flip the kernel before the sliding dot product
    return np.einsum("ijuv,uv->ij", windows, kernel[::-1, ::-1])


def convolve_fft(image, kernel) -> np.ndarray:
    """Same contract as :func:`convolve_direct`, computed through real FFTs."""
    image = as_grid(image)
    kernel = _check_kernel(kernel)
    rows, cols = image.shape
    kr, kc = kernel.shape[0] // 2, kernel.shape[1] // 2
    shape = (rows + kernel.shape[0] - 1, cols + kernel.shape[1] - 1)
    fshape = tuple(sp_fft.next_fast_len(n, real=True) for n in shape)
    spec = sp_fft.rfft2(image, fshape) * sp_fft.rfft2(kernel, fshape)
    full = sp_fft.irfft2(spec, fshape)
    return full[kr:kr + rows, kc:kc + cols]


def bin_sum(image, factor: int) -> np.ndarray:
    """Sum non-overlapping ``factor x factor`` blocks.

    Blocks are summed along columns first, then rows, in index order, which
    makes the result bitwise reproducible.
    """
    image = as_grid(image)
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    rows, cols = image.shape
    if rows % factor or cols % factor:
        raise ValueError(f"shape {image.shape} is not divisible by factor {factor}")
    blocks = image.reshape(rows // factor, factor, cols // factor, factor)
    return blocks.sum(axis=3).sum(axis=1)


def upsample2(x, axis: int) -> np.ndarray:
    """Linear ×2 upsampling along one axis with half-pixel sample centers.

    Output sample ``i`` reads the input at ``(i + 0.5) / 2 - 0.5``, clamped to
    the valid range, i.e. even outputs are ``0.75 x[i] + 0.25 x[i-1]`` and odd
    outputs ``0.75 x[i] + 0.25 x[i+1]``. Interior translations stay exact: a
    shift by ``s`` input samples moves the output by ``2 s``.
    """
    xm = np.moveaxis(np.asarray(x), axis, 0)
    prev = np.concatenate([xm[:1], xm[:-1]])
    nxt = np.concatenate([xm[1:], xm[-1:]])
    out = np.stack([0.75 * xm + 0.25 * prev, 0.75 * xm + 0.25 * nxt], axis=1)
    out = out.reshape((2 * xm.shape[0],) + xm.shape[1:])
    return np.moveaxis(out, 0, axis)


def upsample2_adjoint(g, axis: int) -> np.ndarray:
    """Transpose of :func:`upsample2` (maps a ``2n`` axis back to ``n``)."""
    gm = np.moveaxis(np.asarray(g), axis, 0)
    even, odd = gm[0::2], gm[1::2]
    out = 0.75 * (even + odd)
    out[:-1] += 0.25 * even[1:]
    out[0] += 0.25 * even[0]
    out[1:] += 0.25 * odd[:-1]
    out[-1] += 0.25 * odd[-1]
    return np.moveaxis(out, 0, axis)


def resize_bilinear(image, factor: int = 2) -> np.ndarray:
    """Bilinear ×2 upsampling of a 2D image (see :func:`upsample2`)."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    image = as_grid(image)
    return upsample2(upsample2(image, 0), 1)


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ``ceil(4 sigma)`` and renormalized to 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(image, sigma: float, axes=(-2, -1)) -> np.ndarray:
    """Separable zero-padded Gaussian blur.

    Works on a single image or a stack (the last two axes are filtered). The
    kernel is symmetric, so the operator is its own adjoint.
    """
    k = gaussian_kernel_1d(sigma)
    out = np.asarray(image, dtype=np.float64)
    for ax in axes:
        out = ndimage.convolve1d(out, k, axis=ax, mode="constant", cval=0.0)
    return out


def poisson_sample(rng: np.random.Generator, mean):
    """Poisson draw(s) with the given mean.

    Delegates to numpy's sampler: multiplication (Knuth) method below a mean of
    10 and Hörmann's transformed rejection (PTRS) above. Scalars give an
    ``int``; arrays give an ``int64`` array of the same shape.
    """
    lam = np.asarray(mean, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise ValueError("Poisson mean must be finite")
    if np.any(lam < 0):
        raise ValueError("Poisson mean must be non-negative")
    draw = rng.poisson(lam)
    if lam.ndim == 0:
        return int(draw)
    return draw
