"""Single-level 2-D orthonormal wavelet analysis and synthesis.

All transforms act on torch tensors shaped ``(..., H, W)`` (leading
dimensions, e.g. channels, are carried along untouched) and are built from
plain slicing arithmetic, so they are exactly linear and fully
differentiable. The default filter pair is the orthonormal Haar pair, for
which every operation here is desk-checkable by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when an input's dimensions are incompatible with a transform."""


@dataclass(frozen=True)
class WaveletFilters:
    """A two-tap analysis filter pair (lowpass, highpass).

    The pair must form an orthogonal 2x2 matrix: this is what makes the
    subsampled transform orthonormal and perfectly invertible.
    """

    lowpass: tuple[float, float] = (2.0 ** -0.5, 2.0 ** -0.5)
    highpass: tuple[float, float] = (2.0 ** -0.5, -(2.0 ** -0.5))

    def __post_init__(self):
        l0, l1 = self.lowpass
        h0, h1 = self.highpass
        checks = {
            "lowpass not unit norm": l0 * l0 + l1 * l1,
            "highpass not unit norm": h0 * h0 + h1 * h1,
        }
        for msg, val in checks.items():
            if abs(val - 1.0) > 1e-9:
                raise ValueError(f"invalid wavelet filters: {msg} ({val})")
        if abs(l0 * h0 + l1 * h1) > 1e-9:
            raise ValueError("invalid wavelet filters: lowpass/highpass not orthogonal")


HAAR = WaveletFilters()


@dataclass
class FrequencyDecomposition:
    """The four single-level subbands of an even-sized image.

    ``c_ll`` holds the coarse structure, ``c_hh`` the diagonal detail, and
    ``c_lh``/``c_hl`` the two mixed (vertical-low/horizontal-high and
    vice versa) bands. All four share one shape: half the original along
    each spatial axis.
    """

    c_ll: Tensor
    c_lh: Tensor
    c_hl: Tensor
    c_hh: Tensor
    original_size: tuple[int, int]

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.c_ll, self.c_lh, self.c_hl, self.c_hh


def _require_even(x: Tensor) -> None:
    if x.ndim < 2:
        raise ShapeError(f"expected at least 2 dimensions, got shape {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(
            f"spatial dimensions must be even, got {h}x{w}; pad with pad_even first"
        )


def _analyze(x: Tensor, taps: tuple[float, float], dim: int) -> Tensor:
    """Filter along ``dim`` with a two-tap filter and downsample by two."""
    t0, t1 = taps
    even = x.index_select(dim, torch.arange(0, x.shape[dim], 2, device=x.device))
    odd = x.index_select(dim, torch.arange(1, x.shape[dim], 2, device=x.device))
    return t0 * even + t1 * odd


def _synthesize(lo: Tensor, hi: Tensor, filters: WaveletFilters, dim: int) -> Tensor:
    """Upsample-by-two inverse of `_analyze` along ``dim``."""
    dim = dim % lo.ndim
    l0, l1 = filters.lowpass
    h0, h1 = filters.highpass
    even = l0 * lo + h0 * hi
    odd = l1 * lo + h1 * hi
    out = torch.stack((even, odd), dim=dim)
    # stack put the even/odd pair axis at `dim`, pushing the subsampled axis
    # to dim+1; swap them so the reshape interleaves samples
    order = list(range(out.ndim))
    order[dim], order[dim + 1] = order[dim + 1], order[dim]
    shape = list(lo.shape)
    shape[dim] = 2 * shape[dim]
    return out.permute(order).reshape(shape)


def dwt2(image: Tensor, filters: WaveletFilters = HAAR) -> FrequencyDecomposition:
    """Decompose an even-sized image into its four subbands, per channel.

    Rows are filtered and downsampled first along the vertical axis, then
    along the horizontal axis, giving an orthonormal transform: the band
    energies sum exactly to the image energy.
    """
    _require_even(image)
    h, w = image.shape[-2], image.shape[-1]
    v_dim, h_dim = image.ndim - 2, image.ndim - 1
    lo_v = _analyze(image, filters.lowpass, v_dim)
    hi_v = _analyze(image, filters.highpass, v_dim)
    return FrequencyDecomposition(
        c_ll=_analyze(lo_v, filters.lowpass, h_dim),
        c_lh=_analyze(lo_v, filters.highpass, h_dim),
        c_hl=_analyze(hi_v, filters.lowpass, h_dim),
        c_hh=_analyze(hi_v, filters.highpass, h_dim),
        original_size=(h, w),
    )


def idwt2(decomp: FrequencyDecomposition, filters: WaveletFilters = HAAR) -> Tensor:
    """Exact inverse of `dwt2`."""
    shapes = {tuple(b.shape) for b in decomp.bands()}
    if len(shapes) != 1:
        raise ShapeError(f"subband shapes differ: {sorted(shapes)}")
    h_dim = decomp.c_ll.ndim - 1
    v_dim = h_dim - 1
    lo_v = _synthesize(decomp.c_ll, decomp.c_lh, filters, h_dim)
    hi_v = _synthesize(decomp.c_hl, decomp.c_hh, filters, h_dim)
    return _synthesize(lo_v, hi_v, filters, v_dim)


def _reconstruct_single_band(image: Tensor, band: str, filters: WaveletFilters) -> Tensor:
    decomp = dwt2(image, filters)
    zeros = {name: torch.zeros_like(decomp.c_ll) for name in ("c_ll", "c_lh", "c_hl", "c_hh")}
    zeros[band] = getattr(decomp, band)
    return idwt2(FrequencyDecomposition(original_size=decomp.original_size, **zeros), filters)


def reconstruct_lfc(image: Tensor, filters: WaveletFilters = HAAR) -> Tensor:
    """Image rebuilt from the coarse band alone (the smooth structure).

    Idempotent, linear, and the identity on constant images.
    """
    return _reconstruct_single_band(image, "c_ll", filters)


def reconstruct_hfc(image: Tensor, filters: WaveletFilters = HAAR) -> Tensor:
    """Image rebuilt from the diagonal-detail band alone (fine texture).

    Linear and zero on constant images.
    """
    return _reconstruct_single_band(image, "c_hh", filters)


def reconstruct_band(image: Tensor, band: str, filters: WaveletFilters = HAAR) -> Tensor:
    """Rebuild from one named band ('c_ll', 'c_lh', 'c_hl' or 'c_hh')."""
    if band not in ("c_ll", "c_lh", "c_hl", "c_hh"):
        raise ValueError(f"unknown band {band!r}")
    return _reconstruct_single_band(image, band, filters)


@dataclass(frozen=True)
class CropRecord:
    """How much `pad_even` added, so `crop` can undo it."""

    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def empty(self) -> bool:
        return self.pad_bottom == 0 and self.pad_right == 0


def pad_even(image: Tensor) -> tuple[Tensor, CropRecord]:
    """Reflect-pad by one row and/or column so both spatial sizes are even.

    Size-1 axes fall back to edge replication (nothing to mirror).
    """
    if image.ndim < 2:
        raise ShapeError(f"expected at least 2 dimensions, got shape {tuple(image.shape)}")
    h, w = image.shape[-2], image.shape[-1]
    out = image
    pad_bottom = h % 2
    pad_right = w % 2
    if pad_bottom:
        row = out[..., -2:-1, :] if h > 1 else out[..., -1:, :]
        out = torch.cat((out, row), dim=-2)
    if pad_right:
        col = out[..., :, -2:-1] if w > 1 else out[..., :, -1:]
        out = torch.cat((out, col), dim=-1)
    return out, CropRecord(pad_bottom=pad_bottom, pad_right=pad_right)


def crop(array: Tensor, record: CropRecord) -> Tensor:
    """Undo `pad_even`: slice away the padded row/column."""
    h = array.shape[-2] - record.pad_bottom
    w = array.shape[-1] - record.pad_right
    return array[..., :h, :w]
