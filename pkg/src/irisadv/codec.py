"""Conventional iris-code generation with a Gabor filter bank.

The bank holds quadrature pairs (even/odd phase) of Gabor kernels oriented
along the angular axis. Encoding correlates each kernel with the normalized
iris and keeps only the sign of the response; the code is laid out
plane-major, filter ``f`` occupying rows ``[f*H, (f+1)*H)``.

Boundaries follow the rubber-sheet geometry: the angular (width) axis wraps
around, the radial (height) axis is clamped to its edge rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class IrisSample:
    """A normalized iris image with its validity mask (1 = iris pixel)."""

    iris: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        iris = np.asarray(self.iris, dtype=np.float64)
        mask = np.asarray(self.mask).astype(np.uint8)
        if iris.ndim != 2 or iris.shape != mask.shape:
            raise ValueError(f"iris {iris.shape} and mask {mask.shape} must be equal 2-D shapes")
        if not np.all((iris >= 0) & (iris <= 1)):
            raise ValueError("iris values must lie in [0, 1]")
        if not np.all(mask <= 1):
            raise ValueError("mask must be binary")
        object.__setattr__(self, "iris", iris)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.iris.shape


@dataclass(frozen=True)
class IrisCode:
    bits: np.ndarray
    code_mask: np.ndarray
    n_filters: int

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(np.uint8)
        cm = np.asarray(self.code_mask).astype(np.uint8)
        if bits.shape != cm.shape:
            raise ValueError(f"bits {bits.shape} and code mask {cm.shape} differ in shape")
        if bits.max(initial=0) > 1 or cm.max(initial=0) > 1:
            raise ValueError("code bits and mask must be binary")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "code_mask", cm)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def plane(self, f: int) -> np.ndarray:
        h = self.bits.shape[0] // self.n_filters
        return self.bits[f * h:(f + 1) * h]


@dataclass(frozen=True)
class FilterBank:
    kernels: np.ndarray           # (F, kh, kw), each zero-mean
    wavelengths: tuple[float, ...]
    phases: tuple[str, ...]
    sigmas: tuple[float, ...]

    @property
    def n_filters(self) -> int:
        return self.kernels.shape[0]

    @property
    def extent(self) -> tuple[int, int]:
        return self.kernels.shape[1], self.kernels.shape[2]

    def __eq__(self, other):
        return (isinstance(other, FilterBank)
                and np.array_equal(self.kernels, other.kernels)
                and self.wavelengths == other.wavelengths
                and self.phases == other.phases
                and self.sigmas == other.sigmas)

    __hash__ = None


def gabor_kernel(wavelength: float, phase: str, extent=(9, 15), sigma: float | None = None) -> np.ndarray:
    """One zero-mean Gabor kernel with its carrier along the width axis."""
    kh, kw = extent
    sigma = 0.5 * wavelength if sigma is None else sigma
    y = np.arange(kh) - kh // 2
    x = np.arange(kw) - kw // 2
    yy, xx = np.meshgrid(y, x, indexing="ij")
    env = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    arg = 2 * np.pi * xx / wavelength
    if phase == "even":
        k = env * np.cos(arg)
        # remove the DC term under the envelope, then the numerical residue
        k = k - env * (k.sum() / env.sum())
        k = 0.5 * (k + k[:, ::-1])
        k = k - k.mean()
    elif phase == "odd":
        k = env * np.sin(arg)
        k = 0.5 * (k - k[:, ::-1])
    else:
        raise ValueError(f"phase must be 'even' or 'odd', got {phase!r}")
    return k


def make_filter_bank(wavelengths: Sequence[float] = (8, 16, 32), extent=(9, 15),
                     sigmas: Sequence[float] | None = None) -> FilterBank:
    """Quadrature pairs at each wavelength; ``F = 2 * len(wavelengths)``."""
    kh, kw = extent
    if kh < 3 or kw < 3 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd and >= 3, got {extent}")
    if len(wavelengths) == 0:
        raise ValueError("at least one wavelength is required")
    if sigmas is None:
        sigmas = [0.5 * lam for lam in wavelengths]
    if len(sigmas) != len(wavelengths):
        raise ValueError("one gaussian width per wavelength")
    kernels, lams, phases, sigs = [], [], [], []
    for lam, sig in zip(wavelengths, sigmas):
        if lam < 2:
            raise ValueError(f"wavelength {lam} px is below the Nyquist limit of 2 px")
        if sig <= 0:
            raise ValueError(f"gaussian width must be positive, got {sig}")
        for phase in ("even", "odd"):
            kernels.append(gabor_kernel(lam, phase, extent, sig))
            lams.append(float(lam))
            phases.append(phase)
            sigs.append(float(sig))
    return FilterBank(np.stack(kernels), tuple(lams), tuple(phases), tuple(sigs))


def _pad_periodic_clamped(img: np.ndarray, kh: int, kw: int) -> np.ndarray:
    img = np.pad(img, ((kh // 2, kh // 2), (0, 0)), mode="edge")
    return np.pad(img, ((0, 0), (kw // 2, kw // 2)), mode="wrap")


def filter_responses(iris: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Real-valued template: one (H, W) response plane per filter."""
    iris = np.asarray(iris, dtype=np.float64)
    # kernels are zero-mean, so shifting by an exact pixel value leaves the
    # responses unchanged and makes flat regions respond with exact zeros
    iris = iris - iris.min()
    kh, kw = bank.extent
    h, w = iris.shape
    padded = _pad_periodic_clamped(iris, kh, kw)
    out = np.zeros((bank.n_filters, h, w))
    # tap-by-tap accumulation: same summation order at every position
    for i in range(kh):
        for j in range(kw):
            out += bank.kernels[:, i, j, None, None] * padded[None, i:i + h, j:j + w]
    return out


def expand_mask(mask: np.ndarray, bank: FilterBank) -> np.ndarray:
    """Code-level validity: erode the pixel mask by the filter footprint.

    Pixels beyond the top/bottom edge count as invalid, the width axis wraps.
    The result is tiled plane-major to ``(F*H, W)``.
    """
    mask = np.asarray(mask).astype(bool)
    kh, kw = bank.extent
    padded = np.pad(mask, ((kh // 2, kh // 2), (0, 0)), constant_values=False)
    padded = np.pad(padded, ((0, 0), (kw // 2, kw // 2)), mode="wrap")
    eroded = sliding_window_view(padded, (kh, kw)).all(axis=(2, 3))
    return np.tile(eroded.astype(np.uint8), (bank.n_filters, 1))


def encode(sample: IrisSample, bank: FilterBank) -> IrisCode:
    resp = filter_responses(sample.iris, bank)
    f, h, w = resp.shape
    bits = (resp > 0).astype(np.uint8).reshape(f * h, w)
    return IrisCode(bits, expand_mask(sample.mask, bank), f)


# ---------------------------------------------------------------- persistence


def save_filter_bank(bank: FilterBank, path) -> None:
    """Plain-text coefficient file: a header line, then one block per filter."""
    kh, kw = bank.extent
    lines = [f"FILTERBANK {bank.n_filters} {kh} {kw}"]
    for k, lam, ph, sig in zip(bank.kernels, bank.wavelengths, bank.phases, bank.sigmas):
        lines.append(f"filter wavelength={lam!r} phase={ph} sigma={sig!r}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in k)
    Path(path).write_text("\n".join(lines) + "\n")


def load_filter_bank(path) -> FilterBank:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    head = lines[0].split()
    if len(head) != 4 or head[0] != "FILTERBANK":
        raise ValueError(f"{path}: not a filter bank file")
    f, kh, kw = (int(v) for v in head[1:])
    if len(lines) != 1 + f * (kh + 1):
        raise ValueError(f"{path}: expected {f} filters of {kh} rows")
    kernels, lams, phases, sigs = [], [], [], []
    pos = 1
    for _ in range(f):
        meta = dict(tok.split("=", 1) for tok in lines[pos].split()[1:])
        lams.append(float(meta["wavelength"]))
        phases.append(meta["phase"])
        sigs.append(float(meta["sigma"]))
        rows = [[float(v) for v in ln.split()] for ln in lines[pos + 1:pos + 1 + kh]]
        k = np.array(rows)
        if k.shape != (kh, kw):
            raise ValueError(f"{path}: filter {len(kernels)} has shape {k.shape}, expected {(kh, kw)}")
        kernels.append(k)
        pos += kh + 1
    return FilterBank(np.stack(kernels), tuple(lams), tuple(phases), tuple(sigs))
