"""2-D DFT as the linear decoder basis, half-spectrum packing and scale partition.

The image is synthesized as a sum of per-scale spectra, each embedded into
its own frequency bins and inverse transformed.  Scale ``k`` owns a dyadic
ring of bins around DC; scale 0 is DC alone and the last scale holds the
Nyquist row and column.  Each scale's bin set is closed under conjugation, so
every scale contributes a purely real image on its own.

Real degrees of freedom ("dof" vectors) are laid out per scale as the real
parts of the scale's representative bins followed by the imaginary parts of
the representatives that are not self-conjugate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor, custom_op


class SpectralError(ValueError):
    pass


def _check_pow2(n: int, what: str = "size") -> int:
    if n < 1 or n & (n - 1):
        raise SpectralError(f"{what} {n} is not a power of two")
    return n.bit_length() - 1


# ---------------------------------------------------------------------------
# radix-2 FFT


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = _check_pow2(n)
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)


def fft_axis(a: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """Unnormalized radix-2 decimation-in-time FFT along one axis."""
    a = np.moveaxis(np.asarray(a, dtype=np.complex128), axis, -1)
    n = a.shape[-1]
    _check_pow2(n)
    lead = a.shape[:-1]
    x = a[..., _bitrev(n)]
    m = 2
    while m <= n:
        h = m // 2
        x = x.reshape(lead + (n // m, m))
        even = x[..., :h]
        odd = x[..., h:] * _twiddles(m, inverse)
        x = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return np.moveaxis(x.reshape(lead + (n,)), -1, axis)


def dft2(image) -> np.ndarray:
    """Unnormalized forward 2-D DFT over the last two axes."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim < 2:
        raise SpectralError("dft2 needs at least two dimensions")
    _check_pow2(img.shape[-2], "height")
    _check_pow2(img.shape[-1], "width")
    return fft_axis(fft_axis(img, -1), -2)


def _idft2_raw(spectrum: np.ndarray) -> np.ndarray:
    h, w = spectrum.shape[-2:]
    return fft_axis(fft_axis(spectrum, -1, inverse=True), -2, inverse=True) / (h * w)


def idft2(spectrum, rtol: float = 1e-9) -> np.ndarray:
    """Inverse 2-D DFT of a hermitian spectrum, returned as a real array.

    Raises :class:`SpectralError` when the imaginary residue exceeds ``rtol``
    times the largest real magnitude.
    """
    spec = np.asarray(spectrum, dtype=np.complex128)
    _check_pow2(spec.shape[-2], "height")
    _check_pow2(spec.shape[-1], "width")
    out = _idft2_raw(spec)
    scale = np.abs(out.real).max(initial=0.0)
    resid = np.abs(out.imag).max(initial=0.0)
    if resid > rtol * scale and resid > 1e-300:
        raise SpectralError(f"spectrum is not hermitian (imag residue {resid:.3e} vs {scale:.3e})")
    return out.real.copy()


def conj_index(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    u, v = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (-u) % h, (-v) % w


def is_hermitian(spectrum: np.ndarray, atol: float = 1e-9) -> bool:
    h, w = spectrum.shape[-2:]
    cu, cv = conj_index(h, w)
    mirror = np.conj(spectrum[..., cu, cv])
    scale = max(np.abs(spectrum).max(initial=0.0), 1.0)
    return bool(np.abs(spectrum - mirror).max(initial=0.0) <= atol * scale)


# ---------------------------------------------------------------------------
# half spectrum


def _self_conjugate(h: int, w: int) -> np.ndarray:
    u, v = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cu, cv = conj_index(h, w)
    return (cu == u) & (cv == v)


def _canonical_mask(h: int, w: int) -> np.ndarray:
    """Bins kept in the half spectrum: one representative per conjugate pair."""
    u, v = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    inner = (v > 0) & (v < w / 2)
    edge = ((v == 0) | (v == w // 2)) & (u <= h // 2)
    return inner | edge


@dataclass
class HalfSpectrum:
    """Non-redundant half of a real image's spectrum, columns ``v in [0, W/2]``.

    Entries of columns 0 and W/2 with row ``u > H/2`` are redundant and are
    ignored by :func:`hermitian_complete`.
    """

    height: int
    width: int
    coeffs: np.ndarray  # complex, (..., H, W//2 + 1)

    def __post_init__(self):
        _check_pow2(self.height, "height")
        _check_pow2(self.width, "width")
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.shape[-2:] != (self.height, self.width // 2 + 1):
            raise SpectralError(f"half spectrum shape {self.coeffs.shape} does not match {self.height}x{self.width}")

    def check(self, rtol: float = 1e-9) -> None:
        sc = _self_conjugate(self.height, self.width)[:, : self.width // 2 + 1]
        imag = np.abs(self.coeffs.imag[..., sc]).max(initial=0.0)
        if imag > rtol * max(np.abs(self.coeffs).max(initial=0.0), 1.0):
            raise SpectralError(f"self-conjugate bin carries imaginary part {imag:.3e}")

    @property
    def as_interleaved(self) -> np.ndarray:
        return np.stack([self.coeffs.real, self.coeffs.imag], axis=-1)

    @classmethod
    def from_interleaved(cls, height: int, width: int, data: np.ndarray) -> "HalfSpectrum":
        data = np.asarray(data, dtype=np.float64)
        return cls(height, width, data[..., 0] + 1j * data[..., 1])


def half_spectrum(full: np.ndarray) -> HalfSpectrum:
    h, w = full.shape[-2:]
    return HalfSpectrum(h, w, np.array(full[..., : w // 2 + 1]))


def hermitian_complete(half: HalfSpectrum) -> np.ndarray:
    """Fill the missing bins with ``X[-u, -v] = conj(X[u, v])``."""
    half.check()
    h, w = half.height, half.width
    full = np.zeros(half.coeffs.shape[:-2] + (h, w), dtype=np.complex128)
    canon = _canonical_mask(h, w)
    kept = canon[:, : w // 2 + 1]
    full[..., : w // 2 + 1] = np.where(kept, half.coeffs, 0.0)
    sc = _self_conjugate(h, w)
    full[..., sc] = full[..., sc].real
    cu, cv = conj_index(h, w)
    missing = ~canon
    full[..., missing] = np.conj(full[..., cu[missing], cv[missing]])
    return full


# ---------------------------------------------------------------------------
# scale partition


def centered_freq(n: int) -> np.ndarray:
    """Signed frequency of each DFT index: ``u`` below ``n/2``, ``u - n`` above."""
    u = np.arange(n)
    return np.where(u < n // 2, u, u - n) if n > 1 else u


def _box_level(fu: np.ndarray, fv: np.ndarray, n_scales: int) -> np.ndarray:
    """Smallest k with both frequencies in [-2^(k-1), 2^(k-1) - 1] (k=0: DC only)."""
    level = np.full(fu.shape, n_scales - 1, dtype=np.int64)
    for k in range(n_scales - 1, 0, -1):
        half = 2 ** (k - 1)
        inside = (fu >= -half) & (fu <= half - 1) & (fv >= -half) & (fv <= half - 1)
        level[inside] = k
    level[(fu == 0) & (fv == 0)] = 0
    return level


@dataclass
class ScalePartition:
    """Assignment of every DFT bin of an ``H x W`` grid to a dyadic scale."""

    height: int
    width: int
    bin_scale: np.ndarray
    # per scale: representative bins (row, col) and which are self-conjugate
    rep_u: list[np.ndarray] = field(default_factory=list)
    rep_v: list[np.ndarray] = field(default_factory=list)
    rep_real: list[np.ndarray] = field(default_factory=list)

    @property
    def n_scales(self) -> int:
        return int(self.bin_scale.max()) + 1

    def dims(self, k: int) -> int:
        """Spatial side length of scale ``k``."""
        return 2**k

    def bins(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.bin_scale == k)

    def count(self, k: int) -> int:
        return int((self.bin_scale == k).sum())

    def dof(self, k: int) -> int:
        """Real degrees of freedom of scale ``k`` (equals its bin count)."""
        return len(self.rep_u[k]) + int((~self.rep_real[k]).sum())

    def mask(self, scales) -> np.ndarray:
        return np.isin(self.bin_scale, list(scales))

    # dof <-> complex coefficients ----------------------------------------
    def dof_to_coeffs(self, k: int, dof: np.ndarray) -> np.ndarray:
        """Complex coefficients of the representatives of scale ``k``."""
        n = len(self.rep_u[k])
        re = dof[..., :n]
        im = np.zeros_like(re)
        im[..., ~self.rep_real[k]] = dof[..., n:]
        return re + 1j * im

    def coeffs_to_dof(self, k: int, coeffs: np.ndarray) -> np.ndarray:
        return np.concatenate([coeffs.real, coeffs.imag[..., ~self.rep_real[k]]], axis=-1)

    def embed_half(self, k: int, dof: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Write scale ``k`` into a (..., H, W//2+1) half-spectrum array."""
        if out is None:
            out = np.zeros(dof.shape[:-1] + (self.height, self.width // 2 + 1), dtype=np.complex128)
        out[..., self.rep_u[k], self.rep_v[k]] = self.dof_to_coeffs(k, dof)
        return out


def build_partition(height: int, width: int | None = None) -> ScalePartition:
    """Dyadic ring partition of the frequency grid.

    Box ``k`` holds bins whose signed frequencies lie in ``[-2^(k-1), 2^(k-1)-1]``
    on both axes.  A conjugate pair is owned by the smaller box level of its
    two members, which keeps every scale closed under conjugation.
    """
    width = height if width is None else width
    if height != width:
        raise SpectralError(f"partition needs a square grid, got {height}x{width}")
    levels = _check_pow2(height)
    n_scales = levels + 1
    fu, fv = np.meshgrid(centered_freq(height), centered_freq(width), indexing="ij")
    box = _box_level(fu, fv, n_scales)
    cu, cv = conj_index(height, width)
    bin_scale = np.minimum(box, box[cu, cv])

    canon = _canonical_mask(height, width)
    sc = _self_conjugate(height, width)
    part = ScalePartition(height, width, bin_scale)
    for k in range(n_scales):
        u, v = np.nonzero((bin_scale == k) & canon)
        part.rep_u.append(u)
        part.rep_v.append(v)
        part.rep_real.append(sc[u, v])
    return part


@lru_cache(maxsize=16)
def partition(size: int) -> ScalePartition:
    """Cached square partition."""
    return build_partition(size, size)


# ---------------------------------------------------------------------------
# per-scale spectra


@dataclass
class ScaleSpectrum:
    """Complex coefficients of every bin owned by one scale (row-major bin order)."""

    scale: int
    coeffs: np.ndarray  # complex, (..., count(scale))

    def to_dof(self, part: ScalePartition) -> np.ndarray:
        u, v = part.bins(self.scale)
        sel = np.isin(u * part.width + v, part.rep_u[self.scale] * part.width + part.rep_v[self.scale])
        return part.coeffs_to_dof(self.scale, self.coeffs[..., sel])

    @classmethod
    def from_dof(cls, part: ScalePartition, k: int, dof: np.ndarray) -> "ScaleSpectrum":
        half = part.embed_half(k, np.asarray(dof, dtype=np.float64))
        full = hermitian_complete(HalfSpectrum(part.height, part.width, half))
        u, v = part.bins(k)
        return cls(k, full[..., u, v])

    def half(self, part: ScalePartition) -> HalfSpectrum:
        return HalfSpectrum(part.height, part.width, part.embed_half(self.scale, self.to_dof(part)))


def decompose(x, part: ScalePartition | None = None) -> list[ScaleSpectrum]:
    """Split an image (or batch) into per-scale spectra, coarse to fine."""
    img = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    part = part or build_partition(img.shape[-2], img.shape[-1])
    if img.shape[-2:] != (part.height, part.width):
        raise SpectralError(f"image {img.shape[-2:]} does not match partition {part.height}x{part.width}")
    spec = dft2(img)
    return [ScaleSpectrum(k, spec[..., u, v]) for k in range(part.n_scales) for u, v in [part.bins(k)]]


def recompose(spectra: list[ScaleSpectrum], part: ScalePartition) -> np.ndarray:
    """Sum of the per-scale images ``B h``; needs each scale exactly once."""
    seen = sorted(s.scale for s in spectra)
    if seen != list(range(part.n_scales)):
        if len(set(seen)) != len(seen):
            raise SpectralError(f"overlapping scales {seen}")
        raise SpectralError(f"missing scales: have {seen}, need 0..{part.n_scales - 1}")
    lead = spectra[0].coeffs.shape[:-1]
    full = np.zeros(lead + (part.height, part.width), dtype=np.complex128)
    for s in spectra:
        u, v = part.bins(s.scale)
        full[..., u, v] += s.coeffs
    full = hermitian_complete(half_spectrum(full))
    return idft2(full)


def scale_dofs(x, part: ScalePartition) -> list[np.ndarray]:
    """Real dof vectors of every scale of an image (the decomposition targets)."""
    img = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    spec = dft2(img)
    return [part.coeffs_to_dof(k, spec[..., part.rep_u[k], part.rep_v[k]]) for k in range(part.n_scales)]


def dofs_to_image(dofs: list[np.ndarray], part: ScalePartition) -> np.ndarray:
    half = None
    for k, d in enumerate(dofs):
        half = part.embed_half(k, np.asarray(d, dtype=np.float64), half)
    return idft2(hermitian_complete(HalfSpectrum(part.height, part.width, half)))


def log_magnitude(x) -> np.ndarray:
    """Centered ``log(1 + |X|)`` of an image's spectrum, for display."""
    spec = dft2(x)
    return np.roll(np.log1p(np.abs(spec)), (spec.shape[-2] // 2, spec.shape[-1] // 2), axis=(-2, -1))


# ---------------------------------------------------------------------------
# differentiable synthesis / analysis


def synthesize(dofs: list, part: ScalePartition) -> Tensor:
    """Image from per-scale dof tensors of shape (B, dof_k): ``x = sum_k B h_k``."""
    dofs = [as_tensor(d) for d in dofs]
    if len(dofs) != part.n_scales:
        raise SpectralError(f"need {part.n_scales} scales, got {len(dofs)}")
    image = dofs_to_image([d.data for d in dofs], part)
    hw = part.height * part.width

    def bw(g):
        spec = dft2(g) / hw
        out = []
        for k in range(part.n_scales):
            c = spec[..., part.rep_u[k], part.rep_v[k]]
            factor = np.where(part.rep_real[k], 1.0, 2.0)
            out.append(part.coeffs_to_dof(k, c * factor))
        return out

    return custom_op(image, dofs, bw)


def analyze(x, part: ScalePartition) -> list[Tensor]:
    """Per-scale dof tensors of an image tensor ``B^-1 x``; differentiable."""
    x = as_tensor(x)
    dofs = scale_dofs(x.data, part)
    hw = part.height * part.width
    outs = []
    for k, d in enumerate(dofs):

        def bw(g, k=k):
            spec = np.zeros(g.shape[:-1] + (part.height, part.width), dtype=np.complex128)
            spec[..., part.rep_u[k], part.rep_v[k]] = part.dof_to_coeffs(k, g)
            return (hw * _idft2_raw(spec).real,)

        outs.append(custom_op(d, (x,), bw))
    return outs
