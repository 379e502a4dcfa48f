"""
DSP kernels

The three signal-processing stages searched by the pipeline optimizer:

* EMD band filtering (SD-stopped sifting on mirrored spline envelopes),
* wavelet band filtering (dyadic-scale CWT with Morlet or first-derivative
  of Gaussian wavelets, single-integral reconstruction),
* the Teager-Kaiser energy operator,

plus the PipelineConfig type and ordered application to windows.
"""

from __future__ import annotations

import functools
import logging
import re
import warnings
from dataclasses import dataclass
from enum import Enum

import emd
import numpy as np
from scipy.fft import irfft, next_fast_len, rfft

from scripts.errors import (
    ConfigError,
    EmptyImfBandWarning,
    InvalidWindowError,
    PipelineStageError,
    WaveletTruncationWarning,
)
from scripts.signal_io import MIN_WINDOW_SAMPLES, SignalWindow

logger = logging.getLogger(__name__)

MAX_SCALE_EXP = 9
MORLET_OMEGA0 = 6.0
# wavelet support in samples is about this many times its scale
WAVELET_SUPPORT_FACTOR = 8
MIRROR_EXTREMA = 2


class StageKind(str, Enum):
    EMD = "EMD"
    WAVELET = "WAVELET"
    TKEO = "TKEO"


class WaveletType(str, Enum):
    MORLET = "morl"
    GAUSSIAN = "gaus"


@dataclass(frozen=True, slots=True)
class EmdConfig:
    imf_lower: int = 0
    imf_upper: int | None = None
    max_imfs: int = 10
    sift_sd_threshold: float = 0.2
    max_sift_iters: int = 50

    def __post_init__(self):
        if self.imf_lower < 0:
            raise ConfigError(f"imf_lower must be >= 0, got {self.imf_lower}")
        if self.imf_upper is not None and self.imf_upper < self.imf_lower:
            raise ConfigError(
                f"imf_upper ({self.imf_upper}) < imf_lower ({self.imf_lower})"
            )
        if self.max_imfs < 1:
            raise ConfigError(f"max_imfs must be >= 1, got {self.max_imfs}")
        if self.max_sift_iters < 1 or not self.sift_sd_threshold > 0:
            raise ConfigError("Sifting limits must be positive")

    kind = StageKind.EMD

    def to_text(self) -> str:
        return f"EMD({self.imf_lower},{self.imf_upper})"


@dataclass(frozen=True, slots=True)
class WaveletConfig:
    scale_lower_exp: int = 0
    scale_upper_exp: int = MAX_SCALE_EXP
    wavelet_type: WaveletType = WaveletType.MORLET

    def __post_init__(self):
        object.__setattr__(self, "wavelet_type", WaveletType(self.wavelet_type))
        if not 0 <= self.scale_lower_exp <= self.scale_upper_exp <= MAX_SCALE_EXP:
            raise ConfigError(
                f"Wavelet scale exponents must satisfy 0 <= lower <= upper <= "
                f"{MAX_SCALE_EXP}, got ({self.scale_lower_exp}, {self.scale_upper_exp})"
            )

    kind = StageKind.WAVELET

    @property
    def exponents(self) -> range:
        return range(self.scale_lower_exp, self.scale_upper_exp + 1)

    def to_text(self) -> str:
        return (
            f"WAVELET(2^{self.scale_lower_exp},2^{self.scale_upper_exp},"
            f"{self.wavelet_type.value})"
        )


@dataclass(frozen=True, slots=True)
class TkeoConfig:
    kind = StageKind.TKEO

    def to_text(self) -> str:
        return "TKEO"


_EMD_TEXT = re.compile(r"^EMD\((\d+),(None|\d+)\)$")
_WAVELET_TEXT = re.compile(r"^WAVELET\(2\^(\d+),2\^(\d+),(morl|gaus)\)$")


def parse_stage(text: str):
    text = text.strip().replace(" ", "")
    if text == "TKEO":
        return TkeoConfig()
    if match := _EMD_TEXT.match(text):
        upper = None if match[2] == "None" else int(match[2])
        return EmdConfig(int(match[1]), upper)
    if match := _WAVELET_TEXT.match(text):
        return WaveletConfig(int(match[1]), int(match[2]), WaveletType(match[3]))
    raise ConfigError(f"Cannot parse stage {text!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Ordered stages, each kind at most once; empty means no processing."""

    stages: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        kinds = [s.kind for s in self.stages]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"Stage kind repeated in pipeline: {kinds}")

    @property
    def kinds(self) -> tuple:
        return tuple(s.kind for s in self.stages)

    def __len__(self):
        return len(self.stages)

    def to_text(self) -> str:
        if not self.stages:
            return "NONE"
        return " | ".join(s.to_text() for s in self.stages)

    __str__ = to_text

    @classmethod
    def parse(cls, text: str) -> PipelineConfig:
        text = text.strip()
        if text.upper() == "NONE":
            return cls(())
        return cls(tuple(parse_stage(part) for part in text.split("|")))


def _check_series(x: np.ndarray, minimum: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidWindowError(f"Expected a 1-D series, got shape {x.shape}")
    if x.size < minimum:
        raise InvalidWindowError(f"Series has {x.size} samples, at least {minimum} required")
    if not np.all(np.isfinite(x)):
        raise InvalidWindowError("Series contains non-finite values")
    return x


# EMD


def find_extrema(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of local maxima and minima; a flat top counts once, at its middle."""
    d = np.diff(x)
    moving = np.flatnonzero(d != 0)
    if moving.size < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    s = np.sign(d[moving])
    turn = np.flatnonzero(s[:-1] != s[1:])
    left, right = moving[turn], moving[turn + 1]
    position = (left + 1 + right) // 2
    rising = s[turn] > 0
    return position[rising], position[~rising]


def _mean_envelope(h: np.ndarray) -> np.ndarray | None:
    extrema_opts = {"pad_width": MIRROR_EXTREMA}
    upper = emd.sift.interp_envelope(h, mode="upper", extrema_opts=extrema_opts)
    lower = emd.sift.interp_envelope(h, mode="lower", extrema_opts=extrema_opts)
    if upper is None or lower is None:
        return None
    return 0.5 * (np.ravel(upper) + np.ravel(lower))


def _sift(r: np.ndarray, cfg: EmdConfig) -> np.ndarray | None:
    h = r.copy()
    for iteration in range(cfg.max_sift_iters):
        maxima, minima = find_extrema(h)
        mean_env = None
        if maxima.size >= 2 and minima.size >= 2:
            mean_env = _mean_envelope(h)
        if mean_env is None:
            return None if iteration == 0 else h
        stop, _ = emd.sift.sd_stop(h - mean_env, h, sd=cfg.sift_sd_threshold)
        h = h - mean_env
        if stop:
            break
    return h


@dataclass(frozen=True)
class EmdDecomposition:
    imfs: np.ndarray  # (n_imfs, n)
    residual: np.ndarray

    @property
    def n_imfs(self) -> int:
        return self.imfs.shape[0]


def emd_decompose(x: np.ndarray, cfg: EmdConfig = EmdConfig()) -> EmdDecomposition:
    """Sift ``x`` into at most ``cfg.max_imfs`` IMFs; IMFs + residual == x."""
    x = _check_series(x, MIN_WINDOW_SAMPLES)
    imfs = []
    residual = x.copy()
    while len(imfs) < cfg.max_imfs:
        maxima, minima = find_extrema(residual)
        if maxima.size + minima.size < 4:
            break
        imf = _sift(residual, cfg)
        if imf is None:
            break
        imfs.append(imf)
        residual = residual - imf
    stacked = np.array(imfs) if imfs else np.empty((0, x.size))
    return EmdDecomposition(stacked, residual)


def emd_band(dec: EmdDecomposition, imf_lower: int, imf_upper: int | None) -> np.ndarray:
    """Sum of IMFs lower..upper (inclusive); the residual joins when upper is None."""
    n = dec.residual.size
    if dec.n_imfs == 0 and imf_lower == 0 and imf_upper is None:
        # (0, None) stays the identity even when nothing was sifted out
        return dec.residual.copy()
    if imf_lower >= dec.n_imfs:
        warnings.warn(
            f"IMF band starts at {imf_lower} but only {dec.n_imfs} IMFs exist",
            EmptyImfBandWarning,
            stacklevel=2,
        )
        return np.zeros(n)
    stop = dec.n_imfs if imf_upper is None else min(imf_upper + 1, dec.n_imfs)
    out = dec.imfs[imf_lower:stop].sum(axis=0)
    if imf_upper is None:
        out = out + dec.residual
    return out


def emd_filter(x: np.ndarray, cfg: EmdConfig) -> np.ndarray:
    return emd_band(emd_decompose(x, cfg), cfg.imf_lower, cfg.imf_upper)


# Wavelets


def _wavelet_fourier(wavelet_type: WaveletType, u: np.ndarray) -> np.ndarray:
    """Fourier transform of the mother wavelet at angular frequency ``u``."""
    if wavelet_type is WaveletType.MORLET:
        # analytic Morlet: support on positive frequencies only
        psi = np.pi**-0.25 * np.exp(-0.5 * (u - MORLET_OMEGA0) ** 2)
        return np.where(u > 0, psi, 0.0)
    return -1j * u * np.exp(-0.5 * u**2) * np.pi**-0.25


# phase of the admissibility integral, divided out of the folded response
_ADMISSIBILITY_PHASE = {WaveletType.MORLET: 1.0, WaveletType.GAUSSIAN: 1j}


def cwt_terms(
    x: np.ndarray, wavelet_type: WaveletType, exponents=range(MAX_SCALE_EXP + 1)
) -> np.ndarray:
    """
    Per-scale reconstruction terms Re(W(2^j, t) / phase) / 2^(j/2), one row per exponent.

    For the Morlet wavelet the phase is 1. The first-derivative Gaussian has a
    purely imaginary response, so its terms are taken in quadrature and stay in
    phase with the input.

    Coefficients come from frequency-domain convolution with the zero-padded
    signal, so band-limited wavelets do not alias at the smallest scales.
    """
    x = _check_series(x, 1)
    wavelet_type = WaveletType(wavelet_type)
    exponents = list(exponents)
    n = x.size
    if WAVELET_SUPPORT_FACTOR * 2 ** max(exponents) > n:
        warnings.warn(
            f"Wavelet at scale 2^{max(exponents)} is longer than the "
            f"{n}-sample signal and is truncated",
            WaveletTruncationWarning,
            stacklevel=2,
        )
    size = next_fast_len(2 * n, real=True)
    spectrum = rfft(x, size)
    omega = 2 * np.pi * np.arange(spectrum.size) / size
    scales = 2.0 ** np.array(exponents, dtype=float)[:, None]
    u = scales * omega[None, :]
    # real part of the response, folded onto omega >= 0
    response = 0.5 * (
        np.conj(_wavelet_fourier(wavelet_type, u)) + _wavelet_fourier(wavelet_type, -u)
    )
    response = np.real(response / _ADMISSIBILITY_PHASE[wavelet_type])
    return irfft(spectrum[None, :] * response, size, axis=1)[:, :n]


def _reconstruct(terms: np.ndarray, wavelet_type: WaveletType) -> np.ndarray:
    return reconstruction_constant(wavelet_type) * np.log(2) * terms.sum(axis=0)


def cwt_band(terms: np.ndarray, cfg: WaveletConfig) -> np.ndarray:
    """Reconstruct from rows of a full ``cwt_terms`` table (exponents 0..9)."""
    rows = terms[cfg.scale_lower_exp : cfg.scale_upper_exp + 1]
    return _reconstruct(rows, cfg.wavelet_type)


def cwt_filter(x: np.ndarray, cfg: WaveletConfig) -> np.ndarray:
    terms = cwt_terms(x, cfg.wavelet_type, cfg.exponents)
    return _reconstruct(terms, cfg.wavelet_type)


CALIBRATION_LENGTH = 4096
# calibration tone sits on the response peak of scale 2^5
CALIBRATION_SCALE_EXP = 5
_PEAK_FREQUENCY = {WaveletType.MORLET: MORLET_OMEGA0, WaveletType.GAUSSIAN: 1.0}


def calibration_frequency(wavelet_type: WaveletType) -> float:
    """Angular frequency (rad/sample) of the calibration tone."""
    return _PEAK_FREQUENCY[WaveletType(wavelet_type)] / 2**CALIBRATION_SCALE_EXP


def calibrate_reconstruction_constant(wavelet_type: WaveletType) -> float:
    """
    Constant C making the full-band reconstruction of a unit sinusoid unit-amplitude.

    The in-phase amplitude is fitted by least squares on a cosine/sine pair over
    the central half of the signal; any quadrature residue is left out of C.
    """
    wavelet_type = WaveletType(wavelet_type)
    n = CALIBRATION_LENGTH
    t = np.arange(n)
    omega = calibration_frequency(wavelet_type)
    x = np.cos(omega * t)
    y = np.log(2) * cwt_terms(x, wavelet_type).sum(axis=0)
    core = slice(n // 4, 3 * n // 4)
    basis = np.column_stack([np.cos(omega * t[core]), np.sin(omega * t[core])])
    coef, *_ = np.linalg.lstsq(basis, y[core], rcond=None)
    return float(1.0 / coef[0])


@functools.cache
def reconstruction_constant(wavelet_type: WaveletType) -> float:
    constant = calibrate_reconstruction_constant(wavelet_type)
    logger.debug(f"Wavelet reconstruction constant for {wavelet_type.value}: {constant:.6f}")
    return constant


# TKEO


def tkeo(x: np.ndarray) -> np.ndarray:
    """Teager-Kaiser energy; the two endpoints copy their interior neighbour."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 3:
        raise InvalidWindowError(f"TKEO needs at least 3 samples, got {x.size}")
    psi = np.empty_like(x)
    psi[1:-1] = x[1:-1] ** 2 - x[:-2] * x[2:]
    psi[0] = psi[1]
    psi[-1] = psi[-2]
    return psi


# Pipelines


def apply_stage(x: np.ndarray, stage) -> np.ndarray:
    if stage.kind is StageKind.EMD:
        return emd_filter(x, stage)
    if stage.kind is StageKind.WAVELET:
        return cwt_filter(x, stage)
    return tkeo(x)


def apply_stages(x: np.ndarray, stages) -> np.ndarray:
    for index, stage in enumerate(stages):
        try:
            x = apply_stage(x, stage)
        except Exception as exc:
            raise PipelineStageError(index, stage.to_text(), exc) from exc
    return x


def apply_pipeline(w: SignalWindow, cfg: PipelineConfig) -> SignalWindow:
    """Run the stages left to right on each channel independently."""
    if not cfg.stages:
        return w
    channels = [apply_stages(ch, cfg.stages) for ch in w.samples]
    return w.with_samples(np.vstack(channels))
