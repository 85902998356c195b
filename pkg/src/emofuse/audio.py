"""WAV I/O and the speech preprocessing chain.

Covers RIFF/WAVE PCM-16 parsing and writing, dataset-global normalization,
the 5.5 s random crop with repetition padding, and the three streaming
augmentations (speed perturbation, reverberation, additive noise). All
randomness comes in through explicit `Rng` streams so per-sample decisions
are independent of scheduling order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .numerics import Rng

DEFAULT_SAMPLE_RATE = 16_000

# Dataset-global normalization constants reported for the original corpus;
# treated as opaque config defaults, not as values with known units.
DEFAULT_NORM_MEAN = -33.62
DEFAULT_NORM_STD = 56.15


@dataclass
class Waveform:
    """Mono audio: float32 samples plus sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got ndim={self.samples.ndim}")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class NormStats:
    """Global mean / population std of the training-set sample values."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise DataError(f"normalization std must be positive, got {self.std}")


@dataclass
class AugmentChain:
    """Streaming-augmentation config: apply one transform with probability p."""

    probability: float = 0.3
    speed_factors: tuple[float, ...] = (0.9, 1.0, 1.1)
    rir_seconds: float = 0.25
    rir_t60_range: tuple[float, float] = (0.1, 0.5)
    snr_range_db: tuple[float, float] = (5.0, 20.0)
    noise_bank: list[Waveform] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"augment probability must be in [0, 1], got {self.probability}")
        if any(f <= 0 for f in self.speed_factors):
            raise ConfigError("speed factors must be positive")


# ---------------------------------------------------------------------------
# WAV parsing / serialization (RIFF, PCM 16-bit little-endian)
# ---------------------------------------------------------------------------


def read_wav(data: bytes) -> Waveform:
    """Parse a RIFF/WAVE byte string into a mono Waveform.

    Only PCM 16-bit is accepted; multichannel input is averaged to mono.
    Samples map to floats as value/32768. Unknown chunks are skipped.
    """
    if len(data) < 12:
        raise ParseError("RIFF header truncated")
    if data[0:4] != b"RIFF":
        raise ParseError(f"bad RIFF magic {data[0:4]!r}")
    if data[8:12] != b"WAVE":
        raise ParseError(f"bad WAVE tag {data[8:12]!r}")

    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise ParseError(f"{chunk_id.decode('ascii', 'replace')} chunk truncated")
        if chunk_id == b"fmt ":
            if size < 16:
                raise ParseError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            raw = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise ParseError("missing fmt chunk")
    if raw is None:
        raise ParseError("missing data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise ParseError(f"unsupported codec {audio_format} in fmt chunk (PCM only)")
    if bits != 16:
        raise ParseError(f"unsupported bit depth {bits} in fmt chunk (16-bit only)")
    if channels < 1:
        raise ParseError("fmt chunk declares zero channels")
    if len(raw) % (2 * channels) != 0:
        raise ParseError("data chunk length not a whole number of frames")

    ints = np.frombuffer(raw, dtype="<i2")
    if channels > 1:
        ints = ints.reshape(-1, channels)
        samples = ints.mean(axis=1, dtype=np.float64) / 32768.0
    else:
        samples = ints.astype(np.float64) / 32768.0
    if samples.size < 1:
        raise ParseError("data chunk holds no samples")
    return Waveform(samples.astype(np.float32), sample_rate)


def write_wav(w: Waveform) -> bytes:
    """Serialize a Waveform as mono PCM-16 WAV bytes (round-trips within 1 LSB)."""
    ints = np.clip(np.rint(w.samples.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2")
    raw = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(raw),
        b"WAVE",
        b"fmt ",
        16,
        1,  # PCM
        1,  # mono
        w.sample_rate,
        w.sample_rate * 2,
        2,
        16,
        b"data",
        len(raw),
    )
    return header + raw


def load_wav(path, resample_to: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a WAV file, resampling to the pipeline rate when it differs."""
    with open(path, "rb") as fh:
        w = read_wav(fh.read())
    if resample_to is not None and w.sample_rate != resample_to:
        w = resample(w, resample_to)
    return w


def save_wav(path, w: Waveform) -> None:
    with open(path, "wb") as fh:
        fh.write(write_wav(w))


def resample(w: Waveform, rate: int) -> Waveform:
    """Linear-interpolation resample to a new rate (same duration)."""
    if rate <= 0:
        raise ConfigError(f"target rate must be positive, got {rate}")
    if rate == w.sample_rate:
        return w
    out_len = max(1, round(len(w) * rate / w.sample_rate))
    positions = np.arange(out_len) * (w.sample_rate / rate)
    out = np.interp(positions, np.arange(len(w)), w.samples.astype(np.float64))
    return Waveform(out.astype(np.float32), rate)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def compute_norm_stats(waveforms) -> NormStats:
    """Mean and population std over the concatenated training sample values."""
    chunks = [np.asarray(w.samples, dtype=np.float64) for w in waveforms]
    if not chunks:
        raise DataError("cannot compute normalization stats of an empty corpus")
    values = np.concatenate(chunks)
    mean = float(values.mean())
    std = float(values.std())  # population
    if std == 0.0:
        raise DataError("corpus is constant (std = 0); normalization undefined")
    return NormStats(mean, std)


def normalize(w: Waveform, stats: NormStats) -> Waveform:
    """x -> (x - mean) / std with the (training-set) stats."""
    out = (w.samples.astype(np.float64) - stats.mean) / stats.std
    return Waveform(out.astype(np.float32), w.sample_rate)


# ---------------------------------------------------------------------------
# Crop / pad
# ---------------------------------------------------------------------------


def crop_or_pad(w: Waveform, window_seconds: float = 5.5, rng: Rng | None = None, mode: str = "train") -> Waveform:
    """Fixed-window random crop with repetition padding (train mode only).

    Longer inputs get a uniform random start offset; shorter ones are tiled
    end-to-end and truncated. Inference mode keeps the whole waveform.
    """
    if window_seconds <= 0:
        raise ConfigError(f"window_seconds must be positive, got {window_seconds}")
    if len(w) == 0:
        raise DataError("cannot crop or pad an empty waveform")
    if mode == "inference":
        return w
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'inference', got {mode!r}")
    target = round(window_seconds * w.sample_rate)
    n = len(w)
    if n == target:
        return w
    if n > target:
        if rng is None:
            raise ConfigError("random crop requires an rng")
        start = int(rng.integers(0, n - target + 1))
        return Waveform(w.samples[start : start + target].copy(), w.sample_rate)
    reps = -(-target // n)  # ceil
    out = np.tile(w.samples, reps)[:target]
    return Waveform(out, w.sample_rate)


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resample by `factor` via linear interpolation; >1 plays faster (shorter)."""
    if factor <= 0:
        raise ConfigError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return w
    out_len = round(len(w) / factor)
    positions = np.arange(out_len) * factor
    out = np.interp(positions, np.arange(len(w)), w.samples.astype(np.float64))
    return Waveform(out.astype(np.float32), w.sample_rate)


def make_rir(rng: Rng, t60: float, sample_rate: int, length_seconds: float = 0.25) -> np.ndarray:
    """Synthetic room impulse response: decaying noise h[n] = g[n] * 10^(-3n / (t60*sr)).

    The first tap is pinned to 1 so the direct path is preserved.
    """
    if t60 <= 0:
        raise ConfigError(f"T60 must be positive, got {t60}")
    taps = max(1, round(length_seconds * sample_rate))
    g = rng.normal(size=taps)
    g[0] = 1.0
    n = np.arange(taps)
    return (g * 10.0 ** (-3.0 * n / (t60 * sample_rate))).astype(np.float64)


def add_reverb(w: Waveform, rir: np.ndarray) -> Waveform:
    """Linear convolution with the impulse response, truncated to the input length."""
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0:
        raise ConfigError("impulse response must be nonempty")
    out = np.convolve(w.samples.astype(np.float64), rir)[: len(w)]
    return Waveform(out.astype(np.float32), w.sample_rate)


def add_noise(w: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Mix in noise scaled to the requested SNR (powers are mean squares).

    The noise is looped/cropped to the signal length first. A silent signal
    is returned unchanged (SNR undefined).
    """
    if len(noise) == 0:
        raise ConfigError("noise waveform must be nonempty")
    sig = w.samples.astype(np.float64)
    p_signal = float(np.mean(sig * sig))
    if p_signal == 0.0:
        return w
    n = noise.samples.astype(np.float64)
    if len(n) < len(sig):
        n = np.tile(n, -(-len(sig) // len(n)))
    n = n[: len(sig)]
    p_noise = float(np.mean(n * n))
    if p_noise == 0.0:
        raise DataError("noise waveform is silent; cannot reach any SNR")
    alpha = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform((sig + alpha * n).astype(np.float32), w.sample_rate)


def white_noise(rng: Rng, length: int) -> Waveform:
    """Gaussian white-noise fallback for when no noise bank is supplied."""
    return Waveform(rng.normal(scale=0.1, size=length).astype(np.float32), DEFAULT_SAMPLE_RATE)


def augment_described(w: Waveform, chain: AugmentChain, rng: Rng) -> tuple[Waveform, str, str]:
    """One augmentation coin flip; returns (output, transform name, parameters).

    With probability `chain.probability` one transform is chosen uniformly:
    speed perturbation (factor from the set), reverberation (fresh synthetic
    RIR), or additive noise (uniform SNR from the range).
    """
    if rng.random() >= chain.probability:
        return w, "none", ""
    kind = int(rng.integers(0, 3))
    if kind == 0:
        factor = chain.speed_factors[int(rng.integers(0, len(chain.speed_factors)))]
        return speed_perturb(w, factor), "speed", f"factor={factor}"
    if kind == 1:
        t60 = float(rng.uniform(*chain.rir_t60_range))
        rir = make_rir(rng, t60, w.sample_rate, chain.rir_seconds)
        return add_reverb(w, rir), "reverb", f"t60={t60:.4f}"
    snr = float(rng.uniform(*chain.snr_range_db))
    if chain.noise_bank:
        noise = chain.noise_bank[int(rng.integers(0, len(chain.noise_bank)))]
    else:
        noise = white_noise(rng, len(w))
    return add_noise(w, noise, snr), "noise", f"snr_db={snr:.4f}"


def maybe_augment(w: Waveform, chain: AugmentChain, rng: Rng, mode: str = "train") -> Waveform:
    """Per-sample augmentation coin flip; eval mode is a bit-exact identity.

    Callers seed `rng` per (sample, epoch) — e.g. root.child("augment",
    epoch, sample_id) — so the decision is schedule-independent.
    """
    if mode == "eval":
        return w
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, _, _ = augment_described(w, chain, rng)
    return out
