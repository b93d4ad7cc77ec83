"""Room acoustics simulation: image-method impulse responses and far-field mixing.

Far-field speech is synthesized by convolving close-talk speech with a room
impulse response (RIR) and adding noise at a requested SNR.  The multi-source
variant additionally sums diffuse and directional noise terms, each passed
through its own impulse response, before the aggregate noise is scaled.

Conventions:
    * audio is mono float64 in nominal range [-1, 1] at an explicit sample rate
    * wall reflection coefficients are pressure coefficients in [0, 1]
    * SNR is the RMS power ratio of the (reverberant) speech component to the
      total scaled noise component, measured over the full utterance
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

SPEED_OF_SOUND = 343.0

# Length of the windowed-sinc fractional-delay kernel (odd; +/-40 samples).
FRAC_DELAY_TAPS = 81


class SimulationError(ValueError):
    """Invalid geometry or signal arguments for a simulation operation."""


@dataclass
class Waveform:
    """Mono audio signal with an explicit sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SimulationError("waveform must be 1-D")
        if int(self.sample_rate) <= 0:
            raise SimulationError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise SimulationError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))

    def clip_report(self) -> int:
        """Number of samples outside [-1, 1] (clipping is reported, never applied)."""
        return int(np.count_nonzero(np.abs(self.samples) > 1.0))


@dataclass
class ImpulseResponse:
    """Finite impulse response."""

    taps: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or len(self.taps) == 0:
            raise SimulationError("impulse response must be non-empty and 1-D")
        if not np.all(np.isfinite(self.taps)):
            raise SimulationError("impulse response contains non-finite taps")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return len(self.taps)

    def energy(self) -> float:
        return float(np.sum(self.taps**2))


def unit_impulse(sample_rate: int, delay: int = 0, length: int | None = None) -> ImpulseResponse:
    """Kronecker delta at `delay` samples."""
    n = length if length is not None else delay + 1
    taps = np.zeros(max(n, delay + 1))
    taps[delay] = 1.0
    return ImpulseResponse(taps, sample_rate)


@dataclass
class RoomSpec:
    """Shoebox room geometry for the image method.

    `wall_reflection` holds six pressure reflection coefficients ordered
    (x=0, x=Lx, y=0, y=Ly, z=0, z=Lz).  A scalar is broadcast to all walls.
    """

    dimensions: np.ndarray
    source_position: np.ndarray
    mic_position: np.ndarray
    wall_reflection: np.ndarray = 0.0
    max_order: int = 0
    speed_of_sound: float = SPEED_OF_SOUND
    ir_length: int = 4096
    sample_rate: int = 16000

    def __post_init__(self):
        self.dimensions = np.asarray(self.dimensions, dtype=np.float64)
        self.source_position = np.asarray(self.source_position, dtype=np.float64)
        self.mic_position = np.asarray(self.mic_position, dtype=np.float64)
        refl = np.asarray(self.wall_reflection, dtype=np.float64)
        if refl.ndim == 0:
            refl = np.full(6, float(refl))
        self.wall_reflection = refl
        if self.dimensions.shape != (3,) or np.any(self.dimensions <= 0):
            raise SimulationError("room dimensions must be a positive 3-vector")
        for name, pos in (("source", self.source_position), ("mic", self.mic_position)):
            if pos.shape != (3,):
                raise SimulationError(f"{name} position must be a 3-vector")
            if np.any(pos <= 0) or np.any(pos >= self.dimensions):
                raise SimulationError(f"{name} position lies outside the room")
        if self.wall_reflection.shape != (6,):
            raise SimulationError("wall_reflection needs 6 coefficients")
        if np.any(self.wall_reflection < 0) or np.any(self.wall_reflection > 1):
            raise SimulationError("wall reflection coefficients must be in [0, 1]")
        if np.allclose(self.source_position, self.mic_position):
            raise SimulationError("source and microphone coincide (zero distance)")
        if self.max_order < 0:
            raise SimulationError("max_order must be non-negative")
        if self.ir_length < 1:
            raise SimulationError("ir_length must be at least 1 sample")

    def direct_distance(self) -> float:
        return float(np.linalg.norm(self.source_position - self.mic_position))

    def direct_delay_samples(self) -> int:
        return int(round(self.direct_distance() / self.speed_of_sound * self.sample_rate))


@dataclass
class NoiseSource:
    """A noise signal plus how it reaches the microphone.

    Directional sources must carry an impulse response; diffuse sources may
    omit it, in which case a dense late-field response is derived from the
    room at mixing time.
    """

    waveform: Waveform
    kind: str = "diffuse"
    ir: ImpulseResponse | None = None

    def __post_init__(self):
        if self.kind not in ("diffuse", "directional"):
            raise SimulationError(f"unknown noise kind {self.kind!r}")
        if self.kind == "directional" and self.ir is None:
            raise SimulationError("directional noise source requires an impulse response")


def _image_sources(room: RoomSpec):
    """All image-source positions, amplitudes and delays up to max_order.

    Returns (distances, amplitudes) as flat arrays.  Amplitude is the product
    of wall reflection coefficients divided by 4*pi*distance.
    """
    k = (room.max_order + 1) // 2 + 1
    rng_m = np.arange(-k, k + 1)
    mx, my, mz, px, py, pz = np.meshgrid(
        rng_m, rng_m, rng_m, [0, 1], [0, 1], [0, 1], indexing="ij"
    )
    m = np.stack([mx, my, mz], axis=-1).reshape(-1, 3)
    p = np.stack([px, py, pz], axis=-1).reshape(-1, 3)

    order = np.sum(np.abs(m - p) + np.abs(m), axis=1)
    keep = order <= room.max_order
    m, p = m[keep], p[keep]

    pos = (1 - 2 * p) * room.source_position + 2 * m * room.dimensions
    dist = np.linalg.norm(pos - room.mic_position, axis=1)

    refl = room.wall_reflection
    amp = np.ones(len(m))
    for d in range(3):
        amp *= refl[2 * d] ** np.abs(m[:, d] - p[:, d])
        amp *= refl[2 * d + 1] ** np.abs(m[:, d])
    amp /= 4.0 * np.pi * dist
    return dist, amp


def generate_rir(room: RoomSpec, fractional: bool = True) -> ImpulseResponse:
    """Image-method room impulse response.

    With `fractional=True` each image contributes an 81-tap Hann-windowed
    sinc centered on its (non-integer) delay; otherwise the nearest sample
    receives the full amplitude.
    """
    dist, amp = _image_sources(room)
    delays = dist / room.speed_of_sound * room.sample_rate
    h = np.zeros(room.ir_length)

    if fractional:
        half = FRAC_DELAY_TAPS // 2
        offsets = np.arange(-half, half + 1)
        centers = np.floor(delays).astype(int)
        idx = centers[:, None] + offsets[None, :]
        t = idx - delays[:, None]
        win = 0.5 * (1.0 + np.cos(np.pi * t / (half + 1)))
        win[np.abs(t) > half + 1] = 0.0
        taps = amp[:, None] * np.sinc(t) * win
        valid = (idx >= 0) & (idx < room.ir_length)
        np.add.at(h, idx[valid], taps[valid])
    else:
        centers = np.round(delays).astype(int)
        valid = centers < room.ir_length
        np.add.at(h, centers[valid], amp[valid])
    return ImpulseResponse(h, room.sample_rate)


def late_field_rir(room: RoomSpec, fractional: bool = True) -> ImpulseResponse:
    """Diffuse-field approximation: the image-method IR with its direct path
    removed, normalized to unit energy."""
    full = generate_rir(room, fractional=fractional)
    direct_only = RoomSpec(
        dimensions=room.dimensions,
        source_position=room.source_position,
        mic_position=room.mic_position,
        wall_reflection=0.0,
        max_order=0,
        speed_of_sound=room.speed_of_sound,
        ir_length=room.ir_length,
        sample_rate=room.sample_rate,
    )
    direct = generate_rir(direct_only, fractional=fractional)
    taps = full.taps - direct.taps
    e = np.sqrt(np.sum(taps**2))
    if e == 0.0:
        raise SimulationError("late-field IR is empty; increase max_order or reflections")
    return ImpulseResponse(taps / e, room.sample_rate)


def convolve(x: Waveform, h: ImpulseResponse) -> Waveform:
    """Full linear convolution; output length len(x) + len(h) - 1."""
    if x.sample_rate != h.sample_rate:
        raise SimulationError(
            f"sample-rate mismatch: waveform {x.sample_rate} vs IR {h.sample_rate}"
        )
    y = fftconvolve(x.samples, h.taps, mode="full")
    return Waveform(y, x.sample_rate)


def _loop_to_length(noise: np.ndarray, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Tile `noise` to n samples, starting from a random circular offset."""
    if len(noise) >= n:
        return noise[:n]
    offset = int(rng.integers(len(noise))) if rng is not None else 0
    rolled = np.roll(noise, -offset)
    reps = int(np.ceil(n / len(rolled)))
    return np.tile(rolled, reps)[:n]


def mix_at_snr(
    speech: Waveform,
    noise: Waveform,
    snr_db: float,
    rng: np.random.Generator | None = None,
) -> Waveform:
    """speech + g * noise with g chosen so the component power ratio is snr_db.

    Noise shorter than the speech is looped with a circular offset drawn from
    `rng` (offset 0 when rng is None).  snr_db = +inf returns the speech
    unchanged.
    """
    if speech.sample_rate != noise.sample_rate:
        raise SimulationError("sample-rate mismatch between speech and noise")
    if np.isinf(snr_db) and snr_db > 0:
        return Waveform(speech.samples.copy(), speech.sample_rate)
    s_rms = speech.rms()
    if s_rms == 0.0:
        raise SimulationError("speech has zero energy; SNR undefined")
    n = _loop_to_length(noise.samples, len(speech), rng)
    n_rms = np.sqrt(np.mean(n**2))
    if n_rms == 0.0:
        raise SimulationError("noise has zero energy at finite SNR")
    gain = s_rms / n_rms * 10.0 ** (-snr_db / 20.0)
    return Waveform(speech.samples + gain * n, speech.sample_rate)


def simulate_single_channel(
    s: Waveform,
    room: RoomSpec | None,
    noise: Waveform | None,
    snr_db: float,
    rng: np.random.Generator | None = None,
    fractional: bool = True,
    rir: ImpulseResponse | None = None,
    direct_delay: int | None = None,
) -> Waveform:
    """Reverberate speech through the room and add looped noise at snr_db.

    The output is trimmed back to len(s) with the direct-path delay discarded,
    so close-talk / far-field pairs stay frame-synchronous.  Passing `rir`
    (e.g. one loaded from a WAV file) bypasses the image method; the delay to
    discard is then `direct_delay`, defaulting to the IR's largest-magnitude
    tap.
    """
    if rir is None:
        if room is None:
            raise SimulationError("need either a room spec or an impulse response")
        if s.sample_rate != room.sample_rate:
            raise SimulationError("speech sample rate differs from room sample rate")
        rir = generate_rir(room, fractional=fractional)
        delay = room.direct_delay_samples() if direct_delay is None else direct_delay
    else:
        if s.sample_rate != rir.sample_rate:
            raise SimulationError("speech sample rate differs from IR sample rate")
        delay = int(np.argmax(np.abs(rir.taps))) if direct_delay is None else direct_delay
    rev = convolve(s, rir)
    trimmed = rev.samples[delay : delay + len(s)]
    if len(trimmed) < len(s):
        trimmed = np.pad(trimmed, (0, len(s) - len(trimmed)))
    rev = Waveform(trimmed, s.sample_rate)
    if noise is None or (np.isinf(snr_db) and snr_db > 0):
        return rev
    if rev.rms() == 0.0:
        # All-zero speech: SNR scaling is undefined, pass the noise through
        # at unit gain so the caller still gets the noise floor.
        return Waveform(_loop_to_length(noise.samples, len(s), rng), s.sample_rate)
    return mix_at_snr(rev, noise, snr_db, rng=rng)


def simulate_beamformed(
    s: Waveform,
    room: RoomSpec,
    diffuse: list[NoiseSource],
    directional: list[NoiseSource],
    snr_db: float,
    rng: np.random.Generator | None = None,
    fractional: bool = True,
) -> Waveform:
    """Multi-source far-field mixing.

    Y = S*R_s + sum_f N_f*R_f + sum_r N_r*R_r, with the aggregate noise term
    scaled so its power ratio against the reverberant speech equals snr_db.
    Diffuse sources without an explicit IR use the room's late-field IR.
    Output is trimmed to len(s) with direct-path delay compensation.
    """
    if s.sample_rate != room.sample_rate:
        raise SimulationError("speech sample rate differs from room sample rate")
    rir = generate_rir(room, fractional=fractional)
    delay = room.direct_delay_samples()

    def _trim(w: Waveform) -> Waveform:
        t = w.samples[delay : delay + len(s)]
        if len(t) < len(s):
            t = np.pad(t, (0, len(s) - len(t)))
        return Waveform(t, s.sample_rate)

    rev = _trim(convolve(s, rir))

    noise_total = np.zeros(len(s))
    diffuse_ir = None
    for src in diffuse + directional:
        if src.waveform.sample_rate != s.sample_rate:
            raise SimulationError("noise sample rate differs from speech")
        if src.ir is not None:
            ir = src.ir
        else:
            if diffuse_ir is None:
                diffuse_ir = late_field_rir(room, fractional=fractional)
            ir = diffuse_ir
        looped = Waveform(
            _loop_to_length(src.waveform.samples, len(s), rng), s.sample_rate
        )
        noise_total += convolve(looped, ir).samples[: len(s)]

    if (not diffuse and not directional) or (np.isinf(snr_db) and snr_db > 0):
        return rev

    n_rms = np.sqrt(np.mean(noise_total**2))
    if n_rms == 0.0:
        raise SimulationError("aggregate noise has zero energy at finite SNR")
    if rev.rms() == 0.0:
        return Waveform(noise_total, s.sample_rate)
    gain = rev.rms() / n_rms * 10.0 ** (-snr_db / 20.0)
    return Waveform(rev.samples + gain * noise_total, s.sample_rate)


def measure_snr(speech: Waveform, noise: Waveform) -> float:
    """Component SNR in dB from the two already-scaled parts of a mix."""
    return 20.0 * np.log10(speech.rms() / noise.rms())


# ---------------------------------------------------------------------------
# WAV I/O: mono 16-bit PCM at 16 kHz only.

REQUIRED_RATE = 16000


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise SimulationError(f"{path}: expected mono WAV, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise SimulationError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != REQUIRED_RATE:
            raise SimulationError(
                f"{path}: expected {REQUIRED_RATE} Hz, got {f.getframerate()} Hz"
            )
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, REQUIRED_RATE)


def write_wav(path: str | Path, w: Waveform) -> None:
    if w.sample_rate != REQUIRED_RATE:
        raise SimulationError(f"only {REQUIRED_RATE} Hz WAV output is supported")
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(REQUIRED_RATE)
        f.writeframes(pcm.tobytes())
