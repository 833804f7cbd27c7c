"""Shoebox image-method RIRs, scene sampling and spatialization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .signal import MultichannelWaveform

SPEED_OF_SOUND = 343.0
WALL_MARGIN = 0.3
HIGHPASS_HZ = 100.0

ROOM_MIN = (3.0, 3.0, 2.5)
ROOM_MAX = (8.0, 10.0, 6.0)
T60_RANGE = (0.05, 0.5)

BUCKET_EDGES = (0.0, 15.0, 45.0, 90.0, 180.0)
BUCKET_NAMES = ("0-15", "15-45", "45-90", "90-180")
BUCKET_WEIGHTS = (0.16, 0.29, 0.26, 0.29)


class SceneSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    length: float
    width: float
    height: float
    t60: float

    def __post_init__(self):
        if not min(self.length, self.width, self.height) > 0:
            raise ValueError(f"room dimensions must be positive, got {self.length} x {self.width} x {self.height}")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def surface(self) -> float:
        l, w, h = self.length, self.width, self.height
        return 2.0 * (l * w + l * h + w * h)


@dataclass(frozen=True)
class ArrayGeometry:
    center: tuple
    mic_count: int = 6
    diameter: float = 0.07

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    @property
    def mic_positions(self) -> np.ndarray:
        """``(mic_count, 3)``; mic 1 sits at azimuth 0, the rest counter-clockwise."""
        phi = 2.0 * np.pi * np.arange(self.mic_count) / self.mic_count
        offs = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1) * self.radius
        return np.asarray(self.center, dtype=float) + offs


@dataclass(frozen=True)
class SceneSpec:
    room: RoomSpec
    array: ArrayGeometry
    sources: tuple  # 3-D positions
    seed: int = 0

    @property
    def azimuths(self) -> np.ndarray:
        c = np.asarray(self.array.center)
        return np.array([math.atan2(p[1] - c[1], p[0] - c[0]) for p in self.sources])

    @property
    def angle_difference(self) -> float | None:
        """Azimuth difference of the first two sources in degrees, in [0, 180]."""
        if len(self.sources) < 2:
            return None
        az = self.azimuths
        return azimuth_difference_deg(az[0], az[1])

    @property
    def bucket(self) -> str | None:
        diff = self.angle_difference
        return None if diff is None else angle_bucket(diff)


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray  # (sources, mics, length)
    sample_rate: int
    direct_delays: np.ndarray = field(default=None)  # (sources, mics) sample indices


def azimuth_difference_deg(a: float, b: float) -> float:
    d = abs(math.degrees(a - b)) % 360.0
    return 360.0 - d if d > 180.0 else d


def angle_bucket(diff_deg: float) -> str:
    for lo, hi, name in zip(BUCKET_EDGES[:-1], BUCKET_EDGES[1:], BUCKET_NAMES):
        if lo <= diff_deg < hi:
            return name
    if diff_deg == BUCKET_EDGES[-1]:
        return BUCKET_NAMES[-1]
    raise ValueError(f"angle difference {diff_deg} outside [0, 180]")


def t60_to_absorption(room: RoomSpec, formula: str = "sabine") -> float:
    """Uniform wall absorption giving ``room.t60``.

    ``sabine`` inverts T60 = 0.161 V / (alpha S) and clamps to 1; ``eyring``
    inverts T60 = 0.161 V / (-S ln(1 - alpha)), which stays below 1;
    ``image`` solves for the absorption whose image-method decay curve
    (:func:`image_decay_t60`) has the target -5/-25 dB slope.
    """
    if room.t60 <= 0:
        raise ValueError("t60 must be positive")
    if room.surface <= 0:
        raise ValueError("room has zero surface area")
    ratio = 0.161 * room.volume / (room.surface * room.t60)
    if formula == "sabine":
        return min(ratio, 1.0)
    if formula == "eyring":
        return float(-np.expm1(-ratio))
    if formula == "image":
        return _image_matched_absorption(room)
    raise ValueError(f"unknown absorption formula {formula!r}")


def _fibonacci_directions(n: int = 2048) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


_DIRECTIONS = _fibonacci_directions()
ONSET_FRACTION = 0.5


def image_decay_t60(room: RoomSpec, absorption: float, fit_range=(-5.0, -25.0),
                    onset: float | None = None) -> float:
    """T60 a Schroeder fit reports for the direction-averaged image energy.

    An image at distance ``ct`` in direction ``u`` has undergone about
    ``ct * sum(|u_i| / L_i)`` reflections and images have density ``1/V``,
    so reflected energy arrives at rate ``c / (4 pi V) * mean_u exp(-a(u) t)``.
    No reflection arrives before ``onset`` mean free paths (``4V / S``).
    """
    if absorption >= 1.0:
        return 0.0
    onset = ONSET_FRACTION if onset is None else onset
    rate = -SPEED_OF_SOUND * math.log1p(-absorption) * (np.abs(_DIRECTIONS) @ (1.0 / room.dims))
    rate = np.maximum(rate, 1e-12)
    t_on = onset * 4.0 * room.volume / room.surface / SPEED_OF_SOUND
    total = np.mean(np.exp(-rate * t_on) / rate)

    def edc_db(t):
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(np.mean(np.exp(-rate * max(t, t_on)) / rate) / total)

    times = []
    for level in fit_range:
        lo, hi = 0.0, 1.0
        while edc_db(hi) > level:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if edc_db(mid) > level else (lo, mid)
        times.append(0.5 * (lo + hi))
    return 60.0 * (times[1] - times[0]) / (fit_range[0] - fit_range[1])


def _image_matched_absorption(room: RoomSpec) -> float:
    # the fitted t60 decreases monotonically in log(1 - alpha)
    lo, hi = -40.0, -1e-8
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if image_decay_t60(room, -math.expm1(mid)) > room.t60:
            hi = mid
        else:
            lo = mid
    return float(-math.expm1(0.5 * (lo + hi)))


def _axis_images(src: float, size: float, n_max: int):
    n = np.arange(-n_max, n_max + 1)
    pos = np.concatenate([2 * n * size + src, 2 * n * size - src])
    refl = np.concatenate([np.abs(n) + np.abs(n), np.abs(n - 1) + np.abs(n)])
    return pos, refl


def image_sources(room_dims, source, max_distance: float, listener, order_limit: int | None = None):
    """Image positions and reflection counts within ``max_distance`` of ``listener``."""
    room_dims = np.asarray(room_dims, float)
    per_axis = [
        _axis_images(source[i], room_dims[i], int(math.ceil(max_distance / (2 * room_dims[i]))) + 1)
        for i in range(3)
    ]
    (px, rx), (py, ry), (pz, rz) = per_axis
    dx = (px - listener[0]) ** 2
    dy = (py - listener[1]) ** 2
    dz = (pz - listener[2]) ** 2
    d2 = dx[:, None, None] + dy[None, :, None] + dz[None, None, :]
    refl = rx[:, None, None] + ry[None, :, None] + rz[None, None, :]
    keep = d2 <= max_distance ** 2
    if order_limit is not None:
        keep &= refl <= order_limit
    ix, iy, iz = np.nonzero(keep)
    pos = np.stack([px[ix], py[iy], pz[iz]], axis=1)
    return pos, refl[ix, iy, iz]


def _sinc_taps(delays: np.ndarray, amps: np.ndarray, length: int, half_width: int = 40) -> np.ndarray:
    out = np.zeros(length + 2 * half_width + 1)
    base = np.floor(delays).astype(int)
    frac = delays - base
    k = np.arange(-half_width, half_width + 1)
    for start in range(0, len(delays), 4096):
        sl = slice(start, start + 4096)
        t = k[None, :] - frac[sl, None]
        win = 0.5 * (1.0 + np.cos(np.pi * t / (half_width + 1)))
        h = np.sinc(t) * win * amps[sl, None]
        idx = base[sl, None] + k[None, :] + half_width
        np.add.at(out, idx.ravel(), h.ravel())
    return out[half_width:half_width + length]


def simulate_rir(
    room: RoomSpec,
    source,
    mic,
    absorption: float,
    order_limit: int | None = None,
    sample_rate: int = 16000,
    length: int | None = None,
    fractional: bool = False,
    highpass: bool = True,
) -> np.ndarray:
    """Image-method impulse response from ``source`` to one ``mic``.

    Each image contributes ``beta**k / (4 pi d)`` at delay ``d / c`` where
    ``beta = sqrt(1 - absorption)`` and ``k`` counts wall reflections.
    ``highpass`` applies the Allen-Berkley DC-removal filter to the
    reflections; without it the all-positive image taps pile up at low
    frequency and lengthen the decay.
    """
    return simulate_rirs(room, [source], [mic], absorption, order_limit, sample_rate,
                         length, fractional, highpass).taps[0, 0]


def default_rir_length(room: RoomSpec, absorption: float, sample_rate: int, max_direct: float) -> int:
    """Long enough for image energy to fall 60 dB below the direct path."""
    if absorption >= 1.0:
        return int(math.ceil(max_direct / SPEED_OF_SOUND * sample_rate)) + 2
    # energy per reflection is (1 - alpha); mean free path 4V/S
    t60 = 0.161 * room.volume / (-room.surface * math.log1p(-absorption))
    return int(math.ceil((1.1 * t60 + max_direct / SPEED_OF_SOUND) * sample_rate))


def _check_inside(room: RoomSpec, p, what: str):
    p = np.asarray(p, float)
    if np.any(p <= 0) or np.any(p >= room.dims):
        raise ValueError(f"{what} {tuple(p)} is not strictly inside the room")
    return p


def simulate_rirs(
    room: RoomSpec,
    sources,
    mics,
    absorption: float,
    order_limit: int | None = None,
    sample_rate: int = 16000,
    length: int | None = None,
    fractional: bool = False,
    highpass: bool = True,
) -> Rir:
    sources = [_check_inside(room, s, "source") for s in sources]
    mics = [_check_inside(room, m, "mic") for m in mics]
    if not 0.0 < absorption <= 1.0:
        raise ValueError(f"absorption must be in (0, 1], got {absorption}")
    dists = np.array([[np.linalg.norm(s - m) for m in mics] for s in sources])
    if np.any(dists < 1e-9):
        raise ValueError("source coincides with a microphone")
    if length is None:
        length = default_rir_length(room, absorption, sample_rate, float(dists.max()))
    beta = math.sqrt(1.0 - absorption)
    if beta == 0.0:
        order_limit = 0
    max_d = length / sample_rate * SPEED_OF_SOUND
    mic_arr = np.array(mics)
    centroid = mic_arr.mean(axis=0)
    spread = float(np.max(np.linalg.norm(mic_arr - centroid, axis=1)))

    shape = (len(sources), len(mics), length)
    direct_taps = np.zeros(shape)
    reflected = np.zeros(shape)
    direct = np.zeros(shape[:2], dtype=int)

    def render(delay, amp):
        if fractional:
            return _sinc_taps(delay, amp, length)
        idx = np.rint(delay).astype(int)
        ok = idx < length
        return np.bincount(idx[ok], weights=amp[ok], minlength=length)[:length]

    for si, s in enumerate(sources):
        pos, refl = image_sources(room.dims, s, max_d + spread, centroid, order_limit)
        gain = beta ** refl.astype(float)
        is_direct = refl == 0
        for mi, m in enumerate(mics):
            d = np.linalg.norm(pos - m, axis=1)
            delay = d / SPEED_OF_SOUND * sample_rate
            amp = gain / (4.0 * np.pi * d)
            direct[si, mi] = int(round(dists[si, mi] / SPEED_OF_SOUND * sample_rate))
            direct_taps[si, mi] = render(delay[is_direct], amp[is_direct])
            reflected[si, mi] = render(delay[~is_direct], amp[~is_direct])
    if highpass:
        # only the reflections pile up at DC; filtering the direct pulse would
        # leave a ringing tail that swamps weak reverberation
        sos = butter(2, HIGHPASS_HZ, btype="high", fs=sample_rate, output="sos")
        reflected = sosfilt(sos, reflected, axis=-1)
    return Rir(direct_taps + reflected, sample_rate, direct)


def schroeder_t60(rir: np.ndarray, sample_rate: int, fit_range=(-5.0, -25.0),
                  band: tuple | None = None) -> float:
    """T60 from a linear fit to the backward-integrated energy decay curve.

    ``band`` optionally band-passes the response first, as in octave-band
    reverberation measurements.
    """
    rir = np.asarray(rir, float)
    if band is not None:
        rir = sosfilt(butter(2, band, btype="bandpass", fs=sample_rate, output="sos"), rir)
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise ValueError("impulse response has no energy")
    edc = 10.0 * np.log10(np.maximum(energy / energy[0], 1e-300))
    hi, lo = fit_range
    start = int(np.argmax(edc <= hi))
    stop = int(np.argmax(edc <= lo))
    if stop <= start + 1:
        raise ValueError("decay curve too short for the fit range")
    t = np.arange(start, stop) / sample_rate
    slope, _ = np.polyfit(t, edc[start:stop], 1)
    return -60.0 / slope


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def sample_scene(
    seed,
    n_sources: int = 2,
    room_min=ROOM_MIN,
    room_max=ROOM_MAX,
    t60_range=T60_RANGE,
    distance_range=(0.5, 2.5),
    max_tries: int = 1000,
) -> SceneSpec:
    """Draw a room, a 6-mic circular array and coplanar sources.

    The azimuth difference of the first two sources is drawn bucket-first so
    the bucket mix follows ``BUCKET_WEIGHTS``; further sources get free
    azimuths.  Placement is rejection-sampled against the wall margin.
    """
    if n_sources < 1:
        raise ValueError("need at least one source")
    rng = np.random.default_rng(seed)
    room = RoomSpec(*(_uniform(rng, lo, hi) for lo, hi in zip(room_min, room_max)),
                    t60=_uniform(rng, *t60_range))
    dims = room.dims
    bucket = int(rng.choice(len(BUCKET_WEIGHTS), p=BUCKET_WEIGHTS))
    diff = math.radians(_uniform(rng, BUCKET_EDGES[bucket], BUCKET_EDGES[bucket + 1]))
    radius = ArrayGeometry(center=(0, 0, 0)).radius

    for _ in range(max_tries):
        lo = WALL_MARGIN + radius
        center = np.array([_uniform(rng, lo, dims[0] - lo), _uniform(rng, lo, dims[1] - lo),
                           _uniform(rng, WALL_MARGIN, dims[2] - WALL_MARGIN)])
        az0 = _uniform(rng, -np.pi, np.pi)
        azimuths = [az0]
        if n_sources >= 2:
            azimuths.append(az0 + diff * (1.0 if rng.random() < 0.5 else -1.0))
        azimuths += [_uniform(rng, -np.pi, np.pi) for _ in range(n_sources - 2)]
        positions = []
        for az in azimuths:
            r = _uniform(rng, *distance_range)
            positions.append(center + r * np.array([math.cos(az), math.sin(az), 0.0]))
        pts = np.array(positions)
        if np.all(pts > WALL_MARGIN) and np.all(pts < dims - WALL_MARGIN):
            return SceneSpec(room, ArrayGeometry(center=tuple(center)),
                             tuple(tuple(p) for p in pts), seed=_seed_int(seed))
    raise SceneSamplingError(f"no valid placement after {max_tries} tries (seed {seed})")


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def decay_t60(rir: Rir, band=None) -> float:
    """Median Schroeder T60 over all source/mic pairs of a scene."""
    taps = rir.taps.reshape(-1, rir.taps.shape[-1])
    return float(np.median([schroeder_t60(h, rir.sample_rate, band=band) for h in taps]))


def scene_rirs(scene: SceneSpec, sample_rate: int = 16000, formula: str = "image",
               fractional: bool = False, order_limit: int | None = None,
               highpass: bool = True) -> Rir:
    """All source-to-mic RIRs of a scene, shape ``(sources, 6, taps)``."""
    alpha = t60_to_absorption(scene.room, formula)
    return simulate_rirs(scene.room, scene.sources, scene.array.mic_positions, alpha,
                         order_limit=order_limit, sample_rate=sample_rate,
                         fractional=fractional, highpass=highpass)


def ensemble_t60(rir_list, band=None) -> float:
    """Schroeder T60 of the energy envelope averaged over many responses.

    ``rir_list`` holds :class:`Rir` objects; every response is normalised to
    unit energy before averaging.  Short decays have too few reflections in
    the fit window for a single response to give a stable estimate.
    """
    rir_list = list(rir_list)
    sample_rate = rir_list[0].sample_rate
    acc = np.zeros(max(r.taps.shape[-1] for r in rir_list))
    for r in rir_list:
        taps = r.taps.reshape(-1, r.taps.shape[-1])
        if band is not None:
            taps = sosfilt(butter(2, band, btype="bandpass", fs=sample_rate, output="sos"), taps, axis=-1)
        e = taps ** 2
        acc[:e.shape[1]] += (e / e.sum(axis=1, keepdims=True)).sum(axis=0)
    return schroeder_t60(np.sqrt(acc), sample_rate)


def spatialize(dry_sources, rir: Rir):
    """Convolve each dry source with its per-mic RIRs.

    Returns the mixture and the per-source reverberant images, both truncated
    to the dry-source length; the mixture is the exact sum of the images.
    """
    dry = [s if isinstance(s, MultichannelWaveform) else MultichannelWaveform(s, rir.sample_rate)
           for s in dry_sources]
    if any(s.sample_rate != rir.sample_rate for s in dry):
        raise ValueError("dry source sample rate does not match the RIR sample rate")
    if len(dry) != rir.taps.shape[0]:
        raise ValueError(f"{len(dry)} dry sources for {rir.taps.shape[0]} simulated sources")
    length = min(s.length for s in dry)
    images = []
    for s, taps in zip(dry, rir.taps):
        x = s.channel(0)[:length]
        img = fftconvolve(x[None, :], taps, axes=1)[:, :length]
        images.append(MultichannelWaveform(img, rir.sample_rate))
    mix = np.sum([im.samples for im in images], axis=0)
    return MultichannelWaveform(mix, rir.sample_rate), images
