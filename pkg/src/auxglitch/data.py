"""Channel storage, normalization, sampling, windows, synthetic generation.

The on-disk channel format is little-endian binary: magic ``AUXC``, u32
version (1), u32 channel count P, u32 sample count N, f64 sample rate, i64
epoch seconds, then P*N float32 samples channel-major. Event lists are
plain text, one time in seconds per line, ``#`` comments allowed.

All in-memory math is float64; float32 appears only in file payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .layers import DTYPE

STORE_MAGIC = b"AUXC"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIIdq")

NEGATIVE_EXCLUSION_S = 2.0      # glitch-free points stay this far from events
SIGMA_FLOOR = 1e-12             # below this a channel counts as constant


class StoreFormatError(ValueError):
    """Bad magic, version, or truncation in a channel store file."""


class CapacityError(ValueError):
    """Not enough admissible time to draw the requested samples."""


class WindowError(ValueError):
    """Requested window does not fit inside the store."""


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class ChannelStore:
    """P channels sampled at one rate, starting at an integer epoch."""

    samples: np.ndarray          # [P, N] float64
    sample_rate: float
    epoch: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=DTYPE)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be [channels, samples], got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("store contains non-finite samples")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    def time_to_index(self, t: float) -> int:
        return int(round((t - self.epoch) * self.sample_rate))


@dataclass
class EventList:
    """Strictly increasing event times in seconds."""

    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=DTYPE)
        if self.times.ndim != 1:
            raise ValueError("event times must be one-dimensional")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("event times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size

    def within(self, t0: float, t1: float) -> np.ndarray:
        return self.times[(self.times >= t0) & (self.times < t1)]


@dataclass
class NormStats:
    """Per-channel training mean/std; constant channels get std clamped to 1."""

    mean: np.ndarray
    std: np.ndarray
    floor: float = SIGMA_FLOOR

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "floor": self.floor}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=DTYPE),
                   np.asarray(d["std"], dtype=DTYPE), float(d.get("floor", SIGMA_FLOOR)))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _range_indices(store: ChannelStore, time_range) -> tuple:
    t0, t1 = time_range
    i0 = max(0, int(np.ceil((t0 - store.epoch) * store.sample_rate)))
    i1 = min(store.n_samples, int(np.ceil((t1 - store.epoch) * store.sample_rate)))
    return i0, i1


def compute_norm_stats(store: ChannelStore, train_range) -> NormStats:
    """Mean/std per channel over the training range only."""
    i0, i1 = _range_indices(store, train_range)
    if i1 <= i0:
        raise ValueError(f"empty training range {train_range}")
    block = store.samples[:, i0:i1]
    mean = block.mean(axis=1)
    std = block.std(axis=1)
    constant = std < SIGMA_FLOOR
    if constant.any():
        # constant channels normalize to all-zero instead of exploding
        mean = mean.copy()
        std = std.copy()
        std[constant] = 1.0
    return NormStats(mean, std)


def apply_norm(store: ChannelStore, stats: NormStats,
               inplace: bool = False) -> ChannelStore:
    """Subtract the training mean and divide by the std, for all data."""
    if stats.mean.shape != (store.n_channels,):
        raise ValueError("stats do not match the store's channel count")
    if inplace:
        store.samples -= stats.mean[:, None]
        store.samples /= stats.std[:, None]
        return store
    samples = (store.samples - stats.mean[:, None]) / stats.std[:, None]
    return ChannelStore(samples, store.sample_rate, store.epoch)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

def _window_start(store: ChannelStore, t: float, window_len: int) -> int:
    center = store.time_to_index(t)
    return center - (window_len + 1) // 2 + 1


def extract_window(store: ChannelStore, t: float, window_len: int) -> np.ndarray:
    """[P, window_len] block centered on t (left-biased for even lengths)."""
    if window_len < 1 or window_len > store.n_samples:
        raise WindowError(f"window length {window_len} does not fit the store")
    start = _window_start(store, t, window_len)
    if start < 0 or start + window_len > store.n_samples:
        raise WindowError(
            f"window at t={t} spans samples [{start}, {start + window_len}) "
            f"outside the store [0, {store.n_samples})"
        )
    return store.samples[:, start:start + window_len].copy()


@dataclass
class WindowedDataset:
    """(time, label, window) samples; windows extracted lazily from the store."""

    store: ChannelStore
    times: np.ndarray
    labels: np.ndarray           # values in {-1, +1}
    window_len: int
    provenance: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=DTYPE)
        if self.times.shape != self.labels.shape:
            raise ValueError("times and labels must align")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        starts = np.array([_window_start(self.store, t, self.window_len)
                           for t in self.times], dtype=np.int64)
        if self.times.size and (starts.min() < 0
                                or starts.max() + self.window_len > self.store.n_samples):
            raise WindowError("a sample's window falls outside the store")
        self._starts = starts

    def __len__(self) -> int:
        return self.times.size

    def windows(self, indices=None) -> np.ndarray:
        """[k, P, window_len] float64 window stack."""
        starts = self._starts if indices is None else self._starts[indices]
        cols = starts[:, None] + np.arange(self.window_len)[None, :]
        return self.store.samples[:, cols].transpose(1, 0, 2)

    def window(self, i: int) -> np.ndarray:
        return self.windows(np.array([i]))[0]


@dataclass
class DatasetBundle:
    train: WindowedDataset
    val_early: WindowedDataset   # small in-training validation batch
    val_rank: WindowedDataset    # larger batch that ranks grid settings
    test: WindowedDataset


@dataclass(frozen=True)
class DatasetCounts:
    """Positive-sample counts per dataset; None keeps every event."""

    train: Optional[int] = None
    val_early: int = 64
    val_rank: int = 256
    test: Optional[int] = None


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _admissible_intervals(events: np.ndarray, lo: float, hi: float,
                          exclusion: float) -> list:
    intervals = []
    cursor = lo
    for e in events:
        left, right = e - exclusion, e + exclusion
        if right <= lo or left >= hi:
            continue
        if left > cursor:
            intervals.append((cursor, left))
        cursor = max(cursor, right)
    if cursor < hi:
        intervals.append((cursor, hi))
    return intervals


def sample_negatives(events: EventList, time_range, count: int,
                     rng: np.random.Generator, *,
                     edge_margin: float = 0.0,
                     exclusion: float = NEGATIVE_EXCLUSION_S) -> np.ndarray:
    """Uniform glitch-free times: > ``exclusion`` seconds from every event
    and at least ``edge_margin`` from the range edges."""
    t0, t1 = time_range
    lo, hi = t0 + edge_margin, t1 - edge_margin
    intervals = _admissible_intervals(events.times, lo, hi, exclusion) if hi > lo else []
    lengths = np.array([b - a for a, b in intervals], dtype=DTYPE)
    capacity = float(lengths.sum()) if intervals else 0.0
    if capacity <= 0.0:
        raise CapacityError(
            f"no admissible glitch-free time in {time_range} "
            f"(capacity {capacity:.6g} s for {count} samples)"
        )
    edges = np.concatenate([[0.0], np.cumsum(lengths)])
    u = rng.uniform(0.0, capacity, size=count)
    which = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(intervals) - 1)
    starts = np.array([intervals[i][0] for i in which])
    return starts + (u - edges[which])


def build_datasets(store: ChannelStore, events: EventList, ranges: dict,
                   window_len: int, counts: DatasetCounts,
                   rng: np.random.Generator) -> DatasetBundle:
    """Balanced train/验val/test windows from disjoint time ranges.

    Positives are event times inside each range (subsampled to the requested
    count); negatives are an equal number of admissible glitch-free times.
    The validation range yields two disjoint positive sets: the small
    in-training batch and the larger ranking batch.
    """
    names = ("train", "val", "test")
    for name in names:
        if name not in ranges:
            raise ValueError(f"missing range {name!r}")
    spans = [tuple(map(float, ranges[n])) for n in names]
    for a in range(3):
        for b in range(a + 1, 3):
            lo = max(spans[a][0], spans[b][0])
            hi = min(spans[a][1], spans[b][1])
            if lo < hi:
                raise ValueError(
                    f"ranges {names[a]} and {names[b]} overlap on [{lo}, {hi})")

    margin = window_len / store.sample_rate / 2.0

    def positives(span, want):
        t0, t1 = span
        pool = events.within(t0 + margin, t1 - margin)
        if want is None:
            return pool
        if pool.size < want:
            raise ValueError(
                f"range {span} holds {pool.size} usable events, need {want}")
        picked = rng.choice(pool.size, size=want, replace=False)
        return np.sort(pool[picked])

    def make(span, pos, provenance):
        neg = sample_negatives(events, span, pos.size, rng, edge_margin=margin)
        times = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(pos.size), -np.ones(neg.size)])
        return WindowedDataset(store, times, labels, window_len, provenance)

    train = make(spans[0], positives(spans[0], counts.train), "train")

    n_val = counts.val_early + counts.val_rank
    val_pos = positives(spans[1], n_val)
    order = rng.permutation(n_val)
    val_early = make(spans[1], np.sort(val_pos[order[:counts.val_early]]), "val_early")
    val_rank = make(spans[1], np.sort(val_pos[order[counts.val_early:]]), "val_rank")

    test = make(spans[2], positives(spans[2], counts.test), "test")
    return DatasetBundle(train, val_early, val_rank, test)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

PATTERN_KINDS = ("spike", "step", "damped_sine", "xor_pair")


@dataclass(frozen=True)
class PatternSpec:
    """One informative channel (or xor-coupled channel pair)."""

    kind: str
    channels: tuple
    width: float = 1.0           # seconds of pattern support
    lag: float = 0.0             # onset offset from the event time

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        n_expected = 2 if self.kind == "xor_pair" else 1
        if len(self.channels) != n_expected:
            raise ValueError(
                f"{self.kind} takes {n_expected} channel(s), got {self.channels}")
        if self.width <= 0:
            raise ValueError("pattern width must be positive")


@dataclass(frozen=True)
class GenConfig:
    n_channels: int
    duration: float              # seconds
    n_events: int
    rate: float = 16.0
    snr: float = 8.0             # pattern peak over noise std
    noise: str = "white"         # white | ar1
    ar_coef: float = 0.9
    min_gap: float = 5.0         # smallest spacing between events
    edge_margin: float = 10.0    # events keep clear of the store edges
    patterns: tuple = ()
    n_distractors: int = 0       # both-active background bursts per xor pair
    epoch: int = 0

    def __post_init__(self):
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.noise not in ("white", "ar1"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        used = [c for p in self.patterns for c in p.channels]
        if len(set(used)) != len(used):
            raise ValueError("a channel may carry at most one pattern")
        if used and (min(used) < 0 or max(used) >= self.n_channels):
            raise ValueError("pattern channel index out of range")

    def informative_channels(self) -> list:
        return sorted(c for p in self.patterns for c in p.channels)


def _pattern_template(kind: str, width: float, rate: float) -> np.ndarray:
    """Unit-peak pattern sampled at the store rate."""
    n = max(int(round(width * rate)), 2)
    tau = np.arange(n) / rate
    if kind == "spike":
        center = (n - 1) / 2.0 / rate
        return np.exp(-0.5 * ((tau - center) / (width / 6.0)) ** 2)
    if kind in ("step", "xor_pair"):
        return np.ones(n)        # sustained level shift
    if kind == "damped_sine":
        wave = np.sin(2.0 * np.pi * (4.0 / width) * tau) * np.exp(-3.0 * tau / width)
        return wave / np.abs(wave).max()
    raise ValueError(f"unknown pattern kind {kind!r}")


def _place(channel_row: np.ndarray, template: np.ndarray, center_t: float,
           rate: float, epoch: int, amplitude: float) -> None:
    start = int(round((center_t - epoch) * rate)) - template.size // 2
    lo = max(start, 0)
    hi = min(start + template.size, channel_row.size)
    if hi <= lo:
        return
    channel_row[lo:hi] += amplitude * template[lo - start:hi - start]


def _spaced_times(rng, n, lo, hi, min_gap):
    span = hi - lo
    slack = span - (n - 1) * min_gap
    if n < 1 or slack <= 0:
        raise ValueError(
            f"cannot place {n} events with gap {min_gap} in {span:.1f} s")
    u = np.sort(rng.uniform(0.0, slack, size=n))
    return lo + u + np.arange(n) * min_gap


def synth_generate(cfg: GenConfig, rng: np.random.Generator):
    """Noise store with planted patterns at event times.

    Returns ``(store, events, meta)``; meta records the ground-truth
    informative channels, per-event xor choices, and distractor times.
    xor_pair patterns activate exactly one of their two channels per event
    (uniform choice) and, when ``n_distractors`` > 0, both channels together
    at background times. SNR scales the pattern peak relative to the noise
    standard deviation; snr=0 produces pure noise.
    """
    n = int(round(cfg.duration * cfg.rate))
    noise = rng.standard_normal((cfg.n_channels, n))
    if cfg.noise == "ar1":
        noise = lfilter([1.0], [1.0, -cfg.ar_coef], noise, axis=1)
        noise_std = 1.0 / np.sqrt(1.0 - cfg.ar_coef**2)
    else:
        noise_std = 1.0
    store = ChannelStore(noise, cfg.rate, cfg.epoch)

    lo = cfg.epoch + cfg.edge_margin
    hi = cfg.epoch + cfg.duration - cfg.edge_margin
    event_times = _spaced_times(rng, cfg.n_events, lo, hi, cfg.min_gap)
    amplitude = cfg.snr * noise_std

    xor_choices = {}
    distractors = {}
    for pat in cfg.patterns:
        template = _pattern_template(pat.kind, pat.width, cfg.rate)
        if pat.kind == "xor_pair":
            pick = rng.integers(0, 2, size=event_times.size)
            xor_choices[pat.channels] = pick
            for t, side in zip(event_times, pick):
                _place(store.samples[pat.channels[side]], template,
                       t + pat.lag, cfg.rate, cfg.epoch, amplitude)
            if cfg.n_distractors > 0:
                clearance = NEGATIVE_EXCLUSION_S + pat.width
                spots = _background_times(rng, event_times, lo, hi,
                                          cfg.n_distractors, clearance, pat.width)
                distractors[pat.channels] = spots
                for t in spots:
                    for ch in pat.channels:
                        _place(store.samples[ch], template, t,
                               cfg.rate, cfg.epoch, amplitude)
        else:
            for t in event_times:
                _place(store.samples[pat.channels[0]], template,
                       t + pat.lag, cfg.rate, cfg.epoch, amplitude)

    meta = {
        "informative_channels": cfg.informative_channels(),
        "n_events": int(event_times.size),
        "noise_std": noise_std,
        "snr": cfg.snr,
        "xor_choices": {str(k): v.tolist() for k, v in xor_choices.items()},
        "distractor_times": {str(k): list(map(float, v))
                             for k, v in distractors.items()},
    }
    return store, EventList(event_times), meta


def _background_times(rng, events, lo, hi, count, clearance, min_sep):
    """Times away from every event, pairwise separated; greedy and seeded."""
    accepted = []
    attempts = 0
    while len(accepted) < count and attempts < 200 * count:
        attempts += 1
        t = rng.uniform(lo, hi)
        if np.abs(events - t).min() <= clearance:
            continue
        if accepted and np.abs(np.array(accepted) - t).min() <= min_sep:
            continue
        accepted.append(t)
    if len(accepted) < count:
        raise CapacityError(
            f"placed only {len(accepted)}/{count} background bursts")
    return np.sort(np.array(accepted))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_store(path, store: ChannelStore) -> None:
    """Binary channel store; samples down-convert to float32."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION,
                              store.n_channels, store.n_samples,
                              store.sample_rate, store.epoch))
        for p in range(store.n_channels):
            fh.write(store.samples[p].astype("<f4").tobytes())


def read_store(path) -> ChannelStore:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise StoreFormatError("truncated store header")
        magic, version, n_channels, n_samples, rate, epoch = _HEADER.unpack(header)
        if magic != STORE_MAGIC:
            raise StoreFormatError(f"bad magic {magic!r}")
        if version != STORE_VERSION:
            raise StoreFormatError(f"unsupported store version {version}")
        samples = np.empty((n_channels, n_samples), dtype=DTYPE)
        row_bytes = 4 * n_samples
        for p in range(n_channels):
            raw = fh.read(row_bytes)
            if len(raw) != row_bytes:
                raise StoreFormatError(
                    f"truncated store payload at channel {p}")
            samples[p] = np.frombuffer(raw, dtype="<f4")
        if fh.read(1):
            raise StoreFormatError("trailing bytes after store payload")
    return ChannelStore(samples, rate, int(epoch))


def write_events(path, events: EventList) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# event peak times, seconds\n")
        for t in events.times:
            fh.write(f"{t!r}\n")


def read_events(path) -> EventList:
    times = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            text = line.split("#", 1)[0].strip()
            if text:
                times.append(float(text))
    return EventList(np.array(times))
