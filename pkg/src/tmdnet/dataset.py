"""Class schemes, splits, segmentation, padding, batching and synthetic data."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

RAW_MODES = ("walk", "bike", "bus", "car", "taxi", "train", "subway")
DROP = None
PAD_MODES = ("zero", "reflection", "wrapping")


@dataclass
class Segment:
    data: np.ndarray  # [C, L]
    true_length: int
    class_id: int
    tripleg_id: str | int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValidationError(f"segment data must be [channels, length], got {self.data.shape}")
        if not 1 <= self.true_length <= self.data.shape[1]:
            raise ValidationError(
                f"true_length {self.true_length} outside [1, {self.data.shape[1]}]")

    @property
    def length(self) -> int:
        return self.data.shape[1]


# class schemes --------------------------------------------------------------

@dataclass(frozen=True)
class ClassScheme:
    name: str
    mapping: dict
    class_names: tuple

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def class_scheme(name: str) -> ClassScheme:
    """The 4/5/6/7-class GeoLife schemes.

    7: every raw mode; 6: taxi merged into car; 5: 6 plus subway merged into
    train; 4: 6 without the rail modes.
    """
    key = str(name).split("-")[0]
    if key == "7":
        names = RAW_MODES
        mapping = {m: i for i, m in enumerate(names)}
    elif key == "6":
        names = ("walk", "bike", "bus", "car", "train", "subway")
        mapping = {m: names.index(m) for m in names} | {"taxi": names.index("car")}
    elif key == "5":
        names = ("walk", "bike", "bus", "car", "train")
        mapping = {m: names.index(m) for m in names} | {"taxi": 3, "subway": 4}
    elif key == "4":
        names = ("walk", "bike", "bus", "car")
        mapping = {m: names.index(m) for m in names} | {"taxi": 3, "train": DROP, "subway": DROP}
    else:
        raise ValidationError(f"unknown class scheme {name!r}")
    return ClassScheme(f"{key}-class", mapping, names)


def map_classes(mode: str, scheme: ClassScheme):
    """Class id for a raw mode, or None (DROP) when the scheme removes it."""
    if mode not in scheme.mapping:
        raise ValidationError(f"unknown transport mode {mode!r}")
    return scheme.mapping[mode]


# splits ---------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.64, 0.16, 0.20)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(not 0 <= f <= 1 for f in self.fractions):
            raise ValidationError(f"split fractions {self.fractions} must be three values in [0, 1]")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions {self.fractions} must sum to 1")


def set_sizes(n: int, fractions) -> tuple[int, int, int]:
    """Floor of each share, leftovers to the largest remainders (earlier set on ties).

    Every size is within one element of its exact share.
    """
    exact = [f * n for f in fractions]
    sizes = [int(math.floor(x + 1e-9)) for x in exact]
    rest = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in rest[:n - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


def split_by_tripleg(triplegs: list, spec: SplitSpec) -> tuple[list, list, list]:
    if not triplegs:
        raise ValidationError("cannot split an empty tripleg list")
    n = len(triplegs)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train, n_val, _ = set_sizes(n, spec.fractions)
    sets = ([triplegs[i] for i in order[:n_train]],
            [triplegs[i] for i in order[n_train:n_train + n_val]],
            [triplegs[i] for i in order[n_train + n_val:]])
    for name, s in zip(("train", "val", "test"), sets):
        if not s:
            log.warning("%s set is empty", name)
    return sets


def chronological_split(segments: list, val_fraction: float = 0.2) -> tuple[list, list]:
    """First floor(val_fraction * n) items go to validation, the rest to training."""
    n_val = int(math.floor(val_fraction * len(segments) + 1e-9))
    return list(segments[:n_val]), list(segments[n_val:])


# segmentation and padding ---------------------------------------------------

def cut_segments(series, max_len: int = 1024, min_len: int = 10, class_id: int = 0,
                 tripleg_id=0, channels=None) -> list[Segment]:
    """Non-overlapping windows of ``max_len``; the remainder becomes a short segment."""
    if max_len < 1:
        raise ValidationError("max_len must be >= 1")
    data = series.matrix(channels) if hasattr(series, "matrix") else np.asarray(series)
    total = data.shape[1]
    out = []
    for start in range(0, total, max_len):
        chunk = data[:, start:start + max_len]
        if chunk.shape[1] < min_len:
            continue
        out.append(Segment(chunk.copy(), chunk.shape[1], class_id, tripleg_id))
    return out


def pad_array(x: np.ndarray, true_length: int, target_len: int, mode: str) -> np.ndarray:
    """Pad the first ``true_length`` columns of ``x`` [C, *] out to ``target_len``."""
    if target_len < true_length:
        raise ValidationError(f"target length {target_len} shorter than true length {true_length}")
    core = x[:, :true_length]
    if target_len == true_length:
        return core.copy()
    if mode == "zero":
        out = np.zeros((x.shape[0], target_len), dtype=x.dtype)
        out[:, :true_length] = core
        return out
    if mode == "wrapping":
        return core[:, np.arange(target_len) % true_length]
    if mode == "reflection":
        # ping-pong: forward, reversed, forward, ...
        period = 2 * true_length
        pos = np.arange(target_len) % period
        idx = np.where(pos < true_length, pos, period - 1 - pos)
        return core[:, idx]
    raise ValidationError(f"unknown padding mode {mode!r}")


def pad_segment(segment: Segment, target_len: int, mode: str) -> Segment:
    return Segment(pad_array(segment.data, segment.true_length, target_len, mode),
                   segment.true_length, segment.class_id, segment.tripleg_id)


@dataclass
class Batch:
    data: np.ndarray  # [B, C, T_max]
    labels: np.ndarray
    true_lengths: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def collate(segments: list[Segment], pad_mode: str, indices=None, dtype=np.float64,
            length: int | None = None) -> Batch:
    """Pad every member to the longest true length (or ``length``) and stack."""
    t_max = length if length is not None else max(s.true_length for s in segments)
    data = np.stack([pad_array(s.data, s.true_length, t_max, pad_mode) for s in segments]).astype(dtype)
    return Batch(data,
                 np.array([s.class_id for s in segments], dtype=np.int64),
                 np.array([s.true_length for s in segments], dtype=np.int64),
                 np.asarray(indices if indices is not None else np.arange(len(segments)), dtype=np.int64))


def make_batches(segments: list[Segment], batch_size: int, pad_mode: str, rng=None,
                 dtype=np.float64, length: int | None = None) -> list[Batch]:
    """Shuffle (when ``rng`` is given), chunk and pad each chunk to its longest member."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if not segments:
        return []
    order = rng.permutation(len(segments)) if rng is not None else np.arange(len(segments))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batches.append(collate([segments[i] for i in idx], pad_mode, idx, dtype, length))
    return batches


def class_weights(train_set: list[Segment], n_classes: int) -> np.ndarray:
    """w_c = N / (K * n_c)."""
    counts = np.bincount([s.class_id for s in train_set], minlength=n_classes).astype(np.float64)
    return weights_from_counts(counts)


def weights_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValidationError(f"class {int(missing[0])} has no training segments")
    return counts.sum() / (len(counts) * counts)


# synthetic data -------------------------------------------------------------

@dataclass(frozen=True)
class ClassRegime:
    mode: str
    mean_speed: float
    speed_std: float
    stop_rate: float = 0.0


DEFAULT_REGIMES = (
    ClassRegime("walk", 1.4, 0.4, 0.002),
    ClassRegime("bike", 4.5, 1.0, 0.002),
    ClassRegime("bus", 9.0, 1.5, 0.004),
    ClassRegime("car", 16.0, 2.5, 0.002),
)


@dataclass(frozen=True)
class SynthSpec:
    regimes: tuple = DEFAULT_REGIMES
    n_per_class: int = 100
    length_range: tuple = (100, 1024)
    noise: float = 1.0
    ar_coef: float = 0.8
    stop_duration: float = 10.0
    period: float = 2.0


def synth_series(regime: ClassRegime, length: int, spec: SynthSpec, rng) -> np.ndarray:
    """Speed/acceleration channels [2, length] for one synthetic tripleg.

    Speed is the regime mean plus noise-scaled AR(1) fluctuations of the regime
    std, with stop episodes (speed 0) started at ``stop_rate`` per step. With
    ``noise == 0`` the series is the constant regime mean.
    """
    speed = np.full(length, float(regime.mean_speed))
    if spec.noise > 0:
        phi = spec.ar_coef
        innov = rng.normal(0.0, regime.speed_std * math.sqrt(1 - phi * phi), size=length)
        e = np.empty(length)
        e[0] = rng.normal(0.0, regime.speed_std)
        for i in range(1, length):
            e[i] = phi * e[i - 1] + innov[i]
        speed = speed + spec.noise * e
        starts = np.flatnonzero(rng.random(length) < regime.stop_rate * spec.noise)
        for s in starts:
            speed[s:s + 1 + int(rng.geometric(1.0 / spec.stop_duration))] = 0.0
        speed = np.maximum(speed, 0.0)
    accel = np.diff(speed) / spec.period
    accel = np.append(accel, accel[-1] if accel.size else 0.0)
    return np.stack([speed, accel])


def validate_synth(spec: SynthSpec) -> None:
    if len(spec.regimes) < 2:
        raise ValidationError("a synthetic spec needs at least 2 classes")
    keys = [(r.mean_speed, r.speed_std, r.stop_rate) for r in spec.regimes]
    if len(set(keys)) != len(keys):
        raise ValidationError("synthetic class regimes must be distinct")
    lo, hi = spec.length_range
    if not 1 <= lo <= hi:
        raise ValidationError(f"invalid length range {spec.length_range}")


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> list[Segment]:
    """Class-separable variable-length segments, interleaved by class."""
    validate_synth(spec)
    rng = np.random.default_rng(seed)
    lo, hi = spec.length_range
    out = []
    for i in range(spec.n_per_class):
        for c, regime in enumerate(spec.regimes):
            length = int(rng.integers(lo, hi + 1))
            out.append(Segment(synth_series(regime, length, spec, rng), length, c,
                               f"synth-{c}-{i}"))
    return out
