"""Datasets of I/Q frames, label statistics, replay queues and scenario samplers."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DivergenceUndefinedError,
    EmptyInputError,
    FormatError,
    LabelError,
    LengthError,
    StratificationError,
)
from .signal import (
    AWGN,
    FRAME_LENGTH,
    SNR_GRID,
    ImpairmentSpec,
    ModulationScheme,
    NoiseModel,
    SignalFrame,
    frame_rng,
    synthesize_frame,
)

ALL_SCHEMES = tuple(int(s) for s in ModulationScheme)
_GRID = np.array(SNR_GRID)


@dataclass(eq=False)
class Dataset:
    """Frames stored column-wise.

    ``iq`` is ``(N, 2, L)`` float32, ``labels`` and ``snr_db`` are int arrays of
    length ``N``.  Labels index into ``schemes`` (the modulation ordinals the
    dataset was generated from), so ``labels < class_count`` always holds.
    """

    iq: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    class_count: int
    schemes: tuple[int, ...] = ()
    snrs: tuple[int, ...] = SNR_GRID
    seed: int | None = None
    clean: np.ndarray | None = None

    def __post_init__(self):
        self.iq = np.asarray(self.iq, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.snr_db = np.asarray(self.snr_db, dtype=np.int64).reshape(-1)
        n = len(self.labels)
        if self.iq.size == 0 and self.iq.ndim != 3:
            self.iq = self.iq.reshape(0, 2, FRAME_LENGTH)
        if self.iq.ndim != 3 or self.iq.shape[0] != n or self.iq.shape[1] != 2 or len(self.snr_db) != n:
            raise LengthError(
                f"inconsistent dataset arrays: iq {self.iq.shape}, labels {n}, snr {len(self.snr_db)}"
            )
        if not self.schemes:
            self.schemes = tuple(range(self.class_count))
        self.schemes = tuple(int(s) for s in self.schemes)
        self.snrs = tuple(int(s) for s in self.snrs)
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise LabelError(f"labels must lie in [0, {self.class_count})")
        if n and not np.isin(self.snr_db, _GRID).all():
            raise ConfigurationError("every snr_db must lie on the 2 dB grid -20..18")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def frame_length(self) -> int:
        return self.iq.shape[2]

    @property
    def frames(self) -> list[SignalFrame]:
        clean = self.clean if self.clean is not None else [None] * len(self)
        return [
            SignalFrame(self.iq[i], int(self.labels[i]), int(self.snr_db[i]), clean[i])
            for i in range(len(self))
        ]

    @classmethod
    def from_frames(cls, frames: Sequence[SignalFrame], class_count: int, **meta) -> "Dataset":
        frames = list(frames)
        length = meta.pop("frame_length", FRAME_LENGTH)
        if not frames:
            return cls(np.zeros((0, 2, length), np.float32), [], [], class_count, **meta)
        clean = None
        if all(f.clean is not None for f in frames):
            clean = np.stack([f.clean for f in frames]).astype(np.float32)
        return cls(
            np.stack([f.iq for f in frames]),
            [f.label for f in frames],
            [f.snr_db for f in frames],
            class_count,
            clean=clean,
            **meta,
        )

    def _meta(self) -> dict:
        return dict(class_count=self.class_count, schemes=self.schemes, snrs=self.snrs, seed=self.seed)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        clean = None if self.clean is None else self.clean[index]
        return Dataset(self.iq[index], self.labels[index], self.snr_db[index], clean=clean, **self._meta())

    def empty(self) -> "Dataset":
        return self.subset(np.zeros(0, dtype=np.int64))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.class_count != self.class_count or other.frame_length != self.frame_length:
            raise LengthError("cannot concatenate datasets with different class counts or frame lengths")
        clean = None
        if self.clean is not None and other.clean is not None:
            clean = np.concatenate([self.clean, other.clean])
        return Dataset(
            np.concatenate([self.iq, other.iq]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.snr_db, other.snr_db]),
            clean=clean,
            **self._meta(),
        )

    def same_frames(self, other: "Dataset") -> bool:
        """Frame-wise equality of payloads, labels and SNRs (metadata ignored)."""
        return (
            len(self) == len(other)
            and self.iq.shape == other.iq.shape
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.snr_db, other.snr_db)
            and np.array_equal(self.iq, other.iq)
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.labels, self.snr_db, self.iq):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    @cached_property
    def strata(self) -> dict[tuple[int, int], np.ndarray]:
        """Frame indices per (label, snr_db), each in dataset order."""
        out: dict[tuple[int, int], np.ndarray] = {}
        if not len(self):
            return out
        key = self.labels * 256 + (self.snr_db + 128)
        order = np.argsort(key, kind="stable")
        uniq, starts = np.unique(key[order], return_index=True)
        for k, idx in zip(uniq, np.split(order, starts[1:])):
            out[(int(k // 256), int(k % 256) - 128)] = idx
        return out


def concat_all(datasets: Iterable[Dataset], like: Dataset) -> Dataset:
    parts = [d for d in datasets]
    if not parts:
        return like.empty()
    out = parts[0]
    for d in parts[1:]:
        out = out.concat(d)
    return out


def generate_dataset(
    schemes: Sequence[int] = ALL_SCHEMES,
    snrs: Sequence[int] = SNR_GRID,
    frames_per_cell: int = 60,
    seed: int = 0,
    *,
    impair: ImpairmentSpec = ImpairmentSpec(),
    noise: NoiseModel = AWGN,
    length: int = FRAME_LENGTH,
    keep_clean: bool = False,
    index_offset: int = 0,
) -> Dataset:
    """Synthesize ``frames_per_cell`` frames for every (scheme, SNR) pair.

    Frame ``k`` of a cell uses the stream ``frame_rng(seed, scheme, snr,
    index_offset + k)``, so disjoint offsets give disjoint frames under one
    seed (handy for train/test splits).
    """
    schemes = tuple(int(ModulationScheme(s)) for s in schemes)
    if len(set(schemes)) != len(schemes):
        raise ConfigurationError("duplicate schemes")
    if frames_per_cell < 0:
        raise ConfigurationError("frames_per_cell must be nonnegative")
    snrs = tuple(int(s) for s in snrs)
    n = len(schemes) * len(snrs) * frames_per_cell
    iq = np.empty((n, 2, length), np.float32)
    clean = np.empty((n, 2, length), np.float32) if keep_clean else None
    labels = np.empty(n, np.int64)
    snr_col = np.empty(n, np.int64)
    i = 0
    for label, scheme in enumerate(schemes):
        for snr in snrs:
            for k in range(frames_per_cell):
                frame = synthesize_frame(
                    ModulationScheme(scheme), snr, impair, frame_rng(seed, scheme, snr, index_offset + k),
                    length=length, noise=noise,
                )
                iq[i] = frame.iq
                if clean is not None:
                    clean[i] = frame.clean
                labels[i] = label
                snr_col[i] = snr
                i += 1
    return Dataset(iq, labels, snr_col, len(schemes), schemes=schemes, snrs=snrs, seed=seed, clean=clean)


# -- label statistics ----------------------------------------------------------


@dataclass(frozen=True)
class LabelDistribution:
    """Class probabilities plus the uniformity tolerance (L-infinity, diagnostic only)."""

    probs: np.ndarray
    kappa: float = 0.05

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise LengthError("probs must be a nonempty vector")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, num_classes: int, kappa: float = 0.05) -> "LabelDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes), kappa)

    def is_near_uniform(self) -> bool:
        return float(np.abs(self.probs - 1.0 / self.probs.size).max()) <= self.kappa


def label_distribution(ds: Dataset) -> LabelDistribution:
    if not len(ds):
        raise EmptyInputError("label distribution of an empty dataset")
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    return LabelDistribution(counts / counts.sum())


def _probs(d) -> np.ndarray:
    return d.probs if isinstance(d, LabelDistribution) else np.asarray(d, dtype=np.float64)


def kl_divergence(p, q) -> float:
    """``sum p_i ln(p_i / q_i)`` in nats; zero-probability terms of ``p`` drop out."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise LengthError(f"distribution lengths differ: {p.size} vs {q.size}")
    support = p > 0
    if (q[support] == 0).any():
        raise DivergenceUndefinedError("q is zero where p is positive")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats, bounded by ln 2."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise LengthError(f"distribution lengths differ: {p.size} vs {q.size}")
    m = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m)


def js_to_uniform(counts: np.ndarray) -> float:
    """JS divergence of a label histogram to uniform; 0 for an empty histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    return js_divergence(counts / total, np.full(counts.size, 1.0 / counts.size))


def filter_by_snr(ds: Dataset, theta: int) -> Dataset:
    """Frames with ``snr_db >= theta`` (inclusive), order preserved."""
    if int(theta) not in SNR_GRID:
        raise ConfigurationError(f"theta={theta} is not on the SNR grid")
    return ds.subset(np.flatnonzero(ds.snr_db >= int(theta)))


# -- replay queue -----------------------------------------------------------------


class ReplayQueue:
    """FIFO frame store with a sample capacity and class-aware eviction.

    Inserting never evicts; :meth:`evict` trims back to ``capacity``.  Eviction
    repeatedly drops the oldest stored frame of the most frequent class (ties
    to the lowest class index).  If the queue is at or under capacity but its
    JS divergence to uniform is higher than before eviction started, removal
    continues by the same rule until it is not.
    """

    def __init__(self, capacity: int, class_count: int, frame_length: int = FRAME_LENGTH):
        if capacity < 0:
            raise ConfigurationError("queue capacity must be nonnegative")
        self.capacity = int(capacity)
        self.class_count = int(class_count)
        self._iq = np.zeros((0, 2, frame_length), np.float32)
        self._labels = np.zeros(0, np.int64)
        self._snr = np.zeros(0, np.int64)
        self._rounds = np.zeros(0, np.int64)
        self._meta: dict = {}

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def rounds(self) -> np.ndarray:
        return self._rounds.copy()

    def counts(self) -> np.ndarray:
        return np.bincount(self._labels, minlength=self.class_count)

    def divergence(self) -> float:
        return js_to_uniform(self.counts())

    def insert(self, batch: Dataset, round_index: int) -> None:
        if batch.class_count != self.class_count:
            raise LabelError("batch class count does not match the queue")
        if not self._meta:
            self._meta = dict(schemes=batch.schemes, snrs=batch.snrs, seed=batch.seed)
        self._iq = np.concatenate([self._iq, batch.iq])
        self._labels = np.concatenate([self._labels, batch.labels])
        self._snr = np.concatenate([self._snr, batch.snr_db])
        self._rounds = np.concatenate([self._rounds, np.full(len(batch), int(round_index))])

    def _dataset(self, index) -> Dataset:
        return Dataset(self._iq[index], self._labels[index], self._snr[index], self.class_count, **self._meta)

    def evict(self) -> Dataset:
        """Trim to capacity; returns removed frames in removal order."""
        n = len(self)
        if n <= self.capacity:
            return self._dataset(np.zeros(0, np.int64))
        if self.capacity == 0:
            removed = np.arange(n)
        else:
            counts = self.counts()
            start = js_to_uniform(counts)
            # oldest-first position lists per class
            per_class = [np.flatnonzero(self._labels == c) for c in range(self.class_count)]
            heads = [0] * self.class_count
            removed_list = []
            size = n
            while size > 0 and (size > self.capacity or js_to_uniform(counts) > start):
                c = int(np.argmax(counts))
                removed_list.append(per_class[c][heads[c]])
                heads[c] += 1
                counts[c] -= 1
                size -= 1
            removed = np.array(removed_list, dtype=np.int64)
        out = self._dataset(removed)
        keep = np.ones(n, bool)
        keep[removed] = False
        self._iq, self._labels = self._iq[keep], self._labels[keep]
        self._snr, self._rounds = self._snr[keep], self._rounds[keep]
        return out

    def contents(self) -> Dataset:
        """Snapshot copy in FIFO order."""
        return self._dataset(np.arange(len(self)))


# -- non-IID scenario samplers ------------------------------------------------------


class ScenarioKind(enum.Enum):
    IID = "iid"
    CLASS_IMBALANCE = "class-imb"
    VOLUME_IMBALANCE = "vol-imb"
    FEATURE_VARIANCE = "feat-var"

    @classmethod
    def parse(cls, value: "ScenarioKind | str") -> "ScenarioKind":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if text in (kind.value, kind.name.lower().replace("_", "-")):
                return kind
        raise ConfigurationError(f"unknown scenario {value!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.IID
    n: int = 1000
    feature_bounds: tuple[int, int] = (400, 600)

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind.parse(self.kind))
        lo, hi = self.feature_bounds
        if self.n <= 0 or lo <= 0 or hi < lo:
            raise ConfigurationError(f"bad scenario sizes n={self.n} bounds={self.feature_bounds}")


def draw_class_weights(class_count: int, rng: np.random.Generator) -> np.ndarray:
    """Independent U[0, 1] inclusion weight per class, renormalized to sum to 1."""
    w = rng.uniform(0.0, 1.0, class_count)
    total = w.sum()
    return w / total if total > 0 else np.full(class_count, 1.0 / class_count)


def _draw_strata(pool: Dataset, classes: np.ndarray, snrs: np.ndarray, rng: np.random.Generator) -> Dataset:
    strata = pool.strata
    out = np.empty(len(classes), np.int64)
    keys = classes * 256 + (snrs + 128)
    for key in np.unique(keys):
        pos = np.flatnonzero(keys == key)
        members = strata[(int(key // 256), int(key % 256) - 128)]
        pick = rng.choice(len(members), size=len(pos), replace=len(pos) > len(members))
        out[pos] = members[pick]
    return pool.subset(out)


def sample_scenario(
    spec: ScenarioSpec, pool: Dataset, client: int, round_index: int, rng: np.random.Generator
) -> Dataset:
    """One client's data for one round.

    ``client`` and ``round_index`` identify the draw for the caller's bookkeeping;
    all randomness comes from ``rng``, which callers key by (seed, client, round).
    Within one call a stratum is sampled without replacement while it has
    enough frames.
    """
    if not len(pool):
        raise EmptyInputError("cannot sample from an empty pool")
    grid = np.array(pool.snrs)
    missing = [(c, s) for c in range(pool.class_count) for s in pool.snrs if (c, s) not in pool.strata]
    if missing:
        raise StratificationError(f"pool lacks strata (label, snr): {missing[:5]}")
    C = pool.class_count
    kind = spec.kind
    if kind is ScenarioKind.IID:
        classes = rng.integers(0, C, spec.n)
        snrs = rng.choice(grid, spec.n)
    elif kind is ScenarioKind.CLASS_IMBALANCE:
        weights = draw_class_weights(C, rng)
        classes = rng.choice(C, size=spec.n, p=weights)
        snrs = rng.choice(grid, spec.n)
    elif kind is ScenarioKind.VOLUME_IMBALANCE:
        keep = rng.uniform(0.0, 1.0)
        m = int(np.floor(keep * spec.n))
        classes = rng.integers(0, C, m)
        snrs = rng.choice(grid, m)
    else:
        snr = rng.choice(grid)
        lo, hi = spec.feature_bounds
        m = int(rng.integers(lo, hi + 1))
        classes = rng.integers(0, C, m)
        snrs = np.full(m, snr)
    return _draw_strata(pool, np.asarray(classes, np.int64), np.asarray(snrs, np.int64), rng)


# -- on-disk format ---------------------------------------------------------------

MAGIC = b"AMCD"
VERSION = 1
_HEADER = struct.Struct("<4sHIBQ")
HEADER_SIZE = _HEADER.size  # 19


def _record_dtype(frame_length: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("snr", "i1"), ("iq", "<f4", (2, frame_length))])


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the AMCD file; the clean component is not stored."""
    if ds.class_count > 255:
        raise ConfigurationError("AMCD stores class_count as u8")
    rec = np.empty(len(ds), _record_dtype(ds.frame_length))
    rec["label"] = ds.labels
    rec["snr"] = ds.snr_db
    rec["iq"] = ds.iq
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ds.frame_length, ds.class_count, len(ds)))
        fh.write(rec.tobytes())


def read_dataset(path: str | Path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header", len(data))
    magic, version, frame_len, class_count, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if frame_len == 0 or class_count == 0:
        raise FormatError("frame length and class count must be positive", 6)
    dtype = _record_dtype(frame_len)
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {count} frames, found {len(data)}", min(len(data), expected))
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER_SIZE)
    labels = rec["label"].astype(np.int64)
    snr = rec["snr"].astype(np.int64)
    bad = np.flatnonzero((labels >= class_count) | ~np.isin(snr, _GRID))
    if bad.size:
        raise FormatError(f"record {bad[0]} has an invalid label or SNR", HEADER_SIZE + int(bad[0]) * dtype.itemsize)
    snrs = tuple(sorted(set(snr.tolist()))) or SNR_GRID
    return Dataset(rec["iq"].copy(), labels, snr, class_count, snrs=snrs)
