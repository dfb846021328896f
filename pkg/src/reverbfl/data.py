"""Datasets, WAV ingestion, IID / Dirichlet client partitioning and the server reserve set."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import Spectrogram, featurize

MAX_REDRAWS = 100


class EmptyClientError(RuntimeError):
    """A partition or reserve extraction left some client with no data."""


class WavFormatError(ValueError):
    pass


@dataclass
class LabeledExample:
    features: Spectrogram
    label: int
    id: int


@dataclass
class Dataset:
    """Stacked examples: ``x`` is ``[N, n_f, T, 2]``, ``y`` labels, ``ids`` stable example ids."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.ids)):
            raise ValueError("x, y and ids must have the same length")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return LabeledExample(Spectrogram(self.x[i]), int(self.y[i]), int(self.ids[i]))

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.x[index], self.y[index], self.ids[index])

    @property
    def feature_shape(self):
        return tuple(self.x.shape[1:])

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.concatenate([p.x for p in parts]),
                   np.concatenate([p.y for p in parts]),
                   np.concatenate([p.ids for p in parts]))

    @classmethod
    def from_examples(cls, examples):
        examples = list(examples)
        return cls(np.stack([e.features.data for e in examples]),
                   [e.label for e in examples], [e.id for e in examples])


@dataclass
class ClientShard:
    client_id: int
    data: Dataset
    adversarial: bool = False

    @property
    def size(self):
        return len(self.data)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "dirichlet"
    alpha: float = 0.5
    num_clients: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"partition mode must be 'iid' or 'dirichlet', got {self.mode!r}")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError("Dirichlet concentration alpha must be > 0")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")


@dataclass
class ReserveSet:
    data: Dataset
    fraction: float

    def __len__(self):
        return len(self.data)


# --------------------------------------------------------------------------- synthetic data

def synth_waveform(label, num_classes, n_samples, sample_rate, rng, snr_db=10.0):
    """Sinusoid at ``f_s (k+1) / (4K)`` plus a rising chirp from 1.5x to 1.75x that
    frequency, with random phases and gains, in white noise at ``snr_db``."""
    t = np.arange(n_samples) / sample_rate
    base = sample_rate * (label + 1) / (4.0 * num_classes)
    f0 = base * rng.uniform(0.97, 1.03)
    duration = n_samples / sample_rate
    f_start, f_end = 1.5 * f0, 1.75 * f0
    sweep = (f_end - f_start) / duration
    tone = rng.uniform(0.6, 1.0) * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    chirp = rng.uniform(0.3, 0.6) * np.sin(
        2 * np.pi * (f_start * t + 0.5 * sweep * t * t) + rng.uniform(0, 2 * np.pi))
    clean = tone + chirp
    noise_std = np.sqrt(np.mean(clean ** 2) / 10 ** (snr_db / 10.0))
    return clean + noise_std * rng.standard_normal(n_samples)


def generate_synthetic(num_classes, per_class, config, seed, waveform_len=None, target_frames=None):
    """``num_classes * per_class`` featurized examples, labels ``0..K-1`` in class-major order."""
    if num_classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes and 2 examples per class")
    if waveform_len is None:
        waveform_len = config.samples_for(target_frames or 16)
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for k in range(num_classes):
        for _ in range(per_class):
            wave = synth_waveform(k, num_classes, waveform_len, config.sample_rate, rng)
            feats.append(featurize(wave, config, target_frames).data)
            labels.append(k)
    n = len(labels)
    return Dataset(np.stack(feats), labels, np.arange(n))


# --------------------------------------------------------------------------- WAV ingestion

def read_wav(path):
    """Parse a RIFF/WAVE PCM16 mono file. Returns ``(sample_rate, samples in [-1, 1])``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        chunk_id, size = struct.unpack("<4sI", raw[pos:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1:
        raise WavFormatError(f"{path}: unsupported format tag {tag} (only PCM=1)")
    if bits != 16:
        raise WavFormatError(f"{path}: unsupported bit depth {bits} (only 16)")
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels, only mono is supported")
    samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64)
    return rate, samples / 32768.0


def write_wav(path, samples, sample_rate):
    """PCM16 mono writer (used for fixtures and round-trip tests)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE", b"fmt ", 16,
                         1, 1, sample_rate, sample_rate * 2, 2, 16, b"data", len(pcm))
    Path(path).write_bytes(header + pcm)


def resample_linear(samples, src_rate, dst_rate):
    samples = np.asarray(samples, dtype=np.float64)
    if src_rate == dst_rate or len(samples) == 0:
        return samples.copy()
    n_out = int(round(len(samples) * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(samples)), samples)


def label_from_filename(path):
    stem = Path(path).name
    prefix = stem.split("_", 1)[0]
    try:
        return int(prefix)
    except ValueError:
        raise WavFormatError(f"{stem}: filename must start with an integer label and '_'") from None


def load_wav_dir(path, config, target_frames=None):
    """Featurize every ``<label>_*.wav`` in ``path`` (sorted by name).

    Clips shorter than one window are zero-padded to one window. With
    ``target_frames=None`` every spectrogram is brought to the median frame count.
    """
    files = sorted(Path(path).glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no .wav files in {path}")
    waves, labels = [], []
    for f in files:
        label = label_from_filename(f)
        rate, samples = read_wav(f)
        samples = resample_linear(samples, rate, config.sample_rate)
        if len(samples) < config.window_length:
            samples = np.pad(samples, (0, config.window_length - len(samples)))
        waves.append(samples)
        labels.append(label)
    if target_frames is None:
        target_frames = int(np.median([config.frames_for(len(w)) for w in waves]))
    feats = [featurize(w, config, target_frames).data for w in waves]
    return Dataset(np.stack(feats), labels, np.arange(len(labels)))


# --------------------------------------------------------------------------- splitting

def train_test_split(data, test_fraction, seed):
    """Per-class random hold-out of ``round(test_fraction * class count)`` examples."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for k in np.unique(data.y):
        idx = np.flatnonzero(data.y == k)
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(rng.choice(idx, size=n_test, replace=False).tolist())
    mask = np.zeros(len(data), dtype=bool)
    mask[test_idx] = True
    return data.subset(np.flatnonzero(~mask)), data.subset(np.flatnonzero(mask))


def largest_remainder(proportions, total):
    """Integer counts summing to ``total``; leftover units go to the largest fractional parts
    (ties to the lower index)."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition(data, spec):
    n, n_clients = len(data), spec.num_clients
    if n_clients > n:
        raise ValueError(f"cannot split {n} examples across {n_clients} clients")
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "iid":
        parts = np.array_split(rng.permutation(n), n_clients)
    else:
        classes = np.unique(data.y)
        for _ in range(MAX_REDRAWS):
            parts = [[] for _ in range(n_clients)]
            for k in classes:
                idx = rng.permutation(np.flatnonzero(data.y == k))
                p = rng.dirichlet(np.full(n_clients, spec.alpha))
                bounds = np.concatenate([[0], np.cumsum(largest_remainder(p, len(idx)))])
                for c in range(n_clients):
                    parts[c].extend(idx[bounds[c]:bounds[c + 1]].tolist())
            if min(len(p) for p in parts) > 0:
                break
        else:
            raise EmptyClientError(
                f"no Dirichlet(alpha={spec.alpha}) draw gave every client data in {MAX_REDRAWS} tries")
        parts = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    return [ClientShard(c, data.subset(p)) for c, p in enumerate(parts)]


def extract_reserve(shards, fraction, seed, num_classes=None):
    """Move ``ceil(fraction * class count)`` examples per class (at least one) from the
    union of all shards into a server reserve set."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("reserve fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    owner = np.concatenate([np.full(s.size, i) for i, s in enumerate(shards)])
    position = np.concatenate([np.arange(s.size) for s in shards])
    labels = np.concatenate([s.data.y for s in shards])
    if num_classes is not None:
        missing = sorted(set(range(num_classes)) - set(labels.tolist()))
        if missing:
            raise ValueError(f"classes {missing} have no examples")
    chosen = []
    for k in np.unique(labels):
        pool = np.flatnonzero(labels == k)
        take = max(1, math.ceil(fraction * len(pool) - 1e-9))
        chosen.extend(rng.choice(pool, size=take, replace=False).tolist())
    chosen = np.sort(np.asarray(chosen, dtype=np.int64))
    moved = np.zeros(len(labels), dtype=bool)
    moved[chosen] = True
    reserve = Dataset.concat([shards[owner[j]].data.subset([position[j]]) for j in chosen])
    remaining = []
    for i, s in enumerate(shards):
        keep = position[(owner == i) & ~moved]
        if len(keep) == 0:
            raise EmptyClientError(f"client {s.client_id} is empty after reserve extraction")
        remaining.append(ClientShard(s.client_id, s.data.subset(keep), s.adversarial))
    return ReserveSet(reserve, fraction), remaining


def dump_partition(shards, reserve, out_dir, spec, extra=None):
    """One directory per client (``features.npy``, ``labels.txt``, ``ids.txt``), a
    ``reserve/`` directory in the same layout, and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def _write(d, data):
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "features.npy", data.x)
        (d / "labels.txt").write_text("".join(f"{v}\n" for v in data.y))
        (d / "ids.txt").write_text("".join(f"{v}\n" for v in data.ids))

    clients = []
    for s in shards:
        _write(out / f"client_{s.client_id:03d}", s.data)
        clients.append({"client_id": s.client_id, "size": s.size, "adversarial": s.adversarial,
                        "ids": s.data.ids.tolist()})
    manifest = {"partition": {"mode": spec.mode, "alpha": spec.alpha,
                              "num_clients": spec.num_clients, "seed": spec.seed},
                "clients": clients}
    if reserve is not None:
        _write(out / "reserve", reserve.data)
        manifest["reserve"] = {"fraction": reserve.fraction, "ids": reserve.data.ids.tolist()}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out
