"""Config-driven experiment runner: one federated run per cell, metrics CSV + JSON manifest.

Configs are flat ``key = value`` text with dotted namespaces. Resolution order is
profile defaults, then the config file, then explicit overrides; the manifest
records every resolved key.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as A
from . import data as D
from . import defense as Df
from . import federation as F
from . import frontend as FE
from . import model as M

METRICS_COLUMNS = ("round", "variant", "attack", "seed", "test_accuracy", "test_loss", "beta_t")

VARIANTS = {
    "FedAvg": "disabled",
    "Retrain-NoPoison": "clean",
    "Retrain-FGSM": "fgsm",
    "Retrain-PGD": "pgd",
    "Retrain-AWGN": "awgn",
    "Retrain-All": "all",
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the offending key."""


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _strs(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "epoch", "none") else int(text)


# key -> (parser, help)
SCHEMA = {
    "experiment.variant": (str, "one of " + ", ".join(VARIANTS)),
    "experiment.seed": (int, "master seed; every random stream is derived from it"),
    "data.source": (str, "synthetic | wav"),
    "data.num_classes": (int, "synthetic: number of classes K"),
    "data.per_class": (int, "synthetic: examples per class"),
    "data.wav_dir": (str, "wav: directory of <label>_*.wav files"),
    "data.test_fraction": (float, "per-class fraction held out for global evaluation"),
    "signal.sample_rate": (int, "sampling rate f_s in Hz"),
    "signal.window_length": (int, "Hann window length in samples"),
    "signal.hop": (int, "hop size in samples"),
    "signal.fft_size": (int, "FFT size (power of two)"),
    "signal.clip_bound": (float, "admissible box half-width c"),
    "signal.frames": (int, "time frames T after pad/crop"),
    "model.conv_channels": (_ints, "three comma-separated conv widths"),
    "model.dense_units": (int, "width of the dense layer"),
    "model.dropout_p": (float, "dropout probability before the output layer"),
    "partition.mode": (str, "iid | dirichlet"),
    "partition.alpha": (float, "Dirichlet concentration"),
    "fed.num_clients": (int, "number of clients N"),
    "fed.sample_fraction": (float, "fraction C of clients sampled per round"),
    "fed.local_steps": (int, "local optimizer steps per round"),
    "fed.batch_size": (int, "client minibatch size"),
    "fed.rounds": (int, "communication rounds R"),
    "fed.adversarial_fraction": (float, "fraction rho of adversarial clients"),
    "fed.workers": (int, "threads for local training (results do not depend on it)"),
    "attack.kind": (str, "client poisoning: none | fgsm | pgd | awgn | mixed"),
    "attack.epsilon": (float, "l-inf budget for FGSM/PGD"),
    "attack.iterations": (int, "PGD iterations"),
    "attack.sigma": (float, "AWGN standard deviation"),
    "optim.kind": (str, "adam | sgd (clients and server)"),
    "optim.lr": (float, "initial learning rate"),
    "optim.decay_rate": (float, "exponential decay factor"),
    "optim.decay_steps": (float, "steps per decay period"),
    "optim.weight_decay": (float, "L2 coefficient on conv/dense kernels"),
    "defense.mode": (str, "auto (from variant) | disabled | clean | fgsm | pgd | awgn | all"),
    "defense.reserve_fraction": (float, "per-class reserve fraction"),
    "defense.pretrain_epochs": (int, "reserve pretraining epochs before round 1"),
    "defense.batch_size": (int, "reserve minibatch size B_r"),
    "defense.steps": (_opt_int, "reserve steps per round; 'epoch' = ceil(|reserve| / B_r)"),
}

_COMMON = {
    "experiment.variant": "Retrain-All",
    "experiment.seed": "0",
    "data.source": "synthetic",
    "data.wav_dir": "",
    "data.test_fraction": "0.2",
    "signal.clip_bound": "3.0",
    "model.dropout_p": "0.5",
    "partition.mode": "dirichlet",
    "partition.alpha": "0.5",
    "fed.num_clients": "10",
    "fed.sample_fraction": "0.6",
    "fed.local_steps": "10",
    "fed.batch_size": "16",
    "fed.adversarial_fraction": "0.5",
    "fed.workers": "1",
    "attack.kind": "pgd",
    "attack.epsilon": "0.02",
    "attack.sigma": "0.03",
    "optim.kind": "adam",
    "optim.lr": "1e-4",
    "optim.decay_rate": "0.9",
    "optim.decay_steps": "1000",
    "optim.weight_decay": "1e-4",
    "defense.mode": "auto",
    "defense.reserve_fraction": "0.05",
    "defense.pretrain_epochs": "3",
    "defense.batch_size": "32",
    "defense.steps": "epoch",
}

PROFILES = {
    # reduced spectrogram (33 x 8) so a 30-round PGD-poisoned run takes about a minute
    "desk": {**_COMMON,
             "data.num_classes": "4", "data.per_class": "300",
             "signal.sample_rate": "8000", "signal.window_length": "64", "signal.hop": "32",
             "signal.fft_size": "64", "signal.frames": "8",
             "model.conv_channels": "8,16,32", "model.dense_units": "64",
             "fed.rounds": "30", "attack.iterations": "10"},
    "paper": {**_COMMON,
              "data.num_classes": "10", "data.per_class": "300",
              "signal.sample_rate": "16000", "signal.window_length": "1024", "signal.hop": "512",
              "signal.fft_size": "1024", "signal.frames": "15",
              "model.conv_channels": "32,64,128", "model.dense_units": "128",
              "fed.rounds": "60", "attack.iterations": "50"},
}


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment. Returns an ordered dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def resolve(raw=None, profile="desk", overrides=None, extra_keys=()):
    """Merge profile defaults, ``raw`` and ``overrides``; reject unknown keys."""
    if profile not in PROFILES:
        raise ConfigError(f"profile: unknown profile {profile!r} (choose from {sorted(PROFILES)})")
    merged = dict(PROFILES[profile])
    merged["profile"] = profile
    for source in (raw or {}, overrides or {}):
        for key, value in source.items():
            if key in ("profile",):
                continue
            if key not in SCHEMA and key not in extra_keys:
                raise ConfigError(f"{key}: unknown config key")
            merged[key] = str(value)
    return merged


@dataclass
class ExperimentConfig:
    values: dict
    variant: str
    seed: int
    signal: FE.SignalConfig
    frames: int
    arch_fields: dict
    partition_mode: str
    partition_alpha: float
    fed: F.FedConfig
    defense: Df.DefenseConfig
    attack: A.AttackSpec

    @property
    def attack_label(self):
        return self.attack.kind


def _typed(values, key):
    parser, _ = SCHEMA[key]
    try:
        return parser(values[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {values[key]!r} ({exc})") from exc


def build_config(values):
    """Typed, validated ``ExperimentConfig`` from a resolved flat mapping."""
    g = {k: _typed(values, k) for k in SCHEMA}
    variant = g["experiment.variant"]
    if variant not in VARIANTS:
        raise ConfigError(f"experiment.variant: {variant!r} not in {list(VARIANTS)}")
    mode = g["defense.mode"]
    if mode == "auto":
        mode = VARIANTS[variant]
    elif mode != VARIANTS[variant]:
        raise ConfigError(f"defense.mode: {mode!r} is inconsistent with variant {variant} "
                          f"(expects {VARIANTS[variant]!r})")
    if g["data.source"] not in ("synthetic", "wav"):
        raise ConfigError(f"data.source: expected synthetic or wav, got {g['data.source']!r}")
    if g["data.source"] == "wav" and not g["data.wav_dir"]:
        raise ConfigError("data.wav_dir: required when data.source = wav")
    if not 0.0 < g["data.test_fraction"] < 1.0:
        raise ConfigError("data.test_fraction: must lie in (0, 1)")
    if g["partition.mode"] not in ("iid", "dirichlet"):
        raise ConfigError(f"partition.mode: expected iid or dirichlet, got {g['partition.mode']!r}")
    if g["partition.alpha"] <= 0:
        raise ConfigError("partition.alpha: must be positive")
    if g["signal.frames"] < 1:
        raise ConfigError("signal.frames: must be >= 1")
    if not 0.0 < g["defense.reserve_fraction"] < 1.0:
        raise ConfigError("defense.reserve_fraction: must lie in (0, 1)")

    def build(key_prefix, fn):
        try:
            return fn()
        except ValueError as exc:
            raise ConfigError(f"{key_prefix}: {exc}") from exc

    signal = build("signal", lambda: FE.SignalConfig(
        g["signal.sample_rate"], g["signal.window_length"], g["signal.hop"],
        g["signal.fft_size"], g["signal.clip_bound"]))
    attack = build("attack", lambda: A.AttackSpec(
        g["attack.kind"], g["attack.epsilon"], g["attack.iterations"], g["attack.sigma"],
        g["signal.clip_bound"]))
    optim = build("optim", lambda: M.OptimizerState(
        g["optim.kind"], g["optim.lr"], g["optim.decay_rate"], g["optim.decay_steps"],
        g["optim.weight_decay"]))
    fed = build("fed", lambda: F.FedConfig(
        g["fed.num_clients"], g["fed.sample_fraction"], g["fed.local_steps"], g["fed.batch_size"],
        g["fed.rounds"], g["fed.adversarial_fraction"], attack, optim, g["experiment.seed"],
        g["fed.workers"]))
    # server augmentation reuses the client attack budgets
    defense = build("defense", lambda: Df.DefenseConfig(
        mode, g["defense.reserve_fraction"], g["defense.pretrain_epochs"], g["defense.batch_size"],
        optim, attack.as_kind("none"), g["defense.steps"]))
    arch_fields = {"conv_channels": g["model.conv_channels"], "dense_units": g["model.dense_units"],
                   "dropout_p": g["model.dropout_p"]}
    build("model", lambda: M.ModelArch((signal.n_freq, g["signal.frames"], 2), 2, **arch_fields))
    return ExperimentConfig(dict(values), variant, g["experiment.seed"], signal, g["signal.frames"],
                            arch_fields, g["partition.mode"], g["partition.alpha"], fed, defense, attack)


def load_config(path=None, profile=None, overrides=None):
    """An explicit ``profile`` wins over a ``profile = ...`` line in the file."""
    raw = read_config(path) if path else {}
    file_profile = raw.pop("profile", None)
    return build_config(resolve(raw, profile or file_profile or "desk", overrides))


def derive_seed(seed, purpose, *keys):
    return int(F.keyed_rng(seed, purpose, *keys).integers(0, 2 ** 31 - 1))


# --------------------------------------------------------------------------- environment

@dataclass
class Environment:
    arch: M.ModelArch
    train: D.Dataset
    test: D.Dataset
    shards: list
    reserve: D.ReserveSet
    partition_spec: D.PartitionSpec


def load_dataset(cfg):
    v = cfg.values
    if v["data.source"] == "wav":
        return D.load_wav_dir(v["data.wav_dir"], cfg.signal, cfg.frames)
    return D.generate_synthetic(int(v["data.num_classes"]), int(v["data.per_class"]), cfg.signal,
                                derive_seed(cfg.seed, "data"), target_frames=cfg.frames)


def build_environment(cfg, max_attempts=D.MAX_REDRAWS):
    """Dataset, global test split, client shards and reserve for ``cfg``.

    The reserve is carved out for every variant so all variants of a seed train on
    identical client data. A partition that leaves a client empty after reserve
    extraction is redrawn with the next partition seed.
    """
    dataset = load_dataset(cfg)
    train, test = D.train_test_split(dataset, float(cfg.values["data.test_fraction"]),
                                     derive_seed(cfg.seed, "split"))
    num_classes = int(np.max(dataset.y)) + 1
    last = None
    for attempt in range(max_attempts):
        spec = D.PartitionSpec(cfg.partition_mode, cfg.partition_alpha, cfg.fed.num_clients,
                               derive_seed(cfg.seed, "partition", attempt))
        try:
            shards = D.partition(train, spec)
            reserve, shards = D.extract_reserve(shards, cfg.defense.reserve_fraction,
                                                derive_seed(cfg.seed, "reserve", attempt), num_classes)
        except D.EmptyClientError as exc:
            last = exc
            continue
        arch = M.ModelArch(dataset.feature_shape, num_classes, **cfg.arch_fields)
        return Environment(arch, train, test, shards, reserve, spec)
    raise D.EmptyClientError(f"no usable partition in {max_attempts} attempts: {last}")


# --------------------------------------------------------------------------- single run

def software_version():
    return __version__


def format_metrics(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for r in rows:
        writer.writerow([r["round"], r["variant"], r["attack"], r["seed"],
                         f"{r['test_accuracy']:.6f}", f"{r['test_loss']:.9g}", f"{r['beta_t']:.6f}"])
    return buf.getvalue()


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no metrics rows")
    for r in rows:
        r["round"] = int(r["round"])
        r["seed"] = int(r["seed"])
        for k in ("test_accuracy", "test_loss", "beta_t"):
            r[k] = float(r[k])
    return rows


def train(cfg, env=None, log=None):
    """Pretrain (if the defense is enabled) and run all rounds. Returns ``(params, records)``."""
    env = env or build_environment(cfg)
    params = M.init_params(env.arch, derive_seed(cfg.seed, "init"))
    if cfg.defense.enabled:
        params = Df.pretrain(env.arch, params, env.reserve, cfg.defense,
                             F.keyed_rng(cfg.seed, "pretrain"))
    fed = F.Federation(env.arch, env.shards, env.test, cfg.fed, cfg.defense, env.reserve)
    records = []
    for t in range(cfg.fed.rounds):
        try:
            params, rec = fed.run_round(params, t)
        except Exception as exc:
            raise RuntimeError(f"round {t + 1}: {type(exc).__name__}: {exc}") from exc
        records.append(rec)
        if log:
            log(f"round {rec.round:3d}  acc {rec.test_accuracy:.4f}  loss {rec.test_loss:.4f}  "
                f"beta {rec.beta:.3f}")
    return params, records, env


def run_experiment(cfg, out_dir, log=None):
    """Write ``metrics.csv`` then ``manifest.json`` (the manifest marks completion)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    _, records, env = train(cfg, log=log)
    rows = [{"round": r.round, "variant": cfg.variant, "attack": cfg.attack_label, "seed": cfg.seed,
             "test_accuracy": r.test_accuracy, "test_loss": r.test_loss, "beta_t": r.beta}
            for r in records]
    metrics_path = out / "metrics.csv"
    metrics_path.write_bytes(format_metrics(rows).encode())
    manifest = {
        "config": dict(sorted(cfg.values.items())),
        "seed": cfg.seed,
        "version": software_version(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "elapsed_seconds": round(time.time() - started, 3),
        "resolved": {"defense_mode": cfg.defense.mode, "reserve_size": len(env.reserve),
                     "reserve_steps": cfg.defense.steps_for(len(env.reserve)),
                     "clients_per_round": cfg.fed.clients_per_round,
                     "input_shape": list(env.arch.input_shape),
                     "partition_seed": env.partition_spec.seed,
                     "client_sizes": [s.size for s in env.shards]},
        "rounds": [{"round": r.round, "selected": list(r.selected), "beta": r.beta,
                    "aggregate_accuracy": r.aggregate_accuracy, "aggregate_loss": r.aggregate_loss,
                    "aggregate_digest": r.aggregate_digest, "broadcast_digest": r.broadcast_digest,
                    "reserve_steps": r.reserve_steps} for r in records],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return metrics_path


# --------------------------------------------------------------------------- grids

GRID_KEYS = ("grid.variants", "grid.attacks", "grid.partitions", "grid.seeds")


class GridError(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        lines = [f"{name}: {msg}" for name, msg in failures]
        super().__init__(f"{len(failures)} grid cell(s) failed:\n" + "\n".join(lines))


@dataclass(frozen=True)
class GridCell:
    variant: str
    attack: str
    partition: str  # "iid" or "dirichlet:<alpha>"
    seed: int

    @property
    def name(self):
        return f"{self.variant}__{self.attack}__{self.partition.replace(':', '-')}__seed{self.seed}"

    def overrides(self):
        o = {"experiment.variant": self.variant, "attack.kind": self.attack,
             "experiment.seed": str(self.seed), "defense.mode": "auto"}
        mode, _, alpha = self.partition.partition(":")
        o["partition.mode"] = mode
        if alpha:
            o["partition.alpha"] = alpha
        return o


def grid_cells(raw):
    try:
        variants = _strs(raw.get("grid.variants", "FedAvg,Retrain-All"))
        attacks = _strs(raw.get("grid.attacks", "pgd"))
        partitions = _strs(raw.get("grid.partitions", "dirichlet:0.5"))
        seeds = _ints(raw.get("grid.seeds", "0"))
    except ValueError as exc:
        raise ConfigError(f"grid.seeds: {exc}") from exc
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"grid.variants: unknown variant {v!r}")
    for a in attacks:
        if a not in A.KINDS:
            raise ConfigError(f"grid.attacks: unknown attack {a!r}")
    for p in partitions:
        if p.split(":")[0] not in ("iid", "dirichlet"):
            raise ConfigError(f"grid.partitions: unknown partition {p!r}")
    return [GridCell(v, a, p, s) for v, a, p, s in itertools.product(variants, attacks, partitions, seeds)]


def cell_complete(cell_dir):
    d = Path(cell_dir)
    return (d / "manifest.json").is_file() and (d / "metrics.csv").is_file()


def run_grid(raw, out_root, profile="desk", overrides=None, log=None):
    """Run every incomplete cell of the grid. Returns ``(metrics paths, cells run)``.

    Failing cells are reported together in a ``GridError`` after the rest finished.
    """
    base = {k: v for k, v in raw.items() if k not in GRID_KEYS}
    cells = grid_cells(raw)
    configs = []
    for cell in cells:
        merged = {**base, **(overrides or {}), **cell.overrides()}
        configs.append((cell, build_config(resolve(merged, profile))))
    out_root = Path(out_root)
    paths, ran, failures = [], [], []
    for cell, cfg in configs:
        cell_dir = out_root / cell.name
        if cell_complete(cell_dir):
            paths.append(cell_dir / "metrics.csv")
            continue
        if log:
            log(f"running {cell.name}")
        try:
            paths.append(run_experiment(cfg, cell_dir))
            ran.append(cell)
        except Exception as exc:
            failures.append((cell.name, f"{type(exc).__name__}: {exc}"))
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(traceback.format_exc())
    if failures:
        (out_root / "failures.txt").write_text("".join(f"{n}\t{m}\n" for n, m in failures))
        raise GridError(failures)
    return paths, ran
