"""Charge-snippet data model, CSV ingestion, normalization, splits, and synthesis.

CSV formats (UTF-8, '.' decimals, LF or CRLF):
  snippets: snippet_id,vehicle_id,step,voltage,current,temperature[,extra...]
            rows of one snippet contiguous and sorted by the 0-based step.
  metadata: snippet_id,label,mileage_km,cycle_count  with label in {0,1}.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .numcore import SeededRng

STD_FLOOR = 1e-8
META_NAMES = ["mileage_km", "cycle_count"]


class ParseError(ValueError):
    """Malformed input file; message carries file/line context."""


@dataclass(frozen=True)
class ChargeSnippet:
    """One charging cycle: an M x D channel matrix plus vehicle-level context."""

    snippet_id: str
    vehicle_id: str
    channels: np.ndarray  # (M, D) float64
    meta: np.ndarray      # (K,) float64
    label: int            # 0 normal, 1 fault, inherited from the vehicle


@dataclass(frozen=True)
class FleetDataset:
    snippets: tuple
    channel_names: tuple
    meta_names: tuple

    def __post_init__(self):
        ids = [s.snippet_id for s in self.snippets]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate snippet_id in dataset")
        for s in self.snippets:
            if s.channels.shape[1] != len(self.channel_names):
                raise ValueError(f"snippet {s.snippet_id}: channel count mismatch")
            if s.meta.shape[0] != len(self.meta_names):
                raise ValueError(f"snippet {s.snippet_id}: meta length mismatch")
            if not np.all(np.isfinite(s.channels)) or not np.all(np.isfinite(s.meta)):
                raise ValueError(f"snippet {s.snippet_id}: non-finite values")

    def __len__(self):
        return len(self.snippets)

    def vehicle_ids(self):
        seen = []
        for s in self.snippets:
            if s.vehicle_id not in seen:
                seen.append(s.vehicle_id)
        return seen

    def vehicle_label(self, vehicle_id: str) -> int:
        for s in self.snippets:
            if s.vehicle_id == vehicle_id:
                return s.label
        raise KeyError(vehicle_id)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    meta_mean: np.ndarray
    meta_std: np.ndarray


@dataclass(frozen=True)
class SplitSpec:
    train_vehicle_ids: frozenset
    val_vehicle_ids: frozenset
    seed: int
    ratio: float


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _parse_float(cell: str, path, line_no: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{path}:{line_no}: non-numeric value {cell!r} in column {col!r}") from None


def _resample(channels: np.ndarray, target_len: int) -> np.ndarray:
    """Linear resample each column to target_len rows over the original index."""
    m = channels.shape[0]
    if m == target_len:
        return channels
    src = np.arange(m, dtype=np.float64)
    dst = np.linspace(0.0, m - 1.0, target_len)
    return np.column_stack([np.interp(dst, src, channels[:, d]) for d in range(channels.shape[1])])


def load_csv(data_path, meta_path, target_len: int) -> FleetDataset:
    """Ingest snippet + metadata CSVs, resampling every snippet to target_len rows."""
    if target_len < 1:
        raise ValueError("target_len must be positive")

    meta_by_id = {}
    with open(meta_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != ["snippet_id", "label", "mileage_km", "cycle_count"]:
            raise ParseError(f"{meta_path}:1: expected header snippet_id,label,mileage_km,cycle_count")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise ParseError(f"{meta_path}:{line_no}: expected 4 columns, got {len(row)}")
            sid = row[0].strip()
            label = row[1].strip()
            if label not in ("0", "1"):
                raise ParseError(f"{meta_path}:{line_no}: label must be 0 or 1, got {label!r}")
            meta = [_parse_float(row[i], meta_path, line_no, META_NAMES[i - 2]) for i in (2, 3)]
            meta_by_id[sid] = (int(label), np.array(meta, dtype=np.float64))

    snippets = []
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 4 or [h.strip() for h in header[:3]] != ["snippet_id", "vehicle_id", "step"]:
            raise ParseError(f"{data_path}:1: expected header snippet_id,vehicle_id,step,<channels...>")
        channel_names = [h.strip() for h in header[3:]]
        if not channel_names:
            raise ParseError(f"{data_path}:1: no channel columns")

        cur_id = None
        cur_vehicle = None
        cur_rows = []
        first_line = None

        def flush(line_no):
            if cur_id is None:
                return
            if len(cur_rows) < 2:
                raise ParseError(f"{data_path}:{first_line}: snippet {cur_id!r} has fewer than 2 rows")
            if cur_id not in meta_by_id:
                raise ParseError(f"{data_path}:{first_line}: snippet {cur_id!r} missing from metadata file")
            label, meta = meta_by_id[cur_id]
            channels = _resample(np.array(cur_rows, dtype=np.float64), target_len)
            snippets.append(ChargeSnippet(cur_id, cur_vehicle, channels, meta, label))

        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + len(channel_names):
                raise ParseError(f"{data_path}:{line_no}: expected {3 + len(channel_names)} columns, got {len(row)}")
            sid = row[0].strip()
            if sid != cur_id:
                flush(line_no)
                cur_id, cur_vehicle, cur_rows, first_line = sid, row[1].strip(), [], line_no
            cur_rows.append([_parse_float(row[3 + d], data_path, line_no, channel_names[d])
                             for d in range(len(channel_names))])
        flush(None)

    return FleetDataset(tuple(snippets), tuple(channel_names), tuple(META_NAMES))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def fit_norm(train: FleetDataset) -> NormStats:
    """Per-channel and per-meta mean/std pooled over the TRAIN split only.

    Population standard deviation, floored at 1e-8 so constant channels stay finite.
    """
    if len(train) == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    pooled = np.concatenate([s.channels for s in train.snippets], axis=0)
    metas = np.stack([s.meta for s in train.snippets], axis=0)
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), STD_FLOOR)
    meta_mean = metas.mean(axis=0)
    meta_std = np.maximum(metas.std(axis=0), STD_FLOOR)
    return NormStats(mean, std, meta_mean, meta_std)


def apply_norm(ds: FleetDataset, stats: NormStats) -> FleetDataset:
    """Z-score channels and metadata with previously fit statistics."""
    if len(ds) and ds.snippets[0].channels.shape[1] != stats.mean.shape[0]:
        raise ValueError(f"channel count {ds.snippets[0].channels.shape[1]} != stats D {stats.mean.shape[0]}")
    if len(ds) and ds.snippets[0].meta.shape[0] != stats.meta_mean.shape[0]:
        raise ValueError(f"meta length {ds.snippets[0].meta.shape[0]} != stats K {stats.meta_mean.shape[0]}")
    out = tuple(
        replace(s,
                channels=(s.channels - stats.mean) / stats.std,
                meta=(s.meta - stats.meta_mean) / stats.meta_std)
        for s in ds.snippets
    )
    return FleetDataset(out, ds.channel_names, ds.meta_names)


# ---------------------------------------------------------------------------
# Vehicle-level split
# ---------------------------------------------------------------------------


def vehicle_split(ds: FleetDataset, ratio: float, seed: int):
    """Split by vehicle, stratified by label, so no vehicle straddles train/val."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0,1)")
    vehicles = ds.vehicle_ids()
    if len(vehicles) < 2:
        raise ValueError("need at least 2 vehicles to split")

    rng = SeededRng(seed, ("vehicle_split",))
    by_label = {}
    for v in vehicles:
        by_label.setdefault(ds.vehicle_label(v), []).append(v)

    total_train = int(round(ratio * len(vehicles)))
    train_ids, val_ids = set(), set()
    # allocate per label group, keeping at least one vehicle of each group in
    # val (and train) whenever the group is large enough
    groups = sorted(by_label.items())
    alloc = {}
    for label, group in groups:
        n_tr = int(round(ratio * len(group)))
        if len(group) >= 2:
            n_tr = min(max(n_tr, 1), len(group) - 1)
        alloc[label] = n_tr
    # nudge the largest group so totals match round(ratio * V) when possible
    diff = total_train - sum(alloc.values())
    if diff != 0:
        label_big = max(groups, key=lambda kv: len(kv[1]))[0]
        group = by_label[label_big]
        lo = 1 if len(group) >= 2 else 0
        hi = len(group) - 1 if len(group) >= 2 else len(group)
        alloc[label_big] = min(max(alloc[label_big] + diff, lo), hi)

    for label, group in groups:
        order = rng.spawn(label).permutation(len(group))
        shuffled = [group[i] for i in order]
        train_ids.update(shuffled[:alloc[label]])
        val_ids.update(shuffled[alloc[label]:])

    if not train_ids or not val_ids:
        raise ValueError(f"split ratio {ratio} leaves an empty side for {len(vehicles)} vehicles")

    train = FleetDataset(tuple(s for s in ds.snippets if s.vehicle_id in train_ids),
                         ds.channel_names, ds.meta_names)
    val = FleetDataset(tuple(s for s in ds.snippets if s.vehicle_id in val_ids),
                       ds.channel_names, ds.meta_names)
    spec = SplitSpec(frozenset(train_ids), frozenset(val_ids), seed, ratio)
    return train, val, spec


# ---------------------------------------------------------------------------
# Synthetic fleet generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FleetConfig:
    """Constant-current / constant-voltage charge profile generator settings."""

    n_vehicles: int = 40
    fault_fraction: float = 0.15
    snippets_per_vehicle: int = 4
    seq_len: int = 128
    # healthy cell baseline
    v_start: float = 3.2          # open-circuit voltage at start of charge (V)
    v_max: float = 4.2            # CV-phase terminal voltage (V)
    i_charge: float = 50.0        # CC-phase current (A)
    resistance: float = 0.002     # internal resistance (ohm)
    tau_voltage: float = 60.0     # open-circuit ramp time constant (steps)
    tau_current: float = 25.0     # CV-phase current decay (steps)
    temp_ambient: float = 25.0    # ambient temperature (C)
    heat_gain: float = 0.08       # I^2 R -> temperature forcing gain
    temp_tau: float = 30.0        # first-order thermal lag (steps)
    noise_std: float = 0.01       # per-channel gaussian measurement noise
    jitter: float = 0.05          # relative per-vehicle parameter jitter
    # fault signature
    fault_resistance_mult: float = 1.8
    dip_depth: float = 0.15       # transient voltage dip (V)
    dip_len: int = 6              # dip duration (steps)
    dips_per_snippet: int = 2
    # metadata ranges
    mileage_range: tuple = (20_000.0, 120_000.0)
    cycle_range: tuple = (100.0, 900.0)
    fault_meta_bias: float = 0.35  # faulty vehicles biased toward the top of the ranges
    # subfleet offsets (distribution-shift experiments)
    voltage_offset: float = 0.0
    temp_offset: float = 0.0

    def validate(self):
        if self.n_vehicles < 1 or self.snippets_per_vehicle < 1 or self.seq_len < 2:
            raise ValueError("n_vehicles, snippets_per_vehicle, seq_len must be positive")
        if not 0.0 <= self.fault_fraction <= 1.0:
            raise ValueError(f"fault_fraction must be in [0,1], got {self.fault_fraction}")
        if self.noise_std < 0 or self.jitter < 0:
            raise ValueError("noise_std and jitter must be nonnegative")


CHANNEL_NAMES = ("voltage", "current", "temperature")


def _synth_snippet(cfg: FleetConfig, rng: SeededRng, resistance: float, faulty: bool) -> np.ndarray:
    m = cfg.seq_len
    t = np.arange(m, dtype=np.float64)
    tau_v = cfg.tau_voltage * (1.0 + cfg.jitter * rng.normal(()))
    v_oc = cfg.v_start + (cfg.v_max - cfg.v_start) * (1.0 - np.exp(-t / max(tau_v, 1.0)))

    current = np.full(m, cfg.i_charge)
    terminal = v_oc + current * resistance
    over = np.nonzero(terminal >= cfg.v_max)[0]
    if over.size:
        t_sw = over[0]
        current[t_sw:] = cfg.i_charge * np.exp(-(t[t_sw:] - t_sw) / cfg.tau_current)
    voltage = np.minimum(v_oc + current * resistance, cfg.v_max)

    temp = np.empty(m)
    temp[0] = cfg.temp_ambient
    for k in range(m - 1):
        heating = cfg.heat_gain * current[k] ** 2 * resistance
        temp[k + 1] = temp[k] + heating - (temp[k] - cfg.temp_ambient) / cfg.temp_tau

    if faulty:
        for _ in range(cfg.dips_per_snippet):
            start = int(rng.integers(0, max(m - cfg.dip_len, 1)))
            depth = cfg.dip_depth * (0.5 + rng.uniform(()))
            voltage[start:start + cfg.dip_len] -= depth

    voltage = voltage + cfg.voltage_offset + cfg.noise_std * rng.normal(m)
    current = current + cfg.i_charge * cfg.noise_std * rng.normal(m)
    temp = temp + cfg.temp_offset + cfg.noise_std * rng.normal(m)
    return np.column_stack([voltage, current, temp])


def synth_fleet(cfg: FleetConfig, seed: int, id_prefix: str = "ev") -> FleetDataset:
    """Generate a deterministic synthetic EV fleet with injected fault signatures."""
    cfg.validate()
    rng = SeededRng(seed, ("synth_fleet",))

    n_fault = int(round(cfg.fault_fraction * cfg.n_vehicles))
    order = rng.spawn("labels").permutation(cfg.n_vehicles)
    faulty_set = set(int(i) for i in order[:n_fault])

    mi_lo, mi_hi = cfg.mileage_range
    cy_lo, cy_hi = cfg.cycle_range

    snippets = []
    for vi in range(cfg.n_vehicles):
        v_rng = rng.spawn("vehicle", vi)
        faulty = vi in faulty_set
        resistance = cfg.resistance * (1.0 + cfg.jitter * v_rng.normal(()))
        if faulty:
            resistance *= cfg.fault_resistance_mult
        bias = cfg.fault_meta_bias if faulty else 0.0
        mileage = mi_lo + (mi_hi - mi_lo) * min(v_rng.uniform(()) * (1 - bias) + bias, 1.0)
        cycles = cy_lo + (cy_hi - cy_lo) * min(v_rng.uniform(()) * (1 - bias) + bias, 1.0)
        meta = np.array([mileage, cycles])
        vid = f"{id_prefix}{vi:04d}"
        for si in range(cfg.snippets_per_vehicle):
            channels = _synth_snippet(cfg, v_rng.spawn("snippet", si), resistance, faulty)
            snippets.append(ChargeSnippet(f"{vid}_s{si:03d}", vid, channels, meta, int(faulty)))

    return FleetDataset(tuple(snippets), CHANNEL_NAMES, tuple(META_NAMES))


def merge_fleets(a: FleetDataset, b: FleetDataset) -> FleetDataset:
    """Concatenate two fleets sharing the same channel/meta layout."""
    if a.channel_names != b.channel_names or a.meta_names != b.meta_names:
        raise ValueError("fleets have different channel or meta layouts")
    return FleetDataset(a.snippets + b.snippets, a.channel_names, a.meta_names)


# ---------------------------------------------------------------------------
# CSV emission (inverse of load_csv, used by the CLI synth command)
# ---------------------------------------------------------------------------


def write_csv(ds: FleetDataset, data_path, meta_path):
    """Write a dataset in the ingestion CSV formats (deterministic bytes)."""
    with open(data_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("snippet_id,vehicle_id,step," + ",".join(ds.channel_names) + "\n")
        for s in ds.snippets:
            for step in range(s.channels.shape[0]):
                vals = ",".join(repr(float(x)) for x in s.channels[step])
                fh.write(f"{s.snippet_id},{s.vehicle_id},{step},{vals}\n")
    with open(meta_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("snippet_id,label,mileage_km,cycle_count\n")
        for s in ds.snippets:
            vals = ",".join(repr(float(x)) for x in s.meta)
            fh.write(f"{s.snippet_id},{s.label},{vals}\n")
