"""On-disk scenario datasets: one CSV per scenario, a JSON sidecar with the
scenario description, and ``manifest.json`` with SHA-256 content hashes."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .simulator import MeasurementSeries, Scenario

MANIFEST = "manifest.json"
TIME_COLUMN = "time"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def series_to_csv(series: MeasurementSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((TIME_COLUMN,) + tuple(series.channel_labels))
    for t, row in zip(series.times, series.values):
        w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_series_csv(path, columns: Optional[dict] = None, time_column: str = TIME_COLUMN,
                    sample_rate: Optional[float] = None) -> MeasurementSeries:
    """Parse a scenario CSV.

    ``columns`` maps CSV header names to channel labels (``freq_<bus>`` /
    ``vmag_<bus>``); unmapped columns other than the time column are
    dropped when a mapping is given. This is how externally produced
    datasets are imported.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if time_column not in header:
        raise ValidationError(f"{path}: missing time column {time_column!r}")
    ti = header.index(time_column)
    if columns:
        missing = [c for c in columns if c not in header]
        if missing:
            raise ValidationError(f"{path}: mapped columns not found: {missing}")
        cols = [header.index(c) for c in columns]
        labels = [columns[c] for c in columns]
    else:
        cols = [i for i in range(len(header)) if i != ti]
        labels = [header[i] for i in cols]
    # frequency channels first, then voltages, each ordered by bus id
    def key(item):
        lab = item[1]
        kind, _, bus = lab.partition("_")
        return ({"freq": 0, "vmag": 1}.get(kind, 2), int(bus) if bus.isdigit() else bus)

    order = sorted(zip(cols, labels), key=key)
    times = data[:, ti]
    if sample_rate is None:
        if times.size < 2:
            raise ValidationError(f"{path}: cannot infer sample rate from fewer than 2 rows")
        sample_rate = float(round(1.0 / np.median(np.diff(times)), 9))
    return MeasurementSeries(float(sample_rate), times, data[:, [c for c, _ in order]], tuple(l for _, l in order))


def write_dataset(directory, scenarios: Sequence[Scenario], series: Sequence[MeasurementSeries],
                  meta: Optional[dict] = None) -> dict:
    """Write every scenario and return the manifest (also saved to disk)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for sc, s in zip(scenarios, series):
        csv_name = f"{sc.name}.csv"
        (d / csv_name).write_text(series_to_csv(s))
        sidecar = {"scenario": sc.to_dict(), "csv": csv_name, "sample_rate": s.sample_rate,
                   "channel_labels": list(s.channel_labels)}
        (d / f"{sc.name}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
        files[csv_name] = sha256_file(d / csv_name)
        files[f"{sc.name}.json"] = sha256_file(d / f"{sc.name}.json")
    manifest = {"files": dict(sorted(files.items())), "meta": meta or {}}
    (d / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def verify_manifest(directory) -> dict:
    d = Path(directory)
    if not (d / MANIFEST).exists():
        raise ValidationError(f"{d}: no {MANIFEST}")
    manifest = json.loads((d / MANIFEST).read_text())
    bad = [name for name, h in manifest["files"].items() if not (d / name).exists() or sha256_file(d / name) != h]
    if bad:
        raise ValidationError(f"{d}: content hash mismatch for {len(bad)} file(s), e.g. {bad[0]}")
    return manifest


def load_dataset(directory, split: Optional[str] = None, verify: bool = True
                 ) -> tuple[list[Scenario], list[MeasurementSeries]]:
    """Read every sidecar in ``directory`` (sorted by name), optionally
    restricted to one split. Sidecars may carry ``columns`` (CSV header ->
    channel label) and ``time_column`` for imported data."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    if verify:
        verify_manifest(d)
    scen, series = [], []
    for side in sorted(d.glob("*.json")):
        if side.name == MANIFEST:
            continue
        meta = json.loads(side.read_text())
        sc = Scenario.from_dict(meta["scenario"])
        if split is not None and sc.split != split:
            continue
        s = read_series_csv(d / meta["csv"], meta.get("columns"), meta.get("time_column", TIME_COLUMN),
                            meta.get("sample_rate"))
        scen.append(sc)
        series.append(s)
    if not series:
        raise ValidationError(f"{d}: no scenarios" + (f" in split {split!r}" if split else ""))
    return scen, series
