"""Dataset and posterior-draw files (comma-delimited text with a header)."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError
from .geometry import Location, Shore
from .model import Dataset

BASE_COLUMNS = ("id", "easting", "northing", "shore", "geodetic_depth", "day_index", "julian_day", "count")
MAGIC = "# plnspatial dataset v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset(data: Dataset, path) -> None:
    """Write ``data`` with 17 significant digits so that reading it back is exact."""
    path = Path(path)
    names = data.covariate_names
    with path.open("w", newline="") as fh:
        fh.write(f"{MAGIC} standardized={int(bool(data.standardized))}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BASE_COLUMNS + tuple(names))
        for loc, y, x in zip(data.locations, data.counts, data.covariates):
            w.writerow(
                [loc.id, _fmt(loc.easting), _fmt(loc.northing), loc.shore.value, _fmt(loc.geodetic_depth),
                 loc.day_index, loc.julian_day, int(y)] + [_fmt(v) for v in x]
            )


def _parse_int(value, line, column):
    try:
        f = float(value)
    except ValueError:
        raise ParseError(f"column {column!r}: {value!r} is not a number", line) from None
    if not f.is_integer():
        raise ParseError(f"column {column!r}: {value!r} is not an integer", line)
    return int(f)


def _parse_float(value, line, column):
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"column {column!r}: {value!r} is not a number", line) from None


def load_dataset(path) -> Dataset:
    """Read a dataset file; covariates are every column after ``count``."""
    path = Path(path)
    standardized = False
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        if "standardized=1" in lines[start]:
            standardized = True
        start += 1
    if start >= len(lines):
        raise ParseError("missing header row", start + 1)
    reader = csv.reader(lines[start:])
    header = [h.strip() for h in next(reader)]
    missing = [c for c in BASE_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}", missing)
    col = {h: i for i, h in enumerate(header)}
    cov_names = tuple(h for h in header if h not in BASE_COLUMNS)
    locs, counts, X = [], [], []
    for offset, row in enumerate(reader):
        line = start + 2 + offset
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", line)
        get = lambda c: row[col[c]].strip()  # noqa: E731
        try:
            shore = Shore.parse(get("shore"))
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
        try:
            loc = Location(
                id=_parse_int(get("id"), line, "id"),
                easting=_parse_float(get("easting"), line, "easting"),
                northing=_parse_float(get("northing"), line, "northing"),
                shore=shore,
                geodetic_depth=_parse_float(get("geodetic_depth"), line, "geodetic_depth"),
                day_index=_parse_int(get("day_index"), line, "day_index"),
                julian_day=_parse_int(get("julian_day"), line, "julian_day"),
            )
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
        y = _parse_int(get("count"), line, "count")
        if y < 0:
            raise ParseError("count must be non-negative", line)
        locs.append(loc)
        counts.append(y)
        X.append([_parse_float(get(c), line, c) for c in cov_names])
    if not locs:
        raise ParseError("no data rows", start + 2)
    X = np.array(X, dtype=float).reshape(len(locs), len(cov_names))
    return Dataset(np.array(counts), X, tuple(locs), standardized=standardized, covariate_names=cov_names)


def write_draws(sample, path) -> None:
    cols = sample.columns()
    names = list(cols)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for m in range(sample.n_draws):
            w.writerow([str(int(cols["chain"][m]))] + [_fmt(cols[c][m]) for c in names[1:]])


def read_draws(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {h: arr[:, i] for i, h in enumerate(header)}


def sample_from_draws(cols: dict[str, np.ndarray], meta: dict):
    """Rebuild a PosteriorSample from draw columns and run metadata."""
    from .sampler import PosteriorSample

    def group(prefix):
        keys = [k for k in cols if k.startswith(prefix) and k[len(prefix):].isdigit() and int(k[len(prefix):]) >= 1]
        keys.sort(key=lambda k: int(k[len(prefix):]))
        return np.column_stack([cols[k] for k in keys]) if keys else np.zeros((len(cols["beta0"]), 0))

    m = len(cols["beta0"])
    labels = tuple(meta.get("block_labels", [""]))

    def per_block(name):
        keys = [f"{name}_{b}" if b else name for b in labels]
        if all(k in cols for k in keys):
            return np.column_stack([cols[k] for k in keys])
        return np.zeros((m, 0))

    corr_names = meta.get("corr_params", [])
    return PosteriorSample(
        model_id=meta["model"],
        beta0=cols["beta0"],
        beta=group("beta"),
        gamma=group("gamma_"),
        Z=group("Z_"),
        sigma2=per_block("sigma2"),
        tau2=cols["tau2"],
        corr={k: per_block(k) for k in corr_names},
        chain=cols["chain"].astype(int),
        block_labels=labels,
        phi_gamma=cols.get("phi_gamma"),
        restricted=bool(meta.get("restricted", False)),
        meta=meta,
    )


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir) -> Path:
    """List every file under ``out_dir`` (except the manifest) with its SHA-256."""
    out_dir = Path(out_dir)
    entries = [
        {"path": p.relative_to(out_dir).as_posix(), "sha256": sha256(p), "bytes": p.stat().st_size}
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    ]
    target = out_dir / "manifest.json"
    target.write_text(json.dumps({"artifacts": entries}, indent=2) + "\n")
    return target


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
