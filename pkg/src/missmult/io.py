"""Record and covariate parsing, run configuration, and fit persistence.

Records are CSV rows with the header
``site_id, visit_id, individual_id, observed_class, validated_class``.
Identifiers may be any text; they are mapped to contiguous indices in
sorted order (numeric when every id parses as an integer).  Class labels
go through a label dictionary, one label per line, whose line order gives
the class index.  Without a dictionary the labels must be the integers
``1..C``.

Draws are stored one file per chain as CSV (``%.17g``, so values
round-trip exactly) with an optional little-endian binary twin.
"""
import csv
from dataclasses import asdict, dataclass, fields
import io as _io
import json
import logging
import os
import struct
import tempfile
import warnings

import numpy as np

from .gibbs import RunConfig
from .model import CovariateBundle, Hyperparameters, RecordTable
from .simgen import Scenario1Config, Scenario2Config

try:
    import tomllib
except ModuleNotFoundError:   # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
RECORD_COLUMNS = ("site_id", "visit_id", "individual_id", "observed_class", "validated_class")
BINARY_MAGIC = b"MISSMULT"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ConfigError(ValueError):
    """Malformed configuration file or option."""


# ---------------------------------------------------------------------------
# Small file helpers
# ---------------------------------------------------------------------------

def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` through a temp file and rename."""
    path = os.fspath(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    return header, [[c.strip() for c in r] for r in rows[1:]]


def _sorted_ids(values):
    uniq = set(values)
    try:
        return sorted(uniq, key=int)
    except ValueError:
        return sorted(uniq)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class RecordIndex:
    """Maps between file identifiers and engine indices."""
    sites: list          # site_id per site index
    visits: list         # per site, visit_id per visit index
    labels: list         # class label per class index
    individuals: list = None   # individual_id per record, in table order

    def to_dict(self):
        return asdict(self)


def read_labels(path):
    """Label dictionary: one label per non-empty line, in class order."""
    with open(path) as fh:
        labels = [line.strip() for line in fh if line.strip()]
    if not labels:
        raise DataError(f"{path}: label dictionary is empty")
    if len(set(labels)) != len(labels):
        raise DataError(f"{path}: duplicate labels in dictionary")
    return labels


def parse_records(path, labels=None):
    """Read an observation CSV into a :class:`RecordTable` and its index maps."""
    header, rows = _read_csv(path)
    missing = [c for c in RECORD_COLUMNS if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    if not rows:
        raise DataError(f"{path}: no records")
    col = {c: header.index(c) for c in RECORD_COLUMNS}

    if labels is None:
        seen = {r[col["observed_class"]] for r in rows} | {
            r[col["validated_class"]] for r in rows if r[col["validated_class"]]}
        try:
            C = max(int(s) for s in seen)
        except ValueError as exc:
            raise DataError(f"{path}: class labels are not integers and no "
                            "label dictionary was given") from exc
        labels = [str(i) for i in range(1, C + 1)]
    lookup = {lab: i for i, lab in enumerate(labels)}

    def klass(value, line, column):
        if value not in lookup:
            raise DataError(f"{path}: line {line}: unknown class label {value!r} in {column}")
        return lookup[value]

    site_ids = _sorted_ids(r[col["site_id"]] for r in rows)
    site_of = {s: i for i, s in enumerate(site_ids)}
    visit_ids = [[] for _ in site_ids]
    for r in rows:
        visit_ids[site_of[r[col["site_id"]]]].append(r[col["visit_id"]])
    visit_ids = [_sorted_ids(v) for v in visit_ids]
    visit_of = [{v: j for j, v in enumerate(vs)} for vs in visit_ids]

    site, visit, indiv, obs, val = [], [], [], [], []
    keys = set()
    for k, r in enumerate(rows):
        line = k + 2
        key = (r[col["site_id"]], r[col["visit_id"]], r[col["individual_id"]])
        if key in keys:
            raise DataError(f"{path}: line {line}: duplicate record {key}")
        keys.add(key)
        i = site_of[key[0]]
        site.append(i)
        visit.append(visit_of[i][key[1]])
        indiv.append(key[2])
        obs.append(klass(r[col["observed_class"]], line, "observed_class"))
        v = r[col["validated_class"]]
        val.append(klass(v, line, "validated_class") if v else -1)

    site = np.asarray(site, dtype=np.int64)
    visit = np.asarray(visit, dtype=np.int64)
    # individual position within its visit, following sorted ids
    individual = np.zeros(len(rows), dtype=np.int64)
    for (i, j) in {(a, b) for a, b in zip(site.tolist(), visit.tolist())}:
        sel = np.flatnonzero((site == i) & (visit == j))
        order = _sorted_ids([indiv[s] for s in sel])
        pos = {d: p for p, d in enumerate(order)}
        individual[sel] = [pos[indiv[s]] for s in sel]

    table = RecordTable(
        site=site, visit=visit, individual=individual,
        observed=np.asarray(obs, dtype=np.int64), validated=np.asarray(val, dtype=np.int64),
        visits_per_site=np.array([len(v) for v in visit_ids], dtype=np.int64), C=len(labels))
    return table, RecordIndex(sites=site_ids, visits=visit_ids, labels=list(labels),
                              individuals=indiv)


def format_records(table, index=None):
    """CSV text for a record table (1-based ids when ``index`` is None)."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    labels = index.labels if index else [str(c + 1) for c in range(table.C)]
    for s, v, i, y, z in zip(table.site, table.visit, table.individual,
                             table.observed, table.validated):
        sid = index.sites[s] if index else s + 1
        vid = index.visits[s][v] if index else v + 1
        w.writerow([sid, vid, i + 1, labels[y], labels[z] if z >= 0 else ""])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------

@dataclass
class Standardization:
    """Per-column centring and scaling applied to one covariate level."""
    names: list
    mean: list
    sd: list


def _numeric_block(path, rows, header, key_cols):
    names = [h for h in header if h not in key_cols]
    if not names:
        raise DataError(f"{path}: no covariate columns")
    idx = [header.index(n) for n in names]
    out = np.empty((len(rows), len(names)))
    for k, r in enumerate(rows):
        for j, c in enumerate(idx):
            try:
                out[k, j] = float(r[c])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: line {k + 2}: non-numeric value in "
                                f"column {names[j]!r}") from exc
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: non-finite covariate value")
    return names, out


def _standardize(path, names, x):
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1])
    bad = [n for n, s in zip(names, sd) if not s > 0]
    if bad:
        raise DataError(f"{path}: zero variance in column(s) {', '.join(bad)}")
    return (x - mean) / sd, Standardization(names, mean.tolist(), sd.tolist())


def _level_rows(path, header, rows, key_cols, wanted, level):
    """Match covariate rows to the wanted keys; extra keys are dropped."""
    for c in key_cols:
        if c not in header:
            raise DataError(f"{path}: missing key column {c}")
    kidx = [header.index(c) for c in key_cols]
    pos = {}
    for k, r in enumerate(rows):
        key = tuple(r[i] for i in kidx)
        if key in pos:
            raise DataError(f"{path}: line {k + 2}: duplicate {level} {key}")
        pos[key] = k
    absent = [w for w in wanted if w not in pos]
    if absent:
        raise DataError(f"{path}: no covariate row for {level} {absent[0]}")
    extra = len(pos) - len(wanted)
    if extra:
        log.warning("%s: ignored %d %s row(s) not present in the records", path, extra, level)
    return [rows[pos[w]] for w in wanted]


def parse_covariates(index, table, *, site_path=None, visit_path=None, indiv_path=None,
                     standardize=True):
    """Covariate bundle aligned with ``table``; an intercept column is prepended.

    Returns ``(bundle, standardization)`` where the second item maps each
    level to its :class:`Standardization` (or None).
    """
    N = len(index.sites)
    V = int(np.sum(table.visits_per_site))
    M = len(table)
    constants = {"site": None, "visit": None, "individual": None}

    def load(path, keys, wanted, level, n):
        if path is None:
            return np.ones((n, 1))
        header, rows = _read_csv(path)
        rows = _level_rows(path, header, rows, keys, wanted, level)
        names, x = _numeric_block(path, rows, header, keys)
        if standardize:
            x, constants[level] = _standardize(path, names, x)
        return np.column_stack([np.ones(n), x])

    x_site = load(site_path, ["site_id"], [(s,) for s in index.sites], "site", N)
    visits = [(index.sites[i], v) for i in range(N) for v in index.visits[i]]
    x_visit = load(visit_path, ["site_id", "visit_id"], visits, "visit", V)
    x_indiv = np.ones((M, 1))
    if indiv_path is not None:
        ids = [(index.sites[s], index.visits[s][v], i)
               for s, v, i in zip(table.site, table.visit, index.individuals)]
        x_indiv = load(indiv_path, ["site_id", "visit_id", "individual_id"], ids, "individual", M)
    return CovariateBundle(x_site, x_visit, x_indiv), constants


def format_covariates(x, keys, key_cols, prefix="x"):
    """CSV text for a covariate matrix without its intercept column."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(key_cols) + [f"{prefix}{j + 1}" for j in range(x.shape[1] - 1)])
    for key, row in zip(keys, x):
        w.writerow(list(key) + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_SECTIONS = {
    "model": {f.name for f in fields(Hyperparameters)},
    "run": {f.name for f in fields(RunConfig)},
    "scenario": ({f.name for f in fields(Scenario1Config)}
                 | {f.name for f in fields(Scenario2Config)} | {"kind"}),
    "data": {"standardize", "labels"},
    "study": {"variants", "prior", "workers"},
}


def parse_config(text, source="<config>"):
    """Parse TOML text into validated sections; unknown names are errors."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out = {name: {} for name in _SECTIONS}
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        unknown = sorted(set(body) - _SECTIONS[section])
        if unknown:
            raise ConfigError(f"{source}: unknown key(s) in [{section}]: {', '.join(unknown)}")
        out[section] = dict(body)
    return out


def load_config(path):
    if path is None:
        return parse_config("")
    with open(path) as fh:
        return parse_config(fh.read(), os.fspath(path))


def build_hyper(section, **override):
    try:
        return Hyperparameters(**{**section, **override})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc


def build_run(section, **override):
    try:
        return RunConfig(**{**section, **override})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[run]: {exc}") from exc


def build_scenario(section, kind=None):
    """Scenario config from a [scenario] section; ``kind`` overrides the file."""
    body = dict(section)
    file_kind = body.pop("kind", None)
    kind = int(kind if kind is not None else (file_kind or 1))
    if file_kind is not None and int(file_kind) != kind:
        raise ConfigError(f"scenario kind {file_kind} in file conflicts with {kind}")
    cls = {1: Scenario1Config, 2: Scenario2Config}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown scenario {kind}")
    allowed = {f.name for f in fields(cls)}
    bad = sorted(set(body) - allowed)
    if bad:
        raise ConfigError(f"[scenario]: key(s) {', '.join(bad)} do not apply to scenario {kind}")
    try:
        return cls(**body)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[scenario]: {exc}") from exc


def config_echo(obj):
    """JSON-ready dict of a dataclass config."""
    return json.loads(json.dumps(asdict(obj), default=_jsonable))


# ---------------------------------------------------------------------------
# Draw persistence
# ---------------------------------------------------------------------------

def _columns(shapes):
    cols = []
    for key, shape in shapes.items():
        if shape:
            cols += [key + "[" + ",".join(str(i + 1) for i in idx) + "]"
                     for idx in np.ndindex(*shape)]
        else:
            cols.append(key)
    return cols


def flatten_draws(draws):
    """Stack a draws dict into (S, K) floats; returns the matrix and layout."""
    keys = list(draws)
    S = next(iter(draws.values())).shape[0]
    shapes = {k: list(draws[k].shape[1:]) for k in keys}
    dtypes = {k: str(draws[k].dtype) for k in keys}
    mat = np.concatenate([np.asarray(draws[k], dtype=float).reshape(S, -1) for k in keys], axis=1)
    return mat, {"keys": keys, "shapes": shapes, "dtypes": dtypes}


def unflatten_draws(mat, layout):
    out, j = {}, 0
    S = mat.shape[0]
    for k in layout["keys"]:
        shape = tuple(layout["shapes"][k])
        size = int(np.prod(shape)) if shape else 1
        out[k] = mat[:, j:j + size].reshape((S,) + shape).astype(layout["dtypes"][k])
        j += size
    return out


def draws_to_csv(draws):
    mat, layout = flatten_draws(draws)
    cols = _columns({k: tuple(v) for k, v in layout["shapes"].items()})
    buf = _io.StringIO()
    buf.write(",".join(cols) + "\n")
    np.savetxt(buf, mat, fmt="%.17g", delimiter=",")
    return buf.getvalue(), layout


def draws_from_csv(text, layout):
    lines = text.splitlines()
    mat = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if len(lines) > 1 else np.empty((0, 0))
    return unflatten_draws(mat, layout)


def draws_to_binary(draws):
    """Versioned binary: magic, version, header length, JSON layout, then '<f8' rows."""
    mat, layout = flatten_draws(draws)
    head = json.dumps({"layout": layout, "shape": list(mat.shape)}).encode()
    return (BINARY_MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head
            + np.ascontiguousarray(mat, dtype="<f8").tobytes())


def draws_from_binary(blob):
    if blob[:len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise DataError("not a draws file (bad magic)")
    off = len(BINARY_MAGIC)
    version, n = struct.unpack("<II", blob[off:off + 8])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported draws format version {version}")
    head = json.loads(blob[off + 8:off + 8 + n])
    mat = np.frombuffer(blob[off + 8 + n:], dtype="<f8").reshape(head["shape"])
    return unflatten_draws(mat, head["layout"])


def summary_csv(rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "mean", "lower", "upper"])
    for name, *vals in rows:
        w.writerow([name] + ["%.17g" % v for v in vals])
    return buf.getvalue()


def read_summary_csv(path):
    header, rows = _read_csv(path)
    return {r[0]: tuple(float(v) for v in r[1:]) for r in rows}


def chain_file(directory, k, binary=False):
    return os.path.join(directory, f"chain_{k}.{'bin' if binary else 'csv'}")


def save_fit(directory, chains, *, meta, summary_rows, diagnostics, binary=False,
             keep=None):
    """Write a fit directory: draws per chain, summary, diagnostics and meta.

    ``keep`` optionally filters which draw keys are persisted.
    """
    os.makedirs(directory, exist_ok=True)
    layouts = []
    for k, ch in enumerate(chains):
        draws = {key: v for key, v in ch.draws.items() if keep is None or key in keep}
        text, layout = draws_to_csv(draws)
        atomic_write(chain_file(directory, k), text)
        if binary:
            atomic_write(chain_file(directory, k, True), draws_to_binary(draws))
        layouts.append(layout)
    atomic_write(os.path.join(directory, "summary.csv"), summary_csv(summary_rows))
    write_json(os.path.join(directory, "diagnostics.json"), diagnostics)
    write_json(os.path.join(directory, "fit.json"),
               {**meta, "format_version": FORMAT_VERSION, "layouts": layouts,
                "n_chains": len(chains)})


def load_fit(directory, binary=False):
    """Return ``(meta, [draws dict per chain])`` for a fit directory."""
    meta = read_json(os.path.join(directory, "fit.json"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{directory}: unsupported format version {meta.get('format_version')}")
    chains = []
    for k, layout in enumerate(meta["layouts"]):
        if binary:
            with open(chain_file(directory, k, True), "rb") as fh:
                chains.append(draws_from_binary(fh.read()))
        else:
            with open(chain_file(directory, k)) as fh:
                chains.append(draws_from_csv(fh.read(), layout))
    return meta, chains


def capture_warnings():
    """Send ``warnings.warn`` messages (such as dropped visits) to logging."""
    logging.captureWarnings(True)
    warnings.simplefilter("default")
