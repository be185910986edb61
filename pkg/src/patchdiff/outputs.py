"""Run configuration and result persistence.

Configuration files are INI (``configparser``) with one section per topic;
every key is validated against a fixed schema so typos fail loudly.
Numbers are written with 17 significant digits, which round-trips IEEE
doubles exactly.
"""

import configparser
import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from .errors import UsageError

SUBCOMMANDS = ("solve", "sweep", "fit", "simulate", "verify")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    parts = [p for p in str(text).replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _bool(text):
    if isinstance(text, bool):
        return text
    val = str(text).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section, converter, default); None default means "no default"
SCHEMA = {
    "c": ("patch", float, None),
    "a1": ("patch", float, 0.05),
    "a2": ("patch", float, 0.3),
    "lambda": ("patch", float, 1.0),
    "kappa": ("solver", float, None),
    "n": ("solver", int, None),
    "tol": ("solver", float, 1e-10),
    "max_iter": ("solver", int, 20000),
    "precond": ("solver", str, "auto"),
    "c_list": ("sweep", _floats, None),
    "kappa_list": ("sweep", _floats, None),
    "d_list": ("sweep", _floats, (1 / 100, 1 / 200, 1 / 400)),
    "workers": ("sweep", int, 1),
    "input": ("fit", str, None),
    "kappa_star": ("fit", _floats, (0.0016, 0.002, 0.003, 0.005)),
    "drop": ("fit", float, 0.95),
    "resamples": ("fit", int, 100),
    "N": ("simulate", int, None),
    "paths": ("simulate", int, 64),
    "dt": ("simulate", float, None),
    "t_end": ("simulate", float, None),
    "records": ("simulate", int, 41),
    "mode": ("simulate", str, "stream"),
    "seed": ("run", int, 0),
    "out": ("run", str, None),
    "overwrite": ("run", _bool, False),
    "fast": ("run", _bool, False),
}

REQUIRED = {
    "solve": ("c", "kappa"),
    "sweep": (),
    "fit": ("input",),
    "simulate": ("c", "kappa", "N"),
    "verify": (),
}

# defaults that depend on the subcommand
SUBCOMMAND_DEFAULTS = {
    "solve": {"n": 200},
    "simulate": {"n": 128},
}


@dataclass
class RunConfig:
    subcommand: str
    values: dict
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        val = self.values.get(key)
        return default if val is None else val

    def echo(self):
        return {"subcommand": self.subcommand, "values": _jsonable(self.values),
                "sources": dict(self.sources)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _convert(key, raw):
    conv = SCHEMA[key][1]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for key '{key}': {raw!r} ({exc})") from None


def read_config_file(path):
    """Flat ``{key: raw string}`` from an INI file; rejects unknown keys and sections."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    sections = {s for s, _, _ in SCHEMA.values()}
    out = {}
    for section in parser.sections():
        if section not in sections:
            raise UsageError(f"unknown section '[{section}]' in {path}")
        for key, raw in parser.items(section):
            if key not in SCHEMA:
                raise UsageError(f"unknown key '{key}' in section [{section}] of {path}")
            if SCHEMA[key][0] != section:
                raise UsageError(f"key '{key}' belongs in section [{SCHEMA[key][0]}], "
                                 f"found in [{section}]")
            out[key] = raw
    return out


def parse_config(subcommand, file=None, flags=None):
    """Merge defaults, a config file and command-line flags (flags win).

    Raises
    ------
    UsageError
        Unknown subcommand or key, unconvertible value, or a missing required key.
    """
    if subcommand not in SUBCOMMANDS:
        raise UsageError(f"unknown subcommand '{subcommand}'")
    values, sources = {}, {}
    for key, (_, _, default) in SCHEMA.items():
        values[key] = default
        sources[key] = "default"
    for key, val in SUBCOMMAND_DEFAULTS.get(subcommand, {}).items():
        values[key] = val
    if file is not None:
        for key, raw in read_config_file(file).items():
            values[key] = _convert(key, raw)
            sources[key] = "file"
    for key, raw in (flags or {}).items():
        if raw is None:
            continue
        if key not in SCHEMA:
            raise UsageError(f"unknown key '{key}'")
        values[key] = _convert(key, raw)
        sources[key] = "flag"
    for key in REQUIRED[subcommand]:
        if values.get(key) is None:
            raise UsageError(f"missing required key '{key}' for '{subcommand}'")
    return RunConfig(subcommand, values, sources)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def fmt(value):
    """17 significant digits for floats; integers and strings unchanged."""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float) or type(value).__name__.startswith("float"):
        return format(float(value), ".17g")
    return str(value)


@dataclass
class Table:
    """A CSV table to be written by ``emit_outputs``."""

    columns: tuple
    rows: list


@dataclass
class Series:
    """Two-column whitespace-separated plot data."""

    x: list
    y: list
    header: str = ""


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST = "manifest.json"


def emit_outputs(results, directory, config=None, overwrite=False, extra=None):
    """Write ``results`` (name -> Table or Series) and a manifest into ``directory``.

    Returns
    -------
    list of str
        Paths written, manifest last.

    Raises
    ------
    FileExistsError
        ``directory`` already holds a manifest and ``overwrite`` is false.
    OSError
        Any write failure, re-raised with the offending path.
    """
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc
    manifest_path = os.path.join(directory, MANIFEST)
    if os.path.exists(manifest_path) and not overwrite:
        raise FileExistsError(f"{directory} already contains results; pass overwrite to replace")
    written, entries = [], []
    for name, obj in results.items():
        path = os.path.join(directory, name)
        try:
            with open(path, "w", newline="") as fh:
                if isinstance(obj, Table):
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(obj.columns)
                    for row in obj.rows:
                        w.writerow([fmt(v) for v in row])
                elif isinstance(obj, Series):
                    if obj.header:
                        fh.write(f"# {obj.header}\n")
                    for x, y in zip(obj.x, obj.y):
                        fh.write(f"{fmt(x)} {fmt(y)}\n")
                else:
                    raise TypeError(f"unsupported result type for {name}: {type(obj).__name__}")
        except OSError as exc:
            raise OSError(f"writing {path} failed: {exc}") from exc
        written.append(path)
        entries.append({"file": name, "sha256": _sha256(path)})
    manifest = {"created": time.strftime("%Y-%m-%dT%H:%M:%S"), "files": entries,
                "config": config.echo() if config is not None else None}
    if extra:
        manifest.update(_jsonable(extra))
    try:
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    except OSError as exc:
        raise OSError(f"writing {manifest_path} failed: {exc}") from exc
    written.append(manifest_path)
    return written


def read_table(path):
    """Read a CSV written by ``emit_outputs``; numeric cells become floats."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    out = []
    for row in body:
        rec = {}
        for key, cell in zip(header, row):
            try:
                rec[key] = float(cell)
            except ValueError:
                rec[key] = cell
        out.append(rec)
    return header, out


def verify_manifest(directory):
    """``True`` when every listed file exists and matches its hash."""
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    return all(_sha256(os.path.join(directory, e["file"])) == e["sha256"]
               for e in manifest["files"])
