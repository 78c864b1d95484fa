# data_handler.py
"""Reading and writing of model documents, result CSVs and run manifests."""
import hashlib
import io
import json
import logging
import math
import os
import platform
import sys
from datetime import datetime, timezone

import numpy as np
import pandas as pd
import scipy
import yaml

from errors import SchemaError, ValidationError
from model import load_model
from scaling import load_scaling

logger = logging.getLogger(__name__)

VERSION = "0.3.0"
YAML_SUFFIXES = (".yaml", ".yml")

SENSITIVITY_COLUMNS = [
    "parameter", "method", "estimate", "stderr", "n",
    "part_continuous", "part_continuous_stderr", "part_discrete", "part_discrete_stderr", "wall_time_s",
]


# --- Documents ---

def read_document(path) -> dict:
    """Loads a JSON document, or YAML when the file ends in .yaml/.yml."""
    try:
        with open(path, encoding="utf-8") as fh:
            if str(path).lower().endswith(YAML_SUFFIXES):
                document = yaml.safe_load(fh)
            else:
                document = json.load(fh)
    except OSError as e:
        raise ValidationError(f"{path}: cannot read file ({e.strerror or e})") from e
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise SchemaError(f"{path}: not a valid document ({e})") from e
    if not isinstance(document, dict):
        raise SchemaError(f"{path}: top level must be an object")
    return document


def document_text(document) -> str:
    return json.dumps(document, indent=2, ensure_ascii=False) + "\n"


def write_document(path, document):
    if str(path).lower().endswith(YAML_SUFFIXES):
        text = yaml.safe_dump(document, sort_keys=False, allow_unicode=True)
    else:
        text = document_text(document)
    write_text(path, text)
    logger.info("wrote %s", path)


def load_model_file(path):
    return load_model(read_document(path))


def load_scaling_file(path, network):
    return load_scaling(read_document(path), network)


def load_experiment_config(path) -> dict:
    """Experiment options keyed by long flag name, dashes folded to underscores."""
    document = read_document(path)
    return {str(key).lstrip("-").replace("-", "_"): value for key, value in document.items()}


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- CSV ---

def format_number(value) -> str:
    """Shortest text that reparses to the same number; blank for missing values (None, NaN)."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return ""
        if value.is_integer() and abs(value) < 2 ** 53:
            return str(int(value))
        return repr(value)
    return str(value)


def seed_line(seed) -> str:
    return f"# seed=0x{int(seed):016X}\n"


def csv_text(df: pd.DataFrame, seed=None) -> str:
    """RFC-4180 CSV with a leading ``# seed=...`` comment line."""
    text = df.astype(object).apply(lambda col: col.map(format_number))
    buf = io.StringIO()
    if seed is not None:
        buf.write(seed_line(seed))
    text.to_csv(buf, index=False, lineterminator="\n")
    return buf.getvalue()


def write_csv(path, df: pd.DataFrame, seed=None):
    """Writes to ``path``, or to stdout when ``path`` is None or "-"."""
    write_text(path, csv_text(df, seed))
    if path not in (None, "-"):
        logger.info("wrote %d rows to %s", len(df), path)


def read_csv(path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, comment="#")
    except FileNotFoundError as e:
        raise ValidationError(f"{path}: cannot read file") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path}: not a valid CSV ({e})") from e


def read_seed(path):
    """Seed from the header comment line, or None."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("# seed="):
        return int(first.split("=", 1)[1], 0)
    return None


def write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# --- Result tables ---

def summary_frame(grid, records, species_names) -> pd.DataFrame:
    """Per grid point mean / variance / stderr of every species over paths.

    ``records`` has shape (paths, G, S).
    """
    records = np.asarray(records, dtype=float)
    count = records.shape[0]
    mean = records.mean(axis=0)
    var = records.var(axis=0, ddof=1) if count > 1 else np.zeros_like(mean)
    columns = {"t": np.asarray(grid, dtype=float)}
    for i, name in enumerate(species_names):
        columns[f"{name}_mean"] = mean[:, i]
        columns[f"{name}_var"] = var[:, i]
        columns[f"{name}_stderr"] = np.sqrt(var[:, i] / count)
    df = pd.DataFrame(columns)
    df["count"] = count
    return df


def trajectory_frame(grid, records, species_names) -> pd.DataFrame:
    """Raw paths in long format: ``path_id,t,<species...>``."""
    records = np.asarray(records, dtype=float)
    n, G, S = records.shape
    df = pd.DataFrame(records.reshape(n * G, S), columns=list(species_names))
    df.insert(0, "t", np.tile(np.asarray(grid, dtype=float), n))
    df.insert(0, "path_id", np.repeat(np.arange(n), G))
    return df


def trajectory_blocks(grid, records, species_names) -> str:
    """Raw paths as one ``t,<species...>`` block per path, blocks separated by a blank line."""
    blocks = []
    for path in np.asarray(records, dtype=float):
        df = pd.DataFrame(path, columns=list(species_names))
        df.insert(0, "t", np.asarray(grid, dtype=float))
        blocks.append(csv_text(df))
    return "\n".join(blocks)


def histogram_frame(support, counts) -> pd.DataFrame:
    return pd.DataFrame({"value": np.asarray(support, dtype=np.int64), "count": np.asarray(counts, dtype=np.int64)})


def sensitivity_frame(estimates, timings=False) -> pd.DataFrame:
    rows = [e.to_row() for e in estimates]
    df = pd.DataFrame(rows, columns=SENSITIVITY_COLUMNS)
    if not timings:
        df["wall_time_s"] = None
    return df


def read_sensitivity_csv(path) -> pd.DataFrame:
    df = read_csv(path)
    missing = [c for c in ("parameter", "estimate", "stderr") if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    return df


def distribution_frame(result, species_names) -> pd.DataFrame:
    return result.frame(species_names)


# --- Run manifest ---

def _versions():
    return {
        "hybridsens": VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
    }


def build_manifest(command, inputs, seed, options, wall_times, extra=None) -> dict:
    """Inputs are hashed so a manifest pins the exact files a run consumed."""
    files = {}
    for role, path in inputs.items():
        if path:
            files[role] = {"path": str(path), "sha256": file_digest(path)}
    manifest = {
        "command": command,
        "created": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        "seed": f"0x{int(seed):016X}" if seed is not None else None,
        "inputs": files,
        "options": {k: v for k, v in options.items() if _jsonable(v)},
        "versions": _versions(),
        "wall_times_s": wall_times,
    }
    if extra:
        manifest.update(extra)
    return manifest


def manifest_path(out):
    if out in (None, "-"):
        return None
    root, _ = os.path.splitext(out)
    return root + ".manifest.json"


def write_manifest(out, manifest):
    path = manifest_path(out)
    if path is None:
        logger.debug("no output file; manifest not written")
        return None
    write_text(path, json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _jsonable(value):
    try:
        json.dumps(value, default=_json_default)
        return True
    except TypeError:
        return False


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not serialisable: {type(value).__name__}")
