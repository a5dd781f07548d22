"""Metrics CSV and summary JSON emission.

CSV columns (fixed order): k,eps_k,tau_k,R,S,S_delayed,V,td_error,
lemma3_slack,lemma4_slack.  NaN is encoded as an empty field; floats are
written in decimal notation with 12 significant digits.
"""

import csv
import json
import math

import numpy as np

CSV_COLUMNS = ("k", "eps_k", "tau_k", "R", "S", "S_delayed", "V",
               "td_error", "lemma3_slack", "lemma4_slack")


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return ""
    return np.format_float_positional(v, precision=12, unique=False,
                                      fractional=False, trim="0")


def emit_metrics(traj, path):
    """Write a trajectory's records as CSV (header row mandatory)."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rec in traj.records:
                writer.writerow([_fmt(getattr(rec, col)) for col in CSV_COLUMNS])
    except OSError as exc:
        raise OSError(f"failed writing metrics CSV at {path}: {exc}") from exc


def read_metrics(path):
    """Read a metrics CSV back into a dict of numpy arrays (NaN for blanks)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header in {path}: {header}")
        cols = {name: [] for name in CSV_COLUMNS}
        for row in reader:
            for name, cell in zip(CSV_COLUMNS, row):
                cols[name].append(float(cell) if cell else math.nan)
    return {name: np.array(vals) for name, vals in cols.items()}


def emit_summary(analysis: dict, path):
    """Write the run summary JSON (scenario, seed, slope, r2, plateau,
    solved_mazes, admissibility)."""
    def _clean(obj):
        if isinstance(obj, dict):
            return {k: _clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [_clean(v) for v in obj]
        if isinstance(obj, (np.floating, float)):
            v = float(obj)
            return None if math.isnan(v) else v
        if isinstance(obj, (np.integer,)):
            return int(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        return obj

    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_clean(analysis), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed writing summary JSON at {path}: {exc}") from exc
