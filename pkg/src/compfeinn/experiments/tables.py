"""CSV output with a fixed float format so reruns compare byte for byte."""

import csv
import math
import os

import numpy as np


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return "%.17g" % value
    return "" if value is None else str(value)


def write_csv(path, columns, rows):
    """Write dict rows; missing entries become empty cells."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    return path


def read_csv(path):
    """Rows as dicts; numeric cells converted to float."""
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                try:
                    row[k] = float(v)
                except (TypeError, ValueError):
                    row[k] = v
            out.append(row)
    return out


def fitted_slope(h, e):
    """Least-squares slope of log e against log h over finite positive entries."""
    h, e = np.asarray(h, dtype=float), np.asarray(e, dtype=float)
    ok = np.isfinite(e) & (e > 0) & np.isfinite(h) & (h > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0])


def pairwise_rates(h, e):
    """Observed order between consecutive rows; nan for the first."""
    h, e = np.asarray(h, dtype=float), np.asarray(e, dtype=float)
    rates = [float("nan")]
    for i in range(1, len(h)):
        with np.errstate(divide="ignore", invalid="ignore"):
            rates.append(float(np.log(e[i - 1] / e[i]) / np.log(h[i - 1] / h[i])))
    return rates


def seed_statistics(rows, keys):
    """median/min/max rows over the numeric ``keys`` of per-seed rows."""
    out = []
    for name, fn in (("median", np.median), ("min", np.min), ("max", np.max)):
        row = {"seed": name}
        for k in keys:
            vals = np.array([r.get(k, np.nan) for r in rows], dtype=float)
            vals = vals[np.isfinite(vals)]
            row[k] = float(fn(vals)) if len(vals) else float("nan")
        out.append(row)
    return out
