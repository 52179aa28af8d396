"""Deterministic CSV output: header row, RFC-4180 quoting, 17 significant digits."""

import csv
import os
import tempfile

import numpy as np

from ..models import fmt


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else fmt(v)
    return v


def write_csv(path, header, rows):
    """Write atomically: a temporary file in the target directory is renamed into place."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_text(path, text):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def trace_rows(coord_names, means, stds, extra=None):
    """Header and rows of a wide trace: t, mean_<c>, sd_<c> per coordinate, then extra columns."""
    extra = extra or {}
    header = ["t"] + [f"mean_{c}" for c in coord_names] + [f"sd_{c}" for c in coord_names] + list(extra)
    rows = []
    for t in range(means.shape[0]):
        rows.append([t + 1, *means[t], *stds[t], *(np.asarray(v)[t] for v in extra.values())])
    return header, rows


def write_filter_trace(path, trace, series=None):
    extra = {"ess": trace.ess, "n_components": trace.n_components}
    if series is not None:
        extra["scaled_joint"] = series
    header, rows = trace_rows(trace.coord_names, trace.means, trace.stds, extra)
    return write_csv(path, header, rows)


def write_pool_trace(path, trace):
    """Long pool trace: one row per (t, run) with score, ancestor, tempered flag and marginals."""
    names = trace.coord_names
    header = (["t", "run_id", "ancestor_id", "score", "tempered"]
              + [f"mean_{c}" for c in names] + [f"sd_{c}" for c in names])
    N, n, _ = trace.means.shape
    rows = []
    for t in range(n):
        for i in range(N):
            rows.append([t + 1, i, int(trace.ancestors[i, t]), trace.scores[i, t], bool(trace.tempered[i, t]),
                         *trace.means[i, t], *trace.stds[i, t]])
    return write_csv(path, header, rows)


def write_pool_summary(path, trace):
    header, rows = trace_rows(trace.coord_names, trace.pool_mean, trace.pool_std)
    return write_csv(path, header, rows)


def write_events(path, trace):
    header = ["t", "probabilities", "ancestors"]
    rows = [[ev.t, " ".join(fmt(p) for p in ev.probabilities), " ".join(str(int(a)) for a in ev.ancestors)]
            for ev in trace.events]
    return write_csv(path, header, rows)


def long_format(rows, z=1.96):
    """Wide trace rows (dicts with mean_<c>/sd_<c>) -> (series, t, mean, lo, hi) tuples."""
    if not rows:
        return []
    coords = [k[5:] for k in rows[0] if k.startswith("mean_")]
    out = []
    for c in coords:
        for r in rows:
            m = r[f"mean_{c}"]
            s = r.get(f"sd_{c}", "")
            if m == "":
                continue
            mv = float(m)
            sv = float(s) if s != "" else 0.0
            out.append((c, int(r["t"]), mv, mv - z * sv, mv + z * sv))
    return out


def export_long(src, dst, prefix=""):
    """Convert a wide trace CSV into plot-ready long format."""
    rows = long_format(read_csv(src))
    return write_csv(dst, ["series", "t", "mean", "lo", "hi"],
                     [(prefix + s, t, m, lo, hi) for s, t, m, lo, hi in rows])
