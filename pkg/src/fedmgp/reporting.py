"""Deterministic CSV/JSON output of runs, comparisons and verification reports.

Every CSV starts with a ``# schema: <name>/<version>`` line, uses LF line
endings and prints floats with 9 significant digits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import mean_off_diagonal, selection_frequency_table, similarity_matrices

METRICS_SCHEMA = "fedmgp.metrics/1"
METRICS_COLUMNS = (
    "round", "client", "strategy", "loss_ce", "loss_div", "acc_local", "acc_base", "acc_novel",
    "hm", "cm", "min_snr", "alpha_g", "uplink_scalars",
)
SELECTION_SCHEMA = "fedmgp.selection_trace/1"
SELECTION_COLUMNS = ("round", "client", "modality", "policy", "draw", "rank", "group", "prob", "score")
FREQUENCY_SCHEMA = "fedmgp.selection_frequency/1"
SIMILARITY_SCHEMA = "fedmgp.similarity/1"
COMPARE_SCHEMA = "fedmgp.compare/1"
VERIFY_SCHEMA = "fedmgp.verify/1"
SUMMARY_SCHEMA = "fedmgp.summary/1"


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.9g" % v
    return str(value)


def csv_text(schema: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> tuple[str, list[dict]]:
    """Return ``(schema, rows)`` for a file written by :func:`csv_text`."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema: "):
            raise ValueError(f"{path}: missing schema line")
        rows = list(csv.DictReader(fh))
    return first[len("# schema: "):].strip(), rows


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- run outputs -------------------------------------------------------------------


def metrics_rows(records, strategy: str):
    for r in records:
        for c in sorted(r.metrics):
            m = r.metrics[c]
            loss = r.losses.get(c)
            yield (
                r.round, c, strategy,
                loss.ce if loss else None, loss.div if loss else None,
                m["local"], m["base"], m["novel"], m["hm"], m["cm"],
                r.snr["min"], r.alpha_g, r.uplink_scalars if c in r.losses else 0,
            )
        losses = [lb for lb in r.losses.values() if lb is not None]
        mm = r.mean_metrics
        yield (
            r.round, "mean", strategy,
            float(np.mean([lb.ce for lb in losses])) if losses else None,
            float(np.mean([lb.div for lb in losses])) if losses else None,
            mm["local"], mm["base"], mm["novel"], mm["hm"], mm["cm"],
            r.snr["min"], r.alpha_g, r.uplink_scalars * len(r.participants),
        )


def metrics_csv(records, strategy: str) -> str:
    """Per-client rows for every round followed by that round's ``mean`` row.

    ``uplink_scalars`` is per client on client rows and the round total on mean rows.
    """
    return csv_text(METRICS_SCHEMA, METRICS_COLUMNS, metrics_rows(records, strategy))


def selection_rows(records):
    for r in records:
        for c in sorted(r.selections):
            for m in ("text", "visual"):
                sel = r.selections[c][m]
                rank = {j: i for i, j in enumerate(sel.ranked)}
                for draw, j in enumerate(sel.selected):
                    prob = float(sel.probs[j]) if j < len(sel.probs) else None
                    score = float(sel.scores[j]) if sel.scores is not None else None
                    yield (r.round, c, m, sel.policy, draw, rank[j], j, prob, score)


def selection_csv(records) -> str:
    return csv_text(SELECTION_SCHEMA, SELECTION_COLUMNS, selection_rows(records))


def selection_frequency_csv(counts: dict, participants) -> str:
    """Counts and fractions per round, modality and group."""
    rows = []
    for m, table in counts.items():
        for r, row in enumerate(table):
            for j, n in enumerate(row):
                rows.append((r + 1, m, j, int(n), n / participants[r]))
    return csv_text(FREQUENCY_SCHEMA, ("round", "modality", "group", "count", "fraction"), rows)


def matrix_csv(M: np.ndarray) -> str:
    n = len(M)
    return csv_text(SIMILARITY_SCHEMA, ["row"] + [f"c{j}" for j in range(n)], ([i, *M[i]] for i in range(n)))


def similarity_files(client_prompts) -> dict[str, str]:
    out = {}
    rows = []
    if client_prompts[0].n_groups >= 2:
        for m, mats in similarity_matrices(client_prompts, "intra_client").items():
            for c, M in enumerate(mats):
                out[f"similarity/intra_{m}_client{c}.csv"] = matrix_csv(M)
                rows.append(("intra_client", m, c, mean_off_diagonal(M)))
    if len(client_prompts) >= 2:
        for m, mats in similarity_matrices(client_prompts, "inter_client").items():
            for j, M in enumerate(mats):
                out[f"similarity/inter_{m}_group{j}.csv"] = matrix_csv(M)
                rows.append(("inter_client", m, j, mean_off_diagonal(M)))
    out["similarity/summary.csv"] = csv_text(SIMILARITY_SCHEMA, ("scope", "modality", "index", "mean_off_diagonal"), rows)
    return out


def json_text(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def write_outputs(out_dir, files: dict[str, str]) -> dict[str, str]:
    """Write text files under ``out_dir`` and return their sha256 digests."""
    out_dir = Path(out_dir)
    digests = {}
    for name in sorted(files):
        path = out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(files[name])
        digests[name] = sha256_text(files[name])
    return digests


def write_manifest(out_dir, config: dict, digests: dict, started: str, finished: str, extra=None) -> Path:
    """Write ``manifest.json`` last and atomically, so a failed run never leaves one behind."""
    manifest = {
        "schema": "fedmgp.manifest/1",
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "started": started,
        "finished": finished,
        "files": digests,
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json_text(manifest))
    os.replace(tmp, path)
    return path


def frequency_from_records(records, n_groups: int):
    table = selection_frequency_table(records, n_groups)
    participants = [len(r.participants) for r in records]
    return table, selection_frequency_csv(table["counts"], participants)


def frequency_from_trace(trace_rows: list[dict], n_groups: int | None = None):
    """Rebuild per-round counts from ``selection_trace.csv`` rows."""
    if not trace_rows:
        raise ValueError("empty selection trace")
    rounds = sorted({int(r["round"]) for r in trace_rows})
    G = n_groups or 1 + max(int(r["group"]) for r in trace_rows)
    counts = {m: np.zeros((len(rounds), G), dtype=int) for m in ("text", "visual")}
    clients = {t: set() for t in rounds}
    index = {t: i for i, t in enumerate(rounds)}
    for r in trace_rows:
        t = int(r["round"])
        counts[r["modality"]][index[t], int(r["group"])] += 1
        clients[t].add(r["client"])
    participants = [len(clients[t]) for t in rounds]
    never = [(m, j) for m in counts for j in range(G) if counts[m][:, j].sum() == 0]
    return {"counts": counts, "never_selected": never}, selection_frequency_csv(counts, participants)
