"""Error reports: relative L² errors of continuum averages, CSV output and comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLUMNS = ("scheme", "layers", "beta", "time", "error", "runtime_s")


class ReportFormatError(ValueError):
    """Malformed or mismatched errors.csv content."""


def relative_l2_error(U: np.ndarray, reference: np.ndarray, volumes: np.ndarray) -> float:
    """``sqrt(Σ|K|(U - Ū)²) / sqrt(Σ|K| Ū²)`` over the continuum regions."""
    U = np.asarray(U, dtype=float)
    ref = np.asarray(reference, dtype=float)
    w = np.asarray(volumes, dtype=float)
    if U.shape != ref.shape or U.shape != w.shape:
        raise ValueError(f"shape mismatch {U.shape}, {ref.shape}, {w.shape}")
    num = float(np.sum(w * (U - ref) ** 2))
    den = float(np.sum(w * ref**2))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num / den)


def _fmt_layers(layers) -> str:
    if layers is None:
        return ""
    return "inf" if math.isinf(layers) else f"{layers:g}"


def _fmt_opt(x) -> str:
    return "" if x is None else f"{x:g}"


def _parse_opt(text: str):
    text = text.strip()
    if text == "":
        return None
    return float(text)


@dataclass
class ErrorReport:
    """Errors of one scheme at each observation time."""

    scheme: str
    errors: dict[float, float]
    layers: float | None = None
    beta: float | None = None
    runtime_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_states(cls, scheme, states, reference, volumes, **kwargs) -> "ErrorReport":
        errs = {t: relative_l2_error(states[t], reference[t], volumes) for t in sorted(reference)}
        return cls(scheme, errs, **kwargs)

    def rows(self, timing: bool = True) -> list[dict]:
        rt = round(self.runtime_s, 3) if timing else 0.0
        return [
            {
                "scheme": self.scheme,
                "layers": _fmt_layers(self.layers),
                "beta": _fmt_opt(self.beta),
                "time": f"{t:g}",
                "error": repr(float(e)),
                "runtime_s": f"{rt:.3f}",
            }
            for t, e in sorted(self.errors.items())
        ]


def write_errors_csv(path, reports, timing: bool = True) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows(timing):
                w.writerow(row)
    return path


def read_errors_csv(path) -> list[dict]:
    """Rows of an errors.csv with numeric fields parsed (``None`` where empty)."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ReportFormatError(f"{path}: missing columns {missing}")
        rows = []
        for k, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        "scheme": row["scheme"],
                        "layers": _parse_opt(row["layers"]),
                        "beta": _parse_opt(row["beta"]),
                        "time": float(row["time"]),
                        "error": float(row["error"]),
                        "runtime_s": float(row["runtime_s"] or 0.0),
                    }
                )
            except (TypeError, ValueError) as exc:
                raise ReportFormatError(f"{path}:{k}: {exc}") from None
    return rows


@dataclass
class Comparison:
    time: float
    beta: float | None
    layers: float | None
    baseline: float
    candidate: float
    ratio: float
    passed: bool | None


def compare(baseline, candidate, threshold: float | None = None) -> list[Comparison]:
    """Per-time ratios ``baseline / candidate``.

    Both arguments are errors.csv paths or row lists. Candidate rows are
    matched to the baseline row with the same ``(beta, time)``; every
    candidate must find one. With ``threshold`` a row passes when the ratio
    is at least the threshold.
    """
    a = read_errors_csv(baseline) if isinstance(baseline, (str, Path)) else list(baseline)
    b = read_errors_csv(candidate) if isinstance(candidate, (str, Path)) else list(candidate)
    for rows, name in ((a, "baseline"), (b, "candidate")):
        if any("time" not in r for r in rows):
            raise ReportFormatError(f"{name} report lacks a time column")
    base: dict = {}
    for r in a:
        key = (r.get("beta"), r["time"])
        if key in base:
            raise ReportFormatError(f"baseline has several rows for beta={key[0]}, time={key[1]:g}")
        base[key] = r["error"]
    times_a = {t for _, t in base}
    times_b = {r["time"] for r in b}
    if times_a != times_b:
        raise ReportFormatError(f"observation times differ: {sorted(times_a)} vs {sorted(times_b)}")
    out = []
    for r in b:
        key = (r.get("beta"), r["time"])
        if key not in base:
            raise ReportFormatError(f"no baseline row for beta={key[0]}, time={key[1]:g}")
        e0, e1 = base[key], r["error"]
        if e1 == 0.0:
            ratio = 1.0 if e0 == 0.0 else math.inf
        else:
            ratio = e0 / e1
        passed = None if threshold is None else bool(ratio >= threshold)
        out.append(Comparison(r["time"], key[0], r.get("layers"), e0, e1, ratio, passed))
    return out


def format_comparison(rows: list[Comparison]) -> str:
    lines = ["time,beta,layers,baseline,candidate,ratio,verdict"]
    for c in rows:
        verdict = "" if c.passed is None else ("pass" if c.passed else "fail")
        lines.append(
            f"{c.time:g},{_fmt_opt(c.beta)},{_fmt_layers(c.layers)},{c.baseline:.6g},"
            f"{c.candidate:.6g},{c.ratio:.6g},{verdict}"
        )
    return "\n".join(lines)
