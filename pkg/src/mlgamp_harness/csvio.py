"""CSV files of experiment records, SE traces and comparisons"""

from typing import Iterable, List, Optional, Sequence
import csv

from mlgamp.stateevo import SEBreakdown, SeState
from mlgamp_harness.harness import ExperimentDiverged, ExperimentRecord, Summary, to_db

RUN_HEADER = ["trial", "iter", "nmse", "nmse_db", "ser", "se_mse", "se_mse_db"]
COMPARE_HEADER = ["iter", "nmse", "nmse_db", "ser", "se_mse", "se_mse_db", "se_ser", "gap_db"]


def format_real(value: Optional[float]) -> str:
    if value is None:
        return ""
    return "%.17g" % value


def parse_real(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def _writer(f):
    return csv.writer(f, lineterminator="\n")


def write_records(
    filename: str,
    records: Iterable[ExperimentRecord],
    divergence: Optional[ExperimentDiverged] = None,
) -> None:
    """One row per trial and iteration; a divergence adds a row of NaNs for its trial"""
    with open(filename, "w", newline="", encoding="utf-8") as f:
        w = _writer(f)
        w.writerow(RUN_HEADER)
        for r in records:
            w.writerow(
                [
                    r.trial,
                    r.iteration,
                    format_real(r.nmse),
                    format_real(r.nmse_db),
                    format_real(r.ser),
                    format_real(r.se_mse),
                    format_real(r.se_mse_db),
                ]
            )
        if divergence is not None:
            iteration = divergence.iteration or ""
            w.writerow([divergence.trial, iteration] + ["nan"] * 5)


def read_records(filename: str) -> List[ExperimentRecord]:
    with open(filename, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RUN_HEADER:
            raise ValueError(f"{filename}: unexpected header {reader.fieldnames}")
        return [
            ExperimentRecord(
                trial=int(row["trial"]),
                iteration=int(row["iter"]),
                nmse=float(row["nmse"]),
                nmse_db=float(row["nmse_db"]),
                ser=parse_real(row["ser"]),
                se_mse=float(row["se_mse"]),
                se_mse_db=float(row["se_mse_db"]),
            )
            for row in reader
        ]


def se_header(n_layers: int) -> List[str]:
    header = ["iter", "mse", "mse_db"]
    for l in range(1, n_layers + 1):
        header += [f"V_{l}", f"q_{l}", f"Sigma_{l}", f"d_{l}"]
    return header


def write_se_trace(
    filename: str,
    states: Sequence[SeState],
    n_layers: int,
    breakdown: Optional[SEBreakdown] = None,
) -> None:
    """One row per SE iteration; a breakdown adds a row of NaNs at its iteration"""
    with open(filename, "w", newline="", encoding="utf-8") as f:
        w = _writer(f)
        w.writerow(se_header(n_layers))
        for s in states:
            row = [str(s.t), format_real(s.mse), format_real(to_db(s.mse))]
            for l in range(n_layers):
                row += [format_real(x) for x in (s.v[l], s.q[l], s.sigma[l], s.d[l])]
            w.writerow(row)
        if breakdown is not None:
            w.writerow([str(breakdown.iteration)] + ["nan"] * (2 + 4 * n_layers))


def write_comparison(filename: str, summary: Summary) -> None:
    with open(filename, "w", newline="", encoding="utf-8") as f:
        w = _writer(f)
        w.writerow(COMPARE_HEADER)
        for i, t in enumerate(summary.iterations):
            w.writerow(
                [
                    t,
                    format_real(summary.mean_nmse[i]),
                    format_real(summary.mean_nmse_db[i]),
                    format_real(summary.ser[i]),
                    format_real(summary.se_mse[i]),
                    format_real(summary.se_mse_db[i]),
                    format_real(summary.se_ser[i]),
                    format_real(summary.gap_db[i]),
                ]
            )
