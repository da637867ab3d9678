"""Ranking accuracy, case taxonomy, gradient allocation, gradient checks, and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy import stats as _stats

from .core import ScoredInstance
from .errors import ValidationError
from .fileio import fmt_float
from .methods import (
    METHOD_NAMES,
    MethodConfig,
    MethodSpec,
    evaluate_batch,
    evaluate_scored_batch,
    loss_grad,
    registry_lookup,
)

HIST_BINS = 50


# --- ranking and cases ----------------------------------------------------


def ranking_accuracy(scored: Sequence[ScoredInstance], mode: str = "raw", beta: float = 1.0) -> float:
    """Fraction of pairs where the chosen response strictly wins; ties count as wrong.

    ``raw`` compares log-probabilities directly; ``length_normalized``
    compares the per-token scores ``beta * logp / length``.
    """
    if not scored:
        raise ValidationError("empty dataset")
    if mode == "raw":
        wins = sum(s.logp_chosen > s.logp_rejected for s in scored)
    elif mode == "length_normalized":
        wins = sum(
            (beta / s.instance.chosen_length) * s.logp_chosen - (beta / s.instance.rejected_length) * s.logp_rejected
            > 0.0
            for s in scored
        )
    else:
        raise ValidationError(f"unknown ranking mode {mode!r}")
    return wins / len(scored)


@dataclass(frozen=True)
class CaseLabel:
    case_id: int
    correctly_ranked: bool
    above_margin: bool


def classify_case(r: float, gamma: float) -> CaseLabel:
    """Place ``(r, gamma)`` in one of four regions.

    Correct means ``r > 0`` (so ``r == 0`` is incorrect); above means
    ``r >= gamma``. Case 1: correct and above; 2: correct, below; 3:
    incorrect, above; 4: incorrect, below.
    """
    if not (math.isfinite(r) and math.isfinite(gamma)):
        raise ValidationError("non-finite argument")
    correct = r > 0.0
    above = r >= gamma
    case_id = {(True, True): 1, (True, False): 2, (False, True): 3, (False, False): 4}[(correct, above)]
    return CaseLabel(case_id, correct, above)


def case_counts(scores: Sequence[float], margins: Sequence[float]) -> list:
    counts = [0, 0, 0, 0]
    for r, g in zip(scores, margins):
        counts[classify_case(r, g).case_id - 1] += 1
    return counts


def split_means(scores: Sequence[float], d_theta: Sequence[float]) -> tuple:
    """Mean ``d_theta`` over misranked (``r <= 0``) and correctly ranked instances.

    An empty partition gives ``None``.
    """
    bad = [d for r, d in zip(scores, d_theta) if not r > 0.0]
    good = [d for r, d in zip(scores, d_theta) if r > 0.0]
    return (math.fsum(bad) / len(bad) if bad else None, math.fsum(good) / len(good) if good else None)


def gradient_allocation(scored_batch: Sequence[ScoredInstance], method: MethodSpec) -> tuple:
    """``(mean d_theta over misranked, mean d_theta over correct)`` for one batch."""
    if not scored_batch:
        raise ValidationError("empty batch")
    if not method.has_margin:
        raise ValidationError(f"{method.name} has no margin")
    ev = evaluate_scored_batch(method, scored_batch)
    return split_means(ev.scores, ev.d_theta)


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    if len(a) < 2:
        return None
    if np.ptp(np.asarray(a, dtype=float)) == 0.0 or np.ptp(np.asarray(b, dtype=float)) == 0.0:
        return None
    return float(_stats.spearmanr(a, b).statistic)


# --- gradient check -------------------------------------------------------

FD_STEP = 1e-5
_EPS = np.finfo(float).eps


def _random_config(name: str, rng: np.random.Generator) -> MethodConfig:
    return MethodConfig(
        beta=float(rng.uniform(0.1, 3.0)),
        gamma_const=float(rng.uniform(0.0, 2.0)),
        tau=float(rng.uniform(0.25, 4.0)),
        lambda_sft=float(rng.uniform(0.0, 2.0)),
        lambda_w=float(rng.uniform(0.5, 2.0)),
        lambda_l=float(rng.uniform(0.5, 2.0)),
        focal_gamma=float(rng.uniform(0.0, 3.0)),
        alpha=float(rng.uniform(0.0, 0.3)),
    )


def _random_batch(rng: np.random.Generator, n: int) -> dict:
    return {
        "a_w": rng.uniform(-20.0, -0.01, n).tolist(),
        "a_l": rng.uniform(-20.0, -0.01, n).tolist(),
        "len_w": rng.integers(1, 51, n).tolist(),
        "len_l": rng.integers(1, 51, n).tolist(),
        "c_w": rng.uniform(-20.0, -0.01, n).tolist(),
        "c_l": rng.uniform(-20.0, -0.01, n).tolist(),
        "delta_r": rng.standard_normal(n).tolist(),
    }


def _fd_partial(f, x, h=FD_STEP):
    """Central difference plus the floating-point noise floor of that difference."""
    f_plus, f_minus = f(x + h), f(x - h)
    noise = 4.0 * _EPS * max(abs(f_plus), abs(f_minus), abs(f(x))) / (2.0 * h)
    return (f_plus - f_minus) / (2.0 * h), noise


def check_instance(spec: MethodSpec, a_w, a_l, margin, len_w, len_l, c_w, c_l, z_ref, tol):
    """Compare analytic partials to central differences at one point.

    Returns ``(max relative error, kink, detail)``; the FD stencil's own
    rounding noise is subtracted before the relative comparison.
    """
    g = loss_grad(spec, a_w, a_l, margin, len_w, len_l, c_w, c_l, z_ref)
    if spec.name == "slic":
        arg = 1.0 - spec.config.tau * (a_w - a_l - margin)
        if g.kink or abs(arg) <= 2.0 * spec.config.tau * FD_STEP:
            return 0.0, True, {}
    fw, nw = _fd_partial(lambda x: loss_grad(spec, x, a_l, margin, len_w, len_l, c_w, c_l, z_ref).loss, a_w)
    fl, nl = _fd_partial(lambda x: loss_grad(spec, a_w, x, margin, len_w, len_l, c_w, c_l, z_ref).loss, a_l)
    worst = 0.0
    for analytic, numeric, noise in ((g.d_logp_w, fw, nw), (g.d_logp_l, fl, nl)):
        excess = max(0.0, abs(analytic - numeric) - noise)
        scale = max(abs(analytic), abs(numeric))
        err = 0.0 if excess == 0.0 else excess / scale
        worst = max(worst, err)
    detail = {"analytic": [g.d_logp_w, g.d_logp_l], "numeric": [fw, fl]}
    return worst, False, detail


@dataclass
class MethodCheck:
    method: str
    trials: int
    max_rel_error: float
    kinks: int
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class GradCheckReport:
    tol: float
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            out.append(
                f"{status} {r.method}: trials={r.trials} max_rel_error={r.max_rel_error:.3e} "
                f"kinks={r.kinks} tol={self.tol:g}"
            )
            for failure in r.failures:
                out.append(f"  offending instance: {json.dumps(failure, sort_keys=True)}")
        return out


def grad_check_method(
    name: str, trials: int = 100, tol: float = 1e-6, seed: int = 0, batch_size: Optional[int] = None, config=None
):
    if trials < 1:
        raise ValidationError("trials must be ≥ 1")
    rng = np.random.default_rng([seed, METHOD_NAMES.index(name) if name in METHOD_NAMES else 0])
    worst, kinks, failures = 0.0, 0, []
    for trial in range(trials):
        cfg = config or _random_config(name, rng)
        spec = registry_lookup(name, cfg)
        n = batch_size or int(rng.integers(1, 9))
        b = _random_batch(rng, n)
        ev = evaluate_batch(spec, b["a_w"], b["a_l"], b["len_w"], b["len_l"], b["c_w"], b["c_l"], b["delta_r"])
        z_ref = ev.z_ref or 0.0
        for i in range(n):
            args = (b["a_w"][i], b["a_l"][i], ev.margins[i], b["len_w"][i], b["len_l"][i], b["c_w"][i], b["c_l"][i])
            err, kink, detail = check_instance(spec, *args, z_ref, tol)
            if kink:
                kinks += 1
                continue
            worst = max(worst, err)
            if err > tol:
                failures.append(
                    {
                        "trial": trial,
                        "config": asdict(cfg),
                        "a_w": args[0],
                        "a_l": args[1],
                        "margin": args[2],
                        "len_w": args[3],
                        "len_l": args[4],
                        "c_w": args[5],
                        "c_l": args[6],
                        "z_ref": z_ref,
                        "rel_error": err,
                        **detail,
                    }
                )
    return MethodCheck(name, trials, worst, kinks, failures)


def grad_check(method: str = "all", trials: int = 100, tol: float = 1e-6, seed: int = 0, batch_size=None):
    if not tol > 0:
        raise ValidationError(f"tol must be positive, got {tol!r}")
    names = METHOD_NAMES if method == "all" else (method,)
    for name in names:
        registry_lookup(name)
    return GradCheckReport(tol, [grad_check_method(n, trials, tol, seed, batch_size) for n in names])


# --- run reports ----------------------------------------------------------

REPORT_COLUMNS = (
    "epoch",
    "split",
    "ranking_accuracy",
    "mean_loss",
    "mean_d_theta",
    "case1",
    "case2",
    "case3",
    "case4",
    "d_theta_misranked",
    "d_theta_correct",
    "margin_oracle_spearman",
)


@dataclass(frozen=True)
class ReportRow:
    epoch: int
    split: str
    ranking_accuracy: float
    mean_loss: float
    mean_d_theta: float
    case1: Optional[int]
    case2: Optional[int]
    case3: Optional[int]
    case4: Optional[int]
    d_theta_misranked: Optional[float]
    d_theta_correct: Optional[float]
    margin_oracle_spearman: Optional[float]

    @property
    def case_counts(self) -> Optional[list]:
        if self.case1 is None:
            return None
        return [self.case1, self.case2, self.case3, self.case4]


_INT_COLUMNS = {"epoch", "case1", "case2", "case3", "case4"}

def build_report_row(epoch, split, spec, logp_w, logp_l, scores, margins, losses, d_theta, oracle_gaps=None):
    """One report row from per-instance evaluations of a split."""
    n = len(scores)
    if n == 0:
        raise ValidationError("empty dataset")
    wins = sum(1 for w, l in zip(logp_w, logp_l) if w > l)
    counts = case_counts(scores, margins) if spec.has_margin else [None] * 4
    bad, good = split_means(scores, d_theta)
    rho = None
    if oracle_gaps is not None and spec.has_margin:
        rho = spearman(margins, oracle_gaps)
    return ReportRow(
        epoch=epoch,
        split=split,
        ranking_accuracy=wins / n,
        mean_loss=math.fsum(losses) / n,
        mean_d_theta=math.fsum(abs(d) for d in d_theta) / n,
        case1=counts[0],
        case2=counts[1],
        case3=counts[2],
        case4=counts[3],
        d_theta_misranked=bad,
        d_theta_correct=good,
        margin_oracle_spearman=rho,
    )


def evaluate_scored_in_batches(spec: MethodSpec, scored: Sequence[ScoredInstance], batch_size: int):
    """Concatenated (scores, margins, losses, d_theta) over consecutive batches."""
    scores, margins, losses, d_theta = [], [], [], []
    for start in range(0, len(scored), batch_size):
        ev = evaluate_scored_batch(spec, scored[start : start + batch_size])
        scores += ev.scores
        margins += ev.margins
        losses += ev.losses
        d_theta += ev.d_theta
    return scores, margins, losses, d_theta


def scored_report_row(epoch, split, spec, scored, batch_size):
    scores, margins, losses, d_theta = evaluate_scored_in_batches(spec, scored, batch_size)
    gaps = [s.instance.oracle_gap for s in scored]
    return build_report_row(
        epoch,
        split,
        spec,
        [s.logp_chosen for s in scored],
        [s.logp_rejected for s in scored],
        scores,
        margins,
        losses,
        d_theta,
        None if any(g is None for g in gaps) else gaps,
    )



def format_report(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        cells = []
        for name in REPORT_COLUMNS:
            value = getattr(row, name)
            if value is None:
                cells.append("")
            elif name in _INT_COLUMNS:
                cells.append(str(int(value)))
            elif name == "split":
                cells.append(value)
            else:
                cells.append(fmt_float(value))
        writer.writerow(cells)
    return buf.getvalue()


def parse_report(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise ValidationError(f"report must have columns {', '.join(REPORT_COLUMNS)}")
    rows = []
    for raw in reader:
        values = {}
        for f in fields(ReportRow):
            cell = raw[f.name]
            if f.name == "split":
                values[f.name] = cell
            elif cell == "":
                values[f.name] = None
            elif f.name in _INT_COLUMNS:
                values[f.name] = int(cell)
            else:
                values[f.name] = float(cell)
        rows.append(ReportRow(**values))
    return rows


@dataclass(frozen=True)
class Histogram:
    epoch: int
    split: str
    quantity: str
    bin_edges: tuple
    counts: tuple
    skewness: Optional[float]


def histogram(epoch: int, split: str, quantity: str, values, bins: int = HIST_BINS) -> Histogram:
    values = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins)
    skew = None
    if values.size > 2 and np.ptp(values) > 0:
        skew = float(_stats.skew(values))
    return Histogram(epoch, split, quantity, tuple(edges.tolist()), tuple(int(c) for c in counts), skew)


HIST_COLUMNS = ("epoch", "split", "quantity", "skewness", "bin", "bin_lo", "bin_hi", "count")


def format_histograms(hists: Sequence[Histogram]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HIST_COLUMNS)
    for h in hists:
        for i, c in enumerate(h.counts):
            writer.writerow(
                [h.epoch, h.split, h.quantity, fmt_float(h.skewness), i, fmt_float(h.bin_edges[i]),
                 fmt_float(h.bin_edges[i + 1]), c]
            )
    return buf.getvalue()


def parse_histograms(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != HIST_COLUMNS:
        raise ValidationError(f"histogram CSV must have columns {', '.join(HIST_COLUMNS)}")
    groups = {}
    for raw in reader:
        key = (int(raw["epoch"]), raw["split"], raw["quantity"])
        g = groups.setdefault(key, {"skew": raw["skewness"], "edges": [], "counts": []})
        if not g["edges"]:
            g["edges"].append(float(raw["bin_lo"]))
        g["edges"].append(float(raw["bin_hi"]))
        g["counts"].append(int(raw["count"]))
    return [
        Histogram(k[0], k[1], k[2], tuple(g["edges"]), tuple(g["counts"]), None if g["skew"] == "" else float(g["skew"]))
        for k, g in groups.items()
    ]


CASE_COLUMNS = ("id", "r", "gamma", "case_id")


def format_cases(ids, scores, margins) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CASE_COLUMNS)
    for i, r, g in zip(ids, scores, margins):
        writer.writerow([i, fmt_float(r), fmt_float(g), classify_case(r, g).case_id])
    return buf.getvalue()

