"""Accuracy, per-language averaged EER and the LRE17 C_avg cost."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

LLR_CLAMP = 30.0


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    languages: list[str] | None = None
    trial_ids: list[str] | None = None

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=int)
        N, L = self.scores.shape
        if N < 1 or self.labels.shape != (N,):
            raise ValueError("need at least one trial and one label per trial")
        if np.any(self.labels < 0) or np.any(self.labels >= L):
            raise ValueError("labels out of range")
        if np.any(np.isnan(self.scores)):
            raise ValueError("scores contain NaN")
        if self.languages is None:
            self.languages = [f"lang{l}" for l in range(L)]
        if self.trial_ids is None:
            self.trial_ids = [str(i) for i in range(N)]

    @property
    def num_languages(self) -> int:
        return self.scores.shape[1]


@dataclass
class MetricsReport:
    accuracy: float
    eer: float
    c_avg: float
    eer_per_language: list = field(default_factory=list)
    c_avg_per_beta: dict = field(default_factory=dict)
    miss_per_language: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"accuracy={self.accuracy:.6f}", f"eer={self.eer:.6f}", f"c_avg={self.c_avg:.6f}"]
        lines += [f"c_avg_beta{b:g}={v:.6f}" for b, v in self.c_avg_per_beta.items()]
        return "\n".join(lines) + "\n"


def accuracy(s: ScoreSet) -> float:
    """Fraction of trials whose top score is the true language; ties go to the lowest index."""
    return float(np.mean(np.argmax(s.scores, axis=1) == s.labels))


def roc_points(tar, non) -> tuple[np.ndarray, np.ndarray]:
    """Operating points (p_miss, p_fa) over all thresholds; a score at or
    below the threshold is a miss/rejection."""
    tar = np.sort(np.asarray(tar, dtype=np.float64))
    non = np.sort(np.asarray(non, dtype=np.float64))
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([tar, non]))])
    p_miss = np.searchsorted(tar, thr, side="right") / tar.size
    p_fa = 1.0 - np.searchsorted(non, thr, side="right") / non.size
    return p_miss, p_fa


def _lower_hull(p_fa, p_miss):
    """Lower-left convex hull of ROC points, ordered by increasing p_fa."""
    pts = sorted(set(zip(p_fa.tolist(), p_miss.tolist())))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer_binary(tar, non) -> float:
    """Equal error rate on the ROC convex hull, interpolating linearly between
    the two hull points that bracket p_miss = p_fa."""
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValueError("EER needs target and non-target trials")
    p_miss, p_fa = roc_points(tar, non)
    hull = _lower_hull(p_fa, p_miss)
    for (f1, m1), (f2, m2) in zip(hull[:-1], hull[1:]):
        d1, d2 = m1 - f1, m2 - f2
        if d1 >= 0 >= d2:
            if d1 == d2:
                return m1
            t = d1 / (d1 - d2)
            return float(m1 + t * (m2 - m1))
    raise AssertionError("ROC hull does not cross the diagonal")


def eer(s: ScoreSet) -> tuple[float, list[float]]:
    per = []
    for l in range(s.num_languages):
        is_tar = s.labels == l
        if not is_tar.any() or is_tar.all():
            raise ValueError(f"language {l} needs both target and non-target trials")
        per.append(eer_binary(s.scores[is_tar, l], s.scores[~is_tar, l]))
    return float(np.mean(per)), per


def c_avg(s: ScoreSet, betas=(1.0, 9.0)) -> tuple[float, dict]:
    """Average detection cost at thresholds ln(beta); primary value is the mean over betas."""
    L = s.num_languages
    present = [l for l in range(L) if np.any(s.labels == l)]
    if len(present) < L:
        missing = sorted(set(range(L)) - set(present))
        raise ValueError(f"no trials for target languages {missing}")
    per_beta = {}
    for beta in betas:
        thr = np.log(beta)
        accept = s.scores > thr
        total = 0.0
        for lt in range(L):
            p_miss = 1.0 - accept[s.labels == lt, lt].mean()
            p_fa = sum(accept[s.labels == ln, lt].mean() for ln in range(L) if ln != lt)
            total += p_miss + beta * p_fa / (L - 1)
        per_beta[float(beta)] = total / L
    return float(np.mean(list(per_beta.values()))), per_beta


def to_llr(posteriors) -> np.ndarray:
    """Flat-prior detection log-likelihood ratios, clamped to +-30."""
    p = np.asarray(posteriors, dtype=np.float64)
    L = p.shape[-1]
    with np.errstate(divide="ignore"):
        llr = np.log(p) - np.log((1.0 - p) / (L - 1))
    return np.clip(np.nan_to_num(llr, nan=0.0, posinf=LLR_CLAMP, neginf=-LLR_CLAMP), -LLR_CLAMP, LLR_CLAMP)


def evaluate(s: ScoreSet, betas=(1.0, 9.0)) -> MetricsReport:
    e, per = eer(s)
    c, per_beta = c_avg(s, betas)
    return MetricsReport(accuracy(s), e, c, per, per_beta)


def write_scores(s: ScoreSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_id", "label", *s.languages])
        for tid, lab, row in zip(s.trial_ids, s.labels, s.scores):
            w.writerow([tid, int(lab), *(repr(float(v)) for v in row)])


def read_scores(path) -> ScoreSet:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["trial_id", "label"] or len(rows[0]) < 4:
        raise ValueError(f"{path}: not a score file")
    langs = rows[0][2:]
    body = rows[1:]
    return ScoreSet(np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), len(langs)),
                    np.array([int(r[1]) for r in body]), langs, [r[0] for r in body])


def language_table(s: ScoreSet, report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["language", "targets", "eer"])
    for l, name in enumerate(s.languages):
        w.writerow([name, int(np.sum(s.labels == l)), f"{report.eer_per_language[l]:.6f}"])
    return buf.getvalue()


def det_points(s: ScoreSet) -> str:
    """Raw (language, p_miss, p_fa) operating points as CSV for external plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["language", "p_miss", "p_fa"])
    for l, name in enumerate(s.languages):
        is_tar = s.labels == l
        pm, pf = roc_points(s.scores[is_tar, l], s.scores[~is_tar, l])
        for a, b in zip(pm, pf):
            w.writerow([name, f"{a:.6f}", f"{b:.6f}"])
    return buf.getvalue()
