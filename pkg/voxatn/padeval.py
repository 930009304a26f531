"""Presentation-attack metrics (APCER, BPCER, D-EER), DET curves and protocol splits.

Decision rule everywhere: a presentation is called an attack iff score >= threshold.
Rates are percentages.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .cloudio import PointCloud
from .errors import DatasetError, ParseError, ProtocolError
from .schemas import ClassLabel, ProtocolMode, ProtocolSpec

logger = logging.getLogger(__name__)

DET_HEADER = ("threshold", "apcer", "bpcer")


@dataclass(frozen=True)
class ScoreEntry:
    score: float
    label: ClassLabel
    identity: str = ""
    source: str = ""


@dataclass
class ScoreSet:
    entries: List[ScoreEntry]

    def __post_init__(self):
        for e in self.entries:
            if not (0.0 <= e.score <= 1.0) or math.isnan(e.score):
                raise DatasetError(f"score {e.score!r} for identity {e.identity!r} is outside [0, 1]")
        if not any(e.label.is_attack for e in self.entries):
            raise DatasetError("score set has no attack presentations")
        if all(e.label.is_attack for e in self.entries):
            raise DatasetError("score set has no bona fide presentations")

    @classmethod
    def from_arrays(
        cls,
        scores: Sequence[float],
        labels: Sequence[ClassLabel],
        identities: Sequence[str] | None = None,
        sources: Sequence[str] | None = None,
    ) -> "ScoreSet":
        if len(scores) != len(labels):
            raise DatasetError(f"{len(scores)} scores but {len(labels)} labels")
        ids = list(identities) if identities is not None else [""] * len(scores)
        srcs = list(sources) if sources is not None else [""] * len(scores)
        return cls([ScoreEntry(float(s), l, i, p) for s, l, i, p in zip(scores, labels, ids, srcs)])

    def attack_scores(self) -> np.ndarray:
        return np.sort(np.array([e.score for e in self.entries if e.label.is_attack], dtype=np.float64))

    def bona_fide_scores(self) -> np.ndarray:
        return np.sort(np.array([e.score for e in self.entries if not e.label.is_attack], dtype=np.float64))


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    apcer: float
    bpcer: float


@dataclass
class EvalReport:
    d_eer: float
    threshold_at_eer: float
    bpcer_at_apcer_10: float
    bpcer_at_apcer_5: float
    det_points: List[DetPoint] = field(default_factory=list)


def _rates_at(attack: np.ndarray, bona: np.ndarray, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # attack and bona are sorted; counts of "< threshold" via left bisection
    apcer = 100.0 * np.searchsorted(attack, thresholds, side="left") / attack.size
    bpcer = 100.0 * (bona.size - np.searchsorted(bona, thresholds, side="left")) / bona.size
    return apcer, bpcer


def error_rates(scores: ScoreSet, threshold: float) -> Tuple[float, float]:
    """(APCER, BPCER) at threshold."""
    apcer, bpcer = _rates_at(scores.attack_scores(), scores.bona_fide_scores(), np.array([threshold]))
    return float(apcer[0]), float(bpcer[0])


def candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    """Every distinct score plus 0 and a value just above the maximum, ascending."""
    values = np.array([e.score for e in scores.entries], dtype=np.float64)
    top = np.nextafter(values.max(), np.inf)
    return np.unique(np.concatenate([[0.0], values, [top]]))


def _sweep(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    thresholds = candidate_thresholds(scores)
    apcer, bpcer = _rates_at(scores.attack_scores(), scores.bona_fide_scores(), thresholds)
    return thresholds, apcer, bpcer


def d_eer(scores: ScoreSet) -> Tuple[float, float]:
    """(EER, threshold) at the candidate minimizing |APCER - BPCER|, lowest threshold on ties."""
    thresholds, apcer, bpcer = _sweep(scores)
    i = int(np.argmin(np.abs(apcer - bpcer)))
    return float((apcer[i] + bpcer[i]) / 2.0), float(thresholds[i])


def bpcer_at_apcer(scores: ScoreSet, target_apcer: float) -> float:
    """Lowest BPCER over thresholds whose APCER does not exceed target_apcer."""
    if not 0.0 < target_apcer <= 100.0:
        raise ValueError(f"target APCER must be in (0, 100], got {target_apcer}")
    _thresholds, apcer, bpcer = _sweep(scores)
    return float(bpcer[apcer <= target_apcer].min())


def det_curve(scores: ScoreSet) -> List[DetPoint]:
    thresholds, apcer, bpcer = _sweep(scores)
    return [DetPoint(float(t), float(a), float(b)) for t, a, b in zip(thresholds, apcer, bpcer)]


def evaluate(scores: ScoreSet) -> EvalReport:
    eer, tau = d_eer(scores)
    return EvalReport(
        d_eer=eer,
        threshold_at_eer=tau,
        bpcer_at_apcer_10=bpcer_at_apcer(scores, 10.0),
        bpcer_at_apcer_5=bpcer_at_apcer(scores, 5.0),
        det_points=det_curve(scores),
    )


def average_d_eer(reports: Iterable[EvalReport]) -> float:
    values = [r.d_eer for r in reports]
    if not values:
        raise ValueError("average_d_eer needs at least one report")
    return float(np.mean(values))


def average_line(reports: Iterable[EvalReport]) -> str:
    return f"Average D-EER (%): {average_d_eer(reports):.2f}"


def misclassified(scores: ScoreSet, threshold: float) -> List[ScoreEntry]:
    """Entries on the wrong side of threshold, worst first."""
    wrong = [e for e in scores.entries if (e.score >= threshold) != e.label.is_attack]
    return sorted(wrong, key=lambda e: -abs(e.score - threshold))


# --- DET CSV ---


def write_det_csv(points: Sequence[DetPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DET_HEADER)
    for p in points:
        writer.writerow([repr(p.threshold), f"{p.apcer:.4f}", f"{p.bpcer:.4f}"])
    return buf.getvalue()


def read_det_csv(text: str) -> List[DetPoint]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != DET_HEADER:
        raise ParseError(f"DET CSV must start with header {','.join(DET_HEADER)}", 1)
    points: List[DetPoint] = []
    for no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", no)
        try:
            t, a, b = (float(c) for c in row)
        except ValueError:
            raise ParseError(f"non-numeric DET row {row!r}", no) from None
        if not (0.0 <= a <= 100.0 and 0.0 <= b <= 100.0):
            raise ParseError(f"rates must lie in [0, 100], got apcer={a}, bpcer={b}", no)
        points.append(DetPoint(t, a, b))
    if not points:
        raise ParseError("DET CSV has no data rows", 2)
    return points


# --- report table ---


@dataclass
class ReportRow:
    protocol: str
    train: str
    test: str
    report: EvalReport


def _pai_names(pais: Sequence[ClassLabel]) -> str:
    names = {ClassLabel.silicone_mask: "Silicone mask", ClassLabel.wrap_photo: "Wrap photo"}
    return " & ".join(names[p] for p in pais)


def report_row(spec: ProtocolSpec, report: EvalReport) -> ReportRow:
    return ReportRow(spec.mode.value, _pai_names(spec.train_pai), _pai_names(spec.test_pai), report)


def format_report_table(rows: Sequence[ReportRow]) -> str:
    header = ("Protocol", "Train", "Test", "D-EER (%)", "BPCER@APCER=10%", "BPCER@APCER=5%")
    body = [
        (
            r.protocol,
            r.train,
            r.test,
            f"{r.report.d_eer:.2f}",
            f"{r.report.bpcer_at_apcer_10:.2f}",
            f"{r.report.bpcer_at_apcer_5:.2f}",
        )
        for r in rows
    ]
    widths = [max(len(str(cell)) for cell in col) for col in zip(header, *body)]

    def fmt(cells) -> str:
        return " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

    lines = [fmt(header), "-+-".join("-" * w for w in widths)]
    lines += [fmt(row) for row in body]
    if rows:
        lines.append(average_line(r.report for r in rows))
    return "\n".join(lines) + "\n"


# --- protocol splits ---


def _identities_by_class(samples: Sequence[PointCloud]) -> Dict[ClassLabel, List[str]]:
    by_class: Dict[ClassLabel, set] = {label: set() for label in ClassLabel}
    for s in samples:
        if not s.identity:
            raise ProtocolError(f"sample {s.source or '<unnamed>'} of class {s.label.value} carries no identity")
        by_class[s.label].add(s.identity)
    return {label: sorted(ids) for label, ids in by_class.items()}


def split_protocol(
    samples: Sequence[PointCloud], spec: ProtocolSpec, seed: int | None = None
) -> Tuple[List[PointCloud], List[PointCloud]]:
    """Identity-disjoint (train, test) split for the protocol in spec.

    Bona fide identities go about 2:1 to train; PAI identities follow spec.mode.
    Samples of a PAI the protocol does not use are left out. Input order is kept.
    """
    seed = spec.seed if seed is None else seed
    ids = _identities_by_class(samples)
    # one draw per class in fixed order keeps splits stable across modes
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    shuffles = {label: rng.permutation(len(ids[label])) for label in ClassLabel}

    def split(label: ClassLabel, n_train: int) -> Tuple[set, set]:
        # keyed by (class, identity): equal identity strings in two classes are unrelated
        perm = [(label, ids[label][i]) for i in shuffles[label]]
        return set(perm[:n_train]), set(perm[n_train:])

    def need(label: ClassLabel, n: int, why: str) -> None:
        if len(ids[label]) < n:
            raise ProtocolError(
                f"insufficient {label.value} identities for {why}: need {n}, have {len(ids[label])}"
            )

    need(ClassLabel.bona_fide, 2, "a disjoint bona fide split")
    n_bona = len(ids[ClassLabel.bona_fide])
    train_ids, test_ids = split(ClassLabel.bona_fide, min(n_bona - 1, max(1, round(2 * n_bona / 3))))

    if spec.mode is ProtocolMode.inter:
        for pai in spec.train_pai:
            need(pai, 1, f"the {spec.mode.value} train side")
            train_ids |= {(pai, i) for i in ids[pai]}
        for pai in spec.test_pai:
            need(pai, 1, f"the {spec.mode.value} test side")
            test_ids |= {(pai, i) for i in ids[pai]}
    else:
        for pai in spec.train_pai:
            need(pai, 2, f"a disjoint {spec.mode.value} split")
            tr, te = split(pai, math.ceil(len(ids[pai]) / 2))
            train_ids |= tr
            test_ids |= te

    overlap = train_ids & test_ids
    if overlap:
        raise ProtocolError(
            f"identities appear on both sides of the split: {sorted(f'{label.value}/{i}' for label, i in overlap)}"
        )
    train = [s for s in samples if (s.label, s.identity) in train_ids]
    test = [s for s in samples if (s.label, s.identity) in test_ids]
    logger.info(
        f"Protocol split: protocol={spec.label}, seed={seed}, train={len(train)}, test={len(test)}, "
        f"train_ids={len(train_ids)}, test_ids={len(test_ids)}"
    )
    return train, test
