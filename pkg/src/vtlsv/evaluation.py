"""Score fusion, EER, minDCF, DET points and per-trial-type reports."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import NONTARGET_TYPES, TrialSet
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class ScoreSet:
    keys: list  # (model_id, test_id) per trial
    scores: np.ndarray
    system_id: str = ""
    trial_types: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.keys) != self.scores.size:
            raise DataError(f"{len(self.keys)} keys but {self.scores.size} scores")
        if not np.all(np.isfinite(self.scores)):
            raise DataError(f"system {self.system_id!r} has non-finite scores")

    def __len__(self):
        return self.scores.size

    def as_dict(self) -> dict:
        return dict(zip(self.keys, self.scores.tolist()))

    def key_hash(self) -> str:
        h = hashlib.sha256()
        for m, t in sorted(self.keys):
            h.update(f"{m}\t{t}\n".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class DcfConfig:
    c_miss: float = 10.0
    c_fa: float = 1.0
    p_target: float = 0.01

    def __post_init__(self):
        if self.c_miss <= 0 or self.c_fa <= 0 or not 0 < self.p_target < 1:
            raise DataError("DCF costs must be positive and 0 < P_target < 1")

    @property
    def norm(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


def fuse_scores(systems, system_id: str = "fused") -> ScoreSet:
    """Equal-weight mean of N systems, aligned by trial key."""
    systems = list(systems)
    if not systems:
        raise DataError("nothing to fuse")
    ref = systems[0]
    ref_keys = set(ref.keys)
    if len(ref_keys) != len(ref.keys):
        raise DataError(f"system {ref.system_id!r} has duplicate trial keys")
    rows = []
    for s in systems:
        if len(s) != len(ref):
            raise DataError(f"system {s.system_id!r} has {len(s)} trials, expected {len(ref)}")
        lookup = s.as_dict()
        missing = [k for k in ref.keys if k not in lookup]
        if missing:
            raise DataError(f"system {s.system_id!r} lacks {len(missing)} trial keys, e.g. {missing[:3]}")
        rows.append([lookup[k] for k in ref.keys])
    # Summing sorted offsets from the per-trial minimum makes the result
    # independent of argument order and exact when all systems agree.
    vals = np.sort(np.array(rows), axis=0)
    base = vals[0]
    fused = base + np.sum(vals - base, axis=0) / len(systems)
    return ScoreSet(list(ref.keys), fused, system_id, ref.trial_types)


def _check(genuine, impostor):
    g = np.asarray(genuine, dtype=np.float64).ravel()
    i = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or i.size == 0:
        raise DataError("genuine and impostor score sets must be non-empty")
    return g, i


def _sweep(genuine, impostor):
    """Thresholds (distinct scores, then +inf) with FAR = P(imp >= t), FRR = P(gen < t)."""
    g, i = _check(genuine, impostor)
    thr = np.append(np.unique(np.concatenate([g, i])), np.inf)
    gs, is_ = np.sort(g), np.sort(i)
    frr = np.searchsorted(gs, thr, side="left") / g.size
    far = 1.0 - np.searchsorted(is_, thr, side="left") / i.size
    return thr, far, frr


def compute_eer(genuine, impostor):
    """(EER, threshold). Linear interpolation between the two operating points
    bracketing the FAR/FRR crossing."""
    thr, far, frr = _sweep(genuine, impostor)
    d = frr - far
    j = int(np.argmax(d >= 0))
    if d[j] == 0 or j == 0:
        return float(far[j]), float(thr[j])
    s = -d[j - 1] / (d[j] - d[j - 1])
    eer = far[j - 1] + s * (far[j] - far[j - 1])
    if np.isinf(thr[j]):
        t = thr[j - 1]
    else:
        t = thr[j - 1] + s * (thr[j] - thr[j - 1])
    return float(eer), float(t)


def compute_min_dcf(genuine, impostor, cfg: DcfConfig = DcfConfig()):
    """(normalized minDCF, threshold) over the full threshold sweep."""
    thr, far, frr = _sweep(genuine, impostor)
    dcf = (cfg.c_miss * cfg.p_target * frr + cfg.c_fa * (1.0 - cfg.p_target) * far) / cfg.norm
    j = int(np.argmin(dcf))
    return float(dcf[j]), float(thr[j])


def det_points(genuine, impostor):
    """[(P_fa, P_miss)] at every distinct threshold, ascending threshold."""
    _, far, frr = _sweep(genuine, impostor)
    return list(zip(far.tolist(), frr.tolist()))


@dataclass
class Report:
    system_id: str
    columns: dict  # trial type -> (eer, min_dcf) or None when absent
    avg_eer: float
    avg_min_dcf: float

    def as_text(self) -> str:
        lines = [f"system = {self.system_id}"]
        for name, val in self.columns.items():
            if val is None:
                lines.append(f"{name}.eer = absent")
                lines.append(f"{name}.min_dcf = absent")
            else:
                lines.append(f"{name}.eer = {val[0]:.10f}")
                lines.append(f"{name}.min_dcf = {val[1]:.10f}")
        lines.append(f"avg.eer = {self.avg_eer:.10f}")
        lines.append(f"avg.min_dcf = {self.avg_min_dcf:.10f}")
        return "\n".join(lines) + "\n"

    def table_row(self) -> str:
        cells = []
        for val in self.columns.values():
            cells.append("--/--" if val is None else f"{100 * val[0]:.2f}/{100 * val[1]:.2f}")
        cells.append(f"{100 * self.avg_eer:.2f}/{100 * self.avg_min_dcf:.2f}")
        return f"{self.system_id:<32s} " + " ".join(f"{c:>13s}" for c in cells)


TABLE_HEADER = (f"{'System':<32s} " + " ".join(f"{c:>13s}" for c in
                ("Target-wrong", "Imp-correct", "Imp-wrong", "Avg.")) +
                "\n" + " " * 33 + "(%EER / minDCFx100)")


def evaluate_trials(scores: ScoreSet, trials: TrialSet, cfg: DcfConfig = DcfConfig()) -> Report:
    """Genuine vs each non-target type separately, plus the column average."""
    lookup = scores.as_dict()
    by_type = {t: [] for t in ("genuine",) + NONTARGET_TYPES}
    for tr in trials:
        if tr.key not in lookup:
            raise DataError(f"no score for trial {tr.key}")
        by_type[tr.trial_type].append(lookup[tr.key])
    if not by_type["genuine"]:
        raise DataError("no genuine trials")
    columns = {}
    for kind in NONTARGET_TYPES:
        if not by_type[kind]:
            log.warning("no %s trials; column marked absent", kind)
            columns[kind] = None
            continue
        eer, _ = compute_eer(by_type["genuine"], by_type[kind])
        dcf, _ = compute_min_dcf(by_type["genuine"], by_type[kind], cfg)
        columns[kind] = (eer, dcf)
    present = [v for v in columns.values() if v is not None]
    if not present:
        raise DataError("no non-target trials of any type")
    return Report(scores.system_id, columns,
                  float(np.mean([v[0] for v in present])), float(np.mean([v[1] for v in present])))


# ---------------------------------------------------------------------------
# files


def write_scores(path, scores: ScoreSet, trials: TrialSet | None = None) -> None:
    """Lines of `model-id test-id trial-type score`."""
    types = scores.trial_types
    if types is None and trials is not None:
        kinds = {t.key: t.trial_type for t in trials}
        types = [kinds[k] for k in scores.keys]
    types = types or ["unknown"] * len(scores)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        for (m, t), kind, s in zip(scores.keys, types, scores.scores):
            fh.write(f"{m} {t} {kind} {s:.8f}\n")
    tmp.replace(path)


def read_scores(path, system_id: str | None = None) -> ScoreSet:
    keys, vals, kinds = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields")
        keys.append((parts[0], parts[1]))
        kinds.append(parts[2])
        try:
            vals.append(float(parts[3]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad score {parts[3]!r}") from exc
    return ScoreSet(keys, np.array(vals), system_id or Path(path).stem, kinds)


def trials_from_scores(scores: ScoreSet) -> TrialSet:
    """Minimal TrialSet (model, test, type) recovered from a score file."""
    from .corpus import TrialRecord
    if scores.trial_types is None:
        raise DataError("score set carries no trial types")
    return TrialSet([TrialRecord(m, "", "", t, "", k) for (m, t), k in zip(scores.keys, scores.trial_types)])


def write_det(path, genuine, impostor) -> None:
    with open(path, "w") as fh:
        fh.write("p_fa,p_miss\n")
        for fa, miss in det_points(genuine, impostor):
            fh.write(f"{fa:.10f},{miss:.10f}\n")
