"""Observation sets, the cohort file format and the synthetic-cohort generator.

Cohort files are UTF-8 CSV with the header
``patient_id,covariate_name,time_hours,value``.  An optional comment line
``# covariates: ["RR", "HR", ...]`` before the header fixes the covariate
order and lets channels with no observations survive a round trip.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, NumericError, ParseError
from .kernel import StructuredKernel, cholesky_jitter, gram_matrix, make_kernel

HEADER = ["patient_id", "covariate_name", "time_hours", "value"]
COVARIATE_PREFIX = "# covariates:"

# Vital signs first, then labs; used to name synthetic channels.
COVARIATE_NAMES = [
    "RR", "HR", "SBP", "Temp", "BUN", "CO2", "Calcium", "Chloride", "Creatinine",
    "Glucose POC", "Hct", "Hgb", "MCH", "MCHC", "MCV", "INR", "PT", "PTT",
    "Platelet", "Potassium", "RBC", "RDW", "Sodium", "WBC",
]  # fmt: skip
N_VITALS = 4


@dataclass(eq=False)
class ObservationSet:
    """Ragged multi-channel series of one patient; times in hours."""

    patient_id: str
    covariate_names: list[str]
    times: list[np.ndarray]
    values: list[np.ndarray]

    def __post_init__(self):
        self.covariate_names = [str(n) for n in self.covariate_names]
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DomainError("covariate names must be unique")
        self.times = [np.asarray(t, dtype=float).reshape(-1) for t in self.times]
        self.values = [np.asarray(v, dtype=float).reshape(-1) for v in self.values]
        D = len(self.covariate_names)
        if len(self.times) != D or len(self.values) != D:
            raise DomainError(f"expected {D} time and value arrays")
        for name, t, v in zip(self.covariate_names, self.times, self.values):
            if t.shape != v.shape:
                raise DomainError(f"{name}: times and values differ in length")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
                raise DomainError(f"{name}: times and values must be finite")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise DomainError(f"{name}: times must be strictly increasing")

    @property
    def D(self) -> int:
        return len(self.covariate_names)

    @property
    def n_obs(self) -> int:
        return int(sum(t.size for t in self.times))

    def flatten(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(covariate, time, value)`` arrays ordered by time, then covariate."""
        c = np.concatenate([np.full(t.size, d, dtype=np.intp) for d, t in enumerate(self.times)])
        t = np.concatenate(self.times) if self.times else np.empty(0)
        y = np.concatenate(self.values) if self.values else np.empty(0)
        order = np.lexsort((c, t))
        return c[order], t[order], y[order]

    @classmethod
    def from_flat(cls, patient_id: str, covariate_names: Sequence[str], c, t, y) -> "ObservationSet":
        c = np.asarray(c, dtype=np.intp)
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        D = len(covariate_names)
        if c.size and (c.min() < 0 or c.max() >= D):
            raise DomainError("covariate index out of range")
        times, values = [], []
        for d in range(D):
            m = c == d
            order = np.argsort(t[m], kind="stable")
            times.append(t[m][order])
            values.append(y[m][order])
        return cls(patient_id, list(covariate_names), times, values)

    def select(self, mask_fn) -> "ObservationSet":
        """Subset by a predicate ``mask_fn(d, times) -> bool array``."""
        times, values = [], []
        for d, (t, v) in enumerate(zip(self.times, self.values)):
            m = np.asarray(mask_fn(d, t), dtype=bool)
            times.append(t[m])
            values.append(v[m])
        return ObservationSet(self.patient_id, self.covariate_names, times, values)

    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-covariate mean and scale; scale 1 where fewer than two values or no spread."""
        mean = np.zeros(self.D)
        scale = np.ones(self.D)
        for d, v in enumerate(self.values):
            if v.size:
                mean[d] = v.mean()
            if v.size > 1:
                s = v.std()
                if s > 0:
                    scale[d] = s
        return mean, scale

    def transformed(self, mean, scale) -> "ObservationSet":
        values = [(v - m) / s for v, m, s in zip(self.values, mean, scale)]
        return ObservationSet(self.patient_id, self.covariate_names, [t.copy() for t in self.times], values)

    def standardize(self) -> tuple["ObservationSet", np.ndarray, np.ndarray]:
        mean, scale = self.standardization()
        return self.transformed(mean, scale), mean, scale

    def equals(self, other: "ObservationSet") -> bool:
        return (
            self.patient_id == other.patient_id
            and self.covariate_names == other.covariate_names
            and all(np.array_equal(a, b) for a, b in zip(self.times, other.times))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )


# -- cohort files ----------------------------------------------------------


def save_dataset(path, cohort: Sequence[ObservationSet]) -> None:
    cohort = list(cohort)
    names = cohort[0].covariate_names if cohort else []
    if any(o.covariate_names != names for o in cohort):
        raise DomainError("all patients in a cohort file must share covariate names")
    buf = io.StringIO()
    buf.write(f"{COVARIATE_PREFIX} {json.dumps(names)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for obs in cohort:
        for name, t, v in zip(names, obs.times, obs.values):
            for ti, vi in zip(t, v):
                writer.writerow([obs.patient_id, name, repr(float(ti)), repr(float(vi))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_dataset(path) -> list[ObservationSet]:
    """Parse a cohort file; raises :class:`ParseError` with the offending line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path} is not valid UTF-8") from exc
    return parse_dataset(text)


def parse_dataset(text: str) -> list[ObservationSet]:
    lines = text.splitlines()
    names: list[str] | None = None
    header_line = None
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith(COVARIATE_PREFIX):
            try:
                names = json.loads(stripped[len(COVARIATE_PREFIX) :])
            except json.JSONDecodeError as exc:
                raise ParseError("covariate list is not valid JSON", i) from exc
            if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
                raise ParseError("covariate list must be a JSON list of strings", i)
            continue
        if stripped.startswith("#"):
            continue
        header_line = i
        break
    if header_line is None:
        raise ParseError("missing header row")
    header = next(csv.reader([lines[header_line - 1]]))
    if [h.strip() for h in header] != HEADER:
        raise ParseError(f"header must be {','.join(HEADER)}", header_line)

    declared = names is not None
    names = list(names) if declared else []
    index = {n: d for d, n in enumerate(names)}
    patients: dict[str, list[list[tuple[float, float]]]] = {}
    last_time: dict[tuple[str, int], tuple[float, int]] = {}
    for lineno, row in enumerate(csv.reader(lines[header_line:]), start=header_line + 1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if row[0].lstrip().startswith("#"):
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, found {len(row)}", lineno)
        pid, name = row[0].strip(), row[1].strip()
        if not pid:
            raise ParseError("empty patient_id", lineno)
        try:
            t, v = float(row[2]), float(row[3])
        except ValueError as exc:
            raise ParseError(f"non-numeric time or value: {exc}", lineno) from exc
        if not (math.isfinite(t) and math.isfinite(v)):
            raise ParseError("time and value must be finite", lineno)
        if name not in index:
            if declared:
                raise ParseError(f"covariate {name!r} not in the declared covariate list", lineno)
            index[name] = len(names)
            names.append(name)
            for series in patients.values():
                series.append([])
        d = index[name]
        series = patients.setdefault(pid, [[] for _ in names])
        prev = last_time.get((pid, d))
        if prev is not None and t <= prev[0]:
            raise ParseError(
                f"time {t!r} for patient {pid!r}, covariate {name!r} does not increase "
                f"(previous {prev[0]!r} on line {prev[1]})",
                lineno,
            )
        last_time[(pid, d)] = (t, lineno)
        series[d].append((t, v))

    cohort = []
    for pid, series in patients.items():
        times = [np.array([p[0] for p in s], dtype=float) for s in series]
        values = [np.array([p[1] for p in s], dtype=float) for s in series]
        cohort.append(ObservationSet(pid, names, times, values))
    return cohort


# -- synthetic cohorts -----------------------------------------------------


@dataclass
class SyntheticSpec:
    """Generator settings.

    Attributes
    ----------
    cadences
        Mean sampling interval (hours) for each covariate.
    jitter
        Sampling-time jitter as a fraction of the cadence, in [0, 0.5).
    hyper_jitter
        Relative log-normal perturbation of every basis kernel's frequency and
        spectral variance, drawn independently per patient.
    """

    ground_truth: StructuredKernel
    n_patients: int
    cadences: Sequence[float]
    horizon: float
    seed: int = 0
    jitter: float = 0.25
    hyper_jitter: float = 0.0
    covariate_names: list[str] | None = None
    id_prefix: str = "P"

    def __post_init__(self):
        D = self.ground_truth.D
        self.cadences = [float(c) for c in self.cadences]
        if len(self.cadences) != D:
            raise DomainError(f"need one cadence per covariate ({D})")
        if any(not c > 0 for c in self.cadences):
            raise DomainError("cadences must be positive")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")
        if self.n_patients < 1:
            raise DomainError("n_patients must be at least 1")
        if not 0 <= self.jitter < 0.5:
            raise DomainError("jitter must lie in [0, 0.5)")
        if self.covariate_names is None:
            self.covariate_names = default_names(D)
        if len(self.covariate_names) != D:
            raise DomainError("covariate_names must have length D")


def default_names(D: int) -> list[str]:
    if D <= len(COVARIATE_NAMES):
        return COVARIATE_NAMES[:D]
    return COVARIATE_NAMES + [f"X{d}" for d in range(len(COVARIATE_NAMES), D)]


def sample_times(cadence: float, horizon: float, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """Regular grid at ``cadence`` with a random phase and per-point jitter."""
    start = rng.uniform(0.0, cadence)
    grid = np.arange(start, horizon, cadence)
    if jitter > 0 and grid.size:
        grid = grid + rng.uniform(-jitter * cadence, jitter * cadence, size=grid.size)
    grid = grid[(grid >= 0) & (grid < horizon)]
    return grid


def perturb_kernel(k: StructuredKernel, rel: float, rng: np.random.Generator) -> StructuredKernel:
    if rel <= 0:
        return k
    theta = k.to_vector()
    Q = k.Q
    theta[:Q] *= np.exp(rel * rng.standard_normal(Q))
    theta[Q : 2 * Q] *= np.exp(2.0 * rel * rng.standard_normal(Q))
    return k.with_vector(theta)


def sample_patient(
    k: StructuredKernel,
    times: Sequence[np.ndarray],
    rng: np.random.Generator,
    patient_id: str = "P0",
    names: Sequence[str] | None = None,
) -> ObservationSet:
    """Draw one joint GP sample (with noise) at the given per-covariate times."""
    names = list(names) if names is not None else default_names(k.D)
    c = np.concatenate([np.full(len(t), d, dtype=np.intp) for d, t in enumerate(times)])
    t = np.concatenate([np.asarray(x, dtype=float) for x in times])
    if c.size == 0:
        return ObservationSet(patient_id, names, [np.empty(0)] * k.D, [np.empty(0)] * k.D)
    K = gram_matrix((c, t), k, with_noise=True)
    try:
        L, _ = cholesky_jitter(K)
    except NumericError as exc:
        raise NumericError(f"cannot sample patient {patient_id}: {exc}") from exc
    y = L @ rng.standard_normal(c.size)
    return ObservationSet.from_flat(patient_id, names, c, t, y)


def synth_generate(spec: SyntheticSpec) -> list[ObservationSet]:
    """Sample a cohort; each patient has its own child seed of ``spec.seed``."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)
    width = max(4, len(str(spec.n_patients)))
    cohort = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        k = perturb_kernel(spec.ground_truth, spec.hyper_jitter, rng)
        times = [sample_times(cad, spec.horizon, spec.jitter, rng) for cad in spec.cadences]
        pid = f"{spec.id_prefix}{i:0{width}d}"
        cohort.append(sample_patient(k, times, rng, pid, spec.covariate_names))
    return cohort


def default_ground_truth(D: int = 6, seed: int = 0, noise: float = 0.05) -> StructuredKernel:
    """Two-component kernel: a 24 h rhythm (3-day decay) and a 3-day smooth trend.

    The rhythm loads mostly on the vital signs; the trend couples all
    covariates through one shared factor plus small independent parts.
    """
    rng = np.random.default_rng(seed)
    n_dense = min(N_VITALS, D)
    a_rhythm = np.zeros((D, 1))
    a_rhythm[:n_dense, 0] = rng.uniform(0.6, 1.0, n_dense) * rng.choice([-1.0, 1.0], n_dense)
    a_trend = rng.uniform(0.5, 1.0, (D, 1)) * rng.choice([-1.0, 1.0], (D, 1))
    lam_rhythm = np.full(D, 0.05)
    lam_trend = np.full(D, 0.1)
    return make_kernel(
        periods=[24.0, math.inf],
        length_scales=[72.0, 72.0],
        As=[a_rhythm, a_trend],
        lams=[lam_rhythm, lam_trend],
        noise_var=np.full(D, noise),
    )


def default_cadences(D: int, dense: float = 4.0, sparse: float = 24.0) -> list[float]:
    return [dense if d < N_VITALS else sparse for d in range(D)]
