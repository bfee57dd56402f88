"""Long-format cohort tables, anchor construction and a synthetic cohort.

Visit records are long format: one row per (participant, visit month,
variable). Anchors are MCI visits with an observed CDR-SB and an outcome
visit 18-30 months later (closest to 24, earlier on ties) whose CDR-SB is
also observed.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

# variable id 0 is reserved for the ANCHOR sentinel token
SENTINEL_ID = 0
SENTINEL_NAME = "ANCHOR"

CLINICAL = ("CDRSB", "MMSE", "ADAS13", "FAQ")
MRI = ("WholeBrain", "Ventricles", "Hippocampus", "Entorhinal", "Fusiform",
       "MidTemp", "InfTemp")
CSF = ("ABETA", "TAU", "PTAU")
DX = "DX"
VOCABULARY = CLINICAL + (DX,) + MRI + CSF
VARIABLE_ID = {name: i + 1 for i, name in enumerate(VOCABULARY)}
N_VARIABLES = len(VOCABULARY)

DX_LEVELS = {"CN": 0.0, "MCI": 1.0, "AD": 2.0}
MCI = DX_LEVELS["MCI"]

# Reference values used for never-observed biomarkers in anchor covariates;
# the matching missingness indicator carries the "never seen" information.
REFERENCE_FILL = {
    "MMSE": 27.0, "ADAS13": 17.0, "FAQ": 3.0,
    "WholeBrain": 1.0e6, "Ventricles": 4.0e4, "Hippocampus": 6.5e3,
    "Entorhinal": 3.4e3, "Fusiform": 1.7e4, "MidTemp": 1.9e4, "InfTemp": 1.9e4,
    "ABETA": 900.0, "TAU": 280.0, "PTAU": 27.0,
}
NEVER_OBSERVED_RECENCY = 999.0

COVARIATE_BLOCKS = {
    "clinical_severity": ["CDRSB", "MMSE", "ADAS13", "dx_first_visit"],
    "functional": ["FAQ"],
    "demographics": ["age", "sex", "education"],
    "genetic": ["apoe4"],
    "timing": ["months_from_first_visit", "target_gap_months"],
    "mri_history": [f"last_{v}" for v in MRI],
    "csf_history": [f"last_{v}" for v in CSF],
    "missingness": ["MMSE_missing", "ADAS13_missing", "FAQ_missing",
                    "mri_missing", "csf_missing"],
    "recency": ["mri_recency_months", "csf_recency_months"],
}
COVARIATE_NAMES = [c for block in COVARIATE_BLOCKS.values() for c in block]


class CohortError(ValueError):
    pass


@dataclass(frozen=True)
class VisitRecord:
    participant_id: str
    visit_month: float
    variable: str
    value: float


@dataclass(frozen=True)
class StaticRecord:
    participant_id: str
    age: float
    sex: int
    education: float
    apoe4: int


@dataclass(frozen=True)
class ObservationTriplet:
    """One pre-anchor observation. ``v`` is in native units until tokenized."""

    tau: float
    k: int
    v: float


@dataclass(frozen=True)
class AnchorSample:
    participant_id: str
    anchor_month: float
    x: dict
    history: tuple
    y: float
    gap_months: float

    def covariates(self, names):
        return np.array([self.x[n] for n in names], dtype=np.float64)

    def to_json(self):
        d = asdict(self)
        d["history"] = [[t.tau, t.k, t.v] for t in self.history]
        return d

    @classmethod
    def from_json(cls, d):
        hist = tuple(ObservationTriplet(float(a), int(b), float(c))
                     for a, b, c in d["history"])
        return cls(d["participant_id"], float(d["anchor_month"]), dict(d["x"]),
                   hist, float(d["y"]), float(d["gap_months"]))


@dataclass
class CohortTable:
    visits: list
    static: dict
    train_stats: dict | None = None
    _by_participant: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        by = {}
        for r in self.visits:
            by.setdefault(r.participant_id, []).append(r)
        self._by_participant = by

    @property
    def participants(self):
        return sorted(self._by_participant)

    def records(self, pid):
        return self._by_participant.get(pid, [])

    def to_csv(self):
        """Return (visits_csv, static_csv) strings."""
        vbuf, sbuf = io.StringIO(), io.StringIO()
        vw = csv.writer(vbuf, lineterminator="\n")
        vw.writerow(["participant_id", "visit_month", "variable", "value"])
        for r in self.visits:
            vw.writerow([r.participant_id, repr(r.visit_month), r.variable, repr(r.value)])
        sw = csv.writer(sbuf, lineterminator="\n")
        sw.writerow(["participant_id", "age", "sex", "education", "apoe4"])
        for pid in sorted(self.static):
            s = self.static[pid]
            sw.writerow([pid, repr(s.age), s.sex, repr(s.education), s.apoe4])
        return vbuf.getvalue(), sbuf.getvalue()

    def write(self, visits_path, static_path, header=None):
        v, s = self.to_csv()
        prefix = f"# {header}\n" if header else ""
        Path(visits_path).write_text(prefix + v)
        Path(static_path).write_text(prefix + s)


# --- ingestion -----------------------------------------------------------


def _data_lines(text):
    # comment lines carry provenance headers and are skipped
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip() and not line.startswith("#"):
            yield lineno, line


def _read_csv(text, expected, what):
    rows = list(_data_lines(text))
    if not rows:
        raise CohortError(f"{what}: empty file")
    header_line, header = rows[0]
    cols = next(csv.reader([header]))
    if cols != expected:
        raise CohortError(f"{what}: header must be {','.join(expected)}, got {header!r}")
    for lineno, line in rows[1:]:
        vals = next(csv.reader([line]))
        if len(vals) != len(expected):
            raise CohortError(f"{what} line {lineno}: expected {len(expected)} fields")
        yield lineno, vals


def parse_tables(visits_text, static_text):
    static = {}
    for lineno, (pid, age, sex, edu, apoe4) in _read_csv(
            static_text, ["participant_id", "age", "sex", "education", "apoe4"], "static"):
        if pid in static:
            raise CohortError(f"static line {lineno}: duplicate participant {pid!r}")
        rec = StaticRecord(pid, float(age), int(sex), float(edu), int(apoe4))
        if rec.apoe4 not in (0, 1, 2):
            raise CohortError(f"static line {lineno}: apoe4 must be 0, 1 or 2")
        if rec.sex not in (0, 1):
            raise CohortError(f"static line {lineno}: sex must be 0 or 1")
        static[pid] = rec

    seen = {}
    visits = []
    for lineno, (pid, month, var, value) in _read_csv(
            visits_text, ["participant_id", "visit_month", "variable", "value"], "visits"):
        if var not in VARIABLE_ID:
            raise CohortError(f"visits line {lineno}: unknown variable {var!r}")
        month = float(month)
        if month < 0:
            raise CohortError(f"visits line {lineno}: negative visit_month {month}")
        key = (pid, month, var)
        if key in seen:
            raise CohortError(
                f"duplicate record {key} on visits lines {seen[key]} and {lineno}")
        seen[key] = lineno
        visits.append(VisitRecord(pid, month, var, float(value)))

    missing = sorted({r.participant_id for r in visits} - set(static))
    if missing:
        raise CohortError(f"no static record for participants {missing}")
    visits.sort(key=lambda r: (r.participant_id, r.visit_month, VARIABLE_ID[r.variable]))
    return CohortTable(visits, static)


def ingest_long_table(visits_file, static_file):
    return parse_tables(Path(visits_file).read_text(encoding="utf-8"),
                        Path(static_file).read_text(encoding="utf-8"))


# --- anchors -------------------------------------------------------------


@dataclass
class AnchorSet:
    samples: list
    exclusions: dict

    def __iter__(self):
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _visits(records):
    """month -> {variable: value}, months ascending."""
    out = {}
    for r in records:
        out.setdefault(r.visit_month, {})[r.variable] = r.value
    return dict(sorted(out.items()))


def select_outcome_visit(anchor_month, months, window_lo=18.0, window_hi=30.0,
                         horizon=24.0):
    """Month of the follow-up closest to ``horizon``; earlier wins ties."""
    best = None
    for m in months:
        gap = m - anchor_month
        if window_lo <= gap <= window_hi:
            if best is None or abs(gap - horizon) < abs(best - anchor_month - horizon):
                best = m
    return best


def _last_prior(by_month, months, var, anchor_month):
    """(value, month) of the latest observation of ``var`` at or before the anchor."""
    for m in reversed(months):
        if m <= anchor_month and var in by_month[m]:
            return by_month[m][var], m
    return None, None


def anchor_covariates(static, by_month, anchor_month, outcome_month):
    months = list(by_month)
    first = months[0]
    here = by_month[anchor_month]
    x = {}
    x["CDRSB"] = here["CDRSB"]
    for var in ("MMSE", "ADAS13", "FAQ"):
        val, _ = _last_prior(by_month, months, var, anchor_month)
        x[f"{var}_missing"] = 0.0 if var in here else 1.0
        x[var] = REFERENCE_FILL[var] if val is None else val
    x["dx_first_visit"] = by_month[first].get(DX, MCI)
    x["age"] = static.age + (anchor_month - first) / 12.0
    x["sex"] = float(static.sex)
    x["education"] = static.education
    x["apoe4"] = float(static.apoe4)
    x["months_from_first_visit"] = anchor_month - first
    x["target_gap_months"] = outcome_month - anchor_month
    for modality, names in (("mri", MRI), ("csf", CSF)):
        last_month = None
        for var in names:
            val, m = _last_prior(by_month, months, var, anchor_month)
            x[f"last_{var}"] = REFERENCE_FILL[var] if val is None else val
            if m is not None and (last_month is None or m > last_month):
                last_month = m
        x[f"{modality}_missing"] = 1.0 if last_month is None else 0.0
        x[f"{modality}_recency_months"] = (
            NEVER_OBSERVED_RECENCY if last_month is None else anchor_month - last_month)
        x[f"{modality}_same_visit"] = 1.0 if last_month == anchor_month else 0.0
    return x


def anchor_history(records, anchor_month):
    hist = tuple(ObservationTriplet(r.visit_month - anchor_month, VARIABLE_ID[r.variable], r.value)
                 for r in records if r.visit_month <= anchor_month)
    if not hist:
        hist = (ObservationTriplet(0.0, SENTINEL_ID, 0.0),)
    return hist


def build_anchors(cohort, window_lo=18.0, window_hi=30.0, horizon=24.0):
    samples = []
    tally = {"no_anchor_cdrsb": 0, "no_outcome_visit": 0, "no_outcome_cdrsb": 0}
    for pid in cohort.participants:
        records = cohort.records(pid)
        by_month = _visits(records)
        months = list(by_month)
        for month in months:
            here = by_month[month]
            if here.get(DX) != MCI:
                continue
            if "CDRSB" not in here:
                tally["no_anchor_cdrsb"] += 1
                continue
            outcome = select_outcome_visit(month, months, window_lo, window_hi, horizon)
            if outcome is None:
                tally["no_outcome_visit"] += 1
                continue
            if "CDRSB" not in by_month[outcome]:
                tally["no_outcome_cdrsb"] += 1
                continue
            x = anchor_covariates(cohort.static[pid], by_month, month, outcome)
            samples.append(AnchorSample(
                participant_id=pid,
                anchor_month=month,
                x=x,
                history=anchor_history(records, month),
                y=by_month[outcome]["CDRSB"] - here["CDRSB"],
                gap_months=outcome - month,
            ))
    return AnchorSet(samples, tally)


# --- summary -------------------------------------------------------------


@dataclass(frozen=True)
class CohortSummary:
    n_anchors: int
    n_participants: int
    n_rows: int
    median_gap_months: float | None
    same_visit_mri_pct: float | None
    any_prior_mri_pct: float | None
    same_visit_csf_pct: float | None
    any_prior_csf_pct: float | None

    def to_json(self):
        return asdict(self)


def summarize_cohort(anchors, cohort=None):
    """Table-1 style profile; percentages are relative to labeled anchors.

    ``n_rows`` counts distinct (participant, visit) rows of the participants
    contributing anchors. Undefined quantities are None.
    """
    anchors = list(anchors)
    pids = sorted({a.participant_id for a in anchors})
    n_rows = 0
    if cohort is not None:
        for pid in pids:
            n_rows += len({r.visit_month for r in cohort.records(pid)})
    n = len(anchors)
    if n == 0:
        return CohortSummary(0, 0, n_rows, None, None, None, None, None)

    def pct(flags):
        return 100.0 * sum(flags) / n

    return CohortSummary(
        n_anchors=n,
        n_participants=len(pids),
        n_rows=n_rows,
        median_gap_months=float(median(a.gap_months for a in anchors)),
        same_visit_mri_pct=pct(a.x["mri_same_visit"] == 1.0 for a in anchors),
        any_prior_mri_pct=pct(a.x["mri_missing"] == 0.0 for a in anchors),
        same_visit_csf_pct=pct(a.x["csf_same_visit"] == 1.0 for a in anchors),
        any_prior_csf_pct=pct(a.x["csf_missing"] == 0.0 for a in anchors),
    )


def write_anchors(path, anchors, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        for a in anchors:
            d = a.to_json()
            if header:
                d = {**header, **d}
            fh.write(json.dumps(d) + "\n")


def read_anchors(path):
    with open(path, encoding="utf-8") as fh:
        return [AnchorSample.from_json(json.loads(line)) for line in fh if line.strip()]


# --- standardization -----------------------------------------------------


def compute_train_stats(anchors):
    """Per-variable (mean, sd) over the distinct observations in ``anchors``.

    Observations are deduplicated by (participant, absolute month, variable)
    so a visit shared by several anchors counts once.
    """
    seen = {}
    for a in anchors:
        for t in a.history:
            if t.k == SENTINEL_ID:
                continue
            seen[(a.participant_id, a.anchor_month + t.tau, t.k)] = t.v
    values = {}
    for (_, _, k), v in seen.items():
        values.setdefault(k, []).append(v)
    stats = {}
    for k in range(1, N_VARIABLES + 1):
        vals = np.asarray(values.get(k, []), dtype=np.float64)
        if vals.size == 0:
            stats[k] = (0.0, 1.0)
            continue
        sd = float(vals.std())
        stats[k] = (float(vals.mean()), sd if sd > 0 else 1.0)
    return stats


def standardize(k, v, stats, clip=6.0):
    if k == SENTINEL_ID:
        return 0.0
    mu, sd = stats[k]
    return float(min(max((v - mu) / sd, -clip), clip))


# --- synthetic cohort ----------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings for an ADNI-shaped synthetic cohort.

    ``mri_prob``/``csf_prob`` are participant-level probabilities of being in
    the modality substudy (first collected at baseline); ``*_repeat_prob``
    is the per-follow-up-visit recollection probability for enrolled
    participants. The planted residual signal adds ``signal_strength`` times
    an exponentially decayed (rate ``signal_decay`` per month) average of
    recent ADAS13 slopes to the CDR-SB drift.
    """

    n_participants: int = 500
    visit_spacing_months: float = 6.0
    visit_jitter_months: float = 1.0
    max_visits: int = 12
    dropout_prob: float = 0.06
    clinical_obs_prob: float = 0.95
    mri_prob: float = 0.4
    mri_repeat_prob: float = 0.45
    csf_prob: float = 0.6
    csf_repeat_prob: float = 0.35
    signal_strength: float = 1.5
    signal_decay: float = 0.08
    adas_noise_sd: float = 1.0
    cdrsb_noise_sd: float = 0.35
    random_intercept_sd: float = 0.35
    seed: int = 0

    def validate(self):
        if self.n_participants <= 0:
            raise CohortError("n_participants must be positive")
        for name in ("dropout_prob", "clinical_obs_prob", "mri_prob", "mri_repeat_prob",
                     "csf_prob", "csf_repeat_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise CohortError(f"{name} must lie in [0, 1], got {p}")
        if self.signal_decay < 0:
            raise CohortError("signal_decay must be >= 0")
        if self.max_visits < 1 or self.visit_spacing_months <= 0:
            raise CohortError("need max_visits >= 1 and positive visit spacing")


def decayed_slope(times, values, at, decay):
    """Exponentially weighted mean of consecutive slopes (per year) up to ``at``.

    Each slope is stamped at the later of its two observations and weighted
    by ``exp(-decay * (at - stamp))``. Returns 0 with fewer than two points.
    """
    pts = [(t, v) for t, v in zip(times, values) if t <= at]
    if len(pts) < 2:
        return 0.0
    num = den = 0.0
    for (t0, v0), (t1, v1) in zip(pts, pts[1:]):
        w = math.exp(-decay * (at - t1))
        num += w * 12.0 * (v1 - v0) / (t1 - t0)
        den += w
    return num / den


def _dx_from_cdrsb(c):
    if c < 0.5:
        return "CN"
    return "MCI" if c < 4.5 else "AD"


def generate_synthetic(config=SyntheticConfig()):
    """Simulate a cohort; a pure function of ``config`` (including its seed).

    Latent cognition follows a participant-specific ADAS13 velocity that
    switches between a slow and a fast regime. CDR-SB drifts at a rate that
    is affine in static covariates plus a participant random intercept, plus
    the planted decayed-ADAS13-slope term.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    visits, static = [], {}
    width = len(str(config.n_participants))
    for i in range(config.n_participants):
        pid = f"S{i:0{width}d}"
        age = float(np.clip(rng.normal(73.0, 7.0), 55.0, 90.0))
        sex = int(rng.random() < 0.45)
        edu = float(np.clip(np.round(rng.normal(16.0, 2.5)), 8.0, 20.0))
        apoe4 = int(rng.choice(3, p=[0.5, 0.38, 0.12]))
        static[pid] = StaticRecord(pid, age, sex, edu, apoe4)

        # visit schedule with jitter and monotone dropout
        months = [0.0]
        while len(months) < config.max_visits and rng.random() >= config.dropout_prob:
            step = config.visit_spacing_months + rng.uniform(
                -config.visit_jitter_months, config.visit_jitter_months)
            months.append(round(months[-1] + max(step, 1.0), 2))
        months = np.asarray(months)

        # ADAS13 latent: level plus velocity with one regime switch
        base_adas = rng.normal(17.0, 4.0)
        slow = rng.normal(1.0, 0.6) + 0.4 * apoe4
        fast = slow + rng.gamma(2.0, 2.0)
        switch = rng.uniform(-12.0, 84.0)
        latent_adas = base_adas + np.where(
            months < switch, slow * months / 12.0,
            slow * switch / 12.0 + fast * (months - switch) / 12.0)
        latent_adas = np.where(switch < 0, base_adas + fast * months / 12.0, latent_adas)
        adas_obs = latent_adas + rng.normal(0.0, config.adas_noise_sd, months.size)
        adas_seen = rng.random(months.size) < config.clinical_obs_prob

        # CDR-SB drift: affine in covariates + random intercept + planted signal
        b_i = rng.normal(0.0, config.random_intercept_sd)
        drift = (0.55 + 0.25 * apoe4 + 0.02 * (age - 73.0) - 0.03 * (edu - 16.0)
                 + 0.1 * sex + b_i)
        cdr_latent = np.empty(months.size)
        cdr_latent[0] = float(np.clip(rng.normal(1.8, 1.0), 0.5, 4.0))
        for v in range(1, months.size):
            seen = adas_seen[:v]
            signal = decayed_slope(months[:v][seen], adas_obs[:v][seen], months[v - 1],
                                   config.signal_decay)
            rate = drift + config.signal_strength * (signal - 2.0) / 4.0
            dt = months[v] - months[v - 1]
            cdr_latent[v] = cdr_latent[v - 1] + dt / 12.0 * max(rate, -0.5)
        cdr_obs = np.clip(cdr_latent + rng.normal(0.0, config.cdrsb_noise_sd, months.size),
                          0.0, 18.0)

        in_mri = rng.random() < config.mri_prob
        in_csf = rng.random() < config.csf_prob
        atrophy = rng.normal(0.0, 1.0)
        amyloid = rng.normal(0.0, 1.0) + 0.5 * apoe4
        for v, m in enumerate(months):
            m = float(m)
            severity = float(latent_adas[v] - 17.0) / 8.0
            rows = {
                "CDRSB": round(float(cdr_obs[v]), 3),
                DX: DX_LEVELS[_dx_from_cdrsb(float(cdr_latent[v]))],
            }
            if adas_seen[v]:
                rows["ADAS13"] = round(float(adas_obs[v]), 3)
            if rng.random() < config.clinical_obs_prob:
                rows["MMSE"] = round(float(np.clip(
                    28.5 - 1.2 * severity - 0.4 * cdr_latent[v] + rng.normal(0, 1.0), 0, 30)), 3)
            if rng.random() < config.clinical_obs_prob:
                rows["FAQ"] = round(float(np.clip(
                    1.5 * cdr_latent[v] + rng.normal(0, 1.5), 0, 30)), 3)
            if in_mri and (v == 0 or rng.random() < config.mri_repeat_prob):
                shrink = 1.0 - 0.01 * m / 12.0 - 0.02 * atrophy - 0.01 * severity
                rows["WholeBrain"] = round(1.0e6 * shrink + rng.normal(0, 5e3), 1)
                rows["Ventricles"] = round(4.0e4 / shrink ** 4 + rng.normal(0, 2e3), 1)
                rows["Hippocampus"] = round(6.5e3 * shrink ** 3 + rng.normal(0, 150), 1)
                rows["Entorhinal"] = round(3.4e3 * shrink ** 3 + rng.normal(0, 120), 1)
                rows["Fusiform"] = round(1.7e4 * shrink ** 2 + rng.normal(0, 400), 1)
                rows["MidTemp"] = round(1.9e4 * shrink ** 2 + rng.normal(0, 450), 1)
                rows["InfTemp"] = round(1.9e4 * shrink ** 2 + rng.normal(0, 450), 1)
            if in_csf and (v == 0 or rng.random() < config.csf_repeat_prob):
                rows["ABETA"] = round(900.0 - 180.0 * amyloid + rng.normal(0, 60), 2)
                rows["TAU"] = round(280.0 + 40.0 * severity + 30 * amyloid + rng.normal(0, 25), 2)
                rows["PTAU"] = round(27.0 + 4.0 * severity + 3 * amyloid + rng.normal(0, 2.5), 2)
            for var in VOCABULARY:
                if var in rows:
                    visits.append(VisitRecord(pid, m, var, float(rows[var])))
    visits.sort(key=lambda r: (r.participant_id, r.visit_month, VARIABLE_ID[r.variable]))
    return CohortTable(visits, static)
