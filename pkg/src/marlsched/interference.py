"""Co-location slowdown model: exponential CPU term plus linear PCIe term."""
import csv
import logging
import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.optimize import least_squares

log = logging.getLogger(__name__)

EXP_CAP = 50.0
MIN_SAMPLES = 20


class InterferenceError(ValueError):
    pass


@dataclass(frozen=True)
class InterferenceCoefficients:
    alpha1: float = 0.0
    alpha2: float = 0.0
    alpha3: float = 0.0
    lambda1: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    lambda2: float = 0.0

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Coefficients used by the desk-scale experiments; empty contexts predict <= 0.
DEFAULT_COEFFICIENTS = InterferenceCoefficients(
    alpha1=0.03, alpha2=0.35, alpha3=0.05, lambda1=-0.045,
    beta1=0.006, beta2=0.002, lambda2=-0.1,
)


@dataclass(frozen=True)
class CoLocationContext:
    subject_cpu: float
    subject_pcie: float
    same_group: tuple = ()  # (cpu_util, pcie_util) of jobs under the subject's CPU
    diff_group: tuple = ()  # cpu_util of jobs under the server's other CPUs
    n_core: int = 8

    def __post_init__(self):
        vals = [self.subject_cpu, self.subject_pcie, *self.diff_group]
        vals += [x for pair in self.same_group for x in pair]
        if any(v < 0 for v in vals):
            raise InterferenceError("utilizations must be non-negative")


def u_c(ctx):
    """CPU pressure from interfering jobs; the other socket only counts beyond n_core."""
    same = sum(c for c, _ in ctx.same_group)
    return same + max(0.0, sum(ctx.diff_group) - ctx.n_core)


def u_p(ctx):
    return sum(p for _, p in ctx.same_group)


def cpu_slowdown(ctx, coeffs):
    z = coeffs.alpha2 * u_c(ctx) + coeffs.alpha3 * ctx.subject_cpu
    if z > EXP_CAP:
        log.warning("CPU slowdown exponent %.3g capped at %g", z, EXP_CAP)
        z = EXP_CAP
    return coeffs.alpha1 * math.exp(z) + coeffs.lambda1


def pcie_slowdown(ctx, coeffs):
    return coeffs.beta1 * u_p(ctx) + coeffs.beta2 * ctx.subject_pcie + coeffs.lambda2


def total_slowdown(ctx, coeffs):
    return max(0.0, cpu_slowdown(ctx, coeffs) + pcie_slowdown(ctx, coeffs))


def predict_arrays(coeffs, uc, cj, up, pj):
    """Vectorised total slowdown over feature arrays (clamped at 0)."""
    z = np.minimum(coeffs.alpha2 * uc + coeffs.alpha3 * cj, EXP_CAP)
    raw = (coeffs.alpha1 * np.exp(z) + coeffs.lambda1
           + coeffs.beta1 * up + coeffs.beta2 * pj + coeffs.lambda2)
    return np.maximum(raw, 0.0)


@dataclass(frozen=True)
class SlowdownSample:
    context: CoLocationContext
    observed_slowdown: float


def features(samples):
    """(U_c, C_J, U_p, P_J, y) arrays."""
    if any(not math.isfinite(s.observed_slowdown) for s in samples):
        raise InterferenceError("non-finite slowdown in samples")
    uc = np.array([u_c(s.context) for s in samples])
    cj = np.array([s.context.subject_cpu for s in samples])
    up = np.array([u_p(s.context) for s in samples])
    pj = np.array([s.context.subject_pcie for s in samples])
    y = np.array([s.observed_slowdown for s in samples])
    for arr in (uc, cj, up, pj):
        if not np.all(np.isfinite(arr)):
            raise InterferenceError("non-finite utilization in samples")
    return uc, cj, up, pj, y


def mean_relative_error(pred, y):
    return float(np.mean(np.abs(pred - y) / np.maximum(np.abs(y), 1e-6)))


def _split(n, seed, holdout):
    order = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(holdout * n))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def _fit_exp_plus_linear(u, c, lin, y, rng, restarts):
    """Fit ``a1*exp(a2*u + a3*c) + lin @ w + k`` by variable projection.

    Restarts sample the two exponent rates; the remaining parameters are
    the exact least-squares solution for each candidate rate pair.
    """
    ones = np.ones_like(y)

    def design(rates):
        z = np.minimum(rates[0] * u + rates[1] * c, EXP_CAP)
        return np.column_stack([np.exp(z), lin, ones])

    def solve(rates):
        x = design(rates)
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        return w, x @ w - y

    best = None
    for _ in range(restarts):
        start = rng.normal(0.0, 1.0, size=2)
        res = least_squares(lambda r: solve(r)[1], start, method="lm", max_nfev=400)
        w, resid = solve(res.x)
        sse = float(resid @ resid)
        if best is None or sse < best[0] - 1e-15:
            best = (sse, res.x.copy(), w)
    return best


class FitReport(dict):
    """Mean relative errors keyed by split ('fit', 'heldout')."""


def fit(samples, seed=0, restarts=16, holdout=0.2):
    """Least-squares fit of all seven coefficients with random restarts.

    Returns ``(coefficients, FitReport)``.  The two model constants are not
    separately identifiable; the fitted constant goes to ``lambda1`` and
    ``lambda2`` is 0.
    """
    if len(samples) < MIN_SAMPLES:
        raise InterferenceError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    uc, cj, up, pj, y = features(samples)
    tr, ho = _split(len(y), seed, holdout)
    coeffs = _fit_full(uc[tr], cj[tr], up[tr], pj[tr], y[tr], seed, restarts)
    report = FitReport(fit=mean_relative_error(predict_arrays(coeffs, uc[tr], cj[tr], up[tr], pj[tr]), y[tr]))
    if len(ho):
        report["heldout"] = mean_relative_error(
            predict_arrays(coeffs, uc[ho], cj[ho], up[ho], pj[ho]), y[ho])
    return coeffs, report


def _scales(uc, cj, up, pj):
    sc = max(float(np.max(np.abs(np.concatenate([uc, cj])))), 1e-9)
    sp = max(float(np.max(np.abs(np.concatenate([up, pj])))), 1e-9)
    return sc, sp


def _fit_full(uc, cj, up, pj, y, seed, restarts, with_pcie=True):
    sc, sp = _scales(uc, cj, up, pj)
    lin = np.column_stack([up / sp, pj / sp]) if with_pcie else np.zeros((len(y), 0))
    rng = np.random.default_rng(seed)
    _, rates, w = _fit_exp_plus_linear(uc / sc, cj / sc, lin, y, rng, restarts)
    b1, b2 = (w[1] / sp, w[2] / sp) if with_pcie else (0.0, 0.0)
    return InterferenceCoefficients(alpha1=w[0], alpha2=rates[0] / sc, alpha3=rates[1] / sc,
                                    lambda1=w[-1], beta1=b1, beta2=b2, lambda2=0.0)


def _linear_fit(cols_fit, y_fit):
    x = np.column_stack(cols_fit + [np.ones_like(y_fit)])
    w, *_ = np.linalg.lstsq(x, y_fit, rcond=None)
    return lambda cols: np.column_stack(cols + [np.ones(len(cols[0]))]) @ w


MODEL_VARIANTS = ("linear", "quadratic", "full", "w/o PCIe", "w/o CPU")


def ablated_models(samples, seed=0, restarts=16, holdout=0.2):
    """Held-out mean relative error of each model variant on one shared split.

    ``linear`` and ``quadratic`` are polynomials of degree 1 and 2 (no cross
    terms) in (U_c, C_J, U_p, P_J); ``w/o PCIe`` keeps only the exponential
    CPU term, ``w/o CPU`` only the linear PCIe term.
    """
    if len(samples) < MIN_SAMPLES:
        raise InterferenceError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    uc, cj, up, pj, y = features(samples)
    tr, ho = _split(len(y), seed, holdout)
    X = [uc, cj, up, pj]
    sc, sp = _scales(uc[tr], cj[tr], up[tr], pj[tr])
    norm = [uc / sc, cj / sc, up / sp, pj / sp]

    out = {}
    lin = _linear_fit([v[tr] for v in norm], y[tr])
    out["linear"] = lin([v[ho] for v in norm])
    quad_cols = norm + [v * v for v in norm]
    quad = _linear_fit([v[tr] for v in quad_cols], y[tr])
    out["quadratic"] = quad([v[ho] for v in quad_cols])
    full = _fit_full(*(v[tr] for v in X), y[tr], seed, restarts)
    out["full"] = predict_arrays(full, *(v[ho] for v in X))
    no_pcie = _fit_full(*(v[tr] for v in X), y[tr], seed, restarts, with_pcie=False)
    out["w/o PCIe"] = predict_arrays(no_pcie, *(v[ho] for v in X))
    no_cpu = _linear_fit([norm[2][tr], norm[3][tr]], y[tr])
    out["w/o CPU"] = no_cpu([norm[2][ho], norm[3][ho]])
    return {name: mean_relative_error(out[name], y[ho]) for name in MODEL_VARIANTS}


def synthesize_samples(coeffs, n, seed, noise=0.05, n_core=8, profiles=None):
    """Random co-location contexts labelled by ``coeffs`` with multiplicative noise.

    Subjects and co-runners are drawn from ``profiles`` ((cpu, pcie) pairs);
    labels are clamped model predictions times ``1 + noise * N(0, 1)``.
    """
    rng = np.random.default_rng(seed)
    if profiles is None:
        profiles = [(6, 30), (4, 50), (5, 25), (3, 15), (4, 20), (3, 35), (7, 10), (2, 15)]
    profiles = np.asarray(profiles, dtype=np.float64)
    out = []
    for _ in range(n):
        subj = profiles[rng.integers(len(profiles))] * rng.uniform(0.8, 1.2, size=2)
        same = tuple(tuple(profiles[rng.integers(len(profiles))] * rng.uniform(0.8, 1.2, size=2))
                     for _ in range(rng.integers(0, 4)))
        diff = tuple(float(profiles[rng.integers(len(profiles)), 0] * rng.uniform(0.8, 1.2))
                     for _ in range(rng.integers(0, 5)))
        ctx = CoLocationContext(float(subj[0]), float(subj[1]), same, diff, n_core)
        clean = total_slowdown(ctx, coeffs)
        out.append(SlowdownSample(ctx, clean * (1.0 + noise * rng.standard_normal())))
    return out


SAMPLE_HEADER = ["C_J", "P_J", "same_cpu", "same_pcie", "diff_cpu", "n_core", "slowdown"]


def _join(values):
    return ";".join(repr(float(v)) for v in values)


def _parse_list(text):
    text = text.strip()
    return [float(x) for x in text.split(";")] if text else []


def write_samples(path, samples):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_HEADER)
        for s in samples:
            c = s.context
            w.writerow([c.subject_cpu, c.subject_pcie, _join(x for x, _ in c.same_group),
                        _join(p for _, p in c.same_group), _join(c.diff_group), c.n_core,
                        s.observed_slowdown])


def read_samples(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cpu, pcie = _parse_list(row["same_cpu"]), _parse_list(row["same_pcie"])
            if len(cpu) != len(pcie):
                raise InterferenceError("same_cpu and same_pcie lists differ in length")
            ctx = CoLocationContext(float(row["C_J"]), float(row["P_J"]), tuple(zip(cpu, pcie)),
                                    tuple(_parse_list(row["diff_cpu"])), int(float(row["n_core"])))
            out.append(SlowdownSample(ctx, float(row["slowdown"])))
    return out
