"""Out-of-distribution monitor over image meta-properties.

Training images are summarized by four appearance meta-properties
(brightness, saturation, entropy, edge_amount). Each property gets an
independent beta distribution fitted by the method of moments on an affine
map of the samples onto (0, 1). At runtime a frame is accepted only when
every property lies inside the central quantile interval
[x_q, x_{1-q}] of its fitted distribution; one extreme property is enough
to reject.

Models serialize to a small versioned text format that round-trips floats
bit for bit (17 significant digits).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DataError, FitError
from .fsio import atomic_write_text
from .imaging import PROPERTY_NAMES, MetaProperties
from .verdict import Verdict, accept, reject

# Margin added around the sample range so the mapped samples avoid the
# open-interval endpoints, where the beta density can be singular.
_SUPPORT_MARGIN = 1e-6

MIN_FIT_SAMPLES = 10

OOD_FORMAT_HEADER = "safemon-ood v1"


@dataclass(frozen=True)
class BetaParams:
    """Beta(alpha, beta) shape parameters over the affine support [lo, hi]."""

    alpha: float
    beta: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"shape parameters must be positive, got {self.alpha}, {self.beta}")
        if not self.lo < self.hi:
            raise ValueError(f"support must be a proper interval, got [{self.lo}, {self.hi}]")

    def to_unit(self, x: float) -> float:
        return (x - self.lo) / (self.hi - self.lo)

    def from_unit(self, u: float) -> float:
        return self.lo + u * (self.hi - self.lo)


def mom_shape_params(mean: float, var: float) -> tuple[float, float]:
    """Method-of-moments shape estimates for samples on (0, 1).

    Solves mean = a/(a+b), var = ab/((a+b)^2 (a+b+1)) for (a, b).
    """
    if not 0.0 < mean < 1.0:
        raise FitError(f"sample mean {mean:g} outside (0, 1)")
    if var <= 0.0:
        raise FitError("sample variance is zero; samples are degenerate")
    if var >= mean * (1.0 - mean):
        raise FitError(
            f"sample variance {var:g} too large for a beta fit "
            f"(limit {mean * (1.0 - mean):g})"
        )
    common = mean * (1.0 - mean) / var - 1.0
    return mean * common, (1.0 - mean) * common


def fit_beta_mom(samples, support: tuple[float, float] | None = None) -> BetaParams:
    """Fit a beta distribution by the method of moments.

    Args:
        samples: 1-d array-like of at least MIN_FIT_SAMPLES finite values.
        support: optional known (lo, hi) support. When omitted, the support
            is the sample range plus a tiny margin on each side. Pass the
            true support when it is known; the sample-range default
            underestimates tail mass for distributions whose density
            vanishes at the ends.

    Raises:
        FitError: too few samples, degenerate samples, non-finite values,
            samples outside the given support, or moments incompatible with
            a beta distribution.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < MIN_FIT_SAMPLES:
        raise FitError(f"need at least {MIN_FIT_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise FitError("samples contain non-finite values")
    xmin, xmax = float(x.min()), float(x.max())
    if xmin == xmax:
        raise FitError("all samples are identical")
    if support is None:
        margin = _SUPPORT_MARGIN * (xmax - xmin + 1e-12)
        lo, hi = xmin - margin, xmax + margin
    else:
        lo, hi = float(support[0]), float(support[1])
        if not lo < hi:
            raise FitError(f"support must satisfy lo < hi, got [{lo}, {hi}]")
        if xmin < lo or xmax > hi:
            raise FitError(
                f"samples range [{xmin:g}, {xmax:g}] outside support [{lo:g}, {hi:g}]"
            )
    u = (x - lo) / (hi - lo)
    alpha, beta = mom_shape_params(float(u.mean()), float(u.var()))
    return BetaParams(alpha=alpha, beta=beta, lo=lo, hi=hi)


def beta_cdf(params: BetaParams, x: float) -> float:
    """CDF of the fitted distribution at x (raw units)."""
    u = min(max(params.to_unit(x), 0.0), 1.0)
    return float(special.betainc(params.alpha, params.beta, u))


def beta_quantile(params: BetaParams, level: float, tol: float = 1e-12) -> float:
    """Quantile via bisection on the regularized incomplete beta function.

    Bisection is slower than a Newton solver but is monotone, bracketing and
    immune to the density singularities at the support ends.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {level}")
    a, b = 0.0, 1.0
    while b - a > tol:
        mid = 0.5 * (a + b)
        if float(special.betainc(params.alpha, params.beta, mid)) < level:
            a = mid
        else:
            b = mid
    return params.from_unit(0.5 * (a + b))


@dataclass(frozen=True)
class OodModel:
    """Per-property beta fits plus the acceptance intervals they induce."""

    q: float
    params: tuple[BetaParams, ...]
    intervals: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.params) != len(PROPERTY_NAMES) or len(self.intervals) != len(PROPERTY_NAMES):
            raise ValueError("model must cover exactly the four meta-properties")
        if not 0.0 < self.q < 0.5:
            raise ValueError(f"quantile level q must be in (0, 0.5), got {self.q}")


def fit_ood(props, q: float, supports=None) -> OodModel:
    """Fit the monitor from an (n, 4) matrix of per-image meta-properties.

    Columns follow PROPERTY_NAMES order. supports, when given, is a sequence
    of four optional (lo, hi) pairs passed through to fit_beta_mom.
    """
    mat = np.asarray(props, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != len(PROPERTY_NAMES):
        raise FitError(f"property matrix must have shape (n, 4), got {mat.shape}")
    if not 0.0 < q < 0.5:
        raise FitError(f"quantile level q must be in (0, 0.5), got {q}")
    if supports is None:
        supports = (None,) * len(PROPERTY_NAMES)
    if len(supports) != len(PROPERTY_NAMES):
        raise FitError("supports must provide one entry per meta-property")
    params = []
    intervals = []
    for j, name in enumerate(PROPERTY_NAMES):
        try:
            p = fit_beta_mom(mat[:, j], support=supports[j])
        except FitError as exc:
            raise FitError(f"{name}: {exc}") from exc
        params.append(p)
        intervals.append((beta_quantile(p, q), beta_quantile(p, 1.0 - q)))
    return OodModel(q=float(q), params=tuple(params), intervals=tuple(intervals))


def check_ood(model: OodModel, props: MetaProperties) -> Verdict:
    """Accept iff every meta-property lies in its acceptance interval."""
    values = props.as_array()
    if not np.all(np.isfinite(values)):
        raise ValueError("meta-properties contain non-finite values")
    reasons = []
    for name, x, (lo, hi) in zip(PROPERTY_NAMES, values, model.intervals):
        if not lo <= x <= hi:
            reasons.append(f"{name}: {x:.6g} outside [{lo:.6g}, {hi:.6g}]")
    if reasons:
        return reject("OOD", reasons)
    return accept("OOD")


def dumps_ood_model(model: OodModel) -> str:
    lines = [OOD_FORMAT_HEADER, f"q {model.q:.17g}"]
    for name, p, (lo, hi) in zip(PROPERTY_NAMES, model.params, model.intervals):
        lines.append(
            f"{name} {p.alpha:.17g} {p.beta:.17g} {p.lo:.17g} {p.hi:.17g} "
            f"{lo:.17g} {hi:.17g}"
        )
    return "\n".join(lines) + "\n"


def loads_ood_model(text: str) -> OodModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != OOD_FORMAT_HEADER:
        raise DataError(f"not an ood model file (expected header {OOD_FORMAT_HEADER!r})")
    if len(lines) != 2 + len(PROPERTY_NAMES):
        raise DataError(f"ood model file must have {2 + len(PROPERTY_NAMES)} lines")
    qtok = lines[1].split()
    if len(qtok) != 2 or qtok[0] != "q":
        raise DataError(f"bad q line {lines[1]!r}")
    q = float(qtok[1])
    params = []
    intervals = []
    for name, line in zip(PROPERTY_NAMES, lines[2:]):
        tok = line.split()
        if len(tok) != 7 or tok[0] != name:
            raise DataError(f"bad property line {line!r} (expected {name})")
        vals = [float(t) for t in tok[1:]]
        params.append(BetaParams(alpha=vals[0], beta=vals[1], lo=vals[2], hi=vals[3]))
        intervals.append((vals[4], vals[5]))
    return OodModel(q=q, params=tuple(params), intervals=tuple(intervals))


def save_ood_model(model: OodModel, path) -> None:
    atomic_write_text(path, dumps_ood_model(model))


def load_ood_model(path) -> OodModel:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_ood_model(fh.read())
