"""Pullback metrics, their null/non-null eigenstructure, and curve functionals.

The output space carries the identity metric unless another symmetric matrix
is supplied. The metric transported to manifold i is g = J^T G J with J the
Jacobian of the suffix map at the evaluation point; it is symmetric positive
semidefinite up to rounding and in general singular. Directions in the
numerical null space move the output only at second order.
"""
from dataclasses import dataclass

import numpy as np

from .network import Network, evaluate, jacobian, jvp

Array = np.ndarray

DEFAULT_NULL_TOL = 1e-6  # relative eigenvalue threshold separating noise from rank
NEGATIVE_EIG_RTOL = 1e-8  # eigenvalues below -rtol*lambda_max signal a broken metric


class MetricError(ValueError):
    """Raised when a metric is not a valid PSD bilinear form."""


class DegenerateMetricError(MetricError):
    """The metric vanishes entirely: the whole space is locally one class."""


@dataclass(frozen=True)
class PullbackMetric:
    """Symmetric d x d matrix of the transported output metric at ``point``."""

    point: Array
    matrix: Array
    from_layer: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class MetricDecomposition:
    """Eigendecomposition of a pullback metric, eigenvalues descending and
    clamped at zero, with the null set chosen by a relative threshold."""

    eigenvalues: Array
    eigenvectors: Array  # orthonormal columns aligned with eigenvalues
    null_indices: tuple[int, ...]
    lambda_max: float
    null_tol: float

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def rank(self) -> int:
        return self.dim - len(self.null_indices)

    @property
    def nonnull_indices(self) -> tuple[int, ...]:
        null = set(self.null_indices)
        return tuple(i for i in range(self.dim) if i not in null)

    def null_basis(self) -> Array:
        return self.eigenvectors[:, list(self.null_indices)]

    def to_csv(self) -> str:
        lines = ["index,eigenvalue,null"]
        null = set(self.null_indices)
        for i, lam in enumerate(self.eigenvalues):
            lines.append(f"{i},{float(lam)!r},{int(i in null)}")
        return "\n".join(lines) + "\n"


def pullback_metric(net: Network, x, from_layer: int = 0,
                    output_metric=None) -> PullbackMetric:
    """Transport the output metric to manifold ``from_layer`` at x."""
    j = jacobian(net, x, from_layer)
    if not np.all(np.isfinite(j)):
        raise MetricError("Jacobian has non-finite entries")
    if output_metric is None:
        g = j.T @ j
    else:
        G = np.asarray(output_metric, dtype=np.float64)
        if G.shape != (j.shape[0], j.shape[0]):
            raise MetricError("output metric shape does not match the output dim")
        if not np.allclose(G, G.T, atol=1e-12):
            raise MetricError("output metric must be symmetric")
        g = j.T @ G @ j
    g = 0.5 * (g + g.T)
    return PullbackMetric(point=np.asarray(x, dtype=np.float64), matrix=g,
                          from_layer=from_layer)


def eigen_split(metric, null_tol: float = DEFAULT_NULL_TOL) -> MetricDecomposition:
    """Symmetric eigendecomposition split into null and non-null parts.

    Accepts a PullbackMetric or a raw symmetric matrix. Slightly negative
    eigenvalues (>= -1e-8 * lambda_max) are rounding debris and are clamped to
    zero; anything more negative is an error in the metric computation.
    """
    if not 0.0 < null_tol < 1.0:
        raise ValueError("null_tol must lie in (0, 1)")
    g = metric.matrix if isinstance(metric, PullbackMetric) else np.asarray(metric, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise MetricError("metric must be a square matrix")
    if not np.allclose(g, g.T, atol=1e-12 * max(1.0, float(np.abs(g).max(initial=0.0)))):
        raise MetricError("metric must be symmetric")
    w, v = np.linalg.eigh(g)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    lam_max = float(w[0])
    if lam_max <= 0.0:
        if np.allclose(w, 0.0):
            raise DegenerateMetricError("metric is numerically zero at this point")
        raise MetricError("metric has no positive eigenvalue")
    if w[-1] < -NEGATIVE_EIG_RTOL * lam_max:
        raise MetricError(
            f"significantly negative eigenvalue {w[-1]:.3e} "
            f"(lambda_max {lam_max:.3e}); the metric computation is broken"
        )
    w = np.where(w < 0.0, 0.0, w)
    null = tuple(int(i) for i in range(w.size) if w[i] <= null_tol * lam_max)
    return MetricDecomposition(eigenvalues=w, eigenvectors=v, null_indices=null,
                               lambda_max=lam_max, null_tol=null_tol)


@dataclass(frozen=True)
class Curve:
    """Uniformly parametrized polyline sample of a curve."""

    samples: Array

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 2:
            raise ValueError("a curve needs at least two samples of equal dim")
        object.__setattr__(self, "samples", s)

    @property
    def n_segments(self) -> int:
        return self.samples.shape[0] - 1


def _as_curve(curve) -> Curve:
    return curve if isinstance(curve, Curve) else Curve(np.asarray(curve))


def _segment_quadratic_forms(net: Network, curve: Curve, from_layer: int) -> Array:
    """delta^T g_mid delta per segment, evaluated as |J_mid delta|^2."""
    s = curve.samples
    mids = 0.5 * (s[:-1] + s[1:])
    deltas = s[1:] - s[:-1]
    out = np.empty(curve.n_segments)
    for k in range(curve.n_segments):
        img = jvp(net, mids[k], deltas[k], from_layer)
        out[k] = float(img @ img)
    return out


def curve_pseudolength(net: Network, curve, from_layer: int = 0) -> float:
    """Midpoint-rule pseudolength: sum_k sqrt(max(0, delta^T g_mid delta))."""
    qf = _segment_quadratic_forms(net, _as_curve(curve), from_layer)
    return float(np.sum(np.sqrt(np.maximum(qf, 0.0))))


def curve_energy(net: Network, curve, from_layer: int = 0) -> float:
    """Riemann-sum energy of the curve over [0, 1]: each squared segment term
    is scaled by the segment count so the sum approximates the integral of the
    squared speed."""
    c = _as_curve(curve)
    qf = _segment_quadratic_forms(net, c, from_layer)
    return float(c.n_segments * np.sum(np.maximum(qf, 0.0)))


def pushforward_length(net: Network, curve, from_layer: int = 0) -> float:
    """Euclidean polyline length of the curve's image in the output space."""
    c = _as_curve(curve)
    imgs = evaluate(net, c.samples, from_layer)
    return float(np.sum(np.linalg.norm(np.diff(imgs, axis=0), axis=1)))


def pseudodistance_upper_bound(net: Network, x, y, n_samples: int = 256,
                               from_layer: int = 0) -> float:
    """Pseudolength of the straight segment from x to y.

    This bounds the pseudodistance from above; the infimum over all curves is
    not computed.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("endpoints must have equal dimension")
    t = np.linspace(0.0, 1.0, n_samples)[:, None]
    return curve_pseudolength(net, Curve((1.0 - t) * a + t * b), from_layer)
