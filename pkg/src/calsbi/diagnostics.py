"""Post-hoc coverage diagnostics, independent of training-time machinery.

Expected coverage is estimated two ways: from rank statistics (the ECDF of
alpha at 1 - level) and from explicit highest-density regions found by
density-threshold search on a grid. Both estimate the same quantity and are
kept separate on purpose so one can audit the other. Evaluation always uses
hard indicators and fresh RNG streams.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import covreg
from .problems import _grid_axes

DEFAULT_EVAL_LEVELS = tuple(np.linspace(0.05, 0.95, 19).tolist())
DEFAULT_EVAL_SAMPLES = 1024
DEFAULT_GRID_RESOLUTION = 512


@dataclass
class CoverageCurve:
    """(credibility level, expected coverage) pairs plus provenance."""

    levels: np.ndarray
    ecp: np.ndarray
    n_pairs: int
    method: str                       # rank-based | grid-hpdr
    num_samples: int = None           # rank-based only

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.ecp = np.asarray(self.ecp, dtype=np.float64)
        if self.levels.shape != self.ecp.shape:
            raise ValueError("levels and ecp must have matching lengths")
        if not np.all(np.diff(self.levels) > 0):
            raise ValueError("levels must be strictly increasing")
        if np.any((self.ecp < 0) | (self.ecp > 1)):
            raise ValueError("ecp values must lie in [0, 1]")


@dataclass
class SbcHistogram:
    counts: np.ndarray
    bins: int
    total: int

    def edges(self):
        return np.arange(self.bins + 1) / self.bins


@dataclass
class ExpectedLogDensityReport:
    value: float
    excluded: int
    normalized: bool
    prior_baseline: float = None


@dataclass
class MixtureDemoReport:
    level: float
    ecp: float
    segments: list
    n_samples: int
    self_test: bool = field(default=False)


def rank_statistic_sample(posterior, thetas, xs, num_samples, proposal, rng,
                          chunk=None):
    """Hard-indicator rank statistics for every test pair, chunk-vectorized.

    The chunk defaults to roughly 32k density rows per slice, which keeps
    the intermediate arrays cache-friendly.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if thetas.shape[0] == 0:
        raise ValueError("empty test set")
    if chunk is None:
        chunk = max(1, 32768 // (num_samples + 1))
    out = np.empty(thetas.shape[0])
    with ad.no_grad():
        for lo in range(0, thetas.shape[0], chunk):
            hi = min(lo + chunk, thetas.shape[0])
            batch = covreg.rank_statistics(posterior, thetas[lo:hi], xs[lo:hi],
                                           num_samples, proposal, rng)
            out[lo:hi] = batch.values.data[:, 0]
    return out


def curve_from_rank_statistics(alphas, levels, num_samples=None):
    """ECP(level) = fraction of rank statistics >= 1 - level."""
    alphas = np.asarray(alphas, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    ecp = np.array([np.mean(alphas >= 1.0 - lev) for lev in levels])
    return CoverageCurve(levels, ecp, alphas.size, "rank-based", num_samples)


def ecp_rank_based(posterior, thetas, xs, levels=DEFAULT_EVAL_LEVELS,
                   num_samples=DEFAULT_EVAL_SAMPLES, proposal=None, rng=None,
                   prior=None, chunk=None):
    proposal = covreg.resolve_proposal(proposal if proposal is not None else "prior",
                                       prior)
    rng = rng if rng is not None else np.random.default_rng(0)
    alphas = rank_statistic_sample(posterior, thetas, xs, num_samples,
                                   proposal, rng, chunk)
    return curve_from_rank_statistics(alphas, levels, num_samples)


def _paired_log_density(posterior, thetas, xs):
    if hasattr(posterior, "embed") and hasattr(posterior, "log_density_from_embedding"):
        return posterior.log_density_from_embedding(thetas, posterior.embed(xs))
    return posterior.log_density(thetas, xs)


def ecp_grid_hpdr(posterior, thetas, xs, problem, levels=DEFAULT_EVAL_LEVELS,
                  resolution=DEFAULT_GRID_RESOLUTION, chunk=8):
    """ECP via explicit highest-density regions on a parameter grid.

    Per test pair the posterior is normalized over the grid, the smallest
    density threshold whose super-level set holds at least the target mass is
    located, and membership of the nominal parameter's cell is recorded.
    Reserved for dim_theta <= 2.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if thetas.shape[0] == 0:
        raise ValueError("empty test set")
    dim = thetas.shape[1]
    if dim > 2:
        raise ValueError("grid-hpdr coverage supports dim_theta <= 2 only")
    levels = np.asarray(levels, dtype=np.float64)
    bounds = _grid_axes(problem)
    res = resolution
    centers, steps = [], []
    for lo, hi in bounds:
        step = (hi - lo) / res
        steps.append(step)
        centers.append(lo + step * (np.arange(res) + 0.5))
    if dim == 1:
        grid = centers[0].reshape(-1, 1)
    else:
        a, b = np.meshgrid(centers[0], centers[1], indexing="ij")
        grid = np.stack([a.ravel(), b.ravel()], axis=1)
    n_cells = grid.shape[0]

    hits = np.zeros(levels.size)
    n = thetas.shape[0]
    for lo_i in range(0, n, chunk):
        hi_i = min(lo_i + chunk, n)
        m = hi_i - lo_i
        if hasattr(posterior, "log_density_grid"):
            ld = posterior.log_density_grid(grid, xs[lo_i:hi_i])
        else:
            tiled_x = np.repeat(xs[lo_i:hi_i], n_cells, axis=0)
            tiled_grid = np.tile(grid, (m, 1))
            ld = _paired_log_density(posterior, tiled_grid, tiled_x).reshape(m, n_cells)
        # nominal cell index per pair
        cell_ld = np.full(m, -np.inf)
        idx = np.zeros(m, dtype=np.intp)
        ok = np.ones(m, dtype=bool)
        for d in range(dim):
            lo_d, hi_d = bounds[d]
            c = np.floor((thetas[lo_i:hi_i, d] - lo_d) / steps[d]).astype(np.intp)
            ok &= (c >= 0) & (c < res)
            c = np.clip(c, 0, res - 1)
            idx = idx * res + c if dim == 2 else c
        cell_ld[ok] = ld[np.arange(m), idx][ok]

        sorted_ld = np.sort(ld, axis=1)[:, ::-1]
        rel = np.exp(sorted_ld - sorted_ld[:, :1])
        cmass = np.cumsum(rel, axis=1)
        cmass /= cmass[:, -1:]
        for k, level in enumerate(levels):
            pos = np.minimum(
                np.array([np.searchsorted(cmass[i], level, side="left")
                          for i in range(m)]), n_cells - 1)
            thresholds = sorted_ld[np.arange(m), pos]
            hits[k] += np.sum(cell_ld >= thresholds)
    return CoverageCurve(levels, hits / n, n, "grid-hpdr")


def coverage_auc(curve):
    """Signed area between the coverage curve and the diagonal.

    Endpoints (0,0) and (1,1) are appended; positive means conservative on
    average, negative overconfident.
    """
    t = np.concatenate([[0.0], curve.levels, [1.0]])
    gap = np.concatenate([[0.0], curve.ecp - curve.levels, [0.0]])
    return float(np.trapezoid(gap, t))


def calibration_error(curve):
    return float(np.mean(np.abs(curve.levels - curve.ecp)))


def conservativeness_error(curve):
    return float(np.mean(np.maximum(curve.levels - curve.ecp, 0.0)))


def ks_statistic(values):
    """Two-sided sup gap between the sample ECDF and the uniform CDF."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ValueError("ks_statistic needs at least one value")
    if np.any((values < 0) | (values > 1)):
        raise ValueError("values must lie in [0, 1]")
    v = np.sort(values)
    n = v.size
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - v), np.max(v - (grid - 1.0 / n))))


def expected_log_posterior(posterior, thetas, xs, prior=None):
    """Mean log density at the nominal parameters, with a prior baseline.

    Support violations (-inf) are excluded from the mean and counted. The
    report keeps the posterior's normalization flag: for unnormalized models
    the value is only a surrogate.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ld = _paired_log_density(posterior, thetas, xs)
    bad = ~np.isfinite(ld)
    value = float(np.mean(ld[~bad])) if np.any(~bad) else -math.inf
    baseline = None
    if prior is not None:
        baseline = float(np.mean(prior.log_density(thetas)))
    return ExpectedLogDensityReport(value=value, excluded=int(bad.sum()),
                                    normalized=bool(getattr(posterior, "normalized", False)),
                                    prior_baseline=baseline)


def sbc_histogram(values, bins=20):
    """Equal-width right-closed histogram of rank statistics over [0, 1].

    Bin b holds values in (b/B, (b+1)/B], with 0 counted in the first bin,
    so an exact i/N grid lands in equal counts whenever B divides N.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    values = np.asarray(values, dtype=np.float64)
    if np.any((values < 0) | (values > 1)):
        raise ValueError("values must lie in [0, 1]")
    edges = np.arange(bins + 1) / bins
    idx = np.clip(np.searchsorted(edges, values, side="left") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return SbcHistogram(counts=counts, bins=bins, total=int(values.size))


def hpdr_intervals_1d(pdf, bounds, level, resolution=4096):
    """Highest-density super-level intervals of a 1D density.

    Threshold search on a dense grid: cells are ranked by density, the
    smallest threshold reaching the target mass is taken, and contiguous
    runs of super-threshold cells become intervals (cell-edge endpoints).
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly inside (0, 1)")
    lo, hi = bounds
    step = (hi - lo) / resolution
    centers = lo + step * (np.arange(resolution) + 0.5)
    dens = np.asarray(pdf(centers), dtype=np.float64)
    mass = dens / dens.sum()
    order = np.argsort(-dens, kind="stable")
    cmass = np.cumsum(mass[order])
    pos = min(int(np.searchsorted(cmass, level, side="left")), resolution - 1)
    threshold = dens[order[pos]]
    mask = dens >= threshold
    segments = []
    start = None
    for i, inside in enumerate(mask):
        if inside and start is None:
            start = i
        elif not inside and start is not None:
            segments.append((lo + start * step, lo + i * step))
            start = None
    if start is not None:
        segments.append((lo + start * step, hi))
    return segments


def mixture_demo(n_samples=1000, level=0.9, seed=0, self_test=False,
                 bounds=(-5.0, 6.0), resolution=4096):
    """Coverage check of the under-dispersed mixture against the wide one.

    Finds the narrow (red) density's highest-density region at the given
    level, samples from the wide (black) density, and reports the fraction
    landing inside. With self_test the wide density audits itself.
    """
    from .problems import mixture_demo_densities

    black, red = mixture_demo_densities()
    target = black if self_test else red
    segments = hpdr_intervals_1d(target.pdf, bounds, level, resolution)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = black.sample(rng, n_samples)
    inside = np.zeros(n_samples, dtype=bool)
    for seg_lo, seg_hi in segments:
        inside |= (draws >= seg_lo) & (draws <= seg_hi)
    return MixtureDemoReport(level=level, ecp=float(inside.mean()),
                             segments=segments, n_samples=n_samples,
                             self_test=self_test)


# -- CSV emission ---------------------------------------------------------------


def _fmt(v):
    return f"{v:.17g}"


def write_coverage_csv(path, curves):
    with open(path, "w") as f:
        f.write("level,ecp,method,n,L\n")
        for curve in curves:
            for lev, e in zip(curve.levels, curve.ecp):
                ns = "" if curve.num_samples is None else str(curve.num_samples)
                f.write(f"{_fmt(lev)},{_fmt(e)},{curve.method},{curve.n_pairs},{ns}\n")


def write_metrics_csv(path, metrics):
    with open(path, "w") as f:
        f.write("name,value\n")
        for name, value in metrics.items():
            f.write(f"{name},{_fmt(value)}\n")


def write_sbc_csv(path, hist):
    edges = hist.edges()
    with open(path, "w") as f:
        f.write("bin_lo,bin_hi,count\n")
        for i, c in enumerate(hist.counts):
            f.write(f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{int(c)}\n")
