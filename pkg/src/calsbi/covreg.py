"""Differentiable coverage regularizer via importance-sampled rank statistics.

For each pair (theta*, x*) the rank statistic is the self-normalized
importance-sampling estimate of the posterior mass where the density lies
strictly below the density at theta*:

    alpha = sum_j w_j * 1[p(theta_j|x*) < p(theta*|x*)] / sum_j w_j,
    w_j = p(theta_j|x*) / I(theta_j),   theta_j ~ proposal I.

A calibrated model produces uniformly distributed rank statistics, so the
regularizer drives the batch of alphas toward the uniform order statistics
(sorting form) or pins the alpha-ECDF at chosen levels (direct form); the
conservative mode rectifies the differences so only overconfident deviations
are penalized.

Forward values use hard indicators and exact sorting. Gradients use a
straight-through indicator (unit gain on the band |u| <= temperature, the
Hard-Tanh derivative profile) and permutation-routed sort gradients, with an
optional smoothed sort behind the relaxation knob. Everything is invariant
to per-x* rescaling of the density: indicators compare same-x* values and
the importance weights self-normalize.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value, gather_rows, repeat_rows, straight_through
from .estimators import ConstantGraphDensity, Prior

DEFAULT_LEVELS = tuple((np.arange(1, 20) / 20.0).tolist())


@dataclass
class RegConfig:
    """Knobs of the coverage regularizer."""

    mode: str = "conservative"          # calibration | conservative
    loss_form: str = "sorting"          # sorting | direct
    weight: float = 5.0                 # multiplier applied by the trainer
    num_samples: int = 16               # proposal draws per pair
    proposal: object = "prior"          # "prior" or a density with sampling
    levels: tuple = DEFAULT_LEVELS      # direct form only
    temperature: float = 1.0            # straight-through band half-width
    sort_relaxation: float = 0.0        # > 0 enables the smoothed sort backward

    def __post_init__(self):
        if self.mode not in ("calibration", "conservative"):
            raise ValueError(f"unknown regularizer mode {self.mode!r}")
        if self.loss_form not in ("sorting", "direct"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.weight < 0 or self.temperature <= 0 or self.sort_relaxation < 0:
            raise ValueError("weight/relaxation must be >= 0 and temperature > 0")
        if self.loss_form == "direct":
            if len(self.levels) < 1 or not all(0 < a < 1 for a in self.levels):
                raise ValueError("direct form needs levels strictly inside (0, 1)")


@dataclass
class RankStatisticBatch:
    """Differentiable rank statistics plus importance-weight health data."""

    values: Value                        # (n, 1), each in [0, 1]
    num_samples: int
    proposal_id: str
    weight_sums: np.ndarray              # (n,), max-normalized weight totals
    degenerate: np.ndarray = field(default=None)   # bool mask of all-zero-weight rows

    @property
    def size(self):
        return self.values.data.shape[0]

    @property
    def degenerate_count(self):
        return 0 if self.degenerate is None else int(self.degenerate.sum())

    @property
    def degenerate_fraction(self):
        return self.degenerate_count / max(self.size, 1)


def ste_indicator(u, temperature=1.0):
    """Hard indicator 1[u > 0] with a straight-through backward.

    The surrogate gradient is 1 on the band |u / temperature| <= 1 and 0
    outside, i.e. the derivative profile of a Hard-Tanh stretched to the
    band width. Forward values never depend on the temperature.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    u = u if isinstance(u, Value) else Value(u)
    hard = (u.data > 0).astype(np.float64)
    band = (np.abs(u.data) <= temperature).astype(np.float64)
    return Value._node(hard, (u,), "ste_indicator", lambda g: u._accum(g * band))


class PriorProposal:
    """Adapts a Prior to the proposal surface (x-independent sampling)."""

    def __init__(self, prior):
        self.prior = prior
        self.proposal_id = "prior"

    def sample_batch(self, xs, rng, count):
        n = np.asarray(xs).shape[0]
        return self.prior.sample(rng, n * count).reshape(n, count, self.prior.dim)

    def log_density_rows(self, thetas, xs):
        return self.prior.log_density(thetas)


class DensityProposal:
    """Adapts a conditional density with sampling to the proposal surface."""

    def __init__(self, density):
        self.density = density
        self.proposal_id = type(density).__name__
        self.dim_theta = density.dim_theta

    def sample_batch(self, xs, rng, count):
        if hasattr(self.density, "sample_batch"):
            return self.density.sample_batch(xs, rng, count)
        xs = np.asarray(xs)
        out = np.empty((xs.shape[0], count, self.dim_theta))
        for i in range(xs.shape[0]):
            out[i] = self.density.sample(xs[i:i + 1], rng, count)
        return out

    def log_density_rows(self, thetas, xs):
        return self.density.log_density(thetas, xs)


def resolve_proposal(proposal, prior=None):
    if proposal == "prior" or proposal is None:
        if prior is None:
            raise ValueError("proposal 'prior' requires the problem prior")
        return PriorProposal(prior)
    if isinstance(proposal, Prior):
        return PriorProposal(proposal)
    if isinstance(proposal, (PriorProposal, DensityProposal)):
        return proposal
    return DensityProposal(proposal)


def _graph_surface(posterior):
    if hasattr(posterior, "log_density_graph") and hasattr(posterior, "embed_graph"):
        return posterior
    return ConstantGraphDensity(posterior)


def rank_statistic_core(lp_star, lp_draws, log_prop, temperature=1.0):
    """Assemble rank statistics from log densities (the differentiable core).

    lp_star: Value (n, 1) log density at the nominal parameter; lp_draws:
    Value (n, L) log densities at the proposal draws; log_prop: constant
    (n, L) proposal log densities. Densities are compared on a per-row
    max-normalized scale; both shifts are detached, so gradients match the
    unshifted algebra exactly. Returns (alpha Value, weight sums, degenerate
    mask).
    """
    n = lp_star.data.shape[0]
    shift = np.maximum(lp_star.data, lp_draws.data.max(axis=1, keepdims=True))
    shift = np.where(np.isfinite(shift), shift, 0.0)
    dens_star = (lp_star - Value(shift)).exp()                          # (n, 1)
    dens_draws = (lp_draws - Value(shift)).exp()                        # (n, L)
    indicators = ste_indicator(dens_star - dens_draws, temperature)     # (n, L)

    log_w = lp_draws - Value(np.asarray(log_prop, dtype=np.float64))
    w_shift = log_w.data.max(axis=1, keepdims=True)
    degenerate = ~np.isfinite(w_shift[:, 0])
    w_shift = np.where(np.isfinite(w_shift), w_shift, 0.0)
    weights = (log_w - Value(w_shift)).exp()                            # (n, L)
    numer = (weights * indicators).sum(axis=1, keepdims=True)
    denom = weights.sum(axis=1, keepdims=True)
    weight_sums = denom.data[:, 0].copy()
    if degenerate.any():
        denom = denom + Value(degenerate.astype(np.float64).reshape(n, 1))
    return numer / denom, weight_sums, degenerate


def rank_statistics(posterior, thetas, xs, num_samples, proposal, rng,
                    temperature=1.0, prior=None):
    """Batched differentiable rank statistics (one per (theta, x) row).

    The observation embedding is evaluated once per row and reused across
    all proposal draws. Rows whose importance weights all vanish are flagged
    degenerate and pinned to alpha = 0.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    proposal = resolve_proposal(proposal, prior)
    thetas = np.asarray(thetas, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    n = thetas.shape[0]
    model = _graph_surface(posterior)

    emb = model.embed_graph(Value(xs))
    lp_star = model.log_density_graph(Value(thetas), emb)              # (n, 1)
    draws = proposal.sample_batch(xs, rng, num_samples)                # (n, L, d)
    flat = draws.reshape(n * num_samples, thetas.shape[1])
    x_rep = np.repeat(xs, num_samples, axis=0)
    log_prop = proposal.log_density_rows(flat, x_rep).reshape(n, num_samples)
    lp_draws = model.log_density_graph(
        Value(flat), repeat_rows(emb, num_samples)).reshape(n, num_samples)
    alpha, weight_sums, degenerate = rank_statistic_core(
        lp_star, lp_draws, log_prop, temperature)

    pid = getattr(proposal, "proposal_id", type(proposal).__name__)
    return RankStatisticBatch(values=alpha, num_samples=num_samples,
                              proposal_id=pid, weight_sums=weight_sums,
                              degenerate=degenerate)


def is_rank_statistic(posterior, theta_star, x_star, num_samples, proposal, rng,
                      temperature=1.0, prior=None):
    """Single-pair rank statistic as a plain float (no graph retained)."""
    theta_star = np.asarray(theta_star, dtype=np.float64).reshape(1, -1)
    x_star = np.asarray(x_star, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        batch = rank_statistics(posterior, theta_star, x_star, num_samples,
                                proposal, rng, temperature, prior=prior)
    return float(batch.values.data[0, 0])


def _alpha_column(batch):
    values = batch.values if isinstance(batch, RankStatisticBatch) else batch
    if not isinstance(values, Value):
        values = Value(np.asarray(values, dtype=np.float64).reshape(-1, 1))
    if values.data.ndim == 1:
        values = values.reshape(values.data.shape[0], 1)
    return values


def soft_sort(values, strength):
    """Exact-forward sort whose backward routes through a smoothed permutation.

    The smoothed permutation is a row-stochastic matrix built from
    exp(-|sorted_i - value_j| / strength); forward values come from the hard
    sort via a straight-through connection.
    """
    n = values.data.shape[0]
    perm = np.argsort(values.data[:, 0], kind="stable")
    hard = values.data[perm]
    diff = (Value(hard) - values.transpose()).abs() * (-1.0 / strength)
    expd = diff.exp()
    weights = expd / expd.sum(axis=1, keepdims=True)
    return straight_through(hard, weights @ values)


def sorting_loss(batch, mode="calibration", sort_relaxation=0.0):
    """Mean squared gap between sorted rank statistics and the i/N grid.

    Calibration penalizes both directions; conservative rectifies first so
    sorted values that dominate their targets cost nothing.
    """
    values = _alpha_column(batch)
    n = values.data.shape[0]
    if n < 2:
        raise ValueError(f"sorting loss needs a batch of >= 2, got {n}")
    if sort_relaxation > 0:
        ordered = soft_sort(values, sort_relaxation)
    else:
        perm = np.argsort(values.data[:, 0], kind="stable")
        ordered = gather_rows(values, perm)
    targets = Value((np.arange(1, n + 1) / n).reshape(n, 1))
    gap = targets - ordered
    if mode == "conservative":
        gap = gap.relu()
    elif mode != "calibration":
        raise ValueError(f"unknown mode {mode!r}")
    return gap.square().mean()


def direct_loss(batch, levels=DEFAULT_LEVELS, mode="calibration", temperature=1.0):
    """Squared ECDF-vs-level gaps at fixed levels, straight-through ECDF.

    F_N(a_k) counts rank statistics <= a_k; calibration sums (F_N - a_k)^2
    over levels, conservative rectifies so only an ECDF sitting above the
    level (overconfidence) is penalized.
    """
    values = _alpha_column(batch)
    total = None
    for level in levels:
        if not 0.0 < level < 1.0:
            raise ValueError(f"levels must lie strictly inside (0,1), got {level}")
        membership = 1.0 - ste_indicator(values - level, temperature)
        gap = membership.mean() - level
        if mode == "conservative":
            gap = gap.relu()
        elif mode != "calibration":
            raise ValueError(f"unknown mode {mode!r}")
        term = gap.square()
        total = term if total is None else total + term
    return total


def regularizer(posterior, thetas, xs, config, rng, prior=None):
    """Regularizer loss over a batch, per the training-time recipe.

    Returns (loss Value, RankStatisticBatch); the batch carries degeneracy
    counts so the trainer can surface warnings.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.shape[0] < 2:
        raise ValueError("regularizer needs a batch of >= 2 pairs")
    proposal = resolve_proposal(config.proposal, prior)
    batch = rank_statistics(posterior, thetas, xs, config.num_samples,
                            proposal, rng, config.temperature)
    if config.loss_form == "sorting":
        loss = sorting_loss(batch, config.mode, config.sort_relaxation)
    else:
        loss = direct_loss(batch, config.levels, config.mode, config.temperature)
    return loss, batch


def rank_statistic_quotient(dens_star, dens_draws, prop_dens):
    """Rank statistic straight from linear density values (no shifts).

    The scale-invariance seam: multiplying dens_star and dens_draws by an
    exactly representable factor (a power of two) leaves the result
    bit-identical, because the comparison and the self-normalized quotient
    cancel the factor exactly.
    """
    dens_star = np.asarray(dens_star, dtype=np.float64).reshape(-1, 1)
    dens_draws = np.asarray(dens_draws, dtype=np.float64)
    weights = dens_draws / np.asarray(prop_dens, dtype=np.float64)
    indic = (dens_draws < dens_star).astype(np.float64)
    denom = weights.sum(axis=1)
    numer = (weights * indic).sum(axis=1)
    out = np.zeros_like(denom)
    ok = denom > 0
    out[ok] = numer[ok] / denom[ok]
    return out
