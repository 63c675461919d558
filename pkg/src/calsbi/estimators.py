"""Posterior density models behind one evaluable interface.

Implementations: a ratio-based classifier model (posterior = prior x ratio,
unnormalized), a conditional coupling-flow density model (normalized, exact
sampling), the prior-as-posterior reference, and the conjugate Gaussian
oracle for the linear-Gaussian problem.

Two call surfaces coexist:

* numpy evaluation -- ``log_density(theta, x)`` on paired rows, with the
  reuse pair ``embed(x)`` / ``log_density_from_embedding(theta, emb)`` so an
  observation embedding is computed once and shared across many parameter
  evaluations;
* graph evaluation -- ``embed_graph`` / ``log_density_graph`` operating on
  autodiff Values, used by training losses and the coverage regularizer.

Both surfaces run the same arithmetic, so embedded and direct evaluation are
bit-identical.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Value, concat

LOG_2PI = math.log(2.0 * math.pi)


def _rows(arr, dim, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        if dim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.size == dim:
            arr = arr.reshape(1, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    return arr


class Prior:
    """Uniform-box or diagonal-Gaussian prior over parameters."""

    def __init__(self, kind, dim, low=None, high=None, mean=None, scale=None):
        self.kind = kind
        self.dim = dim
        if kind == "uniform-box":
            self.low = np.asarray(low, dtype=np.float64)
            self.high = np.asarray(high, dtype=np.float64)
            if self.low.shape != (dim,) or self.high.shape != (dim,):
                raise ValueError("bounds must match prior dimension")
            if not np.all(self.low < self.high):
                raise ValueError("uniform-box bounds require low < high per dimension")
            self._log_const = -float(np.sum(np.log(self.high - self.low)))
        elif kind == "diagonal-gaussian":
            self.mean = np.asarray(mean, dtype=np.float64)
            self.scale = np.asarray(scale, dtype=np.float64)
            if self.mean.shape != (dim,) or self.scale.shape != (dim,):
                raise ValueError("mean/scale must match prior dimension")
            if not np.all(self.scale > 0):
                raise ValueError("gaussian prior scales must be positive")
            self._log_const = -float(np.sum(np.log(self.scale))) - 0.5 * dim * LOG_2PI
        else:
            raise ValueError(f"unknown prior kind {kind!r}")

    @classmethod
    def uniform_box(cls, low, high):
        low = np.atleast_1d(np.asarray(low, dtype=np.float64))
        return cls("uniform-box", low.size, low=low,
                   high=np.atleast_1d(np.asarray(high, dtype=np.float64)))

    @classmethod
    def gaussian(cls, mean, scale):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls("diagonal-gaussian", mean.size, mean=mean,
                   scale=np.atleast_1d(np.asarray(scale, dtype=np.float64)))

    def sample(self, rng, count):
        if self.kind == "uniform-box":
            return rng.uniform(self.low, self.high, size=(count, self.dim))
        return self.mean + self.scale * rng.standard_normal((count, self.dim))

    def in_support(self, theta):
        theta = _rows(theta, self.dim, "theta")
        if self.kind == "uniform-box":
            return np.all((theta >= self.low) & (theta <= self.high), axis=1)
        return np.ones(theta.shape[0], dtype=bool)

    def log_density(self, theta):
        theta = _rows(theta, self.dim, "theta")
        if self.kind == "uniform-box":
            out = np.full(theta.shape[0], self._log_const)
            out[~self.in_support(theta)] = -np.inf
            return out
        z = (theta - self.mean) / self.scale
        return self._log_const - 0.5 * np.sum(z * z, axis=1)

    def log_density_graph(self, theta):
        """Column Value (n, 1) of log prior densities; theta must be in support."""
        if self.kind == "uniform-box":
            return Value(np.full((theta.data.shape[0], 1), self._log_const))
        z = (theta - Value(self.mean.reshape(1, -1))) * (1.0 / self.scale.reshape(1, -1))
        return z.square().sum(axis=1, keepdims=True) * (-0.5) + self._log_const


class PosteriorDensity:
    """Shared surface: log_density on paired rows plus a normalization flag."""

    normalized = False

    def log_density(self, theta, x):
        raise NotImplementedError


class CallCounters:
    """Instrumentation for embedding-reuse checks; not part of model state."""

    def __init__(self):
        self.embed_calls = 0
        self.embed_rows = 0
        self.density_rows = 0

    def reset(self):
        self.embed_calls = 0
        self.embed_rows = 0
        self.density_rows = 0


class Mlp:
    """Dense SELU network; parameters named `{prefix}.w{i}` / `{prefix}.b{i}`."""

    def __init__(self, sizes, rng, prefix, last_scale=None):
        self.sizes = list(sizes)
        self.prefix = prefix
        self.params = {}
        self._layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            scale = last_scale if (last and last_scale is not None) else 1.0 / math.sqrt(fan_in)
            w = Value(scale * rng.standard_normal((fan_in, fan_out)), requires_grad=True)
            b = Value(np.zeros((1, fan_out)), requires_grad=True)
            self.params[f"{prefix}.w{i}"] = w
            self.params[f"{prefix}.b{i}"] = b
            self._layers.append((w, b, last))

    def __call__(self, v):
        for w, b, last in self._layers:
            v = v @ w + b
            if not last:
                v = v.selu()
        return v


class NreModel(PosteriorDensity):
    """Ratio classifier: separate parameter/observation embeddings, joint head.

    The head emits a logit z; the classifier output sigmoid(z) lies in (0, 1)
    and the log posterior is log prior + z (unnormalized).
    """

    normalized = False
    method = "nre"

    def __init__(self, prior, dim_x, hidden=8, embed_dim=8, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prior = prior
        self.dim_theta = prior.dim
        self.dim_x = dim_x
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.theta_net = Mlp([self.dim_theta, hidden, hidden, embed_dim], rng, "theta_net")
        self.x_net = Mlp([dim_x, hidden, hidden, embed_dim], rng, "x_net")
        self.head = Mlp([2 * embed_dim, hidden, hidden, 1], rng, "head")
        self.counters = CallCounters()

    def arch(self):
        return {"hidden": self.hidden, "embed_dim": self.embed_dim, "dim_x": self.dim_x}

    def parameters(self):
        return {**self.theta_net.params, **self.x_net.params, **self.head.params}

    # graph surface

    def embed_graph(self, x):
        self.counters.embed_calls += 1
        self.counters.embed_rows += x.data.shape[0]
        return self.x_net(x)

    def logit_graph(self, theta, x_emb):
        self.counters.density_rows += theta.data.shape[0]
        return self.head(concat([self.theta_net(theta), x_emb], axis=1))

    def log_density_graph(self, theta, x_emb):
        return self.prior.log_density_graph(theta) + self.logit_graph(theta, x_emb)

    # numpy surface

    def embed(self, x):
        x = _rows(x, self.dim_x, "x")
        with ad.no_grad():
            return self.embed_graph(Value(x)).data

    def log_density_from_embedding(self, theta, x_emb):
        theta = _rows(theta, self.dim_theta, "theta")
        with ad.no_grad():
            logit = self.logit_graph(Value(theta), Value(x_emb)).data[:, 0]
        out = self.prior.log_density(theta) + logit
        out[~self.prior.in_support(theta)] = -np.inf
        return out

    def log_density(self, theta, x):
        return self.log_density_from_embedding(theta, self.embed(x))

    def classifier_output(self, theta, x):
        """d(theta, x) in (0, 1)."""
        theta = _rows(theta, self.dim_theta, "theta")
        with ad.no_grad():
            z = self.logit_graph(Value(theta), Value(self.embed(x)))
            return z.sigmoid().data[:, 0]


class NpeFlow(PosteriorDensity):
    """Conditional normalizing flow with affine coupling blocks.

    For 2D+ parameters: a stack of coupling blocks on alternating dimension
    masks, each predicting shift and bounded pre-scale from the untouched
    dimensions plus the observation embedding. For 1D parameters coupling
    degenerates, so a conditional affine map of the base variable is used
    (mean and log-scale from the embedding alone). Pre-scales pass through
    tanh and a bound before exponentiation so the scale cannot explode.
    """

    normalized = True
    method = "npe"

    def __init__(self, dim_theta, dim_x, hidden=8, embed_dim=8, blocks=2,
                 scale_bound=3.0, rng=None, last_scale=0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        if blocks < 2 and dim_theta >= 2:
            raise ValueError("need at least 2 coupling blocks so every dim transforms")
        self.dim_theta = dim_theta
        self.dim_x = dim_x
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.blocks = blocks
        self.scale_bound = scale_bound
        self.x_net = Mlp([dim_x, hidden, hidden, embed_dim], rng, "x_net")
        self.coupling = []
        self.counters = CallCounters()
        if dim_theta == 1:
            net = Mlp([embed_dim, hidden, hidden, 2], rng, "affine0", last_scale=last_scale)
            self.coupling.append((None, None, net))
        else:
            for j in range(blocks):
                cond = np.arange(dim_theta)[(np.arange(dim_theta) + j) % 2 == 0]
                trans = np.arange(dim_theta)[(np.arange(dim_theta) + j) % 2 == 1]
                net = Mlp([len(cond) + embed_dim, hidden, hidden, 2 * len(trans)],
                          rng, f"coupling{j}", last_scale=last_scale)
                self.coupling.append((cond, trans, net))

    def arch(self):
        return {"hidden": self.hidden, "embed_dim": self.embed_dim,
                "blocks": self.blocks, "scale_bound": self.scale_bound,
                "dim_theta": self.dim_theta, "dim_x": self.dim_x}

    def parameters(self):
        out = dict(self.x_net.params)
        for _, _, net in self.coupling:
            out.update(net.params)
        return out

    def _scale_shift(self, net, cond, x_emb):
        inp = x_emb if cond is None else concat([cond, x_emb], axis=1)
        raw = net(inp)
        half = raw.data.shape[1] // 2
        pre, shift = raw[:, :half], raw[:, half:]
        return pre.tanh() * self.scale_bound, shift

    # graph surface

    def embed_graph(self, x):
        self.counters.embed_calls += 1
        self.counters.embed_rows += x.data.shape[0]
        return self.x_net(x)

    def _pull_back(self, theta, x_emb):
        """Invert the flow: theta -> (base point z, inverse log-determinant)."""
        n = theta.data.shape[0]
        if self.dim_theta == 1:
            s, shift = self._scale_shift(self.coupling[0][2], None, x_emb)
            return (theta - shift) * (-s).exp(), -s.sum(axis=1, keepdims=True)
        cols = [theta[:, d:d + 1] for d in range(self.dim_theta)]
        logdet = Value(np.zeros((n, 1)))
        for cond_idx, trans_idx, net in reversed(self.coupling):
            cond = concat([cols[d] for d in cond_idx], axis=1)
            s, shift = self._scale_shift(net, cond, x_emb)
            moved = (concat([cols[d] for d in trans_idx], axis=1) - shift) * (-s).exp()
            for k, d in enumerate(trans_idx):
                cols[d] = moved[:, k:k + 1]
            logdet = logdet - s.sum(axis=1, keepdims=True)
        return concat(cols, axis=1), logdet

    def log_density_graph(self, theta, x_emb):
        """Base log density of the inverse-mapped point plus the inverse log-det."""
        self.counters.density_rows += theta.data.shape[0]
        z, logdet = self._pull_back(theta, x_emb)
        base = z.square().sum(axis=1, keepdims=True) * (-0.5) - 0.5 * self.dim_theta * LOG_2PI
        if not np.all(np.isfinite(base.data)) or not np.all(np.isfinite(logdet.data)):
            raise FloatingPointError("non-finite value in flow inverse pass")
        return base + logdet

    def _push_forward(self, z, x_emb):
        if self.dim_theta == 1:
            s, shift = self._scale_shift(self.coupling[0][2], None, x_emb)
            return z * s.exp() + shift
        cols = [z[:, d:d + 1] for d in range(self.dim_theta)]
        for cond_idx, trans_idx, net in self.coupling:
            cond = concat([cols[d] for d in cond_idx], axis=1)
            s, shift = self._scale_shift(net, cond, x_emb)
            moved = concat([cols[d] for d in trans_idx], axis=1) * s.exp() + shift
            for k, d in enumerate(trans_idx):
                cols[d] = moved[:, k:k + 1]
        return concat(cols, axis=1)

    # numpy surface

    def embed(self, x):
        x = _rows(x, self.dim_x, "x")
        with ad.no_grad():
            return self.embed_graph(Value(x)).data

    def log_density_from_embedding(self, theta, x_emb):
        theta = _rows(theta, self.dim_theta, "theta")
        with ad.no_grad():
            return self.log_density_graph(Value(theta), Value(x_emb)).data[:, 0]

    def log_density(self, theta, x):
        return self.log_density_from_embedding(theta, self.embed(x))

    def sample(self, x, rng, count):
        """Push `count` base draws through the flow for one observation x."""
        if count == 0:
            return np.zeros((0, self.dim_theta))
        x = _rows(x, self.dim_x, "x")
        emb = np.repeat(self.embed(x[:1]), count, axis=0)
        z = rng.standard_normal((count, self.dim_theta))
        with ad.no_grad():
            return self._push_forward(Value(z), Value(emb)).data

    def sample_batch(self, x, rng, count):
        """(n, count, dim_theta) draws, one set per observation row."""
        x = _rows(x, self.dim_x, "x")
        n = x.shape[0]
        emb = np.repeat(self.embed(x), count, axis=0)
        z = rng.standard_normal((n * count, self.dim_theta))
        with ad.no_grad():
            flat = self._push_forward(Value(z), Value(emb)).data
        return flat.reshape(n, count, self.dim_theta)


class PriorPosterior(PosteriorDensity):
    """The prior presented as a posterior (ignores the observation)."""

    normalized = True
    method = "prior"

    def __init__(self, prior):
        self.prior = prior
        self.dim_theta = prior.dim

    def log_density(self, theta, x):
        return self.prior.log_density(theta)

    def sample(self, x, rng, count):
        return self.prior.sample(rng, count)

    def sample_batch(self, x, rng, count):
        n = np.asarray(x).shape[0]
        return self.prior.sample(rng, n * count).reshape(n, count, self.dim_theta)


class GaussianLinearPosterior(PosteriorDensity):
    """Conjugate posterior for x = theta + noise under a standard normal prior.

    Per dimension: N(x / (1 + sigma^2), sigma^2 / (1 + sigma^2)), optionally
    with the standard deviation multiplied by `scale_factor` to build
    deliberately over/under-dispersed references.
    """

    normalized = True
    method = "oracle"

    def __init__(self, noise_sigma, dim, scale_factor=1.0):
        self.noise_sigma = noise_sigma
        self.dim_theta = dim
        self.coef = 1.0 / (1.0 + noise_sigma ** 2)
        self.std = math.sqrt(noise_sigma ** 2 / (1.0 + noise_sigma ** 2)) * scale_factor

    def log_density(self, theta, x):
        theta = _rows(theta, self.dim_theta, "theta")
        x = _rows(x, self.dim_theta, "x")
        z = (theta - self.coef * x) / self.std
        return (-0.5 * np.sum(z * z, axis=1)
                - self.dim_theta * (math.log(self.std) + 0.5 * LOG_2PI))

    def log_density_grid(self, grid, xs):
        """(n_x, n_grid) log densities via the expanded quadratic (one GEMM)."""
        grid = _rows(grid, self.dim_theta, "grid")
        xs = _rows(xs, self.dim_theta, "xs")
        quad = (np.sum(grid * grid, axis=1)[None, :]
                - 2.0 * self.coef * (xs @ grid.T)
                + self.coef ** 2 * np.sum(xs * xs, axis=1)[:, None])
        return (-0.5 * quad / self.std ** 2
                - self.dim_theta * (math.log(self.std) + 0.5 * LOG_2PI))

    def sample(self, x, rng, count):
        x = _rows(x, self.dim_theta, "x")
        mean = self.coef * x[0]
        return mean + self.std * rng.standard_normal((count, self.dim_theta))

    def sample_batch(self, x, rng, count):
        x = _rows(x, self.dim_theta, "x")
        mean = self.coef * x[:, None, :]
        return mean + self.std * rng.standard_normal((x.shape[0], count, self.dim_theta))


class ConstantGraphDensity:
    """Wrap a numpy-only density so regularizer code can treat it as a graph model.

    Outputs are constant Values: usable for forward-value tests, no parameter
    gradients (there are none).
    """

    def __init__(self, density):
        self.density = density
        self.normalized = density.normalized
        self._x = None

    def embed_graph(self, x):
        self._x = x.data
        return Value(x.data)

    def log_density_graph(self, theta, x_emb):
        return Value(self.density.log_density(theta.data, x_emb.data).reshape(-1, 1))

    def parameters(self):
        return {}


def build_model(method, prior, dim_x, arch, rng=None):
    """Construct an estimator from its method tag and architecture dict."""
    if method == "nre":
        return NreModel(prior, dim_x, hidden=arch.get("hidden", 8),
                        embed_dim=arch.get("embed_dim", 8), rng=rng)
    if method == "npe":
        return NpeFlow(prior.dim, dim_x, hidden=arch.get("hidden", 8),
                       embed_dim=arch.get("embed_dim", 8),
                       blocks=arch.get("blocks", 2),
                       scale_bound=arch.get("scale_bound", 3.0), rng=rng)
    raise ValueError(f"unknown method {method!r}")
