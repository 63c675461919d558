"""End-to-end training: base losses plus the weighted coverage regularizer.

The objective is base + weight * regularizer, minimized with AdamW after
global gradient-norm clipping. Training is deterministic given (config,
dataset): all randomness flows from fixed substreams of the config seed.
Checkpoints are a binary format with bit-exact parameter round-trips.
"""

import json
import os
import struct
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import covreg
from .autodiff import Value
from .estimators import Prior, build_model
from .optim import AdamW, clip_grad_norm

CHECKPOINT_MAGIC = b"CALC"
CHECKPOINT_VERSION = 1


class TrainAbort(RuntimeError):
    """Raised when the objective goes non-finite; carries epoch/batch."""

    def __init__(self, epoch, batch, message):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    method: str = "npe"                   # nre | npe
    problem_id: str = "gaussian-linear"
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    seed: int = 0
    validation_fraction: float = 0.1
    hidden: int = 8
    embed_dim: int = 8
    blocks: int = 2
    reg: covreg.RegConfig = None          # None disables the regularizer

    def __post_init__(self):
        if self.method not in ("nre", "npe"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")

    def arch(self):
        return {"hidden": self.hidden, "embed_dim": self.embed_dim,
                "blocks": self.blocks}


@dataclass
class TrainReport:
    base_loss: list = field(default_factory=list)
    reg_loss: list = field(default_factory=list)
    total_loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    degenerate_frac: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    checkpoint_path: str = None
    best_checkpoint_path: str = None

    def epochs(self):
        return len(self.base_loss)

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("epoch,base_loss,reg_loss,total_loss,grad_norm,degenerate_frac\n")
            for i in range(self.epochs()):
                f.write(f"{i},{self.base_loss[i]:.17g},{self.reg_loss[i]:.17g},"
                        f"{self.total_loss[i]:.17g},{self.grad_norm[i]:.17g},"
                        f"{self.degenerate_frac[i]:.17g}\n")


@dataclass
class TrainResult:
    model: object
    report: TrainReport
    config: TrainConfig
    best_params: dict

    def best_model(self, prior, dim_x):
        """Materialize the best-validation checkpoint as a fresh model."""
        model = build_model(self.config.method, prior, dim_x,
                            self.config.arch(), rng=np.random.default_rng(0))
        for name, value in model.parameters().items():
            value.data[...] = self.best_params[name]
        return model


def derangement(n, rng):
    """Random permutation with no fixed point (negatives never pair with self)."""
    perm = rng.permutation(n)
    fixed = np.where(perm == np.arange(n))[0]
    if fixed.size == 1:
        i = int(fixed[0])
        j = (i + 1) % n
        if perm[j] == i:
            j = (i + 2) % n
        perm[i], perm[j] = perm[j], perm[i]
    elif fixed.size > 1:
        perm[fixed] = perm[np.roll(fixed, 1)]
    return perm


def _softplus(v):
    # max(v, 0) + log(1 + exp(-|v|)) is stable on both tails
    return v.relu() + ((-v.abs()).exp() + 1.0).log()


def nre_base_loss(model, thetas, xs, rng):
    """Binary cross-entropy: joint pairs against in-batch shuffled negatives."""
    n = thetas.shape[0]
    if n < 2:
        raise ValueError("ratio loss needs a batch of >= 2 for negative pairs")
    emb = model.embed_graph(Value(xs))
    logit_pos = model.logit_graph(Value(thetas), emb)
    logit_neg = model.logit_graph(Value(thetas[derangement(n, rng)]), emb)
    return (_softplus(-logit_pos).mean() + _softplus(logit_neg).mean()) * 0.5


def npe_base_loss(flow, thetas, xs):
    """Negative mean log density of the nominal parameters."""
    emb = flow.embed_graph(Value(xs))
    ld = flow.log_density_graph(Value(thetas), emb)
    bad = np.where(~np.isfinite(ld.data[:, 0]))[0]
    if bad.size:
        raise FloatingPointError(f"non-finite log density at sample index {bad[0]}")
    return -ld.mean()


def base_loss(model, thetas, xs, rng):
    if model.method == "nre":
        return nre_base_loss(model, thetas, xs, rng)
    return npe_base_loss(model, thetas, xs)


def _split(dataset, fraction):
    n_val = int(round(dataset.count * fraction))
    n_train = dataset.count - n_val
    return (dataset.thetas[:n_train], dataset.xs[:n_train],
            dataset.thetas[n_train:], dataset.xs[n_train:])


def train(config, dataset, problem=None, out_dir=None):
    """Run the full loop; returns the trained model, report, and best params."""
    from .problems import get_problem

    if dataset.problem_id != config.problem_id:
        raise ValueError(f"dataset problem {dataset.problem_id!r} does not match "
                         f"config problem {config.problem_id!r}")
    if dataset.count < config.batch_size:
        raise ValueError("training budget smaller than one batch")
    if problem is None:
        problem = get_problem(config.problem_id)
        if problem.dim_theta != dataset.dim_theta:
            problem = get_problem(config.problem_id, dim=dataset.dim_theta)
    ss = np.random.SeedSequence(config.seed)
    rng_init, rng_shuffle, rng_reg, rng_neg = [np.random.default_rng(c)
                                               for c in ss.spawn(4)]
    model = build_model(config.method, problem.prior, dataset.dim_x,
                        config.arch(), rng=rng_init)
    opt = AdamW(model.parameters(), lr=config.learning_rate,
                weight_decay=config.weight_decay)
    th_train, x_train, th_val, x_val = _split(dataset, config.validation_fraction)
    n_train = th_train.shape[0]

    report = TrainReport()
    best_val = np.inf
    best_params = {k: v.data.copy() for k, v in model.parameters().items()}
    reg_on = config.reg is not None and config.reg.weight > 0
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(n_train)
        sums = np.zeros(4)
        degenerate = 0
        rows = 0
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            take = order[start:start + config.batch_size]
            if take.size < 2:
                continue
            tb, xb = th_train[take], x_train[take]
            base = base_loss(model, tb, xb, rng_neg)
            if reg_on:
                rloss, rbatch = covreg.regularizer(model, tb, xb, config.reg,
                                                   rng_reg, prior=problem.prior)
                total = base + rloss * config.reg.weight
                degenerate += rbatch.degenerate_count
                rval = float(rloss.data[0])
            else:
                total = base
                rval = 0.0
            tval = float(total.data[0])
            if not np.isfinite(tval):
                raise TrainAbort(epoch, n_batches, f"non-finite loss {tval}")
            opt.zero_grad()
            total.backward()
            grads, pre_norm = clip_grad_norm(opt.gradients(), config.clip_norm)
            opt.step(grads)
            sums += (float(base.data[0]), rval, tval, pre_norm)
            rows += take.size
            n_batches += 1
        report.base_loss.append(sums[0] / n_batches)
        report.reg_loss.append(sums[1] / n_batches)
        report.total_loss.append(sums[2] / n_batches)
        report.grad_norm.append(sums[3] / n_batches)
        frac = degenerate / rows if reg_on else 0.0
        report.degenerate_frac.append(frac)
        if frac > 0.5:
            warnings.warn(f"epoch {epoch}: degenerate importance weights on "
                          f"{frac:.0%} of the batch", RuntimeWarning)
        if th_val.shape[0] >= 2:
            with ad.no_grad():
                vloss = float(base_loss(model, th_val, x_val,
                                        np.random.default_rng(0)).data[0])
            report.val_loss.append(vloss)
            if vloss < best_val:
                best_val = vloss
                report.best_epoch = epoch
                best_params = {k: v.data.copy() for k, v in model.parameters().items()}
        else:
            report.val_loss.append(np.nan)
            best_params = {k: v.data.copy() for k, v in model.parameters().items()}

    result = TrainResult(model=model, report=report, config=config,
                         best_params=best_params)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        final = os.path.join(out_dir, "model.calc")
        save_checkpoint(final, model, config, problem.prior)
        report.checkpoint_path = final
        best = os.path.join(out_dir, "model_best.calc")
        save_checkpoint(best, result.best_model(problem.prior, dataset.dim_x),
                        config, problem.prior)
        report.best_checkpoint_path = best
        report.to_csv(os.path.join(out_dir, "train.csv"))
    return result


# -- checkpoint io ---------------------------------------------------------------


def _config_blob(config, prior, dim_x):
    cfg = asdict(config) if isinstance(config, TrainConfig) else dict(config)
    if isinstance(cfg.get("reg"), covreg.RegConfig):
        cfg["reg"] = asdict(cfg["reg"])
    if cfg.get("reg") and not isinstance(cfg["reg"].get("proposal", "prior"), str):
        cfg["reg"]["proposal"] = type(cfg["reg"]["proposal"]).__name__
    prior_spec = {"kind": prior.kind, "dim": prior.dim}
    if prior.kind == "uniform-box":
        prior_spec.update(low=prior.low.tolist(), high=prior.high.tolist())
    else:
        prior_spec.update(mean=prior.mean.tolist(), scale=prior.scale.tolist())
    return {"train": cfg, "prior": prior_spec, "dim_x": dim_x}


def _prior_from_spec(spec):
    if spec["kind"] == "uniform-box":
        return Prior.uniform_box(spec["low"], spec["high"])
    return Prior.gaussian(spec["mean"], spec["scale"])


def save_checkpoint(path, model, config, prior):
    """Write magic, version, method tag, config blob, named parameter records."""
    params = model.parameters()
    blob = json.dumps(_config_blob(config, prior, model.dim_x)).encode()
    method = model.method.encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(method)))
        f.write(method)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the model with bit-identical parameters; returns (model, blob)."""
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        out = data[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    method = take(mlen).decode()
    (blen,) = struct.unpack("<I", take(4))
    blob = json.loads(take(blen).decode())
    prior = _prior_from_spec(blob["prior"])
    arch = {k: blob["train"][k] for k in ("hidden", "embed_dim", "blocks")
            if k in blob["train"]}
    model = build_model(method, prior, blob["dim_x"], arch,
                        rng=np.random.default_rng(0))
    params = model.parameters()
    (n_params,) = struct.unpack("<I", take(4))
    if n_params != len(params):
        raise ValueError(f"{path}: parameter count mismatch")
    for _ in range(n_params):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        if name not in params:
            raise ValueError(f"{path}: unknown parameter {name!r}")
        params[name].data[...] = arr
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return model, blob


# -- overhead measurement -----------------------------------------------------


def measure_step_overhead(config, dataset, sample_counts=(1, 4, 16, 64),
                          steps=40, repeats=5, problem=None):
    """Wall time of one regularized training step per proposal sample count.

    Fresh model per count, a few warmup steps, then `steps` timed steps;
    the minimum over `repeats` windows is reported (the low-noise timing
    estimator). Returns a list of (count, seconds_per_step).
    """
    from .problems import get_problem

    if problem is None:
        problem = get_problem(config.problem_id)
    rows = []
    for count in sample_counts:
        timings = []
        for rep in range(repeats):
            ss = np.random.SeedSequence((config.seed, count, rep))
            rng_init, rng_reg, rng_neg = [np.random.default_rng(c) for c in ss.spawn(3)]
            model = build_model(config.method, problem.prior, dataset.dim_x,
                                config.arch(), rng=rng_init)
            opt = AdamW(model.parameters(), lr=config.learning_rate)
            reg = covreg.RegConfig(mode="conservative", num_samples=count,
                                   weight=config.reg.weight if config.reg else 5.0)
            tb = dataset.thetas[:config.batch_size]
            xb = dataset.xs[:config.batch_size]

            def one_step():
                base = base_loss(model, tb, xb, rng_neg)
                rloss, _ = covreg.regularizer(model, tb, xb, reg, rng_reg,
                                              prior=problem.prior)
                total = base + rloss * reg.weight
                opt.zero_grad()
                total.backward()
                grads, _ = clip_grad_norm(opt.gradients(), config.clip_norm)
                opt.step(grads)

            for _ in range(3):
                one_step()
            start = time.perf_counter()
            for _ in range(steps):
                one_step()
            timings.append((time.perf_counter() - start) / steps)
        rows.append((count, float(np.min(timings))))
    return rows


def write_overhead_csv(path, rows):
    with open(path, "w") as f:
        f.write("L,seconds_per_step\n")
        for count, sec in rows:
            f.write(f"{count},{sec:.17g}\n")
