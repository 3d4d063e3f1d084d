"""Alternating weight / architecture optimisation, checkpoints and finalisation.

Each epoch trains the supernet weights on the w-split with SGD (architecture
logits frozen), then, once warmup is over, trains the logits on the θ-split
with Adam (weights frozen). Both phases draw fresh Gumbel-Softmax masks per
minibatch at the epoch's temperature.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .blocks import BatchNorm2d
from .cost import LatencyTable, calibrate_beta, cost_weighting, net_latency, quant_flop_cost, quant_size_cost
from .data import Dataset, concat_datasets
from .errors import ConfigError, DomainError, NonFiniteError
from .functional import softmax_cross_entropy
from .optim import SGD, Adam
from .quant import project_alpha
from .rng import RNG_ALGORITHM, Rng
from .supernet import ArchitectureSample, SuperNet
from .tensor import Tensor, as_tensor, no_grad

CHECKPOINT_VERSION = 1
LOSS_MODES = ("latency", "quant_size", "quant_flop")
TRACE_COLUMNS = ("epoch", "tau", "ce", "expected_cost", "loss")


@dataclass
class SearchConfig:
    """Search hyper-parameters. ``warmup=None`` means ``ceil(0.1 * epochs)``.

    ``quant_beta=None`` calibrates the quantisation-cost coefficient so the
    cost factor is 1 at the initial (uniform) architecture distribution.
    """

    epochs: int = 10
    warmup: Optional[int] = None
    t0: float = 5.0
    eta: float = 0.065
    w_lr: float = 0.05
    w_momentum: float = 0.9
    w_weight_decay: float = 0.0
    theta_lr: float = 0.01
    theta_betas: tuple = (0.9, 0.999)
    theta_eps: float = 1e-8
    loss: str = "latency"
    alpha: float = 0.2
    beta: float = 0.6
    gamma: float = 1.0
    quant_beta: Optional[float] = None
    batch_size: int = 32
    seed: int = 0
    samples_to_draw: int = 5
    finalize_epochs: int = 5
    finalize_lr: Optional[float] = None

    def __post_init__(self):
        self.theta_betas = tuple(self.theta_betas)
        if self.warmup is None and isinstance(self.epochs, int) and self.epochs >= 0:
            self.warmup = math.ceil(0.1 * self.epochs)
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list:
        p = []
        if not isinstance(self.epochs, int) or self.epochs < 1:
            p.append(f"epochs must be a positive integer, got {self.epochs!r}")
        elif not isinstance(self.warmup, int) or not 0 <= self.warmup <= self.epochs:
            p.append(f"warmup must be an integer in [0, epochs], got {self.warmup!r}")
        if not self.t0 > 0:
            p.append(f"t0 must be positive, got {self.t0}")
        if not self.eta >= 0:
            p.append(f"eta must be non-negative, got {self.eta}")
        if self.loss not in LOSS_MODES:
            p.append(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if not self.alpha > 0:
            p.append(f"alpha must be positive, got {self.alpha}")
        if not self.beta >= 0:
            p.append(f"beta must be non-negative, got {self.beta}")
        if not self.gamma >= 0:
            p.append(f"gamma must be non-negative, got {self.gamma}")
        if self.quant_beta is not None and not self.quant_beta > 0:
            p.append(f"quant_beta must be positive, got {self.quant_beta}")
        if not self.w_lr > 0 or not self.theta_lr > 0:
            p.append("learning rates must be positive")
        if not self.w_weight_decay >= 0:
            p.append(f"w_weight_decay must be non-negative, got {self.w_weight_decay}")
        if not 0 <= self.w_momentum < 1:
            p.append(f"w_momentum must be in [0, 1), got {self.w_momentum}")
        if len(self.theta_betas) != 2 or not all(0 <= b < 1 for b in self.theta_betas):
            p.append(f"theta_betas must be two values in [0, 1), got {self.theta_betas}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            p.append(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            p.append(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.samples_to_draw < 0 or self.finalize_epochs < 0:
            p.append("samples_to_draw and finalize_epochs must be non-negative")
        return p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_betas"] = list(self.theta_betas)
        return d

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: dict) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def temperature(epoch: float, t0: float, eta: float) -> float:
    """``t0 * exp(-eta * epoch)``."""
    if epoch < 0:
        raise DomainError(f"epoch must be non-negative, got {epoch}")
    return t0 * math.exp(-eta * epoch)


def _positive_log(x, what: str):
    v = float(as_tensor(x).data)
    if not v > 1.0:
        raise DomainError(f"{what} must exceed 1, got {v}")
    return x.log() if isinstance(x, Tensor) else math.log(v)


def latency_loss(ce, lat, alpha: float, beta: float):
    """``ce * alpha * ln(lat) ** beta``; tensors in, tensor out."""
    log_lat = _positive_log(lat, "latency")
    factor = (log_lat ** beta) * alpha if isinstance(log_lat, Tensor) else alpha * log_lat ** beta
    return ce * factor


def quant_loss(ce, cost, beta: float, gamma: float):
    """``ce * beta * ln(cost) ** gamma``."""
    return ce * cost_weighting(cost, beta, gamma)


# search ---------------------------------------------------------------------------

@dataclass
class ScoredArch:
    arch: ArchitectureSample
    accuracy: Optional[float] = None
    latency: Optional[float] = None
    size_cost: Optional[float] = None
    flop_cost: Optional[float] = None

    def to_dict(self) -> dict:
        return {"architecture": self.arch.to_dict(), "accuracy": self.accuracy,
                "latency": self.latency, "size_cost": self.size_cost, "flop_cost": self.flop_cost}


@dataclass
class SearchResult:
    thetas: list
    trace: list
    samples: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    quant_beta: Optional[float] = None

    def trace_csv(self) -> str:
        return trace_csv(self.trace)

    def to_dict(self) -> dict:
        return {"config": self.config, "config_hash": config_hash(self.config),
                "thetas": [t.tolist() for t in self.thetas], "trace": self.trace,
                "quant_beta": self.quant_beta, "samples": [s.to_dict() for s in self.samples]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def trace_csv(trace: Sequence[dict]) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c]) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"


class _Objective:
    """Assembles CE and the configured cost term for one minibatch."""

    def __init__(self, net: SuperNet, cfg: SearchConfig, lut: Optional[LatencyTable]):
        self.net, self.cfg, self.lut = net, cfg, lut
        self.keys = net.candidate_keys()
        if cfg.loss == "latency":
            if lut is None:
                raise ConfigError("latency loss needs a latency table")
            missing = lut.missing(net.fixed_keys + [k for layer in self.keys for k in layer])
            if missing:
                raise ConfigError([f"latency table has no entry for {k}" for k in missing])
        self.quant_beta = cfg.quant_beta

    def cost(self, masks) -> Tensor:
        if self.cfg.loss == "latency":
            return self.net.expected_latency(masks, self.lut)
        if self.cfg.loss == "quant_size":
            return quant_size_cost(masks, self.net)
        return quant_flop_cost(masks, self.net)

    def calibrate(self) -> None:
        if self.cfg.loss != "latency" and self.quant_beta is None:
            c0 = float(self.cost(self.net.prob_masks()).data)
            self.quant_beta = calibrate_beta(c0, self.cfg.gamma)

    def loss(self, ce: Tensor, cost: Tensor) -> Tensor:
        if self.cfg.loss == "latency":
            return latency_loss(ce, cost, self.cfg.alpha, self.cfg.beta)
        return quant_loss(ce, cost, self.quant_beta, self.cfg.gamma)

    def batch(self, x, y, tau: float, rng: Rng, train: bool = True) -> tuple:
        logits, masks = self.net.forward_soft(x, tau, rng, train)
        ce = softmax_cross_entropy(logits, y)
        cost = self.cost(masks)
        return ce, cost, self.loss(ce, cost)


def _check_finite(value: float, epoch: int, phase: str) -> None:
    if not math.isfinite(value):
        err = NonFiniteError(f"non-finite loss in the {phase} phase of epoch {epoch}")
        err.epoch = epoch
        raise err


def _alpha_params(net: SuperNet) -> list:
    return [p for n, p in net.named_weights() if n.endswith(".alpha")]


def _weight_epoch(obj: _Objective, data: Dataset, opt: SGD, tau: float, rng: Rng, epoch: int,
                  alphas: list) -> None:
    thetas = obj.net.thetas()
    for x, y in data.batches(obj.cfg.batch_size, rng):
        opt.zero_grad()
        _, _, loss = obj.batch(x, y, tau, rng)
        _check_finite(float(loss.data), epoch, "weight")
        loss.backward()
        opt.step()
        for a in alphas:
            project_alpha(a)
        for t in thetas:
            t.grad = None


def _theta_epoch(obj: _Objective, data: Dataset, opt: Optional[Adam], tau: float, rng: Rng,
                 epoch: int) -> tuple:
    """One pass over the θ-split; updates the logits when ``opt`` is given. Returns mean (ce, loss)."""
    ces, losses = [], []
    weights = obj.net.weights()
    for x, y in data.batches(obj.cfg.batch_size, rng):
        if opt is None:
            with no_grad():
                ce, _, loss = obj.batch(x, y, tau, rng)
        else:
            opt.zero_grad()
            ce, _, loss = obj.batch(x, y, tau, rng)
            _check_finite(float(loss.data), epoch, "theta")
            loss.backward()
            opt.step()
            for w in weights:
                w.grad = None
        _check_finite(float(loss.data), epoch, "theta")
        ces.append(float(ce.data))
        losses.append(float(loss.data))
    return math.fsum(ces) / len(ces), math.fsum(losses) / len(losses)


# checkpoints ---------------------------------------------------------------------------

def save_checkpoint(path, net: SuperNet, w_opt: SGD, t_opt: Adam, meta: dict) -> None:
    """Write all weights, buffers, logits, optimiser states and metadata atomically."""
    arrays = {f"net/{k}": v for k, v in net.state_dict().items()}
    arrays.update({f"wopt/{k}": v for k, v in w_opt.state_arrays().items()})
    arrays.update({f"topt/{k}": v for k, v in t_opt.state_arrays().items()})
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", suffix=".npz", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple:
    """Returns ``(meta, net_state, wopt_arrays, topt_arrays)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        groups = {"net": {}, "wopt": {}, "topt": {}}
        for name in z.files:
            if name == "meta":
                continue
            g, rest = name.split("/", 1)
            groups[g][rest] = z[name]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, groups["net"], groups["wopt"], groups["topt"]


# main loop -----------------------------------------------------------------------------

def run_dnas(net: SuperNet, w_data: Dataset, theta_data: Dataset, cfg: SearchConfig,
             lut: Optional[LatencyTable] = None, eval_data: Optional[Dataset] = None,
             checkpoint: Optional[str] = None, resume: bool = False,
             stop_after: Optional[int] = None) -> SearchResult:
    """Search, then sample and (if ``eval_data`` is given) finalise architectures.

    Weights and logits are re-initialised from ``cfg.seed`` unless resuming.
    With ``checkpoint`` set, state is saved after every epoch; ``resume``
    continues from it. ``stop_after`` ends the loop early (after that many
    epochs) and skips sampling, which is how an interrupted run is simulated.
    """
    root = Rng(cfg.seed)
    obj = _Objective(net, cfg, lut)
    w_opt = SGD(net.weights(), cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
    t_opt = Adam(net.thetas(), cfg.theta_lr, cfg.theta_betas, cfg.theta_eps)
    alphas = _alpha_params(net)
    cfg_hash = cfg.hash()
    trace: list = []
    start = 0
    if resume:
        if checkpoint is None or not os.path.exists(checkpoint):
            raise FileNotFoundError(f"no checkpoint to resume from at {checkpoint}")
        meta, state, wst, tst = load_checkpoint(checkpoint)
        if meta["config_hash"] != cfg_hash:
            raise ConfigError(f"checkpoint config hash {meta['config_hash']} does not match {cfg_hash}")
        if meta["rng_algorithm"] != RNG_ALGORITHM:
            raise ConfigError(f"checkpoint rng {meta['rng_algorithm']} does not match {RNG_ALGORITHM}")
        net.load_state_dict(state)
        w_opt.load_state_arrays(wst)
        t_opt.load_state_arrays(tst)
        root.set_state(meta["rng_state"])
        trace = meta["trace"]
        start = meta["epoch"]
        obj.quant_beta = meta["quant_beta"]
    else:
        net.reset_parameters(root.child(0))
        net.reset_theta()
        obj.calibrate()

    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, end):
        tau = temperature(epoch, cfg.t0, cfg.eta)
        try:
            _weight_epoch(obj, w_data, w_opt, tau, root.child(1, epoch), epoch, alphas)
            train_theta = epoch >= cfg.warmup
            ce, loss = _theta_epoch(obj, theta_data, t_opt if train_theta else None, tau,
                                    root.child(2, epoch), epoch)
        except NonFiniteError as exc:
            if getattr(exc, "epoch", None) is None:
                exc.epoch = epoch
            raise
        with no_grad():
            cost = float(obj.cost(net.prob_masks()).data)
        trace.append({"epoch": epoch, "tau": tau, "ce": ce, "expected_cost": cost, "loss": loss})
        if checkpoint is not None:
            meta = {"version": CHECKPOINT_VERSION, "epoch": epoch + 1, "config_hash": cfg_hash,
                    "config": cfg.to_dict(), "rng_algorithm": RNG_ALGORITHM,
                    "rng_state": root.get_state(), "trace": trace, "quant_beta": obj.quant_beta}
            save_checkpoint(checkpoint, net, w_opt, t_opt, meta)

    result = SearchResult([t.data.copy() for t in net.thetas()], trace, [], cfg.to_dict(), obj.quant_beta)
    if len(trace) < cfg.epochs:
        return result
    srng = root.child(3)
    samples = [net.sample_arch(srng) for _ in range(cfg.samples_to_draw)] + [net.argmax_arch()]
    for s in samples:
        s.seed = cfg.seed
    if eval_data is not None:
        result.samples = finalize(net, samples, concat_datasets(w_data, theta_data), eval_data, cfg, lut)
    else:
        result.samples = [_costs(net, ScoredArch(s), lut) for s in dedupe(samples)]
    return result


# finalisation ------------------------------------------------------------------------------

def dedupe(samples: Sequence[ArchitectureSample]) -> list:
    seen, out = set(), []
    for s in samples:
        if s.signature not in seen:
            seen.add(s.signature)
            out.append(s)
    return out


def _costs(net: SuperNet, scored: ScoredArch, lut: Optional[LatencyTable]) -> ScoredArch:
    masks = net.one_hot_masks(scored.arch)
    with no_grad():
        scored.size_cost = float(quant_size_cost(masks, net).data)
        scored.flop_cost = float(quant_flop_cost(masks, net).data)
    if lut is not None:
        scored.latency = net_latency(scored.arch, lut)
    return scored


def accuracy(net: SuperNet, arch: ArchitectureSample, data: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with no_grad():
        for x, y in data.batches(batch_size):
            correct += int((np.argmax(net.forward_hard(arch, x, train=False).data, axis=1) == y).sum())
    return correct / len(data)


def recalibrate_bn(net: SuperNet, arch: ArchitectureSample, data: Dataset, batch_size: int = 256) -> None:
    """Replace the running BN statistics of ``arch`` with the mean batch statistics over ``data``.

    The moving averages trail the weights during training; after a fast
    final epoch they can misplace the eval-mode decision boundary.
    """
    bns = [m for b in net.active_blocks(arch) for m in b.modules() if isinstance(m, BatchNorm2d)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.running_mean[...] = 0.0
        m.running_var[...] = 1.0
    try:
        with no_grad():
            for k, (x, _) in enumerate(data.batches(batch_size)):
                for m in bns:
                    m.momentum = 1.0 / (k + 1)  # cumulative average
                net.forward_hard(arch, x, train=True)
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom


def train_arch(net: SuperNet, arch: ArchitectureSample, data: Dataset, epochs: int, lr: float,
               momentum: float, batch_size: int, rng: Rng) -> list:
    """Fresh initialisation of the active blocks, then SGD on ``forward_hard``. Returns epoch losses."""
    blocks = net.active_blocks(arch)
    init = rng.child(0)
    for b in blocks:
        b.reset_parameters(init)
    params = [p for b in blocks for p in b.parameters()]
    alphas = [p for b in blocks for n, p in b.named_parameters() if n.endswith("alpha")]
    opt = SGD(params, lr, momentum)
    losses = []
    for e in range(epochs):
        total, count = [], 0
        for x, y in data.batches(batch_size, rng.child(1, e)):
            opt.zero_grad()
            loss = softmax_cross_entropy(net.forward_hard(arch, x, train=True), y)
            _check_finite(float(loss.data), e, "finalize")
            loss.backward()
            opt.step()
            for a in alphas:
                project_alpha(a)
            total.append(float(loss.data) * len(y))
            count += len(y)
        losses.append(math.fsum(total) / count)
    recalibrate_bn(net, arch, data, batch_size)
    return losses


def finalize(net: SuperNet, samples: Sequence[ArchitectureSample], train_data: Dataset,
             eval_data: Dataset, cfg: SearchConfig, lut: Optional[LatencyTable] = None) -> list:
    """Retrain each distinct sample from scratch and score it.

    Initialisation and shuffling depend only on the seed and the sample's
    indices, so scores do not depend on the order of ``samples``. The
    supernet's search-time weights are restored afterwards.
    """
    saved = net.state_dict()
    out = []
    try:
        for s in dedupe(samples):
            rng = Rng(cfg.seed).child(4, *s.indices)
            train_arch(net, s, train_data, cfg.finalize_epochs, cfg.finalize_lr or cfg.w_lr,
                       cfg.w_momentum, cfg.batch_size, rng)
            out.append(_costs(net, ScoredArch(s, accuracy(net, s, eval_data)), lut))
    finally:
        net.load_state_dict(saved)
    return out


def enumerate_space(net: SuperNet) -> list:
    """Every architecture of ``net`` in lexicographic index order."""
    sizes = [len(layer.candidates) for layer in net.search_layers]
    return [net.arch_from_indices(ix) for ix in itertools.product(*(range(n) for n in sizes))]


def brute_force(net: SuperNet, train_data: Dataset, eval_data: Dataset, cfg: SearchConfig,
                lut: Optional[LatencyTable] = None) -> list:
    """Finalize every architecture of a small space; the exhaustive reference for a search."""
    return finalize(net, enumerate_space(net), train_data, eval_data, cfg, lut)
