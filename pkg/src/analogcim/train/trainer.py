"""Two-stage hardware-aware training.

Stage 1 trains the floating-point network with weights clipped to
``+-clip_sigma * std(W_l,0)`` (the std is refreshed periodically from the
unclipped master weights).  Stage 2 freezes those bounds, injects Gaussian
weight noise of std ``eta * W_l,max`` on every forward pass and inserts a DAC
quantizer before and an ADC quantizer after every analog layer.  The ADC
ranges and one global gain ``S`` are trained; each DAC range is derived as
``r_DAC,l = r_ADC,l * |S| / W_l,max`` so the gain constraint holds by
construction.  All weight gradients pass straight through clipping and
noise to the master weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from ..converters import ConverterAttachment, fake_quantize
from ..errors import ConfigurationError, TrainingError
from ..tensor_net import ANALOG_KINDS, NetworkSpec, add_bias, linear_op
from . import autodiff as ad
from .data import Dataset
from .quant import ResidualTape, fake_quant, quant_mask


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.1
    epochs_stage1: int = 30
    epochs_stage2: int = 20
    lr_stage1: float = 0.05
    lr_stage2: Optional[float] = None  # defaults to lr_stage1 / 10
    lr_range_start: float = 1e-3
    lr_range_end: float = 1e-4
    s_grad_clip: float = 0.01
    quant_noise_p: float = 0.5
    quant_noise_per_element: bool = False
    sigma_refresh_interval: int = 10
    clip_sigma: Optional[float] = 2.0  # None disables weight clipping
    batch_size: int = 32
    adc_bits: int = 8
    train_ranges: bool = True  # False gives the noise-only variant (no quantizers)
    range_init: float = 1.0
    s_init: float = 1.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")
        if not 0.0 <= self.quant_noise_p <= 1.0:
            raise ConfigurationError("quant_noise_p must lie in [0, 1]")
        if min(self.epochs_stage1, self.epochs_stage2) < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.sigma_refresh_interval < 1 or self.s_grad_clip <= 0:
            raise ConfigurationError("sigma_refresh_interval and s_grad_clip must be positive")
        if self.adc_bits < 2:
            raise ConfigurationError("adc_bits must be >= 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.range_init <= 0 or self.s_init == 0:
            raise ConfigurationError("range_init must be positive and s_init nonzero")

    @property
    def stage2_lr(self) -> float:
        return self.lr_stage1 / 10 if self.lr_stage2 is None else self.lr_stage2


@dataclass
class TrainableState:
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)
    r_adc: dict[str, float] = field(default_factory=dict)
    S: float = 1.0
    frozen: bool = False

    @classmethod
    def from_net(cls, net: NetworkSpec) -> "TrainableState":
        weights, biases = {}, {}
        for layer in net.analog_layers():
            if layer.weights is None:
                raise ConfigurationError(f"layer {layer.name!r} has no weights")
            weights[layer.name] = layer.weights.astype(np.float64)
            biases[layer.name] = (np.zeros(layer.out_channels) if layer.bias is None
                                  else np.asarray(layer.bias, dtype=np.float64))
        return cls(weights, biases)

    def w_max(self, name: str) -> float:
        if name in self.bounds and np.isfinite(self.bounds[name][1]):
            return float(self.bounds[name][1])
        return float(np.max(np.abs(self.weights[name])))

    def r_dac(self, name: str) -> float:
        return self.r_adc[name] * abs(self.S) / self.w_max(name)

    def clipped(self, name: str) -> np.ndarray:
        lo, hi = self.bounds.get(name, (-np.inf, np.inf))
        return np.clip(self.weights[name], lo, hi)

    def refresh_bounds(self, k: Optional[float]) -> None:
        if self.frozen:
            raise TrainingError("clip bounds are frozen")
        for name, w in self.weights.items():
            s = float(np.std(w)) if k is not None else np.inf
            self.bounds[name] = (-k * s, k * s) if k is not None else (-np.inf, np.inf)


@dataclass
class QuantSetup:
    adc_bits: int
    masks: dict[str, Optional[np.ndarray]] = field(default_factory=dict)
    tape: Optional[ResidualTape] = None


@dataclass
class TrainResult:
    net: NetworkSpec
    state: TrainableState
    log: list[dict]

    @property
    def master(self) -> dict[str, np.ndarray]:
        return self.state.weights


# ---------------------------------------------------------------------------
# graph construction


def weight_noise(shape, eta: float, w_max: float, rng: np.random.Generator) -> np.ndarray:
    """Additive weight noise with std ``eta * w_max``."""
    return eta * w_max * rng.standard_normal(shape)


@dataclass
class Graph:
    logits: ad.Node
    w: dict[str, ad.Node]
    b: dict[str, ad.Node]
    r_adc: dict[str, ad.Node]
    r_dac: dict[str, ad.Node]


def build_graph(net: NetworkSpec, state: TrainableState, x: np.ndarray, *, clip: bool = True,
                eta: float = 0.0, rng: Optional[np.random.Generator] = None,
                quant: Optional[QuantSetup] = None) -> Graph:
    w_nodes, b_nodes, ra_nodes, rd_nodes = {}, {}, {}, {}
    h = ad.const(np.asarray(x, dtype=np.float64))
    for layer in net.layers:
        name = layer.name
        if layer.kind in ANALOG_KINDS and layer.analog:
            w0 = ad.param(state.weights[name], name + ".w")
            bias = ad.param(state.biases[name], name + ".b")
            w_nodes[name], b_nodes[name] = w0, bias
            value = state.clipped(name) if clip else state.weights[name]
            if eta > 0:
                value = value + weight_noise(value.shape, eta, state.w_max(name), rng)
            w = ad.straight_through(w0, value) if (clip or eta > 0) else w0
            if layer.kind == "dense":
                h = ad.reshape(h, (h.shape[0], -1))
            if quant is not None:
                ra = ad.param(np.float64(state.r_adc[name]), name + ".r_adc")
                rd = ad.param(np.float64(state.r_dac(name)), name + ".r_dac")
                ra_nodes[name], rd_nodes[name] = ra, rd
                h = fake_quant(h, rd, quant.adc_bits + 1, quant.tape, name + "/dac",
                               quant.masks.get(name + "/dac"))
            if layer.kind == "conv2d":
                h = ad.conv2d(h, w, layer.kernel, layer.stride, layer.padding)
            elif layer.kind == "depthwise_conv2d":
                h = ad.depthwise_conv2d(h, w, layer.kernel, layer.stride, layer.padding)
            else:
                h = ad.matmul(h, ad.transpose(w, (1, 0)))
            if quant is not None:
                h = fake_quant(h, ra, quant.adc_bits, quant.tape, name + "/adc",
                               quant.masks.get(name + "/adc"))
            h = ad.bias_add(h, bias)
        elif layer.kind in ANALOG_KINDS:
            h = ad.const(add_bias(linear_op(h.value, layer), layer))
        elif layer.kind == "relu":
            tape = quant.tape if quant is not None else None
            if tape is not None and tape.replaying:
                h = ad.relu(h, tape.entries[name + "/relu"])
            else:
                h = ad.relu(h)
                if tape is not None:
                    tape.entries[name + "/relu"] = h.value > 0
        elif layer.kind in ("avg_pool", "max_pool"):
            h = ad.pool2d(h, layer.kind, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == "scale_bias":
            shape = (1, -1) + (1,) * (h.value.ndim - 2)
            if layer.scale is not None:
                h = ad.mul(h, np.asarray(layer.scale, dtype=np.float64).reshape(shape))
            if layer.bias is not None:
                h = ad.add(h, np.asarray(layer.bias, dtype=np.float64).reshape(shape))
        else:
            raise ConfigurationError(f"unsupported layer kind {layer.kind!r}")
    logits = ad.reshape(h, (h.shape[0], -1))
    return Graph(logits, w_nodes, b_nodes, ra_nodes, rd_nodes)


def noisy_forward(net: NetworkSpec, x: np.ndarray, eta: float, rng: np.random.Generator,
                  bounds: Optional[dict[str, tuple[float, float]]] = None) -> np.ndarray:
    """Logits with weights clipped to ``bounds`` and perturbed by N(0, (eta*W_max)^2).

    Without explicit bounds the ones stored in ``net.converters`` are used,
    falling back to no clipping with ``W_max = max|W|``.
    """
    state = TrainableState.from_net(net)
    state.bounds = dict(bounds) if bounds is not None else stored_bounds(net)
    return build_graph(net, state, x, clip=True, eta=eta, rng=rng).logits.value


def stored_bounds(net: NetworkSpec) -> dict[str, tuple[float, float]]:
    layers = (net.converters or {}).get("layers", {})
    return {k: (float(v["w_min"]), float(v["w_max"])) for k, v in layers.items() if "w_max" in v}


def quantized_op(x: np.ndarray, layer, attach: ConverterAttachment, mask_p: float = 0.0,
                 rng: Optional[np.random.Generator] = None, per_element: bool = False) -> np.ndarray:
    """Digital emulation of one analog layer: DAC on the input, ADC on the pre-activation.

    Each quantizer is bypassed with probability ``mask_p`` (whole tensor by
    default).  The bias is added after the ADC in the digital datapath.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    xq = fake_quantize(x, attach.dac)
    m = quant_mask(rng, mask_p, x.shape, per_element)
    if m is not None:
        xq = np.where(m, x, xq)
    y = linear_op(xq, layer, layer.weights.astype(np.float64))
    yq = fake_quantize(y, attach.adc)
    m = quant_mask(rng, mask_p, y.shape, per_element)
    if m is not None:
        yq = np.where(m, y, yq)
    return add_bias(yq, layer)


def grad_S(grads_rdac: Sequence[float], r_adc: Sequence[float], w_max: Sequence[float], S: float,
           clip: Optional[float] = 0.01) -> float:
    """dL/dS = sum_l dL/dr_DAC,l * r_ADC,l / W_l,max * d|S|/dS, clipped to +-clip."""
    sign = float(np.sign(S))
    g = sign * sum(gd * ra / wm for gd, ra, wm in zip(grads_rdac, r_adc, w_max))
    if clip is None:
        return float(g)
    return float(np.clip(g, -clip, clip))


def range_gradients(graph: Graph, state: TrainableState, s_clip: Optional[float]) -> tuple[dict[str, float], float]:
    """Total r_ADC gradients (direct plus through the derived r_DAC) and the S gradient."""
    names = list(graph.r_adc)
    g_ra, g_rd = {}, []
    for name in names:
        direct = graph.r_adc[name].grad
        via = graph.r_dac[name].grad
        direct = 0.0 if direct is None else float(direct)
        via = 0.0 if via is None else float(via)
        g_ra[name] = direct + via * abs(state.S) / state.w_max(name)
        g_rd.append(via)
    gs = grad_S(g_rd, [state.r_adc[n] for n in names], [state.w_max(n) for n in names], state.S, s_clip)
    return g_ra, gs


# ---------------------------------------------------------------------------
# optimizers and schedules


class Optimizer:
    def __init__(self, kind: str = "sgd", momentum: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind, self.momentum, self.beta2, self.eps = kind, momentum, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, key: str, value, grad, lr: float):
        grad = np.asarray(grad, dtype=np.float64)
        if self.kind == "sgd":
            m = self.momentum * self.m.get(key, 0.0) + grad
            self.m[key] = m
            return value - lr * m
        t = self.t.get(key, 0) + 1
        self.t[key] = t
        m = self.momentum * self.m.get(key, 0.0) + (1 - self.momentum) * grad
        v = self.beta2 * self.v.get(key, 0.0) + (1 - self.beta2) * grad * grad
        self.m[key], self.v[key] = m, v
        mh = m / (1 - self.momentum ** t)
        vh = v / (1 - self.beta2 ** t)
        return value - lr * mh / (np.sqrt(vh) + self.eps)


def cosine_lr(lr0: float, step: int, total: int) -> float:
    if total <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def exp_lr(start: float, end: float, step: int, total: int) -> float:
    if total <= 1:
        return start
    return start * (end / start) ** (step / (total - 1))


# ---------------------------------------------------------------------------
# training loops


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _check_finite(loss: float, step: int, stage: int, state: TrainableState) -> None:
    if not np.isfinite(loss):
        wmax = {k: float(np.max(np.abs(v))) for k, v in state.weights.items()}
        raise TrainingError(f"stage {stage}: loss became {loss} at step {step}; max|W| per layer {wmax}")


def export_net(net: NetworkSpec, state: TrainableState, adc_bits: Optional[int],
               trained_ranges: bool) -> NetworkSpec:
    """Deployable network: clipped, noise-free weights plus bounds and ranges."""
    layers = []
    for layer in net.layers:
        if layer.name in state.weights:
            layer = replace(layer, weights=state.clipped(layer.name).astype(np.float32),
                            bias=state.biases[layer.name].astype(np.float32))
        layers.append(layer)
    conv = {"trained": bool(trained_ranges), "layers": {}}
    for name in state.weights:
        lo, hi = state.bounds.get(name, (-np.inf, np.inf))
        entry = {}
        if np.isfinite(hi):
            entry.update(w_min=float(lo), w_max=float(hi))
        if trained_ranges:
            entry.update(r_adc=float(state.r_adc[name]), r_dac=float(state.r_dac(name)))
        conv["layers"][name] = entry
    if trained_ranges:
        conv.update(S=float(state.S), adc_bits=int(adc_bits), dac_bits=int(adc_bits) + 1)
    return replace(net, layers=layers, converters=conv)


def stage1_train(net: NetworkSpec, data: Dataset, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Floating-point training with dynamic weight clipping only."""
    if len(data) == 0:
        raise ConfigurationError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    state = TrainableState.from_net(net)
    state.refresh_bounds(cfg.clip_sigma)
    opt = Optimizer(cfg.optimizer, cfg.momentum)
    total = cfg.epochs_stage1 * math.ceil(len(data) / cfg.batch_size)
    log, step = [], 0
    for _ in range(cfg.epochs_stage1):
        for idx in _batches(len(data), cfg.batch_size, rng):
            if step % cfg.sigma_refresh_interval == 0:
                state.refresh_bounds(cfg.clip_sigma)
            lr = cosine_lr(cfg.lr_stage1, step, total)
            g = build_graph(net, state, data.x[idx], clip=True)
            loss = ad.softmax_cross_entropy(g.logits, data.y[idx])
            _check_finite(float(loss.value), step, 1, state)
            ad.backward(loss)
            for name in state.weights:
                state.weights[name] = opt.step(name + ".w", state.weights[name], g.w[name].grad, lr)
                state.biases[name] = opt.step(name + ".b", state.biases[name], g.b[name].grad, lr)
            acc = float(np.mean(g.logits.value.argmax(axis=1) == data.y[idx]))
            log.append({"stage": 1, "step": step, "loss": float(loss.value), "accuracy": acc, "lr": lr})
            step += 1
    state.refresh_bounds(cfg.clip_sigma)
    return TrainResult(export_net(net, state, None, False), state, log)


def init_stage2(source: Union[TrainResult, NetworkSpec], cfg: TrainConfig) -> tuple[NetworkSpec, TrainableState]:
    if isinstance(source, TrainResult):
        net = source.net
        state = TrainableState({k: v.copy() for k, v in source.state.weights.items()},
                               {k: v.copy() for k, v in source.state.biases.items()})
    else:
        net = source
        state = TrainableState.from_net(net)
    state.refresh_bounds(cfg.clip_sigma)
    state.frozen = True
    state.r_adc = {name: float(cfg.range_init) for name in state.weights}
    state.S = float(cfg.s_init)
    return net, state


def stage2_train(source: Union[TrainResult, NetworkSpec], data: Dataset,
                 cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Noise injection plus trainable quantizers on frozen clip bounds."""
    if len(data) == 0:
        raise ConfigurationError("empty training set")
    net, state = init_stage2(source, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Optimizer(cfg.optimizer, cfg.momentum)
    ropt = Optimizer(cfg.optimizer, cfg.momentum)
    total = cfg.epochs_stage2 * math.ceil(len(data) / cfg.batch_size)
    names = list(state.weights)
    log, step = [], 0
    for _ in range(cfg.epochs_stage2):
        for idx in _batches(len(data), cfg.batch_size, rng):
            lr = cosine_lr(cfg.stage2_lr, step, total)
            x = data.x[idx]
            quant = None
            if cfg.train_ranges:
                quant = QuantSetup(cfg.adc_bits, _draw_masks(net, state, x, cfg, rng))
            g = build_graph(net, state, x, clip=True, eta=cfg.eta, rng=rng, quant=quant)
            loss = ad.softmax_cross_entropy(g.logits, data.y[idx])
            _check_finite(float(loss.value), step, 2, state)
            ad.backward(loss)
            for name in names:
                state.weights[name] = opt.step(name + ".w", state.weights[name], g.w[name].grad, lr)
                state.biases[name] = opt.step(name + ".b", state.biases[name], g.b[name].grad, lr)
            entry = {"stage": 2, "step": step, "loss": float(loss.value),
                     "accuracy": float(np.mean(g.logits.value.argmax(axis=1) == data.y[idx])), "lr": lr}
            if quant is not None:
                rlr = exp_lr(cfg.lr_range_start, cfg.lr_range_end, step, total)
                g_ra, gs = range_gradients(g, state, cfg.s_grad_clip)
                for name in names:
                    r = float(ropt.step(name + ".r_adc", state.r_adc[name], g_ra[name], rlr))
                    state.r_adc[name] = max(r, 1e-8)
                state.S = float(ropt.step("S", state.S, gs, rlr))
                if state.S == 0.0:
                    raise TrainingError(f"global gain S collapsed to 0 at step {step}")
                entry.update(S=state.S, s_grad=gs, range_lr=rlr,
                             s_constraint_err=constraint_error(state))
            log.append(entry)
            step += 1
    return TrainResult(export_net(net, state, cfg.adc_bits, cfg.train_ranges), state, log)


def _draw_masks(net: NetworkSpec, state: TrainableState, x: np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator) -> dict[str, Optional[np.ndarray]]:
    """Quant-noise bypass masks for every DAC and ADC node of this step.

    DAC and ADC nodes are masked independently.  Per-element masks need the
    activation shapes, which are read from the network description.
    """
    shapes = net.shapes()
    masks = {}
    for layer, in_shape, out_shape in zip(net.layers, shapes[:-1], shapes[1:]):
        if layer.name not in state.weights:
            continue
        in_full = (len(x),) + ((int(np.prod(in_shape)),) if layer.kind == "dense" else in_shape)
        masks[layer.name + "/dac"] = quant_mask(rng, cfg.quant_noise_p, in_full, cfg.quant_noise_per_element)
        masks[layer.name + "/adc"] = quant_mask(rng, cfg.quant_noise_p, (len(x),) + out_shape,
                                                cfg.quant_noise_per_element)
    return masks


def constraint_error(state: TrainableState) -> float:
    """Largest relative deviation of r_DAC * W_max / r_ADC from |S| over layers."""
    errs = [abs(state.r_dac(n) * state.w_max(n) / state.r_adc[n] - abs(state.S)) / abs(state.S)
            for n in state.weights]
    return max(errs) if errs else 0.0


def train_two_stage(net: NetworkSpec, data: Dataset, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    s1 = stage1_train(net, data, cfg)
    s2 = stage2_train(s1, data, cfg)
    s2.log = s1.log + s2.log
    return s2


def accuracy(net: NetworkSpec, data: Dataset) -> float:
    from ..tensor_net import forward

    return float(np.mean(forward(net, data.x.astype(np.float64)).argmax(axis=1) == data.y))


# ---------------------------------------------------------------------------
# gradient checking


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def grad_check(net: NetworkSpec, x: np.ndarray, y: np.ndarray, mode: str = "weights", eps: float = 1e-4,
               adc_bits: int = 8, clip_sigma: float = 2.0, r_adc: Optional[dict] = None,
               S: float = 1.0, max_entries: Optional[int] = None, seed: int = 0) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    ``mode='weights'`` checks every weight and bias of the plain float64
    network.  ``mode='ranges'`` checks the r_ADC and S gradients of the
    quantized network in residual-replay (surrogate) mode, with the S
    gradient taken before clipping.
    """
    x = np.asarray(x, dtype=np.float64)
    state = TrainableState.from_net(net)
    rng = np.random.default_rng(seed)
    if mode == "weights":
        def loss_of(st):
            g = build_graph(net, st, x, clip=False)
            return float(ad.softmax_cross_entropy(g.logits, y).value)

        g = build_graph(net, state, x, clip=False)
        ad.backward(ad.softmax_cross_entropy(g.logits, y))
        out = {}
        for group, store, nodes in (("w", state.weights, g.w), ("b", state.biases, g.b)):
            for name, arr in store.items():
                analytic = nodes[name].grad.ravel()
                flat = arr.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
                numeric = np.empty(len(idx))
                for j, i in enumerate(idx):
                    old = flat[i]
                    flat[i] = old + eps
                    up = loss_of(state)
                    flat[i] = old - eps
                    dn = loss_of(state)
                    flat[i] = old
                    numeric[j] = (up - dn) / (2 * eps)
                out[f"{name}.{group}"] = _rel_err(analytic[idx], numeric)
        return out
    if mode != "ranges":
        raise ConfigurationError(f"unknown grad_check mode {mode!r}")
    state.refresh_bounds(clip_sigma)
    state.frozen = True
    state.r_adc = dict(r_adc) if r_adc is not None else {n: 1.0 for n in state.weights}
    state.S = S
    tape = ResidualTape()

    def loss_q(st):
        g = build_graph(net, st, x, clip=True, quant=QuantSetup(adc_bits, tape=tape))
        return g, ad.softmax_cross_entropy(g.logits, y)

    g, loss = loss_q(state)
    tape.freeze()
    g, loss = loss_q(state)
    ad.backward(loss)
    g_ra, gs = range_gradients(g, state, None)
    out = {}
    for name in state.weights:
        old = state.r_adc[name]
        state.r_adc[name] = old + eps
        up = float(loss_q(state)[1].value)
        state.r_adc[name] = old - eps
        dn = float(loss_q(state)[1].value)
        state.r_adc[name] = old
        out[f"{name}.r_adc"] = _rel_err(g_ra[name], (up - dn) / (2 * eps))
    old = state.S
    state.S = old + eps
    up = float(loss_q(state)[1].value)
    state.S = old - eps
    dn = float(loss_q(state)[1].value)
    state.S = old
    out["S"] = _rel_err(gs, (up - dn) / (2 * eps))
    return out
