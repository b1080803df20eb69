"""Spiking layer dynamics: IF, LIF, Cuba-LIF, PLIF and the gated parametric neuron.

All step functions operate on ``(M, N)`` values (M neurons, N samples) and
return ``(state', spikes, h)`` where ``h`` is the hidden membrane potential
before firing. Spikes fed to the reset are detached unless
``NeuronConfig.detach_reset`` is off; spikes emitted to the next layer keep
their surrogate gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ActivationMode, Value

DEFAULT_BETA = 0.5
DEFAULT_VTH = 1.0
DEFAULT_ALPHA = 0.5


class NeuronKind(enum.Enum):
    IF = "IF"
    LIF = "LIF"
    CUBA_LIF = "CUBA"
    PLIF = "PLIF"
    GPN = "GPN"

    @classmethod
    def parse(cls, name: str) -> "NeuronKind":
        key = name.strip().upper().replace("-", "_")
        aliases = {"CUBA_LIF": "CUBA", "CUBALIF": "CUBA"}
        return cls(aliases.get(key, key))


GATES = ("F", "I", "T", "B")
ABLATIONS = frozenset({"FI", "T", "B"})


@dataclass(frozen=True)
class NeuronConfig:
    kind: NeuronKind = NeuronKind.LIF
    beta: float | None = None
    alpha: float = DEFAULT_ALPHA
    v_th: float | None = None
    v_reset: float = 0.0
    ablation: frozenset = field(default_factory=frozenset)
    detach_reset: bool = True
    mode: ActivationMode = ActivationMode.HARD

    def __post_init__(self):
        bad = set(self.ablation) - ABLATIONS
        if bad:
            raise ValueError(f"unknown gate ablation(s) {sorted(bad)}; choose from {sorted(ABLATIONS)}")
        if self.beta is not None and not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.v_reset != 0.0:
            raise ValueError("v_reset is fixed at 0")
        if self.kind is NeuronKind.GPN:
            if "FI" in self.ablation and self.beta is None:
                raise ValueError("ablating the forget/input gates requires beta")
            if "T" in self.ablation and self.v_th is None:
                raise ValueError("ablating the threshold gate requires v_th")

    @property
    def leak(self) -> float:
        return DEFAULT_BETA if self.beta is None else self.beta

    @property
    def threshold(self) -> float:
        return DEFAULT_VTH if self.v_th is None else self.v_th

    def with_mode(self, mode: ActivationMode) -> "NeuronConfig":
        return replace(self, mode=mode)


@dataclass
class NeuronLayerState:
    v: Value
    x_syn: Value | None = None
    s_prev: Value | None = None


def zero_state(width: int, batch: int, kind: NeuronKind = NeuronKind.LIF) -> NeuronLayerState:
    zeros = np.zeros((width, batch))
    if kind is NeuronKind.CUBA_LIF:
        return NeuronLayerState(Value(zeros), Value(zeros), Value(zeros))
    return NeuronLayerState(Value(zeros))


def _check(state: NeuronLayerState, x: Value):
    if state.v.shape != x.shape:
        raise ad.ShapeError(f"state shape {state.v.shape} does not match input {x.shape}")


def fire_and_reset(h: Value, threshold, cfg: NeuronConfig) -> tuple[Value, Value]:
    """Spike on ``h - threshold`` and reset fired units to ``v_reset``."""
    s = ad.spike_activation(ad.sub(h, threshold), cfg.mode)
    sr = ad.detach(s) if cfg.detach_reset else s
    v_next = ad.add(ad.mul(ad.sub(1.0, sr), h), ad.mul(sr, cfg.v_reset))
    return s, v_next


def lif_step(state: NeuronLayerState, x, cfg: NeuronConfig, beta=None):
    x = ad.as_value(x)
    _check(state, x)
    b = cfg.leak if beta is None else beta
    h = ad.add(ad.mul(b, state.v), ad.mul(ad.sub(1.0, b), x))
    s, v_next = fire_and_reset(h, cfg.threshold, cfg)
    return NeuronLayerState(v_next), s, h


def if_step(state: NeuronLayerState, x, cfg: NeuronConfig):
    x = ad.as_value(x)
    _check(state, x)
    h = ad.add(state.v, x)
    s, v_next = fire_and_reset(h, cfg.threshold, cfg)
    return NeuronLayerState(v_next), s, h


def cuba_lif_step(state: NeuronLayerState, feedforward, cfg: NeuronConfig, recurrent: Value):
    """Synaptic current ``x_t = alpha x_{t-1} + ff + U s_{t-1}``, then LIF."""
    feedforward = ad.as_value(feedforward)
    _check(state, feedforward)
    m = state.v.shape[0]
    if recurrent.shape != (m, m):
        raise ad.ShapeError(f"recurrent matrix must be {(m, m)}, got {recurrent.shape}")
    x = ad.add(ad.add(ad.mul(cfg.alpha, state.x_syn), feedforward), ad.matmul(recurrent, state.s_prev))
    nxt, s, h = lif_step(NeuronLayerState(state.v), x, cfg)
    return NeuronLayerState(nxt.v, x, s), s, h


def plif_step(state: NeuronLayerState, x, cfg: NeuronConfig, a: Value):
    """LIF with a trainable layer-wide leak ``beta = sigmoid(a)``."""
    return lif_step(state, x, cfg, beta=ad.sigmoid(a))


def _gate(weights: dict, name: str, v: Value, x: Value) -> Value:
    return ad.sigmoid(ad.add(ad.matmul(weights[f"W_{name}v"], v), ad.matmul(weights[f"W_{name}x"], x)))


def gpn_step(state: NeuronLayerState, x, weights: dict, cfg: NeuronConfig, record: dict | None = None):
    """One step of the gated parametric neuron.

    ``weights`` maps ``W_Fv, W_Fx, W_Iv, W_Ix, W_Tv, W_Tx, W_Bv, W_Bx`` to
    ``(M, M)`` values; entries for ablated gates may be absent. When
    ``record`` is a dict, the gate activations are stored into it.
    """
    x = ad.as_value(x)
    _check(state, x)
    v = state.v
    ablate = cfg.ablation
    if "FI" in ablate:
        h = ad.add(ad.mul(cfg.beta, v), ad.mul(ad.sub(1.0, cfg.beta), x))
    else:
        f = _gate(weights, "F", v, x)
        i = _gate(weights, "I", v, x)
        h = ad.add(ad.mul(f, v), ad.mul(i, x))
        if record is not None:
            record["F"] = f.data
            record["I"] = i.data
    if "T" in ablate:
        threshold = cfg.v_th
    else:
        threshold = _gate(weights, "T", v, x)
        if record is not None:
            record["T"] = threshold.data
    s, v_next = fire_and_reset(h, threshold, cfg)
    if "B" not in ablate:
        b = _gate(weights, "B", v, x)
        v_next = ad.add(v_next, b)
        if record is not None:
            record["B"] = b.data
    return NeuronLayerState(v_next), s, h


def uniform_init(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


class NeuronLayer:
    """A layer of ``width`` neurons with its own parameters."""

    def __init__(self, width: int, cfg: NeuronConfig, rng: np.random.Generator | None = None):
        if width < 1:
            raise ValueError("width must be >= 1")
        self.width = width
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Value] = {}
        kind = cfg.kind
        if kind is NeuronKind.CUBA_LIF:
            self.params["U"] = ad.parameter(uniform_init(rng, (width, width)), "U")
        elif kind is NeuronKind.PLIF:
            self.params["a"] = ad.parameter(0.0, "a")
        elif kind is NeuronKind.GPN:
            for gate in self.active_gates:
                for src in ("v", "x"):
                    name = f"W_{gate}{src}"
                    self.params[name] = ad.parameter(uniform_init(rng, (width, width)), name)

    @property
    def active_gates(self) -> tuple[str, ...]:
        if self.cfg.kind is not NeuronKind.GPN:
            return ()
        off = set()
        if "FI" in self.cfg.ablation:
            off |= {"F", "I"}
        if "T" in self.cfg.ablation:
            off.add("T")
        if "B" in self.cfg.ablation:
            off.add("B")
        return tuple(g for g in GATES if g not in off)

    def init_state(self, batch: int) -> NeuronLayerState:
        return zero_state(self.width, batch, self.cfg.kind)

    def step(self, state: NeuronLayerState, x, record: dict | None = None):
        kind = self.cfg.kind
        if kind is NeuronKind.LIF:
            return lif_step(state, x, self.cfg)
        if kind is NeuronKind.IF:
            return if_step(state, x, self.cfg)
        if kind is NeuronKind.CUBA_LIF:
            return cuba_lif_step(state, x, self.cfg, self.params["U"])
        if kind is NeuronKind.PLIF:
            return plif_step(state, x, self.cfg, self.params["a"])
        return gpn_step(state, x, self.params, self.cfg, record)
