"""Architecture strings, layer composition and the T-step forward pass."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ActivationMode, Value
from .neurons import NeuronConfig, NeuronKind, NeuronLayer, uniform_init

DEFAULT_DROPOUT = 0.25

_TOKEN = re.compile(r"^(FC|GPN|PLIF|LIF|IF|CUBA)(\d+)$")
_DROPOUT = re.compile(r"^DP(\d*\.?\d+)?$")
_REPEAT = re.compile(r"\(([^()]*)\)\*(\d+)")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "FC", "DP" or a NeuronKind value
    width: int = 0
    rate: float = 0.0

    def token(self) -> str:
        if self.kind == "DP":
            return "DP" if self.rate == DEFAULT_DROPOUT else f"DP{self.rate:g}"
        return f"{self.kind}{self.width}"

    @property
    def is_neuron(self) -> bool:
        return self.kind not in ("FC", "DP")


def _expand(spec: str) -> str:
    prev = None
    while prev != spec:
        prev = spec
        spec = _REPEAT.sub(lambda m: "-".join([m.group(1)] * int(m.group(2))), spec)
    if "(" in spec or ")" in spec:
        raise ArchitectureError(f"unbalanced repetition group in {spec!r}")
    return spec


def parse_architecture(spec: str, dropout: float = DEFAULT_DROPOUT) -> list[LayerSpec]:
    """Parse e.g. ``"(FC1024-GPN1024-DP)*3-FC35"`` into validated layers.

    ``dropout`` is the rate used for bare ``DP`` tokens; ``DP0.3`` sets it
    explicitly.
    """
    text = _expand(spec.replace(" ", "").replace("\u200b", ""))
    if not text:
        raise ArchitectureError("empty architecture")
    layers = []
    for tok in text.split("-"):
        tok_u = tok.upper()
        m = _TOKEN.match(tok_u)
        if m:
            width = int(m.group(2))
            if width < 1:
                raise ArchitectureError(f"width must be >= 1 in {tok!r}")
            layers.append(LayerSpec(m.group(1), width))
            continue
        m = _DROPOUT.match(tok_u)
        if m:
            rate = float(m.group(1)) if m.group(1) else dropout
            if not 0 <= rate < 1:
                raise ArchitectureError(f"dropout rate {rate} outside [0, 1)")
            layers.append(LayerSpec("DP", rate=rate))
            continue
        raise ArchitectureError(f"unknown token {tok!r}")
    validate(layers)
    return layers


def validate(layers: list[LayerSpec]):
    if layers[-1].kind != "FC":
        raise ArchitectureError("architecture must end in an FC readout")
    width = None
    for k, layer in enumerate(layers):
        prev = layers[k - 1] if k else None
        if layer.kind == "DP":
            if prev is None or not prev.is_neuron:
                raise ArchitectureError(f"dangling dropout at position {k}")
        elif layer.is_neuron:
            if prev is None or prev.kind != "FC":
                raise ArchitectureError(f"neuron layer {layer.token()} must follow an FC layer")
            if layer.width != width:
                raise ArchitectureError(
                    f"width mismatch: {layer.token()} after a layer of width {width}")
        if layer.kind == "FC":
            width = layer.width
        elif layer.is_neuron:
            width = layer.width


def canonical(layers: list[LayerSpec]) -> str:
    return "-".join(layer.token() for layer in layers)


def with_neuron_kind(layers: list[LayerSpec], kind: NeuronKind) -> list[LayerSpec]:
    """Swap every spiking layer to ``kind``, keeping widths."""
    return [LayerSpec(kind.value, l.width) if l.is_neuron else l for l in layers]


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.weight = ad.parameter(uniform_init(rng, (fan_out, fan_in)), name)

    def __call__(self, x: Value) -> Value:
        return ad.matmul(self.weight, x)


class Dropout:
    """SNN dropout: one Bernoulli keep-mask per sample, reused at every step."""

    def __init__(self, rate: float):
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.mask: np.ndarray | None = None

    def draw(self, shape: tuple[int, int], rng: np.random.Generator):
        keep = rng.random(shape) >= self.rate
        self.mask = keep / (1.0 - self.rate)

    def __call__(self, x: Value, train: bool) -> Value:
        if not train or self.rate == 0:
            return x
        if self.mask is None or self.mask.shape != x.shape:
            raise RuntimeError("dropout mask not drawn for this sequence")
        return ad.mul(x, self.mask)


def dropout_mask(width: int, batch: int, rate: float, mask_seed: int) -> np.ndarray:
    d = Dropout(rate)
    d.draw((width, batch), np.random.default_rng(mask_seed))
    return d.mask


def apply_dropout(spikes, rate: float, mask_seed: int, t: int = 0, train: bool = True) -> Value:
    """Functional dropout; the mask depends on ``mask_seed`` only, never on ``t``."""
    spikes = ad.as_value(spikes)
    if rate >= 1:
        raise ValueError("dropout rate must be < 1")
    if not train or rate == 0:
        return spikes
    return ad.mul(spikes, dropout_mask(spikes.shape[0], spikes.shape[1], rate, mask_seed))


@dataclass
class ForwardResult:
    outputs: list[Value]  # o_t, each (n_class, N)
    spike_inputs: list[Value] = field(default_factory=list)  # x_t into the first spiking layer
    gate_records: list[dict] = field(default_factory=list)  # per step, first GPN layer
    spikes: list[list[Value]] = field(default_factory=list)  # per step, per spiking layer


class Network:
    """Layers built from an architecture string, with named parameters."""

    def __init__(self, arch: str | list[LayerSpec], in_channels: int,
                 neuron: NeuronConfig | None = None, seed: int = 0,
                 dropout: float = DEFAULT_DROPOUT):
        self.layers_spec = parse_architecture(arch, dropout) if isinstance(arch, str) else list(arch)
        validate(self.layers_spec)
        self.in_channels = in_channels
        self.neuron_cfg = neuron if neuron is not None else NeuronConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layers: list = []
        self.params: dict[str, Value] = {}
        width = in_channels
        for k, spec in enumerate(self.layers_spec):
            if spec.kind == "FC":
                layer = Linear(width, spec.width, rng, f"{k}.fc.weight")
                self.params[f"{k}.fc.weight"] = layer.weight
                width = spec.width
            elif spec.kind == "DP":
                layer = Dropout(spec.rate)
            else:
                cfg = NeuronConfig(
                    kind=NeuronKind(spec.kind), beta=self.neuron_cfg.beta,
                    alpha=self.neuron_cfg.alpha, v_th=self.neuron_cfg.v_th,
                    ablation=self.neuron_cfg.ablation if spec.kind == "GPN" else frozenset(),
                    detach_reset=self.neuron_cfg.detach_reset, mode=self.neuron_cfg.mode)
                layer = NeuronLayer(spec.width, cfg, rng)
                for name, p in layer.params.items():
                    p.name = f"{k}.{spec.kind.lower()}.{name}"
                    self.params[p.name] = p
            self.layers.append(layer)

    @property
    def arch(self) -> str:
        return canonical(self.layers_spec)

    @property
    def n_classes(self) -> int:
        return self.layers_spec[-1].width

    @property
    def spiking_layers(self) -> list[NeuronLayer]:
        return [l for l in self.layers if isinstance(l, NeuronLayer)]

    def set_mode(self, mode: ActivationMode):
        for layer in self.spiking_layers:
            layer.cfg = layer.cfg.with_mode(mode)

    def set_detach_reset(self, on: bool):
        for layer in self.spiking_layers:
            layer.cfg = replace(layer.cfg, detach_reset=on)

    def parameters(self) -> list[Value]:
        return list(self.params.values())

    def forward_sequence(self, inputs: np.ndarray, train: bool = False, mask_seed: int = 0,
                         capture_inputs: bool = False, capture_gates: bool = False,
                         input_values: list[Value] | None = None) -> ForwardResult:
        """Run all T steps on ``(T, C, N)`` inputs; states start at zero.

        ``capture_inputs`` makes the inputs to the first spiking layer
        gradient targets; ``input_values`` supplies the raw network inputs
        as prebuilt (possibly differentiable) values.
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 3 or inputs.shape[1] != self.in_channels:
            raise ad.ShapeError(
                f"expected inputs of shape (T, {self.in_channels}, N), got {inputs.shape}")
        steps, _, batch = inputs.shape
        if train:
            rng = np.random.default_rng(mask_seed)
            for layer in self.layers:
                if isinstance(layer, Dropout):
                    layer.mask = None
            width = self.in_channels
            for layer, spec in zip(self.layers, self.layers_spec):
                if isinstance(layer, Dropout) and layer.rate > 0:
                    layer.draw((width, batch), rng)
                if spec.kind != "DP":
                    width = spec.width
        states = {k: layer.init_state(batch) for k, layer in enumerate(self.layers)
                  if isinstance(layer, NeuronLayer)}
        result = ForwardResult(outputs=[])
        first_spiking = min(states) if states else None
        first_gpn = next((k for k, l in enumerate(self.layers)
                          if isinstance(l, NeuronLayer) and l.cfg.kind is NeuronKind.GPN), None)
        for t in range(steps):
            x = input_values[t] if input_values is not None else Value(inputs[t])
            step_spikes = []
            for k, layer in enumerate(self.layers):
                if isinstance(layer, NeuronLayer):
                    if k == first_spiking and capture_inputs:
                        result.spike_inputs.append(x)
                    record = {} if (capture_gates and k == first_gpn) else None
                    states[k], x, _ = layer.step(states[k], x, record)
                    if record is not None:
                        result.gate_records.append(record)
                    step_spikes.append(x)
                elif isinstance(layer, Dropout):
                    x = layer(x, train)
                else:
                    x = layer(x)
            result.outputs.append(x)
            result.spikes.append(step_spikes)
        return result

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
