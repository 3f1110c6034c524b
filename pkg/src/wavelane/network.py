"""Symmetric FCN (32s/16s/8s/4s) with wavelet sub-band injection sites.

The graph is a flat, topologically ordered list of :class:`Layer` records
interpreted by :func:`forward`. Sub-bands are fused by channel concatenation;
the convolution that consumes a fusion site is widened accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .wavelet import COMPONENTS, WaveletPyramid

VARIANT_SKIPS = {"FCN32s": 0, "FCN16s": 1, "FCN8s": 2, "FCN4s": 3}
PLACEMENTS = ("before_pool", "after_conv", "after_pool")
N_STAGES = 5


@dataclass(frozen=True)
class EncoderConfig:
    # (conv count, channel width) per pooling stage
    stages: tuple[tuple[int, int], ...]
    # (kernel, width) of the convolutions standing in for the fully connected layers
    head: tuple[tuple[int, int], ...]
    name: str = "custom"

    def __post_init__(self):
        if len(self.stages) != N_STAGES:
            raise ValueError(f"encoder needs exactly {N_STAGES} pooling stages, got {len(self.stages)}")
        if any(n < 1 or w < 1 for n, w in self.stages):
            raise ValueError("every stage needs at least one convolution of positive width")

    @classmethod
    def preset(cls, name: str) -> "EncoderConfig":
        if name == "vgg16":
            return cls(((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)), ((7, 4096), (1, 4096)), "vgg16")
        if name == "vgg-mini":
            return cls(((1, 16), (2, 32), (2, 64), (2, 96), (2, 128)), ((3, 128),), "vgg-mini")
        raise ValueError(f"unknown encoder preset {name!r} (expected 'vgg16' or 'vgg-mini')")


@dataclass(frozen=True)
class InjectionConfig:
    levels: tuple[int, ...] = ()
    placement: str = "after_pool"
    components: tuple[str, ...] = COMPONENTS
    order: int = 1

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(sorted(set(self.levels))))
        if any(j not in (1, 2, 3, 4) for j in self.levels):
            raise ValueError(f"injection levels must be drawn from 1..4, got {self.levels}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        comps = tuple(c for c in COMPONENTS if c in set(self.components))
        if self.levels and not comps:
            raise ValueError("injection needs at least one sub-band component")
        if set(self.components) - set(COMPONENTS):
            raise ValueError(f"unknown sub-band components {sorted(set(self.components) - set(COMPONENTS))}")
        object.__setattr__(self, "components", comps)
        if self.order not in (1, 2):
            raise ValueError(f"wavelet order must be 1 or 2, got {self.order}")


@dataclass(frozen=True)
class NetworkConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig.preset("vgg-mini"))
    variant: str = "FCN4s"
    injection: InjectionConfig = field(default_factory=InjectionConfig)
    dropout: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        if self.variant not in VARIANT_SKIPS:
            raise ValueError(f"variant must be one of {sorted(VARIANT_SKIPS)}, got {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.num_classes != 2:
            raise ValueError("only binary lane/background segmentation is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        enc = d["encoder"]
        encoder = EncoderConfig(
            tuple(tuple(s) for s in enc["stages"]), tuple(tuple(h) for h in enc["head"]), enc.get("name", "custom")
        )
        inj = d["injection"]
        injection = InjectionConfig(tuple(inj["levels"]), inj["placement"], tuple(inj["components"]), inj["order"])
        return cls(encoder, d["variant"], injection, d["dropout"], d["num_classes"])


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv | pool | concat | upsample | dropout | add
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)


@dataclass
class LayerGraph:
    config: NetworkConfig
    layers: list[Layer]
    params: dict[str, Tensor]
    # injection input name -> (level, spatial divisor)
    injections: dict[str, int]
    output: str

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "LayerGraph":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return LayerGraph(self.config, self.layers, params, dict(self.injections), self.output)

    def sites(self) -> dict[int, tuple[str, int]]:
        """Level -> (concat layer name, spatial divisor of the site)."""
        out = {}
        for layer in self.layers:
            if layer.kind == "concat":
                out[layer.attrs["level"]] = (layer.name, layer.attrs["divisor"])
        return out


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.layers: list[Layer] = []
        self.params: dict[str, Tensor] = {}
        self.channels: dict[str, int] = {"input": 3}
        self.divisor: dict[str, int] = {"input": 1}
        self.n_dropout = 0

    def _add(self, layer: Layer, channels: int, divisor: int) -> str:
        self.layers.append(layer)
        self.channels[layer.name] = channels
        self.divisor[layer.name] = divisor
        return layer.name

    def conv(self, name: str, src: str, width: int, k: int, relu: bool = True) -> str:
        c_in = self.channels[src]
        std = np.sqrt(2.0 / (c_in * k * k))
        w = self.rng.normal(0.0, std, size=(width, c_in, k, k)).astype(self.dtype)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.zeros(width, self.dtype), requires_grad=True, name=f"{name}.bias")
        return self._add(Layer(name, "conv", (src,), {"k": k, "pad": k // 2, "relu": relu}), width, self.divisor[src])

    def pool(self, name: str, src: str) -> str:
        return self._add(Layer(name, "pool", (src,)), self.channels[src], self.divisor[src] * 2)

    def concat(self, name: str, src: str, level: int, n_extra: int) -> str:
        inj = f"dwt{level}"
        self.channels[inj] = n_extra
        attrs = {"level": level, "divisor": self.divisor[src]}
        return self._add(Layer(name, "concat", (src, inj), attrs), self.channels[src] + n_extra, self.divisor[src])

    def upsample(self, name: str, src: str, factor: int) -> str:
        return self._add(Layer(name, "upsample", (src,), {"factor": factor}), self.channels[src], self.divisor[src] // factor)

    def dropout(self, name: str, src: str) -> str:
        self.n_dropout += 1
        return self._add(Layer(name, "dropout", (src,), {"index": self.n_dropout}), self.channels[src], self.divisor[src])

    def add(self, name: str, a: str, b: str) -> str:
        return self._add(Layer(name, "add", (a, b)), self.channels[a], self.divisor[a])


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> LayerGraph:
    """Compile ``config`` into a layer graph with freshly initialised parameters."""
    inj = config.injection
    n_extra = len(inj.components)
    stages = config.encoder.stages
    for j in inj.levels:
        if inj.placement == "after_conv" and stages[j][0] < 2:
            raise ShapeError(
                f"injection level {j}: after_conv needs a convolution following the site in stage {j + 1}, "
                f"which has only {stages[j][0]}"
            )

    b = _Builder(np.random.default_rng(seed), dtype)
    x = "input"
    pools: dict[int, str] = {}
    for s, (n_convs, width) in enumerate(stages, start=1):
        for c in range(n_convs):
            x = b.conv(f"enc{s}_{c + 1}", x, width, 3)
            if inj.placement == "after_conv" and (s - 1) in inj.levels and c == 0:
                x = b.concat(f"fuse{s - 1}", x, s - 1, n_extra)
        if inj.placement == "before_pool" and (s - 1) in inj.levels:
            x = b.concat(f"fuse{s - 1}", x, s - 1, n_extra)
        x = b.pool(f"pool{s}", x)
        pools[s] = x
        if inj.placement == "after_pool" and s in inj.levels:
            x = b.concat(f"fuse{s}", x, s, n_extra)

    for i, (k, width) in enumerate(config.encoder.head, start=1):
        x = b.conv(f"head{i}", x, width, k)
        x = b.dropout(f"head{i}_drop", x)

    level = N_STAGES
    for _ in range(VARIANT_SKIPS[config.variant]):
        x = b.upsample(f"up{level}", x, 2)
        level -= 1
        width = stages[level - 1][1]
        x = b.conv(f"dec{level}", x, width, 3)
        x = b.dropout(f"dec{level}_drop", x)
        skip = b.conv(f"skip{level}", pools[level], width, 1, relu=False)
        x = b.add(f"sum{level}", x, skip)

    x = b.upsample("up0", x, 2**level)
    x = b.conv("dec0", x, stages[0][1], 3)
    x = b.dropout("dec0_drop", x)
    x = b.conv("score", x, config.num_classes, 1, relu=False)

    injections = {f"dwt{j}": j for j in inj.levels}
    graph = LayerGraph(config, b.layers, b.params, injections, x)
    consumed = [name for layer in graph.layers for name in layer.inputs if name.startswith("dwt")]
    assert sorted(consumed) == sorted(injections), "each injection input must be consumed exactly once"
    return graph


def injection_inputs(graph: LayerGraph, pyramid: WaveletPyramid | None, dtype) -> dict[str, Tensor]:
    comps = graph.config.injection.components
    out = {}
    for name, level in graph.injections.items():
        if pyramid is None or len(pyramid) < level:
            raise ShapeError(f"pyramid lacks level {level} required by the injection config")
        out[name] = Tensor(pyramid.level(level).stack(comps).astype(dtype))
    return out


def forward(
    graph: LayerGraph,
    image,
    pyramid: WaveletPyramid | None = None,
    training: bool = False,
    seed: int = 0,
) -> Tensor:
    """Run the graph on a ``3 x H x W`` image; returns ``num_classes x H x W`` logits."""
    dtype = next(iter(graph.params.values())).dtype
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=dtype))
    _, h, w = x.shape
    if h % 2**N_STAGES or w % 2**N_STAGES:
        raise ShapeError(f"input extent {h}x{w} must be divisible by {2**N_STAGES}")
    env: dict[str, Tensor] = {"input": x}
    env.update(injection_inputs(graph, pyramid, dtype))
    p = graph.params
    rate = graph.config.dropout
    for layer in graph.layers:
        args = [env[n] for n in layer.inputs]
        a = layer.attrs
        if layer.kind == "conv":
            out = T.conv2d(args[0], p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], 1, a["pad"])
            if a["relu"]:
                out = T.relu(out)
        elif layer.kind == "pool":
            out = T.maxpool2d(args[0], 2, 2)
        elif layer.kind == "concat":
            feat, sub = args
            if sub.shape[1:] != feat.shape[1:]:
                raise ShapeError(
                    f"injection level {a['level']}: sub-band extent {sub.shape[1:]} does not match site extent {feat.shape[1:]}"
                )
            out = T.concat_channels([feat, sub])
        elif layer.kind == "upsample":
            out = T.upsample_bilinear(args[0], a["factor"])
        elif layer.kind == "dropout":
            out = T.dropout(args[0], rate, training, (seed, a["index"]))
        elif layer.kind == "add":
            out = T.add(*args)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        env[layer.name] = out
    return env[graph.output]


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over (background, lane); ties go to background."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (data[1] > data[0]).astype(np.uint8)
