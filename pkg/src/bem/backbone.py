"""Small convolutional encoder-decoder shared by both pipeline stages.

The same architecture description builds either a deterministic network
(plain weight tensors) or a Bayesian one (every weight and bias tensor
replaced by mean-field Gaussian :class:`~bem.variational.VariationalParams`).

Layout for ``levels=L``::

    head 3x3 -> [enc blocks, stride-2 3x3 down] x L -> mid blocks
             -> [bilinear x2, 1x1 conv, + skip, dec blocks] x L -> tail 3x3

Channels double at each level starting from ``base_channels``.
"""

import threading
from dataclasses import asdict, dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ContractError, DimensionError
from .ndtensor import Tensor
from .variational import RHO_INIT, BayesModule, EpsilonSource, VariationalParams

KINDS = ("deterministic", "bayesian")
_INIT_STREAM = 0x1A17


@dataclass(frozen=True)
class BackboneSpec:
    in_channels: int
    out_channels: int
    base_channels: int = 16
    levels: int = 2
    blocks_per_level: int = 1
    activation: str = "silu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.base_channels < 1:
            raise ContractError(f"channel counts must be positive: {self}")
        if self.levels < 0 or self.blocks_per_level < 0:
            raise ContractError(f"levels and blocks_per_level must be >= 0: {self}")
        if self.activation not in nd.ops.ACTIVATIONS:
            raise ContractError(
                f"unknown activation {self.activation!r}; choose from {sorted(nd.ops.ACTIVATIONS)}"
            )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1

    @property
    def padding(self):
        return self.k // 2


def conv_layers(spec):
    """Ordered convolution layers of the architecture."""
    ch = [spec.base_channels * 2**i for i in range(spec.levels + 1)]
    layers = [ConvSpec("head", spec.in_channels, ch[0], 3)]
    for lvl in range(spec.levels):
        for b in range(spec.blocks_per_level):
            layers.append(ConvSpec(f"enc{lvl}.{b}", ch[lvl], ch[lvl], 3))
        layers.append(ConvSpec(f"down{lvl}", ch[lvl], ch[lvl + 1], 3, stride=2))
    for b in range(spec.blocks_per_level):
        layers.append(ConvSpec(f"mid.{b}", ch[-1], ch[-1], 3))
    for lvl in reversed(range(spec.levels)):
        layers.append(ConvSpec(f"up{lvl}", ch[lvl + 1], ch[lvl], 1))
        for b in range(spec.blocks_per_level):
            layers.append(ConvSpec(f"dec{lvl}.{b}", ch[lvl], ch[lvl], 3))
    layers.append(ConvSpec("tail", ch[0], spec.out_channels, 3))
    return layers


def tensor_shapes(spec):
    """Name -> shape of every weight and bias tensor, in layer order."""
    shapes = {}
    for layer in conv_layers(spec):
        shapes[layer.name + ".w"] = (layer.c_out, layer.c_in, layer.k, layer.k)
        shapes[layer.name + ".b"] = (layer.c_out,)
    return shapes


def _init_means(spec, seed, dtype):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_INIT_STREAM,)))
    out = {}
    for name, shape in tensor_shapes(spec).items():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(3.0 / fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            out[name] = np.zeros(shape, dtype=dtype)
    return out


class Model:
    """A built backbone together with its weights.

    ``weights`` is a name -> Tensor dict for deterministic models and a
    :class:`BayesModule` for Bayesian ones.  ``calls`` counts forward passes
    and ``last_input_shape`` records the most recent input shape; the
    pipeline uses both for structural checks.
    """

    def __init__(self, spec, kind, weights):
        if kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {kind!r}")
        self.spec = spec
        self.kind = kind
        self.weights = weights
        self.layers = conv_layers(spec)
        self.calls = 0
        self.last_input_shape = None
        self._lock = threading.Lock()

    @property
    def bayesian(self):
        return self.kind == "bayesian"

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def parameters(self):
        if self.bayesian:
            return self.weights.parameters()
        return list(self.weights.values())

    def num_params(self):
        return int(sum(p.size for p in self.parameters()))

    def named_tensors(self):
        """Flat name -> array view used for serialisation."""
        if self.bayesian:
            out = {}
            for name, p in self.weights.layers.items():
                out[name + ".mu"] = p.mu.data
                out[name + ".rho"] = p.rho.data
            return out
        return {name: t.data for name, t in self.weights.items()}

    def check_input(self, x):
        if x.ndim not in (3, 4):
            raise DimensionError(f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
        c, h, w = x.shape[-3:]
        if c != self.spec.in_channels:
            raise DimensionError(f"model expects {self.spec.in_channels} channels, got {c}")
        div = 2**self.spec.levels
        if h % div or w % div:
            raise DimensionError(
                f"spatial size {h}x{w} not divisible by 2**levels = {div}"
            )

    def apply(self, x, weights):
        """Run the network with an explicit name -> Tensor weight dict."""
        x = nd.as_tensor(x)
        self.check_input(x)
        act = nd.ops.ACTIVATIONS[self.spec.activation]
        spec = self.spec

        def conv(h, name, stride=1, k=3):
            return nd.conv2d(h, weights[name + ".w"], weights[name + ".b"], stride=stride, padding=k // 2)

        h = act(conv(x, "head"))
        skips = []
        for lvl in range(spec.levels):
            for b in range(spec.blocks_per_level):
                h = act(conv(h, f"enc{lvl}.{b}"))
            skips.append(h)
            h = act(conv(h, f"down{lvl}", stride=2))
        for b in range(spec.blocks_per_level):
            h = act(conv(h, f"mid.{b}"))
        for lvl in reversed(range(spec.levels)):
            skip = skips[lvl]
            h = nd.bilinear_resize(h, skip.shape[-2], skip.shape[-1])
            h = act(conv(h, f"up{lvl}", k=1)) + skip
            for b in range(spec.blocks_per_level):
                h = act(conv(h, f"dec{lvl}.{b}"))
        return conv(h, "tail")

    def forward(self, x, eps=None):
        """Forward pass; Bayesian models draw fresh weights from ``eps`` every call."""
        x = nd.as_tensor(x)
        if self.bayesian:
            if not isinstance(eps, EpsilonSource):
                raise ContractError("a Bayesian forward pass needs an EpsilonSource")
            self.check_input(x)
            weights = self.weights.sample(eps)
        else:
            weights = self.weights
        with self._lock:
            self.calls += 1
            self.last_input_shape = tuple(x.shape)
        return self.apply(x, weights)

    __call__ = forward

    def __repr__(self):
        return f"Model({self.kind}, {self.spec}, params={self.num_params()})"


def build(spec, kind="deterministic", seed=0, dtype=None):
    """Initialise a model reproducibly from ``seed``.

    Deterministic weights and Bayesian means share the same initialisation
    for equal ``(spec, seed)``; Bayesian spreads start at ``sigma = 0.05``.
    """
    dtype = nd.tensor.resolve_dtype(dtype)
    means = _init_means(spec, seed, dtype)
    if kind == "deterministic":
        return Model(spec, kind, {n: Tensor(v, requires_grad=True, name=n) for n, v in means.items()})
    if kind == "bayesian":
        params = {
            n: VariationalParams(
                Tensor(v, dtype=dtype), Tensor(np.full(v.shape, RHO_INIT), dtype=dtype), name=n
            )
            for n, v in means.items()
        }
        return Model(spec, kind, BayesModule(params))
    raise ContractError(f"kind must be one of {KINDS}, got {kind!r}")


def from_named_tensors(spec, kind, tensors):
    """Rebuild a model from :meth:`Model.named_tensors` output."""
    shapes = tensor_shapes(spec)
    if kind == "deterministic":
        weights = {}
        for name, shape in shapes.items():
            arr = tensors[name]
            if arr.shape != shape:
                raise DimensionError(f"{name}: stored {arr.shape}, expected {shape}")
            weights[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return Model(spec, kind, weights)
    params = {}
    for name, shape in shapes.items():
        mu, rho = tensors[name + ".mu"], tensors[name + ".rho"]
        if mu.shape != shape or rho.shape != shape:
            raise DimensionError(f"{name}: stored {mu.shape}/{rho.shape}, expected {shape}")
        params[name] = VariationalParams(Tensor(mu.copy()), Tensor(rho.copy()), name=name)
    return Model(spec, kind, BayesModule(params))
