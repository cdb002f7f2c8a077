"""Small U-Net whose weights live in one flat float64 vector.

Every scalar weight has a stable flat index given by :class:`ParameterRegistry`,
which is what lets task masks address individual parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 8
    depth: int = 2
    out_channels: int = 3
    seed: int = 0
    # predict input + correction instead of the image itself
    residual: bool = False

    def validate(self) -> None:
        for name in ("in_channels", "base_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.residual and self.in_channels != self.out_channels:
            raise ConfigError("residual mode needs in_channels == out_channels")

    def canonical(self) -> str:
        """Architecture string hashed into checkpoints; the init seed is excluded."""
        parts = [f"{f.name}={int(getattr(self, f.name))}" for f in fields(self) if f.name != "seed"]
        return "unet;" + ";".join(sorted(parts))


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple
    offset: int
    length: int


class ParameterRegistry:
    """Ordered, contiguous layout of every parameter tensor in the flat vector."""

    def __init__(self, shapes):
        self.entries = []
        offset = 0
        for name, shape in shapes:
            length = int(np.prod(shape))
            self.entries.append(ParamEntry(name, tuple(shape), offset, length))
            offset += length
        self.total_len = offset
        self._by_name = {e.name: e for e in self.entries}

    def __getitem__(self, name: str) -> ParamEntry:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def locate(self, index: int) -> tuple:
        """Return (entry, local flat index) owning a global flat index."""
        if not 0 <= index < self.total_len:
            raise IndexError(index)
        for e in self.entries:
            if index < e.offset + e.length:
                return e, index - e.offset
        raise IndexError(index)  # pragma: no cover

    def unpack(self, flat: np.ndarray) -> dict:
        return {e.name: flat[e.offset:e.offset + e.length].reshape(e.shape) for e in self.entries}

    def pack(self, arrays: dict) -> np.ndarray:
        flat = np.empty(self.total_len)
        for e in self.entries:
            a = np.asarray(arrays[e.name], dtype=np.float64)
            if a.shape != e.shape:
                raise T.ShapeError(f"{e.name}: expected {e.shape}, got {a.shape}")
            flat[e.offset:e.offset + e.length] = a.ravel()
        return flat


def _block_names(cfg: UNetConfig):
    """Yield (block name, cin, cout) for each double-conv block, in registry order."""
    b = cfg.base_channels
    cin = cfg.in_channels
    for level in range(cfg.depth):
        cout = b * 2 ** level
        yield f"enc{level}", cin, cout
        cin = cout
    yield "bottleneck", cin, b * 2 ** cfg.depth
    cin = b * 2 ** cfg.depth
    for level in reversed(range(cfg.depth)):
        cout = b * 2 ** level
        yield f"dec{level}", cin + cout, cout
        cin = cout


def _layer_shapes(cfg: UNetConfig):
    shapes = []
    for name, cin, cout in _block_names(cfg):
        shapes.append((f"{name}.conv1.weight", (cout, cin, 3, 3)))
        shapes.append((f"{name}.conv1.bias", (cout,)))
        shapes.append((f"{name}.conv2.weight", (cout, cout, 3, 3)))
        shapes.append((f"{name}.conv2.bias", (cout,)))
    shapes.append(("final.weight", (cfg.out_channels, cfg.base_channels, 3, 3)))
    shapes.append(("final.bias", (cfg.out_channels,)))
    return shapes


class UNet:
    """Immutable network description; parameters are passed to :meth:`forward`."""

    def __init__(self, config: UNetConfig):
        config.validate()
        self.config = config
        self.registry = ParameterRegistry(_layer_shapes(config))

    @property
    def num_params(self) -> int:
        return self.registry.total_len

    def init_params(self, seed: int | None = None) -> np.ndarray:
        """He-uniform weights (bound sqrt(6/fan_in)), zero biases."""
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        flat = np.zeros(self.registry.total_len)
        for e in self.registry:
            if e.name.endswith(".weight"):
                fan_in = e.shape[1] * 9
                bound = np.sqrt(6.0 / fan_in)
                flat[e.offset:e.offset + e.length] = rng.uniform(-bound, bound, e.length)
        return flat

    def check_input(self, x_shape) -> None:
        if len(x_shape) != 4 or x_shape[1] != self.config.in_channels:
            raise T.ShapeError(
                f"expected input [N,{self.config.in_channels},H,W], got {tuple(x_shape)}")
        m = 2 ** self.config.depth
        if x_shape[2] % m or x_shape[3] % m:
            raise T.ShapeError(f"H and W must be divisible by {m}, got {x_shape[2]}x{x_shape[3]}")

    def forward(self, x, params, trace: list | None = None) -> T.Tensor:
        """Restore ``x`` [N,C,H,W] with the flat parameter vector ``params``.

        ``params`` may be a plain array or a 1-D :class:`Tensor`; pass a
        tensor with ``requires_grad=True`` to get the flat gradient. If
        ``trace`` is a list, relu activation patterns and pooling argmaxes
        are appended to it (used to detect kinks in finite differences).
        """
        x = T.as_tensor(x)
        self.check_input(x.shape)
        p = T.as_tensor(params)
        if p.data.ndim != 1 or p.size != self.registry.total_len:
            raise T.ShapeError(
                f"expected {self.registry.total_len} parameters, got shape {p.shape}")
        w = {e.name: T.slice_flat(p, e.offset, e.length, e.shape) for e in self.registry}

        def act(t):
            if trace is not None:
                trace.append(t.data > 0)
            return T.relu(t)

        def block(name, h):
            h = act(T.conv2d(h, w[f"{name}.conv1.weight"], w[f"{name}.conv1.bias"]))
            return act(T.conv2d(h, w[f"{name}.conv2.weight"], w[f"{name}.conv2.bias"]))

        skips = []
        h = x
        for level in range(self.config.depth):
            h = block(f"enc{level}", h)
            skips.append(h)
            if trace is not None:
                trace.append(T.maxpool2_argmax(h.data))
            h = T.maxpool2(h)
        h = block("bottleneck", h)
        for level in reversed(range(self.config.depth)):
            h = T.concat_channels(T.upsample_nearest2(h), skips[level])
            h = block(f"dec{level}", h)
        out = T.conv2d(h, w["final.weight"], w["final.bias"])
        if self.config.residual:
            out = T.add(out, x)
        return out

    def predict(self, x: np.ndarray, params: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.forward(x, params).data


def build(config: UNetConfig | None = None):
    """Return ``(net, registry)`` for ``config`` (defaults when omitted)."""
    net = UNet(config or UNetConfig())
    return net, net.registry
