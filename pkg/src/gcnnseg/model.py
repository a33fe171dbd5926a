"""GU-Net: a U-Net whose convolutions are all group equivariant.

With the ``p1`` group every layer degenerates to its planar counterpart, so
the baseline U-Net and the equivariant models share one code path.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import groups as G
from .layers import (
    GroupBatchNorm,
    GroupConv,
    GroupTransposedConv,
    LiftConv,
    MaxPool,
    ProjConv,
    ReLU,
    TableFactory,
)
from .tensor import read_checkpoint, write_checkpoint

CONFIG_RECORD = "__config__"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    group: str = "p4m"
    depth: int = 4
    base_width: int = 16
    input_channels: int = 3
    num_classes: int = 2
    kernel_size: int = 3
    skip_connections: bool = True

    def __post_init__(self):
        G.get_group(self.group)
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if self.base_width < 1 or self.input_channels < 1 or self.num_classes < 1:
            raise ConfigurationError("widths and class count must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")

    @property
    def group_spec(self) -> G.GroupSpec:
        return G.get_group(self.group)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureConfig":
        return cls(**json.loads(text))

    def widths(self) -> list[int]:
        """Channel count per level (last entry is the bottleneck), after group correction."""
        return [matched_width(self.base_width * 2**lvl, self.group_spec) for lvl in range(self.depth + 1)]


def matched_width(base: int, group: G.GroupSpec | str) -> int:
    """Channel count that keeps the parameter budget of a ``base``-wide planar layer."""
    group = G.get_group(group)
    if base < 1:
        raise ValueError("base width must be >= 1")
    return max(1, math.floor(base / math.sqrt(group.stabilizer_size) + 0.5))


def is_valid_size(n: int, depth: int) -> bool:
    """Every pooled map must have odd size, i.e. ``n = 1 (mod 2**depth)``."""
    return n > 1 and (n - 1) % 2**depth == 0


def nearest_valid_size(n: int, depth: int) -> int:
    # ties go to the larger size
    step = 2**depth
    return step * max(1, math.floor((n - 1) / step + 0.5)) + 1


def size_chain(n: int, depth: int) -> list[int]:
    sizes = [n]
    for _ in range(depth):
        sizes.append((sizes[-1] + 1) // 2)
    return sizes


class GUNet:
    """Encoder-decoder over group feature maps.

    Layers are stored in ``self.layers`` keyed by a dotted name; parameters
    are exposed flat through :meth:`parameters` as ``"<layer>.<param>"``.
    """

    def __init__(self, config: ArchitectureConfig, seed: int = 0, dtype=np.float32,
                 table_factory: TableFactory | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.group = config.group_spec
        rng = np.random.default_rng(seed)
        k, grp = config.kernel_size, self.group
        kw = dict(group=grp, k=k, rng=rng, dtype=self.dtype, table_factory=table_factory)
        widths = config.widths()
        self.layers: dict[str, object] = {}

        def block(prefix: str, cin: int, cout: int, lift: bool = False):
            first = LiftConv(cin, cout, **kw) if lift else GroupConv(cin, cout, **kw)
            self.layers[f"{prefix}.conv1"] = first
            self.layers[f"{prefix}.bn1"] = GroupBatchNorm(cout, dtype=self.dtype)
            self.layers[f"{prefix}.relu1"] = ReLU()
            self.layers[f"{prefix}.conv2"] = GroupConv(cout, cout, **kw)
            self.layers[f"{prefix}.bn2"] = GroupBatchNorm(cout, dtype=self.dtype)
            self.layers[f"{prefix}.relu2"] = ReLU()

        cin = config.input_channels
        for lvl in range(config.depth):
            block(f"enc{lvl}", cin, widths[lvl], lift=lvl == 0)
            self.layers[f"enc{lvl}.pool"] = MaxPool()
            cin = widths[lvl]
        block("bottleneck", cin, widths[-1])
        cin = widths[-1]
        for lvl in reversed(range(config.depth)):
            w = widths[lvl]
            self.layers[f"dec{lvl}.up"] = GroupTransposedConv(cin, w, stride=2, pad=1, **kw)
            self.layers[f"dec{lvl}.upbn"] = GroupBatchNorm(w, dtype=self.dtype)
            self.layers[f"dec{lvl}.uprelu"] = ReLU()
            block(f"dec{lvl}", 2 * w if config.skip_connections else w, w)
            cin = w
        self.layers["head"] = ProjConv(cin, config.num_classes, **kw)
        self._skip_channels: list[int] = []

    # ------------------------------------------------------------------
    # parameters

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": v for name, layer in self.layers.items() for p, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": v for name, layer in self.layers.items() for p, v in layer.grads.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{name}.{b}": v
            for name, layer in self.layers.items()
            if isinstance(layer, GroupBatchNorm)
            for b, v in layer.buffers.items()
        }

    def set_parameter(self, key: str, value: np.ndarray) -> None:
        name, p = key.rsplit(".", 1)
        self.layers[name].params[p] = np.asarray(value, dtype=self.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.parameters().items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                self.set_parameter(name, value)
            elif kind == "buffer":
                layer, b = name.rsplit(".", 1)
                setattr(self.layers[layer].state, b, np.asarray(value, dtype=self.dtype))

    # ------------------------------------------------------------------
    # passes

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ConfigurationError(
                f"expected input [B, {self.config.input_channels}, H, W], got {x.shape}"
            )
        h, w = x.shape[2:]
        if h != w or not is_valid_size(h, self.config.depth):
            raise ConfigurationError(
                f"input size {h}x{w} is not valid for depth {self.config.depth}; "
                f"nearest valid size is {nearest_valid_size(h, self.config.depth)}"
            )

    def _run(self, prefix: str, x, train):
        for part in ("conv1", "bn1", "relu1", "conv2", "bn2", "relu2"):
            x = self.layers[f"{prefix}.{part}"].forward(x, train)
        return x

    def _run_back(self, prefix: str, d):
        for part in ("relu2", "bn2", "conv2", "relu1", "bn1", "conv1"):
            d = self.layers[f"{prefix}.{part}"].backward(d)
        return d

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Per-pixel class scores ``[B, num_classes, H, W]``."""
        self.check_input(x)
        x = np.asarray(x, dtype=self.dtype)
        skips = []
        for lvl in range(self.config.depth):
            x = self._run(f"enc{lvl}", x, train)
            skips.append(x)
            x = self.layers[f"enc{lvl}.pool"].forward(x, train)
        x = self._run("bottleneck", x, train)
        self._skip_channels = []
        for lvl in reversed(range(self.config.depth)):
            for part in ("up", "upbn", "uprelu"):
                x = self.layers[f"dec{lvl}.{part}"].forward(x, train)
            if self.config.skip_connections:
                skip = skips[lvl]
                if skip.shape[2:] != x.shape[2:]:
                    raise AssertionError(f"skip/decoder shape mismatch {skip.shape} vs {x.shape}")
                self._skip_channels.append(skip.shape[1])
                x = np.concatenate([skip, x], axis=1)
            x = self._run(f"dec{lvl}", x, train)
        return self.layers["head"].forward(x, train)

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Back-propagate ``dL/dlogits``; returns the parameter gradients."""
        d = self.layers["head"].backward(np.asarray(dlogits, dtype=self.dtype))
        dskips = {}
        skip_channels = list(self._skip_channels)
        for lvl in range(self.config.depth):
            d = self._run_back(f"dec{lvl}", d)
            if self.config.skip_connections:
                c = skip_channels.pop()
                dskips[lvl], d = d[:, :c], d[:, c:]
            for part in ("uprelu", "upbn", "up"):
                d = self.layers[f"dec{lvl}.{part}"].backward(d)
        d = self._run_back("bottleneck", d)
        for lvl in reversed(range(self.config.depth)):
            d = self.layers[f"enc{lvl}.pool"].backward(d)
            if lvl in dskips:
                d = d + dskips[lvl]
            d = self._run_back(f"enc{lvl}", d)
        self.input_grad = d
        return self.gradients()

    def predict_proba(self, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Eval-mode softmax probabilities."""
        outs = []
        for i in range(0, len(x), batch_size):
            logits = self.forward(x[i : i + batch_size], train=False)
            outs.append(softmax(logits, axis=1))
        return np.concatenate(outs, axis=0)


def softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def build(config: ArchitectureConfig, seed: int = 0, dtype=np.float32, **kwargs) -> GUNet:
    return GUNet(config, seed=seed, dtype=dtype, **kwargs)


def count_parameters(model: GUNet) -> int:
    return int(sum(v.size for v in model.parameters().values()))


def save_model(path, model: GUNet) -> None:
    state = model.state_dict()
    state[CONFIG_RECORD] = np.frombuffer(model.config.to_json().encode(), dtype=np.uint8)
    write_checkpoint(path, state)


def load_model(path, dtype=None) -> GUNet:
    state = read_checkpoint(path)
    if CONFIG_RECORD not in state:
        raise ConfigurationError(f"{path} has no architecture record")
    config = ArchitectureConfig.from_json(state.pop(CONFIG_RECORD).tobytes().decode())
    if dtype is None:
        dtype = next(iter(state.values())).dtype if state else np.float32
    model = GUNet(config, dtype=dtype)
    model.load_state_dict(state)
    return model
