"""Fully-convolutional student network producing 16 theta-bin grasp scores per cell."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (DimensionError, Tensor, conv2d, load_checkpoint, maxpool2d, relu,
                       save_checkpoint, sigmoid)
from .gripper import N_THETA
from .scene import MAX_OBJECT_HEIGHT, PairedSample
from .teacher import ScoreVolume, recovered_height

INPUT_CHANNELS = (1, 3, 4)
OUTPUT_STRIDE = 4
MODALITY_CHANNELS = {"depth": 1, "rgb": 3, "rgbd": 4}


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Pool:
    window: int


@dataclass(frozen=True)
class Act:
    kind: str   # "relu" or "sigmoid"


LAYERS = (
    Conv(16, 5, 1, 2), Act("relu"), Pool(2),
    Conv(32, 3, 1, 1), Act("relu"),
    Conv(32, 3, 1, 1), Act("relu"), Pool(2),
    Conv(64, 3, 1, 1), Act("relu"),
    Conv(N_THETA, 1, 1, 0), Act("sigmoid"),
)


@dataclass
class NetworkParams:
    input_channels: int
    layers: tuple = LAYERS
    weights: list[Tensor] = field(default_factory=list)   # kernel, bias per conv layer
    seed: int | None = None

    def __post_init__(self):
        if self.input_channels not in INPUT_CHANNELS:
            raise ValueError(f"input channels must be one of {INPUT_CHANNELS}, got {self.input_channels}")
        if not self.layers or self.layers[-1] != Act("sigmoid"):
            raise ValueError("network must end in a sigmoid head")

    @property
    def convs(self) -> list[Conv]:
        return [layer for layer in self.layers if isinstance(layer, Conv)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.convs)):
            out[f"conv{i}.weight"] = self.weights[2 * i].data
            out[f"conv{i}.bias"] = self.weights[2 * i + 1].data
        return out

    def config(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({"conv": [layer.out_channels, layer.kernel, layer.stride, layer.padding]})
            elif isinstance(layer, Pool):
                layers.append({"maxpool": layer.window})
            else:
                layers.append({"act": layer.kind})
        return {"input_channels": self.input_channels, "layers": layers, "seed": self.seed}


def build_network(input_channels: int, seed: int) -> NetworkParams:
    """He-uniform kernels (bound sqrt(6 / fan_in)) and zero biases."""
    if input_channels not in INPUT_CHANNELS:
        raise ValueError(f"input channels must be one of {INPUT_CHANNELS}, got {input_channels}")
    rng = np.random.default_rng(seed)
    weights = []
    c_in = input_channels
    for layer in LAYERS:
        if not isinstance(layer, Conv):
            continue
        fan_in = c_in * layer.kernel * layer.kernel
        bound = np.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=(layer.out_channels, c_in, layer.kernel, layer.kernel))
        weights.append(Tensor(kernel, requires_grad=True))
        weights.append(Tensor(np.zeros(layer.out_channels), requires_grad=True))
        c_in = layer.out_channels
    return NetworkParams(input_channels, LAYERS, weights, seed)


def forward_logits(params: NetworkParams, x: Tensor) -> Tensor:
    """Pre-sigmoid head output for ``x`` of shape [C,H,W] or [N,C,H,W]."""
    channels = x.shape[-3] if x.ndim >= 3 else None
    if x.ndim not in (3, 4) or channels != params.input_channels:
        raise DimensionError(f"expected [{params.input_channels},H,W] input, got {x.shape}")
    if x.shape[-1] % OUTPUT_STRIDE or x.shape[-2] % OUTPUT_STRIDE:
        raise DimensionError(f"input {x.shape[-2]}x{x.shape[-1]} not divisible by {OUTPUT_STRIDE}")
    out = x
    w = iter(params.weights)
    for layer in params.layers[:-1]:
        if isinstance(layer, Conv):
            out = conv2d(out, next(w), next(w), stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, Pool):
            out = maxpool2d(out, layer.window)
        elif layer.kind == "relu":
            out = relu(out)
        else:
            out = sigmoid(out)
    return out


def forward(params: NetworkParams, x: Tensor) -> Tensor:
    return sigmoid(forward_logits(params, x))


def forward_dense(params: NetworkParams, image, modality: str | None = None) -> ScoreVolume:
    """Score one [C,H,W] image; cell (i, j) is the grasp centered on pixel (4i+1.5, 4j+1.5)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3:
        raise DimensionError(f"forward_dense takes one [C,H,W] image, got {x.shape}")
    scores = forward(params, x).data
    if modality is None:
        modality = {1: "depth", 3: "rgb", 4: "rgbd"}[params.input_channels]
    return ScoreVolume(np.array(scores), modality=modality, stride=OUTPUT_STRIDE)


def student_input(sample: PairedSample, modality: str) -> np.ndarray:
    """Network input channels for a paired sample.

    RGB is centered at zero; depth becomes height above the table in units of
    the tallest allowed object, so missing returns read as table.  The RGB
    modality never touches the depth image.
    """
    if modality not in MODALITY_CHANNELS:
        raise ValueError(f"unknown modality {modality!r}")
    parts = []
    if modality in ("rgb", "rgbd"):
        parts.append(sample.rgb - 0.5)
    if modality in ("depth", "rgbd"):
        parts.append(recovered_height(sample.depth, sample.camera_height)[None] / MAX_OBJECT_HEIGHT)
    return np.concatenate(parts, axis=0)


def save_network(path, params: NetworkParams, meta: dict | None = None) -> None:
    save_checkpoint(path, params.named_arrays(), {"network": params.config(), **(meta or {})})


def load_network(path) -> tuple[NetworkParams, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = meta.get("network")
    if cfg is None:
        raise ValueError(f"{path}: checkpoint carries no network config")
    params = build_network(int(cfg["input_channels"]), seed=0)
    expected = params.named_arrays()
    if set(arrays) != set(expected):
        raise ValueError(f"{path}: tensor names do not match the network layout")
    weights = []
    for name, ref in expected.items():
        if arrays[name].shape != ref.shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {ref.shape}")
        weights.append(Tensor(arrays[name], requires_grad=True))
    params.weights = weights
    params.seed = cfg.get("seed")
    return params, meta
