"""The 3DSE phase classifier.

Two conv+ReLU+maxpool stages, a squeeze-excitation gate on the second
stage's feature maps (inserted after the second convolution, before its
pooling), then two fully connected layers producing five phase logits.
Channel counts, kernel and pool sizes, the SE bottleneck ratio, and the
fully connected width all live in `ModelConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .phases import NUM_CLASSES, PhaseLabel
from .rng import Rng
from .tensor import Tape, Tensor, backward


class ConfigError(ValueError):
    """A model configuration violates an architectural constraint."""


def _int3(v) -> tuple[int, int, int]:
    t = tuple(int(x) for x in (v if not isinstance(v, int) else (v, v, v)))
    if len(t) != 3:
        raise ConfigError(f"expected three components, got {v!r}")
    return t


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, int, int] = (8, 48, 48)
    in_channels: int = 1
    conv_channels: tuple[int, int] = (8, 16)
    kernels: tuple[tuple[int, int, int], tuple[int, int, int]] = ((3, 3, 3), (3, 3, 3))
    pools: tuple[tuple[int, int, int], tuple[int, int, int]] = ((2, 2, 2), (2, 2, 2))
    se_reduction: int = 4
    fc_hidden: int = 32
    num_classes: int = NUM_CLASSES
    # intensity window [lo, hi] clipped before min-max scaling; None for
    # data already in a normalized range (e.g. synthetic volumes)
    window: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_dims", _int3(self.input_dims))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernels", tuple(_int3(k) for k in self.kernels))
        object.__setattr__(self, "pools", tuple(_int3(p) for p in self.pools))
        if self.window is not None:
            object.__setattr__(self, "window", (float(self.window[0]), float(self.window[1])))
        self.validate()

    def validate(self) -> None:
        c1, c2 = self.conv_channels
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if c1 < 1 or c2 < 1:
            raise ConfigError(f"conv channels must be >= 1, got {self.conv_channels}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if c2 % self.se_reduction != 0:
            raise ConfigError(
                f"second conv width {c2} must be divisible by se_reduction {self.se_reduction}"
            )
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"phase task requires {NUM_CLASSES} classes, got {self.num_classes}")
        if self.fc_hidden < 1:
            raise ConfigError("fc_hidden must be >= 1")
        if self.window is not None and not self.window[0] < self.window[1]:
            raise ConfigError(f"window must satisfy lo < hi, got {self.window}")
        for ext in self.stage_dims()[-1]:
            if ext < 1:
                raise ConfigError(
                    f"input {self.input_dims} collapses below one voxel after pooling"
                )

    def stage_dims(self) -> list[tuple[int, int, int]]:
        """Spatial dims after each stage: [input, post-pool1, post-pool2].

        Convolutions run at stride 1 with kernel//2 padding, so only the
        pools change the extents (floor division).
        """
        dims = [self.input_dims]
        cur = self.input_dims
        for stage in range(2):
            k = self.kernels[stage]
            conv_dims = tuple(
                (cur[a] + 2 * (k[a] // 2) - k[a]) + 1 for a in range(3)
            )
            p = self.pools[stage]
            for a in range(3):
                if p[a] > conv_dims[a]:
                    raise ConfigError(
                        f"pool {p} exceeds stage-{stage + 1} feature extent {conv_dims}"
                    )
            cur = tuple((conv_dims[a] - p[a]) // p[a] + 1 for a in range(3))
            dims.append(cur)
        return dims

    def flat_features(self) -> int:
        d, h, w = self.stage_dims()[-1]
        return self.conv_channels[1] * d * h * w

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2 = self.conv_channels
        k1, k2 = self.kernels
        mid = c2 // self.se_reduction
        return {
            "conv1.w": (c1, self.in_channels, *k1),
            "conv1.b": (c1,),
            "conv2.w": (c2, c1, *k2),
            "conv2.b": (c2,),
            "se.reduce.w": (c2, mid),
            "se.reduce.b": (mid,),
            "se.expand.w": (mid, c2),
            "se.expand.b": (c2,),
            "fc1.w": (self.flat_features(), self.fc_hidden),
            "fc1.b": (self.fc_hidden,),
            "fc2.w": (self.fc_hidden, self.num_classes),
            "fc2.b": (self.num_classes,),
        }

    def to_dict(self) -> dict:
        return {
            "input-dims": list(self.input_dims),
            "in-channels": self.in_channels,
            "conv-channels": list(self.conv_channels),
            "kernels": [list(k) for k in self.kernels],
            "pools": [list(p) for p in self.pools],
            "se-reduction": self.se_reduction,
            "fc-hidden": self.fc_hidden,
            "num-classes": self.num_classes,
            "window": list(self.window) if self.window is not None else None,
        }

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        known = {
            "input-dims",
            "in-channels",
            "conv-channels",
            "kernels",
            "pools",
            "se-reduction",
            "fc-hidden",
            "num-classes",
            "window",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        defaults = ModelConfig()
        return ModelConfig(
            input_dims=tuple(raw.get("input-dims", defaults.input_dims)),
            in_channels=raw.get("in-channels", defaults.in_channels),
            conv_channels=tuple(raw.get("conv-channels", defaults.conv_channels)),
            kernels=tuple(tuple(k) for k in raw.get("kernels", defaults.kernels)),
            pools=tuple(tuple(p) for p in raw.get("pools", defaults.pools)),
            se_reduction=raw.get("se-reduction", defaults.se_reduction),
            fc_hidden=raw.get("fc-hidden", defaults.fc_hidden),
            num_classes=raw.get("num-classes", defaults.num_classes),
            window=tuple(raw["window"]) if raw.get("window") is not None else None,
        )


# closest counterpart to the published layer sequence; its own size is
# reported by param_count rather than claimed to match any external figure
PAPER_PRESET = dict(
    input_dims=(32, 128, 128),
    conv_channels=(16, 32),
    kernels=((3, 3, 3), (3, 3, 3)),
    pools=((2, 2, 2), (2, 2, 2)),
    se_reduction=4,
    fc_hidden=128,
    window=(-200.0, 300.0),
)


PARAM_ORDER = (
    "conv1.w",
    "conv1.b",
    "conv2.w",
    "conv2.b",
    "se.reduce.w",
    "se.reduce.b",
    "se.expand.w",
    "se.expand.b",
    "fc1.w",
    "fc1.b",
    "fc2.w",
    "fc2.b",
)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def param_list(self) -> list[Tensor]:
        return [self.params[name] for name in PARAM_ORDER]

    def clone(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            config=self.config,
            params={
                name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                for name, t in self.params.items()
            },
            metadata=dict(self.metadata),
        )


def param_count(config: ModelConfig) -> tuple[int, int]:
    """Exact parameter count and its float32 footprint in bytes."""
    count = sum(int(np.prod(shape)) for shape in config.param_shapes().values())
    return count, 4 * count


def build(config: ModelConfig, seed: int, dtype=np.float32) -> ModelCheckpoint:
    """He-uniform weights, zero biases; byte-deterministic per seed."""
    rng = Rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            limit = math.sqrt(6.0 / fan_in)
            data = rng.uniform_array(shape, -limit, limit, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return ModelCheckpoint(config=config, params=params, metadata={"seed": seed})


def forward(
    checkpoint: ModelCheckpoint,
    batch: Tensor,
    gate_override: np.ndarray | None = None,
    return_features: bool = False,
):
    """Logits [N, num_classes] for a batch [N, in_channels, D, H, W].

    `gate_override` substitutes the SE gates with a fixed [N, c2] array
    (testing hook). `return_features` also returns the post-SE feature maps
    of the second stage.
    """
    cfg = checkpoint.config
    p = checkpoint.params
    expected = (cfg.in_channels, *cfg.input_dims)
    if batch.ndim != 5 or batch.shape[1:] != expected:
        raise ops.ShapeError(f"batch shape {batch.shape} does not match model input {expected}")

    x = ops.maxpool3d(
        ops.relu(
            ops.conv3d(batch, p["conv1.w"], p["conv1.b"], stride=1, padding=tuple(k // 2 for k in cfg.kernels[0]))
        ),
        cfg.pools[0],
    )
    x = ops.relu(
        ops.conv3d(x, p["conv2.w"], p["conv2.b"], stride=1, padding=tuple(k // 2 for k in cfg.kernels[1]))
    )
    if gate_override is not None:
        gates = Tensor(np.asarray(gate_override, dtype=x.dtype))
        if gates.shape != x.shape[:2]:
            raise ops.ShapeError(f"gate override shape {gates.shape} must be {x.shape[:2]}")
    else:
        squeezed = ops.global_avg_pool(x)
        gates = ops.sigmoid(
            ops.dense(
                ops.relu(ops.dense(squeezed, p["se.reduce.w"], p["se.reduce.b"])),
                p["se.expand.w"],
                p["se.expand.b"],
            )
        )
    features = ops.channel_scale(x, gates)
    x = ops.maxpool3d(features, cfg.pools[1])
    x = ops.reshape(x, (x.shape[0], cfg.flat_features()))
    x = ops.relu(ops.dense(x, p["fc1.w"], p["fc1.b"]))
    logits = ops.dense(x, p["fc2.w"], p["fc2.b"])
    if return_features:
        return logits, features
    return logits


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    w = np.asarray(logits, dtype=np.float64)
    m = w.max(axis=-1, keepdims=True)
    e = np.exp(w - m)
    return e / e.sum(axis=-1, keepdims=True)


def predict(checkpoint: ModelCheckpoint, volume: np.ndarray) -> tuple[PhaseLabel, np.ndarray]:
    """Phase and softmax probabilities for one preprocessed volume [1,D,H,W].

    Ties at the argmax resolve to the lowest class code.
    """
    batch = Tensor(np.asarray(volume)[None])
    logits = forward(checkpoint, batch).data[0]
    probs = softmax_probabilities(logits)
    return PhaseLabel(int(np.argmax(probs))), probs


def trilinear_resample(volume: np.ndarray, out_dims: tuple[int, int, int]) -> np.ndarray:
    """Separable linear interpolation with endpoint-aligned coordinates.

    Linear ramps are preserved exactly; a single-voxel output axis samples
    the centre of the input axis.
    """
    out = np.asarray(volume, dtype=np.float64)
    for axis in range(3):
        in_size = out.shape[axis]
        size = int(out_dims[axis])
        if size == in_size:
            continue
        if size == 1:
            coords = np.array([(in_size - 1) / 2.0])
        else:
            coords = np.arange(size) * ((in_size - 1) / (size - 1))
        i0 = np.clip(np.floor(coords).astype(int), 0, in_size - 1)
        i1 = np.minimum(i0 + 1, in_size - 1)
        t = coords - i0
        shape = [1, 1, 1]
        shape[axis] = size
        t = t.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1.0 - t) + np.take(out, i1, axis=axis) * t
    return out


def preprocess(
    volume: np.ndarray,
    config: ModelConfig,
    spacing_mm: tuple[float, float, float] | None = None,
) -> np.ndarray:
    """Raw [D,H,W] intensities to a model-ready [1,D,H,W] float32 block.

    Resamples to the model grid, clips to the configured window, then
    min-max scales to [0,1]. A constant volume maps to zeros. Spacing is
    accepted for interface symmetry with the manifest but does not alter
    the fixed-grid resampling.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError(f"expected a [D,H,W] volume, got shape {vol.shape}")
    for axis, ext in enumerate(vol.shape):
        if ext < 2:
            raise ValueError(f"degenerate extent {ext} along axis {axis}; need >= 2")
    out = trilinear_resample(vol, config.input_dims)
    if config.window is not None:
        out = np.clip(out, config.window[0], config.window[1])
    lo = out.min()
    hi = out.max()
    if hi > lo:
        out = (out - lo) / (hi - lo)
    else:
        out = np.zeros_like(out)
    return out[None].astype(np.float32)


def saliency(
    checkpoint: ModelCheckpoint,
    volume: np.ndarray,
    class_index: int,
) -> np.ndarray:
    """Gradient-weighted activation map for one class over a raw volume.

    Uses the post-SE feature maps A_k of the second conv stage with the
    per-voxel gradient-response product

        cam(x) = relu( sum_k  dlogit_class/dA_k(x) * A_k(x) )

    trilinearly upsampled to the input volume's own dims; nonnegative
    everywhere. Keeping the gradient spatially resolved (rather than
    collapsing it to one weight per channel) is what localizes class
    evidence in a network this compact, whose channels are generic texture
    detectors rather than class-specific ones.
    """
    cfg = checkpoint.config
    if not 0 <= class_index < cfg.num_classes:
        raise ValueError(f"class index {class_index} out of range 0..{cfg.num_classes - 1}")
    vol = np.asarray(volume)
    prepared = preprocess(vol, cfg)
    with Tape() as tape:
        batch = Tensor(prepared[None])
        logits, features = forward(checkpoint, batch, return_features=True)
        onehot = np.zeros((1, cfg.num_classes), dtype=logits.dtype)
        onehot[0, class_index] = 1.0
        target = ops.sum_all(ops.mul(logits, Tensor(onehot)))
        backward(tape, target)

    acts = features.data[0].astype(np.float64)
    grads = features.grad[0].astype(np.float64)
    cam = np.maximum((grads * acts).sum(axis=0), 0.0)
    heat = _resample_cam(cam, cfg, vol.shape)
    return np.maximum(heat, 0.0).astype(np.float32)


def _resample_cam(cam: np.ndarray, cfg: ModelConfig, out_dims: tuple[int, ...]) -> np.ndarray:
    """Upsample a feature-grid map to volume dims.

    Each feature cell sits at the centre of its stage-1 pooling block in
    model space (convolutions are same-padded), which then maps linearly
    onto the volume grid; values are linearly interpolated between cell
    centres and clamped beyond them.
    """
    out = cam.astype(np.float64)
    for axis in range(3):
        n_cells = out.shape[axis]
        pool = cfg.pools[0][axis]
        model_ext = cfg.input_dims[axis]
        vol_ext = int(out_dims[axis])
        # cell centre in model voxels, then model -> volume coordinates
        scale = (vol_ext - 1) / (model_ext - 1) if model_ext > 1 else 0.0
        c0 = ((pool - 1) / 2.0) * scale
        step = pool * scale if pool * scale > 0 else 1.0
        coords = (np.arange(vol_ext) - c0) / step
        idx = np.clip(coords, 0.0, n_cells - 1)
        i0 = np.floor(idx).astype(int)
        i1 = np.minimum(i0 + 1, n_cells - 1)
        t = idx - i0
        shape = [1, 1, 1]
        shape[axis] = vol_ext
        t = t.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1.0 - t) + np.take(out, i1, axis=axis) * t
    return out
