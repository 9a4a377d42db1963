"""Layer kit, model presets, parameter containers and the EMA teacher update."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import seed_words

LAYER_KINDS = ("dense", "conv", "conv_transpose", "dropout", "global_average_pool", "reshape", "activation")
ACTIVATIONS = (None, "leaky_relu", "relu", "tanh", "sigmoid")
INIT_STD = 0.05
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class LayerSpec:
    """One entry of a model description.

    Parametric layers (``dense``, ``conv``, ``conv_transpose``) carry their
    own normalisation flags and activation, mirroring rows such as
    "3x3 conv, 128, Pad=1, Stride=1, WeightNorm, lReLU(0.2)".
    """

    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 1
    pad: int = 0
    stride: int = 1
    output_pad: int = 0
    weight_norm: bool = False
    batch_norm: bool = False
    activation: str | None = None
    slope: float = 0.2
    p: float = 0.0
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.shape = tuple(self.shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown layer field(s): {sorted(unknown)}")
        return cls(**d)


def dense(n_in, n_out, weight_norm=True, batch_norm=False, activation=None, slope=0.2) -> LayerSpec:
    return LayerSpec("dense", n_in=n_in, n_out=n_out, weight_norm=weight_norm, batch_norm=batch_norm,
                     activation=activation, slope=slope)


def conv(n_in, n_out, kernel, pad, stride, weight_norm=True, batch_norm=False, activation="leaky_relu") -> LayerSpec:
    return LayerSpec("conv", n_in=n_in, n_out=n_out, kernel=kernel, pad=pad, stride=stride,
                     weight_norm=weight_norm, batch_norm=batch_norm, activation=activation)


def deconv(n_in, n_out, kernel, pad, stride, output_pad, weight_norm=False, batch_norm=True,
           activation="relu") -> LayerSpec:
    return LayerSpec("conv_transpose", n_in=n_in, n_out=n_out, kernel=kernel, pad=pad, stride=stride,
                     output_pad=output_pad, weight_norm=weight_norm, batch_norm=batch_norm, activation=activation)


@dataclass
class ModelConfig:
    """Declarative network description.

    For discriminators the last ``dense`` layer is the classifier head with
    ``num_classes + 1`` outputs; its input is the feature vector used for
    feature matching and embedding export.
    """

    role: str
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    num_classes: int = 10
    latent_dim: int = 0
    name: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if self.role not in ("discriminator", "generator"):
            raise ValueError(f"role must be discriminator or generator, got {self.role!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.role == "discriminator":
            heads = [l for l in self.layers if l.kind == "dense"]
            if not heads or heads[-1] is not self.layers[-1]:
                raise ValueError("discriminator must end with a dense classifier head")
            if self.layers[-1].n_out != self.num_classes + 1:
                raise ValueError(
                    f"discriminator head has {self.layers[-1].n_out} outputs, expected K+1={self.num_classes + 1}"
                )
        elif self.input_shape != (self.latent_dim,):
            raise ValueError(f"generator input shape {self.input_shape} != (latent_dim,)")
        self.output_shape = propagate_shapes(self)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "latent_dim": self.latent_dim,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layers"] = [LayerSpec.from_dict(l) for l in d["layers"]]
        return cls(**d)


def propagate_shapes(cfg: ModelConfig) -> tuple[int, ...]:
    """Symbolic per-sample shape inference; raises naming the failing layer."""
    shape = tuple(cfg.input_shape)
    for i, layer in enumerate(cfg.layers):
        where = f"layer {i} ({layer.kind})"
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.n_in:
                raise ShapeError(f"{where}: expects ({layer.n_in},) input, got {shape}")
            shape = (layer.n_out,)
        elif layer.kind in ("conv", "conv_transpose"):
            if len(shape) != 3 or shape[0] != layer.n_in:
                raise ShapeError(f"{where}: expects {layer.n_in} x H x W input, got {shape}")
            k, p, s = layer.kernel, layer.pad, layer.stride
            if layer.kind == "conv":
                hw = [(n + 2 * p - k) // s + 1 if n + 2 * p >= k else 0 for n in shape[1:]]
            else:
                hw = [(n - 1) * s - 2 * p + k + layer.output_pad for n in shape[1:]]
            if min(hw) <= 0:
                raise ShapeError(f"{where}: non-positive output size {hw} from input {shape}")
            shape = (layer.n_out, *hw)
        elif layer.kind == "global_average_pool":
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects C x H x W input, got {shape}")
            shape = (shape[0],)
        elif layer.kind == "reshape":
            if int(np.prod(layer.shape)) != int(np.prod(shape)):
                raise ShapeError(f"{where}: cannot reshape {shape} to {layer.shape}")
            shape = tuple(layer.shape)
        elif layer.kind == "dropout":
            if not 0.0 <= layer.p < 1.0:
                raise ValueError(f"{where}: dropout p={layer.p} outside [0, 1)")
    return shape


# --------------------------------------------------------------------------
# presets


def paper_discriminator(num_classes: int = 10) -> ModelConfig:
    """Weight-normalised 9-conv discriminator for 32x32 RGB input."""
    layers = [
        conv(3, 128, 3, 1, 1),
        conv(128, 128, 3, 1, 1),
        conv(128, 128, 3, 1, 2),
        LayerSpec("dropout", p=0.5),
        conv(128, 256, 3, 1, 1),
        conv(256, 256, 3, 1, 1),
        conv(256, 256, 3, 1, 2),
        LayerSpec("dropout", p=0.5),
        conv(256, 512, 3, 0, 1),
        conv(512, 256, 1, 0, 1),
        conv(256, 128, 1, 0, 1),
        LayerSpec("global_average_pool"),
        dense(128, num_classes + 1),
    ]
    return ModelConfig("discriminator", (3, 32, 32), layers, num_classes=num_classes, name="paper-discriminator")


def paper_generator(num_classes: int = 10, latent_dim: int = 100) -> ModelConfig:
    """Generator mapping U(0, 1) noise to 3x32x32 images through 4->8->16->32 deconvs."""
    layers = [
        dense(latent_dim, 512 * 4 * 4, weight_norm=False, batch_norm=True, activation="relu"),
        LayerSpec("reshape", shape=(512, 4, 4)),
        deconv(512, 256, 5, 2, 2, 1),
        deconv(256, 128, 5, 2, 2, 1),
        deconv(128, 3, 5, 2, 2, 1, weight_norm=True, batch_norm=False, activation="tanh"),
    ]
    return ModelConfig("generator", (latent_dim,), layers, num_classes=num_classes, latent_dim=latent_dim,
                       name="paper-generator")


def mlp_2d(num_classes: int = 2, hidden: int = 64, dropout_p: float = 0.0) -> ModelConfig:
    layers = [dense(2, hidden, activation="leaky_relu")]
    if dropout_p:
        layers.append(LayerSpec("dropout", p=dropout_p))
    layers.append(dense(hidden, hidden, activation="leaky_relu"))
    if dropout_p:
        layers.append(LayerSpec("dropout", p=dropout_p))
    layers.append(dense(hidden, num_classes + 1))
    return ModelConfig("discriminator", (2,), layers, num_classes=num_classes, name="mlp-2d")


def mlp_2d_generator(num_classes: int = 2, latent_dim: int = 8, hidden: int = 64) -> ModelConfig:
    layers = [
        dense(latent_dim, hidden, weight_norm=False, batch_norm=True, activation="relu"),
        dense(hidden, hidden, weight_norm=False, batch_norm=True, activation="relu"),
        dense(hidden, 2, weight_norm=True, activation="tanh"),
    ]
    return ModelConfig("generator", (latent_dim,), layers, num_classes=num_classes, latent_dim=latent_dim,
                       name="mlp-2d-generator")


def conv_small(num_classes: int = 2, dropout_p: float = 0.3) -> ModelConfig:
    """Three-conv discriminator for 1x8x8 inputs."""
    layers = [
        conv(1, 16, 3, 1, 1),
        conv(16, 32, 3, 1, 2),
        LayerSpec("dropout", p=dropout_p),
        conv(32, 32, 3, 1, 2),
        LayerSpec("global_average_pool"),
        dense(32, num_classes + 1),
    ]
    return ModelConfig("discriminator", (1, 8, 8), layers, num_classes=num_classes, name="conv-small")


def conv_small_generator(num_classes: int = 2, latent_dim: int = 16) -> ModelConfig:
    layers = [
        dense(latent_dim, 32 * 2 * 2, weight_norm=False, batch_norm=True, activation="relu"),
        LayerSpec("reshape", shape=(32, 2, 2)),
        deconv(32, 16, 5, 2, 2, 1),
        deconv(16, 1, 5, 2, 2, 1, weight_norm=True, batch_norm=False, activation="tanh"),
    ]
    return ModelConfig("generator", (latent_dim,), layers, num_classes=num_classes, latent_dim=latent_dim,
                       name="conv-small-generator")


PRESETS = {
    "paper-discriminator": paper_discriminator,
    "paper-generator": paper_generator,
    "mlp-2d": mlp_2d,
    "mlp-2d-generator": mlp_2d_generator,
    "conv-small": conv_small,
    "conv-small-generator": conv_small_generator,
}


def preset(name: str, num_classes: int, **kwargs) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(num_classes=num_classes, **kwargs)


# --------------------------------------------------------------------------
# parameters


class ParamSet:
    """Ordered named tensors of one network plus non-trainable buffers.

    Iterating, ``keys``/``values``/``items`` cover trainable tensors only;
    batch-norm running statistics live in ``buffers``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def __contains__(self, key: str) -> bool:
        return key in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def keys(self):
        return self.params.keys()

    def values(self):
        return self.params.values()

    def items(self):
        return self.params.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def flatten(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """New ParamSet with this one's structure and values from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_parameters(),):
            raise ShapeError(f"flat vector has shape {vec.shape}, expected ({self.num_parameters()},)")
        out, pos = {}, 0
        for k, t in self.params.items():
            out[k] = Tensor(vec[pos : pos + t.size].reshape(t.shape).copy(), requires_grad=t.requires_grad)
            pos += t.size
        return ParamSet(self.config, out, {k: v.copy() for k, v in self.buffers.items()})

    def copy(self) -> "ParamSet":
        params = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.params.items()}
        return ParamSet(self.config, params, {k: v.copy() for k, v in self.buffers.items()})

    def detached(self) -> "ParamSet":
        """View sharing storage whose tensors never collect gradients."""
        return ParamSet(self.config, {k: Tensor(t.data) for k, t in self.params.items()}, self.buffers)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": t.data for k, t in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out


def _layer_name(i: int, layer: LayerSpec) -> str:
    return f"{i:02d}_{layer.kind}"


def build_model(config: ModelConfig, init_seed: int) -> ParamSet:
    """Initialise parameters: weights ~ N(0, 0.05), biases 0, weight-norm g = ||v||."""
    rng = np.random.default_rng(init_seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for i, layer in enumerate(config.layers):
        if layer.kind not in ("dense", "conv", "conv_transpose"):
            continue
        name = _layer_name(i, layer)
        k = layer.kernel
        if layer.kind == "dense":
            wshape, axis = (layer.n_in, layer.n_out), 1
        elif layer.kind == "conv":
            wshape, axis = (layer.n_out, layer.n_in, k, k), 0
        else:
            wshape, axis = (layer.n_in, layer.n_out, k, k), 1
        w = rng.normal(0.0, INIT_STD, size=wshape)
        if layer.weight_norm:
            red = tuple(a for a in range(w.ndim) if a != axis)
            params[f"{name}.v"] = Tensor(w, requires_grad=True)
            params[f"{name}.g"] = Tensor(np.sqrt((w * w).sum(axis=red)), requires_grad=True)
        else:
            params[f"{name}.w"] = Tensor(w, requires_grad=True)
        if layer.batch_norm:
            params[f"{name}.gamma"] = Tensor(np.ones(layer.n_out), requires_grad=True)
            params[f"{name}.beta"] = Tensor(np.zeros(layer.n_out), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(layer.n_out)
            buffers[f"{name}.running_var"] = np.ones(layer.n_out)
        else:
            params[f"{name}.b"] = Tensor(np.zeros(layer.n_out), requires_grad=True)
    return ParamSet(config, params, buffers)


# --------------------------------------------------------------------------
# forward passes


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: Tensor
    features: Tensor

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1

    def class_probs(self) -> Tensor:
        """K-class distribution with the fake class removed and mass renormalised.

        Equals ``probs[:, :K] / (1 - probs[:, K])``; computed as a softmax over
        the real-class logits, which is the same quantity without cancellation.
        """
        return ad.softmax(self.logits[:, : self.num_classes], axis=1)


def weight_norm_forward(v, g, x) -> Tensor:
    """Dense layer ``x @ w`` with ``w = g * v / ||v||`` (norm per output column)."""
    return ad.matmul(x, ad.weight_norm(v, g, axis=1))


def _effective_weight(params: ParamSet, name: str, axis: int) -> Tensor:
    if f"{name}.v" in params:
        return ad.weight_norm(params[f"{name}.v"], params[f"{name}.g"], axis=axis)
    return params[f"{name}.w"]


def _batch_norm(h: Tensor, params: ParamSet, name: str, train: bool, update_stats: bool) -> Tensor:
    axes = (0,) if h.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if h.ndim == 2 else (1, -1, 1, 1)
    rm_key, rv_key = f"{name}.running_mean", f"{name}.running_var"
    if train:
        mu = ad.mean(h, axis=axes, keepdims=True)
        centred = h - mu
        var = ad.mean(ad.square(centred), axis=axes, keepdims=True)
        normed = centred / ad.sqrt(var + BN_EPS)
        if update_stats:
            rm, rv = params.buffers[rm_key], params.buffers[rv_key]
            rm *= BN_MOMENTUM
            rm += (1.0 - BN_MOMENTUM) * mu.data.reshape(-1)
            rv *= BN_MOMENTUM
            rv += (1.0 - BN_MOMENTUM) * var.data.reshape(-1)
    else:
        rm = params.buffers[rm_key].reshape(bshape)
        rv = params.buffers[rv_key].reshape(bshape)
        normed = (h - rm) / np.sqrt(rv + BN_EPS)
    gamma = ad.reshape(params[f"{name}.gamma"], bshape)
    beta = ad.reshape(params[f"{name}.beta"], bshape)
    return normed * gamma + beta


def _run_layers(params: ParamSet, x: Tensor, train: bool, seed, update_stats: bool, stop_before: int | None = None):
    cfg = params.config
    h = x
    n = len(cfg.layers) if stop_before is None else stop_before
    for i, layer in enumerate(cfg.layers[:n]):
        name = _layer_name(i, layer)
        if layer.kind == "dense":
            h = ad.matmul(h, _effective_weight(params, name, axis=1))
        elif layer.kind == "conv":
            h = ad.conv2d(h, _effective_weight(params, name, axis=0), pad=layer.pad, stride=layer.stride)
        elif layer.kind == "conv_transpose":
            h = ad.conv_transpose2d(h, _effective_weight(params, name, axis=1), pad=layer.pad,
                                    stride=layer.stride, output_pad=layer.output_pad)
        elif layer.kind == "dropout":
            if train:
                if seed is None:
                    raise ValueError("train-mode forward needs a dropout seed")
                h = ad.dropout(h, layer.p, seed=[*seed_words(seed), i], training=True)
            continue
        elif layer.kind == "global_average_pool":
            h = ad.global_average_pool(h)
            continue
        elif layer.kind == "reshape":
            h = ad.reshape(h, (h.shape[0], *layer.shape))
            continue
        elif layer.kind == "activation":
            h = ad.activation(layer.activation, h, layer.slope)
            continue
        if layer.batch_norm:
            h = _batch_norm(h, params, name, train, update_stats)
        else:
            b = params[f"{name}.b"]
            h = h + (b if h.ndim == 2 else ad.reshape(b, (1, -1, 1, 1)))
        if layer.activation is not None:
            h = ad.activation(layer.activation, h, layer.slope)
    return h


def _check_input(params: ParamSet, x: Tensor) -> None:
    expect = params.config.input_shape
    if tuple(x.shape[1:]) != expect:
        raise ShapeError(f"{params.config.name} expects input B x {expect}, got {x.shape}")


def forward_discriminator(params: ParamSet, x, mode: str = "eval", seed=None) -> ForwardOutput:
    """Run the classifier. ``mode`` is ``"train"`` (dropout drawn from ``seed``) or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = ad._as_tensor(x)
    _check_input(params, x)
    train = mode == "train"
    cfg = params.config
    features = _run_layers(params, x, train, seed, update_stats=train, stop_before=len(cfg.layers) - 1)
    head_idx = len(cfg.layers) - 1
    head = cfg.layers[head_idx]
    name = _layer_name(head_idx, head)
    logits = ad.matmul(features, _effective_weight(params, name, axis=1)) + params[f"{name}.b"]
    return ForwardOutput(logits=logits, probs=ad.softmax(logits, axis=1), features=features)


def forward_generator(params: ParamSet, z, mode: str = "train", update_stats: bool = True) -> Tensor:
    """Map latent codes to samples. Batch norm uses batch statistics in train mode."""
    z = ad._as_tensor(z)
    if z.ndim != 2 or z.shape[1] != params.config.latent_dim:
        raise ShapeError(f"generator expects B x {params.config.latent_dim} latent codes, got {z.shape}")
    return _run_layers(params, z, mode == "train", None, update_stats=update_stats and mode == "train")


def ema_update(teacher: ParamSet, student: ParamSet, k: float) -> ParamSet:
    """In-place ``teacher <- k * teacher + (1 - k) * student``, buffers included."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"EMA coefficient must be in [0, 1], got {k}")
    if teacher.shapes() != student.shapes():
        raise ShapeError("teacher and student parameter sets differ in keys or shapes")
    if {n: b.shape for n, b in teacher.buffers.items()} != {n: b.shape for n, b in student.buffers.items()}:
        raise ShapeError("teacher and student buffers differ in keys or shapes")
    for key, t in teacher.params.items():
        t.data[...] = k * t.data + (1.0 - k) * student.params[key].data
    for key, b in teacher.buffers.items():
        b[...] = k * b + (1.0 - k) * student.buffers[key]
    return teacher
