"""Network definition: encoder, attention map, variational heads, mask, classifier.

The forward pass maps a single-channel image batch to class probabilities
through a learned spatial mask:

    image -> encoder features -> attention map (image resolution)
          -> per-pixel mean and spread -> sampled latent -> squash
          -> threshold into mask -> classifier -> probabilities

With a zero noise draw the whole pass is deterministic, which is how
inference and evaluation run. Parameters live in a named, ordered
collection so optimizers and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    affine,
    add_scalar,
    clamp,
    conv2d,
    global_avg_pool,
    maxpool2,
    mul,
    relu,
    sigmoid,
    softmax,
    softplus,
    upsample_nearest,
)

__all__ = [
    "SIGMA_FLOOR",
    "CLASSIFIER_INPUTS",
    "ModelParams",
    "VariationalState",
    "ForwardOutput",
    "encode",
    "encode_with_activations",
    "encoder_layer_names",
    "attention_map",
    "variational_params",
    "sample_latent",
    "apply_mask",
    "class_logits",
    "classify",
    "forward",
    "baseline_forward",
    "save_checkpoint",
    "load_checkpoint",
]

# additive floor keeping the latent spread strictly positive
SIGMA_FLOOR = 1e-3

# what the classifier consumes: the mask alone (default), the mask applied
# to the image or to the attention map, or the raw attention map (the
# unmasked baseline classifier)
CLASSIFIER_INPUTS = ("mask", "masked_input", "masked_attention", "attention")

# (name, out_channels, in_channels) for every 3x3 convolution
_ENCODER_CONVS = [
    ("enc1", 64, 1),
    ("enc2", 64, 64),
    ("enc3", 128, 64),
    ("enc4", 128, 128),
    ("enc5", 256, 128),
    ("enc6", 16, 256),
]
_CLASSIFIER_CONVS = [
    ("cls1", 128, 1),
    ("cls2", 64, 128),
    ("cls3", 64, 64),
]
_DENSE_UNITS = (64, 2)

_MAGIC = b"IMPK"
_FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ModelParams:
    """Ordered name -> Tensor collection of every learnable weight."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def n_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self._tensors.items()}
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {
                n: Tensor(t.data.astype(dtype), requires_grad=True)
                for n, t in self._tensors.items()
            }
        )

    @classmethod
    def initialize(cls, rng: np.random.Generator, dtype=np.float64) -> "ModelParams":
        """He-uniform weights (limit sqrt(6 / fan_in)), zero biases.

        Draw order is fixed by the layer tables, so one seeded generator
        yields one reproducible initialization.
        """

        def he_uniform(shape, fan_in):
            limit = np.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, size=shape).astype(dtype)

        tensors: dict[str, Tensor] = {}

        def add_conv(name, cout, cin, k):
            tensors[name + "_w"] = Tensor(
                he_uniform((cout, cin, k, k), cin * k * k), requires_grad=True
            )
            tensors[name + "_b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

        for name, cout, cin in _ENCODER_CONVS:
            add_conv(name, cout, cin, 3)
        add_conv("attn", 1, 16, 1)
        add_conv("mu", 1, 1, 1)
        add_conv("sigma", 1, 1, 1)
        for name, cout, cin in _CLASSIFIER_CONVS:
            add_conv(name, cout, cin, 3)
        k_in, k_out = _DENSE_UNITS
        tensors["out_w"] = Tensor(he_uniform((k_in, k_out), k_in), requires_grad=True)
        tensors["out_b"] = Tensor(np.zeros(k_out, dtype=dtype), requires_grad=True)
        return cls(tensors)


@dataclass
class VariationalState:
    """Intermediate tensors of one forward pass, in computation order."""

    attention: Tensor
    mu: Tensor
    sigma: Tensor
    eps: Tensor
    z: Tensor
    z_tilde: Tensor
    mask: Tensor


@dataclass
class ForwardOutput:
    class_probs: Tensor
    state: VariationalState


def _as_input_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_image_batch(op: str, x: Tensor) -> None:
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"{op}: expected (N, 1, H, W), got shape {x.shape}")
    _, _, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeError(f"{op}: spatial extents ({h}, {w}) must be multiples of 4")
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{op}: image values in [{lo:.3g}, {hi:.3g}] outside [0, 1]")


def encoder_layer_names() -> list[str]:
    return [name for name, _, _ in _ENCODER_CONVS]


def _encoder_steps(params: ModelParams):
    def conv_step(name):
        w, b = params[name + "_w"], params[name + "_b"]
        return lambda h: relu(conv2d(h, w, b, padding=1))

    return [
        ("enc1", conv_step("enc1")),
        ("enc2", conv_step("enc2")),
        ("pool1", maxpool2),
        ("enc3", conv_step("enc3")),
        ("enc4", conv_step("enc4")),
        ("pool2", maxpool2),
        ("enc5", conv_step("enc5")),
        ("enc6", conv_step("enc6")),
    ]


def encode(params: ModelParams, x: Tensor) -> Tensor:
    """Image batch (N, 1, H, W) in [0, 1] -> features (N, 16, H/4, W/4)."""
    _check_image_batch("encode", x)
    h = x
    for _, step in _encoder_steps(params):
        h = step(h)
    return h


def encode_with_activations(params: ModelParams, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """As encode, additionally returning every named step's activation."""
    _check_image_batch("encode", x)
    acts: dict[str, Tensor] = {}
    h = x
    for name, step in _encoder_steps(params):
        h = step(h)
        acts[name] = h
    return h, acts


def attention_map(params: ModelParams, features: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """1x1 convolution + ReLU over features, upsampled to image resolution."""
    fh, fw = features.shape[2], features.shape[3]
    oh, ow = out_hw
    if oh % fh or ow % fw or oh // fh != ow // fw:
        raise ShapeError(
            f"attention_map: features ({fh}, {fw}) do not tile target ({oh}, {ow})"
        )
    a = relu(conv2d(features, params["attn_w"], params["attn_b"]))
    return upsample_nearest(a, oh // fh)


def variational_params(params: ModelParams, attention: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel latent mean and spread from the attention map.

    Both heads are 1x1 convolutions; the spread passes through softplus and
    gains a small floor so it stays strictly positive.
    """
    mu = conv2d(attention, params["mu_w"], params["mu_b"])
    sigma = add_scalar(
        softplus(conv2d(attention, params["sigma_w"], params["sigma_b"])), SIGMA_FLOOR
    )
    return mu, sigma


def sample_latent(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """Reparameterized draw mu + sigma * eps; eps carries no gradient."""
    eps_t = _as_eps_tensor(eps, mu)
    return mu + mul(sigma, eps_t)


def _as_eps_tensor(eps, like: Tensor) -> Tensor:
    if isinstance(eps, Tensor):
        if eps.shape != like.shape:
            raise ShapeError(f"sample_latent: eps shape {eps.shape} != {like.shape}")
        return eps
    arr = np.asarray(eps, dtype=like.dtype)
    if arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=like.dtype)
    if arr.shape != like.shape:
        raise ShapeError(f"sample_latent: eps shape {arr.shape} != {like.shape}")
    return Tensor(arr)


def _mask_from_squashed(z_tilde: Tensor, tau: float) -> Tensor:
    return clamp(add_scalar(z_tilde, -float(tau)), 0.0, 1.0)


def apply_mask(z: Tensor, tau: float) -> Tensor:
    """Squash the latent and threshold it: min(max(sigmoid(z) - tau, 0), 1).

    The result is 0 exactly where sigmoid(z) <= tau and grows linearly
    with the squashed latent above the threshold.
    """
    tau = float(tau)
    if not np.isfinite(tau):
        raise ValueError(f"apply_mask: tau {tau} not finite")
    return _mask_from_squashed(sigmoid(z), tau)


def class_logits(params: ModelParams, m: Tensor) -> Tensor:
    """Classifier trunk up to the pre-softmax pair of logits."""
    if m.data.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"classify: expected (N, 1, H, W), got shape {m.shape}")
    if m.shape[2] % 4 or m.shape[3] % 4:
        raise ShapeError(f"classify: spatial extents {m.shape[2:]} must be multiples of 4")
    h = relu(conv2d(m, params["cls1_w"], params["cls1_b"], padding=1))
    h = maxpool2(h)
    h = relu(conv2d(h, params["cls2_w"], params["cls2_b"], padding=1))
    h = relu(conv2d(h, params["cls3_w"], params["cls3_b"], padding=1))
    h = maxpool2(h)
    pooled = global_avg_pool(h)
    return affine(pooled, params["out_w"], params["out_b"])


def classify(params: ModelParams, m: Tensor) -> Tensor:
    """Mask batch -> (N, 2) class probabilities."""
    return softmax(class_logits(params, m))


def forward(
    params: ModelParams,
    x,
    eps,
    tau: float = 0.5,
    classifier_input: str = "mask",
) -> ForwardOutput:
    """Full pass from images to class probabilities.

    ``eps`` is the noise for the latent draw: an array shaped like the
    per-pixel latent, or a scalar (0 gives the deterministic inference
    pass). ``classifier_input`` picks what the classifier consumes; the
    "attention" baseline lives in ``baseline_forward`` instead.
    """
    if classifier_input not in ("mask", "masked_input", "masked_attention"):
        raise ValueError(f"forward: bad classifier_input {classifier_input!r}")
    x_t = _as_input_tensor(x, params.dtype)
    features = encode(params, x_t)
    a = attention_map(params, features, (x_t.shape[2], x_t.shape[3]))
    mu, sigma = variational_params(params, a)
    eps_t = _as_eps_tensor(eps, mu)
    z = mu + mul(sigma, eps_t)
    z_tilde = sigmoid(z)
    m = _mask_from_squashed(z_tilde, tau)
    if classifier_input == "mask":
        cls_in = m
    elif classifier_input == "masked_input":
        cls_in = mul(m, x_t)
    else:
        cls_in = mul(m, a)
    probs = classify(params, cls_in)
    return ForwardOutput(probs, VariationalState(a, mu, sigma, eps_t, z, z_tilde, m))


def baseline_forward(params: ModelParams, x) -> tuple[Tensor, Tensor]:
    """Unmasked classifier pass: image -> attention map -> (probs, logits).

    This is the training and inference path of the saliency baseline; it
    draws no noise and builds no mask.
    """
    x_t = _as_input_tensor(x, params.dtype)
    features = encode(params, x_t)
    a = attention_map(params, features, (x_t.shape[2], x_t.shape[3]))
    logits = class_logits(params, a)
    return softmax(logits), logits


# ---------------------------------------------------------------------------
# checkpoint serialization: versioned binary, little-endian, bit exact


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(params)))
        for name, t in params.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data)
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    off = 12
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=int(np.prod(shape)), offset=off)
        off += nbytes
        tensors[name] = Tensor(
            arr.astype(dtype, copy=True).reshape(shape), requires_grad=True
        )
    if off != len(blob):
        raise ValueError(f"checkpoint {path}: {len(blob) - off} trailing bytes")
    return ModelParams(tensors)
