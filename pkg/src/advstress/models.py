"""Small CNN classifiers over the tensor substrate.

Every architecture ends with global average pooling followed by a single
linear layer, which is what class activation mapping requires. Each
architecture also has a binary variant with the same parameter layout:
non-stem convolutions execute as sign(x) * sign(W) with per-filter (or
per-basis) scales, and the ReLUs in front of them disappear because the
sign acts as the activation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bitpack as bp
from . import tensor as T
from .tensor import Tensor


@dataclass
class ForwardCtx:
    training: bool = False
    bn_mode: Optional[str] = None  # override; default follows `training`
    grad_mode: str = "ste"  # 'ste' | 'latent', binarized layers only
    packed: bool = False  # use xnor-popcount kernels (inference only)

    def batchnorm_mode(self) -> str:
        if self.bn_mode is not None:
            return self.bn_mode
        return "minibatch" if self.training else "statistics"


class Layer:
    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        raise NotImplementedError

    def sublayers(self):
        return []

    def param_items(self):
        """Trainable (name, Tensor) pairs."""
        return []

    def array_items(self):
        """Persistent non-trainable (name, ndarray) state."""
        return []


class Identity(Layer):
    def forward(self, x, ctx):
        return x


class ReLU(Layer):
    def forward(self, x, ctx):
        return T.relu(x)


class MaxPool2d(Layer):
    def __init__(self, kernel: int = 2, stride: Optional[int] = None):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, ctx):
        return T.max_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        return T.global_avg_pool(x)


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng or np.random.default_rng(0)
        std = float(np.sqrt(2.0 / (in_ch * kernel * kernel)))
        self.weight = Tensor(
            (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std).astype(np.float32),
            requires_grad=True,
        )
        self.mask: Optional[np.ndarray] = None  # f32 {0,1}, same shape as weight

    def effective_weight(self) -> Tensor:
        if self.mask is None:
            return self.weight
        return T.mul(self.weight, Tensor(self.mask))

    def forward(self, x, ctx):
        return T.conv2d(x, self.effective_weight(), self.stride, self.padding)

    def apply_mask(self):
        if self.mask is not None:
            self.weight.data *= self.mask

    def param_items(self):
        return [("weight", self.weight)]

    def array_items(self):
        return [] if self.mask is None else [("mask", self.mask)]


class BinarizedConv2d(Layer):
    """Conv layer executing as scaled sign products.

    Keeps a latent float weight for fine-tuning; the deployed form is the
    sign bases plus scales. XNOR: one basis, per-filter scale mean(|W|).
    ABC: `num_bases` bases sign(W - mean(W) + u_i*std(W)) with u_i evenly
    spaced in [-1, 1], scales solved by least squares (ridge fallback on a
    singular system). Input activations binarize through a straight-through
    sign; scales are treated as constants in the backward pass.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0,
                 scheme: str = "xnor", num_bases: int = 1,
                 rng: Optional[np.random.Generator] = None):
        if scheme not in ("xnor", "abc"):
            raise ValueError(f"unknown binarization scheme {scheme!r}")
        if num_bases < 1:
            raise ValueError("num_bases must be >= 1")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.scheme = scheme
        self.num_bases = 1 if scheme == "xnor" else num_bases
        rng = rng or np.random.default_rng(0)
        std = float(np.sqrt(2.0 / (in_ch * kernel * kernel)))
        self.weight = Tensor(
            (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std).astype(np.float32),
            requires_grad=True,
        )
        self._packed_cache = None

    # -- basis construction -------------------------------------------------

    def _shifts(self) -> list[float]:
        """Scalar shifts whose sign patterns form the bases; [0] for XNOR."""
        if self.scheme == "xnor":
            return [0.0]
        w = self.weight.data
        mean, std = float(w.mean()), float(w.std())
        return [-mean + u * std for u in _shift_points(self.num_bases)]

    def basis_signs_and_scales(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Sign bases (OIHW +-1 arrays) and per-filter scale vectors."""
        w = self.weight.data
        if self.scheme == "xnor":
            signs = np.where(w >= 0, 1.0, -1.0).astype(np.float32)
            alpha = np.abs(w).mean(axis=(1, 2, 3)).astype(np.float32)
            return [signs], [alpha]
        bases = [
            np.where(w + np.float32(s) >= 0, 1.0, -1.0).astype(np.float32)
            for s in self._shifts()
        ]
        a = np.stack([b.reshape(-1) for b in bases], axis=1).astype(np.float64)
        target = w.reshape(-1).astype(np.float64)
        gram = a.T @ a
        rhs = a.T @ target
        if np.linalg.cond(gram) > 1e12:
            gram = gram + 1e-6 * a.shape[0] * np.eye(self.num_bases)
        coeff = np.linalg.solve(gram, rhs).astype(np.float32)
        scales = [np.full(self.out_ch, c, dtype=np.float32) for c in coeff]
        return bases, scales

    def effective_weight_array(self) -> np.ndarray:
        bases, scales = self.basis_signs_and_scales()
        eff = np.zeros_like(self.weight.data)
        for b, s in zip(bases, scales):
            eff += s[:, None, None, None] * b
        return eff

    def invalidate_cache(self):
        self._packed_cache = None

    def _packed(self):
        if self._packed_cache is None:
            bases, scales = self.basis_signs_and_scales()
            self._packed_cache = [
                (bp.pack_conv_weights(b), s) for b, s in zip(bases, scales)
            ]
        return self._packed_cache

    # -- forward paths -------------------------------------------------------

    def forward(self, x, ctx):
        if ctx.grad_mode == "latent":
            return T.conv2d(x, self.weight, self.stride, self.padding)
        if ctx.packed:
            out = None
            signs = np.where(x.data >= 0, 1.0, -1.0).astype(np.float32)
            for pw, scale in self._packed():
                y = bp.binary_conv2d(signs, pw, scale, self.stride, self.padding)
                out = y if out is None else out + y
            return Tensor(out)
        s = bp.sign_tensor(x)
        sp = T.pad2d(s, self.padding, 1.0)
        _, scales = self.basis_signs_and_scales()
        out = None
        for shift, scale in zip(self._shifts(), scales):
            latent = self.weight if self.scheme == "xnor" \
                else T.add_scalar(self.weight, float(np.float32(shift)))
            y = T.conv2d(sp, bp.sign_weights_ste(latent), self.stride, 0)
            y = T.channel_scale(y, Tensor(scale))
            out = y if out is None else T.add(out, y)
        return out

    def param_items(self):
        return [("weight", self.weight)]


def _shift_points(m: int) -> list[float]:
    """First m points of the nested dyadic refinement of [-1, 1].

    0; then -1, 1; then -1/2, 1/2; then odd quarters, and so on. Growing
    m only ever adds basis shifts, so the least-squares spans are nested
    and the reconstruction residual is non-increasing in m. At m = 2^k+1
    the points are exactly the evenly spaced grid over [-1, 1].
    """
    pts = [0.0, -1.0, 1.0]
    level = 2
    while len(pts) < m:
        step = 1.0 / 2 ** (level - 1)
        pts.extend(sorted(
            j * step for j in range(-(2 ** (level - 1)) + 1, 2 ** (level - 1), 2)
        ))
        level += 1
    return pts[:m]


class BatchNorm2d(Layer):
    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def forward(self, x, ctx):
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode=ctx.batchnorm_mode(), epsilon=self.epsilon, momentum=self.momentum,
        )

    def param_items(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def array_items(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        std = float(np.sqrt(1.0 / in_features))
        self.weight = Tensor(
            (rng.standard_normal((out_features, in_features)) * std).astype(np.float32),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def forward(self, x, ctx):
        return T.linear(x, self.weight, self.bias)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ResidualBlock(Layer):
    """conv-bn-act-conv-bn plus a (projected) skip connection."""

    def __init__(self, in_ch, out_ch, stride, rng, binary: Optional[dict] = None):
        conv = _make_conv(binary, rng)
        self.conv1 = conv(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(out_ch)
        self.act1 = Identity() if binary else ReLU()
        self.conv2 = conv(out_ch, out_ch, 3, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            # Projection shortcuts stay full-precision; they are tiny.
            self.sc_conv = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
            self.sc_bn = BatchNorm2d(out_ch)
        else:
            self.sc_conv = None
            self.sc_bn = None
        self.act_out = Identity() if binary else ReLU()

    def forward(self, x, ctx):
        y = self.bn1.forward(self.conv1.forward(x, ctx), ctx)
        y = self.act1.forward(y, ctx)
        y = self.bn2.forward(self.conv2.forward(y, ctx), ctx)
        if self.sc_conv is not None:
            s = self.sc_bn.forward(self.sc_conv.forward(x, ctx), ctx)
        else:
            s = x
        return self.act_out.forward(T.add(y, s), ctx)

    def sublayers(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2),
               ("bn2", self.bn2)]
        if self.sc_conv is not None:
            out += [("sc_conv", self.sc_conv), ("sc_bn", self.sc_bn)]
        return out


def _make_conv(binary: Optional[dict], rng):
    if binary is None:
        return lambda *a, **k: Conv2d(*a, **k, rng=rng)
    return lambda *a, **k: BinarizedConv2d(
        *a, **k, scheme=binary["scheme"], num_bases=binary.get("num_bases", 1), rng=rng
    )


class Model:
    """Ordered layer graph with compression metadata."""

    def __init__(self, arch: str, input_shape: tuple, num_classes: int,
                 layers: list, compression: Optional[dict] = None):
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.layers = layers  # [(name, Layer)]
        self.compression = compression or {"kind": "none"}
        names = [n for n, _ in layers]
        if len(names) < 2 or not isinstance(layers[-2][1], GlobalAvgPool) \
                or not isinstance(layers[-1][1], Linear):
            raise ValueError(
                "model must end with global average pooling then a single linear layer"
            )

    # -- forward -------------------------------------------------------------

    def forward_parts(self, x: Tensor, ctx: Optional[ForwardCtx] = None):
        """(pre-pool feature maps, logits)."""
        ctx = ctx or ForwardCtx()
        features = None
        for _, layer in self.layers:
            if isinstance(layer, GlobalAvgPool):
                features = x
            x = layer.forward(x, ctx)
        return features, x

    def logits(self, x: Tensor, ctx: Optional[ForwardCtx] = None) -> Tensor:
        return self.forward_parts(x, ctx)[1]

    def scores(self, x: np.ndarray, packed: bool = True,
               bn_mode: Optional[str] = None) -> np.ndarray:
        """Class probabilities for raw input, outside any tape."""
        ctx = ForwardCtx(packed=packed, bn_mode=bn_mode)
        z = self.logits(Tensor(np.asarray(x, dtype=np.float32)), ctx).data
        return softmax_np(z)

    def predict(self, x: np.ndarray, packed: bool = True,
                bn_mode: Optional[str] = None) -> np.ndarray:
        return self.scores(x, packed=packed, bn_mode=bn_mode).argmax(axis=1)

    # -- parameter plumbing ----------------------------------------------------

    def _walk(self):
        for name, layer in self.layers:
            yield name, layer
            for sub, child in layer.sublayers():
                yield f"{name}.{sub}", child

    def named_params(self):
        for path, layer in self._walk():
            for pname, t in layer.param_items():
                yield f"{path}.{pname}", t

    def parameters(self):
        return [t for _, t in self.named_params()]

    def named_arrays(self):
        """All persistent tensors: trainable, masks, running statistics."""
        for path, layer in self._walk():
            for pname, t in layer.param_items():
                yield f"{path}.{pname}", t.data
            for aname, arr in layer.array_items():
                yield f"{path}.{aname}", arr

    def conv_layers(self):
        return [(p, l) for p, l in self._walk()
                if isinstance(l, (Conv2d, BinarizedConv2d))]

    def final_linear(self) -> Linear:
        return self.layers[-1][1]

    def apply_masks(self):
        for _, layer in self._walk():
            if isinstance(layer, Conv2d):
                layer.apply_mask()

    def invalidate_caches(self):
        for _, layer in self._walk():
            if isinstance(layer, BinarizedConv2d):
                layer.invalidate_cache()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def clone(self) -> "Model":
        self.zero_grad()
        return copy.deepcopy(self)


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _conv_out_hw(hw, kernel, stride, padding):
    h, w = hw
    return ((h + 2 * padding - kernel) // stride + 1,
            (w + 2 * padding - kernel) // stride + 1)


def conv_spatial_sizes(model: Model) -> dict[str, tuple[int, int]]:
    """Output spatial size of every conv layer on the canonical input."""
    sizes: dict[str, tuple[int, int]] = {}
    hw = model.input_shape[1:]
    for name, layer in model.layers:
        if isinstance(layer, (Conv2d, BinarizedConv2d)):
            hw = _conv_out_hw(hw, layer.kernel, layer.stride, layer.padding)
            sizes[name] = hw
        elif isinstance(layer, MaxPool2d):
            hw = _conv_out_hw(hw, layer.kernel, layer.stride or layer.kernel, 0)
        elif isinstance(layer, ResidualBlock):
            inner = _conv_out_hw(hw, layer.conv1.kernel, layer.conv1.stride,
                                 layer.conv1.padding)
            sizes[f"{name}.conv1"] = inner
            sizes[f"{name}.conv2"] = _conv_out_hw(
                inner, layer.conv2.kernel, layer.conv2.stride, layer.conv2.padding)
            if layer.sc_conv is not None:
                sizes[f"{name}.sc_conv"] = _conv_out_hw(
                    hw, layer.sc_conv.kernel, layer.sc_conv.stride, layer.sc_conv.padding)
            hw = sizes[f"{name}.conv2"]
        elif isinstance(layer, GlobalAvgPool):
            break
    return sizes


# ---------------------------------------------------------------------------
# architecture registry


def build_model(arch: str, num_classes: int = 10, seed: int = 0,
                binary: Optional[dict] = None) -> Model:
    """Instantiate an architecture, optionally in its binary variant.

    ``binary`` is None or {"scheme": "xnor"|"abc", "num_bases": M}. The
    first convolution and the final linear layer always stay full
    precision.
    """
    rng = np.random.default_rng(seed)
    if arch == "cifar_small":
        return _build_cifar_small(num_classes, rng, binary)
    if arch == "mnist_tiny":
        return _build_mnist_tiny(num_classes, rng, binary)
    if arch == "micro":
        return _build_micro(num_classes, rng, binary)
    raise ValueError(f"unknown architecture {arch!r}")


def _build_cifar_small(num_classes, rng, binary):
    layers = [
        ("stem_conv", Conv2d(3, 16, 3, padding=1, rng=rng)),
        ("stem_bn", BatchNorm2d(16)),
    ]
    if not binary:
        layers.append(("stem_act", ReLU()))
    layers += [
        ("block1", ResidualBlock(16, 16, 1, rng, binary)),
        ("block2", ResidualBlock(16, 32, 2, rng, binary)),
        ("block3", ResidualBlock(32, 64, 2, rng, binary)),
    ]
    if binary:
        layers.append(("head_act", ReLU()))
    layers += [
        ("pool", GlobalAvgPool()),
        ("fc", Linear(64, num_classes, rng=rng)),
    ]
    return Model("cifar_small", (3, 32, 32), num_classes, layers)


def _build_mnist_tiny(num_classes, rng, binary):
    conv = _make_conv(binary, rng)
    layers = [
        ("conv1", Conv2d(1, 8, 3, padding=1, rng=rng)),
        ("bn1", BatchNorm2d(8)),
    ]
    if not binary:
        layers.append(("act1", ReLU()))
    layers += [
        ("pool1", MaxPool2d(2)),
        ("conv2", conv(8, 16, 3, padding=1)),
        ("bn2", BatchNorm2d(16)),
        ("act2", ReLU()),
        ("pool2", MaxPool2d(2)),
        ("pool", GlobalAvgPool()),
        ("fc", Linear(16, num_classes, rng=rng)),
    ]
    return Model("mnist_tiny", (1, 28, 28), num_classes, layers)


def _build_micro(num_classes, rng, binary):
    conv = _make_conv(binary, rng)
    layers = [
        ("conv1", Conv2d(1, 4, 3, padding=1, rng=rng)),
        ("bn1", BatchNorm2d(4)),
    ]
    if not binary:
        layers.append(("act1", ReLU()))
    layers += [
        ("conv2", conv(4, 8, 3, stride=2, padding=1)),
        ("bn2", BatchNorm2d(8)),
        ("act2", ReLU()),
        ("pool", GlobalAvgPool()),
        ("fc", Linear(8, num_classes, rng=rng)),
    ]
    return Model("micro", (1, 8, 8), num_classes, layers)


ARCH_INPUT_SHAPES = {
    "cifar_small": (3, 32, 32),
    "mnist_tiny": (1, 28, 28),
    "micro": (1, 8, 8),
}
