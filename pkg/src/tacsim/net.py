"""Minimal neural-network engine for the force regression task.

Implements exactly the layer vocabulary the model needs - 3x3 same-padding
convolution, batch normalization, ReLU, 2x2 max pooling, fully connected
layers with relu/sigmoid/linear activations, inverted dropout, and a linear
fusion layer over concatenated per-camera features - with hand-written
reverse-mode gradients and the Adam optimizer.

Activations are channels-last: convolutional tensors are (N, H, W, C).
Parameters and activations are float32; float64 is used only by the finite
difference gradient checker. Every camera's image runs through one shared
layer stack (single parameter storage), and the fusion layer maps the
concatenated features to 3 force components per covered bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .geometry import covered_bins as _covered_bins


class Tensor:
    """Parameter container: a row-major float array plus a gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def add_grad(self, g):
        if g.shape != self.data.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, shape).astype(dtype)


def _sigmoid_uniform_init(rng, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    # sigmoid layers need the classic gain-4 scaled uniform init; with the
    # plain 1/sqrt(fan_in) limit, two stacked sigmoid layers attenuate the
    # sample-to-sample feature variance by >1000x and the output layer then
    # needs O(100)-scale weights that Adam takes forever to reach
    limit = 4.0 * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


# ---------------------------------------------------------------------------
# Layers


class Conv2d:
    """3x3 cross-correlation, stride 1, zero same-padding, channels-last.

    Runs as a single GEMM over im2col patch columns, cached for the
    backward pass. `needs_input_grad=False` (first layer of a stack) skips
    the column-to-image scatter, which is the expensive half of backward.
    """

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32,
                 needs_input_grad=True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        if rng is None:
            kernel = np.zeros((3, 3, in_channels, out_channels), dtype=dtype)
        else:
            kernel = _uniform_init(rng, (3, 3, in_channels, out_channels), 9 * in_channels, dtype)
        self.kernel = Tensor(kernel)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype))
        self.frozen = False
        self.needs_input_grad = needs_input_grad
        self._cols = None
        self._shape = None

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValidationError(
                f"conv input {x.shape} does not have {self.in_channels} channels"
            )
        n, h, w, c = x.shape
        xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
        xp[:, 1:-1, 1:-1, :] = x
        cols = np.empty((n * h * w, 9 * c), dtype=x.dtype)
        cols4 = cols.reshape(n, h, w, 9 * c)
        for di in range(3):
            for dj in range(3):
                j = (di * 3 + dj) * c
                cols4[..., j:j + c] = xp[:, di:di + h, dj:dj + w, :]
        self._cols = cols
        self._shape = (n, h, w)
        out = cols @ self.kernel.data.reshape(9 * c, self.out_channels)
        out += self.bias.data.astype(x.dtype)
        return out.reshape(n, h, w, self.out_channels)

    def backward(self, dy):
        n, h, w = self._shape
        c = self.in_channels
        dy2 = dy.reshape(-1, self.out_channels)
        self.kernel.add_grad((self._cols.T @ dy2).reshape(self.kernel.data.shape))
        self.bias.add_grad(dy2.sum(axis=0))
        if not self.needs_input_grad:
            return None
        dcols = dy2 @ self.kernel.data.reshape(9 * c, self.out_channels).T
        dcols4 = dcols.reshape(n, h, w, 9 * c)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=dy.dtype)
        for di in range(3):
            for dj in range(3):
                j = (di * 3 + dj) * c
                dxp[:, di:di + h, dj:dj + w, :] += dcols4[..., j:j + c]
        return dxp[:, 1:-1, 1:-1, :]

    def kink_signature(self):
        return None


class BatchNorm:
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes with the current batch statistics (eps 1e-5),
    applies scale/shift, and updates the running statistics with momentum
    0.9; eval mode normalizes with the running statistics.
    """

    EPS = 1e-5
    MOMENTUM = 0.9

    def __init__(self, channels, dtype=np.float32):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype=dtype))
        self.beta = Tensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.frozen = False
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train=False):
        if x.shape[-1] != self.channels:
            raise ValidationError("channel count mismatch in batch norm")
        axes = tuple(range(x.ndim - 1))
        if train:
            count = int(np.prod([x.shape[a] for a in axes]))
            if count < 2:
                raise ValidationError("batch normalization needs batch size >= 2 in train mode")
            mean = x.mean(axis=axes)
            xc = x - mean
            flat = xc.reshape(-1, self.channels)
            var = np.einsum("nc,nc->c", flat, flat) / count
            inv_std = 1.0 / np.sqrt(var + self.EPS)
            xhat = xc
            xhat *= inv_std.astype(x.dtype)
            self._cache = (xhat, inv_std, count)
            m = self.MOMENTUM
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(
                self.running_mean.dtype
            )
            self.running_var = (m * self.running_var + (1 - m) * var).astype(
                self.running_var.dtype
            )
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.astype(x.dtype) + self.EPS)
            xhat = (x - self.running_mean.astype(x.dtype)) * inv_std
            self._cache = (xhat, inv_std, 0)
        return xhat * self.gamma.data.astype(x.dtype) + self.beta.data.astype(x.dtype)

    def backward(self, dy):
        xhat, inv_std, count = self._cache
        c = self.channels
        dy2 = dy.reshape(-1, c)
        xhat2 = xhat.reshape(-1, c)
        sum_dy = dy2.sum(axis=0)
        sum_dy_xhat = np.einsum("nc,nc->c", dy2, xhat2)
        self.gamma.add_grad(sum_dy_xhat)
        self.beta.add_grad(sum_dy)
        gamma = self.gamma.data.astype(dy.dtype)
        if count == 0:  # eval mode: running stats are constants
            return dy * (gamma * inv_std)
        # dx = inv_std * gamma * (dy - mean(dy) - xhat * mean(dy * xhat))
        out = dy * (gamma * inv_std).astype(dy.dtype)
        out -= xhat * ((gamma * inv_std * sum_dy_xhat / count)).astype(dy.dtype)
        out -= (gamma * inv_std * sum_dy / count).astype(dy.dtype)
        return out

    def kink_signature(self):
        return None


class ReLU:
    def __init__(self):
        self.frozen = False
        self._mask = None

    def params(self):
        return []

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy):
        return np.where(self._mask, dy, dy.dtype.type(0))

    def kink_signature(self):
        return self._mask.tobytes()


class MaxPool2:
    """2x2 non-overlapping max pooling; gradients route to the argmax
    position with a first-index (row-major within the window) tie-break."""

    def __init__(self):
        self.frozen = False
        self._cache = None

    @staticmethod
    def _windows(x):
        return (x[:, 0::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 0::2, :], x[:, 1::2, 1::2, :])

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValidationError("max pooling needs even spatial dimensions")
        w00, w01, w10, w11 = self._windows(x)
        out = np.maximum(np.maximum(w00, w01), np.maximum(w10, w11))
        self._cache = (x, out)
        return out

    def params(self):
        return []

    def backward(self, dy):
        x, out = self._cache
        dx = np.zeros_like(x, dtype=dy.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for win, dwin in zip(self._windows(x), self._windows(dx)):
            hit = (win == out) & ~taken
            dwin[hit] = dy[hit]
            taken |= hit
        return dx

    def kink_signature(self):
        x, out = self._cache
        bits = [(win == out) for win in self._windows(x)]
        return np.packbits(np.stack(bits).view(np.uint8)).tobytes()

    # windows are visited in row-major order, so ties route to the first index


class Flatten:
    def __init__(self):
        self.frozen = False
        self._shape = None

    def params(self):
        return []

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def kink_signature(self):
        return None


class Dense:
    """Affine map plus one of the relu / sigmoid / linear activations."""

    ACTIVATIONS = ("relu", "sigmoid", "linear")

    def __init__(self, in_features, out_features, activation="linear", rng=None, dtype=np.float32):
        if activation not in self.ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        if rng is None:
            weight = np.zeros((in_features, out_features), dtype=dtype)
        elif activation == "sigmoid":
            weight = _sigmoid_uniform_init(
                rng, (in_features, out_features), in_features, out_features, dtype
            )
        else:
            weight = _uniform_init(rng, (in_features, out_features), in_features, dtype)
        self.weight = Tensor(weight)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype))
        self.frozen = False
        self._cache = None

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValidationError(
                f"dense input {x.shape} does not match in_features={self.in_features}"
            )
        z = x @ self.weight.data.astype(x.dtype) + self.bias.data.astype(x.dtype)
        if self.activation == "relu":
            y = np.maximum(z, 0)
        elif self.activation == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-z))
            y = y.astype(x.dtype)
        else:
            y = z
        self._cache = (x, z, y)
        return y

    def backward(self, dy):
        x, z, y = self._cache
        if self.activation == "relu":
            dz = np.where(z > 0, dy, dy.dtype.type(0))
        elif self.activation == "sigmoid":
            dz = dy * y * (1.0 - y)
        else:
            dz = dy
        self.weight.add_grad(x.T @ dz)
        self.bias.add_grad(dz.sum(axis=0))
        return dz @ self.weight.data.astype(dy.dtype).T

    def kink_signature(self):
        if self.activation != "relu":
            return None
        return (self._cache[1] > 0).tobytes()


class Dropout:
    """Inverted dropout: zero with probability `rate`, scale survivors by
    1/(1-rate) in train mode; identity in eval mode. Mask draws come from
    the layer's generator, so a reseed makes the sequence reproducible."""

    def __init__(self, rate=0.1, seed=0):
        if not 0.0 <= rate < 1.0:
            raise ValidationError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.frozen = False
        self._mask = None

    def params(self):
        return []

    def reseed(self, seed):
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(keep, x * scale, x.dtype.type(0))

    def backward(self, dy):
        if self._mask is None:
            return dy
        scale = dy.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(self._mask, dy * scale, dy.dtype.type(0))

    def kink_signature(self):
        return None


# ---------------------------------------------------------------------------
# Scalar layer ops mirrored as plain functions


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """One-shot 3x3 same-padding convolution of an (H, W, C) image."""
    kernel = np.asarray(kernel)
    if kernel.shape[:2] != (3, 3):
        raise ValidationError("kernel spatial size must be 3x3")
    layer = Conv2d(kernel.shape[2], kernel.shape[3], dtype=kernel.dtype)
    layer.kernel.data = np.ascontiguousarray(kernel)
    layer.bias.data = np.ascontiguousarray(bias, dtype=kernel.dtype)
    return layer.forward(np.asarray(x)[None, ...])[0]


def maxpool_half(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling of an (H, W, C) image."""
    return MaxPool2().forward(np.asarray(x)[None, ...])[0]


# ---------------------------------------------------------------------------
# Network model: shared per-camera stack + linear fusion


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor that pins the parameter layout of a model."""

    image_size: int
    camera_ids: tuple
    covered_bins: tuple
    bin_nx: int
    bin_ny: int
    conv_channels: tuple = (2, 4, 8, 16)
    fc1_width: int = 900
    feature_width: int = 128
    dropout_rate: float = 0.1

    @property
    def camera_count(self):
        return len(self.camera_ids)

    @property
    def output_width(self):
        return 3 * len(self.covered_bins)

    @property
    def flat_width(self):
        side = self.image_size >> len(self.conv_channels)
        if side < 1 or self.image_size != side << len(self.conv_channels):
            raise ValidationError(
                f"image size {self.image_size} cannot pass {len(self.conv_channels)} pooling stages"
            )
        return side * side * self.conv_channels[-1]

    def to_json(self) -> dict:
        return {
            "image_size": self.image_size,
            "camera_ids": list(self.camera_ids),
            "covered_bins": list(int(b) for b in self.covered_bins),
            "bin_nx": self.bin_nx,
            "bin_ny": self.bin_ny,
            "conv_channels": list(self.conv_channels),
            "fc1_width": self.fc1_width,
            "feature_width": self.feature_width,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Architecture":
        return cls(
            image_size=int(d["image_size"]),
            camera_ids=tuple(int(c) for c in d["camera_ids"]),
            covered_bins=tuple(int(b) for b in d["covered_bins"]),
            bin_nx=int(d["bin_nx"]),
            bin_ny=int(d["bin_ny"]),
            conv_channels=tuple(int(c) for c in d["conv_channels"]),
            fc1_width=int(d["fc1_width"]),
            feature_width=int(d["feature_width"]),
            dropout_rate=float(d["dropout_rate"]),
        )


MODEL_MAGIC = b"TNM1"
MODEL_VERSION = 1


class NetworkModel:
    """Shared CNN over per-camera difference images plus a linear fusion.

    The trunk (conv blocks, flatten, first FC) and head (dropout, last FC,
    dropout) process every camera's image with one parameter set; per-camera
    feature vectors are concatenated in camera order and mapped by the
    fusion layer to 3 force components per covered bin.
    """

    def __init__(self, arch: Architecture, seed: int = 0, _init: bool = True):
        self.arch = arch
        rng = np.random.Generator(np.random.PCG64(seed)) if _init else None
        self.trunk = []
        in_ch = 1
        for stage, ch in enumerate(arch.conv_channels):
            # the image gradient of the first conv is never consumed
            self.trunk.append(Conv2d(in_ch, ch, rng=rng, needs_input_grad=stage > 0))
            self.trunk.append(BatchNorm(ch))
            self.trunk.append(ReLU())
            self.trunk.append(MaxPool2())
            in_ch = ch
        self.trunk.append(Flatten())
        self.trunk.append(Dense(arch.flat_width, arch.fc1_width, "sigmoid", rng=rng))
        self.head = [
            Dropout(arch.dropout_rate, seed=0),
            Dense(arch.fc1_width, arch.feature_width, "sigmoid", rng=rng),
            Dropout(arch.dropout_rate, seed=1),
        ]
        self.fusion = Dense(
            arch.camera_count * arch.feature_width, arch.output_width, "linear", rng=rng
        )
        self._cam_shape = None

    # -- structure ---------------------------------------------------------

    def named_layers(self):
        names = []
        stage = 1
        for layer in self.trunk:
            if isinstance(layer, Conv2d):
                names.append((f"conv{stage}", layer))
            elif isinstance(layer, BatchNorm):
                names.append((f"bn{stage}", layer))
                stage += 1
            elif isinstance(layer, Dense):
                names.append(("fc1", layer))
        for layer in self.head:
            if isinstance(layer, Dense):
                names.append(("fc2", layer))
        names.append(("fusion", self.fusion))
        return names

    def parameters(self, trainable_only=False):
        out = []
        for lname, layer in self.named_layers():
            if trainable_only and layer.frozen:
                continue
            for pname, tensor in layer.params():
                out.append((f"{lname}.{pname}", tensor))
        return out

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.parameters())

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()

    def frozen_layer_names(self):
        return tuple(name for name, layer in self.named_layers() if layer.frozen)

    def set_frozen(self, names):
        names = set(names)
        for lname, layer in self.named_layers():
            layer.frozen = lname in names

    def reseed_dropout(self, seed: int):
        ss = np.random.SeedSequence(seed)
        children = ss.spawn(len([l for l in self.head if isinstance(l, Dropout)]))
        k = 0
        for layer in self.head:
            if isinstance(layer, Dropout):
                layer.rng = np.random.Generator(np.random.PCG64(children[k]))
                k += 1

    # -- forward / backward -------------------------------------------------

    def _check_frames(self, frames):
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None, ...]
        n, cams, h, w = frames.shape
        if cams != self.arch.camera_count:
            raise ValidationError(
                f"model expects {self.arch.camera_count} cameras, frames have {cams}"
            )
        if (h, w) != (self.arch.image_size, self.arch.image_size):
            raise ValidationError("frame size does not match the architecture")
        return frames

    def features(self, frames, train=False):
        """Per-camera feature block, shape (N, cameras * feature_width)."""
        frames = self._check_frames(frames)
        n, cams, h, w = frames.shape
        x = frames.reshape(n * cams, h, w, 1)
        for layer in self.trunk:
            x = layer.forward(x, train)
        for layer in self.head:
            x = layer.forward(x, train)
        self._cam_shape = (n, cams)
        return x.reshape(n, cams * self.arch.feature_width)

    def forward(self, frames, train=False):
        """Predict the flattened force vector (N, 3 * covered bins).

        Output layout is component-major: all Fx for the covered bins, then
        all Fy, then all Fz.
        """
        return self.fusion.forward(self.features(frames, train), train)

    def backward(self, dout):
        dfeat = self.fusion.backward(dout)
        n, cams = self._cam_shape
        dx = dfeat.reshape(n * cams, self.arch.feature_width)
        for layer in reversed(self.head):
            dx = layer.backward(dx)
        for layer in reversed(self.trunk):
            dx = layer.backward(dx)
        if dx is None:  # first conv skips the unused image gradient
            return None
        return dx.reshape(n, cams, self.arch.image_size, self.arch.image_size)

    # -- serialization -------------------------------------------------------

    def _blocks(self):
        """Ordered (name, array) parameter and state blocks."""
        blocks = []
        for lname, layer in self.named_layers():
            for pname, tensor in layer.params():
                blocks.append((f"{lname}.{pname}", tensor.data))
            if isinstance(layer, BatchNorm):
                for sname, arr in layer.state():
                    blocks.append((f"{lname}.{sname}", arr))
        return blocks

    def save(self, path) -> None:
        blocks = self._blocks()
        desc = {
            "arch": self.arch.to_json(),
            "frozen": list(self.frozen_layer_names()),
            "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        }
        desc_bytes = json.dumps(desc, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(np.array(MODEL_VERSION, dtype="<u4").tobytes())
            fh.write(np.array(len(desc_bytes), dtype="<u4").tobytes())
            fh.write(desc_bytes)
            for _, arr in blocks:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "NetworkModel":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MODEL_MAGIC:
                raise ValidationError(f"bad model magic {magic!r}")
            version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
            if version != MODEL_VERSION:
                raise ValidationError(f"unsupported model version {version}")
            desc_len = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
            desc = json.loads(fh.read(desc_len).decode("utf-8"))
            model = cls(Architecture.from_json(desc["arch"]), _init=False)
            blocks = model._blocks()
            declared = [(b["name"], tuple(b["shape"])) for b in desc["blocks"]]
            actual = [(n, a.shape) for n, a in blocks]
            if declared != actual:
                raise ValidationError("model file block layout does not match architecture")
            for name, arr in blocks:
                raw = fh.read(arr.size * 4)
                if len(raw) != arr.size * 4:
                    raise ValidationError(f"model file truncated in block {name}")
                arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
            model.set_frozen(desc["frozen"])
        return model

    def state_copy(self) -> dict:
        return {name: arr.copy() for name, arr in self._blocks()}

    def load_state(self, state: dict) -> None:
        for name, arr in self._blocks():
            arr[...] = state[name]


def build_model(cfg, camera_ids=None, covered=None, seed: int = 0, **arch_kwargs) -> NetworkModel:
    """Construct a model matching a sensor config.

    `covered` defaults to the bins visible to `camera_ids` (all cameras when
    omitted); the fusion output width is 3 * len(covered).
    """
    if camera_ids is None:
        camera_ids = tuple(range(cfg.camera_count))
    camera_ids = tuple(int(c) for c in camera_ids)
    if covered is None:
        covered = _covered_bins(cfg, camera_ids)
    arch = Architecture(
        image_size=cfg.image_size,
        camera_ids=camera_ids,
        covered_bins=tuple(int(b) for b in covered),
        bin_nx=cfg.bin_nx,
        bin_ny=cfg.bin_ny,
        **arch_kwargs,
    )
    return NetworkModel(arch, seed=seed)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam state for one fixed parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state: AdamState) -> None:
    """One in-place Adam update over `params` (list of Tensors).

    Frozen parameters must already be excluded; the list order must match
    the one the state was first used with.
    """
    tensors = [t if isinstance(t, Tensor) else t[1] for t in params]
    if not state.m:
        state.m = [np.zeros_like(t.data) for t in tensors]
        state.v = [np.zeros_like(t.data) for t in tensors]
    if len(state.m) != len(tensors):
        raise ValidationError("Adam state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for t, m, v in zip(tensors, state.m, state.v):
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient in Adam step")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        t.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(t.data.dtype)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict        # name -> max relative error
    excluded: int          # probes skipped because they crossed a kink
    checked: int

    def __str__(self):
        lines = [
            f"gradient check: max relative error {self.max_rel_error:.3e} "
            f"({self.checked} probes, {self.excluded} excluded)"
        ]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def _cast_layer_params(layers, dtype):
    for layer in layers:
        for _, tensor in layer.params():
            tensor.data = tensor.data.astype(dtype)
        if isinstance(layer, BatchNorm):
            layer.running_mean = layer.running_mean.astype(dtype)
            layer.running_var = layer.running_var.astype(dtype)


def gradient_check(
    layers,
    x: np.ndarray,
    tol: float = 1e-4,
    seed: int = 0,
    train: bool = True,
    max_probes: int = 1500,
    step: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Runs the layer stack in float64 on the scalar loss sum(w * y) with fixed
    random weights w. Probes where the forward pass crosses an activation
    kink between the +h and -h evaluations (ReLU flips, pooling argmax
    changes, both reported by the layers' kink signatures) are excluded from
    the comparison rather than failed.
    """
    layers = list(layers)
    _cast_layer_params(layers, np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_params = sum(t.data.size for l in layers for _, t in l.params())
    if n_params > 10_000:
        raise ValidationError("gradient_check is meant for fragments with <= 1e4 parameters")
    rng = np.random.Generator(np.random.PCG64(seed))

    dropout_layers = [l for l in layers if isinstance(l, Dropout)]

    def run(inp):
        for k, l in enumerate(dropout_layers):
            l.rng = np.random.Generator(np.random.PCG64(seed + 1000 + k))
        y = inp
        for l in layers:
            y = l.forward(y, train)
        return y

    y0 = run(x)
    w = rng.standard_normal(y0.shape)

    def loss_and_sig(inp):
        y = run(inp)
        sig = b"".join(s for l in layers if (s := l.kink_signature()) is not None)
        return float((w * y).sum()), sig

    # analytic gradients
    for l in layers:
        for _, t in l.params():
            t.zero_grad()
    _ = run(x)
    dy = w.copy()
    for l in reversed(layers):
        dy = l.backward(dy)
    dx_analytic = dy

    targets = [("input", None, x, dx_analytic)]
    for i, l in enumerate(layers):
        for pname, t in l.params():
            targets.append((f"layer{i}.{type(l).__name__}.{pname}", t, t.data, t.grad))

    # directions with gradients far below the stack's dominant gradient are
    # noise-dominated in the finite-difference quotient (e.g. a conv bias is
    # exactly cancelled by batch norm), so the comparison floors the
    # denominator at 0.1% of the largest analytic gradient
    gscale = max(
        (float(np.abs(g).max()) for _, _, _, g in targets if g is not None),
        default=0.0,
    )
    floor = max(1e-8, 1e-3 * gscale)

    per_param = {}
    excluded = 0
    checked = 0
    max_rel = 0.0
    for name, _tensor, arr, grad in targets:
        flat = arr.reshape(-1)
        gflat = (grad if grad is not None else np.zeros_like(arr)).reshape(-1)
        n = flat.size
        if n > max_probes:
            pick = rng.choice(n, size=max_probes, replace=False)
        else:
            pick = np.arange(n)
        worst = 0.0
        for j in pick:
            orig = flat[j]
            h = step * max(1.0, abs(orig))
            flat[j] = orig + h
            lp, sig_p = loss_and_sig(x)
            flat[j] = orig - h
            lm, sig_m = loss_and_sig(x)
            flat[j] = orig
            if sig_p != sig_m:
                excluded += 1
                continue
            g_fd = (lp - lm) / (2.0 * h)
            denom = max(abs(g_fd), abs(gflat[j]), floor)
            rel = abs(g_fd - gflat[j]) / denom
            worst = max(worst, rel)
            checked += 1
        per_param[name] = worst
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel, per_param, excluded, checked)
