"""The fusion network: convolutional beat-image encoder (inverted
residual blocks with squeeze-excitation gating), a gated demographic
encoder with raw pass-through, and a dense meta-classifier over the
concatenated features.

The image branch is a compact stand-in for a full-scale backbone: one
3x3 stem plus a configurable stack of expansion-6 blocks, global average
pooled. Topology lives in :class:`ModelSpec` so larger stacks are a
config change, not a code change.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .errors import DegenerateBatch, NonFiniteValue, ShapeMismatch


@dataclass(frozen=True)
class ModelSpec:
    raster_h: int = 224
    raster_w: int = 224
    n_classes: int = 10
    stem_channels: int = 8
    block_widths: tuple[int, ...] = (16, 24, 32)
    block_strides: tuple[int, ...] = (1, 2, 2)
    expansion: int = 6
    se_ratio: int = 4
    sepce_width: int = 16
    sepce_se_ratio: int = 4
    mcnet_hidden: tuple[int, ...] = (64, 32)
    patient_dim: int = 4
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float64"  # float32 allowed for training speed

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def feature_width(self) -> int:
        return self.block_widths[-1]

    @property
    def fused_width(self) -> int:
        return self.feature_width + self.sepce_width + self.patient_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("block_widths", "block_strides", "mcnet_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("block_widths", "block_strides", "mcnet_hidden"):
            d[key] = tuple(d[key])
        return cls(**d)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardization over (batch, spatial) positions.

    Train mode standardizes with the batch moments (biased variance) and
    folds them into the running statistics in place; infer mode uses the
    stored statistics only.
    """
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        bshape = (1, -1)
    else:
        raise ShapeMismatch(f"batchnorm expects 2-d or 4-d input, got {x.data.shape}")
    c = gamma.data.shape[0]
    if x.data.shape[1] != c:
        raise ShapeMismatch(f"batchnorm channels {c} vs input {x.data.shape}")

    if train:
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
        if count < 2:
            raise DegenerateBatch("train-mode batchnorm needs >= 2 values per channel")
        out, mu, var = ad.batchnorm_train(x, gamma, beta, axes, eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        return out
    inv = ad.constant((1.0 / np.sqrt(running_var + eps)).reshape(bshape))
    xhat = ad.mul(ad.shift(x, -running_mean.reshape(bshape)), inv)
    return ad.add(ad.mul(xhat, ad.reshape(gamma, bshape)), ad.reshape(beta, bshape))


def se_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze (global average per channel), excite (two dense layers to
    a sigmoid gate), scale the input channelwise."""
    single = x.data.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.data.shape)
    squeezed = ad.mean(x, (2, 3))
    e = ad.sigmoid(ad.dense(ad.relu(ad.dense(squeezed, w1, b1)), w2, b2))
    gate = ad.reshape(e, e.data.shape + (1, 1))
    out = ad.mul(x, gate)
    if single:
        out = ad.reshape(out, out.data.shape[1:])
    return out


def se_hidden_width(channels: int, ratio: int) -> int:
    return max(1, -(-channels // ratio))


class MultiModalNet:
    """Parameter container plus the forward pass."""

    def __init__(self, spec: ModelSpec, params: dict[str, Param], buffers: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.buffers = buffers

    # -- construction --

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> "MultiModalNet":
        rng = np.random.default_rng(seed)
        dt = spec.np_dtype
        p: dict[str, Param] = {}
        buf: dict[str, np.ndarray] = {}

        def bn(name: str, c: int):
            p[f"{name}.gamma"] = Param(np.ones(c, dtype=dt))
            p[f"{name}.beta"] = Param(np.zeros(c, dtype=dt))
            buf[f"{name}.mean"] = np.zeros(c, dtype=dt)
            buf[f"{name}.var"] = np.ones(c, dtype=dt)

        def dense_pair(name: str, m: int, n: int):
            p[f"{name}.w"] = Param(_uniform(rng, (m, n), n).astype(dt))
            p[f"{name}.b"] = Param(np.zeros(m, dtype=dt))

        p["stem.conv.w"] = Param(_uniform(rng, (spec.stem_channels, 1, 3, 3), 9).astype(dt))
        bn("stem.bn", spec.stem_channels)

        c_in = spec.stem_channels
        for i, (width, _) in enumerate(zip(spec.block_widths, spec.block_strides)):
            ce = spec.expansion * c_in
            name = f"block{i}"
            p[f"{name}.expand.w"] = Param(_uniform(rng, (ce, c_in, 1, 1), c_in).astype(dt))
            bn(f"{name}.bn1", ce)
            p[f"{name}.dw.w"] = Param(_uniform(rng, (ce, 3, 3), 9).astype(dt))
            bn(f"{name}.bn2", ce)
            hidden = se_hidden_width(ce, spec.se_ratio)
            dense_pair(f"{name}.se.fc1", hidden, ce)
            dense_pair(f"{name}.se.fc2", ce, hidden)
            p[f"{name}.project.w"] = Param(_uniform(rng, (width, ce, 1, 1), ce).astype(dt))
            bn(f"{name}.bn3", width)
            c_in = width

        d = spec.sepce_width
        dense_pair("sepce.fc", d, spec.patient_dim)
        sh = se_hidden_width(d, spec.sepce_se_ratio)
        dense_pair("sepce.se.fc1", sh, d)
        dense_pair("sepce.se.fc2", d, sh)

        widths = [spec.fused_width, *spec.mcnet_hidden]
        for j in range(len(spec.mcnet_hidden)):
            dense_pair(f"mcnet.fc{j}", widths[j + 1], widths[j])
        dense_pair("mcnet.out", spec.n_classes, widths[-1])

        return cls(spec, p, buf)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def param_items(self) -> list[tuple[str, Param]]:
        return list(self.params.items())

    def clone_arrays(self) -> dict[str, np.ndarray]:
        """Snapshot of parameter values (used by tests and transfer)."""
        return {k: v.data.copy() for k, v in self.params.items()}

    # -- forward pieces --

    def _bn(self, name: str, x: Tensor, train: bool) -> Tensor:
        return batchnorm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.mean"],
            self.buffers[f"{name}.var"],
            train,
            self.spec.bn_momentum,
            self.spec.bn_eps,
        )

    def mbconv6(self, x: Tensor, index: int, train: bool) -> Tensor:
        """Expand 1x1 -> depthwise 3x3 -> SE gate -> project 1x1, with a
        residual skip when the shapes line up."""
        name = f"block{index}"
        stride = self.spec.block_strides[index]
        h = ad.conv2d(x, self.params[f"{name}.expand.w"], 1, "same")
        h = ad.relu(self._bn(f"{name}.bn1", h, train))
        h = ad.depthwise_conv(h, self.params[f"{name}.dw.w"], stride, "same")
        h = ad.relu(self._bn(f"{name}.bn2", h, train))
        h = se_block(
            h,
            self.params[f"{name}.se.fc1.w"],
            self.params[f"{name}.se.fc1.b"],
            self.params[f"{name}.se.fc2.w"],
            self.params[f"{name}.se.fc2.b"],
        )
        h = ad.conv2d(h, self.params[f"{name}.project.w"], 1, "same")
        h = self._bn(f"{name}.bn3", h, train)
        if stride == 1 and h.data.shape == x.data.shape:
            h = ad.add(h, x)
        return h

    def hbfe(self, x1: Tensor, train: bool) -> Tensor:
        """Image branch: stem conv, block stack, global average pool."""
        h = ad.conv2d(x1, self.params["stem.conv.w"], 1, "same")
        h = ad.relu(self._bn("stem.bn", h, train))
        for i in range(len(self.spec.block_widths)):
            h = self.mbconv6(h, i, train)
        return ad.mean(h, (2, 3))

    def sepce(self, x2: Tensor) -> Tensor:
        """Demographic branch: expand, SE-gate, concatenate raw input
        ahead of the gated features."""
        f = ad.relu(ad.dense(x2, self.params["sepce.fc.w"], self.params["sepce.fc.b"]))
        e = ad.sigmoid(
            ad.dense(
                ad.relu(ad.dense(f, self.params["sepce.se.fc1.w"], self.params["sepce.se.fc1.b"])),
                self.params["sepce.se.fc2.w"],
                self.params["sepce.se.fc2.b"],
            )
        )
        return ad.concat([x2, ad.mul(f, e)], axis=1)

    def mcnet(self, fused: Tensor) -> Tensor:
        h = fused
        for j in range(len(self.spec.mcnet_hidden)):
            h = ad.relu(ad.dense(h, self.params[f"mcnet.fc{j}.w"], self.params[f"mcnet.fc{j}.b"]))
        return ad.dense(h, self.params["mcnet.out.w"], self.params["mcnet.out.b"])

    def forward(self, x1, x2, train: bool = False) -> Tensor:
        """Full pass: logits (B, n_classes) from rasters (B, 1, H, W)
        and demographic vectors (B, patient_dim). Inputs are cast to the
        model precision."""
        dt = self.spec.np_dtype
        if not isinstance(x1, Tensor):
            x1 = ad.constant(np.asarray(x1).astype(dt, copy=False))
        if not isinstance(x2, Tensor):
            x2 = ad.constant(np.asarray(x2).astype(dt, copy=False))
        single = x1.data.ndim == 3
        if single:
            x1 = ad.reshape(x1, (1,) + x1.data.shape)
            x2 = ad.reshape(x2, (1,) + x2.data.shape)
        if x1.data.shape[1:] != (1, self.spec.raster_h, self.spec.raster_w):
            raise ShapeMismatch(
                f"raster shape {x1.data.shape[1:]} vs model stem "
                f"(1, {self.spec.raster_h}, {self.spec.raster_w})"
            )
        if x2.data.shape[1] != self.spec.patient_dim:
            raise ShapeMismatch(f"patient vector width {x2.data.shape[1]}")
        fused = ad.concat([self.hbfe(x1, train), self.sepce(x2)], axis=1)
        logits = self.mcnet(fused)
        if not np.all(np.isfinite(logits.data)):
            raise NonFiniteValue("non-finite logits")
        if single:
            logits = ad.reshape(logits, logits.data.shape[1:])
        return logits

    def predict_proba(self, x1: np.ndarray, x2: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode class probabilities, batched, tape-free."""
        outs = []
        with ad.no_grad():
            for i in range(0, x1.shape[0], batch_size):
                logits = self.forward(x1[i : i + batch_size], x2[i : i + batch_size], train=False)
                outs.append(ad.softmax(logits.data))
        return np.concatenate(outs, axis=0)

    def with_head(self, n_classes: int, seed: int) -> "MultiModalNet":
        """Copy of the model with a freshly initialized output layer of
        the given width; all other tensors are shared copies."""
        spec = replace(self.spec, n_classes=n_classes)
        rng = np.random.default_rng(seed)
        params = {k: Param(v.data.copy()) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        fan_in = self.params["mcnet.out.w"].data.shape[1]
        dt = self.spec.np_dtype
        params["mcnet.out.w"] = Param(_uniform(rng, (n_classes, fan_in), fan_in).astype(dt))
        params["mcnet.out.b"] = Param(np.zeros(n_classes, dtype=dt))
        return MultiModalNet(spec, params, buffers)


def forward_full(x1, x2, model: MultiModalNet, train: bool = False) -> Tensor:
    return model.forward(x1, x2, train)
