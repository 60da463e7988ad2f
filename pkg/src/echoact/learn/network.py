"""Residual convolutional encoder, transposed-convolution decoder and classifier head.

Parameters live in a flat ``name -> array`` dict so optimisers, gradient
checks and checkpoints can treat them uniformly.  Batch-norm running
statistics are kept separately in ``state``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import DataError, NumericalError
from ..formats import read_checkpoint, write_checkpoint
from . import layers as L


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 4
    height: int = 295
    width: int = 166
    widths: tuple[int, ...] = (16, 32, 64, 128)
    decoder_widths: tuple[int, ...] = (64, 32, 16)
    hidden: int = 64
    n_classes: int = 8
    dropout: float = 0.2
    leaky_slope: float = L.LEAKY_SLOPE

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.height, self.width
        for _ in self.widths:
            h, w = (h + 1) // 2, (w + 1) // 2
        return (self.widths[-1], h, w)

    def describe(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
        return out

    @classmethod
    def from_description(cls, desc: dict[str, str]) -> "Architecture":
        kw = {}
        for f in fields(cls):
            if f.name not in desc:
                continue
            raw = desc[f.name]
            if "tuple" in str(f.type):
                kw[f.name] = tuple(int(x) for x in raw.split(",") if x)
            elif f.type in ("float", float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


@dataclass
class Network:
    arch: Architecture
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)
    input_scale: float = 1.0
    degenerate: bool = False

    # ------------------------------------------------------------ construction

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        params: dict[str, np.ndarray] = {}
        state: dict[str, np.ndarray] = {}

        def he(shape, fan_in, scale=1.0):
            if zero:
                return np.zeros(shape, dtype)
            return (rng.standard_normal(shape) * scale * math.sqrt(2.0 / fan_in)).astype(dtype)

        def bn(name, c):
            params[name + ".gamma"] = np.ones(c, dtype)
            params[name + ".beta"] = np.zeros(c, dtype)
            state[name + ".mean"] = np.zeros(c, dtype)
            state[name + ".var"] = np.ones(c, dtype)

        cin = arch.in_channels
        for s, cout in enumerate(arch.widths):
            p = f"enc.{s}."
            params[p + "conv1.w"] = he((3, 3, cin, cout), 9 * cin)
            bn(p + "bn1", cout)
            params[p + "conv2.w"] = he((3, 3, cout, cout), 9 * cout)
            bn(p + "bn2", cout)
            params[p + "short.w"] = he((1, 1, cin, cout), cin)
            params[p + "short.b"] = np.zeros(cout, dtype)
            cin = cout

        dec = list(arch.decoder_widths) + [arch.in_channels]
        cin = arch.widths[-1]
        for s, cout in enumerate(dec):
            p = f"dec.{s}."
            last = s == len(dec) - 1
            params[p + "w"] = he((4, 4, cout, cin), 4 * cin, 0.1 if last else 1.0)
            if last:
                params[p + "b"] = np.zeros(cout, dtype)
            else:
                bn(p + "bn", cout)
            cin = cout

        params["head.fc1.w"] = he((arch.widths[-1], arch.hidden), arch.widths[-1])
        params["head.fc1.b"] = np.zeros(arch.hidden, dtype)
        bn("head.bn", arch.hidden)
        params["head.fc2.w"] = he((arch.hidden, arch.n_classes), arch.hidden, 0.5)
        params["head.fc2.b"] = np.zeros(arch.n_classes, dtype)
        return cls(arch, params, state)

    @property
    def dtype(self):
        return self.params["enc.0.conv1.w"].dtype

    def copy(self) -> "Network":
        return Network(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.state.items()},
            self.input_scale,
            self.degenerate,
        )

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.params = {k: v.astype(dtype) for k, v in net.params.items()}
        net.state = {k: v.astype(dtype) for k, v in net.state.items()}
        return net

    def with_head(self, n_classes: int, rng: np.random.Generator) -> "Network":
        """Copy with a freshly initialised classifier head for ``n_classes``."""
        arch = Architecture(**{**asdict(self.arch), "n_classes": n_classes})
        fresh = Network.init(arch, rng, self.dtype)
        net = self.copy()
        net.arch = arch
        for k in list(fresh.params):
            if k.startswith("head."):
                net.params[k] = fresh.params[k]
        for k in list(fresh.state):
            if k.startswith("head."):
                net.state[k] = fresh.state[k]
        return net

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"parameter {k} is not finite")

    # ------------------------------------------------------------ input handling

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """(B, C, H, W) raw flow -> (B, H, W, C) log-compressed network input."""
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        a = self.arch
        if x.shape[1:] != (a.in_channels, a.height, a.width):
            raise DataError(f"expected windows of shape {(a.in_channels, a.height, a.width)}, got {x.shape[1:]}")
        x = np.log1p(np.maximum(x, 0) / self.input_scale, dtype=np.float64)
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)

    # ------------------------------------------------------------ encoder

    def encode(self, x, train: bool):
        """NHWC input -> NHWC feature map and the cache for ``encode_backward``."""
        P, S = self.params, self.state
        caches = []
        h = x
        for s in range(len(self.arch.widths)):
            p = f"enc.{s}."
            a, c1 = L.conv2d_forward(h, P[p + "conv1.w"], None, 2, 1)
            a, c2 = L.batchnorm_forward(a, P[p + "bn1.gamma"], P[p + "bn1.beta"], S[p + "bn1.mean"], S[p + "bn1.var"], train)
            a, c3 = L.leaky_relu_forward(a, self.arch.leaky_slope)
            a, c4 = L.conv2d_forward(a, P[p + "conv2.w"], None, 1, 1)
            a, c5 = L.batchnorm_forward(a, P[p + "bn2.gamma"], P[p + "bn2.beta"], S[p + "bn2.mean"], S[p + "bn2.var"], train)
            sc, c6 = L.conv2d_forward(h, P[p + "short.w"], P[p + "short.b"], 2, 0)
            h, c7 = L.leaky_relu_forward(a + sc, self.arch.leaky_slope)
            caches.append((c1, c2, c3, c4, c5, c6, c7))
        return h, caches

    def encode_backward(self, dh, caches, grads, input_grad: bool = True):
        """Accumulate encoder gradients into ``grads``; returns d(input) or None."""
        for s in reversed(range(len(caches))):
            need_dx = input_grad or s > 0
            p = f"enc.{s}."
            c1, c2, c3, c4, c5, c6, c7 = caches[s]
            dsum = L.leaky_relu_backward(dh, c7)
            dx_sc, grads[p + "short.w"], grads[p + "short.b"] = L.conv2d_backward(dsum, c6, need_dx)
            da, grads[p + "bn2.gamma"], grads[p + "bn2.beta"] = L.batchnorm_backward(dsum, c5)
            da, grads[p + "conv2.w"], _ = L.conv2d_backward(da, c4)
            da = L.leaky_relu_backward(da, c3)
            da, grads[p + "bn1.gamma"], grads[p + "bn1.beta"] = L.batchnorm_backward(da, c2)
            dx, grads[p + "conv1.w"], _ = L.conv2d_backward(da, c1, need_dx)
            dh = dx + dx_sc if need_dx else None
        return dh

    # ------------------------------------------------------------ decoder

    def decode(self, f, train: bool):
        P, S = self.params, self.state
        n = len(self.arch.decoder_widths) + 1
        caches = []
        h = f
        for s in range(n):
            p = f"dec.{s}."
            if s == n - 1:
                h, c = L.conv_transpose2d_forward(h, P[p + "w"], P[p + "b"], 2, 1)
                caches.append((c,))
            else:
                h, c1 = L.conv_transpose2d_forward(h, P[p + "w"], None, 2, 1)
                h, c2 = L.batchnorm_forward(h, P[p + "bn.gamma"], P[p + "bn.beta"], S[p + "bn.mean"], S[p + "bn.var"], train)
                h, c3 = L.leaky_relu_forward(h, self.arch.leaky_slope)
                caches.append((c1, c2, c3))
        full_shape = h.shape
        out = h[:, : self.arch.height, : self.arch.width, :]
        return out, (caches, full_shape)

    def decode_backward(self, dout, cache, grads):
        caches, full_shape = cache
        dh = np.zeros(full_shape, dtype=dout.dtype)
        dh[:, : self.arch.height, : self.arch.width, :] = dout
        n = len(caches)
        for s in reversed(range(n)):
            p = f"dec.{s}."
            if s == n - 1:
                dh, grads[p + "w"], grads[p + "b"] = L.conv_transpose2d_backward(dh, caches[s][0])
            else:
                c1, c2, c3 = caches[s]
                dh = L.leaky_relu_backward(dh, c3)
                dh, grads[p + "bn.gamma"], grads[p + "bn.beta"] = L.batchnorm_backward(dh, c2)
                dh, grads[p + "w"], _ = L.conv_transpose2d_backward(dh, c1)
        return dh

    # ------------------------------------------------------------ classifier head

    def head(self, f, train: bool, rng: np.random.Generator | None = None):
        """Feature map -> logits (pre-softmax)."""
        P, S = self.params, self.state
        g, c0 = L.global_avg_pool_forward(f)
        z, c1 = L.linear_forward(g, P["head.fc1.w"], P["head.fc1.b"])
        z, c2 = L.batchnorm_forward(z, P["head.bn.gamma"], P["head.bn.beta"], S["head.bn.mean"], S["head.bn.var"], train)
        z, c3 = L.leaky_relu_forward(z, self.arch.leaky_slope)
        if train and self.arch.dropout > 0 and rng is None:
            raise ValueError("train-mode dropout needs an rng")
        z, c4 = L.dropout_forward(z, self.arch.dropout, rng, train)
        logits, c5 = L.linear_forward(z, P["head.fc2.w"], P["head.fc2.b"])
        return logits, (c0, c1, c2, c3, c4, c5)

    def head_backward(self, dlogits, cache, grads):
        c0, c1, c2, c3, c4, c5 = cache
        dz, grads["head.fc2.w"], grads["head.fc2.b"] = L.linear_backward(dlogits, c5)
        dz = L.dropout_backward(dz, c4)
        dz = L.leaky_relu_backward(dz, c3)
        dz, grads["head.bn.gamma"], grads["head.bn.beta"] = L.batchnorm_backward(dz, c2)
        dg, grads["head.fc1.w"], grads["head.fc1.b"] = L.linear_backward(dz, c1)
        return L.global_avg_pool_backward(dg, c0)

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        desc = {"format": "echoact-network", **self.arch.describe(),
                "input_scale": repr(float(self.input_scale)), "degenerate": str(self.degenerate)}
        desc.update(extra or {})
        tensors = {**{f"param/{k}": v for k, v in self.params.items()},
                   **{f"state/{k}": v for k, v in self.state.items()}}
        write_checkpoint(path, desc, tensors)

    @classmethod
    def load(cls, path: str | Path) -> tuple["Network", dict[str, str]]:
        desc, tensors = read_checkpoint(path)
        if desc.get("format") != "echoact-network":
            raise DataError(f"{path}: checkpoint is not an echoact network")
        arch = Architecture.from_description(desc)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        state = {k[6:]: v for k, v in tensors.items() if k.startswith("state/")}
        expected = Network.init(arch, np.random.default_rng(0), zero=True)
        for k, v in expected.params.items():
            if k not in params or params[k].shape != v.shape:
                raise DataError(f"{path}: tensor {k} missing or mis-shaped for the declared architecture")
        net = cls(arch, params, state, float(desc.get("input_scale", 1.0)), desc.get("degenerate") == "True")
        return net, desc
