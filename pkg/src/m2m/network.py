"""Residual CNNs for demosaicking and denoising, plus checkpoint round-tripping.

The demosaicking network maps packed Bayer phases (B, 4, H/2, W/2) to a full
resolution RGB correction that is added to the bilinear interpolation. The
denoiser is a plain residual stack predicting the noise to subtract. Zeroing
every learned parameter reduces both to their analytic baselines.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeError
from .imaging import BayerFrame, PlanarImage, demosaic_bilinear, pack_phases

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class NetSpec:
    """Architecture description; parameter names and shapes follow from it."""

    kind: str
    body_layers: int
    features: int
    in_channels: int
    out_channels: int
    residual: bool = True
    refine_before_upsample: bool = False

    def __post_init__(self):
        if self.kind not in ("demosaick", "denoise"):
            raise ConfigError(f"unknown net kind {self.kind!r}")
        if self.body_layers < 1 or self.features < 1:
            raise ConfigError("body_layers and features must be >= 1")

    @staticmethod
    def demosaick_default() -> "NetSpec":
        return NetSpec("demosaick", body_layers=14, features=64, in_channels=4, out_channels=3)

    @staticmethod
    def denoise_default() -> "NetSpec":
        return NetSpec("denoise", body_layers=17, features=64, in_channels=1, out_channels=1)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(obj: dict) -> "NetSpec":
        return NetSpec(**obj)


class NetParams:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, spec: NetSpec, params: dict[str, ad.Tensor], bn: dict[str, ad.BNState]):
        self.spec = spec
        self.params = params
        self.bn = bn

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def trainable(self) -> dict[str, ad.Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "NetParams":
        params = {
            name: ad.Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        bn = {name: s.copy() for name, s in self.bn.items()}
        return NetParams(self.spec, params, bn)

    def astype(self, dtype) -> "NetParams":
        params = {
            name: ad.Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        bn = {
            name: ad.BNState(
                s.running_mean.astype(dtype), s.running_var.astype(dtype), s.momentum, s.eps
            )
            for name, s in self.bn.items()
        }
        return NetParams(self.spec, params, bn)

    def zero_weights(self):
        """Zero every learned parameter in place (baselines for residual nets)."""
        for name, p in self.params.items():
            p.data[...] = 0.0


def _conv_layer(params, bn, rng, name, cin, cout, dtype, with_bn=True, zero_init=False):
    if zero_init:
        # The conv producing the residual correction starts at zero so the
        # network begins exactly at its analytic baseline.
        weight = np.zeros((cout, cin, 3, 3), dtype=dtype)
    else:
        bound = np.sqrt(6.0 / (cin * 9))
        weight = rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(dtype)
    params[f"{name}.weight"] = ad.Tensor(weight, requires_grad=True)
    if with_bn:
        # No conv bias: the batch-norm mean subtraction would cancel it.
        params[f"{name}.gamma"] = ad.Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        params[f"{name}.beta"] = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        bn[name] = ad.BNState.create(cout, dtype)
    else:
        params[f"{name}.bias"] = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def _demosaick_layer_plan(spec: NetSpec):
    """(name, cin, cout, with_bn) for each conv of the demosaicking net."""
    plan = []
    cin = spec.in_channels
    for k in range(spec.body_layers):
        plan.append((f"body{k}", cin, spec.features, True))
        cin = spec.features
    if spec.refine_before_upsample:
        plan.append(("refine", spec.features, spec.features, True))
    plan.append(("shrink", spec.features, spec.out_channels * 4, True))
    if not spec.refine_before_upsample:
        plan.append(("refine", spec.out_channels, spec.features, True))
        plan.append(("out", spec.features, spec.out_channels, False))
    else:
        plan.append(("out", spec.out_channels, spec.out_channels, False))
    return plan


def _denoise_layer_plan(spec: NetSpec):
    plan = [("head", spec.in_channels, spec.features, False)]
    for k in range(spec.body_layers - 2):
        plan.append((f"body{k}", spec.features, spec.features, True))
    plan.append(("out", spec.features, spec.out_channels, False))
    return plan


def build_demosaick_net(spec: NetSpec, seed: int = 0, dtype=np.float32) -> NetParams:
    """Parameters for: body convs -> 12-feature conv -> 2x upsample -> refine -> out.

    He-uniform conv weights, zero biases, gamma=1/beta=0, running stats (0, 1).
    """
    if spec.kind != "demosaick":
        raise ConfigError(f"spec kind must be 'demosaick', got {spec.kind!r}")
    rng = np.random.default_rng(seed)
    params: dict[str, ad.Tensor] = {}
    bn: dict[str, ad.BNState] = {}
    for name, cin, cout, with_bn in _demosaick_layer_plan(spec):
        _conv_layer(params, bn, rng, name, cin, cout, dtype, with_bn,
                    zero_init=spec.residual and name == "out")
    return NetParams(spec, params, bn)


def build_denoise_net(spec: NetSpec, seed: int = 0, dtype=np.float32) -> NetParams:
    """Plain residual denoiser: conv+relu, body of conv+BN+relu, final conv.

    The network predicts the noise; the forward pass subtracts it from the input.
    """
    if spec.kind != "denoise":
        raise ConfigError(f"spec kind must be 'denoise', got {spec.kind!r}")
    if spec.body_layers < 2:
        raise ConfigError("denoise nets need body_layers >= 2")
    rng = np.random.default_rng(seed)
    params: dict[str, ad.Tensor] = {}
    bn: dict[str, ad.BNState] = {}
    for name, cin, cout, with_bn in _denoise_layer_plan(spec):
        _conv_layer(params, bn, rng, name, cin, cout, dtype, with_bn,
                    zero_init=spec.residual and name == "out")
    return NetParams(spec, params, bn)


def build_net(spec: NetSpec, seed: int = 0, dtype=np.float32) -> NetParams:
    if spec.kind == "demosaick":
        return build_demosaick_net(spec, seed, dtype)
    return build_denoise_net(spec, seed, dtype)


def count_params(net: NetParams) -> int:
    return sum(p.data.size for p in net.params.values())


def _conv_bn_relu(net: NetParams, name: str, x: ad.Tensor, mode: str) -> ad.Tensor:
    p = net.params
    h = ad.conv3x3(x, p[f"{name}.weight"])
    h = ad.batch_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], net.bn[name], mode)
    return ad.relu(h)


def demosaick_graph(net: NetParams, phases: ad.Tensor, base: ad.Tensor, mode: str) -> ad.Tensor:
    """Differentiable forward pass: (B, 4, H/2, W/2) phases -> (B, 3, H, W) RGB.

    `base` is the bilinear interpolation at full resolution; it is added when
    the spec is residual. The output is not clipped.
    """
    spec = net.spec
    h = phases
    for k in range(spec.body_layers):
        h = _conv_bn_relu(net, f"body{k}", h, mode)
    if spec.refine_before_upsample:
        h = _conv_bn_relu(net, "refine", h, mode)
        h = _conv_bn_relu(net, "shrink", h, mode)
        h = ad.depth_to_space(h, 2)
    else:
        h = _conv_bn_relu(net, "shrink", h, mode)
        h = ad.depth_to_space(h, 2)
        h = _conv_bn_relu(net, "refine", h, mode)
    y = ad.conv3x3(h, net.params["out.weight"], net.params["out.bias"])
    if spec.residual:
        y = ad.add(y, base)
    return y


def denoise_graph(net: NetParams, x: ad.Tensor, mode: str) -> ad.Tensor:
    """Differentiable forward pass of the residual denoiser; not clipped."""
    spec = net.spec
    h = ad.relu(ad.conv3x3(x, net.params["head.weight"], net.params["head.bias"]))
    for k in range(spec.body_layers - 2):
        h = _conv_bn_relu(net, f"body{k}", h, mode)
    noise = ad.conv3x3(h, net.params["out.weight"], net.params["out.bias"])
    if spec.residual:
        return ad.sub(x, noise)
    return noise


def bilinear_base_tensor(frame: BayerFrame, dtype) -> ad.Tensor:
    return ad.Tensor(demosaic_bilinear(frame).data[None].astype(dtype))


def forward_demosaick(net: NetParams, frame: BayerFrame, mode: str = "eval") -> PlanarImage:
    """Demosaic one frame; output clipped to [0, 1] for export and metrics."""
    phases = ad.Tensor(pack_phases(frame).data[None].astype(net.dtype))
    base = bilinear_base_tensor(frame, net.dtype)
    y = demosaick_graph(net, phases, base, mode)
    return PlanarImage(np.clip(y.data[0].astype(np.float64), 0.0, 1.0))


def forward_denoise(net: NetParams, img: PlanarImage, mode: str = "eval") -> PlanarImage:
    """Denoise a 1-channel image; output clipped to [0, 1]."""
    if img.channels != net.spec.in_channels:
        raise ShapeError(f"expected {net.spec.in_channels} channels, got {img.channels}")
    x = ad.Tensor(img.data[None].astype(net.dtype))
    y = denoise_graph(net, x, mode)
    return PlanarImage(np.clip(y.data[0].astype(np.float64), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Checkpoints: little-endian u32 header length, JSON header, float32 blob.
# The header lists (name, shape, offset-in-floats) for every parameter and
# running-statistics buffer, plus the serialized NetSpec.
# ---------------------------------------------------------------------------


def _checkpoint_entries(net: NetParams) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.data) for name, p in net.params.items()]
    for name, state in net.bn.items():
        entries.append((f"{name}.running_mean", state.running_mean))
        entries.append((f"{name}.running_var", state.running_var))
    return entries


def save_checkpoint(net: NetParams, path) -> None:
    """Write a `.m2m` checkpoint; float32 nets round-trip bit-exactly."""
    entries = _checkpoint_entries(net)
    tensors = []
    blobs = []
    offset = 0
    for name, arr in entries:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr32.tobytes())
        offset += arr32.size
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "spec": net.spec.to_dict(), "tensors": tensors}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> NetParams:
    """Read a `.m2m` checkpoint, validating names and shapes against the spec."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"truncated checkpoint {path}")
    header_len = struct.unpack("<I", raw[:4])[0]
    header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {header.get('format')}")
    spec = NetSpec.from_dict(header["spec"])
    blob = np.frombuffer(raw[4 + header_len :], dtype="<f4")
    stored = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stored[entry["name"]] = blob[start : start + size].reshape(shape).copy()

    net = build_net(spec, seed=0, dtype=np.float32)
    expected = dict(_checkpoint_entries(net))
    if set(expected) != set(stored):
        missing = set(expected) ^ set(stored)
        raise DataError(f"checkpoint tensors do not match spec: {sorted(missing)}")
    for name, arr in stored.items():
        if expected[name].shape != arr.shape:
            raise DataError(f"shape mismatch for {name}: {arr.shape} vs {expected[name].shape}")
    for name, p in net.params.items():
        p.data = stored[name]
    for name, state in net.bn.items():
        state.running_mean = stored[f"{name}.running_mean"]
        state.running_var = stored[f"{name}.running_var"]
    return net
