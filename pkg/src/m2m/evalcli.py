"""Metrics, experiment configuration, drivers and the command-line interface.

Every run is driven by a JSON config plus a seed and writes all artifacts,
including the fully resolved config, under the chosen output directory.
Metric traces are CSV with fixed formatting so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError, ShapeError
from .imaging import (
    BayerFrame,
    CfaPattern,
    NoiseSpec,
    PlanarImage,
    add_noise,
    demosaic_bilinear,
    load_bayer,
    load_image,
    mosaic,
    save_bayer,
    save_image,
)
from .m2m_train import (
    TrainConfig,
    finetune_burst,
    finetune_frames,
    pretrain,
    pretrain_denoiser,
    simulate_burst,
    warp_bicubic,
)
from .network import (
    NetSpec,
    build_demosaick_net,
    forward_demosaick,
    forward_denoise,
    load_checkpoint,
    save_checkpoint,
)
from .registration import AffineMap, RegistrationConfig


# ---------------------------------------------------------------------------
# Metrics.
# ---------------------------------------------------------------------------


def psnr(a: PlanarImage, b: PlanarImage, border_crop: int = 0) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1]-clipped samples.

    Cropping removes border_crop pixels on every side before the comparison.
    Identical images return the +inf sentinel.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"psnr shapes differ: {a.data.shape} vs {b.data.shape}")
    if border_crop < 0:
        raise ValueError("border_crop must be >= 0")
    av = np.clip(a.data, 0.0, 1.0)
    bv = np.clip(b.data, 0.0, 1.0)
    if border_crop:
        c = border_crop
        av = av[:, c:-c, c:-c]
        bv = bv[:, c:-c, c:-c]
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalReport:
    """Per-image PSNRs plus run metadata; mean is over the per-image entries."""

    per_image: list
    mean_psnr: float
    config_hash: str
    seed: int
    revision: str
    wall_time_s: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Synthetic test content.
# ---------------------------------------------------------------------------


def make_test_images(kind: str, size: int, seed: int = 0) -> PlanarImage:
    """Grayscale probe images: a period-4 vertical grating or Bernoulli noise."""
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if kind == "stripes":
        col = (np.arange(size) % 4 < 2).astype(np.float64)
        return PlanarImage(np.tile(col, (size, 1))[None])
    if kind == "binary_noise":
        rng = np.random.default_rng(seed)
        return PlanarImage((rng.random((size, size)) < 0.5).astype(np.float64)[None])
    raise ValueError(f"unknown test image kind {kind!r}")


def make_natural_image(height: int, width: int, seed: int = 0, blur: float = 0.7) -> PlanarImage:
    """Photograph-like synthetic RGB content: multi-scale texture, smooth
    shading and flat-colored shapes.

    `blur` models the optical PSF; the default keeps content band-limited the
    way real photographs are. Small values leave crisp chroma edges that are
    deliberately hard on naive demosaicking.
    """
    rng = np.random.default_rng(seed)
    lum = np.zeros((height, width))
    for scale, amp in ((2, 0.06), (4, 0.10), (8, 0.16), (16, 0.24), (32, 0.36)):
        small = rng.standard_normal((max(2, height // scale), max(2, width // scale)))
        lum += amp * cv2.resize(small, (width, height), interpolation=cv2.INTER_CUBIC)
    img = np.stack([lum, lum, lum])
    for c in range(3):
        small = rng.standard_normal((max(2, height // 12), max(2, width // 12)))
        img[c] += 0.18 * cv2.resize(small, (width, height), interpolation=cv2.INTER_CUBIC)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img += 0.3 * (xs / width - 0.5) * rng.uniform(-1, 1)
    for _ in range(8):
        color = rng.uniform(-1.2, 1.2, size=3)
        if rng.integers(2):
            cx, cy = rng.uniform(0, width), rng.uniform(0, height)
            r = rng.uniform(0.05, 0.2) * min(height, width)
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 < r * r
        else:
            x0, y0 = rng.uniform(0, width * 0.8), rng.uniform(0, height * 0.8)
            mask = (xs >= x0) & (xs < x0 + width * 0.25) & (ys >= y0) & (ys < y0 + height * 0.25)
        img[:, mask] = 0.25 * img[:, mask] + 0.75 * color[:, None]
    if blur > 0:
        img = np.stack([gaussian_filter(c, blur, mode="nearest") for c in img])
    lo, hi = np.percentile(img, 1.0), np.percentile(img, 99.0)
    img = 0.04 + 0.92 * np.clip((img - lo) / max(hi - lo, 1e-9), 0.0, 1.0)
    return PlanarImage(img)


def synthetic_dataset(
    count: int, height: int, width: int, seed: int = 0, blur: float = 0.7
) -> list[PlanarImage]:
    return [make_natural_image(height, width, seed + i, blur) for i in range(count)]


def to_grayscale(img: PlanarImage) -> PlanarImage:
    return PlanarImage(img.data.mean(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# Gradient-check suite.
# ---------------------------------------------------------------------------


def run_gradcheck_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error of every differentiable op plus the fully
    composed pair loss on a 16x16 crop, all at 64-bit precision."""
    from .m2m_train import _pair_loss_graph, random_affinity

    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def t(shape, lo=-1.0, hi=1.0):
        return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    x = t((2, 3, 8, 8))
    w = t((4, 3, 3, 3))
    b = t((4,))
    tgt = ad.Tensor(rng.uniform(-1, 1, size=(2, 4, 8, 8)))
    ones = ad.Tensor(np.ones((2, 4, 8, 8)))
    results["conv3x3"] = ad.grad_check(
        lambda ts: ad.masked_loss(ad.conv3x3(ts[0], ts[1], ts[2]), tgt, ones, 2), [x, w, b]
    )

    xb = t((2, 3, 5, 5))
    gamma = t((3,), 0.5, 1.5)
    beta = t((3,), -0.5, 0.5)
    bn_tgt = ad.Tensor(rng.uniform(-1, 1, size=(2, 3, 5, 5)))
    bn_ones = ad.Tensor(np.ones((2, 3, 5, 5)))
    for mode in ("train", "eval"):
        state = ad.BNState.create(3, np.float64)
        state.running_mean = rng.uniform(-0.3, 0.3, size=3)
        state.running_var = rng.uniform(0.5, 1.5, size=3)
        results[f"batch_norm_{mode}"] = ad.grad_check(
            lambda ts, m=mode, s=state: ad.masked_loss(
                ad.batch_norm(ts[0], ts[1], ts[2], s, m), bn_tgt, bn_ones, 2
            ),
            [xb, gamma, beta],
        )

    # Keep ReLU inputs away from the kink so central differences are valid.
    xr_data = rng.uniform(0.2, 1.0, size=(2, 2, 6, 6)) * rng.choice([-1.0, 1.0], size=(2, 2, 6, 6))
    xr = ad.Tensor(xr_data, requires_grad=True)
    results["relu"] = ad.grad_check(lambda ts: ad.tensor_sum(ad.relu(ts[0])), [xr])

    xa, ya = t((2, 3, 4, 4)), t((2, 3, 4, 4))
    wa = ad.Tensor(rng.uniform(-1, 1, size=(2, 3, 4, 4)))
    results["add"] = ad.grad_check(
        lambda ts: ad.masked_loss(ad.add(ts[0], ts[1]), wa, ad.Tensor(np.ones((2, 3, 4, 4))), 2),
        [xa, ya],
    )
    results["sub"] = ad.grad_check(
        lambda ts: ad.masked_loss(ad.sub(ts[0], ts[1]), wa, ad.Tensor(np.ones((2, 3, 4, 4))), 2),
        [xa, ya],
    )

    xd = t((1, 12, 4, 4))
    d2s_tgt = ad.Tensor(rng.uniform(-1, 1, size=(1, 3, 8, 8)))
    results["depth_to_space"] = ad.grad_check(
        lambda ts: ad.masked_loss(
            ad.depth_to_space(ts[0], 2), d2s_tgt, ad.Tensor(np.ones((1, 3, 8, 8))), 2
        ),
        [xd],
    )

    # L1 needs |pred - target| bounded away from 0 at every coordinate.
    pred = t((2, 2, 5, 5))
    gap = 0.1 + rng.uniform(0, 0.4, size=(2, 2, 5, 5))
    target = ad.Tensor(pred.data - gap * rng.choice([-1.0, 1.0], size=gap.shape))
    mask = ad.Tensor((rng.random((2, 2, 5, 5)) < 0.7).astype(np.float64))
    results["masked_loss_p1"] = ad.grad_check(
        lambda ts: ad.masked_loss(ts[0], target, mask, 1), [pred]
    )
    results["masked_loss_p2"] = ad.grad_check(
        lambda ts: ad.masked_loss(ts[0], target, mask, 2), [pred]
    )

    xw = t((1, 3, 10, 10))
    wmap = random_affinity(rng, 10, 10, max_shift=1.0, max_rot_deg=2.0)
    results["warp_bicubic"] = ad.grad_check(
        lambda ts: ad.tensor_sum(warp_bicubic(ts[0], wmap)[0]), [xw]
    )

    # Fully composed pair objective on a 16x16 crop of a tiny float64 net.
    from .m2m_train import BurstPair

    spec = NetSpec("demosaick", body_layers=2, features=6, in_channels=4, out_channels=3)
    net = build_demosaick_net(spec, seed=seed).astype(np.float64)
    scene = make_natural_image(16, 16, seed)
    amap = random_affinity(rng, 16, 16, max_shift=0.7, max_rot_deg=0.5)
    from .m2m_train import warp_array_bicubic

    view2, _ = warp_array_bicubic(scene.data, amap, oob="clamp")
    pair = BurstPair(mosaic(scene), mosaic(PlanarImage(np.clip(view2, 0, 1))), amap)

    def composed(_params):
        return _pair_loss_graph(net, [pair.input], [pair.target], [pair.map], 2, "train")

    results["composed_pair_loss"] = ad.grad_check(composed, list(net.params.values()))
    return results


GRADCHECK_THRESHOLDS = {"composed_pair_loss": 1e-3}
GRADCHECK_DEFAULT_THRESHOLD = 1e-4


# ---------------------------------------------------------------------------
# Experiment configuration.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BurstConfig:
    frames: int = 10
    max_shift: float = 5.0
    max_rot: float = 3.0
    pattern: str = "RGGB"
    reference: int = 0
    steps_per_pair: int = 20

    def __post_init__(self):
        if self.pattern not in {p.value for p in CfaPattern}:
            raise ConfigError(f"unknown CFA pattern {self.pattern!r}")

    @property
    def cfa(self) -> CfaPattern:
        return CfaPattern(self.pattern)


@dataclass(frozen=True)
class DataConfig:
    images: str | None = None
    source_image: str | None = None
    burst_dir: str | None = None
    checkpoint: str | None = None
    clean: str | None = None
    bayer_image: str | None = None
    synthetic_count: int = 5
    synthetic_height: int = 96
    synthetic_width: int = 128


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    pretrain_mode: str = "m2m"
    train: TrainConfig = field(default_factory=TrainConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.0))
    net: NetSpec = field(default_factory=NetSpec.demosaick_default)
    burst: BurstConfig = field(default_factory=BurstConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "train": TrainConfig,
    "registration": RegistrationConfig,
    "noise": NoiseSpec,
    "net": NetSpec,
    "burst": BurstConfig,
    "data": DataConfig,
}


def _build_section(cls, obj: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"unknown config key {path}.{key}")
    try:
        return cls(**obj)
    except (TypeError, ValueError, ConfigError) as exc:
        raise ConfigError(f"invalid section {path}: {exc}") from exc


def config_from_dict(obj: dict) -> ExperimentConfig:
    """Build a validated config; unknown keys are rejected with their path."""
    top = {"seed", "pretrain_mode"} | set(_SECTIONS)
    for key in obj:
        if key not in top:
            raise ConfigError(f"unknown config key {key}")
    kwargs = {}
    if "seed" in obj:
        if not isinstance(obj["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = obj["seed"]
    if "pretrain_mode" in obj:
        if obj["pretrain_mode"] not in ("gt", "m2m"):
            raise ConfigError(f"pretrain_mode must be 'gt' or 'm2m', got {obj['pretrain_mode']!r}")
        kwargs["pretrain_mode"] = obj["pretrain_mode"]
    for name, cls in _SECTIONS.items():
        if name in obj:
            if not isinstance(obj[name], dict):
                raise ConfigError(f"section {name} must be an object")
            kwargs[name] = _build_section(cls, obj[name], name)
    return ExperimentConfig(**kwargs)


def _apply_override(tree: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    key, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a non-object")
    node[parts[-1]] = value


def load_config(path=None, seed=None, overrides=()) -> ExperimentConfig:
    """Read a JSON config file, apply overrides and the seed flag, validate."""
    tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            tree = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError("config root must be a JSON object")
    for spec in overrides:
        _apply_override(tree, spec)
    if seed is not None:
        tree["seed"] = seed
        tree.setdefault("train", {})["seed"] = seed
        tree.setdefault("noise", {})["seed"] = seed
    return config_from_dict(tree)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def revision_string() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def worker_count() -> int:
    env = os.environ.get("M2M_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# Shared artifact helpers.
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def save_burst_dir(
    out: Path,
    frames: list[BayerFrame],
    reference: int,
    sigma: float,
    true_maps: list[AffineMap] | None = None,
    clean: PlanarImage | None = None,
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for idx, frame in enumerate(frames):
        save_bayer(out / f"frame_{idx:03d}.png", frame, sigma=sigma)
    meta = {
        "reference": reference,
        "frames": len(frames),
        "pattern": frames[0].pattern.value,
        "sigma": sigma,
    }
    if true_maps is not None:
        meta["true_maps"] = [m.to_json() for m in true_maps]
    (out / "burst.json").write_text(json.dumps(meta, indent=2))
    if clean is not None:
        save_image(out / "clean.png", clean, bit_depth=16)


def load_burst_dir(path) -> tuple[list[BayerFrame], int, list[AffineMap] | None, PlanarImage | None]:
    path = Path(path)
    meta_path = path / "burst.json"
    if not meta_path.exists():
        raise DataError(f"{path} has no burst.json")
    meta = json.loads(meta_path.read_text())
    frames = []
    for idx in range(meta["frames"]):
        frame, _ = load_bayer(path / f"frame_{idx:03d}.png")
        frames.append(frame)
    true_maps = None
    if "true_maps" in meta:
        true_maps = [AffineMap.from_json(m) for m in meta["true_maps"]]
    clean = None
    if (path / "clean.png").exists():
        clean = load_image(path / "clean.png")
    return frames, int(meta["reference"]), true_maps, clean


def _load_dataset(cfg: ExperimentConfig) -> list[PlanarImage]:
    d = cfg.data
    if d.images is None or d.images == "synthetic":
        return synthetic_dataset(d.synthetic_count, d.synthetic_height, d.synthetic_width, cfg.seed)
    root = Path(d.images)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    paths = sorted(root.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images under {root}")
    return [load_image(p) for p in paths]


def _load_source_image(cfg: ExperimentConfig) -> PlanarImage:
    d = cfg.data
    if d.source_image is None or d.source_image == "synthetic":
        return make_natural_image(d.synthetic_height, d.synthetic_width, cfg.seed + 7000)
    p = Path(d.source_image)
    if not p.exists():
        raise DataError(f"source image {p} does not exist")
    return load_image(p)


# ---------------------------------------------------------------------------
# Experiment drivers.
# ---------------------------------------------------------------------------


def _drive_simulate(cfg: ExperimentConfig, out: Path) -> list:
    scene = _load_source_image(cfg)
    frames, maps = simulate_burst(
        scene,
        cfg.burst.frames,
        cfg.burst.max_shift,
        cfg.burst.max_rot,
        cfg.noise,
        cfg.burst.cfa,
        seed=cfg.seed,
    )
    save_burst_dir(out / "burst", frames, cfg.burst.reference, cfg.noise.sigma, maps, scene)
    rows = [[f"frame_{i:03d}", psnr(demosaic_bilinear(f), scene)] for i, f in enumerate(frames)]
    write_csv(out / "bilinear_psnr.csv", ["frame", "psnr_db"], rows)
    return rows


def _drive_pretrain(cfg: ExperimentConfig, out: Path) -> list:
    dataset = _load_dataset(cfg)
    val = dataset[-1]
    noise = cfg.noise if cfg.noise.sigma > 0 else None
    net, log_psnr = pretrain(
        dataset,
        cfg.train,
        mode=cfg.pretrain_mode,
        spec=cfg.net,
        val_image=val,
        pattern=cfg.burst.cfa,
        noise=noise,
    )
    save_checkpoint(net, out / "pretrained.m2m")
    rows = [[e, v] for e, v in enumerate(log_psnr)]
    write_csv(out / "psnr_log.csv", ["epoch", "psnr_db"], rows)
    return [[f"epoch_{e}", v] for e, v in enumerate(log_psnr)]


def _drive_finetune(cfg: ExperimentConfig, out: Path) -> list:
    if cfg.data.checkpoint is None:
        raise ConfigError("finetune requires data.checkpoint")
    if cfg.data.burst_dir is None:
        raise ConfigError("finetune requires data.burst_dir")
    net = load_checkpoint(cfg.data.checkpoint)
    frames, reference, _, clean = load_burst_dir(cfg.data.burst_dir)
    if cfg.data.clean is not None:
        clean = load_image(cfg.data.clean)
    tuned, trace = finetune_burst(
        net,
        frames,
        reference,
        cfg.train,
        steps_per_pair=cfg.burst.steps_per_pair,
        reg_cfg=cfg.registration,
        clean=clean,
    )
    save_checkpoint(tuned, out / "finetuned.m2m")
    rows = [
        [r["pair_index"], r["input_idx"], r["target_idx"], r.get("psnr_db", math.nan)]
        for r in trace
    ]
    write_csv(out / "trace.csv", ["pair_index", "input_idx", "target_idx", "psnr_db"], rows)
    restored = forward_demosaick(tuned, frames[reference], "eval")
    save_image(out / "restored.png", restored, bit_depth=16)
    if clean is not None:
        return [["reference_after", trace[-1]["psnr_db"]]]
    return []


def _drive_eval(cfg: ExperimentConfig, out: Path) -> list:
    if cfg.data.checkpoint is None:
        raise ConfigError("eval requires data.checkpoint")
    net = load_checkpoint(cfg.data.checkpoint)
    dataset = _load_dataset(cfg)

    def score(item):
        idx, img = item
        frame = mosaic(img, cfg.burst.cfa)
        if cfg.noise.sigma > 0:
            frame = add_noise(frame, NoiseSpec(cfg.noise.sigma, cfg.noise.clip, cfg.noise.seed + idx))
        restored = forward_demosaick(net, frame, "eval")
        return [f"image_{idx:03d}", psnr(restored, img, border_crop=6)]

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(score, enumerate(dataset)))
    write_csv(out / "eval.csv", ["image", "psnr_db"], rows)
    return rows


def _drive_demosaic(cfg: ExperimentConfig, out: Path) -> list:
    if cfg.data.checkpoint is None:
        raise ConfigError("demosaic requires data.checkpoint")
    if cfg.data.bayer_image is None:
        raise ConfigError("demosaic requires data.bayer_image")
    net = load_checkpoint(cfg.data.checkpoint)
    frame, _ = load_bayer(cfg.data.bayer_image)
    restored = forward_demosaick(net, frame, "eval")
    save_image(out / "demosaicked.png", restored, bit_depth=16)
    return []


def _drive_gradcheck(cfg: ExperimentConfig, out: Path) -> list:
    results = run_gradcheck_suite(cfg.seed)
    rows = []
    failures = []
    for name, err in results.items():
        thr = GRADCHECK_THRESHOLDS.get(name, GRADCHECK_DEFAULT_THRESHOLD)
        status = "pass" if err < thr else "FAIL"
        rows.append([name, err, thr, status])
        if err >= thr:
            failures.append(name)
    write_csv(out / "gradcheck.csv", ["check", "max_rel_error", "threshold", "status"], rows)
    if failures:
        raise NumericError(f"gradient checks failed: {', '.join(failures)}")
    return [[name, err] for name, err, _, _ in rows]


def _drive_stripes(cfg: ExperimentConfig, out: Path) -> list:
    """Fine-tuning gain comparison between self-similar and incompressible content."""
    size = max(64, cfg.data.synthetic_height)
    sigma = cfg.noise.sigma if cfg.noise.sigma > 0 else 25.0
    if cfg.data.checkpoint is not None:
        denoiser = load_checkpoint(cfg.data.checkpoint)
    else:
        gray = [to_grayscale(img) for img in synthetic_dataset(4, size, size, cfg.seed + 300)]
        den_cfg = TrainConfig(
            epochs=60, learning_rate=1e-3, lr_drop_epochs=(40,), batch_size=8,
            patch_size=40, loss_p=2, seed=cfg.seed,
        )
        spec = NetSpec("denoise", body_layers=7, features=32, in_channels=1, out_channels=1)
        denoiser, _ = pretrain_denoiser(gray, den_cfg, sigma_range=(5.0, 30.0), spec=spec)
    rows = []
    for kind in ("stripes", "binary_noise"):
        clean = make_test_images(kind, size, cfg.seed)
        frames = [
            add_noise(clean, NoiseSpec(sigma, clip=True, seed=cfg.seed + 50 * k))
            for k in range(cfg.burst.frames)
        ]
        before = psnr(forward_denoise(denoiser, frames[0], "eval"), clean, border_crop=6)
        ft_cfg = TrainConfig(
            epochs=1, learning_rate=1e-4, lr_drop_epochs=(), batch_size=cfg.train.batch_size,
            patch_size=min(cfg.train.patch_size, size), loss_p=1, seed=cfg.seed,
        )
        tuned, _ = finetune_frames(
            denoiser, frames, 0, ft_cfg, steps_per_pair=cfg.burst.steps_per_pair
        )
        after = psnr(forward_denoise(tuned, frames[0], "eval"), clean, border_crop=6)
        rows.append([kind, before, after, after - before])
    write_csv(out / "stripes.csv", ["image", "psnr_before", "psnr_after", "gain_db"], rows)
    return [[r[0], r[3]] for r in rows]


_DRIVERS = {
    "simulate": _drive_simulate,
    "pretrain": _drive_pretrain,
    "finetune": _drive_finetune,
    "demosaic": _drive_demosaic,
    "eval": _drive_eval,
    "gradcheck": _drive_gradcheck,
    "stripes": _drive_stripes,
}


def run_experiment(cfg: ExperimentConfig, kind: str, out_dir) -> EvalReport:
    """Execute one named pipeline deterministically and write its artifacts."""
    if kind not in _DRIVERS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    start = time.perf_counter()
    entries = _DRIVERS[kind](cfg, out)
    elapsed = time.perf_counter() - start
    values = [v for _, v in entries if isinstance(v, float) and not math.isnan(v)]
    mean = float(np.mean(values)) if values else math.nan
    report = EvalReport(
        per_image=[list(e) for e in entries],
        mean_psnr=mean,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        revision=revision_string(),
        wall_time_s=elapsed,
    )
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="m2m",
        description="Self-supervised demosaicking/denoising: simulate bursts, "
        "train, fine-tune and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _DRIVERS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seeds")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="dotted-path config override, value parsed as JSON",
        )
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.override)
        report = run_experiment(cfg, args.command, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    if not math.isnan(report.mean_psnr):
        print(f"{args.command}: mean metric {report.mean_psnr:.3f} (hash {report.config_hash})")
    else:
        print(f"{args.command}: done (hash {report.config_hash})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
