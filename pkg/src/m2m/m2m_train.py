"""Masked warp-compare training: pair objectives, burst simulation, fine-tuning.

The core objective compares the network output for one frame, warped onto a
second frame of the same scene and masked to that frame's CFA samples, against
the second mosaic itself. No RGB ground truth is involved anywhere; clean
images appear only to simulate bursts and score results in tests.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DegenerateLossError, RegistrationError, ShapeError
from .imaging import (
    BayerFrame,
    CfaPattern,
    NoiseSpec,
    PlanarImage,
    add_noise,
    cfa_mask,
    demosaic_bilinear,
    embed_mosaic,
    mosaic,
    pack_phases,
)
from .network import (
    NetParams,
    NetSpec,
    bilinear_base_tensor,
    build_demosaick_net,
    build_denoise_net,
    demosaick_graph,
    denoise_graph,
    forward_demosaick,
    forward_denoise,
)
from .registration import (
    AffineMap,
    RegistrationConfig,
    estimate_affine_bayer,
    overlap_fraction,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 45
    learning_rate: float = 1e-2
    lr_drop_epochs: tuple = (20, 40)
    batch_size: int = 8
    patch_size: int = 64
    loss_p: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(self.lr_drop_epochs))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss_p not in (1, 2):
            raise ValueError("loss_p must be 1 or 2")


@dataclass(frozen=True)
class BurstPair:
    """One ordered training pair: network input, comparison target, their map."""

    input: BayerFrame
    target: BayerFrame
    map: AffineMap
    valid: bool = True


@dataclass(frozen=True)
class PairSchedule:
    """Ordered (input, target) index pairs; the reference input block comes last."""

    pairs: tuple
    reference: int


def build_pair_schedule(n_frames: int, reference: int) -> PairSchedule:
    """All N(N-1) ordered pairs, grouped by input frame in increasing order,
    except that the reference frame's block is moved to the end."""
    if not 0 <= reference < n_frames:
        raise ValueError(f"reference {reference} outside burst of {n_frames}")
    order = [i for i in range(n_frames) if i != reference] + [reference]
    pairs = [(i, j) for i in order for j in range(n_frames) if j != i]
    return PairSchedule(tuple(pairs), reference)


# ---------------------------------------------------------------------------
# Differentiable bicubic warping (Catmull-Rom kernel, a = -0.5).
# ---------------------------------------------------------------------------


def _cubic_weights(t: np.ndarray):
    """Catmull-Rom weights of the 4 taps at offsets -1..2 for fraction t in [0,1)."""
    t2 = t * t
    t3 = t2 * t
    w0 = 0.5 * (-t3 + 2 * t2 - t)
    w1 = 0.5 * (3 * t3 - 5 * t2 + 2)
    w2 = 0.5 * (-3 * t3 + 4 * t2 + t)
    w3 = 0.5 * (t3 - t2)
    return w0, w1, w2, w3


def _warp_geometry(t: AffineMap, height: int, width: int, src_h: int, src_w: int):
    """Tap indices, weights and interior mask for warping onto an out grid."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    sx, sy = t.apply(xs, ys)
    fx = np.floor(sx).astype(np.int64)
    fy = np.floor(sy).astype(np.int64)
    wx = _cubic_weights(sx - fx)
    wy = _cubic_weights(sy - fy)
    # The 4x4 footprint spans columns fx-1..fx+2 and rows fy-1..fy+2.
    inside = (fx - 1 >= 0) & (fx + 2 <= src_w - 1) & (fy - 1 >= 0) & (fy + 2 <= src_h - 1)
    cols = [np.clip(fx + j - 1, 0, src_w - 1) for j in range(4)]
    rows = [np.clip(fy + i - 1, 0, src_h - 1) for i in range(4)]
    return rows, cols, wy, wx, inside.astype(np.float64)


def warp_array_bicubic(
    img: np.ndarray, t: AffineMap, out_shape=None, oob: str = "mask"
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a (C, H, W) array: out(p) = img(t(p)) with bicubic sampling.

    oob='mask' zeroes pixels whose 4x4 footprint leaves the image and reports
    them in the returned mask; oob='clamp' samples with replicated borders and
    returns an all-ones mask.
    """
    if abs(t.det) < 1e-12:
        raise ValueError("cannot warp by a singular map")
    c, src_h, src_w = img.shape
    oh, ow = out_shape if out_shape is not None else (src_h, src_w)
    rows, cols, wy, wx, inside = _warp_geometry(t, oh, ow, src_h, src_w)
    out = np.zeros((c, oh, ow), dtype=img.dtype)
    for i in range(4):
        for j in range(4):
            wgt = wy[i] * wx[j]
            for ch in range(c):
                out[ch] += wgt * img[ch][rows[i], cols[j]]
    if oob == "mask":
        out *= inside
        return out, inside
    return out, np.ones((oh, ow), dtype=np.float64)


def warp_bicubic(x: ad.Tensor, maps) -> tuple[ad.Tensor, np.ndarray]:
    """Differentiable bicubic warp of a (B, C, H, W) tensor.

    `maps` is one AffineMap for the whole batch or a sequence of B maps.
    Returns the warped tensor and a (B, H, W) mask of defined pixels; masked
    out pixels are 0 and receive no gradient. The maps themselves are not
    differentiated.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"warp_bicubic expects (B, C, H, W), got {x.shape}")
    bsz, c, h, w = x.shape
    if isinstance(maps, AffineMap):
        maps = [maps] * bsz
    if len(maps) != bsz:
        raise ShapeError(f"need {bsz} maps, got {len(maps)}")
    geoms = []
    out = np.zeros_like(x.data)
    masks = np.empty((bsz, h, w), dtype=np.float64)
    for bi, t in enumerate(maps):
        if abs(t.det) < 1e-12:
            raise ValueError("cannot warp by a singular map")
        rows, cols, wy, wx, inside = _warp_geometry(t, h, w, h, w)
        geoms.append((rows, cols, wy, wx, inside))
        masks[bi] = inside
        for i in range(4):
            for j in range(4):
                wgt = (wy[i] * wx[j] * inside).astype(x.dtype)
                for ch in range(c):
                    out[bi, ch] += wgt * x.data[bi, ch][rows[i], cols[j]]

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        for bi, (rows, cols, wy, wx, inside) in enumerate(geoms):
            for i in range(4):
                for j in range(4):
                    wgt = wy[i] * wx[j] * inside
                    flat = (rows[i] * w + cols[j]).ravel()
                    for ch in range(c):
                        contrib = (g[bi, ch] * wgt).ravel()
                        gx[bi, ch] += np.bincount(
                            flat, weights=contrib, minlength=h * w
                        ).reshape(h, w).astype(x.dtype)
        x.accumulate(gx)

    return _wrap_node(out, x, backward), masks


def _wrap_node(data, parent, backward):
    out = ad.Tensor(data)
    out.requires_grad = parent.requires_grad
    if out.requires_grad:
        out._parents = (parent,)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# The pair objective.
# ---------------------------------------------------------------------------


def _pair_loss_graph(
    net: NetParams,
    inputs: list[BayerFrame],
    targets: list[BayerFrame],
    maps: list[AffineMap],
    p: int,
    mode: str,
) -> ad.Tensor:
    """Batched warp-compare loss over aligned (input, target) crops."""
    dtype = net.dtype
    phases = np.stack([pack_phases(f).data for f in inputs]).astype(dtype)
    bases = np.stack([demosaic_bilinear(f).data for f in inputs]).astype(dtype)
    pred = demosaick_graph(net, ad.Tensor(phases), ad.Tensor(bases), mode)
    warped, wmask = warp_bicubic(pred, maps)
    target3 = np.stack([embed_mosaic(f) for f in targets]).astype(dtype)
    masks = np.stack(
        [
            cfa_mask(f.pattern, f.height, f.width) * wmask[k][None]
            for k, f in enumerate(targets)
        ]
    ).astype(dtype)
    return ad.masked_loss(warped, ad.Tensor(target3), ad.Tensor(masks), p)


def m2m_loss(net: NetParams, pair: BurstPair, p: int = 1, mode: str = "train") -> ad.Tensor:
    """Masked warp-compare loss of one full pair, differentiable w.r.t. the net.

    The input frame is demosaicked, warped by pair.map onto the target frame,
    masked to the target's CFA and compared against the target mosaic over the
    pixels where both are defined.
    """
    if not pair.valid:
        raise ValueError("pair was flagged invalid")
    return _pair_loss_graph(net, [pair.input], [pair.target], [pair.map], p, mode)


def _crop_map(t: AffineMap, ox: int, oy: int) -> AffineMap:
    """Express t in coordinates of crops taken at offset (ox, oy) on both sides."""
    nx = t.a11 * ox + t.a12 * oy + t.tx - ox
    ny = t.a21 * ox + t.a22 * oy + t.ty - oy
    return AffineMap(t.a11, t.a12, t.a21, t.a22, nx, ny)


def _crop_frame(frame: BayerFrame, ox: int, oy: int, size: int) -> BayerFrame:
    return BayerFrame(frame.data[oy : oy + size, ox : ox + size], frame.pattern)


def _sample_even_offsets(rng, height, width, size, count):
    oys = 2 * rng.integers(0, (height - size) // 2 + 1, size=count)
    oxs = 2 * rng.integers(0, (width - size) // 2 + 1, size=count)
    return list(zip(oxs, oys))


def _pair_patch_step(net, pair: BurstPair, cfg: TrainConfig, rng, state) -> float:
    """One optimizer step on random even-aligned crops of a registered pair."""
    size = min(cfg.patch_size, pair.input.height, pair.input.width)
    size -= size % 2
    offsets = _sample_even_offsets(
        rng, pair.input.height, pair.input.width, size, cfg.batch_size
    )
    inputs = [_crop_frame(pair.input, ox, oy, size) for ox, oy in offsets]
    targets = [_crop_frame(pair.target, ox, oy, size) for ox, oy in offsets]
    maps = [_crop_map(pair.map, ox, oy) for ox, oy in offsets]
    net.zero_grad()
    loss = _pair_loss_graph(net, inputs, targets, maps, cfg.loss_p, "train")
    loss.backward()
    ad.adam_step(net.trainable(), state)
    return float(loss.data)


# ---------------------------------------------------------------------------
# Burst simulation.
# ---------------------------------------------------------------------------


def random_affinity(
    rng, width: int, height: int, max_shift: float, max_rot_deg: float, max_warp: float = 0.02
) -> AffineMap:
    """Small shift + rotation about the image center + slight scale/shear."""
    theta = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    sx = 1.0 + rng.uniform(-max_warp, max_warp)
    sy = 1.0 + rng.uniform(-max_warp, max_warp)
    shear = rng.uniform(-max_warp, max_warp)
    tx = rng.uniform(-max_shift, max_shift)
    ty = rng.uniform(-max_shift, max_shift)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    lin = rot @ np.array([[sx, shear], [0.0, sy]])
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    off = np.array([cx + tx, cy + ty]) - lin @ [cx, cy]
    return AffineMap(lin[0, 0], lin[0, 1], lin[1, 0], lin[1, 1], off[0], off[1])


def true_pair_map(scene_maps: list[AffineMap], i: int, j: int) -> AffineMap:
    """Ground-truth map registering frame i onto frame j from per-frame scene maps."""
    return scene_maps[i].inverse() @ scene_maps[j]


def simulate_burst(
    rgb: PlanarImage,
    n: int,
    max_shift: float,
    max_rot: float,
    noise: NoiseSpec,
    pattern: CfaPattern = CfaPattern.RGGB,
    seed: int = 0,
) -> tuple[list[BayerFrame], list[AffineMap]]:
    """Simulate an n-frame mosaicked burst of one scene.

    Frame 0 is the reference (identity geometry); frames i > 0 view the scene
    through a random affinity (bicubic resampling with replicated borders),
    then every frame is mosaicked and noised independently. Returns the frames
    and the per-frame scene maps A_i with frame_i(p) = scene(A_i(p)), intended
    for test oracles only.
    """
    if n < 2:
        raise ValueError("a burst needs at least 2 frames")
    rng = np.random.default_rng(seed)
    seeds = np.random.SeedSequence(seed).generate_state(n)
    frames = []
    maps = []
    for i in range(n):
        if i == 0:
            view = rgb.data
            amap = AffineMap.identity()
        else:
            amap = random_affinity(rng, rgb.width, rgb.height, max_shift, max_rot)
            view, _ = warp_array_bicubic(rgb.data, amap, oob="clamp")
            view = np.clip(view, 0.0, 1.0)
        frame = mosaic(PlanarImage(view), pattern)
        if noise.sigma > 0:
            frame = add_noise(frame, NoiseSpec(noise.sigma, noise.clip, int(seeds[i])))
        frames.append(frame)
        maps.append(amap)
    return frames, maps


# ---------------------------------------------------------------------------
# Pretraining (with or without RGB supervision).
# ---------------------------------------------------------------------------


def _lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for d in cfg.lr_drop_epochs if epoch >= d)
    return cfg.learning_rate * (0.1**drops)


def _crop_rgb(img: PlanarImage, ox: int, oy: int, size: int) -> np.ndarray:
    return img.data[:, oy : oy + size, ox : ox + size]


def pretrain(
    dataset: list[PlanarImage],
    cfg: TrainConfig,
    mode: str = "m2m",
    spec: NetSpec | None = None,
    val_image: PlanarImage | None = None,
    pattern: CfaPattern = CfaPattern.RGGB,
    noise: NoiseSpec | None = None,
    max_shift: float = 2.0,
    max_rot: float = 1.0,
) -> tuple[NetParams, list[float]]:
    """Train a demosaicking net from scratch on random patches of a dataset.

    mode='gt' supervises the demosaicked patch with its RGB source; mode='m2m'
    simulates a second view per batch (one random affinity shared by the whole
    batch, per-crop offsets) and trains on the warp-compare objective alone.
    One epoch draws len(dataset) batches. Returns the net and the per-epoch
    PSNR on the validation image (dataset[0] when not supplied).
    """
    from .evalcli import psnr  # local import to avoid a module cycle

    if not dataset:
        raise ValueError("dataset is empty")
    if mode not in ("gt", "m2m"):
        raise ValueError(f"mode must be 'gt' or 'm2m', got {mode!r}")
    if spec is None:
        spec = NetSpec.demosaick_default()
    net = build_demosaick_net(spec, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng(cfg.seed + 0x9E3779B9)
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    if val_image is None:
        val_image = dataset[0]
    val_mosaic = mosaic(val_image, pattern)
    if noise is not None and noise.sigma > 0:
        val_mosaic = add_noise(val_mosaic, NoiseSpec(noise.sigma, noise.clip, noise.seed))

    def noisy(frame: BayerFrame) -> BayerFrame:
        if noise is None or noise.sigma == 0:
            return frame
        return add_noise(frame, NoiseSpec(noise.sigma, noise.clip, int(noise_rng.integers(2**62))))

    psnr_log = []
    steps_per_epoch = len(dataset)
    for epoch in range(cfg.epochs):
        state.learning_rate = _lr_at_epoch(cfg, epoch)
        for _ in range(steps_per_epoch):
            img = dataset[rng.integers(len(dataset))]
            size = min(cfg.patch_size, img.height, img.width)
            size -= size % 2
            offsets = _sample_even_offsets(rng, img.height, img.width, size, cfg.batch_size)
            if mode == "gt":
                crops = [_crop_rgb(img, ox, oy, size) for ox, oy in offsets]
                inputs = [noisy(mosaic(PlanarImage(c), pattern)) for c in crops]
                phases = np.stack([pack_phases(f).data for f in inputs]).astype(net.dtype)
                bases = np.stack([demosaic_bilinear(f).data for f in inputs]).astype(net.dtype)
                net.zero_grad()
                pred = demosaick_graph(net, ad.Tensor(phases), ad.Tensor(bases), "train")
                target = ad.Tensor(np.stack(crops).astype(net.dtype))
                ones = ad.Tensor(np.ones_like(target.data))
                loss = ad.masked_loss(pred, target, ones, cfg.loss_p)
                loss.backward()
                ad.adam_step(net.trainable(), state)
            else:
                amap = random_affinity(rng, img.width, img.height, max_shift, max_rot)
                view2, _ = warp_array_bicubic(img.data, amap, oob="clamp")
                view2 = PlanarImage(np.clip(view2, 0.0, 1.0))
                inputs, targets, maps = [], [], []
                for ox, oy in offsets:
                    inputs.append(noisy(mosaic(PlanarImage(_crop_rgb(img, ox, oy, size)), pattern)))
                    targets.append(noisy(mosaic(PlanarImage(_crop_rgb(view2, ox, oy, size)), pattern)))
                    maps.append(_crop_map(amap, ox, oy))
                net.zero_grad()
                loss = _pair_loss_graph(net, inputs, targets, maps, cfg.loss_p, "train")
                loss.backward()
                ad.adam_step(net.trainable(), state)
        restored = forward_demosaick(net, val_mosaic, "eval")
        psnr_log.append(psnr(restored, val_image, border_crop=6))
    return net, psnr_log


# ---------------------------------------------------------------------------
# Fine-tuning to one burst.
# ---------------------------------------------------------------------------


def register_burst_pairs(
    burst: list[BayerFrame], reg_cfg: RegistrationConfig
) -> dict[tuple[int, int], AffineMap]:
    """Estimate maps for all ordered pairs; unusable pairs are dropped with a log."""
    import warnings as _warnings

    maps: dict[tuple[int, int], AffineMap] = {}
    n = len(burst)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            try:
                with _warnings.catch_warnings():
                    _warnings.simplefilter("ignore")
                    t = estimate_affine_bayer(burst[i], burst[j], reg_cfg)
            except RegistrationError as exc:
                log.warning("dropping pair (%d, %d): %s", i, j, exc)
                continue
            if overlap_fraction(t, burst[j].width, burst[j].height) < reg_cfg.min_overlap:
                log.warning("dropping pair (%d, %d): insufficient overlap", i, j)
                continue
            maps[(i, j)] = t
    return maps


def finetune_burst(
    net: NetParams,
    burst: list[BayerFrame],
    reference: int,
    cfg: TrainConfig,
    steps_per_pair: int = 20,
    reg_cfg: RegistrationConfig = RegistrationConfig(),
    clean: PlanarImage | None = None,
    pair_maps: dict | None = None,
) -> tuple[NetParams, list[dict]]:
    """Adapt a pretrained demosaicking net to one burst.

    Registers every ordered pair from the raw frames (unless precomputed maps
    are supplied), walks the pair schedule with the reference input block
    last, and runs `steps_per_pair` patch-based optimizer steps per pair. The
    input net is left untouched; a trained copy is returned together with a
    trace holding, after each pair, the PSNR of the restored reference frame
    against `clean` when given (simulation only).
    """
    from .evalcli import psnr  # local import to avoid a module cycle

    if len(burst) < 2:
        raise ValueError("a burst needs at least 2 frames")
    if pair_maps is None:
        pair_maps = register_burst_pairs(burst, reg_cfg)
    schedule = build_pair_schedule(len(burst), reference)
    usable = [(i, j) for i, j in schedule.pairs if (i, j) in pair_maps]
    if not usable:
        raise RegistrationError("no usable pairs in the burst")

    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    trace = []
    for pair_index, (i, j) in enumerate(usable):
        pair = BurstPair(burst[i], burst[j], pair_maps[(i, j)])
        for _ in range(steps_per_pair):
            _pair_patch_step(net, pair, cfg, rng, state)
        row = {"pair_index": pair_index, "input_idx": i, "target_idx": j}
        if clean is not None:
            restored = forward_demosaick(net, burst[reference], "eval")
            row["psnr_db"] = psnr(restored, clean, border_crop=6)
        trace.append(row)
    return net, trace


def finetune_frames(
    net: NetParams,
    frames: list[PlanarImage],
    reference: int,
    cfg: TrainConfig,
    steps_per_pair: int = 10,
    clean: PlanarImage | None = None,
) -> tuple[NetParams, list[dict]]:
    """Noise2noise fine-tuning of a denoiser on a pre-aligned (static) burst.

    Same pair schedule as the mosaicked path but with identity geometry and no
    CFA mask: the denoised input frame is compared to the target frame
    directly under the configured norm.
    """
    from .evalcli import psnr  # local import to avoid a module cycle

    if len(frames) < 2:
        raise ValueError("a burst needs at least 2 frames")
    schedule = build_pair_schedule(len(frames), reference)
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    h, w = frames[0].height, frames[0].width
    trace = []
    for pair_index, (i, j) in enumerate(schedule.pairs):
        for _ in range(steps_per_pair):
            size = min(cfg.patch_size, h, w)
            oys = rng.integers(0, h - size + 1, size=cfg.batch_size)
            oxs = rng.integers(0, w - size + 1, size=cfg.batch_size)
            xb = np.stack(
                [frames[i].data[:, oy : oy + size, ox : ox + size] for ox, oy in zip(oxs, oys)]
            ).astype(net.dtype)
            tb = np.stack(
                [frames[j].data[:, oy : oy + size, ox : ox + size] for ox, oy in zip(oxs, oys)]
            ).astype(net.dtype)
            net.zero_grad()
            pred = denoise_graph(net, ad.Tensor(xb), "train")
            loss = ad.masked_loss(
                pred, ad.Tensor(tb), ad.Tensor(np.ones_like(tb)), cfg.loss_p
            )
            loss.backward()
            ad.adam_step(net.trainable(), state)
        row = {"pair_index": pair_index, "input_idx": i, "target_idx": j}
        if clean is not None:
            restored = forward_denoise(net, frames[reference], "eval")
            row["psnr_db"] = psnr(restored, clean, border_crop=6)
        trace.append(row)
    return net, trace


def pretrain_denoiser(
    dataset: list[PlanarImage],
    cfg: TrainConfig,
    sigma_range: tuple[float, float] = (5.0, 30.0),
    spec: NetSpec | None = None,
    val_image: PlanarImage | None = None,
) -> tuple[NetParams, list[float]]:
    """Supervised Gaussian-denoiser training used to seed the fine-tuning runs.

    Each patch gets a noise level drawn uniformly from sigma_range, so the net
    stays useful across the noise strengths the temporal baselines produce.
    """
    from .evalcli import psnr  # local import to avoid a module cycle

    if not dataset:
        raise ValueError("dataset is empty")
    if spec is None:
        spec = NetSpec.denoise_default()
    net = build_denoise_net(spec, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    psnr_log = []
    val_sigma = 0.5 * (sigma_range[0] + sigma_range[1])
    if val_image is not None:
        val_noisy = add_noise(val_image, NoiseSpec(val_sigma, clip=True, seed=cfg.seed))
    for epoch in range(cfg.epochs):
        state.learning_rate = _lr_at_epoch(cfg, epoch)
        for _ in range(len(dataset)):
            img = dataset[rng.integers(len(dataset))]
            size = min(cfg.patch_size, img.height, img.width)
            oys = rng.integers(0, img.height - size + 1, size=cfg.batch_size)
            oxs = rng.integers(0, img.width - size + 1, size=cfg.batch_size)
            clean = np.stack(
                [img.data[:, oy : oy + size, ox : ox + size] for ox, oy in zip(oxs, oys)]
            )
            sigma = rng.uniform(*sigma_range)
            noisy = np.clip(clean + rng.normal(0.0, sigma / 255.0, size=clean.shape), 0.0, 1.0)
            net.zero_grad()
            pred = denoise_graph(net, ad.Tensor(noisy.astype(net.dtype)), "train")
            loss = ad.masked_loss(
                pred,
                ad.Tensor(clean.astype(net.dtype)),
                ad.Tensor(np.ones(clean.shape, dtype=net.dtype)),
                2,
            )
            loss.backward()
            ad.adam_step(net.trainable(), state)
        if val_image is not None:
            psnr_log.append(psnr(forward_denoise(net, val_noisy, "eval"), val_image, 6))
    return net, psnr_log


def tnr_baselines(
    burst: list[PlanarImage], denoiser: NetParams, clean: PlanarImage
) -> dict[str, float]:
    """Temporal-noise-reduction reference points on a pre-aligned grayscale burst.

    Returns the PSNR against `clean` of the raw first frame, the denoised
    first frame, the plain temporal mean, and the denoised temporal mean.
    """
    from .evalcli import psnr  # local import to avoid a module cycle

    mean_img = PlanarImage(np.mean([f.data for f in burst], axis=0))
    return {
        "noisy": psnr(burst[0], clean),
        "denoised_single": psnr(forward_denoise(denoiser, burst[0], "eval"), clean),
        "mean": psnr(mean_img, clean),
        "denoised_mean": psnr(forward_denoise(denoiser, mean_img, "eval"), clean),
    }
