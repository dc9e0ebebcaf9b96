"""Adam optimization, the training/evaluation loops, and checkpoint I/O.

Training follows the published recipe by default: 1000 epochs, base learning
rate 5e-4 divided by 10 after epochs 600 and 800, 64x64 random crops, negative
SSIM objective. All randomness derives from one seed; each epoch re-derives
its stream from (seed, epoch), so resuming from a checkpoint replays exactly.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import data as D
from . import losses as L
from .network import build_jdnet, jdnet_forward, JDNetParams
from .tensor import NumericsError, Tensor, clear_tape, no_grad

__all__ = [
    "TrainConfig",
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "lr_at",
    "adam_step",
    "train",
    "TrainResult",
    "evaluate",
    "EvalReport",
    "derain_image",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"JDN1"
CHECKPOINT_VERSION = 1

LOSSES = ("neg_ssim", "mae", "mse")

# published full-scale reference numbers quoted in evaluation footers
REFERENCE_FOOTER = (
    "reference (full-scale JDNet, Rain100H): PSNR 30.02 / SSIM 0.92; "
    "module ablations R1 0.9130/29.3357, R2 0.9219/30.0307, R3 0.9221/30.0160"
)


class CheckpointError(RuntimeError):
    """Raised on malformed, truncated or version-mismatched checkpoint files."""


@dataclass
class TrainConfig:
    epochs: int = 1000
    base_lr: float = 5e-4
    milestones: tuple = (600, 800)
    lr_factor: float = 0.1
    crop: int = 64
    units: int = 32
    channels: int = 32
    scales: int = 4
    pool_r: int = 4
    footprint: int = 7
    red: int = 4
    share: int = 1
    batch_size: int = 8
    ablation: str = "R3"
    loss: str = "neg_ssim"
    seed: int = 0
    attention_normalize: str = "softmax"
    synth_images: int = 8
    synth_size: int = 64
    checkpoint_every: int = 25

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must increase strictly: {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ValueError(
                f"milestones {self.milestones} must lie before the last epoch {self.epochs}"
            )
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.ablation not in ("R1", "R2", "R3"):
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def build_network(self, rng=None, dtype=np.float32) -> JDNetParams:
        return build_jdnet(
            channels=self.channels,
            units=self.units,
            scales=self.scales,
            pool_r=self.pool_r,
            footprint=self.footprint,
            red=self.red,
            share=self.share,
            ablation=self.ablation,
            attention_normalize=self.attention_normalize,
            rng=rng,
            dtype=dtype,
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant rate: base through the first milestone epoch, then
    one factor-of-10 cut after each milestone (epoch 601 is the first reduced
    epoch for milestone 600)."""
    if not (1 <= epoch <= cfg.epochs):
        raise ValueError(f"epoch {epoch} outside the schedule 1..{cfg.epochs}")
    drops = sum(1 for m in cfg.milestones if epoch > m)
    return cfg.base_lr * (cfg.lr_factor**drops)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. A missing gradient counts as
    zero; any non-finite gradient aborts before touching parameters."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    params: dict  # name -> ndarray (trainable parameters and buffers)
    adam: dict  # name -> ndarray ("m.<param>", "v.<param>", plus "t")
    epoch: int
    seed: int
    config: dict

    @classmethod
    def capture(cls, net: JDNetParams, state: AdamState, epoch: int, cfg: TrainConfig) -> "Checkpoint":
        params = {k: t.data.copy() for k, t in net.named_params()}
        params.update({k: b.copy() for k, b in net.named_buffers()})
        adam = {f"m.{k}": a.copy() for k, a in state.m.items()}
        adam.update({f"v.{k}": a.copy() for k, a in state.v.items()})
        adam["t"] = np.array([float(state.t)], dtype=np.float32)
        return cls(
            version=CHECKPOINT_VERSION,
            params=params,
            adam=adam,
            epoch=epoch,
            seed=cfg.seed,
            config=asdict(cfg),
        )

    def restore_network(self, dtype=np.float32) -> tuple:
        """Rebuild the network and optimizer state this checkpoint captured."""
        cfg = config_from_dict(self.config)
        net = cfg.build_network(rng=np.random.default_rng(0), dtype=dtype)
        named = dict(net.named_params())
        buffers = dict(net.named_buffers())
        expected = set(named) | set(buffers)
        got = set(self.params)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise CheckpointError(f"parameter set mismatch (missing {missing}, extra {extra})")
        for k, t in named.items():
            arr = self.params[k]
            if arr.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(dtype, copy=True)
        for k, buf in buffers.items():
            buf[...] = self.params[k]
        state = AdamState.for_params(named)
        for k in named:
            if f"m.{k}" in self.adam:
                state.m[k] = self.adam[f"m.{k}"].astype(dtype, copy=True)
                state.v[k] = self.adam[f"v.{k}"].astype(dtype, copy=True)
        state.t = int(self.adam.get("t", np.zeros(1))[0])
        return net, state


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "milestones" in d:
        d["milestones"] = tuple(d["milestones"])
    return TrainConfig(**d)


def _write_record(out, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    out.write(struct.pack("<H", len(nb)))
    out.write(nb)
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    out.write(struct.pack("<B", arr32.ndim))
    for d in arr32.shape:
        out.write(struct.pack("<I", d))
    out.write(arr32.tobytes())


class _Reader:
    """Byte cursor that reports the failing offset on truncation."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        b = self.blob[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_record(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    (rank,) = r.unpack("<B")
    dims = [r.unpack("<I")[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    return name, arr.copy()


def save_checkpoint(path, ckpt: Checkpoint):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name in ckpt.params:  # insertion order is the canonical order
        _write_record(buf, name, ckpt.params[name])
    buf.write(struct.pack("<I", len(ckpt.adam)))
    for name in ckpt.adam:
        _write_record(buf, name, ckpt.adam[name])
    buf.write(struct.pack("<I", ckpt.epoch))
    buf.write(struct.pack("<Q", ckpt.seed))
    cfg_blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0 (not a checkpoint file)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_params,) = r.unpack("<I")
    params = dict(_read_record(r) for _ in range(n_params))
    (n_adam,) = r.unpack("<I")
    adam = dict(_read_record(r) for _ in range(n_adam))
    (epoch,) = r.unpack("<I")
    (seed,) = r.unpack("<Q")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(
        version=version, params=params, adam=adam, epoch=epoch, seed=seed, config=config
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    halted: str | None = None  # reason when training stopped early


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 1_000_003 + epoch)))


def _loss_fn(name: str):
    return {
        "neg_ssim": L.neg_ssim_loss,
        "mae": L.mae_loss,
        "mse": L.mse_loss,
    }[name]


def _held_sample(pairs, cfg: TrainConfig):
    """Fixed evaluation crops (top-left corner) from the first few pairs."""
    take = pairs[: min(len(pairs), cfg.batch_size)]
    size = cfg.crop
    crops = [
        D.ImagePair(p.rainy[:size, :size], p.clean[:size, :size], p.id) for p in take
    ]
    return D.to_tensor(crops)


def _metrics_on(net, cfg, o, b):
    with no_grad():
        b_hat, _ = jdnet_forward(o, net, training=False)
        pred = np.clip(b_hat.data, 0.0, 1.0)
        # equal-size crops: the batched index equals the mean per-image SSIM
        ssim_v = L.ssim(Tensor(pred), Tensor(b.data)).item()
    psnr_v = float(np.mean([L.psnr(pred[k], b.data[k]) for k in range(pred.shape[0])]))
    return ssim_v, psnr_v


def train(
    cfg: TrainConfig,
    manifest: D.DatasetManifest | None = None,
    synth: D.RainSynthConfig | None = None,
    out_dir=None,
    resume_from=None,
    max_steps: int | None = None,
    stop_when=None,
    log=None,
) -> TrainResult:
    """Optimize the network on a paired dataset or a synthetic stand-in.

    Emits one JSON metrics line per epoch (epoch, loss, ssim, psnr, lr) via
    `log` and to <out_dir>/metrics.jsonl, checkpoints every cfg.checkpoint_every
    epochs plus a final checkpoint.json-free binary at <out_dir>/final.ckpt.
    A non-finite loss halts training with the last good checkpoint retained.
    `stop_when(entry) -> bool` may end the run early (overfit experiments).
    """
    if (manifest is None) == (synth is None):
        raise ValueError("provide exactly one data source: manifest or synth config")
    if manifest is not None:
        pairs = [D.load_pair(e) for e in manifest.pairs]
    else:
        pairs = D.make_synthetic_dataset(synth, count=cfg.synth_images, size=cfg.synth_size)
    for p in pairs:
        if p.rainy.shape[0] < cfg.crop or p.rainy.shape[1] < cfg.crop:
            raise D.DataError(f"pair {p.id!r} smaller than crop size {cfg.crop}")

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        net, state = ckpt.restore_network()
        start_epoch = ckpt.epoch + 1
    else:
        net = cfg.build_network(rng=np.random.default_rng(np.random.SeedSequence((cfg.seed, 7))))
        state = AdamState.for_params(dict(net.named_params()))
        start_epoch = 1

    params = dict(net.named_params())
    loss_fn = _loss_fn(cfg.loss)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_dir / "metrics.jsonl").open("w" if start_epoch == 1 else "a")

    held_o, held_b = _held_sample(pairs, cfg)
    metrics = []
    last_ckpt = Checkpoint.capture(net, state, start_epoch - 1, cfg)
    halted = None
    steps = 0

    def emit(entry):
        metrics.append(entry)
        line = json.dumps(entry)
        if metrics_file is not None:
            metrics_file.write(line + "\n")
            metrics_file.flush()
        if log is not None:
            log(line)

    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            rng = _epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(pairs))
            lr = lr_at(epoch, cfg)
            epoch_losses = []
            for lo in range(0, len(order), cfg.batch_size):
                batch_ids = order[lo : lo + cfg.batch_size]
                crops = [D.random_crop(pairs[i], cfg.crop, rng) for i in batch_ids]
                o, b = D.to_tensor(crops)
                b_hat, _ = jdnet_forward(o, net, training=True)
                loss = loss_fn(b_hat, b)
                value = loss.item()
                if not math.isfinite(value):
                    clear_tape()
                    halted = f"non-finite loss at epoch {epoch}"
                    break
                loss.backward()
                adam_step(params, state, lr)
                net.zero_grads()
                epoch_losses.append(value)
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            if halted:
                break
            ssim_v, psnr_v = _metrics_on(net, cfg, held_o, held_b)
            entry = {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
                "ssim": ssim_v,
                "psnr": min(psnr_v, 100.0),
                "lr": lr,
            }
            emit(entry)
            last_ckpt = Checkpoint.capture(net, state, epoch, cfg)
            if out_dir is not None and (
                epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs
            ):
                save_checkpoint(out_dir / f"epoch{epoch:05d}.ckpt", last_ckpt)
            if stop_when is not None and stop_when(entry):
                halted = f"stop condition met at epoch {epoch}"
                break
            if max_steps is not None and steps >= max_steps:
                halted = f"step budget {max_steps} reached"
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", last_ckpt)
    return TrainResult(checkpoint=last_ckpt, metrics=metrics, halted=halted)


# ---------------------------------------------------------------------------
# evaluation / inference


@dataclass
class EvalReport:
    rows: list  # (id, psnr, ssim)
    mean_psnr: float
    mean_ssim: float
    colorspace: str = "rgb"

    def render_text(self) -> str:
        lines = [f"{'image':<16s} {'PSNR':>8s} {'SSIM':>8s}"]
        for pid, p, s in self.rows:
            lines.append(f"{pid:<16s} {min(p, 100.0):8.4f} {s:8.4f}")
        lines.append(f"{'mean':<16s} {min(self.mean_psnr, 100.0):8.4f} {self.mean_ssim:8.4f}")
        lines.append(REFERENCE_FOOTER)
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("id,psnr,ssim\n")
            for pid, p, s in self.rows:
                f.write(f"{pid},{min(p, 100.0)!r},{s!r}\n")
            f.write(f"mean,{min(self.mean_psnr, 100.0)!r},{self.mean_ssim!r}\n")


def _pad_to_multiple(img: np.ndarray, divisor: int):
    """Reflect-pad an (H,W,3) image on the bottom/right to the next multiple."""
    h, w = img.shape[:2]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode=mode), (h, w)


def derain_image(net: JDNetParams, img: np.ndarray):
    """Run one (H,W,3) [0,1] image; returns (b_hat clamped, raw streak map),
    both cropped back to the input size."""
    padded, (h, w) = _pad_to_multiple(img.astype(np.float32), net.spatial_divisor)
    o = Tensor(padded.transpose(2, 0, 1)[None])
    with no_grad():
        b_hat, r_hat = jdnet_forward(o, net, training=False)
    b = np.clip(b_hat.data[0].transpose(1, 2, 0)[:h, :w], 0.0, 1.0)
    r = r_hat.data[0].transpose(1, 2, 0)[:h, :w]
    return b, r


def evaluate(ckpt: Checkpoint, manifest: D.DatasetManifest, colorspace: str = "rgb") -> EvalReport:
    """Per-image and mean PSNR/SSIM of a checkpointed network over a manifest."""
    if colorspace not in ("rgb", "luma"):
        raise ValueError(f"unknown metric colorspace {colorspace!r}")
    net, _ = ckpt.restore_network()
    rows = []
    for entry in manifest.pairs:
        pair = D.load_pair(entry)
        pred, _ = derain_image(net, pair.rainy)
        a = pred.transpose(2, 0, 1)[None]
        b = pair.clean.transpose(2, 0, 1)[None]
        if colorspace == "luma":
            a, b = L.to_luma(a), L.to_luma(b)
        s = L.ssim(Tensor(a), Tensor(b)).item()
        p = L.psnr(a, b)
        rows.append((pair.id, p, s))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    return EvalReport(rows=rows, mean_psnr=mean_psnr, mean_ssim=mean_ssim, colorspace=colorspace)
