"""Patch sampling with augmentation, the training loop, and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from msbdn import config as cfgmod
from msbdn.haze import SceneParams, synthesize_hazy, transmission_from_depth
from msbdn.imageio import load_depth, load_gray, load_rgb
from msbdn.metrics import NumericError, grad_check, psnr, ssim
from msbdn.network import NetworkConfig, build_parameter_store, init_model, model_forward
from msbdn.params import adam_step, make_rng
from msbdn.serialization import read_checkpoint, write_checkpoint
from msbdn.tensor import Tensor, mse_loss, no_grad

log = logging.getLogger(__name__)

MAX_SAMPLE_FAILURES = 100
INIT_STREAM = 0
BATCH_STREAM = 1


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.75
    decay_every: int = 10
    epochs: int = 100
    batch: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    patch: int = 256
    scale_range: tuple[float, float] = (0.5, 1.0)
    scales_per_image: int = 3
    seed: int = 0
    steps_per_epoch: int = 0  # 0: derived from dataset size
    grad_clip: float = 0.0  # 0: off

    def __post_init__(self):
        for name in ("lr0", "decay", "decay_every", "batch", "patch", "scales_per_image"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")


def lr_at(epoch, tcfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return tcfg.lr0 * tcfg.decay ** (epoch // tcfg.decay_every)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("hazy", "clean", "depth", "transmission", "airlight", "beta")


@dataclass
class ManifestEntry:
    clean: str
    hazy: str = ""
    depth: str = ""
    transmission: str = ""
    airlight: float | None = None
    beta: float | None = None


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")

    @classmethod
    def load(cls, path):
        path = Path(path)
        entries = []
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                a, b = row.get("airlight", ""), row.get("beta", "")
                entries.append(
                    ManifestEntry(
                        clean=row["clean"],
                        hazy=row.get("hazy", "") or "",
                        depth=row.get("depth", "") or "",
                        transmission=row.get("transmission", "") or "",
                        airlight=float(a) if a else None,
                        beta=float(b) if b else None,
                    )
                )
        return cls(entries, path.parent)

    def save(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for e in self.entries:
                w.writerow(
                    [
                        e.hazy,
                        e.clean,
                        e.depth,
                        e.transmission,
                        "" if e.airlight is None else repr(e.airlight),
                        "" if e.beta is None else repr(e.beta),
                    ]
                )


@dataclass
class Sample:
    """One training image in memory, (C, H, W) float arrays in [0, 1]."""

    clean: np.ndarray
    hazy: np.ndarray | None = None
    transmission: np.ndarray | None = None
    depth: np.ndarray | None = None
    airlight: float | None = None
    beta: float | None = None
    name: str = ""

    def arrays(self):
        return {k: v for k, v in (("clean", self.clean), ("hazy", self.hazy), ("transmission", self.transmission), ("depth", self.depth)) if v is not None}


@dataclass
class Dataset:
    samples: list
    # used when an entry carries depth but no hazy image and no stored A / beta
    airlight_range: tuple = (0.7, 1.0)
    beta_range: tuple = (0.4, 1.6)

    def __len__(self):
        return len(self.samples)


def load_dataset(manifest, depth_range=(0.5, 2.0)):
    """Decode every image of a manifest; raises DataError on missing or mismatched files."""
    samples = []
    for e in manifest.entries:
        try:
            s = Sample(clean=load_rgb(manifest.root / e.clean), name=e.clean, airlight=e.airlight, beta=e.beta)
            if e.hazy:
                s.hazy = load_rgb(manifest.root / e.hazy)
            if e.transmission:
                s.transmission = load_gray(manifest.root / e.transmission)
            if e.depth:
                s.depth = load_depth(manifest.root / e.depth, depth_range)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot load manifest entry {e.clean!r}: {exc}") from exc
        shapes = {k: v.shape[1:] for k, v in s.arrays().items()}
        if len(set(shapes.values())) != 1:
            raise DataError(f"manifest entry {e.clean!r}: image sizes differ {shapes}")
        if s.hazy is None and s.depth is None:
            raise DataError(f"manifest entry {e.clean!r} has neither a hazy image nor a depth map")
        samples.append(s)
    if not samples:
        raise DataError("manifest is empty")
    return Dataset(samples)


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of (C, H, W) with half-pixel centres and edge clamping."""
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def flip(x, horizontal=False, vertical=False):
    if horizontal:
        x = x[..., ::-1]
    if vertical:
        x = x[..., ::-1, :]
    return np.ascontiguousarray(x)


def sample_crops(dataset, tcfg, rng):
    """Per-sample augmented crops (dicts of aligned arrays) for one batch.

    Each sample gets a random scale, an aligned random crop and random
    horizontal / vertical flips, applied identically to every array of the
    pair.  Depth-only entries are hazed after cropping.
    """
    p = tcfg.patch
    out = []
    failures = 0
    while len(out) < tcfg.batch:
        s = dataset.samples[int(rng.integers(len(dataset)))]
        scale = float(rng.uniform(*tcfg.scale_range))
        h, w = s.clean.shape[1:]
        nh, nw = int(round(h * scale)), int(round(w * scale))
        if nh < p or nw < p:
            failures += 1
            if failures >= MAX_SAMPLE_FAILURES:
                raise DataError(f"could not draw a {p}x{p} patch after {failures} attempts; images too small for the patch size")
            continue
        y = int(rng.integers(nh - p + 1))
        x = int(rng.integers(nw - p + 1))
        hflip = bool(rng.integers(2))
        vflip = bool(rng.integers(2))
        crops = {}
        for key, arr in s.arrays().items():
            arr = resize_bilinear(arr, nh, nw)[:, y : y + p, x : x + p]
            crops[key] = flip(arr, hflip, vflip)
        if "hazy" not in crops:
            airlight = s.airlight if s.airlight is not None else float(rng.uniform(*dataset.airlight_range))
            beta = s.beta if s.beta is not None else float(rng.uniform(*dataset.beta_range))
            crops["transmission"] = transmission_from_depth(crops["depth"], beta)
            crops["hazy"] = synthesize_hazy(crops["clean"], SceneParams(airlight, transmission=crops["transmission"])).hazy
        out.append(crops)
    return out


def sample_batch(dataset, tcfg, rng):
    """(hazy, clean) float32 tensors of shape (batch, 3, patch, patch)."""
    crops = sample_crops(dataset, tcfg, rng)
    hazy = np.stack([c["hazy"] for c in crops]).astype(np.float32)
    clean = np.stack([c["clean"] for c in crops]).astype(np.float32)
    return Tensor(hazy), Tensor(clean)


def center_crop(x, size):
    h, w = x.shape[-2:]
    y0, x0 = (h - size[0]) // 2, (w - size[1]) // 2
    return x[..., y0 : y0 + size[0], x0 : x0 + size[1]]


def eval_crop_size(h, w, patch, multiple):
    ch, cw = min(h, patch), min(w, patch)
    return ch - ch % multiple, cw - cw % multiple


def predict(image, ncfg, store):
    """Forward without graph construction; ``image`` is (N, 3, H, W)."""
    with no_grad():
        return model_forward(Tensor(np.asarray(image, dtype=store.dtype)), ncfg, store).data


def evaluate(dataset, ncfg, store, patch):
    """Mean PSNR / SSIM of clamped outputs on centre crops of the validation set."""
    ps, ss = [], []
    for s in dataset.samples:
        hazy = s.hazy
        if hazy is None:
            continue
        size = eval_crop_size(*hazy.shape[1:], patch, ncfg.size_multiple)
        x = center_crop(hazy, size)[None]
        y = center_crop(s.clean, size)[None]
        out = np.clip(predict(x, ncfg, store), 0.0, 1.0)
        ps.append(psnr(out, y))
        ss.append(ssim(out, y) if min(size) >= 11 else float("nan"))
    return float(np.mean(ps)), float(np.mean(ss))


def steps_per_epoch(n_samples, tcfg):
    if tcfg.steps_per_epoch:
        return tcfg.steps_per_epoch
    return math.ceil(n_samples * tcfg.scales_per_image / tcfg.batch)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_header(ncfg, tcfg=None, state=None):
    text = cfgmod.to_lines(ncfg)
    if tcfg is not None:
        text += cfgmod.to_lines(tcfg, prefix="train.")
    for k, v in (state or {}).items():
        text += f"state.{k}={v}\n"
    return text


def save_checkpoint(path, ncfg, store, tcfg=None, state=None, with_adam=True):
    write_checkpoint(path, checkpoint_header(ncfg, tcfg, state), store, with_adam)


@dataclass
class Checkpoint:
    ncfg: NetworkConfig
    store: object
    tcfg: TrainConfig | None
    state: dict


def load_checkpoint(path):
    header, entries, adam = read_checkpoint(path)
    values = cfgmod.parse_lines(header)
    ncfg = cfgmod.build(NetworkConfig, {k: v for k, v in values.items() if "." not in k})
    train_vals = {k[6:]: v for k, v in values.items() if k.startswith("train.")}
    tcfg = cfgmod.build(TrainConfig, train_vals) if train_vals else None
    state = {k[6:]: v for k, v in values.items() if k.startswith("state.")}
    store = build_parameter_store(ncfg)
    names = [n for n, _ in entries]
    if names != store.names():
        raise ValueError(f"{path}: checkpoint entries do not match the configured network layout")
    for name, arr in entries:
        p = store.entry(name)
        if arr.shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {p.shape}")
        p.value.data[...] = arr
        if adam is not None:
            p.adam_m[...] = adam[f"adam_m/{name}"]
            p.adam_v[...] = adam[f"adam_v/{name}"]
    return Checkpoint(ncfg, store, tcfg, state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    store: object
    step_log: list = field(default_factory=list)  # (step, epoch, lr, loss)
    epoch_log: list = field(default_factory=list)  # (epoch, val_psnr, val_ssim)
    checkpoint: Path | None = None


def _clip_grads(store, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in store))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in store:
            if p.value.grad is not None:
                p.value.grad *= scale


def _diagnose(step, lr, loss, store):
    norms = store.grad_norms()
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
    bad = [k for k, v in norms.items() if not np.isfinite(v)]
    return f"non-finite loss {loss} at step {step} (lr {lr:g}); largest grad norms {worst}; non-finite grads in {bad[:5]}"


def train_step(store, ncfg, tcfg, hazy, clean, lr, t):
    store.zero_grad()
    loss = mse_loss(model_forward(hazy, ncfg, store), clean)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(_diagnose(t, lr, value, store))
    loss.backward()
    if tcfg.grad_clip > 0:
        _clip_grads(store, tcfg.grad_clip)
    adam_step(store, lr, tcfg.beta1, tcfg.beta2, t=t)
    store.zero_grad()
    return value


def train(dataset, ncfg, tcfg, out_dir=None, val=None, resume=None, on_step=None):
    """Train from scratch (or from ``resume``, a checkpoint path) and return the result.

    With ``out_dir`` set, writes ``checkpoint_epochNNN.msbc`` per epoch,
    ``final.msbc``, ``train_log.csv`` (``step,epoch,lr,loss``) and
    ``val_log.csv`` (``epoch,val_psnr,val_ssim``).
    """
    if tcfg.patch % ncfg.size_multiple:
        raise ValueError(f"patch {tcfg.patch} must be a multiple of {ncfg.size_multiple}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start_epoch, step = 0, 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.ncfg != ncfg:
            raise ValueError("resume checkpoint was written for a different network config")
        store = ck.store
        start_epoch = int(ck.state.get("epoch", 0))
        step = int(ck.state.get("step", 0))
    else:
        store = init_model(ncfg, tcfg.seed)
    result = TrainResult(store)
    n_steps = steps_per_epoch(len(dataset), tcfg)
    step_f = val_f = None
    if out is not None:
        mode = "a" if resume is not None else "w"
        step_f = open(out / "train_log.csv", mode, newline="", encoding="utf-8")
        val_f = open(out / "val_log.csv", mode, newline="", encoding="utf-8")
        if resume is None:
            step_f.write("step,epoch,lr,loss\n")
            val_f.write("epoch,val_psnr,val_ssim\n")
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            lr = lr_at(epoch, tcfg)
            for _ in range(n_steps):
                hazy, clean = sample_batch(dataset, tcfg, make_rng(tcfg.seed, BATCH_STREAM, step))
                step += 1
                loss = train_step(store, ncfg, tcfg, hazy, clean, lr, step)
                result.step_log.append((step, epoch, lr, loss))
                if step_f is not None:
                    step_f.write(f"{step},{epoch},{lr!r},{loss!r}\n")
                if on_step is not None:
                    on_step(step, epoch, lr, loss)
            if val is not None:
                vp, vs = evaluate(val, ncfg, store, tcfg.patch)
                result.epoch_log.append((epoch, vp, vs))
                if val_f is not None:
                    val_f.write(f"{epoch},{vp!r},{vs!r}\n")
                log.info("epoch %d: val psnr %.3f ssim %.4f", epoch, vp, vs)
            if out is not None:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1:03d}.msbc", ncfg, store, tcfg, {"epoch": epoch + 1, "step": step})
        if out is not None:
            final_epoch = max(tcfg.epochs, start_epoch)
            result.checkpoint = out / "final.msbc"
            save_checkpoint(result.checkpoint, ncfg, store, tcfg, {"epoch": final_epoch, "step": step})
    finally:
        for f in (step_f, val_f):
            if f is not None:
                f.close()
    return result


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------

def model_grad_check(ncfg, seed=0, size=8, eps=1e-6, bias_scale=0.1):
    """Check float32 backprop gradients of ``mse_loss(model_forward(x), y)``.

    Central differences are taken on a float64 copy of the parameters with a
    small step: float32 differences are dominated by rounding, and larger
    steps straddle LReLU kinks.  Biases are randomized so no path is trivially
    zero.  Returns a GradCheckResult.
    """
    store32 = init_model(ncfg, seed)
    rng = make_rng(seed, 99)
    for p in store32:
        if p.value.data.ndim == 1:
            p.value.data[...] = rng.normal(0.0, bias_scale, size=p.shape)
    x = Tensor(rng.uniform(size=(1, 3, size, size)).astype(np.float32))
    y = Tensor(rng.uniform(size=(1, 3, size, size)).astype(np.float32))
    store32.zero_grad()
    mse_loss(model_forward(x, ncfg, store32), y).backward()
    analytic = {p.name: p.grad.astype(np.float64) for p in store32}
    store64 = store32.copy(np.float64)
    x64, y64 = Tensor(x.data.astype(np.float64)), Tensor(y.data.astype(np.float64))
    return grad_check(lambda: mse_loss(model_forward(x64, ncfg, store64), y64), store64, eps=eps, analytic=analytic)
