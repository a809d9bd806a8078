"""Dataset ingestion, offline sample generation, and the optimization loop.

Fully-connected networks train from a flat record file generated
offline (no augmentation); convolutional networks draw every minibatch
through the rotation/flip augmentation.  The schedule divides the
learning rate by 10 at each milestone; training is bit-reproducible
from the seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from . import nn
from .checkpoint import save_checkpoint
from .context import (
    BlockSample,
    augment_minibatch,
    compute_alpha,
    extract_context_test,
    extract_training_pair,
    mask_sizes,
    valid_block_positions,
)
from .errors import InvalidArgument, TrainingDiverged
from .imageio import read_image_gray, read_pgm, write_pgm
from .metrics import psnr
from .models import FAMILY_CONV, FAMILY_FC, Network, conv_net_backward, conv_net_forward, fc_net_backward, fc_net_forward, predict_block

DEFAULT_CROP_SIZE = 320

# learning-rate defaults per family
FC_LEARNING_RATE = 1e-4
CONV_LEARNING_RATE = 4e-4
WEIGHT_DECAY = 5e-4

LR_GRID = (0.007, 0.004, 0.001, 0.0007, 0.0004, 0.0001, 0.00007, 0.00004)
DECAY_GRID = (0.001, 0.0005, 0.0001)


@dataclass(frozen=True)
class MaskPolicy:
    """Either uniform-random mask sizes or a fixed (n0, n1) pair."""

    kind: str = "uniform"
    n0: int = 0
    n1: int = 0

    def draw(self, m: int, rng: np.random.Generator) -> tuple[int, int]:
        if self.kind == "uniform":
            sizes = mask_sizes(m)
            return (
                int(sizes[rng.integers(len(sizes))]),
                int(sizes[rng.integers(len(sizes))]),
            )
        return self.n0, self.n1

    @classmethod
    def fixed(cls, n0: int, n1: int) -> "MaskPolicy":
        return cls(kind="fixed", n0=n0, n1=n1)


@dataclass
class TrainingConfig:
    m: int
    family: str
    distortion: str = nn.DISTORTION_L2
    weight_decay: float = WEIGHT_DECAY
    learning_rate: float | None = None  # family default when None
    iterations: int = 20000
    milestones: tuple[int, ...] = (10000, 15000, 17500)
    batch_size: int = 100
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    seed: int = 0
    val_fraction: float = 0.05
    noise_qps: tuple[int, ...] | None = None
    log_every: int | None = None
    val_every: int | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise InvalidArgument("minibatch size must be at least 1")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(x >= self.iterations for x in ms):
            raise InvalidArgument("milestones must increase strictly and precede the end")
        if self.learning_rate is None:
            self.learning_rate = (
                FC_LEARNING_RATE if self.family == FAMILY_FC else CONV_LEARNING_RATE
            )


# schedule shapes; the paper-scale preset is not meant for the test suite
PRESETS: dict[str, dict] = {
    "paper-scale": {
        "iterations": 800000,
        "milestones": (400000, 600000, 700000),
        "batch_size": 100,
        "fc_dataset_size": 10_000_000,
    },
    "desk-scale": {
        "iterations": 20000,
        "milestones": (10000, 15000, 17500),
        "batch_size": 100,
        "fc_dataset_size": 200_000,
    },
}


def learning_rate_at(iteration: int, base: float, milestones: tuple[int, ...]) -> float:
    """Base rate divided by 10 for every milestone already passed."""
    drops = sum(1 for ms in milestones if iteration > ms)
    return base / (10.0**drops)


# ---------------------------------------------------------------------------
# crops


@dataclass
class CropSet:
    """Fixed-size grayscale crops in manifest order, plus their mean."""

    crops: list[np.ndarray]
    names: list[str]
    alpha: float

    def split_validation(self, fraction: float) -> tuple["CropSet", "CropSet"]:
        """Last `fraction` of crops (manifest order) become the validation set."""
        n_val = max(1, int(round(len(self.crops) * fraction))) if fraction > 0 else 0
        n_train = len(self.crops) - n_val
        if n_train < 1:
            raise InvalidArgument("validation split leaves no training crops")
        train = CropSet(self.crops[:n_train], self.names[:n_train], self.alpha)
        val = CropSet(self.crops[n_train:], self.names[n_train:], self.alpha)
        return train, val


def ingest_crops(
    image_paths: list[str],
    crop_size: int = DEFAULT_CROP_SIZE,
    rng: np.random.Generator | None = None,
) -> tuple[CropSet, list[str]]:
    """One random crop per large-enough image; returns (crop set, skipped)."""
    rng = rng or np.random.default_rng(0)
    crops, names, skipped = [], [], []
    for path in image_paths:
        img = read_image_gray(path)
        h, w = img.shape
        if h < crop_size or w < crop_size:
            skipped.append(path)
            continue
        r = int(rng.integers(h - crop_size + 1))
        c = int(rng.integers(w - crop_size + 1))
        crops.append(np.ascontiguousarray(img[r : r + crop_size, c : c + crop_size]))
        names.append(Path(path).name)
    if not crops:
        raise InvalidArgument("no usable images (all smaller than the crop size)")
    return CropSet(crops, names, compute_alpha(crops)), skipped


def save_crop_set(crop_set: CropSet, directory: str) -> str:
    """Write crops as PGM files plus a manifest fixing their order."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (crop, name) in enumerate(zip(crop_set.crops, crop_set.names)):
        fname = f"crop_{i:06d}_{Path(name).stem}.pgm"
        write_pgm(str(out / fname), crop)
        lines.append(fname)
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return str(manifest)


def load_crop_set(manifest_path: str) -> CropSet:
    manifest = Path(manifest_path)
    if manifest.is_dir():
        manifest = manifest / "manifest.txt"
    names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    crops = [read_pgm(str(manifest.parent / name)) for name in names]
    if not crops:
        raise InvalidArgument(f"{manifest}: empty crop manifest")
    return CropSet(crops, names, compute_alpha(crops))


# ---------------------------------------------------------------------------
# offline dataset for the fully-connected family

_FC_HEADER = struct.Struct("<IQd")  # m, count, alpha


def generate_fc_dataset(
    crop_set: CropSet,
    m: int,
    count: int,
    mask_policy: MaskPolicy,
    rng: np.random.Generator,
    path: str,
    noise_qps: tuple[int, ...] | None = None,
) -> None:
    """Write `count` centered (vectorized context, target) records.

    No rotation or flipping happens here; records are little-endian f32,
    5m^2 context values followed by m^2 target values.
    """
    if count < 1:
        raise InvalidArgument("dataset size must be at least 1")
    noisy = _NoisyCropCache(crop_set, noise_qps) if noise_qps else None
    with open(path, "wb") as fh:
        fh.write(_FC_HEADER.pack(m, count, crop_set.alpha))
        for _ in range(count):
            idx = int(rng.integers(len(crop_set.crops)))
            n0, n1 = mask_policy.draw(m, rng)
            if noisy is None:
                sample = extract_training_pair(crop_set.crops[idx], m, n0, n1, crop_set.alpha, rng)
            else:
                sample = noisy.sample(idx, m, n0, n1, rng)
            ctx = sample.context
            x0c, x1c = ctx.centered()
            record = np.concatenate(
                [x0c.ravel(), x1c.ravel(), sample.target_centered().ravel()]
            ).astype("<f4")
            fh.write(record.tobytes())


@dataclass
class FcDataset:
    m: int
    alpha: float
    contexts: np.ndarray  # (count, 5m^2) float32
    targets: np.ndarray  # (count, m^2) float32

    @classmethod
    def load(cls, path: str) -> "FcDataset":
        with open(path, "rb") as fh:
            header = fh.read(_FC_HEADER.size)
            m, count, alpha = _FC_HEADER.unpack(header)
            record_len = 5 * m * m + m * m
            data = np.fromfile(fh, dtype="<f4", count=count * record_len)
        if data.size != count * record_len:
            raise InvalidArgument(f"{path}: truncated dataset")
        data = data.reshape(count, record_len)
        return cls(m=m, alpha=alpha, contexts=data[:, : 5 * m * m], targets=data[:, 5 * m * m :])

    def __len__(self) -> int:
        return self.contexts.shape[0]


class _NoisyCropCache:
    """Crops passed once through encode/decode per (crop, QP) pair."""

    def __init__(self, crop_set: CropSet, qps: tuple[int, ...]):
        self.crop_set = crop_set
        self.qps = tuple(qps)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def decoded(self, idx: int, qp: int) -> np.ndarray:
        key = (idx, qp)
        if key not in self._cache:
            data, recon, _ = codec_mod.encode_image(
                self.crop_set.crops[idx], qp, codec_mod.SCHEME_BASELINE
            )
            self._cache[key] = recon
        return self._cache[key]

    def sample(
        self,
        idx: int,
        m: int,
        n0: int,
        n1: int,
        rng: np.random.Generator,
        quarter_turns: int = 0,
        flip: bool = False,
    ) -> BlockSample:
        """Context from the coded crop, target from the pristine one."""
        qp = int(self.qps[rng.integers(len(self.qps))])
        orig = self.crop_set.crops[idx]
        coded = self.decoded(idx, qp)
        if quarter_turns:
            orig = np.rot90(orig, quarter_turns)
            coded = np.rot90(coded, quarter_turns)
        if flip:
            orig = orig[:, ::-1]
            coded = coded[:, ::-1]
        h, w = orig.shape
        rows, cols = valid_block_positions(h, w, m)
        row = int(rng.integers(rows.start, rows.stop))
        col = int(rng.integers(cols.start, cols.stop))
        alpha = self.crop_set.alpha
        ctx = extract_context_test(coded, (row, col), m, n0, n1, alpha)
        target = np.asarray(orig[row : row + m, col : col + m], dtype=np.float64)
        return BlockSample(context=ctx, target=target)


# ---------------------------------------------------------------------------
# the optimization loop


@dataclass
class TrainResult:
    network: Network
    curves: list[dict]
    checkpoints: list[str]
    final_validation_psnr: float


def _decay_grads(net: Network, grads: list[np.ndarray], lam: float) -> None:
    if lam == 0.0:
        return
    for i in range(0, len(grads), 2):  # weights sit at even positions
        grads[i] = grads[i] + 2.0 * lam * net.param_tensors()[i]


def _distortion_batch(residual_flat: np.ndarray, distortion: str):
    """Mean per-sample norm and the matching prediction gradient."""
    b = residual_flat.shape[0]
    if distortion == nn.DISTORTION_L2:
        norms = np.sqrt((residual_flat * residual_flat).sum(axis=1))
        value = float(norms.mean())
        safe = np.where(norms > 0.0, norms, 1.0)
        grad = residual_flat / (safe * b)[:, None]
        grad[norms == 0.0] = 0.0
    elif distortion == nn.DISTORTION_L1:
        value = float(np.abs(residual_flat).sum(axis=1).mean())
        grad = np.sign(residual_flat) / b
    else:
        raise InvalidArgument(f"unknown distortion {distortion!r}")
    return value, grad


def _fc_step(net: Network, xb: np.ndarray, yb: np.ndarray, cfg: TrainingConfig, state):
    out, caches = fc_net_forward(net, xb, with_cache=True)
    dist, dpred = _distortion_batch(out - yb, cfg.distortion)
    _, grads = fc_net_backward(net, dpred, caches)
    _decay_grads(net, grads, cfg.weight_decay)
    penalty, _ = nn.weight_penalty(net.weight_tensors(), cfg.weight_decay)
    nn.adam_step(net.param_tensors(), grads, state)
    return dist + penalty


def _conv_step(net, x0: np.ndarray, x1: np.ndarray, yb: np.ndarray, cfg: TrainingConfig, state):
    out, caches = conv_net_forward(net, x0[..., None], x1[..., None], with_cache=True)
    b, m = out.shape[0], out.shape[1]
    resid = (out[..., 0] - yb).reshape(b, m * m)
    dist, dpred = _distortion_batch(resid, cfg.distortion)
    _, grads = conv_net_backward(net, dpred.reshape(b, m, m, 1), caches)
    _decay_grads(net, grads, cfg.weight_decay)
    penalty, _ = nn.weight_penalty(net.weight_tensors(), cfg.weight_decay)
    nn.adam_step(net.param_tensors(), grads, state)
    return dist + penalty


def _conv_batch(
    crops: list[np.ndarray],
    m: int,
    alpha: float,
    rng: np.random.Generator,
    cfg: TrainingConfig,
    noisy: _NoisyCropCache | None,
):
    if noisy is None:
        samples = augment_minibatch(
            crops, m, alpha, rng, batch_size=cfg.batch_size, mask_policy=cfg.mask_policy
        )
    else:
        samples = []
        for _ in range(cfg.batch_size):
            idx = int(rng.integers(len(crops)))
            quarter_turns = int(rng.integers(4))
            flip = bool(rng.integers(2))
            n0, n1 = cfg.mask_policy.draw(m, rng)
            samples.append(noisy.sample(idx, m, n0, n1, rng, quarter_turns, flip))
    x0 = np.stack([s.context.centered()[0] for s in samples])
    x1 = np.stack([s.context.centered()[1] for s in samples])
    yb = np.stack([s.target_centered() for s in samples])
    return x0, x1, yb


def build_validation_samples(
    crop_set: CropSet,
    m: int,
    count: int,
    seed: int = 97,
    n0: int = 0,
    n1: int = 0,
) -> list[BlockSample]:
    """Deterministic held-out samples at a fixed test mask (default {0, 0})."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        idx = int(rng.integers(len(crop_set.crops)))
        out.append(
            extract_training_pair(crop_set.crops[idx], m, n0, n1, crop_set.alpha, rng)
        )
    return out


def validate(net: Network, samples: list[BlockSample]) -> float:
    """Mean prediction PSNR over a sample set."""
    if not samples:
        raise InvalidArgument("validation sample set is empty")
    values = [psnr(s.target, predict_block(net, s.context)) for s in samples]
    return float(np.mean(values))


def train(
    net: Network,
    config: TrainingConfig,
    crop_set: CropSet | None = None,
    fc_dataset: FcDataset | None = None,
    out_dir: str | None = None,
    validation_samples: list[BlockSample] | None = None,
) -> TrainResult:
    """Run the full schedule; returns the trained network and loss curves.

    Convolutional training augments fresh minibatches from `crop_set`;
    fully-connected training sweeps `fc_dataset` in reshuffled epochs.
    Checkpoints are written at each milestone and at the end when
    `out_dir` is given.
    """
    if config.family != net.spec.family or config.m != net.spec.m:
        raise InvalidArgument("network does not match the training configuration")
    rng = np.random.default_rng(config.seed)
    params = net.param_tensors()
    state = nn.AdamState.for_params(params, config.learning_rate)
    is_fc = config.family == FAMILY_FC
    if is_fc and fc_dataset is None:
        raise InvalidArgument("fully-connected training needs the offline dataset")
    if not is_fc and crop_set is None:
        raise InvalidArgument("convolutional training needs a crop set")

    train_crops = crop_set
    if validation_samples is None and crop_set is not None and config.val_fraction > 0:
        train_crops, val_crops = crop_set.split_validation(config.val_fraction)
        validation_samples = build_validation_samples(
            val_crops, config.m, count=min(256, 32 * len(val_crops.crops))
        )
    noisy = None
    if config.noise_qps and not is_fc:
        noisy = _NoisyCropCache(
            CropSet(train_crops.crops, train_crops.names, train_crops.alpha), config.noise_qps
        )

    if is_fc:
        order = rng.permutation(len(fc_dataset))
        cursor = 0

    log_every = config.log_every or max(1, config.iterations // 200)
    val_every = config.val_every or max(1, config.iterations // 10)
    curves: list[dict] = []
    checkpoints: list[str] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def maybe_validate() -> float:
        if validation_samples:
            return validate(net, validation_samples)
        return float("nan")

    last_val = float("nan")
    for iteration in range(1, config.iterations + 1):
        state.learning_rate = learning_rate_at(iteration, config.learning_rate, config.milestones)
        if is_fc:
            take = min(config.batch_size, len(fc_dataset) - cursor)
            idx = order[cursor : cursor + take]
            cursor += take
            if cursor >= len(fc_dataset):  # epoch boundary: reshuffle
                order = rng.permutation(len(fc_dataset))
                cursor = 0
            if take < config.batch_size:
                extra = order[: config.batch_size - take]
                cursor = config.batch_size - take
                idx = np.concatenate([idx, extra])
            xb = fc_dataset.contexts[idx].astype(np.float64)
            yb = fc_dataset.targets[idx].astype(np.float64)
            loss = _fc_step(net, xb, yb, config, state)
        else:
            x0, x1, yb = _conv_batch(
                train_crops.crops, config.m, train_crops.alpha, rng, config, noisy
            )
            loss = _conv_step(net, x0, x1, yb, config, state)
        net.iterations += 1

        if not np.isfinite(loss):
            if out:
                path = str(out / "diverged.pnns")
                save_checkpoint(net, path)
            raise TrainingDiverged(f"loss became {loss} at iteration {iteration}")

        at_milestone = iteration in config.milestones
        if iteration % val_every == 0 or iteration == config.iterations or at_milestone:
            last_val = maybe_validate()
        if iteration % log_every == 0 or iteration in (1, config.iterations) or at_milestone:
            curves.append(
                {
                    "iteration": iteration,
                    "loss": loss,
                    "learning_rate": state.learning_rate,
                    "validation_psnr": last_val,
                }
            )
        if out and (at_milestone or iteration == config.iterations):
            path = str(out / f"ckpt_{iteration:08d}.pnns")
            save_checkpoint(net, path)
            checkpoints.append(path)

    if out:
        final = str(out / "final.pnns")
        save_checkpoint(net, final)
        checkpoints.append(final)
        write_curves(str(out / "curves.csv"), curves)
    return TrainResult(
        network=net, curves=curves, checkpoints=checkpoints, final_validation_psnr=last_val
    )


def write_curves(path: str, curves: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["iteration", "loss", "learning_rate", "validation_psnr"]
        )
        writer.writeheader()
        for row in curves:
            writer.writerow(row)


def hyperparameter_grid(
    base_config: TrainingConfig,
    learning_rates,
    decay_values,
    build_network,
    crop_set: CropSet | None = None,
    fc_dataset: FcDataset | None = None,
    validation_samples: list[BlockSample] | None = None,
):
    """Train one network per (learning rate, weight decay) cell.

    `build_network` is a zero-argument factory producing a freshly
    initialized network; the same validation samples score every cell.
    Returns (best pair, rows) with rows of (lr, decay, validation PSNR).
    """
    if not learning_rates or not decay_values:
        raise InvalidArgument("hyperparameter grids must be non-empty")
    rows = []
    best = None
    for lr in learning_rates:
        for lam in decay_values:
            cfg = replace(base_config, learning_rate=lr, weight_decay=lam)
            result = train(
                build_network(),
                cfg,
                crop_set=crop_set,
                fc_dataset=fc_dataset,
                validation_samples=validation_samples,
            )
            score = result.final_validation_psnr
            rows.append({"learning_rate": lr, "weight_decay": lam, "validation_psnr": score})
            if best is None or score > best[2]:
                best = (lr, lam, score)
    return (best[0], best[1]), rows
