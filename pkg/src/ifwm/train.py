"""Training loop, sliding-window evaluation, and the ablation runner.

Everything is deterministic for a fixed config: data order, augmentation and
parameter init all derive from the config seed, the learning rate for epoch e
is computed directly as lr * decay**e, and log floats are written with repr,
so a rerun produces byte-identical logs and checkpoints.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ifwm import checkpoint
from ifwm.backbone import Network, build_network
from ifwm.config import TrainConfig
from ifwm.data import SceneSample, load_pair, read_manifest, rotate90, tile_origins
from ifwm.errors import ConfigError, DataError, DivergedError, GeometryError
from ifwm.flowwarp import CALC_PROCESS, KERNEL_DESC, FusionVariant
from ifwm.metrics import ConfusionMatrix, Summary
from ifwm.tensor import SGD, Tape, Tensor, record_on, softmax_cross_entropy

LOG_HEADER = "epoch,lr,loss,PA,mIoU"


def eval_threads() -> int:
    raw = os.environ.get("IFWM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"IFWM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"IFWM_THREADS must be positive, got {n}")
    return n


def load_dataset(manifest_path: str) -> List[SceneSample]:
    pairs = read_manifest(manifest_path)
    if not pairs:
        raise DataError(f"{manifest_path}: empty manifest")
    return [load_pair(img, lab) for img, lab in pairs]


def split_dataset(samples: Sequence[SceneSample],
                  val_fraction: float) -> Tuple[List[SceneSample], List[SceneSample]]:
    """Deterministic split: the tail of the manifest is held out."""
    n = len(samples)
    n_val = max(1, int(n * val_fraction)) if val_fraction > 0 else 0
    return list(samples[:n - n_val]), list(samples[n - n_val:])


# ---------------------------------------------------------------------------
# inference


def predict_raster(net: Network, image: np.ndarray, tile: int) -> np.ndarray:
    """Argmax class raster for one image, windowed to the training tile size.

    Windows are laid out with stride == tile and a clamped final window, so
    every pixel is predicted exactly once except for the clamped overlap,
    where the later window wins.
    """
    _, h, w = image.shape
    if h < tile or w < tile:
        raise GeometryError(f"image {h}x{w} is smaller than the {tile} tile")
    dtype = net.spec.np_dtype
    pred = np.zeros((h, w), dtype=np.int64)
    for oy in tile_origins(h, tile, tile):
        for ox in tile_origins(w, tile, tile):
            window = image[:, oy:oy + tile, ox:ox + tile].astype(dtype)
            logits = net.forward(Tensor(window[None]), training=False)
            pred[oy:oy + tile, ox:ox + tile] = logits.data[0].argmax(axis=0)
    return pred


def evaluate(net: Network, samples: Sequence[SceneSample], num_classes: int,
             tile: int, threads: Optional[int] = None,
             oracle: bool = False) -> ConfusionMatrix:
    """Confusion matrix over samples; one shard per sample, merged in order."""
    if threads is None:
        threads = eval_threads()

    def one(sample: SceneSample) -> ConfusionMatrix:
        cm = ConfusionMatrix(num_classes)
        if oracle:
            pred = sample.labels.astype(np.int64)
        else:
            pred = predict_raster(net, sample.image, tile)
        cm.accumulate(sample.labels, pred)
        return cm

    total = ConfusionMatrix(num_classes)
    if threads == 1 or len(samples) <= 1:
        shards = [one(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(samples))) as pool:
            shards = list(pool.map(one, samples))
    for cm in shards:
        total.merge(cm)
    return total


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    best_miou: float
    final: Summary
    log_rows: List[str] = field(default_factory=list)
    log_path: str = ""
    best_path: str = ""
    final_path: str = ""


def _batch(samples: Sequence[SceneSample], idxs, rng, augment: bool,
           dtype) -> Tuple[Tensor, np.ndarray]:
    imgs, labs = [], []
    for i in idxs:
        s = samples[i]
        if augment:
            s = rotate90(s, int(rng.integers(4)))
        imgs.append(s.image.astype(dtype))
        labs.append(s.labels.astype(np.int64))
    return Tensor(np.stack(imgs)), np.stack(labs)


def _targets_met(cfg: TrainConfig, summ: Summary) -> bool:
    if cfg.target_pa == 0.0 and cfg.target_miou == 0.0:
        return False
    return summ.pixel_accuracy >= cfg.target_pa and summ.miou >= cfg.target_miou


def train(cfg: TrainConfig, out_dir: str,
          samples: Optional[Sequence[SceneSample]] = None) -> TrainResult:
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    if samples is None:
        samples = load_dataset(cfg.data_manifest)
    train_set, val_set = split_dataset(samples, cfg.val_fraction)
    if not train_set:
        raise DataError("no training samples after the validation split")
    for s in train_set:
        if s.labels.shape != (cfg.tile, cfg.tile):
            raise GeometryError(
                f"training samples must be {cfg.tile}x{cfg.tile} tiles, "
                f"got {s.labels.shape}")

    net = build_network(cfg.network_spec())
    opt = SGD(net.parameters(), momentum=cfg.momentum)
    dtype = net.spec.np_dtype
    threads = eval_threads()

    result = TrainResult(0, -1, float("-inf"), Summary(0.0, 0.0, 0.0))
    result.log_path = os.path.join(out_dir, "train_log.csv")
    result.best_path = os.path.join(out_dir, "best.ckpt")
    result.final_path = os.path.join(out_dir, "final.ckpt")
    rows = [LOG_HEADER]

    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        rng = np.random.default_rng([int(cfg.seed), 7, epoch])
        order = rng.permutation(len(train_set))
        total_loss = 0.0
        for b0 in range(0, len(order), cfg.batch_size):
            idxs = order[b0:b0 + cfg.batch_size]
            images, labels = _batch(train_set, idxs, rng, cfg.augment, dtype)
            tape = Tape()
            with record_on(tape):
                loss = softmax_cross_entropy(net.forward(images, training=True), labels)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedError(f"loss diverged at epoch {epoch}")
            tape.backward(loss)
            opt.step(lr)
            total_loss += value * len(idxs)
        mean_loss = total_loss / len(train_set)

        summ = (evaluate(net, val_set, cfg.num_classes, cfg.tile, threads).summary()
                if val_set else Summary(0.0, 0.0, 0.0))
        rows.append(f"{epoch},{repr(lr)},{repr(mean_loss)},"
                    f"{repr(summ.pixel_accuracy)},{repr(summ.miou)}")
        result.epochs_run = epoch + 1
        result.final = summ
        if summ.miou > result.best_miou:
            result.best_miou = summ.miou
            result.best_epoch = epoch
            checkpoint.save_state(result.best_path, net.registry)
        if _targets_met(cfg, summ):
            break

    checkpoint.save_state(result.final_path, net.registry)
    result.log_rows = rows
    with open(result.log_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return result


# ---------------------------------------------------------------------------
# ablation

ABLATION_HEADER = "method,calc_process,kernel,mF1,PA,mIoU"


def _method_desc(method: str) -> Tuple[str, str]:
    if method == "baseline":
        return "-", "-"
    v = FusionVariant(method)
    return CALC_PROCESS[v], KERNEL_DESC[v]


def run_ablation(cfg: TrainConfig, methods: Sequence[str], seeds: Sequence[int],
                 out_dir: str) -> dict:
    """Train every (method, seed) cell and write mean and per-seed tables.

    Returns {method: [Summary per seed]} in the given method order.
    """
    os.makedirs(out_dir, exist_ok=True)
    samples = load_dataset(cfg.data_manifest)
    results: dict = {}
    per_seed_rows = ["method,seed,mF1,PA,mIoU"]
    for method in methods:
        cells = []
        for seed in seeds:
            run_cfg = replace(cfg, fusion=method, seed=int(seed))
            run_dir = os.path.join(out_dir, "runs", f"{method}_s{seed}")
            res = train(run_cfg, run_dir, samples=samples)
            cells.append(res.final)
            per_seed_rows.append(
                f"{method},{seed},{repr(res.final.mf1)},"
                f"{repr(res.final.pixel_accuracy)},{repr(res.final.miou)}")
        results[method] = cells

    rows = [ABLATION_HEADER]
    for method in methods:
        cells = results[method]
        mf1 = sum(c.mf1 for c in cells) / len(cells)
        pa = sum(c.pixel_accuracy for c in cells) / len(cells)
        miou = sum(c.miou for c in cells) / len(cells)
        calc, kern = _method_desc(method)
        rows.append(f"{method},{calc},{kern},{repr(mf1)},{repr(pa)},{repr(miou)}")
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    with open(os.path.join(out_dir, "ablation_per_seed.csv"), "w") as fh:
        fh.write("\n".join(per_seed_rows) + "\n")
    return results
