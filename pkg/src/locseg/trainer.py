"""Mini-batch RMSPROP training with per-epoch validation-Az model selection."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import engine as E
from .architectures import Network, NetworkSpec, save_checkpoint
from .errors import LocsegError, ValidationError
from .evaluation import roc_and_az
from .patches import SampleSet, shuffle_minibatches
from .rng import stream

DEFAULT_ALPHAS = (0.1, 0.3, 1.0, 3.0, 10.0)
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    epochs: int = 30
    dropout: float = 0.3
    seed: int = 0
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    precision: str = "float32"
    # samples per gradient work item; the reduction order over chunks is fixed
    chunk_size: int = 32
    threads: int = 1
    # stop once an epoch's mean training loss falls below this
    target_loss: Optional[float] = None

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}")
        if self.chunk_size < 1:
            raise ValidationError(f"chunk_size must be at least 1, got {self.chunk_size}")
        if self.threads < 1:
            raise ValidationError(f"threads must be at least 1, got {self.threads}")
        if self.target_loss is not None and not self.target_loss > 0:
            raise ValidationError(f"target_loss must be positive, got {self.target_loss}")
        if self.precision not in PRECISIONS:
            raise ValidationError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_az: float
    seconds: float


@dataclass
class TrainResult:
    network: Network  # parameters from the selected epoch
    stats: List[EpochStats]
    best_epoch: int
    best_az: float
    config: TrainConfig


def evaluate_epoch_az(network: Network, val_set: SampleSet, batch_size: int = 256) -> float:
    """Az of positive-class probabilities on a sample set."""
    labels = np.asarray(val_set.labels)
    if labels.min() == labels.max():
        raise ValidationError("validation set holds a single class; Az is undefined")
    x = network.network_input(val_set.patches, val_set.scales)
    probs = network.predict(x, val_set.location, batch_size=batch_size)[:, 1]
    return roc_and_az(probs, labels).az


def _chunk_gradients(network: Network, x, loc, labels, rngs, normalizer):
    loss, _, grads = network.loss_and_grads(x, loc, labels, "train", rngs, normalizer)
    return loss * normalizer, grads


def train(spec: NetworkSpec, train_set: SampleSet, val_set: SampleSet, config: TrainConfig,
          out_dir=None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train from a Glorot start; keep the epoch with the highest validation Az (earliest on ties).

    With ``out_dir`` the per-epoch ``stats.csv`` and the selected ``best.lsnn``
    checkpoint are written there.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    spec = replace(spec, dropout=config.dropout)
    network = Network(spec, seed=config.seed, dtype=config.dtype)
    x_all = network.network_input(train_set.patches, train_set.scales)
    loc_all = train_set.location.astype(config.dtype)
    y_all = train_set.labels.astype(np.int64)
    stats: List[EpochStats] = []
    best: Optional[Tuple[float, int, E.ParameterStore]] = None
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            total_loss = 0.0
            batches = shuffle_minibatches(len(train_set), config.batch_size, stream(config.seed, "epoch", epoch).integers(2**31))
            for b, idx in enumerate(batches):
                chunks = [idx[i:i + config.chunk_size] for i in range(0, idx.size, config.chunk_size)]
                jobs = []
                for c in chunks:
                    rngs = [stream(config.seed, "dropout", epoch, int(i)) for i in c]
                    jobs.append((network, x_all[c], loc_all[c], y_all[c], rngs, idx.size))
                results = list(pool.map(lambda a: _chunk_gradients(*a), jobs)) if pool else \
                    [_chunk_gradients(*a) for a in jobs]
                batch_loss = 0.0
                for loss_sum, grads in results:  # fixed chunk order
                    batch_loss += loss_sum
                    network.accumulate(grads)
                if not np.isfinite(batch_loss):
                    raise LocsegError(f"non-finite training loss at epoch {epoch}, batch {b + 1}")
                total_loss += batch_loss
                E.rmsprop_step(network.store, config.learning_rate, config.rho, config.epsilon)
            az = evaluate_epoch_az(network, val_set)
            st = EpochStats(epoch, total_loss / len(train_set), az, time.perf_counter() - t0)
            stats.append(st)
            if log:
                log(f"epoch {epoch}: loss {st.train_loss:.4f} val_az {az:.4f} ({st.seconds:.1f}s)")
            if best is None or az > best[0]:
                best = (az, epoch, network.store.copy())
            if config.target_loss is not None and st.train_loss < config.target_loss:
                break
    finally:
        if pool:
            pool.shutdown()
    best_az, best_epoch, store = best
    result = TrainResult(Network(spec, store), stats, best_epoch, best_az, config)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_stats_csv(stats, out / "stats.csv")
        save_checkpoint(result.network, out / "best.lsnn")
    return result


def write_stats_csv(stats: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_az", "seconds"])
        for s in stats:
            w.writerow([s.epoch, repr(float(s.train_loss)), repr(float(s.val_az)), f"{s.seconds:.3f}"])


def read_stats_csv(path) -> List[EpochStats]:
    with open(path, newline="") as fh:
        return [EpochStats(int(r["epoch"]), float(r["train_loss"]), float(r["val_az"]), float(r["seconds"]))
                for r in csv.DictReader(fh)]


@dataclass
class SweepResult:
    best_alpha: float
    best: TrainResult
    table: List[Tuple[float, float]]  # (alpha, best validation Az)


def sweep_alpha(spec: NetworkSpec, train_set: SampleSet, val_set: SampleSet, config: TrainConfig,
                alphas: Optional[Sequence[float]] = None, log=None) -> SweepResult:
    """Train once per alpha; pick the highest validation Az, smallest alpha on ties."""
    if spec.injection == "none":
        raise ValidationError("alpha sweep needs a location injection point")
    alphas = tuple(config.alphas if alphas is None else alphas)
    if not alphas:
        raise ValidationError("alpha sweep list is empty")
    table = []
    chosen: Optional[Tuple[float, float, TrainResult]] = None
    for alpha in sorted(alphas):
        result = train(replace(spec, alpha=float(alpha)), train_set, val_set, config, log=log)
        table.append((float(alpha), result.best_az))
        if chosen is None or result.best_az > chosen[1]:
            chosen = (float(alpha), result.best_az, result)
    return SweepResult(chosen[0], chosen[2], table)
