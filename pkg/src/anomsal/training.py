"""Training loop: random grids, augmentation, ADAM, validation-based early stopping."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import network
from .evaluation import RatioReport, ratio_from_groups, region_members
from .inference import GridConfig, prepare_batch, saliency_map
from .loss import loss_breakdown, reconstruction_error_backward
from .pointcloud import PointCloud, RegionSet, SpatialIndex, atomic_write, build_index
from .tensor import AdamState, adam_step, pack_tensors, unpack_tensors
from .voxelization import augment_and_extract, check_grid_params


@dataclass(frozen=True)
class TrainConfig:
    B: int = 16
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    validation_every: int = 1000
    n_ST: int = 10_000
    max_iters: int = 20_000
    t_b: int = 2
    m: int = 3
    n: int = 16
    f: int = 8
    w: float = 1.0
    seed: int = 0
    val_points: int = 5000
    workers: int = 1

    def __post_init__(self):
        for name in ("B", "validation_every", "max_iters", "t_b", "val_points", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_ST < 0:
            raise ValueError(f"n_ST must be >= 0, got {self.n_ST}")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("need lr >= 0 and betas in [0, 1)")
        check_grid_params(self.n, self.w)
        network.ArchitectureSpec(self.n, self.f)
        if not 0 <= self.m < self.n / 2 - 1:
            raise ValueError(f"shell thickness m={self.m} too large for n={self.n}")

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.n, self.w, self.m, self.t_b)

    @property
    def arch(self) -> network.ArchitectureSpec:
        return network.ArchitectureSpec(self.n, self.f)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainLog:
    """Batch losses per iteration and validation ratios where they were computed."""

    iters: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    ratios: dict[int, float] = field(default_factory=dict)
    best_iter: int | None = None

    @property
    def best_ratio(self) -> float:
        return self.ratios[self.best_iter] if self.best_iter is not None else math.nan

    @property
    def checkpoint_id(self) -> str | None:
        return None if self.best_iter is None else f"ckpt_{self.best_iter}"

    def record(self, it: int, loss: float) -> None:
        if self.iters and it <= self.iters[-1]:
            raise ValueError("iterations must increase")
        self.iters.append(it)
        self.losses.append(loss)

    def to_text(self) -> str:
        out = []
        for it, loss in zip(self.iters, self.losses):
            line = f"{it} {loss!r}"
            if it in self.ratios:
                line += f" {self.ratios[it]!r}"
            out.append(line)
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainLog":
        log = cls()
        best = -math.inf
        for line in text.split("\n"):
            parts = line.split()
            if not parts:
                continue
            it = int(parts[0])
            log.record(it, float(parts[1]))
            if len(parts) > 2:
                r = float(parts[2])
                log.ratios[it] = r
                if log.best_iter is None or _score(r) > best:
                    log.best_iter, best = it, _score(r)
        return log


def _score(r: float) -> float:
    # an undefined ratio never counts as an improvement
    return r if math.isfinite(r) else -math.inf


class Validator:
    """Frozen per-region subsample of the D regions, scored on demand."""

    def __init__(self, cloud: PointCloud, regions: RegionSet, cfg: TrainConfig, index: SpatialIndex):
        h, l_ = region_members(cloud, regions, "D")
        if not h or not l_:
            raise ValueError("training needs at least one H and one L validation (D) region")
        rng = np.random.default_rng([cfg.seed, 0x5A11])
        self.groups = {}
        for label, members in (("H", h), ("L", l_)):
            for name, idx in members.items():
                if len(idx) == 0:
                    raise ValueError(f"validation region {name} contains no points")
                if len(idx) > cfg.val_points:
                    idx = np.sort(rng.choice(idx, cfg.val_points, replace=False))
                self.groups[name] = (label, idx)
        self.subset = np.unique(np.concatenate([idx for _, idx in self.groups.values()]))
        self.cloud, self.cfg, self.index = cloud, cfg, index

    def __call__(self, params) -> RatioReport:
        smap = saliency_map(params, self.cloud, self.cfg.grid, subset=self.subset, index=self.index,
                            workers=self.cfg.workers)
        h = {k: smap.lookup(v) for k, (lab, v) in self.groups.items() if lab == "H"}
        l_ = {k: smap.lookup(v) for k, (lab, v) in self.groups.items() if lab == "L"}
        return ratio_from_groups(h, l_, "D")


def validate(params, cloud: PointCloud, regions: RegionSet, cfg: TrainConfig,
             index: SpatialIndex | None = None) -> float:
    """Saliency ratio over the validation regions (subsampled as in training)."""
    index = index or build_index(cloud, cfg.n * cfg.w)
    return Validator(cloud, regions, cfg, index)(params).ratio


def sample_batch(cloud: PointCloud, index: SpatialIndex, cfg: TrainConfig, it: int,
                 pool: ThreadPoolExecutor | None = None) -> np.ndarray:
    """Augmented count grids (B, n, n, n) for iteration ``it``.

    Centres and augmentation draws come from seeds derived from
    ``(cfg.seed, it)`` and ``(cfg.seed, it, slot)``, so the batch does not
    depend on how extraction is scheduled.
    """
    centers = np.random.default_rng([cfg.seed, it]).integers(0, cloud.n, size=cfg.B)

    def one(slot):
        rng = np.random.default_rng([cfg.seed, it, slot])
        return augment_and_extract(cloud, index, cloud.points[centers[slot]], cfg.n, cfg.w, seed=rng).values

    slots = range(cfg.B)
    grids = list(pool.map(one, slots)) if pool is not None else [one(s) for s in slots]
    return np.stack(grids)


def train_step(params, state: AdamState, counts: np.ndarray, cfg: TrainConfig) -> float:
    """One ADAM update on a batch of count grids; returns the batch loss."""
    shells, target, weights = prepare_batch(counts, cfg.t_b, cfg.m)
    pred, cache = network.forward(params, shells, keep_cache=True)
    p = pred[:, 0]
    loss = loss_breakdown(p, target, weights).mean
    g = reconstruction_error_backward(p, target, weights) / len(p)
    grads = network.backward(params, cache, g[:, None].astype(pred.dtype))
    adam_step(params, grads, state)
    return loss


def checkpoint_bytes(params, cfg: TrainConfig, it: int, ratio: float) -> bytes:
    meta = {"n": cfg.n, "f": cfg.f, "w": repr(cfg.w), "m": cfg.m, "t_b": cfg.t_b, "iter": it, "r_D": repr(ratio)}
    return pack_tensors(params, {k: str(v) for k, v in meta.items()})


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], GridConfig]:
    """Parameters and the grid configuration they were trained with."""
    params, meta = unpack_tensors(Path(path).read_bytes())
    try:
        grid = GridConfig(int(meta["n"]), float(meta["w"]), int(meta["m"]), int(meta["t_b"]))
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks metadata field {exc.args[0]}") from None
    return params, grid


def train(cloud: PointCloud, regions: RegionSet, cfg: TrainConfig, out_dir=None, progress=None):
    """Train a network on ``cloud`` and return ``(best_params, log)``.

    Validation runs every ``cfg.validation_every`` iterations (and after the
    last one); training stops once ``cfg.n_ST`` iterations pass without a
    better validation ratio. With ``out_dir`` the log is written to
    ``train_log.txt`` and each improvement to ``ckpt_<iter>.bin``.
    ``progress(it, loss, ratio_or_None)`` is called after every iteration.
    """
    index = build_index(cloud, cfg.n * cfg.w)
    validator = Validator(cloud, regions, cfg, index)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = network.build(cfg.arch, seed=cfg.seed)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    log = TrainLog()
    best_params = {k: v.copy() for k, v in params.items()}
    best = -math.inf
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for it in range(1, cfg.max_iters + 1):
            counts = sample_batch(cloud, index, cfg, it, pool)
            loss = train_step(params, state, counts, cfg)
            log.record(it, loss)
            ratio = None
            if it % cfg.validation_every == 0 or it == cfg.max_iters:
                ratio = validator(params).ratio
                log.ratios[it] = ratio
                if log.best_iter is None or _score(ratio) > best:
                    log.best_iter, best = it, _score(ratio)
                    best_params = {k: v.copy() for k, v in params.items()}
                    if out is not None:
                        atomic_write(out / f"ckpt_{it}.bin", checkpoint_bytes(params, cfg, it, ratio))
            if progress is not None:
                progress(it, loss, ratio)
            if ratio is not None and it - log.best_iter >= cfg.n_ST:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    if out is not None:
        atomic_write(out / "train_log.txt", log.to_text())
    return best_params, log

