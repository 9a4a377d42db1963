"""Adam, the adversarial training loop, evaluation, checkpoints and exports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (
    AugmentationSpec,
    Dataset,
    PairedBatch,
    SplitSpec,
    augment,
    augmentation_for,
    batches,
    load_dataset,
    split,
)
from .losses import ConsistencyConfig, MixupSample, discriminator_total_loss, generator_total_loss
from .nn import ParamSet, build_model, ema_update, forward_discriminator, forward_generator, preset
from .rng import derive, generator
from .schedule import ScheduleConfig, consistency_weight, learning_rate

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CCGANCKP"
CHECKPOINT_VERSION = 1
METRICS_COLUMNS = (
    "epoch",
    "iterations",
    "supervised",
    "unsupervised",
    "consistency",
    "generator",
    "student_error",
    "teacher_error",
    "lr",
    "lambda_cons",
)


class NumericalDivergence(RuntimeError):
    """A loss became non-finite; carries the term breakdown."""

    def __init__(self, message: str, terms: dict):
        super().__init__(f"{message}: {json.dumps(terms)}")
        self.terms = terms


class CheckpointError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    name: str = "two_moons"
    n: int = 1000
    n_test: int = 1000
    noise: float = 0.1
    num_classes: int = 3
    n_labeled: int = 6
    stratified: bool = True
    seed: int = 0
    split_seed: int | None = None


@dataclass
class ModelSection:
    discriminator: str = "mlp-2d"
    generator: str = "mlp-2d-generator"
    dropout: float | None = None


@dataclass
class AugmentSection:
    """``None`` fields take the dataset-dependent default."""

    max_translate_px: int | None = None
    horizontal_flip: bool | None = None
    pad_mode: str = "reflect"
    jitter_std: float | None = None


@dataclass
class AdamConfig:
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("Adam eps must be positive")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 128
    labeled_batch_size: int | None = None
    eval_every: int = 1
    checkpoint_every: int = 10
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()}, {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, lr: float, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[ParamSet, AdamState]:
    """Bias-corrected Adam update applied in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ad.ShapeError(f"Adam shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def _grads(params: ParamSet) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


# --------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    config: TrainConfig
    student: ParamSet
    teacher: ParamSet
    generator: ParamSet
    adam_d: AdamState
    adam_g: AdamState
    train_set: Dataset
    test_set: Dataset
    split_idx: tuple[np.ndarray, np.ndarray]
    aug_spec: AugmentationSpec
    epoch: int = 0
    iteration: int = 0

    def augment_fn(self):
        spec = self.aug_spec
        return lambda x, seed: augment(x, spec, seed)


def resolve_augmentation(cfg: TrainConfig, ds: Dataset) -> AugmentationSpec:
    base = augmentation_for(ds)
    a = cfg.augment
    return AugmentationSpec(
        max_translate_px=base.max_translate_px if a.max_translate_px is None else a.max_translate_px,
        horizontal_flip=base.horizontal_flip if a.horizontal_flip is None else a.horizontal_flip,
        pad_mode=a.pad_mode,
        jitter_std=base.jitter_std if a.jitter_std is None else a.jitter_std,
    )


def load_data(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    train = load_dataset(d.name, "train", n=d.n, noise=d.noise, seed=d.seed, num_classes=d.num_classes)
    test = load_dataset(d.name, "test", n=d.n_test, noise=d.noise, seed=d.seed, num_classes=d.num_classes)
    return train, test


def build_networks(cfg: TrainConfig, num_classes: int) -> tuple[ParamSet, ParamSet]:
    kw = {} if cfg.model.dropout is None else {"dropout_p": cfg.model.dropout}
    d_cfg = preset(cfg.model.discriminator, num_classes, **kw)
    g_cfg = preset(cfg.model.generator, num_classes)
    if g_cfg.output_shape != d_cfg.input_shape:
        raise ValueError(f"generator output {g_cfg.output_shape} does not match discriminator input {d_cfg.input_shape}")
    return build_model(d_cfg, derive(cfg.seed, 10)), build_model(g_cfg, derive(cfg.seed, 11))


def init_state(cfg: TrainConfig, train_set: Dataset | None = None, test_set: Dataset | None = None) -> TrainState:
    if train_set is None or test_set is None:
        train_set, test_set = load_data(cfg)
    student, gen = build_networks(cfg, train_set.num_classes)
    if tuple(student.config.input_shape) != train_set.sample_shape:
        raise ValueError(f"discriminator input {student.config.input_shape} does not match data {train_set.sample_shape}")
    split_seed = cfg.seed if cfg.data.split_seed is None else cfg.data.split_seed
    split_idx = split(train_set, SplitSpec(cfg.data.n_labeled, seed=split_seed, stratified=cfg.data.stratified))
    return TrainState(
        config=cfg,
        student=student,
        teacher=student.copy(),
        generator=gen,
        adam_d=AdamState.for_params(student),
        adam_g=AdamState.for_params(gen),
        train_set=train_set,
        test_set=test_set,
        split_idx=split_idx,
        aug_spec=resolve_augmentation(cfg, train_set),
    )


def sample_latent(seed, n: int, latent_dim: int) -> np.ndarray:
    """Latent codes z ~ U(0, 1)."""
    return generator(seed).random((n, latent_dim))


@dataclass
class IterationLog:
    supervised: float
    unsupervised: float
    consistency: float
    weighted_consistency: float
    discriminator: float
    generator: float


def train_iteration(state: TrainState, batch: PairedBatch, epoch: int) -> IterationLog:
    """Discriminator step, generator step, then the EMA teacher update."""
    cfg = state.config
    sched = cfg.schedule
    lr = learning_rate(epoch, sched)
    lam_cons = consistency_weight(epoch, sched)
    aug = state.augment_fn()
    latent = state.generator.config.latent_dim
    n_fake = batch.x_u.shape[0]
    key = (cfg.seed, epoch, batch.index)

    # discriminator
    with ad.no_grad():
        fake = forward_generator(state.generator, sample_latent(derive(key, 20), n_fake, latent)).data
    mix = MixupSample(batch.lam, batch.permutation)
    total, terms = discriminator_total_loss(
        state.student, state.teacher, batch.x_l, batch.y_l, batch.x_u, fake, lam_cons, cfg.consistency,
        batch.xi, batch.xi_prime, mix, aug,
    )
    if not math.isfinite(terms.total):
        raise NumericalDivergence(f"non-finite discriminator loss at epoch {epoch}, batch {batch.index}",
                                  terms.as_dict())
    state.student.zero_grad()
    ad.backward(total)
    adam_step(state.student, _grads(state.student), state.adam_d, lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps)

    # generator, fresh noise
    real_in = aug(batch.x_u, derive(key, 21))
    g_loss = generator_total_loss(state.student, state.generator, real_in,
                                  sample_latent(derive(key, 22), n_fake, latent),
                                  real_seed=derive(key, 23), fake_seed_=derive(key, 24))
    g_value = g_loss.item()
    if not math.isfinite(g_value):
        raise NumericalDivergence(f"non-finite generator loss at epoch {epoch}, batch {batch.index}",
                                  {**terms.as_dict(), "generator": g_value})
    state.generator.zero_grad()
    ad.backward(g_loss)
    adam_step(state.generator, _grads(state.generator), state.adam_g, lr, cfg.adam.beta1, cfg.adam.beta2,
              cfg.adam.eps)

    ema_update(state.teacher, state.student, sched.ema_k)
    state.iteration += 1
    return IterationLog(terms.supervised, terms.unsupervised, terms.consistency, terms.weighted_consistency,
                        terms.total, g_value)


# --------------------------------------------------------------------------
# evaluation


def predict(params: ParamSet, inputs: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Eval-mode K-class probabilities (fake class removed, renormalised)."""
    out = []
    with ad.no_grad():
        for i in range(0, inputs.shape[0], chunk):
            out.append(forward_discriminator(params, inputs[i : i + chunk], mode="eval").class_probs().data)
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes))


def evaluate(params: ParamSet, test: Dataset) -> float:
    """Test error in percent; argmax over real classes, ties to the lowest index."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.argmax(predict(params, test.inputs), axis=1)
    return 100.0 * float(np.count_nonzero(pred != test.labels)) / len(test)


@dataclass
class MetricsRecord:
    epoch: int
    iterations: int
    supervised: float
    unsupervised: float
    consistency: float
    generator: float
    student_error: float
    teacher_error: float
    lr: float
    lambda_cons: float
    wall_seconds: float = 0.0

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in METRICS_COLUMNS]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# --------------------------------------------------------------------------
# checkpoints


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for prefix, ps in (("student", state.student), ("teacher", state.teacher), ("generator", state.generator)):
        for k, v in ps.state_arrays().items():
            arrays[f"{prefix}/{k}"] = v
    for prefix, st in (("adam_d", state.adam_d), ("adam_g", state.adam_g)):
        for k in st.m:
            arrays[f"{prefix}/m/{k}"] = st.m[k]
            arrays[f"{prefix}/v/{k}"] = st.v[k]
    return arrays


def checkpoint_save(state: TrainState, path) -> Path:
    """Single file: magic, u64 header length, JSON header, little-endian float64 blob."""
    path = Path(path)
    arrays = _state_arrays(state)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "epoch": state.epoch,
        "iteration": state.iteration,
        "adam_t": {"adam_d": state.adam_d.t, "adam_g": state.adam_g.t},
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "arrays": entries,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validate and decode a checkpoint file into (header, arrays)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header in {path}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {header.get('format_version')} != supported {CHECKPOINT_VERSION}"
        )
    blob = raw[16 + hlen :]
    if len(blob) != header["blob_bytes"] or hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    arrays = {}
    for e in header["arrays"]:
        arr = np.frombuffer(blob, dtype=header["dtype"], count=e["nbytes"] // 8, offset=e["offset"])
        arrays[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return header, arrays


def _restore_params(ps: ParamSet, arrays: dict[str, np.ndarray], prefix: str) -> None:
    for k, t in ps.params.items():
        t.data[...] = arrays[f"{prefix}/param/{k}"]
    for k, b in ps.buffers.items():
        b[...] = arrays[f"{prefix}/buffer/{k}"]


def checkpoint_load(path, train_set: Dataset | None = None, test_set: Dataset | None = None) -> TrainState:
    from .config import config_from_dict

    header, arrays = read_checkpoint(path)
    cfg = config_from_dict(header["config"])
    state = init_state(cfg, train_set, test_set)
    expected = set(_state_arrays(state))
    if expected != set(arrays):
        raise CheckpointError("checkpoint arrays do not match the model built from its config")
    _restore_params(state.student, arrays, "student")
    _restore_params(state.teacher, arrays, "teacher")
    _restore_params(state.generator, arrays, "generator")
    for prefix, st in (("adam_d", state.adam_d), ("adam_g", state.adam_g)):
        for k in st.m:
            st.m[k][...] = arrays[f"{prefix}/m/{k}"]
            st.v[k][...] = arrays[f"{prefix}/v/{k}"]
        st.t = int(header["adam_t"][prefix])
    state.epoch = int(header["epoch"])
    state.iteration = int(header["iteration"])
    return state


# --------------------------------------------------------------------------
# run loop


def run_epoch(state: TrainState, epoch: int) -> dict[str, float]:
    cfg = state.config
    sums = {"supervised": 0.0, "unsupervised": 0.0, "consistency": 0.0, "generator": 0.0}
    n = 0
    for batch in batches(state.train_set, state.split_idx, cfg.batch_size, (cfg.seed, epoch),
                         alpha=cfg.schedule.alpha, labeled_batch_size=cfg.labeled_batch_size):
        it = train_iteration(state, batch, epoch)
        sums["supervised"] += it.supervised
        sums["unsupervised"] += it.unsupervised
        sums["consistency"] += it.consistency
        sums["generator"] += it.generator
        n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


def train(cfg_or_state, out_dir=None, stop_epoch: int | None = None) -> tuple[TrainState, list[MetricsRecord]]:
    """Train until ``schedule.total_epochs`` (or ``stop_epoch``); resumes from ``state.epoch``.

    With ``out_dir`` set, appends rows to ``metrics.csv``, timing to
    ``timing.csv`` and writes ``checkpoint.ckpt`` every ``checkpoint_every``
    epochs and at the end.
    """
    state = cfg_or_state if isinstance(cfg_or_state, TrainState) else init_state(cfg_or_state)
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    end = cfg.schedule.total_epochs if stop_epoch is None else min(stop_epoch, cfg.schedule.total_epochs)
    records: list[MetricsRecord] = []
    while state.epoch < end:
        epoch = state.epoch
        t0 = time.perf_counter()
        means = run_epoch(state, epoch)
        state.epoch = epoch + 1
        last = state.epoch == cfg.schedule.total_epochs
        if state.epoch % cfg.eval_every == 0 or last:
            rec = MetricsRecord(
                epoch=state.epoch,
                iterations=state.iteration,
                supervised=means["supervised"],
                unsupervised=means["unsupervised"],
                consistency=means["consistency"],
                generator=means["generator"],
                student_error=evaluate(state.student, state.test_set),
                teacher_error=evaluate(state.teacher, state.test_set),
                lr=learning_rate(epoch, cfg.schedule),
                lambda_cons=consistency_weight(epoch, cfg.schedule),
                wall_seconds=time.perf_counter() - t0,
            )
            records.append(rec)
            log.info("epoch %d student %.2f%% teacher %.2f%%", rec.epoch, rec.student_error, rec.teacher_error)
            if out is not None:
                _append_csv(out / "metrics.csv", METRICS_COLUMNS, rec.row())
                _append_csv(out / "timing.csv", ("epoch", "wall_seconds"), [str(rec.epoch), f"{rec.wall_seconds:.3f}"])
        if out is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == end):
            checkpoint_save(state, out / "checkpoint.ckpt")
    return state, records


def _append_csv(path: Path, header, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow(row)


# --------------------------------------------------------------------------
# exports


def export_embeddings(params: ParamSet, ds: Dataset, out) -> Path:
    """CSV with ``id, label, f0..f{F-1}`` from the layer feeding the classifier head (eval mode)."""
    out = Path(out)
    with ad.no_grad():
        feats = [forward_discriminator(params, ds.inputs[i : i + 512], mode="eval").features.data
                 for i in range(0, len(ds), 512)]
    width = params.config.layers[-1].n_in
    feats = np.concatenate(feats) if feats else np.zeros((0, width))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", *[f"f{j}" for j in range(width)]])
        for i in range(len(ds)):
            w.writerow([i, int(ds.labels[i]), *[repr(float(v)) for v in feats[i]]])
    return out


REPORT_COLUMNS = ("id", "label", "a_top1", "a_p1", "a_top2", "a_p2", "b_top1", "b_p1", "b_top2", "b_p2",
                  "top1_differs")


def consistency_report(params: ParamSet, ds: Dataset, n_samples: int, seed: int,
                       aug_spec: AugmentationSpec | None = None) -> list[list]:
    """Top-2 predictions of each sampled input under two independent augmentations."""
    spec = augmentation_for(ds, aug_spec)
    n_samples = min(n_samples, len(ds))
    if n_samples <= 0:
        return []
    idx = np.sort(generator(seed, 0).choice(len(ds), size=n_samples, replace=False))
    x = ds.inputs[idx]
    pa = predict(params, augment(x, spec, derive(seed, 1)))
    pb = predict(params, augment(x, spec, derive(seed, 2)))
    rows = []
    for j, i in enumerate(idx):
        oa = np.argsort(-pa[j], kind="stable")[:2]
        ob = np.argsort(-pb[j], kind="stable")[:2]
        rows.append([int(i), int(ds.labels[i]), int(oa[0]), float(pa[j, oa[0]]), int(oa[1]), float(pa[j, oa[1]]),
                     int(ob[0]), float(pb[j, ob[0]]), int(ob[1]), float(pb[j, ob[1]]), int(oa[0] != ob[0])])
    return rows


def disagreement_rate(rows: list[list]) -> float:
    return float(np.mean([r[-1] for r in rows])) if rows else 0.0


def write_report(rows: list[list], out) -> Path:
    out = Path(out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return out
