"""Dataset generation, training, evaluation metrics, and the modular
recalibration protocol.

Datasets hold difference-image frame sets with analytic force-distribution
labels on an even indentation grid, split 70/10/20 into train/val/test by a
per-sample hash of (seed, sample id). Training runs mini-batch Adam with
early stopping on the validation RMSE and restores the best checkpoint.
Recalibration freezes the trunk of a pretrained model, re-dimensions the
fusion layer for the new camera set, and retrains only the last fully
connected layer and the fusion layer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .contact import ForceDistribution, Indentation, bin_forces, contact_radius
from .errors import NumericalError, ValidationError
from .geometry import SensorConfig, config_hash, covered_bins, project_points
from .net import AdamState, Architecture, Dense, Dropout, NetworkModel, adam_step
from .optics import ParticleField, capture, render_rest_frames, sample_particle_field

DATASET_MAGIC = b"TDS1"
DATASET_VERSION = 1

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
_SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

_M64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def split_of_sample(seed: int, sample_id: int) -> int:
    """Deterministic train/val/test tag from (seed, sample id) alone."""
    u = _splitmix64(_splitmix64(int(seed) & _M64) ^ (int(sample_id) + 1)) / 2.0 ** 64
    if u < _SPLIT_FRACTIONS[0]:
        return SPLIT_TRAIN
    if u < _SPLIT_FRACTIONS[0] + _SPLIT_FRACTIONS[1]:
        return SPLIT_VAL
    return SPLIT_TEST


@dataclass
class Dataset:
    """Columnar sample store for one generated indentation sweep."""

    frames: np.ndarray    # (S, cameras, H, W) float32 difference images
    labels: np.ndarray    # (S, bins, 3) float32 forces, N
    centers: np.ndarray   # (S, 2) float32 mm
    depths: np.ndarray    # (S,) float32 mm
    splits: np.ndarray    # (S,) uint8
    seed: int
    config_sha: str       # hex sha256 of the generating config
    bin_nx: int
    bin_ny: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        self.centers = np.asarray(self.centers, dtype=np.float32)
        self.depths = np.asarray(self.depths, dtype=np.float32)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        s = len(self.frames)
        if not (len(self.labels) == len(self.centers) == len(self.depths) == len(self.splits) == s):
            raise ValidationError("dataset column lengths differ")

    def __len__(self):
        return len(self.frames)

    @property
    def camera_count(self):
        return self.frames.shape[1]

    @property
    def image_size(self):
        return self.frames.shape[2]

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def label_distribution(self, i: int) -> ForceDistribution:
        return ForceDistribution(
            self.labels[i].astype(np.float64), self.bin_nx, self.bin_ny
        )

    # -- binary file format --------------------------------------------------

    def save(self, path) -> None:
        s, cams, size, _ = self.frames.shape
        header = [
            DATASET_MAGIC,
            np.array([DATASET_VERSION, cams, size, self.bin_nx, self.bin_ny, s], dtype="<u4").tobytes(),
            np.array(self.seed, dtype="<u8").tobytes(),
            bytes.fromhex(self.config_sha),
        ]
        with open(path, "wb") as fh:
            for chunk in header:
                fh.write(chunk)
            for i in range(s):
                fh.write(np.array(self.splits[i], dtype="u1").tobytes())
                meta = np.array(
                    [self.centers[i, 0], self.centers[i, 1], self.depths[i]], dtype="<f4"
                )
                fh.write(meta.tobytes())
                fh.write(np.ascontiguousarray(self.frames[i], dtype="<f4").tobytes())
                # labels stored component-major: Fx plane, Fy plane, Fz plane
                fh.write(np.ascontiguousarray(self.labels[i].T, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != DATASET_MAGIC:
                raise ValidationError(f"bad dataset magic {magic!r}")
            version, cams, size, nx, ny, s = np.frombuffer(fh.read(24), dtype="<u4")
            if version != DATASET_VERSION:
                raise ValidationError(f"unsupported dataset version {version}")
            seed = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
            sha = fh.read(32).hex()
            nbins = int(nx) * int(ny)
            frames = np.empty((s, cams, size, size), dtype=np.float32)
            labels = np.empty((s, nbins, 3), dtype=np.float32)
            centers = np.empty((s, 2), dtype=np.float32)
            depths = np.empty(s, dtype=np.float32)
            splits = np.empty(s, dtype=np.uint8)
            frame_bytes = int(cams) * int(size) * int(size) * 4
            label_bytes = 3 * nbins * 4
            for i in range(s):
                splits[i] = np.frombuffer(fh.read(1), dtype="u1")[0]
                meta = np.frombuffer(fh.read(12), dtype="<f4")
                centers[i] = meta[:2]
                depths[i] = meta[2]
                frames[i] = np.frombuffer(fh.read(frame_bytes), dtype="<f4").reshape(
                    cams, size, size
                )
                labels[i] = np.frombuffer(fh.read(label_bytes), dtype="<f4").reshape(3, nbins).T
            if fh.read(1):
                raise ValidationError("trailing bytes in dataset file")
        return cls(frames, labels, centers, depths, splits, seed, sha, int(nx), int(ny))


def indentation_truncated(ind: Indentation, cfg: SensorConfig) -> bool:
    """True when the contact circle extends beyond the surface boundary."""
    a = contact_radius(ind)
    cx, cy = ind.center
    return (
        cx - a < 0.0
        or cx + a > cfg.surface_width_x
        or cy - a < 0.0
        or cy + a > cfg.surface_width_y
    )


def indentation_grid(cfg: SensorConfig, nx: int, ny: int, depths, margin: float = 4.0):
    """Evenly spaced indenter positions with a safety margin to the edges."""
    if nx < 1 or ny < 1:
        raise ValidationError("indentation grid must be at least 1x1")
    xs = np.linspace(margin, cfg.surface_width_x - margin, nx) if nx > 1 else np.array(
        [cfg.surface_width_x / 2.0]
    )
    ys = np.linspace(margin, cfg.surface_width_y - margin, ny) if ny > 1 else np.array(
        [cfg.surface_width_y / 2.0]
    )
    return [(float(x), float(y)) for y in ys for x in xs], [float(d) for d in depths]


DEFAULT_DEPTHS = (0.3, 0.6, 0.9, 1.2, 1.5)


def generate_dataset(
    cfg: SensorConfig,
    grid=(9, 9, DEFAULT_DEPTHS),
    field: ParticleField = None,
    tip_radius: float = 5.0,
    margin: float = 4.0,
) -> Dataset:
    """Render and label one sample per (grid position, depth).

    Samples are ordered position-major, depth fastest; the sample id in that
    order together with the config seed fixes the train/val/test split.
    """
    nx_ind, ny_ind, depths = grid
    positions, depths = indentation_grid(cfg, nx_ind, ny_ind, depths, margin)
    for d in depths:
        if d <= 0:
            raise ValidationError("indentation depths must be positive")
    if field is None:
        field = sample_particle_field(cfg)
    rest = render_rest_frames(field, cfg)

    count = len(positions) * len(depths)
    frames = np.empty((count, cfg.camera_count, cfg.image_size, cfg.image_size), np.float32)
    labels = np.empty((count, cfg.bin_count, 3), np.float32)
    centers = np.empty((count, 2), np.float32)
    depths_col = np.empty(count, np.float32)
    splits = np.empty(count, np.uint8)

    sid = 0
    for pos in positions:
        for d in depths:
            ind = Indentation(pos, d, tip_radius)
            dist = bin_forces(ind, cfg)
            fs = capture(dist, field, cfg, rest=rest, sample_id=sid)
            frames[sid] = fs.frames
            labels[sid] = dist.forces.astype(np.float32)
            centers[sid] = pos
            depths_col[sid] = d
            splits[sid] = split_of_sample(cfg.rng_seed, sid)
            sid += 1
    return Dataset(
        frames,
        labels,
        centers,
        depths_col,
        splits,
        cfg.rng_seed,
        config_hash(cfg),
        cfg.bin_nx,
        cfg.bin_ny,
    )


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class Metrics:
    """The two RMSE families, per axis (x, y, z), in newtons."""

    rmse_dist: np.ndarray   # (3,) over all bins and samples
    rmse_total: np.ndarray  # (3,) over per-sample bin totals

    def summary(self) -> str:
        d, t = self.rmse_dist, self.rmse_total
        return (
            f"RMSE_dist {d[0]:.6g} {d[1]:.6g} {d[2]:.6g} | "
            f"RMSE_total {t[0]:.6g} {t[1]:.6g} {t[2]:.6g}"
        )

    def four_metrics(self) -> dict:
        """The four error-vs-data figures: distribution / total, xy pooled / z."""
        return {
            "rmse_dist_xy": float(np.sqrt(0.5 * (self.rmse_dist[0] ** 2 + self.rmse_dist[1] ** 2))),
            "rmse_dist_z": float(self.rmse_dist[2]),
            "rmse_total_xy": float(
                np.sqrt(0.5 * (self.rmse_total[0] ** 2 + self.rmse_total[1] ** 2))
            ),
            "rmse_total_z": float(self.rmse_total[2]),
        }


def _model_xy(model: NetworkModel, dataset: Dataset, ids) -> tuple:
    """Assemble (frames, flattened labels) for a model's cameras and bins."""
    cams = list(model.arch.camera_ids)
    if max(cams) >= dataset.camera_count:
        raise ValidationError("model cameras exceed dataset camera count")
    if (model.arch.bin_nx, model.arch.bin_ny) != (dataset.bin_nx, dataset.bin_ny):
        raise ValidationError("model bin grid does not match dataset")
    if model.arch.image_size != dataset.image_size:
        raise ValidationError("model image size does not match dataset")
    x = dataset.frames[ids][:, cams]
    cov = np.asarray(model.arch.covered_bins, dtype=np.int64)
    lab = dataset.labels[ids][:, cov, :]                  # (n, ncov, 3)
    y = lab.transpose(0, 2, 1).reshape(len(ids), -1)      # component-major
    return x, y.astype(np.float32)


def _predict_batched(model: NetworkModel, x: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = [model.forward(x[i:i + batch], train=False) for i in range(0, len(x), batch)]
    return np.concatenate(outs, axis=0)


def _metrics_from_arrays(pred: np.ndarray, y: np.ndarray, ncov: int) -> Metrics:
    err = (pred.astype(np.float64) - y.astype(np.float64)).reshape(len(pred), 3, ncov)
    rmse_dist = np.sqrt((err ** 2).mean(axis=(0, 2)))
    rmse_total = np.sqrt((err.sum(axis=2) ** 2).mean(axis=0))
    return Metrics(rmse_dist, rmse_total)


def metrics(model: NetworkModel, dataset: Dataset, split: int = SPLIT_TEST, ids=None) -> Metrics:
    """RMSE on the force distribution and on the total force, per axis.

    Distribution RMSE pools the per-bin errors over all covered bins and
    samples of the split; total RMSE compares the per-axis sums over the
    covered bins.
    """
    if ids is None:
        ids = dataset.indices(split)
    ids = np.asarray(ids)
    if len(ids) == 0:
        raise ValidationError("empty sample set")
    x, y = _model_xy(model, dataset, ids)
    pred = _predict_batched(model, x)
    return _metrics_from_arrays(pred, y, len(model.arch.covered_bins))


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainHyper:
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 20
    max_epochs: int = 300
    data_fraction: float = 1.0
    loss: str = "mse"          # "mse" or literal "rmse"
    seed: int = 0
    eval_batch: int = 64
    warm_start_fusion: bool = True


def _ridge_fusion_init(fusion: Dense, features: np.ndarray, targets: np.ndarray) -> None:
    """Warm-start the linear fusion layer with a ridge solve.

    End-to-end SGD from a random fusion stalls on this task: the trunk can
    cut the output-variance part of the loss by collapsing its feature
    variance much faster than Adam can grow the O(1/feature-std) fusion
    weights, which leaves a dead constant predictor. Solving the readout in
    closed form first makes feature variance immediately valuable, so the
    subsequent joint fine-tuning pulls the trunk in a useful direction
    (the classic linear-probe-then-fine-tune schedule).
    """
    f = features.astype(np.float64)
    y = targets.astype(np.float64)
    mu_f = f.mean(axis=0)
    mu_y = y.mean(axis=0)
    fc = f - mu_f
    gram = fc.T @ fc
    lam = 1e-4 * max(np.trace(gram) / gram.shape[0], 1e-30)
    w = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), fc.T @ (y - mu_y))
    fusion.weight.data = w.astype(fusion.weight.data.dtype)
    fusion.bias.data = (mu_y - mu_f @ w).astype(fusion.bias.data.dtype)


@dataclass
class TrainReport:
    """Loss curve plus final test metrics for one training run."""

    train_loss: list          # per-epoch mean batch loss
    val_rmse: list            # per-epoch validation RMSE (all outputs pooled)
    best_epoch: int           # 1-based epoch of the restored checkpoint (0 = initial)
    epochs_run: int
    test: Metrics
    wall_time_s: float
    data_fraction: float
    frozen_layers: tuple
    n_train: int
    aborted: bool = False

    def write_csv(self, fh) -> None:
        """Per-epoch rows plus a final summary comment line.

        Wall time is deliberately left out so that identical runs produce
        byte-identical files.
        """
        fh.write("epoch,train_loss,val_rmse\n")
        for e, (tl, vr) in enumerate(zip(self.train_loss, self.val_rmse), start=1):
            fh.write(f"{e},{tl:.6g},{vr:.6g}\n")
        fh.write(f"# best_epoch={self.best_epoch} epochs_run={self.epochs_run} "
                 f"data_fraction={self.data_fraction:.6g}\n")
        fh.write(f"# {self.test.summary()}\n")


def _pooled_rmse(model, x, y, batch) -> float:
    pred = _predict_batched(model, x, batch)
    return float(np.sqrt(((pred.astype(np.float64) - y) ** 2).mean()))


def _train_loop(
    forward_backward,
    trainable,
    model_state,
    row_ids,
    val_eval,
    hyper: TrainHyper,
    rng: np.random.Generator,
):
    """Generic mini-batch loop with early stopping and best-state restore.

    `forward_backward(batch_rows) -> loss` must compute gradients into the
    trainable tensors for a batch of local row indices; `val_eval()` returns
    the validation RMSE; `model_state` must expose state_copy/load_state.
    """
    adam = AdamState(lr=hyper.lr)
    best = model_state.state_copy()
    best_val = val_eval()
    val_curve = []
    loss_curve = []
    best_epoch = 0
    bad_epochs = 0
    aborted = False
    epoch = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(row_ids)
        losses = []
        try:
            for k in range(0, len(order), hyper.batch_size):
                batch = order[k:k + hyper.batch_size]
                for _, t in trainable:
                    t.zero_grad()
                loss = forward_backward(batch)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                adam_step([t for _, t in trainable], adam)
                losses.append(loss)
        except NumericalError:
            model_state.load_state(best)
            aborted = True
            epoch -= 1
            break
        loss_curve.append(float(np.mean(losses)))
        val = val_eval()
        val_curve.append(val)
        if val < best_val:
            best_val = val
            best = model_state.state_copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > hyper.patience:
                break
    model_state.load_state(best)
    return loss_curve, val_curve, best_epoch, epoch, aborted


def _loss_and_grad(pred, y, kind):
    """Mean-squared (or literal root-mean-squared) loss and its gradient."""
    diff = (pred - y).astype(np.float64)
    mse = float((diff ** 2).mean())
    if kind == "mse":
        return mse, (2.0 / diff.size) * diff
    rmse = np.sqrt(mse) + 1e-12
    return float(rmse), diff / (diff.size * rmse)


def train(model: NetworkModel, dataset: Dataset, hyper: TrainHyper = None):
    """Fit a model on the dataset's train split; returns (report, model).

    Mini-batch Adam with early stopping on the validation RMSE (pooled over
    all outputs) and best-checkpoint restoration; final metrics come from
    the untouched test split. `hyper.data_fraction` trains on a seeded
    subsample of the train split, as used by the error-vs-data experiments.
    A non-finite loss aborts the run, restores the last best checkpoint, and
    flags the report.
    """
    if hyper is None:
        hyper = TrainHyper()
    if not 0.0 < hyper.data_fraction <= 1.0:
        raise ValidationError("data_fraction must lie in (0, 1]")
    if hyper.loss not in ("mse", "rmse"):
        raise ValidationError("loss must be 'mse' or 'rmse'")
    t0 = time.perf_counter()
    children = np.random.SeedSequence(hyper.seed).spawn(2)
    rng_shuffle = np.random.Generator(np.random.PCG64(children[0]))
    rng_fraction = np.random.Generator(np.random.PCG64(children[1]))
    model.reseed_dropout(hyper.seed)

    train_ids = dataset.indices(SPLIT_TRAIN)
    if hyper.data_fraction < 1.0:
        n_keep = max(1, int(round(hyper.data_fraction * len(train_ids))))
        train_ids = np.sort(rng_fraction.choice(train_ids, size=n_keep, replace=False))
    if len(train_ids) == 0:
        raise ValidationError("train split is empty")
    val_ids = dataset.indices(SPLIT_VAL)
    test_ids = dataset.indices(SPLIT_TEST)

    x_train, y_train = _model_xy(model, dataset, train_ids)
    if len(val_ids):
        x_val, y_val = _model_xy(model, dataset, val_ids)
    else:  # fall back to the train split so early stopping stays defined
        x_val, y_val = x_train, y_train

    trainable = model.parameters(trainable_only=True)

    if hyper.warm_start_fusion and hyper.max_epochs > 0 and not model.fusion.frozen:
        feats = np.concatenate(
            [
                model.features(x_train[i:i + hyper.eval_batch], train=False)
                for i in range(0, len(x_train), hyper.eval_batch)
            ]
        )
        _ridge_fusion_init(model.fusion, feats, y_train)

    def forward_backward(batch):
        pred = model.forward(x_train[batch], train=True)
        loss, dpred = _loss_and_grad(pred, y_train[batch], hyper.loss)
        model.backward(dpred.astype(np.float32))
        return loss

    def val_eval():
        return _pooled_rmse(model, x_val, y_val.astype(np.float64), hyper.eval_batch)

    loss_curve, val_curve, best_epoch, epochs_run, aborted = _train_loop(
        forward_backward, trainable, model, np.arange(len(train_ids)), val_eval, hyper, rng_shuffle
    )

    eval_ids = test_ids if len(test_ids) else train_ids
    test_metrics = metrics(model, dataset, ids=eval_ids)
    report = TrainReport(
        train_loss=loss_curve,
        val_rmse=val_curve,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        test=test_metrics,
        wall_time_s=time.perf_counter() - t0,
        data_fraction=hyper.data_fraction,
        frozen_layers=model.frozen_layer_names(),
        n_train=len(train_ids),
        aborted=aborted,
    )
    if aborted:
        raise NumericalError(
            "training aborted on non-finite loss; model restored to last good checkpoint"
        )
    return report, model


# ---------------------------------------------------------------------------
# Recalibration (freeze trunk, retrain last FC + fusion)

RECAL_TRAINABLE = ("fc2", "fusion")


class _HeadState:
    """state_copy/load_state adapter over the retrained layers only."""

    def __init__(self, layers):
        self.layers = layers

    def _arrays(self):
        out = []
        for lname, layer in self.layers:
            for pname, tensor in layer.params():
                out.append((f"{lname}.{pname}", tensor.data))
        return out

    def state_copy(self):
        return {n: a.copy() for n, a in self._arrays()}

    def load_state(self, state):
        for n, a in self._arrays():
            a[...] = state[n]


def expand_fusion(
    old: Dense,
    old_arch: Architecture,
    new_arch: Architecture,
    rng: np.random.Generator,
) -> Dense:
    """Fusion layer for a grown camera set, retaining learned weights.

    Feature columns of cameras shared with the old model and output rows of
    the previously covered bins keep their weights; blocks for new cameras
    and newly covered bins are freshly initialized.
    """
    new = Dense(
        new_arch.camera_count * new_arch.feature_width,
        new_arch.output_width,
        "linear",
        rng=rng,
    )
    fw = new_arch.feature_width
    old_cov = {b: i for i, b in enumerate(old_arch.covered_bins)}
    new_cov = list(new_arch.covered_bins)
    # map output rows: component-major layout, 3 components x covered bins
    old_rows = []
    new_rows = []
    for comp in range(3):
        for j, b in enumerate(new_cov):
            if b in old_cov:
                new_rows.append(comp * len(new_cov) + j)
                old_rows.append(comp * len(old_cov) + old_cov[b])
    old_rows = np.asarray(old_rows)
    new_rows = np.asarray(new_rows)
    for new_slot, cam in enumerate(new_arch.camera_ids):
        if cam not in old_arch.camera_ids:
            continue
        old_slot = old_arch.camera_ids.index(cam)
        src = old.weight.data[old_slot * fw:(old_slot + 1) * fw]
        dst = new.weight.data[new_slot * fw:(new_slot + 1) * fw]
        dst[:, new_rows] = src[:, old_rows]
    new.bias.data[new_rows] = old.bias.data[old_rows]
    return new


def recalibrate(
    model3: NetworkModel,
    dataset: Dataset,
    cfg: SensorConfig,
    fraction: float = 1.0,
    camera_ids=None,
    hyper: TrainHyper = None,
):
    """Extend a pretrained model to a larger camera set and retrain only the
    last fully connected layer and the fusion layer.

    The convolutional blocks, batch-norm statistics, and the first FC layer
    are copied from `model3` and frozen (bit-identical afterwards); the last
    FC layer is freshly initialized; the fusion layer grows to the new
    covered-bin set, retaining weights for the old cameras and bins. Frozen
    features are precomputed once per dataset, which is what makes
    recalibration much cheaper than full training.

    Returns (report, model) for the grown camera set.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("fraction must lie in (0, 1]")
    if hyper is None:
        hyper = TrainHyper()
    if camera_ids is None:
        camera_ids = tuple(range(dataset.camera_count))
    camera_ids = tuple(int(c) for c in camera_ids)
    if not set(model3.arch.camera_ids) <= set(camera_ids):
        raise ValidationError("new camera set must contain the pretrained cameras")
    if model3.arch.image_size != dataset.image_size:
        raise ValidationError("pretrained model does not match the dataset image size")
    t0 = time.perf_counter()

    covered = covered_bins(cfg, camera_ids)
    arch4 = Architecture(
        image_size=model3.arch.image_size,
        camera_ids=camera_ids,
        covered_bins=tuple(int(b) for b in covered),
        bin_nx=model3.arch.bin_nx,
        bin_ny=model3.arch.bin_ny,
        conv_channels=model3.arch.conv_channels,
        fc1_width=model3.arch.fc1_width,
        feature_width=model3.arch.feature_width,
        dropout_rate=model3.arch.dropout_rate,
    )
    ss = np.random.SeedSequence(hyper.seed)
    child = ss.spawn(4)
    rng_init = np.random.Generator(np.random.PCG64(child[0]))
    rng_shuffle = np.random.Generator(np.random.PCG64(child[1]))
    rng_fraction = np.random.Generator(np.random.PCG64(child[2]))

    model = NetworkModel(arch4, _init=False)
    # copy the shared trunk (conv/BN/first FC) and freeze it
    src = dict(model3.named_layers())
    for lname, layer in model.named_layers():
        if lname in ("fc2", "fusion"):
            continue
        for (pname, tensor), (_, s_tensor) in zip(layer.params(), src[lname].params()):
            tensor.data = s_tensor.data.copy()
        if hasattr(layer, "state"):
            layer.running_mean = src[lname].running_mean.copy()
            layer.running_var = src[lname].running_var.copy()
        layer.frozen = True
    # fresh last FC, expanded fusion
    fc2 = Dense(arch4.fc1_width, arch4.feature_width, "sigmoid", rng=rng_init)
    for k, layer in enumerate(model.head):
        if isinstance(layer, Dense):
            model.head[k] = fc2
    model.fusion = expand_fusion(model3.fusion, model3.arch, arch4, rng_init)
    model.reseed_dropout(hyper.seed)

    train_ids = dataset.indices(SPLIT_TRAIN)
    n_keep = max(1, int(round(fraction * len(train_ids))))
    if fraction < 1.0:
        train_ids = np.sort(rng_fraction.choice(train_ids, size=n_keep, replace=False))
    val_ids = dataset.indices(SPLIT_VAL)

    x_train, y_train = _model_xy(model, dataset, train_ids)
    x_val, y_val = _model_xy(model, dataset, val_ids if len(val_ids) else train_ids)

    # frozen-trunk feature cache (eval-mode batch norm, pre-dropout)
    def trunk_features(x):
        n, cams, h, w = x.shape
        z = x.reshape(n * cams, h, w, 1)
        for layer in model.trunk:
            z = layer.forward(z, False)
        return z

    f_train = trunk_features(x_train)
    f_val = trunk_features(x_val)
    n_cams = arch4.camera_count
    fw = arch4.feature_width

    head = [layer for layer in model.head]

    if hyper.warm_start_fusion and hyper.max_epochs > 0:
        z = f_train
        for layer in head:
            z = layer.forward(z, False)
        _ridge_fusion_init(
            model.fusion, z.reshape(len(train_ids), n_cams * fw), y_train
        )

    def head_forward(feat, n, train):
        z = feat
        for layer in head:
            z = layer.forward(z, train)
        return model.fusion.forward(z.reshape(n, n_cams * fw), train)

    def forward_backward(batch):
        rows = (batch[:, None] * n_cams + np.arange(n_cams)[None, :]).ravel()
        pred = head_forward(f_train[rows], len(batch), True)
        loss, dpred = _loss_and_grad(pred, y_train[batch], hyper.loss)
        dfeat = model.fusion.backward(dpred.astype(np.float32))
        dz = dfeat.reshape(len(batch) * n_cams, fw)
        for layer in reversed(head):
            dz = layer.backward(dz)
        return loss

    def val_eval():
        preds = []
        for i in range(0, len(x_val), hyper.eval_batch):
            n = len(x_val[i:i + hyper.eval_batch])
            rows = np.arange(i * n_cams, (i + n) * n_cams)
            preds.append(head_forward(f_val[rows], n, False))
        pred = np.concatenate(preds)
        return float(np.sqrt(((pred.astype(np.float64) - y_val) ** 2).mean()))

    trainable = model.parameters(trainable_only=True)
    state = _HeadState([("fc2", fc2), ("fusion", model.fusion)])
    loss_curve, val_curve, best_epoch, epochs_run, aborted = _train_loop(
        forward_backward,
        trainable,
        state,
        np.arange(len(train_ids)),
        val_eval,
        hyper,
        rng_shuffle,
    )

    test_ids = dataset.indices(SPLIT_TEST)
    test_metrics = metrics(model, dataset, ids=test_ids if len(test_ids) else train_ids)
    report = TrainReport(
        train_loss=loss_curve,
        val_rmse=val_curve,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        test=test_metrics,
        wall_time_s=time.perf_counter() - t0,
        data_fraction=fraction,
        frozen_layers=model.frozen_layer_names(),
        n_train=len(train_ids),
        aborted=aborted,
    )
    if aborted:
        raise NumericalError(
            "recalibration aborted on non-finite loss; model restored to last good checkpoint"
        )
    return report, model


# ---------------------------------------------------------------------------
# Multi-contact evaluation


@dataclass
class MultiContactReport:
    supported: bool
    maxima: list            # [(bin_ix, bin_iy, value), ...] above threshold
    true_peaks: list        # per contact: (bin_ix, bin_iy, value)
    matched: list           # per contact: True when a maximum lies within 2 bins
    spurious: int           # maxima not matched to any contact
    success: bool
    note: str = ""


def _containing_cameras(ind: Indentation, cfg: SensorConfig) -> set:
    """Cameras whose FOV contains the whole contact circle."""
    a = contact_radius(ind)
    cx, cy = ind.center
    probes = np.array(
        [
            (cx, cy, cfg.particle_plane_height),
            (cx - a, cy, cfg.particle_plane_height),
            (cx + a, cy, cfg.particle_plane_height),
            (cx, cy - a, cfg.particle_plane_height),
            (cx, cy + a, cfg.particle_plane_height),
        ]
    )
    cams = set()
    for cam in range(cfg.camera_count):
        _, valid = project_points(probes, cam, cfg)
        if valid.all():
            cams.add(cam)
    return cams


def grid_local_maxima(grid: np.ndarray, threshold: float, radius: int = 2):
    """Bins that dominate their 8-neighborhood and exceed the threshold,
    deduplicated by non-maximum suppression within `radius` bins."""
    ny, nx = grid.shape
    padded = np.full((ny + 2, nx + 2), -np.inf)
    padded[1:-1, 1:-1] = grid
    is_max = np.ones_like(grid, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_max &= grid >= padded[1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
    cand = [(grid[iy, ix], ix, iy) for iy, ix in zip(*np.nonzero(is_max & (grid > threshold)))]
    cand.sort(reverse=True)
    kept = []
    for val, ix, iy in cand:
        if all(max(abs(ix - kx), abs(iy - ky)) > radius for _, kx, ky in kept):
            kept.append((val, ix, iy))
    return [(ix, iy, float(val)) for val, ix, iy in kept]


def multi_contact_eval(
    model: NetworkModel,
    ind_a: Indentation,
    ind_b: Indentation,
    field: ParticleField,
    cfg: SensorConfig,
    rest: np.ndarray = None,
) -> MultiContactReport:
    """Detect two simultaneous contacts with a single-indentation model.

    Renders the superposed displacement field of both loads, predicts, and
    looks for local maxima of the predicted Fz grid above half the weaker
    true peak. Success requires one maximum within 2 bins of each true
    center and no spurious maximum above the threshold. Pairs that do not
    occupy two distinct camera FOVs are flagged unsupported, not failed.
    """
    cams_a = _containing_cameras(ind_a, cfg)
    cams_b = _containing_cameras(ind_b, cfg)
    if not (cams_a and cams_b) or not (cams_a - cams_b or cams_b - cams_a):
        return MultiContactReport(
            supported=False,
            maxima=[],
            true_peaks=[],
            matched=[],
            spurious=0,
            success=False,
            note="unsupported regime: contacts are not in distinct camera FOVs",
        )

    dist_a = bin_forces(ind_a, cfg)
    dist_b = bin_forces(ind_b, cfg)
    fs = capture(dist_a + dist_b, field, cfg, rest=rest)

    x = fs.frames[list(model.arch.camera_ids)][None, ...]
    pred = model.forward(x, train=False)[0]
    ncov = len(model.arch.covered_bins)
    fz = np.zeros(model.arch.bin_nx * model.arch.bin_ny)
    fz[np.asarray(model.arch.covered_bins)] = pred[2 * ncov:3 * ncov]
    grid = fz.reshape(model.arch.bin_ny, model.arch.bin_nx)

    peaks = []
    for dist in (dist_a, dist_b):
        g = dist.component_grid(2)
        iy, ix = np.unravel_index(np.argmax(g), g.shape)
        peaks.append((int(ix), int(iy), float(g[iy, ix])))
    threshold = 0.5 * min(p[2] for p in peaks)

    maxima = grid_local_maxima(grid, threshold)
    matched = []
    used = set()
    for px, py, _ in peaks:
        hit = None
        for k, (mx, my, _v) in enumerate(maxima):
            if k in used:
                continue
            if max(abs(mx - px), abs(my - py)) <= 2:
                hit = k
                break
        if hit is not None:
            used.add(hit)
        matched.append(hit is not None)
    spurious = len(maxima) - len(used)
    success = all(matched) and spurious == 0 and len(maxima) == 2
    return MultiContactReport(
        supported=True,
        maxima=maxima,
        true_peaks=peaks,
        matched=matched,
        spurious=spurious,
        success=success,
    )
