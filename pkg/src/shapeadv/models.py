"""Victim classifier and point-cloud auto-encoder, with their training loops.

The classifier is a per-point MLP (3 -> 64 -> 128 -> 256) followed by a
global max-pool and a dense head (256 -> 128 -> C); the only cross-point
reduction is the max-pool, so logits are exactly permutation-invariant and
any N >= 1 is accepted. The encoder mirrors the same trunk down to a
128-dimensional latent code. Two decoders are provided: a dense MLP
(128 -> 256 -> 512 -> 3P) and a patch decoder that warps Q fixed 2D grids
through per-patch MLPs conditioned on the code.

No normalization layers anywhere: training is bitwise deterministic given
the seed, which the rest of the pipeline relies on.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import as_cloud, chamfer_sq_node
from .tensor import AdamState, Tape, adam_step

__all__ = [
    "TrainConfig",
    "ClassifierModel",
    "AutoencoderModel",
    "LATENT_DIM",
    "predict",
    "predict_batch",
    "logits_of",
    "encode",
    "decode",
    "reconstruct",
    "train_classifier",
    "train_autoencoder",
]

LATENT_DIM = 128
POINT_WIDTHS = (3, 64, 128, 256)
HEAD_HIDDEN = 128
DECODER_HIDDEN = (256, 512)
PATCH_COUNT = 4
PATCH_HIDDEN = 128


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


def _he_init(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)


def _linear_init(rng, fan_in, fan_out):
    return rng.standard_normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in)


def _bind(tape: Tape, weights: dict, trainable: bool) -> dict:
    make = tape.parameter if trainable else tape.constant
    return {name: make(arr) for name, arr in weights.items()}


# ----------------------------------------------------------------------
# classifier
# ----------------------------------------------------------------------


@dataclass
class ClassifierModel:
    """PointNet-style classifier: shared per-point MLP, max-pool, dense head."""

    n_classes: int
    weights: dict
    head_hidden: int = HEAD_HIDDEN
    seed: int = 0
    history: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def init(cls, n_classes: int, seed: int = 0, head_hidden: int = HEAD_HIDDEN):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        rng = np.random.default_rng(seed)
        w = {}
        for i, (fi, fo) in enumerate(zip(POINT_WIDTHS, POINT_WIDTHS[1:])):
            w[f"pw{i}"] = _he_init(rng, fi, fo)
            w[f"pb{i}"] = np.zeros(fo)
        w["hw0"] = _he_init(rng, POINT_WIDTHS[-1], head_hidden)
        w["hb0"] = np.zeros(head_hidden)
        w["hw1"] = _linear_init(rng, head_hidden, n_classes)
        w["hb1"] = np.zeros(n_classes)
        return cls(n_classes=n_classes, weights=w, head_hidden=head_hidden, seed=seed)

    def _trunk(self, tape, cloud, bound):
        h = cloud
        for i in range(len(POINT_WIDTHS) - 1):
            h = tape.relu(tape.affine(h, bound[f"pw{i}"], bound[f"pb{i}"]))
        return h

    def logits_node(self, tape: Tape, cloud: int, trainable: bool = False) -> int:
        """Logits (C,) for a single (N, 3) cloud node."""
        bound = _bind(tape, self.weights, trainable)
        feats = self._trunk(tape, cloud, bound)
        pooled = tape.reshape(tape.max_reduce(feats, axis=0), (1, POINT_WIDTHS[-1]))
        h = tape.relu(tape.affine(pooled, bound["hw0"], bound["hb0"]))
        out = tape.affine(h, bound["hw1"], bound["hb1"])
        return tape.reshape(out, (self.n_classes,))

    def logits_node_batch(
        self, tape: Tape, stack: int, n_points: int, trainable: bool = False
    ) -> tuple[int, dict]:
        """Logits (B, C) for a (B*n_points, 3) stacked cloud node."""
        bound = _bind(tape, self.weights, trainable)
        feats = self._trunk(tape, stack, bound)
        pooled = tape.group_max(feats, n_points)
        h = tape.relu(tape.affine(pooled, bound["hw0"], bound["hb0"]))
        return tape.affine(h, bound["hw1"], bound["hb1"]), bound

    def to_manifest(self):
        meta = {"n_classes": self.n_classes, "head_hidden": self.head_hidden, "seed": self.seed}
        return "classifier", meta, self.weights

    @classmethod
    def from_manifest(cls, meta, weights):
        return cls(
            n_classes=int(meta["n_classes"]),
            weights=weights,
            head_hidden=int(meta.get("head_hidden", HEAD_HIDDEN)),
            seed=int(meta.get("seed", 0)),
        )


def logits_of(model: ClassifierModel, pc) -> np.ndarray:
    tape = Tape()
    cloud = tape.constant(as_cloud(pc))
    node = model.logits_node(tape, cloud)
    return tape.evaluate()[node]


def predict(model: ClassifierModel, pc) -> int:
    """Argmax prediction; ties break toward the lowest class index."""
    return int(np.argmax(logits_of(model, pc)))


def predict_batch(model: ClassifierModel, clouds, chunk: int = 64) -> np.ndarray:
    """Predictions for same-sized clouds, evaluated in stacked chunks."""
    clouds = [as_cloud(c) for c in clouds]
    n = clouds[0].shape[0]
    if any(c.shape[0] != n for c in clouds):
        raise ValueError("predict_batch requires equal-sized clouds")
    out = np.empty(len(clouds), dtype=np.int64)
    for lo in range(0, len(clouds), chunk):
        part = clouds[lo : lo + chunk]
        tape = Tape()
        stack = tape.constant(np.concatenate(part, axis=0))
        node, _ = model.logits_node_batch(tape, stack, n)
        out[lo : lo + len(part)] = tape.evaluate()[node].argmax(axis=1)
    return out


# ----------------------------------------------------------------------
# auto-encoder
# ----------------------------------------------------------------------


def _patch_grid(points_per_patch: int) -> np.ndarray:
    side = math.isqrt(points_per_patch)
    if side * side != points_per_patch:
        raise ValueError(f"points per patch must be square, got {points_per_patch}")
    ticks = np.linspace(0.0, 1.0, side)
    u, v = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([u.ravel(), v.ravel()])


@dataclass
class AutoencoderModel:
    """Permutation-invariant encoder to 128 dims plus an MLP or patch decoder."""

    n_points: int
    decoder: str  # "mlp" | "patch"
    weights: dict
    latent_dim: int = LATENT_DIM
    seed: int = 0
    history: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def init(cls, n_points: int = 256, decoder: str = "mlp", seed: int = 0):
        if decoder not in ("mlp", "patch"):
            raise ValueError(f"unknown decoder kind {decoder!r}")
        rng = np.random.default_rng(seed)
        w = {}
        for i, (fi, fo) in enumerate(zip(POINT_WIDTHS, POINT_WIDTHS[1:])):
            w[f"ew{i}"] = _he_init(rng, fi, fo)
            w[f"eb{i}"] = np.zeros(fo)
        w["ez"] = _linear_init(rng, POINT_WIDTHS[-1], LATENT_DIM)
        w["ezb"] = np.zeros(LATENT_DIM)
        if decoder == "mlp":
            widths = (LATENT_DIM,) + DECODER_HIDDEN + (3 * n_points,)
            for i, (fi, fo) in enumerate(zip(widths, widths[1:])):
                init = _he_init if i < len(widths) - 2 else _linear_init
                w[f"dw{i}"] = init(rng, fi, fo)
                w[f"db{i}"] = np.zeros(fo)
        else:
            if n_points % PATCH_COUNT:
                raise ValueError(f"n_points must divide into {PATCH_COUNT} patches")
            _patch_grid(n_points // PATCH_COUNT)  # validate grid size early
            widths = (2 + LATENT_DIM, PATCH_HIDDEN, PATCH_HIDDEN, 3)
            for q in range(PATCH_COUNT):
                for i, (fi, fo) in enumerate(zip(widths, widths[1:])):
                    init = _he_init if i < len(widths) - 2 else _linear_init
                    w[f"d{q}w{i}"] = init(rng, fi, fo)
                    w[f"d{q}b{i}"] = np.zeros(fo)
        return cls(n_points=n_points, decoder=decoder, weights=w, seed=seed)

    # --- graph builders -------------------------------------------------

    def encode_node(self, tape: Tape, cloud: int, trainable: bool = False) -> int:
        bound = _bind(tape, {k: v for k, v in self.weights.items() if k.startswith("e")}, trainable)
        h = cloud
        for i in range(len(POINT_WIDTHS) - 1):
            h = tape.relu(tape.affine(h, bound[f"ew{i}"], bound[f"eb{i}"]))
        pooled = tape.reshape(tape.max_reduce(h, axis=0), (1, POINT_WIDTHS[-1]))
        z = tape.affine(pooled, bound["ez"], bound["ezb"])
        return tape.reshape(z, (self.latent_dim,))

    def _encoder_weights(self):
        return {k: v for k, v in self.weights.items() if k.startswith("e")}

    def _decoder_weights(self):
        return {k: v for k, v in self.weights.items() if k.startswith("d")}

    def encode_node_batch(self, tape, stack, n_points, trainable=False) -> tuple[int, dict]:
        bound = _bind(tape, self._encoder_weights(), trainable)
        h = stack
        for i in range(len(POINT_WIDTHS) - 1):
            h = tape.relu(tape.affine(h, bound[f"ew{i}"], bound[f"eb{i}"]))
        pooled = tape.group_max(h, n_points)
        return tape.affine(pooled, bound["ez"], bound["ezb"]), bound

    def decode_node(self, tape: Tape, z: int, trainable: bool = False) -> int:
        """Decoded (P, 3) cloud node for a (latent_dim,) code node."""
        zb = tape.reshape(z, (1, self.latent_dim))
        cloud_rows, _ = self.decode_node_batch(tape, zb, 1, trainable)
        return tape.reshape(cloud_rows, (self.n_points, 3))

    def decode_node_batch(self, tape, zbatch, batch, trainable=False) -> tuple[int, dict]:
        """Decoded (B*P, 3) rows (examples contiguous) for (B, latent) codes."""
        bound = _bind(tape, self._decoder_weights(), trainable)
        if self.decoder == "mlp":
            h = zbatch
            n_layers = len(DECODER_HIDDEN) + 1
            for i in range(n_layers):
                h = tape.affine(h, bound[f"dw{i}"], bound[f"db{i}"])
                if i < n_layers - 1:
                    h = tape.relu(h)
            return tape.reshape(h, (batch * self.n_points, 3)), bound
        per_patch = self.n_points // PATCH_COUNT
        grid = _patch_grid(per_patch)
        rep = tape.gather(zbatch, np.repeat(np.arange(batch), per_patch))
        grid_tile = tape.constant(np.tile(grid, (batch, 1)))
        patch_rows = []
        for q in range(PATCH_COUNT):
            h = tape.concat_cols([grid_tile, rep])
            for i in range(3):
                h = tape.affine(h, bound[f"d{q}w{i}"], bound[f"d{q}b{i}"])
                if i < 2:
                    h = tape.relu(h)
            patch_rows.append(h)
        if batch == 1:
            return tape.concat_rows(patch_rows), bound
        # interleave back to contiguous per-example blocks
        parts = []
        for e in range(batch):
            idx = np.arange(e * per_patch, (e + 1) * per_patch)
            for q in range(PATCH_COUNT):
                parts.append(tape.gather(patch_rows[q], idx))
        return tape.concat_rows(parts), bound

    def to_manifest(self):
        meta = {
            "n_points": self.n_points,
            "decoder": self.decoder,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
        }
        return "autoencoder", meta, self.weights

    @classmethod
    def from_manifest(cls, meta, weights):
        return cls(
            n_points=int(meta["n_points"]),
            decoder=str(meta["decoder"]),
            weights=weights,
            latent_dim=int(meta.get("latent_dim", LATENT_DIM)),
            seed=int(meta.get("seed", 0)),
        )


def encode(ae: AutoencoderModel, pc) -> np.ndarray:
    tape = Tape()
    node = ae.encode_node(tape, tape.constant(as_cloud(pc)))
    return tape.evaluate()[node]


def decode(ae: AutoencoderModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (ae.latent_dim,):
        raise ValueError(f"expected a ({ae.latent_dim},) code, got {z.shape}")
    tape = Tape()
    node = ae.decode_node(tape, tape.constant(z))
    return tape.evaluate()[node]


def reconstruct(ae: AutoencoderModel, pc) -> np.ndarray:
    return decode(ae, encode(ae, pc))


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def _accuracy(model, examples, chunk=64) -> float:
    clouds = [c for c, _ in examples]
    labels = np.array([lab for _, lab in examples])
    return float((predict_batch(model, clouds, chunk) == labels).mean())


def train_classifier(dataset, cfg: TrainConfig, log=None) -> ClassifierModel:
    """Minimize cross-entropy with Adam; deterministic given cfg.seed.

    Per-epoch train/test accuracy lands in ``model.history`` and on the
    optional ``log`` callable.
    """
    labels_seen = {lab for _, lab in dataset.train}
    if len(labels_seen) < 2 or labels_seen != set(range(dataset.n_classes)):
        raise ValueError("every class needs at least one training example")
    model = ClassifierModel.init(dataset.n_classes, seed=cfg.seed)
    n = dataset.train[0][0].shape[0]
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    state = AdamState(lr=cfg.lr)
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset.train))
        correct = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset.train[i] for i in order[lo : lo + cfg.batch_size]]
            stack = np.concatenate([c for c, _ in batch], axis=0)
            labels = np.array([lab for _, lab in batch])
            tape = Tape()
            logits, bound = model.logits_node_batch(tape, tape.constant(stack), n, trainable=True)
            loss = tape.mean_reduce(tape.softmax_xent(logits, labels))
            vals = tape.evaluate()
            correct += int((vals[logits].argmax(axis=1) == labels).sum())
            grads = tape.gradient(loss, vals)
            adam_step(state, model.weights, {name: grads[nid] for name, nid in bound.items()})
        entry = {
            "epoch": epoch,
            "train_acc": correct / len(dataset.train),
            "test_acc": _accuracy(model, dataset.test) if dataset.test else float("nan"),
            "seconds": time.time() - t0,
        }
        model.history.append(entry)
        if log:
            log(
                f"epoch {epoch:3d}  train_acc {entry['train_acc']:.4f}  "
                f"test_acc {entry['test_acc']:.4f}"
            )
    return model


def train_autoencoder(dataset, cfg: TrainConfig, decoder: str = "mlp", log=None) -> AutoencoderModel:
    """Minimize mean squared Chamfer reconstruction error over all classes."""
    if not dataset.train:
        raise ValueError("empty training set")
    n = dataset.train[0][0].shape[0]
    model = AutoencoderModel.init(n_points=n, decoder=decoder, seed=cfg.seed)
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    state = AdamState(lr=cfg.lr)
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset.train))
        total = 0.0
        batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset.train[i][0] for i in order[lo : lo + cfg.batch_size]]
            b = len(batch)
            tape = Tape()
            stack = tape.constant(np.concatenate(batch, axis=0))
            zb, enc_bound = model.encode_node_batch(tape, stack, n, trainable=True)
            rows, dec_bound = model.decode_node_batch(tape, zb, b, trainable=True)
            loss = None
            for e, cloud in enumerate(batch):
                rec = tape.gather(rows, np.arange(e * model.n_points, (e + 1) * model.n_points))
                term = chamfer_sq_node(tape, tape.constant(cloud), rec)
                loss = term if loss is None else tape.add(loss, term)
            loss = tape.smul(loss, 1.0 / b)
            vals = tape.evaluate()
            total += float(vals[loss])
            batches += 1
            grads = tape.gradient(loss, vals)
            bound = {**enc_bound, **dec_bound}
            adam_step(state, model.weights, {name: grads[nid] for name, nid in bound.items()})
        entry = {"epoch": epoch, "train_chamfer": total / batches, "seconds": time.time() - t0}
        model.history.append(entry)
        if log:
            log(f"epoch {epoch:3d}  train_chamfer {entry['train_chamfer']:.6f}")
    return model
