"""Pretraining loops, linear probing, adversarial evaluation, checkpoints.

One ``TrainConfig`` describes a full experiment: data source, encoder,
optimizer and schedule, loss family, embedding space, and attack
parameters.  Reruns with the same config and seed reproduce the metrics
stream bit-identically in float64 mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autograd as ag
from .adversarial import AttackConfig, pgd_ascend, rhcl_loss
from .autograd import Tensor
from .ball import BallConfig
from .config import ConfigError, format_config, parse_config_text
from .data import AugmentationPolicy, Dataset, augment_pair
from .losses import (
    Space,
    hcl_loss,
    info_nce_cosine,
    project_embeddings,
    shcl_loss,
    supcon_cosine,
)
from .models import ContrastiveModel, Linear, build_model

CHECKPOINT_MAGIC = b"PCON1"

LOSS_FAMILIES = ("infonce-cos", "hcl", "supcon", "shcl", "rhcl")
_HYPERBOLIC = ("hcl", "shcl", "rhcl")
_SUPERVISED = ("supcon", "shcl")
_DTYPES = {"float32": np.float32, "float64": np.float64}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# Flat registry of every config key: (default, help).  The CLI renders this
# table for --help and validates --set overrides against it.
CONFIG_KEYS: dict[str, tuple[object, str]] = {
    "loss": ("hcl", "loss family: infonce-cos | hcl | supcon | shcl | rhcl"),
    "c": (0.1, "ball curvature; the cifar preset uses 0.6"),
    "boundary_eps": (1e-5, "safety margin keeping points inside the ball"),
    "tau": (0.5, "softmax temperature"),
    "normalize_first": (True, "L2-normalize embeddings before the exponential map"),
    "encoder": ("mlp", "encoder kind: mlp | conv-stem-mlp"),
    "widths": ([512, 256], "encoder layer widths; the last is the probe feature dim"),
    "proj_dim": (128, "projection head output dimension"),
    "stem_channels": (16, "channels of the optional 3x3 conv stem"),
    "batch_size": (256, "sources per step (2x rows after pairing views)"),
    "epochs": (20, "pretraining epochs"),
    "lr": (0.1, "base learning rate, cosine-annealed to 0"),
    "momentum": (0.9, "SGD momentum"),
    "weight_decay": (1e-4, "coupled L2 weight decay"),
    "dtype": ("float64", "training storage dtype: float32 | float64"),
    "seed": (0, "seed for init, shuffling, views, and attacks"),
    "view_noise": (0.25, "gaussian view jitter for vector datasets"),
    "probe_epochs": (30, "linear probe epochs (step decay at 60%/80%)"),
    "probe_lr": (0.1, "linear probe learning rate"),
    "attack_epsilon": (8.0 / 255.0, "l-inf attack radius in pixel units"),
    "attack_alpha": (2.0 / 255.0, "attack step size"),
    "attack_steps": (7, "attack iterations during rhcl training"),
    "eval_attack_steps": (10, "attack iterations during robust evaluation"),
    "rhcl_lambda": (1.0, "weight of the adversarial-anchor loss term"),
    "attack_random_start": (False, "start attacks from a random point in the box"),
    "data_kind": ("tree", "dataset: tree | synth-image | cifar"),
    "data_path": ("", "dataset location (htree file, or cifar batches dir)"),
    "use_labels": (True, "expose labels to supervised losses"),
    "tree_branching": (2, "tree branching factor b"),
    "tree_depth": (3, "tree depth (leaves level)"),
    "tree_class_level": (1, "ancestor level defining class labels"),
    "tree_feature_dim": (16, "tree feature dimension"),
    "tree_edge_noise": (1.0, "per-edge gaussian noise scale"),
    "tree_obs_noise": (0.25, "per-sample observation noise scale"),
    "tree_samples_per_leaf": (40, "samples drawn per leaf"),
    "synth_classes": (10, "classes in the procedural image set"),
    "synth_per_class": (100, "train images per class in the procedural set"),
    "synth_test_per_class": (40, "test images per class in the procedural set"),
}

CONFIG_SECTIONS = {
    "train": [
        "loss", "tau", "batch_size", "epochs", "lr", "momentum", "weight_decay",
        "dtype", "seed", "view_noise", "normalize_first",
    ],
    "ball": ["c", "boundary_eps"],
    "encoder": ["encoder", "widths", "proj_dim", "stem_channels"],
    "probe": ["probe_epochs", "probe_lr"],
    "attack": [
        "attack_epsilon", "attack_alpha", "attack_steps", "eval_attack_steps",
        "rhcl_lambda", "attack_random_start",
    ],
    "data": [
        "data_kind", "data_path", "use_labels", "tree_branching", "tree_depth",
        "tree_class_level", "tree_feature_dim", "tree_edge_noise",
        "tree_obs_noise", "tree_samples_per_leaf", "synth_classes",
        "synth_per_class", "synth_test_per_class",
    ],
}

# Hyperparameters at publication scale, kept as a named preset for
# reference; the flat defaults above are the desk preset.
PAPER_PRESET = {
    "lr": 0.5,
    "batch_size": 512,
    "epochs": 200,
    "probe_epochs": 100,
    "probe_lr": 10.0,
    "c": 0.6,
}


@dataclass
class TrainConfig:
    loss: str = "hcl"
    c: float = 0.1
    boundary_eps: float = 1e-5
    tau: float = 0.5
    normalize_first: bool = True
    encoder: str = "mlp"
    widths: tuple = (512, 256)
    proj_dim: int = 128
    stem_channels: int = 16
    batch_size: int = 256
    epochs: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dtype: str = "float64"
    seed: int = 0
    view_noise: float = 0.25
    probe_epochs: int = 30
    probe_lr: float = 0.1
    attack_epsilon: float = 8.0 / 255.0
    attack_alpha: float = 2.0 / 255.0
    attack_steps: int = 7
    eval_attack_steps: int = 10
    rhcl_lambda: float = 1.0
    attack_random_start: bool = False
    data_kind: str = "tree"
    data_path: str = ""
    use_labels: bool = True
    tree_branching: int = 2
    tree_depth: int = 3
    tree_class_level: int = 1
    tree_feature_dim: int = 16
    tree_edge_noise: float = 1.0
    tree_obs_noise: float = 0.25
    tree_samples_per_leaf: int = 40
    synth_classes: int = 10
    synth_per_class: int = 100
    synth_test_per_class: int = 40

    @staticmethod
    def from_dict(values: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = TrainConfig(**values)
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        return format_config(self.to_dict(), CONFIG_SECTIONS)

    def check(self):
        if self.loss not in LOSS_FAMILIES:
            raise ConfigError(f"loss must be one of {LOSS_FAMILIES}, got {self.loss!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.c <= 0:
            raise ConfigError(f"curvature must be positive, got {self.c}")
        if self.tau <= 0 or self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("tau, lr must be positive; epochs >= 0; batch_size >= 1")
        if self.encoder not in ("mlp", "conv-stem-mlp"):
            raise ConfigError(f"encoder must be mlp or conv-stem-mlp, got {self.encoder!r}")

    def validate_dataset(self, dataset: Dataset):
        if self.loss in _SUPERVISED:
            if dataset.y is None or not self.use_labels:
                raise ConfigError(f"loss {self.loss!r} requires a labeled dataset")
        if self.loss == "rhcl" and dataset.kind != "image":
            raise ConfigError("rhcl attacks pixel boxes and requires an image dataset")

    def space(self) -> Space:
        if self.loss in _HYPERBOLIC:
            return Space.poincare(BallConfig(self.c, self.proj_dim, self.boundary_eps))
        return Space.cosine()

    def np_dtype(self):
        return _DTYPES[self.dtype]

    def attack_config(self, training: bool) -> AttackConfig:
        return AttackConfig(
            epsilon=self.attack_epsilon,
            alpha=self.attack_alpha,
            steps=self.attack_steps if training else self.eval_attack_steps,
            loss_space=self.space(),
            temperature=self.tau,
            normalize_first=self.normalize_first,
            random_start=self.attack_random_start,
        )


def default_config_dict() -> dict:
    return {k: v for k, (v, _help) in CONFIG_KEYS.items()}


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


def cosine_lr(base: float, t: int, total: int) -> float:
    """Cosine annealing: exactly ``base`` at t=0 and exactly 0 at t=total."""
    if total <= 0:
        return base
    return base * (1.0 + np.cos(np.pi * t / total)) / 2.0


class SGD:
    """Plain SGD with momentum and coupled weight decay."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def _interleave(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty((2 * a.shape[0],) + a.shape[1:], dtype=a.dtype)
    out[0::2] = a
    out[1::2] = b
    return out


def _two_views(xb: np.ndarray, kind: str, config: TrainConfig, policy, epoch: int, step: int, n_steps: int):
    if kind == "image":
        v1 = np.empty_like(xb)
        v2 = np.empty_like(xb)
        base = ((epoch * n_steps + step) * xb.shape[0]) * 2
        for i in range(xb.shape[0]):
            v1[i], v2[i] = augment_pair(xb[i], policy, base + 2 * i)
        return v1, v2
    rng = np.random.default_rng([config.seed, 31, epoch, step])
    noise = config.view_noise * rng.normal(size=(2,) + xb.shape)
    return xb + noise[0], xb + noise[1]


def _loss_report(config: TrainConfig, model: ContrastiveModel, stacked, labels):
    raw = model.forward(Tensor(stacked))
    batch = project_embeddings(
        raw,
        config.space(),
        normalize_first=config.normalize_first,
        temperature=config.tau,
        labels=labels,
    )
    if config.loss == "infonce-cos":
        return info_nce_cosine(batch)
    if config.loss == "hcl":
        return hcl_loss(batch)
    if config.loss == "supcon":
        return supcon_cosine(batch)
    if config.loss == "shcl":
        return shcl_loss(batch)
    raise ConfigError(f"unexpected loss family {config.loss!r}")


def pretrain(config: TrainConfig, dataset: Dataset, run_id: str = "run"):
    """Train the encoder and projection head; returns (model, metrics).

    Metrics is a list of {run_id, epoch, split, metric, value} records with
    one loss_mean and one lr entry per epoch.  Raises
    :class:`DivergenceError` when the loss becomes non-finite.
    """
    config.check()
    config.validate_dataset(dataset)
    dtype = config.np_dtype()
    model = build_model(
        config.encoder,
        dataset.x.shape[1:],
        config.widths,
        config.proj_dim,
        config.seed,
        config.stem_channels,
        dtype,
    )
    opt = SGD(model.parameters().values(), config.momentum, config.weight_decay)
    n = len(dataset)
    bs = min(config.batch_size, n)
    n_steps = max(1, n // bs)
    policy = AugmentationPolicy(seed=config.seed)
    supervised = config.loss in _SUPERVISED
    metrics: list[dict] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr, epoch, config.epochs)
        perm = np.random.default_rng([config.seed, 23, epoch]).permutation(n)
        total = 0.0
        anchors = 0
        for step in range(n_steps):
            idx = perm[step * bs : (step + 1) * bs]
            xb = dataset.x[idx]
            v1, v2 = _two_views(xb, dataset.kind, config, policy, epoch, step, n_steps)
            opt.zero_grad()
            try:
                if config.loss == "rhcl":
                    rng = np.random.default_rng([config.seed, 37, epoch, step])
                    report, _triple = rhcl_loss(
                        model,
                        v1.astype(dtype),
                        v2.astype(dtype),
                        None,
                        config.rhcl_lambda,
                        config.attack_config(training=True),
                        rng=rng,
                    )
                    n_anchor = len(idx)
                else:
                    stacked = _interleave(v1, v2).astype(dtype)
                    labels = np.repeat(dataset.y[idx], 2) if supervised else None
                    report = _loss_report(config, model, stacked, labels)
                    n_anchor = 2 * len(idx)
            except FloatingPointError as e:
                raise DivergenceError(f"epoch {epoch} step {step}: {e}") from e
            # optimize the per-anchor mean: the report's total is the
            # outer-sum objective, whose gradient scale grows with 2N
            ag.backward(report.node * (1.0 / n_anchor))
            opt.step(lr)
            total += report.total
            anchors += n_anchor
        metrics.append(
            {"run_id": run_id, "epoch": epoch, "split": "train",
             "metric": "loss_mean", "value": total / max(anchors, 1)}
        )
        metrics.append(
            {"run_id": run_id, "epoch": epoch, "split": "train",
             "metric": "lr", "value": float(lr)}
        )
    return model, metrics


# ---------------------------------------------------------------------------
# linear probe and robust evaluation
# ---------------------------------------------------------------------------


def encode_features(model: ContrastiveModel, x: np.ndarray, dtype, batch: int = 1024) -> np.ndarray:
    """Frozen encoder features (projection head dropped)."""
    outs = []
    for lo in range(0, x.shape[0], batch):
        chunk = Tensor(x[lo : lo + batch].astype(dtype))
        outs.append(model.features(chunk, frozen=True).data)
    return np.concatenate(outs, axis=0)


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n = logits.shape[0]
    lse = ag.logsumexp(logits, axis=1)
    correct = logits[(np.arange(n), labels)].reshape(n, 1)
    return (lse - correct).mean()


def train_probe(features: np.ndarray, labels: np.ndarray, n_classes: int, config: TrainConfig) -> Linear:
    """Fit the single affine classification layer on frozen features."""
    rng = np.random.default_rng([config.seed, 41])
    probe = Linear(features.shape[1], n_classes, rng, features.dtype)
    opt = SGD(probe.params(), momentum=config.momentum, weight_decay=0.0)
    n = features.shape[0]
    bs = min(256, n)
    n_steps = max(1, n // bs)
    for epoch in range(config.probe_epochs):
        lr = config.probe_lr
        if epoch >= int(0.8 * config.probe_epochs):
            lr *= 0.01
        elif epoch >= int(0.6 * config.probe_epochs):
            lr *= 0.1
        perm = np.random.default_rng([config.seed, 43, epoch]).permutation(n)
        for step in range(n_steps):
            idx = perm[step * bs : (step + 1) * bs]
            logits = probe(Tensor(features[idx]))
            loss = _cross_entropy(logits, labels[idx])
            opt.zero_grad()
            ag.backward(loss)
            opt.step(lr)
    return probe


def probe_accuracy(probe: Linear, features: np.ndarray, labels: np.ndarray) -> float:
    logits = probe(Tensor(features)).data
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_probe_adversarial(
    model: ContrastiveModel,
    train_set: Dataset,
    n_classes: int,
    config: TrainConfig,
) -> Linear:
    """Adversarial-training pass on the probe head: the encoder stays
    frozen while each probe step fits the attacked pixels' features."""
    rng = np.random.default_rng([config.seed, 47])
    dtype = config.np_dtype()
    feat_dim = encode_features(model, train_set.x[:1], dtype).shape[1]
    probe = Linear(feat_dim, n_classes, rng, dtype)
    opt = SGD(probe.params(), momentum=config.momentum, weight_decay=0.0)
    attack = config.attack_config(training=True)
    n = len(train_set)
    bs = min(256, n)
    n_steps = max(1, n // bs)
    for epoch in range(config.probe_epochs):
        lr = config.probe_lr
        if epoch >= int(0.8 * config.probe_epochs):
            lr *= 0.01
        elif epoch >= int(0.6 * config.probe_epochs):
            lr *= 0.1
        perm = np.random.default_rng([config.seed, 53, epoch]).permutation(n)
        for step in range(n_steps):
            idx = perm[step * bs : (step + 1) * bs]
            xb = train_set.x[idx].astype(np.float64)
            yb = train_set.y[idx]

            def ce_sum(leaf: Tensor):
                logits = probe(model.features(leaf, frozen=True), frozen=True)
                m = logits.shape[0]
                lse = ag.logsumexp(logits, axis=1)
                correct = logits[(np.arange(m), yb)].reshape(m, 1)
                return (lse - correct).sum()

            x_adv = pgd_ascend(ce_sum, xb, attack)
            feats = model.features(Tensor(x_adv.astype(dtype)), frozen=True)
            loss = _cross_entropy(probe(feats.detach()), yb)
            opt.zero_grad()
            ag.backward(loss)
            opt.step(lr)
    return probe


def linear_probe(model: ContrastiveModel, train_set: Dataset, test_set: Dataset, config: TrainConfig):
    """Train the probe on frozen features; returns (probe, top-1 accuracy)."""
    if train_set.y is None or test_set.y is None:
        raise ConfigError("linear probe requires labeled train and test splits")
    n_classes = int(max(train_set.y.max(), test_set.y.max())) + 1
    dtype = config.np_dtype()
    f_train = encode_features(model, train_set.x, dtype)
    f_test = encode_features(model, test_set.x, dtype)
    probe = train_probe(f_train, train_set.y, n_classes, config)
    return probe, probe_accuracy(probe, f_test, test_set.y)


def robust_eval(
    model: ContrastiveModel,
    probe: Linear,
    test_set: Dataset,
    attack: AttackConfig,
    config: TrainConfig,
    batch: int = 256,
):
    """Clean and PGD-attacked accuracy of the probe through the frozen encoder."""
    dtype = config.np_dtype()
    y = test_set.y
    n = len(test_set)
    clean_hits = 0
    robust_hits = 0
    for lo in range(0, n, batch):
        xb = test_set.x[lo : lo + batch].astype(np.float64)
        yb = y[lo : lo + batch]

        def ce_sum(leaf: Tensor):
            logits = probe(model.features(leaf, frozen=True), frozen=True)
            m = logits.shape[0]
            lse = ag.logsumexp(logits, axis=1)
            correct = logits[(np.arange(m), yb)].reshape(m, 1)
            return (lse - correct).sum()

        clean_logits = probe(model.features(Tensor(xb.astype(dtype)), frozen=True), frozen=True).data
        clean_hits += int(np.sum(np.argmax(clean_logits, axis=1) == yb))
        x_adv = pgd_ascend(ce_sum, xb, attack)
        adv_logits = probe(model.features(Tensor(x_adv.astype(dtype)), frozen=True), frozen=True).data
        robust_hits += int(np.sum(np.argmax(adv_logits, axis=1) == yb))
    return clean_hits / n, robust_hits / n


def curvature_sweep(config: TrainConfig, c_values, train_set: Dataset, test_set: Dataset):
    """Probe accuracy per curvature value; returns a list of table rows."""
    rows = []
    for c in c_values:
        cfg = replace(config, c=float(c))
        model, _metrics = pretrain(cfg, train_set, run_id=f"sweep-c{c}")
        _probe, acc = linear_probe(model, train_set, test_set, cfg)
        rows.append({"c": float(c), "accuracy": acc})
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Config snapshot plus named float32 parameter arrays."""

    config_text: str
    params: dict[str, np.ndarray]
    epoch: int

    def to_config(self) -> TrainConfig:
        values = parse_config_text(self.config_text)
        values.pop("checkpoint_epoch", None)
        return TrainConfig.from_dict(values)


def save_checkpoint(path, model: ContrastiveModel, config: TrainConfig, epoch: int) -> None:
    """Write the 'PCON1' checkpoint: length-prefixed config text, then
    per-parameter name, shape, and float32 payload, all little-endian."""
    text = config.to_text() + f"\n[checkpoint]\ncheckpoint_epoch = {epoch}\n"
    blob = text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, tensor in sorted(model.parameters().items()):
            data = tensor.data.astype("<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    text = blob[off : off + clen].decode("utf-8")
    off += clen
    params: dict[str, np.ndarray] = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
    epoch = parse_config_text(text).get("checkpoint_epoch", 0)
    return Checkpoint(text, params, int(epoch))


def model_from_checkpoint(ckpt: Checkpoint, input_shape) -> tuple[ContrastiveModel, TrainConfig]:
    """Rebuild the model architecture from the snapshot and load weights."""
    config = ckpt.to_config()
    model = build_model(
        config.encoder,
        input_shape,
        config.widths,
        config.proj_dim,
        config.seed,
        config.stem_channels,
        config.np_dtype(),
    )
    named = model.parameters()
    if set(named) != set(ckpt.params):
        raise ValueError("checkpoint parameters do not match the configured model")
    for name, tensor in named.items():
        stored = ckpt.params[name].astype(tensor.data.dtype)
        if stored.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        tensor.data = stored
    return model, config
