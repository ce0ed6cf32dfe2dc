"""Adversarial training with two time-scale Adam updates, the stepped
learning-rate schedule, divergence recovery, and resumable checkpoints;
also trains the 12-way evaluation classifier.

Determinism: epoch data order is a pure function of (seed, epoch); latent
and penalty draws come from one labeled torch generator whose state rides
along in checkpoints, so an interrupted run resumed from an epoch boundary
reproduces the uninterrupted run bit for bit.
"""

import copy
import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint, metrics, models
from .colormnist import DatasetFile
from .losses import (
    LossWeights,
    TrainingDivergence,
    categorical_loss,
    continuous_loss,
    critic_loss,
    ensure_finite,
    generator_adv_loss,
    gradient_penalty,
    total_discriminator_loss,
    total_generator_loss,
)
from .seeding import derive_rng, derive_seed, derive_torch_generator

VARIANTS = ("icgan", "no-ic")


def lr_schedule(lr0, epoch, decay=0.9, every=5):
    """lr0 * decay^(epoch // every); the paper drops 10% every 5 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * decay ** (epoch // every)


@dataclass
class TrainConfig:
    batch_size: int = 100
    g_lr0: float = 5e-2
    d_lr0: float = 8e-2
    lr_decay: float = 0.9
    lr_decay_every: int = 5
    epochs: int = 40
    n_critic: int = 1
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    seed: int = 0
    eval_every: int = 500
    fid_samples: int = 10_000
    variant: str = "icgan"
    base_channels: int = 256
    d_base_channels: int = 32
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.g_lr0 < self.d_lr0:
            raise ValueError("two time-scale rule requires g_lr0 < d_lr0")
        if self.batch_size < 1 or self.epochs < 0 or self.n_critic < 1:
            raise ValueError("batch_size/epochs/n_critic out of range")

    def generator_config(self) -> models.GeneratorConfig:
        return models.GeneratorConfig(
            base_channels=self.base_channels,
            ic_enabled=self.variant == "icgan",
        )

    def discriminator_config(self) -> models.DiscriminatorConfig:
        return models.DiscriminatorConfig(base_channels=self.d_base_channels)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def append_step(self, **record):
        self.steps.append(record)

    def append_eval(self, step, fid):
        self.evals.append({"step": step, "fid": fid})

    def save(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"kind": "eval", **rec}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("kind")
                (log.steps if kind == "step" else log.evals).append(rec)
        return log


@dataclass
class TrainState:
    config: TrainConfig
    generator: models.Generator
    discriminator: models.Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    step: int = 0
    epoch: int = 0
    lr_scale: float = 1.0
    halved: bool = False


def init_train_state(config: TrainConfig) -> TrainState:
    gen = models.build_generator(config.generator_config(),
                                 derive_seed(config.seed, "init/generator"))
    disc = models.build_discriminator(config.discriminator_config(),
                                      derive_seed(config.seed, "init/discriminator"))
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.g_lr0, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.d_lr0, betas=betas)
    rng = derive_torch_generator(config.seed, "train")
    return TrainState(config, gen, disc, opt_g, opt_d, rng)


def _images_to_tensor(images_u8: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images_u8).permute(0, 3, 1, 2).float() / 255.0


def train_step(state: TrainState, real_images: torch.Tensor,
               real_labels: torch.Tensor) -> dict:
    """n_critic discriminator updates then one generator update."""
    cfg = state.config
    w = cfg.weights
    gen, disc = state.generator, state.discriminator
    n = real_images.shape[0]

    for _ in range(cfg.n_critic):
        z = models.sample_latents(n, state.rng)
        with torch.no_grad():
            fake = gen(z)
        out_fake = disc(fake)
        out_real = disc(real_images)
        critic_part = critic_loss(out_fake.critic, out_real.critic)
        gp = gradient_penalty(disc.critic_score, real_images, fake, state.rng,
                              w.lambda_gp)
        cat = categorical_loss(z[:, : models.NUM_DIGITS], out_fake.cat_logits)
        con = continuous_loss(models.latent_colors(z), out_fake.con_pred)
        sup = None
        if w.supervised_cat:
            onehot = F.one_hot(real_labels, models.NUM_DIGITS).float()
            sup = categorical_loss(onehot, out_real.cat_logits)
        d_total = total_discriminator_loss(critic_part, gp, cat, con, w, sup)
        ensure_finite("d_loss", d_total)
        state.opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        state.opt_d.step()

    z = models.sample_latents(n, state.rng)
    fake = gen(z)
    out = disc(fake)
    adv = generator_adv_loss(out.critic)
    cat_g = categorical_loss(z[:, : models.NUM_DIGITS], out.cat_logits)
    con_g = continuous_loss(models.latent_colors(z), out.con_pred)
    g_total = total_generator_loss(adv, cat_g, con_g, w)
    ensure_finite("g_loss", g_total)
    state.opt_g.zero_grad(set_to_none=True)
    # generator backward also deposits grads on D params; they are dropped by
    # the next discriminator zero_grad
    g_total.backward()
    state.opt_g.step()

    return {
        "g_loss": g_total.item(), "d_loss": d_total.item(), "gp": gp.item(),
        "cat_loss": cat.item(), "con_loss": con.item(),
    }


def _set_lrs(state: TrainState):
    cfg = state.config
    g_lr = lr_schedule(cfg.g_lr0, state.epoch, cfg.lr_decay, cfg.lr_decay_every)
    d_lr = lr_schedule(cfg.d_lr0, state.epoch, cfg.lr_decay, cfg.lr_decay_every)
    g_lr *= state.lr_scale
    d_lr *= state.lr_scale
    for group in state.opt_g.param_groups:
        group["lr"] = g_lr
    for group in state.opt_d.param_groups:
        group["lr"] = d_lr
    return g_lr, d_lr


# --- optimizer/checkpoint plumbing ---

def _optimizer_arrays(opt, module, prefix) -> dict:
    arrays = {}
    for name, p in module.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        arrays[f"{prefix}.{name}.step"] = np.float32(float(st["step"]))
        arrays[f"{prefix}.{name}.exp_avg"] = st["exp_avg"].numpy().astype(np.float32)
        arrays[f"{prefix}.{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float32)
    return arrays


def _restore_optimizer(opt, module, prefix, arrays):
    for name, p in module.named_parameters():
        key = f"{prefix}.{name}.step"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"{prefix}.{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}.{name}.exp_avg_sq"].copy()),
        }


def save_train_state(path, state: TrainState):
    manifest = {
        "kind": "train_state",
        "config": asdict(state.config),
        "spec_hash": checkpoint.spec_hash(asdict(state.config)),
        "step": state.step,
        "epoch": state.epoch,
        "lr_scale": state.lr_scale,
        "halved": state.halved,
        "rng_state": state.rng.get_state().numpy().tobytes().hex(),
    }
    arrays = {}
    arrays.update(models.state_arrays(state.generator, "g."))
    arrays.update(models.state_arrays(state.discriminator, "d."))
    arrays.update(_optimizer_arrays(state.opt_g, state.generator, "optg"))
    arrays.update(_optimizer_arrays(state.opt_d, state.discriminator, "optd"))
    checkpoint.save_checkpoint(path, manifest, arrays)


def load_train_state(path, config: TrainConfig | None = None) -> TrainState:
    manifest, arrays = checkpoint.load_checkpoint(path)
    if manifest.get("kind") != "train_state":
        raise checkpoint.CheckpointError("not a train-state checkpoint")
    saved = config_from_dict(manifest["config"])
    if config is not None and asdict(config) != asdict(saved):
        raise checkpoint.CheckpointError(
            "resume config differs from the checkpointed one"
        )
    state = init_train_state(saved)
    models.load_state_arrays(state.generator, arrays, "g.")
    models.load_state_arrays(state.discriminator, arrays, "d.")
    _restore_optimizer(state.opt_g, state.generator, "optg", arrays)
    _restore_optimizer(state.opt_d, state.discriminator, "optd", arrays)
    rng_bytes = bytes.fromhex(manifest["rng_state"])
    state.rng.set_state(torch.from_numpy(np.frombuffer(rng_bytes, dtype=np.uint8).copy()))
    state.step = int(manifest["step"])
    state.epoch = int(manifest["epoch"])
    state.lr_scale = float(manifest["lr_scale"])
    state.halved = bool(manifest["halved"])
    return state


def _snapshot(state: TrainState, runlog: RunLog):
    return {
        "g": copy.deepcopy(state.generator.state_dict()),
        "d": copy.deepcopy(state.discriminator.state_dict()),
        "optg": _optimizer_arrays(state.opt_g, state.generator, "optg"),
        "optd": _optimizer_arrays(state.opt_d, state.discriminator, "optd"),
        "rng": state.rng.get_state().clone(),
        "step": state.step,
        "epoch": state.epoch,
        "n_steps": len(runlog.steps),
        "n_evals": len(runlog.evals),
    }


def _restore(state: TrainState, snap, runlog: RunLog):
    state.generator.load_state_dict(snap["g"])
    state.discriminator.load_state_dict(snap["d"])
    state.opt_g.state.clear()
    state.opt_d.state.clear()
    _restore_optimizer(state.opt_g, state.generator, "optg", snap["optg"])
    _restore_optimizer(state.opt_d, state.discriminator, "optd", snap["optd"])
    state.rng.set_state(snap["rng"])
    state.step = snap["step"]
    state.epoch = snap["epoch"]
    del runlog.steps[snap["n_steps"]:]
    del runlog.evals[snap["n_evals"]:]


def _fid_eval(state: TrainState, feature_fn, reference_features, step):
    cfg = state.config
    rng = derive_torch_generator(cfg.seed, f"fid/{step}")
    n = reference_features.shape[0]
    feats = []
    state.generator.eval()
    with torch.no_grad():
        for i in range(0, n, 500):
            codes = models.sample_latents(min(500, n - i), rng)
            feats.append(feature_fn(state.generator(codes)))
    state.generator.train()
    return metrics.fid(np.concatenate(feats), reference_features)


def train_run(config: TrainConfig, dataset: DatasetFile, out_dir=None,
              classifier=None, resume_from=None):
    """Train on the digit records of ``dataset``; returns (state, runlog).

    ``classifier`` enables periodic feature-space fid logging.  Checkpoints
    land in ``out_dir`` at every epoch boundary when given.  A non-finite
    loss restores the last epoch boundary and halves both learning rates
    once; a second divergence aborts the run.
    """
    digits = dataset.digit_subset()
    n = len(digits)
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} digit records < batch {config.batch_size}")

    if resume_from is not None:
        state = load_train_state(resume_from, config)
    else:
        state = init_train_state(config)
    runlog = RunLog()

    feature_fn = None
    reference = None
    if classifier is not None and config.eval_every > 0:
        feature_fn = lambda imgs: metrics.classifier_features(classifier, imgs)
        ref_rng = derive_rng(config.seed, "fid-real")
        take = min(config.fid_samples, n)
        sel = ref_rng.choice(n, size=take, replace=False)
        reference = metrics.classifier_features(
            classifier, _images_to_tensor(digits.images[sel]))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    labels_np = digits.digit_labels.astype(np.int64)
    while state.epoch < config.epochs:
        snap = _snapshot(state, runlog)
        try:
            g_lr, d_lr = _set_lrs(state)
            order = derive_rng(config.seed, f"order/{state.epoch}").permutation(n)
            for start in range(0, n - config.batch_size + 1, config.batch_size):
                sel = order[start : start + config.batch_size]
                real = _images_to_tensor(digits.images[sel])
                labels = torch.from_numpy(labels_np[sel])
                record = train_step(state, real, labels)
                state.step += 1
                runlog.append_step(step=state.step, epoch=state.epoch,
                                   g_lr=g_lr, d_lr=d_lr, **record)
                if (feature_fn is not None
                        and state.step % config.eval_every == 0):
                    runlog.append_eval(state.step,
                                       _fid_eval(state, feature_fn, reference,
                                                 state.step))
        except TrainingDivergence:
            if state.halved:
                raise
            _restore(state, snap, runlog)
            state.lr_scale *= 0.5
            state.halved = True
            warnings.warn("divergence: restored last epoch boundary and "
                          "halved both learning rates")
            continue
        state.epoch += 1
        if out_dir is not None:
            save_train_state(os.path.join(out_dir, f"epoch_{state.epoch:04d}.ckpt"),
                             state)
    if out_dir is not None:
        save_train_state(os.path.join(out_dir, "train_state_final.ckpt"), state)
        runlog.save(os.path.join(out_dir, "runlog.jsonl"))
    return state, runlog


# --- evaluation classifier ---

@dataclass
class ClassifierConfig:
    batch_size: int = 100
    lr: float = 2e-3
    epochs: int = 30
    target_accuracy: float = 0.994
    seed: int = 0
    base_channels: int = 32
    feature_dim: int = 256
    train_subset: int | None = None


def evaluate_classifier(classifier, dataset: DatasetFile, batch=512):
    """(overall accuracy, per-class accuracy over the 12 labels)."""
    classifier.eval()
    labels = torch.from_numpy(dataset.digit_labels.astype(np.int64))
    hits = torch.zeros(models.Classifier.NUM_CLASSES)
    counts = torch.zeros(models.Classifier.NUM_CLASSES)
    with torch.no_grad():
        for i in range(0, len(dataset), batch):
            x = _images_to_tensor(dataset.images[i : i + batch])
            pred = classifier(x).argmax(dim=1)
            for c in range(models.Classifier.NUM_CLASSES):
                sel = labels[i : i + batch] == c
                counts[c] += sel.sum()
                hits[c] += (pred[sel] == c).sum()
    per_class = torch.where(counts > 0, hits / counts, torch.zeros(()))
    return float(hits.sum() / counts.sum()), per_class.numpy()


def train_classifier(config: ClassifierConfig, train_ds: DatasetFile,
                     test_ds: DatasetFile):
    """Cross-entropy training on all 12 classes until the test accuracy
    reaches the target or the epoch cap; returns (classifier, history)."""
    model_cfg = models.DiscriminatorConfig(
        base_channels=config.base_channels, feature_dim=config.feature_dim)
    clf = models.build_classifier(model_cfg, derive_seed(config.seed, "init/classifier"))
    opt = torch.optim.Adam(clf.parameters(), lr=config.lr)

    n = len(train_ds)
    indices = np.arange(n)
    if config.train_subset is not None and config.train_subset < n:
        indices = derive_rng(config.seed, "cls-subset").permutation(n)[
            : config.train_subset]
    labels_np = train_ds.digit_labels.astype(np.int64)

    history = {"epochs": [], "reached_target": False}
    for epoch in range(config.epochs):
        clf.train()
        order = derive_rng(config.seed, f"cls-order/{epoch}").permutation(indices.size)
        for start in range(0, indices.size, config.batch_size):
            sel = indices[order[start : start + config.batch_size]]
            x = _images_to_tensor(train_ds.images[sel])
            y = torch.from_numpy(labels_np[sel])
            loss = F.cross_entropy(clf(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        acc, per_class = evaluate_classifier(clf, test_ds)
        history["epochs"].append({"epoch": epoch, "test_accuracy": acc})
        if acc >= config.target_accuracy:
            history["reached_target"] = True
            break
    history["test_accuracy"] = acc
    history["per_class"] = per_class.tolist()
    if acc < 0.99:
        warnings.warn(f"classifier reached only {acc:.4f} test accuracy; "
                      "evaluation built on it may be unreliable")
    return clf, history
