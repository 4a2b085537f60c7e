"""Losses and the alternating augmentor / discriminator / estimator training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .adversaries import Discriminator2D, Discriminator3D, discriminator_loss, generator_guidance_loss
from .augmentor import OPS, Augmentor, augment
from .errors import ConfigError, ContractError, NonFiniteError, TrainingAbort
from .estimator import Estimator, network_input, per_sample_pose_loss
from .numerics import Adam, Tensor, frozen, linear_decay, load_arrays, no_grad, save_arrays
from .skeleton import SkeletonTopology, root_center

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "phase", "beta", "lr_scale", "lp_orig", "lp_aug", "l_fb", "l_reg",
                 "l_adv", "l_a", "l_d", "l_est", "rejection_rate", "fb_saturated", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1024
    lr: float = 1e-3
    beta_start: float = 2.0
    beta_end: float = 20.0
    reg_threshold: float = 0.1
    w_adv: float = 1.0
    pretrain_epochs: int = 5
    seed: int = 0
    # augmentation ranges and switches
    s_ba: float = 1.0
    s_bl: float = 0.5
    s_t: tuple = (1000.0, 1000.0, 3000.0)
    t0: tuple | None = (0.0, 0.0, 5500.0)
    noise_dim: int = 48
    ops: tuple = OPS
    feedback: bool = True
    kcs_mode: str = "part"
    estimator_update: str = "per_batch"
    # architecture
    estimator_width: int = 1024
    estimator_blocks: int = 4
    dropout: float = 0.25
    augmentor_hidden: int = 256
    d3_hidden: int = 256
    d2_hidden: int = 100
    # numerics and bookkeeping
    fb_clamp: float = 20.0
    z_min: float = 100.0
    checkpoint_every: int = 0
    check_isolation: bool = False

    def __post_init__(self):
        self.s_t = tuple(float(v) for v in self.s_t)
        self.t0 = None if self.t0 is None else tuple(float(v) for v in self.t0)
        self.ops = tuple(self.ops)
        self.validate()

    def validate(self):
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if not self.beta_end >= self.beta_start > 1:
            raise ConfigError("need beta_end >= beta_start > 1")
        if self.reg_threshold <= 0:
            raise ConfigError("reg_threshold must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.w_adv < 0:
            raise ConfigError("w_adv must be non-negative")
        if set(self.ops) - set(OPS):
            raise ConfigError(f"ops must be a subset of {OPS}")
        if self.kcs_mode not in ("part", "full"):
            raise ConfigError("kcs_mode must be 'part' or 'full'")
        if self.estimator_update not in ("per_batch", "per_epoch"):
            raise ConfigError("estimator_update must be 'per_batch' or 'per_epoch'")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if len(self.s_t) != 3 or (self.t0 is not None and len(self.t0) != 3):
            raise ConfigError("s_t and t0 must have three components")

    @property
    def augmentation_enabled(self):
        return bool(self.ops)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["s_t"] = list(self.s_t)
        d["t0"] = None if self.t0 is None else list(self.t0)
        d["ops"] = list(self.ops)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def replace(self, **changes):
        return TrainConfig.from_dict({**self.to_dict(), **changes})


# -- losses -------------------------------------------------------------------------------

def feedback_loss(lp_aug, lp_orig, beta, clamp=20.0):
    """``|1 - exp(lp_aug - beta * lp_orig)|`` averaged over samples.

    ``lp_orig`` is treated as a constant target.  The exponent is clamped at
    ``clamp`` before exponentiation; returns ``(loss, n_saturated)``.
    """
    lp_orig = lp_orig.data if isinstance(lp_orig, Tensor) else np.asarray(lp_orig, dtype=np.float64)
    if not isinstance(lp_aug, Tensor):
        lp_aug = Tensor(lp_aug)
    expo = lp_aug - beta * lp_orig
    saturated = int(np.sum(expo.data > clamp))
    loss = (1.0 - expo.clip_max(clamp).exp()).abs().mean()
    return loss, saturated


def reg_loss(gamma, threshold=0.1):
    """Rectified L2 on one parameter vector: 0 when mean |gamma| < threshold, else ||gamma||^2."""
    g = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    if float(np.mean(np.abs(g.data))) < threshold:
        return (g * 0.0).sum()
    return (g * g).sum()


def batch_reg_loss(gamma, threshold=0.1):
    """:func:`reg_loss` applied per sample (leading axis) and averaged."""
    g = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    n = g.shape[0]
    if n == 0:
        return Tensor(0.0)
    flat = g.reshape(n, -1)
    active = (np.abs(flat.data).mean(axis=1) >= threshold).astype(np.float64)
    return ((flat * flat).sum(axis=1) * active).mean()


def augmentor_loss(lp_aug, lp_orig, beta, gammas, guidance=0.0, w_adv=1.0,
                   threshold=0.1, use_feedback=True, clamp=20.0):
    """Feedback + rectified-L2 regularizers + ``w_adv`` times the generator guidance.

    Returns ``(total, parts)`` with ``parts`` holding the scalar value of each
    component.
    """
    l_fb, sat = feedback_loss(lp_aug, lp_orig, beta, clamp) if use_feedback else (Tensor(0.0), 0)
    l_reg = Tensor(0.0)
    for g in gammas:
        l_reg = l_reg + batch_reg_loss(g, threshold)
    total = l_fb + l_reg
    if w_adv:
        total = total + w_adv * guidance
    g_val = float(guidance.data) if isinstance(guidance, Tensor) else float(guidance)
    parts = {"l_fb": float(l_fb.data), "l_reg": float(l_reg.data), "l_adv": g_val,
             "fb_saturated": sat}
    return total, parts


def beta_at(epoch, config):
    """Hard ratio for a 0-based epoch, linear from beta_start to beta_end."""
    if config.epochs == 1:
        return config.beta_start
    frac = min(max(epoch / (config.epochs - 1), 0.0), 1.0)
    return config.beta_start + (config.beta_end - config.beta_start) * frac


# -- helpers ------------------------------------------------------------------------------

def seed_streams(seed):
    """Independent generators: estimator init, augmentor init, discriminator init,
    dropout, batch order, augmentation noise, external 2D pool sampling."""
    names = ("est_init", "aug_init", "disc_init", "dropout", "shuffle", "noise", "pool")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def make_batches(n, batch_size, rng):
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    perm = rng.permutation(n)
    bs = min(batch_size, n)
    batches = [perm[i:i + bs] for i in range(0, n, bs)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def _check_finite(name, value):
    if not math.isfinite(value):
        raise TrainingAbort(f"non-finite {name} ({value})")


def supervised_step(estimator, opt, pose2d, cams, pose3d, lr_scale=1.0):
    """One estimator update on (2D, 3D) pairs; returns the loss value (m^2)."""
    estimator.train()
    pred = estimator(network_input(pose2d, cams))
    gt = root_center(pose3d, estimator.topo) / 1000.0
    loss = per_sample_pose_loss(pred, gt).mean()
    value = float(loss.data)
    _check_finite("estimator loss", value)
    opt.zero_grad()
    loss.backward()
    try:
        opt.step(lr_scale)
    except NonFiniteError as exc:
        raise TrainingAbort(str(exc)) from exc
    return value


def pretrain(estimator, dataset, config, opt=None, shuffle_rng=None):
    """Train ``estimator`` on original pairs only for ``config.pretrain_epochs``.

    Returns the per-epoch mean training losses.
    """
    if len(dataset) == 0:
        raise ContractError("pretraining needs a non-empty dataset")
    opt = opt or Adam(estimator.named_parameters(), lr=config.lr)
    shuffle_rng = shuffle_rng or seed_streams(config.seed)["shuffle"]
    history = []
    for _ in range(config.pretrain_epochs):
        losses = [supervised_step(estimator, opt, dataset.pose2d[b], dataset.cams[b], dataset.pose3d[b])
                  for b in make_batches(len(dataset), config.batch_size, shuffle_rng)]
        history.append(float(np.mean(losses)))
    return history


class _Snapshot:
    def __init__(self, *modules):
        self.state = [m.state_dict() for m in modules]
        self.modules = modules

    def unchanged(self):
        for m, old in zip(self.modules, self.state):
            new = m.state_dict()
            if any(not np.array_equal(new[k], v) for k, v in old.items()):
                return False
        return True


@dataclass
class EpochStats:
    values: dict = field(default_factory=dict)

    def add(self, **kw):
        for k, v in kw.items():
            self.values.setdefault(k, []).append(v)

    def mean(self, key):
        vals = self.values.get(key)
        return float(np.mean(vals)) if vals else float("nan")


class Trainer:
    """Owns the four networks, their optimizers and RNG streams.

    ``external_2d`` optionally supplies a pool of real 2D poses (an object
    with ``pose2d`` and ``cams`` arrays) for the 2D discriminator; by default
    the reprojected source poses of each batch serve as real samples.
    """

    def __init__(self, topo: SkeletonTopology, config: TrainConfig, external_2d=None):
        self.topo = topo
        self.config = config
        self.external_2d = external_2d
        self.rngs = seed_streams(config.seed)
        r = self.rngs
        self.estimator = Estimator(topo, r["est_init"], width=config.estimator_width,
                                   n_blocks=config.estimator_blocks, dropout=config.dropout,
                                   drop_rng=r["dropout"])
        self.augmentor = Augmentor(topo, r["aug_init"], noise_dim=config.noise_dim,
                                   hidden=config.augmentor_hidden, s_ba=config.s_ba, s_bl=config.s_bl,
                                   s_t=config.s_t, t0=config.t0, z_min=config.z_min, ops=config.ops)
        self.d3 = Discriminator3D(topo, r["disc_init"], hidden=config.d3_hidden, mode=config.kcs_mode)
        self.d2 = Discriminator2D(topo, r["disc_init"], hidden=config.d2_hidden)
        self.opt_est = Adam(self.estimator.named_parameters(), lr=config.lr)
        self.opt_aug = Adam(self.augmentor.named_parameters(), lr=config.lr)
        self.opt_d = Adam(list(self.d3.named_parameters("d3.")) + list(self.d2.named_parameters("d2.")),
                          lr=config.lr)
        self.pretrain_done = 0
        self.epoch = 0
        self.history = []
        self.batch_log = []
        self.rejected_total = 0
        self.isolation_checks = 0

    # -- phases -------------------------------------------------------------------------

    def pretrain_epoch(self, ds):
        t = time.perf_counter()
        losses = [supervised_step(self.estimator, self.opt_est, ds.pose2d[b], ds.cams[b], ds.pose3d[b])
                  for b in make_batches(len(ds), self.config.batch_size, self.rngs["shuffle"])]
        self.pretrain_done += 1
        row = self._row(self.pretrain_done - 1, "pretrain", l_est=float(np.mean(losses)),
                        seconds=time.perf_counter() - t)
        self.history.append(row)
        return row

    def _real_2d(self, pose2d, cams):
        if self.external_2d is None:
            return pose2d, cams
        idx = self.rngs["pool"].integers(0, len(self.external_2d.pose2d), size=len(pose2d))
        return self.external_2d.pose2d[idx], self.external_2d.cams[idx]

    def augment_step(self, pose3d, pose2d, cams, beta, lr_scale, stats):
        """Augmentor then discriminator update on one batch.

        Returns the gradient-stopped augmented pairs ``(pose3d', pose2d', cams)``.
        """
        cfg = self.config
        est, aug, d3, d2 = self.estimator, self.augmentor, self.d3, self.d2
        check = cfg.check_isolation
        snap = _Snapshot(est) if check else None

        aug.train()
        est.eval()
        noise = self.rngs["noise"].standard_normal((len(pose3d), aug.noise_dim))
        with frozen(est, d3, d2):
            res = augment(aug, pose3d, cams, noise)
            keep = res.accepted
            if len(keep) < 2:
                stats.add(rejected=res.rejected, total=len(pose3d))
                return None
            with no_grad():
                lp_orig = per_sample_pose_loss(est(network_input(pose2d[keep], cams[keep])),
                                               root_center(pose3d[keep], self.topo) / 1000.0).data
            pred = est(network_input(res.pose2d, cams[keep]))
            lp_aug = per_sample_pose_loss(pred, root_center(res.pose3d, self.topo) / 1000.0)
            guidance = 0.0
            if cfg.w_adv > 0:
                guidance = generator_guidance_loss(d3.score_pose(res.pose3d), d2(res.pose2d, cams[keep]))
            gammas = []
            if "ba" in aug.ops:
                gammas.append(res.params.gamma_ba)
            if "bl" in aug.ops:
                gammas.append(res.params.gamma_bl)
            l_a, parts = augmentor_loss(lp_aug, lp_orig, beta, gammas, guidance, cfg.w_adv,
                                        cfg.reg_threshold, cfg.feedback, cfg.fb_clamp)
            value = float(l_a.data)
            _check_finite("augmentor loss", value)
            self.opt_aug.zero_grad()
            l_a.backward()
            self._step(self.opt_aug, lr_scale)

        fake3d = res.pose3d.data if isinstance(res.pose3d, Tensor) else res.pose3d
        fake2d = res.pose2d.data if isinstance(res.pose2d, Tensor) else res.pose2d
        real2d, real_cams = self._real_2d(pose2d, cams)
        d3.train()
        d2.train()
        l_d = discriminator_loss(d3.score_pose(pose3d), d3.score_pose(fake3d),
                                 d2(real2d, real_cams), d2(fake2d, cams[keep]))
        _check_finite("discriminator loss", float(l_d.data))
        self.opt_d.zero_grad()
        l_d.backward()
        self._step(self.opt_d, lr_scale)

        if check:
            if not snap.unchanged():
                raise ContractError("estimator changed during the augmentor/discriminator phase")
            self.isolation_checks += 1
        stats.add(lp_orig=float(lp_orig.mean()), lp_aug=float(lp_aug.data.mean()), l_a=value,
                  l_d=float(l_d.data), rejected=res.rejected, total=len(pose3d), **parts)
        self.batch_log.append({"epoch": self.epoch, "l_a": value, **parts})
        return fake3d, fake2d, cams[keep]

    def estimator_step(self, pose3d, pose2d, cams, lr_scale):
        check = self.config.check_isolation
        snap = _Snapshot(self.augmentor, self.d3, self.d2) if check else None
        loss = supervised_step(self.estimator, self.opt_est, pose2d, cams, pose3d, lr_scale)
        if check:
            if not snap.unchanged():
                raise ContractError("augmentor/discriminators changed during the estimator phase")
            self.isolation_checks += 1
        return loss

    def _step(self, opt, lr_scale):
        try:
            opt.step(lr_scale)
        except NonFiniteError as exc:
            raise TrainingAbort(str(exc)) from exc

    def train_epoch(self, ds):
        cfg = self.config
        t = time.perf_counter()
        beta = beta_at(self.epoch, cfg)
        lr_scale = linear_decay(self.epoch, cfg.epochs)
        stats = EpochStats()
        pool = []
        for b in make_batches(len(ds), cfg.batch_size, self.rngs["shuffle"]):
            X, x, c = ds.pose3d[b], ds.pose2d[b], ds.cams[b]
            fake = self.augment_step(X, x, c, beta, lr_scale, stats) if cfg.augmentation_enabled else None
            if cfg.estimator_update == "per_epoch":
                if fake is not None:
                    pool.append(fake)
                continue
            if fake is not None:
                X = np.concatenate([X, fake[0]])
                x = np.concatenate([x, fake[1]])
                c = np.concatenate([c, fake[2]])
            stats.add(l_est=self.estimator_step(X, x, c, lr_scale))

        if cfg.estimator_update == "per_epoch":
            X = np.concatenate([ds.pose3d] + [p[0] for p in pool])
            x = np.concatenate([ds.pose2d] + [p[1] for p in pool])
            c = np.concatenate([ds.cams] + [p[2] for p in pool])
            for b in make_batches(len(X), cfg.batch_size, self.rngs["shuffle"]):
                stats.add(l_est=self.estimator_step(X[b], x[b], c[b], lr_scale))

        rejected = int(np.sum(stats.values.get("rejected", [0])))
        total = int(np.sum(stats.values.get("total", [0])))
        rate = rejected / total if total else 0.0
        self.rejected_total += rejected
        if rate > 0.5:
            log.warning("epoch %d: %.0f%% of augmentations rejected", self.epoch, 100 * rate)
        row = self._row(self.epoch, "train", beta=beta, lr_scale=lr_scale,
                        lp_orig=stats.mean("lp_orig"), lp_aug=stats.mean("lp_aug"),
                        l_fb=stats.mean("l_fb"), l_reg=stats.mean("l_reg"), l_adv=stats.mean("l_adv"),
                        l_a=stats.mean("l_a"), l_d=stats.mean("l_d"), l_est=stats.mean("l_est"),
                        rejection_rate=rate,
                        fb_saturated=int(np.sum(stats.values.get("fb_saturated", [0]))),
                        seconds=time.perf_counter() - t)
        self.history.append(row)
        self.epoch += 1
        return row

    @staticmethod
    def _row(epoch, phase, **values):
        row = {k: "" for k in METRIC_FIELDS}
        row.update(epoch=epoch, phase=phase, **values)
        return row

    # -- driver -------------------------------------------------------------------------

    def fit(self, ds, out_dir=None, on_epoch=None):
        """Pretrain, then run the remaining training epochs.

        With ``out_dir`` set, metrics are appended to ``metrics.csv`` as they are
        produced and checkpoints are written every ``checkpoint_every`` epochs
        plus once at the end (``final.ckpt``).
        """
        from pathlib import Path

        if len(ds) == 0:
            raise ContractError("training needs a non-empty dataset")
        cfg = self.config
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        writer = _MetricsWriter(out / "metrics.csv") if out is not None else None
        try:
            while self.pretrain_done < cfg.pretrain_epochs:
                row = self.pretrain_epoch(ds)
                self._emit(row, writer, on_epoch)
            while self.epoch < cfg.epochs:
                row = self.train_epoch(ds)
                self._emit(row, writer, on_epoch)
                if out is not None and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                    self.save(out / f"epoch{self.epoch:03d}.ckpt")
        finally:
            if writer is not None:
                writer.close()
        if out is not None:
            self.save(out / "final.ckpt")
        return self.history

    @staticmethod
    def _emit(row, writer, on_epoch):
        log.info("%s epoch %s: %s", row["phase"], row["epoch"],
                 ", ".join(f"{k}={row[k]:.5g}" for k in ("l_est", "l_a", "l_d") if row[k] != ""))
        if writer is not None:
            writer.write(row)
        if on_epoch is not None:
            on_epoch(row)

    # -- checkpoints --------------------------------------------------------------------

    def save(self, path):
        arrays = {}
        for prefix, module in (("estimator.", self.estimator), ("augmentor.", self.augmentor),
                               ("d3.", self.d3), ("d2.", self.d2)):
            arrays.update({prefix + k: v for k, v in module.state_dict().items()})
        arrays.update(self.opt_est.state_dict("adam.estimator."))
        arrays.update(self.opt_aug.state_dict("adam.augmentor."))
        arrays.update(self.opt_d.state_dict("adam.disc."))
        meta = {
            "kind": "poseaug-trainer",
            "config": self.config.to_dict(),
            "topology": self.topo.to_dict(),
            "pretrain_done": self.pretrain_done,
            "epoch": self.epoch,
            "adam_steps": [self.opt_est.step_count, self.opt_aug.step_count, self.opt_d.step_count],
            "rng_states": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "rejected_total": self.rejected_total,
            "history": self.history,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path, external_2d=None):
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "poseaug-trainer":
            raise ValueError(f"{path} is not a trainer checkpoint")
        topo = SkeletonTopology.from_dict(meta["topology"])
        self = cls(topo, TrainConfig.from_dict(meta["config"]), external_2d=external_2d)
        for prefix, module in (("estimator.", self.estimator), ("augmentor.", self.augmentor),
                               ("d3.", self.d3), ("d2.", self.d2)):
            module.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        steps = meta["adam_steps"]
        self.opt_est.load_state_dict(arrays, steps[0], "adam.estimator.")
        self.opt_aug.load_state_dict(arrays, steps[1], "adam.augmentor.")
        self.opt_d.load_state_dict(arrays, steps[2], "adam.disc.")
        for k, state in meta["rng_states"].items():
            self.rngs[k].bit_generator.state = state
        self.pretrain_done = meta["pretrain_done"]
        self.epoch = meta["epoch"]
        self.rejected_total = meta.get("rejected_total", 0)
        self.history = meta.get("history", [])
        return self


class _MetricsWriter:
    """Append-only CSV writer for per-epoch metrics rows."""

    def __init__(self, path):
        new = not path.exists() or path.stat().st_size == 0
        self.fh = open(path, "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_FIELDS)
        if new:
            self.writer.writeheader()

    def write(self, row):
        self.writer.writerow({k: row[k] for k in METRIC_FIELDS})
        self.fh.flush()

    def close(self):
        self.fh.close()


def train(dataset, config, out_dir=None, topology=None, external_2d=None):
    """Build a :class:`Trainer`, pretrain and train it; returns the trainer."""
    topo = topology or dataset.topology
    trainer = Trainer(topo, config, external_2d=external_2d)
    trainer.fit(dataset, out_dir)
    return trainer


def save_estimator(path, estimator, config, history=()):
    """Estimator-only checkpoint (as written by the ``pretrain`` command)."""
    meta = {"kind": "poseaug-estimator", "config": config.to_dict(),
            "topology": estimator.topo.to_dict(), "history": list(history)}
    save_arrays(path, estimator.state_dict(), meta)


def load_estimator(path):
    """Estimator from either checkpoint kind; returns ``(estimator, config)``."""
    arrays, meta = load_arrays(path)
    kind = meta.get("kind")
    if kind == "poseaug-trainer":
        trainer = Trainer.load(path)
        return trainer.estimator, trainer.config
    if kind != "poseaug-estimator":
        raise ValueError(f"{path} is not a pose-estimator checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    topo = SkeletonTopology.from_dict(meta["topology"])
    est = Estimator(topo, np.random.default_rng(0), width=config.estimator_width,
                    n_blocks=config.estimator_blocks, dropout=config.dropout)
    est.load_state_dict(arrays)
    return est, config
