"""Perturbation generator, scaling/clipping pipeline, margin losses and the
attack training loop.

One latent draw per batch produces one perturbation; it is scaled onto the
whole batch, clipped into the classifier's input range, and the clamped
margin loss (plus a weighted norm penalty) is backpropagated into the
generator only. The scale ramps from a small fraction of the budget toward
the full budget whenever the training loss plateaus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, to_model_units
from .layers import BatchNorm, Deconv, FeatureNorm, Linear, ReLU, Stack
from .models import MODEL_RANGE, TargetModel, predict_classes
from .optim import AdamState, adam_step, zero_grads
from .rng import child_seed, make_rng

LATENT_DIM = 100
DECONV_OUT = 33  # spatial size after the 3 -> 5 -> 9 -> 17 -> 33 stack


class DegeneratePerturbationError(ValueError):
    pass


class AttackDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, last_loss: float):
        self.epoch, self.step, self.last_loss = epoch, step, last_loss
        super().__init__(
            f"attack loss became non-finite at epoch {epoch}, step {step}; "
            f"last finite loss {last_loss:.4f}"
        )


def norm_p(p) -> float:
    """Canonicalize a norm selector to 2.0 or inf."""
    return ad._norm_p(p)


@dataclass
class AttackConfig:
    """Budgets, loss weights, schedule and optimizer settings for one attack."""

    p: Union[int, float, str] = "inf"
    zeta: float = 0.04
    epsilon: Optional[float] = None  # model units; derived from zeta when None
    kappa: float = 0.0
    alpha: float = 4.0
    targeted: Optional[int] = None  # None = non-targeted, else the wanted class
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 128
    epochs: int = 500
    max_steps: Optional[int] = None
    scale_start: float = 0.1
    plateau_window: int = 3
    plateau_tol: float = 0.01
    scale_growth: float = 1.5
    seed: int = 0
    fixed_z_seed: Optional[int] = None
    checkpoint_every: Optional[int] = None
    history_eval_cap: int = 256

    def __post_init__(self):
        self.p = norm_p(self.p)
        if not (self.zeta > 0):
            raise ValueError(f"zeta must be > 0, got {self.zeta}")
        if self.epsilon is not None and not (self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.kappa < 0 or self.alpha < 0:
            raise ValueError("kappa and alpha must be >= 0")
        if not (0.0 < self.scale_start <= 1.0):
            raise ValueError(f"scale_start must be in (0, 1], got {self.scale_start}")


@dataclass
class ScaledPerturbation:
    """One scaled application: raw output, scale, scaled values and norm."""

    delta: np.ndarray
    omega: float
    delta_prime: np.ndarray
    norm_p: float
    z: Optional[np.ndarray] = None
    delta_prime_tensor: Optional[Tensor] = field(default=None, repr=False)


class UanModel:
    """Noise-to-perturbation generator.

    Five transposed-conv blocks map a 100-entry latent from 1x1 up to
    3x33x33 (kernel 3 throughout; the first block uses stride 1 / no padding,
    the rest stride 2 / padding 1), followed by 512- and 1024-wide hidden
    affine blocks and a linear head reshaped to the image size. The 33x33 map
    is flattened straight into the head. Normalization layers use per-sample
    statistics because the generator always runs a single latent at a time.
    """

    def __init__(self, image_shape: tuple[int, int, int] = (3, 32, 32), seed: int = 0):
        c, hh, ww = image_shape
        if hh != ww:
            raise ValueError(f"square images only, got {image_shape}")
        self.image_shape = tuple(int(v) for v in image_shape)
        self.seed = seed
        rng = make_rng(seed, "uan-init")
        chans = [LATENT_DIM, 256, 128, 64, 32, 3]
        layers: list[tuple[str, object]] = []
        for i in range(5):
            stride, pad = (1, 0) if i == 0 else (2, 1)
            layers.append((f"d{i}.deconv", Deconv(rng, chans[i], chans[i + 1], stride=stride, pad=pad)))
            layers.append((f"d{i}.bn", BatchNorm(chans[i + 1], track=False)))
            layers.append((f"d{i}.relu", ReLU()))
        flat = 3 * DECONV_OUT * DECONV_OUT
        layers.append(("fc0.linear", Linear(rng, flat, 512)))
        layers.append(("fc0.norm", FeatureNorm(512)))
        layers.append(("fc0.relu", ReLU()))
        layers.append(("fc1.linear", Linear(rng, 512, 1024)))
        layers.append(("fc1.norm", FeatureNorm(1024)))
        layers.append(("fc1.relu", ReLU()))
        layers.append(("head", Linear(rng, 1024, c * hh * ww)))
        self.stack = Stack(layers)
        self._named = dict(layers)

    def forward(self, z) -> Tensor:
        zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        if zt.size != LATENT_DIM:
            raise ValueError(f"latent must have {LATENT_DIM} entries, got {zt.size}")
        named = self._named
        x = ad.reshape(zt, (1, LATENT_DIM, 1, 1))
        for i in range(5):
            x = named[f"d{i}.deconv"].forward(x, train=True)
            x = ad.relu(named[f"d{i}.bn"].forward(x, train=True))
        x = ad.reshape(x, (1, 3 * DECONV_OUT * DECONV_OUT))
        x = ad.relu(named["fc0.norm"].forward(named["fc0.linear"].forward(x, True), True))
        x = ad.relu(named["fc1.norm"].forward(named["fc1.linear"].forward(x, True), True))
        x = named["head"].forward(x, True)
        return ad.reshape(x, self.image_shape)

    def parameters(self) -> dict[str, Tensor]:
        return self.stack.params()

    def state(self) -> dict[str, np.ndarray]:
        return self.stack.state()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.stack.load_state(state)

    def clone(self) -> "UanModel":
        twin = UanModel(self.image_shape, seed=self.seed)
        twin.load_state({k: v.copy() for k, v in self.state().items()})
        return twin

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        meta = {"kind": "uan", "image_shape": list(self.image_shape), "seed": self.seed}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.state(), meta)

    @staticmethod
    def load(path: str) -> "UanModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "uan":
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r} is not a generator")
        uan = UanModel(tuple(meta["image_shape"]), seed=meta.get("seed", 0))
        uan.load_state(tensors)
        return uan


def image_norms(images: np.ndarray, p) -> np.ndarray:
    """Per-image norms of an (N, C, H, W) stack."""
    pv = norm_p(p)
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    if pv == 2.0:
        return np.sqrt((flat**2).sum(axis=1))
    return np.abs(flat).max(axis=1)


def epsilon_from_zeta(train: Dataset, p, zeta: float) -> float:
    """Absolute budget in model units: zeta times the mean image norm."""
    norms = image_norms(to_model_units(train.images, train.input_range), p)
    return float(zeta * norms.mean())


def epsilon_native_units(train: Dataset, p, zeta: float) -> float:
    lo, hi = train.input_range
    return epsilon_from_zeta(train, p, zeta) * (hi - lo)


def scale_and_apply(
    delta: Tensor,
    cfg: AttackConfig,
    x_batch,
    input_range: tuple[float, float] = MODEL_RANGE,
    s: float = 1.0,
) -> tuple[Tensor, ScaledPerturbation]:
    """Scale the raw perturbation onto the budget and add it to every image.

    omega = s * epsilon / ||delta||_p with the norm treated as a per-step
    constant, so gradients flow through delta both into the images and into
    the norm penalty. The perturbed batch is clipped into ``input_range``.
    """
    if cfg.epsilon is None:
        raise ValueError("cfg.epsilon is unset; derive it with epsilon_from_zeta first")
    raw_norm = float(image_norms(delta.data[None], cfg.p)[0])
    if raw_norm == 0.0:
        raise DegeneratePerturbationError("generator produced an exactly-zero perturbation")
    omega = s * cfg.epsilon / raw_norm
    dprime = ad.scalar_mul(delta, omega)
    xb = x_batch if isinstance(x_batch, Tensor) else Tensor(x_batch)
    lo, hi = input_range
    x_adv = ad.clamp(ad.add(xb, dprime), lo, hi)
    sp = ScaledPerturbation(
        delta=delta.data.copy(),
        omega=omega,
        delta_prime=dprime.data.copy(),
        norm_p=omega * raw_norm,
        delta_prime_tensor=dprime,
    )
    return x_adv, sp


def _margin(log_probs: Tensor, keep, drop_max_of) -> Tensor:
    picked = ad.gather_class(log_probs, keep)
    other = ad.max_over_classes_excluding(log_probs, drop_max_of)
    return ad.sub(picked, other)


def loss_nontargeted(log_probs: Tensor, c0: np.ndarray, delta_prime: Tensor, cfg: AttackConfig) -> Tensor:
    """Clamped margin pushing predictions away from their clean classes.

    Per row: max(logp[c0] - max_{i != c0} logp[i], -kappa); already-fooled
    rows with margin therefore contribute exactly -kappa. The batch mean is
    summed with alpha * ||delta'||_p computed once on the shared perturbation.
    """
    m = _margin(log_probs, c0, c0)
    fs = ad.mean(ad.clamp(m, lo=-cfg.kappa))
    dist = ad.scalar_mul(ad.lp_norm(delta_prime, cfg.p), cfg.alpha)
    return ad.add(fs, dist)


def loss_targeted(log_probs: Tensor, c: int, delta_prime: Tensor, cfg: AttackConfig) -> Tensor:
    """Clamped margin pulling predictions toward class c (roles swapped)."""
    n = log_probs.shape[0]
    idx = np.full(n, int(c), dtype=np.int64)
    m = ad.sub(ad.max_over_classes_excluding(log_probs, idx), ad.gather_class(log_probs, idx))
    fs = ad.mean(ad.clamp(m, lo=-cfg.kappa))
    dist = ad.scalar_mul(ad.lp_norm(delta_prime, cfg.p), cfg.alpha)
    return ad.add(fs, dist)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    s: float
    train_error: float
    val_error: float


@dataclass
class AttackHistory:
    epsilon: float
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoints: list[tuple[int, dict]] = field(default_factory=list)
    steps: int = 0


@dataclass
class OmegaSchedule:
    """Grow the scale fraction s whenever epoch losses stop improving."""

    s: float
    growth: float = 1.5
    window: int = 3
    tol: float = 0.01
    _streak: int = 0
    _last: Optional[float] = None

    def update(self, epoch_loss: float) -> None:
        if self._last is not None:
            improvement = (self._last - epoch_loss) / max(abs(self._last), 1e-12)
            if improvement < self.tol:
                self._streak += 1
            else:
                self._streak = 0
            if self._streak >= self.window:
                self.s = min(1.0, self.s * self.growth)
                self._streak = 0
        self._last = epoch_loss


def generate_delta_prime(uan: UanModel, cfg: AttackConfig, z: np.ndarray) -> np.ndarray:
    """Full-budget (s = 1) scaled perturbation for evaluation and defense."""
    if cfg.epsilon is None:
        raise ValueError("cfg.epsilon is unset")
    delta = uan.forward(z).data
    raw_norm = float(image_norms(delta[None], cfg.p)[0])
    if raw_norm == 0.0:
        raise DegeneratePerturbationError("generator produced an exactly-zero perturbation")
    return (delta * np.float32(cfg.epsilon / raw_norm)).astype(np.float32)


def draw_z(rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(LATENT_DIM).astype(np.float32)


def _error_rate_fast(target, images, reference, targeted: Optional[int], dprime) -> float:
    adv = np.clip(images + dprime, MODEL_RANGE[0], MODEL_RANGE[1]).astype(np.float32)
    preds = predict_classes(target, adv)
    if targeted is None:
        return float((preds != reference).mean())
    return float((preds == targeted).mean())


def resolve_epsilon(cfg: AttackConfig, train: Dataset) -> AttackConfig:
    if cfg.epsilon is None:
        return replace(cfg, epsilon=epsilon_from_zeta(train, cfg.p, cfg.zeta))
    return cfg


def train_uan(
    targets: Union[TargetModel, Sequence[TargetModel]],
    train: Dataset,
    cfg: AttackConfig,
    val: Optional[Dataset] = None,
) -> tuple[UanModel, AttackHistory]:
    """Optimize a generator against one target or an equal-weighted ensemble.

    Per batch: draw z (or reuse the pinned one), generate, scale, clip, sum
    the per-target clamped margins plus one norm penalty, and step Adam on
    the generator parameters only; target weights stay frozen. The history
    records per-epoch mean loss, the current scale fraction and error rates
    on capped train/val probes.
    """
    target_list = [targets] if isinstance(targets, TargetModel) else list(targets)
    shapes = {t.input_shape for t in target_list}
    if len(shapes) != 1 or target_list[0].input_shape != train.image_shape:
        raise ValueError(f"targets/dataset shapes disagree: {shapes} vs {train.image_shape}")
    if cfg.targeted is not None and not (0 <= cfg.targeted < train.num_classes):
        raise ValueError(f"target class {cfg.targeted} outside [0, {train.num_classes})")
    cfg = resolve_epsilon(cfg, train)

    frozen = []
    for t in target_list:
        for p in t.parameters().values():
            frozen.append((p, p.requires_grad))
            p.requires_grad = False
    try:
        return _train_uan_inner(target_list, train, cfg, val)
    finally:
        for p, was in frozen:
            p.requires_grad = was


def _train_uan_inner(target_list, train, cfg, val):
    uan = UanModel(train.image_shape, seed=child_seed(cfg.seed, "uan-init"))
    params = uan.parameters()
    opt = AdamState(learning_rate=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    sched = OmegaSchedule(cfg.scale_start, cfg.scale_growth, cfg.plateau_window, cfg.plateau_tol)
    history = AttackHistory(epsilon=cfg.epsilon)

    images = to_model_units(train.images, train.input_range)
    n = len(train)
    clean = [predict_classes(t, images) for t in target_list]

    shuffle_rng = make_rng(cfg.seed, "shuffle")
    z_rng = make_rng(cfg.seed, "z")
    fixed_z = draw_z(make_rng(cfg.fixed_z_seed, "fixed-z")) if cfg.fixed_z_seed is not None else None
    probe_z = draw_z(make_rng(cfg.seed, "history-z"))

    cap = cfg.history_eval_cap
    probe_idx = make_rng(cfg.seed, "history-train").permutation(n)[:cap]
    val_images = val_ref = None
    if val is not None:
        val_images = to_model_units(val.images, val.input_range)[
            make_rng(cfg.seed, "history-val").permutation(len(val))[:cap]
        ]
        val_ref = predict_classes(target_list[0], val_images)

    if cfg.checkpoint_every:
        history.checkpoints.append((0, {k: v.copy() for k, v in uan.state().items()}))

    last_finite = 0.0
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            z = fixed_z if fixed_z is not None else draw_z(z_rng)
            with Graph() as g:
                delta = uan.forward(z)
                x_adv, sp = scale_and_apply(delta, cfg, images[idx], MODEL_RANGE, s=sched.s)
                total = None
                for t, c0 in zip(target_list, clean):
                    logp = ad.log_softmax(t.forward(x_adv, train=False))
                    if cfg.targeted is None:
                        m = _margin(logp, c0[idx], c0[idx])
                    else:
                        tgt = np.full(len(idx), cfg.targeted, dtype=np.int64)
                        m = ad.sub(
                            ad.max_over_classes_excluding(logp, tgt), ad.gather_class(logp, tgt)
                        )
                    fs = ad.mean(ad.clamp(m, lo=-cfg.kappa))
                    total = fs if total is None else ad.add(total, fs)
                dist = ad.scalar_mul(ad.lp_norm(sp.delta_prime_tensor, cfg.p), cfg.alpha)
                loss = ad.add(total, dist)
            lval = loss.item()
            if not math.isfinite(lval):
                raise AttackDiverged(epoch, step, last_finite)
            last_finite = lval
            backward(g, loss)
            adam_step(opt, params)
            zero_grads(params)
            epoch_loss += lval
            batches += 1
            step += 1
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                history.checkpoints.append((step, {k: v.copy() for k, v in uan.state().items()}))
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break

        mean_loss = epoch_loss / max(batches, 1)
        dprime = generate_delta_prime(uan, cfg, probe_z)
        train_err = _error_rate_fast(
            target_list[0], images[probe_idx], clean[0][probe_idx], cfg.targeted, dprime
        )
        val_err = (
            _error_rate_fast(target_list[0], val_images, val_ref, cfg.targeted, dprime)
            if val_images is not None
            else float("nan")
        )
        history.epochs.append(EpochStats(epoch, mean_loss, sched.s, train_err, val_err))
        sched.update(mean_loss)
        if done:
            break

    history.steps = step
    if cfg.checkpoint_every and (not history.checkpoints or history.checkpoints[-1][0] != step):
        history.checkpoints.append((step, {k: v.copy() for k, v in uan.state().items()}))
    return uan, history
