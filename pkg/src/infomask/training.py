"""Training loop, optimizers, validation-driven checkpoint and threshold choice.

Randomness is split into three child streams of the run seed (weight
init, latent noise, batch shuffling), so any one consumer can be swapped
out without disturbing the draws the others see.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import model as net
from .objective import LossBreakdown, LossConfig, batch_loss
from .tensor import NumericError, backward, no_grad

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd-momentum", "adaptive-moments")
DEFAULT_FNR_CAP = 0.95
DEFAULT_THRESHOLD_STEP = 0.05


class EmptyMaskError(RuntimeError):
    """Every candidate threshold wiped out every mask."""


@dataclass
class TrainConfig:
    """Everything the loop needs besides the data itself."""

    learning_rate: float = 1e-3
    optimizer: str = "adaptive-moments"
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 6
    seed: int = 0
    tau: float = 0.5
    dtype: str = "float32"
    classifier_input: str = "mask"
    loss: LossConfig = field(default_factory=LossConfig)
    fnr_cap: float = DEFAULT_FNR_CAP
    threshold_step: float = DEFAULT_THRESHOLD_STEP
    checkpoint_every: int = 1
    n_checkpoints: int = 3
    eval_draws: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer {self.optimizer!r} not in {OPTIMIZERS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.classifier_input not in net.CLASSIFIER_INPUTS:
            raise ValueError(
                f"classifier_input {self.classifier_input!r} not in {net.CLASSIFIER_INPUTS}"
            )
        for name in ("learning_rate", "momentum", "tau", "fnr_cap", "threshold_step"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.threshold_step < 1:
            raise ValueError(f"threshold_step must be in (0, 1), got {self.threshold_step}")
        for name in ("batch_size", "epochs", "checkpoint_every", "n_checkpoints"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
            setattr(self, name, int(v))
        if int(self.eval_draws) != self.eval_draws or self.eval_draws < 0:
            raise ValueError(f"eval_draws must be a non-negative integer, got {self.eval_draws}")
        self.eval_draws = int(self.eval_draws)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class Checkpoint:
    """One epoch's weights plus the validation numbers used to rank it."""

    epoch: int
    params: net.ModelParams
    val_accuracy: float
    val_iop: float
    threshold: float


@dataclass
class TrainResult:
    checkpoints: list
    log_lines: list
    aborted: bool = False


class SgdMomentum:
    """Velocity decays by the momentum factor, gradients pile onto it."""

    def __init__(self, params: net.ModelParams, learning_rate: float, momentum: float = 0.9):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self._velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def apply(self, params: net.ModelParams, grads: dict) -> None:
        for name, t in params.items():
            v = self._velocity[name]
            v *= self.momentum
            v += grads[name]
            t.data -= self.learning_rate * v


class AdaptiveMoments:
    """Per-weight step sizes from running first and second gradient moments.

    Both moment averages are bias-corrected with a shared step counter,
    so the very first update already has magnitude close to the learning
    rate wherever the gradient is not vanishing.
    """

    beta1 = 0.9
    beta2 = 0.999
    epsilon = 1e-8

    def __init__(self, params: net.ModelParams, learning_rate: float):
        self.learning_rate = float(learning_rate)
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._t = 0

    def apply(self, params: net.ModelParams, grads: dict) -> None:
        self._t += 1
        m_corr = 1.0 - self.beta1**self._t
        v_corr = 1.0 - self.beta2**self._t
        for name, t in params.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.learning_rate * (m / m_corr) / (np.sqrt(v / v_corr) + self.epsilon)


def make_optimizer(name: str, params: net.ModelParams, cfg: TrainConfig):
    if name == "sgd-momentum":
        return SgdMomentum(params, cfg.learning_rate, cfg.momentum)
    if name == "adaptive-moments":
        return AdaptiveMoments(params, cfg.learning_rate)
    raise ValueError(f"optimizer {name!r} not in {OPTIMIZERS}")


def step(
    params: net.ModelParams,
    batch,
    optimizer,
    loss_cfg: LossConfig,
    *,
    rng=None,
    eps=None,
    tau: float = 0.5,
    classifier_input: str = "mask",
) -> LossBreakdown:
    """One optimization step; raises NumericError on non-finite gradients."""
    params.zero_grads()
    breakdown = batch_loss(
        batch, params, loss_cfg, eps=eps, rng=rng, tau=tau, classifier_input=classifier_input
    )
    leaf_grads = backward(breakdown.node)
    grads = {}
    for name, t in params.items():
        g = leaf_grads.get(t)
        if g is None:
            g = np.zeros_like(t.data)
        elif not np.isfinite(g.sum(dtype=np.float64)):
            raise NumericError(f"step: non-finite gradient for {name!r}")
        grads[name] = g
    optimizer.apply(params, grads)
    params.zero_grads()
    return breakdown


def _stack_images(samples, dtype) -> np.ndarray:
    return np.stack([np.asarray(s.image, dtype=dtype) for s in samples])[:, None, :, :]


def predict_outputs(
    params: net.ModelParams,
    samples,
    *,
    batch_size: int = 16,
    tau: float = 0.5,
    classifier_input: str = "mask",
    eval_draws: int = 0,
    eval_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference pass over samples: (class probs, mask maps).

    Mask maps always come from the zero-noise (mean latent) pass. With
    ``eval_draws`` = 0 the class probabilities do too; with a positive
    count they are the Monte-Carlo predictive instead — the mean of the
    class probabilities over that many seeded latent draws, which keeps
    the classifier on the input distribution it was trained on. The
    attention route has no mask, so the second element is None there.
    """
    prob_chunks = []
    mask_chunks = []
    rng = np.random.default_rng(eval_seed) if eval_draws else None
    with no_grad():
        for start in range(0, len(samples), batch_size):
            x = _stack_images(samples[start : start + batch_size], params.dtype)
            if classifier_input == "attention":
                probs, _ = net.baseline_forward(params, x)
                prob_chunks.append(probs.data.astype(np.float64))
                continue
            out = net.forward(params, x, eps=0.0, tau=tau, classifier_input=classifier_input)
            mask_chunks.append(out.state.mask.data[:, 0].astype(np.float64))
            if eval_draws:
                acc = np.zeros((x.shape[0], 2), dtype=np.float64)
                for _ in range(eval_draws):
                    eps = rng.standard_normal(x.shape).astype(params.dtype)
                    noisy = net.forward(
                        params, x, eps=eps, tau=tau, classifier_input=classifier_input
                    )
                    acc += noisy.class_probs.data.astype(np.float64)
                prob_chunks.append(acc / eval_draws)
            else:
                prob_chunks.append(out.class_probs.data.astype(np.float64))
    probs = np.concatenate(prob_chunks)
    return probs, np.concatenate(mask_chunks) if mask_chunks else None


def predict_probs(
    params: net.ModelParams,
    samples,
    *,
    batch_size: int = 16,
    tau: float = 0.5,
    classifier_input: str = "mask",
    eval_draws: int = 0,
    eval_seed: int = 0,
) -> np.ndarray:
    """Class probabilities, shape (N, 2); see predict_outputs for eval_draws."""
    probs, _ = predict_outputs(
        params,
        samples,
        batch_size=batch_size,
        tau=tau,
        classifier_input=classifier_input,
        eval_draws=eval_draws,
        eval_seed=eval_seed,
    )
    return probs


def predict_masks(
    params: net.ModelParams, samples, *, batch_size: int = 16, tau: float = 0.5
) -> np.ndarray:
    """Deterministic mask maps (zero latent noise), shape (N, H, W)."""
    _, masks = predict_outputs(params, samples, batch_size=batch_size, tau=tau)
    return masks


def threshold_grid(step: float = DEFAULT_THRESHOLD_STEP) -> np.ndarray:
    """Candidate binarization thresholds 0, step, 2*step, ... capped at 0.95."""
    grid = np.arange(0.0, 0.95 + step / 2, step)
    return np.round(grid, 10)


def tune_threshold(
    maps: np.ndarray,
    boxes,
    *,
    fnr_cap: float = DEFAULT_FNR_CAP,
    step: float = DEFAULT_THRESHOLD_STEP,
) -> tuple[float, float]:
    """Pick the threshold maximizing mean IoP subject to a mean-FNR cap.

    Only samples that carry a box participate. Thresholds where every
    mask comes out empty are dropped; if that kills the whole grid an
    EmptyMaskError is raised. If no threshold satisfies the cap the best
    unconstrained one is used and a warning logged. Ties go to the
    smaller threshold. Returns (threshold, mean IoP there).
    """
    pairs = [(m, b) for m, b in zip(maps, boxes) if b is not None]
    if not pairs:
        raise ValueError("tune_threshold: no boxed samples to tune on")
    candidates = []
    for t in threshold_grid(step):
        scores = [metrics.score_mask(m > t, b) for m, b in pairs]
        iops = [s.iop for s in scores if s.iop is not None]
        if not iops:
            continue
        mean_fnr = float(np.mean([s.fnr for s in scores]))
        candidates.append((float(t), float(np.mean(iops)), mean_fnr))
    if not candidates:
        raise EmptyMaskError("tune_threshold: every threshold left every mask empty")
    feasible = [c for c in candidates if c[2] <= fnr_cap]
    if not feasible:
        log.warning(
            "tune_threshold: no threshold meets mean FNR <= %g, ignoring the cap", fnr_cap
        )
        feasible = candidates
    best = feasible[0]
    for c in feasible[1:]:
        if c[1] > best[1]:
            best = c
    return best[0], best[1]


def select_checkpoint(checkpoints, pool_size: int = 3) -> Checkpoint:
    """Best validation IoP among the top accuracy checkpoints.

    The pool is the ``pool_size`` highest validation accuracies (earlier
    epoch breaks accuracy ties); within it the highest validation IoP
    wins, earlier epoch again breaking ties. Checkpoints without a usable
    IoP rank below any with one.
    """
    if not checkpoints:
        raise ValueError("select_checkpoint: no checkpoints")
    ranked = sorted(checkpoints, key=lambda c: (-c.val_accuracy, c.epoch))
    pool = sorted(ranked[:pool_size], key=lambda c: c.epoch)

    def iop_key(c):
        v = c.val_iop
        return -np.inf if v is None or np.isnan(v) else v

    return max(pool, key=iop_key)


def _validate(params, val_samples, cfg: TrainConfig) -> tuple[float, float, float]:
    probs, maps = predict_outputs(
        params,
        val_samples,
        batch_size=cfg.batch_size,
        tau=cfg.tau,
        classifier_input=cfg.classifier_input,
        eval_draws=cfg.eval_draws,
    )
    labels = np.array([s.label for s in val_samples])
    val_acc = metrics.accuracy(probs, labels)
    if maps is None:
        return val_acc, float("nan"), float("nan")
    boxes = [s.bbox for s in val_samples]
    try:
        threshold, val_iop = tune_threshold(
            maps, boxes, fnr_cap=cfg.fnr_cap, step=cfg.threshold_step
        )
    except EmptyMaskError:
        log.warning("validation produced only empty masks this epoch")
        return val_acc, float("nan"), float("nan")
    return val_acc, val_iop, threshold


def train(train_samples, val_samples, cfg: TrainConfig, params=None) -> TrainResult:
    """Run the optimization loop, validating and checkpointing per epoch.

    ``params`` overrides the seeded initialization when given (the noise
    and shuffle streams stay the same either way). On a non-finite loss
    or gradient the loop aborts, keeping the checkpoints taken so far.
    """
    if not train_samples:
        raise ValueError("train: no training samples")
    init_ss, eps_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    if params is None:
        params = net.ModelParams.initialize(np.random.default_rng(init_ss), cfg.np_dtype)
    eps_rng = np.random.default_rng(eps_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    optimizer = make_optimizer(cfg.optimizer, params, cfg)

    checkpoints: list[Checkpoint] = []
    lines: list[str] = []
    step_idx = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            try:
                breakdown = step(
                    params,
                    batch,
                    optimizer,
                    cfg.loss,
                    rng=eps_rng,
                    tau=cfg.tau,
                    classifier_input=cfg.classifier_input,
                )
            except NumericError as exc:
                log.warning("training aborted at step %d: %s", step_idx, exc)
                lines.append(f"abort,{step_idx},{exc}")
                return TrainResult(checkpoints, lines, aborted=True)
            lines.append(breakdown.log_line(step_idx))
            step_idx += 1
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            val_acc, val_iop, threshold = _validate(params, val_samples, cfg)
            lines.append(f"epoch,{epoch},{val_acc!r},{val_iop!r},{threshold!r}")
            log.info("epoch %d: val_acc=%.4f val_iop=%.4f", epoch, val_acc, val_iop)
            checkpoints.append(Checkpoint(epoch, params.copy(), val_acc, val_iop, threshold))
    return TrainResult(checkpoints, lines)


def evaluate(
    params: net.ModelParams,
    samples,
    threshold: float,
    *,
    tau: float = 0.5,
    classifier_input: str = "mask",
    batch_size: int = 16,
    maps: np.ndarray | None = None,
    kde_bandwidth: float | None = None,
    eval_draws: int = 0,
    eval_seed: int = 0,
) -> metrics.LocalizationReport:
    """Score classification over all samples and localization over boxed ones.

    ``maps`` lets a caller substitute externally computed localization
    maps (the gradient-weighted baseline does); by default the model's
    own deterministic masks are used. ``eval_draws`` switches the class
    probabilities to the Monte-Carlo predictive (see predict_outputs).
    """
    if maps is None:
        probs, maps = predict_outputs(
            params,
            samples,
            batch_size=batch_size,
            tau=tau,
            classifier_input=classifier_input,
            eval_draws=eval_draws,
            eval_seed=eval_seed,
        )
        if maps is None:
            raise ValueError(
                "evaluate: the attention route produces no mask maps; pass maps explicitly"
            )
    else:
        probs = predict_probs(
            params,
            samples,
            batch_size=batch_size,
            tau=tau,
            classifier_input=classifier_input,
            eval_draws=eval_draws,
            eval_seed=eval_seed,
        )
    labels = np.array([s.label for s in samples])
    scores = [
        metrics.score_mask(m > threshold, s.bbox)
        for m, s in zip(maps, samples)
        if s.bbox is not None
    ]
    return metrics.build_report(scores, probs, labels, kde_bandwidth=kde_bandwidth)
