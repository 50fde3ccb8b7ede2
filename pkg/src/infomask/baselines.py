"""The mask ablations and the gradient-weighted saliency baseline.

Each comparison method is a MethodSpec bundling its loss variant, what
the classifier consumes, and where its localization map comes from. The
mask methods read the model's own mask; the saliency baseline trains the
plain attention classifier and derives maps from class-logit gradients.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from . import model as net
from . import training
from .objective import LossConfig
from .tensor import Tensor, backward, no_grad, pick_class, sum_all

log = logging.getLogger(__name__)

METHODS = ("infomask", "featuremask", "regl1", "gradcam")
MAP_SOURCES = ("mask", "gradcam")

_zero_map_count = 0


def zero_map_count() -> int:
    return _zero_map_count


def reset_zero_map_count() -> None:
    global _zero_map_count
    _zero_map_count = 0


@dataclass(frozen=True)
class MethodSpec:
    """How one comparison method trains and localizes."""

    method: str
    loss: LossConfig
    map_source: str
    classifier_input: str
    gradcam_layer: str = "enc6"


def method_spec(
    method: str,
    *,
    alpha: float = 1e-3,
    l1_weight: float = 1e-2,
    eps_samples: int = 1,
    classifier_input: str = "mask",
    gradcam_layer: str = "enc6",
) -> MethodSpec:
    """Build a ``MethodSpec`` for a named method, applying its fixed conventions."""
    if method == "infomask":
        loss = LossConfig(alpha=alpha, eps_samples=eps_samples, variant="infomask")
        return MethodSpec(method, loss, "mask", classifier_input, gradcam_layer)
    if method == "featuremask":
        loss = LossConfig(eps_samples=eps_samples, variant="featuremask")
        return MethodSpec(method, loss, "mask", classifier_input, gradcam_layer)
    if method == "regl1":
        loss = LossConfig(eps_samples=eps_samples, variant="regl1", l1_weight=l1_weight)
        return MethodSpec(method, loss, "mask", classifier_input, gradcam_layer)
    if method == "gradcam":
        loss = LossConfig(variant="featuremask")
        return MethodSpec(method, loss, "gradcam", "attention", gradcam_layer)
    raise ValueError(f"method {method!r} not in {METHODS}")


def gradcam_map(
    params: net.ModelParams,
    images: np.ndarray,
    *,
    layer: str = "enc6",
    labels=None,
    batch_size: int = 16,
) -> np.ndarray:
    """Gradient-weighted activation maps from the attention classifier.

    Activations at ``layer`` are weighted by the spatial mean of the
    picked class logit's gradient, rectified, summed over channels,
    upsampled to image size, and max-normalized per image. ``labels``
    picks the logit; by default the predicted class is used. Maps that
    rectify to all zero are left zero (counted and logged).

    The encoder prefix up to ``layer`` runs without recording, so the
    backward pass only walks the small suffix graph.
    """
    global _zero_map_count
    steps = net._encoder_steps(params)
    names = [n for n, _ in steps]
    if layer not in names:
        raise ValueError(f"gradcam_map: layer {layer!r} not in {names}")
    cut = names.index(layer)
    images = np.asarray(images, dtype=params.dtype)
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"gradcam_map: expected (N, 1, H, W) images, got {images.shape}")
    n_total, _, h_img, w_img = images.shape
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n_total,):
            raise ValueError(f"gradcam_map: labels shape {labels.shape} != ({n_total},)")

    out = np.zeros((n_total, h_img, w_img))
    for start in range(0, n_total, batch_size):
        stop = min(start + batch_size, n_total)
        with no_grad():
            hidden = Tensor(images[start:stop])
            for _, step_fn in steps[: cut + 1]:
                hidden = step_fn(hidden)
        act = Tensor(hidden.data.copy(), requires_grad=True)
        hidden = act
        for _, step_fn in steps[cut + 1 :]:
            hidden = step_fn(hidden)
        a = net.attention_map(params, hidden, (h_img, w_img))
        logits = net.class_logits(params, a)
        picked_labels = labels[start:stop] if labels is not None else logits.data.argmax(axis=1)
        grads = backward(sum_all(pick_class(logits, picked_labels)))
        g = grads[act].astype(np.float64)
        weights = g.mean(axis=(2, 3), keepdims=True)
        raw = np.maximum((weights * act.data.astype(np.float64)).sum(axis=1), 0.0)
        peaks = raw.max(axis=(1, 2))
        flat = peaks == 0.0
        if flat.any():
            _zero_map_count += int(flat.sum())
            log.warning("gradcam_map: %d map(s) rectified to all zero", int(flat.sum()))
        raw[~flat] /= peaks[~flat, None, None]
        factor = h_img // raw.shape[1]
        out[start:stop] = np.repeat(np.repeat(raw, factor, axis=1), factor, axis=2)
    params.zero_grads()
    return out


@dataclass
class FittedMethod:
    """A trained method: chosen weights plus its tuned binarization threshold."""

    spec: MethodSpec
    params: net.ModelParams
    threshold: float
    checkpoint: training.Checkpoint
    result: training.TrainResult


def fit_method(
    spec: MethodSpec, train_samples, val_samples, cfg: training.TrainConfig
) -> FittedMethod:
    """Train one method and tune its threshold on the validation split."""
    run_cfg = replace(cfg, loss=spec.loss, classifier_input=spec.classifier_input)
    result = training.train(train_samples, val_samples, run_cfg)
    if not result.checkpoints:
        raise RuntimeError(f"{spec.method}: training aborted before the first checkpoint")
    best = training.select_checkpoint(result.checkpoints, cfg.n_checkpoints)
    if spec.map_source == "gradcam":
        maps = _method_maps(spec, best.params, val_samples, cfg.batch_size, cfg.tau)
        boxes = [s.bbox for s in val_samples]
        try:
            threshold, _ = training.tune_threshold(
                maps, boxes, fnr_cap=cfg.fnr_cap, step=cfg.threshold_step
            )
        except training.EmptyMaskError:
            threshold = _empty_map_fallback(spec.method)
    else:
        threshold = best.threshold
        if np.isnan(threshold):
            threshold = _empty_map_fallback(spec.method)
    return FittedMethod(spec, best.params, threshold, best, result)


def _empty_map_fallback(method: str) -> float:
    # a degenerate method should score badly, not kill the comparison;
    # thresholding at zero keeps whatever the maps still mark
    log.warning("%s: validation maps all empty, thresholding at zero", method)
    return 0.0


def _method_maps(spec, params, samples, batch_size, tau) -> np.ndarray:
    if spec.map_source == "gradcam":
        images = np.stack([s.image for s in samples])[:, None, :, :]
        return gradcam_map(params, images, layer=spec.gradcam_layer, batch_size=batch_size)
    return training.predict_masks(params, samples, batch_size=batch_size, tau=tau)


def localization_maps(
    fitted: FittedMethod, samples, *, batch_size: int = 16, tau: float = 0.5
) -> np.ndarray:
    """Continuous localization maps (N, H, W) for this method."""
    return _method_maps(fitted.spec, fitted.params, samples, batch_size, tau)


def evaluate_method(
    fitted: FittedMethod,
    samples,
    *,
    batch_size: int = 16,
    tau: float = 0.5,
    kde_bandwidth: float | None = None,
    eval_draws: int = 0,
) -> metrics.LocalizationReport:
    maps = localization_maps(fitted, samples, batch_size=batch_size, tau=tau)
    return training.evaluate(
        fitted.params,
        samples,
        fitted.threshold,
        tau=tau,
        classifier_input=fitted.spec.classifier_input,
        batch_size=batch_size,
        maps=maps,
        kde_bandwidth=kde_bandwidth,
        eval_draws=eval_draws,
    )


def compare(
    specs, train_samples, val_samples, test_samples, cfg: training.TrainConfig
) -> list[tuple[str, metrics.LocalizationReport, FittedMethod]]:
    """Fit every spec under the same config and score it on the test split.

    All methods share the run seed, so weight init and data order match
    across them; only the objectives and map sources differ.
    """
    out = []
    for spec in specs:
        fitted = fit_method(spec, train_samples, val_samples, cfg)
        report = evaluate_method(
            fitted, test_samples, batch_size=cfg.batch_size, tau=cfg.tau,
            eval_draws=cfg.eval_draws,
        )
        log.info("%s: %s", spec.method, report.summary_row(spec.method))
        out.append((spec.method, report, fitted))
    return out
