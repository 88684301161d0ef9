"""Adapted baselines that build unseen-class weights (or predictions)
from seen-class material only.

All weight-producing baselines return a matrix with one row per requested
unseen class, aligned with the given descriptor order; injection of those
rows is the caller's job. Biases are not modelled here.
"""

import numpy as np

from .data import ClassifierHead, DescriptorSet, PairSet
from .errors import DivergenceError, IcisError
from .evaluation import softmax_rows
from .model import (
    IcisModel,
    LossConfig,
    LossTrace,
    TrainConfig,
    _proportional_slice,
    should_stop,
    stopping_threshold,
)
from .nn import AdamState, LinearLayer, MlpTwoLayer, adam_step, batch_loss
from .tensor import RngState, as_matrix, row_normalize


def _cosine_sim_matrix(left, right) -> np.ndarray:
    left = row_normalize(as_matrix(left))
    right = row_normalize(as_matrix(right))
    return left @ right.T


# ---------------------------------------------------------------------------
# convex combination of semantic vectors driven by seen-class scores

def conse_combine(head: ClassifierHead, seen_descriptors: DescriptorSet, features, top_t: int = 10) -> np.ndarray:
    """Per sample, a convex combination of seen-class descriptors weighted
    by the renormalised top ``top_t`` softmax scores of the seen head."""
    if top_t < 1:
        raise IcisError("top_t must be >= 1")
    order = [seen_descriptors.index_of(c) for c in head.class_ids]
    a_seen = seen_descriptors.matrix[order]
    probs = softmax_rows(head.logits(features))
    t = min(top_t, probs.shape[1])
    # keep only each row's t largest probabilities, renormalised
    idx = np.argpartition(probs, -t, axis=1)[:, -t:]
    kept = np.zeros_like(probs)
    np.put_along_axis(kept, idx, np.take_along_axis(probs, idx, axis=1), axis=1)
    kept /= kept.sum(axis=1, keepdims=True)
    return kept @ a_seen


def conse_classify(
    head: ClassifierHead,
    seen_descriptors: DescriptorSet,
    target_descriptors: DescriptorSet,
    features,
    top_t: int = 10,
) -> list:
    """Nearest target class (by cosine) to each combined semantic vector.

    Ties go to the lowest class id, as in head-based classification.
    """
    if not target_descriptors.class_ids:
        raise IcisError("empty target class set")
    combined = conse_combine(head, seen_descriptors, features, top_t)
    norms = np.linalg.norm(combined, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise IcisError("combined semantic vector collapsed to zero")
    sims = (combined / norms) @ row_normalize(target_descriptors.matrix).T
    ids = target_descriptors.class_ids
    id_order = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    top = sims.max(axis=1, keepdims=True)
    tie_rank = np.where(sims == top, id_order, np.iinfo(np.int64).max)
    return [ids[j] for j in tie_rank.argmin(axis=1)]


# ---------------------------------------------------------------------------
# similarity-weighted averages of seen weight rows

def costa_weights(
    unseen_descriptors: DescriptorSet,
    seen_descriptors: DescriptorSet,
    head: ClassifierHead,
) -> np.ndarray:
    """Unseen rows as combinations of seen rows, weighted by non-negative
    descriptor cosine similarity normalised to sum one.

    An unseen class with no positive similarity to any seen class has no
    usable weighting, so it is reported as an error.
    """
    order = [seen_descriptors.index_of(c) for c in head.class_ids]
    sims = _cosine_sim_matrix(unseen_descriptors.matrix, seen_descriptors.matrix[order])
    sims = np.maximum(sims, 0.0)
    dead = np.flatnonzero(sims.sum(axis=1) == 0.0)
    if dead.size:
        names = [unseen_descriptors.class_ids[i] for i in dead]
        raise IcisError(f"no positive descriptor similarity to any seen class for {names[:5]}")
    alpha = sims / sims.sum(axis=1, keepdims=True)
    return alpha @ head.weights


def vgse_wavg_weights(
    unseen_descriptors: DescriptorSet,
    seen_descriptors: DescriptorSet,
    head: ClassifierHead,
    temperature: float = 0.1,
) -> np.ndarray:
    """Softmax-weighted average of seen rows; lower temperature sharpens
    the weighting toward the most similar seen classes."""
    if temperature <= 0.0:
        raise IcisError("temperature must be > 0")
    order = [seen_descriptors.index_of(c) for c in head.class_ids]
    sims = _cosine_sim_matrix(unseen_descriptors.matrix, seen_descriptors.matrix[order])
    alpha = softmax_rows(sims / temperature)
    return alpha @ head.weights


def smo_coefficients(anchor: np.ndarray, seen_matrix: np.ndarray, gamma: float = 1e-3) -> np.ndarray:
    """Ridge-regularised least-squares reconstruction coefficients of one
    descriptor from the seen descriptors, constrained to sum to one.

    Solves ``min |anchor - beta^T A|^2 + gamma |beta|^2  s.t.  sum beta = 1``
    through the stationarity system: with ``G = A A^T + gamma I`` and
    ``c = A anchor``, the multiplier is
    ``lam = (1^T G^-1 c - 1) / (1^T G^-1 1)`` and ``beta = G^-1 (c - lam 1)``.
    """
    if gamma < 0.0:
        raise IcisError("gamma must be >= 0")
    a = as_matrix(seen_matrix)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
    if anchor.shape[0] != a.shape[1]:
        raise IcisError(f"anchor dim {anchor.shape[0]} does not match descriptors {a.shape[1]}")
    g = a @ a.T + gamma * np.eye(a.shape[0])
    c = a @ anchor
    ones = np.ones(a.shape[0])
    try:
        solved = np.linalg.solve(g, np.column_stack([c, ones]))
    except np.linalg.LinAlgError as exc:
        raise IcisError(f"similarity system is singular; use gamma > 0 ({exc})") from exc
    x_c, x_1 = solved[:, 0], solved[:, 1]
    lam = (ones @ x_c - 1.0) / (ones @ x_1)
    return x_c - lam * x_1


def vgse_smo_weights(
    unseen_descriptors: DescriptorSet,
    seen_descriptors: DescriptorSet,
    head: ClassifierHead,
    gamma: float = 1e-3,
) -> np.ndarray:
    """Unseen rows from sum-one ridge reconstruction coefficients of each
    unseen descriptor in the span of seen descriptors."""
    order = [seen_descriptors.index_of(c) for c in head.class_ids]
    a_seen = seen_descriptors.matrix[order]
    rows = [
        smo_coefficients(unseen_descriptors.matrix[i], a_seen, gamma) @ head.weights
        for i in range(len(unseen_descriptors.class_ids))
    ]
    return np.asarray(rows).reshape(len(rows), head.weight_dim)


# ---------------------------------------------------------------------------
# subspace-regularised regression

def span_projector(seen_weights: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the row span of the seen weight matrix."""
    w = as_matrix(seen_weights)
    # orthonormal basis of the row space via SVD; rank cut at numpy's default tolerance
    _, s, vt = np.linalg.svd(w, full_matrices=False)
    tol = max(w.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    basis = vt[s > tol]
    if basis.shape[0] == 0:
        raise IcisError("seen weight matrix has rank 0; span projection undefined")
    return basis.T @ basis


def subspace_reg_loss(pred: np.ndarray, projector: np.ndarray):
    """Mean over rows of the squared distance to the span, with its
    gradient; rows already in the span contribute zero."""
    pred = as_matrix(pred)
    if projector.shape != (pred.shape[1], pred.shape[1]):
        raise IcisError("projector shape does not match prediction dim")
    residual = pred - pred @ projector
    n = pred.shape[0]
    loss = float(np.sum(residual * residual) / n)
    return loss, 2.0 * residual / n


def train_subreg(
    model: IcisModel,
    pairs: PairSet,
    unseen_descriptors,
    lam: float = 1.0,
    distance: str = "l2",
    train_config: TrainConfig | None = None,
) -> LossTrace:
    """Regression-only training with a span penalty on unseen predictions.

    Per batch: regression loss on seen pairs plus ``lam`` times the squared
    residual of predicted unseen rows to the span of the seen weight rows.
    """
    cfg = train_config if train_config is not None else TrainConfig()
    loss_fn = batch_loss(distance)
    a_seen = as_matrix(pairs.descriptors)
    w_seen = as_matrix(pairs.weights)
    a_unseen = as_matrix(unseen_descriptors)
    if a_seen.shape[1] != model.d_a or w_seen.shape[1] != model.d_w or a_unseen.shape[1] != model.d_a:
        raise IcisError("pair or descriptor dims do not match model")
    projector = span_projector(w_seen)

    n, n_u = a_seen.shape[0], a_unseen.shape[0]
    rng = RngState(cfg.seed).spawn("subreg-shuffle")
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    threshold = stopping_threshold(LossConfig(distance=distance), cfg)
    trace = LossTrace(threshold=threshold)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        u_order = rng.permutation(n_u) if n_u else None
        loss_sum, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            end = min(start + cfg.batch_size, n)
            batch = order[start:end]
            model.zero_grad()
            loss, grad = loss_fn(model.a_to_w.forward(a_seen[batch]), w_seen[batch])
            model.a_to_w.backward(grad)
            total = loss
            if u_order is not None:
                chunk = u_order[_proportional_slice(start, end, n, n_u)]
                if chunk.size:
                    pred_u = model.a_to_w.forward(a_unseen[chunk])
                    pen, pen_grad = subspace_reg_loss(pred_u, projector)
                    model.a_to_w.backward(lam * pen_grad)
                    total += lam * pen
            adam_step(opt, model.parameters(), model.gradients())
            loss_sum += total * (end - start)
            count += end - start
        epoch_loss = loss_sum / count
        trace.append(epoch_loss, {"reg": epoch_loss})
        if not np.isfinite(epoch_loss) or epoch_loss > cfg.divergence_limit:
            raise DivergenceError(f"training diverged at epoch {epoch}: mean loss {epoch_loss!r}", trace=trace)
        if should_stop(trace.total, cfg.stop_window, threshold):
            trace.stopped_early = True
            break
    return trace


# ---------------------------------------------------------------------------
# denoising refinement of predicted rows

def dae_refine(
    seen_weights: np.ndarray,
    predicted_weights: np.ndarray,
    seed: int = 0,
    hidden: int | None = None,
    epochs: int = 200,
    lr: float = 1e-3,
    batch_size: int = 16,
    noise_scale: float = 0.1,
    net: MlpTwoLayer | None = None,
) -> np.ndarray:
    """Pass predicted rows through a denoising autoencoder fit to seen rows.

    The autoencoder is a rectified two-layer net trained with squared error
    to reproduce seen weight rows from inputs corrupted by Gaussian noise
    scaled per dimension (``noise_scale`` times each coordinate's standard
    deviation across seen rows). A pre-built ``net`` skips the seeded init
    but is still trained, so ``lr = 0`` leaves it untouched.
    """
    w = as_matrix(seen_weights)
    pred = as_matrix(predicted_weights)
    if w.shape[0] < 2:
        raise IcisError("denoising refinement needs at least 2 seen weight rows")
    if pred.shape[1] != w.shape[1]:
        raise IcisError("predicted rows and seen rows must share one dim")
    if epochs < 1 or batch_size < 1:
        raise IcisError("epochs and batch_size must be >= 1")
    d = w.shape[1]
    hidden = hidden if hidden is not None else d
    root = RngState(seed)
    init_rng = root.spawn("dae-init")
    noise_rng = root.spawn("dae-noise")
    shuffle_rng = root.spawn("dae-shuffle")
    if net is None:
        net = MlpTwoLayer(
            LinearLayer.init(d, hidden, init_rng, pre_rectifier=True),
            LinearLayer.init(hidden, d, init_rng, pre_rectifier=False),
        )
    elif net.in_dim != d or net.out_dim != d:
        raise IcisError("provided autoencoder dims do not match the weight dim")
    opt = AdamState(lr=lr)
    loss_fn = batch_loss("l2")
    per_dim_std = w.std(axis=0)
    n = w.shape[0]
    for _epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            target = w[batch]
            noise = noise_rng.standard_normal((batch.shape[0], d)) * (noise_scale * per_dim_std)
            for layer in (net.layer1, net.layer2):
                layer.zero_grad()
            _, grad = loss_fn(net.forward(target + noise), target)
            net.backward(grad)
            params = net.layer1.parameters() + net.layer2.parameters()
            grads = net.layer1.gradients() + net.layer2.gradients()
            adam_step(opt, params, grads)
    return net.predict(pred)
