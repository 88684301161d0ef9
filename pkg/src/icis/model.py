"""Weight-inference model: paired encoder/decoder networks over descriptors
and classifier weights, trained on (descriptor, weight) pairs of seen
classes, then used to infer weight rows for classes with no training data.

Four linear layers are shared across four two-layer compositions:

* descriptor encoder (rectified) and descriptor decoder,
* weight encoder (rectified) and weight decoder.

The regression path descriptor -> latent -> weight is the product being
trained; the two autoencoding paths and the weight-to-descriptor alignment
path regularise the shared latent space. Gradients from all enabled paths
accumulate into the same four layers before each optimiser step.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClassifierHead, PairSet
from .errors import ClassIdError, DataFormatError, DivergenceError, IcisError
from .nn import AdamState, LinearLayer, MlpTwoLayer, adam_step, batch_loss
from .tensor import RngState, as_matrix

DEFAULT_HIDDEN = 2048

TERM_NAMES = ("reg", "a_to_a", "w_to_w", "w_to_a")


@dataclass
class LossConfig:
    """Which loss terms are active and which distance they use.

    The descriptor-to-weight regression term is never ablated; the three
    auxiliary terms and the use of unseen descriptors in the descriptor
    autoencoder can be toggled. One distance applies to all enabled terms.
    """

    distance: str = "cosine"
    use_a_to_w: bool = True
    use_a_to_a: bool = True
    use_w_to_w: bool = True
    use_w_to_a: bool = True
    include_unseen_descriptors: bool = True

    def __post_init__(self):
        batch_loss(self.distance)  # validates the name
        if not self.use_a_to_w:
            raise IcisError("the descriptor-to-weight regression term cannot be disabled")

    def enabled_terms(self) -> tuple:
        terms = ["reg"]
        if self.use_a_to_a:
            terms.append("a_to_a")
        if self.use_w_to_w:
            terms.append("w_to_w")
        if self.use_w_to_a:
            terms.append("w_to_a")
        return tuple(terms)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    hidden_dim: int = DEFAULT_HIDDEN
    max_epochs: int = 500
    stop_window: int = 10
    stop_threshold: float = 2e-4
    seed: int = 0
    divergence_limit: float = 1e8

    def __post_init__(self):
        if self.batch_size < 1:
            raise IcisError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise IcisError("max_epochs must be >= 0")
        if self.stop_window < 1:
            raise IcisError("stop_window must be >= 1")
        if self.stop_threshold <= 0.0:
            raise IcisError("stop_threshold must be > 0")
        if self.hidden_dim < 1:
            raise IcisError("hidden_dim must be >= 1")


def stopping_threshold(loss_config: LossConfig, train_config: TrainConfig) -> float:
    """Effective flat-slope threshold; squared-error losses live on a much
    smaller scale than cosine losses, so the threshold shrinks with them."""
    scale = 1e-3 if loss_config.distance == "l2" else 1.0
    return train_config.stop_threshold * scale


def should_stop(epoch_losses, window: int, threshold: float) -> bool:
    """True when the mean loss of the latest ``window`` epochs improved on
    the previous ``window`` epochs by less than ``threshold``.

    Needs at least two full windows of history; before that, never stop.
    """
    if len(epoch_losses) < 2 * window:
        return False
    prev = float(np.mean(epoch_losses[-2 * window : -window]))
    last = float(np.mean(epoch_losses[-window:]))
    return (prev - last) < threshold


@dataclass
class LossTrace:
    """Per-epoch mean losses recorded during training."""

    total: list = field(default_factory=list)
    terms: dict = field(default_factory=lambda: {name: [] for name in TERM_NAMES})
    stopped_early: bool = False
    threshold: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.total)

    def append(self, total: float, term_means: dict) -> None:
        self.total.append(float(total))
        for name in TERM_NAMES:
            self.terms[name].append(float(term_means.get(name, 0.0)))

    def to_csv(self, path) -> None:
        lines = ["epoch,total," + ",".join(TERM_NAMES)]
        for e, tot in enumerate(self.total):
            cells = [str(e), repr(tot)] + [repr(self.terms[n][e]) for n in TERM_NAMES]
            lines.append(",".join(cells))
        Path(path).write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")


class IcisModel:
    """Four shared layers plus the four compositions built from them."""

    def __init__(self, desc_encoder: LinearLayer, desc_decoder: LinearLayer,
                 weight_encoder: LinearLayer, weight_decoder: LinearLayer):
        if desc_encoder.out_dim != weight_decoder.in_dim or weight_encoder.out_dim != desc_decoder.in_dim:
            raise IcisError("encoder output dims must match decoder input dims")
        if desc_encoder.out_dim != weight_encoder.out_dim:
            raise IcisError("both encoders must share one latent dim")
        self.desc_encoder = desc_encoder
        self.desc_decoder = desc_decoder
        self.weight_encoder = weight_encoder
        self.weight_decoder = weight_decoder
        self.a_to_w = MlpTwoLayer(desc_encoder, weight_decoder)
        self.a_to_a = MlpTwoLayer(desc_encoder, desc_decoder)
        self.w_to_w = MlpTwoLayer(weight_encoder, weight_decoder)
        self.w_to_a = MlpTwoLayer(weight_encoder, desc_decoder)

    @classmethod
    def init(cls, d_a: int, d_w: int, hidden: int = DEFAULT_HIDDEN, rng: RngState | None = None) -> "IcisModel":
        """Seeded init; layers are created in a fixed order so equal seeds
        give bit-identical models."""
        if rng is None:
            rng = RngState(0).spawn("model-init")
        if min(d_a, d_w, hidden) < 1:
            raise IcisError("all model dims must be >= 1")
        return cls(
            LinearLayer.init(d_a, hidden, rng, pre_rectifier=True),
            LinearLayer.init(hidden, d_a, rng, pre_rectifier=False),
            LinearLayer.init(d_w, hidden, rng, pre_rectifier=True),
            LinearLayer.init(hidden, d_w, rng, pre_rectifier=False),
        )

    @property
    def d_a(self) -> int:
        return self.desc_encoder.in_dim

    @property
    def d_w(self) -> int:
        return self.weight_encoder.in_dim

    @property
    def hidden(self) -> int:
        return self.desc_encoder.out_dim

    def layers(self) -> tuple:
        return (self.desc_encoder, self.desc_decoder, self.weight_encoder, self.weight_decoder)

    def parameters(self) -> list:
        return [p for layer in self.layers() for p in layer.parameters()]

    def gradients(self) -> list:
        return [g for layer in self.layers() for g in layer.gradients()]

    def zero_grad(self) -> None:
        for layer in self.layers():
            layer.zero_grad()

    def copy(self) -> "IcisModel":
        return IcisModel(*(layer.copy() for layer in self.layers()))


# ---------------------------------------------------------------------------
# loss terms

def _check_rows(left, right, what: str) -> None:
    if left.shape[0] != right.shape[0]:
        raise IcisError(f"{what}: {left.shape[0]} rows vs {right.shape[0]} rows")


def loss_a_to_w(model: IcisModel, descriptors, weights, distance: str = "cosine",
                accumulate_grads: bool = False) -> float:
    """Mean distance between predicted and actual weight rows; gradients
    (when requested) accumulate into the descriptor encoder and weight
    decoder."""
    a, w = as_matrix(descriptors), as_matrix(weights)
    _check_rows(a, w, "descriptor/weight pairing")
    loss, grad = batch_loss(distance)(model.a_to_w.forward(a), w)
    if accumulate_grads:
        model.a_to_w.backward(grad)
    return loss


def loss_a_to_a(model: IcisModel, descriptors, distance: str = "cosine",
                accumulate_grads: bool = False) -> float:
    """Descriptor autoencoding through the shared latent space."""
    a = as_matrix(descriptors)
    loss, grad = batch_loss(distance)(model.a_to_a.forward(a), a)
    if accumulate_grads:
        model.a_to_a.backward(grad)
    return loss


def loss_w_to_w(model: IcisModel, weights, distance: str = "cosine",
                accumulate_grads: bool = False) -> float:
    """Weight autoencoding through the shared latent space."""
    w = as_matrix(weights)
    loss, grad = batch_loss(distance)(model.w_to_w.forward(w), w)
    if accumulate_grads:
        model.w_to_w.backward(grad)
    return loss


def loss_w_to_a(model: IcisModel, weights, descriptors, distance: str = "cosine",
                accumulate_grads: bool = False) -> float:
    """Alignment term mapping weight rows back to their descriptors."""
    w, a = as_matrix(weights), as_matrix(descriptors)
    _check_rows(w, a, "weight/descriptor pairing")
    loss, grad = batch_loss(distance)(model.w_to_a.forward(w), a)
    if accumulate_grads:
        model.w_to_a.backward(grad)
    return loss


def total_loss(model: IcisModel, descriptors, weights, loss_config: LossConfig,
               unseen_descriptors=None, accumulate_grads: bool = False) -> dict:
    """All enabled terms on one batch, as {term: mean loss, "total": sum}.

    Unseen descriptor rows, when provided and enabled, join only the
    descriptor autoencoding term. With ``accumulate_grads`` each term's
    gradients add into the shared layers (zeroing first is the caller's
    job), so the total gradient is the sum of per-term gradients.
    """
    a, w = as_matrix(descriptors), as_matrix(weights)
    values = {"reg": loss_a_to_w(model, a, w, loss_config.distance, accumulate_grads)}
    if loss_config.use_a_to_a:
        a_in = a
        if loss_config.include_unseen_descriptors and unseen_descriptors is not None:
            extra = as_matrix(unseen_descriptors)
            if extra.shape[0]:
                a_in = np.vstack([a, extra])
        values["a_to_a"] = loss_a_to_a(model, a_in, loss_config.distance, accumulate_grads)
    if loss_config.use_w_to_w:
        values["w_to_w"] = loss_w_to_w(model, w, loss_config.distance, accumulate_grads)
    if loss_config.use_w_to_a:
        values["w_to_a"] = loss_w_to_a(model, w, a, loss_config.distance, accumulate_grads)
    values["total"] = sum(values.values())
    return values


def infer_weights(model: IcisModel, descriptors) -> np.ndarray:
    """Predicted weight rows for descriptor rows, via the regression path."""
    a = as_matrix(descriptors)
    if a.shape[1] != model.d_a:
        raise IcisError(f"descriptor dim {a.shape[1]} does not match model dim {model.d_a}")
    return model.a_to_w.predict(a)


def _proportional_slice(start: int, end: int, n_src: int, n_dst: int) -> slice:
    # maps a batch range over n_src items onto the matching range over n_dst
    return slice((start * n_dst) // n_src, (end * n_dst) // n_src)


def train(
    model: IcisModel,
    pairs: PairSet,
    unseen_descriptors=None,
    loss_config: LossConfig | None = None,
    train_config: TrainConfig | None = None,
    callback=None,
) -> LossTrace:
    """Fit the model on seen (descriptor, weight) pairs.

    ``unseen_descriptors`` (rows only, no weights) join the descriptor
    autoencoding term when the config includes them; the regression and
    weight-side terms only ever touch seen pairs. Raises DivergenceError
    when the epoch loss stops being finite or exceeds the configured limit;
    the partial trace rides along on the exception.
    """
    loss_config = loss_config if loss_config is not None else LossConfig()
    cfg = train_config if train_config is not None else TrainConfig()

    a_seen = as_matrix(pairs.descriptors)
    w_seen = as_matrix(pairs.weights)
    if a_seen.shape[0] < 2:
        raise IcisError("training needs at least 2 seen pairs")
    if a_seen.shape[1] != model.d_a or w_seen.shape[1] != model.d_w:
        raise IcisError(
            f"pair dims ({a_seen.shape[1]}, {w_seen.shape[1]}) do not match model "
            f"({model.d_a}, {model.d_w})"
        )
    a_extra = None
    if unseen_descriptors is not None and loss_config.include_unseen_descriptors:
        a_extra = as_matrix(unseen_descriptors)
        if a_extra.shape[1] != model.d_a:
            raise IcisError("unseen descriptor dim does not match model")
        if a_extra.shape[0] == 0:
            a_extra = None

    n = a_seen.shape[0]
    n_extra = 0 if a_extra is None else a_extra.shape[0]
    rng = RngState(cfg.seed).spawn("train-shuffle")
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    threshold = stopping_threshold(loss_config, cfg)
    trace = LossTrace(threshold=threshold)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        extra_order = rng.permutation(n_extra) if n_extra else None
        term_sums = {name: 0.0 for name in TERM_NAMES}
        term_counts = {name: 0 for name in TERM_NAMES}

        for start in range(0, n, cfg.batch_size):
            end = min(start + cfg.batch_size, n)
            batch = order[start:end]
            chunk = None
            if extra_order is not None:
                rows = extra_order[_proportional_slice(start, end, n, n_extra)]
                chunk = a_extra[rows] if rows.size else None
            model.zero_grad()
            values = total_loss(model, a_seen[batch], w_seen[batch], loss_config,
                                unseen_descriptors=chunk, accumulate_grads=True)
            adam_step(opt, model.parameters(), model.gradients())
            b = end - start
            for name in loss_config.enabled_terms():
                weight = b
                if name == "a_to_a" and chunk is not None:
                    weight = b + chunk.shape[0]
                term_sums[name] += values[name] * weight
                term_counts[name] += weight

        term_means = {
            name: term_sums[name] / term_counts[name]
            for name in TERM_NAMES
            if term_counts[name]
        }
        epoch_total = sum(term_means.values())
        trace.append(epoch_total, term_means)
        if callback is not None:
            callback(epoch, epoch_total)

        if not np.isfinite(epoch_total) or epoch_total > cfg.divergence_limit:
            raise DivergenceError(
                f"training diverged at epoch {epoch}: mean loss {epoch_total!r}", trace=trace
            )
        if should_stop(trace.total, cfg.stop_window, threshold):
            trace.stopped_early = True
            break

    return trace


# ---------------------------------------------------------------------------
# injection

def inject(
    head: ClassifierHead,
    new_ids,
    new_weights,
    new_biases=None,
    zsl_only: bool = False,
) -> ClassifierHead:
    """Extend a classifier head with inferred rows for new classes.

    Existing rows are carried over bit-identically and keep their seen
    flags; new rows are flagged unseen. With ``zsl_only`` the result holds
    only the new rows, restricting decisions to the injected classes.
    """
    new_ids = [str(i) for i in new_ids]
    new_weights = as_matrix(new_weights)
    if len(new_ids) != new_weights.shape[0]:
        raise ClassIdError(f"{new_weights.shape[0]} new rows but {len(new_ids)} new ids")
    if new_weights.shape[0] and new_weights.shape[1] != head.weight_dim:
        raise IcisError(
            f"new weight dim {new_weights.shape[1]} does not match head dim {head.weight_dim}"
        )
    collisions = set(new_ids) & set(head.class_ids)
    if collisions:
        raise ClassIdError(f"new class ids already present in head: {sorted(collisions)[:5]}")
    if new_biases is not None:
        new_biases = np.ascontiguousarray(new_biases, dtype=np.float64).reshape(-1)
        if new_biases.shape[0] != len(new_ids):
            raise ClassIdError("new bias length does not match new ids")

    if zsl_only:
        return ClassifierHead(new_ids, new_weights.copy(), new_biases,
                              np.zeros(len(new_ids), dtype=bool))

    weights = np.vstack([head.weights, new_weights]) if new_ids else head.weights.copy()
    biases = None
    if head.biases is not None or new_biases is not None:
        old_b = head.biases if head.biases is not None else np.zeros(head.n_classes)
        add_b = new_biases if new_biases is not None else np.zeros(len(new_ids))
        biases = np.concatenate([old_b, add_b])
    seen = np.concatenate([head.seen, np.zeros(len(new_ids), dtype=bool)])
    return ClassifierHead(list(head.class_ids) + new_ids, weights, biases, seen)


def infer_and_inject(
    model: IcisModel,
    head: ClassifierHead,
    descriptors,
    new_ids,
    include_bias: bool = False,
    zsl_only: bool = False,
) -> ClassifierHead:
    """Run the regression path on new-class descriptors and inject the rows.

    With ``include_bias`` the model's output dim is the head dim plus one
    and the trailing coordinate is split off as the per-class bias.
    """
    predicted = infer_weights(model, descriptors)
    if include_bias:
        if predicted.shape[1] != head.weight_dim + 1:
            raise IcisError(
                f"model output dim {predicted.shape[1]} is not head dim {head.weight_dim} plus a bias"
            )
        return inject(head, new_ids, predicted[:, :-1], predicted[:, -1], zsl_only=zsl_only)
    return inject(head, new_ids, predicted, zsl_only=zsl_only)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"WSCKPT1\n"
MATRIX_BLOCK_MAGIC = b"WSMAT01\n"
_LAYER_KEYS = ("desc_encoder", "desc_decoder", "weight_encoder", "weight_decoder")


def save_checkpoint(path, model: IcisModel, loss_config: LossConfig | None = None,
                    include_bias: bool = False, seed: int | None = None) -> None:
    """Write the model to one file: magic, a key=value header, then weight
    and bias blocks for the four layers in fixed order (32-bit on disk)."""
    loss_config = loss_config if loss_config is not None else LossConfig()
    entries = [
        ("version", 1),
        ("d_a", model.d_a),
        ("d_w", model.d_w),
        ("hidden", model.hidden),
        ("distance", loss_config.distance),
        ("use_a_to_a", int(loss_config.use_a_to_a)),
        ("use_w_to_w", int(loss_config.use_w_to_w)),
        ("use_w_to_a", int(loss_config.use_w_to_a)),
        ("include_unseen_descriptors", int(loss_config.include_unseen_descriptors)),
        ("include_bias", int(include_bias)),
    ]
    if seed is not None:
        entries.append(("seed", seed))
    header = "".join(f"{k}={v}\n" for k, v in entries).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for layer in model.layers():
            for part in (layer.weight, layer.bias.reshape(1, -1)):
                part = as_matrix(part)
                f.write(MATRIX_BLOCK_MAGIC)
                f.write(struct.pack("<II", *part.shape))
                f.write(part.astype("<f4").tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint back; returns (model, loss_config, meta dict)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(path, f"cannot read file: {exc}") from exc
    if len(raw) < len(CHECKPOINT_MAGIC) or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(path, f"bad magic; expected {CHECKPOINT_MAGIC!r}", offset=0)
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 4:
        raise DataFormatError(path, "truncated header length", offset=len(raw))
    (header_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + header_len:
        raise DataFormatError(path, "truncated header", offset=len(raw))
    header_text = raw[pos : pos + header_len].decode("utf-8")
    pos += header_len
    meta = {}
    for lineno, line in enumerate(header_text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(path, f"header line {lineno} is not key=value: {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    if meta.get("version") != "1":
        raise DataFormatError(path, f"unsupported checkpoint version {meta.get('version')!r}")

    def read_block():
        nonlocal pos
        if len(raw) < pos + 16 or raw[pos : pos + 8] != MATRIX_BLOCK_MAGIC:
            raise DataFormatError(path, "bad or missing matrix block", offset=pos)
        rows, cols = struct.unpack_from("<II", raw, pos + 8)
        need = 16 + 4 * rows * cols
        if len(raw) < pos + need:
            raise DataFormatError(path, "truncated matrix block", offset=len(raw))
        values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos + 16)
        pos += need
        return values.reshape(rows, cols).astype(np.float64)

    layers = []
    for _key in _LAYER_KEYS:
        weight = read_block()
        bias = read_block().reshape(-1)
        layers.append(LinearLayer(weight, bias))
    if pos != len(raw):
        raise DataFormatError(path, f"{len(raw) - pos} trailing bytes after last block", offset=pos)

    model = IcisModel(*layers)
    for dim_key, value in (("d_a", model.d_a), ("d_w", model.d_w), ("hidden", model.hidden)):
        if dim_key in meta and int(meta[dim_key]) != value:
            raise DataFormatError(path, f"header {dim_key}={meta[dim_key]} does not match blocks ({value})")
    loss_config = LossConfig(
        distance=meta.get("distance", "cosine"),
        use_a_to_a=bool(int(meta.get("use_a_to_a", "1"))),
        use_w_to_w=bool(int(meta.get("use_w_to_w", "1"))),
        use_w_to_a=bool(int(meta.get("use_w_to_a", "1"))),
        include_unseen_descriptors=bool(int(meta.get("include_unseen_descriptors", "1"))),
    )
    return model, loss_config, meta


def ablation_variants() -> dict:
    """The cumulative ablation ladder, in run order.

    Starts from a plain squared-error regression net and adds one element
    per row: the cosine distance, the two within-space autoencoding terms,
    the across-space alignment term, and finally unseen descriptors in the
    descriptor autoencoder.
    """
    off = dict(use_a_to_a=False, use_w_to_w=False, use_w_to_a=False,
               include_unseen_descriptors=False)
    return {
        "base_l2": LossConfig(distance="l2", **off),
        "cosine": LossConfig(distance="cosine", **off),
        "within_spaces": LossConfig(use_w_to_a=False, include_unseen_descriptors=False),
        "across_spaces": LossConfig(include_unseen_descriptors=False),
        "full": LossConfig(),
    }
