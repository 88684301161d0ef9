"""Domain containers, on-disk formats, split handling, and the synthetic
task generator.

Formats (documented bit-exactly in the README):

* Matrix container: magic ``WSMAT01\\n``, then row count and column count as
  unsigned 32-bit little-endian integers, then rows*cols IEEE-754 single
  precision little-endian values in row-major order. CSV with a header row
  is accepted as an alternative for small files (extension ``.csv``).
* Identity sidecar: UTF-8 text next to a matrix file (extension ``.ids``),
  one class id (or per-row label) per line.
* Split manifest: UTF-8 text with sections ``[seen]``, ``[unseen]``,
  ``[val_seen]``, one class id per line.
"""

import csv as _csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClassIdError, DataFormatError, IcisError
from .tensor import RngState, as_matrix, check_finite, rand_normal, row_normalize

MATRIX_MAGIC = b"WSMAT01\n"
_HEADER_LEN = len(MATRIX_MAGIC) + 8


# ---------------------------------------------------------------------------
# matrix container

def save_matrix(path, matrix) -> None:
    """Write a matrix in the binary container (32-bit on disk)."""
    path = Path(path)
    if path.suffix == ".csv":
        _save_matrix_csv(path, matrix)
        return
    m = check_finite(as_matrix(matrix))
    rows, cols = m.shape
    if rows >= 2**32 or cols >= 2**32:
        raise IcisError(f"matrix dimensions {m.shape} exceed the 32-bit container limit")
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(m.astype("<f4").tobytes(order="C"))


def load_matrix(path) -> np.ndarray:
    """Read a matrix from the binary container or a headered CSV file."""
    path = Path(path)
    if path.suffix == ".csv":
        return _load_matrix_csv(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(path, f"cannot read file: {exc}") from exc
    if len(raw) < len(MATRIX_MAGIC) or raw[: len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise DataFormatError(path, f"bad magic; expected {MATRIX_MAGIC!r}", offset=0)
    if len(raw) < _HEADER_LEN:
        raise DataFormatError(path, "truncated header", offset=len(raw))
    rows, cols = struct.unpack_from("<II", raw, len(MATRIX_MAGIC))
    expected = _HEADER_LEN + 4 * rows * cols
    if len(raw) < expected:
        raise DataFormatError(
            path,
            f"truncated payload for declared shape ({rows}, {cols}): need {expected} bytes, have {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise DataFormatError(path, f"{len(raw) - expected} trailing bytes after payload", offset=expected)
    values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=_HEADER_LEN)
    m = values.reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(m)):
        raise DataFormatError(path, "payload contains non-finite values", offset=_HEADER_LEN)
    return m


def _save_matrix_csv(path: Path, matrix) -> None:
    m = check_finite(as_matrix(matrix))
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow([f"c{j}" for j in range(m.shape[1])])
        writer.writerows(m.tolist())


def _load_matrix_csv(path: Path) -> np.ndarray:
    try:
        with open(path, newline="") as f:
            reader = _csv.reader(f)
            try:
                header = next(reader)
            except StopIteration:
                raise DataFormatError(path, "empty CSV; a header row is required") from None
            cols = len(header)
            rows = []
            for lineno, record in enumerate(reader, start=2):
                if not record:
                    continue
                if len(record) != cols:
                    raise DataFormatError(path, f"line {lineno}: expected {cols} fields, got {len(record)}")
                try:
                    rows.append([float(x) for x in record])
                except ValueError as exc:
                    raise DataFormatError(path, f"line {lineno}: {exc}") from None
    except OSError as exc:
        raise DataFormatError(path, f"cannot read file: {exc}") from exc
    m = np.asarray(rows, dtype=np.float64).reshape(len(rows), cols)
    if not np.all(np.isfinite(m)):
        raise DataFormatError(path, "CSV contains non-finite values")
    return m


# ---------------------------------------------------------------------------
# identity sidecars

def ids_path_for(matrix_path) -> Path:
    return Path(matrix_path).with_suffix(".ids")


def save_ids(path, ids) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def load_ids(path) -> list:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(path, f"cannot read file: {exc}") from exc
    return [line.strip() for line in text.splitlines() if line.strip()]


def _check_unique(ids, what: str):
    seen = set()
    for i in ids:
        if i in seen:
            raise ClassIdError(f"duplicate {what} id {i!r}")
        seen.add(i)


# ---------------------------------------------------------------------------
# containers

@dataclass
class DescriptorSet:
    """Per-class semantic vectors with class identities."""

    class_ids: list
    matrix: np.ndarray
    names: list | None = None
    source: str = "other"

    def __post_init__(self):
        self.matrix = check_finite(as_matrix(self.matrix), "descriptor matrix")
        self.class_ids = [str(i) for i in self.class_ids]
        _check_unique(self.class_ids, "descriptor")
        if len(self.class_ids) != self.matrix.shape[0]:
            raise ClassIdError(
                f"descriptor matrix has {self.matrix.shape[0]} rows but {len(self.class_ids)} class ids"
            )

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def index_of(self, class_id) -> int:
        try:
            return self.class_ids.index(str(class_id))
        except ValueError:
            raise ClassIdError(f"unknown class id {class_id!r}") from None

    def vector(self, class_id) -> np.ndarray:
        return self.matrix[self.index_of(class_id)]

    def subset(self, ids) -> "DescriptorSet":
        rows = [self.index_of(i) for i in ids]
        return DescriptorSet([self.class_ids[r] for r in rows], self.matrix[rows], source=self.source)

    def save(self, matrix_path) -> None:
        save_matrix(matrix_path, self.matrix)
        save_ids(ids_path_for(matrix_path), self.class_ids)


def load_descriptor_set(matrix_path, ids_path=None, source: str = "other") -> DescriptorSet:
    matrix = load_matrix(matrix_path)
    ids = load_ids(ids_path if ids_path is not None else ids_path_for(matrix_path))
    if len(ids) != matrix.shape[0]:
        raise ClassIdError(
            f"{matrix_path}: matrix has {matrix.shape[0]} rows but id sidecar lists {len(ids)} classes"
        )
    return DescriptorSet(ids, matrix, source=source)


@dataclass
class ClassifierHead:
    """Per-class weight rows (optionally with biases) of a linear classifier."""

    class_ids: list
    weights: np.ndarray
    biases: np.ndarray | None = None
    seen: np.ndarray | None = None

    def __post_init__(self):
        self.weights = check_finite(as_matrix(self.weights), "classifier weights")
        self.class_ids = [str(i) for i in self.class_ids]
        _check_unique(self.class_ids, "classifier")
        if len(self.class_ids) != self.weights.shape[0]:
            raise ClassIdError(
                f"weight matrix has {self.weights.shape[0]} rows but {len(self.class_ids)} class ids"
            )
        if np.any(np.linalg.norm(self.weights, axis=1) == 0.0):
            raise IcisError("classifier head contains zero-norm weight rows")
        if self.biases is not None:
            self.biases = np.ascontiguousarray(self.biases, dtype=np.float64).reshape(-1)
            if self.biases.shape[0] != self.weights.shape[0]:
                raise ClassIdError("bias vector length does not match weight rows")
        if self.seen is None:
            self.seen = np.ones(len(self.class_ids), dtype=bool)
        else:
            self.seen = np.asarray(self.seen, dtype=bool).reshape(-1)
            if self.seen.shape[0] != self.weights.shape[0]:
                raise ClassIdError("seen-flag length does not match weight rows")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def weight_dim(self) -> int:
        return self.weights.shape[1]

    def index_of(self, class_id) -> int:
        try:
            return self.class_ids.index(str(class_id))
        except ValueError:
            raise ClassIdError(f"unknown class id {class_id!r}") from None

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = as_matrix(features)
        if features.shape[1] != self.weight_dim:
            raise IcisError(
                f"feature dim {features.shape[1]} does not match weight dim {self.weight_dim}"
            )
        scores = features @ self.weights.T
        if self.biases is not None:
            scores = scores + self.biases
        return scores

    def subset(self, ids) -> "ClassifierHead":
        rows = [self.index_of(i) for i in ids]
        return ClassifierHead(
            [self.class_ids[r] for r in rows],
            self.weights[rows],
            None if self.biases is None else self.biases[rows],
            self.seen[rows],
        )

    def save(self, weights_path, biases_path=None) -> None:
        save_matrix(weights_path, self.weights)
        save_ids(ids_path_for(weights_path), self.class_ids)
        if self.biases is not None:
            if biases_path is None:
                raise IcisError("head has biases; a biases path is required to save them")
            save_matrix(biases_path, self.biases.reshape(1, -1))


def load_classifier_head(weights_path, ids_path=None, biases_path=None, seen_ids=None) -> ClassifierHead:
    weights = load_matrix(weights_path)
    ids = load_ids(ids_path if ids_path is not None else ids_path_for(weights_path))
    if len(ids) != weights.shape[0]:
        raise ClassIdError(
            f"{weights_path}: matrix has {weights.shape[0]} rows but id sidecar lists {len(ids)} classes"
        )
    biases = None
    if biases_path is not None:
        biases = load_matrix(biases_path).reshape(-1)
    seen = None
    if seen_ids is not None:
        seen_ids = {str(s) for s in seen_ids}
        seen = np.array([i in seen_ids for i in ids], dtype=bool)
    return ClassifierHead(ids, weights, biases, seen)


@dataclass
class FeatureSet:
    """Per-sample feature vectors with class labels."""

    features: np.ndarray
    labels: list

    def __post_init__(self):
        self.features = check_finite(as_matrix(self.features), "feature matrix")
        self.labels = [str(l) for l in self.labels]
        if len(self.labels) != self.features.shape[0]:
            raise ClassIdError(
                f"feature matrix has {self.features.shape[0]} rows but {len(self.labels)} labels"
            )

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def restrict_to(self, class_ids) -> "FeatureSet":
        wanted = {str(c) for c in class_ids}
        mask = np.array([l in wanted for l in self.labels], dtype=bool)
        return FeatureSet(self.features[mask], [l for l in self.labels if l in wanted])

    def check_labels_known(self, known_ids) -> None:
        known = {str(c) for c in known_ids}
        unknown = sorted({l for l in self.labels if l not in known})
        if unknown:
            raise ClassIdError(f"feature labels not in any known class list: {unknown[:5]}")

    def save(self, matrix_path) -> None:
        save_matrix(matrix_path, self.features)
        save_ids(ids_path_for(matrix_path), self.labels)


def load_feature_set(matrix_path, labels_path=None) -> FeatureSet:
    features = load_matrix(matrix_path)
    labels = load_ids(labels_path if labels_path is not None else ids_path_for(matrix_path))
    if len(labels) != features.shape[0]:
        raise ClassIdError(
            f"{matrix_path}: matrix has {features.shape[0]} rows but label sidecar lists {len(labels)} samples"
        )
    return FeatureSet(features, labels)


# ---------------------------------------------------------------------------
# split manifests

@dataclass
class SplitManifest:
    """Seen/unseen class split with an optional validation subset of seen."""

    seen: list
    unseen: list
    val_seen: list = field(default_factory=list)

    def __post_init__(self):
        self.seen = [str(i) for i in self.seen]
        self.unseen = [str(i) for i in self.unseen]
        self.val_seen = [str(i) for i in self.val_seen]
        _check_unique(self.seen, "seen")
        _check_unique(self.unseen, "unseen")
        _check_unique(self.val_seen, "validation")
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ClassIdError(f"seen and unseen overlap: {sorted(overlap)[:5]}")
        stray = set(self.val_seen) - set(self.seen)
        if stray:
            raise ClassIdError(f"validation ids not in seen: {sorted(stray)[:5]}")


def save_manifest(path, manifest: SplitManifest) -> None:
    lines = ["[seen]"] + manifest.seen + ["[unseen]"] + manifest.unseen
    if manifest.val_seen:
        lines += ["[val_seen]"] + manifest.val_seen
    Path(path).write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")


def load_manifest(path) -> SplitManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(path, f"cannot read file: {exc}") from exc
    sections = {"seen": [], "unseen": [], "val_seen": []}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in sections:
                raise DataFormatError(path, f"line {lineno}: unknown section [{name}]")
            current = name
        elif current is None:
            raise DataFormatError(path, f"line {lineno}: class id before any section header")
        else:
            sections[current].append(line)
    return SplitManifest(sections["seen"], sections["unseen"], sections["val_seen"])


# ---------------------------------------------------------------------------
# descriptor/weight pairs

@dataclass
class PairSet:
    """Aligned (descriptor row, weight row) pairs for a set of classes."""

    class_ids: list
    descriptors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.class_ids = [str(i) for i in self.class_ids]
        self.descriptors = as_matrix(self.descriptors)
        self.weights = as_matrix(self.weights)
        n = len(self.class_ids)
        if self.descriptors.shape[0] != n or self.weights.shape[0] != n:
            raise ClassIdError(
                f"pair set misaligned: {n} ids, {self.descriptors.shape[0]} descriptor rows, "
                f"{self.weights.shape[0]} weight rows"
            )

    def __len__(self) -> int:
        return len(self.class_ids)

    def subset(self, ids) -> "PairSet":
        index = {c: r for r, c in enumerate(self.class_ids)}
        try:
            rows = [index[str(i)] for i in ids]
        except KeyError as exc:
            raise ClassIdError(f"unknown class id {exc.args[0]!r}") from None
        return PairSet([self.class_ids[r] for r in rows], self.descriptors[rows], self.weights[rows])


def make_pairs(descriptors: DescriptorSet, head: ClassifierHead, include_bias: bool = False) -> PairSet:
    """Join descriptors and head rows on class id, in head order.

    With ``include_bias`` the head bias is appended to each weight row as an
    extra coordinate, so the regression target carries it; heads without
    biases get an appended zero.
    """
    rows = [descriptors.index_of(c) for c in head.class_ids]
    weights = head.weights
    if include_bias:
        biases = head.biases if head.biases is not None else np.zeros(head.n_classes)
        weights = np.hstack([weights, biases[:, None]])
    return PairSet(list(head.class_ids), descriptors.matrix[rows], weights)


def derive_validation_split(seen_pairs: PairSet, manifest: SplitManifest):
    """Partition seen pairs into train and validation pairs by class id."""
    known = set(seen_pairs.class_ids)
    unknown = [i for i in manifest.val_seen if i not in known]
    if unknown:
        raise ClassIdError(f"validation ids not among provided seen pairs: {unknown[:5]}")
    val_ids = set(manifest.val_seen)
    train_ids = [i for i in seen_pairs.class_ids if i not in val_ids]
    return seen_pairs.subset(train_ids), seen_pairs.subset(manifest.val_seen)


# ---------------------------------------------------------------------------
# synthetic tasks

@dataclass
class SynthTask:
    """A generated task with known ground truth for oracle comparisons."""

    descriptors: DescriptorSet
    head: ClassifierHead
    features: FeatureSet
    true_unseen_weights: np.ndarray
    manifest: SplitManifest


def synth_generate(
    seed: int,
    n_seen: int,
    n_unseen: int,
    d_a: int,
    d_w: int,
    map_kind: str = "linear",
    noise_std: float = 0.0,
    samples_per_class: int = 50,
    feature_noise: float = 0.0,
    *,
    margin: float = 1.0,
    descriptor_rank: int | None = None,
) -> SynthTask:
    """Generate a desk-scale task with a known descriptor-to-weight map.

    Descriptors are i.i.d. Gaussian (optionally drawn from a rank-limited
    subspace plus small jitter when ``descriptor_rank`` is set, which makes
    classes correlated). A ground-truth map (random linear, or a random
    two-layer net) produces raw weights ``M(a) + noise``, which are then
    row-normalised; equal-norm rows make the margin construction exact.
    Features for class ``c`` are ``margin * w_c + feature_noise * eps``, so
    the true head classifies every noiseless sample correctly.
    """
    if d_a < 1 or d_w < 1:
        raise IcisError("descriptor and weight dims must be >= 1")
    if n_seen < 2:
        raise IcisError("need at least 2 seen classes")
    if n_unseen < 0:
        raise IcisError("n_unseen must be >= 0")

    n_total = n_seen + n_unseen
    width = max(3, len(str(n_total - 1)))
    ids = [f"c{i:0{width}d}" for i in range(n_total)]
    seen_ids, unseen_ids = ids[:n_seen], ids[n_seen:]

    root = RngState(seed)
    rng_a = root.spawn("descriptors")
    rng_m = root.spawn("map")
    rng_n = root.spawn("map-noise")
    rng_x = root.spawn("features")

    if descriptor_rank is None:
        a = rand_normal(rng_a, n_total, d_a, 1.0)
    else:
        rank = int(descriptor_rank)
        if not 1 <= rank <= d_a:
            raise IcisError(f"descriptor_rank must be in [1, {d_a}], got {rank}")
        factors = rand_normal(rng_a, n_total, rank, 1.0)
        basis = rand_normal(rng_a, rank, d_a, 1.0 / np.sqrt(rank))
        a = factors @ basis + rand_normal(rng_a, n_total, d_a, 0.05)

    if map_kind == "linear":
        m = rand_normal(rng_m, d_w, d_a, 1.0 / np.sqrt(d_a))
        raw = a @ m.T
    elif map_kind == "mlp":
        hidden = 2 * max(d_a, d_w)
        w1 = rand_normal(rng_m, hidden, d_a, np.sqrt(2.0 / d_a))
        w2 = rand_normal(rng_m, d_w, hidden, np.sqrt(1.0 / hidden))
        raw = np.maximum(a @ w1.T, 0.0) @ w2.T
    else:
        raise IcisError(f"unknown map_kind {map_kind!r}; expected 'linear' or 'mlp'")

    true_weights = row_normalize(raw + rand_normal(rng_n, n_total, d_w, float(noise_std)))

    spc = int(samples_per_class)
    noise = rand_normal(rng_x, n_total * spc, d_w, float(feature_noise))
    features = np.repeat(true_weights * float(margin), spc, axis=0) + noise
    labels = [c for c in ids for _ in range(spc)]

    descriptors = DescriptorSet(ids, a, source="other")
    head = ClassifierHead(seen_ids, true_weights[:n_seen], seen=np.ones(n_seen, dtype=bool))
    manifest = SplitManifest(seen_ids, unseen_ids)
    return SynthTask(descriptors, head, FeatureSet(features, labels), true_weights[n_seen:].copy(), manifest)


def subsample_pairs(pairs: PairSet, fraction: float, seed: int) -> PairSet:
    """Seeded class subsample; subsets are nested for increasing fractions
    under one seed, and original order is preserved (fraction 1.0 is the
    identity)."""
    if not 0.0 < fraction <= 1.0:
        raise IcisError(f"fraction must be in (0, 1], got {fraction}")
    n = min(int(round(fraction * len(pairs))), len(pairs))
    if n < 2:
        raise IcisError(f"fraction {fraction} leaves {n} pairs; at least 2 are required")
    order = RngState(seed).spawn("pair-subsample").permutation(len(pairs))
    keep = sorted(order[:n].tolist())
    return pairs.subset([pairs.class_ids[i] for i in keep])
