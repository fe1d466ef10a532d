"""Synthetic image/caption datasets, trigger injection and dataset snapshots.

Each class owns a prototype image drawn once from the prototype seed; a clean
sample is ``clip(prototype + sigma * noise, 0, 1)`` captioned by one of the
shared templates realized with the class word.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PAD = "<pad>"
PAD_ID = 0
SLOT = "<X>"
MAX_LEN = 8

FILLER_WORDS = ("a", "photo", "of", "the", "picture", "an", "image", "showing", "this", "is")

DEFAULT_TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("a", "photo", "of", SLOT),
    ("a", "picture", "of", "the", SLOT),
    ("an", "image", "showing", SLOT),
    ("this", "is", "a", SLOT),
)

TRIGGER_KINDS = ("patch", "blended", "sinusoidal")


class DatagenError(Exception):
    pass


class InvalidConfig(DatagenError):
    pass


class PatchOutOfBounds(DatagenError):
    pass


class TooManyPoisons(DatagenError):
    pass


class UnknownClass(DatagenError):
    pass


class MalformedTemplate(UnknownClass):
    pass


class FormatError(DatagenError):
    pass


def class_word(class_id: int) -> str:
    return f"object{class_id}"


def build_vocab(class_count: int, vocab_size: int) -> list[str]:
    """Pad, filler words, class words, then spare tokens up to ``vocab_size``."""
    words = [PAD, *FILLER_WORDS, *(class_word(c) for c in range(class_count))]
    if vocab_size < len(words):
        raise InvalidConfig(f"vocab_size {vocab_size} < {len(words)} required tokens")
    words += [f"spare{i}" for i in range(vocab_size - len(words))]
    return words


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    caption: np.ndarray
    class_id: int
    poisoned: bool


@dataclass
class Dataset:
    """Column-oriented sample store; index ``i`` addresses row ``i`` of every array."""

    images: np.ndarray          # (N, H, W) float64 in [0, 1]
    captions: np.ndarray        # (N, MAX_LEN) int64, PAD_ID at the tail
    labels: np.ndarray          # (N,) int64
    poisoned: np.ndarray        # (N,) bool
    class_count: int
    vocab: list[str]
    seed: int
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.captions[i], int(self.labels[i]), bool(self.poisoned[i]))

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def poison_indices(self) -> np.ndarray:
        return np.flatnonzero(self.poisoned)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], captions=self.captions[idx],
                       labels=self.labels[idx], poisoned=self.poisoned[idx],
                       config=dict(self.config))

    def clean_subset(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.poisoned))

    def equal(self, other: "Dataset") -> bool:
        return (self.class_count == other.class_count and self.vocab == other.vocab
                and self.seed == other.seed
                and all(np.array_equal(a, b) for a, b in (
                    (self.images, other.images), (self.captions, other.captions),
                    (self.labels, other.labels), (self.poisoned, other.poisoned))))

    def decode(self, caption) -> str:
        return " ".join(self.vocab[t] for t in caption if t != PAD_ID)


def realize_template(template, class_id: int, vocab: list[str], max_len: int = MAX_LEN) -> np.ndarray:
    """Token ids of ``template`` with its slot replaced by the class word, padded."""
    tokens = list(template)
    if tokens.count(SLOT) != 1:
        raise MalformedTemplate(f"template needs exactly one {SLOT} slot: {template!r}")
    word = class_word(class_id)
    if word not in vocab:
        raise UnknownClass(f"class {class_id} has no word in the vocabulary")
    ids = [vocab.index(word if t == SLOT else t) for t in tokens]
    if len(ids) > max_len:
        raise MalformedTemplate(f"template longer than {max_len} tokens")
    return np.array(ids + [PAD_ID] * (max_len - len(ids)), dtype=np.int64)


def class_prompts(class_count: int, vocab: list[str], templates=DEFAULT_TEMPLATES) -> list[np.ndarray]:
    """Per-class (n_templates, MAX_LEN) token arrays used for zero-shot scoring."""
    return [np.stack([realize_template(t, c, vocab) for t in templates]) for c in range(class_count)]


def generate_dataset(class_count: int, per_class: int, image_size: int, vocab_size: int,
                     sigma: float, seed: int, prototype_seed: int | None = None,
                     caption_noise: float = 0.0, templates=DEFAULT_TEMPLATES) -> Dataset:
    """Class-major synthetic dataset; prototypes come from ``prototype_seed`` (default ``seed``).

    ``caption_noise`` is the fraction of samples whose caption names a random
    other class, mimicking mismatched web captions.  Such samples stay
    unpoisoned and keep the image's true label.
    """
    if class_count < 2 or per_class < 1 or image_size < 1:
        raise InvalidConfig("class_count >= 2, per_class >= 1 and image_size >= 1 required")
    if sigma < 0:
        raise InvalidConfig("sigma must be non-negative")
    if not 0.0 <= caption_noise < 1.0:
        raise InvalidConfig("caption_noise must lie in [0, 1)")
    vocab = build_vocab(class_count, vocab_size)
    proto_seed = seed if prototype_seed is None else prototype_seed
    prototypes = np.random.default_rng(proto_seed).random((class_count, image_size, image_size))
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(class_count, dtype=np.int64), per_class)
    noise = rng.standard_normal((len(labels), image_size, image_size))
    images = np.clip(prototypes[labels] + sigma * noise, 0.0, 1.0)
    choice = rng.integers(0, len(templates), size=len(labels))
    caption_class = labels.copy()
    n_noisy = int(round(caption_noise * len(labels)))
    if n_noisy:
        noisy = rng.choice(len(labels), size=n_noisy, replace=False)
        shift = rng.integers(1, class_count, size=n_noisy)
        caption_class[noisy] = (labels[noisy] + shift) % class_count
    captions = np.stack([realize_template(templates[t], int(c), vocab)
                         for t, c in zip(choice, caption_class)])
    config = dict(class_count=class_count, per_class=per_class, image_size=image_size,
                  vocab_size=vocab_size, sigma=sigma, seed=seed, prototype_seed=proto_seed,
                  caption_noise=caption_noise)
    return Dataset(images, captions, labels, np.zeros(len(labels), dtype=bool),
                   class_count, vocab, seed, config)


# ---------------------------------------------------------------- triggers

@dataclass
class TriggerSpec:
    kind: str
    pattern: np.ndarray
    target_class: int
    patch_origin: tuple[int, int] = (0, 0)
    alpha: float = 1.0
    frequency: float = 0.0
    amplitude: float = 0.0
    templates: tuple = DEFAULT_TEMPLATES
    sample_templates: bool = True

    def validate(self, image_shape=None) -> None:
        if self.kind not in TRIGGER_KINDS:
            raise InvalidConfig(f"unknown trigger kind {self.kind!r}")
        if self.kind == "blended" and not 0.0 < self.alpha <= 1.0:
            raise InvalidConfig("blended alpha must lie in (0, 1]")
        if self.kind == "patch" and image_shape is not None:
            r, c = self.patch_origin
            h, w = self.pattern.shape
            if r < 0 or c < 0 or r + h > image_shape[0] or c + w > image_shape[1]:
                raise PatchOutOfBounds(f"{h}x{w} patch at {self.patch_origin} exceeds {image_shape}")
        if self.kind != "patch" and image_shape is not None and self.pattern.shape != tuple(image_shape):
            raise InvalidConfig(f"{self.kind} pattern shape {self.pattern.shape} != image {image_shape}")


def sinusoid_plane(image_size: int, frequency: float) -> np.ndarray:
    cols = np.arange(image_size)
    row = np.sin(2.0 * np.pi * frequency * cols / image_size)
    return np.tile(row, (image_size, 1))


def make_trigger(kind: str, image_size: int, target_class: int, seed: int = 0,
                 patch_size: int = 4, alpha: float = 0.3, frequency: float = 4.0,
                 amplitude: float = 0.25, sample_templates: bool = True) -> TriggerSpec:
    """Default BadNet-, Blended- and SIG-style triggers for square images."""
    if kind == "patch":
        checker = (np.indices((patch_size, patch_size)).sum(axis=0) % 2).astype(float)
        origin = (image_size - patch_size, image_size - patch_size)
        spec = TriggerSpec("patch", checker, target_class, patch_origin=origin,
                           sample_templates=sample_templates)
    elif kind == "blended":
        pattern = np.random.default_rng([seed, 7]).random((image_size, image_size))
        spec = TriggerSpec("blended", pattern, target_class, alpha=alpha,
                           sample_templates=sample_templates)
    elif kind == "sinusoidal":
        spec = TriggerSpec("sinusoidal", sinusoid_plane(image_size, frequency), target_class,
                           frequency=frequency, amplitude=amplitude,
                           sample_templates=sample_templates)
    else:
        raise InvalidConfig(f"unknown trigger kind {kind!r}")
    spec.validate((image_size, image_size))
    return spec


def inject_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Apply ``spec`` to one (H, W) image or a stack (N, H, W); output stays in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    spec.validate(image.shape[-2:])
    if spec.kind == "patch":
        out = image.copy()
        r, c = spec.patch_origin
        h, w = spec.pattern.shape
        out[..., r:r + h, c:c + w] = np.clip(spec.pattern, 0.0, 1.0)
        return out
    if spec.kind == "blended":
        return np.clip((1.0 - spec.alpha) * image + spec.alpha * spec.pattern, 0.0, 1.0)
    plane = sinusoid_plane(image.shape[-1], spec.frequency)
    return np.clip(image + spec.amplitude * plane, 0.0, 1.0)


def poison_dataset(ds: Dataset, spec: TriggerSpec, count: int, seed: int) -> Dataset:
    """Trigger ``count`` random non-target samples and swap in target-class captions."""
    eligible = np.flatnonzero((ds.labels != spec.target_class) & ~ds.poisoned)
    if count < 0 or count > len(eligible):
        raise TooManyPoisons(f"requested {count} poisons, {len(eligible)} eligible samples")
    out = ds.subset(np.arange(len(ds)))
    if count == 0:
        return out
    rng = np.random.default_rng([seed, 2])
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    images, captions = out.images.copy(), out.captions.copy()
    images[chosen] = inject_trigger(ds.images[chosen], spec)
    picks = (rng.integers(0, len(spec.templates), size=count) if spec.sample_templates
             else np.zeros(count, dtype=np.int64))
    for i, t in zip(chosen, picks):
        captions[i] = realize_template(spec.templates[t], spec.target_class, ds.vocab)
    poisoned = out.poisoned.copy()
    poisoned[chosen] = True
    out.images, out.captions, out.poisoned = images, captions, poisoned
    out.config.update(poison_count=count, poison_seed=seed, trigger=spec.kind,
                      target_class=spec.target_class)
    return out


# ---------------------------------------------------------------- snapshots

DATASET_MAGIC = b"UBTDSET\0"
DATASET_VERSION = 0
_HEADER = struct.Struct("<8sIIIIIIIq")


def dataset_bytes(ds: Dataset) -> bytes:
    n, h, w = ds.images.shape
    vocab_blob = "\n".join(ds.vocab).encode("utf-8")
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, ds.captions.shape[1],
                          ds.class_count, len(vocab_blob), ds.seed)
    return b"".join([
        header, vocab_blob,
        ds.labels.astype("<i8").tobytes(),
        ds.poisoned.astype("u1").tobytes(),
        ds.captions.astype("<i8").tobytes(),
        ds.images.astype("<f8").tobytes(),
    ])


def dataset_sidecar(ds: Dataset) -> str:
    lines = [f"{k} = {v}" for k, v in sorted(ds.config.items())]
    lines += [f"samples = {len(ds)}", f"poisoned = {int(ds.poisoned.sum())}"]
    return "\n".join(lines) + "\n"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".txt")


def save_dataset(ds: Dataset, path) -> str:
    """Write the binary snapshot plus a ``.txt`` config sidecar; returns the sha256."""
    path = Path(path)
    blob = dataset_bytes(ds)
    path.write_bytes(blob)
    sidecar_path(path).write_text(dataset_sidecar(ds))
    return hashlib.sha256(blob).hexdigest()


def _read_sidecar(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        return {}
    cfg = {}
    for line in side.read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in ("samples", "poisoned"):
                cfg[k] = v
    return cfg


def load_dataset(path) -> Dataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, h, w, length, classes, vocab_len, seed = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    sizes = [vocab_len, 8 * n, n, 8 * n * length, 8 * n * h * w]
    if len(blob) != _HEADER.size + sum(sizes):
        raise FormatError(f"{path}: payload size mismatch (truncated or corrupt)")
    off = _HEADER.size
    parts = []
    for size in sizes:
        parts.append(blob[off:off + size])
        off += size
    vocab = parts[0].decode("utf-8").split("\n")
    labels = np.frombuffer(parts[1], dtype="<i8").astype(np.int64)
    poisoned = np.frombuffer(parts[2], dtype="u1").astype(bool)
    captions = np.frombuffer(parts[3], dtype="<i8").astype(np.int64).reshape(n, length)
    images = np.frombuffer(parts[4], dtype="<f8").astype(np.float64).reshape(n, h, w)
    return Dataset(images, captions, labels, poisoned, classes, vocab, seed, _read_sidecar(path))
