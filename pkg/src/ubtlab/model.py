"""Miniature dual encoder: MLP image tower, bag-of-tokens text tower."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datagen import PAD_ID

DEFAULT_TAU = 0.07


class EmptyCaption(nc.ZeroNorm):
    pass


class CheckpointFormatError(Exception):
    pass


@dataclass
class DualEncoderModel:
    """Parameters live in one ParamSet with ``image.`` and ``text.`` prefixes."""

    params: nc.ParamSet
    image_size: int
    vocab_size: int
    hidden: int
    embed_dim: int
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def copy(self) -> "DualEncoderModel":
        return DualEncoderModel(self.params.copy(), self.image_size, self.vocab_size,
                                self.hidden, self.embed_dim, self.tau)

    def with_params(self, params: nc.ParamSet) -> "DualEncoderModel":
        return DualEncoderModel(params, self.image_size, self.vocab_size,
                                self.hidden, self.embed_dim, self.tau)

    def equal(self, other: "DualEncoderModel") -> bool:
        return (self.arch() == other.arch()) and self.params.equal(other.params)

    def arch(self) -> dict:
        return dict(image_size=self.image_size, vocab_size=self.vocab_size,
                    hidden=self.hidden, embed_dim=self.embed_dim, tau=self.tau)


def init_model(image_size: int, vocab_size: int, hidden: int = 64, embed_dim: int = 32,
               tau: float = DEFAULT_TAU, seed: int = 0) -> DualEncoderModel:
    rng = np.random.default_rng([seed, 3])
    n_in = image_size * image_size
    params = nc.ParamSet()
    params.add("image.w1", rng.standard_normal((n_in, hidden)) / np.sqrt(n_in))
    params.add("image.b1", np.zeros(hidden))
    params.add("image.w2", rng.standard_normal((hidden, embed_dim)) / np.sqrt(hidden))
    params.add("image.b2", np.zeros(embed_dim))
    params.add("text.embed", rng.standard_normal((vocab_size, embed_dim)))
    params.add("text.w", rng.standard_normal((embed_dim, embed_dim)) / np.sqrt(embed_dim))
    params.add("text.b", np.zeros(embed_dim))
    return DualEncoderModel(params, image_size, vocab_size, hidden, embed_dim, tau)


# ---------------------------------------------------------------- forward passes
# ``p`` maps parameter names to Tensors (watched leaves) or plain arrays.

def _p(p, name):
    return p[name] if isinstance(p[name], nc.Tensor) else nc.Tensor(p[name])


def image_features(p, images: np.ndarray) -> nc.Tensor:
    """Pre-normalization image embeddings for a (N, H, W) or (N, H*W) batch."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1) - 0.5
    if x.shape[1] != p["image.w1"].shape[0]:
        raise nc.ShapeMismatch(f"image has {x.shape[1]} pixels, model expects {p['image.w1'].shape[0]}")
    h = nc.tanh(nc.Tensor(x) @ _p(p, "image.w1") + _p(p, "image.b1"))
    return h @ _p(p, "image.w2") + _p(p, "image.b2")


def bag_of_tokens(captions: np.ndarray, vocab_size: int) -> np.ndarray:
    """(N, V) matrix whose row i mean-pools caption i over its non-pad tokens."""
    captions = np.atleast_2d(np.asarray(captions, dtype=np.int64))
    if captions.size and (captions.min() < 0 or captions.max() >= vocab_size):
        raise nc.ShapeMismatch("token id outside the vocabulary")
    bag = np.zeros((len(captions), vocab_size))
    rows = np.repeat(np.arange(len(captions)), captions.shape[1])
    np.add.at(bag, (rows, captions.ravel()), 1.0)
    bag[:, PAD_ID] = 0.0
    counts = bag.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise EmptyCaption("caption has no non-pad tokens")
    return bag / counts


def text_features(p, captions: np.ndarray) -> nc.Tensor:
    bag = bag_of_tokens(captions, p["text.embed"].shape[0])
    pooled = nc.Tensor(bag) @ _p(p, "text.embed")
    return pooled @ _p(p, "text.w") + _p(p, "text.b")


def embed_images(p, images) -> nc.Tensor:
    return nc.l2_normalize(image_features(p, images), axis=1)


def embed_texts(p, captions) -> nc.Tensor:
    return nc.l2_normalize(text_features(p, captions), axis=1)


def pair_similarity(p, images, captions) -> nc.Tensor:
    """Cosine similarity of row-aligned image/caption pairs, shape (N,)."""
    prod = embed_images(p, images) * embed_texts(p, captions)
    return nc.clip(nc.total(prod, axis=1), -1.0, 1.0)


def similarity_tensor(p, images, captions) -> nc.Tensor:
    """Full (N, N) similarity matrix: entry (i, j) pairs image i with caption j."""
    return nc.clip(embed_images(p, images) @ embed_texts(p, captions).T, -1.0, 1.0)


# ---------------------------------------------------------------- public API

def encode_image(model: DualEncoderModel, image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (model.image_size, model.image_size):
        raise nc.ShapeMismatch(f"image shape {image.shape}")
    return embed_images(model.params, image[None]).data[0]


def encode_text(model: DualEncoderModel, caption) -> np.ndarray:
    return embed_texts(model.params, np.asarray(caption)[None]).data[0]


def encode_images(model: DualEncoderModel, images) -> np.ndarray:
    return embed_images(model.params, images).data


def encode_texts(model: DualEncoderModel, captions) -> np.ndarray:
    return embed_texts(model.params, captions).data


def similarity_matrix(model: DualEncoderModel, images, captions) -> np.ndarray:
    if len(images) < 1 or len(images) != len(captions):
        raise ValueError("need N >= 1 aligned pairs")
    return similarity_tensor(model.params, images, captions).data


def pair_similarities(model: DualEncoderModel, images, captions, chunk: int = 512) -> np.ndarray:
    """S(I_i, T_i) for every aligned pair, evaluated in chunks."""
    out = []
    for start in range(0, len(images), chunk):
        sl = slice(start, start + chunk)
        out.append(pair_similarity(model.params, images[sl], captions[sl]).data)
    return np.concatenate(out) if out else np.zeros(0)


def class_embeddings(model: DualEncoderModel, prompts) -> list[np.ndarray]:
    if len(prompts) == 0:
        raise ValueError("prompts must name at least one class")
    return [encode_texts(model, np.atleast_2d(pr)) for pr in prompts]


def class_scores(model: DualEncoderModel, images, prompts) -> np.ndarray:
    """(N, C) mean cosine similarity between each image and each class's prompts."""
    img = encode_images(model, images)
    cols = [np.clip(img @ emb.T, -1.0, 1.0).mean(axis=1) for emb in class_embeddings(model, prompts)]
    return np.stack(cols, axis=1)


def zero_shot_classify(model: DualEncoderModel, image, prompts) -> int:
    """Argmax class by mean prompt similarity; ``np.argmax`` already breaks ties low."""
    return int(np.argmax(class_scores(model, np.asarray(image)[None], prompts)[0]))


def zero_shot_predict(model: DualEncoderModel, images, prompts) -> np.ndarray:
    return np.argmax(class_scores(model, images, prompts), axis=1)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"UBTCKPT\0"
CKPT_VERSION = 0


def checkpoint_bytes(model: DualEncoderModel) -> bytes:
    header = json.dumps({"arch": model.arch(),
                         "params": [[k, list(v.shape)] for k, v in model.params.items()]},
                        sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
    chunks += [v.astype("<f8").tobytes() for _, v in model.params.items()]
    return b"".join(chunks)


def save_checkpoint(model: DualEncoderModel, path) -> str:
    blob = checkpoint_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> DualEncoderModel:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    off = 16 + hlen
    params = nc.ParamSet()
    for name, shape in header["params"]:
        size = 8 * int(np.prod(shape))
        if off + size > len(blob):
            raise CheckpointFormatError(f"{path}: truncated payload")
        params.add(name, np.frombuffer(blob[off:off + size], dtype="<f8").reshape(shape))
        off += size
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    arch = header["arch"]
    return DualEncoderModel(params, arch["image_size"], arch["vocab_size"], arch["hidden"],
                            arch["embed_dim"], arch["tau"])
