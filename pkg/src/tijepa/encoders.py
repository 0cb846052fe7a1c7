"""Patchification, positional encodings, and the small image/text encoders.

Both encoders are plain pre-norm transformers built on :mod:`tijepa.numerics`.
They stand in for large pretrained backbones at desk scale, expose the same
interfaces (patch tokens in, per-token representations out), and are frozen
by default during pretraining.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .numerics import (
    DEFAULT_DTYPE,
    AttentionParams,
    Tensor,
    add,
    attention,
    gather_rows,
    gelu,
    layer_norm,
    linear,
)

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    max_text_len: int = 32
    frozen: bool = True

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ShapeError("patch_size must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ShapeError("embed_dim must be divisible by 4 for 2-D positional encodings")
        if self.max_text_len < 2:
            raise ShapeError("max_text_len must be >= 2 (room for BOS and EOS)")
        if self.depth < 0:
            raise ShapeError("depth must be >= 0")


# ---------------------------------------------------------------------------
# tokenizer (byte-level, lossless)


def tokenize_text(caption: str | bytes, max_len: int) -> list[int]:
    """Byte ids 0-255 wrapped in BOS/EOS, truncated to ``max_len``."""
    data = caption.encode("utf-8") if isinstance(caption, str) else bytes(caption)
    ids = [BOS_ID, *data, EOS_ID]
    return ids[:max_len]


def detokenize(ids) -> bytes:
    return bytes(i for i in ids if 0 <= i < 256)


# ---------------------------------------------------------------------------
# fixed sine-cosine positional encodings


@functools.lru_cache(maxsize=64)
def _sincos_1d_cached(n: int, dim: int, dtype_name: str) -> np.ndarray:
    if dim % 2 != 0:
        raise ShapeError("1-D sin-cos encoding needs an even dim")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freqs = np.arange(dim // 2, dtype=np.float64)
    omega = 1.0 / (10000.0 ** (2.0 * freqs / dim))
    angles = pos * omega[None, :]
    out = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    out = out.astype(dtype_name)
    out.setflags(write=False)
    return out


def sincos_pos_1d(n: int, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return _sincos_1d_cached(n, dim, np.dtype(dtype).name)


@functools.lru_cache(maxsize=64)
def _sincos_2d_cached(grid_h: int, grid_w: int, dim: int, dtype_name: str) -> np.ndarray:
    if dim % 4 != 0:
        raise ShapeError("2-D sin-cos encoding needs dim divisible by 4")
    half = dim // 2
    rows = _sincos_1d_cached(grid_h, half, "float64")
    cols = _sincos_1d_cached(grid_w, half, "float64")
    out = np.empty((grid_h * grid_w, dim), dtype=np.float64)
    for r in range(grid_h):
        for c in range(grid_w):
            out[r * grid_w + c, :half] = rows[r]
            out[r * grid_w + c, half:] = cols[c]
    out = out.astype(dtype_name)
    out.setflags(write=False)
    return out


def sincos_pos_2d(grid_h: int, grid_w: int, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fixed 2-D encoding, one row per grid cell in row-major order."""
    if grid_h < 1 or grid_w < 1:
        raise ShapeError("positional grid must be at least 1x1")
    return _sincos_2d_cached(grid_h, grid_w, dim, np.dtype(dtype).name)


# ---------------------------------------------------------------------------
# patchification


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a (3, H, W) image into N x (3*p*p) rows in row-major grid order."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    tiles = img.reshape(3, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, 3 * p * p))


def unpatchify(patches: np.ndarray, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    p = patch_size
    arr = np.asarray(patches)
    if arr.shape != (grid_h * grid_w, 3 * p * p):
        raise ShapeError(f"bad patch matrix shape {arr.shape}")
    tiles = arr.reshape(grid_h, grid_w, 3, p, p).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(tiles.reshape(3, grid_h * p, grid_w * p))


# ---------------------------------------------------------------------------
# transformer blocks and the two encoders


class TransformerBlock:
    """Pre-norm self-attention + MLP block with residual connections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 requires_grad: bool = True, dtype=DEFAULT_DTYPE, mlp_ratio: int = 4):
        self.heads = heads
        hidden = mlp_ratio * dim

        def w(shape):
            return Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad, dtype=dtype)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad, dtype=dtype)

        def ones(n):
            return Tensor(np.ones(n), requires_grad, dtype=dtype)

        self.ln1_g, self.ln1_b = ones(dim), zeros(dim)
        self.attn = AttentionParams.create(dim, rng, requires_grad, dtype)
        self.ln2_g, self.ln2_b = ones(dim), zeros(dim)
        self.mlp_w1, self.mlp_b1 = w((dim, hidden)), zeros(hidden)
        self.mlp_w2, self.mlp_b2 = w((hidden, dim)), zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        normed = layer_norm(x, self.ln1_g, self.ln1_b)
        x = add(x, attention(normed, normed, self.attn, self.heads))
        h = linear(gelu(linear(layer_norm(x, self.ln2_g, self.ln2_b), self.mlp_w1, self.mlp_b1)),
                   self.mlp_w2, self.mlp_b2)
        return add(x, h)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.ln1.gain": self.ln1_g, f"{prefix}.ln1.bias": self.ln1_b,
            f"{prefix}.ln2.gain": self.ln2_g, f"{prefix}.ln2.bias": self.ln2_b,
            f"{prefix}.mlp.w1": self.mlp_w1, f"{prefix}.mlp.b1": self.mlp_b1,
            f"{prefix}.mlp.w2": self.mlp_w2, f"{prefix}.mlp.b2": self.mlp_b2,
        }
        out.update(self.attn.named(f"{prefix}.attn"))
        return out


class ImageEncoder:
    """Linear patch embedding + fixed 2-D positions + transformer blocks.

    ``encode`` accepts an optional set of visible patch indices; only those
    tokens enter the blocks, and output rows follow ascending patch index.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        trainable = not cfg.frozen
        patch_dim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_w = Tensor(rng.normal(0.0, INIT_STD, (patch_dim, cfg.embed_dim)), trainable, dtype=dtype)
        self.patch_b = Tensor(np.zeros(cfg.embed_dim), trainable, dtype=dtype)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, rng, trainable, dtype)
                       for _ in range(cfg.depth)]
        self.norm_g = Tensor(np.ones(cfg.embed_dim), trainable, dtype=dtype)
        self.norm_b = Tensor(np.zeros(cfg.embed_dim), trainable, dtype=dtype)

    def grid_shape(self, image: np.ndarray) -> tuple[int, int]:
        return image.shape[1] // self.cfg.patch_size, image.shape[2] // self.cfg.patch_size

    def encode(self, image: np.ndarray, visible=None) -> Tensor:
        patches = patchify(image, self.cfg.patch_size)
        gh, gw = self.grid_shape(image)
        n = gh * gw
        if visible is None:
            idx = np.arange(n)
        else:
            idx = np.asarray(sorted(visible), dtype=np.int64)
            if idx.size == 0:
                raise ShapeError("visible patch set is empty")
            if idx.min() < 0 or idx.max() >= n:
                raise ShapeError(f"visible patch index out of range [0, {n})")
        pos = sincos_pos_2d(gh, gw, self.cfg.embed_dim, self.dtype)
        x = linear(Tensor(patches[idx], dtype=self.dtype), self.patch_w, self.patch_b)
        x = add(x, Tensor(pos[idx], dtype=self.dtype))
        for block in self.blocks:
            x = block(x)
        return layer_norm(x, self.norm_g, self.norm_b)

    __call__ = encode

    def named_parameters(self, prefix: str = "image_encoder") -> dict[str, Tensor]:
        out = {
            f"{prefix}.patch_embed.weight": self.patch_w,
            f"{prefix}.patch_embed.bias": self.patch_b,
            f"{prefix}.norm.gain": self.norm_g,
            f"{prefix}.norm.bias": self.norm_b,
        }
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}.blocks.{i}"))
        return out


class TextEncoder:
    """Token embedding + fixed 1-D positions + transformer blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        trainable = not cfg.frozen
        self.embed = Tensor(rng.normal(0.0, INIT_STD, (VOCAB_SIZE, cfg.embed_dim)), trainable, dtype=dtype)
        self.blocks = [TransformerBlock(cfg.embed_dim, cfg.heads, rng, trainable, dtype)
                       for _ in range(cfg.depth)]
        self.norm_g = Tensor(np.ones(cfg.embed_dim), trainable, dtype=dtype)
        self.norm_b = Tensor(np.zeros(cfg.embed_dim), trainable, dtype=dtype)

    def encode(self, token_ids) -> Tensor:
        ids = list(token_ids)
        if len(ids) < 2:
            raise ShapeError("token id list must hold at least BOS and EOS")
        if any(not 0 <= i < VOCAB_SIZE for i in ids):
            raise ShapeError(f"token id out of range [0, {VOCAB_SIZE})")
        pos = sincos_pos_1d(len(ids), self.cfg.embed_dim, self.dtype)
        x = add(gather_rows(self.embed, ids), Tensor(pos, dtype=self.dtype))
        for block in self.blocks:
            x = block(x)
        return layer_norm(x, self.norm_g, self.norm_b)

    __call__ = encode

    def named_parameters(self, prefix: str = "text_encoder") -> dict[str, Tensor]:
        out = {
            f"{prefix}.embed.weight": self.embed,
            f"{prefix}.norm.gain": self.norm_g,
            f"{prefix}.norm.bias": self.norm_b,
        }
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}.blocks.{i}"))
        return out


# ---------------------------------------------------------------------------
# image file formats: binary P6 PPM and the RAWT raw tensor container


def read_ppm(path) -> np.ndarray:
    """8-bit binary P6 PPM to a (3, H, W) float32 image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise DataError(f"not a binary P6 PPM file: {path}")
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise DataError(f"truncated PPM header: {path}")
        try:
            fields.append(int(blob[start:i]))
        except ValueError as exc:
            raise DataError(f"bad PPM header field in {path}") from exc
    i += 1  # exactly one whitespace byte separates header and pixels
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"only 8-bit PPM supported (maxval 255), got {maxval}: {path}")
    expected = width * height * 3
    pixels = blob[i:i + expected]
    if len(pixels) != expected:
        raise DataError(f"truncated PPM pixel data: {path}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


RAWT_MAGIC = b"RAWT"


def read_rawt(path) -> np.ndarray:
    """RAWT container: magic, u32 rank, u32 dims..., little-endian f32 payload."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RAWT_MAGIC:
        raise DataError(f"bad RAWT magic in {path}")
    try:
        (rank,) = struct.unpack_from("<I", blob, 4)
        dims = struct.unpack_from(f"<{rank}I", blob, 8)
        offset = 8 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        payload = blob[offset:offset + 4 * count]
        if len(payload) != 4 * count:
            raise DataError(f"truncated RAWT payload in {path}")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    except struct.error as exc:
        raise DataError(f"truncated RAWT header in {path}") from exc


def write_rawt(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(RAWT_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def load_image(path) -> np.ndarray:
    """Read a (3, H, W) float image in [0, 1] from a PPM or RAWT file."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise DataError(f"cannot read image file: {path}") from exc
    if magic[:2] == b"P6":
        return read_ppm(path)
    if magic == RAWT_MAGIC:
        img = read_rawt(path)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DataError(f"RAWT image must be (3, H, W), got {img.shape}: {path}")
        if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
            raise DataError(f"image values outside [0, 1]: {path}")
        return np.clip(img, 0.0, 1.0).astype(np.float32)
    raise DataError(f"unrecognized image format (want P6 PPM or RAWT): {path}")
