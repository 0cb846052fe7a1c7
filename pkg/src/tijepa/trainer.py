"""Pretraining loop: AdamW on the online fusion module and predictor, an EMA
momentum ramp for the target fusion twin, collapse diagnostics, and versioned
binary checkpoints.

All randomness derives from counter-based seeds (global seed, stream, epoch,
example index), so runs are bitwise reproducible and a resumed run replays
exactly like an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    CrossAttnConfig,
    FusionModule,
    Predictor,
    PredictorConfig,
    make_context,
    make_targets,
    predict,
    prediction_loss,
)
from .encoders import EncoderConfig, ImageEncoder, TextEncoder
from .errors import DataError, MaskSamplingError, NumericalError, ShapeError
from .masking import sample_masks
from .numerics import Tensor, active_tape, backward, no_grad, scale, zero_grads

logger = logging.getLogger(__name__)

# sub-stream tags so every random draw is a pure function of (seed, purpose, ...)
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_MASK = 2
_STREAM_SENSITIVITY = 3


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TiJepaConfig:
    """Every architecture and training hyperparameter, flat for `key = value` files."""

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    text_embed_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    max_text_len: int = 32
    freeze_encoders: bool = True
    fusion_layers: int = 2
    fusion_heads: int = 4
    fusion_hidden: int = 64
    mlp_ratio: int = 4
    predictor_depth: int = 2
    predictor_heads: int = 4
    predictor_width: int = 64
    freeze_predictor: bool = False
    num_targets: int = 4
    ctx_scale_lo: float = 0.85
    ctx_scale_hi: float = 1.0
    tgt_scale_lo: float = 0.15
    tgt_scale_hi: float = 0.2
    tgt_aspect_lo: float = 0.75
    tgt_aspect_hi: float = 1.5
    mask_max_retries: int = 20
    ema_start: float = 0.996
    ema_end: float = 1.0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    batch_size: int = 16
    total_steps: int = 200
    log_interval: int = 10
    checkpoint_interval: int = 100
    loss_type: str = "l2"
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise DataError("image_size must be divisible by patch_size")
        if self.loss_type not in ("l2", "l1"):
            raise DataError(f"loss_type must be 'l2' or 'l1', got '{self.loss_type}'")
        if not (0.0 <= self.ema_start <= self.ema_end <= 1.0):
            raise DataError("need 0 <= ema_start <= ema_end <= 1")
        if self.batch_size < 1 or self.total_steps < 1 or self.log_interval < 1:
            raise DataError("batch_size, total_steps, and log_interval must be positive")
        if self.checkpoint_interval < 1 or self.num_targets < 1:
            raise DataError("checkpoint_interval and num_targets must be positive")

    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    def image_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.embed_dim, self.encoder_depth,
                             self.encoder_heads, self.max_text_len, self.freeze_encoders)

    def text_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.text_embed_dim, self.encoder_depth,
                             self.encoder_heads, self.max_text_len, self.freeze_encoders)

    def fusion_config(self) -> CrossAttnConfig:
        return CrossAttnConfig(
            layers=self.fusion_layers, heads=self.fusion_heads, hidden=self.fusion_hidden,
            mlp_ratio=self.mlp_ratio,
            patch_dim=self.embed_dim if self.embed_dim != self.fusion_hidden else None,
            text_dim=self.text_embed_dim if self.text_embed_dim != self.fusion_hidden else None)

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(self.predictor_depth, self.predictor_heads, self.predictor_width)

    def ema_schedule(self) -> "EmaSchedule":
        return EmaSchedule(self.ema_start, self.ema_end, self.total_steps)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            text = ("true" if value else "false") if isinstance(value, bool) else repr(value) \
                if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TiJepaConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in types:
                raise DataError(f"unknown config key '{key}'")
            kwargs[key] = _coerce(key, raw, types[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "TiJepaConfig":
        return cls.from_mapping(parse_config_text(text))


def _coerce(key: str, raw: str, type_name: str):
    raw = raw.strip()
    try:
        if type_name == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise DataError(f"bad value for config key '{key}': {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise DataError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        if not key:
            raise DataError(f"config line {lineno}: empty key")
        if key in out:
            raise DataError(f"config line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def load_config(path, overrides=()) -> TiJepaConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file: {path}") from exc
    mapping = parse_config_text(text)
    for item in overrides:
        if "=" not in item:
            raise DataError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    return TiJepaConfig.from_mapping(mapping)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def create(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(0,
                   {n: np.zeros_like(p.data) for n, p in params.items()},
                   {n: np.zeros_like(p.data) for n, p in params.items()})


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One bias-corrected AdamW update with decoupled weight decay, in place.

    Missing gradients count as zeros; non-finite gradients abort with the
    offending parameter's name.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in sorted(params):
        p = params[name]
        if p.data.shape != state.m[name].shape:
            raise ShapeError(f"optimizer state shape mismatch for '{name}'")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= lr * update


# ---------------------------------------------------------------------------
# EMA schedule and update


@dataclass(frozen=True)
class EmaSchedule:
    m_start: float = 0.996
    m_end: float = 1.0
    total_steps: int = 200


def momentum_at(step: int, sched: EmaSchedule) -> float:
    """Linear ramp from m_start to m_end; out-of-range steps clamp with a warning."""
    if step < 0 or step > sched.total_steps:
        logger.warning("EMA momentum queried at step %d outside [0, %d]; clamping",
                       step, sched.total_steps)
        step = min(max(step, 0), sched.total_steps)
    if sched.total_steps == 0:
        return sched.m_end
    return sched.m_start + (sched.m_end - sched.m_start) * (step / sched.total_steps)


def ema_update(target_params: dict[str, Tensor], online_params: dict[str, Tensor],
               m: float) -> None:
    """theta_tgt <- m * theta_tgt + (1 - m) * theta_online, elementwise in place.

    Computed incrementally as theta_tgt += (1-m)*(theta_online - theta_tgt) so
    equal parameters stay bitwise fixed; m=1 and m=0 are exact no-op and copy.
    """
    if set(target_params) != set(online_params):
        raise ShapeError("EMA parameter names differ between target and online modules")
    for name in sorted(target_params):
        tgt, src = target_params[name], online_params[name]
        if tgt.data.shape != src.data.shape:
            raise ShapeError(f"EMA shape mismatch for '{name}'")
        if m == 1.0:
            continue
        if m == 0.0:
            tgt.data[...] = src.data
        else:
            tgt.data += (1.0 - m) * (src.data - tgt.data)


# ---------------------------------------------------------------------------
# collapse diagnostic


def collapse_metric(target_reps) -> float:
    """Mean over embedding dims of the per-dim std across all B*P tokens.

    Zero means every token representation is identical (full collapse).
    """
    arr = target_reps.data if isinstance(target_reps, Tensor) else np.asarray(target_reps)
    if arr.ndim != 3:
        raise ShapeError(f"collapse_metric expects a (B, P, d) array, got {arr.shape}")
    if arr.shape[0] < 2:
        raise ShapeError("collapse_metric needs at least 2 examples")
    tokens = arr.reshape(-1, arr.shape[-1])
    return float(tokens.std(axis=0).mean())


# ---------------------------------------------------------------------------
# training state


class PretrainState:
    """All modules plus optimizer state and the step counter."""

    def __init__(self, config: TiJepaConfig, image_encoder: ImageEncoder,
                 text_encoder: TextEncoder, fusion: FusionModule,
                 target_fusion: FusionModule, predictor: Predictor,
                 opt: AdamWState, step: int = 0):
        self.config = config
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.fusion = fusion
        self.target_fusion = target_fusion
        self.predictor = predictor
        self.opt = opt
        self.step = step

    @classmethod
    def initialize(cls, config: TiJepaConfig) -> "PretrainState":
        config.validate()
        rng = np.random.default_rng([config.seed, _STREAM_INIT])
        image_encoder = ImageEncoder(config.image_encoder_config(), rng)
        text_encoder = TextEncoder(config.text_encoder_config(), rng)
        fusion = FusionModule(config.fusion_config(), rng, requires_grad=True)
        target_fusion = fusion.clone(requires_grad=False)
        predictor = Predictor(config.predictor_config(), config.embed_dim, rng,
                              requires_grad=not config.freeze_predictor)
        state = cls(config, image_encoder, text_encoder, fusion, target_fusion,
                    predictor, AdamWState(0, {}, {}))
        state.opt = AdamWState.create(state.trainable_parameters())
        return state

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.image_encoder.named_parameters("image_encoder"))
        out.update(self.text_encoder.named_parameters("text_encoder"))
        out.update(self.fusion.named_parameters("fusion"))
        out.update(self.target_fusion.named_parameters("target_fusion"))
        out.update(self.predictor.named_parameters("predictor"))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}


@dataclass
class MetricsRow:
    step: int
    loss: float
    collapse: float
    ema_m: float

    def format(self) -> str:
        return f"{self.step}\t{self.loss:.6f}\t{self.collapse:.6f}\t{self.ema_m:.6f}"


@dataclass
class TrainResult:
    state: PretrainState
    rows: list[MetricsRow]
    losses: list[float]
    skipped_examples: int


def _check_example_image(example, config: TiJepaConfig) -> None:
    img = example.image
    if img is None:
        raise DataError("training example has no image data")
    if img.shape != (3, config.image_size, config.image_size):
        raise DataError(
            f"image shape {img.shape} does not match configured size {config.image_size}")


def _example_forward(state: PretrainState, example, masks):
    targets, fused_full = make_targets(
        example.image, example.caption, masks, state.image_encoder,
        state.text_encoder, state.target_fusion, return_full=True)
    context = make_context(example.image, example.caption, masks,
                           state.image_encoder, state.text_encoder, state.fusion)
    preds = [predict(context, masks.context, block.indices(), state.predictor,
                     (masks.grid_h, masks.grid_w))
             for block in masks.targets]
    loss = prediction_loss(preds, targets, state.config.loss_type)
    return loss, fused_full


def train(config: TiJepaConfig, dataset, out_dir=None,
          state: PretrainState | None = None) -> TrainResult:
    """Run pretraining until ``config.total_steps``; resumes when given a state.

    Batches come from a per-epoch seeded shuffle and masks from per-example
    seeds, so results depend only on (config, dataset), not wall clock.
    """
    config.validate()
    if not dataset:
        raise DataError("dataset is empty")
    if state is None:
        state = PretrainState.initialize(config)
    for example in dataset:
        _check_example_image(example, config)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    batch_size = min(config.batch_size, n)
    batches_per_epoch = max(1, n // batch_size)
    sched = config.ema_schedule()
    trainable = state.trainable_parameters()
    online_fusion_params = state.fusion.named_parameters("m")
    target_fusion_params = state.target_fusion.named_parameters("m")

    rows: list[MetricsRow] = []
    losses: list[float] = []
    skipped = 0

    while state.step < config.total_steps:
        s = state.step
        epoch = s // batches_per_epoch
        batch_index = s % batches_per_epoch
        order = np.random.default_rng([config.seed, _STREAM_SHUFFLE, epoch]).permutation(n)
        batch = order[batch_index * batch_size:(batch_index + 1) * batch_size]

        active_tape().clear()
        zero_grads(trainable)
        loss_terms = []
        fused_stack = []
        for example_index in batch:
            example = dataset[int(example_index)]
            mask_rng = np.random.default_rng(
                [config.seed, _STREAM_MASK, epoch, int(example_index)])
            try:
                masks = sample_masks(config.grid(), config.num_targets,
                                     (config.ctx_scale_lo, config.ctx_scale_hi),
                                     (config.tgt_scale_lo, config.tgt_scale_hi),
                                     (config.tgt_aspect_lo, config.tgt_aspect_hi),
                                     mask_rng, config.mask_max_retries)
            except MaskSamplingError as exc:
                skipped += 1
                logger.warning("step %d: skipping example %d (%s)", s + 1,
                               int(example_index), exc)
                continue
            loss_i, fused = _example_forward(state, example, masks)
            loss_terms.append(loss_i)
            fused_stack.append(fused.data)
        if not loss_terms:
            raise NumericalError(f"step {s + 1}: every example in the batch was skipped")

        total = loss_terms[0]
        for term in loss_terms[1:]:
            total = total + term
        batch_loss = scale(total, 1.0 / len(loss_terms))
        loss_value = batch_loss.item()
        if not np.isfinite(loss_value):
            raise NumericalError(f"non-finite loss at step {s + 1}")
        backward(batch_loss)
        adamw_step(trainable, state.opt, config.learning_rate, config.beta1,
                   config.beta2, config.adam_eps, config.weight_decay)
        m = momentum_at(s + 1, sched)
        ema_update(target_fusion_params, online_fusion_params, m)
        state.step = s + 1
        losses.append(loss_value)

        done = state.step
        if done == 1 or done % config.log_interval == 0 or done == config.total_steps:
            collapse = collapse_metric(np.stack(fused_stack)) if len(fused_stack) >= 2 \
                else 0.0
            row = MetricsRow(done, loss_value, collapse, m)
            rows.append(row)
            logger.info("step %d: loss=%.6f collapse=%.6f ema_m=%.6f",
                        done, loss_value, collapse, m)
        if out_path is not None and done % config.checkpoint_interval == 0:
            save_checkpoint(state, out_path / f"checkpoint_{done:06d}.tijp")

    if out_path is not None:
        save_checkpoint(state, out_path / "checkpoint_final.tijp")
        with open(out_path / "metrics.log", "a", encoding="utf-8") as fh:
            for row in rows:
                fh.write(row.format() + "\n")
    if skipped:
        logger.warning("skipped %d examples due to mask sampling failures", skipped)
    return TrainResult(state, rows, losses, skipped)


def caption_sensitivity(state: PretrainState, dataset, seed: int = 0,
                        limit: int | None = None) -> tuple[float, float]:
    """Mean prediction loss with true captions vs captions shifted by one example.

    Target representations always come from the example's own caption; the
    permutation corrupts only the caption feeding the prediction pathway.
    A positive (permuted - true) margin means predictions exploit the text.
    """
    config = state.config
    n = len(dataset) if limit is None else min(limit, len(dataset))
    if n < 2:
        raise DataError("caption sensitivity needs at least 2 examples")
    true_losses = []
    permuted_losses = []
    with no_grad():
        for i in range(n):
            example = dataset[i]
            other = dataset[(i + 1) % n]
            rng = np.random.default_rng([config.seed, _STREAM_SENSITIVITY, seed, i])
            masks = sample_masks(config.grid(), config.num_targets,
                                 (config.ctx_scale_lo, config.ctx_scale_hi),
                                 (config.tgt_scale_lo, config.tgt_scale_hi),
                                 (config.tgt_aspect_lo, config.tgt_aspect_hi),
                                 rng, config.mask_max_retries)
            targets = make_targets(example.image, example.caption, masks,
                                   state.image_encoder, state.text_encoder,
                                   state.target_fusion)
            for caption, sink in ((example.caption, true_losses),
                                  (other.caption, permuted_losses)):
                context = make_context(example.image, caption, masks, state.image_encoder,
                                       state.text_encoder, state.fusion)
                preds = [predict(context, masks.context, block.indices(), state.predictor,
                                 (masks.grid_h, masks.grid_w)) for block in masks.targets]
                sink.append(prediction_loss(preds, targets, config.loss_type).item())
    return float(np.mean(true_losses)), float(np.mean(permuted_losses))


# ---------------------------------------------------------------------------
# checkpoint format: "TIJP", u32 version, u32 count, sorted named tensors,
# trailing u64 CRC (zlib.crc32 of all preceding bytes, zero-extended)

CHECKPOINT_MAGIC = b"TIJP"
CHECKPOINT_VERSION = 1
_DTYPE_F32 = 0


def write_tensor_file(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", _DTYPE_F32))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", crc))


def read_tensor_file(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {path}") from exc
    if len(blob) < 20:
        raise DataError(f"truncated checkpoint: {path}")
    body, trailer = blob[:-8], blob[-8:]
    (stored_crc,) = struct.unpack("<Q", trailer)
    if (zlib.crc32(body) & 0xFFFFFFFF) != stored_crc:
        raise DataError(f"checkpoint CRC mismatch: {path}")
    if body[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic: {path}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}: {path}")
    (count,) = struct.unpack_from("<I", body, 8)
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    previous_name = None
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (dtype_tag,) = struct.unpack_from("<B", body, offset)
            offset += 1
            if dtype_tag != _DTYPE_F32:
                raise DataError(f"unknown dtype tag {dtype_tag} for '{name}': {path}")
            (rank,) = struct.unpack_from("<I", body, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            payload = body[offset:offset + 4 * size]
            if len(payload) != 4 * size:
                raise DataError(f"truncated tensor payload for '{name}': {path}")
            offset += 4 * size
            if previous_name is not None and name <= previous_name:
                raise DataError(f"tensor names out of order at '{name}': {path}")
            previous_name = name
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    except struct.error as exc:
        raise DataError(f"truncated checkpoint: {path}") from exc
    if offset != len(body):
        raise DataError(f"trailing bytes after tensor table: {path}")
    return tensors


def save_checkpoint(state: PretrainState, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.named_parameters().items():
        tensors[name] = p.data
    for name, arr in state.opt.m.items():
        tensors[f"optimizer.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        tensors[f"optimizer.v.{name}"] = arr
    tensors["optimizer.t"] = np.array([state.opt.t], dtype=np.float32)
    tensors["meta.step"] = np.array([state.step], dtype=np.float32)
    config_bytes = state.config.to_text().encode("utf-8")
    tensors["meta.config"] = np.frombuffer(config_bytes, dtype=np.uint8).astype(np.float32)
    write_tensor_file(path, tensors)


def load_checkpoint(path) -> PretrainState:
    tensors = read_tensor_file(path)
    if "meta.config" not in tensors:
        raise DataError(f"checkpoint lacks a config snapshot: {path}")
    config_text = bytes(int(v) for v in tensors["meta.config"]).decode("utf-8")
    config = TiJepaConfig.from_text(config_text)
    state = PretrainState.initialize(config)
    params = state.named_parameters()
    expected = set(params)
    expected.update(f"optimizer.m.{n}" for n in state.opt.m)
    expected.update(f"optimizer.v.{n}" for n in state.opt.v)
    expected.update(("optimizer.t", "meta.step", "meta.config"))
    actual = set(tensors)
    if actual != expected:
        unknown = sorted(actual - expected)
        missing = sorted(expected - actual)
        detail = []
        if unknown:
            detail.append(f"unknown tensors: {', '.join(unknown[:5])}")
        if missing:
            detail.append(f"missing tensors: {', '.join(missing[:5])}")
        raise DataError(f"checkpoint does not match model ({'; '.join(detail)}): {path}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise DataError(f"tensor '{name}' has shape {arr.shape}, expected {p.data.shape}")
        p.data[...] = arr
    for name in state.opt.m:
        state.opt.m[name][...] = tensors[f"optimizer.m.{name}"]
        state.opt.v[name][...] = tensors[f"optimizer.v.{name}"]
    state.opt.t = int(tensors["optimizer.t"][0])
    state.step = int(tensors["meta.step"][0])
    return state
