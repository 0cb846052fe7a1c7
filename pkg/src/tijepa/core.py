"""Fusion modules, the masked-patch predictor, and the prediction objective.

Two structurally identical text-to-image fusion modules exist per model: the
online one trained by gradient descent and a target twin updated only by EMA.
Patch tokens are the attention queries and text tokens the keys/values, so
the fused output stays per-patch and can be indexed by block masks. The
predictor fills masked grid positions with one shared learnable token plus
positional encoding and reads its outputs back at those slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import INIT_STD, ImageEncoder, TextEncoder, sincos_pos_2d, tokenize_text
from .errors import ShapeError
from .masking import MaskSet
from .numerics import (
    DEFAULT_DTYPE,
    AttentionParams,
    Tensor,
    abs_val,
    add,
    attention,
    check_gradients,
    concat_rows,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    mul,
    no_grad,
    scale,
    sub,
    sum_all,
)


@dataclass(frozen=True)
class CrossAttnConfig:
    layers: int
    heads: int
    hidden: int
    mlp_ratio: int = 4
    # set when an encoder's width differs from the fusion width
    patch_dim: int | None = None
    text_dim: int | None = None


# cross-attention projections start 10x louder than the usual 0.02 so the
# text pathway carries usable signal from step one; with frozen random
# encoders a quiet init leaves nothing for its gradients to latch onto
CROSS_ATTN_INIT_STD = 10 * INIT_STD


def param_count(cfg: CrossAttnConfig) -> int:
    """Exact learned-parameter count of one fusion module at ``cfg``.

    Accepts layers=0 as the degenerate projections-only case even though a
    real module requires at least one layer.
    """
    h = cfg.hidden
    mlp_hidden = cfg.mlp_ratio * h
    attn = 4 * (h * h + h)
    norms = 3 * 2 * h
    mlp = h * mlp_hidden + mlp_hidden + mlp_hidden * h + h
    per_layer = 2 * attn + norms + mlp
    total = cfg.layers * per_layer
    if cfg.patch_dim is not None and cfg.patch_dim != h:
        total += cfg.patch_dim * h + h        # patch tokens in
        total += h * cfg.patch_dim + cfg.patch_dim  # fused tokens out
    if cfg.text_dim is not None and cfg.text_dim != h:
        total += cfg.text_dim * h + h
    return total


class FusionLayer:
    """Pre-norm self-attention, cross-attention, and MLP, all residual."""

    def __init__(self, cfg: CrossAttnConfig, rng: np.random.Generator,
                 requires_grad: bool, dtype):
        h = cfg.hidden
        hidden = cfg.mlp_ratio * h
        self.heads = cfg.heads

        def w(shape):
            return Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad, dtype=dtype)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad, dtype=dtype)

        def ones(n):
            return Tensor(np.ones(n), requires_grad, dtype=dtype)

        self.ln_self_g, self.ln_self_b = ones(h), zeros(h)
        self.self_attn = AttentionParams.create(h, rng, requires_grad, dtype)
        self.ln_cross_g, self.ln_cross_b = ones(h), zeros(h)
        self.cross_attn = AttentionParams.create(h, rng, requires_grad, dtype,
                                                 std=CROSS_ATTN_INIT_STD)
        self.ln_mlp_g, self.ln_mlp_b = ones(h), zeros(h)
        self.mlp_w1, self.mlp_b1 = w((h, hidden)), zeros(hidden)
        self.mlp_w2, self.mlp_b2 = w((hidden, h)), zeros(h)

    def __call__(self, tokens: Tensor, text: Tensor) -> Tensor:
        normed = layer_norm(tokens, self.ln_self_g, self.ln_self_b)
        tokens = add(tokens, attention(normed, normed, self.self_attn, self.heads))
        normed = layer_norm(tokens, self.ln_cross_g, self.ln_cross_b)
        tokens = add(tokens, attention(normed, text, self.cross_attn, self.heads))
        h = linear(gelu(linear(layer_norm(tokens, self.ln_mlp_g, self.ln_mlp_b),
                               self.mlp_w1, self.mlp_b1)), self.mlp_w2, self.mlp_b2)
        return add(tokens, h)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.ln_self.gain": self.ln_self_g, f"{prefix}.ln_self.bias": self.ln_self_b,
            f"{prefix}.ln_cross.gain": self.ln_cross_g, f"{prefix}.ln_cross.bias": self.ln_cross_b,
            f"{prefix}.ln_mlp.gain": self.ln_mlp_g, f"{prefix}.ln_mlp.bias": self.ln_mlp_b,
            f"{prefix}.mlp.w1": self.mlp_w1, f"{prefix}.mlp.b1": self.mlp_b1,
            f"{prefix}.mlp.w2": self.mlp_w2, f"{prefix}.mlp.b2": self.mlp_b2,
        }
        out.update(self.self_attn.named(f"{prefix}.self_attn"))
        out.update(self.cross_attn.named(f"{prefix}.cross_attn"))
        return out


class FusionModule:
    """Stack of fusion layers, with input/output projections when widths differ."""

    def __init__(self, cfg: CrossAttnConfig, rng: np.random.Generator,
                 requires_grad: bool = True, dtype=DEFAULT_DTYPE):
        if cfg.layers < 1:
            raise ShapeError("a fusion module needs at least one layer")
        if cfg.hidden % cfg.heads != 0:
            raise ShapeError(f"hidden {cfg.hidden} not divisible by heads {cfg.heads}")
        self.cfg = cfg
        h = cfg.hidden

        def proj(d_in, d_out):
            w = Tensor(rng.normal(0.0, INIT_STD, (d_in, d_out)), requires_grad, dtype=dtype)
            b = Tensor(np.zeros(d_out), requires_grad, dtype=dtype)
            return w, b

        self.patch_in = proj(cfg.patch_dim, h) if cfg.patch_dim not in (None, h) else None
        self.text_in = proj(cfg.text_dim, h) if cfg.text_dim not in (None, h) else None
        self.patch_out = proj(h, cfg.patch_dim) if cfg.patch_dim not in (None, h) else None
        self.layers = [FusionLayer(cfg, rng, requires_grad, dtype) for _ in range(cfg.layers)]

    def __call__(self, patch_reps: Tensor, text_reps: Tensor) -> Tensor:
        tokens = linear(patch_reps, *self.patch_in) if self.patch_in else patch_reps
        text = linear(text_reps, *self.text_in) if self.text_in else text_reps
        if tokens.shape[-1] != self.cfg.hidden or text.shape[-1] != self.cfg.hidden:
            raise ShapeError("fusion input width does not match module hidden size")
        for layer in self.layers:
            tokens = layer(tokens, text)
        return linear(tokens, *self.patch_out) if self.patch_out else tokens

    def named_parameters(self, prefix: str = "fusion") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for label, pair in (("patch_in", self.patch_in), ("text_in", self.text_in),
                            ("patch_out", self.patch_out)):
            if pair:
                out[f"{prefix}.{label}.weight"], out[f"{prefix}.{label}.bias"] = pair
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layers.{i}"))
        return out

    def clone(self, requires_grad: bool = False) -> "FusionModule":
        """Bitwise copy, e.g. to initialize the EMA target twin."""
        rng = np.random.default_rng(0)  # layout only; data is overwritten below
        dtype = next(iter(self.named_parameters().values())).dtype
        twin = FusionModule(self.cfg, rng, requires_grad, dtype)
        src, dst = self.named_parameters("m"), twin.named_parameters("m")
        for name, tensor in dst.items():
            tensor.data[...] = src[name].data
        return twin


def fuse(module: FusionModule, patch_reps: Tensor, text_reps: Tensor) -> Tensor:
    """Run patch tokens through the fusion stack conditioned on text tokens."""
    return module(patch_reps, text_reps)


@dataclass(frozen=True)
class PredictorConfig:
    depth: int
    heads: int
    width: int

    def validate(self) -> None:
        if self.depth < 0:
            raise ShapeError("predictor depth must be >= 0")
        if self.width % self.heads != 0:
            raise ShapeError(f"predictor width {self.width} not divisible by heads {self.heads}")
        if self.width % 4 != 0:
            raise ShapeError("predictor width must be divisible by 4 for 2-D positions")


class Predictor:
    """Shallow transformer over context tokens plus position-tagged mask tokens."""

    def __init__(self, cfg: PredictorConfig, fused_dim: int, rng: np.random.Generator,
                 requires_grad: bool = True, dtype=DEFAULT_DTYPE):
        cfg.validate()
        from .encoders import TransformerBlock  # local to avoid cycle at import time

        self.cfg = cfg
        self.fused_dim = fused_dim
        self.dtype = dtype
        w = cfg.width
        self.in_w = Tensor(rng.normal(0.0, INIT_STD, (fused_dim, w)), requires_grad, dtype=dtype)
        self.in_b = Tensor(np.zeros(w), requires_grad, dtype=dtype)
        self.mask_token = Tensor(rng.normal(0.0, INIT_STD, (w,)), requires_grad, dtype=dtype)
        self.blocks = [TransformerBlock(w, cfg.heads, rng, requires_grad, dtype)
                       for _ in range(cfg.depth)]
        self.out_w = Tensor(rng.normal(0.0, INIT_STD, (w, fused_dim)), requires_grad, dtype=dtype)
        self.out_b = Tensor(np.zeros(fused_dim), requires_grad, dtype=dtype)

    def predict(self, context_reps: Tensor, context_positions, target_positions,
                grid: tuple[int, int]) -> Tensor:
        ctx_idx = [int(i) for i in context_positions]
        tgt_idx = [int(i) for i in target_positions]
        if set(ctx_idx) & set(tgt_idx):
            raise ShapeError("target positions overlap context positions")
        if context_reps.shape[0] != len(ctx_idx):
            raise ShapeError("context rows do not match context positions")
        pos = sincos_pos_2d(grid[0], grid[1], self.cfg.width, self.dtype)
        ctx = add(linear(context_reps, self.in_w, self.in_b), Tensor(pos[ctx_idx], dtype=self.dtype))
        masks = add(Tensor(pos[tgt_idx], dtype=self.dtype), self.mask_token)
        tokens = concat_rows([ctx, masks])
        for block in self.blocks:
            tokens = block(tokens)
        slots = gather_rows(tokens, range(len(ctx_idx), len(ctx_idx) + len(tgt_idx)))
        return linear(slots, self.out_w, self.out_b)

    __call__ = predict

    def named_parameters(self, prefix: str = "predictor") -> dict[str, Tensor]:
        out = {
            f"{prefix}.in.weight": self.in_w, f"{prefix}.in.bias": self.in_b,
            f"{prefix}.mask_token": self.mask_token,
            f"{prefix}.out.weight": self.out_w, f"{prefix}.out.bias": self.out_b,
        }
        for i, block in enumerate(self.blocks):
            out.update(block.named_parameters(f"{prefix}.blocks.{i}"))
        return out


def predict(context_reps: Tensor, context_positions, target_positions,
            predictor: Predictor, grid: tuple[int, int]) -> Tensor:
    return predictor.predict(context_reps, context_positions, target_positions, grid)


# ---------------------------------------------------------------------------
# forward paths


def make_targets(image: np.ndarray, caption, masks: MaskSet, image_encoder: ImageEncoder,
                 text_encoder: TextEncoder, target_fusion: FusionModule,
                 return_full: bool = False):
    """Fused full-image representations sliced per target block, gradient-free."""
    with no_grad():
        ids = tokenize_text(caption, text_encoder.cfg.max_text_len)
        text_reps = text_encoder.encode(ids)
        image_reps = image_encoder.encode(image)
        fused = fuse(target_fusion, image_reps, text_reps)
        blocks = [gather_rows(fused, block.indices()) for block in masks.targets]
    if return_full:
        return blocks, fused
    return blocks


def make_context(image: np.ndarray, caption, masks: MaskSet, image_encoder: ImageEncoder,
                 text_encoder: TextEncoder, fusion: FusionModule) -> Tensor:
    """Fused representations of the visible context patches; gradients flow."""
    if not masks.context:
        raise ShapeError("context index set is empty")
    ids = tokenize_text(caption, text_encoder.cfg.max_text_len)
    text_reps = text_encoder.encode(ids)
    context_reps = image_encoder.encode(image, visible=masks.context)
    return fuse(fusion, context_reps, text_reps)


def prediction_loss(predictions, targets, kind: str = "l2") -> Tensor:
    """Per-block distances between predictions and targets, averaged over blocks.

    ``l2`` (default) sums squared differences; ``l1`` sums absolute ones.
    """
    if len(predictions) != len(targets):
        raise ShapeError(f"{len(predictions)} prediction blocks vs {len(targets)} target blocks")
    if not predictions:
        raise ShapeError("no prediction blocks")
    if kind not in ("l2", "l1"):
        raise ShapeError(f"unknown loss kind '{kind}'")
    total = None
    for pred, tgt in zip(predictions, targets):
        if pred.shape != tgt.shape:
            raise ShapeError(f"prediction block {pred.shape} vs target block {tgt.shape}")
        diff = sub(pred, tgt)
        term = sum_all(mul(diff, diff)) if kind == "l2" else sum_all(abs_val(diff))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(predictions))


# ---------------------------------------------------------------------------
# composite gradient checks (the primitive suite lives in numerics)


def fusion_gradient_check(seed: int = 0) -> float:
    """Finite-difference check of one fusion layer stack in float64."""
    rng = np.random.default_rng(seed)
    cfg = CrossAttnConfig(layers=1, heads=2, hidden=8)
    module = FusionModule(cfg, rng, requires_grad=True, dtype=np.float64)
    patches = Tensor(rng.uniform(-1, 1, (2, 8)), requires_grad=True, dtype=np.float64)
    text = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.uniform(-1, 1, (2, 8)), dtype=np.float64)
    params = [patches, text] + list(module.named_parameters().values())
    return check_gradients(lambda: sum_all(mul(fuse(module, patches, text), weights)), params)


def pipeline_gradient_check(seed: int = 0, max_coords: int = 16) -> float:
    """Finite-difference check of the composed prediction loss in float64.

    Targets are precomputed constants (they are gradient-free in training),
    so the check covers the context, predictor, and loss paths, including
    unfrozen encoders.
    """
    from .encoders import EncoderConfig
    from .masking import sample_masks

    rng = np.random.default_rng(seed)
    enc_cfg = EncoderConfig(patch_size=4, embed_dim=8, depth=1, heads=2,
                            max_text_len=8, frozen=False)
    image_encoder = ImageEncoder(enc_cfg, rng, dtype=np.float64)
    text_encoder = TextEncoder(enc_cfg, rng, dtype=np.float64)
    fusion = FusionModule(CrossAttnConfig(layers=1, heads=2, hidden=8), rng,
                          requires_grad=True, dtype=np.float64)
    target_fusion = fusion.clone(requires_grad=False)
    predictor = Predictor(PredictorConfig(depth=1, heads=2, width=8), 8, rng,
                          requires_grad=True, dtype=np.float64)

    image = rng.uniform(0, 1, (3, 8, 8))
    caption = "ab"
    masks = sample_masks((2, 2), 1, (0.85, 1.0), (0.15, 0.3), (1.0, 1.0),
                         np.random.default_rng(seed + 1))
    targets = make_targets(image, caption, masks, image_encoder, text_encoder, target_fusion)

    def build():
        context = make_context(image, caption, masks, image_encoder, text_encoder, fusion)
        preds = [predict(context, masks.context, block.indices(), predictor, (2, 2))
                 for block in masks.targets]
        return prediction_loss(preds, targets)

    params: dict[str, Tensor] = {}
    params.update(image_encoder.named_parameters())
    params.update(text_encoder.named_parameters())
    params.update(fusion.named_parameters())
    params.update(predictor.named_parameters())
    ordered = [params[name] for name in sorted(params)]
    return check_gradients(build, ordered, max_coords=max_coords)
