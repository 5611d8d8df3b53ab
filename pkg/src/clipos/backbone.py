"""Vision-language backbone adapters plus the two patch-path modifications.

Grids are plain tensors shaped ``(..., rows, cols, dim)``; any leading batch
or head dimensions pass through untouched.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputContractError, NumericError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class ContextConfig:
    """Neighbourhood weight and border mode for patch-context incorporation."""

    beta_ctx: float = 0.1
    padding: str = "replicate"

    def __post_init__(self):
        if not (isinstance(self.beta_ctx, (int, float)) and self.beta_ctx >= 0):
            raise ConfigError(f"must be >= 0, got {self.beta_ctx!r}", "beta_ctx")
        if self.padding not in ("replicate", "zero"):
            raise ConfigError(f"must be 'replicate' or 'zero', got {self.padding!r}", "padding")


@dataclass
class VVAttentionConfig:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"must be > 0, got {self.scale!r}", "scale")


def check_grid(grid: torch.Tensor) -> torch.Tensor:
    if not isinstance(grid, torch.Tensor) or grid.dim() < 3:
        raise InputContractError("patch grid must be a tensor shaped (..., rows, cols, dim)")
    if min(grid.shape[-3:]) < 1:
        raise InputContractError(f"patch grid has an empty axis: {tuple(grid.shape)}")
    if not torch.isfinite(grid).all():
        raise NumericError("patch grid contains non-finite values")
    return grid


def patch_context_incorporate(grid: torch.Tensor, cfg: ContextConfig) -> torch.Tensor:
    """Add ``beta_ctx`` times the 3x3 neighbourhood mean to every cell, channelwise."""
    check_grid(grid)
    if cfg.beta_ctx == 0:
        return grid.clone()
    *lead, rows, cols, dim = grid.shape
    x = grid.reshape(-1, rows, cols, dim).permute(0, 3, 1, 2)
    if cfg.padding == "replicate":
        x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    else:
        x = F.pad(x, (1, 1, 1, 1), mode="constant", value=0.0)
    # avg_pool2d over a padded map is the fixed kernel with every weight 1/9
    mean = F.avg_pool2d(x, kernel_size=3, stride=1)
    mean = mean.permute(0, 2, 3, 1).reshape(grid.shape)
    return grid + cfg.beta_ctx * mean


def vv_attention(grid: torch.Tensor, cfg: VVAttentionConfig, return_weights: bool = False):
    """Value-value self-attention over the row-major flattened grid."""
    check_grid(grid)
    *lead, rows, cols, dim = grid.shape
    tokens = grid.reshape(*lead, rows * cols, dim)
    logits = tokens @ tokens.transpose(-1, -2) * cfg.scale
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite v-v attention logits")
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ tokens).reshape(grid.shape)
    if return_weights:
        return out, weights
    return out


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm <= eps).any():
        raise NumericError("cannot normalize a zero vector")
    return x / norm


class Backbone(nn.Module):
    """Frozen image/text encoder pair.

    Subclasses fill in ``image_size``, ``grid``, ``embed_dim``, ``token_dim``,
    ``temperature``, ``native_scale`` and the encode methods.
    """

    template = "a photo of a {}."
    mean = CLIP_MEAN
    std = CLIP_STD

    def _batch(self, images: torch.Tensor):
        if images.dim() == 3:
            images, single = images.unsqueeze(0), True
        elif images.dim() == 4:
            single = False
        else:
            raise InputContractError(f"expected (C,H,W) or (B,C,H,W) image tensor, got {tuple(images.shape)}")
        expected = (3, self.image_size, self.image_size)
        if tuple(images.shape[1:]) != expected:
            raise InputContractError(f"image shape {tuple(images.shape[1:])} != expected {expected}")
        return images.to(self.dtype), single

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    def vv_config(self, scale: float | None = None) -> VVAttentionConfig:
        return VVAttentionConfig(self.native_scale if scale is None else scale)

    def encode_patches(self, images):
        raise NotImplementedError

    def patch_features(self, images, surgery=True, context=None, vv=None):
        raise NotImplementedError

    def encode_image(self, images):
        raise NotImplementedError

    def encode_prompts(self, context, class_names):
        raise NotImplementedError

    def encode_text(self, texts):
        raise NotImplementedError

    def check_vocabulary(self, words):
        raise NotImplementedError

    def template_embeddings(self, class_names) -> torch.Tensor:
        with torch.no_grad():
            return self.encode_text([self.template.format(c) for c in class_names])


def _word_seed(word: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}:{word}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def _split_words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9_\-]+", text.lower())


class ToyBackbone(Backbone):
    """Small deterministic ViT-style encoder for desk-scale runs.

    One bias-free attention block over linearly embedded patches (no CLS
    token, no positional embedding) so that a zero image maps to zero
    tokens. Words embed through a seeded hash; ``vocabulary`` restricts the
    accepted words when given. Everything runs in float64.

    The text side reads a token sequence through its last word: the prefix
    (up to ``text_len - 1`` tokens) enters through a bilinear map gated by
    that word, so one shared context moves each class embedding along its
    own directions. The map is linear in the context, which keeps prompt
    learning well conditioned at this scale.
    """

    mean = (0.0, 0.0, 0.0)
    std = (1.0, 1.0, 1.0)
    dtype = torch.float64

    def __init__(self, grid=4, patch=4, dim=16, seed=0, temperature=0.05,
                 qk_gain=0.5, text_gain=0.5, text_len=32, vocabulary=None):
        super().__init__()
        if grid < 1 or patch < 1 or dim < 1:
            raise ConfigError("grid, patch and dim must all be >= 1")
        if 3 * patch * patch < dim:
            raise ConfigError(f"dim {dim} exceeds the patch pixel count {3 * patch * patch}", "dim")
        if not temperature > 0:
            raise ConfigError(f"must be > 0, got {temperature!r}", "temperature")
        self.grid = (grid, grid)
        self.patch = patch
        self.image_size = grid * patch
        self.embed_dim = self.token_dim = dim
        self.temperature = float(temperature)
        self.native_scale = 1.0 / math.sqrt(dim)
        self.seed = seed
        self.text_len = int(text_len)
        self.vocabulary = None if vocabulary is None else frozenset(vocabulary)

        gen = torch.Generator().manual_seed(seed)
        kw = dict(generator=gen, dtype=torch.float64)
        pixel_dim = 3 * patch * patch
        basis, _ = torch.linalg.qr(torch.randn(pixel_dim, dim, **kw))
        self.register_buffer("patch_basis", basis[:, :dim].contiguous())

        def near_identity():
            return torch.eye(dim, dtype=torch.float64) + 0.1 * torch.randn(dim, dim, **kw) / math.sqrt(dim)

        self.register_buffer("w_q", qk_gain * torch.randn(dim, dim, **kw) / math.sqrt(dim))
        self.register_buffer("w_k", qk_gain * torch.randn(dim, dim, **kw) / math.sqrt(dim))
        self.register_buffer("w_v", near_identity())
        self.register_buffer("w_o", near_identity())
        self.register_buffer("w_proj", near_identity())
        slots = (self.text_len - 1) * dim
        self.register_buffer("t_gate", text_gain * torch.randn(dim, dim, slots, **kw) / math.sqrt(slots))
        self.register_buffer("t_proj", near_identity())

    # image side

    def _tokens(self, images):
        b = images.shape[0]
        g, p = self.grid[0], self.patch
        patches = images.reshape(b, 3, g, p, g, p).permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, 3 * p * p)
        return patches @ self.patch_basis

    def render(self, latent: torch.Tensor) -> torch.Tensor:
        """Inverse of the patch embedding: ``(rows, cols, dim)`` latents to a ``(3, H, W)`` image."""
        g, p = self.grid[0], self.patch
        pixels = latent.reshape(g * g, -1).to(torch.float64) @ self.patch_basis.T
        return pixels.reshape(g, g, 3, p, p).permute(2, 0, 3, 1, 4).reshape(3, g * p, g * p)

    def _reshape(self, tokens, single):
        out = tokens.reshape(tokens.shape[0], *self.grid, tokens.shape[-1])
        return out[0] if single else out

    def encode_patches(self, images):
        images, single = self._batch(images)
        values = self._tokens(images) @ self.w_v
        if not torch.isfinite(values).all():
            raise NumericError("non-finite value tokens")
        return self._reshape(values, single)

    def _original_tokens(self, images):
        x = self._tokens(images)
        q, k, v = x @ self.w_q, x @ self.w_k, x @ self.w_v
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.native_scale, dim=-1)
        return (x + attn @ v @ self.w_o) @ self.w_proj

    def patch_features(self, images, surgery=True, context=None, vv=None):
        """Joint-space patch features; ``surgery=False`` gives the unmodified path."""
        images, single = self._batch(images)
        if not surgery:
            return self._reshape(self._original_tokens(images), single)
        values = self._reshape(self._tokens(images) @ self.w_v, False)
        if context is not None:
            values = patch_context_incorporate(values, context)
        mixed = vv_attention(values, vv or self.vv_config())
        feats = mixed.reshape(mixed.shape[0], -1, self.embed_dim) @ self.w_o @ self.w_proj
        return self._reshape(feats, single)

    def encode_image(self, images):
        images, single = self._batch(images)
        pooled = self._original_tokens(images).mean(dim=1)
        if not torch.isfinite(pooled).all():
            raise NumericError("non-finite image feature")
        out = l2_normalize(pooled)
        return out[0] if single else out

    # text side

    def word_embedding(self, word: str) -> torch.Tensor:
        if self.vocabulary is not None and word not in self.vocabulary:
            raise ConfigError(f"word {word!r} is not in the toy tokenizer vocabulary")
        gen = torch.Generator().manual_seed(_word_seed(word, self.seed))
        return torch.randn(self.token_dim, generator=gen, dtype=torch.float64) / math.sqrt(self.token_dim)

    def check_vocabulary(self, words):
        for w in words:
            for part in _split_words(w):
                self.word_embedding(part)

    def _encode_sequence(self, tokens):
        if tokens.shape[0] > self.text_len:
            raise InputContractError(f"sequence of {tokens.shape[0]} tokens exceeds text_len={self.text_len}")
        last, prefix = tokens[-1], tokens[:-1].reshape(-1)
        gate = self.t_gate[..., :prefix.shape[0]]
        hidden = last + torch.einsum("j,ijk,k->i", last, gate, prefix)
        return hidden @ self.t_proj

    def _word_tokens(self, text):
        words = _split_words(text)
        if not words:
            raise InputContractError(f"prompt text {text!r} has no words")
        return torch.stack([self.word_embedding(w) for w in words])

    def encode_prompts(self, context, class_names):
        """Unnormalized embeddings of ``[ctx_1..ctx_n] classname`` for each name."""
        rows = [self._encode_sequence(torch.cat([context, self._word_tokens(name)])) for name in class_names]
        return torch.stack(rows)

    def encode_text(self, texts):
        return l2_normalize(torch.stack([self._encode_sequence(self._word_tokens(t)) for t in texts]))


class HFClipBackbone(Backbone):
    """Adapter over a ``transformers`` CLIPModel and its tokenizer.

    Layers are driven manually (pre-LN residual blocks) so the final visual
    block can be split into the original and the v-v surgery path.
    """

    def __init__(self, model, tokenizer, max_length=77):
        super().__init__()
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.max_length = max_length
        vcfg = model.config.vision_config
        self.image_size = vcfg.image_size
        g = vcfg.image_size // vcfg.patch_size
        self.grid = (g, g)
        self.heads = vcfg.num_attention_heads
        self.native_scale = (vcfg.hidden_size // self.heads) ** -0.5
        self.embed_dim = model.config.projection_dim
        self.token_dim = model.config.text_config.hidden_size
        self.temperature = float(1.0 / model.logit_scale.exp())

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    @classmethod
    def from_pretrained(cls, name_or_path, local_files_only=True):
        from transformers import CLIPModel, CLIPTokenizer

        try:
            model = CLIPModel.from_pretrained(name_or_path, local_files_only=local_files_only)
            tokenizer = CLIPTokenizer.from_pretrained(name_or_path, local_files_only=local_files_only)
        except OSError as exc:
            from .errors import ResolutionError

            raise ResolutionError(f"cannot load pretrained backbone {name_or_path!r}: {exc}") from exc
        return cls(model, tokenizer)

    @staticmethod
    def _attend(attn, x, causal=False):
        b, n, d = x.shape
        heads = attn.num_heads
        q = attn.q_proj(x).view(b, n, heads, -1).transpose(1, 2)
        k = attn.k_proj(x).view(b, n, heads, -1).transpose(1, 2)
        v = attn.v_proj(x).view(b, n, heads, -1).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) * attn.scale
        if causal:
            mask = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            logits = logits.masked_fill(mask, float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        return attn.out_proj(out.transpose(1, 2).reshape(b, n, d))

    def _block(self, layer, h, causal=False):
        h = h + self._attend(layer.self_attn, layer.layer_norm1(h), causal)
        return h + layer.mlp(layer.layer_norm2(h))

    def _pre_final(self, images):
        vm = self.model.vision_model
        h = vm.pre_layrnorm(vm.embeddings(images))
        for layer in vm.encoder.layers[:-1]:
            h = self._block(layer, h)
        return h

    def _reshape(self, tokens, single):
        out = tokens.reshape(tokens.shape[0], *self.grid, tokens.shape[-1])
        return out[0] if single else out

    def encode_patches(self, images):
        images, single = self._batch(images)
        last = self.model.vision_model.encoder.layers[-1]
        values = last.self_attn.v_proj(last.layer_norm1(self._pre_final(images)))[:, 1:]
        if not torch.isfinite(values).all():
            raise NumericError("non-finite value tokens")
        return self._reshape(values, single)

    def patch_features(self, images, surgery=True, context=None, vv=None):
        images, single = self._batch(images)
        vm = self.model.vision_model
        last = vm.encoder.layers[-1]
        h = self._pre_final(images)
        if not surgery:
            tokens = self._block(last, h)[:, 1:]
        else:
            values = self._reshape(last.self_attn.v_proj(last.layer_norm1(h))[:, 1:], False)
            if context is not None:
                values = patch_context_incorporate(values, context)
            b, rows, cols, d = values.shape
            per_head = values.reshape(b, rows, cols, self.heads, -1).permute(0, 3, 1, 2, 4)
            mixed = vv_attention(per_head, vv or self.vv_config())
            mixed = mixed.permute(0, 2, 3, 1, 4).reshape(b, rows * cols, d)
            tokens = last.self_attn.out_proj(mixed)
        feats = self.model.visual_projection(vm.post_layernorm(tokens))
        return self._reshape(feats, single)

    def encode_image(self, images):
        images, single = self._batch(images)
        vm = self.model.vision_model
        h = self._block(vm.encoder.layers[-1], self._pre_final(images))
        pooled = self.model.visual_projection(vm.post_layernorm(h[:, 0]))
        if not torch.isfinite(pooled).all():
            raise NumericError("non-finite image feature")
        out = l2_normalize(pooled)
        return out[0] if single else out

    def _ids(self, texts):
        enc = self.tokenizer(texts, padding="max_length", max_length=self.max_length,
                             truncation=True, return_tensors="pt")
        return enc["input_ids"]

    def _encode_ids(self, ids, embeds):
        tm = self.model.text_model
        pos = tm.embeddings.position_embedding(torch.arange(ids.shape[1]))
        h = embeds + pos
        for layer in tm.encoder.layers:
            h = self._block(layer, h, causal=True)
        h = tm.final_layer_norm(h)
        eot = (ids == self.tokenizer.eos_token_id).int().argmax(dim=-1)
        return self.model.text_projection(h[torch.arange(h.shape[0]), eot])

    def encode_prompts(self, context, class_names):
        n_ctx = context.shape[0]
        ids = self._ids([" ".join(["X"] * n_ctx) + " " + name + "." for name in class_names])
        embeds = self.model.text_model.embeddings.token_embedding(ids)
        embeds = torch.cat([embeds[:, :1], context.to(embeds.dtype).expand(len(class_names), -1, -1),
                            embeds[:, 1 + n_ctx:]], dim=1)
        return self._encode_ids(ids, embeds)

    def encode_text(self, texts):
        ids = self._ids(list(texts))
        embeds = self.model.text_model.embeddings.token_embedding(ids)
        return l2_normalize(self._encode_ids(ids, embeds))

    def check_vocabulary(self, words):
        unk = getattr(self.tokenizer, "unk_token_id", None)
        for w in words:
            ids = self.tokenizer(w, add_special_tokens=False)["input_ids"]
            if not ids or (unk is not None and unk in ids):
                raise ConfigError(f"word {w!r} is not in the tokenizer vocabulary")


@dataclass
class BackboneConfig:
    """``name`` is ``"toy"`` or a pretrained identifier; ``weights`` a local path."""

    name: str = "toy"
    weights: str | None = None
    grid: int = 4
    patch: int = 4
    dim: int = 16
    seed: int = 0
    temperature: float = 0.05
    vocabulary: list | None = None

    def __post_init__(self):
        for key in ("grid", "patch", "dim"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be >= 1", key)
        if not self.temperature > 0:
            raise ConfigError("must be > 0", "temperature")


def build_backbone(cfg: BackboneConfig) -> Backbone:
    if cfg.name == "toy":
        return ToyBackbone(grid=cfg.grid, patch=cfg.patch, dim=cfg.dim, seed=cfg.seed,
                           temperature=cfg.temperature, vocabulary=cfg.vocabulary)
    return HFClipBackbone.from_pretrained(cfg.weights or cfg.name)
