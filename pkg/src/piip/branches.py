"""Per-branch backbones: patch embedding and block stacks.

Transformer branches are standard pre-norm blocks (token + attention, then
token + MLP); attention is either global over all tokens or windowed over
non-overlapping square windows. Convolutional branches use depthwise-7x7
blocks with channel LayerNorm, 4x pointwise expansion and a zero-initialized
residual scale, so they start as the identity.

A branch forward is exposed in *segments* (block ranges) so interaction
points can be spliced between blocks; composing segments is exactly
equivalent to one uninterrupted forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .config import Arch, AttentionKind, BranchSpec, ffn_hidden
from .params import ParamSpec

Params = dict[str, Var]


@dataclass
class BranchState:
    """Tokens of one branch mid-forward, plus their grid geometry."""

    tokens: Var  # [grid_h * grid_w, dim]
    grid_h: int
    grid_w: int
    dim: int
    branch_id: int


class PatchEmbed:
    """Patchify conv + learned positional embedding (transformer branches)."""

    def __init__(self, prefix: str, spec: BranchSpec) -> None:
        self.prefix = prefix
        self.patch = spec.patch_size
        self.dim = spec.dim
        g = spec.resolution // spec.patch_size
        self.base_grid = (g, g)

    def declare(self, ps: ParamSpec) -> None:
        p, d = self.patch, self.dim
        ps.declare(f"{self.prefix}.kernel", (p, p, 3, d), "trunc_normal")
        ps.declare(f"{self.prefix}.bias", (d,), "zeros")
        ps.declare(f"{self.prefix}.pos", (*self.base_grid, d), "trunc_normal")

    def forward(self, P: Params, image: Var) -> tuple[Var, int, int]:
        grid = ad.conv2d_op(
            image, P[f"{self.prefix}.kernel"], P[f"{self.prefix}.bias"], stride=self.patch
        )  # [gh, gw, D]
        gh, gw, _ = grid.shape
        pos = P[f"{self.prefix}.pos"]
        if pos.shape[:2] != (gh, gw):
            pos = ad.bilinear_resize_op(pos, gh, gw)
        grid = ad.add(grid, pos)
        return ad.reshape(grid, (gh * gw, self.dim)), gh, gw


class ConvStem:
    """Patchify conv + channel LayerNorm (convolutional branches, no pos)."""

    def __init__(self, prefix: str, spec: BranchSpec) -> None:
        self.prefix = prefix
        self.patch = spec.patch_size
        self.dim = spec.dim

    def declare(self, ps: ParamSpec) -> None:
        p, d = self.patch, self.dim
        ps.declare(f"{self.prefix}.kernel", (p, p, 3, d), "trunc_normal")
        ps.declare(f"{self.prefix}.bias", (d,), "zeros")
        ps.declare(f"{self.prefix}.ln_g", (d,), "ones")
        ps.declare(f"{self.prefix}.ln_b", (d,), "zeros")

    def forward(self, P: Params, image: Var) -> tuple[Var, int, int]:
        grid = ad.conv2d_op(
            image, P[f"{self.prefix}.kernel"], P[f"{self.prefix}.bias"], stride=self.patch
        )
        gh, gw, _ = grid.shape
        grid = ad.layer_norm_op(grid, P[f"{self.prefix}.ln_g"], P[f"{self.prefix}.ln_b"])
        return ad.reshape(grid, (gh * gw, self.dim)), gh, gw


def _attend(q: Var, k: Var, v: Var, head_dim: int) -> Var:
    """Scaled dot-product over the last two axes: [..., N, hd] -> [..., N, hd]."""
    q = ad.scale(q, 1.0 / math.sqrt(head_dim))
    scores = ad.matmul(q, ad.transpose(k, tuple(range(k.value.ndim - 2)) + (-1, -2)))
    weights = ad.softmax_op(scores)
    return ad.matmul(weights, v)


class TransformerBlock:
    def __init__(self, prefix: str, spec: BranchSpec) -> None:
        self.prefix = prefix
        self.dim = spec.dim
        self.heads = spec.heads
        self.head_dim = spec.dim // spec.heads
        self.hidden = ffn_hidden(spec.dim, spec.mlp_ratio)
        self.windowed = spec.attention_mode is AttentionKind.WINDOWED
        self.window_side = int(round(spec.window_tokens**0.5)) if self.windowed else 0

    def declare(self, ps: ParamSpec) -> None:
        d, h = self.dim, self.hidden
        pre = self.prefix
        ps.declare(f"{pre}.ln1_g", (d,), "ones")
        ps.declare(f"{pre}.ln1_b", (d,), "zeros")
        ps.declare(f"{pre}.qkv_w", (d, 3 * d), "trunc_normal")
        ps.declare(f"{pre}.qkv_b", (3 * d,), "zeros")
        ps.declare(f"{pre}.proj_w", (d, d), "trunc_normal")
        ps.declare(f"{pre}.proj_b", (d,), "zeros")
        ps.declare(f"{pre}.ln2_g", (d,), "ones")
        ps.declare(f"{pre}.ln2_b", (d,), "zeros")
        ps.declare(f"{pre}.mlp1_w", (d, h), "trunc_normal")
        ps.declare(f"{pre}.mlp1_b", (h,), "zeros")
        ps.declare(f"{pre}.mlp2_w", (h, d), "trunc_normal")
        ps.declare(f"{pre}.mlp2_b", (d,), "zeros")

    def _global_attention(self, P: Params, x: Var) -> Var:
        n, d = x.shape
        qkv = ad.linear_op(x, P[f"{self.prefix}.qkv_w"], P[f"{self.prefix}.qkv_b"])  # [N, 3D]
        qkv = ad.reshape(qkv, (n, 3, self.heads, self.head_dim))
        qkv = ad.transpose(qkv, (1, 2, 0, 3))  # [3, heads, N, hd]
        q = ad.take_index(qkv, 0, 0)
        k = ad.take_index(qkv, 1, 0)
        v = ad.take_index(qkv, 2, 0)
        out = _attend(q, k, v, self.head_dim)  # [heads, N, hd]
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, d))
        return ad.linear_op(out, P[f"{self.prefix}.proj_w"], P[f"{self.prefix}.proj_b"])

    def _windowed_attention(self, P: Params, x: Var, gh: int, gw: int) -> Var:
        side = self.window_side
        n, d = x.shape
        grid = ad.reshape(x, (gh, gw, d))
        pad_h = (-gh) % side
        pad_w = (-gw) % side
        if pad_h or pad_w:
            grid = ad.pad_grid(grid, pad_h, pad_w)
        hp, wp = gh + pad_h, gw + pad_w
        nh, nw = hp // side, wp // side
        win = ad.reshape(grid, (nh, side, nw, side, d))
        win = ad.transpose(win, (0, 2, 1, 3, 4))  # [nh, nw, side, side, D]
        tokens = ad.reshape(win, (nh * nw * side * side, d))
        qkv = ad.linear_op(tokens, P[f"{self.prefix}.qkv_w"], P[f"{self.prefix}.qkv_b"])
        t = side * side
        qkv = ad.reshape(qkv, (nh * nw, t, 3, self.heads, self.head_dim))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # [3, nW, heads, T, hd]
        q = ad.take_index(qkv, 0, 0)
        k = ad.take_index(qkv, 1, 0)
        v = ad.take_index(qkv, 2, 0)
        out = _attend(q, k, v, self.head_dim)  # [nW, heads, T, hd]
        out = ad.transpose(out, (0, 2, 1, 3))  # [nW, T, heads, hd]
        out = ad.reshape(out, (nh, nw, side, side, d))
        out = ad.transpose(out, (0, 2, 1, 3, 4))  # [nh, side, nw, side, D]
        out = ad.reshape(out, (hp, wp, d))
        if pad_h or pad_w:
            out = ad.crop_grid(out, gh, gw)
        out = ad.reshape(out, (n, d))
        return ad.linear_op(out, P[f"{self.prefix}.proj_w"], P[f"{self.prefix}.proj_b"])

    def forward(self, P: Params, state: BranchState) -> BranchState:
        pre = self.prefix
        x = state.tokens
        h = ad.layer_norm_op(x, P[f"{pre}.ln1_g"], P[f"{pre}.ln1_b"])
        if self.windowed:
            attn = self._windowed_attention(P, h, state.grid_h, state.grid_w)
        else:
            attn = self._global_attention(P, h)
        x = ad.add(x, attn)
        m = ad.layer_norm_op(x, P[f"{pre}.ln2_g"], P[f"{pre}.ln2_b"])
        m = ad.linear_op(m, P[f"{pre}.mlp1_w"], P[f"{pre}.mlp1_b"])
        m = ad.gelu_op(m)
        m = ad.linear_op(m, P[f"{pre}.mlp2_w"], P[f"{pre}.mlp2_b"])
        x = ad.add(x, m)
        return BranchState(x, state.grid_h, state.grid_w, state.dim, state.branch_id)


class ConvBlock:
    """Depthwise 7x7 -> channel LN -> 4x pointwise MLP, zero-scaled residual."""

    KERNEL = 7
    EXPAND = 4

    def __init__(self, prefix: str, spec: BranchSpec) -> None:
        self.prefix = prefix
        self.dim = spec.dim

    def declare(self, ps: ParamSpec) -> None:
        d = self.dim
        pre = self.prefix
        k = self.KERNEL
        ps.declare(f"{pre}.dw_k", (k, k, d), "trunc_normal")
        ps.declare(f"{pre}.dw_b", (d,), "zeros")
        ps.declare(f"{pre}.ln_g", (d,), "ones")
        ps.declare(f"{pre}.ln_b", (d,), "zeros")
        ps.declare(f"{pre}.pw1_w", (d, self.EXPAND * d), "trunc_normal")
        ps.declare(f"{pre}.pw1_b", (self.EXPAND * d,), "zeros")
        ps.declare(f"{pre}.pw2_w", (self.EXPAND * d, d), "trunc_normal")
        ps.declare(f"{pre}.pw2_b", (d,), "zeros")
        ps.declare(f"{pre}.scale", (d,), "zeros")

    def forward(self, P: Params, state: BranchState) -> BranchState:
        pre = self.prefix
        gh, gw, d = state.grid_h, state.grid_w, state.dim
        x = state.tokens
        grid = ad.reshape(x, (gh, gw, d))
        y = ad.depthwise_conv_op(grid, P[f"{pre}.dw_k"], P[f"{pre}.dw_b"])
        y = ad.layer_norm_op(y, P[f"{pre}.ln_g"], P[f"{pre}.ln_b"])
        y = ad.linear_op(y, P[f"{pre}.pw1_w"], P[f"{pre}.pw1_b"])
        y = ad.gelu_op(y)
        y = ad.linear_op(y, P[f"{pre}.pw2_w"], P[f"{pre}.pw2_b"])
        y = ad.mul(y, P[f"{pre}.scale"])
        out = ad.add(x, ad.reshape(y, (gh * gw, d)))
        return BranchState(out, gh, gw, d, state.branch_id)


class Branch:
    """One pyramid branch: embedding plus ``depth`` blocks."""

    def __init__(self, index: int, spec: BranchSpec) -> None:
        self.index = index  # 1-based
        self.spec = spec
        prefix = f"branch{index}"
        if spec.arch is Arch.TRANSFORMER:
            self.embed: PatchEmbed | ConvStem = PatchEmbed(f"{prefix}.embed", spec)
            self.blocks: list[TransformerBlock | ConvBlock] = [
                TransformerBlock(f"{prefix}.block{j + 1}", spec) for j in range(spec.depth)
            ]
        else:
            self.embed = ConvStem(f"{prefix}.embed", spec)
            self.blocks = [ConvBlock(f"{prefix}.block{j + 1}", spec) for j in range(spec.depth)]

    def declare(self, ps: ParamSpec) -> None:
        self.embed.declare(ps)
        for block in self.blocks:
            block.declare(ps)

    def embed_forward(self, P: Params, image: Var) -> BranchState:
        if image.shape[0] != self.spec.resolution or image.shape[1] != self.spec.resolution:
            image = ad.bilinear_resize_op(image, self.spec.resolution, self.spec.resolution)
        tokens, gh, gw = self.embed.forward(P, image)
        return BranchState(tokens, gh, gw, self.spec.dim, self.index)

    def segment(self, P: Params, state: BranchState, from_block: int, to_block: int) -> BranchState:
        """Apply blocks [from_block, to_block), 0-based over the stack."""
        if not 0 <= from_block <= to_block <= len(self.blocks):
            raise ValueError(
                f"segment [{from_block}, {to_block}) out of range for depth {len(self.blocks)}"
            )
        for j in range(from_block, to_block):
            state = self.blocks[j].forward(P, state)
        return state
