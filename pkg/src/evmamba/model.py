"""The dual-branch classifier: frame patches through one VSS stack, voxel
trajectory tokens through another, fused and pooled into category logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .events import EventStream
from .nn import LayerNorm, Linear, Module, SGD, name_parameters
from .representation import stack_frames
from .ssm import VSSBlock
from .tensor import (
    Tensor, add, clip, concat, log, log_softmax, mul, reshape, sigmoid, sum_,
)
from .voxel_scan import scan_stream

LOG_EPS = 1e-7


@dataclass
class ModelInput:
    """Model-ready arrays for one sample or a batch (leading batch axis).

    ``frames`` (T', 2, H', W') normalized counts; ``tokens`` (K, L, d_v);
    ``mask`` (K, L) bool.
    """

    frames: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray

    @classmethod
    def batch(cls, items):
        return cls(np.stack([i.frames for i in items]),
                   np.stack([i.tokens for i in items]),
                   np.stack([i.mask for i in items]))


def prepare_input(stream: EventStream, cfg: ModelConfig):
    """Build normalized frames and voxel tokens for one stream.

    Frames are divided by their per-frame peak; tokens by the largest
    absolute entry of the sample. Both fall back to a divisor of 1.
    """
    dtype = np.dtype(cfg.dtype)
    if len(stream):
        fs = stack_frames(stream, cfg.frames, cfg.input_height, cfg.input_width)
        frames = fs.normalized(dtype)
    else:
        frames = np.zeros((cfg.frames, 2, cfg.input_height, cfg.input_width), dtype)
    scan = scan_stream(stream, cfg.clips, cfg.tokens, cfg.eps_min, cfg.max_voxels,
                       cfg.delta, cfg.s_min, cfg.micro, cfg.cells_across)
    tokens = scan.tokens.tokens
    peak = np.abs(tokens).max() if tokens.size else 0
    tokens = (tokens / (peak if peak > 0 else 1)).astype(dtype)
    return ModelInput(frames, tokens, scan.tokens.mask)


def patchify(frames, patch):
    """(B, T', C, H, W) -> (B*T', H/p, W/p, C*p*p) non-overlapping patches."""
    B, T, C, H, W = frames.shape
    if H % patch or W % patch:
        raise ValueError(f"frame size {H}x{W} not divisible by patch {patch}")
    x = frames.reshape(B, T, C, H // patch, patch, W // patch, patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B * T, H // patch, W // patch, C * patch * patch)


class EVMamba(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        use_frames = cfg.representation in ("both", "frame")
        use_voxels = cfg.representation in ("both", "voxel")
        gated = cfg.fusion in ("b-matrix", "a-matrix") and use_frames and use_voxels
        inner = cfg.inner_dim or cfg.dim // 2
        self.patch_embed = None
        self.spatial = []
        self.voxel_embed = None
        self.temporal = []
        self.fuse_proj = None
        if use_frames:
            self.patch_embed = Linear(2 * cfg.patch ** 2, cfg.dim, rng, bias=False, dtype=dtype)
            self.spatial = [
                VSSBlock(cfg.dim, cfg.state_size, rng, inner, dtype=dtype,
                         gate=cfg.fusion if gated else None, norm_eps=cfg.norm_eps)
                for _ in range(cfg.depth)
            ]
        if use_voxels:
            self.voxel_embed = Linear(cfg.descriptor_dim, cfg.dim, rng, bias=False, dtype=dtype)
            if use_frames:
                # start the dense voxel branch silent so it cannot swamp the
                # sparse frame signal before either has learned anything
                self.voxel_embed.weight.data[...] = 0
            self.temporal = [
                VSSBlock(cfg.dim, cfg.state_size, rng, inner, dtype=dtype,
                         stats_only=cfg.fusion if gated and i == cfg.depth - 1 else False,
                         norm_eps=cfg.norm_eps)
                for i in range(cfg.depth)
            ]
        if cfg.fusion == "concat" and use_frames and use_voxels:
            self.fuse_proj = Linear(2 * cfg.dim, cfg.dim, rng, dtype=dtype)
        self.head_norm = LayerNorm(cfg.dim, cfg.norm_eps, dtype)
        self.head = Linear(cfg.dim, cfg.categories, rng, dtype=dtype)
        name_parameters(self)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    # -- embeddings -------------------------------------------------------

    def embed_frames(self, frames):
        """(B, T', 2, H', W') -> (B*T', H_p, W_p, dim)."""
        x = patchify(np.asarray(frames, dtype=self.dtype), self.cfg.patch)
        return self.patch_embed(Tensor(x))

    def embed_voxels(self, tokens, mask):
        """(B, K, L, d_v) -> (B, K, L, dim) with masked positions zeroed."""
        tokens = np.asarray(tokens, dtype=self.dtype)
        if tokens.shape[-1] != self.cfg.descriptor_dim:
            raise ValueError(
                f"descriptor dim {tokens.shape[-1]} != configured {self.cfg.descriptor_dim}"
            )
        x = self.voxel_embed(Tensor(tokens))
        return mul(x, np.asarray(mask, dtype=self.dtype)[..., None])

    # -- branches ---------------------------------------------------------

    def _spatial_pool(self, s, batch):
        T = s.shape[0] // batch
        return reshape(s, (batch, T) + s.shape[1:]).mean(axis=1)

    def _temporal_pool(self, v, mask):
        m = np.asarray(mask, dtype=self.dtype)[..., None]
        count = m.sum(axis=(1, 2))
        count[count == 0] = 1
        total = sum_(mul(v, m), axis=(1, 2))
        return mul(total, 1.0 / count)

    def spatial_branch(self, frames):
        """Frames through the spatial stack, averaged over the frame axis."""
        batch = frames.shape[0]
        s = self.embed_frames(frames)
        for block in self.spatial:
            s = block(s)
        return self._spatial_pool(s, batch)

    def temporal_branch(self, tokens, mask):
        """Voxel token grid through the temporal stack, masked mean-pooled."""
        v = self.embed_voxels(tokens, mask)
        for block in self.temporal:
            v = block(v)
        return self._temporal_pool(v, mask)

    def _gated_branches(self, x):
        batch = x.frames.shape[0]
        s = self.embed_frames(x.frames)
        v = self.embed_voxels(x.tokens, x.mask)
        for sb, tb in zip(self.spatial, self.temporal):
            v, stats = tb(v, groups=batch, stats_mode=self.cfg.fusion)
            s = sb(s, groups=batch, partner=stats)
        return self._spatial_pool(s, batch)

    # -- head -------------------------------------------------------------

    def fuse(self, spatial, temporal):
        """Combine a (B, H_p, W_p, d) map with a (B, d) vector."""
        mode = self.cfg.fusion
        if spatial is None:
            return reshape(temporal, (temporal.shape[0], 1, 1, temporal.shape[1]))
        if temporal is None or mode in ("b-matrix", "a-matrix"):
            return spatial
        B, d = temporal.shape
        tiled = reshape(temporal, (B, 1, 1, d))
        if mode == "add":
            return spatial + tiled
        if mode == "concat":
            tiled = tiled + np.zeros((1,) + spatial.shape[1:3] + (1,), dtype=self.dtype)
            return spatial + self.fuse_proj(concat([spatial, tiled], axis=-1))
        raise ValueError(f"unknown fusion mode {mode!r}")

    def classify(self, fused):
        return self.head(self.head_norm(fused.mean(axis=(1, 2))))

    def forward(self, x: ModelInput):
        cfg = self.cfg
        if cfg.representation == "both" and cfg.fusion in ("b-matrix", "a-matrix"):
            return self.classify(self._gated_branches(x))
        spatial = self.spatial_branch(x.frames) if self.spatial else None
        temporal = self.temporal_branch(x.tokens, x.mask) if self.temporal else None
        return self.classify(self.fuse(spatial, temporal))


# -- losses ---------------------------------------------------------------------

def _check_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if ((labels < 0) | (labels >= n)).any():
        raise ValueError(f"label out of range [0, {n})")
    return labels


def softmax_cross_entropy(logits, labels):
    """Mean of -log(max(softmax(logits)[label], eps)) over the batch."""
    B, n = logits.shape
    labels = _check_labels(labels, n)
    lp = log_softmax(logits, axis=-1)[np.arange(B), labels]
    lp = clip(lp, np.log(LOG_EPS), 0.0)
    return -lp.mean()


def eq5_binary_cross_entropy(logits, labels):
    """Per-category binary cross-entropy on sigmoid scores, one-hot targets,
    averaged over categories and batch."""
    B, n = logits.shape
    labels = _check_labels(labels, n)
    y = np.zeros((B, n), dtype=logits.dtype)
    y[np.arange(B), labels] = 1
    p = sigmoid(logits)
    lp = log(clip(p, LOG_EPS, 1.0))
    lq = log(clip(1.0 - p, LOG_EPS, 1.0))
    return -(mul(lp, y) + mul(lq, 1.0 - y)).mean()


def loss_fn(logits, labels, mode="softmax-ce"):
    if mode == "softmax-ce":
        return softmax_cross_entropy(logits, labels)
    if mode == "eq5-bce":
        return eq5_binary_cross_entropy(logits, labels)
    raise ValueError(f"unknown loss mode {mode!r}")


def make_optimizer(model, lr, weight_decay, momentum=0.0, clip_norm=0.0):
    return SGD(model.parameters(), lr=lr, weight_decay=weight_decay, momentum=momentum,
               clip_norm=clip_norm)


def train_step(model, optimizer, batch: ModelInput, labels):
    """One forward/backward/update. Returns the batch loss."""
    logits = model(batch)
    loss = loss_fn(logits, labels, model.cfg.loss)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    optimizer.zero_grad()
    return float(loss.data)
