"""Toy SAM-shaped segmentation network with tagged parameter groups.

Architecture: patchify + linear embedding + learned positional embedding,
B pre-norm transformer blocks (single-head attention with separate q/k/v/o
projections, then a 2-layer gelu MLP, residual connections around both), a
learned default prompt embedding added to every token, and a 2-layer
per-token classifier head emitting k channels on the token grid. Mask
logits therefore live at (h/p, w/p, k); ground truth is downsampled to
match rather than logits being upsampled, and all metrics are computed at
token resolution.

Every parameter is stored as a 2-D float64 matrix (vectors as 1-row
matrices) under a path-like name and a role tag that the optimizer's
strategy assignment keys on. The classifier output layer starts at zero so
an untrained model scores all classes equally.

Parameter count in closed form (d = embed dim, p = patch, T = token count,
B = blocks, c = decoder channels, k = classes, MLP hidden = 4d):

    encoder = p^2 d + d + T d + B (12 d^2 + 9 d)
    prompt  = d
    decoder = d c + c + c k + k
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from msga.linalg import softmax_last_dim
from msga.losses import LossConfig
from msga.tape import Tape

CHECKPOINT_MAGIC = b"MSGA1"
MLP_RATIO = 4

ROLE_ATTENTION = (
    "encoder-attention-q",
    "encoder-attention-k",
    "encoder-attention-v",
    "encoder-attention-o",
)


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    patch_size: int = 4
    embed_dim: int = 16
    blocks: int = 2
    classes: int = 3
    decoder_channels: int = 16
    heads: int = 1  # fixed at desk scale; kept so the divisibility contract is checked

    def __post_init__(self) -> None:
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch_size}"
            )
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes (background + 1), got {self.classes}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")
        for name in ("patch_size", "embed_dim", "blocks", "decoder_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class ParamGroup:
    name: str
    values: np.ndarray     # always 2-D float64; vectors are 1-row matrices
    role: str
    strategy: object | None = None


@dataclass
class ModelParams:
    config: ModelConfig
    groups: list[ParamGroup] = field(default_factory=list)

    def by_name(self) -> dict[str, ParamGroup]:
        return {g.name: g for g in self.groups}

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def total_parameters(self) -> int:
        return sum(g.values.size for g in self.groups)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for the architecture above."""
    d = config.embed_dim
    p = config.patch_size
    t = config.tokens
    c = config.decoder_channels
    k = config.classes
    encoder = p * p * d + d + t * d + config.blocks * (12 * d * d + 9 * d)
    return encoder + d + (d * c + c + c * k + k)


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministically initialize all parameter groups for `config`.

    Linear weights are drawn N(0, 1/fan_in); layernorm gains start at one and
    all biases at zero. The decoder output layer (weights and bias) starts at
    zero, so logits are class-uniform until the first update.
    """
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    hidden = MLP_RATIO * d
    groups: list[ParamGroup] = []

    def lin(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))

    def add(name: str, values: np.ndarray, role: str) -> None:
        groups.append(ParamGroup(name, np.ascontiguousarray(values, dtype=np.float64), role))

    add("encoder/patch_embed/weight", lin(config.patch_size**2, d), "encoder-embed")
    add("encoder/patch_embed/bias", np.zeros((1, d)), "encoder-embed")
    add("encoder/pos_embed", rng.normal(0.0, 0.02, size=(config.tokens, d)), "encoder-embed")
    for b in range(config.blocks):
        base = f"encoder/block{b}"
        add(f"{base}/ln1/gain", np.ones((1, d)), "encoder-mlp")
        add(f"{base}/ln1/bias", np.zeros((1, d)), "encoder-mlp")
        add(f"{base}/attn/q", lin(d, d), "encoder-attention-q")
        add(f"{base}/attn/k", lin(d, d), "encoder-attention-k")
        add(f"{base}/attn/v", lin(d, d), "encoder-attention-v")
        add(f"{base}/attn/o", lin(d, d), "encoder-attention-o")
        add(f"{base}/ln2/gain", np.ones((1, d)), "encoder-mlp")
        add(f"{base}/ln2/bias", np.zeros((1, d)), "encoder-mlp")
        add(f"{base}/mlp/w1", lin(d, hidden), "encoder-mlp")
        add(f"{base}/mlp/b1", np.zeros((1, hidden)), "encoder-mlp")
        add(f"{base}/mlp/w2", lin(hidden, d), "encoder-mlp")
        add(f"{base}/mlp/b2", np.zeros((1, d)), "encoder-mlp")
    add("prompt/embedding", rng.normal(0.0, 0.02, size=(1, d)), "prompt")
    add("decoder/fc1/weight", lin(d, config.decoder_channels), "decoder")
    add("decoder/fc1/bias", np.zeros((1, config.decoder_channels)), "decoder")
    add("decoder/fc2/weight", np.zeros((config.decoder_channels, config.classes)), "decoder")
    add("decoder/fc2/bias", np.zeros((1, config.classes)), "decoder")

    params = ModelParams(config=config, groups=groups)
    assert params.total_parameters() == parameter_count(config)
    return params


def build_forward(tape: Tape, config: ModelConfig, ids: dict[str, int], image_id: int) -> int:
    """Record the forward pass on `tape`; returns the id of (tokens, k) logits."""
    d = config.embed_dim
    patches = tape.patchify(image_id, config.patch_size)
    x = tape.matmul(patches, ids["encoder/patch_embed/weight"])
    x = tape.add(x, ids["encoder/patch_embed/bias"])
    x = tape.add(x, ids["encoder/pos_embed"])
    for b in range(config.blocks):
        base = f"encoder/block{b}"
        h = tape.layernorm(x, ids[f"{base}/ln1/gain"], ids[f"{base}/ln1/bias"])
        q = tape.matmul(h, ids[f"{base}/attn/q"])
        k = tape.matmul(h, ids[f"{base}/attn/k"])
        v = tape.matmul(h, ids[f"{base}/attn/v"])
        scores = tape.scale(tape.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(d))
        ctx = tape.matmul(tape.softmax_rows(scores), v)
        x = tape.add(x, tape.matmul(ctx, ids[f"{base}/attn/o"]))
        h = tape.layernorm(x, ids[f"{base}/ln2/gain"], ids[f"{base}/ln2/bias"])
        h = tape.gelu(tape.add(tape.matmul(h, ids[f"{base}/mlp/w1"]), ids[f"{base}/mlp/b1"]))
        h = tape.add(tape.matmul(h, ids[f"{base}/mlp/w2"]), ids[f"{base}/mlp/b2"])
        x = tape.add(x, h)
    prompt = tape.embed_lookup(ids["prompt/embedding"], np.zeros(config.tokens, dtype=np.int64))
    x = tape.add(x, prompt)
    h = tape.gelu(tape.add(tape.matmul(x, ids["decoder/fc1/weight"]), ids["decoder/fc1/bias"]))
    return tape.add(tape.matmul(h, ids["decoder/fc2/weight"]), ids["decoder/fc2/bias"])


def _leaf_ids(tape: Tape, params: ModelParams) -> dict[str, int]:
    return {g.name: tape.leaf(g.values) for g in params.groups}


def forward(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Run the model on one image; returns (h', w', k) mask logits."""
    cfg = params.config
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_h, cfg.image_w):
        raise ValueError(f"image shape {image.shape} does not match config "
                         f"({cfg.image_h}, {cfg.image_w})")
    tape = Tape()
    ids = _leaf_ids(tape, params)
    out = build_forward(tape, cfg, ids, tape.leaf(image))
    logits = tape.value(out).reshape(cfg.grid_h, cfg.grid_w, cfg.classes)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("forward produced non-finite logits")
    return logits


def build_loss_tape(
    params: ModelParams,
    image: np.ndarray,
    labels_grid: np.ndarray,
    loss_config: LossConfig,
) -> tuple[Tape, dict[str, int], int, int, int]:
    """Tape for one training example: forward plus the combined loss.

    `labels_grid` is the already-downsampled (h', w') label map. Returns
    (tape, name->leaf id, ce id, dice id, loss id) so the caller can read the
    logged loss components straight off the tape.
    """
    cfg = params.config
    tape = Tape()
    ids = _leaf_ids(tape, params)
    logits = build_forward(tape, cfg, ids, tape.leaf(np.asarray(image, dtype=np.float64)))
    flat_labels = np.asarray(labels_grid, dtype=np.int64).reshape(-1)
    ce = tape.softmax_ce(logits, flat_labels)
    dice = tape.soft_dice(logits, flat_labels, loss_config.dice_smooth)
    lam = loss_config.ce_weight
    loss = tape.add(tape.scale(ce, lam), tape.scale(dice, 1.0 - lam))
    return tape, ids, ce, dice, loss


def postprocess(m: np.ndarray) -> np.ndarray:
    """Label map from mask logits: channel-wise argmax of the softmax.

    Softmax is monotone per fiber, so this equals a plain argmax; ties break
    toward the lowest class index.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3:
        raise ValueError(f"mask logits must be (h, w, k), got shape {m.shape}")
    return np.argmax(softmax_last_dim(m), axis=-1)


# ---------------------------------------------------------------------------
# checkpoint container: magic, then per group
#   name length (u32 LE), name bytes, rows (u32 LE), cols (u32 LE),
#   row-major float64 little-endian values


def save_checkpoint(params: ModelParams, path: str) -> None:
    blob = bytearray(CHECKPOINT_MAGIC)
    for g in params.groups:
        name = g.name.encode("utf-8")
        rows, cols = g.values.shape
        blob += struct.pack("<I", len(name)) + name
        blob += struct.pack("<II", rows, cols)
        blob += np.ascontiguousarray(g.values, dtype="<f8").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:5]!r}")
    pos = len(CHECKPOINT_MAGIC)
    out: list[tuple[str, np.ndarray]] = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError(f"{path}: truncated at byte {pos}")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 8 > len(data):
            raise ValueError(f"{path}: truncated at byte {pos}")
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated at byte {pos}")
        values = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(rows, cols)
        pos += nbytes
        out.append((name, values.astype(np.float64)))
    return out


def restore_checkpoint(params: ModelParams, path: str) -> ModelParams:
    """Load a checkpoint into a freshly initialized ModelParams, matched by name."""
    stored = dict(load_checkpoint(path))
    if set(stored) != {g.name for g in params.groups}:
        missing = sorted({g.name for g in params.groups} ^ set(stored))
        raise ValueError(f"{path}: group names do not match the model config: {missing}")
    for g in params.groups:
        if stored[g.name].shape != g.values.shape:
            raise ValueError(
                f"{path}: {g.name} has shape {stored[g.name].shape}, expected {g.values.shape}"
            )
        g.values = stored[g.name]
    return params


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy of values; strategies are shared (they are frozen records)."""
    return ModelParams(
        config=params.config,
        groups=[replace(g, values=g.values.copy()) for g in params.groups],
    )
