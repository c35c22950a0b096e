"""The inference program: an explicit step list plus executors.

Every evaluation mode (float oracle, plaintext fixed-point, two-party
shared) walks the exact same step list produced by ``build_program``,
so the op order, truncation sites, and square sites are identical by
construction. That is what makes the plaintext fixed-point run a
bit-exact oracle for the shared run under exact truncation, and what
keeps the dealer's correlation schedule aligned with the online
engine's consumption order.

Ops and their bucket for latency accounting:
  linear    patches, to_tokens, to_grid, matmul, dconv, affine, bias,
            save_residual, add_residual, mean, truncate (after linear)
  nonlinear square, truncate (after a square)
"""

from dataclasses import dataclass

import numpy as np

from xpi import ring
from xpi.model import FoldedModel, ModelConfig, QuantizedModel
from xpi.ring import RingTensor

LINEAR_OPS = frozenset(
    {
        "patches",
        "to_tokens",
        "to_grid",
        "matmul",
        "dconv",
        "affine",
        "bias",
        "save_residual",
        "add_residual",
        "mean",
        "truncate",
    }
)
NONLINEAR_OPS = frozenset({"square"})


@dataclass(frozen=True)
class Step:
    op: str
    name: str
    bucket: str = "linear"
    param: str | None = None
    site: int | None = None
    count: int | None = None  # elements consumed per image at square/truncate sites


@dataclass(frozen=True)
class Program:
    cfg: ModelConfig
    steps: tuple
    square_counts: tuple  # per-image pair demand, indexed by square site
    trunc_counts: tuple  # per-image pair demand, indexed by truncation site


def build_program(cfg: ModelConfig) -> Program:
    n, d, cm = cfg.grid, cfg.embed_dim, cfg.channel_mix_dim
    tokens = cfg.tokens
    steps = []
    square_counts = []
    trunc_counts = []

    def add(op, name, bucket="linear", param=None, count=None):
        site = None
        if op == "square":
            site = len(square_counts)
            square_counts.append(count)
        elif op == "truncate":
            site = len(trunc_counts)
            trunc_counts.append(count)
        steps.append(Step(op, name, bucket, param, site, count))

    add("patches", "input.patches")
    add("matmul", "patch_embed", param="patch_embed.weight")
    add("truncate", "patch_embed.truncate", count=tokens * d)
    add("bias", "patch_embed.add_bias", param="patch_embed.bias")
    add("to_grid", "patch_embed.to_grid")
    grid_count = d * n * n
    for i in range(cfg.depth):
        p = f"layers.{i}"
        add("save_residual", f"{p}.patch_residual.save")
        add("affine", f"{p}.pre_norm", param=f"{p}.pre_norm.scale")
        add("truncate", f"{p}.pre_norm.truncate", count=grid_count)
        add("bias", f"{p}.pre_norm.add_bias", param=f"{p}.pre_norm.bias")
        add("dconv", f"{p}.conv", param=f"{p}.conv.weight")
        add("truncate", f"{p}.conv.truncate", count=grid_count)
        add("bias", f"{p}.conv.add_bias", param=f"{p}.conv.bias")
        add("affine", f"{p}.post_norm1", param=f"{p}.post_norm1.scale")
        add("truncate", f"{p}.post_norm1.truncate", count=grid_count)
        add("bias", f"{p}.post_norm1.add_bias", param=f"{p}.post_norm1.bias")
        add("add_residual", f"{p}.patch_residual.add")
        add("save_residual", f"{p}.channel_residual.save")
        add("to_tokens", f"{p}.to_tokens")
        add("matmul", f"{p}.mix_in", param=f"{p}.mix_in.weight")
        add("truncate", f"{p}.mix_in.truncate", count=tokens * cm)
        add("bias", f"{p}.mix_in.add_bias", param=f"{p}.mix_in.bias")
        add("square", f"{p}.square", bucket="nonlinear", count=tokens * cm)
        add("truncate", f"{p}.square.truncate", bucket="nonlinear", count=tokens * cm)
        add("matmul", f"{p}.mix_out", param=f"{p}.mix_out.weight")
        add("truncate", f"{p}.mix_out.truncate", count=tokens * d)
        add("bias", f"{p}.mix_out.add_bias", param=f"{p}.mix_out.bias")
        add("to_grid", f"{p}.to_grid")
        add("affine", f"{p}.post_norm2", param=f"{p}.post_norm2.scale")
        add("truncate", f"{p}.post_norm2.truncate", count=grid_count)
        add("bias", f"{p}.post_norm2.add_bias", param=f"{p}.post_norm2.bias")
        add("add_residual", f"{p}.channel_residual.add")
    add("mean", "pool.mean")
    add("truncate", "pool.truncate", count=d)
    add("matmul", "head", param="head.weight")
    add("truncate", "head.truncate", count=cfg.num_classes)
    add("bias", "head.add_bias", param="head.bias")
    return Program(cfg, tuple(steps), tuple(square_counts), tuple(trunc_counts))


def check_purity(program: Program) -> None:
    """Assert the program's only nonlinear op kind is elementwise square."""
    for step in program.steps:
        if step.op in LINEAR_OPS:
            if step.bucket == "nonlinear" and not step.name.endswith("square.truncate"):
                raise ValueError(f"linear step {step.name!r} marked nonlinear")
        elif step.op in NONLINEAR_OPS:
            pass
        else:
            raise ValueError(f"unknown op {step.op!r} in step {step.name!r}")
    squares = [s for s in program.steps if s.op == "square"]
    if len(squares) != program.cfg.depth:
        raise ValueError(
            f"expected {program.cfg.depth} square sites, found {len(squares)}"
        )


class FloatExecutor:
    """Reference forward pass in float64; truncation is a no-op."""

    def __init__(self, folded: FoldedModel):
        self.cfg = folded.cfg
        self.params = folded.params

    def apply(self, step: Step, x, residuals: list):
        return getattr(self, "op_" + step.op)(step, x, residuals)

    def op_save_residual(self, step, x, residuals):
        residuals.append(x)
        return x

    def op_add_residual(self, step, x, residuals):
        return x + residuals.pop()

    def op_patches(self, step, x, residuals):
        cfg = self.cfg
        k = x.shape[0]
        n, p = cfg.grid, cfg.patch_size
        x = x.reshape(k, 3, n, p, n, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(k * n * n, cfg.patch_dim)

    def op_to_grid(self, step, x, residuals):
        n, d = self.cfg.grid, self.cfg.embed_dim
        k = x.shape[0] // (n * n)
        return x.reshape(k, n, n, d).transpose(0, 3, 1, 2)

    def op_to_tokens(self, step, x, residuals):
        k, d, n, _ = x.shape
        return x.transpose(0, 2, 3, 1).reshape(k * n * n, d)

    def op_matmul(self, step, x, residuals):
        return x @ self.params[step.param]

    def op_dconv(self, step, x, residuals):
        kern = self.params[step.param]
        k, d, n, _ = x.shape
        padded = np.zeros((k, d, n + 2, n + 2))
        padded[:, :, 1:-1, 1:-1] = x
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
        return np.einsum("bcijkl,ckl->bcij", win, kern)

    def op_affine(self, step, x, residuals):
        return x * self.params[step.param]

    def op_bias(self, step, x, residuals):
        return x + self.params[step.param]

    def op_square(self, step, x, residuals):
        return x * x

    def op_truncate(self, step, x, residuals):
        return x

    def op_mean(self, step, x, residuals):
        return x.mean(axis=(2, 3))


class FixedExecutor:
    """Plaintext fixed-point forward pass over the ring.

    Every multiplicative op doubles the scale; the following truncate
    step shifts back down to the model scale with the plain arithmetic
    shift. This is the oracle that the shared engine under exact
    truncation must match bit for bit.
    """

    def __init__(self, qm: QuantizedModel):
        self.cfg = qm.cfg
        self.params = qm.params
        self.frac_bits = qm.frac_bits
        self.pool_scale = ring.encode_fixed(1.0 / qm.cfg.tokens, qm.frac_bits)

    def apply(self, step: Step, x: RingTensor, residuals: list) -> RingTensor:
        return getattr(self, "op_" + step.op)(step, x, residuals)

    def op_save_residual(self, step, x, residuals):
        residuals.append(x)
        return x

    def op_add_residual(self, step, x, residuals):
        return x.add(residuals.pop())

    def op_patches(self, step, x, residuals):
        cfg = self.cfg
        k = x.shape[0]
        n, p = cfg.grid, cfg.patch_size
        x = x.reshape(k, 3, n, p, n, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(k * n * n, cfg.patch_dim)

    def op_to_grid(self, step, x, residuals):
        n, d = self.cfg.grid, self.cfg.embed_dim
        k = x.shape[0] // (n * n)
        return x.reshape(k, n, n, d).transpose(0, 3, 1, 2)

    def op_to_tokens(self, step, x, residuals):
        k, d, n, _ = x.shape
        return x.transpose(0, 2, 3, 1).reshape(k * n * n, d)

    def op_matmul(self, step, x, residuals):
        return ring.matmul(x, self.params[step.param])

    def op_dconv(self, step, x, residuals):
        return ring.depthwise_conv2d(x, self.params[step.param])

    def op_affine(self, step, x, residuals):
        return x.mul(self.params[step.param])

    def op_bias(self, step, x, residuals):
        return x.add(self.params[step.param])

    def op_square(self, step, x, residuals):
        return x.square()

    def op_truncate(self, step, x, residuals):
        return ring.truncate_plain(x, x.frac_bits - self.frac_bits)

    def op_mean(self, step, x, residuals):
        return x.sum(axis=(2, 3)).mul(self.pool_scale)


def run_program(program: Program, x, executor):
    residuals = []
    for step in program.steps:
        x = executor.apply(step, x, residuals)
    if residuals:
        raise ValueError(f"{len(residuals)} residuals left on the stack")
    return x


def forward_plain_float(folded: FoldedModel, images: np.ndarray) -> np.ndarray:
    """Float64 logits for a batch of (3, H, W) images."""
    program = build_program(folded.cfg)
    x = np.asarray(images, dtype=np.float64)
    _check_images(folded.cfg, x)
    return run_program(program, x, FloatExecutor(folded))


def forward_plain_fixed(qm: QuantizedModel, images: np.ndarray) -> RingTensor:
    """Ring logits for a batch of (3, H, W) images at the model scale."""
    program = build_program(qm.cfg)
    _check_images(qm.cfg, np.asarray(images))
    x = ring.encode_fixed(images, qm.frac_bits)
    return run_program(program, x, FixedExecutor(qm))


def _check_images(cfg: ModelConfig, images: np.ndarray) -> None:
    s = cfg.image_size
    if images.ndim != 4 or images.shape[1:] != (3, s, s):
        raise ValueError(
            f"images must have shape (batch, 3, {s}, {s}), got {images.shape}"
        )
