"""Training harness and CLI.

Trains a toy MLP or a single-block attention classifier on a synthetic
Gaussian-cluster task, in full or mixed precision, and writes one CSV row per
step: loss, loss scale, gradient finiteness, analytic activation bytes, and
wall time.  Runs are bit-reproducible for a fixed config (wall time aside).

The attention model keeps its softmax and layernorm as full-precision
islands, which is what makes the mixed-precision run's activation footprint
land near, but not exactly at, half of the full-precision run's.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .dtypes import F16, BF16, F32, I32
from .optim import adam_init, optimizer_update
from .precision import LossScaling, filter_value_and_grad, force_full_precision, half_precision
from .tensors import Tensor, tensor


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 2)."""


PRECISIONS = ("f32", "f16", "bf16")
MODELS = ("mlp", "attention")


@dataclass
class RunConfig:
    precision: str = "f32"
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    model: str = "mlp"
    feature_dim: int = 16
    num_heads: int = 4
    layer_widths: list = field(default_factory=list)  # derived for mlp if empty
    num_classes: int = 2
    lr: float = 1e-2
    loss_scale_init: float = 2.0**15
    growth_interval: int = 2000
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    out_path: str | None = None
    debug_checksums: bool = False

    def __post_init__(self):
        if not self.layer_widths:
            self.layer_widths = [self.feature_dim, self.feature_dim, self.feature_dim,
                                 self.num_classes]

    def validate(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}")
        for name in ("steps", "batch_size", "feature_dim", "num_heads", "num_classes",
                     "growth_interval"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.model == "attention" and self.feature_dim % self.num_heads != 0:
            raise ConfigError("feature_dim must be divisible by num_heads")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loss_scale_init <= 0:
            raise ConfigError("loss-scale-init must be positive")
        if not self.growth_factor > 1:
            raise ConfigError("growth-factor must be > 1")
        if not 0 < self.backoff_factor < 1:
            raise ConfigError("backoff-factor must be in (0, 1)")
        if any(w <= 0 for w in self.layer_widths) or len(self.layer_widths) < 2:
            raise ConfigError("layer widths must be at least two positive extents")
        if self.model == "mlp":
            if self.layer_widths[0] != self.feature_dim:
                raise ConfigError("first layer width must equal feature_dim")
            if self.layer_widths[-1] != self.num_classes:
                raise ConfigError("last layer width must equal num_classes")


@dataclass
class StepRecord:
    step: int
    loss: float
    scale: float
    grads_finite: bool
    activation_bytes: int
    wall_time_s: float
    param_checksum: str | None = None


# ---------------------------------------------------------------------------
# Synthetic task: well-separated Gaussian clusters, one per class.  The
# cluster geometry is a fixed constant of the task; the seed only drives
# sampling, so every step of a run sees the same classification problem.
# ---------------------------------------------------------------------------

def _cluster_centers(num_classes: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(1234)
    centers = rng.standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    return (centers * 6.0).astype(np.float32)


def synth_data(seed, batch_size: int, num_classes: int = 2, dim: int = 16):
    """One deterministic batch: float32 inputs, int32 labels."""
    centers = _cluster_centers(num_classes, dim)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=batch_size)
    x = centers[labels] + rng.standard_normal((batch_size, dim))
    return tensor(x, F32), tensor(labels, I32)


# ---------------------------------------------------------------------------
# Models.
# ---------------------------------------------------------------------------

def _linear_init(rng, fan_in: int, fan_out: int):
    w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
    return {"w": tensor(w, F32), "b": tensor(np.zeros(fan_out), F32)}


def build_model(cfg: RunConfig):
    """Deterministic float32 parameter tree for the configured model."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    if cfg.model == "mlp":
        widths = cfg.layer_widths
        layers = [_linear_init(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        return {"layers": layers}
    f = cfg.feature_dim
    return {
        "embed": _linear_init(rng, f, f),
        "attn": {
            "ln_gain": tensor(np.ones(f), F32),
            "ln_bias": tensor(np.zeros(f), F32),
            "q": _linear_init(rng, f, f),
            "k": _linear_init(rng, f, f),
            "v": _linear_init(rng, f, f),
            "o": _linear_init(rng, f, f),
        },
        "num_heads": cfg.num_heads,
        "ffn": {
            "lift": _linear_init(rng, f, 4 * f),
            "drop": _linear_init(rng, 4 * f, f),
        },
        "head": _linear_init(rng, f, cfg.num_classes),
    }


def mlp_forward(params, x: Tensor) -> Tensor:
    z = x
    layers = params["layers"]
    for i, layer in enumerate(layers):
        z = z @ layer["w"] + layer["b"]
        if i < len(layers) - 1:
            z = T.relu(z)
    return z


def attention_forward(params, x: Tensor) -> Tensor:
    """Single attention block over the batch-as-token-set, then a classifier.

    The layernorm and softmax run as full-precision islands; everything else
    inherits the precision of the (possibly half-precision) inputs/params.
    """
    heads = params["num_heads"]
    attn = params["attn"]
    n, f = x.shape
    head_dim = f // heads

    z = x @ params["embed"]["w"] + params["embed"]["b"]

    ln = force_full_precision(
        lambda t: T.layernorm(t, attn["ln_gain"], attn["ln_bias"]), z.dtype)
    zn = ln(z)

    def split(t):  # (n, f) -> (heads, n, head_dim)
        return T.transpose(T.reshape(t, (n, heads, head_dim)), (1, 0, 2))

    qs = split(zn @ attn["q"]["w"] + attn["q"]["b"])
    ks = split(zn @ attn["k"]["w"] + attn["k"]["b"])
    vs = split(zn @ attn["v"]["w"] + attn["v"]["b"])

    scores = (qs @ T.transpose(ks, (0, 2, 1))) / math.sqrt(head_dim)
    probs = force_full_precision(T.softmax, scores.dtype)(scores, axis=-1)
    mixed = probs @ vs  # (heads, n, head_dim)

    merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, f))
    outputs = merged @ attn["o"]["w"] + attn["o"]["b"]
    z = outputs + z

    ffn = params["ffn"]
    hidden = T.gelu(z @ ffn["lift"]["w"] + ffn["lift"]["b"])
    z = z + (hidden @ ffn["drop"]["w"] + ffn["drop"]["b"])

    return z @ params["head"]["w"] + params["head"]["b"]


def forward_fn(model_kind: str):
    return mlp_forward if model_kind == "mlp" else attention_forward


def classification_loss(model_kind: str):
    fwd = forward_fn(model_kind)

    def loss(params, batch):
        logits = fwd(params, batch["x"])
        return T.cross_entropy(logits, batch["y"])

    return loss


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------

def param_checksum(model) -> str:
    """Deterministic digest of every float/int tensor leaf (bit-exact)."""
    h = hashlib.sha256()
    for path, leaf in _all_tensor_leaves(model):
        h.update(path.encode())
        h.update(leaf.dtype.value.encode())
        h.update(str(leaf.shape).encode())
        h.update(np.ascontiguousarray(leaf.payload).tobytes())
    return h.hexdigest()[:16]


def _all_tensor_leaves(t):
    out = []

    def rec(node, path):
        if isinstance(node, dict):
            for k, v in node.items():
                rec(v, path + (k,))
        elif isinstance(node, (list, tuple)):
            for i, v in enumerate(node):
                rec(v, path + (i,))
        elif isinstance(node, Tensor):
            out.append((".".join(str(p) for p in path), node))

    rec(t, ())
    return out


def _step_seed(seed: int, step: int):
    return np.random.SeedSequence((seed, 1 + step))


def fit(cfg: RunConfig):
    """Run the configured training loop; returns (records, final model)."""
    cfg.validate()
    half = BF16 if cfg.precision == "bf16" else F16
    mixed = cfg.precision != "f32"
    with half_precision(half):
        model = build_model(cfg)
        opt_state = adam_init(model, cfg.lr)
        scaling = LossScaling(
            loss_scale=float(cfg.loss_scale_init),
            growth_factor=cfg.growth_factor,
            backoff_factor=cfg.backoff_factor,
            growth_interval=cfg.growth_interval,
        )
        loss = classification_loss(cfg.model)
        records = []
        bytes_box = []
        hook = lambda tape: bytes_box.append(tape.activation_bytes())
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            x, y = synth_data(_step_seed(cfg.seed, step), cfg.batch_size,
                              cfg.num_classes, cfg.feature_dim)
            batch = {"x": x, "y": y}
            res = filter_value_and_grad(loss, scaling, use_mixed_precision=mixed,
                                        tape_hook=hook)(model, batch)
            model, opt_state = optimizer_update(model, opt_state, res.grads,
                                                res.grads_finite)
            wall = time.perf_counter() - t0
            records.append(StepRecord(
                step=step,
                loss=float(res.value.item()),
                scale=float(scaling.loss_scale),
                grads_finite=res.grads_finite,
                activation_bytes=bytes_box[-1],
                wall_time_s=wall,
                param_checksum=param_checksum(model) if cfg.debug_checksums else None,
            ))
            scaling = res.scaling
    return records, model


def train(cfg: RunConfig) -> list[StepRecord]:
    """Run the configured training loop and return one record per step."""
    return fit(cfg)[0]


def evaluate_accuracy(cfg: RunConfig, model, n: int = 512) -> float:
    """Classification accuracy on a held-out batch, evaluated in float32."""
    x, y = synth_data(np.random.SeedSequence((cfg.seed, 0x0E7A1)), n,
                      cfg.num_classes, cfg.feature_dim)
    logits = forward_fn(cfg.model)(model, x)
    pred = np.argmax(logits.payload, axis=1)
    return float((pred == y.payload).mean())


# ---------------------------------------------------------------------------
# CSV output & CLI.
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["step", "loss", "scale", "grads_finite", "activation_bytes", "wall_time_s"]


def write_csv(records: list[StepRecord], path: str, debug_checksums: bool = False):
    columns = CSV_COLUMNS + (["param_checksum"] if debug_checksums else [])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            row = [r.step, repr(r.loss), repr(r.scale), int(r.grads_finite),
                   r.activation_bytes, repr(r.wall_time_s)]
            if debug_checksums:
                row.append(r.param_checksum)
            writer.writerow(row)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mpsim-bench",
        description="Train a toy model in full or mixed precision and record "
                    "per-step metrics to CSV.")
    p.add_argument("--precision", choices=PRECISIONS, default="f32")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", choices=MODELS, default="mlp")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--loss-scale-init", type=float, default=2.0**15)
    p.add_argument("--growth-interval", type=int, default=2000)
    p.add_argument("--growth-factor", type=float, default=2.0)
    p.add_argument("--backoff-factor", type=float, default=0.5)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--debug-checksums", action="store_true",
                   help="append a per-step parameter checksum column")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(
        precision=args.precision,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        model=args.model,
        feature_dim=args.feature_dim,
        num_heads=args.num_heads,
        lr=args.lr,
        loss_scale_init=args.loss_scale_init,
        growth_interval=args.growth_interval,
        growth_factor=args.growth_factor,
        backoff_factor=args.backoff_factor,
        out_path=args.out,
        debug_checksums=args.debug_checksums,
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    records = train(cfg)
    try:
        write_csv(records, cfg.out_path, cfg.debug_checksums)
    except OSError as exc:
        print(f"cannot write {cfg.out_path}: {exc}", file=sys.stderr)
        return 3
    final = records[-1]
    skipped = sum(1 for r in records if not r.grads_finite)
    print(f"{cfg.model}/{cfg.precision}: {cfg.steps} steps, final loss {final.loss:.6g}, "
          f"final scale {final.scale:g}, skipped {skipped}, "
          f"activations {final.activation_bytes} B -> {cfg.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
