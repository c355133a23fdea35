"""Residual CNN classifiers: text configs, parameter init, forward passes,
freeze masks, and directory checkpoints.

A model is a flat list of layer specs plus a named parameter store. Layer
shapes are validated when the model is built, so a config that does not
chain fails before any arithmetic runs. Forward passes are recorded on a
:class:`~divegest.tensor.Tape` when gradients are needed and run the same
kernels either way.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from divegest import gten
from divegest import tensor as T
from divegest.dataset import ClassVocab
from divegest.tensor import Node, ShapeError, Tape

LAYER_KINDS = ("conv", "batch-norm-lite", "relu", "maxpool",
               "global-avg-pool", "dense", "residual-block")

FREEZE_MODES = ("feature-extraction", "fine-tuning", "all-frozen")

TINY_RESNET_CONFIG = """\
# tiny-resnet: 32x32 RGB in, 17-way head.
# Two stages of two residual blocks, widths 16/32, downsampling stem.
input c=3 h=32 w=32
conv out=16 kernel=3 stride=2 pad=1
batch-norm-lite
relu
maxpool window=2 stride=2
residual-block out=16 stride=1
residual-block out=16 stride=1
residual-block out=32 stride=2
residual-block out=32 stride=1
global-avg-pool
dense out=17
"""


class ConfigError(ValueError):
    """Config text fails to parse or its layer shapes do not chain."""


class CheckpointError(RuntimeError):
    """Checkpoint directory is incomplete or built from a different config."""


@dataclass
class LayerSpec:
    kind: str
    attrs: dict[str, int]
    line: int  # 1-based config line, for error messages


@dataclass
class ResidualBlockSpec:
    """Resolved geometry of one skip-connection block."""

    channels_in: int
    channels_out: int
    stride: int
    projection: bool  # 1x1 conv on the skip path when shapes differ


def parse_config(text: str) -> tuple[tuple[int, int, int], list[LayerSpec]]:
    """Parse ``kind key=value ...`` lines into an input shape and layer list."""
    input_shape: Optional[tuple[int, int, int]] = None
    layers: list[LayerSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        attrs: dict[str, int] = {}
        for item in parts[1:]:
            if "=" not in item:
                raise ConfigError(f"line {lineno}: expected key=value, got {item!r}")
            key, val = item.split("=", 1)
            try:
                attrs[key] = int(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} must be an integer, got {val!r}") from None
        if kind == "input":
            if input_shape is not None:
                raise ConfigError(f"line {lineno}: duplicate input declaration")
            try:
                input_shape = (attrs["c"], attrs["h"], attrs["w"])
            except KeyError as missing:
                raise ConfigError(f"line {lineno}: input requires c, h and w (missing {missing})") from None
            continue
        if kind not in LAYER_KINDS:
            raise ConfigError(f"line {lineno}: unknown layer kind {kind!r}")
        layers.append(LayerSpec(kind, attrs, lineno))
    if input_shape is None:
        raise ConfigError("config must declare 'input c=.. h=.. w=..' before any layer")
    if not layers:
        raise ConfigError("config declares no layers")
    return input_shape, layers


def canonical_config(text: str) -> str:
    """Comment- and whitespace-insensitive form used for digests."""
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(" ".join(line.split()))
    return "\n".join(lines) + "\n"


def config_digest(text: str) -> str:
    return hashlib.sha256(canonical_config(text).encode("utf-8")).hexdigest()


def _he_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ModelGraph:
    """Built classifier: layer plan, parameter store, freeze mask, vocabulary.

    Construct with :func:`build_model`. The parameter store maps unique
    names to f64 arrays; the freeze mask covers exactly those names.
    """

    def __init__(self, config_text: str, input_shape, layers, vocab: ClassVocab, seed: int):
        self.config_text = config_text
        self.input_shape = input_shape
        self.layers = layers
        self.vocab = vocab
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.freeze: dict[str, bool] = {}
        self.blocks: dict[int, ResidualBlockSpec] = {}
        self._build()

    # -- construction ------------------------------------------------------

    def _add_param(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = np.ascontiguousarray(value, dtype=np.float64)
        self.freeze[name] = False

    def _build(self) -> None:
        rng = np.random.default_rng(self.seed)
        c, h, w = self.input_shape
        prev_desc = "input"
        for i, spec in enumerate(self.layers):
            tag = f"L{i:02d}.{spec.kind}"
            desc = f"layer {i} ({spec.kind}, line {spec.line})"
            a = spec.attrs
            if "in" in a:
                provided = c if spec.kind != "dense" else c * h * w
                if a["in"] != provided:
                    raise ConfigError(
                        f"{desc} expects in={a['in']} but {prev_desc} provides {provided}")
            if spec.kind == "conv":
                out = self._require(a, "out", desc)
                k = a.get("kernel", 3)
                stride = a.get("stride", 1)
                pad = a.get("pad", 0)
                if k > h + 2 * pad or k > w + 2 * pad:
                    raise ConfigError(f"{desc}: kernel {k} exceeds padded input {h}x{w} from {prev_desc}")
                self._add_param(f"{tag}.weight", _he_init(rng, (out, c, k, k), c * k * k))
                c, h, w = out, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
            elif spec.kind == "batch-norm-lite":
                self._add_param(f"{tag}.gamma", np.ones(c))
                self._add_param(f"{tag}.beta", np.zeros(c))
            elif spec.kind == "relu":
                pass
            elif spec.kind == "maxpool":
                window = a.get("window", 2)
                stride = a.get("stride", window)
                if window > h or window > w:
                    raise ConfigError(f"{desc}: window {window} exceeds input {h}x{w} from {prev_desc}")
                h, w = (h - window) // stride + 1, (w - window) // stride + 1
            elif spec.kind == "global-avg-pool":
                h, w = 1, 1
            elif spec.kind == "dense":
                out = self._require(a, "out", desc)
                n = c * h * w
                self._add_param(f"{tag}.weight", _he_init(rng, (out, n), n))
                self._add_param(f"{tag}.bias", np.zeros(out))
                c, h, w = out, 1, 1
            elif spec.kind == "residual-block":
                out = self._require(a, "out", desc)
                stride = a.get("stride", 1)
                block = ResidualBlockSpec(c, out, stride, projection=(c != out or stride != 1))
                self.blocks[i] = block
                self._add_param(f"{tag}.conv1.weight", _he_init(rng, (out, c, 3, 3), c * 9))
                self._add_param(f"{tag}.bn1.gamma", np.ones(out))
                self._add_param(f"{tag}.bn1.beta", np.zeros(out))
                # zero-init: the branch contributes nothing until trained,
                # so a fresh block is the identity (or a bare projection)
                self._add_param(f"{tag}.conv2.weight", np.zeros((out, out, 3, 3)))
                self._add_param(f"{tag}.bn2.gamma", np.ones(out))
                self._add_param(f"{tag}.bn2.beta", np.zeros(out))
                if block.projection:
                    self._add_param(f"{tag}.proj.weight", _he_init(rng, (out, c, 1, 1), c))
                    self._add_param(f"{tag}.bnp.gamma", np.ones(out))
                    self._add_param(f"{tag}.bnp.beta", np.zeros(out))
                c, h, w = out, (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"{desc} reduces spatial size to {h}x{w}")
            prev_desc = desc
        last = self.layers[-1]
        if last.kind != "dense":
            raise ConfigError(f"final layer must be dense, got {last.kind!r}")
        if c != len(self.vocab):
            raise ConfigError(
                f"final dense layer must have {len(self.vocab)} units for the class vocabulary, got {c}")
        self.output_units = c

    @staticmethod
    def _require(attrs: dict, key: str, desc: str) -> int:
        if key not in attrs:
            raise ConfigError(f"{desc}: missing required attribute {key!r}")
        return attrs[key]

    # -- forward -----------------------------------------------------------

    def param_leaves(self, tape: Tape, trainable: bool) -> dict[str, Node]:
        """One tape leaf per parameter; grad-requiring unless frozen or inference."""
        return {
            name: tape.leaf(value, requires_grad=trainable and not self.freeze[name])
            for name, value in self.params.items()
        }

    def forward_nodes(self, tape: Tape, x: Node,
                      leaves: Optional[dict[str, Node]] = None) -> Node:
        """Apply every layer to a (B, C, H, W) input node; returns logits node."""
        if x.value.ndim != 4 or tuple(x.value.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"forward: expected input shape (B, {', '.join(map(str, self.input_shape))}), "
                f"got {x.value.shape}")
        if leaves is None:
            leaves = self.param_leaves(tape, trainable=False)
        out = x
        for i, spec in enumerate(self.layers):
            tag = f"L{i:02d}.{spec.kind}"
            a = spec.attrs
            if spec.kind == "conv":
                out = T.conv2d(out, leaves[f"{tag}.weight"],
                               stride=a.get("stride", 1), padding=a.get("pad", 0))
            elif spec.kind == "batch-norm-lite":
                out = T.channel_affine(out, leaves[f"{tag}.gamma"], leaves[f"{tag}.beta"])
            elif spec.kind == "relu":
                out = T.relu(out)
            elif spec.kind == "maxpool":
                window = a.get("window", 2)
                out = T.pool(out, "max", window=window, stride=a.get("stride", window))
            elif spec.kind == "global-avg-pool":
                out = T.pool(out, "global_avg")
            elif spec.kind == "dense":
                out = T.dense(T.flatten(out), leaves[f"{tag}.weight"], leaves[f"{tag}.bias"])
            elif spec.kind == "residual-block":
                out = self._residual(tape, out, tag, self.blocks[i], leaves)
        return out

    def _residual(self, tape: Tape, x: Node, tag: str, block: ResidualBlockSpec,
                  leaves: dict[str, Node]) -> Node:
        branch = T.conv2d(x, leaves[f"{tag}.conv1.weight"], stride=block.stride, padding=1)
        branch = T.channel_affine(branch, leaves[f"{tag}.bn1.gamma"], leaves[f"{tag}.bn1.beta"])
        branch = T.relu(branch)
        branch = T.conv2d(branch, leaves[f"{tag}.conv2.weight"], stride=1, padding=1)
        branch = T.channel_affine(branch, leaves[f"{tag}.bn2.gamma"], leaves[f"{tag}.bn2.beta"])
        if block.projection:
            skip = T.conv2d(x, leaves[f"{tag}.proj.weight"], stride=block.stride, padding=0)
            skip = T.channel_affine(skip, leaves[f"{tag}.bnp.gamma"], leaves[f"{tag}.bnp.beta"])
        else:
            skip = x
        return T.add(branch, skip)

    # -- inference conveniences ---------------------------------------------

    def logits(self, batch: np.ndarray) -> np.ndarray:
        tape = Tape()
        return self.forward_nodes(tape, tape.leaf(batch)).value

    def probs_batch(self, batch: np.ndarray) -> np.ndarray:
        """Softmax class probabilities for a (B, C, H, W) batch."""
        return T.softmax_values(self.logits(batch))

    def class_prob_batch(self, batch: np.ndarray, target: int) -> np.ndarray:
        """Softmax probability of ``target`` for each image in the batch."""
        return self.probs_batch(batch)[:, target]

    def class_prob_grad_batch(self, batch: np.ndarray, target: int):
        """Per-image (probability, d(probability)/d(input)) for ``target``.

        Rows are independent, so the batch shares one backward pass through
        the sum of the per-row target probabilities.
        """
        tape = Tape()
        x = tape.leaf(batch, requires_grad=True)
        probs = T.softmax(self.forward_nodes(tape, x))
        score = T.column_sum(probs, target)
        tape.backward(score)
        return probs.value[:, target].copy(), x.grad


def build_model(config_text: str, *, seed: int = 0, vocab: ClassVocab | None = None) -> ModelGraph:
    """Build a model from config text; parameter init is a pure function of seed."""
    vocab = vocab or ClassVocab()
    input_shape, layers = parse_config(config_text)
    return ModelGraph(config_text, input_shape, layers, vocab, seed)


def forward(model: ModelGraph, batch: np.ndarray) -> np.ndarray:
    """Logits (B, K) for a (B, C, H, W) batch, no gradients recorded."""
    return model.logits(T.as_tensor(batch))


def predict(model: ModelGraph, image: np.ndarray) -> tuple[int, str, float]:
    """(class index, class name, softmax confidence) for one (C, H, W) image.

    Ties break to the lowest class index.
    """
    img = T.as_tensor(image)
    if img.ndim != 3:
        raise ShapeError(f"predict: expected one (C, H, W) image, got shape {img.shape}")
    probs = model.probs_batch(img[None])[0]
    idx = int(np.argmax(probs))
    return idx, model.vocab[idx], float(probs[idx])


def freeze_mask(model: ModelGraph, mode: str) -> dict[str, bool]:
    """Set the freeze mask in place and return it.

    feature-extraction freezes everything except the dense head;
    fine-tuning trains everything; all-frozen is inference only.
    """
    if mode not in FREEZE_MODES:
        raise ValueError(f"unknown freeze mode {mode!r}, expected one of {FREEZE_MODES}")
    for name in model.params:
        if mode == "fine-tuning":
            model.freeze[name] = False
        elif mode == "all-frozen":
            model.freeze[name] = True
        else:
            model.freeze[name] = ".dense." not in name
    return model.freeze


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: ModelGraph, out_dir, *, epoch: int, lr: float, seed: int) -> Path:
    """Write ``config.digest``, ``meta`` and one GTEN file per parameter."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.digest").write_text(config_digest(model.config_text) + "\n", encoding="utf-8")
    (out / "meta").write_text(
        f"epoch={epoch}\nlr={lr!r}\nseed={seed}\n", encoding="utf-8")
    for name, value in model.params.items():
        gten.save(out / f"{name}.gten", value)
    return out


def load_checkpoint(ckpt_dir, config_text: str, *, vocab: ClassVocab | None = None
                    ) -> tuple[ModelGraph, dict[str, str]]:
    """Rebuild a model from config text and restore its parameters bit-exactly."""
    ckpt = Path(ckpt_dir)
    digest_file = ckpt / "config.digest"
    if not digest_file.is_file():
        raise CheckpointError(f"{ckpt}: missing config.digest")
    stored = digest_file.read_text(encoding="utf-8").strip()
    actual = config_digest(config_text)
    if stored != actual:
        raise CheckpointError(
            f"{ckpt}: config digest mismatch (checkpoint {stored[:12]}…, config {actual[:12]}…)")
    meta: dict[str, str] = {}
    for line in (ckpt / "meta").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            meta[key] = val
    model = build_model(config_text, seed=int(meta.get("seed", "0")), vocab=vocab)
    for name in model.params:
        path = ckpt / f"{name}.gten"
        if not path.is_file():
            raise CheckpointError(f"{ckpt}: missing parameter file {path.name}")
        value = gten.load(path)
        if value.shape != model.params[name].shape:
            raise CheckpointError(
                f"{ckpt}: parameter {name} has shape {value.shape}, model expects {model.params[name].shape}")
        model.params[name] = value
    return model, meta
