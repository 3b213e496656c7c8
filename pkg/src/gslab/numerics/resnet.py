"""MicroResNet: a small residual CNN with optional triplet, SimCLR and
classifier heads.

Layout: 3x3 stem conv (+bias) -> ReLU -> stages of two basic residual blocks
(conv-BN-ReLU-conv-BN + shortcut, ReLU) -> global average pooling. Every stage
after the first halves the spatial size with a stride-2 first conv and uses
a 1x1 stride-2 conv + BN projection on the shortcut.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from gslab.errors import DimensionError, FiniteValueError, StateError
from gslab.numerics import layers as L


@dataclass
class ModelConfig:
    widths: tuple = (8, 16, 32)
    in_channels: int = 3
    input_side: int = 32
    blocks_per_stage: int = 2
    num_classes: Optional[int] = None
    embed_dim: Optional[int] = None  # triplet head output
    proj_dim: Optional[int] = None  # SimCLR head output
    proj_hidden: Optional[int] = None  # defaults to the feature width
    classifier_input: str = "features"  # or "embedding" (on top of the triplet head)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.classifier_input not in ("features", "embedding"):
            raise DimensionError(f"unknown classifier_input {self.classifier_input!r}")
        if self.classifier_input == "embedding" and self.num_classes and not self.embed_dim:
            raise DimensionError("classifier on the embedding needs a triplet head (embed_dim)")

    @property
    def total_stride(self) -> int:
        return 2 ** (len(self.widths) - 1)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    features: np.ndarray
    embedding: Optional[np.ndarray] = None
    projection: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _block_names(widths, blocks_per_stage):
    for s in range(len(widths)):
        for b in range(blocks_per_stage):
            yield s, b, f"s{s}.b{b}"


class MicroResNet:
    """Parameters, running statistics and the forward/backward passes.

    ``params`` and ``buffers`` are plain ordered dicts of float64 arrays, so
    optimisers and the checkpoint writer can treat them uniformly.
    ``relu_override`` may map ReLU tape keys to fixed masks, which turns the
    network into the smooth function whose derivative backward computes
    (used by derivative checks next to a kink).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._tape = None
        self.relu_override = None
        rng = np.random.default_rng(seed)
        self._init_backbone(rng)
        if config.embed_dim:
            self._init_linear("triplet", config.feature_dim, config.embed_dim, rng)
        if config.proj_dim:
            hidden = config.proj_hidden or config.feature_dim
            self._init_linear("proj1", config.feature_dim, hidden, rng)
            self._init_linear("proj2", hidden, config.proj_dim, rng)
        if config.num_classes:
            self.attach_classifier(config.num_classes, config.classifier_input, rng)

    # -- construction -------------------------------------------------

    def _init_bn(self, name, ch):
        self.params[f"{name}.gamma"] = np.ones(ch)
        self.params[f"{name}.beta"] = np.zeros(ch)
        self.buffers[f"{name}.running_mean"] = np.zeros(ch)
        self.buffers[f"{name}.running_var"] = np.ones(ch)

    def _init_linear(self, name, fan_in, fan_out, rng):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.params[f"{name}.b"] = np.zeros(fan_out)

    def _init_backbone(self, rng):
        cfg = self.config
        w0 = cfg.widths[0]
        self.params["stem.w"] = _he_normal(rng, (w0, cfg.in_channels, 3, 3), cfg.in_channels * 9)
        self.params["stem.b"] = np.zeros(w0)
        in_ch = w0
        for s, b, name in _block_names(cfg.widths, cfg.blocks_per_stage):
            out_ch = cfg.widths[s]
            self.params[f"{name}.conv1.w"] = _he_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9)
            self._init_bn(f"{name}.bn1", out_ch)
            self.params[f"{name}.conv2.w"] = _he_normal(rng, (out_ch, out_ch, 3, 3), out_ch * 9)
            self._init_bn(f"{name}.bn2", out_ch)
            if self._block_stride(s, b) != 1 or in_ch != out_ch:
                self.params[f"{name}.short.w"] = _he_normal(rng, (out_ch, in_ch, 1, 1), in_ch)
                self._init_bn(f"{name}.short_bn", out_ch)
            in_ch = out_ch

    @staticmethod
    def _block_stride(stage, block):
        return 2 if stage > 0 and block == 0 else 1

    def attach_classifier(self, num_classes: int, on: str = "features", rng=None, seed: int = 0):
        """Add (or replace) the classifier head, freshly initialised."""
        if on == "embedding" and "triplet.w" not in self.params:
            raise DimensionError("classifier on the embedding needs a triplet head")
        rng = rng if rng is not None else np.random.default_rng(seed)
        fan_in = self.config.embed_dim if on == "embedding" else self.config.feature_dim
        self._init_linear("cls", fan_in, num_classes, rng)
        self.config.num_classes = num_classes
        self.config.classifier_input = on

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("stem.", "s"))]

    def head_names(self, head: str) -> list[str]:
        prefixes = {"triplet": ("triplet.",), "proj": ("proj1.", "proj2."), "cls": ("cls.",)}[head]
        return [k for k in self.params if k.startswith(prefixes)]

    # -- forward --------------------------------------------------------

    def check_input(self, x):
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[2:]
        if min(h, w) < 8:
            raise DimensionError(f"input side must be >= 8, got {h}x{w}")
        if h % cfg.total_stride or w % cfg.total_stride:
            raise DimensionError(f"input {h}x{w} not divisible by total stride {cfg.total_stride}")

    def _bn(self, x, name, train):
        p, b = self.params, self.buffers
        return L.batchnorm_cnhw_forward(
            x, p[f"{name}.gamma"], p[f"{name}.beta"],
            b[f"{name}.running_mean"], b[f"{name}.running_var"], train,
        )

    def _relu(self, x, key):
        if self.relu_override is not None and key in self.relu_override:
            mask = self.relu_override[key]
            return x * mask, mask
        return L.relu_forward(x)

    def forward(self, x: np.ndarray, train: bool = False, heads: tuple = ("embedding", "projection", "logits")) -> ForwardOutput:
        """Run the network. ``heads`` limits which optional heads are evaluated."""
        self.check_input(x)
        p = self.params
        tape = {}
        x = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=np.float64)
        h, tape["stem.conv"] = L.conv2d_cnhw_forward(x, p["stem.w"], p["stem.b"], 1, 1)
        h, tape["stem.relu"] = self._relu(h, "stem.relu")
        for s, b, name in _block_names(self.config.widths, self.config.blocks_per_stage):
            stride = self._block_stride(s, b)
            identity = h
            y, tape[f"{name}.conv1"] = L.conv2d_cnhw_forward(h, p[f"{name}.conv1.w"], None, stride, 1)
            y, tape[f"{name}.bn1"] = self._bn(y, f"{name}.bn1", train)
            y, tape[f"{name}.relu1"] = self._relu(y, f"{name}.relu1")
            y, tape[f"{name}.conv2"] = L.conv2d_cnhw_forward(y, p[f"{name}.conv2.w"], None, 1, 1)
            y, tape[f"{name}.bn2"] = self._bn(y, f"{name}.bn2", train)
            if f"{name}.short.w" in p:
                sc, tape[f"{name}.short"] = L.conv2d_cnhw_forward(identity, p[f"{name}.short.w"], None, stride, 0)
                sc, tape[f"{name}.short_bn"] = self._bn(sc, f"{name}.short_bn", train)
            else:
                sc = identity
            h, tape[f"{name}.relu2"] = self._relu(y + sc, f"{name}.relu2")
        feats, tape["gap"] = L.global_avg_pool_cnhw_forward(h)
        out = ForwardOutput(features=feats)

        if "triplet.w" in p and ("embedding" in heads or (self._cls_on_embedding and "logits" in heads)):
            out.embedding, tape["triplet"] = L.linear_forward(feats, p["triplet.w"], p["triplet.b"])
        if "proj1.w" in p and "projection" in heads:
            z, tape["proj1"] = L.linear_forward(feats, p["proj1.w"], p["proj1.b"])
            z, tape["proj.relu"] = self._relu(z, "proj.relu")
            out.projection, tape["proj2"] = L.linear_forward(z, p["proj2.w"], p["proj2.b"])
        if "cls.w" in p and "logits" in heads:
            src = out.embedding if self._cls_on_embedding else feats
            out.logits, tape["cls"] = L.linear_forward(src, p["cls.w"], p["cls.b"])

        for arr in (out.features, out.embedding, out.projection, out.logits):
            if arr is not None and not np.isfinite(arr).all():
                raise FiniteValueError("non-finite activations in forward pass")
        self._tape = tape
        return out

    @property
    def _cls_on_embedding(self):
        return self.config.classifier_input == "embedding"

    # -- backward -------------------------------------------------------

    def backward(self, grad_features=None, grad_embedding=None, grad_projection=None, grad_logits=None,
                 backbone: bool = True) -> dict[str, np.ndarray]:
        """Backpropagate upstream gradients recorded by the last forward.

        Returns a gradient for every parameter touched by the supplied
        upstream gradients (zeros elsewhere). ``backbone=False`` stops at the
        pooled features, which is all a frozen-backbone step needs.
        """
        if self._tape is None:
            raise StateError("backward called without a recorded forward pass")
        tape = self._tape
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        n, f = tape["gap"][1], self.config.feature_dim
        dfeat = np.zeros((n, f)) if grad_features is None else np.array(grad_features, dtype=float)
        demb = None if grad_embedding is None else np.array(grad_embedding, dtype=float)

        if grad_logits is not None:
            if "cls" not in tape:
                raise StateError("no logits were computed in the last forward pass")
            dsrc, grads["cls.w"], grads["cls.b"] = L.linear_backward(grad_logits, tape["cls"], p["cls.w"])
            if self._cls_on_embedding:
                demb = dsrc if demb is None else demb + dsrc
            else:
                dfeat = dfeat + dsrc
        if demb is not None:
            if "triplet" not in tape:
                raise StateError("no embedding was computed in the last forward pass")
            dsrc, grads["triplet.w"], grads["triplet.b"] = L.linear_backward(demb, tape["triplet"], p["triplet.w"])
            dfeat = dfeat + dsrc
        if grad_projection is not None:
            if "proj2" not in tape:
                raise StateError("no projection was computed in the last forward pass")
            dz, grads["proj2.w"], grads["proj2.b"] = L.linear_backward(grad_projection, tape["proj2"], p["proj2.w"])
            dz = L.relu_backward(dz, tape["proj.relu"])
            dsrc, grads["proj1.w"], grads["proj1.b"] = L.linear_backward(dz, tape["proj1"], p["proj1.w"])
            dfeat = dfeat + dsrc
        if not backbone:
            return grads

        dh = L.global_avg_pool_cnhw_backward(dfeat, tape["gap"])
        for s, b, name in reversed(list(_block_names(self.config.widths, self.config.blocks_per_stage))):
            dsum = L.relu_backward(dh, tape[f"{name}.relu2"])
            if f"{name}.short.w" in p:
                dsc, grads[f"{name}.short_bn.gamma"], grads[f"{name}.short_bn.beta"] = L.batchnorm_cnhw_backward(dsum, tape[f"{name}.short_bn"])
                didentity, grads[f"{name}.short.w"], _ = L.conv2d_cnhw_backward(dsc, tape[f"{name}.short"])
            else:
                didentity = dsum
            dy, grads[f"{name}.bn2.gamma"], grads[f"{name}.bn2.beta"] = L.batchnorm_cnhw_backward(dsum, tape[f"{name}.bn2"])
            dy, grads[f"{name}.conv2.w"], _ = L.conv2d_cnhw_backward(dy, tape[f"{name}.conv2"])
            dy = L.relu_backward(dy, tape[f"{name}.relu1"])
            dy, grads[f"{name}.bn1.gamma"], grads[f"{name}.bn1.beta"] = L.batchnorm_cnhw_backward(dy, tape[f"{name}.bn1"])
            dy, grads[f"{name}.conv1.w"], _ = L.conv2d_cnhw_backward(dy, tape[f"{name}.conv1"])
            dh = dy + didentity
        dh = L.relu_backward(dh, tape["stem.relu"])
        _, grads["stem.w"], grads["stem.b"] = L.conv2d_cnhw_backward(dh, tape["stem.conv"])
        return grads

    # -- state ----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        """All arrays (params then buffers) under prefixed names."""
        out = {f"param:{k}": v for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def blank(cls, config: ModelConfig) -> "MicroResNet":
        """A model with no parameters; callers fill ``params`` and ``buffers``."""
        model = cls.__new__(cls)
        model.config = config
        model.params, model.buffers, model._tape = {}, {}, None
        model.relu_override = None
        return model

    def copy(self) -> "MicroResNet":
        clone = MicroResNet.blank(ModelConfig.from_dict(self.config.to_dict()))
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return clone


def extract(model: MicroResNet, x: np.ndarray, what: str = "features", batch_size: int = 256) -> np.ndarray:
    """Eval-mode features / embedding / projection / logits for a whole array."""
    heads = () if what == "features" else (what,)
    chunks = []
    for i in range(0, len(x), batch_size):
        out = model.forward(x[i:i + batch_size], train=False, heads=heads)
        chunks.append(getattr(out, what))
    return np.concatenate(chunks)
