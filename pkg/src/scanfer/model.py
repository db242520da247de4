"""Two-branch expression network: backbone taps, SCAN local/global branch, CCI branch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention import EcaBlock, ScanBlock, eca_forward, scan_forward
from .tensor import (
    BatchNorm2d,
    ShapeError,
    Tensor,
    concat,
    conv2d,
    gap_spatial,
    glorot_uniform,
    linear,
    max_over_set,
    no_grad,
    prelu,
    softmax_cross_entropy,
)

NUM_CLASSES = 7
CCI_HIDDEN = 256


@dataclass(frozen=True)
class BackboneConfig:
    """Plain conv(3x3)-BN-PReLU stack; ``stages`` holds ``(out_channels, stride)`` pairs."""

    stages: tuple[tuple[int, int], ...]
    tap_u: int
    tap_l: int
    input_size: int
    in_channels: int = 3

    def __post_init__(self):
        if not 0 <= self.tap_u < self.tap_l < len(self.stages):
            raise ValueError("tap_l must be strictly deeper than tap_u and both within the stack")
        sizes = self.spatial_sizes()
        if sizes[self.tap_l] * 2 != sizes[self.tap_u]:
            raise ValueError(
                f"deeper tap must halve the shallow tap's resolution ({sizes[self.tap_u]} -> {sizes[self.tap_l]})"
            )

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls(stages=((32, 2), (64, 2)), tap_u=0, tap_l=1, input_size=40)

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls(stages=((64, 2), (128, 2), (512, 2), (1024, 2)), tap_u=2, tap_l=3, input_size=224)

    @classmethod
    def preset(cls, name: str) -> "BackboneConfig":
        if name == "desk":
            return cls.desk()
        if name == "paper":
            return cls.paper()
        raise ValueError(f"unknown backbone preset {name!r} (expected 'desk' or 'paper')")

    def spatial_sizes(self) -> list[int]:
        sizes, s = [], self.input_size
        for _, stride in self.stages:
            s = (s - 1) // stride + 1
            sizes.append(s)
        return sizes

    @property
    def upper_shape(self) -> tuple[int, int, int]:
        s = self.spatial_sizes()[self.tap_u]
        return self.stages[self.tap_u][0], s, s

    @property
    def lower_shape(self) -> tuple[int, int, int]:
        s = self.spatial_sizes()[self.tap_l]
        return self.stages[self.tap_l][0], s, s


@dataclass(frozen=True)
class FerConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    grid: tuple[int, int] = (5, 5)
    cci_grid: tuple[int, int] = (2, 2)
    lam: float = 0.2
    num_classes: int = NUM_CLASSES
    eca_k: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if min(self.grid) < 1 or min(self.cci_grid) < 1:
            raise ValueError("partition grids need at least one row and column")
        _, hu, wu = self.backbone.upper_shape
        _, hl, wl = self.backbone.lower_shape
        if self.grid[0] > hu or self.grid[1] > wu:
            raise ValueError(f"grid {self.grid} does not fit the {hu}x{wu} upper map")
        if self.cci_grid[0] > hl or self.cci_grid[1] > wl:
            raise ValueError(f"CCI grid {self.cci_grid} does not fit the {hl}x{wl} lower map")

    @property
    def m(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def k(self) -> int:
        return self.cci_grid[0] * self.cci_grid[1]


class FerModel:
    """Parameter container for the full network. Build with :meth:`create`."""

    def __init__(self, config: FerConfig):
        self.config = config
        self.backbone_weights: list[Tensor] = []
        self.backbone_bns: list[BatchNorm2d] = []
        self.backbone_slopes: list[Tensor] = []
        self.scan: ScanBlock
        self.eca: EcaBlock
        self.head_u_weight: Tensor
        self.head_u_bias: Tensor
        self.cci_proj: list[tuple[Tensor, Tensor]] = []
        self.cci_heads: list[tuple[Tensor, Tensor]] = []

    @classmethod
    def create(cls, config: FerConfig | None = None, seed: int = 0) -> "FerModel":
        config = config or FerConfig()
        rng = np.random.default_rng(seed)
        model = cls(config)
        bb = config.backbone
        c_prev = bb.in_channels
        for c_out, _ in bb.stages:
            model.backbone_weights.append(glorot_uniform(rng, (c_out, c_prev, 3, 3), c_prev * 9, c_out * 9))
            model.backbone_bns.append(BatchNorm2d.create(c_out))
            model.backbone_slopes.append(Tensor(np.full(c_out, 0.25), requires_grad=True))
            c_prev = c_out
        c_u = bb.upper_shape[0]
        c_l = bb.lower_shape[0]
        model.scan = ScanBlock.create(c_u, rng)
        model.eca = EcaBlock.create(c_l, rng, config.eca_k)
        n = config.num_classes
        model.head_u_weight = glorot_uniform(rng, (n, 2 * c_u), 2 * c_u, n)
        model.head_u_bias = Tensor(np.zeros(n), requires_grad=True)
        for _ in range(config.k):
            model.cci_proj.append((glorot_uniform(rng, (CCI_HIDDEN, c_l), c_l, CCI_HIDDEN),
                                   Tensor(np.zeros(CCI_HIDDEN), requires_grad=True)))
            model.cci_heads.append((glorot_uniform(rng, (n, CCI_HIDDEN), CCI_HIDDEN, n),
                                    Tensor(np.zeros(n), requires_grad=True)))
        return model

    # -- parameter bookkeeping ----------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, bn, a) in enumerate(zip(self.backbone_weights, self.backbone_bns, self.backbone_slopes)):
            yield f"backbone.{i}.conv_weight", w
            yield f"backbone.{i}.bn_gamma", bn.gamma
            yield f"backbone.{i}.bn_beta", bn.beta
            yield f"backbone.{i}.prelu_slope", a
        for name, p in self.scan.named_parameters():
            yield f"scan.{name}", p
        for name, p in self.eca.named_parameters():
            yield f"eca.{name}", p
        yield "head_u.weight", self.head_u_weight
        yield "head_u.bias", self.head_u_bias
        for i, ((pw, pb), (hw, hb)) in enumerate(zip(self.cci_proj, self.cci_heads)):
            yield f"cci.{i}.proj_weight", pw
            yield f"cci.{i}.proj_bias", pb
            yield f"cci.{i}.head_weight", hw
            yield f"cci.{i}.head_bias", hb

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, bn in enumerate(self.backbone_bns):
            yield f"backbone.{i}.bn_running_mean", bn.running_mean
            yield f"backbone.{i}.bn_running_var", bn.running_var
        for name, buf in self.scan.named_buffers():
            yield f"scan.{name}", buf

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    @staticmethod
    def group_of(name: str) -> str:
        return "backbone" if name.startswith("backbone.") else "heads"

    @staticmethod
    def decays(name: str) -> bool:
        """Weight decay touches convolution/linear weights only."""
        return name.endswith("weight") or name == "eca.kernel"

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        unknown = set(state) - set(targets)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unknown)}")
        for name, dst in targets.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: expected {dst.shape}, got {src.shape}")
            dst[...] = src


@dataclass
class ForwardOutput:
    logits_u: Tensor
    logits_cci: list[Tensor]
    v_local: Tensor
    v_global: Tensor
    h_blocks: list[Tensor]
    loss_u: Tensor | None = None
    loss_blocks: list[Tensor] | None = None
    loss_l: Tensor | None = None
    loss: Tensor | None = None


def partition_sizes(length: int, parts: int) -> list[int]:
    """Split ``length`` into ``parts`` runs, earlier runs taking the remainder."""
    if parts < 1 or parts > length:
        raise ValueError(f"cannot split {length} cells into {parts} non-empty parts")
    base, extra = divmod(length, parts)
    return [base + 1 if i < extra else base for i in range(parts)]


def partition(features: Tensor, rows: int, cols: int) -> list[Tensor]:
    """Tile the two trailing axes into ``rows x cols`` blocks, returned row-major."""
    h, w = features.shape[-2], features.shape[-1]
    if rows > h or cols > w:
        raise ValueError(f"cannot partition {h}x{w} into {rows}x{cols} blocks")
    row_edges = np.concatenate([[0], np.cumsum(partition_sizes(h, rows))])
    col_edges = np.concatenate([[0], np.cumsum(partition_sizes(w, cols))])
    blocks = []
    for r in range(rows):
        for c in range(cols):
            blocks.append(features[..., row_edges[r]:row_edges[r + 1], col_edges[c]:col_edges[c + 1]])
    return blocks


def backbone_forward(model: FerModel, images: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
    """Run the stage stack and return the two tapped maps ``(F_u, F_l)``."""
    bb = model.config.backbone
    x = images
    taps = {}
    for i, ((_, stride), w, bn, a) in enumerate(
        zip(bb.stages, model.backbone_weights, model.backbone_bns, model.backbone_slopes)
    ):
        x = prelu(bn(conv2d(x, w, None, stride=stride, padding="same"), training), a)
        if i in (bb.tap_u, bb.tap_l):
            taps[i] = x
        if i == bb.tap_l:
            break
    return taps[bb.tap_u], taps[bb.tap_l]


def local_global_branch(model: FerModel, upper: Tensor, training: bool = False):
    """SCAN over every patch and over the whole map; returns ``(V_l, V_g, logits_u)``."""
    expected = model.config.backbone.upper_shape
    if upper.ndim != 4 or upper.shape[1:] != expected:
        raise ShapeError(f"expected N x {expected}, got {upper.shape}")
    rows, cols = model.config.grid
    pooled = [gap_spatial(scan_forward(model.scan, p, training)[1]) for p in partition(upper, rows, cols)]
    v_local = max_over_set(pooled)
    v_global = gap_spatial(scan_forward(model.scan, upper, training)[1])
    logits_u = linear(concat([v_local, v_global], axis=-1), model.head_u_weight, model.head_u_bias)
    return v_local, v_global, logits_u


def cci_branch(model: FerModel, lower: Tensor, training: bool = False):
    """ECA-weighted map split into blocks, each pooled, projected and classified."""
    expected = model.config.backbone.lower_shape
    if lower.ndim != 4 or lower.shape[1:] != expected:
        raise ShapeError(f"expected N x {expected}, got {lower.shape}")
    rows, cols = model.config.cci_grid
    attended = eca_forward(model.eca, lower)
    h_blocks = [gap_spatial(b) for b in partition(attended, rows, cols)]
    logits = [
        linear(linear(h, pw, pb), hw, hb)
        for h, (pw, pb), (hw, hb) in zip(h_blocks, model.cci_proj, model.cci_heads)
    ]
    return h_blocks, logits


def combine_losses(loss_u, block_losses, lam: float):
    """Return ``(L_l, L)`` with L_l the sum of block losses and L = lam*L_u + (1-lam)*L_l."""
    loss_l = block_losses[0]
    for term in block_losses[1:]:
        loss_l = loss_l + term
    return loss_l, loss_u * lam + loss_l * (1.0 - lam)


def total_loss(model: FerModel, out: ForwardOutput, labels) -> tuple[Tensor, Tensor, Tensor]:
    labels = np.atleast_1d(np.asarray(labels))
    if np.any(labels < 0) or np.any(labels >= model.config.num_classes):
        raise ValueError(f"labels must lie in [0, {model.config.num_classes})")
    out.loss_u = softmax_cross_entropy(out.logits_u, labels)
    out.loss_blocks = [softmax_cross_entropy(z, labels) for z in out.logits_cci]
    out.loss_l, out.loss = combine_losses(out.loss_u, out.loss_blocks, model.config.lam)
    return out.loss_u, out.loss_l, out.loss


def as_image_batch(model: FerModel, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    bb = model.config.backbone
    want = (bb.in_channels, bb.input_size, bb.input_size)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"expected images shaped N x {want}, got {x.shape}")
    return x


def model_forward(model: FerModel, images, labels=None, training: bool = False) -> ForwardOutput:
    """Full forward pass; attaches the loss terms when ``labels`` are given."""
    x = as_image_batch(model, images)
    upper, lower = backbone_forward(model, x, training)
    v_local, v_global, logits_u = local_global_branch(model, upper, training)
    h_blocks, logits_cci = cci_branch(model, lower, training)
    out = ForwardOutput(logits_u, logits_cci, v_local, v_global, h_blocks)
    if labels is not None:
        total_loss(model, out, labels)
    return out


def predict(model: FerModel, images, batch_size: int = 64) -> np.ndarray:
    """Arg-max class of the local/global head, lowest index on ties (eval mode)."""
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    preds = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            logits = model_forward(model, x[start:start + batch_size]).logits_u.data
            preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
