"""Backbone + attention + GAP/FC head, assembled into a two-class PAD network.

Class 0 is "live", class 1 is "PA"; the PA score is the softmax probability
of class 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, FusionConfig
from .tensor import DimensionError, Tensor

LIVE, PA = 0, 1

VARIANTS = {
    "none": "none",
    "pam": "pam_only",
    "cam": "cam_only",
    "parallel": "parallel",
    "sequential": "sequential",
    "hierarchical": "hierarchical",
}

CHECKPOINT_MAGIC = b"AGPD"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    """Five VGG-style stages: (conv3x3 + ReLU) x 2, then 2x2 max-pool.

    Taps are the pre-pool activations of stages 3, 4 and 5, so a 64 px input
    gives 16/8/4 grids. The last stage's pooled output is never used.
    """

    channels: tuple[int, ...] = (8, 16, 32, 32, 32)
    input_size: int = 64
    in_channels: int = 1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 5 or min(self.channels) < 1:
            raise ValueError(f"backbone needs five positive stage widths, got {self.channels}")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input size must be a positive multiple of 32, got {self.input_size}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")

    @property
    def tap_channels(self) -> tuple[int, int, int]:
        return self.channels[2], self.channels[3], self.channels[4]

    @property
    def tap_sizes(self) -> tuple[int, int, int]:
        s = self.input_size
        return s // 4, s // 8, s // 16


@dataclass
class PADModel:
    backbone: BackboneConfig
    fusion: FusionConfig
    stages: list[dict[str, Tensor]]
    attention: AttentionBlock
    fc_w: Tensor
    fc_b: Tensor
    seed: int = 0
    _registry: dict[str, Tensor] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, backbone: BackboneConfig | None = None, fusion: FusionConfig | None = None, seed: int = 0,
               dtype=np.float32):
        backbone = backbone or BackboneConfig()
        fusion = fusion or FusionConfig()
        rng = np.random.default_rng([seed, 0])
        stages = _init_backbone(backbone, rng, dtype)
        return cls._assemble(backbone, fusion, stages, seed, dtype)

    @classmethod
    def _assemble(cls, backbone, fusion, stages, seed, dtype):
        att_rng = np.random.default_rng([seed, 1])
        block = AttentionBlock.init(fusion, backbone.tap_channels, att_rng, dtype)
        c = block.out_channels
        fc_w = Tensor(att_rng.standard_normal((2, c)) * np.sqrt(2.0 / c), requires_grad=True, dtype=dtype)
        fc_b = Tensor(np.zeros(2), requires_grad=True, dtype=dtype)
        model = cls(backbone, fusion, stages, block, fc_w, fc_b, seed)
        model._registry = model._build_registry()
        return model

    def _build_registry(self) -> dict[str, Tensor]:
        reg: dict[str, Tensor] = {}
        for i, stage in enumerate(self.stages, start=1):
            for k, v in stage.items():
                reg[f"backbone.stage{i}.{k}"] = v
        for k, v in self.attention.parameters().items():
            reg[f"attention.{k}"] = v
        reg["head.fc.w"] = self.fc_w
        reg["head.fc.b"] = self.fc_b
        ids = [id(v) for v in reg.values()]
        assert len(ids) == len(set(ids)), "parameter registered twice"
        return reg

    def parameters(self) -> dict[str, Tensor]:
        return self._registry

    def num_parameters(self) -> int:
        return sum(p.size for p in self._registry.values())

    def zero_grad(self) -> None:
        for p in self._registry.values():
            p.grad = None

    def astype(self, dtype) -> "PADModel":
        """Convert every parameter in place (float64 for gradient checks)."""
        for p in self._registry.values():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.fc_w.dtype

    # -- forward --------------------------------------------------------

    def features(self, images) -> dict[str, Tensor]:
        """Run the network, returning every named intermediate.

        Keys: ``tap3``/``tap4``/``tap5`` (backbone, pre-attention),
        ``attended`` (post-attention map fed to GAP), ``pooled``, ``logits``,
        and the attention maps or per-level outputs the fusion mode produces.
        """
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        expect = (self.backbone.in_channels, self.backbone.input_size, self.backbone.input_size)
        if tuple(x.shape[-3:]) != expect or x.data.ndim not in (3, 4):
            raise DimensionError(f"expected image of shape {expect} (optionally batched), got {x.shape}")
        feats: dict[str, Tensor] = {}
        h = x
        for i, st in enumerate(self.stages, start=1):
            h = T.relu(T.conv2d(h, st["conv1.w"], st["conv1.b"], padding=1))
            h = T.relu(T.conv2d(h, st["conv2.w"], st["conv2.b"], padding=1))
            if i >= 3:
                feats[f"tap{i}"] = h
            if i < 5:
                h = T.maxpool2d(h, 2, 2)
        attended = self.attention(feats, feats)
        pooled = T.global_avg_pool(attended)
        feats["pooled"] = pooled
        feats["logits"] = T.dense(pooled, self.fc_w, self.fc_b)
        return feats

    def forward(self, images) -> Tensor:
        return self.features(images)["logits"]

    __call__ = forward

    def pa_score(self, images, batch_size: int = 64) -> np.ndarray | float:
        """Probability of the PA class; a float for one image, an array for a batch."""
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        single = arr.ndim == 3
        arr = arr[None] if single else arr
        out = []
        with T.no_grad():
            for i in range(0, len(arr), batch_size):
                logits = self.forward(Tensor(arr[i:i + batch_size].astype(self.dtype)))
                out.append(T.softmax(logits, axis=-1).data[:, PA])
        scores = np.concatenate(out).astype(np.float64)
        return float(scores[0]) if single else scores

    # -- checkpoints ----------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            write_checkpoint(fh, {k: v.data for k, v in self._registry.items()})

    def load(self, path) -> "PADModel":
        with open(path, "rb") as fh:
            params = read_checkpoint(fh)
        self.load_state(params)
        return self

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._registry.items()}

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        missing = set(self._registry) - set(params)
        extra = set(params) - set(self._registry)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in params.items():
            p = self._registry[k]
            if p.shape != v.shape:
                raise DimensionError(f"{k}: checkpoint shape {v.shape} vs model {p.shape}")
            p.data = np.array(v, dtype=p.dtype)


def _init_backbone(cfg: BackboneConfig, rng, dtype) -> list[dict[str, Tensor]]:
    stages = []
    cin = cfg.in_channels
    for cout in cfg.channels:
        st = {}
        for name, ci in (("conv1", cin), ("conv2", cout)):
            w = rng.standard_normal((cout, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9))
            st[f"{name}.w"] = Tensor(w, requires_grad=True, dtype=dtype)
            st[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        stages.append(st)
        cin = cout
    return stages


def ablation_variant(base: PADModel, variant: str, seed: int | None = None) -> PADModel:
    """Same backbone weights (copied), fresh attention and head for ``variant``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    mode = VARIANTS[variant]
    fusion = FusionConfig(mode=mode, reduction_ratio=base.fusion.reduction_ratio, normalize=base.fusion.normalize)
    r = fusion.reduction_ratio
    needs = base.backbone.tap_channels if mode == "hierarchical" else base.backbone.tap_channels[2:]
    if mode != "none" and mode != "cam_only" and any(c % r for c in needs):
        raise DimensionError(f"variant {variant!r}: reduction ratio {r} does not divide tap channels {needs}")
    stages = [{k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in st.items()} for st in base.stages]
    return PADModel._assemble(base.backbone, fusion, stages, base.seed if seed is None else seed, base.dtype)


# ---------------------------------------------------------------------------
# AGPD checkpoint files


def write_checkpoint(fh: BinaryIO, params: dict[str, np.ndarray]) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        T.write_tensor(fh, arr)


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    version, count = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        params[name] = T.read_tensor(fh)
    return params
