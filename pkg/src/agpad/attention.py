"""Position and channel self-attention and the ways of combining them.

Feature maps are ``C x H x W`` tensors (optionally with a leading batch
axis). Attention maps are column-stochastic by default: entry ``(i, j)`` is
the weight position/channel ``i`` contributes to output ``j``, and each
column sums to one. Passing ``normalize="rows"`` switches every map to the
transposed convention (rows sum to one) used by some DANet ports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

FUSION_MODES = ("none", "pam_only", "cam_only", "parallel", "sequential", "hierarchical")
NORMALIZE_AXES = ("columns", "rows")


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _normalize(raw: Tensor, normalize: str) -> Tensor:
    if normalize == "columns":
        return T.softmax_cols(raw)
    if normalize == "rows":
        return T.softmax(raw, axis=-1)
    raise ValueError(f"normalize must be one of {NORMALIZE_AXES}, got {normalize!r}")


def _flatten_spatial(a: Tensor) -> Tensor:
    *lead, h, w = a.shape
    return T.reshape(a, (*lead, h * w))


@dataclass
class PamParams:
    """Weights of a position attention module.

    ``conv_b``/``conv_c`` are 1x1 kernels ``C -> C/r``; ``conv_d`` is ``C -> C``.
    """

    conv_b_w: Tensor
    conv_b_b: Tensor
    conv_c_w: Tensor
    conv_c_b: Tensor
    conv_d_w: Tensor
    conv_d_b: Tensor
    alpha: Tensor
    reduction_ratio: int

    @classmethod
    def init(cls, channels: int, reduction_ratio: int = 8, rng=None, dtype=np.float32, alpha: float = 0.0):
        if reduction_ratio < 1 or channels % reduction_ratio:
            raise DimensionError(f"reduction ratio {reduction_ratio} does not divide {channels} channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        inner = channels // reduction_ratio

        def t(a):
            return Tensor(a, requires_grad=True, dtype=dtype)

        return cls(
            conv_b_w=t(_he(rng, (inner, channels, 1, 1), channels, dtype)),
            conv_b_b=t(np.zeros(inner)),
            conv_c_w=t(_he(rng, (inner, channels, 1, 1), channels, dtype)),
            conv_c_b=t(np.zeros(inner)),
            conv_d_w=t(_he(rng, (channels, channels, 1, 1), channels, dtype)),
            conv_d_b=t(np.zeros(channels)),
            alpha=t(np.array([alpha])),
            reduction_ratio=reduction_ratio,
        )

    @property
    def channels(self) -> int:
        return self.conv_d_w.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "conv_b.w": self.conv_b_w,
            "conv_b.b": self.conv_b_b,
            "conv_c.w": self.conv_c_w,
            "conv_c.b": self.conv_c_b,
            "conv_d.w": self.conv_d_w,
            "conv_d.b": self.conv_d_b,
            "alpha": self.alpha,
        }


@dataclass
class CamParams:
    """Channel attention has a single learned scale and no convolutions."""

    beta: Tensor

    @classmethod
    def init(cls, dtype=np.float32, beta: float = 0.0):
        return cls(beta=Tensor(np.array([beta]), requires_grad=True, dtype=dtype))

    def parameters(self) -> dict[str, Tensor]:
        return {"beta": self.beta}


@dataclass
class PostConv:
    """Two channel-preserving 3x3 convs with a ReLU between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, channels: int, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = channels * 9

        def t(a):
            return Tensor(a, requires_grad=True, dtype=dtype)

        return cls(
            w1=t(_he(rng, (channels, channels, 3, 3), fan_in, dtype)),
            b1=t(np.zeros(channels)),
            w2=t(_he(rng, (channels, channels, 3, 3), fan_in, dtype)),
            b2=t(np.zeros(channels)),
        )

    @classmethod
    def identity(cls, channels: int, dtype=np.float32):
        """Delta kernels: maps any non-negative input to itself."""
        k = np.zeros((channels, channels, 3, 3))
        k[np.arange(channels), np.arange(channels), 1, 1] = 1.0

        def t(a):
            return Tensor(a, requires_grad=True, dtype=dtype)

        return cls(w1=t(k), b1=t(np.zeros(channels)), w2=t(k.copy()), b2=t(np.zeros(channels)))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.conv2d(x, self.w1, self.b1, stride=1, padding=1))
        return T.conv2d(h, self.w2, self.b2, stride=1, padding=1)

    def parameters(self) -> dict[str, Tensor]:
        return {"conv1.w": self.w1, "conv1.b": self.b1, "conv2.w": self.w2, "conv2.b": self.b2}


# ---------------------------------------------------------------------------
# position attention


def pam_attention_map(a: Tensor, p: PamParams, normalize: str = "columns") -> Tensor:
    """N x N map relating every pair of spatial positions (N = H*W)."""
    if a.shape[-3] != p.channels:
        raise DimensionError(f"PAM built for {p.channels} channels, got feature map {a.shape}")
    keys = _flatten_spatial(T.conv2d(a, p.conv_b_w, p.conv_b_b))     # C/r x N
    queries = _flatten_spatial(T.conv2d(a, p.conv_c_w, p.conv_c_b))  # C/r x N
    raw = T.matmul(T.transpose(queries), keys)                       # N x N
    return _normalize(raw, normalize)


def pam_forward(a: Tensor, p: PamParams, normalize: str = "columns", return_map: bool = False):
    attn = pam_attention_map(a, p, normalize)
    values = _flatten_spatial(T.conv2d(a, p.conv_d_w, p.conv_d_b))  # C x N
    refined = T.reshape(T.matmul(values, attn), a.shape)
    out = T.add(T.scale(refined, p.alpha), a)
    return (out, attn) if return_map else out


# ---------------------------------------------------------------------------
# channel attention


def cam_attention_map(a: Tensor, normalize: str = "columns") -> Tensor:
    """C x C map of channel affinities from the Gram matrix of ``a``."""
    flat = _flatten_spatial(a)
    raw = T.matmul(flat, T.transpose(flat))
    return _normalize(raw, normalize)


def cam_forward(a: Tensor, p: CamParams, normalize: str = "columns", return_map: bool = False):
    attn = cam_attention_map(a, normalize)
    refined = T.reshape(T.matmul(attn, _flatten_spatial(a)), a.shape)
    out = T.add(T.scale(refined, p.beta), a)
    return (out, attn) if return_map else out


# ---------------------------------------------------------------------------
# fusion


def fuse_parallel(
    a: Tensor,
    pam: PamParams,
    pam_post: PostConv,
    cam: CamParams,
    cam_post: PostConv,
    normalize: str = "columns",
) -> Tensor:
    """Element-wise sum of the post-conv'd PAM and CAM branches."""
    return T.add(pam_post(pam_forward(a, pam, normalize)), cam_post(cam_forward(a, cam, normalize)))


def fuse_sequential(a: Tensor, cam: CamParams, pam: PamParams, normalize: str = "columns") -> Tensor:
    """Channel attention first, then position attention on its output."""
    return pam_forward(cam_forward(a, cam, normalize), pam, normalize)


@dataclass
class HierarchicalParams:
    pam3: PamParams
    cam3: CamParams
    post_p3: PostConv
    post_q3: PostConv
    pam4: PamParams
    cam4: CamParams
    post_p4: PostConv
    post_q4: PostConv
    cam5: CamParams

    @classmethod
    def init(cls, channels: tuple[int, int, int], reduction_ratio: int = 8, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        c3, c4, _ = channels
        return cls(
            pam3=PamParams.init(c3, reduction_ratio, rng, dtype),
            cam3=CamParams.init(dtype),
            post_p3=PostConv.init(c3, rng, dtype),
            post_q3=PostConv.init(c3, rng, dtype),
            pam4=PamParams.init(c4, reduction_ratio, rng, dtype),
            cam4=CamParams.init(dtype),
            post_p4=PostConv.init(c4, rng, dtype),
            post_q4=PostConv.init(c4, rng, dtype),
            cam5=CamParams.init(dtype),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("pam3", "cam3", "post_p3", "post_q3", "pam4", "cam4", "post_p4", "post_q4", "cam5"):
            for k, v in getattr(self, name).parameters().items():
                out[f"{name}.{k}"] = v
        return out


def check_tap_ratio(tap3_shape, tap4_shape, tap5_shape) -> int:
    """Validate the 4:2:1 spatial ladder and return the base size ``s``."""
    s_h, s_w = tap5_shape[-2:]
    if tuple(tap4_shape[-2:]) != (2 * s_h, 2 * s_w) or tuple(tap3_shape[-2:]) != (4 * s_h, 4 * s_w):
        raise DimensionError(
            f"hierarchical taps must be 4:2:1 in space, got {tuple(tap3_shape)}, {tuple(tap4_shape)}, {tuple(tap5_shape)}"
        )
    return s_h


def hierarchical_output_shape(tap3_shape, tap4_shape, tap5_shape) -> tuple[int, ...]:
    """Shape produced by :func:`fuse_hierarchical`, without running it."""
    check_tap_ratio(tap3_shape, tap4_shape, tap5_shape)
    *lead, c5, h, w = tap5_shape
    return (*lead, tap3_shape[-3] + tap4_shape[-3] + c5, h, w)


def fuse_hierarchical(
    tap3: Tensor,
    tap4: Tensor,
    tap5: Tensor,
    params: HierarchicalParams,
    normalize: str = "columns",
    features: dict | None = None,
) -> Tensor:
    """Multi-level attention: taps 3 and 4 get parallel PAM+CAM and are
    max-pooled down to the tap-5 grid, tap 5 gets CAM, then all three are
    stacked along channels.
    """
    check_tap_ratio(tap3.shape, tap4.shape, tap5.shape)
    p = params
    att3 = fuse_parallel(tap3, p.pam3, p.post_p3, p.cam3, p.post_q3, normalize)
    att4 = fuse_parallel(tap4, p.pam4, p.post_p4, p.cam4, p.post_q4, normalize)
    att5 = cam_forward(tap5, p.cam5, normalize)
    if features is not None:
        features.update(att3=att3, att4=att4, att5=att5)
    return T.concat([T.maxpool2d(att3, 4, 4), T.maxpool2d(att4, 2, 2), att5], axis=-3)


@dataclass
class FusionConfig:
    mode: str = "parallel"
    reduction_ratio: int = 8
    normalize: str = "columns"

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if self.normalize not in NORMALIZE_AXES:
            raise ValueError(f"normalize must be one of {NORMALIZE_AXES}, got {self.normalize!r}")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be positive")


@dataclass
class AttentionBlock:
    """Attention parameters for one fusion mode plus the forward that uses them.

    ``channels`` are the tap-3/4/5 channel counts; only the hierarchical mode
    looks past tap 5.
    """

    config: FusionConfig
    channels: tuple[int, int, int]
    pam: PamParams | None = None
    cam: CamParams | None = None
    pam_post: PostConv | None = None
    cam_post: PostConv | None = None
    hier: HierarchicalParams | None = None

    @classmethod
    def init(cls, config: FusionConfig, channels, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        channels = tuple(int(c) for c in channels)
        c5 = channels[2]
        mode, r = config.mode, config.reduction_ratio
        blk = cls(config=config, channels=channels)
        if mode in ("pam_only", "parallel", "sequential"):
            blk.pam = PamParams.init(c5, r, rng, dtype)
        if mode in ("cam_only", "parallel", "sequential"):
            blk.cam = CamParams.init(dtype)
        if mode == "parallel":
            blk.pam_post = PostConv.init(c5, rng, dtype)
            blk.cam_post = PostConv.init(c5, rng, dtype)
        if mode == "hierarchical":
            blk.hier = HierarchicalParams.init(channels, r, rng, dtype)
        return blk

    @property
    def out_channels(self) -> int:
        return sum(self.channels) if self.config.mode == "hierarchical" else self.channels[2]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("pam", "cam", "pam_post", "cam_post", "hier"):
            part = getattr(self, name)
            if part is not None:
                for k, v in part.parameters().items():
                    out[f"{name}.{k}"] = v
        return out

    def __call__(self, taps: dict[str, Tensor], features: dict | None = None) -> Tensor:
        mode, norm = self.config.mode, self.config.normalize
        a = taps["tap5"]
        feats = features if features is not None else {}
        if mode == "none":
            out = a
        elif mode == "pam_only":
            out, feats["pam_map"] = pam_forward(a, self.pam, norm, return_map=True)
        elif mode == "cam_only":
            out, feats["cam_map"] = cam_forward(a, self.cam, norm, return_map=True)
        elif mode == "parallel":
            mp, feats["pam_map"] = pam_forward(a, self.pam, norm, return_map=True)
            mq, feats["cam_map"] = cam_forward(a, self.cam, norm, return_map=True)
            out = T.add(self.pam_post(mp), self.cam_post(mq))
        elif mode == "sequential":
            mq, feats["cam_map"] = cam_forward(a, self.cam, norm, return_map=True)
            out, feats["pam_map"] = pam_forward(mq, self.pam, norm, return_map=True)
        else:
            out = fuse_hierarchical(taps["tap3"], taps["tap4"], a, self.hier, norm, feats)
        feats["attended"] = out
        return out
