"""The two-CCM network: consensus gating, dual attention units, classifier."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, DimensionError, Parameter, Tensor

FUSION_MODES = ("ccm", "add", "concat", "se")
ROLE_MODES = ("global_local", "local_global", "local_local")
DELTA_MODES = ("mse", "mae", "kl", "js")


@dataclass
class ModelConfig:
    D: int = 1024
    C: int = 20
    hidden: int = 512
    attn_kernels: list[int] = field(default_factory=lambda: [3, 3, 1])
    cls_kernels: list[int] = field(default_factory=lambda: [3, 3, 1])
    dropout_p: float = 0.7
    fusion_mode: str = "ccm"
    role_mode: str = "global_local"
    delta_mode: str = "mse"

    @property
    def attn_dims(self) -> list[int]:
        return [self.hidden] * (len(self.attn_kernels) - 1) + [1]

    @property
    def cls_dims(self) -> list[int]:
        return [self.hidden] * (len(self.cls_kernels) - 1) + [self.C + 1]

    def validate(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.role_mode not in ROLE_MODES:
            raise ConfigError(f"role_mode must be one of {ROLE_MODES}, got {self.role_mode!r}")
        if self.delta_mode not in DELTA_MODES:
            raise ConfigError(f"delta_mode must be one of {DELTA_MODES}, got {self.delta_mode!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if any(k % 2 == 0 or k < 1 for k in self.attn_kernels + self.cls_kernels):
            raise ConfigError("kernel sizes must be odd and positive")
        if min(self.D, self.C, self.hidden) < 1:
            raise ConfigError("D, C and hidden must be positive")


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class ConvStack:
    """``conv -> relu -> dropout`` repeated, with a bare final conv."""

    def __init__(self, name: str, d_in: int, dims, kernels, rng: np.random.Generator):
        self.kernels = list(kernels)
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (k, d_out) in enumerate(zip(kernels, dims)):
            w = Parameter(glorot(rng, (k, d_in, d_out), k * d_in, k * d_out), f"{name}.{i}.weight")
            b = Parameter(np.zeros(d_out), f"{name}.{i}.bias")
            self.layers.append((w, b))
            d_in = d_out

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, x, p_drop: float, train: bool, rng) -> Tensor:
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = ag.temporal_conv(x, w, b)
            if i < last:
                x = ag.dropout(ag.relu(x), p_drop, train, rng)
        return x


class CCMParams:
    """Global (``fg``) and local (``fl``) kernel-1 D->D convolutions."""

    def __init__(self, name: str, D: int, rng: np.random.Generator):
        self.fg_w = Parameter(glorot(rng, (1, D, D), D, D), f"{name}.fg.weight")
        self.fg_b = Parameter(np.zeros(D), f"{name}.fg.bias")
        self.fl_w = Parameter(glorot(rng, (1, D, D), D, D), f"{name}.fl.weight")
        self.fl_b = Parameter(np.zeros(D), f"{name}.fl.bias")

    def parameters(self) -> list[Parameter]:
        return [self.fg_w, self.fg_b, self.fl_w, self.fl_b]


def ccm_forward(main, aux, params: CCMParams) -> tuple[Tensor, Tensor]:
    """Gate ``main`` channel-wise by sigmoid(global(main) * local(aux))."""
    main, aux = ag._as_tensor(main), ag._as_tensor(aux)
    if main.shape != aux.shape:
        raise DimensionError(f"main {main.shape} and aux {aux.shape} must agree")
    if main.shape[-2] == 0:
        raise ag.EmptySequenceError("cannot gate an empty sequence (T=0)")
    pooled = ag.global_avg_pool(main, keepdims=True)
    m_global = ag.temporal_conv(pooled, params.fg_w, params.fg_b)
    m_local = ag.temporal_conv(aux, params.fl_w, params.fl_b)
    gate = ag.sigmoid(ag.combine(m_local, m_global, "broadcast_mul_rowvec"))
    return gate * main, gate


def role_variant_forward(main, aux, params: CCMParams, role_mode: str) -> tuple[Tensor, Tensor]:
    main, aux = ag._as_tensor(main), ag._as_tensor(aux)
    if role_mode == "global_local":
        return ccm_forward(main, aux, params)
    if role_mode == "local_global":
        pooled = ag.global_avg_pool(aux, keepdims=True)
        m_global = ag.temporal_conv(pooled, params.fg_w, params.fg_b)
        m_local = ag.temporal_conv(main, params.fl_w, params.fl_b)
        m = ag.combine(m_local, m_global, "broadcast_mul_rowvec")
    elif role_mode == "local_local":
        m = ag.temporal_conv(main, params.fg_w, params.fg_b) * ag.temporal_conv(aux, params.fl_w, params.fl_b)
    else:
        raise ConfigError(f"unknown role_mode {role_mode!r}")
    gate = ag.sigmoid(m)
    return gate * main, gate


def fuse_attention(a_rgb, a_flow) -> Tensor:
    a_rgb, a_flow = ag._as_tensor(a_rgb), ag._as_tensor(a_flow)
    if a_rgb.shape != a_flow.shape:
        raise DimensionError(f"attention lengths differ: {a_rgb.shape} vs {a_flow.shape}")
    return (a_rgb + a_flow) * 0.5


def suppress_tcam(tcam, a_fused) -> Tensor:
    """Scale every class column (background included) by the attention track."""
    return ag.combine(tcam, a_fused, "broadcast_mul_colvec")


@dataclass
class ForwardOutput:
    x_rgb_enh: Tensor
    x_flow_enh: Tensor
    a_rgb: Tensor
    a_flow: Tensor
    a_fused: Tensor
    tcam: Tensor
    tcam_supp: Tensor
    fused_features: Tensor
    gate_rgb: Tensor | None = None
    gate_flow: Tensor | None = None

    def video(self, i: int) -> "ForwardOutput":
        """Per-video view of a batched output (index ops are taped)."""
        pick = lambda t: None if t is None else t[i]  # noqa: E731
        return ForwardOutput(**{k: pick(v) for k, v in self.__dict__.items()})


class Co2Net:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        D = config.D
        self.ccm_rgb = CCMParams("ccm_rgb", D, rng)
        self.ccm_flow = CCMParams("ccm_flow", D, rng)
        self.attn_rgb = ConvStack("attn_rgb", D, config.attn_dims, config.attn_kernels, rng)
        self.attn_flow = ConvStack("attn_flow", D, config.attn_dims, config.attn_kernels, rng)
        self.classifier = ConvStack("classifier", 2 * D, config.cls_dims, config.cls_kernels, rng)

    def parameters(self) -> list[Parameter]:
        return (self.ccm_rgb.parameters() + self.ccm_flow.parameters() + self.attn_rgb.parameters()
                + self.attn_flow.parameters() + self.classifier.parameters())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def attention(self, unit: ConvStack, x, train: bool, rng) -> Tensor:
        logits = unit(x, self.config.dropout_p, train, rng)
        return ag.sigmoid(logits[..., 0])

    def classify(self, fused, train: bool, rng) -> Tensor:
        return self.classifier(fused, self.config.dropout_p, train, rng)

    def enhance(self, rgb: Tensor, flow: Tensor):
        cfg = self.config
        mode = cfg.fusion_mode
        if mode == "ccm":
            x_rgb, g_rgb = role_variant_forward(rgb, flow, self.ccm_rgb, cfg.role_mode)
            x_flow, g_flow = role_variant_forward(flow, rgb, self.ccm_flow, cfg.role_mode)
        elif mode == "se":
            x_rgb, g_rgb = role_variant_forward(rgb, rgb, self.ccm_rgb, cfg.role_mode)
            x_flow, g_flow = role_variant_forward(flow, flow, self.ccm_flow, cfg.role_mode)
        elif mode == "concat":
            x_rgb, x_flow, g_rgb, g_flow = rgb, flow, None, None
        elif mode == "add":
            summed = rgb + flow
            x_rgb, x_flow, g_rgb, g_flow = summed, summed, None, None
        else:
            raise ConfigError(f"unknown fusion_mode {mode!r}")
        return x_rgb, x_flow, g_rgb, g_flow

    def forward(self, rgb, flow, train: bool = False, rng: np.random.Generator | None = None) -> ForwardOutput:
        rgb, flow = ag._as_tensor(rgb), ag._as_tensor(flow)
        if rgb.shape != flow.shape:
            raise DimensionError(f"rgb {rgb.shape} and flow {flow.shape} must agree")
        if rgb.shape[-1] != self.config.D:
            raise DimensionError(f"axis -1: features have D={rgb.shape[-1]}, model expects {self.config.D}")
        x_rgb, x_flow, g_rgb, g_flow = self.enhance(rgb, flow)
        a_rgb = self.attention(self.attn_rgb, x_rgb, train, rng)
        a_flow = self.attention(self.attn_flow, x_flow, train, rng)
        a_fused = fuse_attention(a_rgb, a_flow)
        fused = ag.concat([x_rgb, x_flow], axis=-1)
        tcam = self.classify(fused, train, rng)
        return ForwardOutput(x_rgb, x_flow, a_rgb, a_flow, a_fused, tcam,
                             suppress_tcam(tcam, a_fused), fused, g_rgb, g_flow)

    __call__ = forward


def model_forward(record, model: Co2Net, train: bool = False, rng=None) -> ForwardOutput:
    return model.forward(record.rgb, record.flow, train=train, rng=rng)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"CO2W"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Co2Net, path) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for p in model.parameters():
        name = p.name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(raw):
                raise CheckpointError(f"{path}: truncated values for {name}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record at byte {pos}: {exc}") from None
    return out


def load_checkpoint(model: Co2Net, path) -> None:
    values = read_checkpoint(path)
    params = model.named_parameters()
    if set(values) != set(params):
        missing = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:3]}, extra {extra[:3]})")
    for name, p in params.items():
        if values[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {values[name].shape}, model expects {p.shape}")
        p.data[...] = values[name]


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
