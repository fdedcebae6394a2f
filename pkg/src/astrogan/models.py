"""Network architectures and the weights container.

Every network is described by a :class:`ModelSpec` and materialized as a
:class:`ModelParams`, which pairs the spec with a torch module. The public
:func:`forward` works on channels-last ``B x H x W x C`` arrays; the modules
themselves are ordinary NCHW ``nn.Module`` objects used directly for training.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm
from torchvision.models import resnet50

from .colorspace import ContractError


class ModelKind(str, enum.Enum):
    UNET_COLORIZER = "unet_colorizer"
    SRRESNET = "srresnet"
    EDSR = "edsr"
    WDSR = "wdsr"
    PATCH_DISCRIMINATOR = "patch_discriminator"
    RESNET_DISCRIMINATOR = "resnet_discriminator"

    @property
    def is_sr(self) -> bool:
        return self in (ModelKind.SRRESNET, ModelKind.EDSR, ModelKind.WDSR)

    @property
    def is_discriminator(self) -> bool:
        return self in (ModelKind.PATCH_DISCRIMINATOR, ModelKind.RESNET_DISCRIMINATOR)


# CLI architecture names
SR_ARCHS = {"srgan": ModelKind.SRRESNET, "edsr": ModelKind.EDSR, "wdsr": ModelKind.WDSR}


class WeightsError(Exception):
    """Weights file missing or unreadable."""


class ChecksumError(WeightsError):
    """Weights file failed integrity verification."""


class SpecMismatchError(WeightsError):
    def __init__(self, expected: "ModelSpec", found: "ModelSpec"):
        super().__init__(f"spec mismatch: expected {expected}, file holds {found}")
        self.expected = expected
        self.found = found


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    in_channels: int = 1
    out_channels: int | None = None
    encoder_stages: int = 4
    base_width: int = 64
    n_res_blocks: int = 16
    scale: int | None = None
    patch_layers: int = 3
    pretrained_encoder: bool = False
    encoder_weights: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.in_channels <= 0:
            raise ContractError(f"in_channels must be positive, got {self.in_channels}")
        if self.base_width <= 0:
            raise ContractError(f"base_width must be positive, got {self.base_width}")
        out = self.out_channels
        if out is None:
            out = 1 if kind.is_discriminator else (3 if kind.is_sr else 2)
            object.__setattr__(self, "out_channels", out)
        if kind.is_discriminator:
            if out != 1:
                raise ContractError("discriminators emit a single logit channel")
        elif out not in (2, 3):
            raise ContractError(f"generator out_channels must be 2 or 3, got {out}")
        if kind.is_sr:
            if self.scale not in (2, 4):
                raise ContractError(f"SR scale must be 2 or 4, got {self.scale}")
            if self.n_res_blocks < 0:
                raise ContractError("n_res_blocks must be >= 0")
        elif self.scale is not None:
            raise ContractError(f"scale is only meaningful for SR kinds, not {kind.value}")
        if kind is ModelKind.UNET_COLORIZER and not 1 <= self.encoder_stages <= 4:
            raise ContractError(
                f"encoder_stages must be in 1..4, got {self.encoder_stages}"
            )
        if kind is ModelKind.PATCH_DISCRIMINATOR and self.patch_layers < 1:
            raise ContractError("patch_layers must be >= 1")
        if kind is ModelKind.RESNET_DISCRIMINATOR and not 1 <= self.patch_layers <= 4:
            raise ContractError("resnet discriminator keeps 1..4 residual stages")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# building blocks


class BasicBlock(nn.Module):
    """ResNet-18 basic block; attribute names follow torchvision so weights load."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNetEncoder(nn.Module):
    """ResNet-18 stem plus the first ``stages`` residual stages, classifier dropped."""

    def __init__(self, in_channels: int, width: int = 64, stages: int = 4):
        super().__init__()
        self.stages = stages
        self.conv1 = nn.Conv2d(in_channels, width, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.channels = [width]
        prev = width
        for i in range(stages):
            ch = width * 2**i
            stride = 1 if i == 0 else 2
            layer = nn.Sequential(BasicBlock(prev, ch, stride), BasicBlock(ch, ch))
            self.add_module(f"layer{i + 1}", layer)
            self.channels.append(ch)
            prev = ch

    def forward(self, x) -> list[torch.Tensor]:
        x = self.relu(self.bn1(self.conv1(x)))
        feats = [x]
        x = self.maxpool(x)
        for i in range(self.stages):
            x = getattr(self, f"layer{i + 1}")(x)
            feats.append(x)
        return feats


def _conv_bn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, 1, 1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UpBlock(nn.Module):
    """Nearest upsample to the skip's size, concatenate, two conv-BN-ReLU."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Sequential(
            _conv_bn_relu(in_ch + skip_ch, out_ch), _conv_bn_relu(out_ch, out_ch)
        )

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.conv(torch.cat([x, skip], dim=1))


class UNetColorizer(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, width: int, stages: int):
        super().__init__()
        self.encoder = ResNetEncoder(in_channels, width, stages)
        enc = self.encoder.channels
        # decoder levels, deepest first: encoder skips, then the raw input
        skips = enc[-2::-1] + [in_channels]
        outs = enc[-2::-1] + [max(width // 2, 1)]
        self.decoder = nn.ModuleList()
        prev = enc[-1]
        for skip_ch, out_ch in zip(skips, outs):
            self.decoder.append(UpBlock(prev, skip_ch, out_ch))
            prev = out_ch
        self.head = nn.Conv2d(prev, out_channels, 1)

    def forward(self, x):
        feats = self.encoder(x)
        skips = feats[-2::-1] + [x]
        y = feats[-1]
        for block, skip in zip(self.decoder, skips):
            y = block(y, skip)
        return torch.tanh(self.head(y))


class PatchDiscriminator(nn.Module):
    """Conditional patch discriminator emitting a logit map.

    ``layers`` stride-2 4x4 convs followed by two stride-1 4x4 convs; each
    4x4 conv pads by one pixel.
    """

    def __init__(self, in_channels: int, width: int = 64, layers: int = 3):
        super().__init__()
        seq: list[nn.Module] = [
            nn.Conv2d(in_channels, width, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        mult = 1
        for n in range(1, layers):
            prev, mult = mult, min(2**n, 8)
            seq += [
                nn.Conv2d(width * prev, width * mult, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width * mult),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        prev, mult = mult, min(2**layers, 8)
        seq += [
            nn.Conv2d(width * prev, width * mult, 4, 1, 1, bias=False),
            nn.BatchNorm2d(width * mult),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(width * mult, 1, 4, 1, 1),
        ]
        self.model = nn.Sequential(*seq)

    def forward(self, x):
        return self.model(x)


class ResNetDiscriminator(nn.Module):
    """ResNet-50 trunk truncated after ``stages`` stages with a 1x1 logit head."""

    def __init__(self, in_channels: int, stages: int = 2):
        super().__init__()
        trunk = resnet50(weights=None)
        if in_channels != 3:
            trunk.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.stages = stages
        self.conv1, self.bn1, self.relu, self.maxpool = (
            trunk.conv1,
            trunk.bn1,
            trunk.relu,
            trunk.maxpool,
        )
        for i in range(stages):
            self.add_module(f"layer{i + 1}", getattr(trunk, f"layer{i + 1}"))
        self.head = nn.Conv2d(256 * 2**(stages - 1), 1, 1)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for i in range(self.stages):
            x = getattr(self, f"layer{i + 1}")(x)
        return self.head(x)


class SRResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.BatchNorm2d(width),
            nn.PReLU(width),
            nn.Conv2d(width, width, 3, 1, 1),
            nn.BatchNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class SRResNet(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, width: int, n_blocks: int, scale: int):
        super().__init__()
        self.head = nn.Sequential(nn.Conv2d(in_ch, width, 9, 1, 4), nn.PReLU(width))
        self.body = nn.Sequential(*[SRResBlock(width) for _ in range(n_blocks)])
        self.body_tail = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1), nn.BatchNorm2d(width)
        )
        up: list[nn.Module] = []
        for _ in range(int(math.log2(scale))):
            up += [nn.Conv2d(width, width * 4, 3, 1, 1), nn.PixelShuffle(2), nn.PReLU(width)]
        self.upsample = nn.Sequential(*up)
        self.tail = nn.Conv2d(width, out_ch, 9, 1, 4)

    def forward(self, x):
        x = self.head(x)
        x = x + self.body_tail(self.body(x))
        return self.tail(self.upsample(x))


class EDSRBlock(nn.Module):
    def __init__(self, width: int, res_scale: float = 0.1):
        super().__init__()
        self.res_scale = res_scale
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, 1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, 1, 1),
        )

    def forward(self, x):
        return x + self.res_scale * self.body(x)


class EDSR(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, width: int, n_blocks: int, scale: int):
        super().__init__()
        self.head = nn.Conv2d(in_ch, width, 3, 1, 1)
        self.body = nn.Sequential(*[EDSRBlock(width) for _ in range(n_blocks)])
        self.body_tail = nn.Conv2d(width, width, 3, 1, 1)
        up: list[nn.Module] = []
        for _ in range(int(math.log2(scale))):
            up += [nn.Conv2d(width, width * 4, 3, 1, 1), nn.PixelShuffle(2)]
        self.upsample = nn.Sequential(*up)
        self.tail = nn.Conv2d(width, out_ch, 3, 1, 1)

    def forward(self, x):
        x = self.head(x)
        x = x + self.body_tail(self.body(x))
        return self.tail(self.upsample(x))


def _wn_conv(*args, **kwargs) -> nn.Module:
    # weight norm fixes g = |v| when wrapped, so initialize first
    conv = nn.Conv2d(*args, **kwargs)
    _he_init(conv)
    return weight_norm(conv)


class WDSRBlock(nn.Module):
    """Wide-activation block: expand x6 before the ReLU, project back."""

    EXPANSION = 6

    def __init__(self, width: int):
        super().__init__()
        wide = width * self.EXPANSION
        self.body = nn.Sequential(
            _wn_conv(width, wide, 3, 1, 1),
            nn.ReLU(inplace=True),
            _wn_conv(wide, width, 3, 1, 1),
        )

    def forward(self, x):
        return x + self.body(x)


class WDSR(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, width: int, n_blocks: int, scale: int):
        super().__init__()
        self.head = _wn_conv(in_ch, width, 3, 1, 1)
        self.body = nn.Sequential(*[WDSRBlock(width) for _ in range(n_blocks)])
        self.tail = nn.Sequential(
            _wn_conv(width, out_ch * scale**2, 3, 1, 1),
            nn.PixelShuffle(scale),
        )
        self.skip = nn.Sequential(
            _wn_conv(in_ch, out_ch * scale**2, 5, 1, 2),
            nn.PixelShuffle(scale),
        )

    def forward(self, x):
        return self.tail(self.body(self.head(x))) + self.skip(x)


# ---------------------------------------------------------------------------
# construction


class ModelParams:
    """A built network: its spec plus the torch module holding the weights."""

    def __init__(self, spec: ModelSpec, module: nn.Module):
        self.spec = spec
        self.module = module

    @property
    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}

    @property
    def param_count(self) -> int:
        return sum(v.numel() for v in self.module.state_dict().values())

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def copy(self) -> "ModelParams":
        clone = _construct(self.spec)
        clone.module.to(self.dtype)
        clone.module.load_state_dict(self.module.state_dict())
        clone.module.train(self.module.training)
        return clone

    def __repr__(self) -> str:
        return f"ModelParams({self.spec.kind.value}, {self.param_count} values)"


def _he_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _make_module(spec: ModelSpec) -> nn.Module:
    kind = spec.kind
    if kind is ModelKind.UNET_COLORIZER:
        return UNetColorizer(
            spec.in_channels, spec.out_channels, spec.base_width, spec.encoder_stages
        )
    if kind is ModelKind.PATCH_DISCRIMINATOR:
        return PatchDiscriminator(spec.in_channels, spec.base_width, spec.patch_layers)
    if kind is ModelKind.RESNET_DISCRIMINATOR:
        return ResNetDiscriminator(spec.in_channels, spec.patch_layers)
    cls = {ModelKind.SRRESNET: SRResNet, ModelKind.EDSR: EDSR, ModelKind.WDSR: WDSR}[kind]
    return cls(
        spec.in_channels, spec.out_channels, spec.base_width, spec.n_res_blocks, spec.scale
    )


def _construct(spec: ModelSpec) -> ModelParams:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        module = _make_module(spec)
        if spec.kind is not ModelKind.WDSR:
            _he_init(module)
        if spec.kind is ModelKind.UNET_COLORIZER:
            # small projection keeps the initial tanh output near neutral chroma
            nn.init.normal_(module.head.weight, 0.0, 0.02)
    return ModelParams(spec, module)


def _read_state_dict(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    p = Path(path)
    if not p.is_file():
        raise WeightsError(f"weights file not found: {p}")
    with open(p, "rb") as fh:
        magic = fh.read(len(_MAGIC))
    if magic == _MAGIC:
        return {k: torch.from_numpy(v) for k, v in _read_container(p)[1].items()}
    try:
        state = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightsError(f"cannot read weights file {p}: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return state


def _load_backbone(target: nn.Module, path: str, prefixes: tuple[str, ...]) -> None:
    """Copy backbone arrays from a torchvision-style state dict into ``target``.

    A 3-channel stem is folded onto a different input width by summing (or
    tiling) over the input-channel axis.
    """
    source = _read_state_dict(path)
    own = target.state_dict()
    wanted = [k for k in own if k.startswith(prefixes)]
    missing = [k for k in wanted if k not in source]
    if missing:
        raise WeightsError(f"{path}: missing backbone arrays {missing[:5]}")
    update = {}
    for k in wanted:
        src = source[k].to(own[k].dtype)
        if k == "conv1.weight" and src.shape[1] != own[k].shape[1]:
            in_ch = own[k].shape[1]
            src = src.sum(dim=1, keepdim=True).repeat(1, in_ch, 1, 1) / in_ch
        if src.shape != own[k].shape:
            raise WeightsError(
                f"{path}: array {k} has shape {tuple(src.shape)}, "
                f"expected {tuple(own[k].shape)}"
            )
        update[k] = src
    target.load_state_dict(update, strict=False)


def _maybe_pretrained(params: ModelParams) -> ModelParams:
    spec = params.spec
    if not spec.pretrained_encoder:
        return params
    if not spec.encoder_weights:
        raise WeightsError("pretrained_encoder set but no encoder_weights path given")
    stages = spec.encoder_stages if spec.kind is ModelKind.UNET_COLORIZER else spec.patch_layers
    prefixes = ("conv1.", "bn1.") + tuple(f"layer{i + 1}." for i in range(stages))
    target = params.module.encoder if spec.kind is ModelKind.UNET_COLORIZER else params.module
    _load_backbone(target, spec.encoder_weights, prefixes)
    return params


def build_unet_generator(spec: ModelSpec) -> ModelParams:
    if spec.kind is not ModelKind.UNET_COLORIZER:
        raise ContractError(f"expected unet_colorizer spec, got {spec.kind.value}")
    return _maybe_pretrained(_construct(spec))


def build_patch_discriminator(spec: ModelSpec) -> ModelParams:
    if not spec.kind.is_discriminator:
        raise ContractError(f"expected a discriminator spec, got {spec.kind.value}")
    return _maybe_pretrained(_construct(spec))


def build_sr_generator(spec: ModelSpec) -> ModelParams:
    if not spec.kind.is_sr:
        raise ContractError(f"expected an SR spec, got {spec.kind.value}")
    return _construct(spec)


def build_model(spec: ModelSpec) -> ModelParams:
    if spec.kind is ModelKind.UNET_COLORIZER:
        return build_unet_generator(spec)
    if spec.kind.is_discriminator:
        return build_patch_discriminator(spec)
    return build_sr_generator(spec)


def patch_output_size(size: int, patch_layers: int) -> int:
    """Closed-form spatial size of the patch discriminator's logit map."""
    for _ in range(patch_layers):
        size = (size + 2 - 4) // 2 + 1
    for _ in range(2):
        size = size + 2 - 4 + 1
    return size


# ---------------------------------------------------------------------------
# inference


def forward(params: ModelParams, batch) -> np.ndarray:
    """Deterministic inference on a channels-last ``B x H x W x C`` batch.

    SR outputs are clamped to [0, 1]; discriminators return raw logits.
    """
    x = torch.as_tensor(np.array(batch) if not torch.is_tensor(batch) else batch)
    if x.ndim != 4:
        raise ContractError(f"batch must be B x H x W x C, got shape {tuple(x.shape)}")
    if x.shape[-1] != params.spec.in_channels:
        raise ContractError(
            f"expected {params.spec.in_channels} input channels, got {x.shape[-1]}"
        )
    module = params.module
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            y = module(x.to(params.dtype).permute(0, 3, 1, 2).contiguous())
    finally:
        module.train(was_training)
    if params.spec.kind.is_sr:
        y = y.clamp(0.0, 1.0)
    return y.permute(0, 2, 3, 1).numpy()


# ---------------------------------------------------------------------------
# weights container
#
# layout: MAGIC | u64 header length | JSON header | raw arrays | sha256(all prior bytes)

_MAGIC = b"ASTROGAN-W1\n"


def save_params(params: ModelParams, path: str | os.PathLike) -> None:
    arrays = params.arrays
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"spec": params.spec.to_dict(), "arrays": entries}, sort_keys=True
    ).encode()
    body = _MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def _read_container(path: Path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(_MAGIC) + 8 + 32 or not data.startswith(_MAGIC):
        raise ChecksumError(f"{path}: not a complete weights file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupt or truncated)")
    (hlen,) = struct.unpack_from("<Q", body, len(_MAGIC))
    start = len(_MAGIC) + 8
    header = json.loads(body[start : start + hlen])
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        raw = body[lo : lo + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return ModelSpec.from_dict(header["spec"]), arrays


def load_params(path: str | os.PathLike, spec: ModelSpec | None = None) -> ModelParams:
    """Load a weights file; with ``spec`` given, reject files built from another spec."""
    p = Path(path)
    if not p.is_file():
        raise WeightsError(f"weights file not found: {p}")
    found, arrays = _read_container(p)
    if spec is not None and spec != found:
        raise SpecMismatchError(spec, found)
    params = _construct(found)
    dtypes = {a.dtype for k, a in arrays.items() if a.dtype.kind == "f"}
    if dtypes == {np.dtype("<f8")}:
        params.module.double()
    params.module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return params
