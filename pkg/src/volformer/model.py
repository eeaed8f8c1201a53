"""Model assembly, multimodal fusion, cost estimation, and checkpoints.

The volumetric network is: per-volume data normalization, a 7x7x7 stride-2
stem conv + BN + ReLU, four stages of residual conv blocks each optionally
followed by a global attention block (shallow token/channel mixing or
multi-head self-attention), global average pooling, and a linear classifier
ending in softmax.

Checkpoints are a little-endian container: magic ``VFCK``, u32 format
version, u32 metadata length + UTF-8 JSON metadata (model kind and config
echo), u32 tensor count, then per tensor: u16 name length + name, u8 dtype
code (0 = float32, 1 = float64), u8 rank, u32 extents, raw row-major payload,
u32 CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DataError, ShapeError, StateError
from .layers import (
    MLP,
    BatchNormLayer,
    Conv3dLayer,
    DataNormLayer,
    DGABlock,
    ResidualConvBlock,
    SGABlock,
)
from .tensor import Tensor, kaiming_uniform

CHECKPOINT_MAGIC = b"VFCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}

ATTENTION_KINDS = ("S", "D", "none")


def _ceil_div(extent: int, stride: int) -> int:
    return -(-extent // stride)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. ``full()`` and ``desk()`` are the presets."""

    input_extent: tuple[int, int, int] = (64, 72, 64)
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stage_blocks: tuple[int, ...] = (2, 2, 2, 2)
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    attention_plan: tuple[str, ...] = ("S", "S", "D", "D")
    class_count: int = 2
    stem_channels: int | None = None
    use_data_norm: bool = True
    data_norm_eps: float = 1e-6
    sga_spatial_hidden: int = 256
    sga_channel_expand: int = 2
    dga_heads: int = 8
    dga_ff_expand: int = 4
    dga_pos_std: float = 0.02
    dga_token_budget: int = 4096
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    use_smri: bool = False
    use_fc: bool = False
    use_pheno: bool = False
    fc_input_dim: int = 40000
    fc_upper_triangle: bool = False
    pheno_input_dim: int = 4
    mlp_hidden: tuple[int, int] = (512, 256)
    mlp_out: int = 128
    scale_preset: str = "full"

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides) if overrides else cls()

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small preset with the same topology; runs property tests in seconds."""
        cfg = cls(
            input_extent=(16, 18, 16),
            stage_channels=(8, 16, 32, 64),
            sga_spatial_hidden=32,
            fc_input_dim=64,
            mlp_hidden=(32, 16),
            mlp_out=8,
            scale_preset="desk",
        )
        return replace(cfg, **overrides) if overrides else cfg

    # -- derived values -------------------------------------------------

    def resolved_stem_channels(self) -> int:
        if self.stem_channels is not None:
            return self.stem_channels
        if not self.stage_channels:
            raise ConfigError("zero-stage config requires explicit stem_channels")
        return self.stage_channels[0]

    def feature_channels(self) -> int:
        return self.stage_channels[-1] if self.stage_channels else self.resolved_stem_channels()

    def stage_extents(self) -> list[tuple[int, int, int]]:
        """Spatial extents after the stem and after each stage, in order."""
        e = tuple(_ceil_div(x, 2) for x in self.input_extent)
        chain = [e]
        for s in self.stage_strides:
            e = tuple(_ceil_div(x, s) for x in e)
            chain.append(e)
        return chain

    def fc_feature_dim(self) -> int:
        return self.fc_input_dim

    def validate(self) -> None:
        n = len(self.stage_channels)
        for name, tup in (("stage_blocks", self.stage_blocks),
                          ("stage_strides", self.stage_strides),
                          ("attention_plan", self.attention_plan)):
            if len(tup) != n:
                raise ConfigError(
                    f"{name} has {len(tup)} entries but stage_channels has {n}")
        if len(self.input_extent) != 3 or any(e < 1 for e in self.input_extent):
            raise ConfigError(f"input_extent must be three positive ints, got {self.input_extent}")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ConfigError(f"stage strides must be 1 or 2, got {self.stage_strides}")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError(f"every stage needs at least one block, got {self.stage_blocks}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage channels must be positive, got {self.stage_channels}")
        for i, kind in enumerate(self.attention_plan):
            if kind not in ATTENTION_KINDS:
                raise ConfigError(
                    f"attention_plan[{i}] = {kind!r}; expected one of {ATTENTION_KINDS}")
            if kind == "D" and self.stage_channels[i] % self.dga_heads != 0:
                raise ConfigError(
                    f"stage {i + 1} channels {self.stage_channels[i]} not divisible "
                    f"by {self.dga_heads} heads")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.mlp_hidden) != 2 or any(h < 1 for h in self.mlp_hidden):
            raise ConfigError(f"mlp_hidden must be two positive widths, got {self.mlp_hidden}")
        if self.use_fc and self.fc_input_dim < 1:
            raise ConfigError("fc_input_dim must be positive when use_fc is set")
        if self.use_pheno and self.pheno_input_dim < 1:
            raise ConfigError("pheno_input_dim must be positive when use_pheno is set")
        if self.scale_preset not in ("full", "desk"):
            raise ConfigError(f"unknown scale_preset {self.scale_preset!r}")
        if not self.stage_channels:
            self.resolved_stem_channels()

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"model config must be an object, got {type(doc).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            v = doc[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        preset = kwargs.pop("scale_preset", "full")
        if preset == "desk":
            base = cls.desk()
        elif preset == "full":
            base = cls()
        else:
            raise ConfigError(f"unknown scale_preset {preset!r}")
        try:
            cfg = replace(base, **kwargs)
        except TypeError as err:
            raise ConfigError(str(err)) from None
        cfg.validate()
        return cfg


def parse_attention_plan(text: str) -> tuple[str, ...]:
    """Parse a plan like "S-S-D-D" into the attention_plan tuple."""
    plan = tuple(part.strip() for part in text.split("-"))
    for kind in plan:
        if kind not in ATTENTION_KINDS:
            raise ConfigError(f"bad attention plan entry {kind!r} in {text!r}")
    return plan


class VolumeEncoder:
    """Volume to pooled feature vector: data norm, stem, stages, attention, pool."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        stem_ch = cfg.resolved_stem_channels()
        self.data_norm = DataNormLayer(cfg.data_norm_eps) if cfg.use_data_norm else None
        self.stem = Conv3dLayer(1, stem_ch, 7, 2, 3, rng, dtype)
        self.stem_bn = BatchNormLayer(stem_ch, cfg.bn_eps, cfg.bn_momentum, dtype)
        extents = cfg.stage_extents()
        self.stages: list[list[ResidualConvBlock]] = []
        self.attention: list[SGABlock | DGABlock | None] = []
        in_ch = stem_ch
        for i, out_ch in enumerate(cfg.stage_channels):
            blocks = []
            for b in range(cfg.stage_blocks[i]):
                stride = cfg.stage_strides[i] if b == 0 else 1
                blocks.append(ResidualConvBlock(in_ch, out_ch, stride, rng, dtype,
                                                cfg.bn_eps, cfg.bn_momentum))
                in_ch = out_ch
            self.stages.append(blocks)
            tokens = int(np.prod(extents[i + 1]))
            kind = cfg.attention_plan[i]
            if kind == "S":
                self.attention.append(SGABlock(tokens, out_ch, cfg.sga_spatial_hidden,
                                               cfg.sga_channel_expand, rng, dtype))
            elif kind == "D":
                if tokens > cfg.dga_token_budget:
                    warnings.warn(
                        f"stage {i + 1} self-attention over {tokens} tokens exceeds "
                        f"the {cfg.dga_token_budget}-token budget; cost grows "
                        f"quadratically in token count", RuntimeWarning)
                self.attention.append(DGABlock(tokens, out_ch, cfg.dga_heads,
                                               cfg.dga_ff_expand, cfg.dga_pos_std,
                                               rng, dtype))
            else:
                self.attention.append(None)
        self.out_channels = in_ch

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(self.cfg.input_extent):
            raise ShapeError(
                f"encoder expects (B, 1, {', '.join(map(str, self.cfg.input_extent))}) "
                f"input, got {tuple(x.shape)}; pad volumes to the model extent first")

    @staticmethod
    def _to_tokens(x: Tensor) -> Tensor:
        b, c, d, h, w = x.shape
        return T.reshape(T.transpose(x, (0, 2, 3, 4, 1)), (b, d * h * w, c))

    @staticmethod
    def _from_tokens(x: Tensor, extents: tuple[int, int, int]) -> Tensor:
        b, n, c = x.shape
        d, h, w = extents
        return T.transpose(T.reshape(x, (b, d, h, w, c)), (0, 4, 1, 2, 3))

    def forward(self, x, training: bool, trace: dict | None = None) -> Tensor:
        x = T._as_tensor(x)
        if x.dtype != np.dtype(self.dtype):
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        self._check_input(x)
        if self.data_norm is not None:
            x = self.data_norm.forward(x)
        h = T.relu(self.stem_bn.forward(self.stem.forward(x), training))
        if trace is not None:
            trace["stem"] = h
        extents = self.cfg.stage_extents()
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                h = block.forward(h, training)
            if trace is not None:
                trace[f"stage{i + 1}.conv"] = h
            attn = self.attention[i]
            if attn is not None:
                tokens = self._to_tokens(h)
                tokens = attn.forward(tokens)
                h = self._from_tokens(tokens, extents[i + 1])
            if trace is not None:
                trace[f"stage{i + 1}"] = h
        return T.avg_pool_global(h)

    def params(self):
        out = [("stem.weight", self.stem.weight)]
        out += [(f"stem_bn.{n}", t) for n, t in self.stem_bn.params()]
        for i, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                out += [(f"stage{i + 1}.block{b}.{n}", t) for n, t in block.params()]
            attn = self.attention[i]
            if attn is not None:
                out += [(f"stage{i + 1}.attn.{n}", t) for n, t in attn.params()]
        return out

    def norm_layers(self):
        out = [("stem_bn", self.stem_bn)]
        for i, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                out += [(f"stage{i + 1}.block{b}.{n}", layer)
                        for n, layer in block.norm_layers()]
        return out

    def layer_names(self) -> list[str]:
        """Trace keys in network order; ``stageN.conv`` is the stage's conv
        output before any global mixing block, ``stageN`` the stage output."""
        names = ["stem"]
        for i in range(len(self.stages)):
            names += [f"stage{i + 1}.conv", f"stage{i + 1}"]
        return names


class BrainFormer:
    """Single-volume classifier: encoder plus linear head ending in softmax."""

    kind = "brainformer"

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder = VolumeEncoder(cfg, rng, dtype)
        feat = self.encoder.out_channels
        self.classifier_weight = Tensor(
            kaiming_uniform((cfg.class_count, feat), feat, rng, dtype),
            requires_grad=True)

    def forward_logits(self, volumes, training: bool, trace: dict | None = None,
                       **_unused) -> Tensor:
        feat = self.encoder.forward(volumes, training, trace)
        return T.matmul(feat, T.transpose(self.classifier_weight))

    def forward_probs(self, volumes, **extras) -> Tensor:
        with T.no_grad():
            return T.softmax(self.forward_logits(volumes, training=False, **extras), -1)

    def forward_trace(self, volumes, training: bool = False, **extras):
        trace: dict = {}
        logits = self.forward_logits(volumes, training, trace=trace, **extras)
        return logits, trace

    def params(self):
        out = [(f"encoder.{n}", t) for n, t in self.encoder.params()]
        out.append(("classifier.weight", self.classifier_weight))
        return out

    def norm_layers(self):
        return [(f"encoder.{n}", layer) for n, layer in self.encoder.norm_layers()]

    def trace_layer_names(self) -> list[str]:
        return self.encoder.layer_names()


class FusionModel:
    """Multimodal classifier over volume trunks and vector MLP branches.

    Branch order is fixed: fMRI volumes, then (if enabled) sMRI volumes, the
    flattened functional-connectivity vector, and the phenotype vector. The
    concatenated feature width is pooled-channels per volume branch plus
    ``mlp_out`` per vector branch.
    """

    kind = "fusion"

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoder_fmri = VolumeEncoder(cfg, rng, dtype)
        self.encoder_smri = VolumeEncoder(cfg, rng, dtype) if cfg.use_smri else None
        self.mlp_fc = (MLP(cfg.fc_feature_dim(), cfg.mlp_hidden, cfg.mlp_out, rng, dtype)
                       if cfg.use_fc else None)
        self.mlp_pheno = (MLP(cfg.pheno_input_dim, cfg.mlp_hidden, cfg.mlp_out, rng, dtype)
                          if cfg.use_pheno else None)
        feat = self.encoder_fmri.out_channels
        if cfg.use_smri:
            feat += self.encoder_smri.out_channels
        feat += cfg.mlp_out * (int(cfg.use_fc) + int(cfg.use_pheno))
        self.feature_dim = feat
        self.classifier_weight = Tensor(
            kaiming_uniform((cfg.class_count, feat), feat, rng, dtype),
            requires_grad=True)

    def forward_logits(self, volumes, training: bool, smri=None, fc=None, pheno=None,
                       trace: dict | None = None) -> Tensor:
        if volumes is None:
            raise DataError("fusion forward requires fMRI volumes")
        parts = [self.encoder_fmri.forward(volumes, training, trace)]
        if self.encoder_smri is not None:
            if smri is None:
                raise DataError("smri branch is enabled but the batch has no smri volumes")
            parts.append(self.encoder_smri.forward(smri, training))
        if self.mlp_fc is not None:
            if fc is None:
                raise DataError("fc branch is enabled but the batch has no fc vectors")
            parts.append(self.mlp_fc.forward(self._vec(fc, self.cfg.fc_feature_dim(), "fc")))
        if self.mlp_pheno is not None:
            if pheno is None:
                raise DataError("pheno branch is enabled but the batch has no phenotype vectors")
            parts.append(self.mlp_pheno.forward(
                self._vec(pheno, self.cfg.pheno_input_dim, "pheno")))
        feats = T.concat(parts, axis=-1)
        return T.matmul(feats, T.transpose(self.classifier_weight))

    def _vec(self, value, dim: int, branch: str) -> Tensor:
        v = T._as_tensor(value)
        if v.dtype != np.dtype(self.dtype):
            v = Tensor(v.data.astype(self.dtype), requires_grad=v.requires_grad)
        if v.ndim != 2 or v.shape[1] != dim:
            raise ShapeError(f"{branch} branch expects (B, {dim}) input, got {v.shape}")
        return v

    def forward_probs(self, volumes, **extras) -> Tensor:
        with T.no_grad():
            return T.softmax(self.forward_logits(volumes, training=False, **extras), -1)

    def forward_trace(self, volumes, training: bool = False, **extras):
        trace: dict = {}
        logits = self.forward_logits(volumes, training, trace=trace, **extras)
        return logits, trace

    def params(self):
        out = [(f"encoder_fmri.{n}", t) for n, t in self.encoder_fmri.params()]
        if self.encoder_smri is not None:
            out += [(f"encoder_smri.{n}", t) for n, t in self.encoder_smri.params()]
        if self.mlp_fc is not None:
            out += [(f"mlp_fc.{n}", t) for n, t in self.mlp_fc.params()]
        if self.mlp_pheno is not None:
            out += [(f"mlp_pheno.{n}", t) for n, t in self.mlp_pheno.params()]
        out.append(("classifier.weight", self.classifier_weight))
        return out

    def norm_layers(self):
        out = [(f"encoder_fmri.{n}", layer)
               for n, layer in self.encoder_fmri.norm_layers()]
        if self.encoder_smri is not None:
            out += [(f"encoder_smri.{n}", layer)
                    for n, layer in self.encoder_smri.norm_layers()]
        return out

    def trace_layer_names(self) -> list[str]:
        return self.encoder_fmri.layer_names()


def build_brainformer(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> BrainFormer:
    return BrainFormer(cfg, seed, dtype)


def build_fusion(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> FusionModel:
    return FusionModel(cfg, seed, dtype)


def forward_volume(model, volume) -> Tensor:
    """Probability vector for one unbatched (D, H, W) volume, eval mode."""
    v = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if v.ndim != 3:
        raise ShapeError(f"forward_volume expects a (D, H, W) volume, got {v.shape}")
    if tuple(v.shape) != tuple(model.cfg.input_extent):
        raise ShapeError(
            f"volume extents {tuple(v.shape)} do not match model input "
            f"{tuple(model.cfg.input_extent)}; pad the volume to the model extent first")
    probs = model.forward_probs(v[None, None].astype(model.dtype))
    return T.reshape(probs, (model.cfg.class_count,))


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass
class CostReport:
    flops: int
    peak_activation_bytes: int
    parameter_count: int
    per_layer: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "flops": self.flops,
            "peak_activation_bytes": self.peak_activation_bytes,
            "parameter_count": self.parameter_count,
        }


def estimate_cost(cfg: ModelConfig, bytes_per_scalar: int = 4) -> CostReport:
    """Analytic per-layer multiply-accumulate counts and activation sizes.

    Counts are per single input volume (batch 1). The activation figure is
    the largest single live tensor any layer produces, including attention
    masks. Elementwise work (ReLU, BN, pooling, data norm) is not counted as
    MACs; conv, matmul-style mixing, and attention contractions are.
    """
    cfg.validate()
    macs = 0
    params = 0
    peak = 0
    layers = []

    def record(name: str, layer_macs: int, act_bytes: int, layer_params: int):
        nonlocal macs, params, peak
        macs += layer_macs
        params += layer_params
        peak = max(peak, act_bytes)
        layers.append((name, layer_macs, act_bytes, layer_params))

    in_vox = int(np.prod(cfg.input_extent))
    if cfg.use_data_norm:
        record("data_norm", 0, in_vox * bytes_per_scalar, 0)
    extents = cfg.stage_extents()
    stem_ch = cfg.resolved_stem_channels()
    stem_vox = int(np.prod(extents[0]))
    record("stem", stem_ch * 1 * 7 ** 3 * stem_vox,
           stem_ch * stem_vox * bytes_per_scalar,
           stem_ch * 343 + 2 * stem_ch)

    in_ch = stem_ch
    for i, out_ch in enumerate(cfg.stage_channels):
        vox = int(np.prod(extents[i + 1]))
        act = out_ch * vox * bytes_per_scalar
        for b in range(cfg.stage_blocks[i]):
            stride = cfg.stage_strides[i] if b == 0 else 1
            block_macs = out_ch * in_ch * 27 * vox + out_ch * out_ch * 27 * vox
            block_params = (out_ch * in_ch * 27 + out_ch * out_ch * 27 + 4 * out_ch)
            if stride != 1 or in_ch != out_ch:
                block_macs += out_ch * in_ch * vox
                block_params += out_ch * in_ch + 2 * out_ch
            record(f"stage{i + 1}.block{b}", block_macs, act, block_params)
            in_ch = out_ch
        kind = cfg.attention_plan[i]
        n = vox
        c = out_ch
        if kind == "S":
            hs = cfg.sga_spatial_hidden
            hc = cfg.sga_channel_expand * c
            attn_macs = 2 * n * c * (hs + hc)
            attn_params = 2 * n * hs + 2 * c * hc
            record(f"stage{i + 1}.attn[S]", attn_macs, act, attn_params)
        elif kind == "D":
            heads = cfg.dga_heads
            hd = c // heads
            ff = cfg.dga_ff_expand * c
            attn_macs = (n * c * 3 * hd * heads          # qkv projections
                         + 2 * n * n * hd * heads        # scores and weighted sum
                         + n * heads * hd * c            # output projection
                         + 2 * n * c * ff)               # feed-forward
            mask_bytes = heads * n * n * bytes_per_scalar
            attn_params = (n * c + heads * c * 3 * hd + heads * hd * c
                           + c * ff + ff + ff * c + c)
            record(f"stage{i + 1}.attn[D]", attn_macs, max(act, mask_bytes), attn_params)

    feat = cfg.feature_channels()
    record("avg_pool", 0, feat * bytes_per_scalar, 0)
    record("classifier", feat * cfg.class_count,
           cfg.class_count * bytes_per_scalar, feat * cfg.class_count)
    return CostReport(flops=2 * macs, peak_activation_bytes=peak,
                      parameter_count=params, per_layer=layers)


# ---------------------------------------------------------------------------
# checkpoint I/O


def _state_entries(model) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.params()]
    for name, layer in model.norm_layers():
        if layer.stats.initialized():
            out.append((f"{name}.running_mean", np.asarray(layer.stats.mean)))
            out.append((f"{name}.running_var", np.asarray(layer.stats.var)))
    return out


def save_checkpoint(path, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None

    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(
                f"checkpoint truncated while reading {what} at byte {offset}")
        piece = blob[offset:offset + n]
        offset += n
        return piece

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r} (byte offset 0)")
    version, = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_len, = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint metadata: {err}") from None
    count, = struct.unpack("<I", take(4, "tensor count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, "tensor header"))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"tensor {name!r} payload")
        stored_crc, = struct.unpack("<I", take(4, "tensor checksum"))
        if (zlib.crc32(payload) & 0xFFFFFFFF) != stored_crc:
            raise CheckpointError(f"tensor {name!r} failed its checksum")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if offset != len(blob):
        raise CheckpointError(
            f"{len(blob) - offset} trailing bytes after checkpoint payload")
    return meta, arrays


def save_model(model, path, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "format": "volformer-checkpoint",
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, meta, _state_entries(model))


def load_model(path):
    """Rebuild a model from a checkpoint; forward passes are bit-identical."""
    meta, arrays = load_checkpoint(path)
    if "kind" not in meta or "config" not in meta:
        raise CheckpointError("checkpoint metadata is missing kind/config")
    cfg = ModelConfig.from_dict(meta["config"])
    if meta["kind"] == BrainFormer.kind:
        model = BrainFormer(cfg, seed=0)
    elif meta["kind"] == FusionModel.kind:
        model = FusionModel(cfg, seed=0)
    else:
        raise CheckpointError(f"unknown model kind {meta['kind']!r}")
    load_state(model, arrays)
    return model, meta


def load_state(model, arrays: dict[str, np.ndarray]) -> None:
    remaining = dict(arrays)
    for name, t in model.params():
        if name not in remaining:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr = remaining.pop(name)
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
    for name, layer in model.norm_layers():
        mean_key = f"{name}.running_mean"
        var_key = f"{name}.running_var"
        if mean_key in remaining or var_key in remaining:
            if not (mean_key in remaining and var_key in remaining):
                raise CheckpointError(f"running stats for {name!r} are incomplete")
            layer.stats.mean = remaining.pop(mean_key).astype(np.float64)
            layer.stats.var = remaining.pop(var_key).astype(np.float64)
    if remaining:
        raise CheckpointError(
            f"checkpoint contains unknown tensors: {sorted(remaining)[:4]}")
