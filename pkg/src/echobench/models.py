"""Architecture builders: I3D variants, Two-Stream, Fusion topologies and CNN-RNN.

A :class:`Model` is an ordered list of named nodes over declared inputs
(``spatial``: raw clip, ``temporal``: frame differences, ``frames``:
three-channel clip for the per-frame CNN). Every model ends in one scalar
per sample.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data
from .layers import (Context, ConvBlock, Conv, Dense, Dropout, Flatten, GlobalAvgPool, Module, Pool,
                     PerFrame, Recurrent, Sequential, channel_concat)
from .tensor import NonFiniteError, ShapeError, Tensor, add, concat, scale, take

FAMILIES = ("I3D_ORIGINAL", "I3D_MINI", "TWO_STREAM", "FUSION_COMBINATION", "FUSION_NEW_COMBINATION",
            "FUSION_DUAL_INPUT", "FUSION_DUAL_TRUNCATED", "FUSION_SINGLE_INPUT", "CNN_RNN_SCRATCH")
NORM_KINDS = ("batch", "layer", "mixed")
CONV2_KERNELS = {
    "1x1x1": [(1, 1, 1)],
    "3x1x1": [(3, 1, 1)],
    "3x3x3": [(3, 3, 3)],
    "double_3x3x3": [(3, 3, 3), (3, 3, 3)],
}
HEAD_VARIANTS = ("OG", "A", "B", "C")
RNN_CELLS = ("GRU", "LSTM")

# Inception-v1 widths: (1x1, (reduce, 3x3), (reduce, stacked 3x3), pool projection)
IM3_WIDTHS = (64, (96, 128), (16, 32), 32)
IM4_WIDTHS = (192, (96, 208), (16, 48), 64)
IM5_WIDTHS = (256, (160, 320), (32, 128), 128)

STEM_WIDTHS = (64, 64, 192)
TWO_STREAM_WIDTHS = (32, 64, 128)
TASK_CONV_WIDTH = 128
RNN_HIDDEN = 64
HEAD_C_HIDDEN = 128

# conv2 ablations apply to families with a 3-D I3D stem
STEM_FAMILIES = frozenset(FAMILIES) - {"TWO_STREAM", "CNN_RNN_SCRATCH"}
# families whose head acts on a feature map and so supports the OG/A/B/C variants
FEATURE_MAP_HEADS = frozenset({"I3D_ORIGINAL", "I3D_MINI", "FUSION_COMBINATION",
                               "FUSION_NEW_COMBINATION", "FUSION_DUAL_TRUNCATED"})


class ConfigError(ValueError):
    """A model or experiment configuration violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    family: str = "I3D_MINI"
    norm_kind: str = "batch"
    conv2_kernel: str = "1x1x1"
    head_variant: str = "A"
    rnn_cell: str = "GRU"
    width_multiplier: float = 1.0
    frames: int = 28
    height: int = 112
    width: int = 112

    def validate(self) -> "ModelConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"family: unknown value {self.family!r}; expected one of {FAMILIES}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind: unknown value {self.norm_kind!r}")
        if self.conv2_kernel not in CONV2_KERNELS:
            raise ConfigError(f"conv2_kernel: unknown value {self.conv2_kernel!r}")
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigError(f"head_variant: unknown value {self.head_variant!r}")
        if self.rnn_cell not in RNN_CELLS:
            raise ConfigError(f"rnn_cell: unknown value {self.rnn_cell!r}")
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError("width_multiplier: must be in (0, 1]")
        if self.norm_kind == "mixed" and self.family != "CNN_RNN_SCRATCH":
            raise ConfigError("norm_kind: mixed normalization is only valid for CNN_RNN_SCRATCH")
        if self.conv2_kernel != "1x1x1" and self.family not in STEM_FAMILIES:
            raise ConfigError(f"conv2_kernel: {self.family} has no 3-D I3D stem")
        if self.head_variant != "A" and self.family not in FEATURE_MAP_HEADS:
            raise ConfigError(f"head_variant: {self.family} only supports head A")
        if self.frames < 2 or self.height < 4 or self.width < 4:
            raise ConfigError("frames/height/width: clip too small (need T >= 2, H, W >= 4)")
        return self

    @property
    def uses_temporal(self) -> bool:
        return self.family in ("TWO_STREAM", "FUSION_COMBINATION", "FUSION_NEW_COMBINATION",
                               "FUSION_DUAL_INPUT", "FUSION_DUAL_TRUNCATED")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


def family_defaults(family: str, rnn_cell: str = "GRU") -> dict:
    """Training defaults per family: initial lr, batch size, head dropout."""
    lr, batch, drop = 1e-3, 2, 0.5
    if family == "TWO_STREAM":
        lr, batch, drop = 5e-4, 16, 0.05
    elif family in ("FUSION_COMBINATION", "FUSION_NEW_COMBINATION"):
        batch = 16
    elif family in ("FUSION_DUAL_INPUT", "FUSION_DUAL_TRUNCATED", "FUSION_SINGLE_INPUT"):
        lr, batch = 1e-4, 4
    elif family == "CNN_RNN_SCRATCH":
        batch, drop = (8 if rnn_cell == "LSTM" else 4), 0.4
    return {"initial_lr": lr, "batch_size": batch, "dropout_rate": drop}


def _scaled(c: int, w: float) -> int:
    return max(1, int(round(c * w)))


class _Builder:
    """Carries rng/dtype/dimensionality while constructing blocks."""

    def __init__(self, rng: np.random.Generator, dtype, dims: int = 3):
        self.rng, self.dtype, self.dims = rng, dtype, dims

    def k(self, kernel: Sequence[int]) -> tuple[int, ...]:
        return tuple(kernel) if self.dims == 3 else tuple(kernel[1:])

    def block(self, cin, cout, kernel, norm):
        return ConvBlock(cin, cout, self.k(kernel), norm, self.rng, self.dtype)


class Stem(Sequential):
    def __init__(self, conv_a, pool_a, conv2: Sequence[ConvBlock], conv_b, pool_b):
        super().__init__(conv_a, pool_a, *conv2, conv_b, pool_b)
        self.conv2_blocks = list(conv2)
        self.out_channels = conv_b.out_channels


def build_stem(norm_kind: str = "batch", conv2_kernel: str = "1x1x1", width_multiplier: float = 1.0,
               in_channels: int = 1, rng: np.random.Generator | None = None, dtype=np.float64,
               dims: int = 3) -> Stem:
    """Conv 3x3x3 -> MaxPool 1x2x2 -> conv2 -> Conv 3x3x3 -> MaxPool 1x2x2, each conv with norm+ReLU."""
    if conv2_kernel not in CONV2_KERNELS:
        raise ConfigError(f"unknown conv2 kernel {conv2_kernel!r}")
    if dims == 2 and conv2_kernel == "3x1x1":
        raise ConfigError("3x1x1 conv2 kernel is not defined for 2-D stems")
    b = _Builder(rng or np.random.default_rng(0), dtype, dims)
    c_a, c_2, c_b = (_scaled(c, width_multiplier) for c in STEM_WIDTHS)
    conv_a = b.block(in_channels, c_a, (3, 3, 3), norm_kind)
    conv2, cin = [], c_a
    for kernel in CONV2_KERNELS[conv2_kernel]:
        conv2.append(b.block(cin, c_2, kernel, norm_kind))
        cin = c_2
    conv_b = b.block(cin, c_b, (3, 3, 3), norm_kind)
    pool = b.k((1, 2, 2))
    return Stem(conv_a, Pool(pool), conv2, conv_b, Pool(pool))


class InceptionModule(Module):
    """Four parallel branches concatenated along channels."""

    def __init__(self, branch_a, branch_b, branch_c, branch_d):
        super().__init__()
        self.branch_a, self.branch_b, self.branch_c, self.branch_d = branch_a, branch_b, branch_c, branch_d
        self.out_channels = sum(br.layers[-1].out_channels for br in self.branches)

    @property
    def branches(self):
        return (self.branch_a, self.branch_b, self.branch_c, self.branch_d)

    def forward(self, x, ctx):
        return concat([br(x, ctx) for br in self.branches], axis=-1)

    def out_shape(self, shape):
        return tuple(shape[:-1]) + (self.out_channels,)


def build_inception_module(branch_widths=IM3_WIDTHS, norm_kind: str = "batch", in_channels: int = 192,
                           width_multiplier: float = 1.0, rng: np.random.Generator | None = None,
                           dtype=np.float64, dims: int = 3) -> InceptionModule:
    """(a) 1x1x1; (b) 1x1x1 -> 3x3x3; (c) 1x1x1 -> 3x3x3 -> 3x3x3; (d) max-pool -> 1x1x1."""
    a, (b_red, b_out), (c_red, c_out), d = branch_widths
    if min(a, b_red, b_out, c_red, c_out, d) <= 0:
        raise ConfigError(f"inception branch widths must be positive, got {branch_widths}")
    a, b_red, b_out, c_red, c_out, d = (_scaled(v, width_multiplier) for v in (a, b_red, b_out, c_red, c_out, d))
    bld = _Builder(rng or np.random.default_rng(0), dtype, dims)
    one, three = (1, 1, 1), (3, 3, 3)
    return InceptionModule(
        Sequential(bld.block(in_channels, a, one, norm_kind)),
        Sequential(bld.block(in_channels, b_red, one, norm_kind), bld.block(b_red, b_out, three, norm_kind)),
        Sequential(bld.block(in_channels, c_red, one, norm_kind), bld.block(c_red, c_out, three, norm_kind),
                   bld.block(c_out, c_out, three, norm_kind)),
        Sequential(Pool(bld.k(three), bld.k(one), "max", "same"), bld.block(in_channels, d, one, norm_kind)),
    )


def build_head(variant: str, in_shape: tuple[int, ...], dropout_rate: float, rng, dtype,
               dims: int = 3) -> Sequential:
    """Regression heads; every variant ends in a linear map to one scalar."""
    channels = in_shape[-1]
    if variant == "OG":
        return Sequential(Dropout(dropout_rate), Flatten(), Dense(int(np.prod(in_shape)), 1, rng, dtype))
    if variant == "A":
        return Sequential(GlobalAvgPool(), Dropout(dropout_rate), Dense(channels, 1, rng, dtype))
    if variant == "B":
        return Sequential(Dropout(dropout_rate), Conv(channels, 1, (1,) * dims, rng, dtype), GlobalAvgPool())
    if variant == "C":
        return Sequential(GlobalAvgPool(), Dense(channels, HEAD_C_HIDDEN, rng, dtype, "relu"),
                          Dropout(dropout_rate), Dense(HEAD_C_HIDDEN, 1, rng, dtype))
    raise ConfigError(f"unknown head variant {variant!r}")


class VectorConcat(Module):
    def forward(self, xs, ctx):
        return concat(xs, axis=-1)

    def out_shape(self, shapes):
        return (sum(s[-1] for s in shapes),)


class FeatureConcat(Module):
    """Channel concatenation of feature maps, cropped to their common extents."""

    def forward(self, xs, ctx):
        return channel_concat(xs)

    def out_shape(self, shapes):
        common = tuple(min(s[ax] for s in shapes) for ax in range(len(shapes[0]) - 1))
        return common + (sum(s[-1] for s in shapes),)


class ChannelSlice(Module):
    def __init__(self, start: int, stop: int):
        super().__init__()
        self.start, self.stop = start, stop

    def forward(self, x, ctx):
        return take(x, (Ellipsis, slice(self.start, self.stop)))

    def out_shape(self, shape):
        return tuple(shape[:-1]) + (self.stop - self.start,)


@dataclass
class Node:
    name: str
    block: Module
    inputs: tuple[str, ...]
    block_name: str = ""

    def __post_init__(self):
        self.block_name = self.block_name or self.name


class Model(Module):
    """Executable layer graph with declared inputs and a scalar regression output.

    Predictions are ``raw * target_std + target_mean``; the target statistics
    are fixed (not trained) and default to the identity map.
    """

    def __init__(self, config: ModelConfig, inputs: dict[str, tuple[int, ...]], nodes: list[Node],
                 dropout_rate: float, dtype):
        super().__init__()
        self.config = config
        self.inputs = dict(inputs)
        self.nodes = list(nodes)
        self.dropout_rate = dropout_rate
        self.dtype = np.dtype(dtype)
        self.target_mean = 0.0
        self.target_std = 1.0
        registered = set()
        for node in nodes:
            if id(node.block) not in registered:
                registered.add(id(node.block))
                setattr(self, node.block_name, node.block)
        self.shapes = self._propagate_shapes()
        if self.shapes[nodes[-1].name] != (1,):
            raise ShapeError(f"model output must be one scalar per sample, got {self.shapes[nodes[-1].name]}")

    def _propagate_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = dict(self.inputs)
        for node in self.nodes:
            args = [shapes[i] for i in node.inputs]
            shapes[node.name] = tuple(node.block.out_shape(args[0] if len(args) == 1 else args))
        return shapes

    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def prepare_inputs(self, clips: np.ndarray) -> dict[str, np.ndarray]:
        """Derive every declared input from a batch of raw ``N x T x H x W x 1`` clips."""
        clips = np.asarray(clips)
        if clips.ndim != 5:
            raise ShapeError(f"clip batch must be N x T x H x W x C, got {clips.shape}")
        out = {}
        for name in self.inputs:
            if name == "spatial":
                out[name] = clips
            elif name == "temporal":
                out[name] = data.frame_difference(clips, axis=1)
            elif name == "frames":
                out[name] = data.triplicate_grayscale(clips)
        return {k: v.astype(self.dtype, copy=False) for k, v in out.items()}

    def forward(self, inputs, ctx):
        if not isinstance(inputs, dict):
            inputs = self.prepare_inputs(inputs)
        env: dict[str, Tensor] = {}
        for name, shape in self.inputs.items():
            if name not in inputs:
                raise ShapeError(f"missing model input {name!r}")
            value = inputs[name] if isinstance(inputs[name], Tensor) else Tensor(inputs[name], dtype=self.dtype)
            if value.shape[1:] != tuple(shape):
                raise ShapeError(f"input {name!r} expects per-sample shape {tuple(shape)}, got {value.shape[1:]}")
            env[name] = value
        for node in self.nodes:
            args = [env[i] for i in node.inputs]
            out = node.block(args[0] if len(args) == 1 else args, ctx)
            if not np.all(np.isfinite(out.data)):
                raise NonFiniteError(f"non-finite activation at node {node.name!r}")
            env[node.name] = out
        raw = env[self.nodes[-1].name]
        if self.target_std == 1.0 and self.target_mean == 0.0:
            return raw
        return add(scale(raw, self.target_std), self.target_mean)

    def out_shape(self, shape):
        return (1,)


def build_model(config: ModelConfig, dropout_rate: float | None = None, seed: int = 0,
                dtype=np.float64, rng: np.random.Generator | None = None) -> Model:
    config.validate()
    if dropout_rate is None:
        dropout_rate = family_defaults(config.family, config.rnn_cell)["dropout_rate"]
    rng = rng or np.random.default_rng(seed)
    w = config.width_multiplier
    norm = "batch" if config.norm_kind == "mixed" else config.norm_kind
    T, H, W = config.frames, config.height, config.width
    spatial_shape, temporal_shape = (T, H, W, 1), (T - 1, H, W, 1)
    fam = config.family

    def backbone(in_shape=spatial_shape):
        stem = build_stem(norm, config.conv2_kernel, w, in_shape[-1], rng, dtype)
        im3 = build_inception_module(IM3_WIDTHS, norm, stem.out_channels, w, rng, dtype)
        return stem, im3

    def shape_of(module, in_shape):
        return tuple(module.out_shape(in_shape))

    def head_for(in_shape, dims=3):
        return build_head(config.head_variant, in_shape, dropout_rate, rng, dtype, dims)

    def task_convs(cin):
        c = _scaled(TASK_CONV_WIDTH, w)
        return Sequential(ConvBlock(cin, c, (3, 3, 3), norm, rng, dtype),
                          ConvBlock(c, c, (3, 3, 3), norm, rng, dtype), GlobalAvgPool())

    if fam in ("I3D_MINI", "I3D_ORIGINAL"):
        stem, im3 = backbone()
        nodes = [Node("stem", stem, ("spatial",)), Node("im3", im3, ("stem",))]
        feat = shape_of(im3, shape_of(stem, spatial_shape))
        if fam == "I3D_ORIGINAL":
            im4 = build_inception_module(IM4_WIDTHS, norm, im3.out_channels, w, rng, dtype)
            im5 = build_inception_module(IM5_WIDTHS, norm, im4.out_channels, w, rng, dtype)
            nodes += [Node("im4", im4, ("im3",)), Node("im5", im5, ("im4",))]
            feat = shape_of(im5, shape_of(im4, feat))
        nodes.append(Node("head", head_for(feat), (nodes[-1].name,)))
        return Model(config, {"spatial": spatial_shape}, nodes, dropout_rate, dtype)

    if fam == "TWO_STREAM":
        def stream():
            layers, cin = [], 1
            for c in TWO_STREAM_WIDTHS:
                c = _scaled(c, w)
                layers += [ConvBlock(cin, c, (3, 3, 3), norm, rng, dtype), Pool((1, 2, 2))]
                cin = c
            return Sequential(*layers, GlobalAvgPool(), Dropout(dropout_rate), Dense(cin, 1, rng, dtype))
        nodes = [Node("spatial_stream", stream(), ("spatial",)),
                 Node("temporal_stream", stream(), ("temporal",)),
                 Node("concat", VectorConcat(), ("spatial_stream", "temporal_stream")),
                 Node("fusion", Dense(2, 1, rng, dtype), ("concat",))]
        return Model(config, {"spatial": spatial_shape, "temporal": temporal_shape}, nodes, dropout_rate, dtype)

    inputs2 = {"spatial": spatial_shape, "temporal": temporal_shape}
    if fam == "FUSION_COMBINATION":
        def mini_stream(in_shape):
            stem, im3 = backbone(in_shape)
            return Sequential(stem, im3, head_for(shape_of(im3, shape_of(stem, in_shape))))
        nodes = [Node("spatial_stream", mini_stream(spatial_shape), ("spatial",)),
                 Node("temporal_stream", mini_stream(temporal_shape), ("temporal",)),
                 Node("concat", VectorConcat(), ("spatial_stream", "temporal_stream")),
                 Node("fusion", Dense(2, 1, rng, dtype), ("concat",))]
        return Model(config, inputs2, nodes, dropout_rate, dtype)

    if fam == "FUSION_NEW_COMBINATION":
        s_stem, s_im3 = backbone()
        t_stem, t_im3 = backbone(temporal_shape)
        s_feat = shape_of(s_im3, shape_of(s_stem, spatial_shape))
        t_feat = shape_of(t_im3, shape_of(t_stem, temporal_shape))
        concat_block = FeatureConcat()
        nodes = [Node("spatial_backbone", Sequential(s_stem, s_im3), ("spatial",)),
                 Node("temporal_backbone", Sequential(t_stem, t_im3), ("temporal",)),
                 Node("concat", concat_block, ("spatial_backbone", "temporal_backbone")),
                 Node("head", head_for(concat_block.out_shape([s_feat, t_feat])), ("concat",))]
        return Model(config, inputs2, nodes, dropout_rate, dtype)

    if fam in ("FUSION_DUAL_INPUT", "FUSION_DUAL_TRUNCATED"):
        stem, im3 = backbone()
        shared = Sequential(stem, im3)
        s_feat = shape_of(shared, spatial_shape)
        t_feat = shape_of(shared, temporal_shape)
        nodes = [Node("backbone_spatial", shared, ("spatial",), "backbone"),
                 Node("backbone_temporal", shared, ("temporal",), "backbone")]
        if fam == "FUSION_DUAL_TRUNCATED":
            concat_block = FeatureConcat()
            nodes += [Node("concat", concat_block, ("backbone_spatial", "backbone_temporal")),
                      Node("head", head_for(concat_block.out_shape([s_feat, t_feat])), ("concat",))]
        else:
            c = _scaled(TASK_CONV_WIDTH, w)
            nodes += [Node("spatial_convs", task_convs(im3.out_channels), ("backbone_spatial",)),
                      Node("temporal_convs", task_convs(im3.out_channels), ("backbone_temporal",)),
                      Node("concat", VectorConcat(), ("spatial_convs", "temporal_convs")),
                      Node("head", Sequential(Dropout(dropout_rate), Dense(2 * c, 1, rng, dtype)), ("concat",))]
        return Model(config, inputs2, nodes, dropout_rate, dtype)

    if fam == "FUSION_SINGLE_INPUT":
        stem, im3 = backbone()
        ch = im3.out_channels
        half = ch // 2
        c = _scaled(TASK_CONV_WIDTH, w)
        nodes = [Node("backbone", Sequential(stem, im3), ("spatial",)),
                 Node("split_a", ChannelSlice(0, half), ("backbone",)),
                 Node("split_b", ChannelSlice(half, ch), ("backbone",)),
                 Node("stream_a", task_convs(half), ("split_a",)),
                 Node("stream_b", task_convs(ch - half), ("split_b",)),
                 Node("concat", VectorConcat(), ("stream_a", "stream_b")),
                 Node("head", Sequential(Dropout(dropout_rate), Dense(2 * c, 1, rng, dtype)), ("concat",))]
        return Model(config, {"spatial": spatial_shape}, nodes, dropout_rate, dtype)

    if fam == "CNN_RNN_SCRATCH":
        frame_shape = (H, W, 3)
        stem = build_stem(norm, config.conv2_kernel, w, 3, rng, dtype, dims=2)
        im3 = build_inception_module(IM3_WIDTHS, norm, stem.out_channels, w, rng, dtype, dims=2)
        extractor = Sequential(stem, im3, GlobalAvgPool())
        feat_dim = shape_of(extractor, frame_shape)[0]
        rnn = Recurrent(config.rnn_cell, feat_dim, RNN_HIDDEN, rng, dtype,
                        hidden_norm=config.norm_kind == "mixed")
        nodes = [Node("frame_features", PerFrame(extractor, frame_shape), ("frames",)),
                 Node("rnn", rnn, ("frame_features",)),
                 Node("head", Sequential(Dropout(dropout_rate), Dense(RNN_HIDDEN, 1, rng, dtype)), ("rnn",))]
        return Model(config, {"frames": (T, H, W, 3)}, nodes, dropout_rate, dtype)

    raise ConfigError(f"family: unsupported {fam!r}")


def model_forward(model: Model, clips, mode: str = "inference",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Evaluate a batch of clips (or prepared input dict) to ``N x 1`` predictions."""
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    training = mode == "train"
    if training and rng is None:
        rng = np.random.default_rng(0)
    return model(clips, Context(training, rng))


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


# ---------------------------------------------------------------------------
# serialization

MODEL_FORMAT = "echobench-model"
MODEL_VERSION = 1


def save_model(model: Model, directory: str | Path) -> tuple[Path, Path]:
    """Write ``model.json`` (structure + manifest) and ``model.bin`` (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    entries = [(name, p.data) for name, p in model.named_parameters()]
    for name, stats in model.named_buffers():
        entries += [(name + ".mean", stats.mean), (name + ".var", stats.var)]
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(blob.tobytes())
        offset += arr.size
    meta = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "dropout_rate": model.dropout_rate,
        "dtype": model.dtype.name,
        "target_mean": model.target_mean,
        "target_std": model.target_std,
        "inputs": {k: list(v) for k, v in model.inputs.items()},
        "nodes": [{"name": n.name, "block": n.block_name, "type": type(n.block).__name__,
                   "inputs": list(n.inputs)} for n in model.nodes],
        "tensors": manifest,
    }
    json_path, bin_path = directory / "model.json", directory / "model.bin"
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_model(directory: str | Path) -> Model:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    if meta.get("format") != MODEL_FORMAT or meta.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file: format {meta.get('format')!r} version {meta.get('version')!r}")
    blob = np.frombuffer((directory / "model.bin").read_bytes(), dtype="<f4")
    expected = sum(t["count"] for t in meta["tensors"])
    if blob.size != expected:
        raise ValueError(f"model.bin holds {blob.size} values, manifest expects {expected}")
    model = build_model(ModelConfig(**meta["config"]), meta["dropout_rate"], dtype=np.dtype(meta["dtype"]))
    model.target_mean = meta["target_mean"]
    model.target_std = meta["target_std"]
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for t in meta["tensors"]:
        values = blob[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"]).astype(model.dtype)
        name = t["name"]
        if name in params:
            if params[name].shape != values.shape:
                raise ValueError(f"tensor {name!r}: shape {values.shape} != model {params[name].shape}")
            params[name].data = values
        else:
            stats_name, field_name = name.rsplit(".", 1)
            if stats_name not in buffers:
                raise ValueError(f"unknown tensor {name!r} in manifest")
            setattr(buffers[stats_name], field_name, values)
    return model
