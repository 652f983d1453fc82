import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .exceptions import VxError
from .params import ParameterSet
from .specs import CONV, CONV3D, LayerSpec, parse_layer_spec
from .tensor import (
    DEFAULT_SLOPE,
    INFERENCE,
    TRAIN,
    RunningStats,
    as_tensor,
    batch_norm,
    check_mode,
    convolution,
    dense,
    l1_loss,
    leaky_relu,
    reshape,
    sigmoid,
)

__all__ = (
    "ParameterSet",
    "NetworkConfig",
    "Layer",
    "Preset",
    "PRESETS",
    "build_network",
    "network_configs",
    "encode2d",
    "decode2d",
    "reconstruct2d",
    "generate3d",
    "discriminate",
)

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

ENCODER = "encoder"
DECODER = "decoder"
OUTPUT = "output"

LEAKY_RELU = "leaky_relu"
SIGMOID = "sigmoid"

# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    """The topology of one network.

    Shapes exclude the batch axis: ``(channels, *spatial)`` for images and
    voxel grids, ``(features,)`` for vectors. Every network ends in a stride-1
    output convolution to ``output_shape[0]`` channels with a sigmoid and no
    batch norm; every other layer is followed by batch norm (when enabled)
    and a leaky relu.
    """

    name: str
    encoder_specs: tuple
    decoder_specs: tuple
    input_shape: tuple
    latent_dim: int
    output_shape: tuple
    slope: float = DEFAULT_SLOPE
    output_kernel: int = 3
    batch_norm: bool = True

    def __post_init__(self):
        for key in ("encoder_specs", "decoder_specs"):
            value = getattr(self, key)
            if isinstance(value, str):
                value = parse_layer_spec(value)
            object.__setattr__(self, key, tuple(value))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "output_shape", tuple(self.output_shape))

    @property
    def rank(self):
        return len(self.output_shape) - 1

    @cached_property
    def layers(self):
        return resolve_layers(self)


@dataclass(frozen=True)
class Layer:
    """A layer with its resolved shapes and parameter-name prefix."""

    index: int
    prefix: str
    section: str
    spec: LayerSpec
    in_shape: tuple
    out_shape: tuple
    batch_norm: bool
    activation: str
    # Set when a flat input is reshaped to (channels, *spatial) first.
    reshape_to: tuple = None

    @property
    def in_channels(self):
        return self.reshape_to[0] if self.reshape_to else self.in_shape[0]


def _layer_error(code, detail, index, spec):
    return VxError.data(code, detail, layer=index, spec=str(spec))


def _start_spatial(config, index, remaining):
    # A dense-to-convolution transition is only well defined when every
    # remaining convolution upsamples.
    size = config.output_shape[1:]
    factor = 1
    for spec in remaining:
        if spec.is_dense or not spec.transposed:
            raise _layer_error(
                "invalid_shape.reshape",
                f"layer {index} ({spec}): a convolution chain after a dense "
                "layer must consist of transposed convolutions",
                index,
                spec,
            )
        factor *= spec.stride

    start = []
    for extent in size:
        if extent % factor:
            raise _layer_error(
                "invalid_shape.reshape",
                f"layer {index}: output size {extent} is not divisible by "
                f"the upsampling factor {factor}",
                index,
                remaining[0],
            )
        start.append(extent // factor)
    return tuple(start)


def _resolve_section(config, section, specs, shape, first_index):
    layers = []
    for offset, spec in enumerate(specs):
        index = first_index + offset
        prefix = f"{section}.{offset}"
        reshape_to = None

        if spec.is_dense:
            out_shape = (spec.width,)
        else:
            if len(shape) == 1:
                start = _start_spatial(config, index, specs[offset:])
                cells = math.prod(start)
                if shape[0] % cells:
                    raise _layer_error(
                        "invalid_shape.reshape",
                        f"layer {index} ({spec}): {shape[0]} features do not "
                        f"reshape onto a {start} grid",
                        index,
                        spec,
                    )
                reshape_to = (shape[0] // cells,) + start
                spatial_in = reshape_to
            else:
                spatial_in = shape

            if len(spatial_in) - 1 != spec.rank:
                raise _layer_error(
                    "invalid_shape.rank",
                    f"layer {index} ({spec}) is rank {spec.rank} but its "
                    f"input has shape {spatial_in}",
                    index,
                    spec,
                )
            if spec.transposed:
                spatial = tuple(n * spec.stride for n in spatial_in[1:])
            else:
                spatial = tuple(
                    math.ceil(n / spec.stride) for n in spatial_in[1:]
                )
            out_shape = (spec.width,) + spatial

        layers.append(
            Layer(
                index=index,
                prefix=prefix,
                section=section,
                spec=spec,
                in_shape=shape,
                out_shape=out_shape,
                batch_norm=config.batch_norm,
                activation=LEAKY_RELU,
                reshape_to=reshape_to,
            )
        )
        shape = out_shape
    return layers, shape


def resolve_layers(config):
    """Chain the shapes of a config through its layers.

    :raises VxError: If any layer does not fit its input, reporting the
        offending layer index.
    """
    encoder, shape = _resolve_section(
        config, ENCODER, config.encoder_specs, config.input_shape, 0
    )
    if shape != (config.latent_dim,):
        index = len(encoder) - 1
        spec = encoder[-1].spec if encoder else None
        raise VxError.data(
            "invalid_shape.latent",
            f"layer {index} ({spec}) produces {shape}, expected a latent "
            f"vector of width {config.latent_dim}",
            layer=index,
        )

    decoder, shape = _resolve_section(
        config, DECODER, config.decoder_specs, shape, len(encoder)
    )
    index = len(encoder) + len(decoder)
    if shape[1:] != config.output_shape[1:]:
        raise VxError.data(
            "invalid_shape.output",
            f"layer {index - 1} produces {shape}, which does not match the "
            f"output shape {config.output_shape}",
            layer=index - 1,
        )

    output_spec = LayerSpec(
        CONV3D if config.rank == 3 else CONV,
        config.output_shape[0],
        config.output_kernel,
        stride=1,
    )
    output = Layer(
        index=index,
        prefix=OUTPUT,
        section=OUTPUT,
        spec=output_spec,
        in_shape=shape,
        out_shape=config.output_shape,
        batch_norm=False,
        activation=SIGMOID,
    )
    return tuple(encoder + decoder + [output])


# -----------------------------------------------------------------------------


def _uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(config, seed):
    """Initialize the parameters of a network.

    Weights are uniform in ``±sqrt(6 / (fan_in + fan_out))`` and biases
    zero; batch-norm layers start as the identity with running mean 0 and
    running variance 1. The same config and seed give bit-identical arrays.

    :rtype: ParameterSet
    :raises VxError: If the config's shapes do not chain.
    """
    layers = resolve_layers(config)
    rng = np.random.default_rng(seed)

    arrays = {}
    trainable = []

    def add(name, value, is_trainable=True):
        arrays[name] = value
        if is_trainable:
            trainable.append(name)

    for layer in layers:
        spec = layer.spec
        if spec.is_dense:
            fan_in = math.prod(layer.in_shape)
            fan_out = spec.width
            add(
                f"{layer.prefix}.kernel",
                _uniform(rng, (fan_in, fan_out), fan_in, fan_out),
            )
        else:
            taps = spec.kernel_size ** spec.rank
            window = (spec.kernel_size,) * spec.rank
            fan_in = layer.in_channels * taps
            fan_out = spec.width * taps
            shape = (
                (layer.in_channels, spec.width) + window
                if spec.transposed
                else (spec.width, layer.in_channels) + window
            )
            add(
                f"{layer.prefix}.kernel",
                _uniform(rng, shape, fan_in, fan_out),
            )
        add(f"{layer.prefix}.bias", np.zeros(spec.width))

        if layer.batch_norm:
            add(f"{layer.prefix}.bn.scale", np.ones(spec.width))
            add(f"{layer.prefix}.bn.shift", np.zeros(spec.width))
            add(f"{layer.prefix}.bn.mean", np.zeros(spec.width), False)
            add(f"{layer.prefix}.bn.var", np.ones(spec.width), False)

    params = ParameterSet(arrays, trainable, config)
    logger.debug(
        "built %s with %d trainable values",
        config.name,
        params.parameter_count(),
    )
    return params


# -----------------------------------------------------------------------------


def _run_layer(params, layer, x, mode, update_stats):
    if layer.reshape_to is not None:
        x = reshape(x, (x.shape[0],) + layer.reshape_to)

    spec = layer.spec
    kernel = params.tensor(f"{layer.prefix}.kernel")
    bias = params.tensor(f"{layer.prefix}.bias")
    if spec.is_dense:
        x = dense(x, kernel, bias)
    else:
        x = convolution(
            x, kernel, bias, spec.stride, spec.rank, spec.transposed
        )

    if layer.batch_norm:
        stats = RunningStats(
            params[f"{layer.prefix}.bn.mean"], params[f"{layer.prefix}.bn.var"]
        )
        x = batch_norm(
            x,
            params.tensor(f"{layer.prefix}.bn.scale"),
            params.tensor(f"{layer.prefix}.bn.shift"),
            mode,
            stats,
        )
        if mode == TRAIN and update_stats:
            params.set_buffer(f"{layer.prefix}.bn.mean", stats.mean)
            params.set_buffer(f"{layer.prefix}.bn.var", stats.var)

    if layer.activation == SIGMOID:
        return sigmoid(x)
    return leaky_relu(x, params.config.slope)


def run_layers(params, x, layers, mode=INFERENCE, update_stats=True):
    """Run a slice of a network's layers.

    Inference mode never touches the parameter set. Train mode rebinds the
    batch-norm running statistics unless `update_stats` is false.
    """
    check_mode(mode)
    for layer in layers:
        x = _run_layer(params, layer, x, mode, update_stats)
    return x


def _sections(params, *sections):
    return [
        layer for layer in params.config.layers if layer.section in sections
    ]


def _check_input(x, expected, what):
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[1:] != tuple(expected):
        raise VxError.data(
            "invalid_shape.input",
            f"{what} expects a batch of shape {tuple(expected)}, "
            f"got {x.shape}",
        )
    return x


def _with_channel_axis(x, shape):
    # Accept single-channel batches without their channel axis.
    x = as_tensor(x)
    if shape[0] == 1 and x.ndim == len(shape):
        x = reshape(x, (x.shape[0], 1) + x.shape[1:])
    return x


def encode2d(images, params, mode=INFERENCE, update_stats=True):
    """Embed a batch of images into the latent space.

    :param images: Array or tensor of shape ``(batch, channels, H, W)``;
        single-channel batches may omit the channel axis.
    :return: Latent tensor of shape ``(batch, latent_dim)``.
    """
    config = params.config
    images = _check_input(
        _with_channel_axis(images, config.input_shape),
        config.input_shape,
        config.name,
    )
    return run_layers(
        params, images, _sections(params, ENCODER), mode, update_stats
    )


def decode2d(latent, params, mode=INFERENCE, update_stats=True):
    """Decode latent vectors to images in ``[0, 1]``."""
    config = params.config
    latent = _check_input(latent, (config.latent_dim,), config.name)
    return run_layers(
        params, latent, _sections(params, DECODER, OUTPUT), mode, update_stats
    )


def reconstruct2d(images, params, mode=INFERENCE, update_stats=True):
    """Run the full 2D autoencoder; returns ``(latent, output)``."""
    latent = encode2d(images, params, mode, update_stats)
    return latent, decode2d(latent, params, mode, update_stats)


def generate3d(latent, params, mode=INFERENCE, update_stats=True):
    """Map latent vectors to voxel grids of shape ``(batch, D, D, D)``."""
    config = params.config
    latent = _check_input(latent, (config.latent_dim,), config.name)
    out = run_layers(
        params,
        latent,
        _sections(params, ENCODER, DECODER, OUTPUT),
        mode,
        update_stats,
    )
    return reshape(out, (out.shape[0],) + config.output_shape[1:])


def discriminate(x, params, rank, mode=INFERENCE, update_stats=True):
    """Score a batch with an autoencoder discriminator.

    :return: ``(reconstruction, score)`` where the reconstruction has the
        shape of `x` and the score is the mean L1 distance between the two.
    :raises VxError: If `rank` or the input shape does not match the
        discriminator.
    """
    config = params.config
    if rank != config.rank:
        raise VxError.data(
            "invalid_shape.rank",
            f"{config.name} is a rank-{config.rank} discriminator, "
            f"got rank {rank}",
        )

    x = as_tensor(x)
    batch = _check_input(
        _with_channel_axis(x, config.input_shape),
        config.input_shape,
        config.name,
    )
    out = run_layers(
        params,
        batch,
        _sections(params, ENCODER, DECODER, OUTPUT),
        mode,
        update_stats,
    )
    reconstruction = reshape(out, x.shape)
    return reconstruction, l1_loss(reconstruction, x)


# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Preset:
    """Sizes and topologies of the four networks at one scale."""

    name: str
    image_size: int
    resolution: int
    latent_dim: int
    encoder_2d: str
    decoder_2d: str
    decoder_3d: str
    encoder_3d: str
    steps: tuple = field(default=(5000, 5000, 5000))
    image_channels: int = 1


PRESETS = {
    "desk": Preset(
        name="desk",
        image_size=16,
        resolution=16,
        latent_dim=32,
        encoder_2d="C(8,4)-C(16,4)-C(32,4)-FC(64)-FC(32)",
        decoder_2d="FC(64)-DC(32,4)-DC(16,4)-DC(8,4)",
        decoder_3d="FC(64)-DC^{3D}(32,4)-DC^{3D}(16,4)-DC^{3D}(8,4)",
        encoder_3d="C^{3D}(8,4)-C^{3D}(16,4)-C^{3D}(32,4)-FC(64)-FC(32)",
    ),
    "paper": Preset(
        name="paper",
        image_size=64,
        resolution=32,
        latent_dim=200,
        encoder_2d="C1(32,4)-C2(64,4)-C3(128,4)-FC1(512)-FC2(200)",
        decoder_2d="FC3(512)-DC1(128,4)-DC2(64,4)-DC3(32,4)",
        decoder_3d="FC3(512)-DC1^{3D}(128,4)-DC2^{3D}(64,4)-DC3^{3D}(32,4)",
        encoder_3d=(
            "C1^{3D}(32,4)-C2^{3D}(64,4)-C3^{3D}(128,4)-FC1(512)-FC2(200)"
        ),
        steps=(100000, 100000, 100000),
    ),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError as e:
        raise VxError.usage(
            "invalid_config.preset",
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}",
        ) from e


def network_configs(preset, slope=DEFAULT_SLOPE):
    """Build the configs of G2, D2, G3 and D3 for a preset.

    G2 and D2 are 2D autoencoders over images, G3 decodes latent vectors to
    voxel grids and D3 is a 3D autoencoder over voxel grids.

    :param preset: A :py:class:`Preset` or its name.
    :return: A dict keyed by ``"G2"``, ``"D2"``, ``"G3"`` and ``"D3"``.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)

    image = (preset.image_channels, preset.image_size, preset.image_size)
    voxels = (1,) + (preset.resolution,) * 3

    def config(name, encoder, decoder, input_shape, output_shape):
        return NetworkConfig(
            name,
            encoder,
            decoder,
            input_shape,
            preset.latent_dim,
            output_shape,
            slope,
        )

    return {
        "G2": config("G2", preset.encoder_2d, preset.decoder_2d, image, image),
        "D2": config("D2", preset.encoder_2d, preset.decoder_2d, image, image),
        "G3": config(
            "G3", "", preset.decoder_3d, (preset.latent_dim,), voxels
        ),
        "D3": config(
            "D3", preset.encoder_3d, preset.decoder_3d, voxels, voxels
        ),
    }
