"""
Model Service Module - Multi-View CHIP Classifier
A convolutional trunk runs over each of the 4 views (SAS, 4CH, VLA, LVOT),
the per-view features are concatenated in that fixed order and an MLP head
turns them into a single CHIP probability.
"""
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, FrozenSet, List, Sequence, Tuple, Union

import numpy as np

import storage
from services.autograd_service import (
    DTYPE, Tensor, concat, conv2d, dense, global_avg_pool2d, maxpool2d,
    no_grad, relu, reshape, sigmoid,
)
from services.errors import ConfigError, ShapeError, StorageError

logger = logging.getLogger(__name__)

VIEW_ORDER = ("SAS", "4CH", "VLA", "LVOT")
N_VIEWS = len(VIEW_ORDER)

# the architecture is fixed at 4 conv layers and 3 pooling layers
N_CONV_LAYERS = 4
N_POOL_LAYERS = 3
POOL_WINDOW = 2

PREDICT_CHUNK = 32


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    conv_channels: Tuple[int, ...] = (8, 16, 32, 32)
    kernel_size: int = 3
    pool_after: Tuple[int, ...] = (0, 1, 2)
    mlp_hidden: int = 128
    seed: int = 42
    shared_trunk: bool = True

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["conv_channels"] = list(self.conv_channels)
        data["pool_after"] = list(self.pool_after)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        values = dict(data)
        for key in ("conv_channels", "pool_after"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def validate_model_config(config: ModelConfig) -> None:
    """Reject any config whose conv/pool stack would not be shape-total."""
    channels = config.conv_channels
    if len(channels) != N_CONV_LAYERS:
        raise ConfigError(f"conv_channels must list exactly {N_CONV_LAYERS} layers, got {len(channels)}.")
    if not all(_is_int(c) and c > 0 for c in channels):
        raise ConfigError("conv_channels must be positive integers.")
    if not _is_int(config.kernel_size) or config.kernel_size < 1 or config.kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be a positive odd integer, got {config.kernel_size}.")
    pools = config.pool_after
    if len(pools) != N_POOL_LAYERS or len(set(pools)) != N_POOL_LAYERS:
        raise ConfigError(f"pool_after must name {N_POOL_LAYERS} distinct conv layers, got {list(pools)}.")
    if not all(_is_int(i) and 0 <= i < N_CONV_LAYERS for i in pools):
        raise ConfigError(f"pool_after indices must be in [0, {N_CONV_LAYERS}).")
    divisor = POOL_WINDOW ** N_POOL_LAYERS
    if not _is_int(config.image_size) or config.image_size <= 0 or config.image_size % divisor:
        raise ConfigError(f"image_size must be a positive multiple of {divisor}, got {config.image_size}.")
    if not _is_int(config.mlp_hidden) or config.mlp_hidden <= 0:
        raise ConfigError("mlp_hidden must be a positive integer.")
    if not _is_int(config.seed) or not 0 <= config.seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer.")


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config (weights + biases of every layer)."""
    validate_model_config(config)
    k2 = config.kernel_size ** 2
    trunk = 0
    in_ch = 1
    for out_ch in config.conv_channels:
        trunk += out_ch * in_ch * k2 + out_ch
        in_ch = out_ch
    n_trunks = 1 if config.shared_trunk else N_VIEWS
    features = N_VIEWS * config.conv_channels[-1]
    head = config.mlp_hidden * features + config.mlp_hidden + config.mlp_hidden + 1
    return n_trunks * trunk + head


class MultiViewModel:
    """
    Trunk parameters plus the MLP head.

    `trunks` holds one list of (kernels, bias) pairs per trunk: a single
    trunk when weights are shared across views, otherwise one per view.
    """

    def __init__(self, config: ModelConfig, trunks: List[List[Tuple[Tensor, Tensor]]],
                 hidden: Tuple[Tensor, Tensor], output: Tuple[Tensor, Tensor]):
        self.config = config
        self.trunks = trunks
        self.hidden = hidden
        self.output = output
        self.trained_patient_ids: FrozenSet[str] = frozenset()

    def parameters(self) -> List[Tensor]:
        """All learned tensors in declaration order (the checkpoint order)."""
        params: List[Tensor] = []
        for trunk in self.trunks:
            for kernels, bias in trunk:
                params.extend((kernels, bias))
        params.extend(self.hidden)
        params.extend(self.output)
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.values for p in self.parameters()])


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name, copy=False)


def build_model(config: ModelConfig) -> MultiViewModel:
    """
    Build a freshly initialized model.

    Every weight and bias is drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    with a generator seeded by config.seed, so equal seeds give bitwise
    equal parameters.
    """
    validate_model_config(config)
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    n_trunks = 1 if config.shared_trunk else N_VIEWS
    trunks: List[List[Tuple[Tensor, Tensor]]] = []
    for t in range(n_trunks):
        layers = []
        in_ch = 1
        for index, out_ch in enumerate(config.conv_channels):
            fan_in = in_ch * k * k
            prefix = f"trunk{t}.conv{index}"
            kernels = _uniform(rng, (out_ch, in_ch, k, k), fan_in, f"{prefix}.weight")
            bias = _uniform(rng, (out_ch,), fan_in, f"{prefix}.bias")
            layers.append((kernels, bias))
            in_ch = out_ch
        trunks.append(layers)

    features = N_VIEWS * config.conv_channels[-1]
    hidden = (
        _uniform(rng, (config.mlp_hidden, features), features, "mlp.hidden.weight"),
        _uniform(rng, (config.mlp_hidden,), features, "mlp.hidden.bias"),
    )
    output = (
        _uniform(rng, (1, config.mlp_hidden), config.mlp_hidden, "mlp.out.weight"),
        _uniform(rng, (1,), config.mlp_hidden, "mlp.out.bias"),
    )
    model = MultiViewModel(config, trunks, hidden, output)
    logger.debug("Built model with %d parameters (seed %d)", model.parameter_count(), config.seed)
    return model


def _run_trunk(layers: List[Tuple[Tensor, Tensor]], x: Tensor, config: ModelConfig) -> Tensor:
    padding = config.kernel_size // 2
    for index, (kernels, bias) in enumerate(layers):
        x = relu(conv2d(x, kernels, bias, stride=1, padding=padding))
        if index in config.pool_after:
            x = maxpool2d(x, POOL_WINDOW)
    return global_avg_pool2d(x)


def forward_batch(model: MultiViewModel, views: np.ndarray) -> Tensor:
    """
    Taped forward pass over a stack of samples.

    Args:
        model: the classifier
        views: array [B, 4, S, S] in SAS, 4CH, VLA, LVOT order

    Returns:
        Tensor: [B] CHIP probabilities
    """
    size = model.config.image_size
    views = np.asarray(views, dtype=DTYPE)
    if views.ndim != 4 or views.shape[1] != N_VIEWS or views.shape[2:] != (size, size):
        raise ShapeError(f"Expected views of shape [B, {N_VIEWS}, {size}, {size}], got {views.shape}.")
    batch = views.shape[0]
    channels = model.config.conv_channels[-1]

    if model.config.shared_trunk:
        # views ride along the batch axis; reshape keeps (sample, view) order
        x = Tensor(views.reshape(batch * N_VIEWS, 1, size, size), copy=False)
        features = _run_trunk(model.trunks[0], x, model.config)
        fused = reshape(features, (batch, N_VIEWS * channels))
    else:
        per_view = [
            _run_trunk(model.trunks[v], Tensor(views[:, v:v + 1], copy=False), model.config)
            for v in range(N_VIEWS)
        ]
        fused = concat(per_view, axis=1)

    hidden = relu(dense(fused, *model.hidden))
    logits = dense(hidden, *model.output)
    return sigmoid(reshape(logits, (batch,)))


def forward(model: MultiViewModel, sample) -> float:
    """CHIP probability for one ViewSet."""
    with no_grad():
        return forward_batch(model, sample.stack()[None]).item()


def predict_batch(model: MultiViewModel, samples: Sequence) -> List[float]:
    """Probabilities for a list of ViewSets, in input order."""
    probabilities: List[float] = []
    with no_grad():
        for start in range(0, len(samples), PREDICT_CHUNK):
            chunk = samples[start:start + PREDICT_CHUNK]
            stacked = np.stack([s.stack() for s in chunk])
            probabilities.extend(float(p) for p in forward_batch(model, stacked).values)
    return probabilities


def save_checkpoint(model: MultiViewModel, path: Union[str, Path]) -> Path:
    header = {
        "config": model.config.to_dict(),
        "trained_patients": sorted(model.trained_patient_ids),
    }
    return storage.write_checkpoint(path, header, [p.data for p in model.parameters()])


def load_checkpoint(path: Union[str, Path]) -> MultiViewModel:
    header, arrays = storage.read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise StorageError(f"Checkpoint {path} has no model config.") from exc
    model = build_model(config)
    params = model.parameters()
    if len(arrays) != len(params):
        raise StorageError(f"Checkpoint {path} holds {len(arrays)} tensors, model needs {len(params)}.")
    for param, values in zip(params, arrays):
        if values.shape != param.shape:
            raise StorageError(f"Checkpoint tensor {param.name} has shape {values.shape}, expected {param.shape}.")
        param.data[...] = values
    model.trained_patient_ids = frozenset(header.get("trained_patients", []))
    return model
