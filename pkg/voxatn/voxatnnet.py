"""VoxAtnNet: 3D convolutional PAD classifier with a channel-attention gate.

The network is described by a layer manifest (see ``layer_manifest``) and run by
walking that manifest, so the checkpoint header, the summary report and the
executed graph always agree.
"""
from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .cloudio import PointCloud, Space, augment, normalize
from .errors import DatasetError, NonFiniteError, ShapeError
from .schemas import AugmentSpec, BinaryClass, GridSpec, ModelConfig, TrainConfig
from .tengine import ops
from .tengine.checkpoint import read_checkpoint, write_checkpoint
from .tengine.gradcheck import GradCheckReport, gradient_check
from .tengine.functional import conv3d_output_dims
from .tengine.optim import SGDM
from .tengine.tensor import Tensor, parameter
from .voxel import VoxelGrid, voxelize

logger = logging.getLogger(__name__)

PARAMETER_TARGET = 35_700_000
REFERENCE_RESOLUTION = 64
INPUT = "input"


class LayerKind(str, Enum):
    conv3d = "Conv3d"
    leaky_relu = "LeakyReLU"
    global_max_pool = "GlobalMaxPool"
    global_avg_pool = "GlobalAvgPool"
    fully_connected = "FullyConnected"
    sigmoid = "Sigmoid"
    softmax = "Softmax"
    concat = "Concat"
    multiply = "Multiply"
    flatten = "Flatten"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: LayerKind
    inputs: Tuple[str, ...]
    hyper: Tuple[Tuple[str, object], ...] = ()

    def get(self, key: str):
        return dict(self.hyper)[key]

    def manifest_line(self) -> str:
        parts = [self.name, self.kind.value, "in=" + ",".join(self.inputs)]
        parts += [f"{k}={json.dumps(v, separators=(',', ':'))}" for k, v in self.hyper]
        return " ".join(parts)

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        if self.kind is LayerKind.conv3d:
            k = tuple(self.get("filter_size"))
            return [
                (f"{self.name}.weight", (self.get("num_filters"), self.get("in_channels"), *k)),
                (f"{self.name}.bias", (self.get("num_filters"),)),
            ]
        if self.kind is LayerKind.fully_connected:
            return [
                (f"{self.name}.weight", (self.get("in_dim"), self.get("out_dim"))),
                (f"{self.name}.bias", (self.get("out_dim"),)),
            ]
        return []


def _conv(name: str, src: str, spec, in_channels: int) -> LayerSpec:
    return LayerSpec(
        name,
        LayerKind.conv3d,
        (src,),
        (
            ("filter_size", list(spec.filter)),
            ("in_channels", in_channels),
            ("num_filters", spec.filters),
            ("stride", list(spec.stride)),
            ("padding", list(spec.padding)),
        ),
    )


def _act(name: str, src: str, slope: float) -> LayerSpec:
    return LayerSpec(name, LayerKind.leaky_relu, (src,), (("slope", slope),))


def _fc(name: str, src: str, in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(name, LayerKind.fully_connected, (src,), (("in_dim", in_dim), ("out_dim", out_dim)))


def _conv_out(spatial: Tuple[int, int, int], spec) -> Tuple[int, int, int]:
    return conv3d_output_dims(spatial, spec.filter, spec.stride, spec.padding)


def layer_manifest(config: ModelConfig) -> List[LayerSpec]:
    """Ordered layer list for config: 24 layers with attention, 13 without."""
    convs = config.resolved_convs()
    slope = config.leaky_slope
    r = config.input_resolution
    spatial = (r, r, r)

    layers: List[LayerSpec] = []
    src, channels = INPUT, 1
    for i, name in enumerate(("conv1", "conv2", "conv3"), start=1):
        layers.append(_conv(name, src, convs[name], channels))
        layers.append(_act(f"lrelu{i}", name, slope))
        spatial = _conv_out(spatial, convs[name])
        src, channels = f"lrelu{i}", convs[name].filters
    skip = src

    if config.attention_enabled:
        hidden, half = config.attention_hidden, config.gate_width
        layers.append(LayerSpec("gmax", LayerKind.global_max_pool, (skip,)))
        layers.append(LayerSpec("gavg", LayerKind.global_avg_pool, (skip,)))
        for branch, pool in (("max", "gmax"), ("avg", "gavg")):
            layers.append(_fc(f"fc_{branch}1", pool, channels, hidden))
            layers.append(_act(f"relu_{branch}", f"fc_{branch}1", 0.0))
            layers.append(_fc(f"fc_{branch}2", f"relu_{branch}", hidden, half))
        layers.append(LayerSpec("concat", LayerKind.concat, ("fc_max2", "fc_avg2")))
        layers.append(LayerSpec("sigmoid", LayerKind.sigmoid, ("concat",)))
        layers.append(LayerSpec("multiply", LayerKind.multiply, ("sigmoid", skip)))
        src = "multiply"

    tail = convs["tail_conv"]
    layers.append(_conv("tail_conv", src, tail, channels))
    layers.append(_act("lrelu4", "tail_conv", slope))
    spatial = _conv_out(spatial, tail)
    flat = tail.filters * spatial[0] * spatial[1] * spatial[2]
    layers.append(LayerSpec("flatten", LayerKind.flatten, ("lrelu4",)))
    layers.append(_fc("fc1", "flatten", flat, config.fc_hidden))
    layers.append(_act("lrelu5", "fc1", slope))
    layers.append(_fc("fc2", "lrelu5", config.fc_hidden, config.num_classes))
    layers.append(LayerSpec("softmax", LayerKind.softmax, ("fc2",)))
    return layers


def infer_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Per-sample output shape of every layer, in manifest order."""
    r = config.input_resolution
    shapes: Dict[str, Tuple[int, ...]] = {INPUT: (1, r, r, r)}
    out: List[Tuple[str, Tuple[int, ...]]] = []
    for layer in layer_manifest(config):
        first = shapes[layer.inputs[0]]
        kind = layer.kind
        if kind is LayerKind.conv3d:
            dims = conv3d_output_dims(first[1:], layer.get("filter_size"), layer.get("stride"), layer.get("padding"))
            shape: Tuple[int, ...] = (layer.get("num_filters"), *dims)
        elif kind in (LayerKind.global_max_pool, LayerKind.global_avg_pool):
            shape = (first[0],)
        elif kind is LayerKind.fully_connected:
            shape = (layer.get("out_dim"),)
        elif kind is LayerKind.concat:
            shape = (sum(shapes[s][0] for s in layer.inputs),)
        elif kind is LayerKind.multiply:
            shape = shapes[layer.inputs[1]]
        elif kind is LayerKind.flatten:
            shape = (int(np.prod(first)),)
        else:
            shape = first
        shapes[layer.name] = shape
        out.append((layer.name, shape))
    return out


def param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    return [ps for layer in layer_manifest(config) for ps in layer.param_shapes()]


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _name, shape in param_shapes(config))


def calibrate_fc_hidden(config: ModelConfig, target: int = PARAMETER_TARGET) -> int:
    """fc_hidden width that brings the total parameter count closest to target."""
    c1 = count_parameters(config.model_copy(update={"fc_hidden": 1}))
    c2 = count_parameters(config.model_copy(update={"fc_hidden": 2}))
    per_unit = c2 - c1
    return max(1, int(round((target - c1) / per_unit)) + 1)


def _init_param(name: str, shape: Tuple[int, ...], seed: int) -> np.ndarray:
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=np.float64)
    # He-normal; each tensor has its own stream so variants share unchanged layers
    fan_in = int(np.prod(shape[1:])) if len(shape) == 5 else shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("ascii"))]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class Model:
    config: ModelConfig
    layers: List[LayerSpec]
    params: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def input_resolution(self) -> int:
        return self.config.input_resolution

    def manifest(self) -> List[str]:
        return [layer.manifest_line() for layer in self.layers]

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, x, *, grad: bool = True) -> Tensor:
        """Class probabilities [N, 2] for a batch of occupancy volumes [N, 1, D, H, W]."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        r = self.input_resolution
        if x.data.ndim != 5 or x.shape[1:] != (1, r, r, r):
            raise ShapeError(f"model input must be [N, 1, {r}, {r}, {r}], got {x.shape}")
        params = self.params if grad else {k: Tensor(p.data) for k, p in self.params.items()}
        values: Dict[str, Tensor] = {INPUT: x}
        for layer in self.layers:
            values[layer.name] = self._apply(layer, [values[s] for s in layer.inputs], params)
        return values[self.layers[-1].name]

    @staticmethod
    def _apply(layer: LayerSpec, args: List[Tensor], params: Mapping[str, Tensor]) -> Tensor:
        kind = layer.kind
        if kind is LayerKind.conv3d:
            return ops.conv3d(
                args[0],
                params[f"{layer.name}.weight"],
                params[f"{layer.name}.bias"],
                stride=tuple(layer.get("stride")),
                padding=tuple(layer.get("padding")),
            )
        if kind is LayerKind.leaky_relu:
            return ops.leaky_relu(args[0], layer.get("slope"))
        if kind is LayerKind.global_max_pool:
            return ops.global_pool(args[0], "max")
        if kind is LayerKind.global_avg_pool:
            return ops.global_pool(args[0], "avg")
        if kind is LayerKind.fully_connected:
            return ops.fully_connected(args[0], params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        if kind is LayerKind.concat:
            return ops.concat(args, axis=1)
        if kind is LayerKind.sigmoid:
            return ops.sigmoid(args[0])
        if kind is LayerKind.multiply:
            return ops.multiply_broadcast(args[0], args[1])
        if kind is LayerKind.flatten:
            return ops.flatten(args[0])
        if kind is LayerKind.softmax:
            return ops.softmax(args[0])
        raise ValueError(f"unsupported layer kind {kind}")


def build_model(config: ModelConfig) -> Model:
    layers = layer_manifest(config)
    params = {
        name: parameter(_init_param(name, shape, config.init_seed))
        for layer in layers
        for name, shape in layer.param_shapes()
    }
    model = Model(config=config, layers=layers, params=params)
    logger.info(
        f"Model built: resolution={config.input_resolution}, variant={config.filter_variant.value}, "
        f"attention={config.attention_enabled}, layers={len(layers)}, parameters={model.parameter_count()}"
    )
    return model


def parameter_count(model: Model) -> int:
    return model.parameter_count()


def model_summary(model: Model) -> str:
    config = model.config
    lines = [
        f"VoxAtnNet summary (variant={config.filter_variant.value}, attention={config.attention_enabled})",
        f"layers: {len(model.layers)}",
        "",
        f"{'layer':<12} {'kind':<15} {'output @ ' + str(config.input_resolution):<24} output @ {REFERENCE_RESOLUTION}",
    ]
    here = infer_shapes(config)
    at_reference = dict(infer_shapes(config.model_copy(update={"input_resolution": REFERENCE_RESOLUTION})))
    for layer, (name, shape) in zip(model.layers, here):
        lines.append(f"{name:<12} {layer.kind.value:<15} {str(list(shape)):<24} {list(at_reference[name])}")
    reference_count = count_parameters(config.model_copy(update={"input_resolution": REFERENCE_RESOLUTION}))
    lines += [
        "",
        f"total parameters: {model.parameter_count()}",
        f"total parameters at {REFERENCE_RESOLUTION}^3: {reference_count} "
        f"({100.0 * reference_count / PARAMETER_TARGET:.2f}% of {PARAMETER_TARGET})",
        f"fc_hidden: {config.fc_hidden} (calibrated width for the {REFERENCE_RESOLUTION}^3 layout: "
        f"{calibrate_fc_hidden(config.model_copy(update={'input_resolution': REFERENCE_RESOLUTION}))})",
    ]
    return "\n".join(lines) + "\n"


# --- checkpoints ---


def save_checkpoint(model: Model) -> bytes:
    return write_checkpoint(model.manifest(), [(name, p.data) for name, p in model.params.items()])


def load_checkpoint(data: bytes, config: ModelConfig) -> Model:
    model = build_model(config)
    arrays = read_checkpoint(data, model.manifest(), param_shapes(config))
    for name, arr in arrays.items():
        model.params[name] = parameter(arr)
    return model


# --- training and scoring ---


@dataclass
class TrainResult:
    model: Model
    loss_history: List[float]


def _augment_seed(cfg: TrainConfig, epoch: int, index: int) -> int:
    ss = np.random.SeedSequence([cfg.rng_seed, cfg.augment.rng_seed, epoch, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _epoch_grids(
    clouds: Sequence[PointCloud], cfg: TrainConfig, grid: GridSpec, epoch: int
) -> Tuple[np.ndarray, np.ndarray]:
    occupancy: List[np.ndarray] = []
    labels: List[int] = []
    for i, cloud in enumerate(clouds):
        spec: AugmentSpec = cfg.augment.model_copy(update={"rng_seed": _augment_seed(cfg, epoch, i)})
        for copy in augment(cloud, spec):
            occupancy.append(voxelize(copy, grid).occupancy)
            labels.append(cloud.label.binary().index)
    return np.stack(occupancy), np.asarray(labels, dtype=np.int64)


def _batch_tensor(occupancy: np.ndarray) -> Tensor:
    return Tensor(occupancy[:, np.newaxis].astype(np.float64))


def train(model: Model, dataset: Sequence[PointCloud], cfg: TrainConfig) -> TrainResult:
    """SGDM training with per-epoch augmentation; mutates and returns model."""
    classes = {c.label.binary() for c in dataset}
    if len(classes) < 2:
        present = ", ".join(sorted(c.value for c in classes)) or "none"
        raise DatasetError(f"training set must contain bona fide and attack samples (found: {present})")
    clouds = [c if c.space is Space.normalized else normalize(c) for c in dataset]
    grid = GridSpec(resolution=model.input_resolution)
    opt = SGDM(model.params, learning_rate=cfg.learning_rate, momentum=cfg.momentum)
    num_classes = model.config.num_classes

    history: List[float] = []
    for epoch in range(cfg.epochs):
        occupancy, labels = _epoch_grids(clouds, cfg, grid, epoch)
        order = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, epoch, 0xB47C])).permutation(len(labels))
        batch_losses: List[float] = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            try:
                opt.zero_grad()
                probs = model.forward(_batch_tensor(occupancy[idx]))
                loss = ops.cross_entropy(probs, ops.one_hot(labels[idx], num_classes))
                loss.backward()
                opt.step()
            except NonFiniteError as e:
                raise NonFiniteError(f"training diverged at epoch={epoch}, batch={b}: {e}") from e
            batch_losses.append(loss.item())
        mean = float(np.mean(batch_losses))
        history.append(mean)
        logger.info(f"Epoch finished: epoch={epoch}, loss={mean:.6f}, batches={len(batch_losses)}, samples={len(labels)}")
    return TrainResult(model=model, loss_history=history)


def predict_score(model: Model, grid: VoxelGrid) -> float:
    """Attack-class probability for one grid."""
    return predict_scores(model, [grid])[0]


def predict_scores(model: Model, grids: Sequence[VoxelGrid], *, batch_size: int = 32, threads: int = 1) -> List[float]:
    r = model.input_resolution
    for g in grids:
        if g.spec.resolution != r:
            raise ShapeError(f"grid resolution {g.spec.resolution} does not match model input resolution {r}")
    if not grids:
        return []
    attack = BinaryClass.attack.index
    batches = [grids[i : i + batch_size] for i in range(0, len(grids), batch_size)]

    def run(batch: Sequence[VoxelGrid]) -> np.ndarray:
        occ = np.stack([g.occupancy for g in batch])
        return model.forward(_batch_tensor(occ), grad=False).data[:, attack]

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    return [float(s) for s in np.concatenate(parts)]


def score_clouds(
    model: Model, clouds: Sequence[PointCloud], *, batch_size: int = 32, threads: int = 1
) -> List[float]:
    grid = GridSpec(resolution=model.input_resolution)
    grids = [voxelize(c if c.space is Space.normalized else normalize(c), grid) for c in clouds]
    return predict_scores(model, grids, batch_size=batch_size, threads=threads)


def model_gradient_check(
    config: ModelConfig, *, batch: int = 2, seed: int = 0, tolerance: float = 1e-4, n_samples: int = 200
) -> GradCheckReport:
    """Finite-difference check of the composed network on a random occupancy batch."""
    model = build_model(config)
    r = config.input_resolution
    rng = np.random.default_rng(seed)
    x = Tensor((rng.random((batch, 1, r, r, r)) < 0.3).astype(np.float64))
    targets = ops.one_hot(np.arange(batch) % 2, config.num_classes)

    def loss_fn() -> Tensor:
        return ops.cross_entropy(model.forward(x), targets)

    return gradient_check(
        loss_fn, model.params, label=f"voxatnnet@{r}^3", tolerance=tolerance, n_samples=n_samples, seed=seed
    )
