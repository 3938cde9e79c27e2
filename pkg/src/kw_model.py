"""
Kernel Warehouse network model.
Parses a layer manifest, plans its sharing groups, builds the parameter graph
and runs forward/backward passes through plain, warehouse-backed and vanilla
dynamic convolution layers.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from src.assembler import (
    StaleWarehouseError,
    assemble_batch,
    assemble_batch_backward,
    dyconv_assemble,
    dyconv_assemble_backward,
)
from src.attention import (
    AttentionFunction,
    AttentionParams,
    BetaAssignment,
    BetaStrategy,
    Fc2Init,
    attention_backward,
    attention_forward_train,
    init_attention_params,
    init_beta,
)
from src.partition_planner import (
    KernelSpec,
    PartitionPlan,
    PlanError,
    ScaleDivisors,
    plan_partition,
    reassign_stages,
)
from src.tensor_core import (
    ShapeError,
    as_tensor4,
    batch_norm_backward,
    batch_norm_forward,
    conv2d_backward,
    conv2d_backward_per_sample,
    conv2d_forward,
    conv2d_forward_per_sample,
    conv_output_size,
    cross_entropy,
    cross_entropy_backward,
    fc_backward,
    fc_forward,
    global_avg_pool,
    global_avg_pool_backward,
    max_pool2d_backward,
    max_pool2d_forward,
    relu,
    relu_backward,
    resolve_dtype,
)
from src.utils.helpers import format_rational, parse_rational
from src.warehouse import InitScheme, Warehouse, construct_warehouse

logger = logging.getLogger(__name__)

INPUT = "input"
BINDINGS = ("plain", "warehouse", "dyconv")
LAYER_KINDS = ("conv", "maxpool")

LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


class ManifestError(ValueError):
    """Raised for a structurally invalid layer manifest."""


@dataclass(frozen=True)
class LayerSpec:
    """One manifest entry: a convolution (with optional BN, residual add, ReLU) or a max pool."""

    layer_id: str
    k: int
    c: int
    f: int
    kind: str = "conv"
    stride: int = 1
    pad: int = 0
    input: str = INPUT
    add: Optional[str] = None
    bn: bool = True
    relu: bool = True
    binding: str = "plain"
    group: Optional[str] = None
    n: Optional[int] = None

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv"

    @property
    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.layer_id, self.k, self.c, self.f, self.stride, self.pad)

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "maxpool":
            return {"id": self.layer_id, "type": "maxpool", "k": self.k, "stride": self.stride, "pad": self.pad, "input": self.input}
        entry = {
            "id": self.layer_id, "type": "conv", "k": self.k, "c": self.c, "f": self.f,
            "stride": self.stride, "pad": self.pad, "input": self.input, "add": self.add,
            "bn": self.bn, "relu": self.relu, "binding": self.binding,
        }
        if self.binding == "warehouse":
            entry["group"] = self.group
        if self.binding == "dyconv":
            entry["n"] = self.n
        return entry


@dataclass(frozen=True)
class GroupSettings:
    b: Fraction
    scale_divisors: ScaleDivisors
    beta_strategy: BetaStrategy

    def to_dict(self) -> Dict[str, Any]:
        return {"b": format_rational(self.b), "scale_divisors": self.scale_divisors.as_list(), "beta_strategy": str(self.beta_strategy)}


@dataclass(frozen=True)
class ModelManifest:
    """Validated network description."""

    input_channels: int
    input_height: int
    input_width: int
    num_classes: int
    layers: Tuple[LayerSpec, ...]
    head: str
    groups: Dict[str, GroupSettings] = field(default_factory=dict)
    attention_function: AttentionFunction = AttentionFunction.CAF
    reduction: int = 16
    hidden_floor: int = 8
    fc2_init: Fc2Init = Fc2Init.BETA
    init: InitScheme = InitScheme.KAIMING_NORMAL

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "ModelManifest":
        """
        Build a manifest from the "model" and "warehouse" config sections.

        Raises:
            ManifestError: For missing sections, an empty layer list, dangling
                references or channel/shape mismatches
        """
        model = config.get("model")
        if not isinstance(model, dict):
            raise ManifestError("Configuration has no 'model' section")
        raw_layers = model.get("layers")
        if not isinstance(raw_layers, list) or not raw_layers:
            raise ManifestError("Model layer list is empty")

        input_cfg = model.get("input", {})
        try:
            channels = int(input_cfg["channels"])
            height = int(input_cfg["height"])
            width = int(input_cfg["width"])
            num_classes = int(model["num_classes"])
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"Model section needs input.channels/height/width and num_classes: {e}") from e
        if min(channels, height, width) < 1 or num_classes < 2:
            raise ManifestError(f"Invalid model input {channels}x{height}x{width} or num_classes {num_classes}")

        shapes: Dict[str, Tuple[int, int, int]] = {INPUT: (channels, height, width)}
        layers: List[LayerSpec] = []
        previous = INPUT
        for index, raw in enumerate(raw_layers):
            layer = _parse_layer(raw, index, previous, shapes)
            shapes[layer.layer_id] = _output_shape(layer, shapes)
            layers.append(layer)
            previous = layer.layer_id

        head = model.get("head") or previous
        if head not in shapes or head == INPUT:
            raise ManifestError(f"Model head '{head}' is not a layer output")

        warehouse_cfg = config.get("warehouse", {}) or {}
        defaults = warehouse_cfg.get("defaults", {}) or {}
        overrides = warehouse_cfg.get("groups", {}) or {}
        groups: Dict[str, GroupSettings] = {}
        for layer in layers:
            if layer.binding != "warehouse" or layer.group in groups:
                continue
            merged = dict(defaults)
            merged.update(overrides.get(layer.group, {}) or {})
            groups[layer.group] = _parse_group_settings(layer.group, merged)
        unknown = set(overrides) - set(groups)
        if unknown:
            raise ManifestError(f"Warehouse overrides name groups without layers: {sorted(unknown)}")

        try:
            manifest = cls(
                input_channels=channels,
                input_height=height,
                input_width=width,
                num_classes=num_classes,
                layers=tuple(layers),
                head=head,
                groups=groups,
                attention_function=AttentionFunction(warehouse_cfg.get("attention_function", "caf")),
                reduction=int(warehouse_cfg.get("reduction", 16)),
                hidden_floor=int(warehouse_cfg.get("hidden_floor", 8)),
                fc2_init=Fc2Init(warehouse_cfg.get("fc2_init", "beta")),
                init=InitScheme(warehouse_cfg.get("init", "kaiming_normal")),
            )
        except ValueError as e:
            raise ManifestError(f"Invalid warehouse settings: {e}") from e
        if manifest.reduction < 1 or manifest.hidden_floor < 1:
            raise ManifestError(f"reduction and hidden_floor must be positive, got {manifest.reduction} and {manifest.hidden_floor}")
        logger.debug(f"Parsed manifest with {len(layers)} layers and {len(groups)} warehouse groups")
        return manifest

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(f"Unknown layer '{layer_id}'")

    def conv_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.is_conv]

    def output_shapes(self) -> Dict[str, Tuple[int, int, int]]:
        shapes = {INPUT: (self.input_channels, self.input_height, self.input_width)}
        for layer in self.layers:
            shapes[layer.layer_id] = _output_shape(layer, shapes)
        return shapes

    @property
    def head_channels(self) -> int:
        return self.output_shapes()[self.head][0]

    def structure(self) -> Dict[str, Any]:
        """Everything that fixes parameter shapes and their meaning, for topology hashing."""
        return {
            "input": [self.input_channels, self.input_height, self.input_width],
            "num_classes": self.num_classes,
            "head": self.head,
            "layers": [layer.to_dict() for layer in self.layers],
            "warehouse": {
                "groups": {group_id: settings.to_dict() for group_id, settings in self.groups.items()},
                "attention_function": self.attention_function.value,
                "reduction": self.reduction,
                "hidden_floor": self.hidden_floor,
            },
        }


def _require_int(raw: Dict[str, Any], key: str, layer_id: str, default: Optional[int] = None, minimum: int = 1) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ManifestError(f"Layer '{layer_id}': '{key}' must be an integer >= {minimum}, got {value!r}")
    return value


def _parse_layer(raw: Any, index: int, previous: str, shapes: Dict[str, Tuple[int, int, int]]) -> LayerSpec:
    if not isinstance(raw, dict):
        raise ManifestError(f"Layer entry {index} must be an object, got {type(raw).__name__}")
    layer_id = raw.get("id")
    if not isinstance(layer_id, str) or not layer_id:
        raise ManifestError(f"Layer entry {index} has no 'id'")
    if layer_id in shapes:
        raise ManifestError(f"Layer id '{layer_id}' is used twice")

    source = raw.get("input", previous)
    if source not in shapes:
        raise ManifestError(f"Layer '{layer_id}': input '{source}' is not an earlier tensor")
    in_channels = shapes[source][0]
    kind = raw.get("type", "conv")
    if kind not in LAYER_KINDS:
        raise ManifestError(f"Layer '{layer_id}': unknown type '{kind}'")

    k = _require_int(raw, "k", layer_id)
    stride = _require_int(raw, "stride", layer_id, default=1)
    pad = _require_int(raw, "pad", layer_id, default=0, minimum=0)

    if kind == "maxpool":
        return LayerSpec(layer_id, k, in_channels, in_channels, kind="maxpool", stride=stride, pad=pad, input=source, bn=False, relu=False)

    c = _require_int(raw, "c", layer_id, default=in_channels)
    f = _require_int(raw, "f", layer_id)
    if c != in_channels:
        raise ManifestError(f"Layer '{layer_id}': declares c={c} but input '{source}' has {in_channels} channels")

    binding = raw.get("binding", "plain")
    if binding not in BINDINGS:
        raise ManifestError(f"Layer '{layer_id}': unknown binding '{binding}'. Expected one of {list(BINDINGS)}")
    group = raw.get("group")
    n = raw.get("n")
    if binding == "warehouse":
        if not isinstance(group, str) or not group:
            raise ManifestError(f"Layer '{layer_id}': warehouse binding needs a 'group'")
    else:
        group = None
    if binding == "dyconv":
        n = _require_int(raw, "n", layer_id)
    else:
        n = None

    add = raw.get("add")
    if add is not None and add not in shapes:
        raise ManifestError(f"Layer '{layer_id}': residual source '{add}' is not an earlier tensor")

    layer = LayerSpec(
        layer_id, k, c, f, kind="conv", stride=stride, pad=pad, input=source, add=add,
        bn=bool(raw.get("bn", True)), relu=bool(raw.get("relu", True)), binding=binding, group=group, n=n,
    )
    try:
        layer.kernel_spec
    except PlanError as e:
        raise ManifestError(str(e)) from e
    return layer


def _output_shape(layer: LayerSpec, shapes: Dict[str, Tuple[int, int, int]]) -> Tuple[int, int, int]:
    _, h, w = shapes[layer.input]
    out_h = conv_output_size(h, layer.k, layer.stride, layer.pad)
    out_w = conv_output_size(w, layer.k, layer.stride, layer.pad)
    if out_h < 1 or out_w < 1:
        raise ManifestError(f"Layer '{layer.layer_id}': input {h}x{w} is too small for k={layer.k}, stride={layer.stride}, pad={layer.pad}")
    shape = (layer.f, out_h, out_w)
    if layer.add is not None and shapes[layer.add] != shape:
        raise ManifestError(f"Layer '{layer.layer_id}': residual '{layer.add}' has shape {shapes[layer.add]}, output is {shape}")
    return shape


def _parse_group_settings(group_id: str, raw: Dict[str, Any]) -> GroupSettings:
    try:
        return GroupSettings(
            b=parse_rational(raw.get("b", "1")),
            scale_divisors=ScaleDivisors.from_sequence(raw.get("scale_divisors", [1, 1, 1])),
            beta_strategy=BetaStrategy.parse(raw.get("beta_strategy", "one_to_one")),
        )
    except ValueError as e:
        raise ManifestError(f"Warehouse group '{group_id}': {e}") from e


def plan_manifest(manifest: ModelManifest) -> Dict[str, PartitionPlan]:
    """
    Reassign warehouse-bound layers to their groups and plan each group.

    Returns:
        Ordered map group_id -> PartitionPlan

    Raises:
        PlanError: If a group cannot be partitioned or its beta strategy is infeasible
    """
    conv_specs = [layer.kernel_spec for layer in manifest.conv_layers()]
    grouping = [(layer.layer_id, layer.group) for layer in manifest.conv_layers() if layer.binding == "warehouse"]
    excluded = [layer.layer_id for layer in manifest.conv_layers() if layer.binding != "warehouse"]

    plans: Dict[str, PartitionPlan] = {}
    for stage in reassign_stages(conv_specs, grouping, excluded):
        settings = manifest.groups[stage.group_id]
        try:
            plan = plan_partition(stage.specs, settings.b, settings.scale_divisors, group_id=stage.group_id)
            init_beta(plan, settings.beta_strategy)
        except PlanError:
            logger.error(f"Planning failed for group '{stage.group_id}' with layers {list(stage.layer_ids)}")
            raise
        plans[stage.group_id] = plan
    return plans


class LayerState:
    """Parameters and bindings of one manifest layer."""

    def __init__(
        self,
        spec: LayerSpec,
        kernel: Optional[np.ndarray] = None,
        kernels: Optional[np.ndarray] = None,
        bn_gamma: Optional[np.ndarray] = None,
        bn_beta: Optional[np.ndarray] = None,
        attention: Optional[AttentionParams] = None,
        beta: Optional[BetaAssignment] = None,
        plan: Optional[PartitionPlan] = None,
    ):
        self.spec = spec
        self.kernel = kernel
        self.kernels = kernels
        self.bn_gamma = bn_gamma
        self.bn_beta = bn_beta
        self.attention = attention
        self.beta = beta
        self.plan = plan

    @property
    def layer_id(self) -> str:
        return self.spec.layer_id

    def astype(self, dtype: np.dtype) -> "LayerState":
        def cast(array):
            return None if array is None else array.astype(dtype)

        return LayerState(
            self.spec, cast(self.kernel), cast(self.kernels), cast(self.bn_gamma), cast(self.bn_beta),
            None if self.attention is None else self.attention.astype(dtype), self.beta, self.plan,
        )


class ModelGraph:
    """Ordered layers with their shared warehouses, attention states and classifier."""

    def __init__(
        self,
        manifest: ModelManifest,
        plans: Dict[str, PartitionPlan],
        warehouses: Dict[str, Warehouse],
        layers: List[LayerState],
        classifier_weight: np.ndarray,
        classifier_bias: np.ndarray,
    ):
        self.manifest = manifest
        self.plans = plans
        self.warehouses = warehouses
        self.layers = layers
        self.classifier_weight = classifier_weight
        self.classifier_bias = classifier_bias
        self._check_bindings()

    def _check_bindings(self) -> None:
        for group_id, plan in self.plans.items():
            bound = [state.layer_id for state in self.layers if state.spec.binding == "warehouse" and state.spec.group == group_id]
            if tuple(bound) != plan.layer_ids:
                raise ShapeError(f"Group '{group_id}': bound layers {bound} do not match plan members {list(plan.layer_ids)}")

    @property
    def dtype(self) -> np.dtype:
        return self.classifier_weight.dtype

    def layer(self, layer_id: str) -> LayerState:
        for state in self.layers:
            if state.layer_id == layer_id:
                return state
        raise KeyError(f"Unknown layer '{layer_id}'")

    def parameters(self) -> List[Tuple[str, np.ndarray]]:
        """
        Named parameter arrays in checkpoint order: warehouses, attention
        modules, per-layer kernels and BatchNorm, classifier.
        """
        params: List[Tuple[str, np.ndarray]] = []
        for group_id, warehouse in self.warehouses.items():
            params.append((f"warehouse/{group_id}/cells", warehouse.cells))
        for state in self.layers:
            if state.attention is not None:
                for key, array in state.attention.arrays().items():
                    params.append((f"attention/{state.layer_id}/{key}", array))
        for state in self.layers:
            if state.kernel is not None:
                params.append((f"layer/{state.layer_id}/kernel", state.kernel))
            if state.kernels is not None:
                params.append((f"layer/{state.layer_id}/kernels", state.kernels))
            if state.bn_gamma is not None:
                params.append((f"layer/{state.layer_id}/bn_gamma", state.bn_gamma))
                params.append((f"layer/{state.layer_id}/bn_beta", state.bn_beta))
        params.append(("classifier/weight", self.classifier_weight))
        params.append(("classifier/bias", self.classifier_bias))
        return params

    def parameter_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.parameters())

    def astype(self, dtype: Any) -> "ModelGraph":
        """Deep copy with every parameter cast to dtype."""
        dtype = resolve_dtype(dtype)
        return ModelGraph(
            self.manifest,
            self.plans,
            {group_id: warehouse.astype(dtype) for group_id, warehouse in self.warehouses.items()},
            [state.astype(dtype) for state in self.layers],
            self.classifier_weight.astype(dtype),
            self.classifier_bias.astype(dtype),
        )


def _kaiming(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: np.dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_model(manifest: ModelManifest, seed: int = 0, dtype: Any = "float32") -> ModelGraph:
    """
    Construct and initialize a network from its manifest.

    Args:
        manifest: Validated manifest
        seed: Seed for every random initializer
        dtype: "float32" for training, "float64" for gradient checks

    Returns:
        ModelGraph

    Raises:
        PlanError: If a warehouse group cannot be planned
    """
    dtype = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    plans = plan_manifest(manifest)

    warehouses = {group_id: construct_warehouse(plan, manifest.init, rng, dtype) for group_id, plan in plans.items()}
    betas: Dict[str, BetaAssignment] = {}
    for group_id, plan in plans.items():
        betas.update(init_beta(plan, manifest.groups[group_id].beta_strategy))

    layers: List[LayerState] = []
    for spec in manifest.layers:
        if not spec.is_conv:
            layers.append(LayerState(spec))
            continue
        state = LayerState(spec)
        fan_in = spec.k * spec.k * spec.c
        if spec.binding == "plain":
            state.kernel = _kaiming(rng, spec.kernel_spec.kernel_shape, fan_in, dtype)
        elif spec.binding == "warehouse":
            plan = plans[spec.group]
            state.plan = plan
            state.beta = betas[spec.layer_id]
            state.attention = init_attention_params(
                spec.layer_id, spec.c, plan.m_for(spec.layer_id), plan.q, state.beta,
                manifest.reduction, manifest.hidden_floor, manifest.fc2_init, rng, dtype,
            )
        else:
            state.kernels = _kaiming(rng, (spec.n,) + spec.kernel_spec.kernel_shape, fan_in, dtype)
            row = np.zeros((1, spec.n))
            row[0, 0] = 1.0
            row.flags.writeable = False
            state.beta = BetaAssignment(spec.layer_id, row, BetaStrategy())
            state.attention = init_attention_params(
                spec.layer_id, spec.c, 1, spec.n, state.beta,
                manifest.reduction, manifest.hidden_floor, manifest.fc2_init, rng, dtype,
            )
        if spec.bn:
            state.bn_gamma = np.ones(spec.f, dtype=dtype)
            state.bn_beta = np.zeros(spec.f, dtype=dtype)
        layers.append(state)

    head_channels = manifest.head_channels
    classifier_weight = (rng.standard_normal((manifest.num_classes, head_channels)) * np.sqrt(1.0 / head_channels)).astype(dtype)
    classifier_bias = np.zeros(manifest.num_classes, dtype=dtype)

    graph = ModelGraph(manifest, plans, warehouses, layers, classifier_weight, classifier_bias)
    logger.info(f"Built model: {len(layers)} layers, {len(warehouses)} warehouses, dtype {dtype}")
    return graph


@dataclass
class ForwardCache:
    tau: float
    tensors: Dict[str, np.ndarray]
    entries: Dict[str, Dict[str, Any]]
    pooled: np.ndarray
    logits: np.ndarray

    def alphas(self) -> Dict[str, np.ndarray]:
        """Per-layer attention matrices (N, m, q) of warehouse and dyconv layers."""
        return {layer_id: entry["alpha"] for layer_id, entry in self.entries.items() if "alpha" in entry}


def _dyconv_batch(kernels: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    out = np.empty((alpha.shape[0],) + kernels.shape[1:], dtype=kernels.dtype)
    for i in range(alpha.shape[0]):
        out[i] = dyconv_assemble(kernels, alpha[i])
    return out


def forward_with_cache(graph: ModelGraph, batch: np.ndarray, tau: float) -> Tuple[np.ndarray, ForwardCache]:
    """
    Forward pass keeping every intermediate needed by model_backward.

    Returns:
        Tuple of (logits (N, classes), ForwardCache)
    """
    manifest = graph.manifest
    x = as_tensor4(batch, graph.dtype)
    if x.shape[1:] != (manifest.input_channels, manifest.input_height, manifest.input_width):
        raise ShapeError(f"Batch shape {x.shape} does not match model input {(manifest.input_channels, manifest.input_height, manifest.input_width)}")

    function = manifest.attention_function
    tensors: Dict[str, np.ndarray] = {INPUT: x}
    entries: Dict[str, Dict[str, Any]] = {}
    for state in graph.layers:
        spec = state.spec
        inp = tensors[spec.input]
        entry: Dict[str, Any] = {}
        try:
            if spec.kind == "maxpool":
                out, entry["argmax"] = max_pool2d_forward(inp, spec.k, spec.stride, spec.pad)
                tensors[spec.layer_id] = out
                entries[spec.layer_id] = entry
                continue
            if spec.binding == "plain":
                y = conv2d_forward(inp, state.kernel, spec.stride, spec.pad)
            else:
                alpha, entry["attention"] = attention_forward_train(inp, state.attention, tau, state.beta, function)
                entry["alpha"] = alpha
                if spec.binding == "warehouse":
                    warehouse = graph.warehouses[spec.group]
                    entry["version"] = warehouse.version
                    kernels = assemble_batch(warehouse, alpha, state.plan, spec.layer_id)
                else:
                    kernels = _dyconv_batch(state.kernels, alpha)
                entry["kernels"] = kernels
                y = conv2d_forward_per_sample(inp, kernels, spec.stride, spec.pad)
        except ShapeError as e:
            raise ShapeError(f"Layer '{spec.layer_id}': {e}") from e
        if spec.bn:
            y, entry["bn"] = batch_norm_forward(y, state.bn_gamma, state.bn_beta)
        if spec.add is not None:
            y = y + tensors[spec.add]
        if spec.relu:
            entry["pre_relu"] = y
            y = relu(y)
        tensors[spec.layer_id] = y
        entries[spec.layer_id] = entry

    pooled = global_avg_pool(tensors[manifest.head])
    logits = fc_forward(pooled, graph.classifier_weight, graph.classifier_bias)
    return logits, ForwardCache(tau, tensors, entries, pooled, logits)


def model_forward(graph: ModelGraph, batch: np.ndarray, tau: float) -> np.ndarray:
    """
    Logits of a batch at temperature tau.

    Args:
        graph: Model
        batch: Input tensor (N, C, H, W)
        tau: Attention temperature

    Returns:
        Logits (N, classes)
    """
    logits, _ = forward_with_cache(graph, batch, tau)
    return logits


def _accumulate(grads: Dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def model_backward(graph: ModelGraph, cache: ForwardCache, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradients of every parameter given the gradient at the logits.

    Returns:
        Map parameter name (as in ModelGraph.parameters) -> gradient array

    Raises:
        StaleWarehouseError: If a warehouse was updated after the forward pass
    """
    manifest = graph.manifest
    function = manifest.attention_function
    grads = {name: np.zeros_like(array) for name, array in graph.parameters()}

    grad_pooled, grads["classifier/weight"], grads["classifier/bias"] = fc_backward(grad_logits, cache.pooled, graph.classifier_weight)
    tensor_grads: Dict[str, np.ndarray] = {manifest.head: global_avg_pool_backward(grad_pooled, cache.tensors[manifest.head].shape)}

    for state in reversed(graph.layers):
        spec = state.spec
        grad = tensor_grads.pop(spec.layer_id, None)
        if grad is None:
            continue
        entry = cache.entries[spec.layer_id]
        inp = cache.tensors[spec.input]

        if spec.kind == "maxpool":
            _accumulate(tensor_grads, spec.input, max_pool2d_backward(grad, entry["argmax"], inp.shape, spec.k, spec.stride, spec.pad))
            continue
        if spec.relu:
            grad = relu_backward(grad, entry["pre_relu"])
        if spec.add is not None:
            _accumulate(tensor_grads, spec.add, grad)
        if spec.bn:
            grad, grads[f"layer/{spec.layer_id}/bn_gamma"], grads[f"layer/{spec.layer_id}/bn_beta"] = batch_norm_backward(grad, entry["bn"])

        if spec.binding == "plain":
            grad_input, grads[f"layer/{spec.layer_id}/kernel"] = conv2d_backward(grad, inp, state.kernel, spec.stride, spec.pad)
        else:
            grad_input, grad_kernels = conv2d_backward_per_sample(grad, inp, entry["kernels"], spec.stride, spec.pad)
            alpha = entry["alpha"]
            if spec.binding == "warehouse":
                warehouse = graph.warehouses[spec.group]
                if warehouse.version != entry["version"]:
                    raise StaleWarehouseError(
                        f"Layer '{spec.layer_id}': warehouse '{spec.group}' moved from version {entry['version']} to {warehouse.version} since the forward pass"
                    )
                grad_cells, grad_alpha = assemble_batch_backward(grad_kernels, warehouse, alpha, state.plan, spec.layer_id)
                grads[f"warehouse/{spec.group}/cells"] += grad_cells
            else:
                grad_alpha = np.zeros_like(alpha)
                grad_stack = np.zeros_like(state.kernels)
                for i in range(alpha.shape[0]):
                    grad_stack_i, grad_alpha[i] = dyconv_assemble_backward(grad_kernels[i], state.kernels, alpha[i])
                    grad_stack += grad_stack_i
                grads[f"layer/{spec.layer_id}/kernels"] = grad_stack
            attention_grads = attention_backward(grad_alpha, entry["attention"], state.attention, cache.tau, function)
            for key in ("w1", "b1", "w2", "b2"):
                grads[f"attention/{spec.layer_id}/{key}"] = attention_grads[key]
            grad_input = grad_input + attention_grads["x"]
        _accumulate(tensor_grads, spec.input, grad_input)

    return grads


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    return cross_entropy(logits, labels), cross_entropy_backward(logits, labels)


def loss_and_gradients(
    graph: ModelGraph,
    batch: np.ndarray,
    labels: np.ndarray,
    tau: float,
    loss_fn: Optional[LossFn] = None,
) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """
    Forward, loss and backward in one call.

    Args:
        loss_fn: Callable (logits, labels) -> (loss, grad_logits); cross-entropy by default

    Returns:
        Tuple of (loss, gradients by parameter name, logits)
    """
    loss_fn = loss_fn or cross_entropy_loss
    logits, cache = forward_with_cache(graph, batch, tau)
    loss, grad_logits = loss_fn(logits, labels)
    return loss, model_backward(graph, cache, grad_logits), logits
