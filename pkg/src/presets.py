"""
Built-in model manifests.
"""
import logging
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

RESNET18_VARIANTS = ("kw", "baseline", "dyconv")
RESNET18_STAGE_POLICIES = ("reassigned", "original", "layer", "single")

# (stage index, output channels, first-block stride)
_RESNET18_STAGES = ((1, 64, 1), (2, 128, 2), (3, 256, 2), (4, 512, 2))


def _resnet18_convs() -> List[Dict[str, Any]]:
    """Conv layers of ResNet18 in execution order; the stem is listed first."""
    layers: List[Dict[str, Any]] = [
        {"id": "conv1", "k": 7, "c": 3, "f": 64, "stride": 2, "pad": 3},
        {"id": "maxpool", "type": "maxpool", "k": 3, "stride": 2, "pad": 1},
    ]
    previous, channels = "maxpool", 64
    for stage, width, stride in _RESNET18_STAGES:
        for block in range(2):
            prefix = f"layer{stage}.{block}"
            block_stride = stride if block == 0 else 1
            layers.append({"id": f"{prefix}.conv1", "k": 3, "c": channels, "f": width, "stride": block_stride, "pad": 1, "input": previous})
            shortcut = previous
            if block_stride != 1 or channels != width:
                layers.append({"id": f"{prefix}.downsample", "k": 1, "c": channels, "f": width, "stride": block_stride, "pad": 0, "input": previous, "relu": False})
                shortcut = f"{prefix}.downsample"
            layers.append({"id": f"{prefix}.conv2", "k": 3, "c": width, "f": width, "stride": 1, "pad": 1, "input": f"{prefix}.conv1", "add": shortcut})
            previous, channels = f"{prefix}.conv2", width
    return layers


def _stage_of(layer_id: str) -> int:
    return int(layer_id[len("layer")])


def _reassigned_group(layer_id: str) -> str:
    """
    Each stage's first 3x3 conv and its downsample join the previous stage's
    warehouse; the stage keeps the rest of its convs.
    """
    stage = _stage_of(layer_id)
    if stage > 1 and (layer_id.endswith(".0.conv1") or layer_id.endswith(".0.downsample")):
        stage -= 1
    return f"stage{stage}"


def resnet18_group(layer_id: str, stages: str = "reassigned") -> str:
    """Warehouse group of a non-stem ResNet18 conv under a sharing policy."""
    if stages == "reassigned":
        return _reassigned_group(layer_id)
    if stages == "original":
        return f"stage{_stage_of(layer_id)}"
    if stages == "layer":
        return layer_id
    if stages == "single":
        return "shared"
    raise ValueError(f"Unknown stage policy '{stages}'. Expected one of {list(RESNET18_STAGE_POLICIES)}")


def resnet18_model(
    variant: str = "kw",
    stages: str = "reassigned",
    num_classes: int = 1000,
    image_size: int = 224,
    dyconv_n: int = 4,
) -> Dict[str, Any]:
    """
    ResNet18 as a "model" config section.

    Args:
        variant: "kw" binds every conv except the stem to a warehouse,
            "baseline" keeps all convs plain, "dyconv" makes every non-stem conv
            a vanilla dynamic convolution with dyconv_n kernels
        stages: Warehouse sharing policy for the kw variant
        num_classes: Classifier width
        image_size: Square input resolution
        dyconv_n: Kernel count of dyconv layers

    Returns:
        Model section dictionary
    """
    if variant not in RESNET18_VARIANTS:
        raise ValueError(f"Unknown ResNet18 variant '{variant}'. Expected one of {list(RESNET18_VARIANTS)}")
    if variant == "kw":
        resnet18_group("layer1.0.conv1", stages)

    layers = []
    for layer in _resnet18_convs():
        if layer["id"] in ("conv1", "maxpool"):
            layers.append(layer)
            continue
        if variant == "kw":
            layer = dict(layer, binding="warehouse", group=resnet18_group(layer["id"], stages))
        elif variant == "dyconv":
            layer = dict(layer, binding="dyconv", n=dyconv_n)
        layers.append(layer)

    return {
        "input": {"channels": 3, "height": image_size, "width": image_size},
        "num_classes": num_classes,
        "layers": layers,
        "head": "layer4.1.conv2",
    }


PRESETS = {
    "resnet18": resnet18_model,
}


def expand_preset(name: str, options: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Expand a named preset into a model section.

    Raises:
        ValueError: For an unknown preset or invalid options
    """
    if name not in PRESETS:
        raise ValueError(f"Unknown model preset '{name}'. Available: {sorted(PRESETS)}")
    try:
        model = PRESETS[name](**(options or {}))
    except TypeError as e:
        raise ValueError(f"Invalid options for preset '{name}': {e}") from e
    logger.debug(f"Expanded preset '{name}' into {len(model['layers'])} layers")
    return model
