"""Model checkpoints: NLNN weights plus a JSON sidecar describing the architecture."""
import json
from pathlib import Path

from .extrap import ExtrapolatorConfig, ExtrapolatorModel, config_to_dict
from .keyframe import DetectorModel
from .nn.checkpoint import load_params, save_params


def _sidecar(path):
    return Path(path).with_suffix(".json")


def save_model(model, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, DetectorModel):
        desc = {"kind": "detector", "height": model.height, "width": model.width,
                "widths": list(model.widths)}
    elif isinstance(model, ExtrapolatorModel):
        desc = {"kind": "extrapolator", "config": config_to_dict(model.config)}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    desc.update(extra or {})
    save_params(model, path)
    _sidecar(path).write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")


def load_model(path):
    """Returns (model, descriptor)."""
    path = Path(path)
    try:
        desc = json.loads(_sidecar(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{_sidecar(path)}: corrupt descriptor ({exc.msg})") from None
    kind = desc.get("kind")
    if kind == "detector":
        model = DetectorModel(desc["height"], desc["width"], tuple(desc["widths"]))
    elif kind == "extrapolator":
        model = ExtrapolatorModel(ExtrapolatorConfig(**desc["config"]))
    else:
        raise ValueError(f"{_sidecar(path)}: unknown model kind {kind!r}")
    load_params(model, path)
    return model, desc
