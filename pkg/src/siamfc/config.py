"""Layered run configuration: built-in defaults, then a TOML config file,
then command-line flag overrides. Every subcommand writes its fully resolved
snapshot next to its outputs so a run can be reproduced from the snapshot
alone."""

from __future__ import annotations

from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

DEFAULTS = {
    "run": {"seed": 0, "threads": 1},
    "synth": {
        "sequences": 20,
        "frames": 30,
        "canvas_h": 256,
        "canvas_w": 256,
        "objects": 1,
        "clutter": 8,
        "scale_drift": 1.0,
    },
    "curate": {"exemplar_side": 127, "search_side": 255},
    "train": {
        "preset": "paper",
        "epochs": 50,
        "pairs_per_epoch": 50000,
        "batch": 8,
        "lr_start": 1e-2,
        "lr_end": 1e-5,
        "max_gap": 100,
        "radius": 16.0,
        "grayscale_frac": 0.0,
        "momentum": 0.0,
    },
    "track": {
        "scales": 5,
        "scale_step": 1.025,
        "scale_damp": 0.35,
        "window_weight": 0.176,
        "scale_penalty": 0.9745,
        "upsample_to": 272,
        "overlays": False,
    },
    "eval": {"mode": "ope"},
    "study": {"fractions": [0.1, 0.5, 1.0]},
}


def load_config_file(path) -> dict:
    with open(path, "rb") as f:
        return tomllib.load(f)


def resolve(sections, config_path=None, overrides=None) -> dict:
    """Merge defaults <- config file <- explicit overrides for the requested
    sections; the result is fully explicit."""
    resolved = {s: dict(DEFAULTS.get(s, {})) for s in sections}
    if config_path:
        from_file = load_config_file(config_path)
        for s in sections:
            for k, v in from_file.get(s, {}).items():
                resolved[s][k] = v
    for s, kv in (overrides or {}).items():
        if s not in resolved:
            resolved[s] = {}
        for k, v in kv.items():
            if v is not None:
                resolved[s][k] = v
    return resolved


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        text = repr(v)
        return text if any(c in text for c in ".eE") else text + ".0"
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, Path):
        return _toml_value(str(v))
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def write_snapshot(resolved: dict, path) -> Path:
    """Flat two-level TOML: one [section] per module, key = value lines."""
    lines = []
    for section in sorted(resolved):
        lines.append(f"[{section}]")
        for key in sorted(resolved[section]):
            lines.append(f"{key} = {_toml_value(resolved[section][key])}")
        lines.append("")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines))
    return path
