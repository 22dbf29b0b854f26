"""Hierarchical experiment configuration.

Every key lives in :data:`SCHEMA` with a type and a default.  A config file is
a YAML subset (nested maps of uppercase keys, lists, scalars; no anchors,
aliases or tags) whose values overlay the defaults.  Command-line overrides
are ``KEY VALUE`` pairs applied in order on top of that, and the environment
variable ``VOLSEG_NUM_WORKERS`` sits between the file and the overrides.
"""

from __future__ import annotations

import difflib
import os
from typing import Mapping, Sequence

import yaml

from .augment import AugmentSpec
from .decode import DecodeParams
from .errors import ConfigError, InvalidArgumentError
from .targets import LossTerm, TargetSpec

SCHEMA_VERSION = 1
ENV_WORKERS = "VOLSEG_NUM_WORKERS"

# libyaml when present; same token and node stream, about ten times faster
_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)

# type tags: int, float, bool, str, float?, and list forms "[int]", "[[float]]", ...
SCHEMA: dict[str, tuple[str, object]] = {
    "SCHEMA_VERSION": ("int", SCHEMA_VERSION),
    "OUTPUT_PATH": ("str", "outputs"),

    "SYSTEM.NUM_WORKERS": ("int", 1),
    "SYSTEM.CHUNK_WORKERS": ("int", 1),
    "SYSTEM.SEED": ("int", 0),

    "DATASET.IMAGE_PATH": ("[str]", []),
    "DATASET.LABEL_PATH": ("[str]", []),
    "DATASET.PSEUDO_IMAGE_PATH": ("[str]", []),
    "DATASET.PSEUDO_LABEL_PATH": ("[str]", []),
    "DATASET.TILE_METADATA": ("str", ""),
    "DATASET.VOLUME_SHAPE": ("[int]", []),
    "DATASET.WINDOW_SIZE": ("[int]", [8, 64, 64]),
    "DATASET.STRIDE": ("[int]", [4, 32, 32]),
    "DATASET.CHUNK_SIZE": ("[int]", [64, 512, 512]),
    "DATASET.CHUNK_OVERLAP": ("[int]", [8, 64, 64]),
    "DATASET.SPLIT_FRACTIONS": ("[float]", [1.0]),
    "DATASET.SPLIT_INDEX": ("int", 0),
    "DATASET.REJECT_PROB": ("float", 0.0),
    "DATASET.MAX_ATTEMPTS": ("int", 100),
    "DATASET.MIN_FOREGROUND": ("int", 1),

    "AUGMENTOR.ORDER": ("[str]", ["rescale", "flip", "transpose", "grayscale", "missing_part", "misalignment"]),
    "AUGMENTOR.GRAYSCALE.PROB": ("float", 0.5),
    "AUGMENTOR.GRAYSCALE.BRIGHTNESS_RANGE": ("[float]", [-0.1, 0.1]),
    "AUGMENTOR.GRAYSCALE.CONTRAST_RANGE": ("[float]", [0.8, 1.2]),
    "AUGMENTOR.GRAYSCALE.GAMMA_RANGE": ("[float]", [0.8, 1.25]),
    "AUGMENTOR.GRAYSCALE.INVERT_PROB": ("float", 0.0),
    "AUGMENTOR.MISSING_PART.PROB": ("float", 0.5),
    "AUGMENTOR.MISSING_PART.NUM_REGIONS": ("int", 2),
    "AUGMENTOR.MISSING_PART.MAX_EXTENT_FRACTION": ("float", 0.5),
    "AUGMENTOR.MISSING_PART.FILL": ("float?", None),
    "AUGMENTOR.MISALIGNMENT.PROB": ("float", 0.5),
    "AUGMENTOR.MISALIGNMENT.MAX_SHIFT_PX": ("int", 8),
    "AUGMENTOR.MISALIGNMENT.ROTATE": ("bool", False),
    "AUGMENTOR.MISALIGNMENT.MAX_ANGLE_DEG": ("float", 10.0),
    "AUGMENTOR.RESCALE.PROB": ("float", 0.5),
    "AUGMENTOR.RESCALE.SCALE_RANGE": ("[float]", [0.8, 1.2]),
    "AUGMENTOR.RESCALE.MODE_3D": ("bool", False),
    "AUGMENTOR.FLIP.PROB": ("float", 0.5),
    "AUGMENTOR.TRANSPOSE.PROB": ("float", 0.5),

    "MODEL.TARGET_OPT": ("[str]", ["binary"]),
    "MODEL.LOSS_OPTION": ("[[str]]", [["weighted_bce"]]),
    "MODEL.LOSS_WEIGHT": ("[[float]]", [[1.0]]),
    "MODEL.TARGET_WEIGHT": ("[float]", [1.0]),
    "MODEL.WEIGHT_OPT": ("[str]", ["none"]),
    "MODEL.OUTPUT_ACT": ("[str]", ["sigmoid"]),
    "MODEL.OUT_PLANES": ("int", 1),
    "MODEL.CONTOUR_RADIUS": ("int", 1),
    "MODEL.CONTOUR_CONNECTIVITY": ("int", 26),
    "MODEL.SDT_ALPHA": ("float", 8.0),
    "MODEL.SDT_BETA": ("float", 50.0),
    "MODEL.SDT_CLAMP": ("bool", True),
    "MODEL.AFFINITY_OFFSETS": ("[[int]]", [[1, 0, 0], [0, 1, 0], [0, 0, 1]]),

    "INFERENCE.INPUT_PATH": ("str", ""),
    "INFERENCE.BLEND": ("str", "cosine"),
    "INFERENCE.TTA": ("bool", False),
    "INFERENCE.WINDOW_SIZE": ("[int]", [8, 64, 64]),
    "INFERENCE.STRIDE": ("[int]", [4, 32, 32]),
    "INFERENCE.CHUNKED": ("bool", False),
    "INFERENCE.VALUE_RANGES": ("[[float]]", []),
    "INFERENCE.PREDICTOR": ("str", "identity"),
    "INFERENCE.PREDICTOR_COMMAND": ("[str]", []),
    "INFERENCE.PREDICTOR_FILE": ("str", ""),
    "INFERENCE.TIMEOUT": ("float", 60.0),
    "INFERENCE.CONSTANT_VALUE": ("float", 0.5),
    "INFERENCE.BLUR_SIGMA": ("float", 1.0),
    "INFERENCE.BLUR_THRESHOLD": ("float", 0.5),
    "INFERENCE.BLUR_SHARPNESS": ("float", 20.0),

    "DECODE.INPUT_PATH": ("str", ""),
    "DECODE.MODE": ("str", "bc"),
    "DECODE.CHANNELS": ("[int]", [0, 1, 2]),
    "DECODE.SEMANTIC_THRESHOLD": ("float", 0.5),
    "DECODE.MEDIAN_FILTER": ("bool", False),
    "DECODE.MEDIAN_KERNEL": ("[int]", [7, 7, 7]),
    "DECODE.SEED_THRESHOLD": ("float", 0.90),
    "DECODE.FOREGROUND_THRESHOLD": ("float", 0.85),
    "DECODE.CONTOUR_THRESHOLD": ("float", 0.80),
    "DECODE.DISTANCE_SEED_THRESHOLD": ("float", 0.50),
    "DECODE.MIN_INSTANCE_VOXELS": ("int", 128),
    "DECODE.CONNECTIVITY": ("int", 6),

    "EVAL.PRED_PATH": ("[str]", []),
    "EVAL.GT_PATH": ("[str]", []),
    "EVAL.NAMES": ("[str]", []),
    "EVAL.METRICS": ("[str]", ["iou"]),
    "EVAL.AP_THRESHOLDS": ("[float]", [0.5, 0.75]),

    "EXPORT.INPUT_PATH": ("str", ""),
    "EXPORT.AXIS": ("str", "z"),
    "EXPORT.DIR": ("str", ""),
}

CHOICES = {
    "INFERENCE.BLEND": ("cosine", "uniform"),
    "INFERENCE.PREDICTOR": ("identity", "constant", "blur_threshold", "file", "subprocess"),
    "DECODE.MODE": ("semantic", "bc", "bcd"),
    "EXPORT.AXIS": ("z", "y", "x"),
}

# Which config keys feed each operation parameter.  The schema-closure audit in
# the test suite walks the public API and checks every parameter is listed
# here, pinned with a reason, or is a data argument.
PARAM_KEYS = {
    "volume_shape": ("DATASET.VOLUME_SHAPE",),
    "window_extent": ("DATASET.WINDOW_SIZE", "INFERENCE.WINDOW_SIZE"),
    "stride": ("DATASET.STRIDE", "INFERENCE.STRIDE"),
    "chunk_extent": ("DATASET.CHUNK_SIZE",),
    "overlap": ("DATASET.CHUNK_OVERLAP",),
    "fractions": ("DATASET.SPLIT_FRACTIONS",),
    "reject_prob": ("DATASET.REJECT_PROB",),
    "max_attempts": ("DATASET.MAX_ATTEMPTS",),
    "min_foreground": ("DATASET.MIN_FOREGROUND",),
    "seed": ("SYSTEM.SEED",),
    "workers": ("SYSTEM.NUM_WORKERS", "SYSTEM.CHUNK_WORKERS"),
    "specs": ("AUGMENTOR.ORDER", "MODEL.TARGET_OPT"),
    "kind": ("AUGMENTOR.ORDER", "MODEL.TARGET_OPT", "INFERENCE.BLEND"),
    "probability": ("AUGMENTOR.FLIP.PROB", "AUGMENTOR.GRAYSCALE.PROB"),
    "params": ("AUGMENTOR.GRAYSCALE.GAMMA_RANGE", "MODEL.SDT_ALPHA", "DECODE.SEED_THRESHOLD"),
    "brightness": ("AUGMENTOR.GRAYSCALE.BRIGHTNESS_RANGE",),
    "contrast": ("AUGMENTOR.GRAYSCALE.CONTRAST_RANGE",),
    "gamma": ("AUGMENTOR.GRAYSCALE.GAMMA_RANGE",),
    "invert": ("AUGMENTOR.GRAYSCALE.INVERT_PROB",),
    "fill": ("AUGMENTOR.MISSING_PART.FILL",),
    "shift": ("AUGMENTOR.MISALIGNMENT.MAX_SHIFT_PX",),
    "angle_deg": ("AUGMENTOR.MISALIGNMENT.MAX_ANGLE_DEG",),
    "factor": ("AUGMENTOR.RESCALE.SCALE_RANGE",),
    "mode_3d": ("AUGMENTOR.RESCALE.MODE_3D",),
    "transpose": ("AUGMENTOR.TRANSPOSE.PROB",),
    "transpose_xy": ("AUGMENTOR.TRANSPOSE.PROB",),
    "flip_z": ("AUGMENTOR.FLIP.PROB",),
    "flip_y": ("AUGMENTOR.FLIP.PROB",),
    "flip_x": ("AUGMENTOR.FLIP.PROB",),
    "losses": ("MODEL.LOSS_OPTION",),
    "weight": ("MODEL.LOSS_WEIGHT",),
    "target_weight": ("MODEL.TARGET_WEIGHT",),
    "weight_opt": ("MODEL.WEIGHT_OPT",),
    "activation": ("MODEL.OUTPUT_ACT",),
    "radius": ("MODEL.CONTOUR_RADIUS",),
    "connectivity": ("MODEL.CONTOUR_CONNECTIVITY", "DECODE.CONNECTIVITY"),
    "alpha": ("MODEL.SDT_ALPHA",),
    "beta": ("MODEL.SDT_BETA",),
    "clamp": ("MODEL.SDT_CLAMP",),
    "offsets": ("MODEL.AFFINITY_OFFSETS",),
    "channels": ("MODEL.OUT_PLANES",),
    "blend_kind": ("INFERENCE.BLEND",),
    "tta": ("INFERENCE.TTA",),
    "value_ranges": ("INFERENCE.VALUE_RANGES",),
    "command": ("INFERENCE.PREDICTOR_COMMAND",),
    "timeout": ("INFERENCE.TIMEOUT",),
    "value": ("INFERENCE.CONSTANT_VALUE",),
    "sigma": ("INFERENCE.BLUR_SIGMA",),
    "threshold": ("INFERENCE.BLUR_THRESHOLD",),
    "sharpness": ("INFERENCE.BLUR_SHARPNESS",),
    "predictions": ("INFERENCE.PREDICTOR_FILE",),
    "kernel_extent": ("DECODE.MEDIAN_KERNEL",),
    "theta": ("DECODE.SEMANTIC_THRESHOLD",),
    "min_voxels": ("DECODE.MIN_INSTANCE_VOXELS",),
    "seed_threshold": ("DECODE.SEED_THRESHOLD",),
    "foreground_threshold": ("DECODE.FOREGROUND_THRESHOLD",),
    "contour_threshold": ("DECODE.CONTOUR_THRESHOLD",),
    "distance_seed_threshold": ("DECODE.DISTANCE_SEED_THRESHOLD",),
    "min_instance_voxels": ("DECODE.MIN_INSTANCE_VOXELS",),
    "thresholds": ("EVAL.AP_THRESHOLDS",),
    "metrics": ("EVAL.METRICS",),
    "out_dir": ("OUTPUT_PATH",),
    "files": ("OUTPUT_PATH",),
    "directory": ("EXPORT.DIR",),
    "axis": ("EXPORT.AXIS",),
    "path": ("DATASET.IMAGE_PATH", "DATASET.TILE_METADATA", "INFERENCE.INPUT_PATH"),
}

# Options the pipeline fixes on purpose, with the reason.
PINNED_PARAMS = {
    "mode": "padding before inference is always reflect",
    "margins": "derived from the window size and the volume shape",
    "env": "subprocess environment is inherited from the caller",
    "tag": "set from which DATASET path list a source came from",
    "extra_header": "filled by the stage writing the file",
}

# Arguments that carry data or per-call plumbing rather than options.  The
# voxel resolution always travels in the volume header.
DATA_PARAMS = frozenset({
    "labels", "label", "image", "volume", "data", "mask", "pred", "gt", "prob", "target", "pred_stack",
    "target_stack", "weight_map", "x", "raster", "box", "plan", "loader", "predictor", "region", "seeds",
    "landscape", "mask_prob", "contour_prob", "distance", "sources", "samplers", "draw_index",
    "sample_index", "rng", "shape", "windows", "blend", "out_shape", "return_coverage", "origin", "origins",
    "reports", "overall", "pairs", "chunk", "chunk_id", "arr", "stream", "stdin", "stdout", "fn", "sites",
    "meta", "recorder", "reader", "labeled", "pseudo", "label_volume", "dtype", "length", "extent",
    "regions", "pivot", "name", "ndim", "line", "resolution", "spacing", "other", "position", "attempts",
    "rng_stream_id", "boxes", "weights", "flags", "matches", "unmatched_gt", "unmatched_pred", "fg_iou",
    "iou", "ap", "adgt", "adf", "cremi", "window", "skipped", "failures", "sections", "tile_extent",
    "augment_log", "source_index", "draw", "chunks",
})


class PipelineConfig(Mapping):
    """Immutable, fully resolved config: dotted key -> value (lists become tuples)."""

    __slots__ = ("_values",)

    def __init__(self, values: Mapping | None = None):
        merged = {k: _freeze(default) for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(_unknown_message(k))
            merged[k] = _freeze(v)
        object.__setattr__(self, "_values", merged)

    def __setattr__(self, *_):
        raise AttributeError("PipelineConfig is immutable")

    def __getitem__(self, key):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(_unknown_message(key)) from None

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self._values == other._values

    def __hash__(self):
        return hash(tuple(self._values.items()))

    def __repr__(self):
        changed = {k: v for k, v in self._values.items() if v != _freeze(SCHEMA[k][1])}
        return f"PipelineConfig({changed})"

    def replace(self, **changes) -> "PipelineConfig":
        """Copy with ``KEY__SUB=value`` style changes (double underscore for dots)."""
        vals = dict(self._values)
        for k, v in changes.items():
            key = k.replace("__", ".")
            vals[key] = coerce(key, v)
        return PipelineConfig(vals)

    def to_tree(self) -> dict:
        tree: dict = {}
        for key, value in self._values.items():
            node = tree
            *parents, leaf = key.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = _thaw(value)
        return tree


def _freeze(v):
    if isinstance(v, (list, tuple)):
        return tuple(_freeze(x) for x in v)
    return v


def _thaw(v):
    if isinstance(v, tuple):
        return [_thaw(x) for x in v]
    return v


def _unknown_message(key: str) -> str:
    near = difflib.get_close_matches(key, list(SCHEMA), n=1, cutoff=0.0)
    hint = f"; did you mean {near[0]}?" if near else ""
    return f"unknown config key {key}{hint}"


# ---------------------------------------------------------------------------
# type checking


def _check(tag: str, value, key: str):
    if tag.startswith("["):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list {tag}, got {type(value).__name__} {value!r}")
        inner = tag[1:-1]
        return tuple(_check(inner, v, key) for v in value)
    if tag == "float?":
        return None if value is None else _check("float", value, key)
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__} {value!r}")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__} {value!r}")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__} {value!r}")
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {type(value).__name__} {value!r}")
        return value
    raise AssertionError(tag)


def coerce(key: str, value):
    """Type-check ``value`` for ``key`` and return its frozen form."""
    if key not in SCHEMA:
        raise ConfigError(_unknown_message(key))
    out = _check(SCHEMA[key][0], value, key)
    if key in CHOICES and out not in CHOICES[key]:
        raise ConfigError(f"{key}: expected one of {CHOICES[key]}, got {out!r}")
    if key == "SCHEMA_VERSION" and out != SCHEMA_VERSION:
        raise ConfigError(f"config schema version {out} is not supported (expected {SCHEMA_VERSION})")
    return out


# ---------------------------------------------------------------------------
# YAML subset


def _reject_extensions(text: str, source: str):
    try:
        for tok in yaml.scan(text, Loader=_Loader):
            if isinstance(tok, (yaml.AnchorToken, yaml.AliasToken, yaml.TagToken)):
                kind = type(tok).__name__.replace("Token", "").lower()
                raise ConfigError(f"{source}:{tok.start_mark.line + 1}: {kind}s are not supported")
            if isinstance(tok, yaml.DirectiveToken):
                raise ConfigError(f"{source}:{tok.start_mark.line + 1}: directives are not supported")
    except yaml.MarkedYAMLError as e:
        raise _parse_error(e, source) from None


def _parse_error(e: yaml.MarkedYAMLError, source: str) -> ConfigError:
    mark = e.problem_mark or e.context_mark
    line = mark.line + 1 if mark is not None else "?"
    return ConfigError(f"{source}:{line}: parse error: {e.problem or e}")


def _flatten_nodes(node, prefix, out, source):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:{node.start_mark.line + 1}: {prefix or 'document'} must be a mapping")
    constructor = yaml.constructor.SafeConstructor()
    for k, v in node.value:
        if not isinstance(k, yaml.ScalarNode):
            raise ConfigError(f"{source}:{k.start_mark.line + 1}: keys must be plain scalars")
        key = f"{prefix}.{k.value}" if prefix else str(k.value)
        line = k.start_mark.line + 1
        if key in out:
            raise ConfigError(f"{source}:{line}: duplicate key {key}")
        if isinstance(v, yaml.MappingNode) and key not in SCHEMA:
            if not any(s.startswith(key + ".") for s in SCHEMA):
                raise ConfigError(f"{source}:{line}: {_unknown_message(key)}")
            _flatten_nodes(v, key, out, source)
            continue
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{line}: {_unknown_message(key)}")
        try:
            out[key] = coerce(key, constructor.construct_object(v, deep=True))
        except ConfigError as e:
            raise ConfigError(f"{source}:{line}: {e}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse YAML-subset ``text`` into a ``{dotted key: value}`` dict (type-checked)."""
    _reject_extensions(text, source)
    try:
        node = yaml.compose(text, Loader=_Loader)
    except yaml.MarkedYAMLError as e:
        raise _parse_error(e, source) from None
    out: dict = {}
    if node is None:
        return out
    _flatten_nodes(node, "", out, source)
    return out


def load_config(path) -> PipelineConfig:
    """Defaults overlaid by the values in the file at ``path``."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return PipelineConfig(parse_config_text(text, str(path)))


def loads_config(text: str) -> PipelineConfig:
    return PipelineConfig(parse_config_text(text))


def parse_value(key: str, literal):
    """Parse an override literal for ``key``.  Strings stay verbatim for str keys."""
    if key not in SCHEMA:
        raise ConfigError(_unknown_message(key))
    if not isinstance(literal, str):
        return coerce(key, literal)
    if SCHEMA[key][0] == "str":
        return coerce(key, literal)
    _reject_extensions(literal, f"override {key}")
    try:
        value = yaml.safe_load(literal)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {key}: cannot parse {literal!r}: {e}") from None
    return coerce(key, value)


def apply_overrides(config: PipelineConfig, delta: Sequence) -> PipelineConfig:
    """Apply ``(dotted key, value literal)`` pairs in order; later entries win."""
    vals = dict(config)
    for key, literal in delta:
        vals[key] = parse_value(key, literal)
    return PipelineConfig(vals)


def pairs_from_opts(opts: Sequence[str]) -> list:
    """``["A.B", "1", "C.D", "x"]`` -> ``[("A.B", "1"), ("C.D", "x")]``."""
    opts = list(opts or [])
    if len(opts) % 2:
        raise ConfigError(f"--opts needs KEY VALUE pairs, got an odd count ({len(opts)})")
    return list(zip(opts[0::2], opts[1::2]))


def resolve_config(path=None, opts=(), environ: Mapping | None = None) -> PipelineConfig:
    """File (or defaults), then ``VOLSEG_NUM_WORKERS``, then ``--opts`` pairs."""
    config = load_config(path) if path else PipelineConfig()
    environ = os.environ if environ is None else environ
    env = environ.get(ENV_WORKERS)
    if env not in (None, ""):
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env!r}") from None
        config = apply_overrides(config, [("SYSTEM.NUM_WORKERS", workers)])
    return apply_overrides(config, pairs_from_opts(opts))


class _Dumper(yaml.SafeDumper):
    def ignore_aliases(self, data):
        return True


_Dumper.add_representer(list, lambda d, v: d.represent_sequence("tag:yaml.org,2002:seq", v, flow_style=True))
_Dumper.add_representer(dict, lambda d, v: d.represent_mapping("tag:yaml.org,2002:map", v.items(), flow_style=False))


def dump_config(config: PipelineConfig) -> str:
    """Canonical text: schema key order, leaf lists in flow style."""
    # non-ASCII is escaped: YAML treats some code points (NEL, LS, PS) as line breaks
    return yaml.dump(config.to_tree(), Dumper=_Dumper, sort_keys=False, allow_unicode=False, width=1 << 16)


# ---------------------------------------------------------------------------
# typed views


def _broadcast(values, n, key):
    values = list(values)
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ConfigError(f"{key} has {len(values)} entries; expected 1 or {n} (one per target)")
    return values


def target_specs_from_config(config: PipelineConfig) -> list:
    kinds = list(config["MODEL.TARGET_OPT"])
    n = len(kinds)
    if n == 0:
        raise ConfigError("MODEL.TARGET_OPT must list at least one target")
    losses = _broadcast(config["MODEL.LOSS_OPTION"], n, "MODEL.LOSS_OPTION")
    weights = _broadcast(config["MODEL.LOSS_WEIGHT"], n, "MODEL.LOSS_WEIGHT")
    target_w = _broadcast(config["MODEL.TARGET_WEIGHT"], n, "MODEL.TARGET_WEIGHT")
    weight_opt = _broadcast(config["MODEL.WEIGHT_OPT"], n, "MODEL.WEIGHT_OPT")
    acts = _broadcast(config["MODEL.OUTPUT_ACT"], n, "MODEL.OUTPUT_ACT")
    per_kind = {
        "binary": {},
        "contour": {"radius": config["MODEL.CONTOUR_RADIUS"], "connectivity": config["MODEL.CONTOUR_CONNECTIVITY"]},
        "signed_distance": {"alpha": config["MODEL.SDT_ALPHA"], "beta": config["MODEL.SDT_BETA"],
                            "clamp": config["MODEL.SDT_CLAMP"]},
        "affinity": {"offsets": config["MODEL.AFFINITY_OFFSETS"]},
    }
    specs = []
    for i, kind in enumerate(kinds):
        if len(losses[i]) != len(weights[i]):
            raise ConfigError(f"target {i}: {len(losses[i])} losses but {len(weights[i])} loss weights")
        if kind not in per_kind:
            raise ConfigError(f"MODEL.TARGET_OPT[{i}]: unknown target {kind!r}; expected one of {tuple(per_kind)}")
        try:
            specs.append(TargetSpec(kind, tuple(LossTerm(l, w) for l, w in zip(losses[i], weights[i])),
                                    target_w[i], dict(per_kind[kind]), acts[i], weight_opt[i]))
        except InvalidArgumentError as e:
            raise ConfigError(f"target {i}: {e}") from None
    return specs


AUG_KEYS = {
    "grayscale": {"brightness_range": "BRIGHTNESS_RANGE", "contrast_range": "CONTRAST_RANGE",
                  "gamma_range": "GAMMA_RANGE", "invert_prob": "INVERT_PROB"},
    "missing_part": {"num_regions": "NUM_REGIONS", "max_extent_fraction": "MAX_EXTENT_FRACTION", "fill": "FILL"},
    "misalignment": {"max_shift_px": "MAX_SHIFT_PX", "rotate": "ROTATE", "max_angle_deg": "MAX_ANGLE_DEG"},
    "rescale": {"scale_range": "SCALE_RANGE", "mode_3d": "MODE_3D"},
    "flip": {},
    "transpose": {},
}


def augment_specs_from_config(config: PipelineConfig) -> list:
    specs = []
    for kind in config["AUGMENTOR.ORDER"]:
        if kind not in AUG_KEYS:
            raise ConfigError(f"AUGMENTOR.ORDER: unknown augmentation {kind!r}; expected one of {tuple(AUG_KEYS)}")
        section = f"AUGMENTOR.{kind.upper()}"
        params = {p: config[f"{section}.{k}"] for p, k in AUG_KEYS[kind].items()}
        try:
            specs.append(AugmentSpec(kind, config[f"{section}.PROB"], params))
        except InvalidArgumentError as e:
            raise ConfigError(f"{section}: {e}") from None
    return specs


DECODE_KEYS = {
    "seed_threshold": "DECODE.SEED_THRESHOLD",
    "foreground_threshold": "DECODE.FOREGROUND_THRESHOLD",
    "contour_threshold": "DECODE.CONTOUR_THRESHOLD",
    "distance_seed_threshold": "DECODE.DISTANCE_SEED_THRESHOLD",
    "min_instance_voxels": "DECODE.MIN_INSTANCE_VOXELS",
    "connectivity": "DECODE.CONNECTIVITY",
}


def decode_params_from_config(config: PipelineConfig) -> DecodeParams:
    try:
        return DecodeParams(**{field: config[key] for field, key in DECODE_KEYS.items()})
    except InvalidArgumentError as e:
        msg = str(e)
        for field, key in DECODE_KEYS.items():
            if msg.startswith(field + " "):
                msg = key + msg[len(field):]
                break
        raise ConfigError(msg) from None
