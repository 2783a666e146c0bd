"""Flat key-value config files with [section] headers.

The format is deliberately nesting-free so experiment configs diff
cleanly.  Parsing keeps line numbers so every error can name the exact
line and field.

Sections: [dataset], [model], [schedule], [training] for experiment
configs; [layers] for the architecture files consumed by size-report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import AvgPool2D, BatchNorm, Conv2D, Dense, MaxPool2D, QuantAct
from .network import Network
from .quantize import FULL_PRECISION, QuantSpec
from .schedule import (
    ArchLayer,
    BitwidthSchedule,
    PRESET_ARCHES,
    build_schedule,
    parse_schedule_string,
)
from .training import TrainConfig


class ConfigError(Exception):
    """Config parse/validation failure; carries the offending line/field."""

    def __init__(self, message, line=None, key=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if key is not None:
            loc.append(f"field {key!r}")
        prefix = f"[{', '.join(loc)}] " if loc else ""
        super().__init__(prefix + message)
        self.line = line
        self.key = key


@dataclass
class Entry:
    key: str
    value: str
    line: int


@dataclass
class FlatConfig:
    sections: dict[str, list[Entry]] = field(default_factory=dict)
    path: str = "<config>"

    def section(self, name) -> list[Entry]:
        return self.sections.get(name, [])

    def get(self, section, key, default=None) -> Entry | None:
        for e in self.section(section):
            if e.key == key:
                return e
        if default is None:
            return None
        return Entry(key, default, 0)

    def require(self, section, key) -> Entry:
        e = self.get(section, key)
        if e is None:
            raise ConfigError(f"missing required key in [{section}]", key=key)
        return e


def parse_flat_config(text: str, path="<config>") -> FlatConfig:
    cfg = FlatConfig(path=path)
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            cfg.sections.setdefault(current, [])
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        if current is None:
            raise ConfigError("key outside any [section]", line=lineno)
        key, value = line.split("=", 1)
        cfg.sections[current].append(Entry(key.strip(), value.strip(), lineno))
    return cfg


def load_flat_config(path) -> FlatConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    return parse_flat_config(text, str(path))


def _parse_float(e: Entry) -> float:
    try:
        return float(e.value)
    except ValueError:
        raise ConfigError(f"expected a number, got {e.value!r}", line=e.line, key=e.key)


def _parse_int(e: Entry) -> int:
    try:
        return int(e.value)
    except ValueError:
        raise ConfigError(f"expected an integer, got {e.value!r}", line=e.line, key=e.key)


def _parse_floats(e: Entry) -> tuple:
    try:
        return tuple(float(tok) for tok in e.value.split())
    except ValueError:
        raise ConfigError(f"expected numbers, got {e.value!r}", line=e.line, key=e.key)


def _parse_bool(e: Entry) -> bool:
    if e.value.lower() in ("true", "yes", "1", "on"):
        return True
    if e.value.lower() in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected true/false, got {e.value!r}", line=e.line, key=e.key)


# -- model section -----------------------------------------------------------

@dataclass
class LayerSpec:
    name: str
    kind: str
    line: int
    out: int = 0
    ksize: int = 0
    stride: int = 1
    pad: int = 0
    bias: bool = False
    noquant: bool = False
    size: int = 0


def _parse_layer_entry(e: Entry) -> LayerSpec:
    toks = e.value.split()
    if not toks:
        raise ConfigError("empty layer definition", line=e.line, key=e.key)
    kind = toks[0]
    spec = LayerSpec(e.key, kind, e.line)
    rest = toks[1:]
    flags = {"bias", "noquant"}

    def take_int(tok, what):
        try:
            return int(tok)
        except ValueError:
            raise ConfigError(f"bad {what} {tok!r}", line=e.line, key=e.key)

    try:
        if kind == "conv":
            spec.out = take_int(rest[0], "channel count")
            if "x" not in rest[1]:
                raise ConfigError(f"bad kernel size {rest[1]!r} (want KxK)",
                                  line=e.line, key=e.key)
            kh, kw = rest[1].split("x")
            if kh != kw:
                raise ConfigError("only square kernels are supported",
                                  line=e.line, key=e.key)
            spec.ksize = take_int(kh, "kernel size")
            i = 2
            while i < len(rest):
                if rest[i] == "stride":
                    spec.stride = take_int(rest[i + 1], "stride")
                    i += 2
                elif rest[i] == "pad":
                    spec.pad = take_int(rest[i + 1], "pad")
                    i += 2
                elif rest[i] in flags:
                    setattr(spec, rest[i], True)
                    i += 1
                else:
                    raise ConfigError(f"unknown conv option {rest[i]!r}",
                                      line=e.line, key=e.key)
        elif kind == "fc":
            spec.out = take_int(rest[0], "output size")
            for tok in rest[1:]:
                if tok in flags:
                    setattr(spec, tok, True)
                else:
                    raise ConfigError(f"unknown fc option {tok!r}",
                                      line=e.line, key=e.key)
        elif kind in ("maxpool", "avgpool"):
            spec.size = take_int(rest[0], "pool size")
        elif kind == "batchnorm":
            pass
        elif kind == "act":
            for tok in rest:
                if tok == "noquant":
                    spec.noquant = True
                else:
                    raise ConfigError(f"unknown act option {tok!r}",
                                      line=e.line, key=e.key)
        else:
            raise ConfigError(f"unknown layer kind {kind!r}", line=e.line, key=e.key)
    except IndexError:
        raise ConfigError(f"missing arguments for {kind} layer", line=e.line, key=e.key)
    return spec


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a training run from one file."""

    flat: FlatConfig
    dataset_kind: str
    dataset_dir: str | None
    mean: tuple
    std: tuple
    augment: str
    layer_specs: list[LayerSpec]
    input_shape: tuple
    k_w_values: list[int]
    fc_start: int | None
    k_a: int
    train: TrainConfig
    val_fraction: float = 0.1

    def arch_layers(self) -> list[ArchLayer]:
        out = []
        in_ch = self.input_shape[0]
        spatial = self.input_shape[1]
        features = None
        for spec in self.layer_specs:
            if spec.kind == "conv":
                params = in_ch * spec.out * spec.ksize * spec.ksize
                out.append(ArchLayer(spec.name, "conv", params, not spec.noquant))
                in_ch = spec.out
                spatial = (spatial + 2 * spec.pad - spec.ksize) // spec.stride + 1
            elif spec.kind == "fc":
                fan_in = features if features is not None else in_ch * spatial * spatial
                out.append(ArchLayer(spec.name, "fc", fan_in * spec.out, not spec.noquant))
                features = spec.out
            elif spec.kind in ("maxpool", "avgpool"):
                spatial //= spec.size
        return out

    def schedule(self) -> BitwidthSchedule:
        return build_schedule(self.arch_layers(), self.k_w_values, self.k_a,
                              self.fc_start)

    def quant_map(self) -> dict[str, int]:
        """layer name -> k_w for quantized conv/fc layers (32 otherwise)."""
        return {e.name: e.k_w for e in self.schedule().entries}


def load_experiment_config(path) -> ExperimentConfig:
    flat = load_flat_config(path)
    return build_experiment_config(flat)


def build_experiment_config(flat: FlatConfig) -> ExperimentConfig:
    kind_e = flat.require("dataset", "kind")
    if kind_e.value not in ("mnist-idx", "cifar10-binary"):
        raise ConfigError(f"unknown dataset kind {kind_e.value!r}",
                          line=kind_e.line, key="kind")
    dir_e = flat.get("dataset", "dir")
    mean = _parse_floats(flat.require("dataset", "normalize_mean"))
    std = _parse_floats(flat.require("dataset", "normalize_std"))
    augment_e = flat.get("dataset", "augment", default="none")
    if augment_e.value not in ("none", "pad-crop", "pad-crop+flip"):
        raise ConfigError(f"unknown augmentation {augment_e.value!r}",
                          line=augment_e.line, key="augment")

    input_e = flat.require("model", "input")
    try:
        c, h, w = (int(t) for t in input_e.value.split("x"))
    except ValueError:
        raise ConfigError(f"bad input shape {input_e.value!r} (want CxHxW)",
                          line=input_e.line, key="input")
    layer_specs = [_parse_layer_entry(e) for e in flat.section("model")
                   if e.key != "input"]
    if not layer_specs:
        raise ConfigError("model section defines no layers", key="model")

    weights_e = flat.require("schedule", "weights")
    try:
        k_w_values, fc_start = parse_schedule_string(weights_e.value)
    except ValueError as err:
        raise ConfigError(str(err), line=weights_e.line, key="weights")
    k_a = _parse_int(flat.require("schedule", "activations"))
    if not 1 <= k_a <= 8 and k_a != FULL_PRECISION:
        raise ConfigError(f"activation bitwidth must be 1..8 or 32, got {k_a}",
                          line=flat.require("schedule", "activations").line,
                          key="activations")

    tc_kwargs = {}
    section = {e.key: e for e in flat.section("training")}
    for key, parser in (("optimizer", None), ("lr", _parse_float),
                        ("momentum", _parse_float), ("weight_decay", _parse_float),
                        ("lr_factor", _parse_float), ("batch_size", _parse_int),
                        ("epochs", _parse_int), ("seed", _parse_int)):
        if key in section:
            e = section[key]
            tc_kwargs[key] = e.value if parser is None else parser(e)
    if "milestones" in section:
        e = section["milestones"]
        try:
            tc_kwargs["milestones"] = tuple(int(t) for t in e.value.split())
        except ValueError:
            raise ConfigError(f"bad milestones {e.value!r}", line=e.line, key="milestones")
    try:
        train = TrainConfig(**tc_kwargs)
    except ValueError as err:
        line = section.get("milestones", Entry("", "", 0)).line or None
        raise ConfigError(str(err), line=line,
                          key="milestones" if "milestones" in str(err) else "training")

    val_fraction = 0.1
    if "val_fraction" in section:
        val_fraction = _parse_float(section["val_fraction"])

    cfg = ExperimentConfig(
        flat=flat,
        dataset_kind=kind_e.value,
        dataset_dir=dir_e.value if dir_e else None,
        mean=mean,
        std=std,
        augment=augment_e.value,
        layer_specs=layer_specs,
        input_shape=(c, h, w),
        k_w_values=k_w_values,
        fc_start=fc_start,
        k_a=k_a,
        train=train,
        val_fraction=val_fraction,
    )
    try:
        cfg.schedule()
    except ValueError as err:
        raise ConfigError(str(err), line=weights_e.line, key="weights")
    return cfg


def build_network(cfg: ExperimentConfig, seed: int | None = None) -> Network:
    """Instantiate the layer graph with seeded initialization; quantized
    conv/fc layers pick their k_w from the schedule, activation layers
    quantize at k_a unless marked noquant."""
    rng = np.random.default_rng(cfg.train.seed if seed is None else seed)
    quant = cfg.quant_map()
    layers = []
    in_ch, h, w = cfg.input_shape
    features = None
    for spec in cfg.layer_specs:
        if spec.kind == "conv":
            k_w = quant[spec.name]
            layers.append(Conv2D(spec.name, in_ch, spec.out, spec.ksize,
                                 stride=spec.stride, pad=spec.pad,
                                 wspec=QuantSpec(k_w, "weight"),
                                 bias=spec.bias, rng=rng))
            in_ch = spec.out
            h = (h + 2 * spec.pad - spec.ksize) // spec.stride + 1
            w = (w + 2 * spec.pad - spec.ksize) // spec.stride + 1
        elif spec.kind == "fc":
            fan_in = features if features is not None else in_ch * h * w
            k_w = quant[spec.name]
            layers.append(Dense(spec.name, fan_in, spec.out,
                                wspec=QuantSpec(k_w, "weight"),
                                bias=spec.bias, rng=rng))
            features = spec.out
        elif spec.kind == "batchnorm":
            ch = features if features is not None else in_ch
            layers.append(BatchNorm(spec.name, ch))
        elif spec.kind == "act":
            k = FULL_PRECISION if spec.noquant else cfg.k_a
            layers.append(QuantAct(spec.name, QuantSpec(k, "activation")))
        elif spec.kind == "maxpool":
            layers.append(MaxPool2D(spec.name, spec.size))
            h //= spec.size
            w //= spec.size
        elif spec.kind == "avgpool":
            layers.append(AvgPool2D(spec.name, spec.size))
            h //= spec.size
            w //= spec.size
    net = Network(layers, cfg.input_shape)
    return net


def load_arch_file(path_or_preset) -> list[ArchLayer]:
    """Architecture for size-report: either a built-in preset name or a
    config file with a [layers] section of 'name = kind count [noquant]'."""
    if str(path_or_preset) in PRESET_ARCHES:
        return PRESET_ARCHES[str(path_or_preset)]
    flat = load_flat_config(path_or_preset)
    entries = flat.section("layers")
    if not entries:
        raise ConfigError(f"{path_or_preset}: no [layers] section")
    out = []
    for e in entries:
        toks = e.value.split()
        if len(toks) < 2:
            raise ConfigError("want 'kind count [noquant]'", line=e.line, key=e.key)
        kind, count = toks[0], toks[1]
        if kind not in ("conv", "fc"):
            raise ConfigError(f"unknown layer kind {kind!r}", line=e.line, key=e.key)
        try:
            params = int(count)
        except ValueError:
            raise ConfigError(f"bad parameter count {count!r}", line=e.line, key=e.key)
        noquant = "noquant" in toks[2:]
        for tok in toks[2:]:
            if tok != "noquant":
                raise ConfigError(f"unknown option {tok!r}", line=e.line, key=e.key)
        try:
            out.append(ArchLayer(e.key, kind, params, not noquant))
        except ValueError as err:
            raise ConfigError(str(err), line=e.line, key=e.key)
    return out
