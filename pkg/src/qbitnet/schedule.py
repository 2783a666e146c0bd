"""Progressively decreasing bitwidth schedules and memory accounting.

A schedule assigns a weight bitwidth to every quantizable layer, halving
front to back, and the accounting reports the parameter-count-weighted
average bitwidth plus savings against a homogeneous baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .bitpack import payload_bytes

ALLOWED_KW = (1, 2, 4, 8)


@dataclass(frozen=True)
class ArchLayer:
    """One layer of an architecture as seen by the accounting: a name,
    a coarse kind (conv or fc), its weight parameter count, and whether
    it participates in quantization."""

    name: str
    kind: str  # "conv" or "fc"
    params: int
    quantized: bool = True

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer kind must be 'conv' or 'fc', got {self.kind!r}")
        if self.params <= 0:
            raise ValueError(f"layer {self.name}: parameter count must be positive")


@dataclass(frozen=True)
class LayerParamCount:
    """Weight parameter count for one named layer."""

    name: str
    params: int

    def __post_init__(self):
        if self.params <= 0:
            raise ValueError(f"layer {self.name}: count must be > 0")


@dataclass(frozen=True)
class ScheduleEntry:
    name: str
    k_w: int
    k_a: int
    quantized: bool


@dataclass
class BitwidthSchedule:
    """Ordered per-layer bitwidth assignment.

    Layers flagged unquantized (input/output layers) keep full precision
    and are excluded from average-bitwidth aggregation.
    """

    entries: list[ScheduleEntry]

    @property
    def quantized_entries(self) -> list[ScheduleEntry]:
        return [e for e in self.entries if e.quantized]

    def k_w_sequence(self) -> list[int]:
        return [e.k_w for e in self.quantized_entries]


@dataclass
class LayerReport:
    name: str
    k_w: int
    quantized: bool
    params: int
    bits: int
    bytes: int


@dataclass
class SizeReport:
    layers: list[LayerReport]
    total_params: int
    total_bits: int
    total_bytes: int
    average_bitwidth: float
    average_bitwidth_rounded: float
    baseline_k: int
    baseline_bits: int
    baseline_bytes: int
    savings: float  # 1 - average / baseline_k
    warnings: list[str] = field(default_factory=list)


def round_half_away_scalar(x: float, decimals: int = 2) -> float:
    """Half-away-from-zero rounding for report formatting."""
    factor = 10 ** decimals
    scaled = x * factor
    if scaled >= 0:
        return int(scaled + 0.5) / factor
    return -int(-scaled + 0.5) / factor


def parse_schedule_string(text: str) -> tuple[list[int], int | None]:
    """Parse the table notation "k1-k2-.../ka1-ka2" into a flat list of
    bitwidths plus the index where the fully-connected section starts
    (None when no "/" is present).

    Example: "8-4-2-1-1-1/1" -> ([8, 4, 2, 1, 1, 1, 1], 6).
    """
    text = text.strip()
    if not text:
        raise ValueError("empty schedule string")
    if text.count("/") > 1:
        raise ValueError(f"schedule string {text!r}: more than one '/' separator")
    parts = text.split("/")
    values: list[int] = []
    fc_start = None
    for section_idx, section in enumerate(parts):
        if section_idx == 1:
            fc_start = len(values)
        for tok in section.split("-"):
            tok = tok.strip()
            if not tok.isdigit():
                raise ValueError(f"schedule string {text!r}: bad bitwidth token {tok!r}")
            values.append(int(tok))
        if not section.strip():
            raise ValueError(f"schedule string {text!r}: empty section")
    return values, fc_start


def build_schedule(arch: list[ArchLayer], k_w_values: list[int], k_a: int,
                   fc_start: int | None = None) -> BitwidthSchedule:
    """Attach an ordered bitwidth list to the quantized layers of an
    architecture.  When the string carried a '/' marker, it must align
    with the conv-to-fc boundary of the quantized layers."""
    quantized = [l for l in arch if l.quantized]
    if len(k_w_values) != len(quantized):
        raise ValueError(
            f"schedule has {len(k_w_values)} entries but the architecture has "
            f"{len(quantized)} quantized layers")
    if fc_start is not None:
        kinds = [l.kind for l in quantized]
        expect = kinds.index("fc") if "fc" in kinds else len(kinds)
        if fc_start != expect:
            raise ValueError(
                f"'/' separator at position {fc_start} does not match the "
                f"conv/fc boundary at {expect}")
    assigned = dict(zip((l.name for l in quantized), k_w_values))
    entries = [
        ScheduleEntry(l.name, assigned.get(l.name, 32), k_a if l.quantized else 32,
                      l.quantized)
        for l in arch
    ]
    return BitwidthSchedule(entries)


def validate_schedule(s: BitwidthSchedule) -> list[tuple[int, str]]:
    """Check the progressive-halving rules; violations are returned as
    (index, message) pairs, not raised."""
    if not s.entries:
        raise ValueError("schedule must be non-empty")
    violations = []
    seq = s.quantized_entries
    for idx, e in enumerate(seq):
        if e.k_w not in ALLOWED_KW:
            violations.append((idx, f"layer {e.name}: k_w={e.k_w} is not a "
                                    f"power-of-two level in {ALLOWED_KW}"))
    for idx in range(1, len(seq)):
        prev, cur = seq[idx - 1].k_w, seq[idx].k_w
        if cur > prev:
            violations.append((idx, f"layer {seq[idx].name}: k_w increases "
                                    f"{prev} -> {cur}"))
        elif cur != prev and cur * 2 != prev:
            violations.append((idx, f"layer {seq[idx].name}: step {prev} -> {cur} "
                                    f"is neither equal nor a halving"))
    k_as = {e.k_a for e in seq}
    if len(k_as) > 1:
        violations.append((0, f"activation bitwidth must be uniform, got {sorted(k_as)}"))
    return violations


def average_bitwidth(s: BitwidthSchedule, counts: list[LayerParamCount]) -> float:
    """Parameter-count-weighted mean of k_w over quantized layers only."""
    by_name = {c.name: c.params for c in counts}
    num = 0
    den = 0
    for e in s.quantized_entries:
        if e.name not in by_name:
            raise ValueError(f"no parameter count for schedule layer {e.name!r}")
        n = by_name[e.name]
        num += e.k_w * n
        den += n
    if den == 0:
        raise ValueError("no quantized layers to aggregate")
    return num / den


def size_report(s: BitwidthSchedule, counts: list[LayerParamCount],
                baseline_k: int) -> SizeReport:
    """Per-layer and aggregate accounting: bits, packed bytes (ceil per
    layer), average bitwidth, and savings against a homogeneous
    baseline_k-bit assignment of the same quantized layers."""
    by_name = {c.name: c.params for c in counts}
    rows = []
    total_params = total_bits = total_bytes = 0
    baseline_bits = baseline_bytes = 0
    warnings = []
    for e in s.entries:
        if e.name not in by_name:
            raise ValueError(f"no parameter count for schedule layer {e.name!r}")
        n = by_name[e.name]
        bits = e.k_w * n if e.quantized else 32 * n
        nbytes = payload_bytes(n, e.k_w) if e.quantized else 4 * n
        rows.append(LayerReport(e.name, e.k_w if e.quantized else 32,
                                e.quantized, n, bits, nbytes))
        if e.quantized:
            total_params += n
            total_bits += bits
            total_bytes += nbytes
            baseline_bits += baseline_k * n
            baseline_bytes += payload_bytes(n, baseline_k)
    avg = average_bitwidth(s, counts)
    max_k = max((e.k_w for e in s.quantized_entries), default=0)
    if baseline_k < max_k:
        warnings.append(
            f"baseline k={baseline_k} is below the schedule maximum {max_k}; "
            "savings will be negative for the top layers")
    return SizeReport(
        layers=rows,
        total_params=total_params,
        total_bits=total_bits,
        total_bytes=total_bytes,
        average_bitwidth=avg,
        average_bitwidth_rounded=round_half_away_scalar(avg, 2),
        baseline_k=baseline_k,
        baseline_bits=baseline_bits,
        baseline_bytes=baseline_bytes,
        savings=1.0 - avg / baseline_k,
        warnings=warnings,
    )


def plan_schedule(arch: list[ArchLayer], k_start: int, k_floor: int,
                  k_a: int = 2) -> BitwidthSchedule:
    """Assign k_start to the first quantized layer, halve per layer down
    to k_floor, then hold the floor."""
    for name, k in (("k_start", k_start), ("k_floor", k_floor)):
        if k not in ALLOWED_KW:
            raise ValueError(f"{name} must be one of {ALLOWED_KW}, got {k}")
    if k_start < k_floor:
        raise ValueError(f"k_start={k_start} must be >= k_floor={k_floor}")
    quantized = [l for l in arch if l.quantized]
    if not quantized:
        raise ValueError("architecture has no quantizable layers")
    values = []
    k = k_start
    for _ in quantized:
        values.append(k)
        if k > k_floor:
            k //= 2
    return build_schedule(arch, values, k_a)


def format_schedule_string(s: BitwidthSchedule) -> str:
    """Inverse of parse_schedule_string over the quantized layers."""
    # section break where the quantized layers switch from conv to fc;
    # requires the arch kinds, so callers that need it keep them around
    return "-".join(str(k) for k in s.k_w_sequence())


# Per-layer weight parameter counts for four classic networks, usable by
# name anywhere an architecture file is accepted.  Output classifier
# layers are listed unquantized; the first conv of the ResNets and
# AlexNet's input conv stay full precision as well.
PRESET_ARCHES: dict[str, list[ArchLayer]] = {
    "vgg7": [
        ArchLayer("conv1", "conv", 3456),
        ArchLayer("conv2", "conv", 147456),
        ArchLayer("conv3", "conv", 294912),
        ArchLayer("conv4", "conv", 589824),
        ArchLayer("conv5", "conv", 1179648),
        ArchLayer("conv6", "conv", 2359296),
        ArchLayer("fc7", "fc", 8388608),
        ArchLayer("fc8", "fc", 10240, quantized=False),
    ],
    "resnet20": [
        ArchLayer("conv1", "conv", 432, quantized=False),
        ArchLayer("stage1", "conv", 13824),
        ArchLayer("stage2", "conv", 51200),
        ArchLayer("stage3", "conv", 204800),
        ArchLayer("fc", "fc", 640, quantized=False),
    ],
    "alexnet": [
        ArchLayer("conv1", "conv", 41472, quantized=False),
        ArchLayer("conv2", "conv", 307200),
        ArchLayer("conv3", "conv", 884736),
        ArchLayer("conv4", "conv", 663552),
        ArchLayer("conv5", "conv", 442368),
        ArchLayer("fc6", "fc", 37748736),
        ArchLayer("fc7", "fc", 16777216),
        ArchLayer("fc8", "fc", 4096000, quantized=False),
    ],
    "resnet18": [
        ArchLayer("conv1", "conv", 1728, quantized=False),
        ArchLayer("stage1", "conv", 147456),
        ArchLayer("stage2", "conv", 524288),
        ArchLayer("stage3", "conv", 2097152),
        ArchLayer("stage4", "conv", 8388608),
        ArchLayer("fc", "fc", 512000, quantized=False),
    ],
}


def arch_param_counts(arch: list[ArchLayer]) -> list[LayerParamCount]:
    return [LayerParamCount(l.name, l.params) for l in arch]
