"""Transformer workload configurations, presets and byte accounting."""

from __future__ import annotations

import configparser
import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, IndivisibleHeads

AUTOREGRESSIVE = "autoregressive"
PROMPT = "prompt"
MODES = (AUTOREGRESSIVE, PROMPT)
NORM_KINDS = ("layer", "rms")


@dataclass(frozen=True)
class ValidationResult:
    """Outcome of a structural check: ``ok`` plus the violated invariants."""

    violations: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one Transformer block workload.

    ``seq_len`` is the prompt length in prompt mode. In autoregressive mode a
    single token is processed per step against ``kv_cache_len`` cached
    positions (the new token included).
    """

    seq_len: int
    embed_dim: int
    head_dim: int
    num_heads: int
    intermediate_dim: int
    num_blocks: int = 1
    mode: str = PROMPT
    bytes_per_elem: int = 2
    kv_cache_len: int = 0
    causal: bool = True
    norm: str = "layer"
    gelu_approx: bool = False
    name: str = "custom"

    # short aliases matching the usual S/E/P/H/F notation
    @property
    def S(self) -> int:
        return self.seq_len

    @property
    def E(self) -> int:
        return self.embed_dim

    @property
    def P(self) -> int:
        return self.head_dim

    @property
    def H(self) -> int:
        return self.num_heads

    @property
    def F(self) -> int:
        return self.intermediate_dim

    @property
    def L(self) -> int:
        return self.num_blocks

    @property
    def b(self) -> int:
        return self.bytes_per_elem

    @property
    def proj_dim(self) -> int:
        """Width of the concatenated head outputs, P*H."""
        return self.head_dim * self.num_heads

    @property
    def query_len(self) -> int:
        return 1 if self.mode == AUTOREGRESSIVE else self.seq_len

    @property
    def kv_len(self) -> int:
        """Number of key/value positions each query attends over."""
        return self.kv_cache_len if self.mode == AUTOREGRESSIVE else self.seq_len

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg: ModelConfig) -> ValidationResult:
    violations = []
    for attr, label in (
        ("seq_len", "seq_len"),
        ("embed_dim", "embed_dim"),
        ("head_dim", "head_dim"),
        ("num_heads", "num_heads"),
        ("intermediate_dim", "intermediate_dim"),
        ("num_blocks", "num_blocks"),
    ):
        value = getattr(cfg, attr)
        if not isinstance(value, (int, np.integer)) or value < 1:
            violations.append(f"{label} >= 1")
    if cfg.bytes_per_elem not in (1, 2, 4):
        violations.append("bytes_per_elem in {1, 2, 4}")
    if cfg.mode not in MODES:
        violations.append(f"mode in {set(MODES)}")
    elif cfg.mode == AUTOREGRESSIVE and cfg.kv_cache_len < 1:
        violations.append("kv_cache_len >= 1 in autoregressive mode")
    if cfg.norm not in NORM_KINDS:
        violations.append(f"norm in {set(NORM_KINDS)}")

    notes = []
    if not violations and cfg.embed_dim != cfg.proj_dim:
        notes.append(f"embed_dim {cfg.embed_dim} != head_dim*num_heads {cfg.proj_dim}")
    return ValidationResult(tuple(violations), tuple(notes))


def check(cfg: ModelConfig) -> ModelConfig:
    """Raise ConfigError if ``cfg`` is invalid; emit a warning if E != P*H."""
    result = validate(cfg)
    if not result.ok:
        raise ConfigError(f"invalid config {cfg.name!r}: " + "; ".join(result.violations))
    for note in result.warnings:
        warnings.warn(note, stacklevel=2)
    return cfg


def block_param_count(cfg: ModelConfig) -> int:
    E, PH, F = cfg.embed_dim, cfg.proj_dim, cfg.intermediate_dim
    return 4 * E * PH + 2 * E * F + 2 * E


def sharded_param_count(cfg: ModelConfig) -> int:
    """Parameters held in the six sliced matrices (normalization vectors excluded)."""
    return block_param_count(cfg) - 2 * cfg.embed_dim


def block_weight_bytes(cfg: ModelConfig) -> int:
    return block_param_count(cfg) * cfg.bytes_per_elem


@dataclass(frozen=True)
class ActivationBytes:
    """Per-chip activation footprint of one block, in bytes."""

    qkv: int
    partial_out: int
    input_copy: int
    kv_cache: int

    @property
    def total(self) -> int:
        return self.qkv + self.partial_out + self.input_copy + self.kv_cache


def activation_bytes(cfg: ModelConfig, n_chips: int) -> ActivationBytes:
    if n_chips < 1 or cfg.num_heads % n_chips:
        raise IndivisibleHeads(f"num_heads={cfg.num_heads} is not divisible by n_chips={n_chips}")
    b = cfg.bytes_per_elem
    heads = cfg.num_heads // n_chips
    q = cfg.query_len
    kv = 0
    if cfg.mode == AUTOREGRESSIVE:
        kv = 2 * cfg.kv_cache_len * cfg.head_dim * heads * b
    return ActivationBytes(
        qkv=3 * q * cfg.head_dim * heads * b,
        partial_out=q * cfg.embed_dim * b,
        input_copy=q * cfg.embed_dim * b,
        kv_cache=kv,
    )


@dataclass
class BlockWeights:
    """Dense weights of one block. Matrices are stored input-major (x @ W)."""

    W_query: np.ndarray
    W_key: np.ndarray
    W_value: np.ndarray
    W_O: np.ndarray
    W_L1: np.ndarray
    W_L2: np.ndarray
    norm1: np.ndarray
    norm2: np.ndarray

    MATRICES = ("W_query", "W_key", "W_value", "W_O", "W_L1", "W_L2")

    @classmethod
    def random(cls, cfg: ModelConfig, rng: np.random.Generator | int | None = None) -> "BlockWeights":
        rng = np.random.default_rng(rng)
        E, PH, F = cfg.embed_dim, cfg.proj_dim, cfg.intermediate_dim

        def mat(rows, cols):
            return rng.standard_normal((rows, cols)) / np.sqrt(rows)

        return cls(
            W_query=mat(E, PH),
            W_key=mat(E, PH),
            W_value=mat(E, PH),
            W_O=mat(PH, E),
            W_L1=mat(E, F),
            W_L2=mat(F, E),
            norm1=1.0 + 0.1 * rng.standard_normal(E),
            norm2=1.0 + 0.1 * rng.standard_normal(E),
        )

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "BlockWeights":
        E, PH, F = cfg.embed_dim, cfg.proj_dim, cfg.intermediate_dim
        z = np.zeros
        return cls(z((E, PH)), z((E, PH)), z((E, PH)), z((PH, E)), z((E, F)), z((F, E)), np.ones(E), np.ones(E))

    def matrices(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.MATRICES}

    def param_count(self) -> int:
        return sum(m.size for m in self.matrices().values()) + self.norm1.size + self.norm2.size

    def check_shapes(self, cfg: ModelConfig) -> None:
        from .errors import ShapeMismatch

        E, PH, F = cfg.embed_dim, cfg.proj_dim, cfg.intermediate_dim
        expected = {
            "W_query": (E, PH),
            "W_key": (E, PH),
            "W_value": (E, PH),
            "W_O": (PH, E),
            "W_L1": (E, F),
            "W_L2": (F, E),
            "norm1": (E,),
            "norm2": (E,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeMismatch(f"{name} has shape {got}, expected {shape}")


# --------------------------------------------------------------------------
# presets

_TINYLLAMA = dict(embed_dim=512, head_dim=64, num_heads=8, intermediate_dim=2048, num_blocks=8, causal=True)

PRESET_NAMES = ("tinyllama", "mobilebert", "tinyllama-scaled")


def preset(name: str, mode: str | None = None, **overrides) -> ModelConfig:
    """Return one of the shipped workload presets.

    TinyLlama uses S=128 (with a full 128-entry KV cache) in autoregressive
    mode and S=16 in prompt mode. The scaled variant has 64 heads and keeps
    E=512, so each head is 8 wide. MobileBERT is an encoder and only runs in
    prompt mode.
    """
    if name in ("tinyllama", "tinyllama-scaled"):
        mode = mode or AUTOREGRESSIVE
        base = dict(_TINYLLAMA)
        if name == "tinyllama-scaled":
            base.update(num_heads=64, head_dim=8)
        if mode == AUTOREGRESSIVE:
            base.update(seq_len=128, kv_cache_len=128)
        elif mode == PROMPT:
            base.update(seq_len=16, kv_cache_len=0)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        cfg = ModelConfig(mode=mode, name=name, **base)
    elif name == "mobilebert":
        if mode not in (None, PROMPT):
            raise ConfigError("mobilebert is an encoder and only supports prompt mode")
        cfg = ModelConfig(
            seq_len=268,
            embed_dim=512,
            head_dim=128,
            num_heads=4,
            intermediate_dim=512,
            num_blocks=24,
            mode=PROMPT,
            causal=False,
            name=name,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return cfg.replace(**overrides) if overrides else cfg


# --------------------------------------------------------------------------
# config files
#
# INI layout, one section per preset override:
#
#   [tinyllama]
#   model.mode = prompt
#   model.S = 32
#
#   [my-model]
#   preset = mobilebert
#   model.H = 8
#   model.P = 64

CONFIG_KEYS = {
    "model.S": ("seq_len", int),
    "model.E": ("embed_dim", int),
    "model.P": ("head_dim", int),
    "model.H": ("num_heads", int),
    "model.F": ("intermediate_dim", int),
    "model.L": ("num_blocks", int),
    "model.mode": ("mode", str),
    "model.bytes_per_elem": ("bytes_per_elem", int),
    "model.kv_cache_len": ("kv_cache_len", int),
    "model.causal": ("causal", lambda s: s.strip().lower() in ("1", "true", "yes", "on")),
    "model.norm": ("norm", str),
}


def config_from_mapping(name: str, values: Mapping[str, str]) -> ModelConfig:
    values = dict(values)
    base_name = values.pop("preset", name)
    mode = values.get("model.mode")
    try:
        cfg = preset(base_name, mode=mode)
    except ConfigError:
        if base_name != name:
            raise
        cfg = None
    overrides = {}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        attr, conv = CONFIG_KEYS[key]
        try:
            overrides[attr] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] bad value for {key}: {raw!r}") from exc
    if cfg is None:
        missing = [k for k in ("model.S", "model.E", "model.P", "model.H", "model.F") if k not in values]
        if missing:
            raise ConfigError(f"[{name}] is not a preset and lacks {', '.join(missing)}")
        cfg = ModelConfig(seq_len=1, embed_dim=1, head_dim=1, num_heads=1, intermediate_dim=1)
    return cfg.replace(name=name, **overrides)


def load_config(path: str | Path) -> dict[str, ModelConfig]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (model.S vs model.s)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return {section: config_from_mapping(section, parser[section]) for section in parser.sections()}
