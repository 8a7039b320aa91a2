"""TOML run configuration: parsing, defaults, resolution and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .relaxometry import ConfoundSpec, PhantomSpec, default_echo_times

__all__ = ["PhantomSection", "RunConfig", "load_run_config", "resolve_config", "config_hash"]

VARIANTS = ("A", "B", "C")


@dataclass
class PhantomSection:
    n_per_class: int = 100
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_echoes: int = 6
    echo_spacing_ms: float = 4.92
    s0_value: float = 1000.0
    background_r2star: float = 20.0
    outside_r2star: float = 10.0
    class_delta: float = 15.0
    noise_sigma: float = 20.0
    confound_offset: float = 0.0  # 0 disables the planted shortcut
    confound_inner_scale: float = 1.05
    confound_outer_scale: float = 1.35
    pose_jitter_mm: float = 0.0
    seed: int = 1234

    def to_spec(self) -> PhantomSpec:
        confound = None
        if self.confound_offset != 0.0:
            confound = ConfoundSpec(
                r2star_offset=self.confound_offset,
                inner_scale=self.confound_inner_scale,
                outer_scale=self.confound_outer_scale,
            )
        spec = PhantomSpec(
            dims=tuple(self.dims),
            spacing=tuple(self.spacing),
            echo_times=default_echo_times(self.n_echoes, self.echo_spacing_ms / 1000.0),
            s0_value=self.s0_value,
            background_r2star=self.background_r2star,
            outside_r2star=self.outside_r2star,
            noise_sigma=self.noise_sigma,
            confound=confound,
            pose_jitter_mm=self.pose_jitter_mm,
        )
        if self.class_delta != 15.0:
            rois = tuple(
                replace(r, class_delta=self.class_delta) for r in spec.roi_ellipsoids
            )
            spec = replace(spec, roi_ellipsoids=rois)
        return spec


@dataclass
class RunConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    data_dir: str | None = None  # reuse an existing dataset instead of generating
    variants: tuple[str, ...] = ("A", "B", "C")
    n_repeats: int = 10
    ratios: tuple[int, int, int] = (70, 15, 15)
    seed: int = 0
    deterministic: bool = False
    threads: int = 0  # 0 = library default

    # training
    epochs: int = 60
    batch_size: int = 6
    lr_init: float = 1e-3
    lr_factor: float = 0.3
    patience: int = 5
    lr_floor: float = 1e-6
    train_dtype: str = "float32"
    relevance_lambda: float = 1.0

    # spray
    spray_k_neighbors: int = 10
    spray_k_max: int = 10
    spray_target_spacing: float = 2.0

    # embedding
    embed_perplexity: float = 15.0
    embed_iterations: int = 1000
    embed_learning_rate: float = 200.0

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}, expected one of {VARIANTS}")
        if self.n_repeats < 1:
            raise ConfigError("n_repeats must be >= 1")


_SECTION_KEYS = {
    "train": {
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr_init": "lr_init",
        "lr_factor": "lr_factor",
        "patience": "patience",
        "lr_floor": "lr_floor",
        "dtype": "train_dtype",
    },
    "relevance": {"lambda": "relevance_lambda"},
    "spray": {
        "k_neighbors": "spray_k_neighbors",
        "k_max": "spray_k_max",
        "target_spacing_mm": "spray_target_spacing",
    },
    "embed": {
        "perplexity": "embed_perplexity",
        "iterations": "embed_iterations",
        "learning_rate": "embed_learning_rate",
    },
    "run": {
        "variants": "variants",
        "n_repeats": "n_repeats",
        "ratios": "ratios",
        "seed": "seed",
        "deterministic": "deterministic",
        "threads": "threads",
        "data_dir": "data_dir",
    },
}


def load_run_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_run_config(raw, source=path)


def parse_run_config(raw: dict, source: str = "<dict>") -> RunConfig:
    kwargs: dict = {}
    if "phantom" in raw:
        ph = dict(raw["phantom"])
        unknown = set(ph) - set(PhantomSection.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{source}: unknown [phantom] keys {sorted(unknown)}")
        for key in ("dims", "spacing"):
            if key in ph:
                ph[key] = tuple(ph[key])
        kwargs["phantom"] = PhantomSection(**ph)
    for section, keymap in _SECTION_KEYS.items():
        if section not in raw:
            continue
        body = raw[section]
        unknown = set(body) - set(keymap)
        if unknown:
            raise ConfigError(f"{source}: unknown [{section}] keys {sorted(unknown)}")
        for key, attr in keymap.items():
            if key in body:
                value = body[key]
                if attr in ("variants", "ratios"):
                    value = tuple(value)
                kwargs[attr] = value
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def resolve_config(config: RunConfig) -> dict:
    """Fully resolved, JSON-ready view (the provenance echo)."""
    out = asdict(config)
    out["phantom"] = asdict(config.phantom)
    return out


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(resolve_config(config), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:12]
