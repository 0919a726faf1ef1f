"""Flat key = value run configuration with named profiles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0

    # data
    downsample: int = 1
    test_every: int = 0          # 0: pick k so that roughly 20 views are held out (min k = 4)
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int = 0
    init_opacity: float = 0.1

    # visibility
    opacity_threshold: float = 0.005
    margin_scale: float = 3.0
    margin_cap_px: float = 64.0

    # hash encoding
    hash_levels: int = 16
    hash_features: int = 2
    hash_log2_table_size: int = 19
    hash_min_res: int = 16
    hash_max_res: int = 2048
    hash_init_range: float = 1e-4
    aabb_dilate: float = 0.05

    # decoder
    mlp_width: int = 64
    feature_width: int = 32
    opacity_bias_init: float = -2.0
    scale_cap_frac: float = 0.1
    offset_cap_frac: float = 0.02

    # ablation switches
    use_hash_encoding: bool = True
    use_attention: bool = True
    use_offset_pool: bool = True
    joint_train_phi: bool = True

    # loss
    ssim_lambda: float = 0.2

    # schedule
    iterations_coarse: int = 30000
    iterations_detail: int = 40000
    iterations_joint: int = 260000
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    lr_offset: float = 1e-3

    # densification (coarse stage only)
    densify_from: int = 500
    densify_interval: int = 200
    densify_until: int = 30000
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    opacity_reset_interval: int = 3000

    # divide-and-conquer baseline
    blocks: int = 1
    block_overlap: float = 0.2

    # logging
    log_every: int = 100

    def validate(self) -> RunConfig:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        for name in ("iterations_coarse", "iterations_detail", "iterations_joint"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")
        if self.hash_levels < 2:
            raise ConfigError("hash_levels must be >= 2")
        if self.hash_min_res > self.hash_max_res:
            raise ConfigError("hash_min_res must not exceed hash_max_res")
        if not 1 <= self.hash_log2_table_size <= 30:
            raise ConfigError("hash_log2_table_size out of range")
        if self.ssim_lambda < 0:
            raise ConfigError("ssim_lambda must be >= 0")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")
        if len(self.background) != 3:
            raise ConfigError("background needs three components")
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.densify_interval <= 0:
            raise ConfigError("densify_interval must be positive")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


PROFILES = {
    "full": {},
    "desk": {
        "iterations_coarse": 2000,
        "iterations_detail": 2000,
        "iterations_joint": 2000,
        "hash_levels": 4,
        "hash_features": 2,
        "hash_log2_table_size": 14,
        "hash_min_res": 4,
        "hash_max_res": 64,
        "densify_from": 200,
        "densify_interval": 200,
        "densify_until": 1500,
        # 64-pixel images give ~10x larger per-splat screen gradients than
        # full-resolution photos; the reference threshold over-densifies
        "densify_grad_threshold": 2e-3,
    },
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace("(", "").replace(")", "").split(","))
        return raw.strip("\"'")
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def make_config(profile: str = "desk", **overrides) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = replace(RunConfig(), profile=profile, **PROFILES[profile])
    unknown = set(overrides) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return replace(cfg, **overrides).validate()


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. ``profile`` is applied first."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        default = getattr(RunConfig(), key)
        try:
            values[key] = _coerce(key, raw, default)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    profile = values.pop("profile", "desk")
    return make_config(profile, **values)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    return parse_config(text, str(p))
