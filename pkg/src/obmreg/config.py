"""Run configuration: one flat set of ``key=value`` settings.

Config files are plain text, one ``key = value`` per line; ``#`` starts a
comment.  Tuple-valued keys take comma-separated values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

TOGGLES = ("OS", "BP", "NMM", "L_g", "L_n", "L_s")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # features
    k_feat: int = 16
    edge_widths: tuple[int, ...] = (32, 32, 64)
    feat_dim: int = 64
    feat_init_gain: float = 10.0
    # overlap bias matching
    K: int = 0  # 0 -> round(0.7 * min(N, M))
    tau_start: float = 1.0
    tau_end: float = 0.1
    mix_hidden_width: int = 64
    bias_hidden_width: int = 64
    # neighbour map matching
    gamma: float = 1.0
    beta: float = 1e-6
    k_match: int = 8
    # solver
    n_iter: int = 3
    train_iters: int = 2
    early_stop_rot_deg: float = 0.01
    early_stop_trans: float = 1e-4
    svd_stop_gradient: bool = False
    # losses
    huber_delta: float = 1.0
    softmin_sharpness: float = 0.0  # 0 -> exact min
    topk_pairs: int = 64
    # training
    epochs: int = 50
    lr: float = 0.001
    lr_decay_factor: float = 0.7
    lr_decay_epochs: tuple[int, ...] = (25,)
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    # ablation toggles
    use_os: bool = True
    use_bp: bool = True
    use_nmm: bool = True
    loss_g: bool = True
    loss_n: bool = True
    loss_s: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must be in (0, 1]")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be positive")
        if self.use_bp and not self.use_os:
            raise ConfigError("bias prediction needs overlap sampling (BP requires OS)")
        if not (self.loss_g or self.loss_n or self.loss_s):
            raise ConfigError("at least one loss must be enabled")
        for name in ("k_feat", "k_match", "n_iter", "train_iters", "feat_dim", "topk_pairs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.K < 0:
            raise ConfigError("K must be >= 0")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {_format_value(v)}")
        return "\n".join(lines) + "\n"

    def with_toggles(self, toggles) -> "RunConfig":
        """Enable exactly the named components/losses out of TOGGLES."""
        toggles = set(toggles)
        unknown = toggles - set(TOGGLES)
        if unknown:
            raise ConfigError(f"unknown toggles: {sorted(unknown)}")
        return self.replace(
            use_os="OS" in toggles,
            use_bp="BP" in toggles,
            use_nmm="NMM" in toggles,
            loss_g="L_g" in toggles,
            loss_n="L_n" in toggles,
            loss_s="L_s" in toggles,
        )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = base.to_dict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, values[key])
    return RunConfig(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply string-or-typed overrides, skipping ``None`` values."""
    values = cfg.to_dict()
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in values:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _parse_value(k, v, values[k]) if isinstance(v, str) else v
    return RunConfig(**values)
