"""Model and training configuration with a flat key=value file format.

Every default lives in a dataclass field; the same names are the keys of the
config-file format and of the checkpoint's config echo, so any run can be
reproduced from its printed configuration alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any

TASK_KINDS = ("identity", "matmul", "transpose", "rotate90")
DIST_KINDS = ("uniform", "gaussian", "correlated", "sparse")


@dataclass
class ModelConfig:
    """Sizes and fixed hyperparameters of the NCA rule."""

    c_mut: int = 16        # mutable channels; channel 0 carries matrix values
    c_hw: int = 8          # immutable hardware channels
    c_perc: int = 48       # perception features per cell
    kernel_size: int = 3
    n_pathways: int = 8
    hidden_width: int = 64
    temperature: float = 1.0
    activation: str = "softsign"
    padding: str = "zero"
    fire_rate: float = 0.0      # 0 disables stochastic per-cell firing
    hw_init_scale: float = 0.1

    def validate(self) -> None:
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.n_pathways < 1:
            raise ValueError("n_pathways must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.fire_rate <= 1.0:
            raise ValueError("fire_rate must lie in [0,1]")
        if self.padding not in ("zero", "wrap"):
            raise ValueError(f"unknown padding {self.padding!r}")


@dataclass
class TrainConfig:
    """Desk-scale training defaults; acceptance thresholds refer to these."""

    batch_size: int = 8
    updates: int = 2000
    t_steps: int = 16
    lr_rule: float = 3e-3
    lr_hardware: float = 1e-2
    task_mix: dict[str, float] = field(default_factory=lambda: {"identity": 1.0})
    hardware_mode: str = "modular"   # modular | monolithic
    seed: int = 0
    eval_every: int = 0              # 0 disables periodic held-out evaluation
    grid_h: int = 16
    grid_w: int = 16
    min_size: int = 4
    max_size: int = 4
    inner_min: int = 0               # matmul inner-dim range; 0 follows min/max_size
    inner_max: int = 0
    distributions: tuple[str, ...] = ("uniform",)
    placement: str = "fixed"         # fixed | random
    clip_norm: float = 1.0
    strict: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.t_steps < 1:
            raise ValueError("t_steps must be >= 1")
        if not self.task_mix or all(w == 0 for w in self.task_mix.values()):
            raise ValueError("task_mix must have a nonzero weight")
        for kind, w in self.task_mix.items():
            if kind not in TASK_KINDS:
                raise ValueError(f"unknown task kind {kind!r}")
            if w < 0:
                raise ValueError("task_mix weights must be nonnegative")
        for d in self.distributions:
            if d.split(":")[0] not in DIST_KINDS:
                raise ValueError(f"unknown distribution {d!r}")
        if self.hardware_mode not in ("modular", "monolithic"):
            raise ValueError(f"unknown hardware_mode {self.hardware_mode!r}")
        if self.placement not in ("random", "fixed"):
            raise ValueError(f"unknown placement policy {self.placement!r}")
        if self.hardware_mode == "monolithic" and self.placement == "random":
            raise ValueError(
                "monolithic hardware is placement-bound; use placement=fixed"
            )
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.grid_h, self.grid_w):
            raise ValueError("max_size exceeds grid dimensions")
        if (self.inner_min == 0) != (self.inner_max == 0):
            raise ValueError("set inner_min and inner_max together")
        if self.inner_min and not 1 <= self.inner_min <= self.inner_max:
            raise ValueError("need 1 <= inner_min <= inner_max")


def _encode(value: Any) -> str:
    if isinstance(value, dict):
        return ",".join(f"{k}:{v:g}" for k, v in value.items())
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _decode(raw: str, sample: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(sample, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(sample, int):
            return int(raw)
        if isinstance(sample, float):
            return float(raw)
        if isinstance(sample, dict):
            out = {}
            for part in raw.split(","):
                if not part.strip():
                    continue
                k, _, v = part.partition(":")
                out[k.strip()] = float(v) if v else 1.0
            return out
        if isinstance(sample, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as e:
        raise ValueError(f"bad value for config key {key!r}: {raw!r}") from e


def config_to_lines(model: ModelConfig, train: TrainConfig,
                    extra: dict[str, Any] | None = None) -> str:
    """Serialize both configs (plus bookkeeping keys) as flat key=value text."""
    lines = []
    for cfg in (model, train):
        for f in fields(cfg):
            lines.append(f"{f.name} = {_encode(getattr(cfg, f.name))}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {_encode(v)}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig, dict[str, int]]:
    """Parse flat key=value text with # comments; unknown keys are rejected."""
    model = ModelConfig()
    train = TrainConfig()
    extra: dict[str, int] = {}
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {ln}: expected key = value, got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if key in model_keys:
            setattr(model, key, _decode(raw, getattr(model, key), key))
        elif key in train_keys:
            setattr(train, key, _decode(raw, getattr(train, key), key))
        elif key == "trained_updates":
            extra[key] = int(raw.strip())
        else:
            raise ValueError(f"line {ln}: unknown config key {key!r}")
    model.validate()
    train.validate()
    return model, train, extra


def load_config_file(path: str) -> tuple[ModelConfig, TrainConfig, dict[str, int]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_override(model: ModelConfig, train: TrainConfig, key: str, raw: str) -> None:
    """Set one key on whichever config declares it; unknown keys are rejected."""
    if key in {f.name for f in fields(ModelConfig)}:
        setattr(model, key, _decode(raw, getattr(model, key), key))
    elif key in {f.name for f in fields(TrainConfig)}:
        setattr(train, key, _decode(raw, getattr(train, key), key))
    else:
        raise ValueError(f"unknown config key {key!r}")
