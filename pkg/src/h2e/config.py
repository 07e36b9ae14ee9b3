"""Experiment configuration: flat key=value files with strict validation.

The format is one `key = value` pair per line, `#` comments, blank lines
ignored. Keys are namespaced with dots (data.*, train.*, env.*, eval.*)
plus the top-level `seed` and `out_dir`. Unknown keys are rejected rather
than silently ignored, and every value is type-checked and range-checked
against the consuming module's own constraints at load time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .envs import DEFAULT_LAYOUTS
from .identifier import IrmConfig
from .pipeline import H2EConfig
from .synthdata import ConfigError
from .training import OptimSettings

METHODS = ("h2e", "ce", "la", "smallloss")


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_auto_float(raw: str):
    return None if raw.strip().lower() == "auto" else float(raw)


def _parse_none_float(raw: str):
    return None if raw.strip().lower() == "none" else float(raw)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(p) for p in raw.split(",") if p.strip())


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in raw.split(",") if p.strip())


# key -> (parser, default). This table is the single source of truth for
# what a config file may contain.
SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, ""),

    "data.classes": (int, 10),
    "data.contexts": (int, 6),
    "data.feature_dim": (int, 32),
    "data.n_max": (int, 500),
    "data.imbalance": (float, 20.0),
    "data.noise_rate": (float, 0.3),
    "data.blue_fraction": (float, 0.5),
    "data.test_per_class": (int, 50),
    "data.signal_scale": (float, 1.0),
    "data.context_scale": (float, 1.0),
    "data.noise_scale": (float, 0.5),
    "data.head_context_entropy": (float, 0.9),
    "data.tail_context_entropy": (float, 0.1),
    "data.bundle": (str, ""),

    "train.hidden": (_parse_int_list, (64,)),
    "train.batch_size": (int, 64),
    "train.lr": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.lr_schedule": (str, "constant"),
    "train.iterations": (int, 1),
    "train.warmup_epochs": (int, 4),
    "train.identifier_epochs": (int, 2),
    "train.mixup_epochs": (int, 8),
    "train.stage2_epochs": (int, 4),
    "train.irm_lambda": (float, 10.0),
    "train.irm_warm_steps": (int, 100),
    "train.irm_lr": (float, 0.5),
    "train.irm_clip": (float, 5.0),
    "train.theta_floor": (float, 0.1),
    "train.weight_floor": (float, 0.2),
    "train.scalar_w": (_parse_bool, False),
    "train.w_init": (float, 1.0),
    "train.drop_flagged": (_parse_bool, False),
    "train.density_weighting": (_parse_bool, True),

    "env.count": (int, 3),
    "env.simple_jitter": (_parse_auto_float, None),
    "env.strong_jitter": (_parse_auto_float, None),
    "env.strong_dropout": (float, 0.2),
    "env.strong_scale_lo": (float, 0.8),
    "env.strong_scale_hi": (float, 1.2),

    "eval.budget_rule": (str, "true_noise"),
    "eval.flag_threshold": (_parse_none_float, None),
    "eval.baselines": (_parse_str_list, ("ce", "la", "smallloss")),
    "eval.smallloss_drop": (_parse_auto_float, None),
    "eval.smallloss_warm_epochs": (int, 0),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse key=value text into a typed dict, applying schema defaults."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source} line {lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source} line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"{source} line {lineno}: bad value for "
                              f"{key!r}: {exc}") from None
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def load_config(path) -> "ExperimentConfig":
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_values(parse_config_text(text, path.name))


@dataclass
class ExperimentConfig:
    """Typed view over a validated config value map."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values: dict) -> "ExperimentConfig":
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def defaults(cls, **overrides) -> "ExperimentConfig":
        values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, val in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = val
        return cls.from_values(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        checks = [
            (v["data.classes"] >= 2, "data.classes must be >= 2"),
            (v["data.contexts"] >= 1, "data.contexts must be >= 1"),
            (v["data.n_max"] >= 1, "data.n_max must be >= 1"),
            (v["data.imbalance"] >= 1.0, "data.imbalance must be >= 1"),
            (0.0 <= v["data.noise_rate"] < 1.0, "data.noise_rate must lie in [0, 1)"),
            (0.0 <= v["data.blue_fraction"] <= 1.0,
             "data.blue_fraction must lie in [0, 1]"),
            (v["data.test_per_class"] >= 1, "data.test_per_class must be >= 1"),
            (0.0 <= v["data.head_context_entropy"] <= 1.0,
             "data.head_context_entropy must lie in [0, 1]"),
            (0.0 <= v["data.tail_context_entropy"] <= 1.0,
             "data.tail_context_entropy must lie in [0, 1]"),
            (all(h >= 1 for h in v["train.hidden"]),
             "train.hidden widths must be positive"),
            (v["train.batch_size"] >= 1, "train.batch_size must be >= 1"),
            (v["train.lr"] > 0, "train.lr must be positive"),
            (0.0 <= v["train.momentum"] < 1.0, "train.momentum must lie in [0, 1)"),
            (v["train.weight_decay"] >= 0, "train.weight_decay must be >= 0"),
            (v["train.lr_schedule"] in ("constant", "cosine"),
             "train.lr_schedule must be constant or cosine"),
            (v["train.iterations"] >= 1, "train.iterations must be >= 1"),
            (v["train.warmup_epochs"] >= 1, "train.warmup_epochs must be >= 1"),
            (v["train.identifier_epochs"] >= 0,
             "train.identifier_epochs must be >= 0"),
            (v["train.mixup_epochs"] >= 0, "train.mixup_epochs must be >= 0"),
            (v["train.stage2_epochs"] >= 0, "train.stage2_epochs must be >= 0"),
            (v["train.irm_lambda"] >= 0, "train.irm_lambda must be >= 0"),
            (v["train.irm_warm_steps"] >= 0, "train.irm_warm_steps must be >= 0"),
            (v["train.irm_lr"] > 0, "train.irm_lr must be positive"),
            (v["train.irm_clip"] >= 0, "train.irm_clip must be >= 0"),
            (0.0 <= v["train.theta_floor"] <= 1.0,
             "train.theta_floor must lie in [0, 1]"),
            (0.0 < v["train.weight_floor"] <= 1.0,
             "train.weight_floor must lie in (0, 1]"),
            (v["env.count"] in DEFAULT_LAYOUTS,
             f"env.count must be one of {sorted(DEFAULT_LAYOUTS)}"),
            (0.0 <= v["env.strong_dropout"] < 1.0,
             "env.strong_dropout must lie in [0, 1)"),
            (0.0 < v["env.strong_scale_lo"] <= v["env.strong_scale_hi"],
             "env.strong_scale_lo/hi must satisfy 0 < lo <= hi"),
            (v["eval.budget_rule"] == "true_noise"
             or v["eval.budget_rule"].startswith("count:"),
             "eval.budget_rule must be 'true_noise' or 'count:<n>'"),
            (all(m in METHODS and m != "h2e" for m in v["eval.baselines"]),
             "eval.baselines may list ce, la, smallloss"),
            (v["eval.smallloss_warm_epochs"] >= 0,
             "eval.smallloss_warm_epochs must be >= 0"),
        ]
        if not v["data.bundle"]:
            checks.append((v["data.feature_dim"]
                           >= v["data.classes"] + v["data.contexts"],
                           "data.feature_dim must be >= data.classes + "
                           "data.contexts for the orthonormal frame"))
            checks.append((round(v["data.n_max"] / v["data.imbalance"]) >= 1,
                           "data.n_max / data.imbalance rounds below one "
                           "sample in the smallest class"))
        if v["eval.budget_rule"].startswith("count:"):
            try:
                n = int(v["eval.budget_rule"].split(":", 1)[1])
            except ValueError:
                n = -1
            checks.append((n >= 0, "eval.budget_rule count must be >= 0"))
        if v["eval.flag_threshold"] is not None:
            checks.append((0.0 < v["eval.flag_threshold"] < 1.0,
                           "eval.flag_threshold must lie in (0, 1)"))
        if v["eval.smallloss_drop"] is not None:
            checks.append((0.0 <= v["eval.smallloss_drop"] < 1.0,
                           "eval.smallloss_drop must lie in [0, 1)"))
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def echo_text(self) -> str:
        """Canonical key=value rendering, schema order, reproducible."""
        lines = []
        for key in SCHEMA:
            val = self.values[key]
            if val is None:
                rendered = "auto" if key != "eval.flag_threshold" else "none"
            elif isinstance(val, bool):
                rendered = "true" if val else "false"
            elif isinstance(val, tuple):
                rendered = ",".join(str(x) for x in val)
            else:
                rendered = str(val)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def echo_dict(self) -> dict:
        """The echo as a {key: rendered string} map, for embedding in reports."""
        return {line.split(" = ")[0]: line.split(" = ", 1)[1]
                for line in self.echo_text().strip().splitlines()}

    def optim_settings(self) -> OptimSettings:
        v = self.values
        return OptimSettings(lr=v["train.lr"], momentum=v["train.momentum"],
                             weight_decay=v["train.weight_decay"],
                             lr_schedule=v["train.lr_schedule"],
                             batch_size=v["train.batch_size"])

    def irm_config(self) -> IrmConfig:
        # the identifier trains a C-vector on a steep penalized landscape;
        # it keeps its own plain-SGD settings rather than inheriting the
        # network optimizer's momentum
        v = self.values
        return IrmConfig(penalty_weight=v["train.irm_lambda"],
                         penalty_warm_steps=v["train.irm_warm_steps"],
                         lr=v["train.irm_lr"],
                         batch_size=v["train.batch_size"],
                         grad_clip=v["train.irm_clip"])

    def h2e_config(self) -> H2EConfig:
        v = self.values
        count = v["env.count"]
        overrides = None
        if v["env.simple_jitter"] is not None or v["env.strong_jitter"] is not None:
            layout = DEFAULT_LAYOUTS[count]
            overrides = tuple(
                v["env.simple_jitter"] if kind == "simple"
                else v["env.strong_jitter"] if kind == "strong" else None
                for _, kind in layout)
        return H2EConfig(
            iterations=v["train.iterations"],
            warmup_epochs=v["train.warmup_epochs"],
            identifier_epochs=v["train.identifier_epochs"],
            mixup_epochs=v["train.mixup_epochs"],
            stage2_epochs=v["train.stage2_epochs"],
            irm=self.irm_config(),
            optim=self.optim_settings(),
            hidden=v["train.hidden"],
            theta_floor=v["train.theta_floor"],
            weight_floor=v["train.weight_floor"],
            w_init=v["train.w_init"],
            scalar_w=v["train.scalar_w"],
            density_weighting=v["train.density_weighting"],
            drop_flagged=v["train.drop_flagged"],
            env_count=count,
            env_jitter_overrides=overrides,
            env_dropout=v["env.strong_dropout"],
            env_scale_range=(v["env.strong_scale_lo"], v["env.strong_scale_hi"]),
        )
