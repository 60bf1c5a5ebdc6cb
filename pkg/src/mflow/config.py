"""Run configuration files.

Format: UTF-8 text, one ``key = value`` per line, ``#`` starts a comment.
Stage plans use ``stage.N.key`` prefixes (N = 1, 2, ...).  Keys not listed
in ``TOP_KEYS``/``STAGE_KEYS`` are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .objective import LossConfig
from .training import FlowSpec, OptimConfig, Stage, StagePlan


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or stage."""


def _hidden(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(p) for p in s.split(",") if p.strip()) if s else ()


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


LOSS_KEYS = {"delta": float, "lambda": float, "alpha": float, "variant": str}
FLOW_KEYS = {"flow.steps": int, "flow.hidden": _hidden, "prior.steps": int}

TOP_KEYS = {
    "data": str,
    "D": int,
    "d": int,
    **LOSS_KEYS,
    **FLOW_KEYS,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "clip": float,
    "epochs": int,
    "batch": int,
    "seed": int,
    "out": str,
    "log_wall_time": _bool,
}
STAGE_KEYS = {"d": int, "D": int, "epochs": int, **LOSS_KEYS, **FLOW_KEYS}


@dataclass
class RunConfig:
    data: str
    d: int | None = None
    D: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    flow: FlowSpec = field(default_factory=FlowSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 20
    batch: int = 64
    seed: int = 0
    out: str = "run"
    log_wall_time: bool = False
    plan: StagePlan | None = None
    raw: dict[str, str] = field(default_factory=dict)

    def echo_lines(self) -> list[str]:
        return [f"{k} = {self.raw[k]}" for k in sorted(self.raw)]


def parse_lines(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _convert(key: str, value: str, conv):
    try:
        return conv(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for key {key!r}: {exc}") from None


def _loss_from(values: dict, base: LossConfig, where: str) -> LossConfig:
    try:
        return LossConfig(
            delta=values.get("delta", base.delta),
            lam=values.get("lambda", base.lam),
            alpha=values.get("alpha", base.alpha),
            variant=values.get("variant", base.variant),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _flow_from(values: dict, base: FlowSpec) -> FlowSpec:
    return FlowSpec(
        steps=values.get("flow.steps", base.steps),
        hidden=values.get("flow.hidden", base.hidden),
        prior_steps=values.get("prior.steps", base.prior_steps),
    )


def from_dict(raw: dict[str, str], require_plan: bool = False) -> RunConfig:
    top: dict = {}
    stages: dict[int, dict] = {}
    for key, value in raw.items():
        if key.startswith("stage."):
            _, num, sub = (key.split(".", 2) + ["", ""])[:3]
            if not num.isdigit() or int(num) < 1 or sub not in STAGE_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            stages.setdefault(int(num), {})[sub] = _convert(key, value, STAGE_KEYS[sub])
        elif key in TOP_KEYS:
            top[key] = _convert(key, value, TOP_KEYS[key])
        else:
            raise ConfigError(f"unknown key {key!r}")

    if "data" not in top:
        raise ConfigError("missing required key 'data'")
    loss = _loss_from(top, LossConfig(), "top level")
    flow = _flow_from(top, FlowSpec())
    optim = OptimConfig(
        lr=top.get("lr", 1e-3),
        beta1=top.get("beta1", 0.9),
        beta2=top.get("beta2", 0.999),
        eps=top.get("eps", 1e-8),
        clip=top.get("clip", 100.0),
    )
    cfg = RunConfig(
        data=top["data"], d=top.get("d"), D=top.get("D"), loss=loss, flow=flow, optim=optim,
        epochs=top.get("epochs", 20), batch=top.get("batch", 64), seed=top.get("seed", 0),
        out=top.get("out", "run"), log_wall_time=top.get("log_wall_time", False), raw=dict(raw),
    )
    if cfg.epochs < 0:
        raise ConfigError("key 'epochs' must be >= 0")
    if cfg.batch < 1:
        raise ConfigError("key 'batch' must be >= 1")

    if require_plan:
        if not stages:
            raise ConfigError("missing stage plan: no 'stage.N.*' keys")
        expected = list(range(1, len(stages) + 1))
        if sorted(stages) != expected:
            raise ConfigError(f"stage numbers must be 1..{len(stages)}, got {sorted(stages)}")
        plan = []
        prev = cfg.D
        for k in expected:
            vals = stages[k]
            if "d" not in vals:
                raise ConfigError(f"stage {k}: missing required key 'd'")
            if "D" in vals and prev is not None and vals["D"] != prev:
                raise ConfigError(f"stage {k}: input dim D={vals['D']} does not match previous dim {prev}")
            if prev is not None and not 1 <= vals["d"] < prev:
                raise ConfigError(f"stage {k}: d={vals['d']} must satisfy 1 <= d < {prev}")
            plan.append(Stage(
                manifold_dim=vals["d"],
                epochs=vals.get("epochs", cfg.epochs),
                loss=_loss_from(vals, loss, f"stage {k}"),
                flow=_flow_from(vals, flow),
                input_dim=vals.get("D", prev),
            ))
            prev = vals["d"]
        cfg.plan = StagePlan(plan)
    else:
        if stages:
            raise ConfigError("stage.N.* keys need the hier-train command")
        if cfg.d is None:
            raise ConfigError("missing required key 'd'")
        if cfg.D is not None and not 1 <= cfg.d < cfg.D:
            raise ConfigError(f"key 'd' must satisfy 1 <= d < D={cfg.D}")
    return cfg


def load_config(path, require_plan: bool = False) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(parse_lines(text), require_plan)
