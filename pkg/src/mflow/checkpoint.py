"""Line-oriented text checkpoints.

Layout::

    MFLOW-CKPT v1
    config <key> = <value>          # run configuration echo, zero or more
    model D=<D> d=<d> variant=<single_block|two_block>
    flow <f|h> dim=<n> layers=<k>
    layer <kind> dim=<n> [hidden=a,b] [parity=even|odd] [initialized=0|1] [perm=...] [sign=...]
    ...
    params <count>
    <one parameter per line, %.17g>
    checksum <16 hex digits>

The checksum is 64-bit FNV-1a over every byte before the checksum line.
Parameters appear in :meth:`Model.get_flat` order, so a load reproduces
them bit for bit.
"""

from __future__ import annotations

import os

import numpy as np

from .data import atomic_write
from .flows import ActNorm, FlowStack, InvertibleLinear, LayerSpec, make_layer
from .objective import LatentSplit, Model
from .rng import fnv1a64

MAGIC = "MFLOW-CKPT"
VERSION = "v1"
SUPPORTED_VERSIONS = (VERSION,)


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _layer_line(layer) -> str:
    s = layer.spec
    fields = [f"layer {s.kind}", f"dim={s.dim}"]
    if s.kind == "affine_coupling":
        fields.append("hidden=" + ",".join(str(h) for h in s.hidden_sizes))
        fields.append(f"parity={s.mask_parity}")
    fields.extend(f"{k}={v}" for k, v in layer.state().items())
    return " ".join(fields)


def dumps(model: Model, config_lines: list[str] | None = None) -> str:
    lines = [f"{MAGIC} {VERSION}"]
    lines.extend(f"config {c}" for c in (config_lines or []))
    lines.append(f"model D={model.split.D} d={model.split.d} variant={model.variant}")
    for tag, flow in zip("fh", model.flows()):
        lines.append(f"flow {tag} dim={flow.dim} layers={len(flow.layers)}")
        lines.extend(_layer_line(layer) for layer in flow.layers)
    theta = model.get_flat()
    lines.append(f"params {theta.size}")
    lines.extend("%.17g" % v for v in theta)
    body = "".join(line + "\n" for line in lines)
    return body + "checksum %016x\n" % fnv1a64(body.encode("utf-8"))


def save_checkpoint(path, model: Model, config_lines: list[str] | None = None) -> None:
    atomic_write(path, dumps(model, config_lines))


def _kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for t in tokens:
        k, eq, v = t.partition("=")
        if not eq:
            raise CheckpointError(f"malformed field {t!r}")
        out[k] = v
    return out


def _build_layer(tokens: list[str]):
    kind, fields = tokens[1], _kv(tokens[2:])
    hidden = tuple(int(h) for h in fields.get("hidden", "").split(",") if h)
    spec = LayerSpec(kind, int(fields["dim"]), hidden, fields.get("parity", "even"))
    layer = make_layer(spec)
    if isinstance(layer, ActNorm):
        layer.initialized = fields.get("initialized", "0") == "1"
    if isinstance(layer, InvertibleLinear):
        layer.perm = np.array([int(i) for i in fields["perm"].split(",")])
        layer.sign = np.array([float(s) for s in fields["sign"].split(",")])
    return layer


def loads(text: str) -> tuple[Model, dict[str, str]]:
    """Parse checkpoint text into a model and the echoed config."""
    first = text.split("\n", 1)[0]
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError(f"not a checkpoint: first line is {first[:40]!r}")
    if parts[1] not in SUPPORTED_VERSIONS:
        raise VersionError(f"unsupported checkpoint version {parts[1]!r}; supported: {', '.join(SUPPORTED_VERSIONS)}")

    cut = text.rfind("checksum ")
    if cut < 0 or not text.endswith("\n") or (cut > 0 and text[cut - 1] != "\n"):
        raise TruncatedError("checkpoint is truncated: missing final checksum line")
    body = text[:cut]
    stored = text[cut + len("checksum "):].strip()
    actual = "%016x" % fnv1a64(body.encode("utf-8"))
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: file says {stored}, contents hash to {actual}")

    lines = body.split("\n")[1:-1]
    config: dict[str, str] = {}
    flows: list[FlowStack] = []
    split = None
    i = 0
    try:
        while i < len(lines):
            tokens = lines[i].split()
            head = tokens[0] if tokens else ""
            if head == "config":
                k, _, v = lines[i][len("config "):].partition(" = ")
                config[k] = v
                i += 1
            elif head == "model":
                f = _kv(tokens[1:])
                split = LatentSplit(int(f["D"]), int(f["d"]))
                i += 1
            elif head == "flow":
                f = _kv(tokens[2:])
                n_layers = int(f["layers"])
                layers = [_build_layer(lines[i + 1 + j].split()) for j in range(n_layers)]
                flows.append(FlowStack(layers, int(f["dim"])))
                i += 1 + n_layers
            elif head == "params":
                count = int(tokens[1])
                values = lines[i + 1:i + 1 + count]
                if len(values) != count:
                    raise TruncatedError(f"expected {count} parameters, found {len(values)}")
                theta = np.array([float(v) for v in values])
                i += 1 + count
                break
            else:
                raise CheckpointError(f"unexpected line {lines[i][:40]!r}")
        else:
            raise TruncatedError("checkpoint has no parameter block")
    except (IndexError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if split is None or not flows:
        raise CheckpointError("checkpoint lacks a model or flow description")
    model = Model(flows[0], split, flows[1] if len(flows) > 1 else None)
    if theta.size != sum(f.num_params() for f in model.flows()):
        raise CheckpointError("parameter count does not match the topology")
    model.set_flat(theta)
    return model, config


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    try:
        with open(os.fspath(path), encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(text)
