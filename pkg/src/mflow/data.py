"""Synthetic embedded-manifold datasets and CSV ingestion.

Generation order is fixed so that a given seed reproduces the same points
on any platform:

* ``make_circle``: ``n`` angle uniforms, then ``2n`` noise normals
  (row-major).
* ``make_embedded_gaussian``: ``n*d`` latent normals, then ``n*D`` noise
  normals.  The embedding matrix comes from a separate fixed stream keyed on
  ``(d, D)`` only, so every seed samples the same manifold.
* ``make_swiss_roll``: ``n`` uniforms for ``t``, ``n`` for the height,
  then ``3n`` noise normals.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed, mix64

SWISS_T_RANGE = (1.5 * math.pi, 4.5 * math.pi)
SWISS_HEIGHT = 21.0


@dataclass
class Dataset:
    points: np.ndarray
    manifold_dim: int | None = None
    descriptor: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("a dataset needs at least one row of a 2-D array")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.points[index], self.manifold_dim, self.descriptor)


def _check_n(n: int) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")


def make_circle(n: int, noise_sigma: float = 0.0, seed: int = 0) -> Dataset:
    _check_n(n)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = SplitMix64(seed)
    theta = 2.0 * math.pi * rng.uniform(n)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.normal(2 * n).reshape(n, 2)
    return Dataset(pts, 1, "unit-circle")


def embedding_matrix(d: int, D: int) -> np.ndarray:
    """Fixed ``D x d`` embedding used by :func:`make_embedded_gaussian`."""
    rng = SplitMix64(derive_seed(0x5EED, f"embed:{d}:{D}"))
    return rng.normal(D * d).reshape(D, d) / math.sqrt(d)


def embed(u: np.ndarray, d: int, D: int) -> np.ndarray:
    """The smooth injective map ``u -> tanh(A u)``."""
    return np.tanh(u @ embedding_matrix(d, D).T)


def make_embedded_gaussian(n: int, d: int, D: int, seed: int = 0, noise_sigma: float = 0.0) -> Dataset:
    _check_n(n)
    if not 1 <= d < D:
        raise ValueError(f"need 1 <= d < D, got d={d}, D={D}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = SplitMix64(seed)
    u = rng.normal(n * d).reshape(n, d)
    pts = embed(u, d, D)
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.normal(n * D).reshape(n, D)
    return Dataset(pts, d, f"embedded-gaussian:{d}:{D}")


def make_swiss_roll(n: int, noise_sigma: float = 0.0, seed: int = 0) -> Dataset:
    _check_n(n)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = SplitMix64(seed)
    lo, hi = SWISS_T_RANGE
    t = lo + (hi - lo) * rng.uniform(n)
    height = SWISS_HEIGHT * rng.uniform(n)
    pts = np.stack([t * np.cos(t), height, t * np.sin(t)], axis=1)
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.normal(3 * n).reshape(n, 3)
    return Dataset(pts, 2, "swiss-roll")


def train_heldout_split(data: Dataset, seed: int, heldout_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Deterministic partition: row i is held out when ``mix64(seed ^ i)`` falls in the lowest decile."""
    cut = int(heldout_fraction * 2**64)
    key = derive_seed(seed, "split")
    mask = np.array([mix64(key ^ i) < cut for i in range(data.n)])
    if mask.all():
        mask[:] = False
    train = np.flatnonzero(~mask)
    # tiny datasets may hold nothing out; evaluate on the training rows then
    held = np.flatnonzero(mask) if mask.any() else train
    return data.subset(train), data.subset(held)


class CSVError(ValueError):
    pass


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, delimiter: str | None = None, header: bool | str = False) -> Dataset:
    """Read a rectangular numeric table.  The delimiter is sniffed (comma or tab) when omitted.

    ``header=True`` skips the first non-blank row; ``header="auto"`` skips it
    only when none of its cells is a number.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    if delimiter is None:
        first = text.split("\n", 1)[0]
        delimiter = "\t" if "\t" in first else ","
    rows = []
    width = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text), delimiter=delimiter), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if header and width is None:
            skip = header is True or not any(_is_number(c) for c in row)
            header = False
            if skip:
                continue
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise CSVError(f"{path}: line {lineno} has {len(row)} columns, expected {width}")
        values = []
        for col, cell in enumerate(row, start=1):
            try:
                values.append(float(cell))
            except ValueError:
                raise CSVError(f"{path}: line {lineno}, column {col}: cannot parse {cell!r}") from None
        rows.append(values)
    if not rows:
        raise CSVError(f"{path}: no rows")
    return Dataset(np.array(rows, dtype=np.float64))


def format_float(x: float) -> str:
    return "%.17g" % x


def write_csv(path, points: np.ndarray, header: list[str] | None = None, delimiter: str = ",") -> None:
    """Write rows at 17 significant digits, atomically (temp file then rename)."""
    lines = []
    if header is not None:
        lines.append(delimiter.join(header))
    for row in np.atleast_2d(points) if len(points) else []:
        lines.append(delimiter.join(format_float(v) for v in row))
    text = "".join(line + "\n" for line in lines)
    atomic_write(path, text)


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


_GENERATORS = {
    "circle": (make_circle, {"n": int, "sigma": float, "seed": int}),
    "embedded_gaussian": (make_embedded_gaussian, {"n": int, "d": int, "D": int, "seed": int, "sigma": float}),
    "swiss_roll": (make_swiss_roll, {"n": int, "sigma": float, "seed": int}),
}


def parse_data_spec(spec: str) -> Dataset:
    """Load ``generator:key=value,...`` or a CSV path.

    Examples: ``circle:n=8192,sigma=0.01,seed=0``,
    ``embedded_gaussian:n=2000,d=2,D=10,seed=1,sigma=0.01``, ``data.csv``.
    """
    name, sep, rest = spec.partition(":")
    if sep and name in _GENERATORS:
        fn, types = _GENERATORS[name]
        kwargs = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, val = item.partition("=")
            if not eq or key not in types:
                raise ValueError(f"bad argument {item!r} for generator {name!r}; known: {sorted(types)}")
            kwargs[key] = types[key](val)
        if "sigma" in kwargs:
            kwargs["noise_sigma"] = kwargs.pop("sigma")
        if "n" not in kwargs:
            raise ValueError(f"generator {name!r} needs n=")
        return fn(**kwargs)
    return load_csv(spec, header="auto")
