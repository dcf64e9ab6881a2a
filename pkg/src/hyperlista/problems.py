"""Sparse inverse problem data model, synthetic generators and dataset files.

A dataset lives in two files: ``<path>`` holds a blob of little-endian
float64 values (row-major, one section per array) and ``<path>.json`` is a
sidecar header describing dimensions, generator config and the byte layout
of every section.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PINV_RCOND = 1e-12
FORMAT_VERSION = 1


class DatasetError(Exception):
    """Base class for dataset file errors; ``code`` distinguishes the cause."""

    code = "dataset-error"


class MalformedHeaderError(DatasetError):
    code = "malformed-header"


class DimensionMismatchError(DatasetError):
    code = "dimension-mismatch"


class TruncatedPayloadError(DatasetError):
    code = "truncated-payload"


@dataclass(frozen=True, eq=False)
class ProblemSetup:
    """Measurement model ``b = A x + eps`` plus the analytic matrices.

    ``W``, ``D``, ``G`` and ``mu`` stay ``None`` until the dictionary solver
    has run (see :func:`hyperlista.dictionary.build_setup`).
    """

    A: np.ndarray
    A_pinv: np.ndarray
    W: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    mu: Optional[float] = None

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def is_built(self) -> bool:
        return self.W is not None and self.mu is not None

    @classmethod
    def from_dictionary(cls, A: np.ndarray) -> "ProblemSetup":
        A = np.ascontiguousarray(A, dtype=np.float64)
        return cls(A=A, A_pinv=pseudoinverse(A))


@dataclass(frozen=True, eq=False)
class Instance:
    x_star: np.ndarray
    epsilon: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class GenConfig:
    """Synthetic instance distribution.

    ``snr_db=None`` means noiseless. ``nonzero_mode`` is ``"gaussian"``
    (magnitudes ~ N(0, sigma^2)) or ``"constant"`` (every nonzero equals
    ``constant_value``).
    """

    m: int
    n: int
    sparsity_p: float = 0.1
    magnitude_sigma: float = 1.0
    snr_db: Optional[float] = None
    nonzero_mode: str = "gaussian"
    constant_value: float = 1.0
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 < self.sparsity_p < 1.0:
            raise ValueError(f"sparsity_p must lie in (0, 1), got {self.sparsity_p}")
        if self.nonzero_mode not in ("gaussian", "constant"):
            raise ValueError(f"unknown nonzero_mode {self.nonzero_mode!r}")
        if self.nonzero_mode == "gaussian" and not self.magnitude_sigma > 0:
            raise ValueError("magnitude_sigma must be positive in gaussian mode")
        if self.count < 0:
            raise ValueError("count must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "GenConfig":
        return dataclasses.replace(self, **changes)


def pseudoinverse(A: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD, singular values below
    ``1e-12 * sigma_max`` treated as zero."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    cutoff = PINV_RCOND * (s[0] if s.size else 0.0)
    inv = np.zeros_like(s)
    keep = s > cutoff
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def normalize_columns(A: np.ndarray) -> np.ndarray:
    return A / np.linalg.norm(A, axis=0)


def generate_dictionary(m: int, n: int, seed) -> np.ndarray:
    """I.i.d. standard normal ``m x n`` matrix with unit l2 columns."""
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    norms = np.linalg.norm(A, axis=0)
    # zero columns have probability zero, but resample rather than divide by 0
    for j in np.flatnonzero(norms == 0.0):
        while norms[j] == 0.0:
            A[:, j] = rng.standard_normal(m)
            norms[j] = np.linalg.norm(A[:, j])
    return A / norms


def _draw_signal(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    while True:
        support = rng.random(cfg.n) < cfg.sparsity_p
        values = rng.standard_normal(cfg.n)
        if cfg.nonzero_mode == "constant":
            x = np.where(support, cfg.constant_value, 0.0)
        else:
            x = np.where(support, values * cfg.magnitude_sigma, 0.0)
        if np.any(x != 0.0):
            return x


def generate_instances(setup: ProblemSetup, cfg: GenConfig) -> list[Instance]:
    """Draw ``cfg.count`` instances ``b = A x* + eps``.

    Signals are Bernoulli(p)-supported; all-zero draws are rejected and
    redrawn. Noise is Gaussian, rescaled per instance so that
    ``||A x*||^2 / ||eps||^2`` equals the requested SNR exactly.

    The random stream consumed per signal does not depend on ``sigma``, so
    two configs differing only in ``magnitude_sigma`` produce exactly
    rescaled copies of each other under the same seed.
    """
    if (setup.m, setup.n) != (cfg.m, cfg.n):
        raise DimensionMismatchError(
            f"setup is {setup.m}x{setup.n} but config asks for {cfg.m}x{cfg.n}")
    rng = np.random.default_rng(cfg.seed)
    out = []
    for _ in range(cfg.count):
        x = _draw_signal(rng, cfg)
        clean = setup.A @ x
        if cfg.snr_db is None:
            eps = np.zeros(cfg.m)
        else:
            raw = rng.standard_normal(cfg.m)
            target = np.linalg.norm(clean) / 10.0 ** (cfg.snr_db / 20.0)
            eps = raw * (target / np.linalg.norm(raw))
        out.append(Instance(x_star=x, epsilon=eps, b=clean + eps))
    return out


def stack_instances(instances: Sequence[Instance]):
    """Return ``(X_star, E, B)`` with one row per instance."""
    X = np.stack([inst.x_star for inst in instances])
    E = np.stack([inst.epsilon for inst in instances])
    B = np.stack([inst.b for inst in instances])
    return X, E, B


# -- dataset files ------------------------------------------------------------

_MATRIX_FIELDS = ("A", "A_pinv", "W", "D", "G")


@dataclass
class Dataset:
    setup: ProblemSetup
    instances: list[Instance] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def sidecar_path(path) -> str:
    return os.fspath(path) + ".json"


def _expected_shapes(m: int, n: int, count: int) -> dict:
    return {
        "A": [m, n], "A_pinv": [n, m], "W": [m, n], "D": [m, n], "G": [m, m],
        "x_star": [count, n], "epsilon": [count, m], "b": [count, m],
    }


def save_problem(path, setup: ProblemSetup, instances: Sequence[Instance] = (),
                 meta: Optional[dict] = None) -> None:
    arrays = [(name, getattr(setup, name)) for name in _MATRIX_FIELDS
              if getattr(setup, name) is not None]
    if instances:
        X, E, B = stack_instances(instances)
        arrays += [("x_star", X), ("epsilon", E), ("b", B)]
    sections = []
    offset = 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        sections.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": "hyperlista-dataset",
        "version": FORMAT_VERSION,
        "m": setup.m,
        "n": setup.n,
        "count": len(instances),
        "mu": setup.mu,
        "dtype": "<f8",
        "order": "C",
        "sections": sections,
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_header(path) -> dict:
    try:
        with open(sidecar_path(path)) as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise MalformedHeaderError(f"missing header {sidecar_path(path)}") from exc
    if not text.strip():
        raise MalformedHeaderError("empty header")
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != "hyperlista-dataset":
        raise MalformedHeaderError("not a hyperlista dataset header")
    for key in ("m", "n", "count", "sections"):
        if key not in header:
            raise MalformedHeaderError(f"header lacks {key!r}")
    if header.get("dtype", "<f8") != "<f8":
        raise MalformedHeaderError(f"unsupported dtype {header['dtype']!r}")
    return header


def _layout_bytes(names, m: int, n: int, count: int) -> int:
    shapes = _expected_shapes(m, n, count)
    return 8 * sum(int(np.prod(shapes[name])) for name in names)


def _matching_dims(names, m: int, n: int, count: int, size: int):
    """Other ``(m, n)`` whose layout is exactly ``size`` bytes, if any.

    Lets a short payload written for different dimensions be reported as a
    dimension mismatch rather than as truncation.
    """
    for mm in range(1, m + 1):
        for nn in range(1, n + 1):
            if (mm, nn) != (m, n) and _layout_bytes(names, mm, nn, count) == size:
                return mm, nn
    return None


def load_problem(path) -> Dataset:
    """Inverse of :func:`save_problem`; raises a :class:`DatasetError`
    subclass on malformed header, inconsistent dimensions or short payload."""
    header = _read_header(path)
    try:
        m, n, count = int(header["m"]), int(header["n"]), int(header["count"])
        sections = [(s["name"], tuple(int(d) for d in s["shape"]),
                     int(s["offset"]), int(s["nbytes"])) for s in header["sections"]]
    except (TypeError, ValueError, KeyError) as exc:
        raise MalformedHeaderError(f"bad header field: {exc}") from exc
    if not os.path.exists(path):
        raise TruncatedPayloadError(f"payload file {path} missing")
    payload_size = os.path.getsize(path)

    expected = _expected_shapes(m, n, count)
    declared = 0
    for name, shape, offset, nbytes in sections:
        if name not in expected:
            raise MalformedHeaderError(f"unknown section {name!r}")
        if list(shape) != expected[name]:
            raise DimensionMismatchError(
                f"section {name} has shape {list(shape)}, header dims imply {expected[name]}")
        if nbytes != int(np.prod(shape)) * 8 or offset != declared:
            raise DimensionMismatchError(f"section {name} byte layout inconsistent with its shape")
        declared += nbytes
    if payload_size < declared:
        names = [name for name, *_ in sections]
        other = _matching_dims(names, m, n, count, payload_size)
        if other is not None:
            raise DimensionMismatchError(
                f"payload holds {payload_size} bytes, the layout for (m, n)={other}, "
                f"but the header declares (m, n)={(m, n)}")
        raise TruncatedPayloadError(f"payload has {payload_size} bytes, header declares {declared}")
    if payload_size > declared:
        raise DimensionMismatchError(f"payload has {payload_size} bytes, header declares {declared}")

    names = {name for name, *_ in sections}
    if "A" not in names:
        raise MalformedHeaderError("dataset has no dictionary section")
    arrays = {}
    with open(path, "rb") as fh:
        for name, shape, offset, nbytes in sections:
            fh.seek(offset)
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise TruncatedPayloadError(f"section {name} truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)

    A = arrays["A"]
    setup = ProblemSetup(
        A=A,
        A_pinv=arrays["A_pinv"] if "A_pinv" in arrays else pseudoinverse(A),
        W=arrays.get("W"), D=arrays.get("D"), G=arrays.get("G"),
        mu=None if header.get("mu") is None else float(header["mu"]),
    )
    instances = []
    if count:
        if not {"x_star", "epsilon", "b"} <= names:
            raise MalformedHeaderError("count > 0 but instance sections missing")
        instances = [Instance(x_star=arrays["x_star"][i], epsilon=arrays["epsilon"][i],
                              b=arrays["b"][i]) for i in range(count)]
    return Dataset(setup=setup, instances=instances, meta=header.get("meta", {}))


def export_instances_csv(path, instances: Sequence[Instance]) -> None:
    """Debug dump: one row per (instance, vector, index, value)."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "vector", "index", "value"])
        for i, inst in enumerate(instances):
            for name in ("x_star", "epsilon", "b"):
                for j, v in enumerate(getattr(inst, name)):
                    w.writerow([i, name, j, repr(float(v))])
