"""Shared vocabulary: drift models, partitions, RNG specs and run manifests."""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from coalflow import __version__
from coalflow.rng import Stream

# Integer codes the compiled kernels dispatch on.
DRIFT_ZERO = 0
DRIFT_LINEAR = 1
DRIFT_COSINE = 2
DRIFT_TANH = 3

NAMED_DRIFTS = ("cosine", "scaled-tanh")


@dataclass(frozen=True)
class DriftModel:
    """A Lipschitz drift ``a`` together with its Lipschitz constant.

    ``kind`` is ``"zero"``, ``"linear"`` (``a(u) = C u``) or ``"named"``.
    Named drifts are ``cosine`` (``a(u) = cos u``) and ``scaled-tanh``
    (``a(u) = tanh(k u)``, params ``(k,)``).
    """

    kind: str = "zero"
    C: float = 0.0
    name: str | None = None
    params: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("zero", "linear", "named"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "named":
            if self.name not in NAMED_DRIFTS:
                raise ValueError(f"unknown named drift {self.name!r}; choose from {NAMED_DRIFTS}")
            if self.name == "scaled-tanh" and len(self.params) != 1:
                raise ValueError("scaled-tanh takes exactly one parameter (the scale k)")
            if self.name == "cosine" and self.params:
                raise ValueError("cosine takes no parameters")
        if not math.isfinite(self.C):
            raise ValueError("linear coefficient must be finite")

    @classmethod
    def zero(cls) -> "DriftModel":
        return cls("zero")

    @classmethod
    def linear(cls, C: float) -> "DriftModel":
        return cls("linear", C=float(C))

    @classmethod
    def cosine(cls) -> "DriftModel":
        return cls("named", name="cosine")

    @classmethod
    def scaled_tanh(cls, k: float) -> "DriftModel":
        return cls("named", name="scaled-tanh", params=(float(k),))

    @property
    def lipschitz_constant(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "linear":
            return abs(self.C)
        if self.name == "cosine":
            return 1.0
        return abs(self.params[0])

    @property
    def code(self) -> tuple[int, float]:
        """``(kernel code, parameter)`` pair understood by the compiled loops."""
        if self.kind == "zero":
            return DRIFT_ZERO, 0.0
        if self.kind == "linear":
            return DRIFT_LINEAR, self.C
        if self.name == "cosine":
            return DRIFT_COSINE, 0.0
        return DRIFT_TANH, self.params[0]

    def __call__(self, u):
        return drift_eval(self, u)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "zero":
            return {"kind": "zero"}
        if self.kind == "linear":
            return {"kind": "linear", "C": self.C}
        return {"kind": "named", "name": self.name, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DriftModel":
        return cls(d["kind"], C=float(d.get("C", 0.0)), name=d.get("name"),
                   params=tuple(float(p) for p in d.get("params", ())))

    @classmethod
    def parse(cls, text: str, C: float | None = None) -> "DriftModel":
        """Parse the CLI spelling: ``zero``, ``linear[:C]``, ``cosine``, ``tanh:k``."""
        head, _, arg = text.partition(":")
        head = head.strip().lower()
        if head == "zero":
            return cls.zero()
        if head == "linear":
            if arg:
                return cls.linear(float(arg))
            if C is None:
                raise ValueError("linear drift needs a coefficient (linear:C or --C)")
            return cls.linear(C)
        if head == "cosine":
            return cls.cosine()
        if head in ("tanh", "scaled-tanh"):
            if not arg:
                raise ValueError("scaled-tanh needs a scale (tanh:k)")
            return cls.scaled_tanh(float(arg))
        raise ValueError(f"unknown drift {text!r}")


def drift_eval(model: DriftModel, u):
    """Evaluate ``a(u)``; accepts scalars or numpy arrays."""
    if model.kind == "zero":
        return 0.0 * np.asarray(u, dtype=float) if np.ndim(u) else 0.0
    if model.kind == "linear":
        return model.C * u
    if model.name == "cosine":
        return np.cos(u) if np.ndim(u) else math.cos(u)
    k = model.params[0]
    return np.tanh(k * np.asarray(u)) if np.ndim(u) else math.tanh(k * u)


@dataclass(frozen=True)
class Partition:
    """Breakpoints ``0 = t_0 < ... < t_N = 1`` and their mesh (largest gap).

    ``mesh`` defaults to the largest gap.  :func:`make_uniform_partition`
    passes ``1/N`` explicitly, which can differ from the largest computed gap
    by one ulp (for ``N = 3`` the last gap rounds to ``0.33333333333333337``).
    """

    breakpoints: tuple[float, ...]
    mesh: float = field(default=float("nan"))

    def __post_init__(self) -> None:
        b = tuple(float(x) for x in self.breakpoints)
        object.__setattr__(self, "breakpoints", b)
        if len(b) < 2:
            raise ValueError("a partition needs at least two breakpoints")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("partition must start at 0 and end at 1")
        gaps = np.diff(b)
        if np.any(gaps <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if math.isnan(self.mesh):
            object.__setattr__(self, "mesh", float(gaps.max()))

    @property
    def N(self) -> int:
        return len(self.breakpoints) - 1

    def gaps(self) -> np.ndarray:
        return np.diff(self.breakpoints)


def make_uniform_partition(N: int) -> Partition:
    if N < 1:
        raise ValueError(f"partition size must be positive, got {N}")
    return Partition(tuple(k / N for k in range(N + 1)), mesh=1.0 / N)


@dataclass(frozen=True)
class RngSpec:
    """Master seed of a run; streams are labelled ``(purpose, replica, sub)``."""

    master_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def stream(self, purpose: str, replica: int = 0, sub: int = 0) -> Stream:
        return Stream(int(self.master_seed), purpose, replica, sub)


def gaussian_stream(spec: RngSpec, labels: tuple, count: int, start: int = 0) -> np.ndarray:
    """``count`` standard normals for ``labels = (purpose, replica[, sub])``.

    ``start`` skips that many draws first, so ``gaussian_stream(.., n, start=k)``
    equals the tail of ``gaussian_stream(.., n + k)``.
    """
    purpose, replica, *rest = labels
    s = spec.stream(purpose, replica, rest[0] if rest else 0)
    if start:
        s.normals(start)
    return s.normals(count)


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    params: dict[str, Any]
    master_seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    @staticmethod
    def now() -> str:
        return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, DriftModel):
        return obj.to_dict()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def check_sorted(values: Sequence[float], what: str = "starts") -> None:
    if any(b < a for a, b in zip(values, values[1:])):
        raise ValueError(f"{what} must be sorted ascending")
