"""Per-cycle run records and their (versioned) serialized form."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

SCHEMA_VERSION = 1

# column order of the per-cycle CSV table (fixed for a schema version)
CSV_COLUMNS = (
    "cycle", "method", "n_elements", "ndof_w", "ndof_lambda", "nnz", "J_h", "eta", "error",
    "effectivity", "converged", "newton_iters", "gmres_iters", "adjoint_iters", "t_assembly",
    "t_linear", "t_solve", "t_adjoint", "t_total", "n_keep", "n_h", "n_p",
)


@dataclass
class CycleRecord:
    cycle: int
    method: str
    n_elements: int
    ndof_w: int
    ndof_lambda: int
    nnz: int
    J_h: float
    eta: float | None = None
    error: float | None = None
    effectivity: float | None = None
    converged: bool = True
    newton_iters: int = 0
    gmres_iters: int = 0
    adjoint_iters: int = 0
    t_assembly: float = 0.0
    t_linear: float = 0.0
    t_solve: float = 0.0
    t_adjoint: float = 0.0
    t_total: float = 0.0
    plan: dict | None = None

    def row(self) -> list:
        counts = (self.plan or {}).get("counts", {})
        extra = {"n_keep": counts.get("keep", 0), "n_h": counts.get("h-refine", 0),
                 "n_p": counts.get("p-enrich", 0)}
        d = asdict(self)
        return [extra[c] if c in extra else d[c] for c in CSV_COLUMNS]


@dataclass
class RunReport:
    method: str
    case: str
    config: dict
    j_ref: float | None = None
    j_ref_label: str = ""
    cycles: list = field(default_factory=list)
    failed: bool = False
    message: str = ""
    schema_version: int = SCHEMA_VERSION

    def add(self, record: CycleRecord) -> None:
        if self.cycles and record.cycle <= self.cycles[-1].cycle:
            raise ValueError("cycle records must be appended in increasing order")
        self.cycles.append(record)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.cycles]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["cycles"] = [asdict(r) for r in self.cycles]
        return _plain(d)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version!r}")
        d = dict(data)
        d["cycles"] = [CycleRecord(**r) for r in d.get("cycles", [])]
        return cls(**d)


def _plain(obj):
    """Recursively convert tuples and numpy scalars to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):
        return obj.item()
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj
