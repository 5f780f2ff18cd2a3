"""Artifact formats: MPO dumps, the compiled-operator cache, CSV/JSONL results and checkpoints.

Every text format is JSON or CSV.  Floats are written with 17 significant
digits so files round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .compiler import CompiledOperator
from .linalg import InvalidInput
from .mpo import MPO

OUTPUT_ROOT_ENV = "TPQC_OUTPUT_ROOT"
MPO_FORMAT = "tpqc-mpo/1"
CACHE_FORMAT = "tpqc-compiled/1"
CHECKPOINT_FORMAT = "tpqc-checkpoint/1"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def _complex_entries(a: NDArray) -> dict:
    flat = np.asarray(a, dtype=np.complex128).reshape(-1)
    return {"shape": list(a.shape), "re": [float(v) for v in flat.real], "im": [float(v) for v in flat.imag]}


def _from_entries(d: dict) -> NDArray[np.complex128]:
    shape = tuple(d["shape"])
    re = np.asarray(d["re"], dtype=float)
    im = np.asarray(d["im"], dtype=float)
    if re.size != int(np.prod(shape)) or im.size != re.size:
        raise InvalidInput("entry count does not match the stored shape")
    out = np.empty(re.size, dtype=np.complex128)
    # set parts directly; complex arithmetic can flip the sign of zeros and change the content hash
    out.real, out.imag = re, im
    return out.reshape(shape)


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, allow_nan=True) + "\n")
    tmp.replace(path)
    return path


# ---------------------------------------------------------------------------
# MPO dump


def mpo_hash(m: MPO) -> str:
    """SHA-256 over site count, core shapes and little-endian complex128 core bytes."""
    h = hashlib.sha256()
    h.update(f"{m.n}".encode())
    for c in m.cores:
        h.update(repr(tuple(c.shape)).encode())
        h.update(np.ascontiguousarray(c, dtype="<c16").tobytes())
    return h.hexdigest()


def dump_mpo(m: MPO, path: str | Path) -> Path:
    return _write_json(Path(path), {"format": MPO_FORMAT, "n": m.n,
                                    "cores": [_complex_entries(c) for c in m.cores]})


def load_mpo(path: str | Path) -> MPO:
    data = json.loads(Path(path).read_text())
    if data.get("format") != MPO_FORMAT:
        raise InvalidInput(f"{path}: not an MPO dump")
    m = MPO(tuple(_from_entries(c) for c in data["cores"]))
    if m.n != data["n"]:
        raise InvalidInput(f"{path}: site count mismatch")
    return m


# ---------------------------------------------------------------------------
# compiled-operator cache


def cores_from_gates(gates: Sequence[NDArray], n_aux: int) -> tuple[NDArray[np.complex128], ...]:
    """Recover the isometric cores as the aux-zero blocks of the site unitaries."""
    Z = 2**n_aux
    n = len(gates)
    cores = []
    for j, g in enumerate(gates):
        full = np.asarray(g).reshape(2, Z, 2, Z).transpose(1, 0, 2, 3)  # (a_out, out, in, a_in)
        if n == 1:
            cores.append(full[:1, :, :, :1])
        elif j == 0:
            cores.append(full[:1])
        elif j == n - 1:
            cores.append(full[..., :1])
        else:
            cores.append(full)
    return tuple(np.ascontiguousarray(c) for c in cores)


def save_compiled(op: CompiledOperator, path: str | Path, key: str = "") -> Path:
    data = {"format": CACHE_FORMAT, "key": key, "n": op.n, "Z": 2**op.n_aux, "n_aux": op.n_aux,
            "c_mpo": float(op.c_mpo), "fit_error": float(op.fit_error),
            "gates": [_complex_entries(g) for g in op.gates]}
    return _write_json(Path(path), data)


def load_compiled(path: str | Path) -> CompiledOperator:
    data = json.loads(Path(path).read_text())
    if data.get("format") != CACHE_FORMAT:
        raise InvalidInput(f"{path}: not a compiled-operator file")
    gates = tuple(_from_entries(g) for g in data["gates"])
    if len(gates) != data["n"] or 2 ** data["n_aux"] != data["Z"]:
        raise InvalidInput(f"{path}: inconsistent header")
    return CompiledOperator(gates, data["n_aux"], data["c_mpo"], data["fit_error"],
                            cores_from_gates(gates, data["n_aux"]))


class OperatorCache:
    """Directory of compiled operators keyed by target content hash and ``Z``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, target: MPO, Z: int) -> Path:
        return self.root / f"{mpo_hash(target)[:32]}_Z{Z}.json"

    def get(self, target: MPO, Z: int, tol: float) -> CompiledOperator | None:
        p = self.path(target, Z)
        if not p.exists():
            return None
        op = load_compiled(p)
        if op.n != target.n or not op.fit_error <= tol:
            return None
        return op

    def put(self, target: MPO, Z: int, op: CompiledOperator) -> Path:
        return save_compiled(op, self.path(target, Z), key=mpo_hash(target))


# ---------------------------------------------------------------------------
# results


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def append_jsonl(path: str | Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(jsonable(record), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_json(path: str | Path, data: dict) -> Path:
    return _write_json(Path(path), jsonable(data))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_path(root: str | Path, step: int) -> Path:
    return Path(root) / "checkpoints" / f"step_{step:06d}.json"


def save_checkpoint(root: str | Path, state) -> Path:
    """Write ``theta``, ``theta0``, ``t`` and metrics of a :class:`~tpqc.solver.SolverState`."""
    data = {"format": CHECKPOINT_FORMAT, "n": state.n, "layers": state.layers, "entangler": state.entangler,
            "t": state.t, "step": state.step, "theta0": state.theta0,
            "theta": {k: v for k, v in state.theta.items()}, "metrics": state.metrics}
    return _write_json(checkpoint_path(root, state.step), jsonable(data))


def load_checkpoint(path: str | Path):
    from .solver import SolverState

    data = json.loads(Path(path).read_text())
    if data.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInput(f"{path}: not a checkpoint")
    theta = {k: np.asarray(v, dtype=float) for k, v in data["theta"].items()}
    return SolverState(theta, {k: float(v) for k, v in data["theta0"].items()}, data["n"], data["layers"],
                       data["entangler"], float(data["t"]), int(data["step"]), data.get("metrics", {}))


def latest_checkpoint(root: str | Path) -> Path | None:
    files = sorted((Path(root) / "checkpoints").glob("step_*.json"))
    return files[-1] if files else None
