"""Binary snapshots of the GMM bank, target state and full checkpoints.

Layout (little-endian): 4-byte magic, version u32, JSON header length u32,
UTF-8 JSON header, then every array's raw bytes in header order. The header
lists ``name``, ``dtype`` and ``shape`` per array plus free-form metadata.
Array payloads are f64 (int64/bool for counters and masks).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .gmm_density import FifoQueue, GmmBank
from .target_adapt import TargetState

BANK_MAGIC = b"GGMB"
TARGET_MAGIC = b"GGMT"
CHECKPOINT_MAGIC = b"GGMK"
VERSION = 1
_PRE = struct.Struct("<4sII")


def write_arrays(path, magic: bytes, arrays: Dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<", "=") else a.dtype
        a = np.ascontiguousarray(a, dtype=dt.newbyteorder("<") if dt.kind != "b" else dt)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PRE.pack(magic, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_arrays(path, magic: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    got, version, hlen = _PRE.unpack_from(data)
    if got != magic:
        raise ValueError(f"expected magic {magic!r}, found {got!r}")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    off = _PRE.size
    header = json.loads(data[off: off + hlen])
    off += hlen
    out = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) * dt.itemsize
        out[e["name"]] = np.frombuffer(data[off: off + n], dtype=dt).reshape(e["shape"]).copy()
        off += n
    return out, header["meta"]


def _queue_arrays(prefix, queues):
    arrays, meta = {}, []
    for c, q in enumerate(queues):
        arrays[f"{prefix}queue{c}"] = q.contents()
        meta.append({"capacity": q.capacity})
    return arrays, meta


def _queues_from(prefix, arrays, meta, dim):
    qs = []
    for c, m in enumerate(meta):
        q = FifoQueue(m["capacity"], dim)
        q.push(arrays[f"{prefix}queue{c}"])
        qs.append(q)
    return qs


def bank_payload(bank: GmmBank, prefix: str = ""):
    arrays = {
        f"{prefix}weights": bank.weights,
        f"{prefix}means": bank.means,
        f"{prefix}variances": bank.variances,
        f"{prefix}initialized": bank.initialized,
        f"{prefix}starved": bank.starved,
    }
    qa, qm = _queue_arrays(prefix, bank.queues)
    arrays.update(qa)
    meta = {"C": bank.C, "M": bank.M, "D": bank.D, "var_floor": bank.var_floor,
            "queues": qm, "rng": bank.rng.bit_generator.state}
    return arrays, meta


def bank_from_payload(arrays, meta, prefix: str = "") -> GmmBank:
    cap = meta["queues"][0]["capacity"] if meta["queues"] else 1
    bank = GmmBank(meta["C"], meta["M"], meta["D"], cap, meta["var_floor"])
    bank.weights = arrays[f"{prefix}weights"]
    bank.means = arrays[f"{prefix}means"]
    bank.variances = arrays[f"{prefix}variances"]
    bank.initialized = arrays[f"{prefix}initialized"]
    bank.starved = arrays[f"{prefix}starved"]
    bank.queues = _queues_from(prefix, arrays, meta["queues"], meta["D"])
    bank.rng.bit_generator.state = meta["rng"]
    return bank


def state_payload(state: TargetState, prefix: str = ""):
    arrays = {
        f"{prefix}prototypes": state.prototypes,
        f"{prefix}proto_ready": state.proto_ready,
        f"{prefix}delta_target": state.delta_target,
        f"{prefix}delta_source": state.delta_source,
    }
    qa, qm = _queue_arrays(prefix, state.queues)
    arrays.update(qa)
    return arrays, {"C": state.C, "D": state.D, "prior_floor": state.prior_floor, "queues": qm}


def state_from_payload(arrays, meta, prefix: str = "") -> TargetState:
    cap = meta["queues"][0]["capacity"] if meta["queues"] else 1
    st = TargetState(meta["C"], meta["D"], cap, meta["prior_floor"])
    st.prototypes = arrays[f"{prefix}prototypes"]
    st.proto_ready = arrays[f"{prefix}proto_ready"]
    st.delta_target = arrays[f"{prefix}delta_target"]
    st.delta_source = arrays[f"{prefix}delta_source"]
    st.queues = _queues_from(prefix, arrays, meta["queues"], meta["D"])
    return st


def save_bank(path, bank: GmmBank) -> None:
    arrays, meta = bank_payload(bank)
    write_arrays(path, BANK_MAGIC, arrays, meta)


def load_bank(path) -> GmmBank:
    return bank_from_payload(*read_arrays(path, BANK_MAGIC))


def save_target_state(path, state: TargetState) -> None:
    arrays, meta = state_payload(state)
    write_arrays(path, TARGET_MAGIC, arrays, meta)


def load_target_state(path) -> TargetState:
    return state_from_payload(*read_arrays(path, TARGET_MAGIC))


def save_checkpoint(path, pair, bank: GmmBank, state: TargetState, rng_state: dict,
                    config: dict, iteration: int) -> None:
    arrays = {f"student.{k}": v for k, v in pair.student.items()}
    arrays.update({f"teacher.{k}": v for k, v in pair.teacher.items()})
    ba, bm = bank_payload(bank, "bank.")
    sa, sm = state_payload(state, "target.")
    arrays.update(ba)
    arrays.update(sa)
    meta = {"bank": bm, "target": sm, "rng": rng_state, "config": config,
            "iteration": iteration, "params": sorted(pair.student)}
    write_arrays(path, CHECKPOINT_MAGIC, arrays, meta)


def load_checkpoint(path) -> dict:
    from .model import TeacherStudent

    arrays, meta = read_arrays(path, CHECKPOINT_MAGIC)
    student = {k: arrays[f"student.{k}"] for k in meta["params"]}
    teacher = {k: arrays[f"teacher.{k}"] for k in meta["params"]}
    return {
        "pair": TeacherStudent(student, teacher),
        "bank": bank_from_payload(arrays, meta["bank"], "bank."),
        "target": state_from_payload(arrays, meta["target"], "target."),
        "rng": meta["rng"],
        "config": meta["config"],
        "iteration": meta["iteration"],
    }
