"""Coordinator/worker simulation, the binary wire format, and a ledger
that audits how many scalars cross the worker boundary.

Wire layout (all little-endian):

    header  magic b"VCMM" | version u16 | kind u8 | reserved u8 |
            pq u32 | q u32 | n_k u64 | partition_id u32 | Q u32 | extra u32
    payload float64 * length(kind, pq, q, extra)
    trailer CRC-32 of the payload bytes, u32

Payload field order per kind (d = pq + q):

    SUFFSTATS        a, b, tril(C), d, B row-major, tril(H)
    THETA_BROADCAST  beta, alpha                                 (d)
    SCORE            unscaled penalty-free local score           (d)
    SCALAR_RSS       residual sum of squares                     (1)
    PIVOT_HESSIAN    pilot beta, alpha; sigma2; covariance parameters
                     (``extra`` of them); covariance ridge; pilot
                     iterations, converged, gradient norm, last step;
                     tril of the Gram matrix [[C, B], [B', H]]

"tril" is the row-major lower triangle, diagonal included.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ModelParams, Partition, VCMMError
from .estimator import (
    FitConfig,
    FitResult,
    _onestep_step,
    block_fit,
    finish_onestep,
    fit_summaries,
    pivot_hessian,
)
from .spline import TensorSplineBasis
from .suffstats import SuffStats, compute_local

MAGIC = b"VCMM"
VERSION = 1
HEADER = struct.Struct("<4sHBBIIQIII")
TRAILER = struct.Struct("<I")
PILOT_META = 4
DEFAULT_BUDGET_C = 8.0

PARTITION_MAGIC = b"VCMP"
PARTITION_VERSION = 1
PARTITION_HEADER = struct.Struct("<4sHHQIIII")


class WireFormatError(VCMMError):
    """Bad magic or version, checksum mismatch, or truncated message."""


class WorkerFailureError(VCMMError):
    def __init__(self, partition_id: int, reason: str = "missing partition"):
        super().__init__(f"worker {partition_id} failed: {reason}")
        self.partition_id = partition_id


class MessageKind(IntEnum):
    SUFFSTATS = 1
    THETA_BROADCAST = 2
    SCORE = 3
    SCALAR_RSS = 4
    PIVOT_HESSIAN = 5


DOWNSTREAM = frozenset({MessageKind.THETA_BROADCAST})


def _tri(n: int) -> int:
    return n * (n + 1) // 2


def payload_length(kind: MessageKind, pq: int, q: int, extra: int = 0) -> int:
    """Number of float64 scalars a message of this kind and shape carries."""
    d = pq + q
    if kind == MessageKind.SUFFSTATS:
        return 1 + pq + _tri(pq) + q + pq * q + _tri(q)
    if kind in (MessageKind.THETA_BROADCAST, MessageKind.SCORE):
        return d
    if kind == MessageKind.SCALAR_RSS:
        return 1
    if kind == MessageKind.PIVOT_HESSIAN:
        return d + 1 + extra + 1 + PILOT_META + _tri(d)
    raise WireFormatError(f"unknown message kind {kind!r}")


@dataclass(frozen=True, eq=False)
class WireMessage:
    kind: MessageKind
    pq: int
    q: int
    n_k: int
    partition_id: int
    payload: np.ndarray
    Q: int = 1
    extra: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        payload = np.ascontiguousarray(self.payload, dtype="<f8").reshape(-1)
        expected = payload_length(self.kind, self.pq, self.q, self.extra)
        if payload.size != expected:
            raise WireFormatError(f"{self.kind.name} payload has {payload.size} scalars, expected {expected}")
        payload.setflags(write=False)
        object.__setattr__(self, "payload", payload)

    @property
    def n_scalars(self) -> int:
        return int(self.payload.size)

    @property
    def n_bytes(self) -> int:
        return HEADER.size + 8 * self.n_scalars + TRAILER.size

    def describe(self) -> dict:
        return {
            "kind": self.kind.name,
            "version": VERSION,
            "pq": self.pq,
            "q": self.q,
            "Q": self.Q,
            "n_k": self.n_k,
            "partition_id": self.partition_id,
            "extra": self.extra,
            "n_scalars": self.n_scalars,
            "n_bytes": self.n_bytes,
            "crc32": zlib.crc32(self.payload.tobytes()),
        }


def serialize(msg: WireMessage) -> bytes:
    body = msg.payload.tobytes()
    head = HEADER.pack(MAGIC, VERSION, int(msg.kind), 0, msg.pq, msg.q, msg.n_k, msg.partition_id, msg.Q, msg.extra)
    return head + body + TRAILER.pack(zlib.crc32(body))


def deserialize(data: bytes) -> WireMessage:
    if len(data) < HEADER.size + TRAILER.size:
        raise WireFormatError(f"message truncated: {len(data)} bytes")
    magic, version, kind, _, pq, q, n_k, pid, Q, extra = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireFormatError(f"unsupported format version {version}")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise WireFormatError(f"unknown message kind {kind}") from None
    n = payload_length(kind, pq, q, extra)
    end = HEADER.size + 8 * n
    if len(data) != end + TRAILER.size:
        raise WireFormatError(f"{kind.name} message should be {end + TRAILER.size} bytes, got {len(data)}")
    body = data[HEADER.size : end]
    (crc,) = TRAILER.unpack_from(data, end)
    if zlib.crc32(body) != crc:
        raise WireFormatError("checksum mismatch")
    payload = np.frombuffer(body, dtype="<f8").astype(float)
    return WireMessage(kind, pq, q, n_k, pid, payload, Q, extra)


def save_message(msg: WireMessage, path) -> None:
    Path(path).write_bytes(serialize(msg))


def load_message(path) -> WireMessage:
    return deserialize(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Payload packing
# ---------------------------------------------------------------------------


def _tril(A: np.ndarray) -> np.ndarray:
    return A[np.tril_indices(A.shape[0])]


def _untril(v: np.ndarray, n: int) -> np.ndarray:
    A = np.zeros((n, n))
    A[np.tril_indices(n)] = v
    return A + np.tril(A, -1).T


def suffstats_message(s: SuffStats, partition_id: int) -> WireMessage:
    payload = np.concatenate([[s.a], s.b, _tril(s.C), s.d, s.B.reshape(-1), _tril(s.H)])
    return WireMessage(MessageKind.SUFFSTATS, s.pq, s.q, s.n, partition_id, payload, s.Q)


def message_suffstats(msg: WireMessage) -> SuffStats:
    if msg.kind != MessageKind.SUFFSTATS:
        raise WireFormatError(f"expected SUFFSTATS, got {msg.kind.name}")
    pq, q, v = msg.pq, msg.q, msg.payload
    cuts = np.cumsum([1, pq, _tri(pq), q, pq * q])
    a, b, c, d, B, h = np.split(v, cuts)
    return SuffStats(float(a[0]), b, _untril(c, pq), d, B.reshape(pq, q), _untril(h, q), msg.n_k, msg.Q)


def pivot_message(pivot: SuffStats, pilot: FitResult, partition_id: int) -> WireMessage:
    th = pilot.theta
    cov = th.sigma_alpha
    params = cov.param_vector()
    meta = [pilot.iterations, float(pilot.converged), pilot.gradient_norm, pilot.last_step]
    payload = np.concatenate([th.theta, [th.sigma2_eps], params, [cov.ridge], meta, _tril(pivot.gram())])
    return WireMessage(MessageKind.PIVOT_HESSIAN, pivot.pq, pivot.q, pivot.n, partition_id, payload, pivot.Q, params.size)


def message_pivot(msg: WireMessage, init: ModelParams) -> tuple[SuffStats, FitResult]:
    """Rebuild the pivot's Gram blocks (as summaries with zero a, b, d) and its pilot fit."""
    if msg.kind != MessageKind.PIVOT_HESSIAN:
        raise WireFormatError(f"expected PIVOT_HESSIAN, got {msg.kind.name}")
    pq, q, k, v = msg.pq, msg.q, msg.extra, msg.payload
    d = pq + q
    theta, s2, params, ridge, meta, gram = np.split(v, np.cumsum([d, 1, k, 1, PILOT_META]))
    G = _untril(gram, d)
    blocks = SuffStats(0.0, np.zeros(pq), G[:pq, :pq], np.zeros(q), G[:pq, pq:], G[pq:, pq:], msg.n_k, msg.Q)
    template = init.sigma_alpha
    cov = template.with_params(params)
    if cov.ridge != ridge[0]:
        cov = type(cov)(cov.structure, cov.values, cov.q, cov.block_sizes, float(ridge[0]))
    pilot_theta = ModelParams(theta[:pq], theta[pq:], float(s2[0]), cov, init.penalty)
    pilot = FitResult(
        theta=pilot_theta,
        iterations=int(meta[0]),
        converged=bool(meta[1]),
        objective_trace=np.zeros(0),
        gradient_norm=float(meta[2]),
        method="ss",
        last_step=float(meta[3]),
    )
    return blocks, pilot


# ---------------------------------------------------------------------------
# Communication ledger
# ---------------------------------------------------------------------------


@dataclass
class CommLedger:
    """Scalars and bytes per node and message kind.

    Upstream traffic (worker to coordinator) counts toward the budget
    c * d * k; downstream broadcasts are logged separately.  The pivot's
    Hessian message is charged but exempt from the per-node check.
    """

    mode: str
    d: int
    k: int
    pivot: int | None = None
    upstream: dict = field(default_factory=dict)
    downstream: dict = field(default_factory=dict)
    n_bytes: int = 0
    n_messages: int = 0

    def log(self, msg: WireMessage, node: int) -> None:
        book = self.downstream if msg.kind in DOWNSTREAM else self.upstream
        per = book.setdefault(node, {})
        per[msg.kind.name] = per.get(msg.kind.name, 0) + msg.n_scalars
        self.n_bytes += msg.n_bytes
        self.n_messages += 1

    def node_upstream(self, node: int, budgeted: bool = False) -> int:
        per = self.upstream.get(node, {})
        return sum(v for kind, v in per.items() if not (budgeted and kind == MessageKind.PIVOT_HESSIAN.name))

    @property
    def total_upstream(self) -> int:
        return sum(self.node_upstream(n) for n in self.upstream)

    @property
    def total_downstream(self) -> int:
        return sum(sum(per.values()) for per in self.downstream.values())

    @property
    def total_inclusive(self) -> int:
        return self.total_upstream + self.total_downstream

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "d": self.d,
            "k": self.k,
            "pivot": self.pivot,
            "upstream": {str(n): dict(v) for n, v in sorted(self.upstream.items())},
            "downstream": {str(n): dict(v) for n, v in sorted(self.downstream.items())},
            "total_upstream": self.total_upstream,
            "total_downstream": self.total_downstream,
            "total_inclusive": self.total_inclusive,
            "n_bytes": self.n_bytes,
            "n_messages": self.n_messages,
        }


@dataclass(frozen=True)
class BudgetReport:
    c: float
    d: int
    k: int
    node_limit: float
    total_limit: float
    nodes: dict
    total_exclusive: int
    total_inclusive: int
    passed: bool
    total_passed: bool
    margin: float

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "d": self.d,
            "k": self.k,
            "node_limit": self.node_limit,
            "total_limit": self.total_limit,
            "nodes": {str(n): v for n, v in self.nodes.items()},
            "total_exclusive": self.total_exclusive,
            "total_inclusive": self.total_inclusive,
            "passed": self.passed,
            "total_passed": self.total_passed,
            "margin": self.margin,
        }


def budget_check(ledger: CommLedger, c: float = DEFAULT_BUDGET_C) -> BudgetReport:
    """Compare each node's budgeted upstream scalars with c * d, and the sum with c * d * k.

    ``margin`` is the smallest slack (limit minus usage) over nodes and the
    total; negative means over budget.
    """
    node_limit = c * ledger.d
    total_limit = c * ledger.d * ledger.k
    nodes = {}
    margins = []
    for n in sorted(ledger.upstream):
        used = ledger.node_upstream(n, budgeted=True)
        nodes[n] = {"scalars": used, "passed": used <= node_limit, "margin": node_limit - used}
        margins.append(node_limit - used)
    excl = sum(v["scalars"] for v in nodes.values())
    margins.append(total_limit - excl)
    total_passed = excl <= total_limit
    return BudgetReport(
        c=c,
        d=ledger.d,
        k=ledger.k,
        node_limit=node_limit,
        total_limit=total_limit,
        nodes=nodes,
        total_exclusive=excl,
        total_inclusive=ledger.total_inclusive,
        passed=total_passed and all(v["passed"] for v in nodes.values()),
        total_passed=total_passed,
        margin=float(min(margins)),
    )


# ---------------------------------------------------------------------------
# Simulated protocol
# ---------------------------------------------------------------------------

MODES = ("summary", "onestep")


class _Channel:
    """Every message crosses the boundary as bytes and is logged."""

    def __init__(self, ledger: CommLedger, record_dir=None):
        self.ledger = ledger
        self.record = Path(record_dir) if record_dir is not None else None
        self.seq = 0
        if self.record is not None:
            self.record.mkdir(parents=True, exist_ok=True)

    def send(self, msg: WireMessage, node: int) -> WireMessage:
        data = serialize(msg)
        self.ledger.log(msg, node)
        if self.record is not None:
            direction = "down" if msg.kind in DOWNSTREAM else "up"
            (self.record / f"{self.seq:04d}_{direction}_{node:03d}_{msg.kind.name.lower()}.vcm").write_bytes(data)
        self.seq += 1
        return deserialize(data)


def _local_stats(partitions, basis: TensorSplineBasis) -> list[SuffStats]:
    stats = []
    for i, part in enumerate(partitions):
        if part is None:
            raise WorkerFailureError(i)
        if isinstance(part, SuffStats):
            stats.append(part)
        else:
            stats.append(compute_local(part, basis))
    return stats


def run_protocol(
    partitions: Sequence[Partition | SuffStats | None],
    basis: TensorSplineBasis | None,
    init: ModelParams,
    cfg: FitConfig,
    mode: str = "summary",
    record_dir=None,
) -> tuple[FitResult, CommLedger]:
    """Fit through simulated workers that talk to the coordinator only in wire messages.

    ``summary``: every worker sends its SUFFSTATS; the coordinator fits
    with any summary method.  ``onestep``: the pivot sends its pilot and
    Gram blocks (PIVOT_HESSIAN); the coordinator broadcasts theta0, every
    worker returns its SCORE; the coordinator broadcasts theta1, every
    worker returns SCALAR_RSS.  A ``None`` entry is a failed worker.
    """
    if mode not in MODES:
        raise VCMMError(f"unknown protocol mode {mode!r}; choose from {MODES}")
    t0 = time.perf_counter()
    stats = _local_stats(partitions, basis)
    if not stats:
        raise VCMMError("run_protocol needs at least one partition")
    pq, q = stats[0].pq, stats[0].q
    ids = [getattr(p, "partition_id", i) for i, p in enumerate(partitions)]
    ledger = CommLedger(mode, pq + q, len(stats))
    chan = _Channel(ledger, record_dir)

    if mode == "summary":
        received = [message_suffstats(chan.send(suffstats_message(s, pid), i)) for i, (s, pid) in enumerate(zip(stats, ids))]
        result = fit_summaries(received, init, cfg)
    else:
        if cfg.method != "onestep":
            raise VCMMError(f"onestep protocol mode needs method 'onestep', got {cfg.method!r}")
        result = _onestep_protocol(stats, ids, init, cfg, chan)
    result.elapsed = time.perf_counter() - t0
    result.extras["protocol"] = mode
    return result, ledger


def _onestep_protocol(stats, ids, init: ModelParams, cfg: FitConfig, chan: _Channel) -> FitResult:
    k = len(stats)
    if not 0 <= cfg.pivot_node < k:
        raise VCMMError(f"pivot node {cfg.pivot_node} does not exist among {k} nodes")
    piv = cfg.pivot_node
    chan.ledger.pivot = piv
    if stats[piv].n == 0:
        raise VCMMError(f"pivot node {piv} is empty")
    pq, q = stats[0].pq, stats[0].q

    # pivot worker: pilot fit on its own summaries
    pilot_cfg = replace(cfg, method="ss", tol_grad=min(cfg.tol_grad, 1e-8))
    local_pilot = block_fit(stats[piv], init, pilot_cfg)
    gram, pilot = message_pivot(chan.send(pivot_message(stats[piv], local_pilot, ids[piv]), piv), init)
    theta0 = pilot.theta

    # round 1: broadcast theta0, collect scores
    scores, ns = [], []
    for i, s in enumerate(stats):
        bc = chan.send(WireMessage(MessageKind.THETA_BROADCAST, pq, q, 0, ids[i], theta0.theta, s.Q), i)
        beta, alpha = bc.payload[:pq], bc.payload[pq:]
        reply = chan.send(WireMessage(MessageKind.SCORE, pq, q, s.n, ids[i], s.local_score(beta, alpha), s.Q), i)
        scores.append(reply.payload)
        ns.append(reply.n_k)
    score_sum = np.sum(scores, axis=0)
    N = sum(ns)
    K1 = pivot_hessian(gram, theta0, scale=N / gram.n)
    theta1 = _onestep_step(theta0, score_sum, K1, gram)

    # round 2: broadcast theta1, collect residual sums
    rss_parts = []
    for i, s in enumerate(stats):
        bc = chan.send(WireMessage(MessageKind.THETA_BROADCAST, pq, q, 0, ids[i], theta1.theta, s.Q), i)
        beta, alpha = bc.payload[:pq], bc.payload[pq:]
        reply = chan.send(WireMessage(MessageKind.SCALAR_RSS, pq, q, s.n, ids[i], [s.residual_ss(beta, alpha)], s.Q), i)
        rss_parts.append(reply.payload[0])
    rss = float(np.sum(rss_parts))
    return finish_onestep(theta0, theta1, rss, N, cfg, pilot)


# ---------------------------------------------------------------------------
# Binary partition files
# ---------------------------------------------------------------------------


def write_partition_binary(part: Partition, path) -> None:
    """Header, then y, X, H, Z as row-major little-endian float64, then CRC-32."""
    body = np.concatenate([part.y, part.X.reshape(-1), part.H.reshape(-1), part.Z.reshape(-1)]).astype("<f8").tobytes()
    head = PARTITION_HEADER.pack(PARTITION_MAGIC, PARTITION_VERSION, 0, part.n, part.p, part.M, part.q, part.partition_id)
    Path(path).write_bytes(head + body + TRAILER.pack(zlib.crc32(body)))


def read_partition_binary(path) -> Partition:
    data = Path(path).read_bytes()
    if len(data) < PARTITION_HEADER.size + TRAILER.size:
        raise WireFormatError(f"{path}: truncated partition file")
    magic, version, _, n, p, M, q, pid = PARTITION_HEADER.unpack_from(data)
    if magic != PARTITION_MAGIC:
        raise WireFormatError(f"{path}: bad magic {magic!r}")
    if version != PARTITION_VERSION:
        raise WireFormatError(f"{path}: unsupported partition format version {version}")
    count = n * (1 + p + M + q)
    end = PARTITION_HEADER.size + 8 * count
    if len(data) != end + TRAILER.size:
        raise WireFormatError(f"{path}: expected {end + TRAILER.size} bytes, got {len(data)}")
    body = data[PARTITION_HEADER.size : end]
    if zlib.crc32(body) != TRAILER.unpack_from(data, end)[0]:
        raise WireFormatError(f"{path}: checksum mismatch")
    v = np.frombuffer(body, dtype="<f8").astype(float)
    y, X, H, Z = np.split(v, np.cumsum([n, n * p, n * M]))
    return Partition(y, X.reshape(n, p), H.reshape(n, M), Z.reshape(n, q), pid)
