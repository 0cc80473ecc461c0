"""Logical-time simulation of the daisy-chained master/LLC bus.

The master emits one frame every 2 ms. The frame runs down the chain
(master -> LLC 1 -> ... -> LLC 6) and back up the same wire, so every node
sees it twice: setpoints are read and feedback swapped in on the way down,
HALT flags raised downstream are seen by upstream nodes on the way back.
A frame dropped at a hop reaches no node past that hop and never returns.
Each LLC runs its own 1 ms loop; ticks apply whatever frames have arrived
by then. Everything is driven by one seeded RNG, so identical topology,
faults and seed give an identical event log.
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .joint_control import HaltCode, HaltReason, ImpedanceSetpoint, LlcFeedback

MASTER_PERIOD = 0.002
LLC_PERIOD = 0.001
MASTER = "master"


@dataclass(frozen=True)
class BusTopology:
    llcs: tuple = ("l_hip", "l_thigh", "l_ankle", "r_hip", "r_thigh", "r_ankle")
    hop_latency: float = 20e-6      # s, per hop and direction
    jitter_std: float = 0.0         # s, half-normal extra delay per hop
    drop_prob: float = 0.0          # per hop and traversal

    def __post_init__(self):
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError("drop probability must lie in [0, 1)")
        if self.hop_latency < 0 or self.jitter_std < 0:
            raise ValueError("latencies must be >= 0")
        if len(set(self.llcs)) != len(self.llcs) or not self.llcs:
            raise ValueError("LLC names must be unique and non-empty")


@dataclass(frozen=True)
class BusConfig:
    desync_threshold: int = 1
    halt_after_miss: int = 3
    deadline_misses_to_halt: int = 5
    master_halt_after_lost: int = 3


@dataclass(frozen=True)
class Fault:
    """Scheduled fault. ``kind``: ``drop`` (hop ``hop`` drops with ``value`` probability),
    ``overrun`` (LLC task costs scaled by ``value``), ``halt`` (``llc`` raises an Operator
    HALT; ``llc='master'`` for the master)."""

    kind: str
    start: float
    end: float = float("inf")
    llc: str | None = None
    hop: int | None = None     # 0: master -> first LLC, i: LLC i -> LLC i+1 (1-based LLC count)
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("drop", "overrun", "halt"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.end < self.start:
            raise ValueError("fault ends before it starts")
        if self.kind == "drop" and (self.hop is None or not 0.0 <= self.value <= 1.0):
            raise ValueError("drop faults need a hop and a probability in [0, 1]")

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


class SyncState(enum.Enum):
    Synced = "Synced"
    Desynced = "Desynced"
    Halted = "Halted"


@dataclass
class SyncStatus:
    last_mpid: int | None = None
    misses: int = 0
    state: SyncState = SyncState.Synced


def mpid_check(status: SyncStatus, mpid: int | None, config: BusConfig = BusConfig(),
               llc: str = "", time: float = 0.0) -> tuple[SyncStatus, HaltReason | None]:
    """Update the sync status with the frame seen this cycle (``None``: no frame arrived)."""
    if status.state is SyncState.Halted:
        if mpid is not None:
            status.last_mpid = mpid
        return status, None
    if mpid is None:
        status.misses += 1
        if status.misses >= config.desync_threshold:
            status.state = SyncState.Desynced
        if status.misses >= config.halt_after_miss:
            return status, HaltReason(HaltCode.CommTimeout, llc,
                                      f"{status.misses} consecutive master cycles without a frame", time)
        return status, None
    in_order = status.last_mpid is None or mpid == status.last_mpid + 1
    status.last_mpid = mpid
    status.misses = 0
    status.state = SyncState.Synced if in_order else SyncState.Desynced
    return status, None


@dataclass
class DeadlineBudget:
    budget: float = 1e-3
    # (mean, std) seconds per task of the 1 ms LLC loop
    costs: dict = field(default_factory=lambda: {
        "sense": (1.5e-4, 1e-5), "condition": (1.0e-4, 1e-5),
        "control": (2.5e-4, 2e-5), "communicate": (2.0e-4, 2e-5)})
    misses_to_halt: int = 5
    consecutive: int = 0
    total_misses: int = 0

    def __post_init__(self):
        if self.budget <= 0:
            raise ValueError("budget must be > 0")

    def sample(self, rng: np.random.Generator, scale: float = 1.0) -> dict:
        return {k: max(0.0, rng.normal(m, s)) * scale for k, (m, s) in self.costs.items()}


def deadline_monitor(budget: DeadlineBudget, costs, llc: str = "", time: float = 0.0):
    """Record one tick's task costs. Returns ``(missed, halt_reason_or_None)``."""
    total = sum(costs.values()) if isinstance(costs, dict) else float(np.sum(costs))
    missed = total > budget.budget
    if missed:
        budget.consecutive += 1
        budget.total_misses += 1
    else:
        budget.consecutive = 0
    if missed and budget.consecutive >= budget.misses_to_halt:
        return True, HaltReason(HaltCode.DeadlineMiss, llc,
                                f"{budget.consecutive} consecutive overruns ({total * 1e3:.3f} ms)", time)
    return missed, None


# ------------------------------------------------------------------------------------------
# frame layout (little endian)
#   header : magic 'EB' | u32 mpid | f64 timestamp | u8 n_segments | u8 halt | u8 halt_code | u8 halt_src
#   segment: 2 x (5 x f64 setpoint) | 8 x f64 feedback (pos, vel, force, foot force pairs) | 2 x i32 motor
#            | u8 halt_code
# halt_code 0 means none; halt_src 255 means the master.

_HEADER = struct.Struct("<2sIdBBBB")
_SEGMENT = struct.Struct("<10d8d2iB")
_CODES = [None] + list(HaltCode)


@dataclass
class Segment:
    setpoints: tuple = (ImpedanceSetpoint(), ImpedanceSetpoint())
    feedback: np.ndarray = field(default_factory=lambda: np.zeros(8))   # pos, vel, force, foot force (2 each)
    motor: tuple = (0, 0)
    halt: HaltCode | None = None


@dataclass
class CyclicFrame:
    mpid: int
    timestamp: float
    segments: list
    halt: HaltCode | None = None
    halt_source: int = 255

    def __post_init__(self):
        if self.mpid < 0 or self.mpid > 0xFFFFFFFF:
            raise ValueError("mpid out of range")


def encode_frame(frame: CyclicFrame) -> bytes:
    out = [_HEADER.pack(b"EB", frame.mpid, frame.timestamp, len(frame.segments),
                        int(frame.halt is not None), _CODES.index(frame.halt), frame.halt_source)]
    for s in frame.segments:
        sp = []
        for p in s.setpoints:
            sp += [p.tau_ff, p.q_des, p.qd_des, p.k_p, p.k_d]
        out.append(_SEGMENT.pack(*sp, *np.asarray(s.feedback, float), *(int(m) for m in s.motor),
                                 _CODES.index(s.halt)))
    return b"".join(out)


def decode_frame(data: bytes) -> CyclicFrame:
    magic, mpid, ts, n, has_halt, code, src = _HEADER.unpack_from(data, 0)
    if magic != b"EB":
        raise ValueError("not a bus frame")
    if len(data) != _HEADER.size + n * _SEGMENT.size:
        raise ValueError("frame length does not match its segment count")
    segs = []
    for i in range(n):
        v = _SEGMENT.unpack_from(data, _HEADER.size + i * _SEGMENT.size)
        sps = (ImpedanceSetpoint(*v[0:5]), ImpedanceSetpoint(*v[5:10]))
        segs.append(Segment(sps, np.array(v[10:18]), (v[18], v[19]), _CODES[v[20]]))
    return CyclicFrame(mpid, ts, segs, _CODES[code] if has_halt else None, src)


# ------------------------------------------------------------------------------------------


@dataclass
class BusEvent:
    time: float
    llc: str
    event: str
    detail: str = ""

    def row(self):
        return (f"{self.time:.6f}", self.llc, self.event, self.detail)


@dataclass
class Node:
    """Bus-side state of one LLC."""

    name: str
    index: int
    sync: SyncStatus = field(default_factory=SyncStatus)
    budget: DeadlineBudget = field(default_factory=DeadlineBudget)
    setpoints: tuple = (ImpedanceSetpoint(), ImpedanceSetpoint())
    feedback: LlcFeedback | None = None
    halt: HaltReason | None = None
    halt_time: float | None = None
    received: list = field(default_factory=list)   # mpids seen on the way down
    controller: object = None                      # joint_control.Llc, optional

    def latch(self, reason: HaltReason, t: float):
        if self.halt is None:
            self.halt = reason
            self.halt_time = t
            self.sync.state = SyncState.Halted
            if self.controller is not None:
                self.controller.latch(reason)


@dataclass
class Delivery:
    mpid: int
    reached: tuple         # LLC names the frame reached on the way down
    returned: bool
    arrival: dict          # LLC -> arrival time (down)
    done: float            # time the frame finished its traversal (or was lost)


class Fieldbus:
    def __init__(self, topology: BusTopology = BusTopology(), config: BusConfig = BusConfig(),
                 seed: int = 0, faults: tuple = (), budget: DeadlineBudget | None = None):
        self.topology = topology
        self.config = config
        self.faults = tuple(faults)
        self.rng = np.random.default_rng(seed)
        self.nodes = [Node(n, i, budget=DeadlineBudget(**_budget_args(budget)))
                      for i, n in enumerate(topology.llcs)]
        self.by_name = {n.name: n for n in self.nodes}
        self.mpid = 0
        self.events: list[BusEvent] = []
        self.master_halt: HaltReason | None = None
        self.lost_returns = 0
        self.feedback: dict = {}        # latest feedback returned to the master
        self._fired: set = set()
        self._queue: list = []          # (arrival, seq, node index, frame, direction)
        self._seq = 0

    # --- helpers -------------------------------------------------------------------------

    def log(self, t, llc, event, detail=""):
        self.events.append(BusEvent(t, llc, event, detail))

    def attach(self, name: str, controller):
        self.by_name[name].controller = controller

    def _drop_prob(self, hop: int, t: float) -> float:
        p = self.topology.drop_prob
        for f in self.faults:
            if f.kind == "drop" and f.hop == hop and f.active(t):
                p = max(p, f.value)
        return p

    def _hop_delay(self) -> float:
        d = self.topology.hop_latency
        if self.topology.jitter_std > 0:
            d += abs(self.rng.normal(0.0, self.topology.jitter_std))
        return d

    def raise_halt(self, llc: str, reason: HaltReason, t: float):
        if llc == MASTER:
            if self.master_halt is None:
                self.master_halt = reason
                self.log(t, MASTER, "HaltRaised", reason.code.value)
            return
        node = self.by_name[llc]
        if node.halt is None:
            self.log(t, llc, "HaltRaised", f"{reason.code.value}: {reason.detail}")
        node.latch(reason, t)

    def halted(self) -> bool:
        return self.master_halt is not None or any(n.halt for n in self.nodes)

    def all_halted(self) -> bool:
        return all(n.halt is not None for n in self.nodes)

    # --- master side ---------------------------------------------------------------------

    def master_cycle(self, t: float, setpoints: dict | None = None) -> Delivery:
        """Emit frame ``mpid`` at logical time ``t``.

        ``setpoints`` maps LLC name to a pair of :class:`ImpedanceSetpoint` (LLC joint order).
        """
        for f in self.faults:
            key = (id(f), "halt")
            if f.kind == "halt" and f.active(t) and key not in self._fired:
                self._fired.add(key)
                self.raise_halt(f.llc, HaltReason(HaltCode.Operator, f.llc, "scheduled", t), t)
        setpoints = setpoints or {}
        halt_code = self.master_halt.code if self.master_halt else None
        segs = [Segment(tuple(setpoints.get(n.name, (ImpedanceSetpoint(), ImpedanceSetpoint()))))
                for n in self.nodes]
        frame = CyclicFrame(self.mpid, t, segs, halt_code, 255 if halt_code else 0)
        # serialize once per cycle: nodes only ever see decoded bytes
        frame = decode_frame(encode_frame(frame))
        frame.halt_source = 255 if halt_code else 0

        tt = t
        reached = []
        arrival = {}
        dropped_at = None
        for i, node in enumerate(self.nodes):
            if self.rng.random() < self._drop_prob(i, t):
                dropped_at = i
                break
            tt += self._hop_delay()
            arrival[node.name] = tt
            reached.append(node.name)
            self._push(tt, i, frame, "down")
        returned = dropped_at is None
        if returned:
            # return path: the last node turns the frame around
            for i in range(len(self.nodes) - 1, -1, -1):
                tt += self._hop_delay()
                self._push(tt, i, frame, "up")
        if dropped_at is not None:
            self.log(t, self.nodes[dropped_at].name, "FrameDropped", f"mpid={self.mpid} hop={dropped_at}")

        # missing frames are judged at the end of the cycle they belonged to
        for node in self.nodes:
            if node.name not in arrival:
                st, reason = mpid_check(node.sync, None, self.config, node.name, t + MASTER_PERIOD)
                if st.state is SyncState.Desynced and st.misses == self.config.desync_threshold:
                    self.log(t + MASTER_PERIOD, node.name, "Desync", f"missed mpid={self.mpid}")
                if reason is not None:
                    self.raise_halt(node.name, reason, t + MASTER_PERIOD)

        if returned:
            self.lost_returns = 0
        else:
            self.lost_returns += 1
            if self.lost_returns >= self.config.master_halt_after_lost and self.master_halt is None:
                self.raise_halt(MASTER, HaltReason(HaltCode.CommTimeout, MASTER,
                                                   f"{self.lost_returns} frames lost", t + MASTER_PERIOD),
                                t + MASTER_PERIOD)
        self.mpid += 1
        self._return_frame = frame if returned else None
        self._frame_time = tt
        return Delivery(frame.mpid, tuple(reached), returned, arrival, tt)

    # --- LLC side ------------------------------------------------------------------------

    def _push(self, t, i, frame, direction):
        self._queue.append((t, self._seq, i, frame, direction))
        self._seq += 1

    def deliver(self, until: float):
        """Process, in arrival order, every frame passage that happened by logical time ``until``."""
        due = sorted(e for e in self._queue if e[0] <= until + 1e-12)
        self._queue = [e for e in self._queue if e[0] > until + 1e-12]
        for arr, _, i, frame, direction in due:
            node = self.nodes[i]
            seg = frame.segments[i]
            if direction == "down":
                node.received.append(frame.mpid)
                st, _ = mpid_check(node.sync, frame.mpid, self.config, node.name, arr)
                if st.state is SyncState.Desynced:
                    self.log(arr, node.name, "Desync", f"mpid gap before {frame.mpid}")
                node.setpoints = seg.setpoints
                # swap feedback and status into the frame on its way past
                fb = node.feedback
                if fb is not None:
                    ft = fb.foot_ft if fb.foot_ft is not None else np.zeros(2)
                    seg.feedback = np.r_[fb.joint_pos[:2], fb.joint_vel[:2], fb.force[:2], ft[:2]]
                    seg.motor = tuple(int(m) for m in fb.motor_enc[:2])
                if node.halt is not None:
                    seg.halt = node.halt.code
                    if frame.halt is None:
                        frame.halt, frame.halt_source = node.halt.code, node.index
            if frame.halt is not None and node.halt is None:
                src = MASTER if frame.halt_source == 255 else self.nodes[frame.halt_source].name
                node.latch(HaltReason(frame.halt, src, f"propagated ({direction})", arr), arr)
                self.log(arr, node.name, "HaltLatched", f"{frame.halt.value} from {src}")

    def collect(self, until: float):
        """Master reads the returned frame (if any) after all nodes processed it."""
        frame = getattr(self, "_return_frame", None)
        if frame is None:
            return
        self._return_frame = None
        for node, seg in zip(self.nodes, frame.segments):
            self.feedback[node.name] = seg
            if seg.halt is not None and self.master_halt is None:
                self.master_halt = HaltReason(seg.halt, node.name, "reported on bus", until)
                self.log(until, MASTER, "HaltSeen", f"{seg.halt.value} from {node.name}")

    def llc_tick(self, node: Node, t: float, cost_scale: float | None = None):
        """Deadline bookkeeping for one 1 ms LLC loop (frames are delivered by :meth:`deliver`)."""
        if cost_scale is None:
            cost_scale = 1.0
            for f in self.faults:
                if f.kind == "overrun" and f.llc == node.name and f.active(t):
                    cost_scale = f.value
        costs = node.budget.sample(self.rng, cost_scale)
        missed, reason = deadline_monitor(node.budget, costs, node.name, t)
        if missed:
            self.log(t, node.name, "DeadlineOverrun", f"{sum(costs.values()) * 1e3:.3f} ms")
        if reason is not None:
            self.raise_halt(node.name, reason, t)

    def run_cycle(self, k: int, setpoints: dict | None = None, on_tick=None, after_tick=None) -> Delivery:
        """One 2 ms master cycle: emit frame ``k``, then two 1 ms ticks on every LLC.

        ``on_tick(node, t)`` runs the LLC control law after bus bookkeeping;
        ``after_tick(t)`` runs once all LLCs finished the tick at ``t``.
        """
        t = k * MASTER_PERIOD
        d = self.master_cycle(t, setpoints)
        for sub in range(2):
            tl = t + sub * LLC_PERIOD
            self.deliver(tl)
            for node in self.nodes:
                self.llc_tick(node, tl)
                if on_tick is not None:
                    on_tick(node, tl)
            if after_tick is not None:
                after_tick(tl)
        # whatever is still in flight lands before the next frame
        self.deliver(t + MASTER_PERIOD - 1e-9)
        self.collect(t + MASTER_PERIOD)
        return d

    def write_events(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("time", "llc", "event", "detail"))
            for e in self.events:
                w.writerow(e.row())


def _budget_args(b: DeadlineBudget | None) -> dict:
    if b is None:
        return {}
    return {"budget": b.budget, "costs": dict(b.costs), "misses_to_halt": b.misses_to_halt}


@dataclass
class PropagationReport:
    raise_time: float
    latch_times: dict
    drops: int              # frames lost between the raise and the first complete traversal
    bound: float            # completion time of that first complete traversal
    sent: float = float("inf")   # emission time of that frame

    @property
    def worst_delay(self) -> float:
        return max(v - self.raise_time for v in self.latch_times.values())

    @property
    def within_bound(self) -> bool:
        return all(v is not None and v <= self.bound + 1e-12 for v in self.latch_times.values())


def halt_propagation(bus: Fieldbus, source: str, raise_time: float, max_cycles: int = 50) -> PropagationReport:
    """Raise an Operator HALT at ``source`` (an LLC or ``'master'``) at ``raise_time`` and run master
    cycles until every LLC has latched.

    Cycles before ``raise_time`` run normally. The report's ``bound`` is when the first frame emitted
    after the raise completed its round trip; every latch must happen by then, so the delay is one
    master cycle plus chain latency, extended by one cycle per dropped frame.
    """
    k = 0
    raised = False
    drops = 0
    bound = None
    sent = float("inf")
    while k < max_cycles + int(raise_time / MASTER_PERIOD) + 1:
        t = k * MASTER_PERIOD
        if not raised and t >= raise_time:
            bus.raise_halt(source, HaltReason(HaltCode.Operator, source, "test", raise_time), raise_time)
            raised = True
        d = bus.run_cycle(k)
        k += 1
        if raised and bound is None:
            if d.returned:
                bound = d.done
                sent = t
            else:
                drops += 1
        if raised and bound is not None and bus.all_halted():
            break
    return PropagationReport(raise_time, {n.name: n.halt_time for n in bus.nodes}, drops,
                             bound if bound is not None else float("inf"), sent)
