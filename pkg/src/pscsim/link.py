"""Register-link protocol: bit-exact framing and the simulated 5 MHz wire.

Frame layout (normative for this simulator, big-endian throughout):

    byte 0   prio(1) | opcode(3) | addr[7:4]
    byte 1   addr[3:0] | count[11:8]
    byte 2   count[7:0]
    byte 3   CRC-8 (poly 0x07, init 0x00) over bytes 0..2
    then, only when count > 0:
    4*count payload bytes (count words, 32 bit big-endian)
    1 byte   CRC-8 over the payload bytes

so a frame is 32 + (count > 0 ? 32*count + 8 : 0) bits.  count always
equals the number of payload words carried: a READ request is a bare
header (count=0) and a BLOCK_READ request carries one word holding the
number of registers wanted.

Example:
    >>> f = Frame(prio=True, opcode=OP_WRITE, addr=0x01, count=1,
    ...           payload=(0x40000000,))
    >>> encode_frame(f).hex()
    '901001f9400000009b'
    >>> decode_frame(bytes.fromhex('901001f9400000009b')) == f
    True

Timing model: one bidirectional 5 MHz link per PS (200 ns/bit), slave
service time 4 us, so a single-register write round-trips in
14.4 + 4 + 6.4 = 24.8 us.  Priority transactions do not wait behind
queued traffic: they are injected into the wire at the next byte
boundary (the in-flight normal frame is suspended and resumed after),
and the slave serves them on a dedicated path, which bounds the
worst-case priority round trip at 28 us even on a saturated link.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

# opcodes (3 bits)
OP_READ = 0
OP_WRITE = 1
OP_BLOCK_WRITE = 2
OP_BLOCK_READ = 3
OP_ACK = 6
OP_NAK = 7
VALID_OPCODES = {OP_READ, OP_WRITE, OP_BLOCK_WRITE, OP_BLOCK_READ, OP_ACK, OP_NAK}

MAX_COUNT = 256  # register-file bound

# NAK reason codes (first payload word of a NAK frame)
NAK_READ_ONLY = 1
NAK_LOCAL = 2
NAK_INVALID_VALUE = 3
NAK_UNMAPPED = 4
NAK_RANGE = 5
NAK_NOT_ANALOG = 6
NAK_BAD_REQUEST = 7
NAK_NAMES = {
    NAK_READ_ONLY: "read_only",
    NAK_LOCAL: "local",
    NAK_INVALID_VALUE: "invalid_value",
    NAK_UNMAPPED: "unmapped",
    NAK_RANGE: "range",
    NAK_NOT_ANALOG: "not_analog",
    NAK_BAD_REQUEST: "bad_request",
}

DEFAULT_BIT_NS = 200  # 5 MHz
DEFAULT_T_PROC_NS = 4000


def _make_crc8_table(poly=0x07):
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = ((c << 1) ^ poly) & 0xFF if c & 0x80 else (c << 1) & 0xFF
        table.append(c)
    return table


_CRC8_TABLE = _make_crc8_table()


def crc8(data: bytes, init: int = 0x00) -> int:
    """CRC-8, polynomial 0x07, no reflection, no final xor.

    >>> hex(crc8(b'123456789'))
    '0xf4'
    """
    c = init
    for b in data:
        c = _CRC8_TABLE[c ^ b]
    return c


class FrameError(ValueError):
    """Decode/encode failure; .kind is one of bad_length, bad_header,
    bad_opcode, bad_count, bad_payload, count_overflow."""

    def __init__(self, kind, msg=""):
        super().__init__("%s%s" % (kind, ": " + msg if msg else ""))
        self.kind = kind


@dataclass(frozen=True)
class Frame:
    prio: bool
    opcode: int
    addr: int
    count: int
    payload: tuple = ()

    def __post_init__(self):
        if self.opcode not in VALID_OPCODES:
            raise FrameError("bad_opcode", "opcode %d" % self.opcode)
        if not 0 <= self.addr <= 0xFF:
            raise FrameError("bad_header", "addr %d out of range" % self.addr)
        if self.count != len(self.payload):
            raise FrameError("bad_count", "count %d != %d payload words"
                             % (self.count, len(self.payload)))

    @property
    def n_bytes(self) -> int:
        return 4 + (4 * self.count + 1 if self.count else 0)

    @property
    def n_bits(self) -> int:
        return 8 * self.n_bytes

    def duration_ns(self, bit_ns: int = DEFAULT_BIT_NS) -> int:
        return self.n_bits * bit_ns


def encode_frame(frame: Frame) -> bytes:
    """Serialize a frame to its wire bytes."""
    if frame.count > MAX_COUNT:
        raise FrameError("count_overflow", "count %d > %d" % (frame.count, MAX_COUNT))
    b0 = (int(frame.prio) << 7) | ((frame.opcode & 0x7) << 4) | (frame.addr >> 4)
    b1 = ((frame.addr & 0xF) << 4) | ((frame.count >> 8) & 0xF)
    b2 = frame.count & 0xFF
    head = bytes((b0, b1, b2))
    out = bytearray(head)
    out.append(crc8(head))
    if frame.count:
        body = bytearray()
        for w in frame.payload:
            if not 0 <= w <= 0xFFFFFFFF:
                raise FrameError("bad_payload", "word out of 32-bit range")
            body += w.to_bytes(4, "big")
        out += body
        out.append(crc8(bytes(body)))
    return bytes(out)


def decode_frame(data: bytes) -> Frame:
    """Parse wire bytes back into a Frame; exact inverse of encode_frame."""
    if len(data) < 4:
        raise FrameError("bad_length", "%d bytes, header needs 4" % len(data))
    if crc8(data[:3]) != data[3]:
        raise FrameError("bad_header", "header CRC mismatch")
    b0, b1, b2 = data[0], data[1], data[2]
    prio = bool(b0 >> 7)
    opcode = (b0 >> 4) & 0x7
    if opcode not in VALID_OPCODES:
        raise FrameError("bad_opcode", "opcode %d" % opcode)
    addr = ((b0 & 0xF) << 4) | (b1 >> 4)
    count = ((b1 & 0xF) << 8) | b2
    if count > MAX_COUNT:
        raise FrameError("bad_count", "count %d" % count)
    expect = 4 + (4 * count + 1 if count else 0)
    if len(data) != expect:
        raise FrameError("bad_length", "%d bytes, frame declares %d" % (len(data), expect))
    payload = ()
    if count:
        body = data[4:4 + 4 * count]
        if crc8(body) != data[-1]:
            raise FrameError("bad_payload", "payload CRC mismatch")
        payload = tuple(int.from_bytes(body[4 * i:4 * i + 4], "big") for i in range(count))
    return Frame(prio=prio, opcode=opcode, addr=addr, count=count, payload=payload)


def ack(request: Frame, payload: tuple = ()) -> Frame:
    return Frame(prio=request.prio, opcode=OP_ACK, addr=request.addr,
                 count=len(payload), payload=payload)


def nak(request: Frame, code: int) -> Frame:
    return Frame(prio=request.prio, opcode=OP_NAK, addr=request.addr,
                 count=1, payload=(code,))


# -- wire simulation ----------------------------------------------------------


class LinkDownError(RuntimeError):
    pass


class Transaction:
    """One request/response exchange as seen by the master."""

    __slots__ = ("frame", "prio", "origin", "submit_t", "deliver_t",
                 "response", "error", "on_done", "timeout_ev", "expected_ns")

    def __init__(self, frame, prio, origin, submit_t, on_done):
        self.frame = frame
        self.prio = prio
        self.origin = origin
        self.submit_t = submit_t
        self.deliver_t = None
        self.response = None
        self.error = None
        self.on_done = on_done
        self.timeout_ev = None
        self.expected_ns = 0

    @property
    def done(self):
        return self.deliver_t is not None or self.error is not None

    @property
    def latency_ns(self):
        return None if self.deliver_t is None else self.deliver_t - self.submit_t

    @property
    def nak_code(self):
        if self.response is not None and self.response.opcode == OP_NAK:
            return self.response.payload[0]
        return None


class _Tx:
    """One frame occupying (possibly with interruptions) a wire direction."""

    __slots__ = ("frame", "n_bytes", "bytes_done", "seg_start", "arrival_ev",
                 "deliver", "on_start", "started")

    def __init__(self, frame, deliver, on_start=None):
        self.frame = frame
        self.n_bytes = frame.n_bytes
        self.bytes_done = 0
        self.seg_start = None
        self.arrival_ev = None
        self.deliver = deliver
        self.on_start = on_start
        self.started = False


class _Wire:
    """One direction of the optical link.

    Normal frames queue FIFO and stream back to back.  A priority frame
    never waits behind the queue: if a normal frame is mid-flight it is
    suspended at the next byte boundary, the priority frame is
    transmitted, and the normal frame resumes (total transfer time grows
    by the injected duration; the demarcation overhead is idealized away).
    """

    def __init__(self, sim, bit_ns, name):
        self.sim = sim
        self.bit_ns = bit_ns
        self.byte_ns = 8 * bit_ns
        self.name = name
        self.current = None  # normal-or-priority _Tx occupying the wire
        self.queue = deque()
        self.prio_queue = deque()
        self.injected = None  # priority _Tx currently punched into self.current
        self.broken = False

    def send(self, tx: _Tx, prio: bool):
        if self.broken:
            return
        if prio:
            self.prio_queue.append(tx)
            self._inject()
        else:
            self.queue.append(tx)
            self._dispatch()

    def _dispatch(self):
        if self.current is not None or self.injected is not None:
            return
        nxt = self.prio_queue.popleft() if self.prio_queue else (
            self.queue.popleft() if self.queue else None)
        if nxt is None:
            return
        self._start(nxt)

    def _start(self, tx: _Tx):
        self.current = tx
        tx.seg_start = self.sim.now
        if not tx.started:
            tx.started = True
            if tx.on_start:
                tx.on_start()
        remaining = tx.n_bytes - tx.bytes_done
        tx.arrival_ev = self.sim.schedule_after(remaining * self.byte_ns,
                                                lambda: self._complete(tx))

    def _complete(self, tx: _Tx):
        self.current = None
        tx.arrival_ev = None
        deliver = tx.deliver
        self._dispatch()
        deliver(tx.frame)

    def _inject(self):
        """Put the head priority frame onto the wire as soon as physics allows."""
        if self.injected is not None:
            return  # chained after the active injection completes
        cur = self.current
        if cur is None:
            self._dispatch()
            return
        if cur.frame.prio:
            return  # a priority frame already owns the wire; FIFO behind it
        # suspend the normal frame at its next byte boundary
        prio_tx = self.prio_queue.popleft()
        elapsed = self.sim.now - cur.seg_start
        bytes_in_seg = -(-elapsed // self.byte_ns)  # ceil
        boundary = cur.seg_start + bytes_in_seg * self.byte_ns
        cur.bytes_done += bytes_in_seg
        if cur.bytes_done >= cur.n_bytes:
            # inside the last byte: the frame ends at the boundary anyway and
            # normal dispatch will start the priority frame there
            cur.bytes_done = cur.n_bytes
            self.prio_queue.appendleft(prio_tx)
            return
        self.sim.cancel(cur.arrival_ev)
        cur.arrival_ev = None
        self.injected = prio_tx
        prio_tx.seg_start = boundary
        if not prio_tx.started:
            prio_tx.started = True
            if prio_tx.on_start:
                prio_tx.on_start()
        self.sim.schedule_at(boundary + prio_tx.n_bytes * self.byte_ns,
                             lambda: self._injection_done(prio_tx, cur))

    def _injection_done(self, prio_tx: _Tx, cur: _Tx):
        self.injected = None
        prio_tx.deliver(prio_tx.frame)
        if self.prio_queue and self.current is cur:
            self._inject()
            if self.injected is not None:
                return
        if self.current is cur:
            # resume the suspended frame
            cur.seg_start = self.sim.now
            remaining = cur.n_bytes - cur.bytes_done
            cur.arrival_ev = self.sim.schedule_after(remaining * self.byte_ns,
                                                     lambda: self._complete(cur))

    def kill_all(self, on_each=None):
        """Drop in-flight and queued frames (carrier lost)."""
        dropped = []
        if self.current is not None:
            if self.current.arrival_ev is not None:
                self.sim.cancel(self.current.arrival_ev)
            dropped.append(self.current)
            self.current = None
        if self.injected is not None:
            dropped.append(self.injected)
            self.injected = None
        dropped.extend(self.queue)
        dropped.extend(self.prio_queue)
        self.queue.clear()
        self.prio_queue.clear()
        if on_each:
            for tx in dropped:
                on_each(tx)


class LinkState:
    """Master-side view of one PS link, mirrored into channels and STATUS."""

    def __init__(self):
        self.tx_broken = False
        self.rx_broken = False
        self.crc_err_count = 0
        self.nak_count = 0
        self.timeout_count = 0
        self.submitted = {"normal": 0, "prio": 0}
        self.completed = {"normal": 0, "prio": 0}
        self.errored = {"normal": 0, "prio": 0}
        self.by_origin = {}
        self.on_change = []

    def notify(self):
        for cb in list(self.on_change):
            cb(self)


class Link:
    """Point-to-point master/slave link for one power supply.

    slave_handler(frame) -> response frame is called when a request has
    been received and the slave service delay has elapsed; register side
    effects happen inside the handler.
    """

    def __init__(self, sim, slave_handler, bit_ns=DEFAULT_BIT_NS,
                 t_proc_ns=DEFAULT_T_PROC_NS, name="link"):
        self.sim = sim
        self.slave_handler = slave_handler
        self.bit_ns = bit_ns
        self.t_proc_ns = t_proc_ns
        self.name = name
        self.state = LinkState()
        self._m2s = _Wire(sim, bit_ns, name + ".m2s")
        self._s2m = _Wire(sim, bit_ns, name + ".s2m")
        self._outstanding = {False: deque(), True: deque()}
        self._proc_free = 0  # slave serial service path for normal frames

    # -- master API -----------------------------------------------------------

    def transact(self, frame: Frame, prio: bool = False, origin: str = "client",
                 on_done=None) -> Transaction:
        """Queue one request; the response (or error) arrives as an event."""
        frame = Frame(prio=prio, opcode=frame.opcode, addr=frame.addr,
                      count=frame.count, payload=frame.payload)
        txn = Transaction(frame, prio, origin, self.sim.now, on_done)
        kind = "prio" if prio else "normal"
        self.state.submitted[kind] += 1
        o = self.state.by_origin.setdefault(origin, {"normal": 0, "prio": 0})
        o[kind] += 1
        if self.state.tx_broken:
            txn.error = "link_down"
            self.sim.schedule_at(self.sim.now, lambda: self._finish(txn))
            return txn
        txn.expected_ns = self._expected_ns(frame)
        self._outstanding[prio].append(txn)
        if len(self._outstanding[prio]) == 1:
            self._arm_watchdog(prio)
        wire_tx = _Tx(frame, deliver=self._slave_receive)
        self._m2s.send(wire_tx, prio)
        return txn

    def _expected_ns(self, frame: Frame) -> int:
        resp_words = {OP_READ: 1,
                      OP_BLOCK_READ: frame.payload[0] if frame.payload else 1,
                      OP_WRITE: 0, OP_BLOCK_WRITE: 0}.get(frame.opcode, 0)
        resp_bits = 32 + (32 * resp_words + 8 if resp_words else 0)
        return frame.duration_ns(self.bit_ns) + self.t_proc_ns + resp_bits * self.bit_ns

    def _arm_watchdog(self, prio: bool):
        """Responses come back in request order, so a single watchdog on the
        head transaction detects a dead return path: the head is the only
        transaction that can be overdue without a predecessor excusing it."""
        q = self._outstanding[prio]
        if not q:
            return
        head = q[0]
        head.timeout_ev = self.sim.schedule_after(3 * head.expected_ns,
                                                  lambda: self._timeout(head))

    def _disarm_watchdog(self, txn: Transaction):
        if txn.timeout_ev is not None:
            self.sim.cancel(txn.timeout_ev)
            txn.timeout_ev = None

    def _timeout(self, txn: Transaction):
        if txn.done:
            return
        self.state.timeout_count += 1
        txn.error = "timeout"
        if not self.state.rx_broken:
            self.state.rx_broken = True
            self._s2m.broken = True
            self.state.notify()
        q = self._outstanding[txn.prio]
        if q and q[0] is txn:
            q.popleft()
        self._arm_watchdog(txn.prio)
        self._finish(txn)

    def _finish(self, txn: Transaction):
        kind = "prio" if txn.prio else "normal"
        if txn.error is None:
            self.state.completed[kind] += 1
        else:
            self.state.errored[kind] += 1
        if txn.on_done:
            txn.on_done(txn)

    # -- slave side -----------------------------------------------------------

    def _slave_receive(self, frame: Frame):
        if frame.prio:
            done_at = self.sim.now + self.t_proc_ns  # dedicated priority path
        else:
            self._proc_free = max(self.sim.now, self._proc_free) + self.t_proc_ns
            done_at = self._proc_free
        self.sim.schedule_at(done_at, lambda: self._slave_serve(frame))

    def _slave_serve(self, frame: Frame):
        response = self.slave_handler(frame)
        if self.state.rx_broken:
            return  # response lost; master times out
        wire_tx = _Tx(response, deliver=self._master_receive)
        self._s2m.send(wire_tx, frame.prio)

    def _master_receive(self, frame: Frame):
        q = self._outstanding[frame.prio]
        if not q:
            return  # late response after timeout; drop
        txn = q.popleft()
        self._disarm_watchdog(txn)
        self._arm_watchdog(frame.prio)
        txn.response = frame
        txn.deliver_t = self.sim.now
        if frame.opcode == OP_NAK:
            self.state.nak_count += 1
        self._finish(txn)

    # -- fault injection --------------------------------------------------------

    @property
    def m2s_ok(self) -> bool:
        return not self.state.tx_broken

    @property
    def s2m_ok(self) -> bool:
        return not self.state.rx_broken

    def set_broken(self, direction: str, broken: bool) -> None:
        """Break or restore one direction; flags mirror immediately, the
        controller STATUS picks them up at its next tick."""
        if direction == "tx":
            if broken == self.state.tx_broken:
                return
            self.state.tx_broken = broken
            self._m2s.broken = broken
            if broken:
                self._m2s.kill_all()
                for q in self._outstanding.values():
                    for txn in list(q):
                        txn.error = "link_down"
                        if txn.timeout_ev is not None:
                            self.sim.cancel(txn.timeout_ev)
                            txn.timeout_ev = None
                        self._finish(txn)
                    q.clear()
        elif direction == "rx":
            if broken == self.state.rx_broken:
                return
            self.state.rx_broken = broken
            self._s2m.broken = broken
            if broken:
                self._s2m.kill_all()
                # outstanding requests fail through their response timeouts
        else:
            raise ValueError("direction must be 'tx' or 'rx'")
        self.state.notify()
