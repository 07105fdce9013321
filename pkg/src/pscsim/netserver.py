"""Network front end: newline-delimited JSON over TCP, the same messages
over a WebSocket gateway, and static assets for the operator console.

One listening port serves all three: the first bytes of a connection are
sniffed, and anything starting with an HTTP method is routed to the
HTTP/WebSocket handler while everything else is treated as a raw JSON-lines
client.  Requests are {"op": "get"|"put"|"monitor"|"unmonitor", "name": ...,
"value": ..., "id": ...}; replies carry the same id; monitor events are
{"ev": "update", "name": ..., "value": ..., "alarm": ..., "t_ns": ...}.

All state mutation happens on the simulation thread: socket readers only
enqueue commands through Simulator.submit, and outbound traffic goes
through per-client queues drained by writer threads, so event order per
client is preserved.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import queue
import socket
import struct
import threading

WS_MAGIC = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript",
    ".css": "text/css",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}

FALLBACK_PAGE = b"""<!doctype html>
<html><head><title>pscsim</title></head>
<body><h1>pscsim control service</h1>
<p>The simulator is serving its client protocol on this port (JSON lines
over TCP and WebSocket at /ws).  No console assets were found; build the
frontend or point --static at its dist directory.</p></body></html>
"""


class ClientSession:
    """One connected client: socket, outbound queue, live subscriptions."""

    _next_id = 1

    def __init__(self, server, sock, websocket=False):
        self.server = server
        self.sock = sock
        self.websocket = websocket
        self.outbox = queue.Queue()
        self.subs = {}
        self.alive = True
        self.id = ClientSession._next_id
        ClientSession._next_id += 1

    def send_json(self, obj):
        if self.alive:
            self.outbox.put(json.dumps(obj, separators=(",", ":")))

    def close(self):
        self.alive = False
        self.outbox.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class NetServer:
    def __init__(self, sim, channel_server, port=0, host="127.0.0.1",
                 static_dir=None):
        self.sim = sim
        self.channels = channel_server
        self.host = host
        self.static_dir = static_dir
        self.sessions = []
        self._lock = threading.Lock()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="psc-accept", daemon=True)

    def start(self):
        self._accept_thread.start()

    def stop(self):
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            sessions = list(self.sessions)
        for s in sessions:
            s.close()

    # -- accept / sniff ----------------------------------------------------------

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_conn, args=(sock,),
                             daemon=True).start()

    def _serve_conn(self, sock):
        sock.settimeout(None)
        try:
            head = sock.recv(4, socket.MSG_PEEK)
        except OSError:
            sock.close()
            return
        if head[:4] in (b"GET ", b"POST", b"HEAD", b"OPTI"):
            self._serve_http(sock)
        else:
            self._serve_jsonl(sock)

    # -- raw TCP JSON lines ---------------------------------------------------------

    def _serve_jsonl(self, sock):
        session = ClientSession(self, sock)
        self._register(session)
        writer = threading.Thread(target=self._write_loop_jsonl, args=(session,),
                                  daemon=True)
        writer.start()
        buf = b""
        try:
            while session.alive:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    if line.strip():
                        self._dispatch(session, line)
        except OSError:
            pass
        self._drop(session)

    def _write_loop_jsonl(self, session):
        while True:
            item = session.outbox.get()
            if item is None:
                return
            try:
                session.sock.sendall(item.encode() + b"\n")
            except OSError:
                session.alive = False
                return

    # -- request handling --------------------------------------------------------------

    def _dispatch(self, session, raw):
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError:
            session.send_json({"id": None, "ok": False, "error": "bad_json"})
            return
        self.sim.submit(lambda: self._execute(session, msg))

    def _execute(self, session, msg):
        op = msg.get("op")
        name = msg.get("name")
        if op == "unmonitor":
            sub = session.subs.pop(name, None)
            if sub is not None:
                self.channels.ch_unmonitor(sub)
            session.send_json({"id": msg.get("id"), "ok": sub is not None,
                               **({} if sub else {"error": "not_monitored"})})
            return
        sub = self.channels.execute(msg, session.send_json,
                                    subscriber=session.send_json)
        if sub is not None:
            old = session.subs.pop(name, None)
            if old is not None:
                self.channels.ch_unmonitor(old)
            session.subs[name] = sub

    def _register(self, session):
        with self._lock:
            self.sessions.append(session)

    def _drop(self, session):
        with self._lock:
            if session in self.sessions:
                self.sessions.remove(session)
        subs = list(session.subs.values())
        session.subs.clear()
        if subs:
            self.sim.submit(lambda: [self.channels.ch_unmonitor(s) for s in subs])
        session.close()

    # -- HTTP and WebSocket ---------------------------------------------------------------

    def _serve_http(self, sock):
        data = b""
        try:
            while b"\r\n\r\n" not in data:
                chunk = sock.recv(8192)
                if not chunk:
                    sock.close()
                    return
                data += chunk
        except OSError:
            sock.close()
            return
        head = data.split(b"\r\n\r\n", 1)[0].decode("latin-1")
        lines = head.split("\r\n")
        try:
            method, path, _ = lines[0].split(" ", 2)
        except ValueError:
            sock.close()
            return
        headers = {}
        for ln in lines[1:]:
            if ":" in ln:
                k, v = ln.split(":", 1)
                headers[k.strip().lower()] = v.strip()
        if path.split("?")[0] == "/ws" and \
                "websocket" in headers.get("upgrade", "").lower():
            self._serve_websocket(sock, headers)
        else:
            self._serve_static(sock, method, path.split("?")[0])

    def _serve_static(self, sock, method, path):
        body, ctype, status = FALLBACK_PAGE, "text/html; charset=utf-8", "200 OK"
        if self.static_dir:
            rel = "index.html" if path in ("/", "") else path.lstrip("/")
            full = os.path.realpath(os.path.join(self.static_dir, rel))
            root = os.path.realpath(self.static_dir)
            if full.startswith(root + os.sep) or full == os.path.join(root, "index.html"):
                if os.path.isfile(full):
                    with open(full, "rb") as fh:
                        body = fh.read()
                    ctype = CONTENT_TYPES.get(os.path.splitext(full)[1],
                                              "application/octet-stream")
                else:
                    body, status = b"not found", "404 Not Found"
                    ctype = "text/plain"
            else:
                body, status, ctype = b"forbidden", "403 Forbidden", "text/plain"
        elif path not in ("/", "", "/index.html"):
            body, status, ctype = b"not found", "404 Not Found", "text/plain"
        resp = ("HTTP/1.1 %s\r\nContent-Type: %s\r\nContent-Length: %d\r\n"
                "Connection: close\r\n\r\n" % (status, ctype, len(body)))
        try:
            sock.sendall(resp.encode() + (body if method != "HEAD" else b""))
        except OSError:
            pass
        sock.close()

    def _serve_websocket(self, sock, headers):
        key = headers.get("sec-websocket-key", "")
        accept = base64.b64encode(
            hashlib.sha1((key + WS_MAGIC).encode()).digest()).decode()
        resp = ("HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\n"
                "Connection: Upgrade\r\nSec-WebSocket-Accept: %s\r\n\r\n" % accept)
        try:
            sock.sendall(resp.encode())
        except OSError:
            sock.close()
            return
        session = ClientSession(self, sock, websocket=True)
        self._register(session)
        threading.Thread(target=self._write_loop_ws, args=(session,),
                         daemon=True).start()
        self._read_loop_ws(session)
        self._drop(session)

    def _write_loop_ws(self, session):
        while True:
            item = session.outbox.get()
            if item is None:
                return
            try:
                session.sock.sendall(_ws_frame(item.encode()))
            except OSError:
                session.alive = False
                return

    def _read_loop_ws(self, session):
        sock = session.sock
        buf = b""
        fragments = b""
        while session.alive:
            try:
                chunk = sock.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while True:
                parsed = _ws_parse(buf)
                if parsed is None:
                    break
                fin, opcode, payload, buf = parsed
                if opcode == 8:  # close
                    session.alive = False
                    return
                if opcode == 9:  # ping -> pong
                    try:
                        sock.sendall(_ws_frame(payload, opcode=10))
                    except OSError:
                        return
                    continue
                if opcode in (0, 1, 2):
                    fragments += payload
                    if fin:
                        text, fragments = fragments, b""
                        if text.strip():
                            self._dispatch(session, text)


def _ws_frame(payload: bytes, opcode=1) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 65536:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def _ws_parse(buf: bytes):
    """Parse one frame; returns (fin, opcode, payload, rest) or None if short."""
    if len(buf) < 2:
        return None
    fin = bool(buf[0] & 0x80)
    opcode = buf[0] & 0x0F
    masked = bool(buf[1] & 0x80)
    n = buf[1] & 0x7F
    pos = 2
    if n == 126:
        if len(buf) < 4:
            return None
        n = struct.unpack(">H", buf[2:4])[0]
        pos = 4
    elif n == 127:
        if len(buf) < 10:
            return None
        n = struct.unpack(">Q", buf[2:10])[0]
        pos = 10
    mask = b""
    if masked:
        if len(buf) < pos + 4:
            return None
        mask = buf[pos:pos + 4]
        pos += 4
    if len(buf) < pos + n:
        return None
    payload = buf[pos:pos + n]
    if masked:
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return fin, opcode, payload, buf[pos + n:]
