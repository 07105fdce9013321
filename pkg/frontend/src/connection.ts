// WebSocket session with the control service: request/reply correlation,
// monitor fan-in, and automatic reconnect with full resubscription.

import {
  Op,
  Reply,
  UpdateEvent,
  encodeRequest,
  isUpdate,
  parseServerMessage,
} from "./protocol";

export interface SocketLike {
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

interface Pending {
  resolve: (r: Reply) => void;
  reject: (e: Error) => void;
}

export class ConsoleLink {
  onUpdate: (ev: UpdateEvent) => void = () => {};
  onStatus: (connected: boolean) => void = () => {};
  onDropped: () => void = () => {};

  private sock: SocketLike | null = null;
  private nextId = 1;
  private pending = new Map<number, Pending>();
  private monitors = new Set<string>();
  private closed = false;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private url: string,
    private factory: SocketFactory,
    private reconnectMs = 1000,
  ) {}

  connect(): void {
    this.closed = false;
    const sock = this.factory(this.url);
    this.sock = sock;
    sock.onopen = () => {
      this.onStatus(true);
      // a fresh session resubscribes everything; the monitor replies carry
      // current snapshots, so the view fully resyncs
      for (const name of this.monitors) {
        this.fire("monitor", name).catch(() => {});
      }
    };
    sock.onmessage = (ev) => this.handle(String(ev.data));
    sock.onerror = () => {};
    sock.onclose = () => {
      if (this.sock !== sock) return;
      this.sock = null;
      this.failPending("connection lost");
      this.onStatus(false);
      if (!this.closed) {
        this.reconnectTimer = setTimeout(() => this.connect(), this.reconnectMs);
      }
    };
  }

  close(): void {
    this.closed = true;
    if (this.reconnectTimer !== null) clearTimeout(this.reconnectTimer);
    this.sock?.close();
    this.sock = null;
    this.failPending("closed");
  }

  private failPending(why: string): void {
    for (const p of this.pending.values()) p.reject(new Error(why));
    this.pending.clear();
  }

  private handle(raw: string): void {
    const msg = parseServerMessage(raw);
    if (msg === null) {
      this.onDropped(); // malformed: drop and keep the session alive
      return;
    }
    if (isUpdate(msg)) {
      this.onUpdate(msg);
      return;
    }
    const p = this.pending.get(msg.id);
    if (p) {
      this.pending.delete(msg.id);
      p.resolve(msg);
    }
  }

  private fire(op: Op, name: string, value?: unknown): Promise<Reply> {
    const sock = this.sock;
    if (sock === null) {
      return Promise.reject(new Error("not connected"));
    }
    const id = this.nextId++;
    const req = value === undefined ? { op, name, id } : { op, name, id, value };
    return new Promise((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      sock.send(encodeRequest(req));
    });
  }

  get(name: string): Promise<Reply> {
    return this.fire("get", name);
  }

  /** Exactly one protocol put per mutating console action. */
  put(name: string, value: unknown): Promise<Reply> {
    return this.fire("put", name, value);
  }

  monitor(name: string): Promise<Reply> {
    this.monitors.add(name);
    return this.fire("monitor", name);
  }

  unmonitor(name: string): Promise<Reply> {
    this.monitors.delete(name);
    return this.fire("unmonitor", name);
  }

  get subscriptionCount(): number {
    return this.monitors.size;
  }
}
