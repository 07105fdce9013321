// Message schema of the control service: newline-delimited JSON requests and
// replies plus monitor update events, identical over TCP and WebSocket.

export type Severity = "none" | "minor" | "major";

export interface UpdateEvent {
  ev: "update";
  name: string;
  value: unknown;
  alarm: Severity;
  t_ns: number;
}

export interface Reply {
  id: number;
  ok: boolean;
  value?: unknown;
  error?: string;
}

export type Op = "get" | "put" | "monitor" | "unmonitor";

export interface Request {
  op: Op;
  name: string;
  id: number;
  value?: unknown;
}

export interface AlarmValue {
  severity: Severity;
  reasons: string[];
}

/** Parse one line from the server; malformed input yields null (the session
 * drops the message and keeps running). */
export function parseServerMessage(raw: string): UpdateEvent | Reply | null {
  let msg: unknown;
  try {
    msg = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof msg !== "object" || msg === null) return null;
  const m = msg as Record<string, unknown>;
  if (m.ev === "update") {
    if (typeof m.name !== "string" || typeof m.t_ns !== "number") return null;
    return {
      ev: "update",
      name: m.name,
      value: m.value,
      alarm: (m.alarm as Severity) ?? "none",
      t_ns: m.t_ns,
    };
  }
  if (typeof m.id === "number" && typeof m.ok === "boolean") {
    return m as unknown as Reply;
  }
  return null;
}

export function isUpdate(msg: UpdateEvent | Reply): msg is UpdateEvent {
  return (msg as UpdateEvent).ev === "update";
}

export function encodeRequest(req: Request): string {
  return JSON.stringify(req);
}

export function isAlarmValue(v: unknown): v is AlarmValue {
  return (
    typeof v === "object" &&
    v !== null &&
    "severity" in v &&
    Array.isArray((v as AlarmValue).reasons)
  );
}
