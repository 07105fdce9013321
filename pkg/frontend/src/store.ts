// Console state: a fold over the monitor event stream plus local edit
// buffers and view selection.  Rendering is a pure function of this object,
// so a refresh (replaying the same events) reproduces the identical view.

import { Severity, UpdateEvent, isAlarmValue } from "./protocol";

export interface PsInfo {
  id: string;
  class: string;
  i_max: number;
}

export interface Layout {
  ps: PsInfo[];
  families: string[];
  optic: boolean;
  feedback: boolean;
}

export interface ChannelSnapshot {
  value: unknown;
  alarm: Severity;
  t_ns: number;
}

export interface ConsoleState {
  connected: boolean;
  everConnected: boolean;
  layout: Layout | null;
  channels: Map<string, ChannelSnapshot>;
  edits: Map<string, string>; // field key -> text being edited
  selected: string | null; // PS or family shown in the detail view
  notice: string | null; // last rejection or status line
  lastEventNs: number;
  dropped: number; // malformed messages discarded
}

export function initialState(): ConsoleState {
  return {
    connected: false,
    everConnected: false,
    layout: null,
    channels: new Map(),
    edits: new Map(),
    selected: null,
    notice: null,
    lastEventNs: 0,
    dropped: 0,
  };
}

export function applyUpdate(state: ConsoleState, ev: UpdateEvent): void {
  state.channels.set(ev.name, { value: ev.value, alarm: ev.alarm, t_ns: ev.t_ns });
  if (ev.t_ns > state.lastEventNs) state.lastEventNs = ev.t_ns;
}

export function channelValue(state: ConsoleState, name: string): unknown {
  return state.channels.get(name)?.value;
}

function numeric(state: ConsoleState, name: string): number | null {
  const v = channelValue(state, name);
  return typeof v === "number" ? v : null;
}

export interface PanelRow {
  id: string;
  isFamily: boolean;
  set: number | null;
  read: number | null;
  compare: string;
  hysteresis: string;
  mode: string;
  severity: Severity;
}

function rowFor(state: ConsoleState, id: string, isFamily: boolean): PanelRow {
  const alarm = channelValue(state, id + ":ALARM");
  return {
    id,
    isFamily,
    set: numeric(state, id + ":I-SET"),
    read: numeric(state, id + ":I-READ"),
    compare: String(channelValue(state, id + ":COMPARE") ?? "?"),
    hysteresis: String(channelValue(state, id + ":HYST-STATE") ?? "?"),
    mode: String(channelValue(state, id + ":MODE") ?? "?"),
    severity: isAlarmValue(alarm) ? alarm.severity : "none",
  };
}

export function panelRows(state: ConsoleState): PanelRow[] {
  if (!state.layout) return [];
  const fams = state.layout.families.map((f) => rowFor(state, f, true));
  const supplies = state.layout.ps.map((p) => rowFor(state, p.id, false));
  return [...fams, ...supplies];
}

export interface AlarmEntry {
  id: string;
  severity: Severity;
  reasons: string[];
}

export function alarmStrip(state: ConsoleState): AlarmEntry[] {
  const out: AlarmEntry[] = [];
  for (const [name, snap] of state.channels) {
    if (!name.endsWith(":ALARM") || !isAlarmValue(snap.value)) continue;
    if (snap.value.severity === "none") continue;
    out.push({
      id: name.slice(0, -":ALARM".length),
      severity: snap.value.severity,
      reasons: snap.value.reasons,
    });
  }
  out.sort((a, b) =>
    a.severity === b.severity ? a.id.localeCompare(b.id)
      : a.severity === "major" ? -1 : 1);
  return out;
}

/** True while any supply reports an active synchronized ramp or cycle;
 * optic applies are blocked during that window. */
export function rampActive(state: ConsoleState): boolean {
  for (const [name, snap] of state.channels) {
    if (name.endsWith(":RAMP-STATE") && snap.value !== "idle") return true;
  }
  return false;
}

export function opticKnobs(state: ConsoleState): Record<string, number> {
  const v = channelValue(state, "OPTIC:KNOBS");
  if (typeof v === "object" && v !== null) {
    return v as Record<string, number>;
  }
  return { E: 0, dnu_x: 0, dnu_y: 0, dxi_x: 0, dxi_y: 0 };
}

export function atTheoreticalOptics(state: ConsoleState): boolean {
  const k = opticKnobs(state);
  const e0 = k.E; // layout carries no E0; zero shifts define the badge
  return (
    k.dnu_x === 0 && k.dnu_y === 0 && k.dxi_x === 0 && k.dxi_y === 0 && e0 > 0
  );
}

// -- edit buffers: local keystrokes never clobbered by live updates ---------

export function editKey(id: string, field: string): string {
  return id + "|" + field;
}

export function beginEdit(state: ConsoleState, key: string, text: string): void {
  state.edits.set(key, text);
}

export function clearEdit(state: ConsoleState, key: string): void {
  state.edits.delete(key);
}

export function displayedSet(state: ConsoleState, id: string): string {
  const edit = state.edits.get(editKey(id, "I-SET"));
  if (edit !== undefined) return edit;
  const live = numeric(state, id + ":I-SET");
  return live === null ? "" : formatAmps(live);
}

export function formatAmps(x: number): string {
  return Math.abs(x) >= 100 ? x.toFixed(3) : x.toFixed(5);
}
