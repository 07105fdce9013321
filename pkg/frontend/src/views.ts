// HTML builders: every fragment is a pure function of the console state.

import { isAlarmValue } from "./protocol";
import {
  ConsoleState,
  alarmStrip,
  atTheoreticalOptics,
  channelValue,
  displayedSet,
  formatAmps,
  opticKnobs,
  panelRows,
  rampActive,
} from "./store";

export function esc(x: unknown): string {
  return String(x)
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderBanner(state: ConsoleState): string {
  if (state.connected) return "";
  const label = state.everConnected ? "link down — reconnecting" : "connecting";
  return `<div class="banner">${label}&hellip;</div>`;
}

export function renderPanel(state: ConsoleState): string {
  const rows = panelRows(state)
    .map((r) => {
      const cls = r.severity !== "none" ? ` class="sev-${r.severity}"` : "";
      const sev = r.severity !== "none" ? r.severity : "";
      return (
        `<tr${cls} data-row="${esc(r.id)}">` +
        `<td class="id">${esc(r.id)}${r.isFamily ? " <small>family</small>" : ""}</td>` +
        `<td><input class="set" data-id="${esc(r.id)}" value="${esc(
          displayedSet(state, r.id),
        )}"></td>` +
        `<td class="read">${r.read === null ? "—" : formatAmps(r.read)}</td>` +
        `<td class="cmp cmp-${esc(r.compare)}">${esc(r.compare)}</td>` +
        `<td class="hyst">${esc(r.hysteresis)}</td>` +
        `<td>${esc(r.mode)} ${esc(sev)}</td>` +
        `<td><button class="status-btn" data-id="${esc(r.id)}">status</button></td>` +
        `</tr>`
      );
    })
    .join("");
  return (
    `<table class="panel"><thead><tr><th>magnet</th><th>set A</th>` +
    `<th>read A</th><th>compare</th><th>hysteresis</th><th>mode</th><th></th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderDetail(state: ConsoleState): string {
  const id = state.selected;
  if (!id) return `<p class="dim">select a magnet with its status button</p>`;
  if (
    state.layout &&
    !state.layout.ps.some((p) => p.id === id) &&
    !state.layout.families.includes(id)
  ) {
    return `<p class="dim">unknown magnet ${esc(id)}</p>`;
  }
  const g = (f: string) => channelValue(state, id + ":" + f);
  const alarm = g("ALARM");
  const reasons = isAlarmValue(alarm) ? alarm.reasons.join(", ") : "";
  const sev = isAlarmValue(alarm) ? alarm.severity : "none";
  const num = (v: unknown) => (typeof v === "number" ? formatAmps(v) : "—");
  const rAlarm = isAlarmValue(alarm) && alarm.reasons.includes("resistance");
  const flags =
    `<span class="flag ${g("LINK-TX-OK") === false ? "bad" : "good"}">tx</span>` +
    `<span class="flag ${g("LINK-RX-OK") === false ? "bad" : "good"}">rx</span>` +
    `<span class="flag ${g("LOCAL") === true ? "bad" : "good"}">remote</span>`;
  return (
    `<h3>${esc(id)}</h3>` +
    `<dl class="regs">` +
    `<dt>I_SET</dt><dd>${num(g("I-SET"))} A</dd>` +
    `<dt>I_READ</dt><dd>${num(g("I-READ"))} A</dd>` +
    `<dt>V_OUT</dt><dd>${num(g("V-OUT"))} V</dd>` +
    `<dt>R_LOAD</dt><dd${rAlarm ? ' class="sev-major"' : ""}>${num(g("R-LOAD"))} ohm</dd>` +
    `<dt>waveform</dt><dd>offset ${num(g("WF-OFFSET"))} scale ${num(g("WF-SCALE"))}</dd>` +
    `<dt>links</dt><dd>${flags}</dd>` +
    `<dt>state</dt><dd>${esc(g("RAMP-STATE") ?? "—")} / ${esc(g("COMPARE") ?? "—")}</dd>` +
    `<dt>alarm</dt><dd class="sev-${sev}">${sev}${reasons ? " (" + esc(reasons) + ")" : ""}</dd>` +
    `</dl>` +
    `<div class="actions">` +
    `<button data-act="on" data-id="${esc(id)}">on</button>` +
    `<button data-act="off" data-id="${esc(id)}">off</button>` +
    `<button data-act="cycle" data-id="${esc(id)}">cycle</button>` +
    `<button data-act="arm" data-id="${esc(id)}">arm trigger</button>` +
    `</div>`
  );
}

export function renderOptics(state: ConsoleState): string {
  if (!state.layout?.optic) return "";
  const k = opticKnobs(state);
  const blocked = rampActive(state);
  const badge = atTheoreticalOptics(state)
    ? `<span class="badge">theoretical optics</span>`
    : "";
  const field = (name: string, label: string) =>
    `<label>${label}<input class="knob" data-knob="${name}" value="${esc(
      k[name] ?? 0,
    )}"></label>`;
  return (
    `<h3>optics ${badge}</h3><div class="knobs">` +
    field("E", "E / GeV") +
    field("dnu_x", "Δν<sub>x</sub>") +
    field("dnu_y", "Δν<sub>y</sub>") +
    field("dxi_x", "Δξ<sub>x</sub>") +
    field("dxi_y", "Δξ<sub>y</sub>") +
    `<button id="optic-apply"${blocked ? " disabled" : ""}>apply</button>` +
    (blocked ? `<span class="dim">blocked: ramp active</span>` : "") +
    `</div>`
  );
}

export function renderAlarms(state: ConsoleState): string {
  const entries = alarmStrip(state);
  if (!entries.length) return `<span class="dim">no active alarms</span>`;
  return entries
    .map(
      (a) =>
        `<span class="alarm sev-${a.severity}">${esc(a.id)}: ${esc(
          a.reasons.join(",") || a.severity,
        )}</span>`,
    )
    .join(" ");
}

export function renderNotice(state: ConsoleState): string {
  return state.notice ? `<div class="notice">${esc(state.notice)}</div>` : "";
}
