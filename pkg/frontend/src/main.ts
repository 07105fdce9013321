// Console entry point: wires the WebSocket session, the state fold and the
// DOM together.  All rendering flows one way (events -> state -> HTML); user
// edits live in the edit buffers until committed with Enter.

import { ConsoleLink } from "./connection";
import { Layout, PsInfo } from "./store";
import {
  ConsoleState,
  applyUpdate,
  beginEdit,
  clearEdit,
  editKey,
  initialState,
} from "./store";
import {
  renderAlarms,
  renderBanner,
  renderDetail,
  renderNotice,
  renderOptics,
  renderPanel,
} from "./views";

const PS_FIELDS = [
  "I-SET", "I-READ", "MODE", "STATUS", "COMPARE", "HYST-STATE", "CYCLE-CMD",
  "R-LOAD", "V-OUT", "LINK-TX-OK", "LINK-RX-OK", "LOCAL", "WF-OFFSET",
  "WF-SCALE", "WF-LOAD", "TRIG-ARM", "ALARM", "RAMP-STATE",
];
const FAMILY_FIELDS = [
  "I-SET", "I-READ", "MODE", "COMPARE", "HYST-STATE", "CYCLE-CMD", "ALARM",
  "RAMP-STATE",
];

const state: ConsoleState = initialState();
const wsUrl = location.origin.replace(/^http/, "ws") + "/ws";
const link = new ConsoleLink(wsUrl,
  (url) => new WebSocket(url) as unknown as import("./connection").SocketLike);

let renderQueued = false;
function scheduleRender(): void {
  if (renderQueued) return;
  renderQueued = true;
  requestAnimationFrame(() => {
    renderQueued = false;
    render();
  });
}

function byId(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error("missing element " + id);
  return el;
}

function render(): void {
  byId("banner").innerHTML = renderBanner(state);
  byId("alarms").innerHTML = renderAlarms(state);
  byId("notice").innerHTML = renderNotice(state);
  byId("detail").innerHTML = renderDetail(state);
  byId("optics").innerHTML = renderOptics(state);
  // the panel holds the focused set-current input: re-rendering it under the
  // operator's fingers would lose the edit, so skip while one has focus
  const active = document.activeElement;
  if (!(active instanceof HTMLInputElement) || !active.classList.contains("set")) {
    byId("panel").innerHTML = renderPanel(state);
  }
}

function notice(text: string | null): void {
  state.notice = text;
  scheduleRender();
}

async function subscribe(): Promise<void> {
  const reply = await link.get("SYS:LAYOUT");
  if (!reply.ok) {
    notice("no machine layout: " + reply.error);
    return;
  }
  state.layout = reply.value as Layout;
  const names: string[] = [];
  state.layout.ps.forEach((p: PsInfo) =>
    PS_FIELDS.forEach((f) => names.push(p.id + ":" + f)));
  state.layout.families.forEach((fam) =>
    FAMILY_FIELDS.forEach((f) => names.push(fam + ":" + f)));
  if (state.layout.optic) names.push("OPTIC:KNOBS");
  if (state.layout.feedback) names.push("SYS:FEEDBACK");
  for (const n of names) link.monitor(n).catch(() => {});
  scheduleRender();
}

link.onUpdate = (ev) => {
  applyUpdate(state, ev);
  scheduleRender();
};

link.onStatus = (connected) => {
  state.connected = connected;
  if (connected) {
    state.everConnected = true;
    if (!state.layout) subscribe().catch((e) => notice(String(e)));
  }
  scheduleRender();
};

async function doPut(name: string, value: unknown): Promise<void> {
  try {
    const reply = await link.put(name, value);
    notice(reply.ok ? null : name + " rejected: " + reply.error);
  } catch (e) {
    notice(String(e));
  }
}

function hookEvents(): void {
  const panel = byId("panel");
  panel.addEventListener("input", (ev) => {
    const t = ev.target as HTMLInputElement;
    if (t.classList.contains("set") && t.dataset.id) {
      beginEdit(state, editKey(t.dataset.id, "I-SET"), t.value);
    }
  });
  panel.addEventListener("keydown", (ev) => {
    const t = ev.target as HTMLInputElement;
    if (!t.classList.contains("set") || !t.dataset.id) return;
    const key = editKey(t.dataset.id, "I-SET");
    if ((ev as KeyboardEvent).key === "Enter") {
      const value = Number(t.value);
      clearEdit(state, key);
      if (Number.isFinite(value)) {
        void doPut(t.dataset.id + ":I-SET", value);
      } else {
        notice("not a number: " + t.value);
      }
      t.blur();
    } else if ((ev as KeyboardEvent).key === "Escape") {
      clearEdit(state, key);
      t.blur();
      scheduleRender();
    }
  });
  panel.addEventListener("click", (ev) => {
    const t = ev.target as HTMLElement;
    if (t.classList.contains("status-btn") && t.dataset.id) {
      state.selected = t.dataset.id;
      scheduleRender();
    }
  });
  byId("detail").addEventListener("click", (ev) => {
    const t = ev.target as HTMLElement;
    const id = t.dataset.id;
    if (!id) return;
    switch (t.dataset.act) {
      case "on": void doPut(id + ":MODE", "on"); break;
      case "off": void doPut(id + ":MODE", "off"); break;
      case "cycle": void doPut(id + ":CYCLE-CMD", 1); break;
      case "arm": void doPut(id + ":TRIG-ARM", 1); break;
    }
  });
  byId("optics").addEventListener("click", (ev) => {
    const t = ev.target as HTMLElement;
    if (t.id !== "optic-apply") return;
    const knobs: Record<string, number> = {};
    document.querySelectorAll<HTMLInputElement>(".knob").forEach((inp) => {
      knobs[inp.dataset.knob as string] = Number(inp.value);
    });
    void doPut("OPTIC:KNOBS", knobs); // one put applies all five quantities
  });
  byId("ramp-launch").addEventListener("click", () => {
    const members = (byId("ramp-members") as HTMLInputElement).value
      .split(",").map((s) => s.trim()).filter(Boolean);
    const targets = (byId("ramp-targets") as HTMLInputElement).value
      .split(",").map(Number);
    const duration = Number((byId("ramp-duration") as HTMLInputElement).value);
    void doPut("SYS:RAMP", { members, targets, duration_s: duration });
  });
}

hookEvents();
link.connect();
render();
