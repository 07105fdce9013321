import { describe, expect, it } from "vitest";

import {
  encodeRequest,
  isAlarmValue,
  isUpdate,
  parseServerMessage,
} from "../src/protocol";

describe("parseServerMessage", () => {
  it("parses update events", () => {
    const msg = parseServerMessage(
      '{"ev":"update","name":"C1:I-READ","value":1.5,"alarm":"none","t_ns":20000}',
    );
    expect(msg).not.toBeNull();
    expect(isUpdate(msg!)).toBe(true);
    if (isUpdate(msg!)) {
      expect(msg.name).toBe("C1:I-READ");
      expect(msg.value).toBe(1.5);
      expect(msg.t_ns).toBe(20000);
    }
  });

  it("parses replies", () => {
    const msg = parseServerMessage('{"id":3,"ok":false,"error":"read_only"}');
    expect(msg).not.toBeNull();
    expect(isUpdate(msg!)).toBe(false);
    if (!isUpdate(msg!)) {
      expect(msg!.error).toBe("read_only");
    }
  });

  it("rejects malformed input without throwing", () => {
    expect(parseServerMessage("{nope")).toBeNull();
    expect(parseServerMessage("42")).toBeNull();
    expect(parseServerMessage('{"ev":"update"}')).toBeNull();
    expect(parseServerMessage('{"something":"else"}')).toBeNull();
  });
});

describe("encodeRequest", () => {
  it("round-trips through JSON with the exact field names", () => {
    const raw = encodeRequest({ op: "put", name: "C1:I-SET", id: 7, value: 2 });
    expect(JSON.parse(raw)).toEqual({ op: "put", name: "C1:I-SET", id: 7, value: 2 });
  });

  it("omits value when absent", () => {
    const raw = encodeRequest({ op: "get", name: "C1:I-SET", id: 1 });
    expect(raw).not.toContain("value");
  });
});

describe("isAlarmValue", () => {
  it("accepts the server alarm shape only", () => {
    expect(isAlarmValue({ severity: "major", reasons: ["resistance"] })).toBe(true);
    expect(isAlarmValue("major")).toBe(false);
    expect(isAlarmValue({ severity: "major" })).toBe(false);
  });
});
