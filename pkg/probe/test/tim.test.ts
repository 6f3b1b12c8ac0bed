import { describe, expect, it } from "vitest";

import {
  decodeTim,
  encodeTim,
  filteredDifference,
  filteredInstanceSum,
  HEADER_BYTES,
  TimFormatError,
  type TeacherMap,
} from "../src/tim.js";

function uniformMap(gh: number, gw: number): TeacherMap {
  const values = new Float32Array(gh * gw).fill(1 / (gh * gw));
  return { gridH: gh, gridW: gw, values, provenance: "vlm-probe", promptId: "1" };
}

describe("TIM encoding", () => {
  it("round-trips bitwise", () => {
    const map = uniformMap(8, 8);
    map.values[0] = 0.5;
    map.values[1] = 0.5;
    map.values.fill(0, 2);
    const buf = encodeTim(map);
    const back = decodeTim(buf);
    expect(Buffer.compare(encodeTim(back), buf)).toBe(0);
    expect(back.gridH).toBe(8);
    expect(back.provenance).toBe("vlm-probe");
    expect(back.promptId).toBe("1");
  });

  it("writes the documented byte layout", () => {
    const buf = encodeTim(uniformMap(8, 8));
    expect(buf.length).toBe(HEADER_BYTES + 4 * 64);
    expect(buf.toString("ascii", 0, 4)).toBe("TIM1");
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(8);
    expect(buf.readUInt32LE(12)).toBe(8);
    expect(buf.readUInt8(18)).toBe(0); // reserved
    expect(buf.readUInt8(19)).toBe(0);
  });

  it("rejects corrupted headers", () => {
    const buf = encodeTim(uniformMap(2, 2));
    const badMagic = Buffer.from(buf);
    badMagic.write("XXXX", 0, "ascii");
    expect(() => decodeTim(badMagic)).toThrow(TimFormatError);
    const badVersion = Buffer.from(buf);
    badVersion.writeUInt32LE(9, 4);
    expect(() => decodeTim(badVersion)).toThrow(/version/);
    expect(() => decodeTim(buf.subarray(0, 10) as Buffer)).toThrow(/truncated/);
    expect(() => decodeTim(Buffer.concat([buf, Buffer.alloc(4)]))).toThrow(/bytes/);
  });

  it("rejects unnormalized payloads", () => {
    const map = uniformMap(2, 2);
    map.values.fill(0.5);
    expect(() => encodeTim(map)).toThrow(/sum/);
  });
});

describe("cognitive filtering", () => {
  it("keeps only positive differences and normalizes", () => {
    const fore = Float64Array.from([0.5, 0.3, 0.2]);
    const back = Float64Array.from([0.2, 0.4, 0.1]);
    const { values, degenerate } = filteredDifference(fore, back);
    expect(degenerate).toBe(false);
    expect(values[0]).toBeCloseTo(0.75, 6);
    expect(values[1]).toBe(0);
    expect(values[2]).toBeCloseTo(0.25, 6);
  });

  it("falls back to uniform when the difference vanishes", () => {
    const same = Float64Array.from([0.25, 0.25, 0.25, 0.25]);
    const { values, degenerate } = filteredDifference(same, same);
    expect(degenerate).toBe(true);
    for (const v of values) expect(v).toBeCloseTo(0.25, 6);
  });

  it("aggregates instances before filtering", () => {
    const a = Float64Array.from([1, 0, 0, 0]);
    const b = Float64Array.from([0, 0, 1, 0]);
    const { values } = filteredInstanceSum([a, b], new Float64Array(4));
    expect(values[0]).toBeCloseTo(0.5, 6);
    expect(values[2]).toBeCloseTo(0.5, 6);
  });

  it("needs at least one instance", () => {
    expect(() => filteredInstanceSum([], new Float64Array(4))).toThrow(/one/);
  });
});
