import { describe, expect, it } from "vitest";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";

import { parseSummary, parseTrace, readSummaryFile, readSweepIndex,
         readTraceFile, SchemaError } from "../src/schema.js";

const FIX = join(dirname(fileURLToPath(import.meta.url)), "fixtures");

describe("trace parsing", () => {
  it("reads a real simulator trace", () => {
    const rows = readTraceFile(join(FIX, "batch", "run_0000.csv"));
    expect(rows.length).toBeGreaterThan(10);
    expect(rows[0].slot).toBeGreaterThanOrEqual(0);
    expect(typeof rows[0].status).toBe("string");
    expect(Number.isFinite(rows[0].x)).toBe(true);
  });

  it("rejects wrong headers naming the missing columns", () => {
    const bad = "slot,vehicle_id,x,y\n0,0,1.0,2.0\n";
    expect(() => parseTrace(bad)).toThrowError(SchemaError);
    expect(() => parseTrace(bad)).toThrowError(/missing columns: .*theta/);
  });

  it("rejects non-numeric cells with the column name", () => {
    const hdr = "slot,vehicle_id,x,y,theta,v,im_x,im_y,cov_trace,V,S,lambda,a,delta,status";
    const bad = hdr + "\n0,0,oops,0,0,0,0,0,0,0,0,0,0,0,ok\n";
    expect(() => parseTrace(bad)).toThrowError(/column x is not numeric/);
  });
});

describe("summary parsing", () => {
  it("reads a real summary", () => {
    const s = readSummaryFile(join(FIX, "batch", "summary.json"));
    expect(s.schema).toBe("cavcoord-summary-v1");
    expect(s.num_runs).toBe(2);
    expect(s.metrics.collision_probability.mean).toBeGreaterThanOrEqual(0);
  });

  it("rejects missing metric fields by name", () => {
    const bad = JSON.stringify({ schema: "cavcoord-summary-v1", metrics: {} });
    expect(() => parseSummary(bad)).toThrowError(/total_passing_time/);
  });

  it("rejects foreign schema tags", () => {
    expect(() => parseSummary(JSON.stringify({ schema: "x" })))
      .toThrowError(/schema tag/);
  });
});

describe("sweep index", () => {
  it("reads a real sweep", () => {
    const idx = readSweepIndex(join(FIX, "sweep", "sweep.json"));
    expect(idx.points.length).toBe(2);
    expect(idx.points[0].params).toHaveProperty("n_channels");
  });
});
