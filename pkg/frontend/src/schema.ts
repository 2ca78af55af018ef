/**
 * Strict readers for the simulator's trace CSV and summary JSON formats.
 * Any mismatch against the documented schemas is reported with the
 * offending column or field names; inputs are only ever read.
 */

import { readFileSync } from "node:fs";

export const TRACE_COLUMNS = [
  "slot", "vehicle_id", "x", "y", "theta", "v", "im_x", "im_y",
  "cov_trace", "V", "S", "lambda", "a", "delta", "status",
] as const;

export interface TraceRow {
  slot: number;
  vehicleId: number;
  x: number;
  y: number;
  theta: number;
  v: number;
  imX: number;
  imY: number;
  covTrace: number;
  V: number;
  S: number;
  lambda: number;
  a: number;
  delta: number;
  status: string;
}

export interface MetricPair {
  mean: number;
  stderr: number;
}

export interface Summary {
  schema: string;
  num_runs: number;
  metrics: {
    collision_probability: MetricPair;
    total_passing_time: MetricPair;
    scheduler_objective: MetricPair;
    collision_events_mean: number;
    update_frequency_mean: number;
  };
  per_run: unknown[];
}

export interface SweepPoint {
  params: Record<string, string>;
  dir: string;
  summary: string;
}

export interface SweepIndex {
  schema: string;
  points: SweepPoint[];
}

export class SchemaError extends Error {}

/** Minimal CSV split for the simulator's own output (no quoted fields). */
function splitCsvLine(line: string): string[] {
  return line.split(",");
}

export function parseTrace(text: string, name = "trace"): TraceRow[] {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new SchemaError(`${name}: empty file`);
  }
  const header = splitCsvLine(lines[0]);
  const want = TRACE_COLUMNS as readonly string[];
  if (header.length !== want.length || header.some((h, i) => h !== want[i])) {
    const missing = want.filter((c) => !header.includes(c));
    throw new SchemaError(
      `${name}: unexpected trace header [${header.join(", ")}]` +
      (missing.length ? `; missing columns: ${missing.join(", ")}` : ""));
  }
  const rows: TraceRow[] = [];
  for (let i = 1; i < lines.length; i++) {
    const f = splitCsvLine(lines[i]);
    if (f.length !== want.length) {
      throw new SchemaError(`${name}: row ${i} has ${f.length} fields, expected ${want.length}`);
    }
    const nums = f.slice(0, 14).map(Number);
    const bad = nums.findIndex((x) => Number.isNaN(x));
    if (bad >= 0) {
      throw new SchemaError(`${name}: row ${i} column ${want[bad]} is not numeric`);
    }
    rows.push({
      slot: nums[0], vehicleId: nums[1], x: nums[2], y: nums[3], theta: nums[4],
      v: nums[5], imX: nums[6], imY: nums[7], covTrace: nums[8], V: nums[9],
      S: nums[10], lambda: nums[11], a: nums[12], delta: nums[13], status: f[14],
    });
  }
  return rows;
}

export function readTraceFile(path: string): TraceRow[] {
  return parseTrace(readFileSync(path, "utf-8"), path);
}

export function parseSummary(text: string, name = "summary"): Summary {
  let obj: unknown;
  try {
    obj = JSON.parse(text);
  } catch (e) {
    throw new SchemaError(`${name}: not valid JSON (${(e as Error).message})`);
  }
  const s = obj as Summary;
  if (s.schema !== "cavcoord-summary-v1") {
    throw new SchemaError(`${name}: unexpected schema tag ${String(s.schema)}`);
  }
  const m = s.metrics as Record<string, unknown> | undefined;
  const needed = ["collision_probability", "total_passing_time",
    "scheduler_objective", "collision_events_mean", "update_frequency_mean"];
  const missing = needed.filter((k) => !m || !(k in m));
  if (missing.length) {
    throw new SchemaError(`${name}: missing metric fields: ${missing.join(", ")}`);
  }
  return s;
}

export function readSummaryFile(path: string): Summary {
  return parseSummary(readFileSync(path, "utf-8"), path);
}

export function readSweepIndex(path: string): SweepIndex {
  const obj = JSON.parse(readFileSync(path, "utf-8")) as SweepIndex;
  if (obj.schema !== "cavcoord-sweep-v1") {
    throw new SchemaError(`${path}: unexpected schema tag ${String(obj.schema)}`);
  }
  if (!Array.isArray(obj.points)) {
    throw new SchemaError(`${path}: missing points array`);
  }
  return obj;
}
