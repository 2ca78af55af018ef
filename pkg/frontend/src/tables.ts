/**
 * Plain-text tables that echo summary numbers verbatim: cells are the
 * String() rendering of the parsed JSON values, never recomputed.
 */

import { Summary, SweepIndex } from "./schema.js";

export function cell(x: number): string {
  return String(x);
}

function pad(s: string, w: number): string {
  return s.length >= w ? s : s + " ".repeat(w - s.length);
}

export function renderTable(headers: string[], rows: string[][]): string {
  const widths = headers.map((h, i) =>
    Math.max(h.length, ...rows.map((r) => r[i].length)));
  const line = (cells: string[]) =>
    cells.map((c, i) => pad(c, widths[i])).join("  ").trimEnd();
  const sep = widths.map((w) => "-".repeat(w)).join("  ");
  return [line(headers), sep, ...rows.map(line)].join("\n") + "\n";
}

/** One summary as a single-row metrics table. */
export function summaryTable(label: string, s: Summary): string {
  const m = s.metrics;
  return renderTable(
    ["batch", "runs", "CP", "CP_se", "TPT", "TPT_se", "objective", "events"],
    [[
      label, cell(s.num_runs),
      cell(m.collision_probability.mean), cell(m.collision_probability.stderr),
      cell(m.total_passing_time.mean), cell(m.total_passing_time.stderr),
      cell(m.scheduler_objective.mean), cell(m.collision_events_mean),
    ]]);
}

/** Sweep points as a trend table (one row per grid point). */
export function sweepTable(index: SweepIndex, summaries: Summary[],
                           axis: string): string {
  const rows = index.points.map((pt, i) => {
    const s = summaries[i];
    return [
      pt.params[axis] ?? Object.values(pt.params).join(","),
      cell(s.num_runs),
      cell(s.metrics.collision_probability.mean),
      cell(s.metrics.collision_probability.stderr),
      cell(s.metrics.total_passing_time.mean),
      cell(s.metrics.total_passing_time.stderr),
      cell(s.metrics.collision_events_mean),
    ];
  });
  return renderTable(
    [axis, "runs", "CP", "CP_se", "TPT", "TPT_se", "events"], rows);
}
