/**
 * Report rendering: reads a simulation output directory and produces
 * vector figures plus plain-text tables.  Inputs are read-only and the
 * products are deterministic functions of them.
 */

import { existsSync, readdirSync, writeFileSync, mkdirSync } from "node:fs";
import { join, basename } from "node:path";

import { trajectoryFigure, trendFigure, TrendSeries } from "./figures.js";
import { readSummaryFile, readSweepIndex, readTraceFile, SchemaError,
         Summary, TraceRow } from "./schema.js";
import { summaryTable, sweepTable } from "./tables.js";

export const FIGURES = ["trajectories", "cp_vs_n", "tpt_vs_n",
  "cp_vs_channels", "cp_vs_noise", "cp_vs_s"] as const;
export type FigureKind = typeof FIGURES[number];

export interface ReportSpec {
  inputDir: string;
  figures: FigureKind[];
  outDir: string;
}

const AXIS_OF: Record<Exclude<FigureKind, "trajectories">, string> = {
  cp_vs_n: "num_vehicles",
  tpt_vs_n: "num_vehicles",
  cp_vs_channels: "n_channels",
  cp_vs_noise: "noise_scale",
  cp_vs_s: "s_fixed",
};

export function render(spec: ReportSpec): string[] {
  if (!existsSync(spec.inputDir)) {
    throw new SchemaError(`input directory not found: ${spec.inputDir}`);
  }
  for (const fig of spec.figures) {
    if (!(FIGURES as readonly string[]).includes(fig)) {
      throw new SchemaError(`unknown figure ${fig}; known: ${FIGURES.join(", ")}`);
    }
  }
  mkdirSync(spec.outDir, { recursive: true });
  const written: string[] = [];
  for (const fig of spec.figures) {
    if (fig === "trajectories") {
      written.push(...renderTrajectories(spec));
    } else {
      written.push(...renderTrend(spec, fig));
    }
  }
  return written;
}

function renderTrajectories(spec: ReportSpec): string[] {
  const files = readdirSync(spec.inputDir)
    .filter((f) => /^run_\d+\.csv$/.test(f))
    .sort();
  if (files.length === 0) {
    throw new SchemaError(
      `no trace files (run_*.csv) in ${spec.inputDir}; ` +
      `expected the simulator's batch output`);
  }
  const runs: TraceRow[][] = files.map((f) => readTraceFile(join(spec.inputDir, f)));
  const svg = trajectoryFigure(runs);
  const svgPath = join(spec.outDir, "trajectories.svg");
  writeFileSync(svgPath, svg);
  const written = [svgPath];
  const summaryPath = join(spec.inputDir, "summary.json");
  if (existsSync(summaryPath)) {
    const s = readSummaryFile(summaryPath);
    const txtPath = join(spec.outDir, "trajectories_summary.txt");
    writeFileSync(txtPath, summaryTable(basename(spec.inputDir), s));
    written.push(txtPath);
  }
  return written;
}

function metricOf(fig: FigureKind, s: Summary): { y: number; err: number } {
  if (fig === "tpt_vs_n") {
    return { y: s.metrics.total_passing_time.mean,
             err: s.metrics.total_passing_time.stderr };
  }
  return { y: s.metrics.collision_probability.mean,
           err: s.metrics.collision_probability.stderr };
}

function renderTrend(spec: ReportSpec, fig: Exclude<FigureKind, "trajectories">): string[] {
  const indexPath = join(spec.inputDir, "sweep.json");
  if (!existsSync(indexPath)) {
    throw new SchemaError(`missing ${indexPath}: trend figures need a sweep output`);
  }
  const index = readSweepIndex(indexPath);
  const axis = AXIS_OF[fig];
  const summaries = index.points.map((pt) =>
    readSummaryFile(join(spec.inputDir, pt.summary)));
  // group by every non-axis parameter (e.g. scheduler) as separate series
  const seriesMap = new Map<string, { xs: number[]; pts: Summary[] }>();
  index.points.forEach((pt, i) => {
    if (!(axis in pt.params)) {
      throw new SchemaError(
        `sweep point ${i} has no '${axis}' parameter; axes present: ` +
        Object.keys(pt.params).join(", "));
    }
    const rest = Object.entries(pt.params).filter(([k]) => k !== axis)
      .map(([k, v]) => `${k}=${v}`).join(",") || "batch";
    const e = seriesMap.get(rest) ?? { xs: [], pts: [] };
    e.xs.push(Number(pt.params[axis]));
    e.pts.push(summaries[i]);
    seriesMap.set(rest, e);
  });
  const series: TrendSeries[] = [...seriesMap.entries()].map(([name, e]) => ({
    name,
    points: e.xs.map((x, i) => ({ x, ...metricOf(fig, e.pts[i]) })),
  }));
  const ylabel = fig === "tpt_vs_n" ? "total passing time [s]" : "collision probability";
  const svg = trendFigure(fig, axis, ylabel, series);
  const svgPath = join(spec.outDir, `${fig}.svg`);
  writeFileSync(svgPath, svg);
  const txtPath = join(spec.outDir, `${fig}.txt`);
  writeFileSync(txtPath, sweepTable(index, summaries, axis));
  return [svgPath, txtPath];
}
