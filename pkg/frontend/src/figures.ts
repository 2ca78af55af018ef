/**
 * Deterministic SVG figure generation.  No timestamps, no randomness,
 * fixed number formatting: re-rendering identical inputs yields identical
 * bytes.
 */

import { TraceRow } from "./schema.js";

const W = 640;
const H = 640;

function fmt(x: number): string {
  // fixed shortest-stable formatting for byte determinism
  return Number(x.toFixed(3)).toString();
}

function svgOpen(width: number, height: number, title: string): string {
  return `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" viewBox="0 0 ${width} ${height}">\n` +
    `<title>${title}</title>\n` +
    `<rect width="${width}" height="${height}" fill="white"/>\n`;
}

/** World coordinates ([-half, half]^2) to SVG pixels. */
function proj(half: number) {
  return (x: number, y: number): [number, number] => [
    ((x + half) / (2 * half)) * (W - 40) + 20,
    H - (((y + half) / (2 * half)) * (H - 40) + 20),
  ];
}

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/**
 * Overlaid centroid trajectories across runs; circle marker at each
 * vehicle's start, diamond at its end.  Vehicles are colored by id.
 */
export function trajectoryFigure(runs: TraceRow[][], half = 50, caHalf = 10): string {
  const p = proj(half);
  let out = svgOpen(W, H, "vehicle centroid trajectories");
  // road strips and conflict area outline
  const [rx0, ry0] = p(-half, caHalf * 2);
  const [rx1, ry1] = p(half, -caHalf * 2);
  out += `<rect x="${fmt(rx0)}" y="${fmt(ry0)}" width="${fmt(rx1 - rx0)}" height="${fmt(ry1 - ry0)}" fill="#f2f2f2"/>\n`;
  const [sx0, sy0] = p(-caHalf * 2, half);
  const [sx1, sy1] = p(caHalf * 2, -half);
  out += `<rect x="${fmt(sx0)}" y="${fmt(sy0)}" width="${fmt(sx1 - sx0)}" height="${fmt(sy1 - sy0)}" fill="#f2f2f2"/>\n`;
  const [cx0, cy0] = p(-caHalf, caHalf);
  const [cx1, cy1] = p(caHalf, -caHalf);
  out += `<rect x="${fmt(cx0)}" y="${fmt(cy0)}" width="${fmt(cx1 - cx0)}" height="${fmt(cy1 - cy0)}" fill="none" stroke="#999" stroke-dasharray="4 3"/>\n`;

  for (let r = 0; r < runs.length; r++) {
    const byVehicle = new Map<number, TraceRow[]>();
    for (const row of runs[r]) {
      const arr = byVehicle.get(row.vehicleId) ?? [];
      arr.push(row);
      byVehicle.set(row.vehicleId, arr);
    }
    const ids = [...byVehicle.keys()].sort((a, b) => a - b);
    for (const id of ids) {
      const rows = byVehicle.get(id)!.sort((a, b) => a.slot - b.slot);
      const pts = rows.map((row) => p(row.x, row.y));
      const d = pts.map(([x, y], i) => `${i === 0 ? "M" : "L"}${fmt(x)} ${fmt(y)}`).join(" ");
      const color = PALETTE[id % PALETTE.length];
      out += `<path d="${d}" fill="none" stroke="${color}" stroke-width="0.6" opacity="0.35"/>\n`;
      const [x0, y0] = pts[0];
      const [x1, y1] = pts[pts.length - 1];
      out += `<circle cx="${fmt(x0)}" cy="${fmt(y0)}" r="3" fill="none" stroke="${color}" stroke-width="1"/>\n`;
      out += `<path d="M${fmt(x1)} ${fmt(y1 - 4)} L${fmt(x1 + 4)} ${fmt(y1)} L${fmt(x1)} ${fmt(y1 + 4)} L${fmt(x1 - 4)} ${fmt(y1)} Z" fill="none" stroke="${color}" stroke-width="1"/>\n`;
    }
  }
  return out + "</svg>\n";
}

export interface TrendPoint {
  x: number;
  y: number;
  err: number;
  label?: string;
}

export interface TrendSeries {
  name: string;
  points: TrendPoint[];
}

/** Simple line chart with error bars for sweep trends. */
export function trendFigure(title: string, xlabel: string, ylabel: string,
                            series: TrendSeries[]): string {
  const padL = 70, padB = 50, padT = 40, padR = 20;
  const xs = series.flatMap((s) => s.points.map((q) => q.x));
  const ys = series.flatMap((s) => s.points.flatMap((q) => [q.y - q.err, q.y + q.err]));
  const xmin = Math.min(...xs), xmax = Math.max(...xs);
  const ymin = Math.min(0, ...ys), ymax = Math.max(...ys) * 1.1 + 1e-12;
  const px = (x: number) => padL + ((x - xmin) / Math.max(xmax - xmin, 1e-12)) * (W - padL - padR);
  const py = (y: number) => H - padB - ((y - ymin) / Math.max(ymax - ymin, 1e-12)) * (H - padB - padT);
  let out = svgOpen(W, H, title);
  out += `<text x="${W / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">${title}</text>\n`;
  out += `<line x1="${padL}" y1="${H - padB}" x2="${W - padR}" y2="${H - padB}" stroke="black"/>\n`;
  out += `<line x1="${padL}" y1="${padT}" x2="${padL}" y2="${H - padB}" stroke="black"/>\n`;
  out += `<text x="${W / 2}" y="${H - 12}" text-anchor="middle" font-family="sans-serif" font-size="12">${xlabel}</text>\n`;
  out += `<text x="16" y="${H / 2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 ${H / 2})">${ylabel}</text>\n`;
  for (const x of [...new Set(xs)].sort((a, b) => a - b)) {
    out += `<text x="${fmt(px(x))}" y="${H - padB + 16}" text-anchor="middle" font-family="sans-serif" font-size="11">${x}</text>\n`;
  }
  for (const y of [ymin, (ymin + ymax) / 2, ymax]) {
    out += `<text x="${padL - 6}" y="${fmt(py(y) + 4)}" text-anchor="end" font-family="sans-serif" font-size="11">${fmt(y)}</text>\n`;
  }
  series.forEach((s, si) => {
    const color = PALETTE[si % PALETTE.length];
    const pts = [...s.points].sort((a, b) => a.x - b.x);
    const d = pts.map((q, i) => `${i === 0 ? "M" : "L"}${fmt(px(q.x))} ${fmt(py(q.y))}`).join(" ");
    out += `<path d="${d}" fill="none" stroke="${color}" stroke-width="1.5"/>\n`;
    for (const q of pts) {
      out += `<line x1="${fmt(px(q.x))}" y1="${fmt(py(q.y - q.err))}" x2="${fmt(px(q.x))}" y2="${fmt(py(q.y + q.err))}" stroke="${color}"/>\n`;
      out += `<circle cx="${fmt(px(q.x))}" cy="${fmt(py(q.y))}" r="3" fill="${color}"/>\n`;
    }
    out += `<text x="${W - padR - 8}" y="${padT + 16 + 16 * si}" text-anchor="end" font-family="sans-serif" font-size="12" fill="${color}">${s.name}</text>\n`;
  });
  return out + "</svg>\n";
}
