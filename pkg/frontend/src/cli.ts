/**
 * Usage:
 *   node dist/cli.js render --input <dir> --figures trajectories,cp_vs_n --out <dir>
 */

import { FIGURES, FigureKind, render, ReportSpec } from "./report.js";
import { SchemaError } from "./schema.js";

function usage(): void {
  console.error("usage: cli.js render --input <dir> --figures <list> --out <dir>");
  console.error(`  figures: ${FIGURES.join(", ")}`);
}

export function main(argv: string[]): number {
  if (argv[0] !== "render") {
    usage();
    return 2;
  }
  let input = "";
  let out = "report";
  let figures: FigureKind[] = ["trajectories"];
  for (let i = 1; i < argv.length; i += 2) {
    const key = argv[i];
    const val = argv[i + 1];
    if (val === undefined) {
      usage();
      return 2;
    }
    if (key === "--input") input = val;
    else if (key === "--out") out = val;
    else if (key === "--figures") figures = val.split(",") as FigureKind[];
    else {
      console.error(`unknown flag ${key}`);
      usage();
      return 2;
    }
  }
  if (!input) {
    usage();
    return 2;
  }
  const spec: ReportSpec = { inputDir: input, figures, outDir: out };
  try {
    const written = render(spec);
    for (const w of written) console.log(w);
    return 0;
  } catch (e) {
    if (e instanceof SchemaError) {
      console.error(`schema error: ${e.message}`);
      return 2;
    }
    throw e;
  }
}

process.exit(main(process.argv.slice(2)));
