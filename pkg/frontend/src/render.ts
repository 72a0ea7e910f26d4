/**
 * DOM-free rendering of the view model to display strings.
 *
 * The browser entry point drops these strings into the page; tests
 * assert on them directly, so "what the physician sees" is pinned
 * without a DOM.
 */
import type { ViewModel } from "./viewmodel.js";

export function stageBanner(vm: ViewModel): string {
  return `STAGE: ${vm.stage.toUpperCase()}`;
}

export function alignmentIndicator(vm: ViewModel): string {
  if (vm.stage === "idle" || vm.stage === "planned") return "○ n/a";
  return vm.aligned ? "● ALIGNED" : "○ not aligned";
}

export function planList(vm: ViewModel): string[] {
  return vm.candidates.map(
    (p) =>
      `[${p.index}] cost ${p.cost.toFixed(1)}  ` +
      `${p.length_mm.toFixed(1)} mm  ` +
      `clearance ${p.min_clearance_mm?.toFixed(1) ?? "?"} mm`,
  );
}

export function progressBar(vm: ViewModel, width = 30): string {
  const last = vm.ticks[vm.ticks.length - 1];
  if (!last) return "";
  const filled = Math.round(last.progress * width);
  const bar = "#".repeat(filled) + "-".repeat(width - filled);
  const gate = last.windowOpen ? "window OPEN " : "window closed";
  return `[${bar}] ${(last.progress * 100).toFixed(0)}%  ${gate}  ` +
    `${last.insertedMm.toFixed(1)} mm`;
}

export function errorSparkline(vm: ViewModel, n = 40): string {
  const glyphs = " .:-=+*#%@";
  const errs = vm.ticks.slice(-n).map((t) => t.trajErr);
  if (errs.length === 0) return "";
  const max = Math.max(...errs, 1e-9);
  return errs
    .map((e) => glyphs[Math.min(glyphs.length - 1,
      Math.floor((e / max) * (glyphs.length - 1)))])
    .join("");
}

export function errorToasts(vm: ViewModel): string[] {
  return vm.errors.map((e) => {
    const what = e.requestType ?? "request";
    const where = e.stage ? ` (stage: ${e.stage})` : "";
    const detail = e.detail !== undefined ? ` — ${String(e.detail)}` : "";
    return `✗ ${what} rejected: ${e.error}${where}${detail}`;
  });
}

export function resultBanner(vm: ViewModel): string {
  if (!vm.result) return "";
  const err =
    vm.result.targetingErrorMm !== null
      ? ` — targeting error ${vm.result.targetingErrorMm.toFixed(2)} mm`
      : "";
  return `${vm.result.status.toUpperCase()}${err}`;
}

/** Full console frame, one string per line. */
export function renderFrame(vm: ViewModel): string[] {
  const lines = [stageBanner(vm), `alignment: ${alignmentIndicator(vm)}`];
  lines.push(...planList(vm));
  const bar = progressBar(vm);
  if (bar) lines.push(bar);
  const spark = errorSparkline(vm);
  if (spark) lines.push(`err ${spark}`);
  const result = resultBanner(vm);
  if (result) lines.push(result);
  lines.push(...errorToasts(vm));
  return lines;
}
