/**
 * Golden-transcript replay: the view model and its rendered strings
 * must track the server events at every step — the stage banner always
 * shows the last stage event, the alignment indicator follows the last
 * query_alignment reply, and rejections render as error toasts.
 */
import { describe, expect, it } from "vitest";

import { isEvent, parseServerLine, type Request } from "../src/protocol.js";
import {
  alignmentIndicator,
  errorToasts,
  renderFrame,
  resultBanner,
  stageBanner,
} from "../src/render.js";
import {
  actionAllowed,
  initialViewModel,
  reduce,
  type ViewModel,
} from "../src/viewmodel.js";
import { goldenExchanges } from "./golden.js";

/** Replay the whole transcript, asserting invariants after each message. */
function replayGolden(): ViewModel {
  let vm = initialViewModel();
  let lastStageEvent = "idle";
  let lastAlignment = false;

  for (const { request, responses } of goldenExchanges()) {
    vm = reduce(vm, { dir: "send", msg: request as unknown as Request });
    for (const raw of responses) {
      const msg = parseServerLine(JSON.stringify(raw));
      vm = reduce(vm, { dir: "recv", msg });
      if (isEvent(msg) && msg.event === "stage") {
        lastStageEvent = msg.stage;
      }
      if (
        request.type === "query_alignment" &&
        !isEvent(msg) &&
        msg.ok &&
        typeof (msg as Record<string, unknown>).aligned === "boolean"
      ) {
        lastAlignment = (msg as Record<string, unknown>).aligned as boolean;
      }
      // invariant: rendered stage always equals the last stage event
      expect(stageBanner(vm)).toBe(`STAGE: ${lastStageEvent.toUpperCase()}`);
      // invariant: indicator is green iff last query_alignment said so
      expect(alignmentIndicator(vm).startsWith("●")).toBe(lastAlignment);
    }
  }
  return vm;
}

describe("view model over the golden transcript", () => {
  it("tracks every server event and ends in done", () => {
    const vm = replayGolden();
    expect(vm.stage).toBe("done");
    expect(vm.aligned).toBe(true);
    expect(vm.result?.status).toBe("completed");
    expect(vm.record).not.toBeNull();
    expect(resultBanner(vm)).toMatch(/^COMPLETED — targeting error/);
  });

  it("renders the out-of-order rejection as an error toast", () => {
    const vm = replayGolden();
    expect(vm.errors).toHaveLength(1);
    const toast = errorToasts(vm)[0]!;
    expect(toast).toContain("start_autonomous");
    expect(toast).toContain("out_of_order");
    expect(toast).toContain("stage: idle");
  });

  it("receives scene geometry, candidates, and the selected plan", () => {
    const vm = replayGolden();
    expect(vm.geometry).not.toBeNull();
    expect(vm.geometry!.airways.length).toBeGreaterThan(0);
    expect(vm.candidates.length).toBeGreaterThanOrEqual(3);
    expect(vm.candidates.length).toBeLessThanOrEqual(5);
    expect(vm.selectedPlan?.index).toBe(1);
    expect(vm.plannedPath.length).toBeGreaterThan(5);
  });

  it("collects gated telemetry: insertion only while the window is open", () => {
    const vm = replayGolden();
    expect(vm.ticks.length).toBeGreaterThan(5);
    let prev = 0;
    for (const tick of vm.ticks) {
      if (tick.insertedMm > prev + 1e-12) {
        expect(tick.windowOpen).toBe(true);
      }
      prev = tick.insertedMm;
    }
    const last = vm.ticks[vm.ticks.length - 1]!;
    expect(last.progress).toBeGreaterThan(0.99);
  });

  it("renders a full frame without throwing", () => {
    const frame = renderFrame(replayGolden());
    expect(frame[0]).toBe("STAGE: DONE");
    expect(frame.some((line) => line.startsWith("err "))).toBe(true);
  });
});

describe("client-side stage guard", () => {
  it("mirrors the server's allowed stages", () => {
    const vm = initialViewModel();
    expect(actionAllowed(vm, "load_scene")).toBe(true);
    expect(actionAllowed(vm, "start_autonomous")).toBe(false);
    expect(actionAllowed({ ...vm, stage: "aligned" }, "start_autonomous"))
      .toBe(true);
    expect(actionAllowed({ ...vm, stage: "done" }, "abort")).toBe(false);
    expect(actionAllowed({ ...vm, stage: "done" }, "get_record")).toBe(true);
    expect(actionAllowed(vm, "get_state")).toBe(true);
  });

  it("server rejection leaves displayed state unchanged except the toast", () => {
    let vm = initialViewModel();
    vm = reduce(vm, {
      dir: "send",
      msg: { v: 1, type: "select_plan", id: 1, i: 0 },
    });
    const before = { ...vm, errors: vm.errors, pending: {} };
    vm = reduce(vm, {
      dir: "recv",
      msg: parseServerLine(
        JSON.stringify({
          v: 1,
          re: 1,
          ok: false,
          error: "out_of_order",
          stage: "idle",
        }),
      ),
    });
    expect(vm.stage).toBe(before.stage);
    expect(vm.candidates).toEqual(before.candidates);
    expect(vm.errors).toHaveLength(1);
    expect(vm.errors[0]!.requestType).toBe("select_plan");
  });
});
