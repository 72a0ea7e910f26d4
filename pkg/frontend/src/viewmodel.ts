/**
 * Pure view state reducer for the procedure console.
 *
 * The console is stateless with respect to truth: every displayed
 * quantity originates from a server reply or event.  The reducer also
 * sees outgoing requests (to correlate replies by id), but outgoing
 * messages never change displayed state on their own — no optimistic
 * simulation.
 */
import {
  isEvent,
  type PlanSummary,
  type Reply,
  type Request,
  type SceneGeometry,
  type ServerMessage,
  type Stage,
  type Vec3,
} from "./protocol.js";

export interface TickSample {
  t: number;
  meas: Vec3;
  windowOpen: boolean;
  trajErr: number;
  insertedMm: number;
  progress: number;
}

export interface ErrorToast {
  requestId: number | null;
  requestType: string | null;
  error: string;
  detail?: unknown;
  stage?: Stage;
}

export interface ViewModel {
  /** Always equals the stage of the last server stage event. */
  stage: Stage;
  /** Green iff the last query_alignment reply said aligned=true. */
  aligned: boolean;
  headingError: number | null;
  sceneHash: string | null;
  geometry: SceneGeometry | null;
  candidates: PlanSummary[];
  selectedPlan: PlanSummary | null;
  plannedPath: Vec3[];
  tip: Vec3 | null;
  ticks: TickSample[];
  gate: Record<string, unknown> | null;
  result: { status: string; targetingErrorMm: number | null } | null;
  record: Record<string, unknown> | null;
  errors: ErrorToast[];
  /** id -> request type, for correlating replies. */
  pending: Record<number, string>;
}

export function initialViewModel(): ViewModel {
  return {
    stage: "idle",
    aligned: false,
    headingError: null,
    sceneHash: null,
    geometry: null,
    candidates: [],
    selectedPlan: null,
    plannedPath: [],
    tip: null,
    ticks: [],
    gate: null,
    result: null,
    record: null,
    errors: [],
    pending: {},
  };
}

export type Action =
  | { dir: "send"; msg: Request }
  | { dir: "recv"; msg: ServerMessage };

export function reduce(vm: ViewModel, action: Action): ViewModel {
  if (action.dir === "send") {
    return {
      ...vm,
      pending: { ...vm.pending, [action.msg.id]: action.msg.type },
    };
  }
  const msg = action.msg;
  return isEvent(msg) ? reduceEvent(vm, msg) : reduceReply(vm, msg);
}

function reduceEvent(
  vm: ViewModel,
  ev: Extract<ServerMessage, { event: string }>,
): ViewModel {
  switch (ev.event) {
    case "stage":
      return { ...vm, stage: ev.stage };
    case "scene":
      return { ...vm, geometry: ev.geometry };
    case "plans":
      return { ...vm, candidates: ev.candidates };
    case "navigation":
      return { ...vm, selectedPlan: ev.plan, plannedPath: ev.path };
    case "aim":
      return { ...vm, tip: ev.tip, headingError: ev.heading_error };
    case "tick":
      return {
        ...vm,
        tip: ev.meas,
        ticks: [
          ...vm.ticks,
          {
            t: ev.t,
            meas: ev.meas,
            windowOpen: ev.window_open,
            trajErr: ev.traj_err,
            insertedMm: ev.inserted_mm,
            progress: ev.progress,
          },
        ],
      };
    case "result":
      return {
        ...vm,
        result: {
          status: ev.status,
          targetingErrorMm: ev.targeting_error_mm,
        },
      };
  }
}

function reduceReply(vm: ViewModel, reply: Reply): ViewModel {
  const requestType =
    reply.re !== null ? (vm.pending[reply.re] ?? null) : null;
  const pending = { ...vm.pending };
  if (reply.re !== null) delete pending[reply.re];

  if (!reply.ok) {
    const toast: ErrorToast = {
      requestId: reply.re,
      requestType,
      error: reply.error,
      ...(reply.detail !== undefined && { detail: reply.detail }),
      ...(reply.stage !== undefined && { stage: reply.stage }),
    };
    // server rejection: render the toast, change nothing else
    return { ...vm, pending, errors: [...vm.errors, toast] };
  }

  let next: ViewModel = { ...vm, pending };
  const r = reply as Record<string, unknown>;
  if (requestType === "load_scene" && typeof r.scene_hash === "string") {
    next = { ...next, sceneHash: r.scene_hash };
  }
  if (requestType === "query_alignment" && typeof r.aligned === "boolean") {
    next = {
      ...next,
      aligned: r.aligned,
      headingError:
        typeof r.heading_error === "number" ? r.heading_error : null,
    };
  }
  if (requestType === "aim" && typeof r.heading_error === "number") {
    next = { ...next, headingError: r.heading_error };
  }
  if (requestType === "request_hold" && typeof r.gate === "object") {
    next = { ...next, gate: r.gate as Record<string, unknown> };
  }
  if (requestType === "get_record" && typeof r.record === "object") {
    next = { ...next, record: r.record as Record<string, unknown> };
  }
  return next;
}

/** Client-side mirror of the server's stage guard (buttons disabled in
 * other stages; the server remains the authority). */
export const ALLOWED_STAGES: Record<string, Stage[] | null> = {
  load_scene: ["idle"],
  request_plans: ["idle"],
  select_plan: ["planned"],
  aim: ["aiming", "aligned"],
  query_alignment: ["aiming", "aligned"],
  start_autonomous: ["aligned"],
  request_hold: ["aligned", "steering"],
  abort: ["idle", "planned", "navigating", "aiming", "aligned", "steering"],
  get_record: ["done", "aborted"],
  get_state: null,
};

export function actionAllowed(vm: ViewModel, type: string): boolean {
  const stages = ALLOWED_STAGES[type];
  return stages === null || (stages?.includes(vm.stage) ?? false);
}
