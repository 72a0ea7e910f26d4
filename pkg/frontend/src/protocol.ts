/**
 * Wire types for the session protocol (newline-delimited JSON, v=1).
 *
 * Schemas are validated with zod at the transport boundary so the rest
 * of the console can trust message shapes.  Extra fields are passed
 * through: the server may add reply fields without breaking old
 * consoles.
 */
import { z } from "zod";

export const PROTOCOL_VERSION = 1;

export const STAGES = [
  "idle",
  "planned",
  "navigating",
  "aiming",
  "aligned",
  "steering",
  "done",
  "aborted",
] as const;
export type Stage = (typeof STAGES)[number];
export const stageSchema = z.enum(STAGES);

const vec3 = z.tuple([z.number(), z.number(), z.number()]);
export type Vec3 = z.infer<typeof vec3>;

// ---------------------------------------------------------------- requests

export type RequestType =
  | "hello"
  | "load_scene"
  | "request_plans"
  | "select_plan"
  | "aim"
  | "query_alignment"
  | "start_autonomous"
  | "request_hold"
  | "abort"
  | "get_record"
  | "get_state";

export interface Request {
  v: number;
  type: RequestType;
  id: number;
  [key: string]: unknown;
}

export function makeRequest(
  type: RequestType,
  id: number,
  fields: Record<string, unknown> = {},
): Request {
  return { v: PROTOCOL_VERSION, type, id, ...fields };
}

// ----------------------------------------------------------------- replies

export const replyOkSchema = z
  .object({
    v: z.literal(PROTOCOL_VERSION),
    re: z.number().nullable(),
    ok: z.literal(true),
  })
  .passthrough();

export const replyErrSchema = z
  .object({
    v: z.literal(PROTOCOL_VERSION),
    re: z.number().nullable(),
    ok: z.literal(false),
    error: z.string(),
    detail: z.unknown().optional(),
    stage: stageSchema.optional(),
  })
  .passthrough();

export const replySchema = z.union([replyOkSchema, replyErrSchema]);
export type Reply = z.infer<typeof replySchema>;

// ------------------------------------------------------------------ events

export const planSummarySchema = z
  .object({
    index: z.number().int(),
    cost: z.number(),
    length_mm: z.number(),
    route: z.array(z.number().int()),
    min_clearance_mm: z.number().nullable(),
    piercing_point: vec3,
    target: vec3,
  })
  .passthrough();
export type PlanSummary = z.infer<typeof planSummarySchema>;

const capsule = z.object({ a: vec3, b: vec3, r: z.number() });

export const geometrySchema = z
  .object({
    pleura: z.object({ center: vec3, semi_axes: vec3 }),
    airways: z.array(capsule),
    vessels: z.array(capsule),
    target_regions: z.array(z.object({ lo: vec3, hi: vec3 })),
    fiducials: z.array(vec3),
  })
  .passthrough();
export type SceneGeometry = z.infer<typeof geometrySchema>;

const eventBase = { v: z.literal(PROTOCOL_VERSION) };

export const stageEventSchema = z
  .object({ ...eventBase, event: z.literal("stage"), stage: stageSchema })
  .passthrough();

export const sceneEventSchema = z
  .object({ ...eventBase, event: z.literal("scene"), geometry: geometrySchema })
  .passthrough();

export const plansEventSchema = z
  .object({
    ...eventBase,
    event: z.literal("plans"),
    candidates: z.array(planSummarySchema),
  })
  .passthrough();

export const navigationEventSchema = z
  .object({
    ...eventBase,
    event: z.literal("navigation"),
    route: z.array(z.number().int()),
    plan: planSummarySchema,
    path: z.array(vec3),
  })
  .passthrough();

export const aimEventSchema = z
  .object({
    ...eventBase,
    event: z.literal("aim"),
    tip: vec3,
    heading: vec3,
    heading_error: z.number(),
  })
  .passthrough();

export const tickEventSchema = z
  .object({
    ...eventBase,
    event: z.literal("tick"),
    t: z.number(),
    meas: vec3,
    window_open: z.boolean(),
    traj_err: z.number(),
    inserted_mm: z.number(),
    progress: z.number(),
  })
  .passthrough();

export const resultEventSchema = z
  .object({
    ...eventBase,
    event: z.literal("result"),
    status: z.string(),
    targeting_error_mm: z.number().nullable(),
    adverse_events: z.array(z.unknown()),
  })
  .passthrough();

export const eventSchema = z.discriminatedUnion("event", [
  stageEventSchema,
  sceneEventSchema,
  plansEventSchema,
  navigationEventSchema,
  aimEventSchema,
  tickEventSchema,
  resultEventSchema,
]);
export type ServerEvent = z.infer<typeof eventSchema>;

export const serverMessageSchema = z.union([eventSchema, replySchema]);
export type ServerMessage = z.infer<typeof serverMessageSchema>;

/** Parse one NDJSON line from the server; throws on schema violations. */
export function parseServerLine(line: string): ServerMessage {
  return serverMessageSchema.parse(JSON.parse(line));
}

export function isEvent(msg: ServerMessage): msg is ServerEvent {
  return "event" in msg;
}
