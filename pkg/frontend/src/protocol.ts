/**
 * Wire types for the pump gateway: newline-delimited JSON frames over TCP.
 * Requests carry an "op" (or low-level "cmd"); every response echoes the
 * request id.  A subscribed connection receives stream frames with
 * monotonically increasing event ids.
 */

export interface GatewayResponse {
  id: string | null;
  ok: boolean;
  error?: string;
  latency_ms?: number;
  [key: string]: unknown;
}

export interface PumpStatus {
  status: "Idle" | "Delivering" | "Fault";
  plunger_mm: number;
  remaining_ml: number;
  capacity_ml: number;
  step_volume_ml: number;
}

export interface Ledger {
  delivered_today: [number, number][];
  doses_today: number;
  volume_today_ml: number;
  daily_max_ml: number;
  max_doses_per_day: number;
  min_interdose_interval_s: number;
  dose_ml: number;
  last_dose_ts: number | null;
}

export interface PendingDose {
  dose_id: string;
  ml: number;
  ts: number;
}

export interface StatusPayload extends GatewayResponse {
  pump: PumpStatus;
  stage: string;
  ledger: Ledger;
  pending: PendingDose[];
  now: number;
}

export interface EpisodeRow {
  start: number;
  end: number;
  class: string;
  duration_s: number;
}

export interface EpisodesPayload extends GatewayResponse {
  episodes: EpisodeRow[];
  n_events: number;
}

export interface ProfilePayload extends GatewayResponse {
  hourly_mass: number[];
  n_episodes: number;
}

export interface PrescriptionDoc {
  prescription_version: number;
  dose_ml: number;
  max_doses_per_day: number;
  min_interdose_interval_s: number;
  daily_max_ml: number;
  mode: "PrescriptionBased" | "PredictionBased";
  fixed_times: string[];
  lead_time_s: number;
}

export interface DoseResult extends GatewayResponse {
  delivered_ml?: number;
  steps?: number;
}

export type StreamEventKind =
  | "detection"
  | "transition"
  | "authorization"
  | "delivery"
  | "pending";

export interface StreamFrame {
  event: StreamEventKind;
  event_id: number;
  ts?: number;
  [key: string]: unknown;
}
