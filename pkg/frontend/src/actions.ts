/**
 * Operator actions.  Every mutation goes through the gateway; rejection
 * reasons come back verbatim from the dosing/pump layer and are surfaced
 * unchanged.
 */

import { GatewayClient } from "./gateway.js";
import { DoseResult, GatewayResponse, PrescriptionDoc } from "./protocol.js";

export interface ActionOutcome {
  ok: boolean;
  reason?: string;
  deliveredMl?: number;
  violations?: string[];
  stage?: string;
}

function doseOutcome(resp: DoseResult): ActionOutcome {
  return {
    ok: resp.ok,
    reason: typeof resp.error === "string" ? resp.error : undefined,
    deliveredMl: resp.delivered_ml,
  };
}

export async function manualDose(
  gateway: GatewayClient,
  ml?: number,
  requestId?: string,
): Promise<ActionOutcome> {
  const frame: Record<string, unknown> = { op: "manual_dose" };
  if (ml != null) frame.ml = ml;
  if (requestId != null) frame.id = requestId;
  return doseOutcome(await gateway.request<DoseResult>(frame));
}

export async function approveDose(
  gateway: GatewayClient,
  doseId: string,
): Promise<ActionOutcome> {
  return doseOutcome(
    await gateway.request<DoseResult>({ op: "approve_dose", dose_id: doseId }),
  );
}

export async function denyDose(
  gateway: GatewayClient,
  doseId: string,
): Promise<ActionOutcome> {
  const resp = await gateway.request<GatewayResponse>({
    op: "deny_dose",
    dose_id: doseId,
  });
  return { ok: resp.ok, reason: resp.error as string | undefined };
}

/** Update the prescription; when the pathway sits in ClinicianReview this is
 * the prescription-issued event and advances it to TimedDelivery. */
export async function putPrescription(
  gateway: GatewayClient,
  doc: PrescriptionDoc,
): Promise<ActionOutcome> {
  const resp = await gateway.request<GatewayResponse>({
    op: "put_prescription",
    prescription: doc,
  });
  return {
    ok: resp.ok,
    reason: resp.error as string | undefined,
    violations: (resp.violations as string[] | undefined) ?? undefined,
    stage: resp.stage as string | undefined,
  };
}

export async function markReportComplete(
  gateway: GatewayClient,
): Promise<ActionOutcome> {
  const resp = await gateway.request<GatewayResponse>({ op: "report_complete" });
  return {
    ok: resp.ok,
    reason: resp.error as string | undefined,
    stage: resp.stage as string | undefined,
  };
}
