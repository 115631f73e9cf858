/**
 * Plain-text dashboard rendering: pump state, pathway stage, detection
 * stream tail, episode table, circadian histogram, and today's dose ledger
 * against the prescription limits.
 */

import { DashboardModel } from "./model.js";

function hhmm(ts: number): string {
  const s = Math.floor(ts % 86_400);
  const h = Math.floor(s / 3600);
  const m = Math.floor((s % 3600) / 60);
  return `${String(h).padStart(2, "0")}:${String(m).padStart(2, "0")}`;
}

export function renderDashboard(model: DashboardModel): string {
  const lines: string[] = [];
  lines.push("== cardioloop console ==");
  if (model.offline) {
    lines.push("!! gateway offline - retrying !!");
  }

  const pump = model.pump;
  lines.push(
    pump
      ? `pump: ${pump.status}  plunger ${pump.plunger_mm.toFixed(2)} mm  ` +
          `remaining ${pump.remaining_ml.toFixed(3)} / ${pump.capacity_ml.toFixed(3)} mL`
      : "pump: (no data)",
  );
  lines.push(`stage: ${model.stage}`);

  const ledger = model.ledger;
  if (ledger) {
    lines.push(
      `ledger: ${ledger.doses_today}/${ledger.max_doses_per_day} doses today, ` +
        `${ledger.volume_today_ml.toFixed(2)}/${ledger.daily_max_ml.toFixed(2)} mL`,
    );
    for (const [ts, ml] of ledger.delivered_today) {
      lines.push(`  - ${hhmm(ts)}  ${ml.toFixed(3)} mL`);
    }
  }
  if (model.lastRejection) {
    lines.push(
      `last rejection: ${model.lastRejection.reason} ` +
        `(${model.lastRejection.ml.toFixed(2)} mL)`,
    );
  }

  if (model.pending.length > 0) {
    lines.push("pending doses:");
    for (const p of model.pending) {
      lines.push(`  [${p.dose_id}] ${p.ml.toFixed(2)} mL at ${hhmm(p.ts)}`);
    }
  }

  lines.push(`episodes (${model.episodes.length}):`);
  for (const row of model.episodes.slice(-8)) {
    lines.push(
      `  ${hhmm(row.start)} - ${hhmm(row.end)}  ${row.class}  ` +
        `${row.duration_s.toFixed(0)} s`,
    );
  }

  if (model.nEpisodes > 0) {
    lines.push(`circadian histogram (${model.nEpisodes} episodes):`);
    model.hourlyMass.forEach((mass, hour) => {
      if (mass > 0) {
        const bar = "#".repeat(Math.max(1, Math.round(mass * 40)));
        lines.push(`  ${String(hour).padStart(2, "0")}h ${bar}`);
      }
    });
  }

  if (model.detections.length > 0) {
    lines.push("detections:");
    for (const d of model.detections) {
      lines.push(
        `  ${hhmm(d.ts)} ${d.source} ${d.klass} ` +
          `conf=${d.confidence.toFixed(2)}`,
      );
    }
  }
  return lines.join("\n") + "\n";
}
