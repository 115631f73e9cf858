/**
 * Dashboard read model.  Every number shown comes from a gateway field:
 * pushed stream frames update the live parts (detections, ledger, stage,
 * pending doses) and on-demand gets fill the rest.  No safety quantity is
 * recomputed client-side.
 */

import {
  EpisodeRow,
  Ledger,
  PendingDose,
  PumpStatus,
  StatusPayload,
  StreamFrame,
} from "./protocol.js";

export interface DetectionRow {
  ts: number;
  source: string;
  klass: string;
  confidence: number;
}

export interface LedgerRow {
  ts: number;
  ml: number;
}

const DETECTION_TAIL = 12;

export class DashboardModel {
  pump: PumpStatus | null = null;
  stage = "unknown";
  ledger: Ledger | null = null;
  pending: PendingDose[] = [];
  episodes: EpisodeRow[] = [];
  hourlyMass: number[] = new Array(24).fill(0);
  nEpisodes = 0;
  detections: DetectionRow[] = [];
  lastRejection: { reason: string; ml: number } | null = null;
  offline = false;

  applyStatus(status: StatusPayload): void {
    this.pump = status.pump;
    this.stage = status.stage;
    this.ledger = status.ledger;
    this.pending = status.pending ?? [];
  }

  applyEpisodes(rows: EpisodeRow[], _nEvents: number): void {
    this.episodes = rows;
  }

  applyProfile(hourlyMass: number[], nEpisodes: number): void {
    this.hourlyMass = hourlyMass;
    this.nEpisodes = nEpisodes;
  }

  applyStream(frame: StreamFrame): void {
    switch (frame.event) {
      case "detection": {
        this.detections.push({
          ts: frame.ts ?? 0,
          source: String(frame.source),
          klass: String(frame.class),
          confidence: Number(frame.confidence),
        });
        if (this.detections.length > DETECTION_TAIL) this.detections.shift();
        if (typeof frame.stage === "string") this.stage = frame.stage;
        break;
      }
      case "transition": {
        if (typeof frame.to === "string") this.stage = frame.to;
        break;
      }
      case "authorization": {
        if (frame.granted === false && typeof frame.reason === "string") {
          this.lastRejection = { reason: frame.reason, ml: Number(frame.ml) };
        }
        break;
      }
      case "delivery": {
        if (this.ledger) {
          const ts = frame.ts ?? 0;
          const ml = Number(frame.delivered_ml);
          this.ledger.delivered_today.push([ts, ml]);
          this.ledger.doses_today += 1;
          this.ledger.volume_today_ml += ml;
          this.ledger.last_dose_ts = ts;
        }
        if (this.pump && typeof frame.remaining_ml === "number") {
          this.pump.remaining_ml = frame.remaining_ml;
        }
        break;
      }
      case "pending": {
        if (frame.action === "added") {
          this.pending.push({
            dose_id: String(frame.dose_id),
            ml: Number(frame.ml),
            ts: frame.ts ?? 0,
          });
        } else {
          this.pending = this.pending.filter(
            (p) => p.dose_id !== String(frame.dose_id),
          );
        }
        break;
      }
    }
  }
}
