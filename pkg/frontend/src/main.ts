/**
 * Interactive console: connects to a running pump gateway, renders the live
 * dashboard on every pushed event (server-pushed model; no fast polling),
 * and accepts operator commands on stdin:
 *
 *   dose [ml]        request a manual dose (defaults to the prescribed unit)
 *   approve <id>     approve a pending predictive dose
 *   deny <id>        deny a pending predictive dose
 *   rx <file.json>   upload a prescription document
 *   report-complete  mark data collection finished
 *   quit
 *
 * Usage: node dist/main.js [host:port]   (default 127.0.0.1:7420)
 */

import * as fs from "node:fs";
import * as readline from "node:readline";
import { approveDose, denyDose, manualDose, markReportComplete, putPrescription } from "./actions.js";
import { GatewayClient } from "./gateway.js";
import { DashboardModel } from "./model.js";
import { PrescriptionDoc } from "./protocol.js";
import { renderDashboard } from "./render.js";

const RETRY_MS = 2000;

async function refresh(gateway: GatewayClient, model: DashboardModel): Promise<void> {
  model.applyStatus(await gateway.getStatus());
  const episodes = await gateway.getEpisodes();
  model.applyEpisodes(episodes.episodes, episodes.n_events);
  const profile = await gateway.getProfile();
  model.applyProfile(profile.hourly_mass, profile.n_episodes);
}

function draw(model: DashboardModel): void {
  console.clear();
  process.stdout.write(renderDashboard(model));
  process.stdout.write("> ");
}

async function connectWithRetry(host: string, port: number): Promise<GatewayClient> {
  for (;;) {
    const gateway = new GatewayClient(host, port);
    try {
      await gateway.connect();
      return gateway;
    } catch {
      console.error(`gateway unreachable at ${host}:${port}; retrying...`);
      await new Promise((r) => setTimeout(r, RETRY_MS));
    }
  }
}

async function main(): Promise<void> {
  const target = process.argv[2] ?? "127.0.0.1:7420";
  const [host, portText] = target.split(":");
  const gateway = await connectWithRetry(host || "127.0.0.1", Number(portText));
  const model = new DashboardModel();

  let dirty = false;
  gateway.onStream((frame) => {
    model.applyStream(frame);
    dirty = true;
  });
  gateway.onStreamClose(() => {
    model.offline = true;
    dirty = true;
    const retry = async () => {
      try {
        await gateway.subscribe(); // replays from lastEventId; ids dedup
        model.offline = false;
        await refresh(gateway, model);
        dirty = true;
      } catch {
        setTimeout(retry, RETRY_MS);
      }
    };
    setTimeout(retry, RETRY_MS);
  });
  setInterval(() => {
    if (dirty) {
      dirty = false;
      draw(model);
    }
  }, 1000); // never repaint faster than 1 Hz

  await gateway.subscribe();
  await refresh(gateway, model);
  draw(model);

  const rl = readline.createInterface({ input: process.stdin });
  rl.on("line", (line) => {
    void (async () => {
      const [cmd, ...rest] = line.trim().split(/\s+/);
      try {
        if (cmd === "dose") {
          const ml = rest[0] ? Number(rest[0]) : undefined;
          const outcome = await manualDose(gateway, ml);
          if (!outcome.ok) model.lastRejection = {
            reason: outcome.reason ?? "unknown",
            ml: ml ?? model.ledger?.dose_ml ?? 0,
          };
        } else if (cmd === "approve" && rest[0]) {
          await approveDose(gateway, rest[0]);
        } else if (cmd === "deny" && rest[0]) {
          await denyDose(gateway, rest[0]);
        } else if (cmd === "rx" && rest[0]) {
          const doc = JSON.parse(fs.readFileSync(rest[0], "utf-8")) as PrescriptionDoc;
          const outcome = await putPrescription(gateway, doc);
          if (!outcome.ok && outcome.violations) {
            console.error(`prescription rejected: ${outcome.violations.join(", ")}`);
          }
        } else if (cmd === "report-complete") {
          await markReportComplete(gateway);
        } else if (cmd === "quit") {
          gateway.close();
          process.exit(0);
        }
        await refresh(gateway, model);
        draw(model);
      } catch (err) {
        console.error(String(err));
      }
    })();
  });
}

void main();
