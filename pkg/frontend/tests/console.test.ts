/**
 * End-to-end console tests against the real pump gateway service, spawned
 * as a subprocess.  These exercise exactly the surfaces the console uses:
 * the request/response ops and the server-push stream.
 */

import { ChildProcess, spawn } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

const HERE = path.dirname(fileURLToPath(import.meta.url));
import { manualDose } from "../src/actions.js";
import { GatewayClient } from "../src/gateway.js";
import { DashboardModel } from "../src/model.js";
import { StreamFrame } from "../src/protocol.js";
import { renderDashboard } from "../src/render.js";

const PRESCRIPTION = {
  prescription_version: 1,
  dose_ml: 5.0,
  max_doses_per_day: 3,
  min_interdose_interval_s: 21600.0,
  daily_max_ml: 15.0,
  mode: "PrescriptionBased",
  fixed_times: ["08:00", "14:00", "20:00"],
  lead_time_s: 1800.0,
};

let server: ChildProcess;
let host = "127.0.0.1";
let port = 0;

function startServer(): Promise<void> {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "cardioloop-console-"));
  const rxPath = path.join(dir, "rx.json");
  fs.writeFileSync(rxPath, JSON.stringify(PRESCRIPTION));
  server = spawn(
    "python3",
    ["-m", "cardioloop.cli", "serve-pump", "--bind", "127.0.0.1:0",
     "--prescription", rxPath, "--step-time", "0"],
    { cwd: path.join(HERE, "..", ".."), stdio: ["ignore", "ignore", "pipe"] },
  );
  return new Promise((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("server did not start")), 15_000);
    let buffer = "";
    server.stderr!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/listening on ([\d.]+):(\d+)/);
      if (match) {
        clearTimeout(timer);
        host = match[1];
        port = Number(match[2]);
        resolve();
      }
    });
    server.on("error", reject);
  });
}

function waitFor(predicate: () => boolean, ms = 5000): Promise<void> {
  const start = Date.now();
  return new Promise((resolve, reject) => {
    const tick = () => {
      if (predicate()) return resolve();
      if (Date.now() - start > ms) return reject(new Error("condition timed out"));
      setTimeout(tick, 20);
    };
    tick();
  });
}

beforeAll(async () => {
  await startServer();
}, 30_000);

afterAll(() => {
  server?.kill();
});

describe("console round-trip", () => {
  it("shows a fresh idle system", async () => {
    const gateway = new GatewayClient(host, port);
    await gateway.connect();
    const model = new DashboardModel();
    model.applyStatus(await gateway.getStatus());
    expect(model.pump?.status).toBe("Idle");
    expect(model.stage).toBe("Screening");
    expect(model.ledger?.delivered_today).toEqual([]);
    const text = renderDashboard(model);
    expect(text).toContain("pump: Idle");
    expect(text).toContain("0/3 doses today");
    gateway.close();
  });

  it("surfaces the server rejection reason verbatim", async () => {
    const gateway = new GatewayClient(host, port);
    await gateway.connect();
    const model = new DashboardModel();
    gateway.onStream((frame) => model.applyStream(frame));
    await gateway.subscribe();
    model.applyStatus(await gateway.getStatus());

    const outcome = await manualDose(gateway, 20.0, "console-dose-too-big");
    expect(outcome.ok).toBe(false);
    expect(outcome.reason).toBe("daily-max-volume");

    await waitFor(() => model.lastRejection !== null);
    expect(model.lastRejection?.reason).toBe("daily-max-volume");
    expect(renderDashboard(model)).toContain("daily-max-volume");
    gateway.close();
  });

  it("manual dose lands in the ledger within one stream update", async () => {
    const gateway = new GatewayClient(host, port);
    await gateway.connect();
    const model = new DashboardModel();
    const frames: StreamFrame[] = [];
    gateway.onStream((frame) => {
      frames.push(frame);
      model.applyStream(frame);
    });
    await gateway.subscribe();
    model.applyStatus(await gateway.getStatus());

    const outcome = await manualDose(gateway, 5.0, "console-dose-1");
    expect(outcome.ok).toBe(true);
    expect(outcome.deliveredMl).toBeGreaterThan(4.9);

    await waitFor(() => frames.some((f) => f.event === "delivery"));
    expect(frames.some((f) => f.event === "authorization")).toBe(true);
    expect(model.ledger?.doses_today).toBe(1);
    expect(model.ledger?.delivered_today.length).toBe(1);

    // the pushed ledger matches the authoritative gateway state
    const status = await gateway.getStatus();
    expect(status.ledger.doses_today).toBe(1);
    expect(model.ledger?.volume_today_ml).toBeCloseTo(
      status.ledger.volume_today_ml, 9);

    const text = renderDashboard(model);
    expect(text).toContain("1/3 doses today");
    gateway.close();
  });

  it("deduplicates replayed events across reconnects", async () => {
    const gateway = new GatewayClient(host, port);
    await gateway.connect();
    const seen: number[] = [];
    gateway.onStream((frame) => seen.push(frame.event_id));
    await gateway.subscribe();

    await gateway.request({ op: "inject_detection", class: "BRADY", confidence: 0.9 });
    await waitFor(() => seen.length >= 1);
    const afterFirst = seen.length;

    // reconnect: server replays its buffer, client must drop known ids
    await gateway.subscribe();
    await gateway.request({ op: "inject_detection", class: "BRADY", confidence: 0.9 });
    await waitFor(() => seen.length > afterFirst);

    const unique = new Set(seen);
    expect(unique.size).toBe(seen.length);
    const sorted = [...seen].sort((a, b) => a - b);
    expect(seen).toEqual(sorted);
    gateway.close();
  });
});
