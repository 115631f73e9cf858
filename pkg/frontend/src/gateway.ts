/**
 * TCP client for the pump gateway.  One connection serves request/response
 * traffic; a second, dedicated connection carries the server-push event
 * stream (at most one live subscription per session).  Stream frames are
 * deduplicated by event_id so reconnect replays are harmless.
 */

import * as net from "node:net";
import * as readline from "node:readline";
import {
  DoseResult,
  EpisodesPayload,
  GatewayResponse,
  PrescriptionDoc,
  ProfilePayload,
  StatusPayload,
  StreamFrame,
} from "./protocol.js";

export type StreamListener = (frame: StreamFrame) => void;

interface Pending {
  resolve: (resp: GatewayResponse) => void;
  reject: (err: Error) => void;
}

export class GatewayClient {
  private socket: net.Socket | null = null;
  private pending = new Map<string, Pending>();
  private nextId = 1;

  private streamSocket: net.Socket | null = null;
  private listeners: StreamListener[] = [];
  private streamCloseListeners: (() => void)[] = [];
  lastEventId = 0;

  constructor(
    readonly host: string,
    readonly port: number,
    readonly timeoutMs = 10_000,
  ) {}

  async connect(): Promise<void> {
    this.socket = await this.dial();
    const rl = readline.createInterface({ input: this.socket });
    rl.on("line", (line) => this.onResponseLine(line));
    this.socket.on("close", () => this.failAllPending(new Error("connection closed")));
  }

  private dial(): Promise<net.Socket> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection(
        { host: this.host, port: this.port },
        () => resolve(socket),
      );
      socket.setTimeout(this.timeoutMs, () => socket.destroy(new Error("timeout")));
      socket.on("error", reject);
    });
  }

  private onResponseLine(line: string): void {
    if (!line.trim()) return;
    let frame: GatewayResponse;
    try {
      frame = JSON.parse(line);
    } catch {
      return;
    }
    const waiter = frame.id != null ? this.pending.get(frame.id) : undefined;
    if (waiter && frame.id != null) {
      this.pending.delete(frame.id);
      waiter.resolve(frame);
    }
  }

  private failAllPending(err: Error): void {
    for (const waiter of this.pending.values()) waiter.reject(err);
    this.pending.clear();
  }

  request<T extends GatewayResponse>(frame: Record<string, unknown>): Promise<T> {
    if (!this.socket) return Promise.reject(new Error("not connected"));
    const id = frame.id != null ? String(frame.id) : `c${this.nextId++}`;
    const body = JSON.stringify({ ...frame, id }) + "\n";
    return new Promise<T>((resolve, reject) => {
      const timer = setTimeout(
        () => {
          this.pending.delete(id);
          reject(new Error(`request ${id} timed out`));
        },
        this.timeoutMs,
      );
      this.pending.set(id, {
        resolve: (resp) => {
          clearTimeout(timer);
          resolve(resp as T);
        },
        reject: (err) => {
          clearTimeout(timer);
          reject(err);
        },
      });
      this.socket!.write(body);
    });
  }

  // -- reads ---------------------------------------------------------------

  getStatus(): Promise<StatusPayload> {
    return this.request<StatusPayload>({ op: "get_status" });
  }

  getEpisodes(): Promise<EpisodesPayload> {
    return this.request<EpisodesPayload>({ op: "get_episodes" });
  }

  getProfile(): Promise<ProfilePayload> {
    return this.request<ProfilePayload>({ op: "get_profile" });
  }

  async getPrescription(): Promise<PrescriptionDoc> {
    const resp = await this.request<GatewayResponse>({ op: "get_prescription" });
    return resp.prescription as PrescriptionDoc;
  }

  // -- stream ---------------------------------------------------------------

  onStream(listener: StreamListener): void {
    this.listeners.push(listener);
  }

  onStreamClose(listener: () => void): void {
    this.streamCloseListeners.push(listener);
  }

  /** Open (or reopen) the dedicated stream connection. Replayed events the
   * client has already seen are dropped by event_id. */
  async subscribe(): Promise<void> {
    if (this.streamSocket) {
      this.streamSocket.destroy();
      this.streamSocket = null;
    }
    const socket = await this.dial();
    this.streamSocket = socket;
    socket.on("close", () => {
      if (this.streamSocket === socket) {
        for (const listener of this.streamCloseListeners) listener();
      }
    });
    const rl = readline.createInterface({ input: socket });
    let acked = false;
    await new Promise<void>((resolve, reject) => {
      rl.on("line", (line) => {
        if (!line.trim()) return;
        let frame: Record<string, unknown>;
        try {
          frame = JSON.parse(line);
        } catch {
          return;
        }
        if (!acked) {
          acked = true;
          if (!(frame as GatewayResponse).ok) {
            reject(new Error("subscription refused"));
            return;
          }
          resolve();
          return;
        }
        this.onStreamFrame(frame as unknown as StreamFrame);
      });
      socket.on("error", (err) => {
        if (!acked) reject(err);
      });
      socket.write(
        JSON.stringify({ id: "sub", op: "subscribe_stream", since: this.lastEventId }) +
          "\n",
      );
    });
  }

  private onStreamFrame(frame: StreamFrame): void {
    if (typeof frame.event_id !== "number") return;
    if (frame.event_id <= this.lastEventId) return; // duplicate after reconnect
    this.lastEventId = frame.event_id;
    for (const listener of this.listeners) listener(frame);
  }

  close(): void {
    this.failAllPending(new Error("client closed"));
    this.socket?.destroy();
    this.streamSocket?.destroy();
    this.socket = null;
    this.streamSocket = null;
  }
}
