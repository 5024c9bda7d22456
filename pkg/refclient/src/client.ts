/** Thin ordered-frame WebSocket client used by the conformance runner and demo. */

import WebSocket from "ws";

export class ConnectionError extends Error {}

export class WireClient {
  private socket: WebSocket;
  private frames: unknown[] = [];
  private waiters: Array<(frame: unknown) => void> = [];
  private closed = false;
  private failure: Error | null = null;

  private constructor(socket: WebSocket) {
    this.socket = socket;
    socket.on("message", (data) => {
      const frame = JSON.parse(data.toString());
      const waiter = this.waiters.shift();
      if (waiter) {
        waiter(frame);
      } else {
        this.frames.push(frame);
      }
    });
    socket.on("close", () => {
      this.closed = true;
    });
    socket.on("error", (err) => {
      this.failure = err;
      this.closed = true;
    });
  }

  static connect(url: string, timeoutMs = 5000): Promise<WireClient> {
    return new Promise((resolve, reject) => {
      const socket = new WebSocket(url);
      const timer = setTimeout(() => {
        socket.terminate();
        reject(new ConnectionError(`no connection to ${url} within ${timeoutMs}ms`));
      }, timeoutMs);
      socket.once("open", () => {
        clearTimeout(timer);
        resolve(new WireClient(socket));
      });
      socket.once("error", (err) => {
        clearTimeout(timer);
        reject(new ConnectionError(`cannot reach ${url}: ${err.message}`));
      });
    });
  }

  send(rawFrame: string): void {
    if (this.closed) {
      throw new ConnectionError("connection is closed");
    }
    this.socket.send(rawFrame);
  }

  nextFrame(timeoutMs = 5000): Promise<unknown> {
    const queued = this.frames.shift();
    if (queued !== undefined) {
      return Promise.resolve(queued);
    }
    if (this.failure) {
      return Promise.reject(new ConnectionError(this.failure.message));
    }
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        const index = this.waiters.indexOf(waiter);
        if (index >= 0) this.waiters.splice(index, 1);
        reject(new Error(`no frame within ${timeoutMs}ms`));
      }, timeoutMs);
      const waiter = (frame: unknown) => {
        clearTimeout(timer);
        resolve(frame);
      };
      this.waiters.push(waiter);
    });
  }

  close(): void {
    this.closed = true;
    this.socket.close();
  }
}

/** ws://host:port/ws endpoint derived from the portal's HTTP base URL. */
export function wsUrl(portalBase: string): string {
  const url = new URL(portalBase);
  const scheme = url.protocol === "https:" ? "wss:" : "ws:";
  return `${scheme}//${url.host}/ws`;
}
