/**
 * Demo session: fetch the stub descriptor over REST, negotiate the service
 * over the socket, fire five calls, and report per-request latencies.
 */

import { performance } from "node:perf_hooks";

import { WireClient, wsUrl } from "./client.js";
import {
  Compression,
  Envelope,
  encodeEnvelope,
  gridMap,
  imageRgb,
  makePayload,
  payloadBody,
} from "./protocol.js";

interface Descriptor {
  service: string;
  stateful: boolean;
  compression_policy: Record<string, string>;
  interface: {
    rpcs: Array<{ name: string; request_schema: string; response_schema: string }>;
  };
}

const SLA: Record<string, { t_desire_ms: number; t_max_ms: number }> = {
  detect: { t_desire_ms: 100, t_max_ms: 300 },
  mapper: { t_desire_ms: 400, t_max_ms: 800 },
};

function requestBody(schema: string, i: number): Buffer {
  if (schema === "image_rgb") return imageRgb(16, 16, i);
  if (schema === "grid_map") return gridMap(8, 8, i + 1);
  return Buffer.from(`request-${i}`);
}

export async function runDemo(portalBase: string, service: string): Promise<string[]> {
  const lines: string[] = [];
  const response = await fetch(`${portalBase}/stubs/${service}`);
  if (!response.ok) {
    throw new Error(`no stub descriptor for ${service}: HTTP ${response.status}`);
  }
  const descriptor = (await response.json()) as Descriptor;
  const rpc = descriptor.interface.rpcs[0];
  const codec = (descriptor.compression_policy[rpc.request_schema] ?? "none") as Compression;
  lines.push(`service ${descriptor.service}: rpc ${rpc.name}` +
             ` (${rpc.request_schema} -> ${rpc.response_schema}, ${codec})`);

  const client = await WireClient.connect(wsUrl(portalBase));
  try {
    const sla = SLA[service] ?? { t_desire_ms: 500, t_max_ms: 1500 };
    client.send(encodeEnvelope({
      op: "request_service", id: "demo-grant", target: service, sla: { times: sla },
    }));
    const grant = (await client.nextFrame()) as Envelope;
    if (grant.op !== "service_granted") {
      throw new Error(`grant refused: ${JSON.stringify(grant)}`);
    }
    const servant = JSON.parse(payloadBody(grant.payload!).toString()) as {
      servant_id: string;
    };
    lines.push(`granted servant ${servant.servant_id}`);

    for (let i = 0; i < 5; i++) {
      const body = requestBody(rpc.request_schema, i);
      const began = performance.now();
      client.send(encodeEnvelope({
        op: "call", id: `demo-${i}`, target: rpc.name,
        payload: makePayload(rpc.request_schema, body, codec),
      }));
      let reply = (await client.nextFrame()) as Envelope;
      // stateful packages may publish topic updates between responses
      while (reply.op === "publish") {
        reply = (await client.nextFrame()) as Envelope;
      }
      const rrt = performance.now() - began;
      if (reply.op !== "response" || reply.id !== `demo-${i}`) {
        throw new Error(`unexpected reply: ${JSON.stringify(reply)}`);
      }
      const preview = reply.payload ? payloadBody(reply.payload).toString("utf-8", 0, 120) : "";
      lines.push(`call ${i}: rrt ${rrt.toFixed(1)} ms, result ${preview}`);
    }
  } finally {
    client.close();
  }
  return lines;
}
