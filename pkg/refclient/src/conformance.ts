/**
 * Conformance suite runner: each case opens a fresh connection, sends the
 * recorded frames verbatim, and matches the replies in order. "exact"
 * matchers compare parsed JSON deep-equal; "fields" matchers compare only
 * the listed dotted paths.
 */

import { readFileSync } from "node:fs";

import { WireClient, wsUrl } from "./client.js";

export interface Matcher {
  match: "exact" | "fields";
  frame?: unknown;
  fields?: Record<string, unknown>;
}

export interface ConformanceCase {
  name: string;
  send: string[];
  expect: Matcher[];
}

export interface Suite {
  suite: string;
  version: number;
  semantics: { timeout_ms: number };
  cases: ConformanceCase[];
}

export interface CaseResult {
  name: string;
  pass: boolean;
  detail: string;
}

export function loadSuite(path: string): Suite {
  return JSON.parse(readFileSync(path, "utf-8")) as Suite;
}

export function lookup(doc: unknown, dotted: string): unknown {
  let value: unknown = doc;
  for (const part of dotted.split(".")) {
    if (value === null || typeof value !== "object") return undefined;
    value = (value as Record<string, unknown>)[part];
  }
  return value;
}

export function deepEqual(a: unknown, b: unknown): boolean {
  if (a === b) return true;
  if (Array.isArray(a) && Array.isArray(b)) {
    return a.length === b.length && a.every((item, i) => deepEqual(item, b[i]));
  }
  if (a !== null && b !== null && typeof a === "object" && typeof b === "object") {
    const ka = Object.keys(a as object).sort();
    const kb = Object.keys(b as object).sort();
    if (!deepEqual(ka, kb)) return false;
    return ka.every((k) =>
      deepEqual((a as Record<string, unknown>)[k], (b as Record<string, unknown>)[k]));
  }
  return false;
}

export function matches(matcher: Matcher, frame: unknown): boolean {
  if (matcher.match === "exact") {
    return deepEqual(frame, matcher.frame);
  }
  return Object.entries(matcher.fields ?? {}).every(
    ([path, expected]) => deepEqual(lookup(frame, path), expected));
}

export async function runCase(
  portalBase: string,
  test: ConformanceCase,
  timeoutMs: number,
): Promise<CaseResult> {
  const client = await WireClient.connect(wsUrl(portalBase));
  try {
    for (const raw of test.send) {
      client.send(raw);
    }
    for (let i = 0; i < test.expect.length; i++) {
      let frame: unknown;
      try {
        frame = await client.nextFrame(timeoutMs);
      } catch (err) {
        return { name: test.name, pass: false, detail: `frame ${i}: ${err}` };
      }
      if (!matches(test.expect[i], frame)) {
        return {
          name: test.name,
          pass: false,
          detail: `frame ${i}: wanted ${JSON.stringify(test.expect[i])}, ` +
                  `got ${JSON.stringify(frame)}`,
        };
      }
    }
    return { name: test.name, pass: true, detail: "" };
  } finally {
    client.close();
  }
}

export async function runConformance(
  portalBase: string,
  suitePath: string,
): Promise<CaseResult[]> {
  const suite = loadSuite(suitePath);
  const timeout = suite.semantics?.timeout_ms ?? 5000;
  const results: CaseResult[] = [];
  for (const test of suite.cases) {
    results.push(await runCase(portalBase, test, timeout));
  }
  return results;
}
