/**
 * refclient conformance --portal <http base> --suite <file>
 * refclient demo --portal <http base> [--service detect|mapper]
 */

import { ConnectionError } from "./client.js";
import { runConformance } from "./conformance.js";
import { runDemo } from "./demo.js";

function flag(name: string, fallback?: string): string {
  const index = process.argv.indexOf(`--${name}`);
  if (index >= 0 && index + 1 < process.argv.length) {
    return process.argv[index + 1];
  }
  if (fallback !== undefined) return fallback;
  console.error(`missing --${name}`);
  process.exit(2);
}

async function main(): Promise<number> {
  const command = process.argv[2];
  if (command === "conformance") {
    const portal = flag("portal", "http://127.0.0.1:8008");
    const suite = flag("suite", "../conformance/suite.json");
    const results = await runConformance(portal, suite);
    for (const result of results) {
      console.log(`${result.pass ? "PASS" : "FAIL"}  ${result.name}` +
                  (result.detail ? `  ${result.detail}` : ""));
    }
    const failed = results.filter((r) => !r.pass).length;
    console.log(`${results.length - failed}/${results.length} cases passed`);
    return failed === 0 ? 0 : 1;
  }
  if (command === "demo") {
    const portal = flag("portal", "http://127.0.0.1:8008");
    const service = flag("service", "detect");
    const lines = await runDemo(portal, service);
    for (const line of lines) console.log(line);
    return 0;
  }
  console.error("usage: refclient <conformance|demo> --portal <url> [--suite <file>] [--service <name>]");
  return 2;
}

main()
  .then((code) => process.exit(code))
  .catch((err) => {
    if (err instanceof ConnectionError) {
      console.error(`connection failed: ${err.message}`);
    } else {
      console.error(String(err));
    }
    process.exit(2);
  });
