/**
 * End-to-end smoke against the real renderer service.
 *
 * Spawns the Python CLI in --serve mode on the bundled micro scene and
 * drives the viewer's controller layer (the same methods the DOM panels
 * bind) over real HTTP.
 */

import { spawn, ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ServiceClient } from "../src/api.js";
import { ViewerController } from "../src/controller.js";
import {
  base64ToBytes,
  decodePfm,
  decodePpm,
  luminancePercentile,
  maxSumDeviation,
  meanLuminance,
} from "../src/ppm.js";

const DOCUMENTED = [
  /^GET \/scene$/,
  /^PATCH \/scene\/lights\/[^/]+$/,
  /^PATCH \/scene\/objects\/[^/]+$/,
  /^PATCH \/scene\/materials\/[^/]+$/,
  /^PATCH \/scene\/camera$/,
  /^POST \/frame$/,
];

let proc: ChildProcess | null = null;
let base = "";
let client: ServiceClient;
let controller: ViewerController;

async function waitForService(url: string, timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const resp = await fetch(url + "/scene");
      if (resp.ok) return;
    } catch {
      /* not up yet */
    }
    if (Date.now() > deadline) throw new Error("service did not come up");
    if (proc && proc.exitCode !== null) {
      throw new Error(`service exited early with code ${proc.exitCode}`);
    }
    await new Promise((r) => setTimeout(r, 250));
  }
}

beforeAll(async () => {
  const port = 24680 + Math.floor(Math.random() * 2000);
  base = `http://127.0.0.1:${port}`;
  proc = spawn(
    "python3",
    ["-m", "splatlight.cli", "bundled:micro", "--serve", `127.0.0.1:${port}`,
     "--seed", "5", "--converge-frames", "6"],
    { stdio: ["ignore", "pipe", "pipe"], cwd: process.cwd() },
  );
  proc.stderr?.on("data", () => undefined);
  await waitForService(base, 90_000);
  client = new ServiceClient(base);
  controller = new ViewerController(client);
  const ok = await controller.connect();
  expect(ok).toBe(true);
}, 120_000);

afterAll(async () => {
  if (proc) {
    proc.kill("SIGINT");
    await new Promise((r) => setTimeout(r, 300));
    proc.kill("SIGKILL");
  }
});

describe("connect", () => {
  it("populates panels from the scene document", () => {
    const scene = controller.scene!;
    expect(Object.keys(scene.lights)).toContain("sun");
    expect(Object.keys(scene.objects)).toContain("blob");
    expect(scene.camera.resolution).toEqual([64, 64]);
  });
});

describe("edit-and-refresh loop", () => {
  it(
    "dimming a light drops mean luminance by >= 20% within 2 polled frames",
    async () => {
      // warm up the temporal history, then take the bright baseline
      let frame = await controller.pollFrame();
      frame = await controller.pollFrame();
      const bright = meanLuminance(decodePpm(frame.ppm));
      try {
        await controller.editLight("sun", { radiance: [0, 0, 0] });
        await controller.editsSettled();

        const f1 = await controller.pollFrame();
        const f2 = await controller.pollFrame();
        const dim = Math.min(
          meanLuminance(decodePpm(f1.ppm)),
          meanLuminance(decodePpm(f2.ppm)),
        );
        expect(dim).toBeLessThanOrEqual(bright * 0.8);
      } finally {
        await controller.editLight("sun", { radiance: [4.5, 4.3, 4.0] });
        await controller.editsSettled();
      }
    },
    120_000,
  );

  it(
    "lowering roughness sharpens highlights (top-percentile luminance)",
    async () => {
      async function settleAndMeasure(roughness: number): Promise<number> {
        await controller.editMaterial("blob", { roughness });
        await controller.editsSettled();
        let frame = await controller.pollFrame();
        for (let i = 0; i < 7; i++) frame = await controller.pollFrame();
        return luminancePercentile(decodePpm(frame.ppm), 99.8);
      }
      const sharp = await settleAndMeasure(0.03);
      const broad = await settleAndMeasure(0.97);
      expect(sharp).toBeGreaterThan(broad + 0.008);
    },
    240_000,
  );

  it("converged frames advance the index", async () => {
    const before = controller.lastFrameIndex;
    const frame = await controller.requestConverged();
    expect(frame.index).toBeGreaterThan(before);
  }, 120_000);
});

describe("decomposition view", () => {
  it(
    "the four layers sum to the composite within 1/255 per channel",
    async () => {
      const result = await controller.fetchDecomposition();
      const layers = Object.fromEntries(
        Object.entries(result.layers).map(([name, blob]) => [
          name,
          decodePfm(base64ToBytes(blob)),
        ]),
      );
      const composite = layers["composite"];
      const parts = ["emission", "direct", "indirect", "glossy"].map(
        (n) => layers[n],
      );
      expect(composite).toBeDefined();
      expect(parts.every(Boolean)).toBe(true);
      expect(maxSumDeviation(composite, parts)).toBeLessThanOrEqual(1 / 255);
    },
    120_000,
  );
});

describe("endpoint discipline", () => {
  it("the controller only ever touched documented endpoints", () => {
    for (const entry of client.log) {
      const key = `${entry.method} ${entry.path}`;
      expect(
        DOCUMENTED.some((re) => re.test(key)),
        `undocumented request: ${key}`,
      ).toBe(true);
    }
  });

  it("requests per entity never overlapped", () => {
    // edits to the same entity must be strictly sequential: each request's
    // start comes after the previous one's end
    const byKey = new Map<string, { startedAt: number; endedAt: number }[]>();
    for (const entry of client.log) {
      if (entry.method !== "PATCH") continue;
      const list = byKey.get(entry.path) ?? [];
      list.push(entry);
      byKey.set(entry.path, list);
    }
    for (const [, entries] of byKey) {
      for (let i = 1; i < entries.length; i++) {
        expect(entries[i].startedAt).toBeGreaterThan(entries[i - 1].endedAt);
      }
    }
  });
});
