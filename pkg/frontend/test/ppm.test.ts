import { describe, expect, it } from "vitest";

import {
  decodePfm,
  decodePpm,
  luminancePercentile,
  maxSumDeviation,
  meanLuminance,
  tonemapFloat,
} from "../src/ppm.js";

function makePpm(width: number, height: number, fill: number[]): Uint8Array {
  const header = new TextEncoder().encode(`P6\n${width} ${height}\n255\n`);
  const body = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) body.set(fill, i * 3);
  const out = new Uint8Array(header.length + body.length);
  out.set(header);
  out.set(body, header.length);
  return out;
}

function makePfm(width: number, height: number, values: number[]): Uint8Array {
  const header = new TextEncoder().encode(`PF\n${width} ${height}\n-1.0\n`);
  const body = new Float32Array(values);
  const out = new Uint8Array(header.length + body.byteLength);
  out.set(header);
  out.set(new Uint8Array(body.buffer), header.length);
  return out;
}

describe("ppm decoding", () => {
  it("reads dimensions and pixels", () => {
    const img = decodePpm(makePpm(3, 2, [10, 20, 30]));
    expect(img.width).toBe(3);
    expect(img.height).toBe(2);
    expect(img.pixels[0]).toBe(10);
    expect(img.pixels[3 * 5 + 2]).toBe(30);
  });

  it("rejects non-P6 payloads", () => {
    expect(() => decodePpm(new TextEncoder().encode("P3\n1 1\n255\n0 0 0"))).toThrow();
  });

  it("computes mean luminance", () => {
    const img = decodePpm(makePpm(2, 2, [255, 255, 255]));
    expect(meanLuminance(img)).toBeCloseTo(1.0, 6);
  });

  it("computes percentiles", () => {
    const bytes = makePpm(2, 1, [0, 0, 0]);
    // second pixel bright
    bytes.set([255, 255, 255], bytes.length - 3);
    const img = decodePpm(bytes);
    expect(luminancePercentile(img, 100)).toBeCloseTo(1.0, 6);
    expect(luminancePercentile(img, 0)).toBeCloseTo(0.0, 6);
  });
});

describe("pfm decoding", () => {
  it("flips rows to top-down", () => {
    // 1x2 image: bottom row in file order first
    const bytes = makePfm(1, 2, [1, 1, 1, 9, 9, 9]);
    const img = decodePfm(bytes);
    expect(img.data[0]).toBe(9); // top row
    expect(img.data[3]).toBe(1);
  });

  it("tonemap matches the renderer transform", () => {
    const img = { width: 1, height: 1, data: new Float32Array([1, 0, 3]) };
    const rgb = tonemapFloat(img);
    expect(rgb.pixels[0]).toBe(Math.round(Math.pow(0.5, 1 / 2.2) * 255));
    expect(rgb.pixels[1]).toBe(0);
  });

  it("sum deviation measures layer identity", () => {
    const total = { width: 1, height: 1, data: new Float32Array([1, 2, 3]) };
    const a = { width: 1, height: 1, data: new Float32Array([0.5, 1, 1]) };
    const b = { width: 1, height: 1, data: new Float32Array([0.5, 1, 2]) };
    expect(maxSumDeviation(total, [a, b])).toBeCloseTo(0, 9);
  });
});
