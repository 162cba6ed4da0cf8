/** Decoders for the renderer's frame formats and small image statistics. */

export interface RgbImage {
  width: number;
  height: number;
  /** row-major top-down, 3 bytes per pixel */
  pixels: Uint8Array;
}

export interface FloatImage {
  width: number;
  height: number;
  /** row-major top-down, 3 floats per pixel */
  data: Float32Array;
}

function isSpace(byte: number): boolean {
  return byte === 0x20 || byte === 0x09 || byte === 0x0a || byte === 0x0d;
}

/** Binary P6 portable pixmap (maxval 255). */
export function decodePpm(bytes: Uint8Array): RgbImage {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x36) {
    throw new Error("not a binary PPM (P6) payload");
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    fields.push(Number(new TextDecoder().decode(bytes.subarray(start, pos))));
  }
  pos++; // single whitespace after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new Error("only maxval 255 supported");
  const need = width * height * 3;
  if (bytes.length - pos < need) throw new Error("truncated PPM payload");
  return { width, height, pixels: bytes.subarray(pos, pos + need) };
}

/** Little-endian color PFM, returned top-down. */
export function decodePfm(bytes: Uint8Array): FloatImage {
  const newline = (from: number) => {
    let i = from;
    while (i < bytes.length && bytes[i] !== 0x0a) i++;
    return i;
  };
  const l1 = newline(0);
  const magic = new TextDecoder().decode(bytes.subarray(0, l1));
  if (magic.trim() !== "PF") throw new Error("not a color PFM payload");
  const l2 = newline(l1 + 1);
  const dims = new TextDecoder().decode(bytes.subarray(l1 + 1, l2)).trim().split(/\s+/);
  const width = Number(dims[0]);
  const height = Number(dims[1]);
  const l3 = newline(l2 + 1);
  const scale = Number(new TextDecoder().decode(bytes.subarray(l2 + 1, l3)).trim());
  if (!(scale < 0)) throw new Error("big-endian PFM unsupported");
  const count = width * height * 3;
  const view = new DataView(bytes.buffer, bytes.byteOffset + l3 + 1, count * 4);
  const data = new Float32Array(count);
  // PFM rows are bottom-up; flip while copying
  for (let row = 0; row < height; row++) {
    const src = (height - 1 - row) * width * 3;
    const dst = row * width * 3;
    for (let k = 0; k < width * 3; k++) {
      data[dst + k] = view.getFloat32((src + k) * 4, true);
    }
  }
  return { width, height, data };
}

export function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const raw = atob(b64);
    const out = new Uint8Array(raw.length);
    for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}

export function meanLuminance(img: RgbImage): number {
  let sum = 0;
  const n = img.width * img.height;
  for (let i = 0; i < n; i++) {
    sum +=
      (0.2126 * img.pixels[3 * i] +
        0.7152 * img.pixels[3 * i + 1] +
        0.0722 * img.pixels[3 * i + 2]) /
      255;
  }
  return sum / n;
}

export function luminancePercentile(img: RgbImage, q: number): number {
  const n = img.width * img.height;
  const lum = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    lum[i] =
      (0.2126 * img.pixels[3 * i] +
        0.7152 * img.pixels[3 * i + 1] +
        0.0722 * img.pixels[3 * i + 2]) /
      255;
  }
  lum.sort();
  const pos = Math.min(n - 1, Math.max(0, Math.round((q / 100) * (n - 1))));
  return lum[pos];
}

/** Reinhard + gamma, matching the renderer's display transform. */
export function tonemapFloat(img: FloatImage): RgbImage {
  const n = img.width * img.height * 3;
  const pixels = new Uint8Array(n);
  for (let i = 0; i < n; i++) {
    const x = Math.max(img.data[i], 0);
    pixels[i] = Math.min(255, Math.round(Math.pow(x / (1 + x), 1 / 2.2) * 255));
  }
  return { width: img.width, height: img.height, pixels };
}

/** Per-channel max |a - (b1+...+bk)| over float images. */
export function maxSumDeviation(total: FloatImage, parts: FloatImage[]): number {
  let worst = 0;
  for (let i = 0; i < total.data.length; i++) {
    let s = 0;
    for (const p of parts) s += p.data[i];
    worst = Math.max(worst, Math.abs(total.data[i] - s));
  }
  return worst;
}
