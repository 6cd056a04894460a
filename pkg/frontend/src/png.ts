/**
 * Minimal PNG reader for 8-bit RGB/RGBA non-interlaced images, enough to
 * decode the served rasters inside node tests (the browser app reads
 * pixels through canvas instead). Uses node:zlib for inflate.
 */

import { inflateSync } from "node:zlib";

export interface DecodedPng {
  width: number;
  height: number;
  /** RGBA, row-major, like canvas ImageData. */
  data: Uint8Array;
}

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

function u32(buf: Uint8Array, off: number): number {
  return (buf[off] << 24) | (buf[off + 1] << 16) | (buf[off + 2] << 8) | buf[off + 3];
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

export function decodePng(raw: Uint8Array): DecodedPng {
  for (let i = 0; i < 8; i++) {
    if (raw[i] !== SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let off = 8;
  let width = 0;
  let height = 0;
  let channels = 0;
  const idat: Uint8Array[] = [];
  while (off < raw.length) {
    const length = u32(raw, off);
    const kind = String.fromCharCode(raw[off + 4], raw[off + 5], raw[off + 6], raw[off + 7]);
    const body = raw.subarray(off + 8, off + 8 + length);
    if (kind === "IHDR") {
      width = u32(body, 0);
      height = u32(body, 4);
      const bitDepth = body[8];
      const colorType = body[9];
      const interlace = body[12];
      if (bitDepth !== 8) throw new Error(`unsupported bit depth ${bitDepth}`);
      if (colorType === 2) channels = 3;
      else if (colorType === 6) channels = 4;
      else if (colorType === 0) channels = 1;
      else throw new Error(`unsupported color type ${colorType}`);
      if (interlace !== 0) throw new Error("interlaced PNG not supported");
    } else if (kind === "IDAT") {
      idat.push(body);
    } else if (kind === "IEND") {
      break;
    }
    off += 12 + length;
  }
  const compressed = new Uint8Array(idat.reduce((n, c) => n + c.length, 0));
  let pos = 0;
  for (const chunk of idat) {
    compressed.set(chunk, pos);
    pos += chunk.length;
  }
  const rawScan = inflateSync(compressed);
  const stride = width * channels;
  const pixels = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = rawScan[y * (stride + 1)];
    const line = rawScan.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const out = pixels.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? pixels.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const left = x >= channels ? out[x - channels] : 0;
      const up = prev ? prev[x] : 0;
      const upLeft = prev && x >= channels ? prev[x - channels] : 0;
      let value = line[x];
      switch (filter) {
        case 0:
          break;
        case 1:
          value += left;
          break;
        case 2:
          value += up;
          break;
        case 3:
          value += (left + up) >> 1;
          break;
        case 4:
          value += paeth(left, up, upLeft);
          break;
        default:
          throw new Error(`unsupported filter ${filter}`);
      }
      out[x] = value & 0xff;
    }
  }
  const data = new Uint8Array(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    if (channels === 1) {
      data[4 * i] = data[4 * i + 1] = data[4 * i + 2] = pixels[i];
      data[4 * i + 3] = 255;
    } else {
      data[4 * i] = pixels[channels * i];
      data[4 * i + 1] = pixels[channels * i + 1];
      data[4 * i + 2] = pixels[channels * i + 2];
      data[4 * i + 3] = channels === 4 ? pixels[channels * i + 3] : 255;
    }
  }
  return { width, height, data };
}
