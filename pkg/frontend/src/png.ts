/**
 * Minimal PNG codec.
 *
 * Encoding writes stored (uncompressed) deflate blocks, which every PNG
 * reader accepts; it is exact, dependency-free, and works the same in the
 * browser and in node. Decoding handles 8-bit grayscale/RGB/RGBA with the
 * five standard row filters; the zlib inflate step is injected so node
 * tests can use node:zlib while the browser app decodes server images
 * natively via <img>.
 */

const PNG_SIGNATURE = new Uint8Array([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

function adler32(bytes: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < bytes.length; i++) {
    a = (a + bytes[i]) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function writeU32(target: Uint8Array, offset: number, value: number): void {
  target[offset] = (value >>> 24) & 0xff;
  target[offset + 1] = (value >>> 16) & 0xff;
  target[offset + 2] = (value >>> 8) & 0xff;
  target[offset + 3] = value & 0xff;
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + data.length);
  writeU32(out, 0, data.length);
  for (let i = 0; i < 4; i++) out[4 + i] = type.charCodeAt(i);
  out.set(data, 8);
  writeU32(out, 8 + data.length, crc32(out.subarray(4, 8 + data.length)));
  return out;
}

/** Raw scanlines (filter byte 0 per row) wrapped in stored deflate blocks. */
function zlibStored(raw: Uint8Array): Uint8Array {
  const MAX_BLOCK = 65535;
  const blocks = Math.max(1, Math.ceil(raw.length / MAX_BLOCK));
  const out = new Uint8Array(2 + blocks * 5 + raw.length + 4);
  out[0] = 0x78; // CM=8, CINFO=7
  out[1] = 0x01; // no preset dict, fastest flag; (0x7801 % 31 === 0)
  let pos = 2;
  for (let b = 0; b < blocks; b++) {
    const start = b * MAX_BLOCK;
    const len = Math.min(MAX_BLOCK, raw.length - start);
    out[pos++] = b === blocks - 1 ? 1 : 0; // BFINAL, BTYPE=00
    out[pos++] = len & 0xff;
    out[pos++] = (len >>> 8) & 0xff;
    out[pos++] = ~len & 0xff;
    out[pos++] = (~len >>> 8) & 0xff;
    out.set(raw.subarray(start, start + len), pos);
    pos += len;
  }
  writeU32(out, pos, adler32(raw));
  return out;
}

export type PixelFormat = "gray" | "rgb";

export interface RawImage {
  width: number;
  height: number;
  channels: number; // 1 or 3
  data: Uint8Array; // width * height * channels
}

export function encodePng(image: RawImage): Uint8Array {
  const { width, height, channels, data } = image;
  if (data.length !== width * height * channels) {
    throw new Error(`pixel buffer ${data.length} != ${width}x${height}x${channels}`);
  }
  if (channels !== 1 && channels !== 3) {
    throw new Error(`unsupported channel count ${channels}`);
  }
  const ihdr = new Uint8Array(13);
  writeU32(ihdr, 0, width);
  writeU32(ihdr, 4, height);
  ihdr[8] = 8; // bit depth
  ihdr[9] = channels === 1 ? 0 : 2; // grayscale | truecolor
  // compression, filter, interlace all 0

  const stride = width * channels;
  const raw = new Uint8Array((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: none
    raw.set(data.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }

  const parts = [
    PNG_SIGNATURE,
    chunk("IHDR", ihdr),
    chunk("IDAT", zlibStored(raw)),
    chunk("IEND", new Uint8Array(0)),
  ];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let pos = 0;
  for (const p of parts) {
    out.set(p, pos);
    pos += p.length;
  }
  return out;
}

export type Inflate = (compressed: Uint8Array) => Uint8Array;

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

const CHANNELS_BY_COLOR_TYPE: Record<number, number> = { 0: 1, 2: 3, 4: 2, 6: 4 };

export interface ParsedPng {
  width: number;
  height: number;
  colorType: number;
  compressed: Uint8Array; // concatenated IDAT zlib stream
}

/** Split a PNG into header fields and its compressed scanline stream. */
export function parsePng(bytes: Uint8Array): ParsedPng {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== PNG_SIGNATURE[i]) throw new Error("not a PNG: bad signature");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let pos = 8;
  let width = 0;
  let height = 0;
  let colorType = -1;
  const idat: Uint8Array[] = [];
  while (pos < bytes.length) {
    const len = view.getUint32(pos);
    const type = String.fromCharCode(bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]);
    const data = bytes.subarray(pos + 8, pos + 8 + len);
    if (type === "IHDR") {
      width = view.getUint32(pos + 8);
      height = view.getUint32(pos + 12);
      const bitDepth = bytes[pos + 16];
      colorType = bytes[pos + 17];
      if (bitDepth !== 8) throw new Error(`unsupported bit depth ${bitDepth}`);
      if (bytes[pos + 20] !== 0) throw new Error("interlaced PNGs unsupported");
      if (!(colorType in CHANNELS_BY_COLOR_TYPE)) {
        throw new Error(`unsupported color type ${colorType}`);
      }
    } else if (type === "IDAT") {
      idat.push(data);
    } else if (type === "IEND") {
      break;
    }
    pos += 12 + len;
  }
  const compressed = new Uint8Array(idat.reduce((n, p) => n + p.length, 0));
  let at = 0;
  for (const p of idat) {
    compressed.set(p, at);
    at += p.length;
  }
  return { width, height, colorType, compressed };
}

/** Undo row filters on inflated scanlines; alpha drops, grayscale stays 1ch. */
export function unfilterPng(parsed: ParsedPng, raw: Uint8Array): RawImage {
  const { width, height, colorType } = parsed;
  const srcChannels = CHANNELS_BY_COLOR_TYPE[colorType];
  const stride = width * srcChannels;
  if (raw.length !== (stride + 1) * height) {
    throw new Error(`inflated size ${raw.length} != expected ${(stride + 1) * height}`);
  }
  // undo per-row filters in place
  const pixels = new Uint8Array(stride * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const out = pixels.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? pixels.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const a = x >= srcChannels ? out[x - srcChannels] : 0;
      const b = prev ? prev[x] : 0;
      const c = x >= srcChannels && prev ? prev[x - srcChannels] : 0;
      let v = row[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) >> 1; break;
        case 4: v += paeth(a, b, c); break;
        default: throw new Error(`unknown row filter ${filter}`);
      }
      out[x] = v & 0xff;
    }
  }

  const keep = srcChannels >= 3 ? 3 : 1;
  if (keep === srcChannels) {
    return { width, height, channels: keep, data: pixels };
  }
  const trimmed = new Uint8Array(width * height * keep);
  for (let i = 0; i < width * height; i++) {
    for (let ch = 0; ch < keep; ch++) {
      trimmed[i * keep + ch] = pixels[i * srcChannels + ch];
    }
  }
  return { width, height, channels: keep, data: trimmed };
}

/** One-call decode when a synchronous inflate is available (node tests). */
export function decodePng(bytes: Uint8Array, inflate: Inflate): RawImage {
  const parsed = parsePng(bytes);
  return unfilterPng(parsed, inflate(parsed.compressed));
}

export function toBase64(bytes: Uint8Array): string {
  if (typeof Buffer !== "undefined") {
    return Buffer.from(bytes).toString("base64");
  }
  let binary = "";
  for (let i = 0; i < bytes.length; i++) binary += String.fromCharCode(bytes[i]);
  return btoa(binary);
}

export function fromBase64(text: string): Uint8Array {
  if (typeof Buffer !== "undefined") {
    return new Uint8Array(Buffer.from(text, "base64"));
  }
  const binary = atob(text);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}
