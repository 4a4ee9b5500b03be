import { CdfMatrix, TOTAL, findSymbol, validateMatrix } from "./cdf.js";
import {
  BadRequestError,
  CorruptStreamError,
  InvalidTableError,
  OutOfRangeError,
} from "./errors.js";

/**
 * Interleaved two-state rANS coder over 16-bit-precision CDF rows.
 *
 * Two 32-bit coder states alternate over the symbol sequence (state
 * `i & 1` owns symbol `i`) and renormalize one byte at a time, staying
 * inside [STATE_MIN, 256 * STATE_MIN). Every intermediate value fits
 * well below 2^53, so plain doubles carry the arithmetic exactly.
 *
 * Stream layout: both final states little-endian (state 0 first, 8
 * bytes total), then the renormalization bytes in decode order. The
 * encoder folds symbols in reverse so the decoder emits them forward.
 * An empty symbol sequence still produces the 8-byte state footer,
 * which doubles as a corruption check: decoding must consume the whole
 * stream and land both states exactly back on STATE_MIN.
 */
const STATE_MIN = 1 << 23;
/** Renormalized states stay below `RENORM_CAP * freq` while encoding. */
const RENORM_CAP = (STATE_MIN / TOTAL) * 256; // 2^15
const STATE_BYTES = 8;

function checkRowIndices(rowIdx: Uint32Array, numRows: number): void {
  for (let i = 0; i < rowIdx.length; i++) {
    if (rowIdx[i] >= numRows) {
      throw new InvalidTableError("row index out of range");
    }
  }
}

/** Encode one alphabet index per entry, each against its own CDF row. */
export function ransEncode(
  symbols: Uint32Array,
  tables: CdfMatrix,
  rowIdx: Uint32Array,
): Uint8Array {
  validateMatrix(tables);
  if (rowIdx.length !== symbols.length) {
    throw new BadRequestError("symbols and row indices must align");
  }
  const { rows, rowLen } = tables;
  const alphabet = rowLen - 1;
  checkRowIndices(rowIdx, tables.numRows);
  for (let i = 0; i < symbols.length; i++) {
    if (symbols[i] >= alphabet) {
      throw new OutOfRangeError("symbol outside the table alphabet");
    }
  }

  const out: number[] = [];
  let x0 = STATE_MIN;
  let x1 = STATE_MIN;
  for (let i = symbols.length - 1; i >= 0; i--) {
    const base = rowIdx[i] * rowLen + symbols[i];
    const start = rows[base];
    const freq = rows[base + 1] - start;
    let x = i & 1 ? x1 : x0;
    const xMax = RENORM_CAP * freq;
    while (x >= xMax) {
      out.push(x & 0xff);
      x = Math.floor(x / 256);
    }
    x = Math.floor(x / freq) * TOTAL + (x % freq) + start;
    if (i & 1) {
      x1 = x;
    } else {
      x0 = x;
    }
  }
  // Pushed big-endian so that, after the final reverse, the stream
  // opens with x0 then x1 in little-endian order.
  pushStateBigEndian(out, x1);
  pushStateBigEndian(out, x0);
  out.reverse();
  return Uint8Array.from(out);
}

/** Inverse of {@link ransEncode}; returns `count` alphabet indices. */
export function ransDecode(
  payload: Uint8Array,
  tables: CdfMatrix,
  rowIdx: Uint32Array,
  count: number,
): Uint32Array {
  validateMatrix(tables);
  if (rowIdx.length !== count) {
    throw new BadRequestError("row indices must match the requested count");
  }
  const { rows, rowLen } = tables;
  checkRowIndices(rowIdx, tables.numRows);
  if (payload.length < STATE_BYTES) {
    throw new CorruptStreamError("stream shorter than its state footer");
  }

  let x0 = readStateLittleEndian(payload, 0);
  let x1 = readStateLittleEndian(payload, 4);
  let pos = STATE_BYTES;
  const out = new Uint32Array(count);
  for (let i = 0; i < count; i++) {
    let x = i & 1 ? x1 : x0;
    const slot = x % TOTAL;
    const base = rowIdx[i] * rowLen;
    const symbol = findSymbol(rows, base, rowLen, slot);
    const start = rows[base + symbol];
    const freq = rows[base + symbol + 1] - start;
    x = freq * Math.floor(x / TOTAL) + slot - start;
    while (x < STATE_MIN) {
      if (pos >= payload.length) {
        throw new CorruptStreamError("stream exhausted before all symbols were decoded");
      }
      x = x * 256 + payload[pos];
      pos++;
    }
    if (i & 1) {
      x1 = x;
    } else {
      x0 = x;
    }
    out[i] = symbol;
  }
  if (pos !== payload.length || x0 !== STATE_MIN || x1 !== STATE_MIN) {
    throw new CorruptStreamError("stream does not close on the expected final state");
  }
  return out;
}

function pushStateBigEndian(out: number[], x: number): void {
  out.push((x >>> 24) & 0xff, (x >>> 16) & 0xff, (x >>> 8) & 0xff, x & 0xff);
}

function readStateLittleEndian(buf: Uint8Array, offset: number): number {
  // Multiplication instead of shifts keeps the top byte unsigned.
  return (
    buf[offset] +
    buf[offset + 1] * 0x100 +
    buf[offset + 2] * 0x10000 +
    buf[offset + 3] * 0x1000000
  );
}
