import { CdfMatrix } from "./cdf.js";
import {
  BadRequestError,
  CoderError,
  STATUS_BAD_REQUEST,
  STATUS_OK,
} from "./errors.js";
import { ransDecode, ransEncode } from "./rans.js";

/**
 * One-shot binary request/response framing, all little-endian.
 *
 * Request:
 *   magic "RNS1", op u8 (1 = encode, 2 = decode), 3 pad bytes,
 *   num_rows u32, row_len u32, rows u32[num_rows * row_len],
 *   count u32, row_idx u32[count],
 *   encode: indices u32[count]
 *   decode: payload_len u32, payload bytes
 * Response:
 *   status u8 (0 ok, 1 invalid table, 2 symbol out of range,
 *   3 corrupt stream, 4 malformed request)
 *   ok + encode: length u32, payload bytes
 *   ok + decode: count u32, indices u32[count]
 *   error: message_len u32, utf-8 message
 */
export const REQUEST_MAGIC = "RNS1";
export const OP_ENCODE = 1;
export const OP_DECODE = 2;

class Reader {
  private pos = 0;
  private readonly view: DataView;

  constructor(private readonly buf: Uint8Array) {
    this.view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
  }

  private need(n: number): void {
    if (this.buf.length - this.pos < n) {
      throw new BadRequestError("request truncated");
    }
  }

  ascii(n: number): string {
    this.need(n);
    let s = "";
    for (let i = 0; i < n; i++) {
      s += String.fromCharCode(this.buf[this.pos + i]);
    }
    this.pos += n;
    return s;
  }

  u8(): number {
    this.need(1);
    return this.buf[this.pos++];
  }

  skip(n: number): void {
    this.need(n);
    this.pos += n;
  }

  u32(): number {
    this.need(4);
    const v = this.view.getUint32(this.pos, true);
    this.pos += 4;
    return v;
  }

  u32Array(n: number): Uint32Array {
    this.need(n * 4);
    const out = new Uint32Array(n);
    for (let i = 0; i < n; i++) {
      out[i] = this.view.getUint32(this.pos + i * 4, true);
    }
    this.pos += n * 4;
    return out;
  }

  bytes(n: number): Uint8Array {
    this.need(n);
    const out = this.buf.slice(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }

  expectEnd(): void {
    if (this.pos !== this.buf.length) {
      throw new BadRequestError("request has trailing bytes");
    }
  }
}

function errorResponse(status: number, message: string): Uint8Array {
  const text = new TextEncoder().encode(message);
  const out = new Uint8Array(5 + text.length);
  out[0] = status;
  new DataView(out.buffer).setUint32(1, text.length, true);
  out.set(text, 5);
  return out;
}

function encodeResponse(payload: Uint8Array): Uint8Array {
  const out = new Uint8Array(5 + payload.length);
  out[0] = STATUS_OK;
  new DataView(out.buffer).setUint32(1, payload.length, true);
  out.set(payload, 5);
  return out;
}

function decodeResponse(symbols: Uint32Array): Uint8Array {
  const out = new Uint8Array(5 + symbols.length * 4);
  const view = new DataView(out.buffer);
  out[0] = STATUS_OK;
  view.setUint32(1, symbols.length, true);
  for (let i = 0; i < symbols.length; i++) {
    view.setUint32(5 + i * 4, symbols[i], true);
  }
  return out;
}

function dispatch(request: Uint8Array): Uint8Array {
  const r = new Reader(request);
  if (r.ascii(4) !== REQUEST_MAGIC) {
    throw new BadRequestError("bad magic");
  }
  const op = r.u8();
  r.skip(3);
  const numRows = r.u32();
  const rowLen = r.u32();
  const tables: CdfMatrix = {
    rows: r.u32Array(numRows * rowLen),
    numRows,
    rowLen,
  };
  const count = r.u32();
  const rowIdx = r.u32Array(count);
  if (op === OP_ENCODE) {
    const symbols = r.u32Array(count);
    r.expectEnd();
    return encodeResponse(ransEncode(symbols, tables, rowIdx));
  }
  if (op === OP_DECODE) {
    const payloadLen = r.u32();
    const payload = r.bytes(payloadLen);
    r.expectEnd();
    return decodeResponse(ransDecode(payload, tables, rowIdx, count));
  }
  throw new BadRequestError(`unknown op ${op}`);
}

/** Serve one request; every failure becomes an in-band status response. */
export function handleRequest(request: Uint8Array): Uint8Array {
  try {
    return dispatch(request);
  } catch (err) {
    if (err instanceof CoderError) {
      return errorResponse(err.status, err.message);
    }
    return errorResponse(STATUS_BAD_REQUEST, `internal error: ${String(err)}`);
  }
}
