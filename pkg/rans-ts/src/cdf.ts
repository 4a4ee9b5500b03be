import { InvalidTableError } from "./errors.js";

/** Probability resolution: every table row sums to 2^16. */
export const PRECISION = 16;
export const TOTAL = 1 << PRECISION;

/**
 * A batch of integer CDF rows stored flat, row-major.
 *
 * Each row has `rowLen = alphabet_size + 1` cumulative counts with
 * `row[0] === 0`, `row[rowLen - 1] === TOTAL`, strictly increasing, so
 * symbol `s` of row `r` owns the slot range
 * `[rows[r * rowLen + s], rows[r * rowLen + s + 1])`.
 */
export interface CdfMatrix {
  readonly rows: Uint32Array;
  readonly numRows: number;
  readonly rowLen: number;
}

/** Reject any matrix whose rows break the cumulative-count contract. */
export function validateMatrix(m: CdfMatrix): void {
  if (m.rowLen < 2) {
    throw new InvalidTableError("cumulative table needs at least one symbol");
  }
  if (m.rows.length !== m.numRows * m.rowLen) {
    throw new InvalidTableError("table buffer does not match its declared shape");
  }
  for (let r = 0; r < m.numRows; r++) {
    const base = r * m.rowLen;
    if (m.rows[base] !== 0 || m.rows[base + m.rowLen - 1] !== TOTAL) {
      throw new InvalidTableError(`cumulative counts must run from 0 to ${TOTAL}`);
    }
    for (let i = 1; i < m.rowLen; i++) {
      if (m.rows[base + i] <= m.rows[base + i - 1]) {
        throw new InvalidTableError("cumulative counts must be strictly increasing");
      }
    }
  }
}

/**
 * Largest symbol whose cumulative start is <= value, by binary search.
 * Requires a validated row and 0 <= value < TOTAL.
 */
export function findSymbol(
  rows: Uint32Array,
  base: number,
  rowLen: number,
  value: number,
): number {
  let lo = 0;
  let hi = rowLen - 1;
  while (hi - lo > 1) {
    const mid = (lo + hi) >> 1;
    if (rows[base + mid] <= value) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}
