/** Integer status codes shared with the caller across the process boundary. */
export const STATUS_OK = 0;
export const STATUS_INVALID_TABLE = 1;
export const STATUS_OUT_OF_RANGE = 2;
export const STATUS_CORRUPT = 3;
export const STATUS_BAD_REQUEST = 4;

/** Error that carries one of the non-zero status codes above. */
export class CoderError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
    this.name = new.target.name;
  }
}

/** A CDF table violates the contract (shape, endpoints, monotonicity, row index). */
export class InvalidTableError extends CoderError {
  constructor(message: string) {
    super(STATUS_INVALID_TABLE, message);
  }
}

/** A symbol falls outside the alphabet described by its table row. */
export class OutOfRangeError extends CoderError {
  constructor(message: string) {
    super(STATUS_OUT_OF_RANGE, message);
  }
}

/** A payload cannot be decoded back to a consistent coder state. */
export class CorruptStreamError extends CoderError {
  constructor(message: string) {
    super(STATUS_CORRUPT, message);
  }
}

/** The request itself is malformed (framing, lengths, unknown op). */
export class BadRequestError extends CoderError {
  constructor(message: string) {
    super(STATUS_BAD_REQUEST, message);
  }
}
