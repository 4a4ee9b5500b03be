import { readFileSync, writeFileSync } from "node:fs";

import { handleRequest } from "./protocol.js";

// One request per invocation: read stdin to EOF, answer on stdout.
// Failures are reported in-band as status codes, so the process itself
// exits 0 whenever it manages to produce a response.
const request = readFileSync(0);
const response = handleRequest(
  new Uint8Array(request.buffer, request.byteOffset, request.byteLength),
);
writeFileSync(1, response);
