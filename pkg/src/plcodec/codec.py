"""Bitstream container: serializes quantized latents to bytes and back.

A compressed image is a single `.plc` blob with a fixed little-endian
layout. All multi-byte integers are little-endian; payload lengths are
3-byte unsigned ints (16 MiB cap per payload).

    offset  size  field
    ------  ----  -----
    0       4     magic "PLC1"
    4       1     format_version (currently 1)
    5       1     coder_id (1 = reference range coder, 2 = rANS backend)
    6       1     flags, bit 0 = per-channel step table present
    7       1     num_groups
    8       4     original_height (pre-padding, u32)
    12      4     original_width (u32)
    16      8     transform_config_hash (u64, CodecModel.weight_digest)
    24      4     body_crc (CRC-32 of every byte after offset 28)
    28      3*(num_groups+1)  payload lengths: hyper first, then groups
    ...     2*latent_channels step table as float16, iff flags bit 0
    ...     payload bytes: hyper first, then groups in order

The step table is the refined per-channel quantization step. It is
rounded to float16 *before* any symbol or table is computed, so encoder
and decoder both work from the serialized values; the in-memory
refinement result never leaks into the symbols.

The hyper-latent payload always comes first because every group table is
predicted from the decoded hyper context; groups then decode strictly in
index order (group g's table depends on groups 0..g-1).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .entropy import (
    SYMBOL_BOUND,
    gaussian_cdf_rows,
    dequantize,
    hyper_cdf_rows,
    merge_groups,
)
from .losses import (
    ConvPyramidExtractor,
    DistortionWeights,
    FeatureExtractor,
    RateTargetConfig,
)
from .model import CodecModel, HardForward, hard_forward
from .rangecoder import CorruptPayloadError, decode_indexed, encode_indexed
from .refinement import AnnealSchedule, RoiConfig, TraceRow, refine_latents
from .transforms import crop_to_size, pad_to_multiple

MAGIC = b"PLC1"
FORMAT_VERSION = 1
HEADER_SIZE = 28
FLAG_STEP_TABLE = 0x01
_LENGTH_BYTES = 3
_MAX_PAYLOAD = (1 << (8 * _LENGTH_BYTES)) - 1
_HEADER_STRUCT = struct.Struct("<4sBBBBIIQI")

# float16 clamp range for the stored step table: smallest normal float16
# up to the float16 max, so the stored step can never round to 0 or inf
_STEP_MIN = 2.0 ** -14
_STEP_MAX = 65504.0


class ConfigMismatchError(ValueError):
    """Container was produced by a different model build."""


class UnknownCoderError(ValueError):
    """No registered backend for the container's coder_id."""


# ---------------------------------------------------------------------------
# coder backends


@dataclass(frozen=True)
class ReferenceCoder:
    """Default backend: the in-process range coder."""

    coder_id: int = 1

    def encode(self, indices: np.ndarray, rows: np.ndarray, row_idx: np.ndarray) -> bytes:
        return encode_indexed(indices, rows, row_idx)

    def decode(self, payload: bytes, rows: np.ndarray, row_idx: np.ndarray, count: int) -> np.ndarray:
        return decode_indexed(payload, rows, row_idx, count)


_BACKENDS: dict[int, object] = {}


def register_coder(coder) -> None:
    _BACKENDS[int(coder.coder_id)] = coder


def get_coder(coder_id: int):
    try:
        return _BACKENDS[int(coder_id)]
    except KeyError:
        raise UnknownCoderError(f"no coder backend registered for id {coder_id}") from None


register_coder(ReferenceCoder())


# ---------------------------------------------------------------------------
# container


@dataclass(eq=False)
class CompressedObject:
    """One encoded image: header fields plus per-part payloads."""

    coder_id: int
    original_height: int
    original_width: int
    transform_config_hash: int
    step_table: np.ndarray | None  # float16 [latent_channels], None if unrefined
    hyper_payload: bytes
    group_payloads: list[bytes]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.original_height < 1 or self.original_width < 1:
            raise ValueError("original dims must be positive")
        if self.original_height >= 1 << 32 or self.original_width >= 1 << 32:
            raise ValueError("original dims exceed u32")
        if not self.group_payloads:
            raise ValueError("at least one group payload required")
        if len(self.group_payloads) > 255:
            raise ValueError("num_groups exceeds u8")
        if self.step_table is not None:
            self.step_table = np.asarray(self.step_table, dtype=np.float16).reshape(-1)
            if not (self.step_table > 0).all():
                raise ValueError("step table entries must be positive")
        for p in [self.hyper_payload, *self.group_payloads]:
            if len(p) > _MAX_PAYLOAD:
                raise ValueError("payload exceeds the 3-byte length field")

    @property
    def num_groups(self) -> int:
        return len(self.group_payloads)

    @property
    def group_payload_lengths(self) -> list[int]:
        return [len(p) for p in self.group_payloads]

    @property
    def total_bytes(self) -> int:
        n = HEADER_SIZE + _LENGTH_BYTES * (self.num_groups + 1)
        if self.step_table is not None:
            n += 2 * self.step_table.size
        return n + len(self.hyper_payload) + sum(self.group_payload_lengths)

    @property
    def bpp(self) -> float:
        return 8.0 * self.total_bytes / (self.original_height * self.original_width)


def pack(obj: CompressedObject) -> bytes:
    """Serialize to the documented byte layout."""
    body = bytearray()
    for p in [obj.hyper_payload, *obj.group_payloads]:
        body += len(p).to_bytes(_LENGTH_BYTES, "little")
    if obj.step_table is not None:
        body += obj.step_table.astype("<f2").tobytes()
    body += obj.hyper_payload
    for p in obj.group_payloads:
        body += p
    flags = FLAG_STEP_TABLE if obj.step_table is not None else 0
    header = _HEADER_STRUCT.pack(
        MAGIC,
        obj.format_version,
        obj.coder_id,
        flags,
        obj.num_groups,
        obj.original_height,
        obj.original_width,
        obj.transform_config_hash,
        zlib.crc32(bytes(body)),
    )
    out = header + bytes(body)
    assert len(out) == obj.total_bytes
    return out


def unpack(data: bytes) -> CompressedObject:
    """Parse and validate a serialized container.

    Raises CorruptPayloadError on truncation, bad magic, or checksum
    mismatch, and ConfigMismatchError on an unsupported format version.
    """
    if len(data) < HEADER_SIZE:
        raise CorruptPayloadError("container shorter than its header")
    magic, version, coder_id, flags, num_groups, oh, ow, cfg_hash, crc = _HEADER_STRUCT.unpack(
        data[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise CorruptPayloadError("bad magic")
    if version != FORMAT_VERSION:
        raise ConfigMismatchError(f"unsupported container version {version}")
    if num_groups < 1:
        raise CorruptPayloadError("container declares zero groups")
    body = data[HEADER_SIZE:]
    if zlib.crc32(body) != crc:
        raise CorruptPayloadError("checksum mismatch")

    lengths_size = _LENGTH_BYTES * (num_groups + 1)
    if len(body) < lengths_size:
        raise CorruptPayloadError("truncated length block")
    lengths = [
        int.from_bytes(body[i * _LENGTH_BYTES : (i + 1) * _LENGTH_BYTES], "little")
        for i in range(num_groups + 1)
    ]
    rest = body[lengths_size:]
    step_table = None
    if flags & FLAG_STEP_TABLE:
        step_bytes = len(rest) - sum(lengths)
        if step_bytes <= 0 or step_bytes % 2:
            raise CorruptPayloadError("step table size inconsistent with payload lengths")
        step_table = np.frombuffer(rest[:step_bytes], dtype="<f2").copy()
        rest = rest[step_bytes:]
    if len(rest) != sum(lengths):
        raise CorruptPayloadError("payload bytes disagree with the length block")
    payloads = []
    pos = 0
    for n in lengths:
        payloads.append(bytes(rest[pos : pos + n]))
        pos += n
    return CompressedObject(
        coder_id=coder_id,
        original_height=oh,
        original_width=ow,
        transform_config_hash=cfg_hash,
        step_table=step_table,
        hyper_payload=payloads[0],
        group_payloads=payloads[1:],
        format_version=version,
    )


def write_plc(path, obj: CompressedObject) -> int:
    data = pack(obj)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def read_plc(path) -> CompressedObject:
    with open(path, "rb") as f:
        return unpack(f.read())


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class RefineOptions:
    """Per-image refinement settings for compress()."""

    rate_target: RateTargetConfig = field(default_factory=RateTargetConfig)
    weights: DistortionWeights = field(default_factory=lambda: DistortionWeights(delta=0.0))
    schedule: AnnealSchedule | None = None
    steps: int | None = None
    roi: RoiConfig | None = None
    seed: int = 0
    learning_rate: float = 5e-3
    extractor: FeatureExtractor | None = None


@dataclass
class CompressReport:
    """Side information from one compress() call."""

    ideal_bits: float  # entropy-model codelength for the emitted symbols
    measured_bits: int  # serialized container size
    padded_size: tuple[int, int]
    trace: list[TraceRow] | None = None

    def overhead_bits(self) -> float:
        return self.measured_bits - self.ideal_bits


def _stored_step(delta: torch.Tensor) -> tuple[np.ndarray, torch.Tensor]:
    """Round the refined step to its serialized float16 form.

    Returns the table to store and the float32 tensor every subsequent
    computation must use; float16 -> float32 is exact, so the decoder
    reconstructs the identical tensor from the container.
    """
    table = np.clip(
        delta.detach().cpu().numpy().astype(np.float16), np.float16(_STEP_MIN), np.float16(_STEP_MAX)
    )
    return table, torch.from_numpy(table.astype(np.float32))


def _encode_hyper(hf: HardForward, model: CodecModel, coder) -> bytes:
    rows, offsets = hyper_cdf_rows(model.hyper_density)
    sym = hf.z_symbols
    channels = sym.shape[-3]
    shape = (1,) * (sym.ndim - 3) + (channels, 1, 1)
    idx = (sym - offsets.reshape(shape)).ravel()
    row_idx = np.broadcast_to(np.arange(channels).reshape(shape), sym.shape).ravel()
    return coder.encode(idx.astype(np.int64), rows, row_idx.astype(np.int64))


def _encode_groups(hf: HardForward, model: CodecModel, step: torch.Tensor | None, coder) -> list[bytes]:
    payloads = []
    for i, (a, b) in enumerate(model.spec.channel_ranges):
        scale = hf.params[i].scale.detach().cpu().numpy().astype(np.float64)
        if step is not None:
            d = step.numpy().astype(np.float64)[a:b].reshape((1,) * (scale.ndim - 3) + (-1, 1, 1))
        else:
            d = 1.0
        rows = gaussian_cdf_rows(scale, d)
        idx = hf.y_symbols[i].ravel() + SYMBOL_BOUND
        payloads.append(coder.encode(idx.astype(np.int64), rows, np.arange(idx.size, dtype=np.int64)))
    return payloads


def compress_with_report(
    image,
    model: CodecModel,
    refine: RefineOptions | None = None,
    coder=None,
) -> tuple[CompressedObject, CompressReport]:
    """Full encode: pad, transform (optionally refine), quantize, code."""
    if coder is None:
        coder = get_coder(1)
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError("image must be [channels, height, width]")
    padded, (orig_h, orig_w) = pad_to_multiple(arr, model.config.downsample_factor_z)
    x = torch.from_numpy(np.ascontiguousarray(padded)).to(torch.float32).unsqueeze(0)

    trace = None
    step_table = None
    step = None
    if refine is not None:
        extractor = refine.extractor if refine.extractor is not None else ConvPyramidExtractor()
        state, trace = refine_latents(
            x,
            model,
            extractor,
            refine.rate_target,
            refine.weights,
            schedule=refine.schedule,
            steps=refine.steps,
            roi=refine.roi,
            seed=refine.seed,
            learning_rate=refine.learning_rate,
        )
        y, z = state.y.detach(), state.z.detach()
        step_table, step = _stored_step(state.delta)
    else:
        with torch.no_grad():
            y = model.analysis(x)
            z = model.hyper_analysis(y)

    hf = hard_forward(model, y, z, delta=step)
    obj = CompressedObject(
        coder_id=int(coder.coder_id),
        original_height=orig_h,
        original_width=orig_w,
        transform_config_hash=model.weight_digest(),
        step_table=step_table,
        hyper_payload=_encode_hyper(hf, model, coder),
        group_payloads=_encode_groups(hf, model, step, coder),
    )
    report = CompressReport(
        ideal_bits=hf.total_bits,
        measured_bits=8 * obj.total_bytes,
        padded_size=(padded.shape[-2], padded.shape[-1]),
        trace=trace,
    )
    return obj, report


def compress(image, model: CodecModel, refine: RefineOptions | None = None, coder=None) -> CompressedObject:
    return compress_with_report(image, model, refine=refine, coder=coder)[0]


# ---------------------------------------------------------------------------
# decoding


@dataclass
class DecodedLatents:
    """Everything the decoder recovers before synthesis."""

    y_hat: torch.Tensor
    z_hat: torch.Tensor
    z_symbols: np.ndarray
    y_symbols: list[np.ndarray]
    step: torch.Tensor | None


def _padded_dims(obj: CompressedObject, model: CodecModel) -> tuple[int, int]:
    fz = model.config.downsample_factor_z
    ph = obj.original_height + (-obj.original_height) % fz
    pw = obj.original_width + (-obj.original_width) % fz
    return ph, pw


def _check_compatible(obj: CompressedObject, model: CodecModel) -> None:
    if obj.transform_config_hash != model.weight_digest():
        raise ConfigMismatchError(
            "container was produced by a different checkpoint (config hash mismatch)"
        )
    if obj.num_groups != model.spec.num_groups:
        raise ConfigMismatchError("group count disagrees with the model")
    if obj.step_table is not None and obj.step_table.size != model.config.latent_channels:
        raise ConfigMismatchError("step table length disagrees with the model")


def unpack_latents(obj: CompressedObject, model: CodecModel, coder=None) -> DecodedLatents:
    """Entropy-decode a container back to quantized latents.

    Validates the config hash before touching any payload.
    """
    _check_compatible(obj, model)
    if coder is None:
        coder = get_coder(obj.coder_id)
    elif int(coder.coder_id) != obj.coder_id:
        raise UnknownCoderError("supplied coder does not match the container's coder_id")

    ph, pw = _padded_dims(obj, model)
    fy, fz = model.config.downsample_factor_y, model.config.downsample_factor_z
    yh, yw = ph // fy, pw // fy
    zh, zw = ph // fz, pw // fz
    cz = model.config.hyper_channels

    with torch.no_grad():
        rows, offsets = hyper_cdf_rows(model.hyper_density)
        row_idx = np.broadcast_to(
            np.arange(cz).reshape(1, cz, 1, 1), (1, cz, zh, zw)
        ).ravel()
        decoded = coder.decode(obj.hyper_payload, rows, row_idx.astype(np.int64), cz * zh * zw)
        z_symbols = (decoded.reshape(1, cz, zh, zw) + offsets.reshape(1, cz, 1, 1)).astype(np.int64)
        z_hat = torch.from_numpy(z_symbols).to(torch.float32)
        context = model.hyper_synthesis(z_hat)

        step = None
        if obj.step_table is not None:
            step = torch.from_numpy(obj.step_table.astype(np.float32))

        groups: list[torch.Tensor] = []
        y_symbols: list[np.ndarray] = []
        for i, (a, b) in enumerate(model.spec.channel_ranges):
            p = model.entropy.predict_params(i, context, groups)
            scale = p.scale.detach().cpu().numpy().astype(np.float64)
            if step is not None:
                d_np = step.numpy().astype(np.float64)[a:b].reshape(1, -1, 1, 1)
                d = step[a:b].view(-1, 1, 1)
            else:
                d_np, d = 1.0, 1.0
            rows_g = gaussian_cdf_rows(scale, d_np)
            n = (b - a) * yh * yw
            idx = coder.decode(obj.group_payloads[i], rows_g, np.arange(n, dtype=np.int64), n)
            sym = (idx.reshape(1, b - a, yh, yw) - SYMBOL_BOUND).astype(np.int64)
            y_symbols.append(sym)
            groups.append(dequantize(sym, p.mean, d, torch.float32))
        return DecodedLatents(
            y_hat=merge_groups(groups),
            z_hat=z_hat,
            z_symbols=z_symbols,
            y_symbols=y_symbols,
            step=step,
        )


def decompress(obj: CompressedObject, model: CodecModel, coder=None) -> torch.Tensor:
    """Decode to an image tensor [channels, original_height, original_width]."""
    latents = unpack_latents(obj, model, coder=coder)
    with torch.no_grad():
        x_hat = model.synthesis(latents.y_hat)
    return crop_to_size(x_hat, (obj.original_height, obj.original_width)).squeeze(0)
