# SPDX-License-Identifier: Apache-2.0
"""Writer for LLTRACE1 layer-logit traces (layout in docs/trace-format.md).

Stdlib only, so a model-side extractor can import it without pulling in the
C++ build. Logits are stored as binary32; pass Python floats or anything
iterable of numbers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Sequence

MAGIC = b"LLTRACE1"
VERSION = 1
DENSE_F32 = 0
TOPK_SPARSE = 1
NO_CONTEXT = 0xFFFFFFFF


@dataclass
class Header:
    vocab_size: int
    layer_indices: Sequence[int]
    step_count: int
    encoding: int = DENSE_F32
    topk: int = 0
    tokenizer_id: str = ""

    def check(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not self.layer_indices:
            raise ValueError("at least the final layer must be captured")
        if any(b <= a for a, b in zip(self.layer_indices, self.layer_indices[1:])):
            raise ValueError("layer_indices must be strictly ascending")
        if self.encoding == DENSE_F32 and self.topk != 0:
            raise ValueError("dense traces need topk == 0")
        if self.encoding == TOPK_SPARSE and not 1 <= self.topk <= self.vocab_size:
            raise ValueError("topk must be in 1..vocab_size")

    def encode(self) -> bytes:
        self.check()
        tok = self.tokenizer_id.encode("utf-8")
        fixed = struct.pack(
            "<8sHBBIHHIQI",
            MAGIC, VERSION, self.encoding, 0, self.vocab_size,
            len(self.layer_indices), 0, self.topk, self.step_count, len(tok),
        )
        return fixed + tok + struct.pack(f"<{len(self.layer_indices)}H", *self.layer_indices)


@dataclass
class Step:
    step_index: int
    # dense: one row of vocab_size logits per captured layer.
    # sparse: one row of (token, logit) pairs per captured layer.
    rows: list = field(default_factory=list)
    context: Optional[Sequence[int]] = None


def top_k_row(logits: Sequence[float], k: int) -> list:
    """The k largest entries of a dense row as (token, logit), sorted by token."""
    order = sorted(range(len(logits)), key=lambda t: (-logits[t], t))[:k]
    return sorted((t, logits[t]) for t in order)


def encode_step(header: Header, step: Step) -> bytes:
    if len(step.rows) != len(header.layer_indices):
        raise ValueError("one row per captured layer is required")
    ctx = step.context
    out = [struct.pack("<QI", step.step_index, NO_CONTEXT if ctx is None else len(ctx))]
    if ctx is not None:
        out.append(struct.pack(f"<{len(ctx)}I", *ctx))
    for row in step.rows:
        if header.encoding == DENSE_F32:
            if len(row) != header.vocab_size:
                raise ValueError("dense rows hold vocab_size logits")
            out.append(struct.pack(f"<{len(row)}f", *row))
        else:
            if len(row) != header.topk:
                raise ValueError("sparse rows hold topk entries")
            tokens = [t for t, _ in row]
            if tokens != sorted(set(tokens)) or tokens[-1] >= header.vocab_size:
                raise ValueError("sparse tokens must be unique, ascending and < vocab_size")
            for t, logit in row:
                out.append(struct.pack("<If", t, logit))
    return b"".join(out)


def write_trace(sink: BinaryIO, header: Header, steps: Iterable[Step]) -> int:
    """Writes a full trace; returns the byte count."""
    n = sink.write(header.encode())
    count = 0
    for step in steps:
        n += sink.write(encode_step(header, step))
        count += 1
    if count != header.step_count:
        raise ValueError(f"header declares {header.step_count} steps, got {count}")
    return n
