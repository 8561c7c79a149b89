"""Transposable weight buffer: circulant block layout over single-port columns.

Kernels of one filter group (Pof consecutive filters) form a block matrix whose
row r is input channel r and whose column c is filter ``group*Pof + c``; each
block is one Nky x Nkx kernel.  Row r is rotated by r, so block (r, c) sits in
physical column ``(c + r) % Pof`` at block address ``group*rows + r``.  A row
(FP read) then touches every column at one shared address, and a column of the
block matrix (BP read) touches every column once at shifted addresses.
Padding rows/filters (when Pof does not divide Nif/Nof) hold zero blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .golden import FxpTensor


class BufferCapacityError(ValueError):
    pass


class PortConflict(RuntimeError):
    """Two accesses hit the same single-port column in one cycle group."""


NON_TRANSPOSE = "non_transpose"
TRANSPOSE = "transpose"


@dataclass
class AddressTranslation:
    mode: str
    columns: list[int]
    addresses: list[int]
    # logical slot each physical column's block is routed to
    permutation: list[int]


@dataclass
class TransposableBuffer:
    pof: int
    nof: int
    nif: int
    nky: int
    nkx: int
    fmt: object
    columns: list[np.ndarray]
    trace: list[AddressTranslation] = field(default_factory=list)
    recording: bool = False

    @property
    def block_words(self) -> int:
        return self.nky * self.nkx

    @property
    def groups(self) -> int:
        return -(-self.nof // self.pof)

    @property
    def rows(self) -> int:
        """Logical block rows per group, padded to a multiple of Pof."""
        return -(-self.nif // self.pof) * self.pof

    @property
    def stored_words(self) -> int:
        """Words holding real (non-padding) kernel data."""
        return self.nof * self.nif * self.block_words

    @property
    def physical_words(self) -> int:
        return sum(c.size for c in self.columns)

    def locate(self, of: int, i: int) -> tuple[int, int]:
        """(physical column, block address) of kernel w[of, i]."""
        g, c = divmod(of, self.pof)
        return (c + i) % self.pof, g * self.rows + i

    def _read_block(self, column: int, address: int, flip: bool) -> np.ndarray:
        base = address * self.block_words
        words = self.columns[column][base:base + self.block_words]
        if flip:
            # reversed address order inside the block == 180 degree rotation
            words = words[::-1]
        return words.reshape(self.nky, self.nkx)

    def _log(self, tr: AddressTranslation):
        cols = tr.columns
        if len(set(cols)) != len(cols):
            raise PortConflict(f"column accessed twice in one cycle group: {cols}")
        if self.recording:
            self.trace.append(tr)

    def read_fp(self, filter_group: int, if_index: int) -> np.ndarray:
        """Pof kernels w[group*Pof + c, if_index] in logical filter order (zeros for padding)."""
        if not (0 <= filter_group < self.groups and 0 <= if_index < self.nif):
            raise IndexError(f"read_fp({filter_group}, {if_index}) out of range")
        addr = filter_group * self.rows + if_index
        out = np.empty((self.pof, self.nky, self.nkx), dtype=np.int16)
        perm = []
        for p in range(self.pof):
            c = (p - if_index) % self.pof
            out[c] = self._read_block(p, addr, flip=False)
            perm.append(c)
        self._log(AddressTranslation(NON_TRANSPOSE, list(range(self.pof)), [addr] * self.pof, perm))
        return out

    def read_bp(self, if_group: int, of_index: int) -> np.ndarray:
        """Pof flipped kernels w[of_index, if_group*Pof + j, ::-1, ::-1] in input-channel order."""
        if not (0 <= of_index < self.nof and 0 <= if_group < self.rows // self.pof):
            raise IndexError(f"read_bp({if_group}, {of_index}) out of range")
        g, c = divmod(of_index, self.pof)
        out = np.empty((self.pof, self.nky, self.nkx), dtype=np.int16)
        addrs, perm = [], []
        for p in range(self.pof):
            j = (p - c) % self.pof
            addr = g * self.rows + if_group * self.pof + j
            out[j] = self._read_block(p, addr, flip=True)
            addrs.append(addr)
            perm.append(j)
        self._log(AddressTranslation(TRANSPOSE, list(range(self.pof)), addrs, perm))
        return out

    def write_fp(self, filter_group: int, if_index: int, blocks: np.ndarray):
        """Write one block row (Pof kernels in logical filter order) at a shared address."""
        addr = filter_group * self.rows + if_index
        bw = self.block_words
        for c in range(self.pof):
            p = (c + if_index) % self.pof
            self.columns[p][addr * bw:(addr + 1) * bw] = np.asarray(blocks[c]).reshape(-1)
        self._log(AddressTranslation(NON_TRANSPOSE, list(range(self.pof)), [addr] * self.pof,
                                     [(p - if_index) % self.pof for p in range(self.pof)]))

    def update(self, w: FxpTensor):
        """Rewrite all kernels (e.g. after a weight update), one block row per cycle group."""
        if w.raw.shape != (self.nof, self.nif, self.nky, self.nkx):
            raise ValueError(f"update shape {w.raw.shape} does not match the buffer")
        padded = _pad_filters(w.raw, self.groups * self.pof)
        for g in range(self.groups):
            for i in range(self.nif):
                self.write_fp(g, i, padded[g * self.pof:(g + 1) * self.pof, i])
        self.fmt = w.fmt

    def assemble_fp(self) -> np.ndarray:
        """Whole (Nof, Nif, Nky, Nkx) tensor gathered through non-transpose reads."""
        out = np.zeros((self.groups * self.pof, self.nif, self.nky, self.nkx), dtype=np.int16)
        for g in range(self.groups):
            for i in range(self.nif):
                out[g * self.pof:(g + 1) * self.pof, i] = self.read_fp(g, i)
        return out[:self.nof]

    def assemble_bp(self) -> np.ndarray:
        """Whole flipped/swapped (Nif, Nof, Nky, Nkx) tensor gathered through transpose reads."""
        out = np.zeros((self.rows, self.nof, self.nky, self.nkx), dtype=np.int16)
        for h in range(self.rows // self.pof):
            for f in range(self.nof):
                out[h * self.pof:(h + 1) * self.pof, f] = self.read_bp(h, f)
        return out[:self.nif]

    def dram_image(self) -> np.ndarray:
        """Column buffers laid end to end; the same layout is used for DRAM."""
        return np.concatenate(self.columns)


def _pad_filters(raw: np.ndarray, nof_padded: int) -> np.ndarray:
    if raw.shape[0] == nof_padded:
        return raw
    pad = np.zeros((nof_padded - raw.shape[0],) + raw.shape[1:], dtype=raw.dtype)
    return np.concatenate([raw, pad])


def store_kernels(w: FxpTensor, pof: int, capacity_words: int | None = None) -> TransposableBuffer:
    """Lay out (Nof, Nif, Nky, Nkx) kernels as per-group circulants of blocks."""
    if pof < 1:
        raise ValueError("pof must be >= 1")
    nof, nif, nky, nkx = w.raw.shape
    groups = -(-nof // pof)
    rows = -(-nif // pof) * pof
    words_per_column = groups * rows * nky * nkx
    if capacity_words is not None and words_per_column * pof > capacity_words:
        raise BufferCapacityError(f"{words_per_column * pof} words exceed buffer capacity {capacity_words}")
    columns = [np.zeros(words_per_column, dtype=np.int16) for _ in range(pof)]
    buf = TransposableBuffer(pof, nof, nif, nky, nkx, w.fmt, columns)
    buf.update(w)
    return buf


def load_dram_image(image: np.ndarray, shape, pof: int) -> np.ndarray:
    """Inverse of `TransposableBuffer.dram_image` for kernels of `shape`."""
    nof, nif, nky, nkx = shape
    groups = -(-nof // pof)
    rows = -(-nif // pof) * pof
    per_col = groups * rows * nky * nkx
    columns = [np.asarray(image[p * per_col:(p + 1) * per_col], dtype=np.int16) for p in range(pof)]
    buf = TransposableBuffer(pof, nof, nif, nky, nkx, None, columns)
    return buf.assemble_fp()


def access_trace(buf: TransposableBuffer, reads) -> list[list[tuple[int, int]]]:
    """Per cycle group (column, address) pairs for a sequence of reads.

    `reads` holds ``("fp", filter_group, if_index)`` or ``("bp", if_group, of_index)``.
    """
    buf.trace, buf.recording = [], True
    try:
        for kind, a, b in reads:
            (buf.read_fp if kind == "fp" else buf.read_bp)(a, b)
    finally:
        buf.recording = False
    return [list(zip(t.columns, t.addresses)) for t in buf.trace]


def conflict_free(trace) -> bool:
    return all(len({col for col, _ in group}) == len(group) for group in trace)

