"""Byte-bounded replay buffer of PQ-encoded latent tensors.

When an insert pushes the buffer past capacity, one entry is evicted
uniformly at random from the class with the most entries (counted after the
insert; ties go to the lowest class id). The just-inserted sample is itself a
candidate when its class is the one chosen.
"""
import base64
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .pq import LABEL_BYTES


@dataclass
class Eviction:
    label: int
    position: int     # index within the class's candidate list at eviction time
    insert_time: int  # of the evicted entry
    was_new: bool     # the incoming sample itself was dropped


class ReplayBuffer:
    def __init__(self, capacity_bytes, code_shape):
        self.code_shape = tuple(int(v) for v in code_shape)
        if len(self.code_shape) != 3:
            raise ConfigError("code_shape must be (r, s, n_codebooks)")
        self.entry_bytes = int(np.prod(self.code_shape)) + LABEL_BYTES
        if self.entry_bytes > capacity_bytes:
            raise ConfigError(f"one entry needs {self.entry_bytes} bytes, capacity is {capacity_bytes}")
        self.capacity_bytes = int(capacity_bytes)
        self.capacity = self.capacity_bytes // self.entry_bytes
        self.size = 0
        self.clock = 0
        self.peak_bytes = 0
        alloc = min(self.capacity, 1024)
        self.codes = np.zeros((alloc,) + self.code_shape, dtype=np.uint8)
        self.labels = np.zeros(alloc, dtype=np.int64)
        self.rehearsal_count = np.zeros(alloc, dtype=np.int64)
        self.insert_time = np.zeros(alloc, dtype=np.int64)
        self._members = {}  # class -> list of slots
        self._pos = np.zeros(alloc, dtype=np.int64)  # slot -> index in its class list

    # ------------------------------------------------------------ bookkeeping

    @property
    def total_bytes(self):
        return self.size * self.entry_bytes

    def histogram(self):
        return {c: len(s) for c, s in sorted(self._members.items()) if s}

    def classes(self):
        return sorted(c for c, s in self._members.items() if s)

    def members(self, label):
        return np.array(self._members.get(label, []), dtype=np.int64)

    def __len__(self):
        return self.size

    def _grow(self):
        new = min(self.capacity, max(2 * self.codes.shape[0], 1))
        for name in ("codes", "labels", "rehearsal_count", "insert_time", "_pos"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[: old.shape[0]] = old
            setattr(self, name, arr)

    def _add_member(self, slot, label):
        lst = self._members.setdefault(label, [])
        self._pos[slot] = len(lst)
        lst.append(slot)

    def _remove_member(self, slot, label):
        lst = self._members[label]
        i = self._pos[slot]
        last = lst.pop()
        if last != slot:
            lst[i] = last
            self._pos[last] = i

    def _write(self, slot, codes, label):
        self.codes[slot] = codes
        self.labels[slot] = label
        self.rehearsal_count[slot] = 0
        self.insert_time[slot] = self.clock

    # ------------------------------------------------------------ operations

    def insert(self, codes, label, rng):
        """Store one encoded tensor. Returns an :class:`Eviction` or None."""
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.shape != self.code_shape:
            raise ConfigError(f"code shape {codes.shape} != buffer code shape {self.code_shape}")
        label = int(label)
        evicted = None
        if self.size < self.capacity:
            if self.size == self.codes.shape[0]:
                self._grow()
            slot = self.size
            self.size += 1
            self._write(slot, codes, label)
            self._add_member(slot, label)
        else:
            hist = self.histogram()
            hist[label] = hist.get(label, 0) + 1
            top = max(hist.values())
            victim_class = min(c for c, n in hist.items() if n == top)
            cands = self._members.get(victim_class, [])
            n_cand = len(cands) + (1 if victim_class == label else 0)
            j = int(rng.integers(n_cand))
            if j == len(cands):
                evicted = Eviction(label, j, self.clock, True)
            else:
                slot = cands[j]
                evicted = Eviction(victim_class, j, int(self.insert_time[slot]), False)
                self._remove_member(slot, victim_class)
                self._write(slot, codes, label)
                self._add_member(slot, label)
        self.clock += 1
        self.peak_bytes = max(self.peak_bytes, self.total_bytes)
        return evicted

    def _check(self, indices):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise UsageError(f"buffer index out of range [0, {self.size})")
        return idx

    def decode(self, indices, codec):
        """Decoded tensors and labels, without touching rehearsal counters."""
        idx = self._check(indices)
        return codec.decode(self.codes[idx]), self.labels[idx].copy()

    def decode_all(self, codec):
        return self.decode(np.arange(self.size), codec)

    def reconstruct_batch(self, indices, codec):
        """Decode entries for rehearsal; each occurrence bumps its rehearsal count."""
        idx = self._check(indices)
        np.add.at(self.rehearsal_count, idx, 1)
        return codec.decode(self.codes[idx]), self.labels[idx].copy()

    def snapshot_stats(self):
        return self.histogram(), self.total_bytes, self.rehearsal_count[: self.size].copy()

    def dump_jsonl(self, path):
        with open(path, "w") as fh:
            for i in range(self.size):
                fh.write(json.dumps({
                    "class": int(self.labels[i]),
                    "codes": base64.b64encode(self.codes[i].tobytes()).decode("ascii"),
                    "rehearsal_count": int(self.rehearsal_count[i]),
                }) + "\n")
