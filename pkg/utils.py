# utils.py
"""Random streams, summary statistics and batch orchestration shared by the simulators."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from tqdm import tqdm

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0x5EED_0000_0000_0001
DEFAULT_BATCH = 2000

_UNIT = 2.0 ** -53


# --- Environment ---

def env_int(name, default):
    """Reads a positive integer from the environment, falling back to ``default``."""
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
        if value < 1:
            raise ValueError
        return value
    except ValueError:
        logger.warning("ignoring %s=%r (expected a positive integer)", name, raw)
        return default


def worker_count():
    return env_int("HYBRIDSENS_THREADS", os.cpu_count() or 1)


def batch_size():
    return env_int("HYBRIDSENS_BATCH", DEFAULT_BATCH)


def parse_seed(text):
    """Seeds are accepted in decimal or 0x-prefixed hex."""
    if isinstance(text, int):
        seed = text
    else:
        seed = int(str(text).strip().replace("_", ""), 0)
    if not 0 <= seed < 2 ** 64:
        raise ValueError(f"seed {text!r} is not a 64-bit unsigned integer")
    return seed


# --- Random streams ---

class RngStream:
    """Deterministic uniform / exponential stream keyed by ``(root_seed, *key)``.

    Construction: ``numpy.random.Philox`` seeded with
    ``SeedSequence(entropy=root_seed, spawn_key=key)``. Each uniform is the top
    53 bits of one raw 64-bit output scaled by 2**-53; zeros are skipped, so
    the stream is the ordered sequence of nonzero values. Distinct keys give
    independent streams; equal keys give bit-identical sequences on every
    platform.
    """

    def __init__(self, root_seed, *key):
        self.root_seed = int(root_seed)
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(entropy=self.root_seed, spawn_key=self.key)
        self._bitgen = np.random.Philox(seq)

    def uniforms(self, size):
        out = np.empty(0)
        while out.size < size:
            raw = self._bitgen.random_raw(size - out.size)
            u = (raw >> np.uint64(11)).astype(np.float64) * _UNIT
            out = np.concatenate([out, u[u > 0]])
        return out

    def uniform(self):
        return float(self.uniforms(1)[0])

    def exponentials(self, size):
        return -np.log(self.uniforms(size))

    def exponential(self):
        return float(self.exponentials(1)[0])

    def child(self, *key):
        return RngStream(self.root_seed, *(self.key + tuple(key)))


class StreamBank:
    """One RngStream per batch row, with buffered vectorised draws.

    Row ``r`` always consumes its own stream in order, so a path's draws do not
    depend on which other paths share its batch.
    """

    def __init__(self, streams, block=256):
        self.streams = list(streams)
        self.block = block
        self._buf = np.empty((len(self.streams), block))
        self._pos = np.full(len(self.streams), block, dtype=np.int64)

    def __len__(self):
        return len(self.streams)

    def uniform(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            return np.empty(0)
        for r in rows[self._pos[rows] >= self.block]:
            self._buf[r] = self.streams[r].uniforms(self.block)
            self._pos[r] = 0
        out = self._buf[rows, self._pos[rows]]
        self._pos[rows] += 1
        return out

    def exponential(self, rows):
        return -np.log(self.uniform(rows))


def stream_bank(seed, keys, block=256):
    return StreamBank([RngStream(seed, *key) for key in keys], block)


# --- Summary statistics ---

@dataclass(frozen=True)
class SummaryStats:
    mean: float
    variance: float
    stderr: float
    count: int
    histogram: Optional[tuple] = None  # (bin edges, counts)


def summarize(values, bins=None):
    """Mean, sample variance and standard error over the leading axis."""
    values = np.asarray(values, dtype=float)
    count = values.shape[0]
    if count == 0:
        return SummaryStats(float("nan"), float("nan"), float("nan"), 0)
    mean = np.mean(values, axis=0)
    variance = np.var(values, axis=0, ddof=1) if count > 1 else np.zeros_like(mean)
    stderr = np.sqrt(variance / count)
    histogram = None
    if bins is not None:
        counts, edges = np.histogram(values, bins=bins)
        histogram = (edges, counts)
    return SummaryStats(mean, variance, stderr, count, histogram)


def integer_histogram(values):
    """Counts per integer value, as (values, counts)."""
    values = np.rint(np.asarray(values, dtype=float)).astype(np.int64)
    support, counts = np.unique(values, return_counts=True)
    return support, counts


def total_variation(h1, h2):
    """TV distance between two histograms given as {value: count} or (values, counts)."""
    def normalise(h):
        if not isinstance(h, dict):
            h = dict(zip(np.asarray(h[0]).tolist(), np.asarray(h[1]).tolist()))
        total = float(sum(h.values()))
        return {k: v / total for k, v in h.items()}

    p, q = normalise(h1), normalise(h2)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in set(p) | set(q))


# --- Batch orchestration ---

def batch_ranges(n_paths, size=None):
    size = size or batch_size()
    return [(start, min(start + size, n_paths)) for start in range(0, n_paths, size)]


def run_batches(n_paths, fn, size=None, workers=None, progress=False, desc=None):
    """Runs ``fn(start, stop)`` over consecutive path ranges; results come back in path order."""
    ranges = batch_ranges(n_paths, size)
    workers = min(workers or worker_count(), max(len(ranges), 1))
    bar = tqdm(total=n_paths, desc=desc, disable=not progress, leave=False)
    try:
        if workers <= 1:
            results = []
            for start, stop in ranges:
                results.append(fn(start, stop))
                bar.update(stop - start)
            return results
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fn, start, stop) for start, stop in ranges]
            results = []
            for (start, stop), future in zip(ranges, futures):
                results.append(future.result())
                bar.update(stop - start)
            return results
    finally:
        bar.close()
