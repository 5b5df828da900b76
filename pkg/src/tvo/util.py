"""Small numpy helpers and deterministic RNG stream derivation."""
from __future__ import annotations

import json

import numpy as np


def rng_stream(seed, *stream) -> np.random.Generator:
    """Generator for (seed, *stream).

    Distinct stream tuples give statistically independent streams; identical
    tuples reproduce the same draws bit for bit.
    """
    parts = [int(seed)] + [int(s) for s in stream]
    if any(p < 0 for p in parts):
        raise ValueError("seed components must be non-negative")
    return np.random.default_rng(parts)


def logsumexp(v, axis=None, keepdims=False):
    """Stable log-sum-exp; rows of all -inf stay -inf."""
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True))
    out = np.where(np.isfinite(m), out, m)
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    return v - np.asarray(logsumexp(v, axis=axis, keepdims=True))


def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def log_sigmoid(v):
    """log(sigmoid(v)) without overflow on either tail."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v >= 0, -np.log1p(np.exp(-np.abs(v))), v - np.log1p(np.exp(-np.abs(v))))


def effective_sample_size(normalized_weights, axis=-1):
    w = np.asarray(normalized_weights, dtype=np.float64)
    return 1.0 / np.sum(w * w, axis=axis)


def format_cell(x) -> str:
    """CSV cell: shortest round-trip repr for floats, empty string for None."""
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(c) for c in row) + "\n")


def write_jsonl(path, header, rows):
    with open(path, "w") as fh:
        for row in rows:
            rec = {k: (None if v is None else (float(v) if isinstance(v, (float, np.floating)) else v))
                   for k, v in zip(header, row)}
            fh.write(json.dumps(rec) + "\n")
