"""Regenerate the committed binary fixtures.

Files are laid out by hand with ``struct`` so they do not go through the
library's own writers; the expected metrics come from the brute-force oracle.
Run from the repo root: ``python tests/fixtures/make_fixtures.py``.
"""
import json
import struct
from pathlib import Path

import numpy as np

from egs.oracles import brute_metrics

HERE = Path(__file__).resolve().parent


def egse_bytes(ids, rows) -> bytes:
    rows = np.asarray(rows, dtype=np.float32)
    out = [b"EGSE", struct.pack("<I", 1), struct.pack("<QQ", *rows.shape)]
    for i, row in zip(ids, rows):
        out.append(struct.pack("<Q", int(i)))
        out.append(struct.pack(f"<{rows.shape[1]}f", *row.tolist()))
    return b"".join(out)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


# tensors chosen to be exactly representable in f32
CKPT_TENSORS = {
    "a.weight": ([2, 3], [0.5, -1.25, 3.0, 0.0, 1024.0, -0.0078125]),
    "b.bias": ([4], [1.0, 2.0, -3.5, 0.25]),
}
CKPT_STEP = 7


def egsc_bytes() -> bytes:
    index, payload, offset = {}, [], 0
    for name in sorted(CKPT_TENSORS):
        shape, vals = CKPT_TENSORS[name]
        index[name] = {"dtype": "f32", "offset": offset, "shape": shape}
        payload.append(struct.pack(f"<{len(vals)}f", *vals))
        offset += 4 * len(vals)
    meta = {"config": {}, "extra": {}, "step": CKPT_STEP, "tensors": index}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"EGSC" + struct.pack("<IQ", 1, len(blob)) + blob + b"".join(payload)


def main():
    rng = np.random.default_rng(20240611)
    classes, d = 6, 8
    gids = [c for c in range(classes) for _ in range(4)]       # 4 relevant per query
    qids = [c for c in range(classes) for _ in range(2)]
    G = unit_rows(rng, len(gids), d)
    # queries sit near one of their own gallery items so the ranking is non-trivial but not chance
    Q = np.empty((len(qids), d), dtype=np.float32)
    for r, c in enumerate(qids):
        x = G[gids.index(c) + r % 4].astype(np.float64) + 0.9 * rng.standard_normal(d) / np.sqrt(d)
        Q[r] = (x / np.linalg.norm(x)).astype(np.float32)
    (HERE / "gallery.egse").write_bytes(egse_bytes(gids, G))
    (HERE / "query.egse").write_bytes(egse_bytes(qids, Q))
    per_query = brute_metrics(Q.astype(np.float64), qids, G.astype(np.float64), gids)
    expected = {"query_ids": qids, "per_query": per_query,
                "means": {k: float(np.mean(v)) for k, v in per_query.items()}}
    (HERE / "expected_metrics.json").write_text(json.dumps(expected, indent=2, sort_keys=True) + "\n")
    (HERE / "tiny.egsc").write_bytes(egsc_bytes())


if __name__ == "__main__":
    main()
