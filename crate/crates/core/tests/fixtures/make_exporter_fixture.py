"""Writes the exporter-side fixture: 200 shapes, 5 prompts, a manifest and
the SHA-256 of the view payload (every f32 value of every record, in
order, little-endian). Run from this directory."""

import hashlib
import json
import struct

import numpy as np

DIM = 16
CLASSES = ["bathtub", "chair", "desk", "lamp", "sofa"]
rng = np.random.default_rng(20240601)


def unit_rows(n):
    x = rng.standard_normal((n, DIM)).astype(np.float64)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype("<f4")


def header(kind, count):
    return b"PEVF" + struct.pack("<IBII", 1, kind, DIM, count)


def record_id(name):
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


views = bytearray(header(1, 200))
payload = hashlib.sha256()
for i in range(200):
    m = 3 if i % 17 == 0 else 4
    rows = unit_rows(m)
    views += record_id(f"shape_{i:04d}") + struct.pack("<II", i % len(CLASSES), m)
    views += rows.tobytes()
    payload.update(rows.tobytes())

prompts = bytearray(header(2, len(CLASSES)))
for name in CLASSES:
    prompts += record_id(name) + unit_rows(1).tobytes()

with open("exporter_views.pevf", "wb") as f:
    f.write(views)
with open("exporter_prompts.pevf", "wb") as f:
    f.write(prompts)
with open("exporter_views.sha256", "w") as f:
    f.write(payload.hexdigest() + "\n")
with open("exporter_manifest.json", "w") as f:
    json.dump(
        {
            "categories": CLASSES,
            "template": "A side view of 3D CAD model of {CLASS}",
            "splits": {"test": "exporter_views.pevf"},
            "prompts": "exporter_prompts.pevf",
            "backbone": "fixture",
            "normalized": True,
        },
        f,
        indent=2,
    )
    f.write("\n")
