"""Regenerates the step1_residual fixture. Run from this directory with python3."""
import json
import math
import struct

DIM = 8
PER_VALUE = 6


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def vec(**coords):
    v = [0.0] * DIM
    for k, x in coords.items():
        v[int(k[1:])] = x
    return v


def add(*vs):
    return [sum(xs) for xs in zip(*vs)]


def scale(a, v):
    return [a * x for x in v]


# e0: subject, e1: text attribute direction, e2: image-only attribute cue,
# e3..e5: per-record jitter, e6/e7: augmentation wording noise
image_cue = unit(vec(e1=0.6, e2=0.8))
records = []
for value, sign in (("male", 1.0), ("female", -1.0)):
    for i in range(PER_VALUE):
        jitter = vec(e3=0.1 * math.sin(i + 1), e4=0.1 * math.cos(2 * i + 1), e5=0.1 * math.sin(3 * i + 2))
        v = unit(add(vec(e0=1.0), scale(sign * 0.5, image_cue), jitter))
        records.append((f"{value}-{i}", value, v))

with open("vectors.f32", "wb") as f:
    for _, _, v in records:
        f.write(struct.pack("<%df" % DIM, *v))
with open("meta.jsonl", "w") as f:
    for rid, value, _ in records:
        f.write(json.dumps({"id": rid, "attributes": {"gender": value}}) + "\n")
manifest = {
    "schema": "bend/1",
    "dim": DIM,
    "count": len(records),
    "dtype": "f32le",
    "vectors_file": "vectors.f32",
    "meta_file": "meta.jsonl",
    "attributes": [{"name": "gender", "values": ["male", "female"]}],
}
with open("manifest.json", "w") as f:
    json.dump(manifest, f, indent=2)
    f.write("\n")

query = unit(vec(e0=1.0, e1=0.4, e2=0.3))
augmented = {
    "male": unit(add(query, vec(e1=0.25, e6=0.05))),
    "female": unit(add(query, vec(e1=-0.25, e7=0.05))),
}
with open("queries.jsonl", "w") as f:
    f.write(json.dumps({"id": "nurse", "text": "a photo of a nurse", "vector": query, "augmented": augmented}) + "\n")
