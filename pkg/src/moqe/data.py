"""Synthetic heterogeneous datasets, sub-dataset partitioning, and manifests.

The image generator draws 10 procedural shapes (the class label) over 7
texture families (the sub-dataset strata): each family has its own channel
gains, grating orientation, and noise level, which is what gives different
quantization schemes different per-subset error profiles.

The byte-level text generator emits documents whose randomness rate rises
with the source style, so an entropy-quantile split recovers ordered
sub-datasets.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigError, ContractError
from .util import substream

CV_KIND = "cv"
NLP_KIND = "nlp"


@dataclass
class Dataset:
    kind: str
    inputs: np.ndarray  # cv: [N,C,H,W] float; nlp: [N,L] int token ids
    targets: np.ndarray  # cv: [N] class ids; nlp: [N,L] next-token ids
    subset_ids: np.ndarray  # [N] small ints
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.inputs)

    def take(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.kind, self.inputs[idx], self.targets[idx], self.subset_ids[idx],
                       name=self.name, meta=dict(self.meta))

    def subset(self, sid):
        return self.take(np.nonzero(self.subset_ids == sid)[0])

    def n_subsets(self):
        return len(np.unique(self.subset_ids))

    def sample_digest(self, i):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs[i]).tobytes())
        h.update(np.ascontiguousarray(self.targets[i]).tobytes())
        return h.digest()

    def digest(self):
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        h.update(np.ascontiguousarray(self.subset_ids).tobytes())
        return h.hexdigest()

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            yield self.take(order[start : start + batch_size])


# -- image generator -------------------------------------------------------------

N_SHAPES = 10

# One channel-gain profile per texture family; deliberately far apart so
# activation statistics differ strongly across sub-datasets.
_FAMILY_GAINS = np.array(
    [
        [3.0, 0.08, 0.08, 0.08],
        [0.08, 3.0, 0.08, 0.08],
        [0.08, 0.08, 3.0, 0.08],
        [2.2, 0.06, 0.06, 0.06],
        [0.06, 2.2, 0.06, 0.06],
        [0.06, 0.06, 2.2, 0.06],
        [0.08, 0.08, 0.08, 2.6],
    ]
)
_FAMILY_NOISE = np.array([0.030, 0.035, 0.040, 0.045, 0.050, 0.055, 0.025])


def _shape_mask(shape_id, size, cx, cy, r):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - cx, y - cy
    dist = np.sqrt(dx * dx + dy * dy)
    if shape_id == 0:
        return dist < r
    if shape_id == 1:
        return (dist < r) & (dist > r * 0.55)
    if shape_id == 2:
        return np.maximum(np.abs(dx), np.abs(dy)) < r * 0.8
    if shape_id == 3:
        return np.abs(dx) + np.abs(dy) < r * 1.1
    if shape_id == 4:
        box = np.maximum(np.abs(dx), np.abs(dy)) < r
        return box & ((np.abs(dx) < r * 0.3) | (np.abs(dy) < r * 0.3))
    if shape_id == 5:
        return (np.abs(dy) < r * 0.3) & (np.abs(dx) < r)
    if shape_id == 6:
        return (np.abs(dx) < r * 0.3) & (np.abs(dy) < r)
    if shape_id == 7:
        return (dy > -r * 0.6) & (dy < r * 0.6) & (np.abs(dx) < (r * 0.6 - dy) * 0.75)
    if shape_id == 8:
        box = np.maximum(np.abs(dx), np.abs(dy)) < r
        return box & (np.abs(np.abs(dx) - np.abs(dy)) < r * 0.25)
    blobs = np.zeros_like(dist, dtype=bool)
    for sx in (-1, 1):
        for sy in (-1, 1):
            d = np.sqrt((dx - sx * r * 0.55) ** 2 + (dy - sy * r * 0.55) ** 2)
            blobs |= d < r * 0.3
    return blobs


def _family_texture(family, size, rng):
    theta = family * np.pi / 7.0
    freq = 2.0 + family
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * x + np.sin(theta) * y) + phase)
    return 0.5 + 0.5 * wave


def generate_cv_dataset(n_per_subset, n_subsets=7, seed=0, image_size=32, name="cv-synth"):
    """Balanced shape-classification set; subset id == texture family."""
    if n_subsets < 2 or n_subsets > len(_FAMILY_GAINS):
        raise ConfigError(f"cv generator supports 2..{len(_FAMILY_GAINS)} subsets, got {n_subsets}")
    rng = substream(seed, "cv-data")
    images, labels, sids = [], [], []
    for f in range(n_subsets):
        for i in range(n_per_subset):
            label = i % N_SHAPES
            cx = image_size / 2 + rng.uniform(-3, 3)
            cy = image_size / 2 + rng.uniform(-3, 3)
            r = image_size * rng.uniform(0.22, 0.32)
            mask = _shape_mask(label, image_size, cx, cy, r).astype(np.float64)
            tex = _family_texture(f, image_size, rng)
            base = 0.35 * tex + 1.2 * mask
            img = _FAMILY_GAINS[f][:, None, None] * base[None]
            img = img + rng.normal(0, _FAMILY_NOISE[f], size=img.shape)
            images.append(img)
            labels.append(label)
            sids.append(f)
    order = substream(seed, "cv-shuffle").permutation(len(images))
    return Dataset(
        CV_KIND,
        np.stack(images)[order],
        np.array(labels)[order],
        np.array(sids)[order],
        name=name,
        meta={"n_subsets": n_subsets, "seed": seed, "image_size": image_size},
    )


# -- byte-level text generator ------------------------------------------------------

_STYLE_PHRASES = [
    b"the quick brown fox jumps over the lazy dog. ",
    b"all work and no play makes a dull day indeed. ",
    b"one two three four five six seven eight nine. ",
    b"pack my box with five dozen brown glass jugs. ",
    b"a stitch in time saves nine, so they all say. ",
    b"never put off till tomorrow what you can do. ",
    b"look before you leap and think before speak. ",
]


def generate_nlp_corpus(n_docs_per_style, doc_len=512, n_styles=7, seed=0):
    """Documents whose random-byte rate increases with style index."""
    if n_styles < 2 or n_styles > len(_STYLE_PHRASES):
        raise ConfigError(f"nlp generator supports 2..{len(_STYLE_PHRASES)} styles, got {n_styles}")
    rng = substream(seed, "nlp-data")
    docs, styles = [], []
    for s in range(n_styles):
        noise_rate = 0.02 + 0.13 * s
        phrase = np.frombuffer(_STYLE_PHRASES[s], dtype=np.uint8)
        for _ in range(n_docs_per_style):
            reps = doc_len // len(phrase) + 2
            body = np.tile(phrase, reps)[:doc_len].copy()
            noisy = rng.random(doc_len) < noise_rate
            body[noisy] = rng.integers(32, 127, size=int(noisy.sum()))
            docs.append(body)
            styles.append(s)
    return docs, np.array(styles)


def byte_entropy(ids):
    """Shannon entropy (bits) of the byte histogram of one sequence."""
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def sequences_from_docs(docs, context, stride=None):
    """Chop documents into fixed-length (input, next-token target) pairs."""
    stride = stride or context
    xs, ys, doc_ids = [], [], []
    for d, doc in enumerate(docs):
        for start in range(0, len(doc) - context - 1 + 1, stride):
            window = doc[start : start + context + 1]
            if len(window) < context + 1:
                break
            xs.append(window[:-1])
            ys.append(window[1:])
            doc_ids.append(d)
    if not xs:
        raise ContractError("documents shorter than context+1")
    return np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64), np.array(doc_ids)


def generate_nlp_dataset(n_docs_per_style, context=64, doc_len=512, n_subsets=7, seed=0,
                         name="nlp-synth"):
    docs, _ = generate_nlp_corpus(n_docs_per_style, doc_len=doc_len, n_styles=n_subsets, seed=seed)
    xs, ys, _ = sequences_from_docs(docs, context)
    ds = Dataset(NLP_KIND, xs, ys, np.zeros(len(xs), dtype=np.int64), name=name,
                 meta={"n_subsets": n_subsets, "seed": seed, "context": context})
    return make_subsets(ds, n_subsets, "entropy")


# -- partitioning --------------------------------------------------------------------


def make_subsets(data, n_subsets, strategy):
    """Partition into mutually exclusive, collectively exhaustive sub-datasets."""
    if n_subsets < 2:
        raise ConfigError(f"need at least 2 subsets, got {n_subsets}")
    if strategy == "texture":
        strata = np.unique(data.subset_ids)
        if n_subsets > len(strata):
            raise ConfigError(f"{n_subsets} subsets requested but only {len(strata)} texture strata")
        return data
    if strategy == "entropy":
        ent = np.array([byte_entropy(row) for row in data.inputs])
        if len(np.unique(ent)) < n_subsets:
            raise ConfigError("not enough distinct entropy values for the requested subsets")
        edges = np.quantile(ent, np.linspace(0, 1, n_subsets + 1)[1:-1])
        sids = np.searchsorted(edges, ent, side="right")
        out = Dataset(data.kind, data.inputs, data.targets, sids.astype(np.int64),
                      name=data.name, meta=dict(data.meta))
        means = [ent[sids == s].mean() for s in range(n_subsets)]
        if not all(means[i] < means[i + 1] for i in range(n_subsets - 1)):
            raise ConfigError("entropy-quantile split did not produce increasing subset entropies")
        return out
    raise ConfigError(f"unknown subset strategy {strategy!r}")


def split_train_val(data, val_fraction, seed):
    rng = substream(seed, "train-val-split")
    order = rng.permutation(len(data))
    n_val = max(1, int(len(data) * val_fraction))
    return data.take(order[n_val:]), data.take(order[:n_val])


# -- persistence -----------------------------------------------------------------------


def save_dataset(data, out_dir):
    """One container per subset plus a JSON manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    subsets = []
    for sid in sorted(np.unique(data.subset_ids)):
        part = data.subset(int(sid))
        fname = f"subset_{sid}.moqe"
        path = os.path.join(out_dir, fname)
        header = {"kind": "dataset-part", "data_kind": data.kind, "subset_id": int(sid),
                  "meta": data.meta}
        checkpoint.save(path, header, [
            ("inputs", "f64", part.inputs.astype(np.float64)),
            ("targets", "f64", part.targets.astype(np.float64)),
        ])
        subsets.append({"id": int(sid), "path": fname, "count": len(part)})
    manifest = {"name": data.name, "kind": data.kind, "subsets": subsets}
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return mpath


def load_dataset(manifest_path):
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = os.path.dirname(manifest_path)
    xs, ys, sids = [], [], []
    meta = {}
    for part in manifest["subsets"]:
        header, entries = checkpoint.load(os.path.join(base, part["path"]))
        arrays = {name: arr for name, _, arr in entries}
        inputs, targets = arrays["inputs"], arrays["targets"].astype(np.int64)
        if manifest["kind"] == NLP_KIND:
            inputs = inputs.astype(np.int64)
        xs.append(inputs)
        ys.append(targets)
        sids.append(np.full(len(inputs), part["id"], dtype=np.int64))
        meta = header.get("meta", {})
    return Dataset(manifest["kind"], np.concatenate(xs), np.concatenate(ys),
                   np.concatenate(sids), name=manifest["name"], meta=meta)


# -- optional real-data ingestion --------------------------------------------------------


def load_text_file(path, context, n_subsets=2):
    """UTF-8 text file -> entropy-partitioned next-token dataset."""
    with open(path, "rb") as f:
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    xs, ys, _ = sequences_from_docs([raw], context)
    ds = Dataset(NLP_KIND, xs, ys, np.zeros(len(xs), dtype=np.int64),
                 name=os.path.basename(path), meta={"context": context})
    return make_subsets(ds, n_subsets, "entropy")


def load_image_dir(directory, index_csv="labels.csv"):
    """Flat dir of .npy RGB arrays plus a CSV of (filename, label, subset)."""
    rows = []
    with open(os.path.join(directory, index_csv)) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("filename"):
                continue
            fname, label, sid = line.split(",")
            rows.append((fname, int(label), int(sid)))
    if not rows:
        raise ConfigError(f"no entries in {index_csv}")
    imgs = np.stack([np.load(os.path.join(directory, fname)) for fname, _, _ in rows])
    return Dataset(CV_KIND, imgs.astype(np.float64), np.array([r[1] for r in rows]),
                   np.array([r[2] for r in rows]), name=os.path.basename(directory))
