# FILE: pcno/dataset_io.py

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .error_utils import PCNOError, checksum_error, not_found_error, version_error
from .geometry import GeometryFeatures, PointCloudSample
from .gradop import GradientEdgeWeights
from .pydantic_models import DatasetManifest, SampleRecordInfo

# --- CONTAINER FORMAT ---
FORMAT_VERSION = "pcno-dataset/1"
MANIFEST_NAME = "manifest.json"
RECORD_MAGIC = b"PCNOREC1"

# dtype code -> little-endian numpy dtype
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODE_OF_KIND = {"f": 0, "i": 1, "u": 1, "b": 2}


def _record_name(index: int) -> str:
    return f"record_{index:06d}.bin"


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF_KIND[arr.dtype.kind]
    data = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code])
    encoded_name = name.encode("utf-8")
    head = struct.pack("<q", len(encoded_name)) + encoded_name
    head += struct.pack("<qq", code, data.ndim) + struct.pack(f"<{data.ndim}q", *data.shape)
    return head + data.tobytes()


def _decode_fields(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:len(RECORD_MAGIC)] != RECORD_MAGIC:
        raise PCNOError("VERSION_MISMATCH", "record does not start with the expected magic bytes")
    pos = len(RECORD_MAGIC)
    (count,) = struct.unpack_from("<q", payload, pos)
    pos += 8
    fields = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<q", payload, pos)
        pos += 8
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<qq", payload, pos)
        pos += 16
        shape = struct.unpack_from(f"<{rank}q", payload, pos)
        pos += 8 * rank
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
        fields[name] = arr.astype(bool) if code == 2 else arr
    return fields


def _sample_fields(sample: PointCloudSample) -> Dict[str, np.ndarray]:
    fields = {
        "nodes": sample.nodes,
        "cell_nodes": sample.cell_nodes,
        "cell_offsets": sample.cell_offsets,
        "cell_dims": sample.cell_dims,
        "a": sample.a,
        "node_mask": sample.node_mask,
        "subdomain_id": sample.subdomain_id,
    }
    if sample.u is not None:
        fields["u"] = sample.u
    if sample.vertices is not None:
        fields["vertices"] = sample.vertices
    if sample.features is not None:
        f = sample.features
        fields.update({"dOmega": f.dOmega, "rho": f.rho, "conn_indptr": f.indptr, "conn_indices": f.indices,
                       "domain_measure": f.domain_measure})
    if sample.gradient is not None:
        g = sample.gradient
        fields.update({"grad_indptr": g.indptr, "grad_indices": g.indices, "grad_weights": g.weights,
                       "grad_rank": g.effective_rank, "grad_deficient": g.rank_deficient})
    return fields


def encode_sample(sample: PointCloudSample) -> bytes:
    fields = _sample_fields(sample)
    parts = [RECORD_MAGIC, struct.pack("<q", len(fields))]
    parts.extend(_encode_array(name, arr) for name, arr in fields.items())
    return b"".join(parts)


def decode_sample(payload: bytes, manifest: DatasetManifest, info: SampleRecordInfo) -> PointCloudSample:
    fields = _decode_fields(payload)
    features, gradient = None, None
    if "dOmega" in fields:
        features = GeometryFeatures(dOmega=fields["dOmega"], rho=fields["rho"], indptr=fields["conn_indptr"],
                                    indices=fields["conn_indices"], domain_measure=fields["domain_measure"],
                                    density_mode=manifest.density_mode or "uniform", centering=manifest.centering)
    if "grad_weights" in fields:
        gradient = GradientEdgeWeights(indptr=fields["grad_indptr"], indices=fields["grad_indices"],
                                       weights=fields["grad_weights"], effective_rank=fields["grad_rank"],
                                       rank_deficient=fields["grad_deficient"])
    return PointCloudSample(nodes=fields["nodes"], cell_nodes=fields["cell_nodes"], cell_offsets=fields["cell_offsets"],
                            cell_dims=fields["cell_dims"], intrinsic_dim=manifest.intrinsic_dim, a=fields["a"],
                            u=fields.get("u"), node_mask=fields["node_mask"], subdomain_id=fields["subdomain_id"],
                            vertices=fields.get("vertices"), label=info.label, params=dict(info.params),
                            features=features, gradient=gradient)


# --- WRITE ---

def _check_consistent(samples: Sequence[PointCloudSample]) -> None:
    ref = samples[0]
    signature = (ref.dim, ref.intrinsic_dim, ref.d_a, ref.d_u, ref.centering,
                 ref.features is not None, ref.gradient is not None)
    for i, s in enumerate(samples):
        sig = (s.dim, s.intrinsic_dim, s.d_a, s.d_u, s.centering, s.features is not None, s.gradient is not None)
        if sig != signature:
            raise PCNOError("INCONSISTENT_DIMS", f"sample {i} does not match sample 0 (d, d', d_a, d_u, centering, features)",
                            {"sample_index": i, "expected": list(map(str, signature)), "found": list(map(str, sig))})


def write_dataset(samples: Sequence[PointCloudSample], path: str, problem: str = "",
                  channel_names: Optional[Dict[str, List[str]]] = None,
                  units: Optional[Dict[str, str]] = None) -> DatasetManifest:
    """
    Write samples as a container directory: manifest.json plus one binary
    record per sample. Returns the manifest that was written.
    """
    samples = list(samples)
    if not samples:
        raise PCNOError("EMPTY_DATASET", "cannot write an empty dataset")
    _check_consistent(samples)
    os.makedirs(path, exist_ok=True)

    records = []
    for i, sample in enumerate(samples):
        payload = encode_sample(sample)
        name = _record_name(i)
        with open(os.path.join(path, name), "wb") as fh:
            fh.write(payload)
        records.append(SampleRecordInfo(file=name, checksum=hashlib.sha256(payload).hexdigest(),
                                        n_nodes=sample.n_nodes, label=sample.label,
                                        params={k: float(v) for k, v in sample.params.items()}))

    ref = samples[0]
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION, problem=problem, dim=ref.dim, intrinsic_dim=ref.intrinsic_dim,
        d_a=ref.d_a, d_u=ref.d_u, channel_names=channel_names or {}, units=units or {},
        centering=ref.centering, density_mode=ref.features.density_mode if ref.features is not None else None,
        has_features=ref.features is not None and ref.gradient is not None,
        sample_count=len(samples), records=records)
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        json.dump(manifest.model_dump(), fh, indent=2, sort_keys=True)
    logging.info(f"Wrote dataset '{problem}' with {len(samples)} samples to {path}")
    return manifest


# --- READ ---

class DatasetReader:
    """Lazy container reader; records are loaded and verified on access."""

    def __init__(self, path: str):
        manifest_path = os.path.join(path, MANIFEST_NAME)
        if not os.path.isfile(manifest_path):
            raise not_found_error(f"Dataset manifest not found: {manifest_path}")
        with open(manifest_path) as fh:
            raw = json.load(fh)
        found = raw.get("format_version")
        if found != FORMAT_VERSION:
            raise version_error(FORMAT_VERSION, found, "dataset")
        self.path = path
        self.manifest = DatasetManifest(**raw)
        self.materialized = 0

    def __len__(self) -> int:
        return self.manifest.sample_count

    @property
    def labels(self) -> List[str]:
        return [r.label for r in self.manifest.records]

    def __getitem__(self, index: int) -> PointCloudSample:
        if not -len(self) <= index < len(self):
            raise PCNOError("NOT_FOUND", f"record {index} outside a dataset of {len(self)} samples")
        index = index % len(self)
        info = self.manifest.records[index]
        with open(os.path.join(self.path, info.file), "rb") as fh:
            payload = fh.read()
        actual = hashlib.sha256(payload).hexdigest()
        if actual != info.checksum:
            raise checksum_error(index, info.checksum, actual)
        self.materialized += 1
        return decode_sample(payload, self.manifest, info)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def open_dataset(path: str) -> DatasetReader:
    return DatasetReader(path)


def read_dataset(path: str, subset: Optional[Sequence[int]] = None,
                 labels: Optional[Sequence[str]] = None) -> List[PointCloudSample]:
    """Materialize the dataset, or the given record indices, optionally keeping only the given labels."""
    reader = open_dataset(path)
    indices = range(len(reader)) if subset is None else subset
    if labels is not None:
        wanted, names = set(labels), reader.labels
        indices = [i for i in indices if names[i] in wanted]
    samples = [reader[i] for i in indices]
    logging.info(f"Read {len(samples)} of {len(reader)} samples from {path}")
    return samples


# --- BATCHING ---

@dataclass
class Batch:
    nodes: np.ndarray           # (B, N, d)
    mask: np.ndarray            # (B, N) bool
    a: np.ndarray               # (B, N, d_a)
    u: Optional[np.ndarray]     # (B, N, d_u)
    rho: np.ndarray             # (B, N)
    dOmega: np.ndarray          # (B, N)
    subdomain_id: np.ndarray    # (B, N)
    gradient: GradientEdgeWeights  # over the B*N flattened rows
    sizes: List[int]
    labels: List[str]

    @property
    def batch_size(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_max(self) -> int:
        return self.nodes.shape[1]

    @property
    def flat_mask(self) -> np.ndarray:
        return self.mask.reshape(-1)


def _pad(arr: np.ndarray, n_max: int) -> np.ndarray:
    out = np.zeros((n_max,) + arr.shape[1:], dtype=arr.dtype)
    out[:arr.shape[0]] = arr
    return out


def pad_and_batch(samples: Sequence[PointCloudSample], max_n: Optional[int] = None) -> Batch:
    """
    Zero-pad preprocessed samples to a common node count and stack them.
    Gradient edges are shifted by b * N so the batch acts as one disjoint cloud.
    """
    samples = list(samples)
    if not samples:
        raise PCNOError("EMPTY_DATASET", "cannot batch zero samples")
    sizes = [s.n_nodes for s in samples]
    n_max = max(sizes) if max_n is None else int(max_n)
    for i, s in enumerate(samples):
        if s.n_nodes > n_max:
            raise PCNOError("BATCH_OVERFLOW", f"sample {i} has {s.n_nodes} nodes, batch allows {n_max}",
                            {"sample_index": i, "n_nodes": s.n_nodes, "max_n": n_max})
        if s.features is None or s.gradient is None:
            raise PCNOError("MISSING_FEATURES", f"sample {i} has not been preprocessed", {"sample_index": i})

    has_u = all(s.u is not None for s in samples)
    degrees, indices, weights = [], [], []
    for b, s in enumerate(samples):
        g = s.gradient
        degrees.append(_pad(np.diff(g.indptr), n_max))
        indices.append(g.indices + b * n_max)
        weights.append(g.weights)
    indptr = np.concatenate([[0], np.cumsum(np.concatenate(degrees))]).astype(np.int64)
    gradient = GradientEdgeWeights(
        indptr=indptr, indices=np.concatenate(indices).astype(np.int64), weights=np.concatenate(weights, axis=0),
        effective_rank=np.concatenate([_pad(s.gradient.effective_rank, n_max) for s in samples]),
        rank_deficient=np.concatenate([s.gradient.rank_deficient + b * n_max for b, s in enumerate(samples)]).astype(np.int64))

    return Batch(
        nodes=np.stack([_pad(s.nodes, n_max) for s in samples]),
        mask=np.stack([_pad(s.node_mask, n_max) for s in samples]),
        a=np.stack([_pad(s.a, n_max) for s in samples]),
        u=np.stack([_pad(s.u, n_max) for s in samples]) if has_u else None,
        rho=np.stack([_pad(s.features.rho, n_max) for s in samples]),
        dOmega=np.stack([_pad(s.features.dOmega, n_max) for s in samples]),
        subdomain_id=np.stack([_pad(s.subdomain_id, n_max) for s in samples]),
        gradient=gradient, sizes=sizes, labels=[s.label for s in samples])


# --- EXTERNAL LAYOUTS ---

DEFAULT_NPZ_KEYS = {"nodes": "nodes", "cells": "cells", "cell_dims": "cell_dims", "a": "a", "u": "u"}


def convert_npz(files: Sequence[str], out: str, key_map: Optional[Dict[str, str]] = None, intrinsic_dim: int = 2,
                problem: str = "external", label: str = "") -> DatasetManifest:
    """
    Adapt third-party point clouds stored as .npz archives (one sample per
    file: node coordinates, a (C, k) cell array and field arrays) into a
    container. `key_map` renames the expected keys.
    """
    keys = {**DEFAULT_NPZ_KEYS, **(key_map or {})}
    samples = []
    for path in files:
        if not os.path.isfile(path):
            raise not_found_error(f"Archive not found: {path}")
        with np.load(path) as archive:
            missing = [k for k in ("nodes", "cells", "a") if keys[k] not in archive.files]
            if missing:
                raise PCNOError("INVALID_CONFIG", f"{path} lacks keys {[keys[k] for k in missing]}")
            cells = archive[keys["cells"]].astype(np.int64)
            if keys["cell_dims"] in archive.files:
                cell_dims = archive[keys["cell_dims"]]
            else:
                cell_dims = min(cells.shape[1] - 1, intrinsic_dim)
            samples.append(PointCloudSample.from_cells(
                archive[keys["nodes"]], cells.tolist(), cell_dims, intrinsic_dim, archive[keys["a"]],
                archive[keys["u"]] if keys["u"] in archive.files else None,
                label=label or os.path.splitext(os.path.basename(path))[0]))
    return write_dataset(samples, out, problem=problem)
