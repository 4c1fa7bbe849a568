"""Checkpoints, model manifests and the artifact hash chain.

Every artifact directory carries a ``manifest.json``.  Downstream manifests record the
sha256 of the upstream manifest file, so the chain raw data -> split -> checkpoint -> report
can be re-verified from the report alone.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import ParamStore
from .ingest import SplitDataset, file_sha256
from .models import ModelConfig, Recommender, build_model

PARAMS_FILE = "params.npz"
MANIFEST_FILE = "manifest.json"


class ChainError(RuntimeError):
    """A recorded hash no longer matches the file it points at."""


def json_sha256(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def manifest_hash(artifact_dir) -> str:
    return file_sha256(Path(artifact_dir) / MANIFEST_FILE)


# ---------------------------------------------------------------------------
# parameter checkpoints


def save_params(store: ParamStore, path, arrays: Optional[dict] = None) -> None:
    """Values, AdaGrad accumulators and freeze masks by name; ``arrays`` adds extra tensors."""
    payload = {}
    for name in store.names():
        payload[f"value/{name}"] = store.values[name]
        payload[f"accum/{name}"] = store.accum[name]
    for name, mask in store.frozen.items():
        payload[f"frozen/{name}"] = mask
    for name, arr in (arrays or {}).items():
        payload[f"extra/{name}"] = np.asarray(arr)
    payload["meta"] = np.array(json.dumps({"dtype": store.dtype.str, "order": store.names(),
                                           "lr_scale": store.lr_scale}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_params(path) -> tuple[ParamStore, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        store = ParamStore(np.dtype(meta["dtype"]))
        for name in meta["order"]:
            store.add(name, z[f"value/{name}"])
            store.accum[name] = z[f"accum/{name}"].copy()
            if f"frozen/{name}" in z.files:
                store.frozen[name] = z[f"frozen/{name}"].copy()
        store.lr_scale = {k: float(v) for k, v in meta["lr_scale"].items()}
        extra = {k[len("extra/"):]: z[k].copy() for k in z.files if k.startswith("extra/")}
    return store, extra


# ---------------------------------------------------------------------------
# model checkpoints


def save_model(model: Recommender, out_dir, seed: int, split_dir=None, extra: Optional[dict] = None) -> dict:
    """Write ``params.npz`` and a manifest echoing kind, config, seed and the split manifest hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(model.params, out / PARAMS_FILE, {"known_users": model.known_users})
    manifest = {
        "kind": model.kind,
        "config": asdict(model.config),
        "seed": seed,
        "epoch": model.epoch,
        "data_manifest_sha256": manifest_hash(split_dir) if split_dir is not None else None,
        "split_dir": str(split_dir) if split_dir is not None else None,
        "files": {PARAMS_FILE: file_sha256(out / PARAMS_FILE)},
    }
    manifest.update(extra or {})
    write_json(out / MANIFEST_FILE, manifest)
    return manifest


def load_model(ckpt_dir, split: SplitDataset, verify: bool = True) -> Recommender:
    d = Path(ckpt_dir)
    manifest = read_json(d / MANIFEST_FILE)
    if verify:
        _check_files(d, manifest)
        want = manifest.get("data_manifest_sha256")
        have = split.manifest_sha256
        if want is not None and have is not None and want != have:
            raise ChainError(f"{d}: trained on a different split (manifest hash mismatch)")
    cfg = ModelConfig(**manifest["config"])
    model = build_model(split.catalog, cfg, manifest["seed"])
    store, extra = load_params(d / PARAMS_FILE)
    if sorted(store.names()) != sorted(model.params.names()):
        raise ChainError(f"{d}: parameter names do not match a {cfg.kind} model on this catalog")
    for name in store.names():
        if store[name].shape != model.params[name].shape:
            raise ChainError(f"{d}: shape mismatch for {name}")
    model.params = store
    model.known_users = extra["known_users"].astype(bool)
    model.epoch = int(manifest["epoch"])
    return model


def _check_files(d: Path, manifest: dict) -> None:
    for f, digest in manifest.get("files", {}).items():
        if not (d / f).exists():
            raise ChainError(f"{d / f}: missing")
        if file_sha256(d / f) != digest:
            raise ChainError(f"{d / f}: hash mismatch against manifest")


# ---------------------------------------------------------------------------
# chain verification


def verify_split(split_dir) -> dict:
    d = Path(split_dir)
    manifest = read_json(d / MANIFEST_FILE)
    _check_files(d, manifest)
    for path, digest in manifest.get("raw_files", {}).items():
        if Path(path).exists() and file_sha256(path) != digest:
            raise ChainError(f"{path}: raw input changed since the split was prepared")
    return manifest


def verify_checkpoint(ckpt_dir) -> dict:
    d = Path(ckpt_dir)
    manifest = read_json(d / MANIFEST_FILE)
    _check_files(d, manifest)
    if manifest.get("split_dir"):
        verify_split(manifest["split_dir"])
        if manifest_hash(manifest["split_dir"]) != manifest["data_manifest_sha256"]:
            raise ChainError(f"{d}: split manifest changed since training")
    return manifest


def verify_chain(report_dir) -> list[str]:
    """Walk report -> checkpoints -> split -> raw files; return the verified links or raise."""
    d = Path(report_dir)
    manifest = read_json(d / MANIFEST_FILE)
    _check_files(d, manifest)
    links = [str(d)]
    split_dir = manifest.get("split_dir")
    if split_dir:
        verify_split(split_dir)
        if manifest_hash(split_dir) != manifest["data_manifest_sha256"]:
            raise ChainError(f"{d}: split manifest changed since evaluation")
        links.append(str(split_dir))
    for name, entry in sorted(manifest.get("checkpoints", {}).items()):
        verify_checkpoint(entry["dir"])
        if manifest_hash(entry["dir"]) != entry["manifest_sha256"]:
            raise ChainError(f"{d}: checkpoint {name} changed since evaluation")
        links.append(entry["dir"])
    return links
