"""Checkpoint = little-endian float32 parameter blob + JSON manifest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA = "hazardfuse.checkpoint/1"


@dataclass
class Checkpoint:
    params: dict  # name -> array, in network order
    spec: dict = field(default_factory=dict)
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0
    parent_ids: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.params.values())

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name, a in self.params.items():
            n = int(np.prod(a.shape)) * 4
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": n})
            offset += n
        doc = {
            "schema": SCHEMA,
            "spec": self.spec,
            "hyperparams": self.hyperparams,
            "seed": self.seed,
            "parent_ids": self.parent_ids,
            "params": entries,
            "extra": self.extra,
        }
        digest = hashlib.sha256(self.blob())
        digest.update(json.dumps(doc, sort_keys=True).encode())
        doc["id"] = digest.hexdigest()[:16]
        return doc

    @property
    def id(self) -> str:
        return self.manifest()["id"]

    def save(self, path) -> Path:
        """Writes ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
        path = Path(path)
        if path.suffix in (".json", ".bin"):
            path = path.with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = self.manifest()
        doc["blob"] = path.name + ".bin"
        path.with_suffix(".bin").write_bytes(self.blob())
        path.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if path.suffix != ".json":
            path = path.with_suffix(".json")
        doc = json.loads(path.read_text())
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema {doc.get('schema')!r}")
        raw = (path.parent / doc["blob"]).read_bytes()
        params = {}
        for e in doc["params"]:
            chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
            params[e["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
        return cls(params, doc["spec"], doc["hyperparams"], doc["seed"], doc["parent_ids"], doc.get("extra", {}))
