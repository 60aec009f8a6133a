"""Versioned on-disk artifacts.

JSON documents carry ``{"header": ..., "body": ...}``. Binary matrices use::

    b"TKDBIN01" | uint64 LE header length | UTF-8 JSON header | float64 LE arrays

where the header lists each array's name and shape in payload order. Every write
goes to a temporary file in the target directory and is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import FittedPreprocessor, TemporalDataset
from .distill import SoftLabelMatrix, TeacherRegistry
from .ensemble import EnsembleModel
from .gbt import GbtConfig, GbtModel, Tree
from .nn import MlpModel

SCHEMA_VERSION = 1
MAGIC = b"TKDBIN01"
KINDS = (
    "mlp", "gbt", "ensemble", "preprocessor", "dataset", "soft_labels",
    "registry_manifest", "dataset_manifest", "report", "eval_report", "config",
)


class ArtifactError(ValueError):
    pass


def config_hash(config) -> str | None:
    if config is None:
        return None
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def make_header(kind: str, config=None) -> dict:
    if kind not in KINDS:
        raise ArtifactError(f"unknown artifact kind {kind!r}")
    # wall-clock stamps would break byte-identical reruns, so only SOURCE_DATE_EPOCH is used
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    created = None
    if epoch is not None:
        import datetime as dt
        created = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc).isoformat()
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "created": created,
            "config_hash": config_hash(config)}


def check_header(header, expected_kind: str | None = None, path=None) -> dict:
    where = f"{path}: " if path else ""
    if not isinstance(header, dict) or "schema_version" not in header or "kind" not in header:
        raise ArtifactError(f"{where}missing or malformed artifact header")
    version = header["schema_version"]
    if not isinstance(version, int) or version < 1:
        raise ArtifactError(f"{where}invalid schema version {version!r}")
    if version > SCHEMA_VERSION:
        raise ArtifactError(
            f"{where}schema version {version} is newer than supported version {SCHEMA_VERSION}"
        )
    if header["kind"] not in KINDS:
        raise ArtifactError(f"{where}unknown artifact kind {header['kind']!r}")
    if expected_kind is not None and header["kind"] != expected_kind:
        raise ArtifactError(f"{where}expected a {expected_kind!r} artifact, found {header['kind']!r}")
    return header


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n").encode()


def save_json(kind: str, body, path, config=None) -> Path:
    atomic_write(path, dumps_json({"header": make_header(kind, config), "body": body}))
    return Path(path)


def load_json(path, expected_kind: str | None = None):
    """Return ``(header, body)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ArtifactError(f"{path}: corrupt JSON artifact ({e})") from None
    if not isinstance(doc, dict) or "body" not in doc:
        raise ArtifactError(f"{path}: not an artifact document")
    return check_header(doc.get("header"), expected_kind, path), doc["body"]


# -- binary matrices ---------------------------------------------------------------


def save_binary(kind: str, meta: dict, arrays: dict, path, config=None) -> Path:
    header = make_header(kind, config)
    header["meta"] = meta
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    for v in arrays.values():
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    atomic_write(path, b"".join(parts))
    return Path(path)


def load_binary(path, expected_kind: str | None = None):
    """Return ``(header, {name: array})``."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise ArtifactError(f"{path}: not a binary artifact (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + hlen > len(blob):
        raise ArtifactError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ArtifactError(f"{path}: corrupt header") from None
    check_header(header, expected_kind, path)
    offset = 16 + hlen
    arrays = {}
    for spec in header.get("arrays", []):
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise ArtifactError(f"{path}: truncated payload for array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ArtifactError(f"{path}: {len(blob) - offset} trailing bytes")
    return header, arrays


def save_dataset(ds: TemporalDataset, path) -> Path:
    arrays = {"X": ds.X}
    if ds.Y is not None:
        arrays["Y"] = ds.Y.astype(np.float64)
    meta = {"period": ds.period, "feature_names": list(ds.feature_names), "labeled": ds.Y is not None}
    return save_binary("dataset", meta, arrays, path)


def load_dataset(path) -> TemporalDataset:
    header, arrays = load_binary(path, "dataset")
    meta = header["meta"]
    Y = arrays.get("Y")
    if meta["labeled"] and Y is None:
        raise ArtifactError(f"{path}: labeled dataset without Y")
    return TemporalDataset(meta["period"], arrays["X"], None if Y is None else Y.astype(np.int64),
                           meta["feature_names"])


def save_soft_labels(soft: SoftLabelMatrix, path) -> Path:
    rows, cols = soft.probs.shape
    meta = {"teacher_period": soft.teacher_period, "target_period": soft.target_period,
            "rows": rows, "cols": cols}
    return save_binary("soft_labels", meta, {"probs": soft.probs}, path)


def load_soft_labels(path) -> SoftLabelMatrix:
    header, arrays = load_binary(path, "soft_labels")
    m = header["meta"]
    probs = arrays["probs"]
    if probs.shape != (m["rows"], m["cols"]):
        raise ArtifactError(f"{path}: soft-label shape {probs.shape} disagrees with header")
    return SoftLabelMatrix(m["teacher_period"], m["target_period"], probs)


# -- models -------------------------------------------------------------------------


def mlp_to_dict(model: MlpModel) -> dict:
    return {
        "widths": list(model.widths),
        "keep_prob": model.keep_prob,
        "bn_eps": model.bn_eps,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.items()},
        "param_order": list(model.params),
        "running_mean": None if model.running_mean is None else model.running_mean.tolist(),
        "running_var": None if model.running_var is None else model.running_var.tolist(),
    }


def mlp_from_dict(d: dict) -> MlpModel:
    params = {}
    for k in d["param_order"]:
        p = d["params"][k]
        params[k] = np.asarray(p["data"], dtype=np.float64).reshape(p["shape"])
    rm, rv = d.get("running_mean"), d.get("running_var")
    return MlpModel(
        widths=tuple(d["widths"]), params=params,
        running_mean=None if rm is None else np.asarray(rm, dtype=np.float64),
        running_var=None if rv is None else np.asarray(rv, dtype=np.float64),
        keep_prob=d["keep_prob"], bn_eps=d["bn_eps"],
    )


def gbt_to_dict(model: GbtModel) -> dict:
    return {
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "n_features": model.n_features,
        "config": model.config.to_dict(),
        "trees": [t.to_dict() for t in model.trees],
    }


def gbt_from_dict(d: dict) -> GbtModel:
    return GbtModel(
        trees=[Tree.from_dict(t) for t in d["trees"]],
        base_score=d["base_score"], learning_rate=d["learning_rate"],
        n_features=d["n_features"], config=GbtConfig.from_dict(d["config"]),
    )


def save_model(model, path) -> Path:
    """Write an MLP, GBT or ensemble; ensemble members go to sibling files."""
    path = Path(path)
    if model.kind == "mlp":
        return save_json("mlp", mlp_to_dict(model), path)
    if model.kind == "gbt":
        return save_json("gbt", gbt_to_dict(model), path, config=model.config.to_dict())
    if model.kind == "ensemble":
        members = []
        stem = path.name[:-5] if path.name.endswith(".json") else path.name
        for i, m in enumerate(model.members):
            name = f"{stem}.member{i}.{m.kind}.json"
            save_model(m, path.parent / name)
            members.append({"kind": m.kind, "path": name})
        return save_json("ensemble", {"members": members}, path)
    raise ArtifactError(f"cannot save model of kind {model.kind!r}")


def load_model(path):
    path = Path(path)
    header, body = load_json(path)
    kind = header["kind"]
    try:
        if kind == "mlp":
            return mlp_from_dict(body)
        if kind == "gbt":
            return gbt_from_dict(body)
        if kind == "ensemble":
            members = []
            for m in body["members"]:
                member = load_model(path.parent / m["path"])
                if member.kind != m["kind"]:
                    raise ArtifactError(f"{path}: member {m['path']} is {member.kind!r}, manifest says {m['kind']!r}")
                members.append(member)
            return EnsembleModel(members)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArtifactError):
            raise
        raise ArtifactError(f"{path}: malformed {kind} artifact ({e})") from None
    raise ArtifactError(f"{path}: {kind!r} is not a model artifact")


# -- preprocessors, registries, dataset directories ---------------------------------


def save_preprocessor(prep: FittedPreprocessor, path) -> Path:
    return save_json("preprocessor", prep.to_dict(), path)


def load_preprocessor(path) -> FittedPreprocessor:
    _, body = load_json(path, "preprocessor")
    return FittedPreprocessor.from_dict(body)


def save_registry(registry: TeacherRegistry, directory) -> Path:
    """``<dir>/period_<t>/model.json`` per teacher plus ``<dir>/manifest.json``."""
    directory = Path(directory)
    entries = []
    for period, model in registry:
        rel = f"period_{period}/model.json"
        save_model(model, directory / rel)
        entries.append({"period": period, "kind": model.kind, "path": rel})
    return save_json("registry_manifest", {"entries": entries}, directory / "manifest.json")


def load_registry(directory) -> TeacherRegistry:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.exists():
        return TeacherRegistry()
    _, body = load_json(manifest, "registry_manifest")
    reg = TeacherRegistry()
    for e in sorted(body["entries"], key=lambda e: e["period"]):
        model = load_model(directory / e["path"])
        if model.kind != e["kind"]:
            raise ArtifactError(f"{manifest}: period {e['period']} kind mismatch")
        reg.add(e["period"], model)
    return reg


def save_dataset_dir(datasets, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    entries = []
    for ds in datasets:
        rel = f"period_{ds.period}.bin"
        save_dataset(ds, directory / rel)
        entries.append({"period": ds.period, "path": rel, "rows": ds.n_rows, "labeled": ds.labeled})
    body = {"periods": entries, "feature_names": list(datasets[0].feature_names) if datasets else []}
    body.update(extra or {})
    return save_json("dataset_manifest", body, directory / "manifest.json")


def load_dataset_dir(path) -> list[TemporalDataset]:
    """Load from a dataset directory or its ``manifest.json``."""
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    _, body = load_json(manifest, "dataset_manifest")
    return [load_dataset(manifest.parent / e["path"]) for e in sorted(body["periods"], key=lambda e: e["period"])]


def save(artifact, path) -> Path:
    """Dispatch on artifact type."""
    if isinstance(artifact, TemporalDataset):
        return save_dataset(artifact, path)
    if isinstance(artifact, SoftLabelMatrix):
        return save_soft_labels(artifact, path)
    if isinstance(artifact, FittedPreprocessor):
        return save_preprocessor(artifact, path)
    if isinstance(artifact, TeacherRegistry):
        return save_registry(artifact, path)
    if getattr(artifact, "kind", None) in ("mlp", "gbt", "ensemble"):
        return save_model(artifact, path)
    raise ArtifactError(f"no serializer for {type(artifact).__name__}")


def load(path):
    """Load any artifact, sniffing binary vs JSON and dispatching on its header kind."""
    path = Path(path)
    if path.is_dir():
        if (path / "manifest.json").exists():
            header, _ = load_json(path / "manifest.json")
            if header["kind"] == "registry_manifest":
                return load_registry(path)
            if header["kind"] == "dataset_manifest":
                return load_dataset_dir(path)
        raise ArtifactError(f"{path}: directory without a known manifest")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == MAGIC:
        header, _ = load_binary(path)
        return load_dataset(path) if header["kind"] == "dataset" else load_soft_labels(path)
    header, body = load_json(path)
    kind = header["kind"]
    if kind in ("mlp", "gbt", "ensemble"):
        return load_model(path)
    if kind == "preprocessor":
        return FittedPreprocessor.from_dict(body)
    if kind == "registry_manifest":
        return load_registry(path.parent)
    if kind == "dataset_manifest":
        return load_dataset_dir(path)
    return body
