# File: storage.py
# On-disk formats: LRT1 tensor files, adapter containers with a JSON manifest,
# repository and world directories, JSON-lines run logs and CSV exports.
# Numbers on disk are little-endian float32; everything in memory is float64.

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

import lowrank
import oracle
from models import AdapterManifest, LayerManifest, SynthSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAGIC = b"LRT1"
_HEADER = struct.Struct("<4sII")
_FLOAT = np.dtype("<f4")

MANIFEST_FILE = "manifest.json"
REPOSITORY_FILE = "repository.json"
WORLD_FILE = "world.json"
WORLD_FORMAT = "evomerge-world/1"


class StorageError(OSError):
    """Base class for on-disk format errors."""


class BadMagicError(StorageError):
    pass


class TruncatedFileError(StorageError):
    pass


class SizeMismatchError(StorageError):
    pass


class ManifestError(StorageError):
    pass


# ============================================================
# Tensor files
# ============================================================
def encode_tensor(m: np.ndarray) -> bytes:
    """Header (magic, rows, cols) + row-major little-endian float32 payload."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise StorageError(f"only 2-D tensors can be stored, got shape {m.shape}")
    with np.errstate(over="ignore"):
        narrowed = m.astype(_FLOAT)
    if not np.all(np.isfinite(narrowed)):
        raise StorageError("tensor holds values that are non-finite at 32-bit precision")
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, rows, cols) + narrowed.tobytes(order="C")


def decode_tensor(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if raw[: len(MAGIC)] != MAGIC[: len(raw)]:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{source}: {len(raw)} bytes, shorter than the {_HEADER.size}-byte header")
    _, rows, cols = _HEADER.unpack_from(raw)
    payload = raw[_HEADER.size :]
    if len(payload) % _FLOAT.itemsize:
        raise TruncatedFileError(f"{source}: payload of {len(payload)} bytes is not a whole number of floats")
    count = len(payload) // _FLOAT.itemsize
    if count != rows * cols:
        raise SizeMismatchError(
            f"{source}: header declares {rows}x{cols}={rows * cols} floats, payload holds {count}"
        )
    values = np.frombuffer(payload, dtype=_FLOAT).astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise StorageError(f"{source}: payload contains non-finite values")
    return values


def write_tensor(path: PathLike, m: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(m))


def read_tensor(path: PathLike, expected_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise StorageError(f"tensor file {path} does not exist") from e
    m = decode_tensor(raw, str(path))
    if expected_shape is not None and m.shape != tuple(expected_shape):
        raise SizeMismatchError(
            f"{path}: manifest declares shape {tuple(expected_shape)}, file holds {m.shape}"
        )
    return m


# ============================================================
# Adapter containers
# ============================================================
def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ManifestError(f"{path} does not exist") from e
    except ValueError as e:
        raise ManifestError(f"{path} is not valid JSON: {e}") from e


def _check_file_name(name: str, container: Path) -> Path:
    if Path(name).name != name or name in ("", ".", ".."):
        raise ManifestError(f"{container}: tensor file name {name!r} must be a plain file name")
    return container / name


def write_adapter(container_path: PathLike, adapter: Mapping[str, lowrank.LowRankPair], name: str = "adapter") -> None:
    container = Path(container_path)
    container.mkdir(parents=True, exist_ok=True)
    if not adapter:
        raise ManifestError("cannot write an adapter without layers")
    ranks = {pair.rank for pair in adapter.values()}
    if len(ranks) != 1:
        raise ManifestError(f"adapter layers disagree on rank: {sorted(ranks)}")
    layers = []
    for layer, pair in adapter.items():
        entry = LayerManifest(name=layer, d=pair.d, k=pair.k, a_file=f"{layer}.A.lrt", b_file=f"{layer}.B.lrt")
        write_tensor(container / entry.a_file, pair.a)
        write_tensor(container / entry.b_file, pair.b)
        layers.append(entry)
    manifest = AdapterManifest(name=name, rank=ranks.pop(), layers=layers)
    _write_json(container / MANIFEST_FILE, manifest.model_dump())
    logger.debug(f"Wrote adapter '{name}' ({len(layers)} layer(s)) to {container}")


def read_manifest(container_path: PathLike) -> AdapterManifest:
    path = Path(container_path) / MANIFEST_FILE
    data = _read_json(path)
    try:
        manifest = AdapterManifest.model_validate(data)
    except ValidationError as e:
        raise ManifestError(f"{path}: {e.errors()[0].get('msg', 'invalid manifest')}") from e
    names = [layer.name for layer in manifest.layers]
    if len(set(names)) != len(names):
        raise ManifestError(f"{path}: duplicate layer names {names}")
    return manifest


def read_adapter(container_path: PathLike) -> lowrank.Adapter:
    container = Path(container_path)
    manifest = read_manifest(container)
    r = manifest.rank
    adapter: lowrank.Adapter = {}
    for layer in manifest.layers:
        a = read_tensor(_check_file_name(layer.a_file, container), (r, layer.k))
        b = read_tensor(_check_file_name(layer.b_file, container), (layer.d, r))
        try:
            adapter[layer.name] = lowrank.LowRankPair(a=a, b=b)
        except lowrank.LowRankError as e:
            raise ManifestError(f"{container}: layer '{layer.name}' is invalid: {e}") from e
    return adapter


# ============================================================
# Repository and world directories
# ============================================================
def write_repository(
    path: PathLike,
    repo: lowrank.AdapterRepository,
    relevance: Optional[Sequence[str]] = None,
) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, adapter in zip(repo.names, repo.adapters):
        write_adapter(root / name, adapter, name=name)
    index: Dict[str, Any] = {"adapters": list(repo.names), "layer_names": list(repo.layer_names)}
    if relevance is not None:
        index["relevance"] = list(relevance)
    _write_json(root / REPOSITORY_FILE, index)


def read_repository(path: PathLike) -> Tuple[lowrank.AdapterRepository, Optional[List[str]]]:
    root = Path(path)
    index = _read_json(root / REPOSITORY_FILE)
    if not isinstance(index, dict) or not isinstance(index.get("adapters"), list):
        raise ManifestError(f"{root / REPOSITORY_FILE}: expected an object with an 'adapters' list")
    names = [str(n) for n in index["adapters"]]
    adapters = [read_adapter(_check_file_name(n, root)) for n in names]
    layer_names = index.get("layer_names") or (list(adapters[0].keys()) if adapters else [])
    try:
        repo = lowrank.AdapterRepository(
            adapters=tuple(adapters), layer_names=tuple(layer_names), names=tuple(names)
        )
    except lowrank.LowRankError as e:
        raise ManifestError(f"{root}: adapters are not shape-compatible: {e}") from e
    relevance = index.get("relevance")
    if relevance is not None and len(relevance) != repo.n:
        raise ManifestError(f"{root}: {len(relevance)} relevance labels for {repo.n} adapters")
    return repo, relevance


def write_world(path: PathLike, world) -> None:
    """Writes base, target, adapters and validation set. No timestamps, so output is byte-stable."""
    root = Path(path)
    (root / "base").mkdir(parents=True, exist_ok=True)
    for layer, w in world.base.items():
        write_tensor(root / "base" / f"{layer}.lrt", w)
    write_adapter(root / "target", world.target_delta, name="target")
    write_repository(root / "adapters", world.repo, world.relevance)
    write_tensor(root / "val_inputs.lrt", world.val.inputs)
    meta = {
        "format": WORLD_FORMAT,
        "spec": None if world.spec is None else world.spec.model_dump(),
        "layer_names": list(world.layer_names),
        "labels": [int(v) for v in world.val.labels],
        "teacher_loss": float(world.teacher_loss),
    }
    _write_json(root / WORLD_FILE, meta)
    logger.info(f"World written to {root}")


def read_world(path: PathLike):
    from synth import SynthWorld

    root = Path(path)
    meta = _read_json(root / WORLD_FILE)
    if not isinstance(meta, dict) or meta.get("format") != WORLD_FORMAT:
        raise ManifestError(f"{root / WORLD_FILE}: not an {WORLD_FORMAT} world description")
    layer_names = [str(n) for n in meta.get("layer_names", [])]
    try:
        spec = None if meta.get("spec") is None else SynthSpec.model_validate(meta["spec"])
    except ValidationError as e:
        raise ManifestError(f"{root / WORLD_FILE}: invalid spec: {e}") from e
    base = {name: read_tensor(_check_file_name(f"{name}.lrt", root / "base")) for name in layer_names}
    target = read_adapter(root / "target")
    repo, relevance = read_repository(root / "adapters")
    if list(repo.layer_names) != layer_names or list(target.keys()) != layer_names:
        raise ManifestError(f"{root}: layer names disagree between world, target and adapters")
    inputs = read_tensor(root / "val_inputs.lrt")
    try:
        val = oracle.ValidationSet(inputs=inputs, labels=np.asarray(meta.get("labels", []), dtype=np.int64))
    except ValueError as e:
        raise ManifestError(f"{root}: validation set is inconsistent: {e}") from e
    for name in layer_names:
        d, k, _ = repo.layer_shape(name)
        if base[name].shape != (d, k) or inputs.shape[1] != k:
            raise SizeMismatchError(f"{root}: layer '{name}' base {base[name].shape} vs adapters ({d}, {k})")
    teacher_w = {n: base[n] + lowrank.task_vector(target[n]) for n in layer_names}
    return SynthWorld(
        spec=spec,
        base=base,
        target_delta=target,
        repo=repo,
        relevance=tuple(relevance) if relevance is not None else tuple("unknown" for _ in range(repo.n)),
        val=val,
        teacher_loss=oracle.cross_entropy_loss(teacher_w, val),
    )


# ============================================================
# Run logs and exports
# ============================================================
def write_jsonl(path: PathLike, records: Iterable[Mapping[str, Any]]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(dict(record), sort_keys=False, allow_nan=False) + "\n")
            count += 1
    return count


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except ValueError as e:
                raise StorageError(f"{path}:{lineno}: invalid JSON line: {e}") from e
    return out


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))


def write_record(path: PathLike, record: Mapping[str, Any]) -> None:
    _write_json(Path(path), dict(record))


def read_record(path: PathLike) -> Dict[str, Any]:
    data = _read_json(Path(path))
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: expected a JSON object")
    return data
