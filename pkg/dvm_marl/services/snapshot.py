"""Flat binary container for network parameters.

Layout (all integers little-endian)::

    b"DVM1"
    uint32  network count
    per network:
        uint16  name length, then the UTF-8 name
        uint32  layer count
        per layer:
            uint32 out, uint32 in
            out*in float64 weights (row-major), then out float64 biases

The first entry is a zero-layer network named ``meta:key=value;...`` holding
domain, algorithm, phase and episode length. Agent networks are named ``agent<i>/<network>``.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dvm_marl.core.errors import SnapshotError
from dvm_marl.core.models import Algorithm, Domain, Phase
from dvm_marl.core.tensor_core import ParamStore
from dvm_marl.services.marl_algos import AgentBundle
from dvm_marl.services.particle_envs import PhysicsConfig

logger = logging.getLogger(__name__)

MAGIC = b"DVM1"
META_PREFIX = "meta:"
_FLOAT = np.dtype("<f8")


@dataclass
class Snapshot:
    """Named networks plus string metadata."""

    meta: Dict[str, str] = field(default_factory=dict)
    networks: Dict[str, ParamStore] = field(default_factory=dict)

    @property
    def domain(self) -> Domain:
        return Domain(self._require("domain"))

    @property
    def algorithm(self) -> Algorithm:
        return Algorithm(self._require("algorithm"))

    @property
    def phase(self) -> Phase:
        return Phase(self._require("phase"))

    @property
    def episode_length(self) -> int:
        """Steps per episode of the run; older snapshots fall back to the default."""
        raw = self.meta.get("episode_length")
        if raw is None:
            return PhysicsConfig().episode_length
        try:
            value = int(raw)
        except ValueError as e:
            raise SnapshotError(f"bad episode_length {raw!r} in snapshot metadata") from e
        if value <= 0:
            raise SnapshotError(f"episode_length must be positive, got {value}")
        return value

    def _require(self, key: str) -> str:
        if key not in self.meta:
            raise SnapshotError(f"snapshot metadata lacks {key!r}")
        return self.meta[key]

    def bundles(self) -> List[AgentBundle]:
        """Rebuild agent bundles (without optimizer states)."""
        per_agent: Dict[int, Dict[str, ParamStore]] = {}
        for name, net in self.networks.items():
            agent, _, net_name = name.partition("/")
            if not agent.startswith("agent") or not net_name:
                raise SnapshotError(f"unexpected network name {name!r}")
            per_agent.setdefault(int(agent[len("agent"):]), {})[net_name] = net
        if sorted(per_agent) != list(range(len(per_agent))):
            raise SnapshotError(f"agent indices {sorted(per_agent)} are not contiguous")
        discrete = self.algorithm.is_discrete
        try:
            return [AgentBundle(discrete=discrete, **per_agent[i]) for i in range(len(per_agent))]
        except TypeError as e:
            raise SnapshotError(f"snapshot holds unknown networks: {e}") from e


def snapshot_from_bundles(
    bundles: Sequence[AgentBundle],
    domain: Domain,
    algorithm: Algorithm,
    phase: Phase,
    episode_length: Optional[int] = None,
) -> Snapshot:
    """Copy every agent network into a snapshot."""
    networks = {
        f"agent{i}/{name}": net.copy()
        for i, bundle in enumerate(bundles)
        for name, net in bundle.networks().items()
    }
    meta = {"domain": domain.value, "algorithm": algorithm.value, "phase": phase.value}
    if episode_length is not None:
        meta["episode_length"] = str(episode_length)
    return Snapshot(meta=meta, networks=networks)


def _encode_meta(meta: Dict[str, str]) -> str:
    for key, value in meta.items():
        if any(ch in key + value for ch in "=;"):
            raise SnapshotError(f"metadata {key!r}={value!r} contains '=' or ';'")
    return META_PREFIX + ";".join(f"{k}={v}" for k, v in meta.items())


def _decode_meta(name: str) -> Dict[str, str]:
    body = name[len(META_PREFIX):]
    meta: Dict[str, str] = {}
    for item in filter(None, body.split(";")):
        key, sep, value = item.partition("=")
        if not sep:
            raise SnapshotError(f"malformed metadata item {item!r}")
        meta[key] = value
    return meta


def _pack_entry(name: str, layers: Sequence[Tuple[np.ndarray, np.ndarray]]) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<I", len(layers))]
    for weights, biases in layers:
        out_dim, in_dim = weights.shape
        parts.append(struct.pack("<II", out_dim, in_dim))
        parts.append(np.ascontiguousarray(weights, dtype=_FLOAT).tobytes())
        parts.append(np.ascontiguousarray(biases, dtype=_FLOAT).tobytes())
    return b"".join(parts)


def encode_snapshot(snapshot: Snapshot) -> bytes:
    entries = [_pack_entry(_encode_meta(snapshot.meta), [])]
    for name, net in snapshot.networks.items():
        if name.startswith(META_PREFIX):
            raise SnapshotError(f"network name {name!r} collides with the metadata entry")
        entries.append(_pack_entry(name, list(zip(net.weights, net.biases))))
    return MAGIC + struct.pack("<I", len(entries)) + b"".join(entries)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise SnapshotError(f"truncated snapshot at byte {self.offset}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * _FLOAT.itemsize), dtype=_FLOAT).copy()


def decode_snapshot(data: bytes) -> Snapshot:
    """Parse a container.

    Raises:
        SnapshotError: On a bad magic, truncation, trailing bytes or bad layer chain
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise SnapshotError("not a DVM1 snapshot (bad magic)")
    (count,) = reader.unpack("<I")

    snapshot = Snapshot()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise SnapshotError(f"network name is not UTF-8: {e}") from e
        (num_layers,) = reader.unpack("<I")
        weights, biases = [], []
        for _ in range(num_layers):
            out_dim, in_dim = reader.unpack("<II")
            weights.append(reader.floats(out_dim * in_dim).reshape(out_dim, in_dim))
            biases.append(reader.floats(out_dim))

        if name.startswith(META_PREFIX):
            snapshot.meta.update(_decode_meta(name))
            continue
        if not weights:
            raise SnapshotError(f"network {name!r} has no layers")
        try:
            snapshot.networks[name] = ParamStore(weights, biases)
        except ValueError as e:
            raise SnapshotError(f"network {name!r}: {e}") from e

    if reader.offset != len(data):
        raise SnapshotError(f"{len(data) - reader.offset} trailing bytes after the last network")
    return snapshot


def write_snapshot(snapshot: Snapshot, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_snapshot(snapshot))
    logger.info(f"Wrote snapshot with {len(snapshot.networks)} networks to {path}")
    return path


def read_snapshot(path: Union[str, Path]) -> Snapshot:
    return decode_snapshot(Path(path).read_bytes())
