"""On-disk dataset format.

A dataset is a directory holding ``manifest.json`` and one binary container
per episode. Each container is::

    b"BMAG" | u32 version | u32 n_steps | u32 height | u32 width
    n_steps x ( u32 record_length | record | u32 crc32(record) )

and each record is::

    u8 flags  (bit 0/1: left depth/mask, bit 2/3: right depth/mask)
    for arm in (left, right):
        rgb      H*W*3 u8
        depth    H*W u16 little-endian millimeters, if flagged (0 = invalid)
        mask     H*W u8, if flagged
        camera   16 f64 row-major homogeneous matrix
        eef      16 f64
        joints   6 f64
        gripper  1 f64
        action   6 f64

All multi-byte values are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptFrame, FormatVersionMismatch, MissingManifest
from ..geometry import CameraIntrinsics, Pose
from ..kinematics import ArmModel
from .model import ARMS, SCHEMA_VERSION, ArmObs, Dataset, TimeStep, Trajectory

MAGIC = b"BMAG"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")


def _encode_arm(obs: ArmObs) -> bytes:
    parts = [obs.rgb.tobytes()]
    if obs.depth_mm is not None:
        parts.append(obs.depth_mm.astype("<u2").tobytes())
    if obs.mask is not None:
        parts.append(obs.mask.tobytes())
    parts.append(obs.camera.to_bytes())
    parts.append(obs.eef.to_bytes())
    parts.append(obs.joints.astype("<f8").tobytes())
    parts.append(struct.pack("<d", obs.gripper))
    parts.append(obs.action.astype("<f8").tobytes())
    return b"".join(parts)


def encode_step(step: TimeStep) -> bytes:
    flags = 0
    for i, name in enumerate(ARMS):
        obs = step.arm(name)
        flags |= (obs.depth_mm is not None) << (2 * i)
        flags |= (obs.mask is not None) << (2 * i + 1)
    return bytes([flags]) + _encode_arm(step.left) + _encode_arm(step.right)


def _record_size(flags: int, h: int, w: int) -> int:
    n = 1
    for i in range(2):
        n += h * w * 3
        if flags & (1 << (2 * i)):
            n += h * w * 2
        if flags & (1 << (2 * i + 1)):
            n += h * w
        n += 8 * (16 + 16 + 6 + 1 + 6)
    return n


def decode_step(buf: bytes, h: int, w: int) -> TimeStep:
    flags = buf[0]
    if len(buf) != _record_size(flags, h, w):
        raise ValueError("record length does not match its flags")
    off = 1
    arms = []
    for i in range(2):
        rgb = np.frombuffer(buf, np.uint8, h * w * 3, off).reshape(h, w, 3).copy()
        off += h * w * 3
        depth = mask = None
        if flags & (1 << (2 * i)):
            depth = np.frombuffer(buf, "<u2", h * w, off).reshape(h, w).astype(np.uint16)
            off += h * w * 2
        if flags & (1 << (2 * i + 1)):
            mask = np.frombuffer(buf, np.uint8, h * w, off).reshape(h, w).copy()
            off += h * w
        camera = Pose.from_bytes(buf[off : off + 128])
        off += 128
        eef = Pose.from_bytes(buf[off : off + 128])
        off += 128
        joints = np.frombuffer(buf, "<f8", 6, off).astype(np.float64)
        off += 48
        (gripper,) = struct.unpack_from("<d", buf, off)
        off += 8
        action = np.frombuffer(buf, "<f8", 6, off).astype(np.float64)
        off += 48
        arms.append(ArmObs(rgb, camera, eef, joints, action, gripper, depth, mask))
    return TimeStep(*arms)


def encode_episode(traj: Trajectory) -> bytes:
    h, w = traj.image_shape
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(traj.steps), h, w)]
    for step in traj.steps:
        rec = encode_step(step)
        out.append(_U32.pack(len(rec)))
        out.append(rec)
        out.append(_U32.pack(zlib.crc32(rec)))
    return b"".join(out)


def decode_episode(data: bytes) -> list[TimeStep]:
    if len(data) < _HEADER.size:
        raise CorruptFrame(0, "truncated header")
    magic, version, n, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFrame(0, "bad magic bytes")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"episode version {version}, expected {FORMAT_VERSION}")
    off = _HEADER.size
    steps = []
    for i in range(n):
        if off + 4 > len(data):
            raise CorruptFrame(i, "truncated record header")
        (length,) = _U32.unpack_from(data, off)
        off += 4
        if off + length + 4 > len(data):
            raise CorruptFrame(i, "truncated record")
        rec = data[off : off + length]
        off += length
        (crc,) = _U32.unpack_from(data, off)
        off += 4
        if zlib.crc32(rec) != crc:
            raise CorruptFrame(i, "checksum mismatch")
        try:
            steps.append(decode_step(rec, h, w))
        except ValueError as exc:
            raise CorruptFrame(i, str(exc)) from exc
    if off != len(data):
        raise CorruptFrame(n, "trailing bytes after last record")
    return steps


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _episode_entry(traj: Trajectory, fname: str) -> dict:
    return {
        "file": fname,
        "length": len(traj.steps),
        "image_size": list(traj.image_shape),
        "metadata": traj.metadata,
        "arms": {name: traj.arms[name].to_dict() for name in ARMS},
        "intrinsics": {name: traj.intrinsics[name].to_dict() for name in ARMS},
    }


def write_dataset(trajs, path) -> Path:
    """Write trajectories to ``path`` (created if needed); returns the path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    schema = getattr(trajs, "schema_version", SCHEMA_VERSION)
    entries = []
    for i, traj in enumerate(trajs):
        fname = f"episode_{i:05d}.bmag"
        atomic_write(path / fname, encode_episode(traj))
        entries.append(_episode_entry(traj, fname))
    manifest = {"format": "bimaug-dataset", "schema_version": schema, "episodes": entries}
    atomic_write(path / MANIFEST, dumps_json(manifest))
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise MissingManifest(f"no {MANIFEST} in {path}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatVersionMismatch(
            f"manifest schema {manifest.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    return manifest


def read_episode(path, entry: dict) -> Trajectory:
    steps = decode_episode((Path(path) / entry["file"]).read_bytes())
    if len(steps) != entry["length"]:
        raise CorruptFrame(len(steps), "episode shorter than manifest length")
    arms = {name: ArmModel.from_dict(entry["arms"][name]) for name in ARMS}
    intr = {name: CameraIntrinsics.from_dict(entry["intrinsics"][name]) for name in ARMS}
    return Trajectory(steps, arms, intr, entry.get("metadata", {}))


def read_dataset(path) -> Dataset:
    manifest = read_manifest(path)
    return Dataset([read_episode(path, e) for e in manifest["episodes"]], manifest["schema_version"])


def trajectories_identical(a: Trajectory, b: Trajectory) -> bool:
    """Byte-level equality of every array and pose plus metadata equality."""
    return (
        encode_episode(a) == encode_episode(b)
        and json.dumps(_episode_entry(a, ""), sort_keys=True) == json.dumps(_episode_entry(b, ""), sort_keys=True)
    )
