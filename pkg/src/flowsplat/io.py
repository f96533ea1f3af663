"""File formats: PNG, PFM, Middlebury ``.flo``, ASCII PLY, camera lists, CSV and checkpoints."""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import CheckpointError
from .geometry import DTYPE, Camera, Intrinsics, Pose

FLO_MAGIC = 202021.25  # "PIEH" read as a little-endian float32
FLO_UNKNOWN = 1e9
CKPT_MAGIC = b"RFLW"
CKPT_VERSION = 1


def _np(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


# --------------------------------------------------------------------------- images


def write_png(path, img) -> None:
    """``(H, W, 3)`` floats in [0, 1] or ``(H, W)`` bool/float to 8-bit PNG."""
    a = _np(img)
    if a.dtype == bool:
        a = a.astype(np.float64)
    q = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_png(path) -> np.ndarray:
    """8-bit PNG to float64 in [0, 1]; RGB images keep three channels."""
    with Image.open(path) as im:
        a = np.asarray(im)
    if a.ndim == 3:
        a = a[..., :3]
    return a.astype(np.float64) / 255.0


def write_mask(path, mask) -> None:
    Image.fromarray(np.where(_np(mask).astype(bool), 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    """Single-channel PNG, 255 = dynamic."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("L"))
    return a >= 128


def write_pfm(path, a) -> None:
    """Single-channel little-endian PFM (float32, bottom row first)."""
    a = np.asarray(_np(a), dtype="<f4")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        ch = 3 if kind == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * ch * 4), dtype=dt)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# --------------------------------------------------------------------------- flow


def write_flo(path, flow, valid=None) -> None:
    """Middlebury ``.flo``; invalid pixels hold the 1e9 sentinel."""
    f = np.array(_np(flow), dtype=np.float64)
    h, w = f.shape[:2]
    if valid is not None:
        f[~_np(valid).astype(bool)] = FLO_UNKNOWN
    with open(path, "wb") as fh:
        fh.write(b"PIEH")
        fh.write(struct.pack("<ii", w, h))
        fh.write(f.astype("<f4").tobytes())


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (flow (H, W, 2), valid (H, W)); invalid pixels read back as zero flow."""
    with open(path, "rb") as fh:
        if fh.read(4) != b"PIEH":
            raise ValueError(f"{path}: bad .flo magic")
        w, h = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(w * h * 8), dtype="<f4").reshape(h, w, 2).astype(np.float64)
    valid = (np.abs(data) < FLO_UNKNOWN).all(-1)
    return np.where(valid[..., None], data, 0.0), valid


def flow_to_color(flow, valid=None) -> tuple[np.ndarray, float]:
    """Color-wheel visualization normalized by the largest valid magnitude; returns (rgb, max)."""
    f = _np(flow)
    valid = np.ones(f.shape[:2], dtype=bool) if valid is None else _np(valid).astype(bool)
    mag = np.linalg.norm(f, axis=-1)
    top = float(mag[valid].max()) if valid.any() else 0.0
    wheel = _color_wheel()
    n = len(wheel)
    ang = np.arctan2(-f[..., 1], -f[..., 0]) / np.pi
    k = (ang + 1) / 2 * (n - 1)
    k0 = np.floor(k).astype(np.int64)
    k1 = (k0 + 1) % n
    t = (k - k0)[..., None]
    col = (1 - t) * wheel[k0] + t * wheel[k1]
    r = (mag / top if top > 0 else np.zeros_like(mag))[..., None]
    rgb = 1 - r * (1 - col)
    rgb[~valid] = 0.0
    return rgb, top


def _color_wheel() -> np.ndarray:
    """The standard 55-entry optical-flow hue wheel, rows in [0, 1]."""
    segs = [(15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
            (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0))]
    rows = []
    for n, a, b in segs:
        for i in range(n):
            s = i / n
            rows.append([(1 - s) * a[c] + s * b[c] for c in range(3)])
    return np.array(rows)


# --------------------------------------------------------------------------- clouds and cameras


def write_ply(path, points, colors, flags) -> None:
    """ASCII PLY with ``x y z r g b flag`` per vertex."""
    p = _np(points).reshape(-1, 3)
    c = np.clip(np.round(_np(colors).reshape(-1, 3) * 255), 0, 255).astype(np.int64)
    fl = _np(flags).reshape(-1).astype(np.int64)
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(p)}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uchar flag", "end_header",
    ]
    lines += [f"{x!r} {y!r} {z!r} {r} {g} {b} {f}" for (x, y, z), (r, g, b), f in zip(p.tolist(), c.tolist(), fl.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    n = next(int(l.split()[-1]) for l in text[:end] if l.startswith("element vertex"))
    rows = np.array([l.split() for l in text[end + 1 : end + 1 + n]], dtype=np.float64).reshape(n, 7)
    return rows[:, :3], rows[:, 3:6] / 255.0, rows[:, 6].astype(bool)


def write_cameras(path, cameras: list[Camera]) -> None:
    """One shared ``K`` row, then one world-to-camera 3x4 ``T`` and timestamp per frame."""
    k = cameras[0].intrinsics
    lines = ["# size W H / K row-major 3x3 / T row-major 3x4 world-to-camera followed by timestamp",
             f"size {k.width} {k.height}",
             "K " + " ".join(repr(float(v)) for v in _np(k.K).reshape(-1))]
    for c in cameras:
        m = _np(c.pose.matrix()).reshape(-1)
        lines.append("T " + " ".join(repr(float(v)) for v in m) + f" {float(c.timestamp)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[Camera]:
    size = kmat = None
    cams = []
    rows = [l.split() for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    poses = []
    for r in rows:
        if r[0] == "size":
            size = (int(r[1]), int(r[2]))
        elif r[0] == "K":
            kmat = np.array(r[1:10], dtype=np.float64).reshape(3, 3)
        elif r[0] == "T":
            poses.append(np.array(r[1:], dtype=np.float64))
        else:
            raise ValueError(f"{path}: unknown record {r[0]!r}")
    if size is None or kmat is None:
        raise ValueError(f"{path}: missing size or K record")
    intr = Intrinsics(kmat[0, 0], kmat[1, 1], kmat[0, 2], kmat[1, 2], *size)
    n = len(poses)
    for i, v in enumerate(poses):
        if len(v) not in (12, 13):
            raise ValueError(f"{path}: T record needs 12 or 13 values")
        t = v[12] if len(v) == 13 else (i / (n - 1) if n > 1 else 0.0)
        m = torch.as_tensor(v[:12].reshape(3, 4), dtype=DTYPE)
        cams.append(Camera(intr, Pose(m[:, :3], m[:, 3]), float(t)))
    return cams


def write_poses(path, poses: list[Pose]) -> None:
    """One row-major 3x4 world-to-camera matrix per line."""
    Path(path).write_text("".join(" ".join(repr(float(v)) for v in _np(p.matrix()).reshape(-1)) + "\n" for p in poses))


def read_poses(path) -> list[Pose]:
    out = []
    for line in Path(path).read_text().split("\n"):
        if line.strip():
            m = torch.as_tensor(np.array(line.split(), dtype=np.float64).reshape(3, 4), dtype=DTYPE)
            out.append(Pose(m[:, :3], m[:, 3]))
    return out


def write_csv(path, header, rows) -> None:
    """Floats written with ``repr`` so the file round-trips exactly."""
    fmt = lambda v: str(v) if isinstance(v, (int, np.integer)) else repr(float(v))
    Path(path).write_text(",".join(header) + "\n" + "".join(",".join(fmt(v) for v in r) + "\n" for r in rows))


def read_csv(path) -> tuple[list[str], list[list[float]]]:
    lines = Path(path).read_text().splitlines()
    return lines[0].split(","), [[float(x) for x in l.split(",")] for l in lines[1:] if l]


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Parameter groups plus everything needed to rebuild the model."""

    groups: dict[str, torch.Tensor]
    bounds: torch.Tensor
    step: int = 0
    config: str = ""  # ``key = value`` echo, including the model layout
    version: int = CKPT_VERSION

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        w = buf.write
        w(CKPT_MAGIC)
        w(struct.pack("<IQ", self.version, self.step))
        w(np.asarray(_np(self.bounds), dtype="<f8").reshape(6).tobytes())
        cfg = self.config.encode()
        w(struct.pack("<I", len(cfg)))
        w(cfg)
        w(struct.pack("<I", len(self.groups)))
        for name, t in self.groups.items():
            nb = name.encode()
            a = np.asarray(_np(t), dtype="<f8")  # tobytes is C order; ascontiguousarray would lift 0-d to 1-d
            w(struct.pack("<H", len(nb)))
            w(nb)
            w(struct.pack("<I", a.ndim))
            w(struct.pack(f"<{a.ndim}Q", *a.shape))
            w(a.tobytes())
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 4 + 12 + 48 + 8 or data[:4] != CKPT_MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint checksum mismatch")
        off = 4
        version, step = struct.unpack_from("<IQ", body, off)
        off += 12
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        bounds = torch.as_tensor(np.frombuffer(body, "<f8", 6, off).reshape(2, 3).copy(), dtype=DTYPE)
        off += 48
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        config = body[off : off + n].decode()
        off += n
        (ng,) = struct.unpack_from("<I", body, off)
        off += 4
        groups = {}
        for _ in range(ng):
            (nl,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + nl].decode()
            off += nl
            (nd,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{nd}Q", body, off)
            off += 8 * nd
            count = int(np.prod(shape))  # prod of () is 1, so scalars keep shape ()
            a = np.frombuffer(body, "<f8", count, off).reshape(shape).copy()
            off += 8 * count
            groups[name] = torch.as_tensor(a, dtype=DTYPE)
        if off != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(groups, bounds, step, config, version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(str(e)) from e
        return cls.from_bytes(data)


# --------------------------------------------------------------------------- scene directories


def save_scene(gt, out) -> None:
    """``frames/ depth/ mask/ flow/`` per frame, ``cameras.txt`` and the echoed ``spec.json``."""
    import json

    out = Path(out)
    for sub in ("frames", "depth", "mask", "flow"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(gt.frames):
        write_png(out / "frames" / f"{i:04d}.png", f.image)
        write_pfm(out / "depth" / f"{i:04d}.pfm", f.depth)
        write_mask(out / "mask" / f"{i:04d}.png", f.mask)
    for i, (fl, va) in enumerate(zip(gt.flows, gt.flow_valid)):
        write_flo(out / "flow" / f"{i:04d}.flo", fl, va)
    write_cameras(out / "cameras.txt", gt.cameras)
    (out / "spec.json").write_text(json.dumps(gt.spec.to_dict(), indent=1, sort_keys=True) + "\n")


def load_scene(path):
    """Rebuild a ``GroundTruth`` from a scene directory.

    Primitive ids are not stored: hit pixels (depth > 0) get id 0 when static
    and 1 when dynamic, which is all the point-map oracle needs.
    """
    import json

    from .geometry import back_project, pixel_grid
    from .harness import Frame, GroundTruth, SceneSpec

    path = Path(path)
    cams = read_cameras(path / "cameras.txt")
    spec = SceneSpec.from_dict(json.loads((path / "spec.json").read_text())) if (path / "spec.json").exists() else None
    frames = []
    for i, cam in enumerate(cams):
        img = read_png(path / "frames" / f"{i:04d}.png")
        depth = read_pfm(path / "depth" / f"{i:04d}.pfm")
        mask = read_mask(path / "mask" / f"{i:04d}.png")
        if img.shape[:2] != (cam.height, cam.width) or depth.shape != img.shape[:2] or mask.shape != img.shape[:2]:
            raise ValueError(f"frame {i}: image, depth and mask sizes disagree with cameras.txt")
        hit = depth > 0
        ids = np.where(hit, mask.astype(np.int64), -1)
        g = pixel_grid(cam.width, cam.height)
        pts = back_project(g, torch.as_tensor(np.where(hit, depth, 1.0), dtype=DTYPE), cam, check=False).numpy()
        frames.append(Frame(img, depth, mask, ids, np.where(hit[..., None], pts, 0.0), cam))
    flows, valids = [], []
    for i in range(len(cams) - 1):
        p = path / "flow" / f"{i:04d}.flo"
        if p.exists():
            fl, va = read_flo(p)
            flows.append(fl)
            valids.append(va)
    return GroundTruth(spec, frames, flows, valids, np.zeros((0, 3)), np.zeros((0, 3)))
