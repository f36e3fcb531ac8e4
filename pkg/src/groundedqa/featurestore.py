"""
Binary feature packs: per-image global descriptor (4096-d), 14x14x512 conv
map (stored 196x512), and per-region 4096-d descriptors.

File format v1 (little-endian): magic b"V7WF", version u16 = 1, image_id as
u32-length-prefixed UTF-8, 4096 float32 global, 196*512 float32 conv map
(row-major), u32 region count, then per region an id string (u32-length-
prefixed) and 4096 float32. Files always carry full-scale dims; in-memory
packs may be smaller for desk-scale experiments.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"V7WF"
VERSION = 1
GLOBAL_DIM = 4096
CONV_CELLS = 196
CONV_CHANNELS = 512


class FormatError(ValueError):
    """Bad magic, version, or truncated pack file."""


@dataclass
class FeaturePack:
    image_id: str
    global_feature: np.ndarray  # (global_dim,)
    conv_map: np.ndarray  # (cells, channels)
    region_features: dict = field(default_factory=dict)  # grounding_id -> (global_dim,)

    def validate(self, full_scale: bool = False):
        if full_scale:
            if self.global_feature.shape != (GLOBAL_DIM,):
                raise ValueError(
                    f"global feature must be ({GLOBAL_DIM},), "
                    f"got {self.global_feature.shape}")
            if self.conv_map.shape != (CONV_CELLS, CONV_CHANNELS):
                raise ValueError(
                    f"conv map must be ({CONV_CELLS}, {CONV_CHANNELS}), "
                    f"got {self.conv_map.shape}")
            for rid, feat in self.region_features.items():
                if feat.shape != (GLOBAL_DIM,):
                    raise ValueError(f"region {rid}: bad shape {feat.shape}")
        for arr in [self.global_feature, self.conv_map,
                    *self.region_features.values()]:
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite features in pack {self.image_id}")


def write_feature_pack(pack: FeaturePack, path) -> None:
    """Serialize a full-scale pack; write-then-read is the identity."""
    pack.validate(full_scale=True)
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<H", VERSION))
            iid = pack.image_id.encode("utf-8")
            f.write(struct.pack("<I", len(iid)))
            f.write(iid)
            f.write(pack.global_feature.astype("<f4").tobytes())
            f.write(pack.conv_map.astype("<f4").tobytes())
            f.write(struct.pack("<I", len(pack.region_features)))
            for rid in pack.region_features:
                rb = rid.encode("utf-8")
                f.write(struct.pack("<I", len(rb)))
                f.write(rb)
                f.write(pack.region_features[rid].astype("<f4").tobytes())
    except OSError as e:
        raise IOError(f"cannot write feature pack {path}: {e}") from e


def _take(buf: bytes, offset: int, n: int, what: str):
    if offset + n > len(buf):
        raise FormatError(
            f"truncated pack: need {offset + n} bytes for {what}, "
            f"file has {len(buf)}")
    return buf[offset:offset + n], offset + n


def read_feature_pack(path) -> FeaturePack:
    with open(path, "rb") as f:
        buf = f.read()
    chunk, off = _take(buf, 0, 4, "magic")
    if chunk != MAGIC:
        raise FormatError(f"bad magic {chunk!r}, expected {MAGIC!r}")
    chunk, off = _take(buf, off, 2, "version")
    (version,) = struct.unpack("<H", chunk)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    chunk, off = _take(buf, off, 4, "image_id length")
    (idlen,) = struct.unpack("<I", chunk)
    chunk, off = _take(buf, off, idlen, "image_id")
    image_id = chunk.decode("utf-8")
    chunk, off = _take(buf, off, GLOBAL_DIM * 4, "global feature")
    global_feature = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
    chunk, off = _take(buf, off, CONV_CELLS * CONV_CHANNELS * 4, "conv map")
    conv_map = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
    conv_map = conv_map.reshape(CONV_CELLS, CONV_CHANNELS)
    chunk, off = _take(buf, off, 4, "region count")
    (n_regions,) = struct.unpack("<I", chunk)
    regions = {}
    for _ in range(n_regions):
        chunk, off = _take(buf, off, 4, "region id length")
        (rlen,) = struct.unpack("<I", chunk)
        chunk, off = _take(buf, off, rlen, "region id")
        rid = chunk.decode("utf-8")
        chunk, off = _take(buf, off, GLOBAL_DIM * 4, f"region {rid}")
        regions[rid] = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
    pack = FeaturePack(image_id=image_id, global_feature=global_feature,
                       conv_map=conv_map, region_features=regions)
    pack.validate(full_scale=True)
    return pack


def synth_feature_pack(image_id: str, seed: int, planted_signal=None,
                       region_ids=(), correct_region=None,
                       global_dim: int = GLOBAL_DIM,
                       conv_cells: int = CONV_CELLS,
                       conv_channels: int = CONV_CHANNELS,
                       n_classes: int = 4) -> FeaturePack:
    """
    Deterministic pseudo-random pack. With planted_signal set to a class
    index, a leading block of the global feature carries a strong one-hot
    class code, and the correct region (if named) carries a marker block the
    distractor regions lack, so the label is linearly recoverable.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, abs(hash_image_id(image_id))]))
    global_feature = rng.normal(0.0, 1.0, size=global_dim)
    conv_map = rng.normal(0.0, 1.0, size=(conv_cells, conv_channels))
    block = 2  # scalars per class in the planted code
    if planted_signal is not None:
        lo = planted_signal * block
        global_feature[:n_classes * block] = 0.0
        global_feature[lo:lo + block] = 5.0
    regions = {}
    for rid in region_ids:
        feat = rng.normal(0.0, 1.0, size=global_dim)
        feat[:2 * block] = 0.0
        if planted_signal is not None:
            marker = slice(0, block) if rid == correct_region \
                else slice(block, 2 * block)
            feat[marker] = 5.0
        regions[rid] = feat
    return FeaturePack(image_id=image_id, global_feature=global_feature,
                       conv_map=conv_map, region_features=regions)


def hash_image_id(image_id: str) -> int:
    """Stable (process-independent) integer hash of an image id."""
    import zlib
    return zlib.crc32(image_id.encode("utf-8"))
