"""2D keypoint ingestion: line-delimited JSON parsing, confidence-guided
fusion of multiple detection sources, and temporal gap filling.

Keypoint file format (UTF-8, one JSON object per line)::

    {"frame": 0, "body": [[u, v, c], ...], "left_hand": [[u, v, c] x 21],
     "right_hand": [[u, v, c] x 21], "face": [[u, v, c], ...]}

Pixel coordinates with confidences in [0, 1].  A separate layout file maps
each slot of each group to a skeleton joint name (or null for unmapped
slots)::

    {"body": ["pelvis", ...], "left_hand": [...], ...}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LayoutError, ParseError

log = logging.getLogger(__name__)

GROUPS = ("body", "left_hand", "right_hand", "face")


@dataclass
class KeypointFrame:
    """One frame of detections: per group an (n, 3) array of (u, v, conf)."""

    frame_index: int
    groups: dict[str, np.ndarray]

    def group_sizes(self) -> dict[str, int]:
        return {g: arr.shape[0] for g, arr in self.groups.items()}


@dataclass
class KeypointSequence:
    source_name: str
    frames: list[KeypointFrame]
    group_layout: dict[str, list[str | None]] | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def group_sizes(self) -> dict[str, int]:
        return self.frames[0].group_sizes() if self.frames else {}

    def stacked(self, group: str) -> np.ndarray:
        """(T, n, 3) array for one group."""
        return np.stack([f.groups[group] for f in self.frames])

    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.frames]


def load_layout(path) -> dict[str, list[str | None]]:
    with open(path, "r", encoding="utf-8") as fh:
        layout = json.load(fh)
    for g in layout:
        if g not in GROUPS:
            raise LayoutError(f"unknown keypoint group {g!r} in layout")
    return layout


def save_layout(layout: dict, path) -> None:
    Path(path).write_text(json.dumps(layout, indent=1), encoding="utf-8")


def parse_keypoints(path, layout: dict | None = None,
                    source_name: str | None = None) -> KeypointSequence:
    """Parse a line-delimited keypoint file.

    Frames are sorted by frame index (a warning is logged if the file was
    out of order). Raises :class:`ParseError` with the 1-based line number
    for malformed lines and :class:`LayoutError` if group sizes vary.
    """
    frames: list[KeypointFrame] = []
    sizes: dict[str, int] | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {lineno}: invalid JSON ({e.msg})", line=lineno)
            if "frame" not in obj:
                raise ParseError(f"line {lineno}: missing 'frame' field", line=lineno)
            groups = {}
            for g in GROUPS:
                pts = np.asarray(obj.get(g, []), dtype=float)
                if pts.size == 0:
                    pts = np.zeros((0, 3))
                if pts.ndim != 2 or pts.shape[1] != 3:
                    raise ParseError(
                        f"line {lineno}: group {g!r} must be a list of [u, v, conf]",
                        line=lineno,
                    )
                if not np.all(np.isfinite(pts)):
                    raise ParseError(f"line {lineno}: non-finite value in {g!r}", line=lineno)
                conf = pts[:, 2]
                if np.any(conf < 0.0) or np.any(conf > 1.0):
                    raise ParseError(
                        f"line {lineno}: confidence outside [0, 1] in {g!r}", line=lineno
                    )
                groups[g] = pts
            frame = KeypointFrame(frame_index=int(obj["frame"]), groups=groups)
            if sizes is None:
                sizes = frame.group_sizes()
            elif frame.group_sizes() != sizes:
                raise LayoutError(
                    f"line {lineno}: group sizes {frame.group_sizes()} differ from {sizes}"
                )
            frames.append(frame)
    if not frames:
        raise ParseError("keypoint file contains no frames", line=0)
    order = [f.frame_index for f in frames]
    if order != sorted(order):
        log.warning("keypoint frames out of order in %s; re-sorting", path)
        frames.sort(key=lambda f: f.frame_index)
    if len({f.frame_index for f in frames}) != len(frames):
        raise ParseError("duplicate frame indices in keypoint file", line=0)
    return KeypointSequence(
        source_name=source_name or str(path), frames=frames, group_layout=layout
    )


def save_keypoints(seq: KeypointSequence, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in seq.frames:
            obj = {"frame": f.frame_index}
            for g in GROUPS:
                obj[g] = np.asarray(f.groups[g]).tolist()
            fh.write(json.dumps(obj) + "\n")


def _check_compatible(sources: list[KeypointSequence]) -> None:
    first = sources[0]
    for s in sources[1:]:
        if s.group_sizes() != first.group_sizes():
            raise LayoutError(
                f"source {s.source_name!r} group sizes {s.group_sizes()} "
                f"differ from {first.group_sizes()}"
            )
        if s.frame_indices() != first.frame_indices():
            raise LayoutError(
                f"source {s.source_name!r} frame range differs from {first.source_name!r}"
            )
        if s.group_layout != first.group_layout and s.group_layout and first.group_layout:
            raise LayoutError("sources carry different slot layouts")


def fuse_confidence_guided(sources: list[KeypointSequence],
                           threshold: float = 0.3) -> KeypointSequence:
    """Winner-take-all fusion: per slot per frame keep the most confident
    source sample; mark the slot missing (zeroed) when even the best
    confidence falls below ``threshold``.
    """
    if not sources:
        raise LayoutError("no sources to fuse")
    _check_compatible(sources)
    first = sources[0]
    fused_frames = []
    per_group = {g: np.stack([s.stacked(g) for s in sources]) for g in first.group_sizes()}
    for g, arr in per_group.items():
        # arr: (n_sources, T, n, 3)
        conf = arr[..., 2]
        best = np.argmax(conf, axis=0)  # ties -> lowest source index
        picked = np.take_along_axis(arr, best[None, ..., None], axis=0)[0]
        below = picked[..., 2] < threshold
        picked[below] = 0.0
        per_group[g] = picked
    for t, f in enumerate(first.frames):
        groups = {g: per_group[g][t].copy() for g in per_group}
        fused_frames.append(KeypointFrame(frame_index=f.frame_index, groups=groups))
    return KeypointSequence(
        source_name="fused", frames=fused_frames, group_layout=first.group_layout
    )


def fill_missing(seq: KeypointSequence) -> KeypointSequence:
    """Linearly interpolate missing (confidence-0) samples in time.

    Edge gaps hold the nearest observed value. Filled samples keep
    confidence 0 so they carry no weight in the objective; tracks that were
    never observed stay all-zero. Observed samples are never altered.
    """
    filled_frames = [
        KeypointFrame(frame_index=f.frame_index, groups={g: a.copy() for g, a in f.groups.items()})
        for f in seq.frames
    ]
    T = len(filled_frames)
    ts = np.arange(T, dtype=float)
    for g in seq.group_sizes():
        arr = np.stack([f.groups[g] for f in filled_frames])  # (T, n, 3)
        for slot in range(arr.shape[1]):
            conf = arr[:, slot, 2]
            obs = conf > 0.0
            if not obs.any() or obs.all():
                continue
            for coord in range(2):
                arr[~obs, slot, coord] = np.interp(ts[~obs], ts[obs], arr[obs, slot, coord])
        for t in range(T):
            filled_frames[t].groups[g] = arr[t]
    return KeypointSequence(
        source_name=seq.source_name, frames=filled_frames, group_layout=seq.group_layout
    )


@dataclass
class ResolvedKeypoints:
    """Keypoints flattened against a skeleton for the reprojection term.

    ``joint_index``: (S,) skeleton joint per mapped slot; ``kind``: group
    name per slot; ``uv``: (T, S, 2); ``conf``: (T, S).
    """

    joint_index: np.ndarray
    kind: list[str]
    uv: np.ndarray
    conf: np.ndarray
    slot_names: list[str] = field(default_factory=list)


def resolve_layout(seq: KeypointSequence, model) -> ResolvedKeypoints:
    """Flatten mapped slots of a fused sequence against a model.

    Slots mapped to null (or missing from the layout) are dropped.
    """
    if seq.group_layout is None:
        raise LayoutError("keypoint sequence has no layout; supply a layout file")
    joint_idx: list[int] = []
    kinds: list[str] = []
    names: list[str] = []
    cols: list[tuple[str, int]] = []
    sizes = seq.group_sizes()
    for g, slot_names in seq.group_layout.items():
        if g not in sizes:
            continue
        if len(slot_names) != sizes[g]:
            raise LayoutError(
                f"layout for group {g!r} has {len(slot_names)} slots, file has {sizes[g]}"
            )
        for s, name in enumerate(slot_names):
            if name is None:
                continue
            joint_idx.append(model.joint_index(name))
            kinds.append(g)
            names.append(name)
            cols.append((g, s))
    if not joint_idx:
        raise LayoutError("layout maps no slots to joints")
    T = len(seq.frames)
    uv = np.zeros((T, len(joint_idx), 2))
    conf = np.zeros((T, len(joint_idx)))
    stacked = {g: seq.stacked(g) for g in sizes}
    for j, (g, s) in enumerate(cols):
        uv[:, j] = stacked[g][:, s, :2]
        conf[:, j] = stacked[g][:, s, 2]
    return ResolvedKeypoints(
        joint_index=np.asarray(joint_idx, dtype=int),
        kind=kinds,
        uv=uv,
        conf=conf,
        slot_names=names,
    )


def default_layout(model) -> dict[str, list[str | None]]:
    """Layout whose slots are the model's own joints (used by the synthesizer).

    Hand groups follow the 21-slot convention: wrist, then four slots
    (three phalanges + tip) per finger.
    """
    body = [model.names[i] for i in range(model.body_joint_count)]
    fingers = ("thumb", "index", "middle", "ring", "pinky")

    def hand(side):
        slots = [f"{side}_wrist"]
        for f in fingers:
            slots.extend(
                [f"{side}_{f}1", f"{side}_{f}2", f"{side}_{f}3", f"{side}_{f}_tip"]
            )
        return [s if s in model.name_to_index else None for s in slots]

    face = [n for n in ("left_eye", "right_eye", "chin", "head_top") if n in model.name_to_index]
    return {
        "body": body,
        "left_hand": hand("left"),
        "right_hand": hand("right"),
        "face": face,
    }
