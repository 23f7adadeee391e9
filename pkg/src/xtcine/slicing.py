"""Training samples from image sequences and their reassembly.

Volumes are indexed ``[x, y, t]``. An xt slice fixes y and spans x against
t; a yt slice fixes x.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io

KINDS = ("xy-frame", "xt-slice", "yt-slice", "xyt-channels")
MODES = ("xy", "xt-yt", "xy-t-channels")


@dataclass(frozen=True)
class Origin:
    subject: int
    slice: int
    index: int
    offset: int = 0


@dataclass
class SliceSample:
    input: np.ndarray
    label: np.ndarray
    kind: str
    origin: Origin

    def __post_init__(self):
        if self.input.shape != self.label.shape:
            raise ValueError(f"input {self.input.shape} and label {self.label.shape} differ")
        if self.kind not in KINDS:
            raise ValueError(f"unknown sample kind {self.kind!r}")


@dataclass(frozen=True)
class DatasetSpec:
    mode: str = "xt-yt"
    crop: int = 0
    stride: int = 1
    label_mode: str = "ground-truth"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.crop < 0 or self.stride < 1:
            raise ValueError("crop must be >= 0 and stride >= 1")
        if self.label_mode not in ("ground-truth", "residual"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")


def compute_residual(x_in: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x_in.shape != x.shape:
        raise ValueError(f"shape mismatch {x_in.shape} vs {x.shape}")
    return x_in - x


def extract_xt(volume: np.ndarray, y: int) -> np.ndarray:
    if not 0 <= y < volume.shape[1]:
        raise IndexError(f"y index {y} out of range")
    return volume[:, y, :].copy()


def extract_yt(volume: np.ndarray, x: int) -> np.ndarray:
    if not 0 <= x < volume.shape[0]:
        raise IndexError(f"x index {x} out of range")
    return volume[x, :, :].copy()


def expected_count(mode: str, n: int, nz: int, nx: int, ny: int, nt: int) -> int:
    """Number of immediately available samples per training perspective."""
    if mode == "xy":
        return n * nz * nt
    if mode == "xy-t-channels":
        return n * nz
    if mode == "xt-yt":
        return n * (nx + ny) * nz
    raise ValueError(f"unknown mode {mode!r}")


def _crop(volume, crop):
    nx, ny = volume.shape[:2]
    if 2 * crop >= min(nx, ny):
        raise ValueError(f"crop {crop} exceeds volume extent {volume.shape[:2]}")
    return volume[crop:nx - crop, crop:ny - crop] if crop else volume


def volume_samples(x_in: np.ndarray, label: np.ndarray, mode: str, subject: int = 0,
                   slice_: int = 0) -> list[SliceSample]:
    """All samples of one (already cropped) volume pair for a perspective."""
    out = []
    if mode == "xy":
        for t in range(x_in.shape[2]):
            out.append(SliceSample(x_in[:, :, t].copy(), label[:, :, t].copy(), "xy-frame",
                                   Origin(subject, slice_, t)))
    elif mode == "xt-yt":
        for y in range(x_in.shape[1]):
            out.append(SliceSample(extract_xt(x_in, y), extract_xt(label, y), "xt-slice",
                                   Origin(subject, slice_, y)))
        for x in range(x_in.shape[0]):
            out.append(SliceSample(extract_yt(x_in, x), extract_yt(label, x), "yt-slice",
                                   Origin(subject, slice_, x)))
    elif mode == "xy-t-channels":
        out.append(SliceSample(x_in.copy(), label.copy(), "xyt-channels", Origin(subject, slice_, 0)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def build_dataset(pairs, spec: DatasetSpec, subjects=None) -> list[SliceSample]:
    """Samples for a list of ``(x_I, x)`` volume pairs.

    ``subjects`` optionally gives ``(subject, slice)`` provenance per pair;
    by default pair ``i`` is subject ``i``, slice 0.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no volumes given")
    shape = pairs[0][0].shape
    subjects = subjects or [(i, 0) for i in range(len(pairs))]
    samples = []
    for (x_in, x), (n, z) in zip(pairs, subjects):
        if x_in.shape != shape or x.shape != shape:
            raise ValueError("all volumes must share one shape")
        x_in, x = _crop(x_in, spec.crop), _crop(x, spec.crop)
        label = x if spec.label_mode == "ground-truth" else compute_residual(x_in, x)
        samples.extend(volume_samples(x_in, label, spec.mode, n, z))
    return samples


def augment(sample: SliceSample, flip_h: bool = False, flip_v: bool = False, shift: int = 0,
            offset: float = 0.0, label_mode: str = "ground-truth") -> SliceSample:
    """Apply the same flips, temporal cyclic shift and constant offset to
    input and label.

    The offset is added to the input and to the implied ground truth, so a
    residual label is left untouched.
    """
    nt = sample.input.shape[-1] if sample.kind != "xy-frame" else 1
    if sample.kind != "xy-frame" and not abs(shift) < nt:
        raise ValueError(f"shift {shift} must satisfy |shift| < {nt}")
    if sample.kind == "xy-frame" and shift:
        raise ValueError("frames carry no temporal axis to shift")

    def apply(a):
        if flip_h:
            a = a[::-1, ...]
        if flip_v:
            a = a[:, ::-1, ...]
        if shift:
            a = np.roll(a, shift, axis=-1)
        return a.copy()

    inp, lab = apply(sample.input), apply(sample.label)
    if offset:
        inp = inp + offset
        if label_mode == "ground-truth":
            lab = lab + offset
    return replace(sample, input=inp, label=lab)


def random_augment(sample: SliceSample, rng: np.random.Generator, max_offset: float = 0.1,
                   label_mode: str = "ground-truth") -> SliceSample:
    nt = sample.input.shape[-1]
    return augment(sample, bool(rng.integers(2)), bool(rng.integers(2)),
                   0 if sample.kind == "xy-frame" else int(rng.integers(nt)),
                   float(rng.uniform(-max_offset, max_offset)), label_mode)


# -- strided extraction and reassembly ---------------------------------------

def window_offsets(extent: int, window: int, stride: int) -> list[int]:
    """Window starts ``0, stride, ...``; the last window is pinned to the end
    when the stride does not land on it."""
    if window > extent:
        raise ValueError(f"window {window} exceeds extent {extent}")
    offs = list(range(0, extent - window + 1, stride))
    if offs[-1] != extent - window:
        offs.append(extent - window)
    return offs


@dataclass(frozen=True)
class Placement:
    """Where a prediction goes: ``kind`` plus fixed index and window offsets."""
    kind: str
    index: int = 0
    offset: int = 0
    offset2: int = 0


def strided_inputs(volume: np.ndarray, mode: str, window: int, stride: int):
    """Windows covering a full volume for prediction; yields (placement, array)."""
    nx, ny, nt = volume.shape
    if mode == "xt-yt":
        for y in range(ny):
            for ox in window_offsets(nx, window, stride):
                yield Placement("xt-slice", y, ox), volume[ox:ox + window, y, :]
        for x in range(nx):
            for oy in window_offsets(ny, window, stride):
                yield Placement("yt-slice", x, oy), volume[x, oy:oy + window, :]
    elif mode == "xy":
        for t in range(nt):
            for ox in window_offsets(nx, window, stride):
                for oy in window_offsets(ny, window, stride):
                    yield Placement("xy-frame", t, ox, oy), volume[ox:ox + window, oy:oy + window, t]
    elif mode == "xy-t-channels":
        for ox in window_offsets(nx, window, stride):
            for oy in window_offsets(ny, window, stride):
                yield Placement("xyt-channels", 0, ox, oy), volume[ox:ox + window, oy:oy + window, :]
    else:
        raise ValueError(f"unknown mode {mode!r}")


def _target(kind, place, shape):
    """Index expression into the accumulator volume for one prediction."""
    if kind == "xt-slice":
        return np.s_[place.offset:place.offset + shape[0], place.index, :]
    if kind == "yt-slice":
        return np.s_[place.index, place.offset:place.offset + shape[0], :]
    if kind == "xy-frame":
        return np.s_[place.offset:place.offset + shape[0], place.offset2:place.offset2 + shape[1], place.index]
    if kind == "xyt-channels":
        return np.s_[place.offset:place.offset + shape[0], place.offset2:place.offset2 + shape[1], :]
    raise ValueError(f"unknown sample kind {kind!r}")


def reassemble(predictions, shape) -> tuple[np.ndarray, np.ndarray]:
    """Average overlapping predictions into a volume.

    ``predictions`` is an iterable of ``(Placement, array)``; dataset
    samples map to placements through :func:`sample_placement`. xt and yt
    predictions share one mean. Returns ``(volume, coverage_count)``.
    """
    total = np.zeros(shape)
    count = np.zeros(shape, dtype=np.int64)
    for place, arr in predictions:
        sl = _target(place.kind, place, arr.shape)
        total[sl] += arr
        count[sl] += 1
    if np.any(count == 0):
        raise ValueError(f"{int(np.sum(count == 0))} voxels not covered by any prediction")
    return total / count, count


def sample_placement(sample: SliceSample) -> Placement:
    """Placement of an unstrided dataset sample inside its (cropped) volume."""
    return Placement(sample.kind, sample.origin.index, sample.origin.offset, 0)


# -- persistence --------------------------------------------------------------

def save_dataset(samples: list[SliceSample], directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        name = f"sample_{i:06d}.bin"
        io.write_array(directory / name, np.stack([s.input, s.label]))
        o = s.origin
        rows.append((name, s.kind, o.subject, o.slice, o.index, o.offset, "x".join(map(str, s.input.shape))))
    io.write_csv(directory / "manifest.csv",
                 ("file", "kind", "subject", "slice", "index", "offset", "shape"), rows)


def load_dataset(directory) -> list[SliceSample]:
    directory = Path(directory)
    samples = []
    for row in io.read_csv(directory / "manifest.csv"):
        pair = io.read_array(directory / row["file"])
        origin = Origin(int(row["subject"]), int(row["slice"]), int(row["index"]), int(row["offset"]))
        samples.append(SliceSample(pair[0], pair[1], row["kind"], origin))
    return samples
