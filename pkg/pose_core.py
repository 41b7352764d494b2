"""
Pose data model, forecast windowing, the portable poseseq file format and a
deterministic synthetic motion-family generator.

All coordinates are millimeters. Frames are held as float32 because that is
the on-disk dtype, so read(write(seq)) is bit-exact.
"""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from errors import HeaderError, NonFiniteError, PayloadLengthError, UnitsError

_FORMAT_VERSION = 1
_UNITS          = "mm"
_DTYPE          = np.dtype("<f4")

# Canonical 8-joint stick figure, standing, pelvis above the origin.
_REST_JOINTS = [
    # name          parent   x       y      z
    ("pelvis",      -1,      0.0,    0.0,  1000.0),
    ("spine",        0,      0.0,    0.0,  1250.0),
    ("neck",         1,      0.0,    0.0,  1500.0),
    ("head",         2,      0.0,    0.0,  1700.0),
    ("left_hand",    2,   -450.0,    0.0,  1450.0),
    ("right_hand",   2,    450.0,    0.0,  1450.0),
    ("left_foot",    0,   -150.0,    0.0,     0.0),
    ("right_foot",   0,    150.0,    0.0,     0.0),
]

REST_POSE = np.array([[x, y, z] for _, _, x, y, z in _REST_JOINTS], dtype=np.float64)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple
    parent_index: tuple

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(str(n) for n in self.joint_names))
        object.__setattr__(self, "parent_index", tuple(_as_parent(p) for p in self.parent_index))
        if len(self.joint_names) != len(self.parent_index):
            raise HeaderError(
                "joint_names",
                f"{len(self.joint_names)} names but {len(self.parent_index)} parent indices",
            )
        if len(self.joint_names) < 2:
            raise HeaderError("joint_names", "a skeleton needs at least 2 joints")
        _check_tree(self.parent_index)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)


def _as_parent(value) -> int:
    try:
        index = int(value)
    except (TypeError, ValueError) as exc:
        raise HeaderError("parent_index", f"{value!r} is not an integer joint index") from exc
    if index != value:
        raise HeaderError("parent_index", f"{value!r} is not an integer joint index")
    return index


def _as_fps(value) -> float:
    try:
        fps = float(value)
    except (TypeError, ValueError) as exc:
        raise HeaderError("fps", f"{value!r} is not a number") from exc
    if not (np.isfinite(fps) and fps > 0):
        raise HeaderError("fps", f"must be positive, got {value!r}")
    return fps


def _check_tree(parents: tuple) -> None:
    """Exactly one root (-1) and every joint reaches it without cycles."""
    J = len(parents)
    roots = [j for j, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise HeaderError("parent_index", f"expected exactly one root, found {len(roots)}")
    for j, p in enumerate(parents):
        if p != -1 and not 0 <= p < J:
            raise HeaderError("parent_index", f"joint {j} has out-of-range parent {p}")
    for j in range(J):
        seen = set()
        node = j
        while node != -1:
            if node in seen:
                raise HeaderError("parent_index", f"cycle through joint {j}")
            seen.add(node)
            node = parents[node]


def default_skeleton() -> Skeleton:
    return Skeleton(
        joint_names=[name for name, *_ in _REST_JOINTS],
        parent_index=[parent for _, parent, *_ in _REST_JOINTS],
    )


@dataclass(frozen=True)
class PoseSequence:
    skeleton: Skeleton
    fps: float
    frames: np.ndarray
    source_id: str = ""
    family_label: int | None = None

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if frames.ndim != 3 or frames.shape[1:] != (self.skeleton.num_joints, 3):
            raise HeaderError(
                "frames",
                f"shape {frames.shape} does not match (num_frames, {self.skeleton.num_joints}, 3)",
            )
        if frames.shape[0] < 1:
            raise HeaderError("num_frames", "a sequence needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise NonFiniteError("frames", "coordinates must be finite")
        fps = _as_fps(self.fps)
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", fps)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class ForecastSample:
    observed: np.ndarray
    future: np.ndarray
    source_id: str = ""
    family_label: int | None = None

    def __post_init__(self):
        observed = np.asarray(self.observed, dtype=np.float32)
        future   = np.asarray(self.future,   dtype=np.float32)
        if observed.ndim != 3 or future.ndim != 3 or observed.shape[1:] != future.shape[1:]:
            raise HeaderError("sample", f"observed {observed.shape} and future {future.shape} disagree")
        if observed.shape[0] < 1 or future.shape[0] < 1:
            raise HeaderError("sample", "observed and future windows need at least one frame")
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "future", future)

    @property
    def num_joints(self) -> int:
        return int(self.observed.shape[1])


@dataclass(frozen=True)
class MotionFamilySpec:
    """
    Sinusoidal motion family: every joint oscillates around the rest pose with
    its own amplitude/frequency/phase, the whole body drifts, plus white noise.
    """
    family_id: int
    amplitude: np.ndarray          # (J, 3) mm
    frequency: np.ndarray          # (J,)   Hz
    phase: np.ndarray              # (J,)   radians
    drift: np.ndarray = field(default_factory=lambda: np.zeros(3))  # (3,) mm/s
    noise_std: float = 0.0         # mm
    name: str = ""

    def __post_init__(self):
        amplitude = np.asarray(self.amplitude, dtype=np.float64)
        frequency = np.asarray(self.frequency, dtype=np.float64)
        phase     = np.asarray(self.phase,     dtype=np.float64)
        drift     = np.asarray(self.drift,     dtype=np.float64)
        J = amplitude.shape[0]
        if amplitude.shape != (J, 3) or frequency.shape != (J,) or phase.shape != (J,) or drift.shape != (3,):
            raise ValueError("MotionFamilySpec: amplitude (J,3), frequency (J,), phase (J,), drift (3,)")
        if np.any(amplitude < 0):
            raise ValueError("MotionFamilySpec: amplitudes must be >= 0")
        if np.any(frequency <= 0):
            raise ValueError("MotionFamilySpec: frequencies must be > 0")
        if self.noise_std < 0:
            raise ValueError("MotionFamilySpec: noise_std must be >= 0")
        object.__setattr__(self, "amplitude", amplitude)
        object.__setattr__(self, "frequency", frequency)
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "drift", drift)

    @property
    def num_joints(self) -> int:
        return int(self.amplitude.shape[0])


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def window_count(num_frames: int, O: int, T: int, stride: int) -> int:
    """floor((num_frames - O - T) / stride) + 1, or 0 when the sequence is too short."""
    span = num_frames - O - T
    return span // stride + 1 if span >= 0 else 0


def window(seq: PoseSequence, O: int, T: int, stride: int | None = None) -> list[ForecastSample]:
    """
    Cuts every contiguous (observed O, future T) pair starting at offsets
    0, stride, 2*stride, ... Default stride is T (non-overlapping futures).
    A sequence shorter than O + T yields an empty list.
    """
    stride = T if stride is None else stride
    if O < 1 or T < 1:
        raise ValueError(f"window: O and T must be >= 1 (got O={O}, T={T})")
    if stride < 1:
        raise ValueError(f"window: stride must be >= 1 (got {stride})")

    samples = []
    for k in range(window_count(seq.num_frames, O, T, stride)):
        start = k * stride
        samples.append(ForecastSample(
            observed=seq.frames[start:start + O],
            future=seq.frames[start + O:start + O + T],
            source_id=f"{seq.source_id}@{start}",
            family_label=seq.family_label,
        ))
    return samples


def stack_samples(samples: list[ForecastSample]) -> tuple[np.ndarray, np.ndarray]:
    """Returns (observed (N,O,J,3), future (N,T,J,3)) float32 arrays."""
    if not samples:
        raise ValueError("stack_samples: empty sample list")
    observed = np.stack([s.observed for s in samples]).astype(np.float32)
    future   = np.stack([s.future   for s in samples]).astype(np.float32)
    return observed, future


# ---------------------------------------------------------------------------
# poseseq v1 file format
# ---------------------------------------------------------------------------

def write_sequence(seq: PoseSequence, path) -> None:
    """
    Writes one JSON header line followed by num_frames*J*3 little-endian
    float32 values in (frame, joint, xyz) order.
    """
    header = {
        "version":      _FORMAT_VERSION,
        "fps":          seq.fps,
        "units":        _UNITS,
        "joint_names":  list(seq.skeleton.joint_names),
        "parent_index": list(seq.skeleton.parent_index),
        "num_frames":   seq.num_frames,
    }
    if seq.source_id:
        header["source_id"] = seq.source_id
    if seq.family_label is not None:
        header["family_label"] = int(seq.family_label)

    payload = np.ascontiguousarray(seq.frames, dtype=_DTYPE).tobytes(order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)


def read_sequence(path) -> PoseSequence:
    """Parses a poseseq v1 file. Each failure mode raises its own error type."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise HeaderError("header", "no newline-terminated header line")

    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError("header", f"not a UTF-8 JSON object ({exc})") from exc
    if not isinstance(header, dict):
        raise HeaderError("header", "not a JSON object")

    for key in ("version", "fps", "units", "joint_names", "parent_index", "num_frames"):
        if key not in header:
            raise HeaderError(key, "missing from header")
    if header["version"] != _FORMAT_VERSION:
        raise HeaderError("version", f"unsupported version {header['version']!r}")
    if header["units"] != _UNITS:
        raise UnitsError("units", f"expected 'mm', got {header['units']!r}")

    names, parents = header["joint_names"], header["parent_index"]
    if not isinstance(names, list) or not isinstance(parents, list):
        raise HeaderError("joint_names", "joint_names and parent_index must be lists")
    if len(names) != len(parents):
        raise HeaderError(
            "joint_names",
            f"header lists {len(names)} joint names but {len(parents)} parent indices",
        )
    if "num_joints" in header and header["num_joints"] != len(names):
        raise HeaderError(
            "num_joints",
            f"header declares J={header['num_joints']} but lists {len(names)} joint names",
        )
    num_frames = header["num_frames"]
    if not isinstance(num_frames, int) or num_frames < 1:
        raise HeaderError("num_frames", f"must be a positive integer, got {num_frames!r}")

    fps = _as_fps(header["fps"])
    skeleton = Skeleton(names, parents)
    expected = num_frames * skeleton.num_joints * 3 * _DTYPE.itemsize
    payload = raw[newline + 1:]
    if len(payload) != expected:
        raise PayloadLengthError(
            "payload",
            f"expected {expected} bytes for shape ({num_frames}, {skeleton.num_joints}, 3), got {len(payload)}",
        )

    frames = np.frombuffer(payload, dtype=_DTYPE).reshape(num_frames, skeleton.num_joints, 3)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteError("payload", "non-finite coordinate values")

    return PoseSequence(
        skeleton=skeleton,
        fps=fps,
        frames=frames.astype(np.float32),
        source_id=str(header.get("source_id", "")),
        family_label=header.get("family_label"),
    )


# ---------------------------------------------------------------------------
# Synthetic motion families
# ---------------------------------------------------------------------------

def generate_family(
    spec: MotionFamilySpec,
    num_frames: int,
    seed: int,
    fps: float = 25.0,
    skeleton: Skeleton | None = None,
    rest_pose: np.ndarray | None = None,
) -> PoseSequence:
    """
    joint j at time t = rest[j] + amplitude[j]*sin(2*pi*frequency[j]*t + phase[j])
                        + drift*t + N(0, noise_std)
    with t = frame_index / fps seconds. Deterministic in (spec, seed, num_frames).
    """
    if num_frames < 1:
        raise ValueError(f"generate_family: num_frames must be >= 1 (got {num_frames})")
    skeleton  = skeleton or default_skeleton()
    rest_pose = REST_POSE if rest_pose is None else np.asarray(rest_pose, dtype=np.float64)
    if spec.num_joints != skeleton.num_joints or rest_pose.shape != (skeleton.num_joints, 3):
        raise ValueError("generate_family: spec, skeleton and rest pose disagree on J")

    t = np.arange(num_frames, dtype=np.float64) / fps                       # (F,)
    angle = 2.0 * np.pi * spec.frequency[None, :] * t[:, None] + spec.phase[None, :]   # (F, J)
    frames = (
        rest_pose[None, :, :]
        + spec.amplitude[None, :, :] * np.sin(angle)[:, :, None]
        + spec.drift[None, None, :] * t[:, None, None]
    )
    if spec.noise_std > 0:
        rng = np.random.default_rng(seed)
        frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)

    return PoseSequence(
        skeleton=skeleton,
        fps=fps,
        frames=frames.astype(np.float32),
        source_id=f"family{spec.family_id}-seed{seed}",
        family_label=spec.family_id,
    )


def canonical_family_specs() -> list[MotionFamilySpec]:
    """
    Three planted families on the 8-joint figure:
      0 walking : legs and arms swing in anti-phase at 1 Hz, forward drift
      1 sitting : pelvis and upper body bob slowly, feet nearly still
      2 waving  : right hand waves fast overhead, body still
    """
    J = len(_REST_JOINTS)

    walk_amp = np.zeros((J, 3))
    walk_amp[[4, 5], 1] = 250.0        # hands swing along y
    walk_amp[[6, 7], 1] = 300.0        # feet swing along y
    walk_amp[[6, 7], 2] = 80.0
    walk_amp[[0, 1, 2, 3], 2] = 20.0
    walk_phase = np.zeros(J)
    walk_phase[[5, 6]] = np.pi         # right hand with left foot
    walking = MotionFamilySpec(
        family_id=0, name="walking",
        amplitude=walk_amp, frequency=np.full(J, 1.0), phase=walk_phase,
        drift=np.array([0.0, 250.0, 0.0]), noise_std=2.0,
    )

    sit_amp = np.zeros((J, 3))
    sit_amp[[0, 1, 2, 3], 2] = 250.0   # torso moves down and up
    sit_amp[[4, 5], 2] = 200.0
    sit_amp[[4, 5], 1] = 120.0
    sit_amp[[6, 7], 1] = 15.0
    sitting = MotionFamilySpec(
        family_id=1, name="sitting",
        amplitude=sit_amp, frequency=np.full(J, 0.3), phase=np.full(J, np.pi / 2),
        drift=np.zeros(3), noise_std=2.0,
    )

    wave_amp = np.zeros((J, 3))
    wave_amp[5, 0] = 200.0
    wave_amp[5, 2] = 350.0
    wave_amp[4, 2] = 40.0
    wave_amp[3, 0] = 30.0
    wave_freq = np.full(J, 0.5)
    wave_freq[5] = 2.0
    waving = MotionFamilySpec(
        family_id=2, name="waving",
        amplitude=wave_amp, frequency=wave_freq, phase=np.zeros(J),
        drift=np.zeros(3), noise_std=2.0,
    )
    return [walking, sitting, waving]


def random_family_spec(family_id: int, seed: int, num_joints: int = len(_REST_JOINTS),
                       max_amplitude: float = 300.0, noise_std: float = 2.0) -> MotionFamilySpec:
    """Seeded random family: amplitudes U(0, max), frequencies U(0.25, 2) Hz, phases U(0, 2pi)."""
    rng = np.random.default_rng([family_id, seed])
    return MotionFamilySpec(
        family_id=family_id,
        name=f"random{family_id}",
        amplitude=rng.uniform(0.0, max_amplitude, size=(num_joints, 3)),
        frequency=rng.uniform(0.25, 2.0, size=num_joints),
        phase=rng.uniform(0.0, 2.0 * np.pi, size=num_joints),
        drift=rng.uniform(-200.0, 200.0, size=3),
        noise_std=noise_std,
    )


# ---------------------------------------------------------------------------
# Out-of-distribution shuffles
# ---------------------------------------------------------------------------

def frame_permutation(T: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(T)


def joint_permutation(J: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(J)


def shuffle_frames(sample: ForecastSample, seed: int) -> ForecastSample:
    """Uniformly random permutation of the future window's time axis."""
    perm = frame_permutation(sample.future.shape[0], seed)
    return replace(sample, future=sample.future[perm])


def shuffle_joints(sample: ForecastSample, seed: int) -> ForecastSample:
    """One random joint permutation applied to every frame, observed and future."""
    perm = joint_permutation(sample.num_joints, seed)
    return replace(sample, observed=sample.observed[:, perm], future=sample.future[:, perm])
