"""Core per-frame containers: pointmaps, label masks, correspondences and labeled clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from segfield.errors import InvalidInputError


@dataclass
class Pointmap:
    """Dense per-pixel 3D points in a shared world frame.

    Attributes:
        points: World coordinates, shape (H, W, 3).
        valid: Pixels with a reconstructed point, shape (H, W).
    """

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise InvalidInputError(f"pointmap must be (H, W, 3), got {self.points.shape}")
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.points.shape[:2]:
            raise InvalidInputError("validity mask shape does not match pointmap")
        if self.points.shape[0] * self.points.shape[1] == 0:
            raise InvalidInputError("pointmap must have at least one pixel")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise InvalidInputError("pointmap has non-finite values at valid pixels")

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]


@dataclass
class LabeledMaskSet:
    """Instance masks for one frame as a per-pixel ID image (0 = unlabeled)."""

    ids: np.ndarray

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise InvalidInputError(f"mask ids must be 2D, got shape {ids.shape}")
        if ids.size and ids.min() < 0:
            raise InvalidInputError("mask ids must be non-negative")
        self.ids = ids.astype(np.int64, copy=False)

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    @property
    def id_list(self) -> list[int]:
        u = np.unique(self.ids)
        return [int(v) for v in u if v != 0]

    def size_of(self, mask_id: int) -> int:
        return int(np.count_nonzero(self.ids == mask_id))

    def copy(self) -> LabeledMaskSet:
        return LabeledMaskSet(self.ids.copy())


@dataclass
class CorrespondenceMap:
    """Per-pixel mapping from a source frame into a target frame.

    Attributes:
        target: (row, col) into the target frame for each source pixel, shape (H, W, 2).
        defined: Source pixels that have a correspondence, shape (H, W).
        target_shape: (H, W) of the target frame.
    """

    target: np.ndarray
    defined: np.ndarray
    target_shape: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.defined.shape


@dataclass
class SegmentedPointCloud:
    """Accumulated labeled 3D points."""

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
        n = len(self.positions)
        if len(self.labels) != n or len(self.source_frame) != n:
            raise InvalidInputError("cloud fields must have equal length")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError("cloud positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def concatenate(cls, parts: list[SegmentedPointCloud]) -> SegmentedPointCloud:
        if not parts:
            return cls()
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.source_frame for p in parts]),
        )
