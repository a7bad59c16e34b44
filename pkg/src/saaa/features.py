"""Precomputed image feature maps: file format, normalization and positions."""

from __future__ import annotations

import logging
import re
import struct
import threading
from collections.abc import Iterable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from . import ops
from .constants import FEATURE_MAGIC, FEATURE_SUFFIX, FEATURE_VERSION, L2_EPSILON
from .errors import FeatureFormatError, InvalidStateError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

PATH_REGEX = re.compile(r"^(?:.*[/\\])?(?P<image_id>\d+)\.saaf$")

HEADER = struct.Struct("<4sHIII")
"""Magic, format version, then height, width and depth."""


@dataclass(frozen=True)
class FeatureHref:
    href: str
    image_id: int

    @classmethod
    def parse(cls, href: Path | str) -> FeatureHref:
        matches = PATH_REGEX.match(str(href))
        if matches is None:
            raise ValueError(f"Invalid feature file name: {href}")
        return FeatureHref(href=str(href), image_id=int(matches["image_id"]))

    @classmethod
    def for_image(cls, directory: Path | str, image_id: int) -> FeatureHref:
        """Gets the conventional path of an image's feature file."""
        return FeatureHref(
            href=str(Path(directory) / f"{image_id}{FEATURE_SUFFIX}"),
            image_id=image_id,
        )

    @property
    def path(self) -> Path:
        return Path(self.href)

    def __str__(self) -> str:
        return self.href


@dataclass(frozen=True)
class FeatureMap:
    """An H x W x depth grid of image features.

    Attributes:
        image_id: The image these features were computed from.
        values: The feature tensor.
        normalized: Whether depth vectors have been l2 normalized.
        positional: Whether the last two channels are appended coordinates.
    """

    image_id: int
    values: Tensor
    normalized: bool = False
    positional: bool = False

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(
                f"Feature map must be H x W x depth, got {self.values.shape}"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]

    @property
    def locations(self) -> int:
        """Number of spatial locations L = H * W."""
        return self.height * self.width

    def flat(self) -> Tensor:
        """The features as an L x depth tensor, row-major over the grid."""
        return ops.reshape(self.values, (self.locations, self.depth))


def save_feature_map(fm: FeatureMap, path: Path | str) -> None:
    """Writes a feature map as little-endian 32-bit floats."""
    header = HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, fm.height, fm.width, fm.depth)
    payload = np.ascontiguousarray(fm.values.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def parse_feature_bytes(data: bytes, image_id: int) -> FeatureMap:
    """Parses the bytes of a feature file.

    Raises:
        FeatureFormatError: On a bad magic or version, truncation, zero
            extents or non-finite values.
    """
    if len(data) < HEADER.size:
        raise FeatureFormatError(
            f"Truncated header: {len(data)} of {HEADER.size} bytes", len(data)
        )
    magic, version, height, width, depth = HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"Bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"Unsupported version {version}", 4)
    for offset, extent in ((6, height), (10, width), (14, depth)):
        if extent == 0:
            raise FeatureFormatError("Zero extent in header", offset)
    count = height * width * depth
    expected = HEADER.size + 4 * count
    if len(data) != expected:
        raise FeatureFormatError(
            f"Expected {expected} bytes for {height}x{width}x{depth}, "
            f"found {len(data)}",
            min(len(data), expected),
        )
    values = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FeatureFormatError("Non-finite value", HEADER.size + 4 * int(bad[0]))
    grid = values.astype(np.float32).reshape(height, width, depth)
    return FeatureMap(image_id=image_id, values=Tensor(grid))


def load_feature_map(path: Path | str, image_id: int | None = None) -> FeatureMap:
    """Loads a feature file; the image id defaults to the one in its name."""
    if image_id is None:
        image_id = FeatureHref.parse(path).image_id
    with open(path, "rb") as f:
        data = f.read()
    return parse_feature_bytes(data, image_id)


def normalize_depth(fm: FeatureMap) -> FeatureMap:
    """Scales every depth vector to unit l2 norm.

    Appended positional channels keep their scale.

    Raises:
        InvalidStateError: If the map is already normalized.
    """
    if fm.normalized:
        raise InvalidStateError(f"Features of image {fm.image_id} already normalized")
    if fm.positional:
        base, coordinates = ops.split(fm.values, [fm.depth - 2, 2], axis=-1)
        values = ops.concat(
            [ops.l2_normalize(base, axis=-1, epsilon=L2_EPSILON), coordinates],
            axis=-1,
        )
    else:
        values = ops.l2_normalize(fm.values, axis=-1, epsilon=L2_EPSILON)
    return replace(fm, values=values, normalized=True)


def position_grid(height: int, width: int) -> npt.NDArray[np.float64]:
    """Returns an H x W x 2 grid of (x, y) cell coordinates scaled to [0, 1]."""
    xs = np.linspace(0.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
    grid = np.zeros((height, width, 2))
    grid[:, :, 0] = xs[np.newaxis, :]
    grid[:, :, 1] = ys[:, np.newaxis]
    return grid


def augment_positions(fm: FeatureMap) -> FeatureMap:
    """Appends x and y cell coordinates as two extra channels."""
    if fm.positional:
        raise InvalidStateError(f"Features of image {fm.image_id} already positional")
    coordinates = Tensor(position_grid(fm.height, fm.width).astype(fm.values.dtype))
    values = ops.concat([fm.values, coordinates], axis=-1)
    return replace(fm, values=values, positional=True)


def spatial_mean(fm: FeatureMap) -> Tensor:
    """Averages the features over all spatial locations."""
    return ops.mean(fm.flat(), axis=0)


def synthetic_feature_map(
    image_id: int, height: int, width: int, depth: int, seed: int = 0
) -> FeatureMap:
    """Deterministic standard-normal features for an image id."""
    rng = np.random.default_rng([seed, image_id])
    values = rng.standard_normal((height, width, depth)).astype(np.float32)
    return FeatureMap(image_id=image_id, values=Tensor(values))


class FeatureStore(Mapping[int, FeatureMap]):
    """Feature maps keyed by image id, loaded lazily from a directory.

    Loads are cached and safe to run from several threads.
    """

    def __init__(
        self,
        directory: Path | str | None = None,
        maps: Mapping[int, FeatureMap] | None = None,
    ) -> None:
        self.directory = Path(directory) if directory is not None else None
        self._cache: dict[int, FeatureMap] = dict(maps or {})
        self.errors: dict[int, FeatureFormatError] = {}
        """Format errors by image id, kept so broken files are read once."""
        self._lock = threading.Lock()

    @classmethod
    def from_maps(cls, maps: Iterable[FeatureMap]) -> FeatureStore:
        return cls(maps={fm.image_id: fm for fm in maps})

    def __getstate__(self) -> dict[str, Any]:
        with self._lock:
            return {
                "directory": self.directory,
                "cache": dict(self._cache),
                "errors": dict(self.errors),
            }

    def __setstate__(self, state: dict[str, Any]) -> None:
        self.directory = state["directory"]
        self._cache = state["cache"]
        self.errors = state["errors"]
        self._lock = threading.Lock()

    def _path(self, image_id: int) -> Path | None:
        if self.directory is None:
            return None
        return FeatureHref.for_image(self.directory, image_id).path

    def __getitem__(self, image_id: int) -> FeatureMap:
        with self._lock:
            cached = self._cache.get(image_id)
            known = self.errors.get(image_id)
        if cached is not None:
            return cached
        if known is not None:
            raise known
        path = self._path(image_id)
        if path is None or not path.exists():
            raise KeyError(image_id)
        try:
            fm = load_feature_map(path, image_id)
        except FeatureFormatError as error:
            with self._lock:
                self.errors[image_id] = error
            raise
        with self._lock:
            self._cache.setdefault(image_id, fm)
            return self._cache[image_id]

    def __contains__(self, image_id: object) -> bool:
        if not isinstance(image_id, int):
            return False
        with self._lock:
            if image_id in self._cache:
                return True
        path = self._path(image_id)
        return path is not None and path.exists()

    def __iter__(self) -> Iterator[int]:
        ids = set(self._cache)
        if self.directory is not None:
            for path in self.directory.glob(f"*{FEATURE_SUFFIX}"):
                try:
                    ids.add(FeatureHref.parse(path).image_id)
                except ValueError:
                    continue
        return iter(sorted(ids))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def preload(self, image_ids: Iterable[int], workers: int = 4) -> list[int]:
        """Loads the given images in parallel.

        Unreadable files are logged and remembered in `errors`, so the
        records that use them can be skipped later.

        Returns:
            The image ids that have no feature file.
        """
        unique = sorted(set(image_ids))

        def load(image_id: int) -> int | None:
            try:
                self[image_id]
            except KeyError:
                return image_id
            except FeatureFormatError as error:
                logger.warning("Image %d: %s", image_id, error)
            return None

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            results = list(executor.map(load, unique))
        missing = [image_id for image_id in results if image_id is not None]
        logger.info(
            "Loaded features for %d images, %d missing, %d unreadable",
            len(unique) - len(missing) - len(self.errors),
            len(missing),
            len(self.errors),
        )
        return missing
