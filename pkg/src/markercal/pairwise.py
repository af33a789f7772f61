"""Pairwise relative transforms between cameras and between markers.

Whenever two cameras see the same marker in the same frame, each pairing of
their candidate poses yields one sample of the camera-to-camera transform
(likewise for two markers seen by one camera). Samples are never averaged:
the one that best agrees with the rest, by summed squared distance over three
probe points, is selected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.spatial.distance import cdist

from .errors import EmptyCandidateSet
from .geometry import RigidTransform, compose, invert
from .planar_pose import CandidateSet

CAMERA_PAIR = "camera"
MARKER_PAIR = "marker"

# below this size the O(n^2) selection runs as a plain loop whose float
# accumulation order matches the obvious reference implementation exactly
_DIRECT_SELECT_LIMIT = 64


@dataclass(frozen=True, order=True)
class PairKey:
    """Unordered pair of camera ids or marker ids, canonicalized to a < b."""

    a: int
    b: int
    kind: str = CAMERA_PAIR

    def __post_init__(self):
        if self.a >= self.b:
            raise ValueError(f"pair ids must satisfy a < b, got ({self.a}, {self.b})")
        if self.kind not in (CAMERA_PAIR, MARKER_PAIR):
            raise ValueError(f"unknown pair kind {self.kind!r}")


@dataclass(frozen=True)
class TransformSample:
    """One observed relative transform plus where it came from.

    `source` is (frame, bridge id): the marker both cameras saw, or the
    camera that saw both markers. `product_index` orders the candidates of
    an ambiguous detection pairing.
    """

    transform: RigidTransform
    source: tuple[int, int] = (-1, -1)
    product_index: int = 0
    from_ambiguous: bool = False


@dataclass(frozen=True)
class SelectedTransform:
    best: RigidTransform
    d_total: float  # m^2, summed distance of best against all samples
    d_mean: float  # m^2
    index: int  # position of best in the sample list


@dataclass
class PairAccumulator:
    """All transform samples collected for one pair, plus the selection."""

    key: PairKey
    samples: list[TransformSample] = field(default_factory=list)
    selected: SelectedTransform | None = None

    def canonicalize(self) -> None:
        """Sort samples into the (frame, bridge, product index) order."""
        self.samples.sort(key=lambda s: (s.source, s.product_index))


def probe_points(scale: float) -> np.ndarray:
    """The three axis probe points (s,0,0), (0,s,0), (0,0,s)."""
    if scale <= 0:
        raise ValueError("probe scale must be positive")
    return np.eye(3) * scale


def _check_probe(probe: np.ndarray) -> np.ndarray:
    p = np.asarray(probe, dtype=np.float64).reshape(3, 3)
    if np.any(np.linalg.norm(p, axis=1) < 1e-15):
        raise ValueError("probe points must be nonzero")
    if np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])) < 1e-15:
        raise ValueError("probe points must not be collinear")
    return p


def transform_distance(a: RigidTransform, b: RigidTransform, probe: np.ndarray) -> float:
    """Sum over the probe points of the squared distance between images."""
    p = _check_probe(probe)
    diff = a.apply(p) - b.apply(p)
    return float(np.sum(diff * diff, axis=1).sum())


def camera_pair_samples(
    xi_i: CandidateSet,
    xi_j: CandidateSet,
    source: tuple[int, int] = (-1, -1),
) -> list[TransformSample]:
    """Camera-j-to-camera-i transforms from one marker seen by both cameras.

    Each Cartesian pairing of the candidate marker poses T_i (marker to
    camera i) and T_j contributes T_i * T_j^-1. Result size is
    |xi_i| * |xi_j|, so 0, 1, 2 or 4 samples.
    """
    ambiguous = len(xi_i) == 2 or len(xi_j) == 2
    out = []
    idx = 0
    for t_i in xi_i.transforms:
        for t_j in xi_j.transforms:
            out.append(
                TransformSample(compose(t_i, invert(t_j)), source, idx, ambiguous)
            )
            idx += 1
    return out


def marker_pair_samples(
    xi_i: CandidateSet,
    xi_j: CandidateSet,
    source: tuple[int, int] = (-1, -1),
) -> list[TransformSample]:
    """Marker-i-to-marker-j transforms from one camera seeing both markers.

    Each pairing of the candidate poses T_i (marker i to the camera) and T_j
    contributes T_j^-1 * T_i, which maps marker-i coordinates to marker-j
    coordinates.
    """
    ambiguous = len(xi_i) == 2 or len(xi_j) == 2
    out = []
    idx = 0
    for t_i in xi_i.transforms:
        for t_j in xi_j.transforms:
            out.append(
                TransformSample(compose(invert(t_j), t_i), source, idx, ambiguous)
            )
            idx += 1
    return out


def argmin_summed_distance(
    transforms: list[RigidTransform], probe: np.ndarray
) -> tuple[int, float]:
    """Index minimizing the summed probe-point distance to all transforms.

    Ties break toward the lowest index. Small sets run as a direct loop whose
    accumulation order matches the reference double loop exactly; larger sets
    use a vectorized distance matrix.
    """
    p = _check_probe(probe)
    n = len(transforms)
    if n == 0:
        raise EmptyCandidateSet("no transforms to select from")
    if n <= _DIRECT_SELECT_LIMIT:
        totals = [
            sum(transform_distance(transforms[k], t, p) for t in transforms)
            for k in range(n)
        ]
    else:
        images = np.empty((n, 3, 3))
        for k, t in enumerate(transforms):
            images[k] = t.apply(p)
        dist = np.zeros((n, n))
        for axis in range(3):
            dist += cdist(images[:, axis, :], images[:, axis, :], "sqeuclidean")
        totals = dist.sum(axis=1)
    best_idx = int(np.argmin(totals))
    return best_idx, float(totals[best_idx])


def select_optimal(acc: PairAccumulator, probe: np.ndarray) -> tuple[RigidTransform, float]:
    """Pick the sample with the smallest summed distance to all others.

    Ties break toward the lowest sample index. Stores the selection on the
    accumulator and returns (best transform, total distance).
    """
    if not acc.samples:
        raise EmptyCandidateSet(f"no samples for pair {acc.key}")
    best_idx, d_total = argmin_summed_distance(
        [s.transform for s in acc.samples], probe
    )
    best = acc.samples[best_idx].transform
    acc.selected = SelectedTransform(best, d_total, d_total / len(acc.samples), best_idx)
    return best, d_total


def _subsample(acc: PairAccumulator, cap: int, rng: np.random.Generator) -> None:
    if len(acc.samples) > cap:
        keep = sorted(rng.choice(len(acc.samples), size=cap, replace=False))
        acc.samples = [acc.samples[i] for i in keep]


def collect_camera_pairs(
    candidate_sets: dict[tuple[int, int, int], CandidateSet],
    max_samples_per_pair: int | None = None,
    seed: int = 0,
) -> dict[PairKey, PairAccumulator]:
    """Accumulate camera-pair samples from per-detection candidate sets.

    `candidate_sets` is keyed by (t, cam, marker). Every frame/marker bridge
    seen by two cameras contributes samples to that camera pair.
    """
    by_bridge: dict[tuple[int, int], dict[int, CandidateSet]] = {}
    for (t, cam, marker), xi in candidate_sets.items():
        if len(xi) == 0:
            continue
        by_bridge.setdefault((t, marker), {})[cam] = xi

    accs: dict[PairKey, PairAccumulator] = {}
    for (t, marker) in sorted(by_bridge):
        cams = by_bridge[(t, marker)]
        for i, j in combinations(sorted(cams), 2):
            key = PairKey(i, j, CAMERA_PAIR)
            acc = accs.setdefault(key, PairAccumulator(key))
            acc.samples.extend(camera_pair_samples(cams[i], cams[j], (t, marker)))
    _finalize(accs, max_samples_per_pair, seed)
    return accs


def collect_marker_pairs(
    candidate_sets: dict[tuple[int, int, int], CandidateSet],
    max_samples_per_pair: int | None = None,
    seed: int = 0,
) -> dict[PairKey, PairAccumulator]:
    """Accumulate marker-pair samples from per-detection candidate sets.

    For the pair (a, b) with a < b the stored transform maps marker-b
    coordinates to marker-a coordinates, matching the graph edge convention.
    """
    by_bridge: dict[tuple[int, int], dict[int, CandidateSet]] = {}
    for (t, cam, marker), xi in candidate_sets.items():
        if len(xi) == 0:
            continue
        by_bridge.setdefault((t, cam), {})[marker] = xi

    accs: dict[PairKey, PairAccumulator] = {}
    for (t, cam) in sorted(by_bridge):
        markers = by_bridge[(t, cam)]
        for a, b in combinations(sorted(markers), 2):
            key = PairKey(a, b, MARKER_PAIR)
            acc = accs.setdefault(key, PairAccumulator(key))
            # b -> a transform: marker_pair_samples maps its first argument's
            # marker into its second argument's frame
            acc.samples.extend(marker_pair_samples(markers[b], markers[a], (t, cam)))
    _finalize(accs, max_samples_per_pair, seed)
    return accs


def _finalize(
    accs: dict[PairKey, PairAccumulator],
    max_samples_per_pair: int | None,
    seed: int,
) -> None:
    rng = np.random.default_rng(seed)
    for key in sorted(accs):
        accs[key].canonicalize()
        if max_samples_per_pair is not None:
            _subsample(accs[key], max_samples_per_pair, rng)
