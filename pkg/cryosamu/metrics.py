"""
Map quality metrics: real-space correlations over the whole box, around atoms
and over the highest-density voxels, Fourier shell correlation and
per-residue real-space correlation against a model.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging
import math

import numpy as np
from scipy import fft
from scipy.spatial import cKDTree

from .constants import (
    DEFAULT_ATOM_VOLUME,
    DEFAULT_PEAK_FRACTION,
    DEFAULT_RSCC_MIN_SUPPORT,
    DEFAULT_RSCC_THRESHOLD,
    FSC_THRESHOLD,
)
from .lib import MetricsError, format_table
from .mapio import DensityMap
from .simulate import SimParams, residue_density, simulate_map
from .structure import ProteinStructure

logger = logging.getLogger(__name__)

RSCC_REFERENCES = ("model", "residue")


def _check_grids(a: DensityMap, b: DensityMap):
    if not a.same_grid(b):
        raise MetricsError(
            f"Maps are on different grids: {a.dims} @ {a.voxel_size} from {a.origin} "
            f"vs {b.dims} @ {b.voxel_size} from {b.origin}")


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise MetricsError(f"Cannot correlate {a.size} values with {b.size}")
    if a.size < 2:
        raise MetricsError(f"Need at least 2 points to correlate, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise MetricsError("Zero variance in one of the inputs")
    return float(np.clip(np.dot(da, db) / math.sqrt(saa * sbb), -1.0, 1.0))


# ############################ Real-space CCs ############################### #

@dataclass
class CcReport:
    cc_box: float
    cc_peaks: float
    cc_volume: Optional[float] = None
    n_points: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cc_box": self.cc_box,
            "cc_volume": self.cc_volume,
            "cc_peaks": self.cc_peaks,
            "n_points": dict(self.n_points),
        }

    def to_text(self) -> str:
        rows = [[name, getattr(self, name), self.n_points.get(name)]
                for name in ("cc_box", "cc_volume", "cc_peaks")]
        return format_table(rows, ["metric", "value", "points"])


def cc_box(map_a: DensityMap, map_b: DensityMap) -> float:
    _check_grids(map_a, map_b)
    return pearson(map_a.data, map_b.data)


def _near_atoms(grid: DensityMap, structure: ProteinStructure, radius: float) -> np.ndarray:
    """Flat (Z, Y, X) indices of grid points within `radius` of any atom."""
    coords = structure.coordinates()
    lo, hi = grid.extent()
    inside = np.all((coords >= lo - radius) & (coords <= hi + radius), axis=1)
    if not inside.any():
        raise MetricsError(f"{structure.source_id}: no atoms inside the map")

    zz, yy, xx = np.meshgrid(*(grid.grid_coordinates(a) for a in (2, 1, 0)), indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    distance, _ = cKDTree(coords[inside]).query(points, k=1, distance_upper_bound=radius)
    return np.flatnonzero(np.isfinite(distance))


def cc_volume(exp_map: DensityMap, model_map: DensityMap, structure: ProteinStructure,
              radius: float, v_atom: float = DEFAULT_ATOM_VOLUME) -> Tuple[float, int]:
    """
    Correlate over the N = round(n_atoms * v_atom / voxel_volume) points of
    highest model density lying within `radius` of an atom centre.
    Returns the correlation and the number of points used.
    """
    _check_grids(exp_map, model_map)
    n = int(round(structure.n_atoms * v_atom / exp_map.voxel_volume))
    if n < 2:
        raise MetricsError(f"cc_volume would select {n} points; need at least 2")

    candidates = _near_atoms(exp_map, structure, radius)
    model = model_map.data.ravel()
    if candidates.size < n:
        logger.warning(f"Only {candidates.size} grid points near atoms, "
                       f"fewer than the {n} requested")
    order = np.argsort(-model[candidates], kind="stable")
    chosen = candidates[order[:n]]
    return pearson(exp_map.data.ravel()[chosen], model[chosen]), int(chosen.size)


def _top(values: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-values, kind="stable")[:k]


def cc_peaks(map_a: DensityMap, map_b: DensityMap,
             fraction: float = DEFAULT_PEAK_FRACTION) -> Tuple[float, int]:
    """Correlate over the union of the top ceil(fraction * V) voxels of either map."""
    _check_grids(map_a, map_b)
    if not 0 < fraction <= 1:
        raise MetricsError(f"Peak fraction must be in (0, 1], got {fraction}")
    a, b = map_a.data.ravel(), map_b.data.ravel()
    k = int(math.ceil(fraction * a.size))
    union = np.union1d(_top(a, k), _top(b, k))
    if union.size < 2:
        raise MetricsError(f"Peak union has {union.size} points; need at least 2")
    return pearson(a[union], b[union]), int(union.size)


def cc_report(exp_map: DensityMap, ref_map: DensityMap,
              structure: Optional[ProteinStructure] = None,
              params: Optional[SimParams] = None,
              fraction: float = DEFAULT_PEAK_FRACTION,
              v_atom: float = DEFAULT_ATOM_VOLUME) -> CcReport:
    """All three CCs; cc_volume only when a structure (and its params) is given."""
    peaks, n_peaks = cc_peaks(exp_map, ref_map, fraction)
    report = CcReport(
        cc_box=cc_box(exp_map, ref_map),
        cc_peaks=peaks,
        n_points={"cc_box": int(exp_map.data.size), "cc_peaks": n_peaks},
    )
    if structure is not None and params is not None:
        report.cc_volume, report.n_points["cc_volume"] = cc_volume(
            exp_map, ref_map, structure, params.cutoff_radius, v_atom)
    return report


# ################################## FSC #################################### #

@dataclass
class FscCurve:
    shell_centers: np.ndarray
    fsc: np.ndarray
    fsc05: float
    crossed: bool
    at_nyquist: bool
    voxel_size: float

    def to_dict(self) -> dict:
        return {
            "fsc05": self.fsc05,
            "crossed": self.crossed,
            "at_nyquist": self.at_nyquist,
            "voxel_size": self.voxel_size,
            "shells": [
                {"frequency": float(f), "fsc": None if np.isnan(c) else float(c)}
                for f, c in zip(self.shell_centers, self.fsc)
            ],
        }

    def to_text(self) -> str:
        rows = [[i, float(f), float(c)]
                for i, (f, c) in enumerate(zip(self.shell_centers, self.fsc))]
        flag = " (no crossing, Nyquist)" if self.at_nyquist else ""
        return (format_table(rows, ["shell", "1/A", "fsc"])
                + f"FSC05: {self.fsc05:.4f} A{flag}\n")


def _cube(data: np.ndarray, n: int) -> np.ndarray:
    if data.shape == (n, n, n):
        return np.asarray(data, dtype=np.float64)
    out = np.zeros((n, n, n), dtype=np.float64)
    out[:data.shape[0], :data.shape[1], :data.shape[2]] = data
    return out


def _shell_index(n: int) -> np.ndarray:
    f = fft.fftfreq(n) * n
    fz, fy, fx = np.meshgrid(f, f, f, indexing="ij")
    return np.rint(np.sqrt(fx ** 2 + fy ** 2 + fz ** 2)).astype(np.int64)


def fsc(map_a: DensityMap, map_b: DensityMap) -> FscCurve:
    """
    Unmasked FSC in shells one frequency sample wide. Non-cubic maps are
    zero-padded to the smallest enclosing cube of even edge, so the last shell
    sits at Nyquist. The DC shell is reported but
    never counts as the 0.5 crossing.
    """
    _check_grids(map_a, map_b)
    if not np.allclose(map_a.voxel_size, map_a.voxel_size[0]):
        raise MetricsError(f"FSC needs isotropic voxels, got {map_a.voxel_size}")
    voxel = map_a.voxel_size[0]
    n = max(map_a.shape)
    n += n % 2
    if n < 2:
        raise MetricsError("FSC needs at least two voxels per axis")

    Fa = fft.fftn(_cube(map_a.data, n))
    Fb = fft.fftn(_cube(map_b.data, n))
    shells = _shell_index(n).ravel()
    n_shells = n // 2 + 1
    keep = shells < n_shells
    shells = shells[keep]
    Fa, Fb = Fa.ravel()[keep], Fb.ravel()[keep]

    cross = np.bincount(shells, weights=np.real(Fa * np.conj(Fb)), minlength=n_shells)
    pa = np.bincount(shells, weights=np.abs(Fa) ** 2, minlength=n_shells)
    pb = np.bincount(shells, weights=np.abs(Fb) ** 2, minlength=n_shells)
    denom = np.sqrt(pa * pb)
    with np.errstate(invalid="ignore", divide="ignore"):
        curve = np.where(denom > 0, cross / np.where(denom > 0, denom, 1.0), 0.0)
    curve = np.clip(curve, -1.0, 1.0)
    # a shell with no power in either map has no correlation to report
    curve[(pa == 0) & (pb == 0)] = np.nan
    freqs = np.arange(n_shells) / (n * voxel)

    fsc05, crossed = 1.0 / freqs[-1], False
    previous = None
    for i in range(1, n_shells):
        if np.isnan(curve[i]):
            continue
        if curve[i] < FSC_THRESHOLD:
            crossed = True
            if previous is None:
                f = freqs[i]
            else:
                t = (curve[previous] - FSC_THRESHOLD) / (curve[previous] - curve[i])
                f = freqs[previous] + t * (freqs[i] - freqs[previous])
            fsc05 = 1.0 / f
            break
        previous = i

    return FscCurve(
        shell_centers=freqs,
        fsc=curve,
        fsc05=float(fsc05),
        crossed=crossed,
        at_nyquist=not crossed,
        voxel_size=float(voxel),
    )


# ################################## RSCC ################################### #

@dataclass
class ResidueScore:
    chain: str
    seq: int
    icode: str
    name: str
    rscc: Optional[float]
    n_support: int

    @property
    def key(self) -> Tuple[str, int, str]:
        return self.chain, self.seq, self.icode


@dataclass
class RsccReport:
    residues: List[ResidueScore]
    reference: str = "model"

    def chain_means(self) -> "OrderedDict[str, Optional[float]]":
        out = OrderedDict()
        for score in self.residues:
            out.setdefault(score.chain, [])
            if score.rscc is not None:
                out[score.chain].append(score.rscc)
        return OrderedDict(
            (chain, float(np.mean(v)) if v else None) for chain, v in out.items())

    @property
    def absent(self) -> List[ResidueScore]:
        return [s for s in self.residues if s.rscc is None]

    def improved_fraction(self, baseline: "RsccReport") -> float:
        """Share of residues scored in both reports whose RSCC went up (ties do not count)."""
        before = {s.key: s.rscc for s in baseline.residues if s.rscc is not None}
        pairs = [(s.rscc, before[s.key]) for s in self.residues
                 if s.rscc is not None and s.key in before]
        if not pairs:
            raise MetricsError("No residues scored in both reports")
        return sum(after > prior for after, prior in pairs) / len(pairs)

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "residues": [
                {"chain": s.chain, "seq": s.seq, "icode": s.icode, "name": s.name,
                 "rscc": s.rscc, "n_support": s.n_support}
                for s in self.residues
            ],
            "chain_means": dict(self.chain_means()),
            "n_absent": len(self.absent),
        }

    def to_text(self) -> str:
        rows = [[s.chain, f"{s.seq}{s.icode}", s.name, s.rscc, s.n_support]
                for s in self.residues]
        text = format_table(rows, ["chain", "residue", "name", "rscc", "support"])
        means = [[chain, mean] for chain, mean in self.chain_means().items()]
        return text + "\n" + format_table(means, ["chain", "mean rscc"])


def rscc(exp_map: DensityMap, structure: ProteinStructure, params: SimParams,
         threshold: float = DEFAULT_RSCC_THRESHOLD,
         min_support: int = DEFAULT_RSCC_MIN_SUPPORT,
         reference: str = "model") -> RsccReport:
    """
    Per-residue correlation over the voxels where the residue's own simulated
    density exceeds `threshold` of its peak. The map is compared with the
    whole-model simulation ("model") or with the residue density alone
    ("residue"). Residues with fewer than `min_support` voxels are absent.
    """
    if reference not in RSCC_REFERENCES:
        raise MetricsError(f"reference must be one of {RSCC_REFERENCES}, got '{reference}'")
    exp = np.asarray(exp_map.data, dtype=np.float64)
    model = None
    if reference == "model":
        model = simulate_map(structure, params, grid=exp_map).map.data

    scores = []
    for chain_id, residue in structure.residues():
        density = residue_density(structure, chain_id, residue.seq_id, params,
                                  exp_map, residue.icode).data
        peak = density.max()
        support = density > threshold * peak if peak > 0 else np.zeros(density.shape, bool)
        n_support = int(support.sum())
        value = None
        if n_support >= min_support:
            ref = model if model is not None else density
            try:
                value = pearson(exp[support], ref[support])
            except MetricsError as e:
                logger.warning(f"RSCC undefined for {chain_id}:{residue.seq_id}: {e}")
        scores.append(ResidueScore(chain=chain_id, seq=residue.seq_id, icode=residue.icode,
                                   name=residue.name, rscc=value, n_support=n_support))

    report = RsccReport(residues=scores, reference=reference)
    if report.absent:
        logger.warning(f"{len(report.absent)} of {len(scores)} residues have no RSCC "
                       f"(support below {min_support} voxels)")
    return report
