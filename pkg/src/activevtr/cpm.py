"""Camera performance models: kernel-weighted entropy statistics per keyframe and camera."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from .geometry import Pose, translation_distance


@dataclass(frozen=True)
class CPMEntry:
    keyframe: int
    camera: str
    mu: float
    sigma: float
    support: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.support < 1:
            raise ValueError("support must be at least 1")


@dataclass(frozen=True)
class CPMHyperparams:
    d_max: float = 2.0
    l: float = 0.25        # m^2: the kernel divides the squared distance by 2*l
    k: float = 2.0
    sigma_floor: float = 0.0

    def __post_init__(self):
        if self.d_max <= 0 or self.l <= 0 or self.k < 0 or self.sigma_floor < 0:
            raise ValueError("require d_max > 0, l > 0, k >= 0, sigma_floor >= 0")


def kernel(T1: Pose, T2: Pose, l: float) -> float:
    d = translation_distance(T1, T2)
    return float(np.exp(-d * d / (2.0 * l)))


def learn_cpm(map_, hyper: CPMHyperparams) -> Dict[int, Dict[str, CPMEntry]]:
    """Fit (mu, sigma) per keyframe and camera from the teach samples.

    Writes the entries into ``keyframe.cpm`` and returns them keyed by keyframe id.
    """
    if not map_.samples:
        for kf in map_.keyframes:
            kf.cpm = {}
        map_.cpm_hyper = hyper
        return {kf.id: {} for kf in map_.keyframes}
    pos = np.array([s.pose.t for s in map_.samples])
    ent = np.array([s.entropy for s in map_.samples])
    cams = np.array([s.camera for s in map_.samples])
    out = {}
    for kf in map_.keyframes:
        d2 = np.sum((pos - kf.T_MB.t) ** 2, axis=1)
        near = d2 <= hyper.d_max ** 2
        entries = {}
        for cam in sorted(set(cams[near])):
            sel = near & (cams == cam)
            # shifting by the nearest distance rescales every weight by one
            # constant, which cancels in mu and sigma but avoids underflow for tiny l
            w = np.exp(-(d2[sel] - d2[sel].min()) / (2.0 * hyper.l))
            wc = w.sum()
            mu = float(np.sum(ent[sel] * w) / wc)
            sigma = float(np.sqrt(np.sum((ent[sel] - mu) ** 2 * w) / wc))
            entries[str(cam)] = CPMEntry(kf.id, str(cam), mu, max(sigma, hyper.sigma_floor), int(sel.sum()))
        kf.cpm = entries
        out[kf.id] = entries
    map_.cpm_hyper = hyper
    return out


def best_camera(keyframe, exclude: Iterable[str] = ()) -> Optional[str]:
    """Camera with the largest mu at this keyframe; ties go to the smallest tag."""
    skip = set(exclude)
    entries = [e for c, e in keyframe.cpm.items() if c not in skip]
    if not entries:
        return None
    return min(entries, key=lambda e: (-e.mu, e.camera)).camera


def should_switch(current_E: float, entry: CPMEntry, k: float) -> bool:
    return bool(current_E < entry.mu - k * entry.sigma)
