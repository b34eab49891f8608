"""The 13 manipulation modes and branch-stack construction.

Modes 0-7 are the dihedral group of the square: a counter-clockwise
rotation by k quarter turns optionally followed by a vertical mirror
(row-order reversal). Modes 8-12 remove DCT coefficient bands (see freq).
A branch is one manipulate -> denoise -> realign path; a stack collects
the realigned branches for the fusion model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .freq import FREQ_MODE_SPECS, FrequencyMaskSpec, apply_frequency_mode
from .image import as_image, clip_unit

DIHEDRAL_KIND = "dihedral"
FREQUENCY_KIND = "frequency"

# mode id -> (quarter turns CCW, vertical mirror afterwards)
_DIHEDRAL_ACTIONS: dict[int, tuple[int, bool]] = {
    0: (0, False),  # identity
    1: (1, True),   # rotate 90 + vertical mirror
    2: (0, True),   # vertical mirror
    3: (3, False),  # rotate 270
    4: (2, True),   # rotate 180 + vertical mirror
    5: (1, False),  # rotate 90
    6: (2, False),  # rotate 180
    7: (3, True),   # rotate 270 + vertical mirror
}


@dataclass(frozen=True)
class ManipulationMode:
    id: int
    kind: str
    rotations: int = 0
    mirror: bool = False
    mask_spec: FrequencyMaskSpec | None = None


def _build_registry() -> dict[int, ManipulationMode]:
    modes = {}
    for mid, (k, m) in _DIHEDRAL_ACTIONS.items():
        modes[mid] = ManipulationMode(id=mid, kind=DIHEDRAL_KIND, rotations=k, mirror=m)
    for mid, spec in FREQ_MODE_SPECS.items():
        modes[mid] = ManipulationMode(id=mid, kind=FREQUENCY_KIND, mask_spec=spec)
    return modes


MODES: dict[int, ManipulationMode] = _build_registry()
ALL_MODE_IDS: tuple[int, ...] = tuple(sorted(MODES))
DIHEDRAL_MODE_IDS: tuple[int, ...] = tuple(range(8))
FREQUENCY_MODE_IDS: tuple[int, ...] = tuple(range(8, 13))


def get_mode(mode) -> ManipulationMode:
    if isinstance(mode, ManipulationMode):
        return mode
    try:
        return MODES[int(mode)]
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"unknown manipulation mode {mode!r}") from None


def apply_dihedral(image, mode) -> np.ndarray:
    """Rotate CCW by the mode's quarter turns, then mirror rows if asked."""
    m = get_mode(mode)
    if m.kind != DIHEDRAL_KIND:
        raise ValueError(f"mode {m.id} is not a dihedral mode")
    out = np.rot90(as_image(image), m.rotations)
    if m.mirror:
        out = np.flipud(out)
    return np.ascontiguousarray(out)


def invert_dihedral(image, mode) -> np.ndarray:
    """Undo apply_dihedral: mirror first (involution), then rotate back."""
    m = get_mode(mode)
    if m.kind != DIHEDRAL_KIND:
        raise ValueError(f"mode {m.id} is not a dihedral mode")
    out = as_image(image)
    if m.mirror:
        out = np.flipud(out)
    return np.ascontiguousarray(np.rot90(out, -m.rotations))


def manipulate(noisy, mode) -> np.ndarray:
    """Transform a noisy image for one branch; output is clipped to [0, 1]
    because it flows straight into a denoiser."""
    m = get_mode(mode)
    if m.kind == DIHEDRAL_KIND:
        return clip_unit(apply_dihedral(noisy, m))
    return apply_frequency_mode(noisy, m)  # clips internally


def realign(denoised, mode) -> np.ndarray:
    """Map a denoised branch back into the reference pixel frame.

    Dihedral branches are inverse-transformed; frequency branches are
    already pixel-aligned (the mask is not invertible) and pass through.
    """
    m = get_mode(mode)
    if m.kind == DIHEDRAL_KIND:
        return invert_dihedral(denoised, m)
    return as_image(denoised)


@dataclass
class BranchStack:
    """Realigned denoised branches stacked along axis 0, one per mode,
    in ascending mode-id order."""

    modes: tuple[int, ...]
    images: np.ndarray  # (N, H, W)

    @property
    def n_branches(self) -> int:
        return len(self.modes)

    def branch(self, mode_id: int) -> np.ndarray:
        return self.images[self.modes.index(mode_id)]


def build_branch_stack(noisy, denoiser, modes=ALL_MODE_IDS) -> BranchStack:
    """Run manipulate -> denoise -> realign for every requested mode."""
    ids = [get_mode(m).id for m in modes]
    if not ids:
        raise ValueError("mode list is empty")
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate modes in {ids}")
    ids = sorted(ids)
    img = as_image(noisy, "noisy")
    branches = []
    for mid in ids:
        manipulated = manipulate(img, mid)
        try:
            denoised = denoiser.denoise(manipulated)
        except Exception as exc:
            raise RuntimeError(f"denoiser failed on branch mode {mid}: {exc}") from exc
        denoised = as_image(denoised, f"denoised branch {mid}")
        if denoised.shape != manipulated.shape:
            raise ValueError(
                f"denoiser changed shape on branch {mid}: "
                f"{manipulated.shape} -> {denoised.shape}"
            )
        branches.append(realign(denoised, mid))
    return BranchStack(modes=tuple(ids), images=np.stack(branches, axis=0))


def simple_average(stack: BranchStack) -> np.ndarray:
    """The plain ensemble: per-pixel mean over branches, clipped."""
    if stack.n_branches < 1:
        raise ValueError("stack has no branches")
    return clip_unit(stack.images.mean(axis=0))
