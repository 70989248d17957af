"""Recursive sampling plans for long videos.

A video of length L = (N-1)^K + 1 is produced by one keyframe call at the
top level (stride (N-1)^(K-1) from frame 0) followed by interpolation calls
level by level, each filling the N-2 frames between an adjacent keyframe
pair. The sequential baseline chains keyframe calls at stride 1. Dependency
depth (longest chain of calls from frame 0) is K for the recursive plan and
(L-1)/(N-1) for the sequential one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionMode, interpolation_mode, keyframe_mode
from .errors import ConfigError
from .kernel import Rng


@dataclass(frozen=True)
class ModelCall:
    """One window the model denoises: which frames it generates and which
    already-known frames it references."""

    level: int
    mode: AttentionMode
    generated_indices: tuple[int, ...]
    reference_indices: tuple[int, ...]

    def __post_init__(self):
        gen, ref = self.generated_indices, self.reference_indices
        if set(gen) & set(ref):
            raise ConfigError(f"generated {gen} and reference {ref} overlap")
        if list(gen) != sorted(set(gen)) or list(ref) != sorted(set(ref)):
            raise ConfigError("indices must be strictly increasing")
        expected_refs = 1 if self.mode.kind == "keyframe" else 2
        if len(ref) != expected_refs:
            raise ConfigError(f"{self.mode.kind} call needs {expected_refs} references, got {ref}")

    @property
    def window(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.generated_indices) | set(self.reference_indices)))


@dataclass(frozen=True)
class SamplingPlan:
    n: int
    k: int
    length: int
    calls: tuple[ModelCall, ...]


def video_length(n: int, k: int) -> int:
    return (n - 1) ** k + 1


def build_schedule(n: int, k: int) -> SamplingPlan:
    """Keyframe call at level K, then interpolation per segment down to level 1."""
    if n < 3:
        raise ConfigError(f"frames per call must be >= 3, got {n}")
    if k < 1:
        raise ConfigError(f"levels must be >= 1, got {k}")
    length = video_length(n, k)
    calls = []
    top_stride = (n - 1) ** (k - 1)
    keyframes = tuple(top_stride * j for j in range(1, n))
    calls.append(ModelCall(k, keyframe_mode(), keyframes, (0,)))
    for level in range(k - 1, 0, -1):
        outer = (n - 1) ** level
        stride = (n - 1) ** (level - 1)
        for a in range(0, length - 1, outer):
            b = a + outer
            gen = tuple(a + stride * j for j in range(1, n - 1))
            calls.append(ModelCall(level, interpolation_mode(level), gen, (a, b)))
    return SamplingPlan(n, k, length, tuple(calls))


def call_count(n: int, k: int) -> int:
    """1 + sum_{k'=1}^{K-1} (N-1)^(K-k')."""
    if n < 3 or k < 1:
        raise ConfigError(f"invalid n={n}, k={k}")
    return 1 + sum((n - 1) ** (k - kp) for kp in range(1, k))


def sequential_schedule(n: int, length: int) -> SamplingPlan:
    """Chained keyframe-mode calls at stride 1, each referencing the previous
    call's last generated frame."""
    if n < 3:
        raise ConfigError(f"frames per call must be >= 3, got {n}")
    if (length - 1) % (n - 1) != 0:
        raise ConfigError(f"length {length} - 1 not divisible by {n - 1}")
    calls = []
    for j in range((length - 1) // (n - 1)):
        start = j * (n - 1)
        gen = tuple(start + i for i in range(1, n))
        calls.append(ModelCall(1, keyframe_mode(), gen, (start,)))
    return SamplingPlan(n, 1, length, tuple(calls))


def dependency_depth(plan: SamplingPlan) -> int:
    """Longest reference chain from frame 0 to any generated frame, in calls."""
    depth = {0: 0}
    best = 0
    for call in plan.calls:
        d = 1 + max(depth[r] for r in call.reference_indices)
        for g in call.generated_indices:
            depth[g] = d
        best = max(best, d)
    return best


def validate_plan(plan: SamplingPlan) -> None:
    """Coverage, uniqueness, reference availability, and per-call sizes."""
    seen: dict[int, int] = {}
    known = {0}
    for ci, call in enumerate(plan.calls):
        expected_gen = plan.n - 1 if call.mode.kind == "keyframe" else plan.n - 2
        if len(call.generated_indices) != expected_gen:
            raise ConfigError(f"call {ci} generates {len(call.generated_indices)}, expected {expected_gen}")
        for r in call.reference_indices:
            if r not in known:
                raise ConfigError(f"call {ci} references frame {r} before it exists")
        for g in call.generated_indices:
            if g in seen:
                raise ConfigError(f"frame {g} generated twice (calls {seen[g]} and {ci})")
            if not 1 <= g < plan.length:
                raise ConfigError(f"generated index {g} outside [1, {plan.length})")
            seen[g] = ci
        known.update(call.generated_indices)
    missing = set(range(1, plan.length)) - set(seen)
    if missing:
        raise ConfigError(f"frames never generated: {sorted(missing)[:8]}...")


def format_plan(plan: SamplingPlan) -> str:
    """One line per call: `level k | mode | gen=[...] | ref=[...]`."""
    lines = []
    for call in plan.calls:
        gen = list(call.generated_indices)
        ref = list(call.reference_indices)
        lines.append(f"level {call.level} | {call.mode.kind} | gen={gen} | ref={ref}")
    return "\n".join(lines)


def execute(plan: SamplingPlan, model, conditions, rng: Rng) -> np.ndarray:
    """Run every call in plan order, wiring generated frames into later
    calls' reference slots. Deterministic per seed.

    `model` must expose sample_window(call, window, references, conditions,
    rng) -> frames [len(window), 3, h, w]; `conditions` must cover all
    plan.length frames (len(conditions) == L) and may carry a
    .reference_rgb for frame 0. Without one, frame 0 is taken from the
    first keyframe call's slot-0 output (reference slot zero-filled).
    """
    validate_plan(plan)
    if len(conditions) != plan.length:
        raise ConfigError(f"{len(conditions)} condition frames, plan needs {plan.length}")
    frames: dict[int, np.ndarray] = {}
    ref0 = getattr(conditions, "reference_rgb", None)
    if ref0 is not None:
        frames[0] = np.asarray(ref0)
    for call in plan.calls:
        for r in call.reference_indices:
            if r not in frames and not (r == 0 and ref0 is None and call is plan.calls[0]):
                raise ConfigError(f"dependency violation: frame {r} not yet generated")
        window = call.window
        references = {r: frames[r] for r in call.reference_indices if r in frames}
        out = model.sample_window(call, window, references, conditions, rng.spawn())
        out = np.asarray(out)
        if out.shape[0] != len(window):
            raise ConfigError(f"model returned {out.shape[0]} frames for a {len(window)}-frame window")
        for slot, idx in enumerate(window):
            if idx in call.generated_indices or idx not in frames:
                frames[idx] = out[slot]
    video = np.stack([frames[i] for i in range(plan.length)])
    return video
