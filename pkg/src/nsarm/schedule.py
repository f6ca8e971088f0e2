"""Scale schedules: the ordered latent resolutions and the preliminary split."""
from __future__ import annotations

from dataclasses import dataclass, field

# Pixel side lengths of the 13-step 1024 schedule; 256 is the 4x-SR LR side.
INFINITY_1024_PIXEL_SIDES = (16, 32, 64, 96, 128, 192, 256, 320, 384, 512, 640, 768, 1024)

# preset -> (pixel sides, tokenizer downsample factor, k_t, d)
_PRESETS = {
    1024: (INFINITY_1024_PIXEL_SIDES, 16, 7, 32),
    64: ((4, 8, 16, 24, 32, 48, 64), 4, 3, 16),
    32: ((4, 8, 16, 32), 4, 2, 8),
}


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleSchedule:
    scales: tuple[tuple[int, int], ...]
    k_t: int
    d: int = 16
    factor: int = 4
    sr_factor: int = 4
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple((int(h), int(w)) for h, w in self.scales))

    @property
    def K(self) -> int:
        return len(self.scales)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.scales[-1]

    @property
    def image_shape(self) -> tuple[int, int]:
        h, w = self.latent_shape
        return h * self.factor, w * self.factor

    @property
    def lr_shape(self) -> tuple[int, int]:
        h, w = self.image_shape
        return h // self.sr_factor, w // self.sr_factor

    @property
    def pixel_scales(self) -> tuple[tuple[int, int], ...]:
        return tuple((h * self.factor, w * self.factor) for h, w in self.scales)

    def scale(self, k: int) -> tuple[int, int]:
        """1-based scale lookup."""
        if not 1 <= k <= self.K:
            raise ScheduleError(f"scale index {k} outside 1..{self.K}")
        return self.scales[k - 1]

    def to_config(self) -> dict:
        return {
            "scales": ",".join(f"{h}x{w}" for h, w in self.scales),
            "k_t": self.k_t,
            "d": self.d,
            "factor": self.factor,
            "sr_factor": self.sr_factor,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ScaleSchedule":
        scales = tuple(tuple(int(v) for v in s.split("x")) for s in str(cfg["scales"]).split(","))
        return cls(
            scales=scales,
            k_t=int(cfg["k_t"]),
            d=int(cfg["d"]),
            factor=int(cfg["factor"]),
            sr_factor=int(cfg.get("sr_factor", 4)),
        )


def infinity_default_schedule(target_side: int, d: int | None = None) -> ScaleSchedule:
    """Preset schedule for a square target image of ``target_side`` pixels.

    ``1024`` is the 13-scale schedule with a 16x tokenizer (latent side 64) and
    ``k_t = 7``; ``64`` is the desk preset (latent sides 1..16, ``k_t = 3``); ``32``
    is a micro preset used for fast tests.
    """
    if target_side not in _PRESETS:
        raise ScheduleError(f"unsupported preset {target_side}; choose from {sorted(_PRESETS)}")
    sides, factor, k_t, default_d = _PRESETS[target_side]
    scales = tuple((s // factor, s // factor) for s in sides)
    sched = ScaleSchedule(scales, k_t, d or default_d, factor, 4, name=f"preset{target_side}")
    validate(sched, sched.latent_shape)
    return sched


def proportional_schedule(base: ScaleSchedule, height: int, width: int) -> ScaleSchedule:
    """Rescale a square schedule to a ``height x width`` latent, rounding each side to >= 1.

    Consecutive scales that collapse onto each other after rounding are dropped;
    ``k_t`` is moved to the scale matching the LR latent shape.
    """
    side = base.latent_shape[0]
    scales: list[tuple[int, int]] = []
    for h, _ in base.scales:
        s = (max(1, round(h * height / side)), max(1, round(h * width / side)))
        if scales and s == scales[-1]:
            continue
        scales.append(s)
    scales[-1] = (height, width)
    lr = (height // base.sr_factor, width // base.sr_factor)
    k_t = next((i + 1 for i, s in enumerate(scales) if s == lr), None)
    if k_t is None:
        raise ScheduleError(f"no scale matches the LR latent {lr} for shape {(height, width)}")
    sched = ScaleSchedule(tuple(scales), k_t, base.d, base.factor, base.sr_factor)
    validate(sched, (height, width))
    return sched


def validate(schedule: ScaleSchedule, latent_shape: tuple[int, int]) -> None:
    """Raise ``ScheduleError`` unless ``schedule`` is consistent with ``latent_shape``."""
    scales = schedule.scales
    if not scales:
        raise ScheduleError("empty schedule")
    for h, w in scales:
        if h < 1 or w < 1:
            raise ScheduleError(f"non-positive scale {(h, w)}")
    for (h0, w0), (h1, w1) in zip(scales, scales[1:]):
        if h1 < h0 or w1 < w0:
            raise ScheduleError(f"decreasing scale {(h0, w0)} -> {(h1, w1)}")
        if (h1, w1) == (h0, w0):
            raise ScheduleError(f"repeated scale {(h0, w0)}")
    if tuple(scales[-1]) != tuple(latent_shape):
        raise ScheduleError(f"last scale {scales[-1]} does not match latent {tuple(latent_shape)}")
    if len(scales) > 1 and not 1 <= schedule.k_t < len(scales):
        raise ScheduleError(f"k_t={schedule.k_t} outside 1..{len(scales) - 1}")
    if schedule.d < 1:
        raise ScheduleError("latent dim d must be >= 1")


def token_count(schedule: ScaleSchedule, from_k: int, to_k: int) -> int:
    """Number of tokens in scales ``from_k..to_k`` (1-based, inclusive)."""
    if not 1 <= from_k <= to_k <= schedule.K:
        raise ScheduleError(f"range {from_k}..{to_k} outside 1..{schedule.K}")
    return sum(h * w for h, w in schedule.scales[from_k - 1 : to_k])
