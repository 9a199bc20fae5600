"""Pipeline parameter bundle with the published defaults."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np


@dataclass
class PipelineConfig:
    # reference normalization
    detector_size: int = 120          # detector template crop, px
    crop_size: int = 128              # selector/refiner crop, px
    diameter_margin: float = 1.05     # safety margin when the frame is estimated

    # detection
    n_scales: int = 5                 # pyramid levels, centered on scale 1
    scale_factor: float = float(np.sqrt(2.0))
    n_detector_templates: int = 32    # farthest-point-sampled views
    min_score: float = 0.2
    crop_margin: float = 1.0          # query crop side = margin * box size

    # viewpoint selection
    n_selector_views: int = 64
    n_angles: int = 5
    angle_lo: float = float(-np.pi / 2.0)
    angle_hi: float = float(np.pi / 2.0)

    # refinement
    n_neighbors: int = 6
    iterations: int = 3
    volume_size: int = 32             # vertices per axis over [-1, 1]^3
    max_rot_residual: float = float(np.deg2rad(15.0))
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    offset_range: float = 0.3         # |txy| bound, camera units at the object
    search_budget: int = 1500         # objective evaluations per iteration
    weight_eps: float = 1e-3          # variance floor in the volume weights
    min_valid_fraction: float = 0.01  # below this the volume is unusable

    def validate(self) -> None:
        if self.detector_size < 16 or self.crop_size < 16:
            raise ValueError("crop sizes must be at least 16 px")
        if self.n_scales < 1 or self.scale_factor <= 1.0:
            raise ValueError("need n_scales >= 1 and scale_factor > 1")
        if not (0.0 <= self.min_score < 1.0):
            raise ValueError("min_score must be in [0, 1)")
        if self.n_angles < 1 or self.angle_hi <= self.angle_lo:
            raise ValueError("angle bank is empty or reversed")
        if self.n_neighbors < 1 or self.iterations < 0:
            raise ValueError("n_neighbors >= 1 and iterations >= 0 required")
        if not (0.0 < self.scale_lo <= 1.0 <= self.scale_hi):
            raise ValueError("scale range must bracket 1")
        if self.max_rot_residual <= 0 or self.offset_range <= 0:
            raise ValueError("residual bounds must be positive")
        if self.diameter_margin < 1.0:
            raise ValueError("diameter margin must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def angles(self) -> np.ndarray:
        return np.linspace(self.angle_lo, self.angle_hi, self.n_angles)
