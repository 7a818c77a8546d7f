from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class SynthConfig(BaseModel):
    seed: int = 0
    n_countries: int = Field(5, ge=1)
    deposits_per_country: int = Field(40, ge=1)

    # Status mix; the remainder becomes NoLongerActive
    share_opening: float = Field(0.35, ge=0, le=1)
    share_closing: float = Field(0.1, ge=0, le=1)
    share_continuous: float = Field(0.15, ge=0, le=1)
    share_not_yet: float = Field(0.3, ge=0, le=1)
    share_large: float = Field(0.4, ge=0, le=1)
    # Fraction of NotYetOpened deposits discovered before the study window
    share_old_discovery: float = Field(0.0, ge=0, le=1)

    # Opening happens in a first active period drawn from this inclusive range
    opening_periods: Tuple[int, int] = (2, 12)
    closing_periods: Tuple[int, int] = (2, 11)

    # Treatment effects, log-points (wealth: raw index units)
    att_urban: float = 0.25
    att_crop: float = 0.0
    att_wealth: float = 0.0
    att_closing: float = 0.0
    dynamic_profile: Optional[Dict[int, float]] = None
    far_effect_ratio: float = 1.0
    pre_trend: float = 0.0

    base_log_urban: float = -3.0
    base_log_crop: float = -1.2
    tile_sd: float = 0.5
    shock_sd: float = 0.1
    noise_sd: float = Field(0.5, ge=0)

    conflict_base_p: float = Field(0.003, ge=0, le=1)
    conflict_treat_uplift_autocracy: float = Field(0.006, ge=0, le=1)
    conflict_treat_uplift_democracy: float = Field(0.0, ge=0, le=1)
    democracy_share: float = Field(0.5, ge=0, le=1)

    # Deposit lattice spacing inside a country block, degrees
    deposit_spacing_deg: float = Field(1.0, gt=0)
    write_masks: bool = False
    mine_pixel_share: float = Field(0.05, ge=0, lt=1)

    @field_validator("dynamic_profile", mode="before")
    @classmethod
    def int_keys(cls, v):
        if v is None:
            return v
        return {int(k): float(val) for k, val in dict(v).items()}

    @model_validator(mode="after")
    def check_shares(self) -> "SynthConfig":
        total = self.share_opening + self.share_closing + self.share_continuous + self.share_not_yet
        if total > 1.0 + 1e-12:
            raise ValueError(f"status shares sum to {total:.4f} > 1")
        for name, (lo, hi), bounds in (
            ("opening_periods", self.opening_periods, (2, 12)),
            ("closing_periods", self.closing_periods, (1, 11)),
        ):
            if not (bounds[0] <= lo <= hi <= bounds[1]):
                raise ValueError(f"{name} must lie within {bounds}, got {(lo, hi)}")
        if self.conflict_base_p + max(self.conflict_treat_uplift_autocracy, self.conflict_treat_uplift_democracy) > 1:
            raise ValueError("conflict probabilities exceed 1")
        return self

    def effect_at(self, rel_time: int) -> float:
        """Urban effect at a post-treatment relative period"""
        if rel_time < 1:
            return 0.0
        if self.dynamic_profile is not None:
            return self.dynamic_profile.get(rel_time, 0.0)
        return self.att_urban


class GroundTruth(BaseModel):
    event_periods: Dict[str, Optional[int]]
    att: Dict[str, float]
    profile: Dict[int, float]
    conflict_uplift_autocracy: float
    conflict_uplift_democracy: float

    def rows(self) -> List[Dict[str, object]]:
        out: List[Dict[str, object]] = []
        for outcome, value in sorted(self.att.items()):
            out.append({"kind": "att", "key": outcome, "value": value})
        for t, value in sorted(self.profile.items()):
            out.append({"kind": "profile", "key": str(t), "value": value})
        out.append({"kind": "conflict_uplift", "key": "autocracy", "value": self.conflict_uplift_autocracy})
        out.append({"kind": "conflict_uplift", "key": "democracy", "value": self.conflict_uplift_democracy})
        for deposit_id, period in sorted(self.event_periods.items()):
            out.append({"kind": "event_period", "key": deposit_id, "value": period})
        return out
