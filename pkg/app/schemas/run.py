import json
from enum import Enum
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.core.errors import ConfigError
from app.schemas.estimation import (
    DEMOCRACY_AUTOCRACY,
    SIZE_BY_REGIME,
    ConflictSplit,
    Design,
    HeterogeneitySpec,
    InteractionMode,
    Interactions,
)
from app.schemas.geo import Band, ProjectionParams
from app.schemas.lifecycle import EventKind, PeriodCalendar
from app.schemas.raster import LogZeroPolicy
from app.schemas.screening import ScreeningOptions
from app.schemas.stacking import ControlRule, Window
from app.schemas.synth import SynthConfig


class Analysis(str, Enum):
    event_study = "event_study"
    did = "did"
    lpm_conflict = "lpm_conflict"


NAMED_INTERACTIONS = {
    "democracy_autocracy": DEMOCRACY_AUTOCRACY,
    "size_by_regime": SIZE_BY_REGIME,
}


class SpecificationEntry(BaseModel):
    name: str = Field(..., pattern=r"^[A-Za-z0-9_\-]+$")
    analysis: Analysis = Analysis.did
    kind: EventKind = EventKind.opening
    design: Design = Design.stacked
    control_rule: ControlRule = ControlRule.not_yet_opened
    outcome: str = "log_urban"
    band: Optional[Band] = None
    # "none", "near_far", a named preset, or a list of category tuples
    interactions: Union[str, List[List[str]]] = "none"
    balanced: bool = False
    split: ConflictSplit = ConflictSplit.pooled
    # Closing events: put t = 0 at the last active period
    centered: bool = True
    # None = on for opening events against NotYetOpened controls, off otherwise
    recent_discoveries: Optional[bool] = None

    @field_validator("interactions")
    @classmethod
    def known_interactions(cls, v):
        if isinstance(v, str) and v not in ("none", "near_far") and v not in NAMED_INTERACTIONS:
            raise ValueError(f"unknown interactions preset {v!r}")
        return v

    @model_validator(mode="after")
    def consistent(self) -> "SpecificationEntry":
        if self.analysis == Analysis.event_study and self.design != Design.stacked:
            raise ValueError("event studies use the stacked design")
        if self.analysis == Analysis.lpm_conflict and self.outcome != "conflict_any":
            self.outcome = "conflict_any"
        if self.kind == EventKind.opening and self.control_rule == ControlRule.continuous:
            raise ValueError("Continuous controls are only used for closing events")
        if self.control_rule == ControlRule.late_treated:
            if self.kind != EventKind.opening:
                raise ValueError("LateTreated controls are only used for opening events")
            if self.design != Design.stacked:
                raise ValueError("LateTreated controls need the stacked design")
        return self

    def resolved_interactions(self) -> Interactions:
        if isinstance(self.interactions, list):
            return HeterogeneitySpec(terms=[tuple(term) for term in self.interactions])
        if self.interactions == "none":
            return InteractionMode.none
        if self.interactions == "near_far":
            return InteractionMode.near_far
        return NAMED_INTERACTIONS[self.interactions]

    @property
    def restrict_recent(self) -> bool:
        if self.recent_discoveries is not None:
            return self.recent_discoveries
        return self.kind == EventKind.opening and self.control_rule == ControlRule.not_yet_opened


def default_specifications() -> List[SpecificationEntry]:
    """The result set of the main tables and figures"""
    specs = [
        SpecificationEntry(name="es_near_log_urban", analysis=Analysis.event_study, band=Band.near, balanced=True),
        SpecificationEntry(name="es_far_log_urban", analysis=Analysis.event_study, band=Band.far, balanced=True),
    ]
    for outcome in ("log_urban", "log_crop", "wealth_z"):
        specs.append(SpecificationEntry(name=f"did_stacked_{outcome}", outcome=outcome, interactions="near_far"))
        specs.append(
            SpecificationEntry(
                name=f"did_ordinary_{outcome}", outcome=outcome, design=Design.ordinary, interactions="near_far"
            )
        )
    specs += [
        SpecificationEntry(
            name="did_regime_log_urban", band=Band.near, interactions="democracy_autocracy"
        ),
        SpecificationEntry(name="did_size_regime_log_urban", band=Band.near, interactions="size_by_regime"),
        SpecificationEntry(
            name="did_late_treated_log_urban", control_rule=ControlRule.late_treated, interactions="near_far"
        ),
        SpecificationEntry(name="lpm_conflict_pooled", analysis=Analysis.lpm_conflict, band=Band.near),
        SpecificationEntry(
            name="lpm_conflict_regime",
            analysis=Analysis.lpm_conflict,
            band=Band.near,
            split=ConflictSplit.democracy_autocracy,
        ),
        SpecificationEntry(
            name="es_closing_continuous",
            analysis=Analysis.event_study,
            kind=EventKind.closing,
            control_rule=ControlRule.continuous,
            band=Band.near,
            balanced=True,
        ),
        SpecificationEntry(
            name="es_closing_not_yet",
            analysis=Analysis.event_study,
            kind=EventKind.closing,
            control_rule=ControlRule.not_yet_opened,
            band=Band.near,
            balanced=True,
        ),
    ]
    return specs


class RunConfig(BaseModel):
    deposits: Path
    country_meta: Path
    output_dir: Path
    outcomes: Optional[Path] = None
    masks_dir: Optional[Path] = None
    tile_measures: Optional[Path] = None
    tile_covariates: Optional[Path] = None

    start_year: int = 1984
    period_length: int = Field(3, ge=1)
    n_periods: int = Field(12, ge=2)

    central_meridian_deg: float = Field(15.0, ge=-180.0, le=180.0)
    sphere_radius_m: float = Field(6_371_007.181, gt=0.0)
    tile_size_m: float = Field(6720.0, gt=0.0)
    radius_m: float = Field(40_000.0, gt=0.0)

    t_neg: int = -5
    t_pos: int = 5

    screening: ScreeningOptions = ScreeningOptions()
    log_zero_policy: LogZeroPolicy = LogZeroPolicy.smooth
    specifications: List[SpecificationEntry] = Field(default_factory=default_specifications)

    describe_outcomes: List[str] = ["log_urban", "log_crop", "wealth_z"]
    bin_width_m: float = Field(5000.0, gt=0.0)
    bin_periods: List[int] = [1, 12]

    synth: SynthConfig = SynthConfig()

    @model_validator(mode="after")
    def check_window(self) -> "RunConfig":
        if not (self.t_neg < 0 < self.t_pos):
            raise ValueError(f"window must satisfy t_neg < 0 < t_pos, got ({self.t_neg}, {self.t_pos})")
        names = [spec.name for spec in self.specifications]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate specification names: {', '.join(duplicates)}")
        return self

    @property
    def calendar(self) -> PeriodCalendar:
        return PeriodCalendar(start_year=self.start_year, period_length=self.period_length, n_periods=self.n_periods)

    @property
    def projection(self) -> ProjectionParams:
        return ProjectionParams(central_meridian_deg=self.central_meridian_deg, sphere_radius_m=self.sphere_radius_m)

    @property
    def window(self) -> Window:
        return Window(t_neg=self.t_neg, t_pos=self.t_pos)

    def resolve_paths(self, base: Path) -> "RunConfig":
        """Anchor relative paths at the config file's directory"""
        updates = {}
        for key in ("deposits", "country_meta", "output_dir", "outcomes", "masks_dir", "tile_measures", "tile_covariates"):
            value = getattr(self, key)
            if value is not None and not value.is_absolute():
                updates[key] = base / value
        return self.model_copy(update=updates)

    def check_inputs(self, keys: Sequence[str]) -> None:
        """Fail with exit code 2 when a referenced input path is missing"""
        for key in keys:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"config key {key!r} is required for this command")
            if not Path(value).exists():
                raise ConfigError(f"{key}: path does not exist: {value}")

    def payload(self) -> dict:
        """Canonical JSON-able form used for the manifest hash"""
        return json.loads(self.model_dump_json())


def _locate(text: str, loc: Tuple[Any, ...]) -> int:
    """Line of the innermost key named in a validation error location"""
    pos = 0
    found = 0
    for part in loc:
        if isinstance(part, int):
            continue
        idx = text.find(f'"{part}"', pos)
        if idx < 0:
            break
        pos = idx + 1
        found = idx
    return text.count("\n", 0, found) + 1


def load_run_config(path: Path) -> RunConfig:
    """Parse and validate a run config, reporting problems as path:line: key: message"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first.get("loc", ()))
        key = ".".join(str(p) for p in loc) or "<root>"
        line = _locate(text, loc) if loc else 1
        raise ConfigError(f"{path}:{line}: {key}: {first.get('msg')}")
    return config.resolve_paths(path.parent)
