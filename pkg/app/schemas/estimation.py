import math
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator


class Design(str, Enum):
    ordinary = "ordinary"
    stacked = "stacked"


class InteractionMode(str, Enum):
    none = "none"
    near_far = "near_far"


class ConflictSplit(str, Enum):
    pooled = "pooled"
    democracy_autocracy = "democracy_autocracy"


class FESpec(BaseModel):
    """Fixed-effect dimensions; each is a tuple of columns whose combination defines the group"""

    dimensions: List[Tuple[str, ...]] = Field(..., min_length=1)

    @property
    def labels(self) -> List[str]:
        return [" x ".join(dim) for dim in self.dimensions]


STACKED_FE = FESpec(dimensions=[("event_id", "period"), ("event_id", "tile_id")])
ORDINARY_FE = FESpec(dimensions=[("country", "period"), ("tile_id",)])


class HeterogeneitySpec(BaseModel):
    """Interactions of the post-treatment dummy with category dummies.

    Each term is a tuple of category columns; the regressor is
    ``treat_post * prod(columns)``. ``include_main`` adds the plain
    ``treat_post`` term (the omitted-category baseline).
    """

    terms: List[Tuple[str, ...]] = Field(..., min_length=1)
    include_main: bool = True

    @model_validator(mode="after")
    def no_empty_terms(self) -> "HeterogeneitySpec":
        if any(len(term) == 0 for term in self.terms):
            raise ValueError("interaction terms need at least one category")
        return self

    @property
    def term_names(self) -> List[str]:
        names = ["treat_post"] if self.include_main else []
        return names + ["treat_post:" + ":".join(term) for term in self.terms]


NEAR_FAR = HeterogeneitySpec(terms=[("near",), ("far",)], include_main=False)
DEMOCRACY_AUTOCRACY = HeterogeneitySpec(terms=[("democracy",), ("autocracy",)], include_main=False)
SIZE_BY_REGIME = HeterogeneitySpec(terms=[("large",), ("democracy",), ("large", "democracy")])

Interactions = Union[InteractionMode, HeterogeneitySpec]


class RegressionResult(BaseModel):
    terms: List[str]
    beta: List[float]
    se: List[float]
    vcov: List[List[float]]
    ci_low: List[float]
    ci_high: List[float]
    critical_value: float
    df_resid: int
    cluster_dims: List[str]
    n_clusters: Dict[str, int]
    n_obs: int
    k_absorbed: int
    r2_within: Optional[float] = None
    r2_adjusted: Optional[float] = None
    dropped_collinear: List[str] = []
    not_estimable: List[str] = []
    fe_labels: List[str] = []
    baseline_mean: Optional[float] = None
    iterations: int = 0

    def index(self, term: str) -> int:
        return self.terms.index(term)

    def coef(self, term: str) -> float:
        return self.beta[self.index(term)]

    def stderr(self, term: str) -> float:
        return self.se[self.index(term)]

    def tstat(self, term: str) -> float:
        se = self.stderr(term)
        if not se or math.isnan(se):
            return float("nan")
        return self.coef(term) / se

    def significant(self, term: str) -> bool:
        t = self.tstat(term)
        return not math.isnan(t) and abs(t) > self.critical_value


class EventStudyRow(BaseModel):
    rel_time: int
    beta: float
    se: float
    ci_low: float
    ci_high: float


class EventStudyResult(BaseModel):
    rows: List[EventStudyRow]
    regression: RegressionResult

    def beta_at(self, t: int) -> float:
        for row in self.rows:
            if row.rel_time == t:
                return row.beta
        raise KeyError(t)

    def row_at(self, t: int) -> EventStudyRow:
        for row in self.rows:
            if row.rel_time == t:
                return row
        raise KeyError(t)


ESTIMATE_COLUMNS = [
    "spec",
    "outcome",
    "term",
    "beta",
    "se",
    "ci_low",
    "ci_high",
    "n",
    "clusters_mine",
    "clusters_tile",
    "r2_adj",
    "fe",
    "baseline_mean",
]
