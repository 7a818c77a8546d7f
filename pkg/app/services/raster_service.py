import logging
import math
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.deps import parallel_map
from app.core.errors import DegenerateDataError, InputError, MaskFormatError
from app.core.storage import read_csv
from app.schemas.raster import LABELS, MASK_SIZE, ClassShares, LandClass, LogZeroPolicy, Mask, MaskKind, OutcomeRow

logger = logging.getLogger(__name__)

MASK_NAME = re.compile(r"^(?P<tile_id>.+)_(?P<period>\d+)_(?P<kind>landuse|mine)\.pgm$")
SHARE_OUTCOMES = {"log_urban": LandClass.urban, "log_crop": LandClass.cropland, "log_water": LandClass.water}
RAW_OUTCOME_COLUMNS = ["tile_id", "period", "log_urban", "log_crop", "log_water", "wealth", "wealth_z", "conflict_count"]


def mask_filename(tile_id: str, period: int, kind: MaskKind) -> str:
    return f"{tile_id}_{period}_{kind.value}.pgm"


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read whitespace separated header tokens, skipping # comments; returns the data offset"""
    tokens: List[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            break
        tokens.append(data[start:pos])
    # Exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


class RasterService:
    """Segmentation masks, class shares and outcome values"""

    def read_mask(self, path: Union[str, Path], kind: Optional[MaskKind] = None) -> Mask:
        """Parse a binary PGM (P5) mask"""
        path = Path(path)
        if not path.exists():
            raise InputError(f"mask file not found: {path}")
        if kind is None:
            kind = MaskKind.mine if path.name.endswith("_mine.pgm") else MaskKind.landuse
        data = path.read_bytes()
        tokens, offset = _header_tokens(data, 4)
        if len(tokens) < 4 or tokens[0] != b"P5":
            raise MaskFormatError(f"{path}: not a binary PGM (P5) file")
        try:
            width, height, maxval = (int(t) for t in tokens[1:4])
        except ValueError:
            raise MaskFormatError(f"{path}: malformed PGM header")
        if maxval < 1 or maxval > 255:
            raise MaskFormatError(f"{path}: maxval {maxval} not in 1..255")
        if (width, height) != (MASK_SIZE, MASK_SIZE):
            raise MaskFormatError(f"{path}: mask is {width}x{height}, expected {MASK_SIZE}x{MASK_SIZE}")
        raster = data[offset:]
        if len(raster) != width * height:
            raise MaskFormatError(f"{path}: expected {width * height} pixel bytes, found {len(raster)}")
        pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()

        allowed = np.array(sorted(LABELS[kind]), dtype=np.uint8)
        bad = ~np.isin(pixels, allowed)
        if bad.any():
            row, col = (int(v) for v in np.argwhere(bad)[0])
            raise MaskFormatError(
                f"{path}: pixel (row {row}, col {col}) has label {int(pixels[row, col])} outside the {kind.value} alphabet"
            )
        return Mask(kind=kind, pixels=pixels, width=width, height=height)

    def write_mask(self, path: Union[str, Path], mask: Mask) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(mask.pixels, dtype=np.uint8).tobytes())
        return path

    @staticmethod
    def empty_mine_mask(size: int = MASK_SIZE) -> Mask:
        return Mask(kind=MaskKind.mine, pixels=np.zeros((size, size), dtype=np.uint8), width=size, height=size)

    def class_shares(self, landuse: Mask, mine: Optional[Mask] = None) -> ClassShares:
        """Class shares over the pixels the mine mask leaves uncovered"""
        if mine is None:
            mine = self.empty_mine_mask(landuse.width)
        if landuse.pixels.shape != mine.pixels.shape:
            raise MaskFormatError(f"landuse {landuse.pixels.shape} and mine {mine.pixels.shape} masks differ in size")
        valid = landuse.pixels[mine.pixels == 0]
        if valid.size == 0:
            raise DegenerateDataError("mine mask covers every pixel; shares are undefined")
        counts = np.bincount(valid.ravel(), minlength=len(LandClass))
        return ClassShares(
            valid_pixels=int(valid.size),
            counts={c: int(counts[c]) for c in LandClass},
            shares={c: counts[c] / valid.size for c in LandClass},
        )

    @staticmethod
    def log_share(class_pixels: int, valid_pixels: int) -> float:
        """Half-pixel smoothed log share"""
        if valid_pixels < 1 or not 0 <= class_pixels <= valid_pixels:
            raise ValueError(f"need 0 <= class_pixels <= valid_pixels and valid_pixels >= 1, got {class_pixels}/{valid_pixels}")
        return math.log((class_pixels + 0.5) / (valid_pixels + 0.5))

    def outcome_value(self, class_pixels: int, valid_pixels: int, policy: LogZeroPolicy) -> float:
        if policy == LogZeroPolicy.drop and class_pixels == 0:
            return float("nan")
        return self.log_share(class_pixels, valid_pixels)

    @staticmethod
    def zscore(values) -> np.ndarray:
        """Standardize with the sample sd; missing values stay missing"""
        arr = np.asarray(values, dtype=float)
        finite = arr[np.isfinite(arr)]
        if finite.size < 2:
            raise DegenerateDataError("z-score needs at least two values")
        sd = finite.std(ddof=1)
        if sd == 0 or not np.isfinite(sd):
            raise DegenerateDataError("z-score of a constant series is undefined")
        return (arr - finite.mean()) / sd

    # Ingestion

    def _tile_outcomes(self, key: Tuple[str, int], files: Dict[str, Path], policy: LogZeroPolicy) -> Dict[str, object]:
        landuse = self.read_mask(files["landuse"], MaskKind.landuse)
        mine = self.read_mask(files["mine"], MaskKind.mine) if "mine" in files else None
        shares = self.class_shares(landuse, mine)
        values = {column: self.outcome_value(shares.counts[cls], shares.valid_pixels, policy) for column, cls in SHARE_OUTCOMES.items()}
        try:
            row = OutcomeRow(tile_id=key[0], period=key[1], **values)
        except ValidationError as e:
            raise InputError(f"mask {files['landuse'].name}: {e.errors()[0]['msg']}") from e
        return row.model_dump(include={"tile_id", "period", *SHARE_OUTCOMES})

    def ingest_masks(
        self,
        masks_dir: Path,
        tile_measures: Optional[Path] = None,
        policy: LogZeroPolicy = LogZeroPolicy.smooth,
    ) -> pd.DataFrame:
        """Outcome table from a directory of <tile_id>_<period>_{landuse|mine}.pgm files"""
        masks_dir = Path(masks_dir)
        if not masks_dir.is_dir():
            raise InputError(f"mask directory not found: {masks_dir}")
        grouped: Dict[Tuple[str, int], Dict[str, Path]] = {}
        for path in sorted(masks_dir.iterdir()):
            match = MASK_NAME.match(path.name)
            if not match:
                continue
            key = (match.group("tile_id"), int(match.group("period")))
            grouped.setdefault(key, {})[match.group("kind")] = path
        orphans = sorted(k for k, files in grouped.items() if "landuse" not in files)
        if orphans:
            logger.warning("ingest: %d mine mask(s) without a landuse mask ignored", len(orphans))
        keys = sorted(k for k, files in grouped.items() if "landuse" in files)
        rows = parallel_map(lambda k: self._tile_outcomes(k, grouped[k], policy), keys)
        frame = pd.DataFrame(rows, columns=["tile_id", "period", "log_urban", "log_crop", "log_water"])
        logger.info("ingest: %d tile-period mask pairs from %s", len(frame), masks_dir)

        if tile_measures is not None:
            measures = read_csv(tile_measures, required=["tile_id", "period"], dtype={"tile_id": str})
            measures = measures.loc[:, [c for c in ("tile_id", "period", "wealth", "wealth_z", "conflict_count") if c in measures]]
            frame = frame.merge(measures, on=["tile_id", "period"], how="left")
        return self.normalize_outcomes(frame)

    def ingest_outcomes(self, path: Path) -> pd.DataFrame:
        """Outcome table from a CSV of precomputed values"""
        frame = read_csv(path, required=["tile_id", "period", "log_urban", "log_crop"], dtype={"tile_id": str})
        if "wealth" not in frame.columns and "wealth_z" not in frame.columns:
            raise InputError(f"{path}: needs a wealth or wealth_z column")
        return self.normalize_outcomes(frame)

    @staticmethod
    def normalize_outcomes(frame: pd.DataFrame) -> pd.DataFrame:
        out = frame.copy()
        for column in RAW_OUTCOME_COLUMNS:
            if column not in out.columns:
                out[column] = np.nan
        out["tile_id"] = out["tile_id"].astype(str)
        out["period"] = pd.to_numeric(out["period"], errors="raise").astype(int)
        counts = pd.to_numeric(out["conflict_count"], errors="coerce")
        if (counts.dropna() < 0).any():
            raise InputError("conflict_count must be non-negative")
        out["conflict_count"] = counts.astype("Int64")
        duplicated = out.duplicated(["tile_id", "period"])
        if duplicated.any():
            first = out.loc[duplicated].iloc[0]
            raise InputError(f"duplicate outcome row for tile {first['tile_id']} period {first['period']}")
        return out.loc[:, RAW_OUTCOME_COLUMNS].sort_values(["tile_id", "period"], kind="mergesort").reset_index(drop=True)


raster_service = RasterService()
