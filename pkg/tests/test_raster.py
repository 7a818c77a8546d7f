import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from app.core.errors import DegenerateDataError, InputError, MaskFormatError
from app.schemas.raster import MASK_SIZE, LandClass, LogZeroPolicy, Mask, MaskKind, OutcomeRow
from app.services.raster_service import mask_filename, raster_service

N_PIXELS = MASK_SIZE * MASK_SIZE


def landuse(counts):
    """Landuse mask with the given pixel counts per class, rest 'other'"""
    flat = np.zeros(N_PIXELS, dtype=np.uint8)
    pos = 0
    for cls, n in counts.items():
        flat[pos : pos + n] = int(cls)
        pos += n
    return Mask(kind=MaskKind.landuse, pixels=flat.reshape(MASK_SIZE, MASK_SIZE))


def mine(n):
    flat = np.zeros(N_PIXELS, dtype=np.uint8)
    flat[N_PIXELS - n :] = 1
    return Mask(kind=MaskKind.mine, pixels=flat.reshape(MASK_SIZE, MASK_SIZE))


class TestShares:
    def test_log_share_smoothing(self):
        assert raster_service.log_share(0, N_PIXELS) == pytest.approx(math.log(0.5 / (N_PIXELS + 0.5)))
        assert raster_service.log_share(N_PIXELS, N_PIXELS) == pytest.approx(0.0, abs=1e-12)

    def test_log_share_rejects_impossible_counts(self):
        with pytest.raises(ValueError):
            raster_service.log_share(5, 4)

    def test_shares_without_mine(self):
        shares = raster_service.class_shares(landuse({LandClass.urban: 5018, LandClass.cropland: 10036}))
        assert shares.valid_pixels == N_PIXELS
        assert shares.share(LandClass.urban) == pytest.approx(0.1, abs=1e-4)
        assert shares.share(LandClass.cropland) == pytest.approx(0.2, abs=1e-4)
        assert sum(shares.shares.values()) == pytest.approx(1.0)

    def test_mine_pixels_excluded(self):
        # Mine pixels sit at the end of the raster, over 'other' pixels
        shares = raster_service.class_shares(landuse({LandClass.urban: 1000}), mine(10_000))
        assert shares.valid_pixels == N_PIXELS - 10_000
        assert shares.counts[LandClass.urban] == 1000
        assert shares.share(LandClass.urban) == pytest.approx(1000 / (N_PIXELS - 10_000))

    def test_total_mine_mask(self):
        with pytest.raises(DegenerateDataError):
            raster_service.class_shares(landuse({}), mine(N_PIXELS))

    def test_drop_policy(self):
        assert math.isnan(raster_service.outcome_value(0, 100, LogZeroPolicy.drop))
        assert raster_service.outcome_value(0, 100, LogZeroPolicy.smooth) == pytest.approx(math.log(0.5 / 100.5))
        assert raster_service.outcome_value(10, 100, LogZeroPolicy.drop) == pytest.approx(math.log(10.5 / 100.5))


class TestZscore:
    def test_standardizes(self):
        z = raster_service.zscore([1.0, 2.0, 3.0, np.nan])
        assert z[:3] == pytest.approx([-1.0, 0.0, 1.0])
        assert math.isnan(z[3])

    def test_constant(self):
        with pytest.raises(DegenerateDataError):
            raster_service.zscore([2.0, 2.0, 2.0])

    def test_too_short(self):
        with pytest.raises(DegenerateDataError):
            raster_service.zscore([1.0])


class TestPgm:
    def test_write_then_read(self, tmp_path):
        mask = landuse({LandClass.urban: 7, LandClass.water: 3})
        path = raster_service.write_mask(tmp_path / "m.pgm", mask)
        back = raster_service.read_mask(path)
        assert back.kind == MaskKind.landuse
        assert np.array_equal(back.pixels, mask.pixels)

    def test_header_comment(self, tmp_path):
        path = tmp_path / "x_1_mine.pgm"
        path.write_bytes(f"P5\n# made by hand\n{MASK_SIZE} {MASK_SIZE}\n1\n".encode() + bytes(N_PIXELS))
        back = raster_service.read_mask(path)
        assert back.kind == MaskKind.mine
        assert int(back.pixels.sum()) == 0

    def test_wrong_size(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n10 10\n255\n" + bytes(100))
        with pytest.raises(MaskFormatError, match="10x10"):
            raster_service.read_mask(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(f"P5\n{MASK_SIZE} {MASK_SIZE}\n255\n".encode() + bytes(100))
        with pytest.raises(MaskFormatError, match="pixel bytes"):
            raster_service.read_mask(path)

    def test_not_pgm(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(MaskFormatError):
            raster_service.read_mask(path)

    def test_bad_label_names_pixel(self, tmp_path):
        pixels = bytearray(N_PIXELS)
        pixels[MASK_SIZE * 2 + 5] = 9
        path = tmp_path / "m.pgm"
        path.write_bytes(f"P5\n{MASK_SIZE} {MASK_SIZE}\n255\n".encode() + bytes(pixels))
        with pytest.raises(MaskFormatError, match=r"row 2, col 5"):
            raster_service.read_mask(path)

    def test_mine_mask_label_alphabet(self, tmp_path):
        pixels = bytearray(N_PIXELS)
        pixels[0] = 2
        path = tmp_path / "t_1_mine.pgm"
        path.write_bytes(f"P5\n{MASK_SIZE} {MASK_SIZE}\n255\n".encode() + bytes(pixels))
        with pytest.raises(MaskFormatError, match="mine"):
            raster_service.read_mask(path)


class TestIngest:
    def test_masks_directory(self, tmp_path):
        masks = tmp_path / "masks"
        raster_service.write_mask(masks / mask_filename("x1y2", 3, MaskKind.landuse), landuse({LandClass.urban: 1000}))
        raster_service.write_mask(masks / mask_filename("x1y2", 3, MaskKind.mine), mine(10_000))
        raster_service.write_mask(masks / mask_filename("x1y2", 4, MaskKind.landuse), landuse({LandClass.cropland: 50}))
        measures = tmp_path / "measures.csv"
        pd.DataFrame({"tile_id": ["x1y2", "x1y2"], "period": [3, 4], "wealth": [0.5, 1.5], "conflict_count": [0, 2]}).to_csv(
            measures, index=False
        )
        out = raster_service.ingest_masks(masks, measures)
        assert list(out["period"]) == [3, 4]
        assert out.loc[0, "log_urban"] == pytest.approx(math.log(1000.5 / (N_PIXELS - 10_000 + 0.5)))
        assert out.loc[1, "log_crop"] == pytest.approx(math.log(50.5 / (N_PIXELS + 0.5)))
        assert list(out["wealth"]) == [0.5, 1.5]
        assert int(out.loc[1, "conflict_count"]) == 2

    def test_drop_policy_blanks_zero_classes(self, tmp_path):
        masks = tmp_path / "masks"
        raster_service.write_mask(masks / mask_filename("t", 1, MaskKind.landuse), landuse({LandClass.urban: 10}))
        out = raster_service.ingest_masks(masks, policy=LogZeroPolicy.drop)
        assert not math.isnan(out.loc[0, "log_urban"])
        assert math.isnan(out.loc[0, "log_water"])

    def test_period_zero_mask_rejected(self, tmp_path):
        masks = tmp_path / "masks"
        raster_service.write_mask(masks / mask_filename("t", 0, MaskKind.landuse), landuse({LandClass.urban: 10}))
        with pytest.raises(InputError, match="t_0_landuse"):
            raster_service.ingest_masks(masks)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(InputError):
            raster_service.ingest_masks(tmp_path / "absent")

    def test_outcome_csv_requires_wealth(self, tmp_path):
        path = tmp_path / "o.csv"
        pd.DataFrame({"tile_id": ["a"], "period": [1], "log_urban": [0.1], "log_crop": [0.2]}).to_csv(path, index=False)
        with pytest.raises(InputError, match="wealth"):
            raster_service.ingest_outcomes(path)

    def test_outcome_csv_duplicates(self, tmp_path):
        path = tmp_path / "o.csv"
        pd.DataFrame(
            {"tile_id": ["a", "a"], "period": [1, 1], "log_urban": [0.1, 0.2], "log_crop": [0.2, 0.3], "wealth": [1, 2]}
        ).to_csv(path, index=False)
        with pytest.raises(InputError, match="duplicate"):
            raster_service.ingest_outcomes(path)

    def test_negative_conflict_count(self, tmp_path):
        path = tmp_path / "o.csv"
        pd.DataFrame(
            {"tile_id": ["a"], "period": [1], "log_urban": [0.1], "log_crop": [0.2], "wealth": [1], "conflict_count": [-1]}
        ).to_csv(path, index=False)
        with pytest.raises(InputError, match="non-negative"):
            raster_service.ingest_outcomes(path)


class TestOutcomeRow:
    def test_conflict_any(self):
        assert OutcomeRow(tile_id="a", period=1, conflict_count=0).conflict_any == 0
        assert OutcomeRow(tile_id="a", period=1, conflict_count=3).conflict_any == 1
        assert OutcomeRow(tile_id="a", period=1).conflict_any is None

    def test_rejects_negative_count(self):
        with pytest.raises(ValidationError):
            OutcomeRow(tile_id="a", period=1, conflict_count=-1)

    def test_rejects_infinite_wealth(self):
        with pytest.raises(ValidationError):
            OutcomeRow(tile_id="a", period=1, wealth_z=float("inf"))
