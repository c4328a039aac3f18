"""Run configuration parsing and CSV / SVG artifacts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embdyn import reporting as rep
from embdyn.config import ConfigError, dump_config, load_config, parse_config, rng_stream


class TestConfig:
    def test_defaults_validate(self):
        cfg = parse_config()
        assert cfg.loss.K >= 2 and cfg.run.eval_features == "backbone"

    def test_sections_and_overrides(self):
        cfg = parse_config("[loss]\nK = 4\nlambda_b = 0.5\n", ["loss.lambda_s=0.004", "model.backbone_widths=16,8"])
        assert (cfg.loss.K, cfg.loss.lambda_b, cfg.loss.lambda_s) == (4, 0.5, 0.004)
        assert cfg.model.backbone_widths == (16, 8)
        assert cfg.mlp_spec(3).predictor_out == cfg.model.projector_out

    @pytest.mark.parametrize(
        "text, overrides, match",
        [
            ("[nope]\nx = 1\n", [], "unknown section"),
            ("[loss]\nwhat = 1\n", [], "unknown key"),
            ("", ["loss.K=two"], "cannot parse"),
            ("", ["lossK=2"], "section.key=value"),
            ("", ["loss.K=1"], "K"),
            ("", ["optim.optimizer=adam"], "lars or sgd"),
            ("", ["run.eval_features=predictor"], "eval_features"),
            ("", ["dataset.spread=0"], "spread"),
            ("not a config", [], "syntax"),
        ],
    )
    def test_rejections(self, text, overrides, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text, overrides)

    def test_dump_round_trip(self):
        cfg = parse_config("", ["loss.K=4", "optim.base_lr=0.15", "model.backbone_widths=7,5", "run.seed=3"])
        assert parse_config(dump_config(cfg)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.ini")

    def test_streams_are_independent_and_reproducible(self):
        a = rng_stream(1, "init").standard_normal(4)
        np.testing.assert_array_equal(a, rng_stream(1, "init").standard_normal(4))
        assert not np.array_equal(a, rng_stream(1, "noise").standard_normal(4))
        assert not np.array_equal(a, rng_stream(2, "init").standard_normal(4))


class TestCsv:
    COLS = ("step", "value", "tag")

    def test_header_carries_schema(self):
        text = rep.csv_text(self.COLS, [], "x.v1")
        assert text == "step,value,tag,schema=x.v1\n"

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
    def test_floats_round_trip_exactly(self, values):
        rows = [{"step": i, "value": v, "tag": "a"} for i, v in enumerate(values)]
        cols, back, schema = rep.read_csv_text(rep.csv_text(self.COLS, rows, "x.v1"))
        assert cols == list(self.COLS) and schema == "x.v1"
        assert [float(r["value"]) for r in back] == [float(v) for v in values]

    def test_numpy_scalars(self):
        assert rep.format_value(np.float64(0.1)) == "0.1"
        assert rep.format_value(np.int64(3)) == "3"
        assert rep.format_value(True) == "1"
        assert rep.format_value(None) == ""

    def test_append(self, tmp_path):
        path = tmp_path / "m.csv"
        rep.append_csv(path, self.COLS, [{"step": 1}], "x.v1")
        rep.append_csv(path, self.COLS, [{"step": 2}], "x.v1")
        _, rows, _ = rep.read_csv(path)
        assert [r["step"] for r in rows] == ["1", "2"]
        with pytest.raises(ValueError, match="header"):
            rep.append_csv(path, ("other",), [{"other": 1}], "x.v1")

    def test_missing_schema(self):
        with pytest.raises(ValueError, match="schema"):
            rep.read_csv_text("a,b\n1,2\n")


class TestSvg:
    def test_deterministic_and_well_formed(self):
        a = rep.svg_line_chart([0, 1, 2], [1.0, 0.5, 2.0], "loss")
        assert a == rep.svg_line_chart([0, 1, 2], [1.0, 0.5, 2.0], "loss")
        assert a.startswith("<svg") and a.rstrip().endswith("</svg>") and "polyline" in a

    def test_non_finite_points_skipped(self):
        a = rep.svg_line_chart([0, 1, 2], [1.0, math.nan, 2.0], "y")
        b = rep.svg_line_chart([0, 2], [1.0, 2.0], "y")
        assert a == b

    def test_constant_series(self):
        assert "polyline" in rep.svg_line_chart([0, 1], [3.0, 3.0], "flat")

    def test_from_csv(self):
        text = rep.csv_text(("step", "a", "b"), [{"step": i, "a": i * 0.5, "b": ""} for i in range(4)], "x.v1")
        charts = rep.svgs_from_csv(text, "step", ["a", "b"])
        assert set(charts) == {"a", "b"} and "polyline" not in charts["b"]
        with pytest.raises(ValueError):
            rep.svgs_from_csv(text, "step", ["c"])
