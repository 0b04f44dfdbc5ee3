"""Run configuration: parsing, validation naming the offending key, and round trips."""
import pytest

from pyrasal.config import ConfigError, RunConfig
from pyrasal.model import AblationMode


class TestParsing:
    def test_defaults_validate(self):
        cfg = RunConfig()
        cfg.validate()
        tc = cfg.train_config()
        assert tc.mode is AblationMode.RGB_ONLY
        assert tc.model.encoder.d_feat == 256
        assert (tc.loss.weights.st, tc.loss.weights.ssim, tc.loss.weights.l2, tc.loss.weights.se) == (
            0.2, 0.3, 0.2, 0.3)
        assert (tc.optim.lr, tc.optim.batch) == (5e-5, 6)

    def test_comments_blank_lines_and_types(self):
        cfg = RunConfig.from_text("""
            # a comment
            mode = m3_no_pyramid
            daspp_rates = 1, 2   # trailing comment
            depth_frozen = true
            max_steps = none
            lr = 1e-3
        """)
        assert cfg.mode == "m3_no_pyramid" and cfg.daspp_rates == (1, 2)
        assert cfg.depth_frozen is True and cfg.max_steps is None and cfg.lr == 1e-3

    def test_round_trip(self):
        cfg = RunConfig.from_text("seed = 7\nmax_steps = 40\ndaspp_rates = 1,3\nmode = m2_estimated_depth\n")
        again = RunConfig.from_text(cfg.to_text())
        assert again == cfg

    def test_from_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("batch = 4\n")
        assert RunConfig.from_file(p).batch == 4

    def test_missing_file_names_flag(self, tmp_path):
        with pytest.raises(ConfigError) as e:
            RunConfig.from_file(tmp_path / "nope.cfg")
        assert e.value.key == "--config"


class TestErrors:
    @pytest.mark.parametrize("text,key", [
        ("colour = red", "colour"),
        ("lr = fast", "lr"),
        ("depth_frozen = maybe", "depth_frozen"),
        ("mode = m9", "mode"),
        ("lr = -1", "lr"),
        ("epochs = 0", "epochs"),
        ("input_h = 50", "input_h"),
        ("transformer_stage_taps = 3,9", "transformer_stage_taps"),
        ("eps_st = -0.1", "eps_st"),
        ("l2_mode = cubic", "l2_mode"),
        ("f_reduce = median", "f_reduce"),
        ("just words", "just words"),
    ])
    def test_error_names_key(self, text, key):
        with pytest.raises(ConfigError) as e:
            RunConfig.from_text(text)
        assert e.value.key == key
        assert repr(key) in str(e.value)
